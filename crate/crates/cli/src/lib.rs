//! The `mdp` command line: dataset generation, training and benchmarking.

pub mod args;
pub mod bench;
pub mod error;
pub mod gen;
pub mod train;

pub use args::Cli;
pub use error::CliError;

use args::Command;

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenDataset(a) => gen::gen_dataset(a),
        Command::Train(a) => train::train_command(a),
        Command::Bench(a) => {
            let report = bench::bench_command(a)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}
