use clap::Parser;
use mdp_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("mdp: {e}");
        std::process::exit(e.exit_code());
    }
}
