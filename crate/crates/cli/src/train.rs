use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::process::{Child, Command, ExitStatus};
use std::thread;
use std::time::Duration;

use mdp_core::comm::{run_in_process, Communicator, TcpConfig};
use mdp_core::models::MlpClassifier;
use mdp_core::optim::Optimizer;
use mdp_core::trainer::{evaluate, train, DataSource, EvalMode, TrainConfig};
use mdp_core::{Dataset, Element, MultiNodeOptimizer};

use crate::args::{BackendArg, OptimizerArg, Precision, TrainArgs};
use crate::error::{on_rank, CliError};

pub fn train_command(args: &TrainArgs) -> Result<(), CliError> {
    if !(args.timeout_secs > 0.0 && args.timeout_secs.is_finite()) {
        return Err(CliError::Usage(
            "--timeout-secs must be a positive number".into(),
        ));
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(CliError::Usage("--lr must be a positive number".into()));
    }
    match (args.backend, args.rank) {
        (BackendArg::Inproc, Some(_)) => Err(CliError::Usage(
            "--rank only applies to --backend tcp".into(),
        )),
        (BackendArg::Inproc, None) => {
            require_dataset(args)?;
            let results = run_in_process(args.workers as usize, |comm| worker(comm, args))?;
            first_failure(results)
        }
        (BackendArg::Tcp, None) => {
            require_dataset(args)?;
            launch(args)
        }
        (BackendArg::Tcp, Some(rank)) => {
            let rank = rank as usize;
            let Some(rendezvous) = &args.rendezvous else {
                return Err(CliError::Usage(
                    "tcp workers need --rendezvous or MDP_RENDEZVOUS".into(),
                ));
            };
            if rank >= args.workers as usize {
                return Err(CliError::Usage(format!(
                    "--rank {rank} is outside a world of {}",
                    args.workers
                )));
            }
            let cfg = TcpConfig::new(rank, args.workers as usize, rendezvous.clone())
                .with_timeout(Duration::from_secs_f64(args.timeout_secs));
            let comm = Communicator::tcp(&cfg).map_err(|e| on_rank(rank, e))?;
            worker(comm, args)
        }
    }
}

fn require_dataset(args: &TrainArgs) -> Result<(), CliError> {
    if args.dataset.is_none() {
        return Err(CliError::Usage("--dataset is required".into()));
    }
    Ok(())
}

fn first_failure(results: Vec<Result<(), CliError>>) -> Result<(), CliError> {
    results.into_iter().collect()
}

fn worker(comm: Communicator, args: &TrainArgs) -> Result<(), CliError> {
    let rank = comm.rank();
    let out = match args.precision {
        Precision::F32 => worker_body::<f32>(comm, args),
        Precision::F64 => worker_body::<f64>(comm, args),
    };
    out.map_err(|e| on_rank(rank, e))
}

fn worker_body<T: Element>(mut comm: Communicator, args: &TrainArgs) -> Result<(), CliError> {
    let root = comm.rank() == 0;
    let data = if root {
        let loaded = match &args.dataset {
            Some(path) => {
                Dataset::load(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
            }
            None => Err(CliError::Usage("rank 0 needs --dataset".into())),
        };
        Some(loaded.inspect_err(|e| comm.abort(&e.to_string()))?)
    } else {
        None
    };

    let mut shape = match &data {
        Some(d) => [d.dims() as f64, d.n_classes() as f64],
        None => [0.0; 2],
    };
    comm.broadcast(&mut shape, 0)?;
    let (dims, classes) = (shape[0] as usize, shape[1] as usize);
    let hidden = args.hidden as usize;
    let model = if root {
        MlpClassifier::<T>::new(dims, hidden, classes, args.seed)?
    } else {
        MlpClassifier::<T>::zeros(dims, hidden, classes)?
    };

    let opt = match args.optimizer {
        OptimizerArg::Sgd => Optimizer::<T>::sgd(args.lr),
        OptimizerArg::Adam => Optimizer::<T>::adam(args.lr),
    };
    let mut mno = MultiNodeOptimizer::new(opt, comm);
    let cfg = TrainConfig {
        epochs: args.epochs as usize,
        batch_size: args.batch_size as usize,
        seed: args.seed,
        shuffle: !args.no_shuffle,
        warmup: 0,
    };
    let metrics = train(&model, &mut mno, DataSource::Scatter(data.as_ref()), &cfg)?;

    let placeholder;
    let eval_set = match &data {
        Some(d) => d,
        None => {
            placeholder = Dataset::new(Vec::new(), Vec::new(), dims, classes)?;
            &placeholder
        }
    };
    let (loss, acc) = if args.epochs > 0 {
        evaluate(&model, eval_set, mno.comm_mut(), EvalMode::Replicated)?
    } else {
        (f64::NAN, f64::NAN)
    };

    if root {
        if args.epochs > 0 {
            eprintln!(
                "{} workers, shards {:?}, effective batch {}",
                metrics.world_size, metrics.shard_sizes, metrics.effective_batch
            );
        }
        for e in &metrics.epochs {
            eprintln!(
                "epoch {}: {} iterations, mean loss {:.6}, train accuracy {:.4}",
                e.epoch + 1,
                e.iterations,
                e.mean_loss,
                e.train_accuracy
            );
        }
        if args.epochs > 0 {
            eprintln!("final: loss {loss:.6}, accuracy {acc:.4}");
        }
        let mut w = BufWriter::new(File::create(&args.out)?);
        metrics.write_csv(&mut w)?;
        w.flush()?;
        model.checkpoint().save(args.checkpoint_path())?;
    }
    Ok(())
}

/// Kills any worker still running when dropped.
struct Workers(Vec<Child>);

impl Drop for Workers {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if let Ok(None) = c.try_wait() {
                let _ = c.kill();
            }
            let _ = c.wait();
        }
    }
}

/// Spawns one process per rank on loopback and waits for all of them.
fn launch(args: &TrainArgs) -> Result<(), CliError> {
    let rendezvous = match &args.rendezvous {
        Some(r) => r.clone(),
        None => {
            let port = TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
            format!("127.0.0.1:{port}")
        }
    };
    let exe = std::env::current_exe()?;
    let mut workers = Workers(Vec::with_capacity(args.workers as usize));
    for rank in 0..args.workers as usize {
        let child = Command::new(&exe)
            .args(args.worker_args(rank, &rendezvous))
            .env_remove("MDP_RANK")
            .env_remove("MDP_WORLD_SIZE")
            .env_remove("MDP_RENDEZVOUS")
            .env_remove("MDP_TIMEOUT_SECS")
            .spawn()
            .map_err(|e| CliError::Run(format!("spawning rank {rank}: {e}")))?;
        workers.0.push(child);
    }

    let mut status: Vec<Option<ExitStatus>> = vec![None; workers.0.len()];
    loop {
        for (rank, c) in workers.0.iter_mut().enumerate() {
            if status[rank].is_none() {
                status[rank] = c.try_wait()?;
                if let Some(s) = status[rank].filter(|s| !s.success()) {
                    // Dropping the guard takes the rest down.
                    return Err(CliError::Run(format!("rank {rank} failed ({s})")));
                }
            }
        }
        if status.iter().all(Option::is_some) {
            return Ok(());
        }
        thread::sleep(Duration::from_millis(20));
    }
}
