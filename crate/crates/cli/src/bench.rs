use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};

use mdp_core::comm::{run_in_process, run_tcp_loopback, Communicator};
use mdp_core::dataset::synth::{blobs, BlobSpec};
use mdp_core::distrib::{permutation, Shuffle};
use mdp_core::models::MlpClassifier;
use mdp_core::optim::Optimizer;
use mdp_core::trainer::{train, DataSource, Timing, TrainConfig};
use mdp_core::{Element, MultiNodeOptimizer};

use crate::args::{BackendArg, BenchArgs, Precision, Scaling};
use crate::error::{on_rank, CliError};

pub const CSV_HEADER: &str =
    "workers,local_batch,effective_batch,mean_iter_ms,mean_compute_ms,mean_comm_ms,time_ms,speedup,efficiency,flagged";

/// `T(1) / T(n)`.
pub fn speedup(t1: f64, tn: f64) -> f64 {
    t1 / tn
}

/// `S(n) / n`, as a fraction.
pub fn efficiency(speedup: f64, workers: usize) -> f64 {
    speedup / workers as f64
}

/// A fraction as a percentage with two decimals, e.g. `88.34%`.
pub fn percent(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

/// Raw timing for one worker count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub workers: usize,
    pub local_batch: usize,
    pub timing: Timing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub workers: usize,
    pub local_batch: usize,
    pub effective_batch: usize,
    pub mean_iter_ms: f64,
    pub mean_compute_ms: f64,
    pub mean_comm_ms: f64,
    /// Time to push the fixed workload through at this worker count.
    pub time_ms: f64,
    pub speedup: f64,
    pub efficiency: f64,
    /// More workers than cores; the efficiency says little.
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    /// Samples in the fixed workload each `time_ms` refers to.
    pub workload: usize,
    pub cores: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// Builds the report from measurements whose first entry is the
    /// single-worker baseline.
    pub fn from_measurements(meas: &[Measurement], cores: usize) -> Result<Self, CliError> {
        match meas.first() {
            Some(m) if m.workers == 1 => {}
            _ => {
                return Err(CliError::Usage(
                    "the first measurement must be for 1 worker".into(),
                ))
            }
        }
        let workload = meas
            .iter()
            .map(|m| m.local_batch * m.workers)
            .max()
            .unwrap_or(0);
        let mut rows: Vec<BenchRow> = Vec::with_capacity(meas.len());
        for m in meas {
            let effective_batch = m.local_batch * m.workers;
            let time_ms = m.timing.wall_ms * workload as f64 / effective_batch as f64;
            let t1 = rows.first().map_or(time_ms, |r| r.time_ms);
            let s = speedup(t1, time_ms);
            rows.push(BenchRow {
                workers: m.workers,
                local_batch: m.local_batch,
                effective_batch,
                mean_iter_ms: m.timing.wall_ms,
                mean_compute_ms: m.timing.compute_ms,
                mean_comm_ms: m.timing.comm_ms,
                time_ms,
                speedup: s,
                efficiency: efficiency(s, m.workers),
                flagged: m.workers > cores,
            });
        }
        Ok(BenchReport {
            workload,
            cores,
            rows,
        })
    }

    pub fn table(&self) -> String {
        let mut t = String::new();
        let _ = writeln!(
            t,
            "{:>8} | {:>8} | {:>9} | {:>10} | {:>11} | {:>10} | {:>10}",
            "#Workers", "Speed-up", "Par. Eff.", "Eff. batch", "Iter ms", "Compute ms", "Comm ms"
        );
        let _ = writeln!(t, "{}", "-".repeat(88));
        for r in &self.rows {
            let _ = writeln!(
                t,
                "{:>8} | {:>8.2} | {:>9} | {:>10} | {:>11.3} | {:>10.3} | {:>10.3}{}",
                r.workers,
                r.speedup,
                percent(r.efficiency),
                r.effective_batch,
                r.mean_iter_ms,
                r.mean_compute_ms,
                r.mean_comm_ms,
                if r.flagged { " *" } else { "" }
            );
        }
        if self.rows.iter().any(|r| r.flagged) {
            let _ = writeln!(t, "* more workers than the {} available cores", self.cores);
        }
        t
    }

    /// Floats are written in shortest round-trip form, so the speed-up and
    /// efficiency columns can be recomputed bit for bit from `time_ms`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.workers,
                r.local_batch,
                r.effective_batch,
                r.mean_iter_ms,
                r.mean_compute_ms,
                r.mean_comm_ms,
                r.time_ms,
                r.speedup,
                r.efficiency,
                r.flagged
            )?;
        }
        Ok(())
    }
}

pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn validate(args: &BenchArgs) -> Result<(), CliError> {
    let list = &args.workers_list;
    if list.first() != Some(&1) {
        return Err(CliError::Usage("--workers-list must start at 1".into()));
    }
    if list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Usage(
            "--workers-list must be strictly ascending".into(),
        ));
    }
    if args.batch_size == 0 || args.iterations == 0 || args.hidden == 0 || args.dims == 0 {
        return Err(CliError::Usage(
            "--batch-size, --iterations, --hidden and --dims must be positive".into(),
        ));
    }
    if args.classes < 2 {
        return Err(CliError::Usage("--classes must be at least 2".into()));
    }
    Ok(())
}

fn local_batch(args: &BenchArgs, workers: usize) -> Result<usize, CliError> {
    match args.scaling {
        Scaling::Weak => Ok(args.batch_size),
        Scaling::Strong => match args.batch_size / workers {
            0 => Err(CliError::Usage(format!(
                "strong scaling cannot split a batch of {} over {workers} workers",
                args.batch_size
            ))),
            b => Ok(b),
        },
    }
}

/// Runs the benchmark for every worker count and builds the report.
pub fn run_bench(args: &BenchArgs) -> Result<BenchReport, CliError> {
    validate(args)?;
    let mut meas = Vec::with_capacity(args.workers_list.len());
    for &n in &args.workers_list {
        let b = local_batch(args, n)?;
        let timing = match args.precision {
            Precision::F32 => measure::<f32>(args, n, b)?,
            Precision::F64 => measure::<f64>(args, n, b)?,
        };
        meas.push(Measurement {
            workers: n,
            local_batch: b,
            timing,
        });
    }
    BenchReport::from_measurements(&meas, available_cores())
}

pub fn bench_command(args: &BenchArgs) -> Result<BenchReport, CliError> {
    let cores = available_cores();
    let max_n = args.workers_list.iter().copied().max().unwrap_or(1);
    if cores < max_n {
        eprintln!("warning: {cores} cores for up to {max_n} workers; flagged efficiencies are not meaningful");
    }
    let report = run_bench(args)?;
    if let Some(path) = &args.csv {
        let mut w = BufWriter::new(File::create(path)?);
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(report)
}

fn measure<T: Element>(args: &BenchArgs, workers: usize, batch: usize) -> Result<Timing, CliError> {
    let body = |comm: Communicator| {
        let rank = comm.rank();
        bench_rank::<T>(comm, args, batch).map_err(|e| on_rank(rank, e))
    };
    let results = match args.backend {
        BackendArg::Inproc => run_in_process(workers, body)?,
        BackendArg::Tcp => run_tcp_loopback(workers, body)?,
    };
    let timings = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    // Identical on every rank after the max-reduction.
    Ok(timings[0])
}

fn bench_rank<T: Element>(
    comm: Communicator,
    args: &BenchArgs,
    batch: usize,
) -> mdp_core::Result<Timing> {
    let rank = comm.rank();
    let rows = batch * (args.warmup + args.iterations);
    let per_class = rows.div_ceil(args.classes);
    let all = blobs(&BlobSpec::new(
        args.classes,
        args.dims,
        per_class,
        args.seed.wrapping_add(rank as u64),
    ))?;
    let order = permutation(
        all.len(),
        Shuffle::Seeded {
            seed: args.seed,
            epoch: rank as u64,
        },
    );
    let shard = all.select(&order[..rows]);

    let model = MlpClassifier::<T>::new(args.dims, args.hidden, args.classes, args.seed)?;
    let mut mno = MultiNodeOptimizer::new(Optimizer::<T>::sgd(0.01), comm);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: batch,
        seed: args.seed,
        shuffle: false,
        warmup: args.warmup,
    };
    let metrics = train(&model, &mut mno, DataSource::Local(&shard), &cfg)?;
    Ok(metrics.mean_timing())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(workers: usize, local_batch: usize, wall_ms: f64) -> Measurement {
        Measurement {
            workers,
            local_batch,
            timing: Timing {
                wall_ms,
                ..Timing::default()
            },
        }
    }

    #[test]
    fn single_worker_row_is_the_baseline() {
        let r = BenchReport::from_measurements(&[m(1, 32, 40.0)], 1).unwrap();
        assert_eq!(r.rows[0].speedup, 1.0);
        assert_eq!(percent(r.rows[0].efficiency), "100.00%");
    }

    #[test]
    fn weak_scaling_time_is_per_fixed_workload() {
        // Same iteration time with 4x the samples per step is a 4x speed-up.
        let r =
            BenchReport::from_measurements(&[m(1, 32, 10.0), m(2, 32, 10.0), m(4, 32, 10.0)], 4)
                .unwrap();
        assert_eq!(r.workload, 128);
        assert_eq!(
            r.rows.iter().map(|r| r.speedup).collect::<Vec<_>>(),
            vec![1.0, 2.0, 4.0]
        );
        assert_eq!(r.rows[2].efficiency, 1.0);
        assert_eq!(r.rows[2].effective_batch, 128);
        assert!(!r.rows.iter().any(|r| r.flagged));
    }

    #[test]
    fn effective_batch_at_128_workers() {
        let meas: Vec<_> = [1, 128].iter().map(|&n| m(n, 32, 1.0)).collect();
        let r = BenchReport::from_measurements(&meas, 1).unwrap();
        assert_eq!(r.rows[1].effective_batch, 4096);
        assert!(r.rows[1].flagged);
    }

    #[test]
    fn hundred_seconds_against_four_workers() {
        let s = speedup(100.0, 28.33);
        assert_eq!(format!("{s:.2}"), "3.53");
        assert_eq!(percent(efficiency(s, 4)), "88.25%");
        let s = speedup(100.0, 28.30);
        assert_eq!(format!("{s:.2}"), "3.53");
        assert_eq!(percent(efficiency(s, 4)), "88.34%");
    }

    #[test]
    fn workers_list_must_start_at_one_and_ascend() {
        for bad in [vec![2, 4], vec![1, 4, 2], vec![1, 1], vec![]] {
            let a = BenchArgs {
                workers_list: bad,
                ..BenchArgs::default()
            };
            assert!(matches!(validate(&a), Err(CliError::Usage(_))));
        }
    }

    #[test]
    fn strong_scaling_splits_the_batch() {
        let a = BenchArgs {
            scaling: Scaling::Strong,
            batch_size: 32,
            ..BenchArgs::default()
        };
        assert_eq!(local_batch(&a, 4).unwrap(), 8);
        assert!(local_batch(&a, 64).is_err());
    }
}
