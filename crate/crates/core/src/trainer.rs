//! The training loop: forward, backward, allreduce, optimize.

use std::io::Write;
use std::time::{Duration, Instant};

use crate::autograd::{no_grad, ops};
use crate::comm::{Communicator, ReduceOp};
use crate::dataset::Dataset;
use crate::distrib::{scatter_dataset, MultiNodeOptimizer, Shuffle};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::models::MlpClassifier;

pub const METRICS_HEADER: &str = "epoch,iteration,wall_ms,loss,accuracy,effective_batch";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Per-rank minibatch size `b`.
    pub batch_size: usize,
    pub seed: u64,
    /// Re-draw the item order every epoch from `(seed, epoch)`.
    pub shuffle: bool,
    /// Iterations to leave out of [`RunMetrics::mean_timing`].
    pub warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            warmup: 0,
        }
    }
}

/// Where each rank's training examples come from.
pub enum DataSource<'a> {
    /// A shard already resident on this rank, used as-is every epoch.
    Local(&'a Dataset),
    /// The full dataset on rank 0 (`None` elsewhere), scattered at the start
    /// of every epoch.
    Scatter(Option<&'a Dataset>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    /// Counts from 1 across the whole run.
    pub iteration: usize,
    /// Slowest rank's time for this iteration.
    pub wall_ms: f64,
    pub compute_ms: f64,
    pub comm_ms: f64,
    /// Averaged over ranks, so this is the mean loss of the combined batch.
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub world_size: usize,
    pub local_batch: usize,
    pub effective_batch: usize,
    pub shard_sizes: Vec<usize>,
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub warmup: usize,
}

/// Mean per-iteration times in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub wall_ms: f64,
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub samples: usize,
}

impl RunMetrics {
    /// Mean timing over iterations after the warmup.
    pub fn mean_timing(&self) -> Timing {
        let rest = &self.iterations[self.warmup.min(self.iterations.len())..];
        if rest.is_empty() {
            return Timing::default();
        }
        let n = rest.len() as f64;
        Timing {
            wall_ms: rest.iter().map(|r| r.wall_ms).sum::<f64>() / n,
            compute_ms: rest.iter().map(|r| r.compute_ms).sum::<f64>() / n,
            comm_ms: rest.iter().map(|r| r.comm_ms).sum::<f64>() / n,
            samples: rest.len(),
        }
    }

    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{:.3},{:.17e},{:.17e},{}",
                r.epoch, r.iteration, r.wall_ms, r.loss, r.accuracy, self.effective_batch
            )?;
        }
        Ok(())
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Trains `model` for `config.epochs` epochs. Parameters are first copied
/// from rank 0. Every rank runs the same number of iterations per epoch: the
/// smallest `floor(shard / b)` over ranks, dropping trailing partial batches.
pub fn train<T: Element>(
    model: &MlpClassifier<T>,
    mno: &mut MultiNodeOptimizer<T>,
    data: DataSource<'_>,
    config: &TrainConfig,
) -> Result<RunMetrics> {
    train_with(model, mno, data, config, |_, _| {})
}

/// [`train`] with a callback after every update. The record's timing
/// fields are still zero at that point; they are filled in at the end.
pub fn train_with<T: Element>(
    model: &MlpClassifier<T>,
    mno: &mut MultiNodeOptimizer<T>,
    data: DataSource<'_>,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationRecord, &MlpClassifier<T>),
) -> Result<RunMetrics> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let params = model.parameters();
    mno.broadcast_parameters(&params)?;

    let size = mno.comm().size();
    let mut metrics = RunMetrics {
        world_size: size,
        local_batch: config.batch_size,
        effective_batch: config.batch_size * size,
        warmup: config.warmup,
        ..RunMetrics::default()
    };
    let mut scattered: Option<Dataset> = None;
    // [wall, compute, comm] per iteration, maxed over ranks at the end.
    let mut times: Vec<f64> = Vec::new();

    for epoch in 0..config.epochs {
        let shard = match data {
            DataSource::Local(ds) => ds,
            DataSource::Scatter(root) => {
                if scattered.is_none() || config.shuffle {
                    let shuffle = if config.shuffle {
                        Shuffle::Seeded {
                            seed: config.seed,
                            epoch: epoch as u64,
                        }
                    } else {
                        Shuffle::Off
                    };
                    scattered = Some(scatter_dataset(root, mno.comm_mut(), shuffle)?);
                }
                scattered.as_ref().unwrap()
            }
        };
        if epoch == 0 {
            metrics.shard_sizes = gather_sizes(mno.comm_mut(), shard.len())?;
        }

        let mut local_iters = [(shard.len() / config.batch_size) as f64];
        mno.comm_mut().allreduce(&mut local_iters, ReduceOp::Min)?;
        let iters = local_iters[0] as usize;
        if iters == 0 {
            return Err(Error::Config(format!(
                "a shard of {} examples holds no full batch of {}",
                metrics.shard_sizes.iter().min().copied().unwrap_or(0),
                config.batch_size
            )));
        }

        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for k in 0..iters {
            let start = Instant::now();
            ops::zero_grads(&params);
            let step = || -> Result<_> {
                let (x, labels) =
                    shard.batch::<T>(k * config.batch_size..(k + 1) * config.batch_size)?;
                let (loss, acc) = model.loss_and_accuracy(&x, &labels)?;
                loss.backward()?;
                Ok((loss, acc))
            };
            // The other ranks are about to block in the allreduce.
            let (loss, acc) = step().inspect_err(|e| mno.comm_mut().abort(&e.to_string()))?;
            let compute = start.elapsed();

            let mut extras = [loss.item(), T::from_f64(acc)];
            mno.update_with(&params, &mut extras)?;
            let wall = start.elapsed();

            let (loss, acc) = (Element::to_f64(extras[0]), Element::to_f64(extras[1]));
            loss_sum += loss;
            acc_sum += acc;
            times.extend_from_slice(&[ms(wall), ms(compute), ms(mno.last_comm_time())]);
            metrics.iterations.push(IterationRecord {
                epoch,
                iteration: metrics.iterations.len() + 1,
                wall_ms: 0.0,
                compute_ms: 0.0,
                comm_ms: 0.0,
                loss,
                accuracy: acc,
            });
            on_iteration(metrics.iterations.last().unwrap(), model);
        }
        metrics.epochs.push(EpochRecord {
            epoch,
            iterations: iters,
            mean_loss: loss_sum / iters as f64,
            train_accuracy: acc_sum / iters as f64,
        });
    }

    if size > 1 {
        mno.comm_mut().allreduce(&mut times, ReduceOp::Max)?;
    }
    for (rec, t) in metrics.iterations.iter_mut().zip(times.chunks_exact(3)) {
        rec.wall_ms = t[0];
        rec.compute_ms = t[1];
        rec.comm_ms = t[2];
    }
    Ok(metrics)
}

fn gather_sizes(comm: &mut Communicator, len: usize) -> Result<Vec<usize>> {
    let mut sizes = vec![0.0f64; comm.size()];
    sizes[comm.rank()] = len as f64;
    comm.allreduce(&mut sizes, ReduceOp::Sum)?;
    Ok(sizes.into_iter().map(|s| s as usize).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// Each rank evaluates its own shard; sums are allreduced.
    #[default]
    Sharded,
    /// Rank 0 evaluates the whole set and broadcasts the result.
    Replicated,
}

const EVAL_CHUNK: usize = 1024;

/// `(loss sum, correct count, rows)` over a dataset, without recording a tape.
fn local_eval<T: Element>(model: &MlpClassifier<T>, ds: &Dataset) -> Result<[f64; 3]> {
    no_grad(|| {
        let mut acc = [0.0, 0.0, ds.len() as f64];
        let mut start = 0;
        while start < ds.len() {
            let end = (start + EVAL_CHUNK).min(ds.len());
            let (x, labels) = ds.batch::<T>(start..end)?;
            let (loss, a) = model.loss_and_accuracy(&x, &labels)?;
            let rows = (end - start) as f64;
            acc[0] += Element::to_f64(loss.item()) * rows;
            acc[1] += (a * rows).round();
            start = end;
        }
        Ok(acc)
    })
}

/// Mean loss and accuracy over an evaluation set spread across ranks
/// (sharded) or held by rank 0 (replicated). Every rank gets the result.
pub fn evaluate<T: Element>(
    model: &MlpClassifier<T>,
    data: &Dataset,
    comm: &mut Communicator,
    mode: EvalMode,
) -> Result<(f64, f64)> {
    let mut totals = match mode {
        EvalMode::Sharded => {
            let mut t = local_eval(model, data).inspect_err(|e| comm.abort(&e.to_string()))?;
            comm.allreduce(&mut t, ReduceOp::Sum)?;
            t
        }
        EvalMode::Replicated => {
            let mut t = [0.0; 3];
            if comm.rank() == 0 {
                t = local_eval(model, data).inspect_err(|e| comm.abort(&e.to_string()))?;
            }
            comm.broadcast(&mut t, 0)?;
            t
        }
    };
    if totals[2] == 0.0 {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let n = totals[2];
    totals[0] /= n;
    totals[1] /= n;
    Ok((totals[0], totals[1]))
}
