//! Gradient averaging around an optimizer, and dataset scattering.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tensor;
use crate::comm::Communicator;
use crate::dataset::Dataset;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::optim::Optimizer;

/// Wraps an optimizer so that every step first replaces each rank's local
/// gradients with the average over all ranks.
pub struct MultiNodeOptimizer<T: Element = f64> {
    inner: Optimizer<T>,
    comm: Communicator,
    flat: Vec<T>,
    param_len: Option<usize>,
    last_comm: Duration,
}

pub fn create_multi_node_optimizer<T: Element>(
    inner: Optimizer<T>,
    comm: Communicator,
) -> MultiNodeOptimizer<T> {
    MultiNodeOptimizer::new(inner, comm)
}

impl<T: Element> MultiNodeOptimizer<T> {
    pub fn new(inner: Optimizer<T>, comm: Communicator) -> Self {
        MultiNodeOptimizer {
            inner,
            comm,
            flat: Vec::new(),
            param_len: None,
            last_comm: Duration::ZERO,
        }
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn comm_mut(&mut self) -> &mut Communicator {
        &mut self.comm
    }

    pub fn inner(&self) -> &Optimizer<T> {
        &self.inner
    }

    pub fn into_parts(self) -> (Optimizer<T>, Communicator) {
        (self.inner, self.comm)
    }

    /// Time spent inside the allreduce of the most recent update.
    pub fn last_comm_time(&self) -> Duration {
        self.last_comm
    }

    /// Copies rank 0's parameter values to every rank.
    pub fn broadcast_parameters(&mut self, params: &[Tensor<T>]) -> Result<()> {
        let mut flat: Vec<T> = Vec::with_capacity(params.iter().map(Tensor::len).sum());
        for p in params {
            flat.extend_from_slice(&p.data());
        }
        self.comm.broadcast(&mut flat, 0)?;
        let mut offset = 0;
        for p in params {
            p.set_data(&flat[offset..offset + p.len()])?;
            offset += p.len();
        }
        Ok(())
    }

    /// Averages gradients across ranks, then applies the inner optimizer.
    pub fn update(&mut self, params: &[Tensor<T>]) -> Result<()> {
        self.update_with(params, &mut [])
    }

    /// Like [`update`](Self::update), but `extras` ride along in the same
    /// allreduce and come back averaged. Every rank must pass the same number.
    pub fn update_with(&mut self, params: &[Tensor<T>], extras: &mut [T]) -> Result<()> {
        if let Err(e) = self.pack(params, extras) {
            self.comm.abort(&e.to_string());
            return Err(e);
        }
        let start = Instant::now();
        self.comm.allreduce_average(&mut self.flat)?;
        self.last_comm = start.elapsed();

        let mut offset = 0;
        for p in params {
            p.set_grad(&self.flat[offset..offset + p.len()])?;
            offset += p.len();
        }
        extras.copy_from_slice(&self.flat[offset..]);
        self.inner.step(params)
    }

    fn pack(&mut self, params: &[Tensor<T>], extras: &[T]) -> Result<()> {
        let total: usize = params.iter().map(Tensor::len).sum();
        match self.param_len {
            Some(n) if n != total => {
                return Err(Error::contract(format!(
                    "parameter list has {total} elements, the gradient buffer was laid out for {n}"
                )))
            }
            _ => self.param_len = Some(total),
        }
        self.flat.clear();
        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_ref();
            let g = grad.as_ref().ok_or_else(|| {
                Error::contract(format!(
                    "parameter {} (#{i}) has no gradient",
                    p.name().unwrap_or("<unnamed>")
                ))
            })?;
            self.flat.extend_from_slice(g);
        }
        self.flat.extend_from_slice(extras);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shuffle {
    Off,
    /// The permutation is a pure function of `(seed, epoch)`.
    Seeded {
        seed: u64,
        epoch: u64,
    },
}

/// Number of items per rank: the first `len % size` ranks get one extra.
pub fn shard_sizes(len: usize, size: usize) -> Vec<usize> {
    (0..size)
        .map(|r| len / size + usize::from(r < len % size))
        .collect()
}

/// The item order applied before splitting.
pub fn permutation(len: usize, shuffle: Shuffle) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Shuffle::Seeded { seed, epoch } = shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    order
}

/// Item indices of every shard. Shard `r` takes positions `r, r + size,
/// r + 2·size, …` of the permuted order, so local minibatch `k` across all
/// ranks is exactly global minibatch `k` of size `b·size`.
pub fn shard_indices(len: usize, size: usize, shuffle: Shuffle) -> Vec<Vec<usize>> {
    let order = permutation(len, shuffle);
    (0..size)
        .map(|r| order.iter().skip(r).step_by(size).copied().collect())
        .collect()
}

/// Splits the dataset held by rank 0 across all ranks. Other ranks pass
/// `None` and receive their shard.
pub fn scatter_dataset(
    dataset: Option<&Dataset>,
    comm: &mut Communicator,
    shuffle: Shuffle,
) -> Result<Dataset> {
    let chunks = if comm.rank() == 0 {
        let ds = match dataset {
            Some(ds) if !ds.is_empty() => ds,
            _ => {
                let e = Error::contract("scatter_dataset needs a nonempty dataset at rank 0");
                comm.abort(&e.to_string());
                return Err(e);
            }
        };
        let shards = shard_indices(ds.len(), comm.size(), shuffle);
        Some(shards.iter().map(|idx| ds.select(idx).to_bytes()).collect())
    } else {
        None
    };
    let bytes = comm.scatter(chunks)?;
    Dataset::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::run_in_process;

    #[test]
    fn ten_items_three_ranks() {
        assert_eq!(shard_sizes(10, 3), vec![4, 3, 3]);
        let idx = shard_indices(10, 3, Shuffle::Off);
        assert_eq!(idx[0], vec![0, 3, 6, 9]);
        assert_eq!(idx[2], vec![2, 5, 8]);
        assert_eq!(
            idx.iter().map(Vec::len).collect::<Vec<_>>(),
            shard_sizes(10, 3)
        );
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch() {
        let a = permutation(50, Shuffle::Seeded { seed: 1, epoch: 0 });
        assert_eq!(a, permutation(50, Shuffle::Seeded { seed: 1, epoch: 0 }));
        assert_ne!(a, permutation(50, Shuffle::Seeded { seed: 1, epoch: 1 }));
        assert_ne!(a, permutation(50, Shuffle::Seeded { seed: 2, epoch: 0 }));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn two_worker_sgd_applies_the_mean_gradient() {
        let out = run_in_process(2, |comm| {
            let g = if comm.rank() == 0 {
                [1.0, -2.0]
            } else {
                [3.0, 4.0]
            };
            let p = Tensor::parameter("p", vec![2], vec![10.0, 10.0]).unwrap();
            p.set_grad(&g).unwrap();
            let mut mno = MultiNodeOptimizer::new(Optimizer::sgd(0.5), comm);
            let mut extra = [mno.comm().rank() as f64];
            mno.update_with(std::slice::from_ref(&p), &mut extra)
                .unwrap();
            (p.to_vec(), p.grad().unwrap(), extra[0])
        })
        .unwrap();
        for (w, g, extra) in out {
            assert_eq!(g, vec![2.0, 1.0]);
            assert_eq!(w, vec![9.0, 9.5]);
            assert_eq!(extra, 0.5);
        }
    }

    #[test]
    fn single_rank_is_the_bare_optimizer() {
        let a = Tensor::parameter("a", vec![3], vec![0.3, -0.1, 2.0]).unwrap();
        let b = Tensor::parameter("b", vec![3], vec![0.3, -0.1, 2.0]).unwrap();
        let comm = Communicator::in_process_group(1).unwrap().pop().unwrap();
        let mut mno = MultiNodeOptimizer::new(Optimizer::adam(0.01), comm);
        let mut bare = Optimizer::adam(0.01);
        for step in 0..4 {
            let g = [0.1 * step as f64, -0.7, 1.3];
            a.set_grad(&g).unwrap();
            b.set_grad(&g).unwrap();
            mno.update(std::slice::from_ref(&a)).unwrap();
            bare.step(std::slice::from_ref(&b)).unwrap();
        }
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn missing_gradient_fails_on_every_rank() {
        let out = run_in_process(3, |comm| {
            let p = Tensor::parameter("l1/W", vec![1], vec![0.0]).unwrap();
            if comm.rank() != 1 {
                p.set_grad(&[1.0]).unwrap();
            }
            MultiNodeOptimizer::new(Optimizer::sgd(0.1), comm).update(&[p])
        })
        .unwrap();
        assert!(matches!(out[1], Err(Error::Contract(_))));
        assert!(matches!(out[0], Err(Error::Protocol { .. })));
        assert!(matches!(out[2], Err(Error::Protocol { .. })));
    }

    #[test]
    fn changed_parameter_count_is_rejected() {
        let comm = Communicator::in_process_group(1).unwrap().pop().unwrap();
        let mut mno = MultiNodeOptimizer::new(Optimizer::sgd(0.1), comm);
        let a = Tensor::parameter("a", vec![2], vec![0.0; 2]).unwrap();
        a.set_grad(&[1.0, 1.0]).unwrap();
        mno.update(std::slice::from_ref(&a)).unwrap();
        let b = Tensor::parameter("b", vec![1], vec![0.0]).unwrap();
        b.set_grad(&[1.0]).unwrap();
        assert!(matches!(mno.update(&[a, b]), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcast_parameters_copies_rank_zero() {
        let out = run_in_process(3, |comm| {
            let r = comm.rank() as f64;
            let w = Tensor::parameter("w", vec![2], vec![r, r + 1.0]).unwrap();
            let b = Tensor::parameter("b", vec![1], vec![-r]).unwrap();
            let mut mno = MultiNodeOptimizer::new(Optimizer::sgd(0.1), comm);
            mno.broadcast_parameters(&[w.clone(), b.clone()]).unwrap();
            (w.to_vec(), b.to_vec())
        })
        .unwrap();
        for (w, b) in out {
            assert_eq!(w, vec![0.0, 1.0]);
            assert_eq!(b, vec![0.0]);
        }
    }

    #[test]
    fn scatter_without_shuffle_preserves_order() {
        let ds = Dataset::new((0..20).map(f64::from).collect(), vec![0; 10], 2, 1).unwrap();
        let out = run_in_process(3, |mut comm| {
            let root = (comm.rank() == 0).then_some(&ds);
            scatter_dataset(root, &mut comm, Shuffle::Off).unwrap()
        })
        .unwrap();
        assert_eq!(
            out.iter().map(Dataset::len).collect::<Vec<_>>(),
            vec![4, 3, 3]
        );
        assert_eq!(out[1].features(), &[2.0, 3.0, 8.0, 9.0, 14.0, 15.0]);
    }

    #[test]
    fn empty_dataset_is_a_contract_error() {
        let empty = Dataset::new(vec![], vec![], 2, 2).unwrap();
        let out = run_in_process(2, |mut comm| {
            let root = (comm.rank() == 0).then_some(&empty);
            scatter_dataset(root, &mut comm, Shuffle::Off)
        })
        .unwrap();
        assert!(matches!(out[0], Err(Error::Contract(_))));
        assert!(out[1].is_err());
    }
}
