//! Reference models.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::ops::{accuracy, bias_add, matmul, relu, softmax_cross_entropy};
use crate::autograd::Tensor;
use crate::element::Element;
use crate::error::{Error, Result};

/// Fully connected layer computing `x·W + b` with `W: [in×out]`.
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    /// Glorot-uniform weights drawn from `rng`, zero bias.
    fn glorot(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| T::from_f64(limit * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        Self::from_parts(prefix, fan_in, fan_out, weights, vec![T::zero(); fan_out])
    }

    fn from_parts(
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        Ok(Linear {
            weight: Tensor::parameter(format!("{prefix}/W"), vec![fan_in, fan_out], weights)?,
            bias: Tensor::parameter(format!("{prefix}/b"), vec![fan_out], bias)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        bias_add(&matmul(x, &self.weight)?, &self.bias)
    }
}

/// `input → hidden → ReLU → hidden → ReLU → logits`.
pub struct MlpClassifier<T: Element = f64> {
    layers: Vec<Linear<T>>,
    in_dims: usize,
    hidden_units: usize,
    n_classes: usize,
}

const LAYER_NAMES: [&str; 3] = ["l1", "l2", "l3"];

impl<T: Element> MlpClassifier<T> {
    /// Seeded Glorot-uniform initialisation. The same seed yields bitwise
    /// identical parameters on every process.
    pub fn new(in_dims: usize, hidden_units: usize, n_classes: usize, seed: u64) -> Result<Self> {
        Self::check_dims(in_dims, hidden_units, n_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [in_dims, hidden_units, hidden_units, n_classes];
        let layers = LAYER_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| Linear::glorot(name, dims[i], dims[i + 1], &mut rng))
            .collect::<Result<_>>()?;
        Ok(MlpClassifier {
            layers,
            in_dims,
            hidden_units,
            n_classes,
        })
    }

    /// All weights and biases zero.
    pub fn zeros(in_dims: usize, hidden_units: usize, n_classes: usize) -> Result<Self> {
        Self::check_dims(in_dims, hidden_units, n_classes)?;
        let dims = [in_dims, hidden_units, hidden_units, n_classes];
        let layers = LAYER_NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let (fi, fo) = (dims[i], dims[i + 1]);
                Linear::from_parts(name, fi, fo, vec![T::zero(); fi * fo], vec![T::zero(); fo])
            })
            .collect::<Result<_>>()?;
        Ok(MlpClassifier {
            layers,
            in_dims,
            hidden_units,
            n_classes,
        })
    }

    fn check_dims(in_dims: usize, hidden_units: usize, n_classes: usize) -> Result<()> {
        if in_dims == 0 || hidden_units == 0 || n_classes == 0 {
            return Err(Error::Config(format!(
                "MLP dimensions must be positive (in={in_dims}, hidden={hidden_units}, classes={n_classes})"
            )));
        }
        Ok(())
    }

    pub fn in_dims(&self) -> usize {
        self.in_dims
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_units
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    /// Every trainable tensor exactly once: `l1/W, l1/b, l2/W, l2/b, l3/W, l3/b`.
    /// The order only depends on the architecture, so flattened gradient
    /// buffers line up across ranks.
    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().iter().map(Tensor::len).sum()
    }

    /// Logits for a `[b×d]` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match *x.shape() {
            [_, d] if d == self.in_dims => {}
            _ => {
                return Err(Error::Shape {
                    op: "MlpClassifier::forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![self.in_dims, self.hidden_units],
                })
            }
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i != last {
                h = relu(&h);
            }
        }
        Ok(h)
    }

    /// Mean cross-entropy loss (on the tape) and batch accuracy.
    pub fn loss_and_accuracy(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(Tensor<T>, f64)> {
        let logits = self.forward(x)?;
        let loss = softmax_cross_entropy(&logits, labels)?;
        let acc = accuracy(&logits, labels)?;
        Ok((loss, acc))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self
                .parameters()
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name().unwrap_or_default().to_string(),
                    shape: p.shape().to_vec(),
                    values: p.data().iter().map(|&v| Element::to_f64(v)).collect(),
                })
                .collect(),
        }
    }

    /// Copies checkpointed values into this model. Names and shapes must
    /// match exactly.
    pub fn load_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        let params = self.parameters();
        if ckpt.entries.len() != params.len() {
            return Err(Error::contract(format!(
                "checkpoint has {} parameters, model has {}",
                ckpt.entries.len(),
                params.len()
            )));
        }
        for (p, e) in params.iter().zip(&ckpt.entries) {
            if p.name() != Some(e.name.as_str()) || p.shape() != e.shape.as_slice() {
                return Err(Error::contract(format!(
                    "checkpoint entry {} {:?} does not match parameter {} {:?}",
                    e.name,
                    e.shape,
                    p.name().unwrap_or_default(),
                    p.shape()
                )));
            }
            let values: Vec<T> = e.values.iter().map(|&v| T::from_f64(v)).collect();
            p.set_data(&values)?;
        }
        Ok(())
    }

    /// Rebuilds a model whose architecture is read off the checkpoint shapes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            ckpt.entries
                .iter()
                .find(|e| e.name == name)
                .and_then(|e| e.shape.get(axis).copied())
                .ok_or_else(|| Error::contract(format!("checkpoint lacks {name}")))
        };
        let model = Self::zeros(dim("l1/W", 0)?, dim("l1/W", 1)?, dim("l3/W", 1)?)?;
        model.load_checkpoint(ckpt)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::no_grad;

    fn bits(model: &MlpClassifier) -> Vec<u64> {
        model
            .parameters()
            .iter()
            .flat_map(|p| p.to_vec())
            .map(f64::to_bits)
            .collect()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = MlpClassifier::<f64>::zeros(3, 4, 5).unwrap();
        let x = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let logits = model.forward(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert!(logits.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MlpClassifier::<f64>::new(8, 16, 4, 42).unwrap();
        let b = MlpClassifier::<f64>::new(8, 16, 4, 42).unwrap();
        let c = MlpClassifier::<f64>::new(8, 16, 4, 43).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn parameter_order_and_shapes() {
        let model = MlpClassifier::<f64>::new(8, 16, 4, 0).unwrap();
        let names: Vec<_> = model
            .parameters()
            .iter()
            .map(|p| (p.name().unwrap().to_string(), p.shape().to_vec()))
            .collect();
        assert_eq!(
            names,
            vec![
                ("l1/W".to_string(), vec![8, 16]),
                ("l1/b".to_string(), vec![16]),
                ("l2/W".to_string(), vec![16, 16]),
                ("l2/b".to_string(), vec![16]),
                ("l3/W".to_string(), vec![16, 4]),
                ("l3/b".to_string(), vec![4]),
            ]
        );
        assert_eq!(
            model.num_parameters(),
            8 * 16 + 16 + 16 * 16 + 16 + 16 * 4 + 4
        );
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let model = MlpClassifier::<f64>::new(10, 20, 3, 7).unwrap();
        for layer in model.layers() {
            let s = layer.weight.shape();
            let limit = (6.0 / (s[0] + s[1]) as f64).sqrt();
            assert!(layer.weight.data().iter().all(|w| w.abs() <= limit));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn rows_are_independent() {
        let model = MlpClassifier::<f64>::new(5, 12, 3, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch: Vec<f64> = (0..32 * 5)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let big = model
            .forward(&Tensor::from_vec(vec![32, 5], batch.clone()).unwrap())
            .unwrap();
        let row = 17;
        let single = model
            .forward(&Tensor::from_vec(vec![1, 5], batch[row * 5..row * 5 + 5].to_vec()).unwrap())
            .unwrap();
        let big = big.to_vec();
        for (a, b) in single.to_vec().iter().zip(&big[row * 3..row * 3 + 3]) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn wrong_input_width() {
        let model = MlpClassifier::<f64>::new(5, 4, 3, 0).unwrap();
        let x = Tensor::from_vec(vec![1, 4], vec![0.0; 4]).unwrap();
        assert!(matches!(model.forward(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn uniform_logits_loss_is_ln_c() {
        let model = MlpClassifier::<f64>::zeros(3, 4, 7).unwrap();
        let x = Tensor::from_vec(vec![2, 3], vec![0.3; 6]).unwrap();
        let (loss, _) = model.loss_and_accuracy(&x, &[1, 6]).unwrap();
        assert!((loss.item() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn perfect_logits_have_full_accuracy() {
        // Identity-like network: one hidden unit per class, positive inputs.
        let model = MlpClassifier::<f64>::zeros(2, 2, 2).unwrap();
        for layer in model.layers() {
            layer.weight.set_data(&[1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        let x = Tensor::from_vec(vec![2, 2], vec![5.0, 0.0, 0.0, 5.0]).unwrap();
        let (_, acc) = no_grad(|| model.loss_and_accuracy(&x, &[0, 1])).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn checkpoint_restores_model() {
        let model = MlpClassifier::<f64>::new(4, 6, 3, 11).unwrap();
        let ckpt = model.checkpoint();
        let restored = MlpClassifier::<f64>::from_checkpoint(&ckpt).unwrap();
        assert_eq!(bits(&model), bits(&restored));
        let other = MlpClassifier::<f64>::new(4, 7, 3, 11).unwrap();
        assert!(other.load_checkpoint(&ckpt).is_err());
    }
}
