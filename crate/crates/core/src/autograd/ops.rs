//! Differentiable operations. Each executes eagerly and records its backward
//! rule when an input requires a gradient.

use super::{Op, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};

fn matrix_dims<T: Element>(
    op: &'static str,
    t: &Tensor<T>,
    other: &Tensor<T>,
) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: other.shape().to_vec(),
        }),
    }
}

/// `[m×k] · [k×n] → [m×n]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims("matmul", a, b)?;
    let (k2, n) = matrix_dims("matmul", b, a)?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, &a.data(), false, &b.data(), false, &mut out, false);
    Ok(Tensor::from_op(vec![m, n], out, Op::MatMul, &[a, b]))
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Elementwise sum of two equally shaped tensors.
pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x + *y)
        .collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, Op::Add, &[a, b]))
}

/// Elementwise product of two equally shaped tensors.
pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let out = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| *x * *y)
        .collect();
    Ok(Tensor::from_op(a.shape().to_vec(), out, Op::Mul, &[a, b]))
}

/// Multiplies every element by a constant.
pub fn scale<T: Element>(x: &Tensor<T>, factor: T) -> Tensor<T> {
    let out = x.data().iter().map(|v| *v * factor).collect();
    Tensor::from_op(x.shape().to_vec(), out, Op::Scale(factor), &[x])
}

/// Sum of all elements as a scalar.
pub fn sum<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let total = x.data().iter().fold(T::zero(), |acc, v| acc + *v);
    Tensor::from_op(vec![], vec![total], Op::Sum, &[x])
}

/// Adds a length-`n` bias to every row of a `[b×n]` matrix.
pub fn bias_add<T: Element>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = matrix_dims("bias_add", x, bias)?;
    if bias.len() != cols || bias.shape().len() > 2 {
        return Err(Error::Shape {
            op: "bias_add",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = x.to_vec();
    {
        let b = bias.data();
        for row in out.chunks_exact_mut(cols) {
            row.iter_mut().zip(b.iter()).for_each(|(o, b)| *o = *o + *b);
        }
    }
    debug_assert_eq!(out.len(), rows * cols);
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        Op::BiasAdd,
        &[x, bias],
    ))
}

/// `max(0, x)`; the subgradient at exactly zero is zero.
pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let out = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::from_op(x.shape().to_vec(), out, Op::Relu, &[x])
}

/// Mean over the minibatch of `-log softmax(logits)[label]`.
///
/// Uses the log-sum-exp shift, so saturated logits do not overflow.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let (rows, classes) = match *logits.shape() {
        [r, c] => (r, c),
        _ => {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    if rows != labels.len() || rows == 0 {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index {
            op: "softmax_cross_entropy",
            index: bad,
            bound: classes,
        });
    }

    let data = logits.data();
    let mut probs = vec![T::zero(); rows * classes];
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = &data[r * classes..(r + 1) * classes];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let prow = &mut probs[r * classes..(r + 1) * classes];
        let mut z = T::zero();
        for (p, &v) in prow.iter_mut().zip(row) {
            *p = (v - max).exp();
            z = z + *p;
        }
        let inv_z = T::one() / z;
        prow.iter_mut().for_each(|p| *p = *p * inv_z);
        total = total + (z.ln() + max - row[label]);
    }
    drop(data);
    let loss = total / T::from_f64(rows as f64);
    Ok(Tensor::from_op(
        vec![],
        vec![loss],
        Op::SoftmaxCrossEntropy {
            probs,
            labels: labels.to_vec(),
        },
        &[logits],
    ))
}

/// Fraction of rows whose arg-max (first maximum on ties) equals the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let classes = match *logits.shape() {
        [r, c] if r == labels.len() && r > 0 => c,
        _ => {
            return Err(Error::Shape {
                op: "accuracy",
                lhs: logits.shape().to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    let data = logits.data();
    let correct = data
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Clears the gradient slot of every tensor.
pub fn zero_grads<T: Element>(params: &[Tensor<T>]) {
    params.iter().for_each(Tensor::clear_grad);
}

/// Maps the upstream gradient of a node's output to gradients of its inputs,
/// in input order. `None` means the input receives nothing.
pub(super) fn backward_rule<T: Element>(
    op: &Op<T>,
    inputs: &[Tensor<T>],
    upstream: &[T],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = a.requires_grad().then(|| {
                // dA = dC · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, upstream, false, &b.data(), true, &mut da, false);
                da
            });
            let db = b.requires_grad().then(|| {
                // dB = Aᵀ · dC
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, &a.data(), true, upstream, false, &mut db, false);
                db
            });
            vec![da, db]
        }
        Op::Add => vec![Some(upstream.to_vec()), Some(upstream.to_vec())],
        Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let da = a.requires_grad().then(|| {
                upstream
                    .iter()
                    .zip(b.data().iter())
                    .map(|(g, y)| *g * *y)
                    .collect()
            });
            let db = b.requires_grad().then(|| {
                upstream
                    .iter()
                    .zip(a.data().iter())
                    .map(|(g, x)| *g * *x)
                    .collect()
            });
            vec![da, db]
        }
        Op::Scale(factor) => vec![Some(upstream.iter().map(|g| *g * *factor).collect())],
        Op::Sum => vec![Some(vec![upstream[0]; inputs[0].len()])],
        Op::BiasAdd => {
            let bias = &inputs[1];
            let cols = bias.len();
            let db = bias.requires_grad().then(|| {
                let mut db = vec![T::zero(); cols];
                for row in upstream.chunks_exact(cols) {
                    db.iter_mut().zip(row).for_each(|(d, g)| *d = *d + *g);
                }
                db
            });
            vec![Some(upstream.to_vec()), db]
        }
        Op::Relu => {
            let x = inputs[0].data();
            let dx = upstream
                .iter()
                .zip(x.iter())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            vec![Some(dx)]
        }
        Op::SoftmaxCrossEntropy { probs, labels } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            let coef = upstream[0] / T::from_f64(rows as f64);
            let mut dx: Vec<T> = probs.iter().map(|p| *p * coef).collect();
            for (r, &label) in labels.iter().enumerate() {
                let i = r * classes + label;
                dx[i] = dx[i] - coef;
            }
            vec![Some(dx)]
        }
    }
}
