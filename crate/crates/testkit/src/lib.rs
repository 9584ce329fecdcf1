//! Reference oracles for the test suites.
//!
//! Everything here is written against plain `f64` slices and closures so it
//! shares no code path with the implementation it checks.

/// Relative error floor. Gradients smaller than this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Central finite differences of a scalar function at `x`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(REL_ERR_FLOOR);
    (a - b).abs() / scale
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Row-major `m×k · k×n` by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Gathers every rank's buffer in one place and averages elementwise.
pub fn gather_mean(buffers: &[Vec<f64>]) -> Vec<f64> {
    assert!(!buffers.is_empty());
    let len = buffers[0].len();
    let mut sum = vec![0.0; len];
    for buf in buffers {
        assert_eq!(buf.len(), len, "ragged gather");
        for (s, v) in sum.iter_mut().zip(buf) {
            *s += v;
        }
    }
    let n = buffers.len() as f64;
    sum.into_iter().map(|s| s / n).collect()
}

/// Mean cross-entropy of row-major logits, computed directly from the
/// definition with a max shift.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let rows = labels.len();
    assert_eq!(logits.len(), rows * classes);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += -(row[label] - max - z.ln());
    }
    total / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_cubic() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn gather_mean_of_two() {
        assert_eq!(
            gather_mean(&[vec![2.0, 4.0], vec![4.0, 8.0]]),
            vec![3.0, 6.0]
        );
    }

    #[test]
    fn naive_identity() {
        let id = [1.0, 0.0, 0.0, 1.0];
        let m = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(naive_matmul(&id, &m, 2, 2, 2), m.to_vec());
    }

    #[test]
    fn uniform_cross_entropy() {
        let l = cross_entropy(&[0.0, 0.0], &[0], 2);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
