//! Seeded synthetic classification sets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::error::{Error, Result};

/// Gaussian blob parameters. Rows are grouped by class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub seed: u64,
    pub sigma: f64,
    /// Minimum distance between any two centres, in units of `sigma`.
    pub separation: f64,
}

impl BlobSpec {
    pub fn new(classes: usize, dims: usize, per_class: usize, seed: u64) -> Self {
        BlobSpec {
            classes,
            dims,
            per_class,
            seed,
            sigma: 1.0,
            separation: 6.0,
        }
    }
}

fn check(classes: usize, dims: usize, per_class: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if per_class < 1 {
        return Err(Error::Config("need at least 1 example per class".into()));
    }
    if dims < 1 {
        return Err(Error::Config("need at least 1 feature".into()));
    }
    Ok(())
}

/// Isotropic Gaussian clusters, centres at least `separation·sigma` apart.
pub fn blobs(spec: &BlobSpec) -> Result<Dataset> {
    let BlobSpec {
        classes,
        dims,
        per_class,
        seed,
        sigma,
        separation,
    } = *spec;
    check(classes, dims, per_class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = draw_centres(&mut rng, classes, dims, separation * sigma);

    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut features = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(centre.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(label as u32);
        }
    }
    Dataset::new(features, labels, dims, classes)
}

/// Centres uniform in a cube, rejecting any closer than `min_dist` to an
/// earlier one. The cube grows when it gets crowded.
fn draw_centres(rng: &mut ChaCha8Rng, classes: usize, dims: usize, min_dist: f64) -> Vec<Vec<f64>> {
    let mut half = min_dist;
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut rejected = 0;
    while centres.len() < classes {
        let c: Vec<f64> = (0..dims).map(|_| rng.random_range(-half..=half)).collect();
        if centres.iter().all(|o| distance(o, &c) >= min_dist) {
            centres.push(c);
        } else {
            rejected += 1;
            if rejected % 64 == 0 {
                half *= 1.25;
            }
        }
    }
    centres
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Interleaved 2-D spiral arms, one per class.
pub fn spiral(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    check(classes, 2, per_class)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.2).unwrap();
    let mut features = Vec::with_capacity(classes * per_class * 2);
    let mut labels = Vec::with_capacity(classes * per_class);
    for label in 0..classes {
        for i in 0..per_class {
            let t = if per_class == 1 {
                0.5
            } else {
                i as f64 / (per_class - 1) as f64
            };
            let theta =
                label as f64 * 2.0 * PI / classes as f64 + 4.0 * t + jitter.sample(&mut rng);
            features.extend_from_slice(&[t * theta.cos(), t * theta.sin()]);
            labels.push(label as u32);
        }
    }
    Dataset::new(features, labels, 2, classes)
}
