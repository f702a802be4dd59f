//! Feature perturbations for the noise sweep and the corruption probe.

use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Mag};
use crate::seed;
use crate::tensor::Tensor;

fn std_all(t: &Tensor) -> f64 {
    let n = t.data().len() as f64;
    let mean = t.data().iter().sum::<f64>() / n;
    (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn std_columns(t: &Tensor) -> Vec<f64> {
    let (n, d) = t.shape();
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| t.get(i, j)).sum::<f64>() / n as f64;
            ((0..n).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

/// Adds `scale * sigma_m * eta` to every modality, where `sigma_m` is the
/// standard deviation over all entries of that modality's features and
/// `eta` is standard Gaussian. Scale zero returns an identical graph.
pub fn inject_noise(mag: &Mag, scale: f64, seed: u64) -> Result<Mag, DataError> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(DataError::InvalidSpec(format!("noise scale {scale} must be >= 0")));
    }
    if scale == 0.0 {
        return Ok(mag.clone());
    }
    let mut out = mag.clone();
    for m in 0..mag.num_modalities() {
        let x = mag.features(m);
        let sigma = std_all(x);
        let mut rng = seed::rng(seed::derive(seed, &[seed::tag("inject"), m as u64]));
        let data = x
            .data()
            .iter()
            .map(|&v| {
                let eta: f64 = StandardNormal.sample(&mut rng);
                v + scale * sigma * eta
            })
            .collect();
        out = out.with_features(m, Tensor::new(x.rows(), x.cols(), data).expect("shape"));
    }
    Ok(out)
}

/// Replaces the test rows of one modality with zero-mean Gaussian rows whose
/// per-dimension standard deviation matches the original column. Train and
/// validation rows are untouched.
pub fn corrupt_modality(mag: &Mag, modality: &str, seed: u64) -> Result<Mag, DataError> {
    let m = mag.modality_index(modality)?;
    let x = mag.features(m);
    let sd = std_columns(x);
    let mut rng = seed::rng(seed::derive(seed, &[seed::tag("corrupt"), m as u64]));
    let mut data = x.to_vec();
    let d = x.cols();
    for &v in &mag.splits().test {
        for (j, s) in sd.iter().enumerate() {
            let eta: f64 = StandardNormal.sample(&mut rng);
            data[v * d + j] = s * eta;
        }
    }
    Ok(mag.with_features(m, Tensor::new(x.rows(), d, data).expect("shape")))
}
