//! Synthetic graphs whose parameters map onto the SNR analysis.
//!
//! Class `c` of modality `m` has signal `signal_norm * e_c` (axis-aligned, so
//! signals are exactly orthogonal). A node's feature is its class signal plus
//! isotropic Gaussian noise with total expected squared norm `noise_var`.
//! Edges are drawn so the mean degree after symmetrization is close to
//! `mean_degree`; each draw lands in the node's own class with probability
//! `homophily` and otherwise on a uniformly chosen node of another class.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DataError, Mag, Modality, Splits};
use crate::seed;
use crate::sparse::CsrMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::theory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    /// `||s||`, the norm of every class signal.
    pub signal_norm: f64,
    /// `E||eps||^2`, total over all dimensions.
    pub noise_var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub homophily: f64,
    pub mean_degree: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nodes: 2000,
            num_classes: 4,
            modalities: vec![
                ModalitySpec {
                    name: "text".into(),
                    dim: 16,
                    signal_norm: 1.0,
                    noise_var: 0.5,
                },
                ModalitySpec {
                    name: "image".into(),
                    dim: 16,
                    signal_norm: 1.0,
                    noise_var: 4.0,
                },
            ],
            homophily: 0.8,
            mean_degree: 10.0,
            train_frac: 0.6,
            val_frac: 0.2,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_nodes < self.num_classes {
            return bad(format!("num_nodes {} < num_classes", self.num_nodes));
        }
        if self.modalities.is_empty() {
            return bad("at least one modality is required".into());
        }
        for m in &self.modalities {
            if !super::valid_name(&m.name) {
                return Err(DataError::InvalidName(m.name.clone()));
            }
            if m.dim < self.num_classes {
                return Err(DataError::DimTooSmall {
                    modality: m.name.clone(),
                    dim: m.dim,
                    classes: self.num_classes,
                });
            }
            if !(m.signal_norm.is_finite() && m.signal_norm > 0.0) {
                return bad(format!("{}: signal_norm must be positive", m.name));
            }
            if !(m.noise_var.is_finite() && m.noise_var >= 0.0) {
                return bad(format!("{}: noise_var must be >= 0", m.name));
            }
        }
        if !(self.homophily > 0.0 && self.homophily <= 1.0) {
            return bad(format!("homophily {} outside (0, 1]", self.homophily));
        }
        if !(self.mean_degree >= 1.0 && self.mean_degree.is_finite()) {
            return bad(format!("mean_degree {} < 1", self.mean_degree));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return bad("split fractions must be positive and leave room for test".into());
        }
        let (tr, va, te) = self.split_sizes();
        for (name, size) in [("train", tr), ("val", va), ("test", te)] {
            if size == 0 {
                return Err(DataError::EmptySplit(name));
            }
        }
        Ok(())
    }

    fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_nodes;
        let tr = ((n as f64) * self.train_frac).round() as usize;
        let va = ((n as f64) * self.val_frac).round() as usize;
        let tr = tr.min(n);
        let va = va.min(n - tr);
        (tr, va, n - tr - va)
    }
}

/// Draws a graph from `spec`; identical specs give identical graphs.
pub fn generate(spec: &SyntheticSpec) -> Result<Mag, DataError> {
    spec.validate()?;
    let n = spec.num_nodes;
    let c = spec.num_classes;

    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("labels")]));
    let mut labels: Vec<usize> = (0..n).map(|v| v % c).collect();
    labels.shuffle(&mut rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (v, &y) in labels.iter().enumerate() {
        members[y].push(v);
    }

    let mut modalities = Vec::with_capacity(spec.modalities.len());
    let mut features = Vec::with_capacity(spec.modalities.len());
    let mut signals = Vec::with_capacity(spec.modalities.len());
    for (mi, m) in spec.modalities.iter().enumerate() {
        let mut sig = vec![0.0; c * m.dim];
        for class in 0..c {
            sig[class * m.dim + class] = m.signal_norm;
        }
        let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("features"), mi as u64]));
        let noise = Normal::new(0.0, (m.noise_var / m.dim as f64).sqrt())
            .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let mut x = Vec::with_capacity(n * m.dim);
        for &y in &labels {
            for j in 0..m.dim {
                x.push(sig[y * m.dim + j] + noise.sample(&mut rng));
            }
        }
        modalities.push(Modality {
            name: m.name.clone(),
            dim: m.dim,
        });
        features.push(Tensor::new(n, m.dim, x).expect("shape"));
        signals.push(Tensor::new(c, m.dim, sig).expect("shape"));
    }

    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("edges")]));
    let half = spec.mean_degree / 2.0;
    let mut edges = Vec::with_capacity((n as f64 * half).ceil() as usize);
    for v in 0..n {
        // spreads round(n * k / 2) draws evenly over the nodes
        let stubs = ((v + 1) as f64 * half).floor() as usize - (v as f64 * half).floor() as usize;
        let y = labels[v];
        for _ in 0..stubs {
            let u = if rng.random::<f64>() < spec.homophily {
                if members[y].len() < 2 {
                    continue;
                }
                loop {
                    let u = members[y][rng.random_range(0..members[y].len())];
                    if u != v {
                        break u;
                    }
                }
            } else {
                loop {
                    let u = rng.random_range(0..n);
                    if labels[u] != y {
                        break u;
                    }
                }
            };
            edges.push((v, u));
        }
    }
    let adjacency = CsrMatrix::from_undirected_edges(n, &edges).expect("in range");

    let mut rng = seed::rng(seed::derive(spec.seed, &[seed::tag("splits")]));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (tr, va, _) = spec.split_sizes();
    let splits = Splits {
        train: order[..tr].to_vec(),
        val: order[tr..tr + va].to_vec(),
        test: order[tr + va..].to_vec(),
    };

    Mag::new(c, modalities, features, labels, splits, &adjacency, Some(signals))
}

fn neighborhood_means(mag: &Mag, modality: usize) -> Tensor {
    Tape::new()
        .spmm(mag.adjacency(), mag.features(modality))
        .expect("adjacency matches features")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Empirical alignment `mean_v <xbar_N(v), s_v> / ||s_v||^2` over nodes with
/// at least one neighbor.
pub fn measure_alignment(mag: &Mag, modality: &str) -> Result<f64, DataError> {
    let m = mag.modality_index(modality)?;
    let signals = mag.signals(m)?;
    let means = neighborhood_means(mag, m);
    let (mut total, mut count) = (0.0, 0usize);
    for v in 0..mag.num_nodes() {
        if mag.adjacency().degree(v) == 0 {
            continue;
        }
        let s = signals.row(mag.labels()[v]);
        total += dot(means.row(v), s) / dot(s, s);
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// `sigma_N^2 = mean_v ||xbar_N(v) - beta s_v||^2` over nodes with at least
/// one neighbor (total squared norm, not per dimension).
pub fn measure_neighborhood_noise(mag: &Mag, modality: &str, beta: f64) -> Result<f64, DataError> {
    let m = mag.modality_index(modality)?;
    let signals = mag.signals(m)?;
    let means = neighborhood_means(mag, m);
    let (mut total, mut count) = (0.0, 0usize);
    for v in 0..mag.num_nodes() {
        if mag.adjacency().degree(v) == 0 {
            continue;
        }
        let s = signals.row(mag.labels()[v]);
        total += means
            .row(v)
            .iter()
            .zip(s)
            .map(|(x, s)| (x - beta * s).powi(2))
            .sum::<f64>();
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

/// `(||s||^2, mean ||x_v - s_v||^2)` for one modality.
fn signal_and_noise(mag: &Mag, m: usize) -> Result<(f64, f64), DataError> {
    let signals = mag.signals(m)?;
    let x = mag.features(m);
    let n = mag.num_nodes();
    let mut signal_sq = 0.0;
    let mut noise_sq = 0.0;
    for v in 0..n {
        let s = signals.row(mag.labels()[v]);
        signal_sq += dot(s, s);
        noise_sq += x.row(v).iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((signal_sq / n as f64, noise_sq / n as f64))
}

/// Empirical intrinsic SNR `||s||^2 / mean ||eps||^2`.
pub fn measure_snr_int(mag: &Mag, modality: &str) -> Result<f64, DataError> {
    let m = mag.modality_index(modality)?;
    let (s, e) = signal_and_noise(mag, m)?;
    Ok(theory::snr_int_raw(s, e))
}

/// Fraction of undirected edges joining same-class nodes.
pub fn same_class_edge_fraction(mag: &Mag) -> f64 {
    let edges = mag.adjacency().upper_edges();
    let same = edges
        .iter()
        .filter(|&&(u, v)| mag.labels()[u] == mag.labels()[v])
        .count();
    same as f64 / edges.len().max(1) as f64
}

/// Measured theory quantities for one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityCensus {
    pub modality: String,
    pub beta_hat: f64,
    pub sigma_n_sq: f64,
    pub sigma_eps_sq: f64,
    pub signal_sq: f64,
    pub snr_int: f64,
    /// Threshold below which neighbor-mean aggregation with this `alpha`
    /// lowers the SNR.
    pub tau: f64,
    pub alpha: f64,
}

/// Measures beta, sigma_N^2, sigma_eps^2 and tau for every modality.
pub fn census(mag: &Mag, alpha: f64) -> Result<Vec<ModalityCensus>, DataError> {
    mag.modalities()
        .iter()
        .enumerate()
        .map(|(m, modality)| {
            let beta_hat = measure_alignment(mag, &modality.name)?;
            let sigma_n_sq = measure_neighborhood_noise(mag, &modality.name, beta_hat)?;
            let (signal_sq, sigma_eps_sq) = signal_and_noise(mag, m)?;
            Ok(ModalityCensus {
                modality: modality.name.clone(),
                beta_hat,
                sigma_n_sq,
                sigma_eps_sq,
                signal_sq,
                snr_int: theory::snr_int_raw(signal_sq, sigma_eps_sq),
                tau: theory::tau(alpha, beta_hat, sigma_n_sq),
                alpha,
            })
        })
        .collect()
}
