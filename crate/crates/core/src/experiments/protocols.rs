//! Diagnostic protocols: noise-injection sweep, gradient-norm tracking and
//! the dominant-modality corruption probe. Each returns plain rows; the
//! `write_*` helpers persist them as CSV with a fixed column order.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{harmonic_mean, macro_f1};
use super::train::{fit, ModelKind, TrainConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::graph::{census, corrupt_modality, inject_noise, Mag};
use crate::seed;

/// Noise scales used when none are given.
pub const DEFAULT_SCALES: [f64; 6] = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];

/// `scale,kind,seed,acc,f1`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub kind: ModelKind,
    pub seed: u64,
    pub acc: f64,
    pub f1: f64,
}

/// Measured crossover quantities of one modality at one noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdNote {
    pub scale: f64,
    pub modality: String,
    pub beta_hat: f64,
    pub sigma_n_sq: f64,
    pub sigma_eps_sq: f64,
    pub tau: f64,
    /// `sigma_eps_sq < tau`: aggregation is predicted to lower the SNR.
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// Empty when the graph carries no class signals.
    pub thresholds: Vec<ThresholdNote>,
}

/// `epoch,variant,branch,grad_l2`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub epoch: usize,
    pub variant: String,
    pub branch: String,
    pub grad_l2: f64,
}

/// `kind,seed,F,D,H`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub kind: ModelKind,
    pub seed: u64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// One architecture tracked by [`track_gradients`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradVariant {
    pub label: String,
    pub kind: ModelKind,
    pub lambda_aux: f64,
    pub freeze_synergy: bool,
}

impl GradVariant {
    /// Coupled baseline, synergy-only routing, bypass without and with the
    /// auxiliary loss, and a control whose synergy stack is detached.
    pub fn standard(lambda_aux: f64) -> Vec<GradVariant> {
        let v = |label: String, kind, lambda_aux, freeze_synergy| GradVariant {
            label,
            kind,
            lambda_aux,
            freeze_synergy,
        };
        vec![
            v("indep-agg".into(), ModelKind::IndepAgg, 0.0, false),
            v("synergy-only".into(), ModelKind::SupraSynergyOnly, 0.0, false),
            v("aux-0".into(), ModelKind::SupraBase, 0.0, false),
            v(format!("aux-{lambda_aux}"), ModelKind::SupraAux, lambda_aux, false),
            v("detached-synergy".into(), ModelKind::SupraAux, lambda_aux, true),
        ]
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Trains every `(scale, kind, seed)` cell on a noise-injected copy of
/// `base`. All kinds at the same `(scale, seed)` see the same noisy graph.
pub fn sweep_noise(
    base: &Mag,
    scales: &[f64],
    kinds: &[ModelKind],
    seeds: &[u64],
    template: &TrainConfig,
    jobs: usize,
) -> Result<SweepOutput> {
    if scales.is_empty() || kinds.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one scale, kind and seed".into()));
    }
    template.validate()?;
    let noise_seed = |scale: f64, s: u64| seed::derive(s, &[seed::tag("noise"), scale.to_bits()]);

    let mut thresholds = Vec::new();
    if base.has_signals() {
        for &scale in scales {
            let noisy = inject_noise(base, scale, noise_seed(scale, seeds[0]))?;
            for c in census(&noisy, template.alpha)? {
                thresholds.push(ThresholdNote {
                    scale,
                    modality: c.modality,
                    beta_hat: c.beta_hat,
                    sigma_n_sq: c.sigma_n_sq,
                    sigma_eps_sq: c.sigma_eps_sq,
                    tau: c.tau,
                    degraded: c.sigma_eps_sq < c.tau,
                });
            }
        }
    }

    let graphs: Vec<((f64, u64), Mag)> = scales
        .iter()
        .flat_map(|&scale| seeds.iter().map(move |&s| (scale, s)))
        .map(|(scale, s)| Ok(((scale, s), inject_noise(base, scale, noise_seed(scale, s))?)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, ModelKind, u64)> = scales
        .iter()
        .enumerate()
        .flat_map(|(i, _)| kinds.iter().flat_map(move |&k| seeds.iter().map(move |&s| (i, k, s))))
        .collect();
    let rows = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(i, kind, s)| {
                let scale = scales[i];
                let mag = &graphs
                    .iter()
                    .find(|((sc, sd), _)| sc.to_bits() == scale.to_bits() && *sd == s)
                    .expect("graph per cell")
                    .1;
                let cfg = TrainConfig {
                    kind,
                    seed: s,
                    ..template.clone()
                };
                let report = fit(mag, &cfg, TrainOptions::default())?.report;
                Ok(SweepRow {
                    scale,
                    kind,
                    seed: s,
                    acc: report.test_acc,
                    f1: report.test_f1,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(SweepOutput { rows, thresholds })
}

/// Per-epoch branch gradient norms for each variant, trained for exactly
/// `template.max_epochs` epochs with `template.seed`.
pub fn track_gradients(mag: &Mag, variants: &[GradVariant], template: &TrainConfig, jobs: usize) -> Result<Vec<GradRow>> {
    if mag.num_modalities() < 2 {
        return Err(Error::Config("gradient tracking needs at least two modalities".into()));
    }
    template.validate()?;
    let per_variant = pool(jobs)?.install(|| {
        variants
            .par_iter()
            .map(|v| {
                let cfg = TrainConfig {
                    kind: v.kind,
                    lambda_aux: v.lambda_aux,
                    ..template.clone()
                };
                let opts = TrainOptions {
                    fixed_epochs: true,
                    freeze_synergy: v.freeze_synergy,
                };
                let report = fit(mag, &cfg, opts)?.report;
                Ok(report
                    .epochs
                    .iter()
                    .flat_map(|e| {
                        e.grad_norms.iter().map(move |b| GradRow {
                            epoch: e.epoch,
                            variant: v.label.clone(),
                            branch: b.branch.clone(),
                            grad_l2: b.grad_l2,
                        })
                    })
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_variant.into_iter().flatten().collect())
}

/// Trains each `(kind, seed)` once, then scores macro-F1 on the clean test
/// split (`F`) and with the `dominant` modality's test rows replaced by
/// matched-variance noise (`D`).
pub fn corruption_probe(
    mag: &Mag,
    kinds: &[ModelKind],
    dominant: &str,
    seeds: &[u64],
    template: &TrainConfig,
    jobs: usize,
) -> Result<Vec<ProbeRow>> {
    mag.modality_index(dominant)?;
    template.validate()?;
    let cells: Vec<(ModelKind, u64)> = kinds
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let test = &mag.splits().test;
    let labels = mag.labels_of(test);
    let score = |preds: &[usize]| {
        let p: Vec<usize> = test.iter().map(|&v| preds[v]).collect();
        macro_f1(&p, &labels, mag.num_classes())
    };
    pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(kind, s)| {
                let cfg = TrainConfig {
                    kind,
                    seed: s,
                    ..template.clone()
                };
                let trained = fit(mag, &cfg, TrainOptions::default())?;
                let corrupted = corrupt_modality(mag, dominant, seed::derive(s, &[seed::tag("corrupt")]))?;
                let f = score(&trained.predict(mag)?)?;
                let d = score(&trained.predict(&corrupted)?)?;
                Ok(ProbeRow {
                    kind,
                    seed: s,
                    f,
                    d,
                    h: harmonic_mean(f, d),
                })
            })
            .collect()
    })
}

/// Writes `rows` as CSV (header + one line per row) via a temporary file
/// renamed into place.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Pretty JSON written via a temporary file renamed into place.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut f = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(tmp, e))?;
    drop(f);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}
