//! Acceptance run: one PASS/FAIL line per criterion. A criterion passes only
//! if its property holds and it finishes within its time budget.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use magsim_core::experiments::{corruption_probe, sweep_noise, track_gradients, GradVariant, ModelKind, TrainConfig};
use magsim_core::graph::{census, generate, load, save, ModalitySpec, SyntheticSpec};
use magsim_core::params::ParamSet;
use magsim_core::sparse::CsrMatrix;
use magsim_core::supra::{SupraConfig, SupraModel};
use magsim_core::tape::Tape;
use magsim_core::{seed, theory, Tensor};
use rand::Rng;

use common::{golden_mismatches, ok, s, snapshot, Workspace};

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn criterion(id: u8, name: &str, budget: Option<Duration>, body: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = body();
    let took = start.elapsed();
    let in_time = budget.is_none_or(|b| took < b);
    let passed = v.passed && in_time;
    let limit = budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
    println!(
        "{} criterion {id} ({name}): {} [{:.2}s{limit}]",
        if passed { "PASS" } else { "FAIL" },
        v.detail,
        took.as_secs_f64()
    );
    passed
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn outcome(o: theory::PropertyOutcome) -> Verdict {
    verdict(o.passed, o.detail)
}

// --- criterion 3 ---

fn crossover_spec() -> SyntheticSpec {
    let modality = |name: &str| ModalitySpec {
        name: name.into(),
        dim: 16,
        signal_norm: 1.0,
        noise_var: 0.02,
    };
    SyntheticSpec {
        num_nodes: 4000,
        num_classes: 4,
        modalities: vec![modality("text"), modality("image")],
        homophily: 0.8,
        mean_degree: 10.0,
        train_frac: 0.6,
        val_frac: 0.2,
        seed: 0,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn crossover() -> Verdict {
    let run = || -> magsim_core::Result<Verdict> {
        let mag = generate(&crossover_spec())?;
        let template = TrainConfig {
            lr: 0.01,
            hidden: 32,
            alpha: 0.1,
            layers: 4,
            max_epochs: 300,
            ..Default::default()
        };
        let (lo, hi) = (0.0, 4.0);
        let kinds = [ModelKind::EfMlp, ModelKind::GcnJoint, ModelKind::SupraBase];
        let out = sweep_noise(&mag, &[lo, hi], &kinds, &[0, 1, 2], &template, 1)?;
        let stats = |scale: f64, kind: ModelKind| {
            let accs: Vec<f64> = out.rows.iter().filter(|r| r.scale == scale && r.kind == kind).map(|r| r.acc).collect();
            mean_std(&accs)
        };
        let mut passed = true;
        let mut parts = Vec::new();
        for (scale, mlp_wins) in [(lo, true), (hi, false)] {
            let (m, sm) = stats(scale, ModelKind::EfMlp);
            let (g, sg) = stats(scale, ModelKind::GcnJoint);
            let (p, _) = stats(scale, ModelKind::SupraBase);
            let pooled = ((sm * sm + sg * sg) / 2.0).sqrt();
            let gap = if mlp_wins { m - g } else { g - m };
            passed &= gap > pooled && p >= m.max(g) - 0.01;
            parts.push(format!("scale {scale}: mlp {m:.4} gcn {g:.4} supra {p:.4} gap {gap:+.4} pooled sd {pooled:.4}"));
        }
        // the grid must straddle the threshold for every modality
        let side = |scale: f64| out.thresholds.iter().filter(|t| t.scale == scale).all(|t| t.degraded);
        let straddles = side(lo) && out.thresholds.iter().filter(|t| t.scale == hi).all(|t| !t.degraded);
        passed &= straddles;
        parts.push(format!("grid straddles tau: {straddles}"));
        Ok(verdict(passed, parts.join("; ")))
    };
    run().unwrap_or_else(|e| verdict(false, e.to_string()))
}

// --- criteria 5 and 6 ---

fn asymmetric_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_nodes: 1000,
        num_classes: 4,
        modalities: vec![
            ModalitySpec {
                name: "text".into(),
                dim: 128,
                signal_norm: 1.0,
                noise_var: 0.02,
            },
            ModalitySpec {
                name: "image".into(),
                dim: 16,
                signal_norm: 1.0,
                noise_var: 1.0,
            },
        ],
        homophily: 0.8,
        mean_degree: 10.0,
        train_frac: 0.3,
        val_frac: 0.2,
        seed: 0,
    }
}

const WEAK_BRANCH: &str = "projector:image";

fn starvation() -> Verdict {
    let run = || -> magsim_core::Result<Verdict> {
        let mag = generate(&asymmetric_spec())?;
        let c = census(&mag, 0.9)?;
        let ratio = c[0].snr_int / c[1].snr_int;
        let mut passed = ratio >= 20.0;
        let mut parts = vec![format!("snr_int ratio {ratio:.1}")];
        let variants = GradVariant::standard(0.7);
        let bypass = &variants.iter().find(|v| v.kind == ModelKind::SupraAux && !v.freeze_synergy).unwrap().label;
        for s in 0..3u64 {
            let template = TrainConfig {
                lr: 1e-3,
                dropout: 0.0,
                hidden: 32,
                alpha: 0.9,
                layers: 2,
                max_epochs: 150,
                seed: s,
                ..Default::default()
            };
            let rows = track_gradients(&mag, &variants, &template, 1)?;
            let series = |label: &str| -> Vec<f64> {
                rows.iter().filter(|r| r.variant == label && r.branch == WEAK_BRANCH).map(|r| r.grad_l2).collect()
            };
            let (aux, base, syn) = (series(bypass), series("aux-0"), series("synergy-only"));
            let last = |v: &[f64]| *v.last().unwrap();
            let lift = last(&aux) / last(&base);
            let syn_decay = last(&syn) / syn[0];
            let aux_decay = last(&aux) / aux[0];
            passed &= lift >= 3.0 && syn_decay < 0.1 && aux_decay >= 0.1;
            parts.push(format!(
                "seed {s}: {bypass}/aux-0 {lift:.1}x, synergy-only last/first {syn_decay:.3}, {bypass} last/first {aux_decay:.3}"
            ));
        }
        Ok(verdict(passed, parts.join("; ")))
    };
    run().unwrap_or_else(|e| verdict(false, e.to_string()))
}

fn corruption() -> Verdict {
    let run = || -> magsim_core::Result<Verdict> {
        let mag = generate(&asymmetric_spec())?;
        let template = TrainConfig {
            lr: 0.01,
            hidden: 32,
            alpha: 0.9,
            layers: 2,
            max_epochs: 300,
            ..Default::default()
        };
        let seeds = [0, 1, 2];
        let rows = corruption_probe(&mag, &[ModelKind::SupraBase, ModelKind::SupraAux], "text", &seeds, &template, 1)?;
        let mut passed = true;
        let mut parts = Vec::new();
        for s in seeds {
            let get = |kind| rows.iter().find(|r| r.kind == kind && r.seed == s).unwrap();
            let (base, aux) = (get(ModelKind::SupraBase), get(ModelKind::SupraAux));
            passed &= aux.d > base.d && aux.h > base.h;
            parts.push(format!(
                "seed {s}: D {:.4} -> {:.4}, H {:.4} -> {:.4}",
                base.d, aux.d, base.h, aux.h
            ));
        }
        Ok(verdict(passed, parts.join("; ")))
    };
    run().unwrap_or_else(|e| verdict(false, e.to_string()))
}

// --- criterion 8 ---

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 20;

fn random<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn kink_free<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(0.05..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(rows, cols, data).unwrap()
}

type Op = Box<dyn Fn(&Tape, &[Tensor]) -> Tensor>;

/// Worst norm-wise relative error of the backward pass against central
/// differences of `sum(op(x) * probe)`.
fn fd_error<R: Rng>(rng: &mut R, inputs: &[Tensor], op: &Op) -> f64 {
    let shape = {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x)).collect();
        op(&tape, &leaves).shape()
    };
    let probe = random(rng, shape.0, shape.1);
    let scalar = |tape: &Tape, xs: &[Tensor]| tape.sum(&tape.mul(&op(tape, xs), &probe).unwrap()).unwrap();
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let grads = tape.backward(&scalar(&tape, &leaves)).unwrap();
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&leaves[k]).to_vec();
        let numeric: Vec<f64> = (0..x.data().len())
            .map(|i| {
                let at = |delta: f64| {
                    let mut xs = inputs.to_vec();
                    let mut data = x.to_vec();
                    data[i] += delta;
                    xs[k] = Tensor::new(x.rows(), x.cols(), data).unwrap();
                    scalar(&Tape::new(), &xs).item()
                };
                (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP)
            })
            .collect();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        worst = worst.max(norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-8));
    }
    worst
}

fn random_graph<R: Rng>(rng: &mut R, n: usize) -> Arc<CsrMatrix> {
    let edges: Vec<_> = (0..n)
        .flat_map(|u| (0..n).map(move |v| (u, v)))
        .filter(|&(u, v)| u != v && rng.random::<f64>() < 0.4)
        .collect();
    Arc::new(CsrMatrix::from_directed_edges(n, &edges).unwrap().row_normalized())
}

/// Builds `(inputs, op)` for one random instance of a named op.
fn instance<R: Rng>(name: &str, rng: &mut R) -> (Vec<Tensor>, Op) {
    let (r, c, k) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
    match name {
        "matmul" => (vec![random(rng, r, k), random(rng, k, c)], Box::new(|t, x| t.matmul(&x[0], &x[1]).unwrap())),
        "spmm" => {
            let adj = random_graph(rng, r + 1);
            (vec![random(rng, r + 1, c)], Box::new(move |t, x| t.spmm(&adj, &x[0]).unwrap()))
        }
        "add" => (vec![random(rng, r, c), random(rng, r, c)], Box::new(|t, x| t.add(&x[0], &x[1]).unwrap())),
        "sub" => (vec![random(rng, r, c), random(rng, r, c)], Box::new(|t, x| t.sub(&x[0], &x[1]).unwrap())),
        "add_row" => (vec![random(rng, r, c), random(rng, 1, c)], Box::new(|t, x| t.add_row(&x[0], &x[1]).unwrap())),
        "mul" => (vec![random(rng, r, c), random(rng, r, c)], Box::new(|t, x| t.mul(&x[0], &x[1]).unwrap())),
        "scale" => {
            let f = rng.random_range(-2.0..2.0);
            (vec![random(rng, r, c)], Box::new(move |t, x| t.scale(&x[0], f).unwrap()))
        }
        "relu" => (vec![kink_free(rng, r, c)], Box::new(|t, x| t.relu(&x[0]).unwrap())),
        "concat_cols" => (
            vec![random(rng, r, c), random(rng, r, k)],
            Box::new(|t, x| t.concat_cols(&[&x[0], &x[1]]).unwrap()),
        ),
        "dropout" => {
            let rate = rng.random_range(0.0..0.8);
            let keep: Vec<bool> = (0..r * c).map(|_| rng.random::<f64>() >= rate).collect();
            (vec![random(rng, r, c)], Box::new(move |t, x| t.dropout_with_mask(&x[0], &keep, rate).unwrap()))
        }
        "row_select" => {
            let idx: Vec<usize> = (0..=k).map(|_| rng.random_range(0..r)).collect();
            (vec![random(rng, r, c)], Box::new(move |t, x| t.row_select(&x[0], &idx).unwrap()))
        }
        "sum" => (vec![random(rng, r, c)], Box::new(|t, x| t.sum(&x[0]).unwrap())),
        "cross_entropy" => {
            let labels: Vec<usize> = (0..r).map(|_| rng.random_range(0..=c)).collect();
            let smoothing = rng.random_range(0.0..0.4);
            (
                vec![random(rng, r, c + 1)],
                Box::new(move |t, x| t.cross_entropy_smoothed(&x[0], &labels, smoothing).unwrap()),
            )
        }
        other => unreachable!("unknown op {other}"),
    }
}

fn autodiff() -> Verdict {
    let ops = [
        "matmul", "spmm", "add", "sub", "add_row", "mul", "scale", "relu", "concat_cols", "dropout", "row_select", "sum",
        "cross_entropy",
    ];
    let mut worst = (0.0f64, "");
    for (o, name) in ops.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(8, &[o as u64]));
        for _ in 0..FD_INSTANCES {
            let (inputs, op) = instance(name, &mut rng);
            let err = fd_error(&mut rng, &inputs, &op);
            if err > worst.0 {
                worst = (err, name);
            }
        }
    }
    verdict(
        worst.0 < FD_TOL,
        format!("{} ops x {FD_INSTANCES} instances, worst rel err {:.2e} ({})", ops.len(), worst.0, worst.1),
    )
}

// --- criterion 9 ---

fn synergy_width() -> Verdict {
    let cfg = SupraConfig::default();
    let measure = |scale: usize| {
        let mut params = ParamSet::new();
        let dims = [("text".to_string(), 16 * scale), ("image".to_string(), 12 * scale)];
        let model = SupraModel::new(&mut params, &dims, 4, cfg.clone(), &mut seed::rng(9)).unwrap();
        (model.synergy_input_width(), params.count(&model.synergy_params()))
    };
    let (w1, c1) = measure(1);
    let (w10, c10) = measure(10);
    let expected = 2 * cfg.proj_dim;
    verdict(
        w1 == expected && (w1, c1) == (w10, c10),
        format!("width {w1} (sum of proj dims {expected}), params {c1} at 1x vs {c10} at 10x raw dims"),
    )
}

// --- criterion 10 ---

fn cli_run(seed: u64) -> Vec<(String, Vec<u8>)> {
    let ws = Workspace::new(seed);
    for (cmd, name) in [("train", "r.json"), ("sweep-noise", "s.csv"), ("track-grads", "g.csv"), ("corrupt", "p.csv")] {
        ws.run(cmd, &ws.path(name), seed, &[]);
    }
    let theory_out = ws.path("theory.json");
    ok(&["theory", "--seed", &seed.to_string(), "--out", s(&theory_out)]);
    let mut files = snapshot(ws.dir.path());
    files.extend(snapshot(&ws.data));
    files
}

fn determinism() -> Verdict {
    let identical = cli_run(11) == cli_run(11);
    let mut round_trip = true;
    for seed in 0..5 {
        let spec = SyntheticSpec {
            num_nodes: 80,
            seed,
            ..Default::default()
        };
        let mag = generate(&spec).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        save(&mag, a.path()).unwrap();
        let back = load(a.path()).unwrap();
        save(&back, b.path()).unwrap();
        round_trip &= back == mag && snapshot(a.path()) == snapshot(b.path());
    }
    let golden = golden_mismatches();
    verdict(
        identical && round_trip && golden.is_empty(),
        format!("CLI outputs identical across runs: {identical}; dataset round trip bit-exact: {round_trip}; golden CSV mismatches: {golden:?}"),
    )
}

fn main() -> ExitCode {
    let results = [
        criterion(1, "crossover iff", secs(1), || outcome(theory::check_crossover_iff(1000, 1))),
        criterion(2, "closed form vs Monte Carlo", secs(10), || outcome(theory::check_monte_carlo(20, 20_000, 2))),
        criterion(3, "SNR crossover reproduction", secs(600), crossover),
        criterion(4, "gradient dilution", secs(5), || outcome(theory::check_dilution(50))),
        criterion(5, "gradient starvation dynamics", secs(300), starvation),
        criterion(6, "corruption probe", secs(300), corruption),
        criterion(7, "starvation bound", secs(5), || outcome(theory::check_starvation_bound(100, 7))),
        criterion(8, "autodiff correctness", secs(30), autodiff),
        criterion(9, "synergy width invariance", secs(1), synergy_width),
        criterion(10, "determinism and format", None, determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed}/{} criteria PASS", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
