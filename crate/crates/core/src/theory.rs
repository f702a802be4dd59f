//! Closed-form SNR and gradient-starvation quantities, with Monte Carlo and
//! autodiff checks that validate them.
//!
//! Zero denominators yield `f64::INFINITY` rather than an error so that sweep
//! grids may include exact-zero noise points.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::sync::Arc;

use crate::aggregation::{ego_jacobian_diag, Alpha, GnnStack};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Session};
use crate::seed;
use crate::sparse::CsrMatrix;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnrParams {
    pub signal_sq: f64,
    pub sigma_eps_sq: f64,
    pub sigma_n_sq: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl SnrParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_sq > 0.0
            && self.signal_sq.is_finite()
            && self.sigma_eps_sq >= 0.0
            && self.sigma_n_sq >= 0.0
            && self.alpha > 0.0
            && self.alpha < 1.0
            && (0.0..=1.0).contains(&self.beta);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SNR parameters {self:?}")))
        }
    }

    fn gain(&self) -> f64 {
        self.alpha + (1.0 - self.alpha) * self.beta
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// `signal_sq / sigma_eps_sq`.
pub fn snr_int_raw(signal_sq: f64, sigma_eps_sq: f64) -> f64 {
    ratio(signal_sq, sigma_eps_sq)
}

pub fn snr_int(p: &SnrParams) -> f64 {
    snr_int_raw(p.signal_sq, p.sigma_eps_sq)
}

/// SNR of `alpha x_v + (1 - alpha) mean_N(x)` when the neighborhood mean is
/// `beta s_v + xi` with `E|xi|^2 = sigma_n_sq`.
pub fn snr_post(p: &SnrParams) -> f64 {
    let a = p.alpha;
    ratio(
        p.gain().powi(2) * p.signal_sq,
        a * a * p.sigma_eps_sq + (1.0 - a).powi(2) * p.sigma_n_sq,
    )
}

/// Encoder-noise level below which aggregation strictly lowers the SNR.
pub fn tau(alpha: f64, beta: f64, sigma_n_sq: f64) -> f64 {
    if beta <= 0.0 {
        return f64::INFINITY;
    }
    (1.0 - alpha) * sigma_n_sq / (beta * (2.0 * alpha + (1.0 - alpha) * beta))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossover {
    /// `sigma_eps_sq < tau`.
    pub degraded: bool,
    /// `snr_post - snr_int`.
    pub margin: f64,
}

pub fn crossover(p: &SnrParams) -> Crossover {
    let post = snr_post(p);
    let int = snr_int(p);
    let margin = if post == int { 0.0 } else { post - int };
    Crossover {
        degraded: p.sigma_eps_sq < tau(p.alpha, p.beta, p.sigma_n_sq),
        margin,
    }
}

/// Monte Carlo estimate of [`snr_post`] from `samples` independent draws of
/// isotropic encoder noise and neighborhood noise in `dim` dimensions.
pub fn mc_snr_post(p: &SnrParams, dim: usize, samples: usize, seed: u64) -> Result<f64> {
    p.validate()?;
    if samples < 1000 || dim == 0 {
        return Err(Error::Config(format!(
            "Monte Carlo needs >= 1000 samples and dim >= 1 (got {samples}, {dim})"
        )));
    }
    let signal = p.gain().powi(2) * p.signal_sq;
    let (se, sn) = (
        (p.sigma_eps_sq / dim as f64).sqrt(),
        (p.sigma_n_sq / dim as f64).sqrt(),
    );
    let a = p.alpha;
    let mut rng = seed::rng(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        for _ in 0..dim {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let xi: f64 = StandardNormal.sample(&mut rng);
            let dev = a * se * eps + (1.0 - a) * sn * xi;
            total += dev * dev;
        }
    }
    Ok(ratio(signal, total / samples as f64))
}

/// Gradient attenuation factor for a branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EtaMode {
    /// Routed through `layers` mean-aggregation layers.
    Gnn { layers: usize, alpha: f64 },
    /// Topology-free path.
    Bypass,
}

impl EtaMode {
    pub fn eta(self) -> f64 {
        match self {
            EtaMode::Gnn { layers, alpha } => alpha.powi(layers as i32),
            EtaMode::Bypass => 1.0,
        }
    }
}

/// `eta |r| w_norm jac_norm`.
pub fn starvation_bound(mode: EtaMode, residual: f64, w_norm: f64, jac_norm: f64) -> f64 {
    mode.eta() * residual.abs() * w_norm * jac_norm
}

/// Result of one validation property.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_params<R: Rng>(rng: &mut R) -> SnrParams {
    SnrParams {
        signal_sq: rng.random_range(0.1..10.0),
        sigma_eps_sq: rng.random_range(0.0..5.0),
        sigma_n_sq: rng.random_range(0.0..5.0),
        alpha: rng.random_range(0.01..0.99),
        beta: rng.random_range(0.01..=1.0),
    }
}

/// `snr_post < snr_int` iff `sigma_eps_sq < tau` on random draws, and a zero
/// margin exactly at the threshold.
pub fn check_crossover_iff(draws: usize, seed: u64) -> PropertyOutcome {
    let mut rng = seed::rng(seed);
    let mut mismatches = 0;
    let mut worst_at_tau = 0.0f64;
    for _ in 0..draws {
        let p = random_params(&mut rng);
        let c = crossover(&p);
        if (c.margin < 0.0) != c.degraded {
            mismatches += 1;
        }
        let at = SnrParams {
            sigma_eps_sq: tau(p.alpha, p.beta, p.sigma_n_sq),
            ..p
        };
        if at.sigma_eps_sq > 0.0 {
            let m = crossover(&at).margin / snr_int(&at);
            worst_at_tau = worst_at_tau.max(m.abs());
        }
    }
    PropertyOutcome {
        name: "crossover-iff",
        passed: mismatches == 0 && worst_at_tau < 1e-12,
        detail: format!(
            "{draws} draws, {mismatches} mismatches, max relative margin at tau {worst_at_tau:.2e}"
        ),
    }
}

/// Closed form vs Monte Carlo on `sets` random parameter sets.
pub fn check_monte_carlo(sets: usize, samples: usize, seed: u64) -> PropertyOutcome {
    let mut rng = seed::rng(seed);
    let mut worst = 0.0f64;
    let mut failed = false;
    for i in 0..sets {
        let mut p = random_params(&mut rng);
        p.sigma_eps_sq += 0.05;
        match mc_snr_post(&p, 8, samples, seed::derive(seed, &[i as u64])) {
            Ok(mc) => {
                let exact = snr_post(&p);
                worst = worst.max((mc - exact).abs() / exact);
            }
            Err(_) => failed = true,
        }
    }
    PropertyOutcome {
        name: "monte-carlo",
        passed: !failed && worst < 0.05,
        detail: format!("{sets} sets x {samples} samples, max relative error {worst:.4}"),
    }
}

/// Directed chain `0 -> 1 -> ... -> n-1`, row-normalized.
pub fn directed_chain(n: usize) -> Arc<CsrMatrix> {
    let edges: Vec<_> = (1..n).map(|v| (v - 1, v)).collect();
    Arc::new(
        CsrMatrix::from_directed_edges(n, &edges)
            .expect("valid chain")
            .row_normalized(),
    )
}

/// Ego gradient `d h_L[node, j] / d h_0[node, j]` through a weightless linear
/// stack, measured by backpropagation.
pub fn autodiff_ego_gradient(adj: &Arc<CsrMatrix>, alpha: f64, layers: usize, node: usize) -> Result<f64> {
    let n = adj.num_rows();
    let stack = GnnStack::linear(Alpha::new(alpha)?, layers)?;
    let tape = Tape::new();
    let params = ParamSet::new();
    let mut sess = Session::train(&tape, &params, 0);
    let h0 = tape.leaf(&Tensor::from_vec(n, 1, (0..n).map(|i| i as f64 * 0.1).collect()));
    let out = stack.forward(&mut sess, adj, &h0, 0.0)?;
    let picked = tape.row_select(&out, &[node])?;
    let loss = tape.sum(&picked)?;
    let grads = tape.backward(&loss)?;
    Ok(grads.wrt(&h0).get(node, 0))
}

/// Ego Jacobian of an `L`-layer stack on a cycle-free chain equals `alpha^L`,
/// both from sparse powers and from backpropagation.
pub fn check_dilution(n: usize) -> PropertyOutcome {
    let adj = directed_chain(n);
    let mut worst_exact = 0.0f64;
    let mut worst_ad = 0.0f64;
    let mut error = None;
    for alpha in [0.3f64, 0.5, 0.9] {
        for layers in 1..=4 {
            let expected = alpha.powi(layers as i32);
            for node in [0, n / 2, n - 1] {
                match (
                    ego_jacobian_diag(&adj, alpha, layers, node),
                    autodiff_ego_gradient(&adj, alpha, layers, node),
                ) {
                    (Ok(d), Ok(g)) => {
                        worst_exact = worst_exact.max((d - expected).abs());
                        worst_ad = worst_ad.max((g - d).abs());
                    }
                    (Err(e), _) | (_, Err(e)) => error = Some(e.to_string()),
                }
            }
        }
    }
    PropertyOutcome {
        name: "alpha-power-dilution",
        passed: error.is_none() && worst_exact <= 1e-12 && worst_ad <= 1e-10,
        detail: match error {
            Some(e) => e,
            None => format!(
                "{n}-node chain, max |diag - alpha^L| {worst_exact:.2e}, max |autodiff - diag| {worst_ad:.2e}"
            ),
        },
    }
}

/// One instance of the two-branch linear construction: a scalar prediction
/// `y = w_t . h_t[i] + w_v . h_v[i]` with squared loss, where `h_v` is the weak
/// encoder output `x W_v` routed through `mode`. Only node `i`'s encoder output
/// carries gradient, isolating the ego path.
#[derive(Clone, Debug)]
pub struct StarvationInstance {
    pub measured: f64,
    pub residual: f64,
    pub w_norm: f64,
    pub jac_norm: f64,
    pub bound: f64,
}

pub fn starvation_instance(mode: EtaMode, seed: u64) -> Result<StarvationInstance> {
    const N: usize = 12;
    const DX: usize = 5;
    const DH: usize = 4;
    let mut rng = seed::rng(seed);
    let mut normal = |rows: usize, cols: usize| {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::from_vec(rows, cols, data)
    };
    let x = normal(N, DX);
    let w_enc = normal(DX, DH);
    let h_t = normal(N, DH);
    let w_t = normal(DH, 1);
    let w_v = normal(DH, 1);
    let target = normal(1, 1).get(0, 0);
    let node = (seed % N as u64) as usize;

    let tape = Tape::new();
    let enc = tape.leaf(&w_enc);
    // Z = Z_others (detached, row `node` zeroed) + e_node (x_node W)
    let mut others = tape.matmul(&x, &w_enc)?.to_vec();
    others[node * DH..(node + 1) * DH].fill(0.0);
    let others = Tensor::from_vec(N, DH, others);
    let x_i = Tensor::from_vec(1, DX, x.row(node).to_vec());
    let mut e = vec![0.0; N];
    e[node] = 1.0;
    let e = Tensor::from_vec(N, 1, e);
    let z_i = tape.matmul(&x_i, &enc)?;
    let z = tape.add(&others, &tape.matmul(&e, &z_i)?)?;

    let h_v = match mode {
        EtaMode::Bypass => z,
        EtaMode::Gnn { layers, alpha } => {
            let params = ParamSet::new();
            let mut sess = Session::train(&tape, &params, 0);
            GnnStack::linear(Alpha::new(alpha)?, layers)?.forward(&mut sess, &directed_chain(N), &z, 0.0)?
        }
    };
    let y = tape.add(&tape.matmul(&h_t, &w_t)?, &tape.matmul(&h_v, &w_v)?)?;
    let y_i = tape.row_select(&y, &[node])?;
    let residual = y_i.get(0, 0) - target;
    let diff = tape.sub(&y_i, &Tensor::scalar(target))?;
    let loss = tape.scale(&tape.mul(&diff, &diff)?, 0.5)?;
    let grads = tape.backward(&loss)?;
    let measured = grads.wrt(&enc).l2_norm();
    let w_norm = w_v.l2_norm();
    let jac_norm = x_i.l2_norm();
    Ok(StarvationInstance {
        measured,
        residual,
        w_norm,
        jac_norm,
        bound: starvation_bound(mode, residual, w_norm, jac_norm),
    })
}

/// Measured weak-branch task gradient never exceeds the bound, for both the
/// bypass path and GNN routing on a cycle-free graph.
pub fn check_starvation_bound(instances: usize, seed: u64) -> PropertyOutcome {
    let mut violations = 0;
    let mut worst = 0.0f64;
    let mut error = None;
    for i in 0..instances {
        let s = seed::derive(seed, &[i as u64]);
        let mode = match i % 4 {
            0 => EtaMode::Bypass,
            k => EtaMode::Gnn {
                layers: k,
                alpha: [0.3, 0.5, 0.9][i % 3],
            },
        };
        match starvation_instance(mode, s) {
            Ok(inst) => {
                if inst.measured > inst.bound * (1.0 + 1e-9) {
                    violations += 1;
                }
                if inst.bound > 0.0 {
                    worst = worst.max(inst.measured / inst.bound);
                }
            }
            Err(e) => error = Some(e.to_string()),
        }
    }
    PropertyOutcome {
        name: "starvation-bound",
        passed: error.is_none() && violations == 0,
        detail: error.unwrap_or_else(|| {
            format!("{instances} instances, {violations} violations, max measured/bound {worst:.12}")
        }),
    }
}

/// The four properties run by the `theory` command, with default grids.
pub fn validate_all(seed: u64) -> Vec<PropertyOutcome> {
    vec![
        check_crossover_iff(1000, seed::derive(seed, &[1])),
        check_monte_carlo(20, 20_000, seed::derive(seed, &[2])),
        check_dilution(50),
        check_starvation_bound(100, seed::derive(seed, &[4])),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(signal_sq: f64, sigma_eps_sq: f64, sigma_n_sq: f64, alpha: f64, beta: f64) -> SnrParams {
        SnrParams {
            signal_sq,
            sigma_eps_sq,
            sigma_n_sq,
            alpha,
            beta,
        }
    }

    #[test]
    fn snr_int_examples() {
        assert!((snr_int(&p(3.0, 1.0 / 3.0, 1.0, 0.5, 1.0)) - 9.0).abs() < 1e-12);
        assert_eq!(snr_int(&p(2.0, 2.0, 1.0, 0.5, 1.0)), 1.0);
        assert_eq!(snr_int(&p(2.0, 0.0, 1.0, 0.5, 1.0)), f64::INFINITY);
    }

    #[test]
    fn snr_post_examples() {
        let q = p(1.0, 1.0 / 3.0, 1.0, 0.5, 1.0);
        assert!((snr_post(&q) - 3.0).abs() < 1e-12);
        assert!((snr_post(&q) - snr_int(&q)).abs() < 1e-12);
        let clean = p(2.0, 0.7, 0.0, 0.3, 1.0);
        assert!((snr_post(&clean) - 2.0 / (0.09 * 0.7)).abs() < 1e-9);
        assert!(snr_post(&clean) >= snr_int(&clean));
        assert_eq!(snr_post(&p(1.0, 0.0, 0.0, 0.5, 1.0)), f64::INFINITY);
    }

    #[test]
    fn tau_examples() {
        assert!((tau(0.5, 1.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tau(0.5, 0.7, 0.0), 0.0);
        assert!((tau(0.9, 0.5, 2.0) - 0.2 / 0.925).abs() < 1e-12);
        assert!((tau(0.9, 0.5, 2.0) - 0.21622).abs() < 1e-5);
        assert_eq!(tau(0.5, 0.0, 1.0), f64::INFINITY);
    }

    #[test]
    fn crossover_direction_and_threshold() {
        let base = p(1.0, 0.0, 1.5, 0.4, 0.8);
        let t = tau(0.4, 0.8, 1.5);
        let at = crossover(&SnrParams { sigma_eps_sq: t, ..base });
        assert!(at.margin.abs() < 1e-12, "{}", at.margin);
        let below = crossover(&SnrParams { sigma_eps_sq: t / 2.0, ..base });
        assert!(below.degraded && below.margin < 0.0);
        let above = crossover(&SnrParams { sigma_eps_sq: t * 2.0, ..base });
        assert!(!above.degraded && above.margin > 0.0);
    }

    #[test]
    fn iff_holds_on_random_draws() {
        let out = check_crossover_iff(1000, 17);
        assert!(out.passed, "{}", out.detail);
    }

    #[test]
    fn snr_post_monotonicity() {
        let mut rng = seed::rng(3);
        let h = 1e-6;
        for _ in 0..200 {
            let q = random_params(&mut rng);
            let q = SnrParams {
                beta: q.beta.min(0.9),
                sigma_eps_sq: q.sigma_eps_sq + 0.01,
                ..q
            };
            let base = snr_post(&q);
            assert!(snr_post(&SnrParams { beta: q.beta + h, ..q }) > base);
            assert!(snr_post(&SnrParams { signal_sq: q.signal_sq + h, ..q }) > base);
            assert!(snr_post(&SnrParams { sigma_n_sq: q.sigma_n_sq + h, ..q }) < base);
        }
    }

    #[test]
    fn high_confidence_limit_destroys_the_advantage() {
        let mut prev = f64::INFINITY;
        for k in 0..10 {
            let q = p(1.0, 10f64.powi(-k), 0.5, 0.5, 0.8);
            let r = snr_post(&q) / snr_int(&q);
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn monte_carlo_matches_closed_form() {
        let out = check_monte_carlo(20, 20_000, 5);
        assert!(out.passed, "{}", out.detail);
        let zero = p(1.0, 0.0, 0.0, 0.5, 0.5);
        assert_eq!(mc_snr_post(&zero, 4, 1000, 0).unwrap(), f64::INFINITY);
        assert!(mc_snr_post(&zero, 4, 999, 0).is_err());
    }

    #[test]
    fn monte_carlo_converges_with_more_samples() {
        let q = p(2.0, 0.6, 1.1, 0.4, 0.7);
        let exact = snr_post(&q);
        let err = |n: usize| -> f64 {
            (0..20)
                .map(|s| (mc_snr_post(&q, 2, n, s).unwrap() - exact).abs())
                .sum::<f64>()
                / 20.0
        };
        assert!(err(8000) < err(1000));
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(starvation_bound(EtaMode::Bypass, 0.0, 3.0, 2.0), 0.0);
        let b = starvation_bound(EtaMode::Gnn { layers: 3, alpha: 0.5 }, 1.0, 2.0, 1.0);
        assert!((b - 0.25).abs() < 1e-15);
    }

    #[test]
    fn measured_gradient_respects_bound() {
        let out = check_starvation_bound(100, 9);
        assert!(out.passed, "{}", out.detail);
        // ego-only linear routing makes the bound tight
        let inst = starvation_instance(EtaMode::Gnn { layers: 2, alpha: 0.5 }, 4).unwrap();
        assert!((inst.measured - inst.bound).abs() <= 1e-9 * inst.bound.max(1.0));
    }

    #[test]
    fn dilution_on_chain() {
        let out = check_dilution(50);
        assert!(out.passed, "{}", out.detail);
    }

    #[test]
    fn default_validation_passes() {
        assert!(validate_all(0).iter().all(|o| o.passed));
    }
}
