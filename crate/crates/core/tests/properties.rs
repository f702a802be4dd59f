use std::sync::Arc;

use magsim_core::aggregation::{ego_jacobian_diag, mean_aggregate, Alpha};
use magsim_core::experiments::{accuracy, harmonic_mean, macro_f1};
use magsim_core::graph::{corrupt_modality, generate, inject_noise, load, save, ModalitySpec, SyntheticSpec};
use magsim_core::sparse::CsrMatrix;
use magsim_core::tape::Tape;
use magsim_core::theory::{snr_int, snr_post, starvation_bound, tau, EtaMode, SnrParams};
use magsim_core::Tensor;
use proptest::prelude::*;

fn edges(n: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..n, 0..n), 0..3 * n).prop_map(|e| e.into_iter().filter(|(u, v)| u != v).collect())
}

fn graph() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..12).prop_flat_map(|n| (Just(n), edges(n)))
}

fn snr_params() -> impl Strategy<Value = SnrParams> {
    (0.1f64..10.0, 0.0f64..5.0, 0.0f64..5.0, 0.01f64..0.99, 0.01f64..1.0).prop_map(
        |(signal_sq, sigma_eps_sq, sigma_n_sq, alpha, beta)| SnrParams {
            signal_sq,
            sigma_eps_sq,
            sigma_n_sq,
            alpha,
            beta,
        },
    )
}

fn small_spec() -> impl Strategy<Value = SyntheticSpec> {
    (20usize..60, 2usize..4, 0.1f64..1.0, 0.0f64..2.0, 1.0f64..5.0, any::<u64>()).prop_map(
        |(num_nodes, num_classes, homophily, noise_var, mean_degree, seed)| SyntheticSpec {
            num_nodes,
            num_classes,
            modalities: vec![
                ModalitySpec {
                    name: "text".into(),
                    dim: 4,
                    signal_norm: 1.0,
                    noise_var,
                },
                ModalitySpec {
                    name: "image".into(),
                    dim: 5,
                    signal_norm: 2.0,
                    noise_var: noise_var + 0.5,
                },
            ],
            homophily,
            mean_degree,
            train_frac: 0.5,
            val_frac: 0.25,
            seed,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csr_structure_invariants((n, e) in graph()) {
        let a = CsrMatrix::from_undirected_edges(n, &e).unwrap();
        prop_assert!(a.is_structurally_symmetric());
        let offsets = a.row_offsets();
        prop_assert_eq!(offsets.len(), n + 1);
        prop_assert_eq!(offsets[n], a.nnz());
        for r in 0..n {
            prop_assert!(offsets[r] <= offsets[r + 1]);
            let cols = a.neighbors(r);
            prop_assert!(cols.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(cols.iter().all(|&c| c < n && c != r));
        }
        let rn = a.row_normalized();
        for r in 0..n {
            if rn.degree(r) > 0 {
                let s: f64 = rn.row(r).map(|(_, v)| v).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_aggregation_is_a_convex_mix((n, e) in graph(), alpha in 0.01f64..0.99, seed in any::<u64>()) {
        let adj = Arc::new(CsrMatrix::from_undirected_edges(n, &e).unwrap().row_normalized());
        let mut rng = magsim_core::seed::rng(seed);
        let data: Vec<f64> = (0..n * 3).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let h = Tensor::new(n, 3, data).unwrap();
        let out = mean_aggregate(&Tape::new(), &h, &adj, Alpha::new(alpha).unwrap()).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| h.get(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                if adj.degree(i) == 0 {
                    // no neighbors: only the retained ego share survives
                    prop_assert!((out.get(i, j) - alpha * h.get(i, j)).abs() < 1e-15);
                } else {
                    prop_assert!(out.get(i, j) >= lo - 1e-12 && out.get(i, j) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn ego_diagonal_bounded_by_dilution((n, e) in graph(), alpha in 0.05f64..0.95, layers in 1usize..5) {
        let adj = CsrMatrix::from_undirected_edges(n, &e).unwrap().row_normalized();
        for node in 0..n {
            let d = ego_jacobian_diag(&adj, alpha, layers, node).unwrap();
            prop_assert!(d >= alpha.powi(layers as i32) - 1e-12 && d <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn crossover_threshold_is_exact(p in snr_params()) {
        let t = tau(p.alpha, p.beta, p.sigma_n_sq);
        let at = SnrParams { sigma_eps_sq: t, ..p };
        if t > 1e-9 {
            let rel = (snr_post(&at) - snr_int(&at)).abs() / snr_int(&at);
            prop_assert!(rel < 1e-9, "rel {rel}");
        }
        let below = SnrParams { sigma_eps_sq: t * 0.9, ..p };
        let above = SnrParams { sigma_eps_sq: t * 1.1 + 1e-9, ..p };
        if t > 1e-6 {
            prop_assert!(snr_post(&below) < snr_int(&below));
        }
        prop_assert!(snr_post(&above) > snr_int(&above));
    }

    #[test]
    fn snr_post_grows_with_alignment(p in snr_params(), bump in 0.0f64..0.5) {
        let q = SnrParams { beta: (p.beta + bump).min(1.0), ..p };
        prop_assert!(snr_post(&q) >= snr_post(&p) * (1.0 - 1e-12));
    }

    #[test]
    fn starvation_bound_scales(r in -3.0f64..3.0, w in 0.0f64..4.0, j in 0.0f64..4.0, alpha in 0.05f64..0.95, layers in 1usize..6) {
        let gnn = starvation_bound(EtaMode::Gnn { layers, alpha }, r, w, j);
        let bypass = starvation_bound(EtaMode::Bypass, r, w, j);
        prop_assert!(gnn >= 0.0 && gnn <= bypass + 1e-15);
        prop_assert!((bypass - r.abs() * w * j).abs() <= 1e-12 * (1.0 + bypass));
    }

    #[test]
    fn metrics_are_bounded(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
        let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let a = accuracy(&p, &y).unwrap();
        let f = macro_f1(&p, &y, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&f));
        let h = harmonic_mean(a, f);
        prop_assert!(h >= a.min(f) - 1e-15 && h <= a.max(f) + 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_round_trip_is_bit_exact(spec in small_spec()) {
        let mag = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&mag, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        prop_assert_eq!(&back, &mag);
        let again = tempfile::tempdir().unwrap();
        save(&back, again.path()).unwrap();
        for entry in std::fs::read_dir(dir.path()).unwrap() {
            let name = entry.unwrap().file_name();
            prop_assert_eq!(
                std::fs::read(dir.path().join(&name)).unwrap(),
                std::fs::read(again.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn generation_is_deterministic(spec in small_spec()) {
        prop_assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn perturbations_respect_their_scope(spec in small_spec(), seed in any::<u64>()) {
        let mag = generate(&spec).unwrap();
        prop_assert_eq!(&inject_noise(&mag, 0.0, seed).unwrap(), &mag);
        let c = corrupt_modality(&mag, "text", seed).unwrap();
        let d = mag.features(0).cols();
        let test: std::collections::HashSet<usize> = mag.splits().test.iter().copied().collect();
        for v in 0..mag.num_nodes() {
            if !test.contains(&v) {
                prop_assert_eq!(c.features(0).row(v), mag.features(0).row(v));
            }
        }
        prop_assert_eq!(c.features(1), mag.features(1));
        prop_assert_eq!(c.features(0).cols(), d);
    }
}
