//! Cross-module invariants exercised through the public API.

use nalgebra::DMatrix;
use proptest::prelude::*;

use rngd::data::{read_ratings_csv, split, synth_lrmc, synth_msl, synth_nn, write_ratings_csv, Noise, RatingDataset};
use rngd::fisher::apply;
use rngd::linalg::{gaussian_matrix, seeded_rng};
use rngd::manifold::{inner, project};
use rngd::models::{full_batch, BnProblem, LrmcProblem, ModelProblem, SampleAxis, SubspaceLearningProblem, TwoLayerBnNet};
use rngd::optim::{acceptance, rngd_run, rngd_step, AcceptanceParams, RngdConfig, RngdState};
use rngd::Manifold;

fn lrmc(seed: u64, obs: f64) -> LrmcProblem {
    let syn = synth_lrmc(12, 30, 2, obs, Noise::Std(0.05), seed).unwrap();
    LrmcProblem::from_ratings(&syn.dataset, None, 2, SampleAxis::Columns).unwrap()
}

/// `min over 50 probes of ⟨F d, d⟩ / ‖d‖²` and the self-adjointness gap.
fn fisher_probe<M: ModelProblem>(prob: &M, point: &M::Point, seed: u64) -> (f64, f64) {
    let f = prob.fisher(point, &full_batch(prob.num_samples())).unwrap();
    let mut rng = seeded_rng(seed);
    let (r, c) = point.shape();
    let mut worst = f64::INFINITY;
    let mut gap: f64 = 0.0;
    for _ in 0..50 {
        let d = project(point, &gaussian_matrix(r, c, &mut rng)).unwrap();
        let e = project(point, &gaussian_matrix(r, c, &mut rng)).unwrap();
        let fd = apply(&f, &d).unwrap();
        let fe = apply(&f, &e).unwrap();
        worst = worst.min(inner(&fd, &d).unwrap() / d.norm().powi(2));
        let scale = fd.norm() * e.norm() + 1e-300;
        gap = gap.max((inner(&fd, &e).unwrap() - inner(&d, &fe).unwrap()).abs() / scale);
    }
    (worst, gap)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn acceptance_rule_branches(rho in -1.0f64..2.0, g in 1e-4f64..1e4, k in -14i32..20) {
        let p = AcceptanceParams { eta1: 0.1, eta2: 1.0, gamma: 2.0, sigma_min: 1e-4 };
        let sigma = 2f64.powi(k).max(p.sigma_min);
        let d = acceptance(rho, g, sigma, &p);
        prop_assert_eq!(d.accepted, rho >= p.eta1 && g >= p.eta2 / sigma);
        if rho >= p.eta1 && g > p.eta2 / sigma {
            prop_assert!(d.sigma >= p.sigma_min);
            prop_assert_eq!(d.sigma, (sigma / p.gamma).max(p.sigma_min));
        } else {
            prop_assert_eq!(d.sigma, p.gamma * sigma);
        }
        let tie = acceptance(rho, p.eta2 / sigma, sigma, &p);
        prop_assert_eq!(tie.accepted, rho >= p.eta1);
        prop_assert_eq!(tie.sigma, p.gamma * sigma);
    }

    #[test]
    fn rngd_steps_obey_the_rule_and_the_model(seed in 0u64..1000, batch in prop::option::of(5usize..30)) {
        let prob = lrmc(seed, 0.7);
        let cfg = RngdConfig { grad_batch: batch, seed, ..RngdConfig::default() };
        let params = cfg.acceptance_params();
        let mut rng = seeded_rng(seed);
        let mut state = RngdState::new(prob.random_point(&mut rng).unwrap(), &cfg).unwrap();
        for _ in 0..15 {
            let before = state.point.clone();
            let rep = rngd_step(&prob, &mut state, &cfg).unwrap();
            if rep.solver_failed || rep.stationary {
                continue;
            }
            prop_assert_eq!(rep.lambda, rep.sigma_before * rep.grad_norm);
            prop_assert!(rep.model_decrease <= 0.0);
            if !rep.degenerate {
                let d = acceptance(rep.rho, rep.grad_norm, rep.sigma_before, &params);
                prop_assert_eq!(rep.accepted, d.accepted);
                prop_assert_eq!(rep.sigma_after, d.sigma);
            }
            if !rep.accepted {
                prop_assert_eq!(state.point.matrix(), before.matrix());
                prop_assert_eq!(rep.sigma_after, rep.sigma_before * cfg.gamma);
            }
        }
    }

    #[test]
    fn full_batch_rngd_never_increases_the_loss(seed in 0u64..1000) {
        let prob = lrmc(seed, 1.0);
        let cfg = RngdConfig { max_epochs: 8, seed, ..RngdConfig::default() };
        let out = rngd_run(&prob, &cfg, None).unwrap();
        for w in out.trace.windows(2) {
            prop_assert!(w[1].train <= w[0].train * (1.0 + 1e-12), "{} -> {}", w[0].train, w[1].train);
        }
    }

    #[test]
    fn splits_partition_and_csv_round_trips(seed in any::<u64>(), fraction in 0.2f64..0.8) {
        let syn = synth_lrmc(8, 12, 2, 0.9, Noise::None, seed).unwrap();
        let sp = split(&syn.dataset, fraction, seed).unwrap();
        let mut union: Vec<_> = sp.train.entries.iter().chain(&sp.test.entries).map(|&(r, c, v)| (r, c, v.to_bits())).collect();
        let mut orig: Vec<_> = syn.dataset.entries.iter().map(|&(r, c, v)| (r, c, v.to_bits())).collect();
        union.sort_unstable();
        orig.sort_unstable();
        prop_assert_eq!(union, orig);
        prop_assert_eq!(split(&syn.dataset, fraction, seed).unwrap().checksum(), sp.checksum());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.csv");
        write_ratings_csv(&sp.train, &path).unwrap();
        let back: RatingDataset = read_ratings_csv(&path).unwrap();
        prop_assert_eq!(back.entries, sp.train.entries.clone());
    }

    #[test]
    fn fisher_operators_are_psd_and_self_adjoint(seed in 0u64..1000) {
        let prob = lrmc(seed, 0.6);
        let u = prob.random_point(&mut seeded_rng(seed)).unwrap();
        let (worst, gap) = fisher_probe(&prob, &u, seed);
        prop_assert!(worst >= -1e-10 && gap <= 1e-10, "lrmc {worst:e} {gap:e}");

        let tasks = synth_msl(8, 2, 5, 10, 0.01, seed).unwrap().tasks;
        let msl = SubspaceLearningProblem::new(2, 0.01, tasks, None).unwrap();
        let u = msl.random_point(&mut seeded_rng(seed)).unwrap();
        let (worst, gap) = fisher_probe(&msl, &u, seed);
        prop_assert!(worst >= -1e-10 && gap <= 1e-10, "msl {worst:e} {gap:e}");

        let inst = synth_nn(5, 6, 12, seed).unwrap();
        let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), 5).unwrap();
        let bn = BnProblem::new(net, inst.xs, inst.ys).unwrap();
        let (worst, gap) = fisher_probe(&bn, &inst.theta0, seed);
        prop_assert!(worst >= -1e-10 && gap <= 1e-10, "bn {worst:e} {gap:e}");
    }

    #[test]
    fn bn_gradient_rows_are_orthogonal_to_weights(seed in 0u64..1000) {
        let inst = synth_nn(6, 8, 10, seed).unwrap();
        let net = TwoLayerBnNet::with_population_stats(inst.a.clone(), 6).unwrap();
        let bn = BnProblem::new(net, inst.xs, inst.ys).unwrap();
        let (_, g) = bn.loss_grad(&inst.theta0, &full_batch(8)).unwrap();
        let theta: &DMatrix<f64> = inst.theta0.matrix();
        for j in 0..theta.nrows() {
            prop_assert!(theta.row(j).dot(&g.mat().row(j)).abs() <= 1e-10);
        }
    }
}
