//! Property tests for the structural invariants.

use proptest::prelude::*;

use exitdiff::backbone::{patchify, timestep_embedding, unpatchify, BackboneConfig, InputShape};
use exitdiff::eval::{mmd_biased, mmd_quality};
use exitdiff::sampling::{strided_timesteps, ExitPolicy};
use exitdiff::schedule::build_linear_schedule;
use exitdiff::tensor::Mat;
use exitdiff::uem::{estimate_uncertainty, exit_decision, Aggregation, UncertaintyRecord};

fn image_cfg(side: usize, patch: usize) -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        hidden_dim: 8,
        num_heads: 2,
        patch_size: patch,
        input_shape: InputShape::Image {
            height: side,
            width: side,
        },
        skip_pairs: vec![],
        share_final_head: true,
    }
}

proptest! {
    #[test]
    fn schedule_tables_satisfy_invariants(
        t_max in 1usize..200,
        beta_start in 0.0..0.5f64,
        spread in 0.0..0.49f64,
    ) {
        let beta_end = (beta_start + spread).min(0.999);
        let s = build_linear_schedule(t_max, beta_start, beta_end).unwrap();
        let mut prev = 1.0f64;
        for t in 1..=t_max {
            prop_assert!(s.beta(t) >= 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) <= 1.0);
            prop_assert!(s.alpha_bar(t) <= prev + 1e-15);
            prev = s.alpha_bar(t);
            let (sc, nc) = (s.signal_coef(t), s.noise_coef(t));
            prop_assert!((sc * sc + nc * nc - 1.0).abs() < 1e-10);
            prop_assert!(s.posterior_vars[t - 1] >= 0.0);
        }
        prop_assert_eq!(s.posterior_vars[0], 0.0);
    }

    #[test]
    fn patchify_roundtrips(
        seed in 0u64..1000,
        pick in 0usize..3,
    ) {
        let (side, patch) = [(8, 4), (8, 2), (6, 3)][pick];
        let cfg = image_cfg(side, patch);
        let mut rng = exitdiff::rng::Rng::new(seed);
        let img = Mat::from_vec(2, side * side, (0..2 * side * side).map(|_| rng.normal()).collect());
        let toks = patchify(&img, &cfg).unwrap();
        prop_assert_eq!(toks.rows, 2 * (side / patch) * (side / patch));
        prop_assert_eq!(toks.cols, patch * patch);
        let back = unpatchify(&toks, &cfg).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn timestep_embeddings_distinct_and_bounded(t in 0usize..2000, dim in 1usize..32) {
        let dim = dim * 2;
        let e = timestep_embedding(t, dim).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>();
        prop_assert!(norm.sqrt() <= (dim as f64).sqrt() + 1e-12);
        if t > 0 {
            let prev = timestep_embedding(t - 1, dim).unwrap();
            prop_assert_ne!(prev, e);
        }
    }

    #[test]
    fn uncertainty_stays_in_open_unit_interval(
        bias in -1000.0..1000.0f64,
        scale in -100.0..100.0f64,
    ) {
        let tokens = Mat::from_vec(3, 4, (0..12).map(|i| scale * (i as f64 - 6.0)).collect());
        let temb = vec![scale; 4];
        let w = vec![scale; 8];
        let rec = estimate_uncertainty(&tokens, &temb, &w, bias, 1, 1, Aggregation::Mean).unwrap();
        for &u in &rec.u_map {
            prop_assert!(u > 0.0 && u < 1.0, "u = {}", u);
        }
        prop_assert!(rec.u_scalar > 0.0 && rec.u_scalar < 1.0);
    }

    #[test]
    fn exit_decision_monotone_in_threshold(
        u in 1e-6..0.999999f64,
        layer in 1usize..13,
        tau_lo in 0.0..2.0f64,
        bump in 0.0..2.0f64,
    ) {
        let rec = UncertaintyRecord { u_map: vec![u], u_scalar: u, layer_index: layer, t: 1 };
        let mk = |tau| ExitPolicy { threshold: tau, aggregation: Aggregation::Mean, min_layer: 1 };
        if exit_decision(&rec, &mk(tau_lo)) {
            prop_assert!(exit_decision(&rec, &mk(tau_lo + bump)));
        }
    }

    #[test]
    fn mmd_symmetry_and_identity(seed in 0u64..500) {
        let mut rng = exitdiff::rng::Rng::new(seed);
        let m = 4 + (seed % 13) as usize;
        let n = 4 + (seed % 7) as usize;
        let a = Mat::from_vec(m, 2, (0..2 * m).map(|_| rng.normal()).collect());
        let b = Mat::from_vec(n, 2, (0..2 * n).map(|_| rng.normal() * 1.3 + 0.2).collect());
        let bw = [0.5, 1.0];
        prop_assert_eq!(
            mmd_quality(&a, &b, &bw).unwrap(),
            mmd_quality(&b, &a, &bw).unwrap()
        );
        prop_assert_eq!(mmd_biased(&a, &a.clone(), &bw).unwrap(), 0.0);
    }

    #[test]
    fn strided_schedules_descend_and_cover_endpoints(
        t_max in 1usize..1500,
        frac in 0.01..1.0f64,
    ) {
        let steps = ((t_max as f64 * frac) as usize).clamp(1, t_max);
        let ts = strided_timesteps(t_max, steps);
        prop_assert_eq!(ts.len(), steps);
        prop_assert_eq!(ts[0], t_max);
        for w in ts.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        prop_assert!(*ts.last().unwrap() >= 1);
        if steps == t_max {
            prop_assert_eq!(*ts.last().unwrap(), 1);
        }
    }
}
