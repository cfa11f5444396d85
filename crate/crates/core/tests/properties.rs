use proptest::prelude::*;

use stefan_pinn::diff::{BatchEvaluator, Jet2, Mlp};
use stefan_pinn::eval::{mean_std, median, rel_l2, EvalGrid};
use stefan_pinn::fd::{solve, Grid};
use stefan_pinn::io::FieldTable;
use stefan_pinn::sampling::{build_curriculum, build_sample_set, lhs_seeded, CurriculumParams};
use stefan_pinn::stefan::*;
use stefan_pinn::trainer::Mask;

fn bin_counts(vals: impl Iterator<Item = f64>, lo: f64, hi: f64, n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for v in vals {
        let k = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
        counts[k.min(n - 1)] += 1;
    }
    counts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_solution_solves_heat_equation_off_interface(t in 0.06f64..0.99, x in 0.0005f64..0.9995, low in any::<bool>()) {
        let cfg = if low { StefanConfig::low_stefan() } else { StefanConfig::baseline() };
        let lam = solve_lambda0(&cfg).unwrap();
        let (hx, ht) = (2e-5, 1e-5);
        let s = lam.position(&cfg, t);
        prop_assume!((x - s).abs() > 1e-3);
        let f = |t: f64, x: f64| exact_theta(&cfg, &lam, t, x);
        let dt = (f(t + ht, x) - f(t - ht, x)) / (2.0 * ht);
        let dxx = (f(t, x + hx) - 2.0 * f(t, x) + f(t, x - hx)) / (hx * hx);
        prop_assert!((dt - cfg.fo * dxx).abs() <= 1e-6, "residual {}", dt - cfg.fo * dxx);
    }

    #[test]
    fn enthalpy_is_monotone(a in -2.0f64..2.0, d in 1e-6f64..1.0, ste in 0.001f64..2.0) {
        let b = a + d;
        prop_assert!(enthalpy(b, ste) >= enthalpy(a, ste));
        prop_assert!(regularized_enthalpy(b, 0.05, ste) > regularized_enthalpy(a, 0.05, ste));
    }

    #[test]
    fn interface_advances(t in 0.05f64..1.0, d in 1e-6f64..0.5, low in any::<bool>()) {
        let cfg = if low { StefanConfig::low_stefan() } else { StefanConfig::baseline() };
        let lam = solve_lambda0(&cfg).unwrap();
        prop_assert!(lam.position(&cfg, t + d) > lam.position(&cfg, t));
        prop_assert!(lam.position(&cfg, 0.05) > 0.0);
    }

    #[test]
    fn erf_monotone_and_bounded(a in -6.0f64..6.0, d in 1e-9f64..1.0) {
        prop_assert!(erf(a + d) >= erf(a));
        prop_assert!(erf(a) > -1.0 - 1e-15 && erf(a) < 1.0 + 1e-15);
        prop_assert!(erf(a).abs() <= 1.0);
    }

    #[test]
    fn jet_product_rule(v in prop::array::uniform8(-3.0f64..3.0)) {
        let a = Jet2::new(v[0], v[1], v[2], v[3]);
        let b = Jet2::new(v[4], v[5], v[6], v[7]);
        let p = a * b;
        let expect = a.dxx * b.v + 2.0 * a.dx * b.dx + a.v * b.dxx;
        prop_assert!((p.dxx - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        prop_assert!((p.dt - (a.dt * b.v + a.v * b.dt)).abs() <= 1e-12 * (1.0 + p.dt.abs()));
    }

    #[test]
    fn jet_value_channel_is_bit_identical(seed in 0u64..1000, t in 0.0f64..1.0, x in 0.0f64..1.0) {
        let net = Mlp::<f64>::xavier(&[2, 20, 20, 20, 1], seed).unwrap();
        prop_assert_eq!(net.forward_jet(t, x).v.to_bits(), net.forward(t, x).to_bits());
        let mut ev = BatchEvaluator::new();
        let pts = [[t, x], [x, t]];
        let vals = ev.values(&net, &pts);
        let jets = ev.jets(&net, &pts);
        for (v, j) in vals.iter().zip(&jets) {
            prop_assert!((v - j.v).abs() < 1e-14);
        }
    }

    #[test]
    fn lhs_stratifies_every_axis(n in 1usize..600, seed in any::<u64>()) {
        let pts = lhs_seeded(n, [(0.05, 1.0), (0.0, 1.0)], seed);
        prop_assert_eq!(pts.len(), n);
        prop_assert!(bin_counts(pts.iter().map(|p| p[0]), 0.05, 1.0, n).iter().all(|&c| c == 1));
        prop_assert!(bin_counts(pts.iter().map(|p| p[1]), 0.0, 1.0, n).iter().all(|&c| c == 1));
    }

    #[test]
    fn sample_sets_stay_in_domain(n0 in 1usize..64, nb in 1usize..64, nr in 1usize..256, seed in any::<u64>()) {
        let cfg = StefanConfig::<f64>::baseline();
        let lam = solve_lambda0(&cfg).unwrap();
        let s = build_sample_set(&cfg, &lam, n0, nb, nr, seed).unwrap();
        prop_assert_eq!((s.initial.len(), s.boundary.len(), s.residual.len()), (n0, nb, nr));
        for p in s.initial.iter().chain(&s.boundary).chain(&s.residual) {
            prop_assert!(p[0] >= 0.05 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0);
        }
        prop_assert!(s.initial_targets.iter().chain(&s.boundary_targets).all(|v| v.is_finite()));
    }

    #[test]
    fn rel_l2_is_a_scaled_metric(v in prop::collection::vec(-5.0f64..5.0, 2..40), a in 0.1f64..10.0) {
        prop_assume!(v.iter().any(|x| *x != 0.0));
        let p: Vec<f64> = v.iter().map(|x| x + 0.1).collect();
        let e = rel_l2(&p, &v).unwrap();
        prop_assert!(e > 0.0);
        prop_assert_eq!(rel_l2(&v, &v).unwrap(), 0.0);
        let sp: Vec<f64> = p.iter().map(|x| x * a).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * a).collect();
        prop_assert!((rel_l2(&sp, &sv).unwrap() - e).abs() <= 1e-12 * e);
    }

    #[test]
    fn field_csv_round_trip(nt in 2usize..8, nx in 2usize..8, seed in any::<u64>()) {
        let cfg = StefanConfig::<f64>::baseline();
        let g = EvalGrid::new(&cfg, nt, nx).unwrap();
        let vals: Vec<f64> = (0..nt * nx)
            .map(|k| f64::from_bits((seed.wrapping_mul(k as u64 + 1) >> 12) | 0x3FF0_0000_0000_0000) - 1.5)
            .collect();
        let t = FieldTable::from_lattice(&g, &vals).unwrap();
        prop_assert_eq!(FieldTable::from_csv(&t.to_csv()).unwrap().values, vals);
    }

    #[test]
    fn aggregation_ignores_seed_order(mut v in prop::collection::vec(0.0f64..1.0, 1..10), k in 0usize..10) {
        let before = (mean_std(&v), median(&v));
        let n = v.len();
        v.rotate_left(k % n);
        prop_assert_eq!(before, (mean_std(&v), median(&v)));
        prop_assert!(before.0.unwrap().1 >= 0.0);
    }

    #[test]
    fn masks_are_bounded_and_increasing(w in -30.0f64..30.0) {
        for m in [Mask::new(1000.0, 0.1, 2.0), Mask::new(1.0, 1.0, 5.0)] {
            let v = m.value(w);
            prop_assert!(v > 0.0 && v < m.alpha);
            prop_assert!(m.value(w + 1.0) > v);
        }
    }
}

#[test]
fn curriculum_for_every_seed_is_nested() {
    let cfg = StefanConfig::<f64>::baseline();
    for seed in 0..5 {
        let s = build_curriculum(&cfg, &CurriculumParams::default(), seed).unwrap();
        assert_eq!(s.stages.len(), 19);
        assert_eq!(s.residual_points.len(), 10_000);
        for w in s.stages.windows(2) {
            assert_eq!(w[1].n_residual, w[0].n_residual + 500);
            // new points live in the new slab only
            for p in &s.residual_points[w[0].n_residual..w[1].n_residual] {
                assert!(p[0] >= w[0].t_end - 1e-15 && p[0] <= w[1].t_end + 1e-15);
            }
        }
    }
}

#[test]
fn fd_maximum_principle_and_interface_tracking() {
    for cfg in [StefanConfig::<f64>::baseline(), StefanConfig::low_stefan()] {
        let grid = Grid::equal_steps(&cfg, 1.0 / 256.0).unwrap();
        let sol = solve(&cfg, &grid).unwrap();
        let (lo, hi) = (cfg.theta_r.min(cfg.theta_l) - 0.02, cfg.theta_r.max(cfg.theta_l) + 0.02);
        for f in &sol.snapshots {
            assert!(f.values.iter().all(|&v| v >= lo && v <= hi), "t = {}", f.time);
        }
        if cfg.ste == 0.5 {
            for f in &sol.snapshots {
                let s = interface_from_samples(&f.values, grid.x0, grid.dx).unwrap();
                let exact = sol.lambda.position(&cfg, f.time);
                assert!((s - exact).abs() <= 2.0 * grid.dx, "t = {}: {s} vs {exact}", f.time);
            }
        }
    }
}

#[test]
fn newton_iterations_stay_small_for_the_baseline() {
    let cfg = StefanConfig::<f64>::baseline();
    for h in [64.0, 128.0, 256.0, 512.0, 1024.0] {
        let sol = solve(&cfg, &Grid::equal_steps(&cfg, 1.0 / h).unwrap()).unwrap();
        let max = *sol.newton_iterations.iter().max().unwrap();
        assert!(max <= 10, "h = 1/{h}: {max}");
    }
}

#[test]
fn newton_converges_at_low_stefan_number() {
    // interface crossings of single nodes need a few more iterations here
    let cfg = StefanConfig::<f64>::low_stefan();
    for h in [64.0, 128.0, 256.0, 512.0] {
        let sol = solve(&cfg, &Grid::equal_steps(&cfg, 1.0 / h).unwrap()).unwrap();
        let its = &sol.newton_iterations;
        let over = its.iter().filter(|&&i| i > 10).count();
        assert!(over * 100 <= its.len(), "h = 1/{h}: {over} of {} steps above 10", its.len());
    }
}
