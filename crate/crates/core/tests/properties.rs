use proptest::prelude::*;

use volex_core::expansion::{ExpansionCoeffs, OuNoise};
use volex_core::hjb::{solve_w_lambda, PdeGrid};
use volex_core::model::rate_cost;
use volex_core::montecarlo::{liquidation_start, simulate_adaptive};
use volex_core::strategies::{exact_vwap, expected_vwap};
use volex_core::{pathwise_cost, ExecutionSchedule, MarketParams, TimeFunction, TimeGrid, VolumeModel, VolumePath};

fn coeffs(eps: f64) -> ExpansionCoeffs {
    ExpansionCoeffs::new(TimeFunction::constant(100.0), 1.0, eps)
        .unwrap()
        .with_quadrature(200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cost_scales_quadratically(
        rates in prop::collection::vec(0.0f64..50.0, 11),
        vols in prop::collection::vec(1.0f64..500.0, 11),
        c in 0.1f64..10.0,
    ) {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let base = rate_cost(&rates, &vols, &g).unwrap();
        let scaled: Vec<f64> = rates.iter().map(|r| c * r).collect();
        let cost = rate_cost(&scaled, &vols, &g).unwrap();
        prop_assert!((cost - c * c * base).abs() <= 1e-12 * cost.max(1e-300));
    }

    #[test]
    fn first_order_term_is_linear_in_z(
        rho in 0.1f64..5.0,
        sigma in 0.05f64..0.5,
        t in 0.0f64..0.9,
        z1 in -1.0f64..1.0,
        z2 in -1.0f64..1.0,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let noise = OuNoise::new(rho, sigma).unwrap();
        let c = coeffs(0.3);
        let lhs = c.i1_ou(&noise, t, a * z1 + b * z2).unwrap();
        let rhs = a * c.i1_ou(&noise, t, z1).unwrap() + b * c.i1_ou(&noise, t, z2).unwrap();
        let scale = c.i1_ou(&noise, t, 1.0).unwrap().abs() * 4.0;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        let lhs = c.i1_generic(&noise, t, a * z1 + b * z2).unwrap();
        let rhs = a * c.i1_generic(&noise, t, z1).unwrap() + b * c.i1_generic(&noise, t, z2).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
    }

    #[test]
    fn second_order_term_is_even_in_z(rho in 0.1f64..5.0, t in 0.0f64..0.9, z in 0.0f64..1.0) {
        let noise = OuNoise::new(rho, 0.3).unwrap();
        let c = coeffs(0.3);
        prop_assert_eq!(c.i2_ou(&noise, t, z).unwrap(), c.i2_ou(&noise, t, -z).unwrap());
    }

    #[test]
    fn same_seed_same_path(seed in any::<u64>(), index in 0u64..1000, eps in 0.0f64..1.0) {
        let g = TimeGrid::new(1.0, 50).unwrap();
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), eps, 2.0, 0.3).unwrap();
        let a = m.sample_path_stream(&g, seed, index);
        let b = m.sample_path_stream(&g, seed, index);
        prop_assert_eq!(&a, &b);
        let other = m.sample_path_stream(&g, seed, index + 1);
        prop_assert_ne!(a.noise(), other.noise());
    }

    #[test]
    fn normalized_schedules_sell_off(shape in prop::collection::vec(0.01f64..10.0, 33), x0 in 0.1f64..1e4) {
        let g = TimeGrid::new(2.0, 32).unwrap();
        let s = ExecutionSchedule::normalized(shape, x0, g).unwrap();
        prop_assert!((s.executed() - x0).abs() <= 1e-12 * x0);
        prop_assert!(s.sells_off(1e-12));
    }

    #[test]
    fn exact_vwap_is_pathwise_cheapest(seed in any::<u64>(), eps in 0.0f64..1.0, rho in 0.3f64..5.0) {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = MarketParams::reference();
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), eps, rho, 0.3).unwrap();
        let path = m.sample_path(&g, seed);
        let ant = pathwise_cost(&exact_vwap(&p, &path).unwrap(), &path).unwrap();
        let stat = pathwise_cost(&expected_vwap(&p, &m, &g).unwrap(), &path).unwrap();
        prop_assert!(ant <= stat * (1.0 + 1e-12));
    }

    #[test]
    fn adaptive_rule_is_causal(seed in any::<u64>(), k in 0usize..100, eps in 0.0f64..1.0, bump in -0.5f64..0.5) {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = MarketParams::reference();
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), eps, 2.0, 0.3).unwrap();
        let table = coeffs(eps).ou_table(&OuNoise::new(2.0, 0.3).unwrap(), &g).unwrap();
        let path = m.sample_path(&g, seed);
        let mut v = path.volume().to_vec();
        let mut z = path.noise().to_vec();
        for j in k + 1..=g.n_steps() {
            z[j] += bump;
            v[j] *= (eps * bump).exp();
        }
        let changed = VolumePath::new(g, v, z);
        let a = simulate_adaptive(&p, &table, &path, 0.02).unwrap();
        let b = simulate_adaptive(&p, &table, &changed, 0.02).unwrap();
        let upto = k.min(liquidation_start(&g, 0.02) - 1);
        prop_assert_eq!(&a.schedule.rates()[..=upto], &b.schedule.rates()[..=upto]);
    }

    #[test]
    fn adaptive_rule_sells_off_without_negative_rates(seed in any::<u64>(), eps in 0.0f64..1.0, rho in 0.3f64..5.0) {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let p = MarketParams::reference();
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), eps, rho, 0.3).unwrap();
        let table = coeffs(eps).ou_table(&OuNoise::new(rho, 0.3).unwrap(), &g).unwrap();
        let run = simulate_adaptive(&p, &table, &m.sample_path(&g, seed), 0.02).unwrap();
        prop_assert_eq!(run.schedule.terminal_holdings(), 0.0);
        prop_assert!((run.schedule.executed() - p.x0).abs() <= 1e-9 * p.x0);
        prop_assert!(run.schedule.rates().iter().all(|r| *r >= 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn value_function_increases_with_lambda(l1 in 0.5f64..50.0, factor in 1.01f64..20.0, eps in 0.0f64..0.5) {
        let m = VolumeModel::perturbed_ou(TimeFunction::constant(100.0), eps, 2.0, 0.3).unwrap();
        let g = PdeGrid::new(1.0, 100, 41).unwrap();
        let lo = solve_w_lambda(&m, l1, &g).unwrap();
        let hi = solve_w_lambda(&m, l1 * factor, &g).unwrap();
        for i in 0..lo.times().len() {
            for (a, b) in lo.slice(i).iter().zip(hi.slice(i)) {
                prop_assert!(b >= a);
            }
        }
    }
}
