use std::f64::consts::PI;
use std::path::Path;

use proptest::prelude::*;

use qflow::bubbles::{bubble_mass, detect_concentration, Bubble, CRITICAL_CURVATURE};
use qflow::energy::{adams_deficit, conformal_volume, energy, energy_gradient, sublevel_diagnostics, ProblemData};
use qflow::flow::{run, step, FlowOptions, FlowState};
use qflow::grid::{
    ball_integral, forward_transform, inner_product, integrate, inverse_transform, make_grid, ScalarField,
};
use qflow::io::config::parse_config;
use qflow::io::field::{decode_field, encode_field};
use qflow::operators::{paneitz, solve_paneitz};
use qflow::synth::{cosine_datum, smooth_random_field};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, failure_persistence: None, ..ProptestConfig::default() }
}

fn field(n: usize, period: f64, seed: u64, max_mode: i64, amplitude: f64) -> ScalarField {
    smooth_random_field(make_grid(n, period).unwrap(), seed, max_mode, amplitude)
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn transform_round_trip(seed in any::<u64>(), n in prop::sample::select(vec![8usize, 16]), amp in 0.01f64..100.0) {
        let f = field(n, 1.0, seed, 4, amp);
        let back = inverse_transform(&forward_transform(&f)).unwrap();
        prop_assert!(back.max_abs_diff(&f) <= 1e-12 * f.max_abs());
    }

    #[test]
    fn integral_of_one_is_the_volume(period in 0.05f64..20.0) {
        let g = make_grid(8, period).unwrap();
        let v = integrate(&ScalarField::constant(g, 1.0));
        prop_assert!((v - period.powi(4)).abs() <= 4.0 * f64::EPSILON * period.powi(4));
    }

    #[test]
    fn ball_integral_is_monotone(seed in any::<u64>(), x in prop::array::uniform4(0.0f64..1.0)) {
        let f = field(8, 1.0, seed, 2, 1.0).map(|v| v.exp());
        let mut last = 0.0;
        for i in 1..=8 {
            let b = ball_integral(&f, &x, 0.0625 * i as f64).unwrap();
            prop_assert!(b >= last);
            last = b;
        }
    }

    #[test]
    fn parseval(seed in any::<u64>()) {
        let f = field(8, 1.7, seed, 3, 2.0);
        let lhs = integrate(&f.map(|v| v * v));
        let rhs = f.grid().volume() * forward_transform(&f).power_sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs);
    }

    #[test]
    fn bilaplacian_inverts_on_mean_free_fields(seed in any::<u64>(), period in 0.5f64..4.0) {
        let u = field(8, period, seed, 3, 1.0);
        let u = u.add_scalar(-u.mean());
        let back = solve_paneitz(&paneitz(&u), 0.0).unwrap();
        prop_assert!(back.max_abs_diff(&u) <= 1e-10 * u.max_abs());
    }

    #[test]
    fn bilaplacian_is_self_adjoint_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>()) {
        let u = field(8, 1.0, s1, 3, 1.0);
        let v = field(8, 1.0, s2, 3, 1.0);
        let a = inner_product(&paneitz(&u), &v);
        let b = inner_product(&u, &paneitz(&v));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0));
        prop_assert!(inner_product(&paneitz(&u), &u) >= -1e-12);
    }

    #[test]
    fn energy_is_translation_invariant(seed in any::<u64>(), c in -5.0f64..5.0, k in 1.0f64..150.0) {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(cosine_datum(g, k, 0.3, [1, 0, 1, 0]));
        let u = smooth_random_field(g, seed, 2, 0.3);
        let e0 = energy(&u, &p).unwrap().total;
        let e1 = energy(&u.add_scalar(c), &p).unwrap().total;
        prop_assert!((e1 - e0).abs() <= 1e-9 * e0.abs().max(1.0));
    }

    #[test]
    fn gradient_has_zero_mean(seed in any::<u64>(), k in 1.0f64..150.0) {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(cosine_datum(g, k, 0.5, [0, 1, 0, 2]));
        let u = smooth_random_field(g, seed, 2, 0.5);
        let grad = energy_gradient(&u, &p).unwrap();
        prop_assert!(integrate(&grad).abs() <= 1e-10 * (1.0 + k));
    }

    #[test]
    fn weighted_moment_lower_bound(seed in any::<u64>(), amp in 0.0f64..3.0, period in 0.5f64..2.0) {
        let u = field(8, period, seed, 3, amp);
        let (_, y) = sublevel_diagnostics(&u, 1.0).unwrap();
        prop_assert!(y >= -(-1.0f64).exp() * period.powi(4) / 4.0);
        prop_assert!(adams_deficit(&u).is_finite());
    }

    #[test]
    fn bubble_mass_profile(lambda in 0.1f64..50.0, k in 1.0f64..300.0, r1 in 0.0f64..5.0, r2 in 0.0f64..5.0) {
        let b = Bubble::new([0.0; 4], lambda, k).unwrap();
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let total = bubble_mass(&b, f64::INFINITY);
        prop_assert_eq!(total, CRITICAL_CURVATURE / k);
        prop_assert!(bubble_mass(&b, lo) <= bubble_mass(&b, hi));
        prop_assert!(bubble_mass(&b, hi) <= total * (1.0 + 1e-15));
        // the profile depends on λR only
        let unit = Bubble::new([0.0; 4], 1.0, k).unwrap();
        let scaled = bubble_mass(&unit, lambda * hi);
        prop_assert!((scaled - bubble_mass(&b, hi)).abs() <= 1e-12 * total);
    }

    #[test]
    fn field_files_round_trip_bitwise(bits in prop::collection::vec(any::<u64>(), 4096), period in 1e-3f64..1e3) {
        let values: Vec<f64> = bits
            .iter()
            .map(|&b| f64::from_bits(b))
            .map(|v| if v.is_finite() { v } else { 0.0 })
            .collect();
        let u = ScalarField::new(make_grid(8, period).unwrap(), values).unwrap();
        let back = decode_field(&encode_field(&u)).unwrap();
        prop_assert_eq!(back.grid(), u.grid());
        prop_assert!(back.values().iter().zip(u.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resolved_config_replays(t_end in 1e-6f64..10.0, n in prop::sample::select(vec![8usize, 16, 32]), seed in 0..=i64::MAX as u64) {
        // TOML integers are signed 64 bit
        let text = format!("mode = \"flow\"\nseed = {seed}\nproblem = \"constant:10\"\n[grid]\nn = {n}\n[flow]\nt_end = {t_end:e}\n");
        let cfg = parse_config(&text, &[], Path::new("/tmp")).unwrap();
        prop_assert_eq!(cfg.flow().t_end, t_end);
        let again = parse_config(&cfg.to_toml(), &[], Path::new("/tmp")).unwrap();
        prop_assert_eq!(again.flow().t_end.to_bits(), t_end.to_bits());
        prop_assert_eq!(again.to_toml(), cfg.to_toml());
    }
}

proptest! {
    #![proptest_config(cases(8))]

    #[test]
    fn uniform_density_has_no_concentration(c in -3.0f64..3.0, k in 20.0f64..400.0) {
        let g = make_grid(8, 1.0).unwrap();
        let sites = detect_concentration(&ScalarField::constant(g, c), k, PI * PI / k).unwrap();
        prop_assert!(sites.iter().all(|s| s.radius > 0.125 && !s.concentrated));
    }

    #[test]
    fn accepted_steps_dissipate_and_conserve_volume(seed in any::<u64>(), dt in 1e-6f64..1e-3) {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(cosine_datum(g, 10.0, 0.2, [1, 0, 0, 0]));
        let u = smooth_random_field(g, seed, 1, 0.2);
        let state = FlowState::new(u, p, dt).unwrap();
        let v0 = state.conformal_volume();
        let r = step(&state, &FlowOptions::default()).unwrap();
        prop_assert!(r.energy_after <= r.energy_before + 1e-12 * (1.0 + r.energy_before.abs()));
        prop_assert!((conformal_volume(&r.state.u).unwrap() / v0 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn trajectories_are_monotone_and_end_in_a_declared_outcome(seed in any::<u64>(), amp in 0.0f64..0.3) {
        let g = make_grid(8, 1.0).unwrap();
        let p = ProblemData::new(ScalarField::constant(g, 10.0));
        let u = smooth_random_field(g, seed, 1, amp);
        let opts = FlowOptions { t_end: 2e-3, ..FlowOptions::default() };
        let traj = run(u, p, &opts).unwrap();
        for w in traj.rows.windows(2) {
            prop_assert!(w[1].energy <= w[0].energy + 1e-12 * (1.0 + w[0].energy.abs()));
            prop_assert!((w[1].conformal_volume / w[0].conformal_volume - 1.0).abs() <= 1e-12);
        }
        prop_assert!(["reached_t_end", "converged_to_steady", "energy_diverging", "step_underflow"]
            .contains(&traj.outcome.as_str()));
    }
}
