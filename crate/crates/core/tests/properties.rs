//! Pathwise properties of the recursions, checked on random inputs.

use critrec_core::chains::{
    simulate, simulate_coupled_sandwich, step_affine, step_extremal, step_letac, step_scaled, Flow, FnObserver, Transition,
};
use critrec_core::ladder::{accumulate_cycles, Functional, LadderOptions};
use critrec_core::measure::{occupation, Geometry};
use critrec_core::model::reference::{m1, m2};
use critrec_core::model::{sample_innovation, ChainKind};
use critrec_core::{LogHistogram, Purpose, RandomStream, Scaled, StateRange};
use proptest::prelude::*;

fn small_geometry() -> Geometry {
    Geometry { log_min: -8.0, log_max: 64.0, ..Geometry::default() }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn letac_and_extremal_steps_are_monotone(
        x in -50.0f64..50.0, gap in 0.0f64..50.0,
        log_a in -3.0f64..3.0, b in -5.0f64..5.0, c in 0.0f64..5.0, d in 0.01f64..5.0,
    ) {
        let (a, y) = (log_a.exp(), x + gap);
        prop_assert!(step_letac(x, a, b, c) <= step_letac(y, a, b, c));
        prop_assert!(step_extremal(x, a, d) <= step_extremal(y, a, d));
    }

    #[test]
    fn scaled_step_matches_native_step(x in -1e6f64..1e6, seed in 0u64..1000) {
        let m = m2::<f64>();
        let mut rng = RandomStream::substream(seed, Purpose::Test, 0);
        let inn = sample_innovation(&m, &mut rng);
        let s = step_scaled(ChainKind::Letac, Scaled::new(x), &inn, StateRange::Extended).value();
        prop_assert_eq!(s, step_letac(x, inn.a, inn.b, inn.c));
        let s = step_scaled(ChainKind::Affine, Scaled::new(x), &inn, StateRange::Extended).value();
        prop_assert_eq!(s, step_affine(x, inn.a, inn.b));
    }

    #[test]
    fn affine_difference_is_product_of_multipliers(x in -10.0f64..10.0, gap in 0.1f64..10.0, seed in 0u64..1000) {
        let m = m1::<f64>();
        let mut rng = RandomStream::substream(seed, Purpose::Test, 1);
        let (mut u, mut v, mut log_prod) = (x, x + gap, 0.0f64);
        // running bound on the rounding error of v - u
        let mut err = 0.0f64;
        for _ in 0..200 {
            let inn = sample_innovation(&m, &mut rng);
            let (nu, nv) = (step_affine(u, inn.a, inn.b), step_affine(v, inn.a, inn.b));
            err = inn.a * err + 2.0 * f64::EPSILON * (inn.a * (u.abs() + v.abs()) + nu.abs() + nv.abs());
            (u, v) = (nu, nv);
            log_prod += inn.log_a;
        }
        let expected = log_prod.exp() * gap;
        let tol = 1e-9 * expected + err;
        prop_assert!(((v - u).abs() - expected).abs() <= tol, "{} vs {}", (v - u).abs(), expected);
    }

    #[test]
    fn letac_paths_contract_stay_supported_and_dominate_the_product(
        x in 0.01f64..100.0, gap in 0.0f64..100.0, seed in 0u64..1000,
    ) {
        let m = m2::<f64>();
        let mut rng = RandomStream::substream(seed, Purpose::Test, 2);
        let (mut u, mut v, mut log_prod) = (x, x + gap, 0.0f64);
        for _ in 0..500 {
            let inn = sample_innovation(&m, &mut rng);
            u = step_letac(u, inn.a, inn.b, inn.c);
            v = step_letac(v, inn.a, inn.b, inn.c);
            log_prod += inn.log_a;
            let bound = log_prod.exp();
            prop_assert!((v - u).abs() <= bound * gap * (1.0 + 1e-12) + 1e-12 * v.abs());
            prop_assert!(u >= m.delta && v >= m.delta);
            prop_assert!(u >= bound * x * (1.0 - 1e-12));
        }
    }

    #[test]
    fn sandwich_is_ordered_at_every_index(x0 in 0.0f64..20.0, seed in 0u64..1000) {
        let m = m2::<f64>();
        let mut rng = RandomStream::substream(seed, Purpose::Sandwich, 0);
        let p = simulate_coupled_sandwich(&m, x0, 2000, &mut rng).unwrap();
        for i in 0..p.letac.len() {
            prop_assert!(p.lower[i] <= p.letac[i] && p.letac[i] <= p.upper[i], "index {}", i);
        }
    }

    #[test]
    fn histogram_of_a_path_is_the_merge_of_its_pieces(n in 1u64..5000, cut_frac in 0.0f64..1.0, seed in 0u64..1000) {
        let m = m1::<f64>();
        let g = small_geometry();
        let whole = occupation(&m, 0.0, n, &mut RandomStream::substream(seed, Purpose::Test, 3), g, StateRange::Extended).unwrap();
        let mut path = Vec::new();
        let obs = FnObserver(|t: &Transition<'_, f64>| {
            path.push(t.x);
            Flow::Continue
        });
        simulate(&m, 0.0, n, &mut RandomStream::substream(seed, Purpose::Test, 3), StateRange::Extended, obs).unwrap();
        let cut = ((n as f64) * cut_frac) as usize;
        let mut a = LogHistogram::new(g).unwrap();
        let mut b = LogHistogram::new(g).unwrap();
        path[..cut].iter().for_each(|&x| a.record(x));
        path[cut..].iter().for_each(|&x| b.record(x));
        a.merge(&b).unwrap();
        prop_assert_eq!(a, whole);
    }
}

#[test]
fn ladder_epochs_strictly_decrease() {
    let m = m2::<f64>();
    let opts = LadderOptions { cycle_cap: 1_000_000, batches: 10, geometry: small_geometry(), range: StateRange::Extended };
    for seed in 0..4 {
        let mut rng = RandomStream::substream(seed, Purpose::Ladder, 0);
        let run = accumulate_cycles(&m, Scaled::new(0.5), 2000, &[Functional::One], &mut rng, &opts).unwrap();
        assert_eq!(run.epoch_order_violations, 0);
        assert_eq!(run.log_m.count(), run.cycles_completed);
    }
}

#[test]
fn f32_chain_runs_past_the_native_range() {
    let m32 = m1::<f32>();
    let mut rng = RandomStream::substream(11, Purpose::Test, 0);
    let h = occupation(&m32, 0.0f32, 100_000, &mut rng, Geometry::default(), StateRange::Extended).unwrap();
    assert_eq!(h.total_steps(), 100_000);
    assert_eq!(h.overflow(), 0);
}
