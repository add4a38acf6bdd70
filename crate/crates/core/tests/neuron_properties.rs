use arlif::neurons::{
    r_decay, soft_reset_closed_form, step, unroll, AdaptiveVariant, NeuronParams, NeuronState, ResetMode,
};
use arlif::tensor::{sigmoid, tanh};
use arlif::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_state(rng: &mut ChaCha8Rng, n: usize) -> (NeuronState, Tensor) {
    let mut draw = |lo: f64, hi: f64| Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect());
    let u = draw(-2.0, 2.0);
    let r = draw(-3.0, 3.0);
    let x = draw(-3.0, 3.0);
    (NeuronState { u, r }, x)
}

fn random_params(rng: &mut ChaCha8Rng, mode: ResetMode) -> NeuronParams {
    NeuronParams {
        k_tau: rng.gen_range(0.05..0.95),
        v_th_base: rng.gen_range(0.5..1.5),
        rho: rng.gen_range(0.5..1.5),
        alpha: rng.gen_range(0.0..=1.0),
        beta: rng.gen_range(-1.0..=1.0),
        ..NeuronParams::with_mode(mode)
    }
}

#[test]
fn hard_reset_zeroes_fired_and_keeps_silent() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = random_params(&mut rng, ResetMode::Hard);
        let (state, x) = random_state(&mut rng, 1000);
        let (next, tr) = step(&state, &x, &p).unwrap();
        for i in 0..1000 {
            let expect = if tr.s.data()[i] == 1.0 { 0.0 } else { tr.h.data()[i] };
            assert_eq!(next.u.data()[i], expect);
        }
    }
}

#[test]
fn soft_reset_subtracts_rho_times_spike() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = random_params(&mut rng, ResetMode::Soft);
        let (state, x) = random_state(&mut rng, 1000);
        let (next, tr) = step(&state, &x, &p).unwrap();
        for i in 0..1000 {
            assert_eq!(next.u.data()[i], tr.h.data()[i] - p.rho * tr.s.data()[i]);
        }
    }
}

/// `v_r` rebuilt from the definitions, without going through the library's step.
fn reference_v_r(r_prev: f64, x: f64, s: f64, alpha: f64) -> f64 {
    let gain = sigmoid(alpha * x);
    let factor = if r_prev >= 0.0 { gain } else { 1.0 - gain };
    let feedback = if s == 1.0 { sigmoid(x) } else { -sigmoid(x) };
    factor * r_prev + feedback
}

#[test]
fn adaptive_reset_subtracts_accumulator_and_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = random_params(&mut rng, ResetMode::Adaptive);
        let (state, x) = random_state(&mut rng, 1000);
        let (next, tr) = step(&state, &x, &p).unwrap();
        let v_r = tr.v_r.as_ref().unwrap();
        for i in 0..1000 {
            let (xi, ri) = (x.data()[i], state.r.data()[i]);
            let h = p.k_tau * state.u.data()[i] + xi;
            let v_th = p.beta * tanh(xi) + p.v_th_base;
            let s = if h - v_th > 0.0 { 1.0 } else { 0.0 };
            let vr = reference_v_r(ri, xi, s, p.alpha);
            assert_eq!(tr.s.data()[i], s);
            assert_eq!(v_r.data()[i], vr);
            assert_eq!(next.u.data()[i], h - (vr + v_th));
            assert_eq!(next.r.data()[i], vr);
        }
    }
}

#[test]
fn squashed_variant_resets_by_threshold_plus_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = NeuronParams {
        adaptive_variant: AdaptiveVariant::Squashed,
        ..random_params(&mut rng, ResetMode::Adaptive)
    };
    let (state, x) = random_state(&mut rng, 2000);
    let (next, tr) = step(&state, &x, &p).unwrap();
    let v_r = tr.v_r.unwrap();
    for i in 0..2000 {
        let squashed = sigmoid(v_r.data()[i]);
        assert!(squashed > 0.0 && squashed < 1.0);
        assert_eq!(next.u.data()[i], tr.h.data()[i] - (tr.v_th_t.data()[i] + squashed));
    }
}

#[test]
fn fixed_alpha_and_threshold_stay_valid() {
    let p = NeuronParams {
        alpha_fixed: true,
        threshold_fixed: true,
        ..NeuronParams::default()
    };
    p.validate().unwrap();
    assert!(!p.learns_alpha() && !p.learns_beta());
    assert_eq!(p.effective_alpha(0.3), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (state, x) = random_state(&mut rng, 500);
    let (_, tr) = step(&state, &x, &p).unwrap();
    assert!(tr.v_th_t.data().iter().all(|&v| v == p.v_th_base));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn soft_reset_matches_closed_form(
        inputs in prop::collection::vec(-2.0f64..=2.0, 1..=8),
        k_index in 0usize..3,
    ) {
        let k = [0.25, 0.5, 0.9][k_index];
        let p = NeuronParams { k_tau: k, v_th_base: 1.0, rho: 1.0, ..NeuronParams::with_mode(ResetMode::Soft) };
        let t = inputs.len();
        let (spikes, _) = unroll(&Tensor::new(vec![t, 1], inputs.clone()).unwrap(), &p).unwrap();
        prop_assert_eq!(spikes.data().to_vec(), soft_reset_closed_form(&inputs, 1.0, k));
    }

    #[test]
    fn threshold_stays_within_beta_band(
        xs in prop::collection::vec(-50.0f64..50.0, 1..64),
        beta in -1.0f64..=1.0,
    ) {
        let p = NeuronParams { beta, ..NeuronParams::default() };
        let n = xs.len();
        let (_, tr) = step(&NeuronState::zeros(&[n]), &Tensor::from_vec(xs), &p).unwrap();
        for &v in tr.v_th_t.data() {
            prop_assert!(v >= 1.0 - beta.abs() && v <= 1.0 + beta.abs());
            prop_assert!((0.0..=2.0).contains(&v));
        }
    }

    #[test]
    fn accumulator_decay_contracts(
        r in prop::collection::vec(-10.0f64..10.0, 1..32),
        x_seed in any::<u64>(),
        alpha in 0.0f64..=1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(x_seed);
        let x: Vec<f64> = r.iter().map(|_| rng.gen_range(-20.0..20.0)).collect();
        let out = r_decay(&Tensor::from_vec(r.clone()), &Tensor::from_vec(x), alpha).unwrap();
        for (o, ri) in out.data().iter().zip(&r) {
            prop_assert!(o.abs() <= ri.abs());
        }
    }

    #[test]
    fn spikes_are_binary_in_every_mode(
        seed in any::<u64>(),
        mode_index in 0usize..3,
        steps in 1usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = [ResetMode::Hard, ResetMode::Soft, ResetMode::Adaptive][mode_index];
        let p = random_params(&mut rng, mode);
        let data: Vec<f64> = (0..steps * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (spikes, traces) = unroll(&Tensor::new(vec![steps, 16], data).unwrap(), &p).unwrap();
        prop_assert!(spikes.is_binary());
        prop_assert!(traces.iter().all(|tr| tr.s.is_binary()));
    }
}
