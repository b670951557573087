//! Property tests for the invariants of schedules, coding, neurons, oracles,
//! graph transforms and the engine.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgsnn::codec::{heaviside, Decoder, Encoder, Scheme};
use sgsnn::engine::{InputEncoding, SnnInstance};
use sgsnn::graph::{
    convert, decompose_layernorm, decompose_maxpool, fold_batchnorm, load_model, normalize_relu, save_model, zoo,
    Family, GraphBuilder, ModelGraph, Op, Tensor,
};
use sgsnn::neurons::{
    if_step, subgrad_neuron_step, FiringMechanism, IfLifParams, IfLifState, SignGdNeuronState, SubgradNeuronState,
};
use sgsnn::oracles::{reference_nonlinearity, Objective, Target};
use sgsnn::replay::{replay_if, replay_lif, replay_signgd, replay_subgrad};
use sgsnn::schedules::{
    solve_signgd_coefficients, solve_subgrad_coefficients, validate_signgd_coefficients,
    validate_subgrad_coefficients, Parameterization, Schedule,
};

fn schedule() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        (0.05f64..5.0).prop_map(|c| Schedule::inverse(c).unwrap()),
        (0.01f64..1.0, 0.9f64..0.9999).prop_map(|(a, g)| Schedule::exponential(a, g).unwrap()),
        (0.001f64..1.0).prop_map(|c| Schedule::constant(c).unwrap()),
    ]
}

/// Schedules accepted by the subgradient family (`eta < 1` throughout).
fn small_schedule() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        (0.05f64..1.9).prop_map(|c| Schedule::inverse(c).unwrap()),
        (0.01f64..0.9, 0.9f64..0.9999).prop_map(|(a, g)| Schedule::exponential(a, g).unwrap()),
        (0.001f64..0.9).prop_map(|c| Schedule::constant(c).unwrap()),
    ]
}

fn target() -> impl Strategy<Value = Target> {
    prop_oneof![
        Just(Target::Relu),
        Just(Target::Relu1),
        (0.0f64..0.5).prop_map(Target::Leaky),
        Just(Target::GeluSigmoid),
        Just(Target::Max2),
        Just(Target::Square),
        Just(Target::MulInvSqrt),
    ]
}

fn operands(t: Target, x: f64, x2: f64) -> Vec<f64> {
    match t {
        Target::Max2 => vec![x, x2],
        Target::MulInvSqrt => vec![x, x2.abs() + 0.1],
        _ => vec![x],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn signgd_solutions_validate(s in schedule()) {
        let c = solve_signgd_coefficients(s, Parameterization::Canonical).unwrap();
        prop_assert!(validate_signgd_coefficients(&c, &s, 10_000, 1e-12));
        if let Schedule::Exponential { .. } = s {
            let u = solve_signgd_coefficients(s, Parameterization::UnitCurrent).unwrap();
            prop_assert!(validate_signgd_coefficients(&u, &s, 10_000, 1e-12));
        }
    }

    #[test]
    fn skewed_reset_gain_is_rejected(s in schedule(), skew in 1.001f64..1.5) {
        let c = solve_signgd_coefficients(s, Parameterization::Canonical).unwrap().with_beta1_factor(skew);
        prop_assert!(!validate_signgd_coefficients(&c, &s, 100, 1e-12));
    }

    #[test]
    fn subgrad_solutions_validate(s in small_schedule()) {
        let c = solve_subgrad_coefficients(s).unwrap();
        prop_assert!(validate_subgrad_coefficients(&c, &s, 300, 1e-10));
    }

    #[test]
    fn signed_decode_stays_in_reachable_range(s in schedule(), bits in prop::collection::vec(any::<bool>(), 1..200)) {
        let mut d = Decoder::new(Scheme::Signed(s));
        let mut reach = 0.0;
        for (k, &b) in bits.iter().enumerate() {
            reach += s.eta(k as u64 + 1);
            let y = d.step(if b { 1.0 } else { 0.0 });
            prop_assert!(y.abs() <= reach * (1.0 + 1e-12));
        }
        prop_assert!((s.reachable_range(bits.len() as u64) - reach).abs() <= 1e-9 * reach.max(1.0));
    }

    #[test]
    fn encoders_replay_through_their_decoders(
        x in -5.0f64..5.0,
        s in schedule(),
        c in 0.0f64..5.0,
        tau in 1.5f64..20.0,
        seed in any::<u64>(),
    ) {
        let steps = 300;
        let signed = [Encoder::float(x, s), Encoder::deterministic(x, s), Encoder::stochastic(x, s, c, seed)];
        for mut e in signed {
            let mut d = Decoder::new(Scheme::Signed(s));
            for _ in 0..steps {
                let y = d.step(e.next());
                prop_assert!((y - e.state().unwrap()).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
        for (mut e, scheme) in [
            (Encoder::rate_deterministic(x), Scheme::Rate),
            (Encoder::ema_deterministic(x, tau), Scheme::Ema { tau }),
        ] {
            let mut d = Decoder::new(scheme);
            for _ in 0..steps {
                let y = d.step(e.next());
                prop_assert!((y - e.state().unwrap()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn binary_rate_and_ema_decodes_stay_in_unit_interval(
        bits in prop::collection::vec(any::<bool>(), 1..300),
        tau in 1.01f64..50.0,
    ) {
        let mut rate = Decoder::new(Scheme::Rate);
        let mut ema = Decoder::new(Scheme::Ema { tau });
        for &b in &bits {
            let s = if b { 1.0 } else { 0.0 };
            let (r, e) = (rate.step(s), ema.step(s));
            prop_assert!((0.0..=1.0 + 1e-15).contains(&r));
            prop_assert!((0.0..=1.0 + 1e-15).contains(&e));
        }
    }

    #[test]
    fn if_spikes_are_scale_invariant(
        theta in 0.1f64..3.0,
        r in 0.1f64..3.0,
        u0 in -1.0f64..1.0,
        c in 0.01f64..100.0,
        currents in prop::collection::vec(-1.0f64..3.0, 1..300),
    ) {
        let p = IfLifParams::if_neuron(theta, r, u0);
        let q = IfLifParams::if_neuron(c * theta, c * r, c * u0);
        let (mut a, mut b) = (IfLifState::new(&p), IfLifState::new(&q));
        for &i in &currents {
            prop_assert_eq!(if_step(&mut a, i, &p), if_step(&mut b, i, &q));
        }
    }

    #[test]
    fn inverse_subgrad_neuron_is_an_if_neuron(currents in prop::collection::vec(-1.0f64..2.0, 1..400)) {
        // with step 1/(t+1) the membrane times (t+1) follows an IF neuron that
        // starts at and fires against u_pre(0), subtracting 1 per spike
        let c = solve_subgrad_coefficients(Schedule::inverse(1.0).unwrap()).unwrap();
        let mut sub = SubgradNeuronState::new(c, 1.0);
        let p = IfLifParams::if_neuron(1.0, 1.0, 1.0);
        let mut ifn = IfLifState::new(&p);
        for &i in &currents {
            prop_assert_eq!(subgrad_neuron_step(&mut sub, i), if_step(&mut ifn, i, &p));
        }
    }

    #[test]
    fn if_and_lif_neurons_run_their_optimizers(
        theta in 0.2f64..3.0,
        r in 0.2f64..3.0,
        u0 in -1.0f64..1.0,
        tau in 1.5f64..30.0,
        u_rest in -0.5f64..0.5,
        currents in prop::collection::vec(-1.0f64..3.0, 1..2000),
    ) {
        let rep = replay_if(&IfLifParams::if_neuron(theta, r, u0), &currents);
        prop_assert!(rep.passed(1e-9), "if: {rep:?}");
        let rep = replay_lif(&IfLifParams::lif_neuron(theta, r, tau, u_rest, u0), &currents);
        prop_assert!(rep.passed(1e-9), "lif: {rep:?}");
    }

    #[test]
    fn subgrad_neuron_runs_its_optimizer(
        s in small_schedule(),
        u_pre0 in -1.0f64..2.0,
        currents in prop::collection::vec(-0.5f64..1.5, 1..2000),
    ) {
        let rep = replay_subgrad(solve_subgrad_coefficients(s).unwrap(), u_pre0, &currents);
        prop_assert!(rep.passed(1e-9), "{rep:?}");
    }

    #[test]
    fn signgd_neuron_runs_its_optimizer(
        s in schedule(),
        unit in any::<bool>(),
        pick in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mech = [
            FiringMechanism::Relu,
            FiringMechanism::LeakyRelu { delta: 0.1 },
            FiringMechanism::Gelu,
            FiringMechanism::Max2,
            FiringMechanism::Square,
            FiringMechanism::MulInvSqrt,
        ][pick];
        let param = if unit && matches!(s, Schedule::Exponential { .. }) { Parameterization::UnitCurrent } else { Parameterization::Canonical };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trains: Vec<Vec<f64>> = (0..mech.arity())
            .map(|_| {
                let p = rng.random_range(0.2..0.8);
                (0..3000).map(|_| f64::from(u8::from(rng.random_bool(p)))).collect()
            })
            .collect();
        let rep = replay_signgd(solve_signgd_coefficients(s, param).unwrap(), mech, &trains).unwrap();
        prop_assert!(rep.passed(1e-9), "{mech} {param:?} {s}: {rep:?}");
    }

    #[test]
    fn canonical_neuron_matches_sign_gradient(seed in any::<u64>(), pick in 0usize..4) {
        // mechanisms whose firing test is the oracle's comparison verbatim
        let mech = [FiringMechanism::Relu, FiringMechanism::LeakyRelu { delta: 0.1 }, FiringMechanism::Max2, FiringMechanism::Square][pick];
        let s = Schedule::inverse(1.0).unwrap();
        let coeffs = solve_signgd_coefficients(s, Parameterization::Canonical).unwrap();
        let d = mech.arity();
        let mut n = SignGdNeuronState::new(coeffs, mech, &vec![1.0; d], &vec![0.0; d]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut f, mut x) = (0.0, vec![0.0; d]);
        let mut cur = vec![0.0; d];
        for t in 1..=2000 {
            for k in 0..d {
                cur[k] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                x[k] -= s.eta(t) * (2.0 * cur[k] - 1.0);
            }
            let spike = n.step(&cur);
            let want = heaviside(f - reference_nonlinearity(Target::from(mech), &x).unwrap());
            prop_assert_eq!(spike, want);
            f -= s.eta(t) * (2.0 * want - 1.0);
            prop_assert_eq!(n.output(), f);
        }
    }

    #[test]
    fn claimed_minimizer_wins_grid_search(t in target(), x in -3.0f64..3.0, x2 in -3.0f64..3.0) {
        let xs = operands(t, x, x2);
        let obj = Objective::SqErr(t);
        let claimed = obj.minimizer(&xs).unwrap();
        prop_assume!(claimed.abs() < 9.9);
        let best = (0..=20_000)
            .map(|k| -10.0 + k as f64 * 1e-3)
            .min_by(|a, b| obj.value(*a, &xs).unwrap().partial_cmp(&obj.value(*b, &xs).unwrap()).unwrap())
            .unwrap();
        prop_assert!((best - claimed).abs() <= 2e-3);
    }

    #[test]
    fn if_and_lif_minimizers_win_grid_search(
        x in -2.0f64..12.0,
        theta in 0.5f64..2.0,
        r in 0.5f64..2.0,
        tau in 2.0f64..20.0,
    ) {
        for obj in [Objective::If { theta, r }, Objective::Lif { theta, r, tau, u_rest: 0.0 }] {
            let claimed = obj.minimizer(&[x]).unwrap();
            let best = (0..=20_000)
                .map(|k| -10.0 + k as f64 * 1e-3)
                .min_by(|a, b| obj.value(*a, &[x]).unwrap().partial_cmp(&obj.value(*b, &[x]).unwrap()).unwrap())
                .unwrap();
            prop_assert!((best - claimed).abs() <= 2e-3, "{obj:?}: grid {best} vs claimed {claimed}");
        }
    }

    #[test]
    fn subgradients_support_the_objective(
        t in target(),
        x in -3.0f64..3.0,
        x2 in -3.0f64..3.0,
        y in -5.0f64..5.0,
        zs in prop::collection::vec(-5.0f64..5.0, 100),
        tau in 2.0f64..20.0,
        u_rest in -0.5f64..0.5,
    ) {
        let xs = operands(t, x, x2);
        for (obj, arg) in [
            (Objective::SqErr(t), xs.clone()),
            (Objective::If { theta: 1.0, r: 1.0 }, vec![x]),
            (Objective::Lif { theta: 1.0, r: 1.0, tau, u_rest }, vec![x]),
        ] {
            let (ly, g) = (obj.value(y, &arg).unwrap(), obj.subgradient(y, &arg).unwrap());
            for &z in &zs {
                prop_assert!(obj.value(z, &arg).unwrap() >= ly + g * (z - y) - 1e-9);
            }
        }
    }

    #[test]
    fn calibration_is_the_signed_row_sum_of_affine_stacks(
        depth in 1usize..=4,
        widths in prop::collection::vec(1usize..6, 5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new();
        let mut x = b.input(&[widths[0]]);
        // composed map A x + c of the affine chain
        let mut a: Vec<Vec<f64>> = (0..widths[0]).map(|i| (0..widths[0]).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let mut c = vec![0.0; widths[0]];
        for k in 0..depth {
            let (n_in, n_out) = (widths[k], widths[k + 1]);
            let w: Vec<f64> = (0..n_in * n_out).map(|_| rng.random_range(-2.0..2.0)).collect();
            let bias: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            a = (0..n_out).map(|i| (0..widths[0]).map(|j| (0..n_in).map(|m| w[i * n_in + m] * a[m][j]).sum()).collect()).collect();
            c = (0..n_out).map(|i| bias[i] + (0..n_in).map(|m| w[i * n_in + m] * c[m]).sum::<f64>()).collect();
            x = b.dense(&x, Tensor::new(vec![n_out, n_in], w).unwrap(), Tensor::new(vec![n_out], bias).unwrap());
        }
        let relu = b.unary(&x, Op::Relu);
        b.output(&relu);
        let g = b.build().unwrap();
        let snn = convert(&g, Family::SignGd, Schedule::inverse(1.0).unwrap(), Parameterization::Canonical).unwrap();
        let Op::Neuron { w, b, .. } = &snn.graph.node(&relu).unwrap().op else { panic!("relu became a neuron") };
        for i in 0..widths[depth] {
            let row_sum: f64 = a[i].iter().sum();
            prop_assert!((w[0].data[i] - row_sum).abs() <= 1e-9 * row_sum.abs().max(1.0));
            prop_assert!((b[0].data[i] - c[i]).abs() <= 1e-9 * c[i].abs().max(1.0));
        }
    }
}

fn max_dev(a: &ModelGraph, b: &ModelGraph, seed: u64) -> f64 {
    zoo::random_inputs(a.input_shape(), 20, seed)
        .iter()
        .map(|x| {
            let (p, q) = (a.predict(x).unwrap(), b.predict(x).unwrap());
            p.iter().zip(&q).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn transforms_preserve_forward_outputs(seed in any::<u64>()) {
        let bn = zoo::random_conv_bn(2, 3, seed).unwrap();
        prop_assert!(max_dev(&bn, &fold_batchnorm(&bn).unwrap(), seed) <= 1e-6);
        let mlp = zoo::random_mlp(&[6, 10, 10, 3], seed).unwrap();
        let calib = zoo::random_inputs(&[6], 16, seed ^ 1);
        prop_assert!(max_dev(&mlp, &normalize_relu(&mlp, &calib).unwrap().0, seed) <= 1e-6);
        let cnn = zoo::random_cnn(3, seed).unwrap();
        prop_assert!(max_dev(&cnn, &decompose_maxpool(&cnn).unwrap(), seed) <= 1e-6);
        let ln = zoo::random_layernorm_block(8, 3, seed).unwrap();
        prop_assert!(max_dev(&ln, &decompose_layernorm(&ln).unwrap(), seed) <= 1e-6);
    }

    #[test]
    fn conversion_keeps_linear_parameters(seed in any::<u64>()) {
        let g = zoo::random_mlp(&[5, 7, 3], seed).unwrap();
        let snn = convert(&g, Family::SignGd, Schedule::inverse(1.0).unwrap(), Parameterization::Canonical).unwrap();
        for n in g.nodes().iter().filter(|n| n.op.is_linear()) {
            prop_assert_eq!(&snn.graph.node(&n.id).unwrap().op, &n.op);
        }
    }

    #[test]
    fn runs_are_deterministic(seed in any::<u64>(), c in 0.5f64..4.0) {
        let g = zoo::random_mlp(&[4, 6, 2], seed).unwrap();
        let snn = convert(&g, Family::SignGd, Schedule::inverse(1.0).unwrap(), Parameterization::Canonical).unwrap();
        let x = &zoo::random_inputs(&[4], 1, seed)[0];
        let enc = InputEncoding::Stochastic { c, seed };
        let a = SnnInstance::new(&snn).unwrap().run(x, 200, enc).unwrap();
        let b = SnnInstance::new(&snn).unwrap().run(x, 200, enc).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn model_files_round_trip(seed in any::<u64>()) {
        // files hold f32, so weights are pre-rounded to survive the trip exactly
        let g = zoo::random_mlp(&[3, 4, 2], seed).unwrap();
        let nodes = g
            .into_nodes()
            .into_iter()
            .map(|mut n| {
                if let Op::Dense { weight, bias } = &mut n.op {
                    for v in weight.data.iter_mut().chain(bias.data.iter_mut()) {
                        *v = f64::from(*v as f32);
                    }
                }
                n
            })
            .collect();
        let g = ModelGraph::new(nodes).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&g, &path).unwrap();
        prop_assert_eq!(load_model(&path).unwrap(), g);
    }
}

#[test]
fn reachable_range_is_tight_for_constant_trains() {
    for s in [Schedule::inverse(1.0).unwrap(), Schedule::exponential(0.15, 0.965).unwrap(), Schedule::constant(0.1).unwrap()] {
        for t in 1..=64u64 {
            let reach = s.reachable_range(t);
            let up = Decoder::decode(Scheme::Signed(s), &vec![0.0; t as usize]);
            let down = Decoder::decode(Scheme::Signed(s), &vec![1.0; t as usize]);
            assert!((up[t as usize - 1] - reach).abs() <= 1e-12 * reach.max(1.0), "{s} t={t}");
            assert!((down[t as usize - 1] + reach).abs() <= 1e-12 * reach.max(1.0), "{s} t={t}");
        }
    }
}

#[test]
fn deterministic_encoder_settles_within_one_step() {
    let s = Schedule::inverse(1.0).unwrap();
    for k in -100..=100 {
        let x = k as f64 / 10.0;
        let mut e = Encoder::deterministic(x, s);
        let mut settled = false;
        let mut prev_sign = None;
        for t in 1..=60_000u64 {
            let before = e.state().unwrap();
            e.next();
            let sign = before >= x;
            if prev_sign.is_some_and(|p| p != sign) {
                settled = true;
            }
            prev_sign = Some(sign);
            if settled {
                let err = (e.state().unwrap() - x).abs();
                assert!(err <= s.eta(t) + 1.0 / t as f64, "x={x} t={t} err={err}");
            }
        }
        assert!(settled, "x={x} never crossed its target");
    }
}
