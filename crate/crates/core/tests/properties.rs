use proptest::prelude::*;
use qcert::certbounds::{self, CertInputs};
use qcert::linalg::{self, c, max_abs_diff};
use qcert::qchannel::{self, RandomChannelKind, TrustedLossSplit};
use qcert::qstate::{self, DensityOperator};
use qcert::runner::{self, SessionParams, WireMessage};
use qcert::simkit::{AbortReason, ProtocolParams, Verdict};
use qcert::tomography;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn state(d: usize, seed: u64, pure: bool) -> DensityOperator {
    let mut r = rng(seed);
    if pure {
        qstate::haar_pure(&[d], &mut r).to_density()
    } else {
        qstate::random_mixed(&[d], &mut r)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fidelity_symmetric_and_unitarily_invariant(d in 2usize..5, s1: u64, s2: u64, p1: bool, p2: bool) {
        let a = state(d, s1, p1);
        let b = state(d, s2, p2);
        let f = qstate::fidelity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - qstate::fidelity(&b, &a).unwrap()).abs() < 1e-10);
        let u = qstate::haar_unitary(d, &mut rng(s1 ^ s2));
        let fu = qstate::fidelity(&a.conjugate_by(&u).unwrap(), &b.conjugate_by(&u).unwrap()).unwrap();
        prop_assert!((f - fu).abs() < 1e-10);
    }

    #[test]
    fn distance_sandwich(d in 2usize..5, s1: u64, s2: u64, p1: bool, p2: bool) {
        let m = qstate::metrics(&state(d, s1, p1), &state(d, s2, p2)).unwrap();
        let tol = 1e-10;
        prop_assert!(1.0 - m.fidelity.sqrt() <= m.trace_distance + tol);
        prop_assert!(m.trace_distance <= m.sine_distance + tol);
        prop_assert!(m.sine_distance <= 1.0 + tol);
    }

    #[test]
    fn bures_angle_triangle(d in 2usize..5, s1: u64, s2: u64, s3: u64) {
        let (a, b, x) = (state(d, s1, false), state(d, s2, true), state(d, s3, false));
        let ab = qstate::bures_angle(&a, &b).unwrap();
        let bx = qstate::bures_angle(&b, &x).unwrap();
        let ax = qstate::bures_angle(&a, &x).unwrap();
        prop_assert!(ax <= ab + bx + 1e-10);
    }

    #[test]
    fn partial_trace_undoes_tensor(da in 2usize..4, db in 2usize..4, s1: u64, s2: u64) {
        let a = state(da, s1, false);
        let b = state(db, s2, false);
        let ab = a.tensor(&b);
        prop_assert!(max_abs_diff(qstate::partial_trace(&ab, &[0]).unwrap().matrix(), a.matrix()) < 1e-12);
        prop_assert!(max_abs_diff(qstate::partial_trace(&ab, &[1]).unwrap().matrix(), b.matrix()) < 1e-12);
    }

    #[test]
    fn cj_metrics_ignore_overall_scale(d in 2usize..4, n in 1usize..4, seed: u64, p in 0.01f64..1.0) {
        let mut r = rng(seed);
        let ch = qchannel::random_channel(d, d, n, RandomChannelKind::Cptd, &mut r);
        let reference = qchannel::random_channel(d, d, n, RandomChannelKind::Cptp, &mut r);
        let base = qchannel::cj_metrics(&ch, &reference).unwrap();
        let scaled = qchannel::cj_metrics(&ch.scaled(p).unwrap(), &reference).unwrap();
        prop_assert!((base.fidelity - scaled.fidelity).abs() < 1e-12);
        prop_assert!((base.sine - scaled.sine).abs() < 1e-12);
        prop_assert!((base.trace - scaled.trace).abs() < 1e-12);
    }

    #[test]
    fn trace_preserving_channels_transmit_everything(d in 2usize..4, n in 1usize..4, seed: u64) {
        let mut r = rng(seed);
        let ch = qchannel::random_channel(d, d, n, RandomChannelKind::Cptp, &mut r);
        let rho = qstate::random_mixed(&[d, 2], &mut r);
        prop_assert!((qchannel::transmissivity(&ch, &rho, 0).unwrap() - 1.0).abs() < 1e-12);
        let choi = qchannel::choi_state(&ch).unwrap();
        prop_assert!((choi.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trusted_loss_split_rescales_kraus(seed: u64, t in 0.3f64..1.0, frac in 0.0f64..1.0) {
        let mut r = rng(seed);
        let ch = qchannel::random_channel(2, 2, 2, RandomChannelKind::Cptp, &mut r).scaled(t).unwrap();
        let lambda_c = frac * (1.0 - t);
        let split = TrustedLossSplit::new(&ch, lambda_c).unwrap();
        let s = c(1.0 / (1.0 - lambda_c).sqrt(), 0.0);
        for (k, u) in ch.kraus().iter().zip(split.untrusted.kraus()) {
            prop_assert!(max_abs_diff(&(k * s), u) < 1e-12);
        }
        prop_assert!(max_abs_diff(&split.recombine().unwrap().gram(), &ch.gram()) < 1e-12);
    }

    #[test]
    fn certify_monotone(
        f_i in 0.95f64..1.0,
        eps in 0.0f64..0.05,
        eta in 0.2f64..0.9,
        lc_frac in 0.0f64..0.9,
        log_k in 6u32..12,
        bump in 1e-4f64..1e-2,
    ) {
        let k = 10u64.pow(log_k);
        let lambda_c = lc_frac * (1.0 - eta);
        let f = |f_i: f64, eps: f64, k: u64, eta: f64, lc: f64| {
            certbounds::certify(&CertInputs::one_sided(f_i, eps, k, eta, 7.0).with_trusted_loss(lc))
                .unwrap()
                .certified_fidelity
        };
        let base = f(f_i, eps, k, eta, lambda_c);
        prop_assert!(f(f_i, eps + bump, k, eta, lambda_c) <= base);
        prop_assert!(f(f_i - bump, eps, k, eta, lambda_c) <= base);
        prop_assert!(f(f_i, eps, k * 10, eta, lambda_c) >= base);
        let eta_up = (eta + bump).min(1.0 - lambda_c);
        prop_assert!(f(f_i, eps, k, eta_up, lambda_c) >= base);
        let lc_up = (lambda_c + bump).min(1.0 - eta);
        prop_assert!(f(f_i, eps, k, eta, lc_up) >= base);
    }

    #[test]
    fn certify_degenerate_inputs_give_zero(eps in 0.3f64..2.0, eta in 0.05f64..1.0) {
        let res = certbounds::certify(&CertInputs::one_sided(0.99, eps, 1_000_000, eta, 7.0)).unwrap();
        prop_assert_eq!(res.certified_fidelity, 0.0);
    }

    #[test]
    fn exact_tomography_roundtrip(seed: u64) {
        let rho = qstate::random_mixed(&[2, 2], &mut rng(seed));
        let data = tomography::exact_dataset(&rho, &tomography::pauli_settings(), 1000).unwrap();
        let est = tomography::linear_inversion(&data).unwrap();
        prop_assert!(max_abs_diff(&est.matrix, rho.matrix()) < 1e-10);
    }

    #[test]
    fn mle_projection_is_physical(seed: u64, noise in 0.0f64..0.5) {
        let mut r = rng(seed);
        let rho = qstate::random_mixed(&[2, 2], &mut r);
        let g = qstate::random_mixed(&[2, 2], &mut r);
        // Unit-trace Hermitian perturbation that may have negative eigenvalues.
        let bumped = rho.matrix() + (g.matrix() - linalg::identity(4) * c(0.25, 0.0)) * c(noise * 4.0, 0.0);
        let out = tomography::mle_project(&bumped, vec![2, 2]).unwrap();
        prop_assert!(out.eigenvalues()[0] >= -1e-12);
        prop_assert!((out.trace() - 1.0).abs() < 1e-12);
        let same = tomography::mle_project(rho.matrix(), vec![2, 2]).unwrap();
        prop_assert!(max_abs_diff(same.matrix(), rho.matrix()) < 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn local_unitary_optimum_dominates_plain_fidelity(seed: u64) {
        let rho = qstate::random_mixed(&[2, 2], &mut rng(seed));
        let phi = qstate::bell_state(0).unwrap().to_density();
        let opt = tomography::bell_fidelity_opt(&rho).unwrap();
        prop_assert!(opt.f_max >= qstate::fidelity(&rho, &phi).unwrap() - 1e-9);
    }
}

fn verdict_strategy() -> impl Strategy<Value = Verdict> {
    let reason = prop_oneof![
        Just(None),
        Just(Some(AbortReason::MessageLost)),
        (0u64..1000, 1u64..1000).prop_map(|(d, r)| Some(AbortReason::InsufficientDetections {
            detected: d,
            required: r
        })),
        (0.0f64..2.0, 0.0f64..1.0).prop_map(|(e, m)| Some(AbortReason::ExcessiveDeviation { eps_hat: e, eps_max: m })),
        "[ -~]{0,20}".prop_map(|s| Some(AbortReason::InconsistentStatistics { detail: s })),
    ];
    (
        any::<bool>(),
        reason,
        any::<u64>(),
        0.0f64..1.0,
        proptest::option::of(0.0f64..2.0),
        proptest::option::of(-1.0f64..2.0),
        proptest::option::of(0.0f64..1.0),
    )
        .prop_map(|(certified, abort_reason, detected, eta, beta, eps, f)| Verdict {
            certified,
            abort_reason,
            detected,
            eta_s_hat: eta,
            beta_hat: beta,
            eps_hat: eps,
            certified_fidelity: f,
            confidence: f.map(|x| x * 0.5),
        })
}

fn matrix_pairs() -> impl Strategy<Value = Vec<Vec<[f64; 2]>>> {
    proptest::collection::vec(
        any::<[f64; 2]>().prop_filter("finite", |p| p.iter().all(|x| x.is_finite())),
        4,
    )
    .prop_map(|v| vec![vec![v[0], v[1]], vec![v[2], v[3]]])
}

fn message_strategy() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        (
            any::<u32>(),
            proptest::option::of(prop_oneof![Just(runner::Role::Alice), Just(runner::Role::Bob)])
        )
            .prop_map(|(v, role)| WireMessage::Hello { v, role }),
        (
            "[a-z0-9-]{0,12}",
            any::<u64>(),
            0.0f64..1.0,
            1u64..1_000_000,
            0.01f64..1.0,
            proptest::option::of(0.0f64..1.0)
        )
            .prop_map(|(id, seed, f_i, k, t_min, eps_max)| {
                let mut protocol = ProtocolParams::new(k, t_min, 7.0);
                protocol.eps_max = eps_max;
                WireMessage::Params {
                    params: SessionParams {
                        session_id: id,
                        shared_seed: seed,
                        f_i,
                        protocol,
                    },
                }
            }),
        (any::<u64>(), any::<bool>(), proptest::option::of(matrix_pairs()))
            .prop_map(|(k, arrived, state)| WireMessage::Delivery { k, arrived, state }),
        (any::<u64>(), any::<bool>(), proptest::option::of(0u8..2))
            .prop_map(|(k, detected, outcome)| WireMessage::RoundResult { k, detected, outcome }),
        any::<u64>().prop_map(|r| WireMessage::RevealR { r }),
        verdict_strategy().prop_map(|verdict| WireMessage::Abort { verdict }),
        verdict_strategy().prop_map(|verdict| WireMessage::Verdict { verdict }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frame_codec_roundtrip(msg in message_strategy()) {
        let frame = runner::encode_frame(&msg).unwrap();
        let (back, used) = runner::decode_frame(&frame).unwrap();
        prop_assert_eq!(used, frame.len());
        prop_assert_eq!(back, msg);
    }
}

#[test]
fn frames_concatenate_and_split() {
    let msgs = [
        WireMessage::Hello { v: 1, role: None },
        WireMessage::RevealR { r: 7 },
        WireMessage::RoundResult {
            k: 3,
            detected: false,
            outcome: None,
        },
    ];
    let mut stream = Vec::new();
    for m in &msgs {
        stream.extend(runner::encode_frame(m).unwrap());
    }
    let mut rest = &stream[..];
    for m in &msgs {
        let (got, used) = runner::decode_frame(rest).unwrap();
        assert_eq!(&got, m);
        rest = &rest[used..];
    }
    assert!(rest.is_empty());
}
