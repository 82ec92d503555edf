use gdec_core::decoders::{adjust, m3id_step, select_greedy, DecoderKind, FrameMode};
use gdec_core::math::log_normalize;
use gdec_core::metrics::{extract_objects, render_matches, Lexicon};
use gdec_core::mock::{open_mock_session, FixedTable, MockScenario};
use gdec_core::pdm::{distance, DistanceKind};
use gdec_core::preference::{dpo_loss, DpoInputs};
use gdec_core::simulator::{frame_at, SimSpec};
use gdec_core::{decode, decode_from, DecoderConfig, LogitFrame};
use proptest::prelude::*;

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0f64..8.0, n)
}

fn frame_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|n| (logits(n), logits(n)))
}

fn probs(z: &[f64]) -> Vec<f64> {
    log_normalize(z).iter().map(|x| x.exp()).collect()
}

proptest! {
    #[test]
    fn bounded_distances_are_symmetric_and_permutation_invariant(
        (a, b) in frame_pair(),
        rot in 0usize..12,
    ) {
        let (p, q) = (probs(&a), probs(&b));
        for kind in [DistanceKind::Hellinger, DistanceKind::TotalVariation] {
            let d = distance(&p, &q, kind).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - distance(&q, &p, kind).unwrap()).abs() < 1e-12);
            prop_assert!(distance(&p, &p, kind).unwrap().abs() < 1e-7);
            let r = rot % p.len();
            let (mut pr, mut qr) = (p.clone(), q.clone());
            pr.rotate_left(r);
            qr.rotate_left(r);
            prop_assert!((d - distance(&pr, &qr, kind).unwrap()).abs() < 1e-12);
        }
        prop_assert!(distance(&p, &q, DistanceKind::Kl).unwrap() >= -1e-12);
    }

    #[test]
    fn m3id_is_identity_when_halves_agree(z in logits(8), t in 0u32..500, alpha in 0.0f64..1.0) {
        let f = LogitFrame::from_logits(&z, &z).unwrap();
        let cfg = DecoderConfig { kind: DecoderKind::M3id, alpha, ..DecoderConfig::default() };
        let step = m3id_step(&f, t, &cfg).unwrap();
        prop_assert_eq!(step.scores, f.conditioned().to_vec());
    }

    #[test]
    fn gate_is_monotone_in_alpha((a, b) in frame_pair(), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0, t in 0u32..300) {
        let f = LogitFrame::from_logits(&a, &b).unwrap();
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let on = |alpha| {
            let cfg = DecoderConfig { kind: DecoderKind::M3id, alpha, ..DecoderConfig::default() };
            m3id_step(&f, t, &cfg).unwrap().gate_active
        };
        prop_assert!(!on(lo) || on(hi));
    }

    #[test]
    fn greedy_is_shift_invariant(z in logits(10), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        prop_assert_eq!(select_greedy(&z).unwrap(), select_greedy(&shifted).unwrap());
    }

    #[test]
    fn pmi_and_contrastive_ignore_time((a, b) in frame_pair(), t1 in 0u32..1000, t2 in 0u32..1000) {
        let f = LogitFrame::from_logits(&a, &b).unwrap();
        for kind in [DecoderKind::Pmi, DecoderKind::Contrastive] {
            let cfg = DecoderConfig::with_kind(kind);
            prop_assert_eq!(adjust(&f, t1, &cfg).unwrap(), adjust(&f, t2, &cfg).unwrap());
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences(
        tw in -60.0f64..0.0, rw in -60.0f64..0.0, tl in -60.0f64..0.0, rl in -60.0f64..0.0,
        beta in 0.01f64..1.0,
    ) {
        let base = DpoInputs { logp_theta_w: tw, logp_ref_w: rw, logp_theta_l: tl, logp_ref_l: rl, beta };
        let out = dpo_loss(&base).unwrap();
        prop_assert!(out.loss >= 0.0);
        let h = 1e-5;
        let fd = |f: fn(&mut DpoInputs) -> &mut f64| {
            let (mut up, mut dn) = (base, base);
            *f(&mut up) += h;
            *f(&mut dn) -= h;
            (dpo_loss(&up).unwrap().loss - dpo_loss(&dn).unwrap().loss) / (2.0 * h)
        };
        prop_assert!((fd(|d| &mut d.logp_theta_w) - out.grad.logp_theta_w).abs() < 1e-6);
        prop_assert!((fd(|d| &mut d.logp_ref_w) - out.grad.logp_ref_w).abs() < 1e-6);
        prop_assert!((fd(|d| &mut d.logp_theta_l) - out.grad.logp_theta_l).abs() < 1e-6);
        prop_assert!((fd(|d| &mut d.logp_ref_l) - out.grad.logp_ref_l).abs() < 1e-6);
    }

    #[test]
    fn dpo_loss_ignores_common_offsets(
        tw in -60.0f64..0.0, rw in -60.0f64..0.0, tl in -60.0f64..0.0, rl in -60.0f64..0.0,
        c in -20.0f64..20.0, beta in 0.01f64..1.0,
    ) {
        let a = DpoInputs { logp_theta_w: tw, logp_ref_w: rw, logp_theta_l: tl, logp_ref_l: rl, beta };
        // shifting a sample's policy and reference log-probs together leaves the loss alone
        let b = DpoInputs { logp_theta_w: tw + c, logp_ref_w: rw + c, ..a };
        let (la, lb) = (dpo_loss(&a).unwrap().loss, dpo_loss(&b).unwrap().loss);
        prop_assert!((la - lb).abs() < 1e-9 * la.max(1.0));
    }

    #[test]
    fn extraction_is_idempotent(words in prop::collection::vec(
        prop::sample::select(vec!["a", "dog", "dogs", "hot", "cat", "sofa", "couch", "beside", "buses", "the"]),
        0..20,
    )) {
        let lex = Lexicon::new([
            ("dog", vec!["puppy"]),
            ("cat", vec![]),
            ("couch", vec!["sofa"]),
            ("hot dog", vec!["hotdog"]),
            ("bus", vec![]),
        ]).unwrap();
        let first = extract_objects(&words.join(" "), &lex);
        let again = extract_objects(&render_matches(&first), &lex);
        let cats = |m: &[gdec_core::metrics::ObjectMatch]| m.iter().map(|x| x.category.clone()).collect::<Vec<_>>();
        prop_assert_eq!(cats(&first), cats(&again));
    }

    #[test]
    fn simulator_is_deterministic(
        image_seed in any::<u64>(), prior_seed in any::<u64>(),
        prefix in prop::collection::vec(0u32..64, 1..6), t in 0u32..200,
    ) {
        let spec = SimSpec { noise_sigma: 0.05, ..SimSpec::default() }.with_seeds(image_seed, prior_seed);
        let a = frame_at(&spec, &prefix, t).unwrap();
        let b = frame_at(&spec, &prefix, t).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn table_scenario(rows: usize, n: usize, seed: u64) -> MockScenario {
    // deterministic pseudo-random rows without pulling in an RNG crate
    let mut x = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let mut next = || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        (x >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
    };
    let mut row = || (0..n).map(|_| next()).collect::<Vec<_>>();
    let conditioned = (0..rows).map(|_| row()).collect();
    let unconditioned = (0..rows).map(|_| row()).collect();
    MockScenario::FixedTable(FixedTable {
        conditioned,
        unconditioned,
    })
}

#[test]
fn zero_alpha_m3id_decodes_like_greedy() {
    for seed in 0..20 {
        let scenario = table_scenario(30, 12, seed);
        let greedy_cfg = DecoderConfig {
            max_tokens: 30,
            ..DecoderConfig::default()
        };
        let m3id_cfg = DecoderConfig {
            kind: DecoderKind::M3id,
            alpha: 0.0,
            ..greedy_cfg.clone()
        };
        let mut s = open_mock_session(seed, 12, &scenario).unwrap();
        let g = decode(&mut s, &greedy_cfg).unwrap();
        let mut s = open_mock_session(seed, 12, &scenario).unwrap();
        let m = decode(&mut s, &m3id_cfg).unwrap();
        assert_eq!(g.tokens(), m.tokens(), "seed {seed}");
        assert!(m.steps.iter().all(|r| !r.gate_active));
    }
}

#[test]
fn prior_only_mode_ignores_the_conditioned_half() {
    let scenario = table_scenario(10, 6, 3);
    let cfg = DecoderConfig {
        kind: DecoderKind::M3id,
        max_tokens: 10,
        alpha: 0.9,
        ..DecoderConfig::default()
    };
    let mut s = open_mock_session(0, 6, &scenario).unwrap();
    let trace = decode_from(&mut s, &cfg, &[0], FrameMode::PriorOnly).unwrap();
    assert!(trace.steps.iter().all(|r| r.pdm_h.abs() < 1e-7));
}
