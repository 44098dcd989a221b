use std::rc::Rc;

use super::*;
use crate::text::{BEGIN_ID, END_ID, MAX_LEN, PAD_ID};

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_width: 16,
        vocab_size: 12,
        dropout: 0.0,
        ..EncoderConfig::default()
    }
}

fn vcfg(variant: Variant) -> VariantConfig {
    VariantConfig { variant, ..VariantConfig::default() }
}

fn tokens(word_ids: &[u32]) -> TokenSequence {
    let mut ids = vec![BEGIN_ID];
    ids.extend_from_slice(word_ids);
    ids.push(END_ID);
    let n_real = ids.len();
    ids.resize(MAX_LEN, PAD_ID);
    let mut mask = vec![1u8; n_real];
    mask.resize(MAX_LEN, 0);
    TokenSequence { ids, mask, n_real }
}

fn fbank(frames: usize, n_mels: usize, scale: f64) -> Rc<FbankMatrix> {
    Rc::new(FbankMatrix {
        values: (0..frames * n_mels)
            .map(|i| ((i as f64 * 0.37).sin() + 0.2) * scale)
            .collect(),
        frames,
        n_mels,
        sample_rate: 16_000,
        fingerprint: String::new(),
    })
}

fn sample(n_mels: usize) -> RecSample {
    RecSample {
        user: "u0".into(),
        target_item: "t0".into(),
        text: String::new(),
        tokens: tokens(&[4, 5, 6, 7]),
        liked_items: vec!["l0".into(), "l1".into()],
        liked_audio: vec![fbank(5, n_mels, 1.0), fbank(4, n_mels, 0.7)],
        target_audio: Some(fbank(6, n_mels, 1.3)),
        label: 1,
    }
}

fn model(variant: Variant) -> ModelParams {
    ModelParams::init(tiny_cfg(), vcfg(variant), 6, 77).unwrap()
}

#[test]
fn all_pad_input_rejected() {
    let m = model(Variant::TextOnlyLora);
    let seq = TokenSequence {
        ids: vec![PAD_ID; MAX_LEN],
        mask: vec![0u8; MAX_LEN],
        n_real: 0,
    };
    assert!(matches!(
        m.encoder_forward(&seq, &mut ForwardCtx::eval()),
        Err(ModelError::EmptyInput)
    ));
}

#[test]
fn wrong_length_rejected() {
    let m = model(Variant::TextOnlyLora);
    let seq = TokenSequence {
        ids: vec![BEGIN_ID, END_ID],
        mask: vec![1, 1],
        n_real: 2,
    };
    assert!(matches!(
        m.encoder_forward(&seq, &mut ForwardCtx::eval()),
        Err(ModelError::SequenceLength { got: 2, .. })
    ));
}

#[test]
fn pad_positions_do_not_influence_output() {
    let m = model(Variant::TextOnlyLora);
    let base = tokens(&[4, 5, 6]);
    let mut scrambled = base.clone();
    // rewrite ids at masked positions
    scrambled.ids[100] = 9;
    scrambled.ids[511] = 7;
    let a = m.encoder_forward(&base, &mut ForwardCtx::eval()).unwrap();
    let b = m.encoder_forward(&scrambled, &mut ForwardCtx::eval()).unwrap();
    assert!(a.to_vec().iter().zip(b.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn zero_init_identity_for_every_variant() {
    for variant in Variant::all() {
        let m = model(variant);
        let s = sample(6);
        let with = m
            .forward_variant(&s, &mut ForwardCtx::eval(), None)
            .unwrap()
            .scalar_value();
        m.set_adapters_enabled(false);
        let without = m
            .forward_variant(&s, &mut ForwardCtx::eval(), None)
            .unwrap()
            .scalar_value();
        m.set_adapters_enabled(true);
        assert!(
            (with - without).abs() < 1e-12,
            "{variant}: {with} vs {without}"
        );
    }
}

#[test]
fn variants_give_finite_deterministic_logits_at_zero_init() {
    for variant in Variant::all() {
        let m = model(variant);
        let s = sample(6);
        let a = m.forward_variant(&s, &mut ForwardCtx::eval(), None).unwrap().scalar_value();
        let b = m.forward_variant(&s, &mut ForwardCtx::eval(), None).unwrap().scalar_value();
        assert!(a.is_finite());
        assert_eq!(a.to_bits(), b.to_bits(), "{variant}");
    }
}

#[test]
fn text_only_ignores_audio_entirely() {
    let m = model(Variant::TextOnlyLora);
    let mut s = sample(6);
    let a = m.forward_variant(&s, &mut ForwardCtx::eval(), None).unwrap().scalar_value();
    s.liked_audio = vec![fbank(9, 6, 5.0)];
    s.liked_items = vec!["other".into()];
    s.target_audio = None;
    let b = m.forward_variant(&s, &mut ForwardCtx::eval(), None).unwrap().scalar_value();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn audio_variants_require_audio() {
    for variant in [Variant::DualLora, Variant::SingleLoraFused] {
        let m = model(variant);
        let mut s = sample(6);
        s.target_audio = None;
        assert!(matches!(
            m.forward_variant(&s, &mut ForwardCtx::eval(), None),
            Err(ModelError::MissingModality { .. })
        ));
    }
}

#[test]
fn max_fusion_routes_gradients_away_from_losing_text_path() {
    // Force the audio feature to win the cross-modal max everywhere: the
    // text adapters then receive exactly zero gradient.
    let mut cfg = vcfg(Variant::DualLora);
    cfg.cross_modal_pool = PoolMethod::Max;
    let m = ModelParams::init(tiny_cfg(), cfg, 6, 77).unwrap();
    let e = m.embedder.as_ref().unwrap();
    e.bn_beta.set_data(&vec![1e3; 8]);
    let s = sample(6);
    let logit = m
        .forward_variant(&s, &mut ForwardCtx::train_no_dropout(), None)
        .unwrap();
    logit.bce_with_logits(1.0).unwrap().backward().unwrap();
    let set = m.text_lora.as_ref().unwrap();
    for la in &set.layers {
        for t in [&la.q.a, &la.q.b, &la.v.a, &la.v.b] {
            let g = t.grad().expect("text adapter gradient defined");
            assert!(g.iter().all(|&v| v == 0.0), "text adapter leaked gradient");
        }
    }
    // the audio-side adapter keeps gradient flow (B gets it first; A's
    // gradient is zero while B is zero)
    let audio = m.audio_lora.as_ref().unwrap();
    assert!(audio.b.grad().unwrap().iter().any(|&v| v != 0.0));
}

#[test]
fn classify_examples() {
    let m = model(Variant::TextOnlyLora);
    m.head_w.set_data(&[0.0; 8]);
    m.head_b.set_data(&[0.0]);
    let zero = Tensor::constant(vec![0.0; 8], &[1, 8]).unwrap();
    assert_eq!(m.classify(&zero).unwrap().scalar_value(), 0.0);

    let mut e1 = vec![0.0; 8];
    e1[0] = 1.0;
    m.head_w.set_data(&e1);
    let f = Tensor::constant(vec![0.9, -2.0, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0], &[1, 8]).unwrap();
    assert!((m.classify(&f).unwrap().scalar_value() - 0.9).abs() < 1e-15);
}

#[test]
fn trainable_parameter_counting_text_only() {
    // 2 layers x 2 targets x (64*4 + 4*64) = 2048 adapter params, plus the
    // 64+1 head.
    let cfg = EncoderConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        ffn_width: 256,
        vocab_size: 100,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let m = ModelParams::init(cfg, vcfg(Variant::TextOnlyLora), 80, 1).unwrap();
    let trainable = m.trainable_parameters();
    let lora_total: usize = trainable
        .iter()
        .filter(|(n, _)| n.starts_with("lora."))
        .map(|(_, t)| t.numel())
        .sum();
    assert_eq!(lora_total, 2048);
    let total: usize = trainable.iter().map(|(_, t)| t.numel()).sum();
    assert_eq!(total, 2048 + 64 + 1);
}

#[test]
fn base_weights_never_trainable_and_groups_disjoint() {
    for variant in Variant::all() {
        let m = model(variant);
        for (name, _) in m.trainable_parameters() {
            assert!(
                !name.starts_with("encoder."),
                "{variant}: base weight {name} in trainable set"
            );
        }
    }
    // DualLora: the audio group and text group share no names
    let m = model(Variant::DualLora);
    let names: Vec<String> = m.trainable_parameters().into_iter().map(|(n, _)| n).collect();
    let text: Vec<&String> = names.iter().filter(|n| n.starts_with("lora.text.")).collect();
    let audio: Vec<&String> = names.iter().filter(|n| n.starts_with("lora.audio.")).collect();
    assert!(!text.is_empty() && !audio.is_empty());
    for t in &text {
        assert!(!audio.contains(t));
    }
}

#[test]
fn trainable_set_matches_contract_per_variant() {
    for variant in Variant::all() {
        let m = model(variant);
        let names: Vec<String> = m.trainable_parameters().into_iter().map(|(n, _)| n).collect();
        let has_embedder = names.iter().any(|n| n.starts_with("embedder."));
        assert_eq!(has_embedder, variant.uses_audio(), "{variant}");
        assert!(names.contains(&"head.w".to_string()));
        assert!(names.contains(&"head.b".to_string()));
        if variant.uses_audio() {
            assert!(names.contains(&"embedder.bn.gamma".to_string()));
            assert!(names.contains(&"embedder.bn.beta".to_string()));
        }
        // running stats are buffers, never optimized
        assert!(!names.iter().any(|n| n.contains("running")));
        let has_audio_lora = names.iter().any(|n| n.starts_with("lora.audio."));
        assert_eq!(has_audio_lora, variant == Variant::DualLora, "{variant}");
    }
}

#[test]
fn merge_identity_all_variants() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
    for variant in Variant::all() {
        let m = model(variant);
        // give adapters nonzero B so the merge actually moves weights
        if let Some(set) = &m.text_lora {
            for la in &set.layers {
                for t in [&la.q.b, &la.v.b] {
                    let data: Vec<f64> = (0..t.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect();
                    t.set_data(&data);
                }
            }
        }
        if let Some(a) = &m.audio_lora {
            let data: Vec<f64> = (0..a.b.numel()).map(|_| rng.gen_range(-0.3..0.3)).collect();
            a.b.set_data(&data);
        }
        let merged = m.merge_adapters().unwrap();
        for _ in 0..5 {
            let s = sample(6);
            let a = m.forward_variant(&s, &mut ForwardCtx::eval(), None).unwrap().scalar_value();
            let b = merged
                .forward_variant(&s, &mut ForwardCtx::eval(), None)
                .unwrap()
                .scalar_value();
            assert!((a - b).abs() < 1e-9, "{variant}: {a} vs {b}");
        }
    }
}

#[test]
fn gradient_flow_trainable_yes_frozen_no() {
    for variant in Variant::all() {
        let m = model(variant);
        m.zero_grads();
        let s = sample(6);
        let logit = m
            .forward_variant(&s, &mut ForwardCtx::train_no_dropout(), None)
            .unwrap();
        logit.bce_with_logits(1.0).unwrap().backward().unwrap();
        for (name, t, kind) in m.named_parameters() {
            match kind {
                ParamKind::Trainable => {
                    assert!(t.grad().is_some(), "{variant}: trainable {name} has no gradient")
                }
                _ => assert!(t.grad().is_none(), "{variant}: frozen {name} has a gradient"),
            }
        }
    }
}

#[test]
fn frozen_checksum_stable_under_trainable_updates() {
    let m = model(Variant::DualLora);
    let before = m.frozen_checksum();
    // poke every trainable parameter
    for (_, t) in m.trainable_parameters() {
        let mut d = t.to_vec();
        for v in &mut d {
            *v += 0.25;
        }
        t.set_data(&d);
    }
    assert_eq!(before, m.frozen_checksum());
}

#[test]
fn causal_flag_changes_output_but_stays_finite() {
    let mut cfg = tiny_cfg();
    cfg.causal = true;
    let causal = ModelParams::init(cfg, vcfg(Variant::TextOnlyLora), 6, 77).unwrap();
    let bidir = model(Variant::TextOnlyLora);
    let seq = tokens(&[4, 5, 6, 7, 8]);
    let a = causal.encoder_forward(&seq, &mut ForwardCtx::eval()).unwrap();
    let b = bidir.encoder_forward(&seq, &mut ForwardCtx::eval()).unwrap();
    assert!(a.to_vec().iter().all(|v| v.is_finite()));
    let differs = a.to_vec().iter().zip(b.to_vec()).any(|(x, y)| (x - y).abs() > 1e-9);
    assert!(differs, "causal masking had no effect");
}

#[test]
fn variant_forward_gradcheck_tiny() {
    use crate::tensor::check_gradients;
    for variant in Variant::all() {
        let m = model(variant);
        let s = sample(6);
        let params: Vec<Tensor> = m.trainable_parameters().into_iter().map(|(_, t)| t).collect();
        // sample a few coordinates from each parameter
        let coords: Vec<(usize, usize)> = params
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| {
                let n = p.numel();
                [(pi, 0), (pi, n / 2), (pi, n - 1)]
            })
            .collect();
        let report = check_gradients(
            || {
                let mut ctx = ForwardCtx::train_no_dropout();
                let logit = m.forward_variant(&s, &mut ctx, None).unwrap();
                logit.bce_with_logits(s.label as f64).unwrap()
            },
            &params,
            Some(&coords),
            1e-5,
            1e-4,
        );
        assert!(report.ok(), "{variant}: {:?}", report.failure);
    }
}
