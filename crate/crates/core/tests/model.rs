use chordrec::model::{
    ChordModel, DecoderTokens, ForwardOptions, ModelConfig, ModelError, SlotInput, ALL_MASKED,
};
use chordrec::numerics::gradcheck::check_gradients;
use chordrec::numerics::{Graph, NumericsError, ParamStore, Tensor};
use chordrec::score_io::PianoRoll;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        encoder_layers: 1,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        seed: 3,
        ..ModelConfig::default()
    }
}

fn random_roll(frames: usize, seed: u64) -> PianoRoll {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roll = PianoRoll::zeros("r".into(), frames);
    for t in 0..frames {
        for k in 0..88 {
            if rng.gen_bool(0.08) {
                roll.set(t, k, true);
            }
        }
    }
    roll
}

fn perturb(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn numerics(e: ModelError) -> NumericsError {
    match e {
        ModelError::Numerics(n) => n,
        other => NumericsError::Config(other.to_string()),
    }
}

// row-wise normalization with unit gain and zero bias
fn layer_norm_oracle(x: &Tensor) -> Vec<f64> {
    let d = x.last_dim();
    let mut out = Vec::new();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        out.extend(row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
    }
    out
}

#[test]
fn forward_shapes() {
    let model = ChordModel::new(toy_config()).unwrap();
    let roll = random_roll(24, 1);
    let mut g = Graph::new(&model.params);
    let out = model
        .forward_full(&mut g, &roll, &[ALL_MASKED; 4], ForwardOptions::default())
        .unwrap();
    assert_eq!(g.shape(out.encoding.boundary_logits), &[4, 1]);
    assert_eq!(g.shape(out.logits.root), &[4, 13]);
    assert_eq!(g.shape(out.logits.quality), &[4, 15]);
    assert_eq!(g.shape(out.logits.bass), &[4, 13]);
    assert_eq!(g.shape(out.encoding.context), &[4 * 6, 8]);

    let err = model
        .forward_full(&mut g, &roll, &[ALL_MASKED; 3], ForwardOptions::default())
        .unwrap_err();
    assert!(matches!(err, ModelError::Input(_)));
}

#[test]
fn forward_is_deterministic() {
    let model = ChordModel::new(toy_config()).unwrap();
    let roll = random_roll(36, 2);
    let run = || {
        let mut g = Graph::new(&model.params);
        let out = model
            .forward_full(&mut g, &roll, &[ALL_MASKED; 6], ForwardOptions::default())
            .unwrap();
        g.value(out.logits.quality).data().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn film_identity_with_zeroed_mlps() {
    let mut model = ChordModel::new(toy_config()).unwrap();
    perturb(&mut model.params, 9, 0.3);
    model.zero_film();
    // z_norm gain/bias back to identity so the oracle needs no parameters
    let gain = model.params.id("film.z_norm.gain").unwrap();
    let bias = model.params.id("film.z_norm.bias").unwrap();
    model.params.value_mut(gain).data_mut().fill(1.0);
    model.params.value_mut(bias).data_mut().fill(0.0);
    for seed in 0..5 {
        let roll = random_roll(48, 100 + seed);
        let mut g = Graph::new(&model.params);
        let enc = model
            .encode_piece(&mut g, &roll, &mut ForwardOptions::default())
            .unwrap();
        let expect = layer_norm_oracle(g.value(enc.h));
        let z = g.value(enc.z).data();
        let worst = z.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max deviation {worst}");
    }
}

#[test]
fn ablation_matches_zeroed_film() {
    let mut on = ChordModel::new(toy_config()).unwrap();
    perturb(&mut on.params, 4, 0.2);
    on.zero_film();
    let mut off = on.clone();
    off.config.use_boundary = false;
    let roll = random_roll(30, 5);
    let z_of = |m: &ChordModel| {
        let mut g = Graph::new(&m.params);
        let enc = m.encode_piece(&mut g, &roll, &mut ForwardOptions::default()).unwrap();
        g.value(enc.z).data().to_vec()
    };
    assert_eq!(z_of(&on), z_of(&off));
}

#[test]
fn context_rows_copy_states() {
    let mut model = ChordModel::new(toy_config()).unwrap();
    perturb(&mut model.params, 8, 0.2);
    let roll = random_roll(42, 6);
    let mut g = Graph::new(&model.params);
    let enc = model
        .encode_piece(&mut g, &roll, &mut ForwardOptions::default())
        .unwrap();
    let (h, z, c) = (g.value(enc.h), g.value(enc.z), g.value(enc.context));
    let len = enc.tokens;
    assert_eq!(len, 7);
    for t in 0..len {
        let base = t * 6;
        assert_eq!(c.row(base), z.row(t));
        for (i, off) in (-2isize..=2).enumerate() {
            let n = t as isize + off;
            let row = c.row(base + 1 + i);
            if (0..len as isize).contains(&n) {
                assert_eq!(row, h.row(n as usize));
            } else {
                assert!(row.iter().all(|v| *v == 0.0));
            }
        }
    }
    let single = model.context_window(&mut g, enc.z, enc.h, 3).unwrap();
    let single = g.value(single).data().to_vec();
    assert_eq!(&single[..], &g.value(enc.context).data()[3 * 6 * 8..4 * 6 * 8]);
    assert!(matches!(
        model.context_window(&mut g, enc.z, enc.h, 7),
        Err(ModelError::TokenOutOfRange { index: 7, len: 7 })
    ));
}

#[test]
fn committed_slot_changes_other_slots() {
    let model = ChordModel::new(toy_config()).unwrap();
    let roll = random_roll(12, 7);
    let logits_with = |root: SlotInput| {
        let mut g = Graph::new(&model.params);
        let tokens: Vec<DecoderTokens> = vec![[root, SlotInput::Masked, SlotInput::Masked]; 2];
        let out = model
            .forward_full(&mut g, &roll, &tokens, ForwardOptions::default())
            .unwrap();
        (
            g.value(out.logits.quality).data().to_vec(),
            g.value(out.logits.bass).data().to_vec(),
        )
    };
    let (q0, b0) = logits_with(SlotInput::Masked);
    let (q1, b1) = logits_with(SlotInput::Committed(4));
    let delta = q0.iter().zip(&q1).chain(b0.iter().zip(&b1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(delta > 0.0);
}

#[test]
fn committed_class_range_checked() {
    let model = ChordModel::new(toy_config()).unwrap();
    let mut g = Graph::new(&model.params);
    let bad = [[SlotInput::Masked, SlotInput::Committed(15), SlotInput::Masked]];
    assert!(model.decoder_inputs(&mut g, &bad).is_err());
}

#[test]
fn end_to_end_gradient_check() {
    let mut model = ChordModel::new(toy_config()).unwrap();
    perturb(&mut model.params, 11, 0.1);
    let roll = random_roll(12, 8);
    let tokens: Vec<DecoderTokens> = vec![
        [SlotInput::Masked, SlotInput::Committed(2), SlotInput::Masked],
        [SlotInput::Committed(5), SlotInput::Masked, SlotInput::Masked],
    ];
    let mut store = model.params.clone();
    let ids: Vec<_> = store.ids().collect();
    let report = check_gradients(&mut store, &ids, 1e-5, 1e-6, |g| {
        let out = model
            .forward_full(g, &roll, &tokens, ForwardOptions::default())
            .map_err(numerics)?;
        let b = g.bce_with_logits(out.encoding.boundary_logits, vec![1.0, 0.0], 0.5)?;
        let r = g.cross_entropy(out.logits.root, vec![Some(3), None], 1.0)?;
        let q = g.cross_entropy(out.logits.quality, vec![None, Some(7)], 1.0)?;
        let s = g.cross_entropy(out.logits.bass, vec![Some(0), Some(12)], 0.5)?;
        let l = g.add(b, r)?;
        let l = g.add(l, q)?;
        g.add(l, s)
    })
    .unwrap();
    assert!(report.checked > 1000);
    assert!(report.passes(1e-3), "{report:?}");
}
