#![allow(dead_code)]

use chordrec::inference::EvalPiece;
use chordrec::model::{ChordModel, ModelConfig, Slot};
use chordrec::score_io::{PianoRoll, NUM_KEYS};
use chordrec::vocab::{parse_chord_symbol, FrameTargets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        encoder_layers: 1,
        heads: 2,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

/// Roll with a few random notes held per half beat.
pub fn random_roll(id: &str, tokens: usize, seed: u64) -> PianoRoll {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roll = PianoRoll::zeros(id.to_string(), tokens * 6);
    for t in 0..tokens {
        let keys: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(20..70)).collect();
        for f in t * 6..(t + 1) * 6 {
            for k in &keys {
                roll.set(f, (*k).min(NUM_KEYS - 1), true);
            }
        }
    }
    roll
}

/// A randomly initialized model whose class embeddings are scaled up so
/// that committing one slot moves the others' argmaxes.
pub fn adversarial_model() -> ChordModel {
    let mut model = ChordModel::new(ModelConfig { seed: 3, ..tiny_config() }).unwrap();
    for s in Slot::ALL {
        let id = model.class_embedding_param(s);
        for v in model.params.value_mut(id).data_mut() {
            *v *= 40.0;
        }
    }
    model
}

pub fn targets(symbols: &[&str]) -> FrameTargets {
    let labels: Vec<_> = symbols.iter().map(|s| parse_chord_symbol(s).unwrap()).collect();
    FrameTargets::from_labels(&labels)
}

pub fn piece(id: &str, reference: &[&str], prediction: &[&str]) -> EvalPiece {
    EvalPiece {
        piece_id: id.to_string(),
        reference: targets(reference),
        prediction: targets(prediction),
        boundary_probs: None,
    }
}

/// Three pieces with hand-counted scores, see `three_piece_expectations`.
pub fn three_piece_fixture() -> Vec<EvalPiece> {
    vec![
        piece("c", &["N", "N", "A:min"], &["N", "A:min", "A:min"]),
        piece("a", &["C:maj", "C:maj", "C:maj", "C:maj"], &["C:maj", "C:maj", "C:min", "C:maj/E"]),
        piece("b", &["G:7", "G:7"], &["G:7", "D:7"]),
    ]
}

/// Macro root, quality, bass, full accuracy of the fixture, counted by hand:
/// a = (4/4, 3/4, 3/4, 2/4), b = (1/2, 2/2, 1/2, 1/2), c = (2/3, 2/3, 2/3, 2/3).
pub fn three_piece_expectations() -> [f64; 4] {
    [
        (1.0 + 0.5 + 2.0 / 3.0) / 3.0,
        (0.75 + 1.0 + 2.0 / 3.0) / 3.0,
        (0.75 + 0.5 + 2.0 / 3.0) / 3.0,
        (0.5 + 0.5 + 2.0 / 3.0) / 3.0,
    ]
}
