//! Seeded synthetic corpus: random progressions rendered as block chords.
//!
//! Voicing: the labeled bass pitch class sits alone in the bass register,
//! the chord tones fill the octave above, and the root is doubled as the top
//! voice. Pitch-class sets shared by several labels (C:maj6 and A:min7/C,
//! the symmetric dim7 and aug chords, sus2/sus4 pairs) stay decidable from
//! the roll because the top voice names the root.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::score_io::{write_labels, write_midi, NoteEvent, ScoreError};
use crate::vocab::{ChordLabel, Quality, Segment, NUM_QUALITIES};

pub const TICKS_PER_QUARTER: u16 = 480;
const DURATIONS: [u32; 3] = [1, 2, 4];
/// Lowest MIDI pitch of the bass voice.
const BASS_FLOOR: u8 = 36;
/// Lowest MIDI pitch of the upper voices.
const UPPER_FLOOR: u8 = 52;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub pieces: usize,
    pub beats_per_piece: u32,
    pub seed: u64,
    /// Chance a chord is re-struck on every beat instead of held.
    pub rearticulate_prob: f64,
    /// Chance a segment is silent (N).
    pub no_chord_prob: f64,
    /// Chance a chord is drawn in inversion.
    pub inversion_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            pieces: 20,
            beats_per_piece: 16,
            seed: 0,
            rearticulate_prob: 0.5,
            no_chord_prob: 0.05,
            inversion_prob: 0.4,
        }
    }
}

/// One generated piece, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPiece {
    pub piece_id: String,
    pub notes: Vec<NoteEvent>,
    pub segments: Vec<Segment>,
    pub total_beats: f64,
}

impl SynthPiece {
    pub fn midi_bytes(&self) -> Vec<u8> {
        write_midi(&self.notes, TICKS_PER_QUARTER)
    }

    pub fn label_text(&self) -> String {
        write_labels(&self.segments)
    }
}

fn random_label(rng: &mut ChaCha8Rng, inversion_prob: f64) -> ChordLabel {
    let root = rng.gen_range(0..12u8);
    let quality = Quality::from_index(rng.gen_range(0..NUM_QUALITIES - 1)).expect("chord quality");
    let bass = if rng.gen_bool(inversion_prob) {
        let tones = quality.intervals();
        (root + tones[rng.gen_range(1..tones.len())]) % 12
    } else {
        root
    };
    ChordLabel::new(root, quality, bass).expect("bass is a chord tone")
}

/// MIDI pitches voicing `label`: bass, chord tones above it, root on top.
pub fn voice_chord(label: &ChordLabel) -> Vec<u8> {
    if label.is_no_chord() {
        return Vec::new();
    }
    let mut pitches = vec![BASS_FLOOR + label.bass()];
    let mut upper: Vec<u8> = label
        .pitch_classes()
        .iter()
        .map(|&pc| UPPER_FLOOR + (pc + 12 - UPPER_FLOOR % 12) % 12)
        .collect();
    upper.sort_unstable();
    let top = *upper.last().expect("chord has tones");
    let root = label.root();
    let mut doubled = top - top % 12 + root;
    while doubled <= top {
        doubled += 12;
    }
    pitches.extend(upper);
    pitches.push(doubled);
    pitches
}

/// Generates one piece from its own RNG stream.
pub fn generate_piece(piece_id: &str, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthPiece {
    let total = cfg.beats_per_piece.max(1);
    let mut segments = Vec::new();
    let mut notes = Vec::new();
    let mut cursor = 0u32;
    let mut prev = None;
    while cursor < total {
        let remaining = total - cursor;
        let choices: Vec<u32> = DURATIONS.iter().copied().filter(|d| *d <= remaining).collect();
        let dur = *choices.choose(rng).expect("duration 1 always fits");
        let label = loop {
            let l = if rng.gen_bool(cfg.no_chord_prob) {
                ChordLabel::NO_CHORD
            } else {
                random_label(rng, cfg.inversion_prob)
            };
            if Some(l) != prev {
                break l;
            }
        };
        prev = Some(label);
        let velocity = rng.gen_range(60..=100u8);
        let strikes: Vec<(u32, u32)> = if dur > 1 && rng.gen_bool(cfg.rearticulate_prob) {
            (0..dur).map(|b| (cursor + b, 1)).collect()
        } else {
            vec![(cursor, dur)]
        };
        for pitch in voice_chord(&label) {
            for &(onset, len) in &strikes {
                notes.push(NoteEvent {
                    pitch,
                    onset: f64::from(onset),
                    duration: f64::from(len),
                    velocity,
                });
            }
        }
        segments.push(Segment {
            start: f64::from(cursor),
            end: f64::from(cursor + dur),
            label,
        });
        cursor += dur;
    }
    SynthPiece {
        piece_id: piece_id.to_string(),
        notes,
        segments,
        total_beats: f64::from(total),
    }
}

/// Generates `cfg.pieces` pieces. Piece `i` draws from a stream seeded by
/// `(cfg.seed, i)`, so a piece does not depend on how many precede it.
pub fn generate_corpus(cfg: &SynthConfig) -> Vec<SynthPiece> {
    (0..cfg.pieces)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            generate_piece(&format!("synth_{i:04}"), cfg, &mut rng)
        })
        .collect()
}

/// Seeded 9:1 piece-level split; at least one test piece once there are two pieces.
pub fn split_pieces(ids: &[String], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut order: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    order.shuffle(&mut rng);
    let n_test = if ids.len() >= 2 { (ids.len() / 10).max(1) } else { 0 };
    let test: Vec<String> = {
        let mut t = order[..n_test].to_vec();
        t.sort();
        t
    };
    let mut train = order[n_test..].to_vec();
    train.sort();
    (train, test)
}

/// Paths written by [`write_corpus`].
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

/// Writes MIDI and label files plus `manifest.tsv`, `train.tsv` and `test.tsv`.
pub fn write_corpus(dir: &Path, pieces: &[SynthPiece], seed: u64) -> Result<CorpusFiles, ScoreError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| ScoreError::io(&p, e)
    };
    for sub in ["midi", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(io(&d))?;
    }
    let row = |id: &str| format!("midi/{id}.mid\tlabels/{id}.lab\n");
    let mut all = String::new();
    for p in pieces {
        let midi = dir.join("midi").join(format!("{}.mid", p.piece_id));
        fs::write(&midi, p.midi_bytes()).map_err(io(&midi))?;
        let lab = dir.join("labels").join(format!("{}.lab", p.piece_id));
        fs::write(&lab, p.label_text()).map_err(io(&lab))?;
        all.push_str(&row(&p.piece_id));
    }
    let ids: Vec<String> = pieces.iter().map(|p| p.piece_id.clone()).collect();
    let (train_ids, test_ids) = split_pieces(&ids, seed);
    let write = |name: &str, text: String| -> Result<PathBuf, ScoreError> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
        Ok(path)
    };
    let manifest = write("manifest.tsv", all)?;
    let train_manifest = write("train.tsv", train_ids.iter().map(|i| row(i)).collect())?;
    let test_manifest = write("test.tsv", test_ids.iter().map(|i| row(i)).collect())?;
    Ok(CorpusFiles {
        manifest,
        train_manifest,
        test_manifest,
        train_ids,
        test_ids,
    })
}

/// Generates and writes a corpus in one call.
pub fn make_synthetic_corpus(dir: &Path, cfg: &SynthConfig) -> Result<CorpusFiles, ScoreError> {
    write_corpus(dir, &generate_corpus(cfg), cfg.seed)
}
