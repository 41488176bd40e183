//! Chord label space: root, quality and bass classes, the chord-symbol
//! grammar, transposition, and boundary binarization.

use std::collections::HashMap;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

use crate::score_io::PianoRoll;

/// Number of root (and bass) classes: 12 pitch classes plus no-chord.
pub const NUM_ROOTS: usize = 13;
/// Number of bass classes.
pub const NUM_BASSES: usize = 13;
/// Number of quality classes, including no-chord.
pub const NUM_QUALITIES: usize = 15;
/// Class index used for "no chord" in the root and bass heads.
pub const NO_PITCH: u8 = 12;

const NOTE_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

const REDUCTION_TABLE: &str = include_str!("../assets/quality_reductions.txt");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("malformed note name {0:?}")]
    BadNoteName(String),
    #[error("unknown chord quality {name:?}; vocabulary is [{vocab}]")]
    UnknownQuality { name: String, vocab: String },
    #[error("malformed chord symbol {0:?}")]
    BadSymbol(String),
    #[error("cannot binarize boundaries of an empty label sequence")]
    EmptySequence,
}

/// Chord quality. The discriminant is the class index used by the quality head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Quality {
    Maj = 0,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Maj7,
    Min7,
    Dom7,
    Dim7,
    HalfDim7,
    Maj6,
    Min6,
    MinMaj7,
    NoChord,
}

impl Quality {
    pub const ALL: [Quality; NUM_QUALITIES] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dim,
        Quality::Aug,
        Quality::Sus2,
        Quality::Sus4,
        Quality::Maj7,
        Quality::Min7,
        Quality::Dom7,
        Quality::Dim7,
        Quality::HalfDim7,
        Quality::Maj6,
        Quality::Min6,
        Quality::MinMaj7,
        Quality::NoChord,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Quality> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
            Quality::Sus2 => "sus2",
            Quality::Sus4 => "sus4",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
            Quality::Dom7 => "7",
            Quality::Dim7 => "dim7",
            Quality::HalfDim7 => "hdim7",
            Quality::Maj6 => "maj6",
            Quality::Min6 => "min6",
            Quality::MinMaj7 => "minmaj7",
            Quality::NoChord => "N",
        }
    }

    /// Chord-tone intervals above the root, in semitones.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
            Quality::Sus2 => &[0, 2, 7],
            Quality::Sus4 => &[0, 5, 7],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Dim7 => &[0, 3, 6, 9],
            Quality::HalfDim7 => &[0, 3, 6, 10],
            Quality::Maj6 => &[0, 4, 7, 9],
            Quality::Min6 => &[0, 3, 7, 9],
            Quality::MinMaj7 => &[0, 3, 7, 11],
            Quality::NoChord => &[],
        }
    }

    /// Parses a canonical vocabulary name (no reduction).
    pub fn from_name(name: &str) -> Option<Quality> {
        Self::ALL.iter().copied().find(|q| q.name() == name)
    }

    /// Parses a quality name, falling back to the reduction table unless `strict`.
    pub fn parse(name: &str, strict: bool) -> Result<Quality, VocabError> {
        if let Some(q) = Self::from_name(name) {
            return Ok(q);
        }
        if !strict {
            if let Some(q) = reduction_table().get(name) {
                return Ok(*q);
            }
        }
        Err(VocabError::UnknownQuality {
            name: name.to_string(),
            vocab: Self::ALL.iter().map(|q| q.name()).collect::<Vec<_>>().join(", "),
        })
    }
}

fn reduction_table() -> &'static HashMap<String, Quality> {
    static TABLE: OnceLock<HashMap<String, Quality>> = OnceLock::new();
    TABLE.get_or_init(|| {
        REDUCTION_TABLE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let mut cols = l.split_whitespace();
                let alias = cols.next()?;
                let canonical = Quality::from_name(cols.next()?)?;
                Some((alias.to_string(), canonical))
            })
            .collect()
    })
}

/// Parses a note name (`C`, `F#`, `Bb`, `Cbb`...) into a pitch class.
pub fn parse_note_name(text: &str) -> Result<u8, VocabError> {
    let mut chars = text.chars();
    let base = match chars.next() {
        Some('C') => 0i32,
        Some('D') => 2,
        Some('E') => 4,
        Some('F') => 5,
        Some('G') => 7,
        Some('A') => 9,
        Some('B') => 11,
        _ => return Err(VocabError::BadNoteName(text.to_string())),
    };
    let mut offset = 0i32;
    for c in chars {
        match c {
            '#' => offset += 1,
            'b' => offset -= 1,
            _ => return Err(VocabError::BadNoteName(text.to_string())),
        }
    }
    Ok((base + offset).rem_euclid(12) as u8)
}

pub fn note_name(pitch_class: u8) -> &'static str {
    NOTE_NAMES[pitch_class as usize % 12]
}

/// A chord decomposed into root, quality and bass.
///
/// No-chord is all-or-nothing: either all three elements are N or none is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChordLabel {
    root: u8,
    quality: Quality,
    bass: u8,
}

impl ChordLabel {
    pub const NO_CHORD: ChordLabel = ChordLabel {
        root: NO_PITCH,
        quality: Quality::NoChord,
        bass: NO_PITCH,
    };

    /// Builds a label from pitch classes. Returns `None` when the no-chord
    /// invariant would be violated or a pitch class is out of range.
    pub fn new(root: u8, quality: Quality, bass: u8) -> Option<ChordLabel> {
        let root_n = root == NO_PITCH;
        let bass_n = bass == NO_PITCH;
        let qual_n = quality == Quality::NoChord;
        if root > NO_PITCH || bass > NO_PITCH {
            return None;
        }
        if root_n != qual_n || root_n != bass_n {
            return None;
        }
        Some(ChordLabel {
            root,
            quality,
            bass,
        })
    }

    /// Root-position chord (bass equals root).
    pub fn root_position(root: u8, quality: Quality) -> ChordLabel {
        ChordLabel::new(root % 12, quality, root % 12).expect("root position label")
    }

    /// Builds a label from raw class indices as produced by the heads.
    /// A prediction mixing N with pitched elements is kept as-is for
    /// scoring; use [`ChordLabel::new`] when the invariant matters.
    pub fn from_indices(root: usize, quality: usize, bass: usize) -> ChordLabel {
        ChordLabel {
            root: root.min(NO_PITCH as usize) as u8,
            quality: Quality::from_index(quality).unwrap_or(Quality::NoChord),
            bass: bass.min(NO_PITCH as usize) as u8,
        }
    }

    pub fn root(&self) -> u8 {
        self.root
    }

    pub fn quality(&self) -> Quality {
        self.quality
    }

    pub fn bass(&self) -> u8 {
        self.bass
    }

    pub fn is_no_chord(&self) -> bool {
        self.root == NO_PITCH && self.quality == Quality::NoChord && self.bass == NO_PITCH
    }

    /// `[root, quality, bass]` class indices.
    pub fn indices(&self) -> [usize; 3] {
        [
            self.root as usize,
            self.quality.index(),
            self.bass as usize,
        ]
    }

    /// Pitch classes of the chord tones (empty for N).
    pub fn pitch_classes(&self) -> Vec<u8> {
        if self.root == NO_PITCH {
            return Vec::new();
        }
        self.quality
            .intervals()
            .iter()
            .map(|i| (self.root + i) % 12)
            .collect()
    }
}

impl fmt::Display for ChordLabel {
    /// Canonical symbol with sharps; the bass is written only for inversions.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.root == NO_PITCH || self.quality == Quality::NoChord {
            return f.write_str("N");
        }
        write!(f, "{}:{}", note_name(self.root), self.quality.name())?;
        if self.bass != self.root && self.bass != NO_PITCH {
            write!(f, "/{}", note_name(self.bass))?;
        }
        Ok(())
    }
}

/// Parses `ROOT ':' QUALITY ('/' BASS)?` or `N`.
pub fn parse_chord_symbol(text: &str) -> Result<ChordLabel, VocabError> {
    parse_chord_symbol_with(text, false)
}

/// Like [`parse_chord_symbol`]; with `strict` set, qualities outside the
/// vocabulary are errors instead of being reduced.
pub fn parse_chord_symbol_with(text: &str, strict: bool) -> Result<ChordLabel, VocabError> {
    let text = text.trim();
    if text == "N" {
        return Ok(ChordLabel::NO_CHORD);
    }
    let (root_text, rest) = text
        .split_once(':')
        .ok_or_else(|| VocabError::BadSymbol(text.to_string()))?;
    let root = parse_note_name(root_text)?;
    let (quality_text, bass_text) = match rest.rsplit_once('/') {
        Some((q, b)) => (q, Some(b)),
        None => (rest, None),
    };
    let quality = Quality::parse(quality_text, strict)?;
    if quality == Quality::NoChord {
        return Err(VocabError::BadSymbol(text.to_string()));
    }
    let bass = match bass_text {
        Some(b) => parse_note_name(b)?,
        None => root,
    };
    Ok(ChordLabel::new(root, quality, bass).expect("pitched label"))
}

pub fn format_chord_symbol(label: &ChordLabel) -> String {
    label.to_string()
}

/// Shifts root and bass by `semitones` (mod 12); N is a fixed point.
pub fn transpose(label: ChordLabel, semitones: i32) -> ChordLabel {
    if label.is_no_chord() {
        return label;
    }
    let shift = |pc: u8| -> u8 {
        if pc == NO_PITCH {
            pc
        } else {
            (pc as i32 + semitones).rem_euclid(12) as u8
        }
    };
    ChordLabel {
        root: shift(label.root),
        quality: label.quality,
        bass: shift(label.bass),
    }
}

/// `out[0] = 1`; `out[t] = 1` iff the full triple changes at `t`.
pub fn binarize_boundaries(labels: &[ChordLabel]) -> Result<Vec<u8>, VocabError> {
    if labels.is_empty() {
        return Err(VocabError::EmptySequence);
    }
    Ok(std::iter::once(1)
        .chain(labels.windows(2).map(|w| u8::from(w[0] != w[1])))
        .collect())
}

/// Shifts pitch columns of a roll; notes leaving the 88-key range are dropped.
pub fn transpose_roll(roll: &PianoRoll, semitones: i32) -> PianoRoll {
    let mut out = PianoRoll::zeros(roll.piece_id().to_string(), roll.num_frames());
    for t in 0..roll.num_frames() {
        for p in roll.active_keys(t) {
            let shifted = p as i32 + semitones;
            if (0..crate::score_io::NUM_KEYS as i32).contains(&shifted) {
                out.set(t, shifted as usize, true);
            }
        }
    }
    out
}

/// Per-token class targets plus boundary flags.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameTargets {
    pub roots: Vec<u8>,
    pub qualities: Vec<u8>,
    pub basses: Vec<u8>,
    pub boundaries: Vec<u8>,
}

impl FrameTargets {
    /// Builds targets from a label per token, deriving boundaries.
    pub fn from_labels(labels: &[ChordLabel]) -> FrameTargets {
        let boundaries = binarize_boundaries(labels).unwrap_or_default();
        FrameTargets {
            roots: labels.iter().map(|l| l.root).collect(),
            qualities: labels.iter().map(|l| l.quality.index() as u8).collect(),
            basses: labels.iter().map(|l| l.bass).collect(),
            boundaries,
        }
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn label(&self, t: usize) -> ChordLabel {
        ChordLabel::from_indices(
            self.roots[t] as usize,
            self.qualities[t] as usize,
            self.basses[t] as usize,
        )
    }

    pub fn labels(&self) -> Vec<ChordLabel> {
        (0..self.len()).map(|t| self.label(t)).collect()
    }

    /// Class index of `slot` (0 root, 1 quality, 2 bass) at token `t`.
    pub fn element(&self, t: usize, slot: usize) -> usize {
        match slot {
            0 => self.roots[t] as usize,
            1 => self.qualities[t] as usize,
            _ => self.basses[t] as usize,
        }
    }
}

/// A labeled time span in beats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: ChordLabel,
}

/// Collapses maximal runs of identical triples into segments.
/// Token `k` starts at beat `k * frames_per_token / 12`.
pub fn frames_to_segments(targets: &FrameTargets, frames_per_token: usize) -> Vec<Segment> {
    let beats_per_token = frames_per_token as f64 / crate::score_io::FRAMES_PER_BEAT as f64;
    let labels = targets.labels();
    let mut segments: Vec<Segment> = Vec::new();
    let mut run_start = 0;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[run_start] {
            segments.push(Segment {
                start: run_start as f64 * beats_per_token,
                end: t as f64 * beats_per_token,
                label: labels[run_start],
            });
            run_start = t;
        }
    }
    segments
}
