use std::fmt::Write as _;

use super::{midi, PianoRoll, ScoreError, FRAMES_PER_BEAT, PATCH_SIZE};
use crate::vocab::{parse_chord_symbol, ChordLabel, FrameTargets, Segment};

/// Optional key annotation, carried through but not used by the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeySignature {
    pub tonic: u8,
    pub minor: bool,
}

/// A piano roll with its gap-free chord segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPiece {
    pub roll: PianoRoll,
    pub segments: Vec<Segment>,
    pub key: Option<KeySignature>,
    pub total_beats: f64,
}

/// Parses a label file. Segments come back sorted with gaps before and
/// between them filled with N.
pub fn load_labels(text: &str) -> Result<Vec<Segment>, ScoreError> {
    let mut parsed: Vec<(usize, Segment)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| ScoreError::Label {
            line: line_no,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 columns, found {}", cols.len())));
        }
        let start: f64 = cols[0]
            .parse()
            .map_err(|_| bad(format!("bad start beat {:?}", cols[0])))?;
        let end: f64 = cols[1]
            .parse()
            .map_err(|_| bad(format!("bad end beat {:?}", cols[1])))?;
        if !start.is_finite() || !end.is_finite() || start < 0.0 {
            return Err(bad("beat positions must be finite and non-negative".into()));
        }
        if end <= start {
            return Err(bad(format!("end {end} is not after start {start}")));
        }
        let label = parse_chord_symbol(cols[2]).map_err(|e| bad(e.to_string()))?;
        parsed.push((line_no, Segment { start, end, label }));
    }
    parsed.sort_by(|a, b| a.1.start.total_cmp(&b.1.start).then(a.0.cmp(&b.0)));
    for pair in parsed.windows(2) {
        let (la, a) = pair[0];
        let (lb, b) = pair[1];
        if b.start < a.end - 1e-9 {
            return Err(ScoreError::Label {
                line: la.max(lb),
                message: format!(
                    "segment [{}, {}) overlaps [{}, {})",
                    b.start, b.end, a.start, a.end
                ),
            });
        }
    }
    let mut out = Vec::with_capacity(parsed.len());
    let mut cursor = 0.0;
    for (_, seg) in parsed {
        if seg.start > cursor + 1e-9 {
            out.push(Segment {
                start: cursor,
                end: seg.start,
                label: ChordLabel::NO_CHORD,
            });
        }
        cursor = seg.end;
        out.push(seg);
    }
    Ok(out)
}

/// Drops a `#` comment. A `#` only opens a comment at the start of a
/// whitespace-separated token, so sharps in note names survive.
fn strip_comment(line: &str) -> &str {
    let mut prev_ws = true;
    for (i, c) in line.char_indices() {
        if c == '#' && prev_ws {
            return &line[..i];
        }
        prev_ws = c.is_whitespace();
    }
    line
}

/// Extends the segmentation with N up to `total_beats`.
pub fn fill_to(segments: &mut Vec<Segment>, total_beats: f64) {
    let end = segments.last().map_or(0.0, |s| s.end);
    if total_beats > end + 1e-9 {
        segments.push(Segment {
            start: end,
            end: total_beats,
            label: ChordLabel::NO_CHORD,
        });
    }
}

/// Serializes segments in the label-file format.
pub fn write_labels(segments: &[Segment]) -> String {
    let mut out = String::new();
    for s in segments {
        let _ = writeln!(out, "{} {} {}", fmt_beat(s.start), fmt_beat(s.end), s.label);
    }
    out
}

fn fmt_beat(b: f64) -> String {
    if b.fract() == 0.0 {
        format!("{b:.1}")
    } else {
        format!("{b}")
    }
}

/// Reads a `# key: <tonic> <major|minor>` comment if present.
fn parse_key_comment(text: &str) -> Option<KeySignature> {
    text.lines().find_map(|l| {
        let rest = l.trim().strip_prefix('#')?.trim().strip_prefix("key:")?;
        let mut parts = rest.split_whitespace();
        let tonic = crate::vocab::parse_note_name(parts.next()?).ok()?;
        let minor = parts.next().is_some_and(|m| m.eq_ignore_ascii_case("minor"));
        Some(KeySignature { tonic, minor })
    })
}

/// Loads a MIDI file and its label file into a gap-free labeled piece.
///
/// The piece spans the later of the last label end and the last note end.
pub fn load_piece(piece_id: &str, midi_bytes: &[u8], label_text: &str) -> Result<LabeledPiece, ScoreError> {
    let score = midi::parse_midi(midi_bytes)?;
    let mut segments = load_labels(label_text)?;
    let label_end = segments.last().map_or(0.0, |s| s.end);
    let note_end = score.notes.iter().map(|n| n.end()).fold(0.0, f64::max);
    let total_beats = label_end.max(note_end);
    fill_to(&mut segments, total_beats);
    let roll = super::build_piano_roll(piece_id, &score.notes, total_beats).roll;
    Ok(LabeledPiece {
        roll,
        segments,
        key: parse_key_comment(label_text),
        total_beats,
    })
}

/// Label active at `beat`; N outside the annotated span.
pub fn label_at(segments: &[Segment], beat: f64) -> ChordLabel {
    let idx = segments.partition_point(|s| s.end <= beat);
    match segments.get(idx) {
        Some(s) if s.start <= beat => s.label,
        _ => ChordLabel::NO_CHORD,
    }
}

/// Samples the active chord at each token's center time.
pub fn segments_to_targets(segments: &[Segment], num_tokens: usize) -> FrameTargets {
    let beats_per_token = PATCH_SIZE as f64 / FRAMES_PER_BEAT as f64;
    let labels: Vec<ChordLabel> = (0..num_tokens)
        .map(|k| label_at(segments, (k as f64 + 0.5) * beats_per_token))
        .collect();
    FrameTargets::from_labels(&labels)
}

pub fn labels_to_frame_targets(piece: &LabeledPiece) -> FrameTargets {
    segments_to_targets(&piece.segments, piece.roll.num_tokens())
}
