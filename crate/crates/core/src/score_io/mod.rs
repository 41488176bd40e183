//! Score ingestion: MIDI files and label files into beat-aligned piano rolls
//! and per-token targets, and label files back out.

mod labels;
mod midi;
mod roll;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use labels::{
    fill_to, label_at, labels_to_frame_targets, load_labels, load_piece, segments_to_targets,
    write_labels, KeySignature, LabeledPiece,
};
pub use midi::{parse_midi, write_midi, BeatGrid, MidiScore, NoteEvent, TempoChange, TimeSignature};
pub use roll::{build_piano_roll, frames_for_beats, PianoRoll, RollBuild};

/// Piano keys covered by a roll (A0..C8).
pub const NUM_KEYS: usize = 88;
/// MIDI note number of roll column 0.
pub const LOWEST_PITCH: u8 = 21;
pub const FRAMES_PER_BEAT: usize = 12;
/// Frames folded into one token by the patch embedding.
pub const PATCH_SIZE: usize = 6;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("MIDI parse error at byte {offset}: {message}")]
    Midi { offset: usize, message: String },
    #[error("chunk {chunk} at byte {offset} declares {declared} bytes but only {available} remain")]
    TruncatedChunk {
        chunk: String,
        offset: usize,
        declared: usize,
        available: usize,
    },
    #[error("label file line {line}: {message}")]
    Label { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ScoreError {
    pub fn io(path: &Path, source: std::io::Error) -> ScoreError {
        ScoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One `<midi_path>\t<label_path>` manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub midi: PathBuf,
    pub labels: PathBuf,
}

impl ManifestEntry {
    /// Piece identifier: the MIDI file stem.
    pub fn piece_id(&self) -> String {
        self.midi
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// Parses a manifest. Relative paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>, ScoreError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (midi, labels) = line.split_once('\t').ok_or_else(|| ScoreError::Manifest {
            line: i + 1,
            message: "expected <midi_path>\\t<label_path>".into(),
        })?;
        out.push(ManifestEntry {
            midi: base.join(midi.trim()),
            labels: base.join(labels.trim()),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, ScoreError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScoreError::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn load_entry(entry: &ManifestEntry) -> Result<LabeledPiece, ScoreError> {
    let midi = std::fs::read(&entry.midi).map_err(|e| ScoreError::io(&entry.midi, e))?;
    let labels =
        std::fs::read_to_string(&entry.labels).map_err(|e| ScoreError::io(&entry.labels, e))?;
    load_piece(&entry.piece_id(), &midi, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rows() {
        let m = parse_manifest("a.mid\ta.lab\n\n# c\nsub/b.mid\tsub/b.lab\n", Path::new("/d")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].midi, PathBuf::from("/d/sub/b.mid"));
        assert_eq!(m[1].piece_id(), "b");
        assert!(matches!(
            parse_manifest("a.mid a.lab", Path::new(".")),
            Err(ScoreError::Manifest { line: 1, .. })
        ));
    }
}
