use super::{NoteEvent, FRAMES_PER_BEAT, LOWEST_PITCH, NUM_KEYS, PATCH_SIZE};

/// Binary frame-by-key activation grid at 12 frames per beat.
///
/// The frame count is always a multiple of [`PATCH_SIZE`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PianoRoll {
    piece_id: String,
    frames: usize,
    cells: Vec<bool>,
}

/// Frame count for a piece of `total_beats`, padded to whole patches.
pub fn frames_for_beats(total_beats: f64) -> usize {
    let raw = (total_beats * FRAMES_PER_BEAT as f64 - 1e-9).ceil().max(0.0) as usize;
    raw.div_ceil(PATCH_SIZE) * PATCH_SIZE
}

impl PianoRoll {
    /// All-zero roll; `frames` is rounded up to a multiple of the patch size.
    pub fn zeros(piece_id: String, frames: usize) -> PianoRoll {
        let frames = frames.div_ceil(PATCH_SIZE) * PATCH_SIZE;
        PianoRoll {
            piece_id,
            frames,
            cells: vec![false; frames * NUM_KEYS],
        }
    }

    pub fn piece_id(&self) -> &str {
        &self.piece_id
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_tokens(&self) -> usize {
        self.frames / PATCH_SIZE
    }

    pub fn get(&self, frame: usize, key: usize) -> bool {
        self.cells[frame * NUM_KEYS + key]
    }

    pub fn set(&mut self, frame: usize, key: usize, on: bool) {
        self.cells[frame * NUM_KEYS + key] = on;
    }

    /// Key indices (0 = A0) sounding in `frame`, ascending.
    pub fn active_keys(&self, frame: usize) -> Vec<usize> {
        let row = &self.cells[frame * NUM_KEYS..(frame + 1) * NUM_KEYS];
        row.iter()
            .enumerate()
            .filter_map(|(k, &on)| on.then_some(k))
            .collect()
    }

    pub fn count_active(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Row-major `frames x 88` values in {0, 1}.
    pub fn to_values(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Output of [`build_piano_roll`].
#[derive(Debug, Clone, PartialEq)]
pub struct RollBuild {
    pub roll: PianoRoll,
    /// Events dropped for pitches outside 21..=108.
    pub dropped_out_of_range: usize,
}

/// Rasterizes notes: cell `(t, p - 21)` is set iff the note overlaps frame
/// `t`, which covers beats `[t/12, (t+1)/12)`.
pub fn build_piano_roll(piece_id: &str, events: &[NoteEvent], total_beats: f64) -> RollBuild {
    let mut roll = PianoRoll::zeros(piece_id.to_string(), frames_for_beats(total_beats));
    let mut dropped = 0;
    let fpb = FRAMES_PER_BEAT as f64;
    for ev in events {
        if !(LOWEST_PITCH..LOWEST_PITCH + NUM_KEYS as u8).contains(&ev.pitch) {
            dropped += 1;
            continue;
        }
        let key = (ev.pitch - LOWEST_PITCH) as usize;
        let first = (ev.onset * fpb + 1e-9).floor().max(0.0) as usize;
        let last = ((ev.end() * fpb - 1e-9).ceil().max(0.0) as usize).min(roll.num_frames());
        for t in first..last {
            roll.set(t, key, true);
        }
    }
    RollBuild {
        roll,
        dropped_out_of_range: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(pitch: u8, onset: f64, duration: f64) -> NoteEvent {
        NoteEvent {
            pitch,
            onset,
            duration,
            velocity: 64,
        }
    }

    // independent oracle: a frame is covered iff [onset, end) and the frame
    // interval intersect with positive length
    fn covered_frames(onset: f64, duration: f64, frames: usize) -> Vec<usize> {
        (0..frames)
            .filter(|&t| {
                let lo = t as f64 / 12.0;
                let hi = (t + 1) as f64 / 12.0;
                onset.max(lo) < (onset + duration).min(hi) - 1e-12
            })
            .collect()
    }

    #[test]
    fn one_beat_middle_c() {
        let roll = build_piano_roll("p", &[note(60, 0.0, 1.0)], 1.0).roll;
        assert_eq!(roll.num_frames(), 12);
        for t in 0..12 {
            assert_eq!(roll.active_keys(t), vec![39]);
        }
        assert_eq!(roll.count_active(), 12);
    }

    #[test]
    fn empty_roll() {
        let roll = build_piano_roll("p", &[], 2.0).roll;
        assert_eq!(roll.num_frames(), 24);
        assert_eq!(roll.count_active(), 0);
    }

    #[test]
    fn fractional_note() {
        let roll = build_piano_roll("p", &[note(60, 0.25, 0.5)], 1.0).roll;
        let set: Vec<_> = (0..roll.num_frames()).filter(|&t| roll.get(t, 39)).collect();
        assert_eq!(set, covered_frames(0.25, 0.5, roll.num_frames()));
        assert_eq!(set, (3..=8).collect::<Vec<_>>());
    }

    #[test]
    fn pads_to_patch_multiple_and_drops_out_of_range() {
        let built = build_piano_roll("p", &[note(20, 0.0, 1.0), note(109, 0.0, 1.0), note(21, 0.0, 0.1)], 1.1);
        // ceil(13.2) = 14 -> 18
        assert_eq!(built.roll.num_frames(), 18);
        assert_eq!(built.dropped_out_of_range, 2);
        assert!(built.roll.get(0, 0) && built.roll.get(1, 0) && !built.roll.get(2, 0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cell_count_matches_oracle(
                spec in prop::collection::vec((0usize..88, 0u32..96, 1u32..48), 0..12)
            ) {
                // distinct keys so no two events share a cell
                let mut seen = std::collections::HashSet::new();
                let events: Vec<_> = spec
                    .into_iter()
                    .filter(|(k, _, _)| seen.insert(*k))
                    .map(|(k, on, dur)| note(k as u8 + 21, on as f64 / 24.0, dur as f64 / 24.0))
                    .collect();
                let total = 6.0;
                let roll = build_piano_roll("p", &events, total).roll;
                let expected: usize = events
                    .iter()
                    .map(|e| covered_frames(e.onset, e.duration, roll.num_frames()).len())
                    .sum();
                prop_assert_eq!(roll.count_active(), expected);
                prop_assert_eq!(roll.num_frames() % 6, 0);
            }
        }
    }
}
