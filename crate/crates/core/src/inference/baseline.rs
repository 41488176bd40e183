//! Training-free template matching over per-token pitch-class weights.

use crate::score_io::{PianoRoll, FRAMES_PER_BEAT, LOWEST_PITCH, PATCH_SIZE};
use crate::vocab::{ChordLabel, FrameTargets, Quality, NUM_QUALITIES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    /// Penalty per template tone absent from the window.
    pub missing_penalty: f64,
    /// Penalty per unit weight of pitch classes outside the template.
    pub outside_penalty: f64,
    /// Score each token on the whole beat containing it.
    pub widen_to_beat: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            missing_penalty: 0.3,
            outside_penalty: 0.5,
            widen_to_beat: false,
        }
    }
}

/// Score of every `(root, quality)` template for pitch-class weights `w`,
/// indexed `[root * 14 + quality]`:
/// matched weight - missing_penalty * absent tones - outside_penalty * outside weight.
pub fn template_scores(w: &[f64; 12], cfg: &BaselineConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(12 * (NUM_QUALITIES - 1));
    for root in 0..12u8 {
        for q in &Quality::ALL[..NUM_QUALITIES - 1] {
            let mut in_template = [false; 12];
            for i in q.intervals() {
                in_template[((root + i) % 12) as usize] = true;
            }
            let mut matched = 0.0;
            let mut missing = 0usize;
            let mut outside = 0.0;
            for pc in 0..12 {
                match (in_template[pc], w[pc] > 0.0) {
                    (true, true) => matched += w[pc],
                    (true, false) => missing += 1,
                    (false, _) => outside += w[pc],
                }
            }
            out.push(matched - cfg.missing_penalty * missing as f64 - cfg.outside_penalty * outside);
        }
    }
    out
}

/// Labels each token with the best-scoring template; bass is the lowest
/// sounding pitch class in the window, and an empty window is N.
/// Ties go to the lower root, then the earlier quality.
pub fn rule_based_baseline(roll: &PianoRoll, cfg: &BaselineConfig) -> FrameTargets {
    let labels: Vec<ChordLabel> = (0..roll.num_tokens())
        .map(|k| {
            let (start, end) = if cfg.widen_to_beat {
                let s = k * PATCH_SIZE / FRAMES_PER_BEAT * FRAMES_PER_BEAT;
                (s, (s + FRAMES_PER_BEAT).min(roll.num_frames()))
            } else {
                (k * PATCH_SIZE, (k + 1) * PATCH_SIZE)
            };
            let mut w = [0.0; 12];
            let mut lowest: Option<usize> = None;
            for f in start..end {
                let mut seen = [false; 12];
                for key in roll.active_keys(f) {
                    seen[(key + LOWEST_PITCH as usize) % 12] = true;
                    lowest = Some(lowest.map_or(key, |l| l.min(key)));
                }
                for pc in 0..12 {
                    if seen[pc] {
                        w[pc] += 1.0 / (end - start) as f64;
                    }
                }
            }
            let Some(lowest) = lowest else {
                return ChordLabel::NO_CHORD;
            };
            let scores = template_scores(&w, cfg);
            let mut best = 0;
            for (i, s) in scores.iter().enumerate() {
                if *s > scores[best] {
                    best = i;
                }
            }
            let root = (best / (NUM_QUALITIES - 1)) as u8;
            let quality = Quality::ALL[best % (NUM_QUALITIES - 1)];
            let bass = ((lowest + LOWEST_PITCH as usize) % 12) as u8;
            ChordLabel::new(root, quality, bass).expect("pitched label")
        })
        .collect();
    FrameTargets::from_labels(&labels)
}
