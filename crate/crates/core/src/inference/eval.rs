use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use super::DecodeTrace;
use crate::model::Slot;
use crate::vocab::{FrameTargets, Quality, NUM_QUALITIES};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("piece {piece}: {pred} predicted tokens, {reference} reference tokens")]
    Length {
        piece: String,
        pred: usize,
        reference: usize,
    },
    #[error("piece {0}: no tokens")]
    Empty(String),
    #[error("nothing to evaluate")]
    NoPieces,
    #[error("duplicate piece {0}")]
    Duplicate(String),
    #[error("decoding failed: {0}")]
    Model(String),
}

/// Prediction and reference for one piece.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPiece {
    pub piece_id: String,
    pub reference: FrameTargets,
    pub prediction: FrameTargets,
    /// Boundary-head probabilities; when absent the prediction's own label
    /// changes are scored as boundaries.
    pub boundary_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PieceScores {
    pub piece_id: String,
    pub tokens: usize,
    pub root: f64,
    pub quality: f64,
    pub bass: f64,
    pub full: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BoundaryScores {
    pub true_positives: u64,
    pub false_positives: u64,
    pub false_negatives: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The six commit orders, named `first>second>third`.
pub const CHAINS: [[Slot; 3]; 6] = [
    [Slot::Root, Slot::Quality, Slot::Bass],
    [Slot::Root, Slot::Bass, Slot::Quality],
    [Slot::Quality, Slot::Root, Slot::Bass],
    [Slot::Quality, Slot::Bass, Slot::Root],
    [Slot::Bass, Slot::Root, Slot::Quality],
    [Slot::Bass, Slot::Quality, Slot::Root],
];

fn chain_name(c: &[Slot]) -> String {
    c.iter().map(|s| s.name()).collect::<Vec<_>>().join(">")
}

/// Commit-order frequencies in percent of all decoded tokens.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderStats {
    pub tokens: usize,
    pub chains: BTreeMap<String, f64>,
    pub first: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub pieces: Vec<PieceScores>,
    pub macro_root: f64,
    pub macro_quality: f64,
    pub macro_bass: f64,
    pub macro_full: f64,
    /// `confusion[target][predicted]` over quality classes.
    pub confusion: Vec<Vec<u64>>,
    pub boundary: BoundaryScores,
    pub order: Option<OrderStats>,
}

/// Token accuracies per piece, their unweighted means, the quality
/// confusion matrix and boundary precision/recall/F1 at 0.5.
pub fn evaluate(pieces: &[EvalPiece]) -> Result<EvalReport, EvalError> {
    if pieces.is_empty() {
        return Err(EvalError::NoPieces);
    }
    let mut sorted: Vec<&EvalPiece> = pieces.iter().collect();
    sorted.sort_by(|a, b| a.piece_id.cmp(&b.piece_id));
    for w in sorted.windows(2) {
        if w[0].piece_id == w[1].piece_id {
            return Err(EvalError::Duplicate(w[0].piece_id.clone()));
        }
    }
    let mut confusion = vec![vec![0u64; NUM_QUALITIES]; NUM_QUALITIES];
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    let mut scores = Vec::with_capacity(sorted.len());
    for p in sorted {
        let (r, q) = (&p.reference, &p.prediction);
        let n = r.len();
        if q.len() != n || p.boundary_probs.as_ref().is_some_and(|b| b.len() != n) {
            return Err(EvalError::Length {
                piece: p.piece_id.clone(),
                pred: q.len(),
                reference: n,
            });
        }
        if n == 0 {
            return Err(EvalError::Empty(p.piece_id.clone()));
        }
        let mut hits = [0usize; 4];
        for t in 0..n {
            let ok = [r.roots[t] == q.roots[t], r.qualities[t] == q.qualities[t], r.basses[t] == q.basses[t]];
            for s in 0..3 {
                hits[s] += usize::from(ok[s]);
            }
            hits[3] += usize::from(ok.iter().all(|x| *x));
            confusion[r.qualities[t] as usize][q.qualities[t] as usize] += 1;
            let predicted = match &p.boundary_probs {
                Some(b) => b[t] >= 0.5,
                None => q.boundaries[t] == 1,
            };
            match (predicted, r.boundaries[t] == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let frac = |h: usize| h as f64 / n as f64;
        scores.push(PieceScores {
            piece_id: p.piece_id.clone(),
            tokens: n,
            root: frac(hits[0]),
            quality: frac(hits[1]),
            bass: frac(hits[2]),
            full: frac(hits[3]),
        });
    }
    let mean = |f: fn(&PieceScores) -> f64| scores.iter().map(f).sum::<f64>() / scores.len() as f64;
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalReport {
        macro_root: mean(|s| s.root),
        macro_quality: mean(|s| s.quality),
        macro_bass: mean(|s| s.bass),
        macro_full: mean(|s| s.full),
        pieces: scores,
        confusion,
        boundary: BoundaryScores {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fneg,
            precision,
            recall,
            f1,
        },
        order: None,
    })
}

/// Frequencies of the six commit orders and of each first-committed slot,
/// in percent over all tokens of all traces.
pub fn order_statistics(traces: &[DecodeTrace]) -> OrderStats {
    let mut counts = [0usize; 6];
    let mut total = 0;
    for trace in traces {
        for t in &trace.tokens {
            if let Some(i) = CHAINS.iter().position(|c| c[..] == t.order[..]) {
                counts[i] += 1;
                total += 1;
            }
        }
    }
    let pct = |c: usize| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 };
    let chains = CHAINS
        .iter()
        .zip(counts)
        .map(|(c, n)| (chain_name(c), pct(n)))
        .collect();
    let first = Slot::ALL
        .iter()
        .map(|s| {
            let n: usize = CHAINS
                .iter()
                .zip(counts)
                .filter(|(c, _)| c[0] == *s)
                .map(|(_, n)| n)
                .sum();
            (s.name().to_string(), pct(n))
        })
        .collect();
    OrderStats {
        tokens: total,
        chains,
        first,
    }
}

impl EvalReport {
    /// Quality confusion matrix as CSV, rows are targets.
    pub fn confusion_csv(&self) -> String {
        let names: Vec<&str> = Quality::ALL.iter().map(|q| q.name()).collect();
        let mut out = format!("target\\predicted,{}\n", names.join(","));
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{},{}", names[i], cells.join(","));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary, accuracies in percent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "pieces: {}", self.pieces.len());
        let _ = writeln!(
            out,
            "macro accuracy (%): root {:.2}  quality {:.2}  bass {:.2}  full {:.2}",
            100.0 * self.macro_root,
            100.0 * self.macro_quality,
            100.0 * self.macro_bass,
            100.0 * self.macro_full
        );
        let b = &self.boundary;
        let _ = writeln!(
            out,
            "boundaries: precision {:.4}  recall {:.4}  f1 {:.4}",
            b.precision, b.recall, b.f1
        );
        if let Some(o) = &self.order {
            let _ = writeln!(out, "decoding order over {} tokens (%):", o.tokens);
            for (k, v) in &o.chains {
                let _ = writeln!(out, "  {k:<22} {v:6.2}");
            }
            for (k, v) in &o.first {
                let _ = writeln!(out, "  first {k:<16} {v:6.2}");
            }
        }
        let _ = writeln!(out, "per piece (%):");
        for p in &self.pieces {
            let _ = writeln!(
                out,
                "  {:<24} {:>5} tokens  root {:6.2}  quality {:6.2}  bass {:6.2}  full {:6.2}",
                p.piece_id,
                p.tokens,
                100.0 * p.root,
                100.0 * p.quality,
                100.0 * p.bass,
                100.0 * p.full
            );
        }
        out
    }
}
