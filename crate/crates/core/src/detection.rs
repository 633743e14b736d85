//! Grid detection: per-cell person scores, thresholding and 3x3 non-maximum
//! suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionGrid {
    pub width: usize,
    pub height: usize,
    /// Row-major scores, index `v * width + u`.
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub u: usize,
    pub v: usize,
    pub score: f64,
}

impl DetectionGrid {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: scores.len(),
            });
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::ParamOutOfRange("scores must lie in [0, 1]".into()));
        }
        Ok(DetectionGrid { width, height, scores })
    }

    pub fn from_logits(width: usize, height: usize, logits: &[f64]) -> Result<Self> {
        let scores = logits.iter().map(|l| crate::distributions::sigmoid(*l)).collect();
        Self::new(width, height, scores)
    }

    pub fn score(&self, u: usize, v: usize) -> f64 {
        self.scores[v * self.width + u]
    }
}

/// `(v, u)`-lexicographic order decides between equal scores.
fn beats(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && (a.1, a.2) < (b.1, b.2))
}

/// Cells with `score >= threshold` that beat every cell of their 3x3
/// neighbourhood, sorted by descending score (ties by `(v, u)`).
pub fn detect(grid: &DetectionGrid, threshold: f64) -> Vec<Detection> {
    let (w, h) = (grid.width, grid.height);
    let mut out = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let s = grid.score(u, v);
            if s < threshold {
                continue;
            }
            let mut keep = true;
            'nbh: for nv in v.saturating_sub(1)..=(v + 1).min(h - 1) {
                for nu in u.saturating_sub(1)..=(u + 1).min(w - 1) {
                    if (nu, nv) != (u, v) && !beats((s, v, u), (grid.score(nu, nv), nv, nu)) {
                        keep = false;
                        break 'nbh;
                    }
                }
            }
            if keep {
                out.push(Detection { u, v, score: s });
            }
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.v, a.u).cmp(&(b.v, b.u)))
    });
    out
}
