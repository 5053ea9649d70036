//! Classification metrics and explanation-quality scores against planted masks.

use serde::{Deserialize, Serialize};

use crate::error::{MvError, Result};
use crate::nn::argmax;
use crate::synthgen::Mask;

/// Dilation radius (pixels, Euclidean) applied to masks by the pointing game.
pub const POINTING_DILATION: f64 = 3.0;

/// Probability that a random positive outscores a random negative, ties 0.5.
///
/// Computed from midranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MvError::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MvError::InvalidArgument("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MvError::Degenerate(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the average rank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn from_predictions(num_classes: usize, predicted: &[usize], truth: &[usize]) -> Self {
        let mut counts = vec![vec![0; num_classes]; num_classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            counts[t][p] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    /// Per-class precision; a class never predicted scores 0.
    pub fn precision(&self) -> Vec<f64> {
        (0..self.counts.len())
            .map(|c| {
                let col: usize = self.counts.iter().map(|r| r[c]).sum();
                if col == 0 {
                    0.0
                } else {
                    self.counts[c][c] as f64 / col as f64
                }
            })
            .collect()
    }

    /// Per-class recall; a class absent from the truth scores 0.
    pub fn recall(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[c] as f64 / n as f64
                }
            })
            .collect()
    }
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationMetrics {
    pub n_explained: usize,
    pub pointing_hits: usize,
    pub pointing_game_accuracy: f64,
    pub q: f64,
    pub mean_topq_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub class_names: Vec<String>,
    pub positive_class: String,
    pub accuracy: f64,
    /// `None` when the evaluated set holds a single class.
    pub auc: Option<f64>,
    pub confusion: Confusion,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub explanation: Option<ExplanationMetrics>,
}

impl EvalReport {
    /// Builds the report from per-sample class probabilities.
    pub fn from_probabilities(
        probs: &[Vec<f64>],
        labels: &[usize],
        class_names: &[String],
        positive_class: usize,
    ) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(MvError::ShapeMismatch {
                expected: format!("{} probability rows", labels.len()),
                actual: format!("{}", probs.len()),
            });
        }
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let confusion = Confusion::from_predictions(class_names.len(), &predicted, labels);
        let scores: Vec<f64> = probs.iter().map(|p| p[positive_class]).collect();
        let positives: Vec<bool> = labels.iter().map(|&l| l == positive_class).collect();
        let auc = match auc(&scores, &positives) {
            Ok(a) => Some(a),
            Err(MvError::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            n_samples: labels.len(),
            class_names: class_names.to_vec(),
            positive_class: class_names[positive_class].clone(),
            accuracy: confusion.accuracy(),
            auc,
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
            explanation: None,
        })
    }
}

fn check_mask(scores: &[f64], height: usize, width: usize, mask: &Mask) -> Result<()> {
    if mask.height != height || mask.width != width || scores.len() != height * width {
        return Err(MvError::ShapeMismatch {
            expected: format!("{height}x{width}"),
            actual: format!("{}x{} mask, {} scores", mask.height, mask.width, scores.len()),
        });
    }
    if mask.is_empty() {
        return Err(MvError::InvalidArgument("ground-truth mask is empty".into()));
    }
    Ok(())
}

/// Mask grown by `radius` pixels (Euclidean).
pub fn dilate(mask: &Mask, radius: f64) -> Mask {
    let r = radius.floor() as isize;
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut out = Mask::empty(mask.height, mask.width);
    for y in 0..h {
        for x in 0..w {
            if !mask.data[(y * w + x) as usize] {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && yy < h && xx >= 0 && xx < w && ((dx * dx + dy * dy) as f64) <= radius * radius {
                        out.data[(yy * w + xx) as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Hit iff the maximal positive score (lowest flat index on ties) lies in the
/// mask dilated by [`POINTING_DILATION`]. No positive score is a miss.
pub fn pointing_game(scores: &[f64], height: usize, width: usize, mask: &Mask) -> Result<bool> {
    check_mask(scores, height, width, mask)?;
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 && best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    Ok(match best {
        Some(i) => dilate(mask, POINTING_DILATION).data[i],
        None => false,
    })
}

/// IoU between the `round(q * N)` highest-scoring pixels (ties to the lowest
/// flat index) and the mask.
pub fn topq_iou(scores: &[f64], height: usize, width: usize, mask: &Mask, q: f64) -> Result<f64> {
    check_mask(scores, height, width, mask)?;
    if !(q > 0.0 && q <= 1.0) {
        return Err(MvError::InvalidArgument(format!("q must lie in (0, 1], got {q}")));
    }
    let k = ((q * scores.len() as f64).round() as usize).max(1);
    let top = top_k_indices(scores, k);
    let inter = top.iter().filter(|&&i| mask.data[i]).count();
    let union = k + mask.count() - inter;
    Ok(inter as f64 / union as f64)
}

/// Indices of the `k` largest scores, ties resolved toward the lowest index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}
