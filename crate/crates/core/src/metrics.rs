//! Overlap metrics, head-consistency scoring and rank correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::segnet::{forward, Model, ModelError, PredictionSet};
use crate::tensor::{Real, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("mask value {value} at {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Binary `H × W` mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, MetricsError> {
        if data.len() != height * width {
            return Err(MetricsError::InvalidInput(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(MetricsError::NotBinary {
                index,
                value: data[index],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        Self {
            height,
            width,
            data: (0..height * width).map(|i| u8::from(f(i))).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Number of foreground pixels.
    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }
}

/// Dice coefficient `2|A∩B| / (|A|+|B|)`.
///
/// Two empty masks agree perfectly (1.0); one empty and one non-empty
/// mask score 0.0.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64, MetricsError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::ShapeMismatch(
            (a.height, a.width),
            (b.height, b.width),
        ));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += (x + y) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Head-consistency scores of one pool sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    /// Dice between the lower-head and final-head masks.
    pub l_dsc: f64,
    /// Dice between the middle-head and final-head masks.
    pub m_dsc: f64,
    /// `(l_dsc + m_dsc) / 2`.
    pub mean_score: f64,
    /// Dice of the final-head mask against ground truth, when known.
    pub r_dsc: Option<f64>,
    pub round: usize,
}

/// Scores sample 0 of a prediction set.
pub fn consistency_scores<T: Real>(
    preds: &PredictionSet<T>,
    sample_id: &str,
    round: usize,
) -> Result<ScoreRecord, MetricsError> {
    consistency_scores_at(preds, 0, sample_id, round)
}

pub fn consistency_scores_at<T: Real>(
    preds: &PredictionSet<T>,
    index: usize,
    sample_id: &str,
    round: usize,
) -> Result<ScoreRecord, MetricsError> {
    let [lower, middle, last] = preds.masks(index)?;
    score_masks(&lower, &middle, &last, sample_id, round)
}

pub(crate) fn score_masks(
    lower: &Mask,
    middle: &Mask,
    last: &Mask,
    sample_id: &str,
    round: usize,
) -> Result<ScoreRecord, MetricsError> {
    let l_dsc = dsc(lower, last)?;
    let m_dsc = dsc(middle, last)?;
    Ok(ScoreRecord {
        sample_id: sample_id.to_owned(),
        l_dsc,
        m_dsc,
        mean_score: (l_dsc + m_dsc) / 2.0,
        r_dsc: None,
        round,
    })
}

/// Samples per forward pass during evaluation; results do not depend on it.
pub(crate) const EVAL_BATCH: usize = 16;

/// Final-head masks for `images` (each `[1, H, W]`), batched.
pub(crate) fn final_masks(model: &Model<f32>, images: &[&Tensor<f32>]) -> Result<Vec<[Mask; 3]>, MetricsError> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let batch = Tensor::stack(chunk)?;
        let preds = forward(model, &batch)?;
        for i in 0..chunk.len() {
            out.push(preds.masks(i)?);
        }
    }
    Ok(out)
}

/// Mean Dice of the final head against ground truth over `samples`.
pub fn evaluate(model: &Model<f32>, samples: &[Sample]) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::InvalidInput("cannot evaluate an empty dataset".into()));
    }
    let truths = samples
        .iter()
        .map(|s| {
            s.mask.as_ref().ok_or_else(|| {
                MetricsError::InvalidInput(format!("sample {} has no ground truth", s.id))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let masks = final_masks(model, &images)?;
    let mut total = 0.0;
    for (pred, truth) in masks.iter().zip(truths) {
        total += dsc(&pred[2], truth)?;
    }
    Ok(total / samples.len() as f64)
}

/// Average ranks (1-based); ties share the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average ranks.
///
/// Returns `Ok(None)` when either input has constant rank (no correlation
/// is defined).
pub fn spearman_rank(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(MetricsError::InvalidInput(format!(
            "need at least 3 pairs, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::InvalidInput("non-finite value".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}
