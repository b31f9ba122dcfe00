use super::{HeadVars, LossWeights, ModelError, PredictionSet};
use crate::metrics::Mask;
use crate::tensor::kernels::nll_forward;
use crate::tensor::{Graph, Real, TensorError, Var};

/// Per-pixel class ids for a batch, `[N, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch {
    shape: [usize; 3],
    ids: Vec<u8>,
}

impl TargetBatch {
    pub fn new(shape: [usize; 3], ids: Vec<u8>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected: shape.iter().product(),
                actual: ids.len(),
            });
        }
        Ok(Self { shape, ids })
    }

    /// Stacks binary masks; foreground becomes class 1.
    pub fn from_masks(masks: &[&Mask]) -> Result<Self, TensorError> {
        let first = masks.first().ok_or(TensorError::InvalidArgument {
            op: "TargetBatch::from_masks",
            reason: "no masks".into(),
        })?;
        let (h, w) = (first.height(), first.width());
        let mut ids = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            if (m.height(), m.width()) != (h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "TargetBatch::from_masks",
                    left: vec![h, w],
                    right: vec![m.height(), m.width()],
                    reason: "masks must share a size",
                });
            }
            ids.extend_from_slice(m.data());
        }
        Ok(Self {
            shape: [masks.len(), h, w],
            ids,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }
}

/// Loss value of each head and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Lower, middle, final.
    pub per_head: [T; 3],
}

/// What the backward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `α_l·L_l + α_m·L_m + α_f·L_f`.
    Weighted(LossWeights),
    /// `L_f` alone, as a plain single-head network would train.
    FinalHeadOnly,
}

fn check_target(preds_shape: &[usize], target: &TargetBatch) -> Result<(), TensorError> {
    let [n, _, h, w] = match preds_shape {
        &[n, c, h, w] => [n, c, h, w],
        _ => {
            return Err(TensorError::Rank {
                op: "loss",
                expected: 4,
                actual: preds_shape.to_vec(),
            })
        }
    };
    if target.shape != [n, h, w] {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            left: preds_shape.to_vec(),
            right: target.shape.to_vec(),
            reason: "target must be [N, H, W] of the predictions",
        });
    }
    Ok(())
}

/// Mean per-pixel negative log-likelihood of each head, and the weighted
/// total accumulated as `0 + α_l·L_l + α_m·L_m + α_f·L_f` in `T`.
pub fn loss<T: Real>(
    preds: &PredictionSet<T>,
    target: &TargetBatch,
    weights: &LossWeights,
) -> Result<LossBreakdown<T>, ModelError> {
    let mut per_head = [T::zero(); 3];
    for (slot, p) in [&preds.p_l, &preds.p_m, &preds.p_f].into_iter().enumerate() {
        check_target(p.shape(), target)?;
        per_head[slot] = nll_forward(p.dims4("loss")?, p.data(), &target.ids);
    }
    let mut total = T::zero();
    for (w, l) in weights.as_array().into_iter().zip(per_head) {
        total += T::lit(w) * l;
    }
    Ok(LossBreakdown { total, per_head })
}

/// Records the loss on `g`; returns the objective root and the per-head nodes.
pub(crate) fn loss_on<T: Real>(
    g: &mut Graph<T>,
    heads: &HeadVars,
    target: &TargetBatch,
    objective: Objective,
) -> Result<(Var, [Var; 3]), TensorError> {
    check_target(g.value(heads.probs[0]).shape(), target)?;
    let mut per_head = heads.probs;
    for (slot, p) in heads.probs.into_iter().enumerate() {
        per_head[slot] = g.nll(p, &target.ids)?;
    }
    let root = match objective {
        Objective::Weighted(w) => {
            let terms: Vec<(Var, T)> = w
                .as_array()
                .into_iter()
                .zip(per_head)
                .map(|(a, v)| (v, T::lit(a)))
                .collect();
            g.weighted_sum(&terms)?
        }
        Objective::FinalHeadOnly => per_head[2],
    };
    Ok((root, per_head))
}
