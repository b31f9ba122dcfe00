use serde::{Deserialize, Serialize};

use super::loss::loss_on;
use super::{forward, loss, LossBreakdown, Model, ModelError, Objective, Param, TargetBatch};
use crate::tensor::gradcheck::relative_errors;
use crate::tensor::{FlushSubnormals, GradCheckReport, Graph, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, model: &Model<T>) -> Self {
        let zeros = || model.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            config,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Vec<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for another model");
        self.steps += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.steps as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Loss breakdown and the objective's gradient for every parameter, in
/// declaration order. Parameters the objective does not reach get zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub loss: LossBreakdown<T>,
    pub params: Vec<Vec<T>>,
}

pub fn gradients<T: Real>(
    model: &Model<T>,
    images: &Tensor<T>,
    target: &TargetBatch,
    objective: Objective,
) -> Result<Gradients<T>, ModelError> {
    model.check_images(images)?;
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let params = model.param_leaves(&mut g, true);
    let heads = model.forward_on(&mut g, x, &params)?;
    let (root, per_head) = loss_on(&mut g, &heads, target, objective)?;
    let head_vals = per_head.map(|v| g.value(v).data()[0]);
    let total = g.value(root).data()[0];
    if !total.is_finite() {
        return Err(ModelError::Divergence {
            loss: total.to_f64().unwrap_or(f64::NAN),
        });
    }
    g.backward(root)?;
    let grads = params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.value.len()])
        })
        .collect();
    Ok(Gradients {
        loss: LossBreakdown {
            total,
            per_head: head_vals,
        },
        params: grads,
    })
}

fn objective_value(
    model: &Model<f64>,
    images: &Tensor<f64>,
    target: &TargetBatch,
    objective: Objective,
) -> Result<f64, ModelError> {
    let preds = forward(model, images)?;
    Ok(match objective {
        Objective::Weighted(w) => loss(&preds, target, &w)?.total,
        Objective::FinalHeadOnly => loss(&preds, target, &model.config().loss_weights)?.per_head[2],
    })
}

/// Central-difference check of [`gradients`] over every model parameter,
/// flattened in declaration order.
pub fn loss_grad_check(
    model: &Model<f64>,
    images: &Tensor<f64>,
    target: &TargetBatch,
    objective: Objective,
    eps: f64,
) -> Result<GradCheckReport, ModelError> {
    let analytic: Vec<f64> = gradients(model, images, target, objective)?
        .params
        .into_iter()
        .flatten()
        .collect();
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for p in 0..probe.params().len() {
        for i in 0..probe.params()[p].value.len() {
            let orig = probe.params()[p].value.data()[i];
            probe.params_mut()[p].value.data_mut()[i] = orig + eps;
            let up = objective_value(&probe, images, target, objective)?;
            probe.params_mut()[p].value.data_mut()[i] = orig - eps;
            let down = objective_value(&probe, images, target, objective)?;
            probe.params_mut()[p].value.data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * eps));
        }
    }
    let (worst_index, max_relative_error) = relative_errors(&analytic, &numeric)
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// One Adam step on the model's weighted objective. Returns the loss
/// before the update. Subnormal intermediates are flushed to zero.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    images: &Tensor<T>,
    target: &TargetBatch,
    optimizer: &mut Adam<T>,
) -> Result<T, ModelError> {
    let _flush = FlushSubnormals::new();
    let objective = Objective::Weighted(model.config().loss_weights);
    let grads = gradients(model, images, target, objective)?;
    if let Some(bad) = grads.params.iter().flatten().find(|v| !v.is_finite()) {
        return Err(ModelError::Divergence {
            loss: bad.to_f64().unwrap_or(f64::NAN),
        });
    }
    optimizer.step(model.params_mut(), &grads.params);
    Ok(grads.loss.total)
}
