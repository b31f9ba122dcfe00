//! Deeply supervised encoder–decoder segmentation network.
//!
//! A compact U-Net: `depth` encoder stages of two 3×3 conv + ReLU followed
//! by 2×2 max pooling, a bottleneck block, and a mirrored decoder whose
//! stages upsample ×2 (bilinear), concatenate the matching skip connection,
//! and apply two 3×3 conv + ReLU. Three 1×1 classifier heads read decoder
//! stages: the *lower* and *middle* auxiliary heads (configurable stages,
//! by default the first two) and the *final* head on the last stage. Aux
//! logits are bilinearly upsampled to full resolution before the softmax.
//!
//! There is no normalisation layer, so a forward pass is a deterministic
//! function of parameters and one sample, independent of batch composition.

mod checkpoint;
mod loss;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Mask;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, Checkpoint};
pub use loss::{loss, LossBreakdown, Objective, TargetBatch};
pub use train::{gradients, loss_grad_check, train_step, Adam, AdamConfig, Gradients};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite training loss {loss}")]
    Divergence { loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Weights of the three per-head losses in the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_l: f64,
    pub alpha_m: f64,
    pub alpha_f: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_l: 0.1,
            alpha_m: 0.3,
            alpha_f: 0.6,
        }
    }
}

impl LossWeights {
    pub fn new(alpha_l: f64, alpha_m: f64, alpha_f: f64) -> Self {
        Self {
            alpha_l,
            alpha_m,
            alpha_f,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha_l, self.alpha_m, self.alpha_f]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let w = self.as_array();
        if w.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got {w:?}"
            )));
        }
        if w.iter().sum::<f64>() <= 0.0 {
            return Err(ModelError::InvalidConfig(
                "loss weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub classes: usize,
    /// `(height, width)`; both divisible by `2^depth`.
    pub input_size: (usize, usize),
    /// Decoder stage (0 = deepest) feeding the lower auxiliary head.
    pub aux_stage_lower: usize,
    /// Decoder stage feeding the middle auxiliary head.
    pub aux_stage_middle: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            classes: 2,
            input_size: (64, 64),
            aux_stage_lower: 0,
            aux_stage_middle: 1,
            loss_weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.classes != 2 {
            return bad(format!("only 2 classes are supported, got {}", self.classes));
        }
        let (h, w) = self.input_size;
        let div = 1usize << self.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return bad(format!(
                "input size {h}×{w} is not divisible by 2^depth = {div}"
            ));
        }
        if self.aux_stage_lower >= self.depth || self.aux_stage_middle >= self.depth {
            return bad(format!(
                "aux stages ({}, {}) must be below depth {}",
                self.aux_stage_lower, self.aux_stage_middle, self.depth
            ));
        }
        if self.aux_stage_lower == self.aux_stage_middle {
            return bad("aux stages must be distinct".into());
        }
        self.loss_weights.validate()
    }

    fn enc_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    fn dec_channels(&self, stage: usize) -> usize {
        self.base_channels << (self.depth - 1 - stage)
    }

    /// Upsampling factor from decoder stage `stage` to full resolution.
    fn stage_factor(&self, stage: usize) -> usize {
        1 << (self.depth - 1 - stage)
    }

    /// Parameter declaration order: encoder stages, bottleneck, decoder
    /// stages, then the lower, middle and final heads; weight before bias.
    fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let block = |prefix: String, cin: usize, cout: usize, specs: &mut Vec<ParamSpec>| {
            for (i, c_in) in [(1, cin), (2, cout)] {
                specs.extend(ParamSpec::conv(format!("{prefix}.conv{i}"), c_in, cout, 3, ParamGroup::Trunk));
            }
        };
        for s in 0..self.depth {
            let cin = if s == 0 { 1 } else { self.enc_channels(s - 1) };
            block(format!("enc{s}"), cin, self.enc_channels(s), &mut specs);
        }
        let bottom = self.enc_channels(self.depth - 1);
        block("bottleneck".into(), bottom, bottom * 2, &mut specs);
        for s in 0..self.depth {
            let up = self.base_channels << (self.depth - s);
            let out = self.dec_channels(s);
            block(format!("dec{s}"), up + out, out, &mut specs);
        }
        for (head, stage) in [
            (Head::Lower, self.aux_stage_lower),
            (Head::Middle, self.aux_stage_middle),
            (Head::Final, self.depth - 1),
        ] {
            specs.extend(ParamSpec::conv(
                format!("head_{}", head.name()),
                self.dec_channels(stage),
                self.classes,
                1,
                ParamGroup::Head(head),
            ));
        }
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Lower,
    Middle,
    Final,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Lower, Head::Middle, Head::Final];

    pub fn name(self) -> &'static str {
        match self {
            Head::Lower => "lower",
            Head::Middle => "middle",
            Head::Final => "final",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Trunk,
    Head(Head),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    group: ParamGroup,
}

impl ParamSpec {
    /// Weight and bias specs of one convolution.
    fn conv(name: String, cin: usize, cout: usize, k: usize, group: ParamGroup) -> [ParamSpec; 2] {
        [
            ParamSpec {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                fan_in: cin * k * k,
                group,
            },
            ParamSpec {
                name: format!("{name}.bias"),
                shape: vec![cout],
                fan_in: 0,
                group,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Trunk parameters plus the three classifier heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
}

/// Full-resolution class probabilities of the lower, middle and final heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<T> {
    pub p_l: Tensor<T>,
    pub p_m: Tensor<T>,
    pub p_f: Tensor<T>,
}

impl<T: Real> PredictionSet<T> {
    pub fn head(&self, head: Head) -> &Tensor<T> {
        match head {
            Head::Lower => &self.p_l,
            Head::Middle => &self.p_m,
            Head::Final => &self.p_f,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.p_f.shape()[0]
    }

    /// Binary masks of sample `index` for the lower, middle and final heads.
    pub fn masks(&self, index: usize) -> Result<[Mask; 3], TensorError> {
        Ok([
            binarize(&self.p_l, index)?,
            binarize(&self.p_m, index)?,
            binarize(&self.p_f, index)?,
        ])
    }
}

/// Foreground wherever the foreground probability is strictly above 0.5;
/// an exact 0.5 is background.
pub fn binarize<T: Real>(probs: &Tensor<T>, index: usize) -> Result<Mask, TensorError> {
    let [n, c, h, w] = probs.dims4("binarize")?;
    if index >= n || c != 2 {
        return Err(TensorError::InvalidArgument {
            op: "binarize",
            reason: format!("need sample {index} of a 2-class map, got shape {:?}", probs.shape()),
        });
    }
    let plane = h * w;
    let fg = &probs.data()[(index * 2 + 1) * plane..(index * 2 + 2) * plane];
    let half = T::lit(0.5);
    Ok(Mask::from_fn(h, w, |i| fg[i] > half))
}

/// Graph nodes produced by one forward pass.
pub(crate) struct HeadVars {
    pub probs: [Var; 3],
}

/// Builds a model with He-scaled normal weights drawn from the config seed.
pub fn build_model<T: Real>(config: &ModelConfig) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = config
        .layout()
        .into_iter()
        .map(|spec| {
            let value = if spec.fan_in == 0 {
                Tensor::zeros(&spec.shape)
            } else {
                let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt())
                    .expect("positive std");
                Tensor::from_fn(&spec.shape, |_| T::lit(normal.sample(&mut rng)))
            };
            Param {
                name: spec.name,
                group: spec.group,
                value,
            }
        })
        .collect();
    Ok(Model {
        config: config.clone(),
        params,
    })
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn trunk_params(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(|p| p.group == ParamGroup::Trunk)
    }

    pub fn head_params(&self, head: Head) -> impl Iterator<Item = &Param<T>> {
        self.params
            .iter()
            .filter(move |p| p.group == ParamGroup::Head(head))
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Rebuilds a model from parameters in declaration order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        let params = layout
            .into_iter()
            .zip(params)
            .map(|(spec, value)| {
                if value.shape() != spec.shape.as_slice() {
                    return Err(ModelError::InvalidConfig(format!(
                        "{} has shape {:?}, expected {:?}",
                        spec.name,
                        value.shape(),
                        spec.shape
                    )));
                }
                Ok(Param {
                    name: spec.name,
                    group: spec.group,
                    value,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub(crate) fn check_images(&self, images: &Tensor<T>) -> Result<(), ModelError> {
        let [_, c, h, w] = images.dims4("forward")?;
        if c != 1 || (h, w) != self.config.input_size {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: images.shape().to_vec(),
                right: vec![1, self.config.input_size.0, self.config.input_size.1],
                reason: "images must be [N, 1, H, W] at the configured input size",
            }
            .into());
        }
        Ok(())
    }

    /// Records the network on `g`. `params` are this model's parameter
    /// nodes in declaration order.
    pub(crate) fn forward_on(
        &self,
        g: &mut Graph<T>,
        images: Var,
        params: &[Var],
    ) -> Result<HeadVars, TensorError> {
        let cfg = &self.config;
        let mut cursor = params.iter().copied();
        let mut next = || cursor.next().expect("parameter layout");
        let conv_relu = |g: &mut Graph<T>, x: Var, w: Var, b: Var| -> Result<Var, TensorError> {
            let y = g.conv2d(x, w, b, 1, 1)?;
            Ok(g.relu(y))
        };

        let mut x = images;
        let mut skips = Vec::with_capacity(cfg.depth);
        for _ in 0..=cfg.depth {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            x = conv_relu(g, x, w1, b1)?;
            x = conv_relu(g, x, w2, b2)?;
            if skips.len() < cfg.depth {
                skips.push(x);
                x = g.maxpool2d(x)?;
            }
        }
        let mut stage_out = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let up = g.upsample_bilinear(x, 2)?;
            let cat = g.concat_channels(skips[cfg.depth - 1 - s], up)?;
            x = conv_relu(g, cat, w1, b1)?;
            x = conv_relu(g, x, w2, b2)?;
            stage_out.push(x);
        }
        let mut probs = [images; 3];
        for (slot, stage) in [cfg.aux_stage_lower, cfg.aux_stage_middle, cfg.depth - 1]
            .into_iter()
            .enumerate()
        {
            let (w, b) = (next(), next());
            let mut logits = g.conv2d(stage_out[stage], w, b, 1, 0)?;
            let factor = cfg.stage_factor(stage);
            if factor > 1 {
                logits = g.upsample_bilinear(logits, factor)?;
            }
            probs[slot] = g.softmax_channels(logits)?;
        }
        Ok(HeadVars { probs })
    }

    pub(crate) fn param_leaves(&self, g: &mut Graph<T>, track: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone(), track))
            .collect()
    }
}

/// Probability maps of all three heads for a `[N, 1, H, W]` batch.
pub fn forward<T: Real>(model: &Model<T>, images: &Tensor<T>) -> Result<PredictionSet<T>, ModelError> {
    model.check_images(images)?;
    let mut g = Graph::new();
    let x = g.leaf(images.clone(), false);
    let params = model.param_leaves(&mut g, false);
    let heads = model.forward_on(&mut g, x, &params)?;
    Ok(PredictionSet {
        p_l: g.value(heads.probs[0]).clone(),
        p_m: g.value(heads.probs[1]).clone(),
        p_f: g.value(heads.probs[2]).clone(),
    })
}

/// Lower, middle and final binary masks for one `[1, H, W]` image.
pub fn predict_mask<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<[Mask; 3], ModelError> {
    let batch = image.clone().reshape(
        std::iter::once(1)
            .chain(image.shape().iter().copied())
            .collect(),
    )?;
    let preds = forward(model, &batch)?;
    Ok(preds.masks(0)?)
}
