use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Softmax {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    MulConst {
        input: Var,
        weights: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Nll {
        probs: Var,
        targets: Vec<u8>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order and only ever reference earlier
/// nodes, so the tape is acyclic and reverse index order is a reverse
/// topological order. [`Graph::backward`] visits each node once.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`, if
    /// any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geometry = ConvGeometry::new(x.dims4("conv2d")?, k.dims4("conv2d")?, stride, padding)?;
        let b = self.value(bias);
        if b.len() != geometry.filters {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: k.shape().to_vec(),
                right: b.shape().to_vec(),
                reason: "bias length differs from filter count",
            });
        }
        let out = kernels::conv2d_forward(&geometry, x.data(), k.data(), b.data());
        let shape = vec![geometry.batch, geometry.filters, geometry.out_h, geometry.out_w];
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// 2×2 window, stride 2. Spatial dims must be even.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("maxpool2d")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                reason: format!("spatial dims {h}×{w} must be even"),
            });
        }
        let (out, argmax) = kernels::maxpool2d_forward([n, c, h, w], x.data());
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, h / 2, w / 2], out)?,
            Op::MaxPool2d { input, argmax },
            rg,
        ))
    }

    /// Bilinear upsampling by an integer factor with aligned corners.
    pub fn upsample_bilinear(&mut self, input: Var, factor: usize) -> Result<Var, TensorError> {
        if factor == 0 {
            return Err(TensorError::InvalidArgument {
                op: "upsample_bilinear",
                reason: "factor must be at least 1".into(),
            });
        }
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("upsample_bilinear")?;
        let out = kernels::upsample_bilinear_forward([n, c, h, w], factor, x.data());
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![n, c, h * factor, w * factor], out)?,
            Op::Upsample { input, factor },
            rg,
        ))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let dims = x.dims4("softmax_channels")?;
        if dims[1] < 2 {
            return Err(TensorError::InvalidArgument {
                op: "softmax_channels",
                reason: format!("need at least 2 channels, got {}", dims[1]),
            });
        }
        let out = kernels::softmax_channels_forward(dims, x.data());
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(dims.to_vec(), out)?, Op::Softmax { input }, rg))
    }

    /// `a` fills the first channels, `b` the rest.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        let da = ta.dims4("concat_channels")?;
        let db = tb.dims4("concat_channels")?;
        if da[0] != db[0] || da[2] != db[2] || da[3] != db[3] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: da.to_vec(),
                right: db.to_vec(),
                reason: "batch and spatial dims must match",
            });
        }
        let out = kernels::concat_channels_forward(da, ta.data(), db, tb.data());
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![da[0], da[1] + db[1], da[2], da[3]], out)?,
            Op::Concat { a, b },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape().to_vec(),
            data: kernels::relu_forward(x.data()),
            grad: None,
        };
        let rg = self.needs(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    /// Elementwise product with a constant tensor of the same size.
    pub fn mul_const(&mut self, input: Var, weights: Vec<T>) -> Result<Var, TensorError> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(TensorError::LengthMismatch {
                shape: x.shape().to_vec(),
                expected: x.len(),
                actual: weights.len(),
            });
        }
        let data = x.data().iter().zip(&weights).map(|(&a, &b)| a * b).collect();
        let value = Tensor {
            shape: x.shape().to_vec(),
            data,
            grad: None,
        };
        let rg = self.needs(&[input]);
        Ok(self.push(value, Op::MulConst { input, weights }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().copied().sum::<T>();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(total), Op::Sum { input }, rg)
    }

    /// Mean negative log-likelihood of `targets` under per-pixel class
    /// probabilities `probs` (`[N, C, H, W]`), one class id per `(n, y, x)`.
    pub fn nll(&mut self, probs: Var, targets: &[u8]) -> Result<Var, TensorError> {
        let p = self.value(probs);
        let dims = p.dims4("nll")?;
        let [n, c, h, w] = dims;
        if targets.len() != n * h * w {
            return Err(TensorError::LengthMismatch {
                shape: vec![n, h, w],
                expected: n * h * w,
                actual: targets.len(),
            });
        }
        if let Some(bad) = targets.iter().position(|&t| t as usize >= c) {
            return Err(TensorError::InvalidArgument {
                op: "nll",
                reason: format!("target class {} at {bad} exceeds {c} classes", targets[bad]),
            });
        }
        let loss = kernels::nll_forward(dims, p.data(), targets);
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated left to right.
    ///
    /// Terms with a weight of exactly zero contribute `0·xᵢ` to the value but
    /// send no gradient at all, so their sub-graphs are skipped by backward.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var, TensorError> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let x = self.value(v);
            if x.len() != 1 {
                return Err(TensorError::InvalidArgument {
                    op: "weighted_sum",
                    reason: format!("term of shape {:?} is not a scalar", x.shape()),
                });
            }
            total += w * x.data()[0];
        }
        let rg = terms
            .iter()
            .any(|&(v, w)| w != T::zero() && self.nodes[v.0].requires_grad);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates d(root)/d(node) to every node that depends on a leaf
    /// requiring gradients, storing results in each node's gradient buffer.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                reason: format!(
                    "root must be a scalar, got shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            });
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            for (input, g) in self.input_grads(idx, &dy) {
                accumulate(&mut grads[input.0], g);
            }
            self.nodes[idx].value.grad = Some(dy);
        }
        Ok(())
    }

    fn input_grads(&self, idx: usize, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let g = kernels::conv2d_backward(
                    geometry,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    dy,
                    wants(*input),
                );
                if let Some(dx) = g.input {
                    out.push((*input, dx));
                }
                if wants(*kernel) {
                    out.push((*kernel, g.kernel));
                }
                if wants(*bias) {
                    out.push((*bias, g.bias));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let len = self.value(*input).len();
                out.push((*input, kernels::maxpool2d_backward(len, argmax, dy)));
            }
            Op::Upsample { input, factor } => {
                let dims = self.value(*input).dims4("upsample_bilinear").expect("checked");
                out.push((*input, kernels::upsample_bilinear_backward(dims, *factor, dy)));
            }
            Op::Softmax { input } => {
                let dims = node.value.dims4("softmax_channels").expect("checked");
                out.push((
                    *input,
                    kernels::softmax_channels_backward(dims, node.value.data(), dy),
                ));
            }
            Op::Concat { a, b } => {
                let da = self.value(*a).dims4("concat_channels").expect("checked");
                let db = self.value(*b).dims4("concat_channels").expect("checked");
                let (ga, gb) = kernels::concat_channels_backward(da, db, dy);
                if wants(*a) {
                    out.push((*a, ga));
                }
                if wants(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Relu { input } => {
                out.push((*input, kernels::relu_backward(self.value(*input).data(), dy)));
            }
            Op::MulConst { input, weights } => {
                out.push((
                    *input,
                    dy.iter().zip(weights).map(|(&g, &w)| g * w).collect(),
                ));
            }
            Op::Sum { input } => {
                out.push((*input, vec![dy[0]; self.value(*input).len()]));
            }
            Op::Nll { probs, targets } => {
                let p = self.value(*probs);
                let dims = p.dims4("nll").expect("checked");
                out.push((*probs, kernels::nll_backward(dims, p.data(), targets, dy[0])));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if w != T::zero() && wants(v) {
                        out.push((v, vec![w * dy[0]]));
                    }
                }
            }
        }
        out.retain(|(v, _)| wants(*v));
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}
