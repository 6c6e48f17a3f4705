//! Reverse-mode autodiff over a recorded operation tape.
//!
//! Operations append nodes in topological order during the forward pass;
//! `backward` walks the tape once in reverse and accumulates gradients into
//! every node whose subgraph contains a `requires_grad` leaf. A tape can be
//! consumed by backward exactly once.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: VarId,
        kernels: VarId,
        stride: usize,
        padding: usize,
        mode: PadMode,
    },
    ConvTranspose2d {
        input: VarId,
        kernels: VarId,
        stride: usize,
        padding: usize,
    },
    InstanceNorm {
        input: VarId,
        gamma: VarId,
        beta: VarId,
        means: Vec<f64>,
        invstds: Vec<f64>,
    },
    LeakyRelu {
        input: VarId,
        slope: f64,
    },
    Tanh {
        input: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Scale {
        input: VarId,
        c: f64,
    },
    BiasAdd {
        input: VarId,
        bias: VarId,
    },
    SliceChannels {
        input: VarId,
        start: usize,
        count: usize,
    },
    AvgPool2 {
        input: VarId,
    },
    L1Loss {
        a: VarId,
        b: VarId,
    },
    MseLoss {
        a: VarId,
        b: VarId,
    },
    Sum {
        input: VarId,
    },
    BceWithLogits {
        logits: VarId,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> VarId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn rg(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: VarId,
        kernels: VarId,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<VarId> {
        let geom = self.conv_geom(input, kernels, stride, padding, mode)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernels).data(),
            &geom,
        );
        let t = Tensor::new(vec![geom.cout, geom.ho, geom.wo], out).expect("conv output shape");
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            t,
            rg,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                mode,
            },
        ))
    }

    fn conv_geom(
        &self,
        input: VarId,
        kernels: VarId,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> Result<ConvGeom> {
        let ishape = self.value(input).shape();
        let kshape = self.value(kernels).shape();
        if ishape.len() != 3 || kshape.len() != 4 || ishape[0] != kshape[1] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: kshape.to_vec(),
                got: ishape.to_vec(),
            });
        }
        let (kh, kw) = (kshape[2], kshape[3]);
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv2d requires odd kernel and stride >= 1, got {kh}x{kw} stride {stride}"
            )));
        }
        let ho = kernels::conv_out_extent(ishape[1], kh, stride, padding)?;
        let wo = kernels::conv_out_extent(ishape[2], kw, stride, padding)?;
        Ok(ConvGeom {
            cin: ishape[0],
            cout: kshape[0],
            h: ishape[1],
            w: ishape[2],
            kh,
            kw,
            stride,
            padding,
            mode,
            ho,
            wo,
        })
    }

    /// Kernels laid out [cin, cout, kh, kw]; zero padding only.
    pub fn conv_transpose2d(
        &mut self,
        input: VarId,
        kernels: VarId,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernels).shape().to_vec();
        if ishape.len() != 3 || kshape.len() != 4 || ishape[0] != kshape[0] {
            return Err(Error::ShapeMismatch {
                context: "conv_transpose2d",
                expected: kshape,
                got: ishape,
            });
        }
        let (cin, cout, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let (h, w) = (ishape[1], ishape[2]);
        let ho = (h - 1) * stride + kh - 2 * padding;
        let wo = (w - 1) * stride + kw - 2 * padding;
        let out = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(kernels).data(),
            cin,
            cout,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            ho,
            wo,
        );
        let t = Tensor::new(vec![cout, ho, wo], out).expect("convT output shape");
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            t,
            rg,
            Op::ConvTranspose2d {
                input,
                kernels,
                stride,
                padding,
            },
        ))
    }

    pub fn instance_norm(
        &mut self,
        input: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3
            || self.value(gamma).numel() != shape[0]
            || self.value(beta).numel() != shape[0]
        {
            return Err(Error::ShapeMismatch {
                context: "instance_norm",
                expected: vec![shape[0]],
                got: self.value(gamma).shape().to_vec(),
            });
        }
        let hw = shape[1] * shape[2];
        let (out, means, invstds) = kernels::instance_norm_forward(
            self.value(input).data(),
            shape[0],
            hw,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let t = Tensor::new(shape, out).expect("instance norm shape");
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            rg,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                means,
                invstds,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: VarId, slope: f64) -> VarId {
        let t = self.value(input).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(input);
        self.push(t, rg, Op::LeakyRelu { input, slope })
    }

    pub fn tanh(&mut self, input: VarId) -> VarId {
        let t = self.value(input).map(f64::tanh);
        let rg = self.rg(input);
        self.push(t, rg, Op::Tanh { input })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let t = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add { a, b }))
    }

    pub fn scale(&mut self, input: VarId, c: f64) -> VarId {
        let t = self.value(input).scale(c);
        let rg = self.rg(input);
        self.push(t, rg, Op::Scale { input, c })
    }

    /// bias has shape [C]; added per channel of a [C,H,W] input.
    pub fn bias_add(&mut self, input: VarId, bias: VarId) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 || self.value(bias).numel() != shape[0] {
            return Err(Error::ShapeMismatch {
                context: "bias_add",
                expected: vec![shape[0]],
                got: self.value(bias).shape().to_vec(),
            });
        }
        let hw = shape[1] * shape[2];
        let bdata = self.value(bias).data().to_vec();
        let mut out = self.value(input).data().to_vec();
        for c in 0..shape[0] {
            let bv = bdata[c];
            for v in &mut out[c * hw..(c + 1) * hw] {
                *v += bv;
            }
        }
        let t = Tensor::new(shape, out).expect("bias_add shape");
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(t, rg, Op::BiasAdd { input, bias }))
    }

    pub fn slice_channels(&mut self, input: VarId, start: usize, count: usize) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 || start + count > shape[0] {
            return Err(Error::ShapeMismatch {
                context: "slice_channels",
                expected: shape,
                got: vec![start, count],
            });
        }
        let hw = shape[1] * shape[2];
        let data = self.value(input).data()[start * hw..(start + count) * hw].to_vec();
        let t = Tensor::new(vec![count, shape[1], shape[2]], data).expect("slice shape");
        let rg = self.rg(input);
        Ok(self.push(t, rg, Op::SliceChannels { input, start, count }))
    }

    /// 2x2 average pooling; extents must be even. Stride-2 stages use a
    /// stride-1 conv followed by this, since odd kernels with stride 2 never
    /// give integral output extents on even images.
    pub fn avg_pool2(&mut self, input: VarId) -> Result<VarId> {
        let shape = self.value(input).shape().to_vec();
        if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
            return Err(Error::ShapeMismatch {
                context: "avg_pool2",
                expected: vec![shape[0], shape[1] / 2 * 2, shape[2] / 2 * 2],
                got: shape,
            });
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let base = (ci * h + 2 * oh) * w + 2 * ow;
                    out[(ci * ho + oh) * wo + ow] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out).expect("avg_pool2 shape");
        let rg = self.rg(input);
        Ok(self.push(t, rg, Op::AvgPool2 { input }))
    }

    /// Mean absolute difference; subgradient at equal elements is 0.
    pub fn l1_loss(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.value(a).mean_abs_diff(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::L1Loss { a, b }))
    }

    pub fn mse_loss(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch {
                context: "mse_loss",
                expected: ta.shape().to_vec(),
                got: tb.shape().to_vec(),
            });
        }
        let n = ta.numel() as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), rg, Op::MseLoss { a, b }))
    }

    pub fn sum(&mut self, input: VarId) -> VarId {
        let v = self.value(input).data().iter().sum::<f64>();
        let rg = self.rg(input);
        self.push(Tensor::scalar(v), rg, Op::Sum { input })
    }

    /// Sigmoid cross-entropy against a constant target, averaged over elements.
    pub fn bce_with_logits(&mut self, logits: VarId, target: f64) -> VarId {
        let t = self.value(logits);
        let n = t.numel() as f64;
        let v = t
            .data()
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(Tensor::scalar(v), rg, Op::BceWithLogits { logits, target })
    }

    /// Populate gradients of `loss` with respect to every recorded tensor.
    /// Consumes the tape's backward capability.
    pub fn backward(&mut self, loss: VarId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: VarId, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                let sum = g.add(&delta).expect("gradient shape");
                *g = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
                mode,
            } => {
                let geom = self
                    .conv_geom(*input, *kernels, *stride, *padding, *mode)
                    .expect("recorded conv geometry");
                let (gi, gk) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    &geom,
                );
                let ishape = self.value(*input).shape().to_vec();
                let kshape = self.value(*kernels).shape().to_vec();
                self.accum(grads, *input, Tensor::new(ishape, gi).unwrap());
                self.accum(grads, *kernels, Tensor::new(kshape, gk).unwrap());
            }
            Op::ConvTranspose2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let ishape = self.value(*input).shape().to_vec();
                let kshape = self.value(*kernels).shape().to_vec();
                let oshape = self.nodes[i].value.shape();
                let (gi, gk) = kernels::conv_transpose2d_backward(
                    self.value(*input).data(),
                    self.value(*kernels).data(),
                    g.data(),
                    kshape[0],
                    kshape[1],
                    ishape[1],
                    ishape[2],
                    kshape[2],
                    kshape[3],
                    *stride,
                    *padding,
                    oshape[1],
                    oshape[2],
                );
                self.accum(grads, *input, Tensor::new(ishape, gi).unwrap());
                self.accum(grads, *kernels, Tensor::new(kshape, gk).unwrap());
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                means,
                invstds,
            } => {
                let shape = self.value(*input).shape().to_vec();
                let hw = shape[1] * shape[2];
                let (gx, gg, gb) = kernels::instance_norm_backward(
                    self.value(*input).data(),
                    shape[0],
                    hw,
                    self.value(*gamma).data(),
                    means,
                    invstds,
                    g.data(),
                );
                self.accum(grads, *input, Tensor::new(shape.clone(), gx).unwrap());
                self.accum(grads, *gamma, Tensor::new(vec![shape[0]], gg).unwrap());
                self.accum(grads, *beta, Tensor::new(vec![shape[0]], gb).unwrap());
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(*input);
                let gi = Tensor::from_fn(x.shape(), |j| {
                    let d = if x.data()[j] > 0.0 { 1.0 } else { *slope };
                    d * g.data()[j]
                });
                self.accum(grads, *input, gi);
            }
            Op::Tanh { input } => {
                let y = &self.nodes[i].value;
                let gi = Tensor::from_fn(y.shape(), |j| {
                    let t = y.data()[j];
                    (1.0 - t * t) * g.data()[j]
                });
                self.accum(grads, *input, gi);
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Scale { input, c } => {
                self.accum(grads, *input, g.scale(*c));
            }
            Op::BiasAdd { input, bias } => {
                self.accum(grads, *input, g.clone());
                let shape = self.value(*input).shape();
                let hw = shape[1] * shape[2];
                let gb = Tensor::from_fn(&[shape[0]], |c| {
                    g.data()[c * hw..(c + 1) * hw].iter().sum::<f64>()
                });
                self.accum(grads, *bias, gb);
            }
            Op::SliceChannels {
                input,
                start,
                count,
            } => {
                let shape = self.value(*input).shape().to_vec();
                let hw = shape[1] * shape[2];
                let mut gi = vec![0.0; shape.iter().product()];
                gi[start * hw..(start + count) * hw].copy_from_slice(g.data());
                self.accum(grads, *input, Tensor::new(shape, gi).unwrap());
            }
            Op::AvgPool2 { input } => {
                let shape = self.value(*input).shape().to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut gi = vec![0.0; c * h * w];
                for ci in 0..c {
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let gv = 0.25 * g.data()[(ci * ho + oh) * wo + ow];
                            let base = (ci * h + 2 * oh) * w + 2 * ow;
                            gi[base] += gv;
                            gi[base + 1] += gv;
                            gi[base + w] += gv;
                            gi[base + w + 1] += gv;
                        }
                    }
                }
                self.accum(grads, *input, Tensor::new(shape, gi).unwrap());
            }
            Op::L1Loss { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let n = ta.numel() as f64;
                let s = g.item() / n;
                let ga = Tensor::from_fn(ta.shape(), |j| {
                    let d = ta.data()[j] - tb.data()[j];
                    // subgradient at 0 is 0 by convention
                    if d > 0.0 {
                        s
                    } else if d < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                let gb = ga.scale(-1.0);
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::MseLoss { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let n = ta.numel() as f64;
                let s = 2.0 * g.item() / n;
                let ga = Tensor::from_fn(ta.shape(), |j| s * (ta.data()[j] - tb.data()[j]));
                let gb = ga.scale(-1.0);
                self.accum(grads, *a, ga);
                self.accum(grads, *b, gb);
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                self.accum(grads, *input, Tensor::full(x.shape(), g.item()));
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits);
                let n = z.numel() as f64;
                let s = g.item() / n;
                let gi = Tensor::from_fn(z.shape(), |j| {
                    let sig = 1.0 / (1.0 + (-z.data()[j]).exp());
                    s * (sig - target)
                });
                self.accum(grads, *logits, gi);
            }
        }
    }
}
