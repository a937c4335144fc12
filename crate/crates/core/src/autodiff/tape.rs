use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::kernels::{self, ConvGeom, TConvGeom};
use crate::error::{GlrError, Result};
use crate::params::{Gradients, ModelParams};
use crate::patch::PatchPlan;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding so the output extent is `ceil(input / stride)`; odd kernels only.
    Same,
    Valid,
}

/// Backward rule of an operation whose forward is computed outside the tape.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients with respect to each input, in the order they were recorded.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: TConvGeom,
    },
    Relu(Var),
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    ExtractPatches {
        input: Var,
        plan: Arc<PatchPlan>,
    },
    Mse {
        input: Var,
        target: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation and replays it in reverse.
///
/// Nodes are stored in creation order, which is a topological order, so the
/// reverse pass simply walks the node list backwards.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    backward_done: bool,
}

fn mismatch(what: &str, detail: String) -> GlrError {
    GlrError::Config(format!("{what}: {detail}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last reverse pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records parameter `name` once per tape; later calls return the same
    /// handle, so every use accumulates into a single gradient.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| GlrError::Config(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let (o, kc, kh, kw) = self.value(kernel).nchw()?;
        if kc != c {
            return Err(mismatch(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if kh != kw {
            return Err(mismatch(
                "conv2d",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).numel() != o {
            return Err(mismatch(
                "conv2d",
                format!(
                    "bias has {} entries for {o} output channels",
                    self.value(bias).numel()
                ),
            ));
        }
        if stride != 1 && stride != 2 {
            return Err(mismatch("conv2d", format!("stride {stride} unsupported")));
        }
        let k = kh;
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Same => {
                if k % 2 == 0 {
                    return Err(mismatch(
                        "conv2d",
                        format!("same padding needs an odd kernel, got {k}"),
                    ));
                }
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(h);
                let pw = ((ow - 1) * stride + k).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < k || w < k {
                    return Err(mismatch(
                        "conv2d",
                        format!("input {h}x{w} smaller than kernel {k}"),
                    ));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: o,
            in_h: h,
            in_w: w,
            out_h,
            out_w,
            k,
            stride,
            pad_top,
            pad_left,
        };
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new([n, o, out_h, out_w], data)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Stride-2 transposed convolution doubling both spatial extents.
    /// Kernel layout is (in, out, k, k) with even `k`.
    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let (kc, o, kh, kw) = self.value(kernel).nchw()?;
        if kc != c {
            return Err(mismatch(
                "conv_transpose2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if kh != kw || kh % 2 != 0 || kh == 0 {
            return Err(mismatch(
                "conv_transpose2d",
                format!("kernel must be square with even extent, got {kh}x{kw}"),
            ));
        }
        if self.value(bias).numel() != o {
            return Err(mismatch(
                "conv_transpose2d",
                format!(
                    "bias has {} entries for {o} output channels",
                    self.value(bias).numel()
                ),
            ));
        }
        if h == 0 || w == 0 {
            return Err(mismatch("conv_transpose2d", "empty input".into()));
        }
        let geom = TConvGeom {
            batch: n,
            in_ch: c,
            out_ch: o,
            in_h: h,
            in_w: w,
            out_h: 2 * h,
            out_w: 2 * w,
            k: kh,
            stride: 2,
            pad: (kh - 2) / 2,
        };
        let data = kernels::tconv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            &geom,
        );
        let value = Tensor::new([n, o, 2 * h, 2 * w], data)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(input))
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let (data, argmax) = kernels::max_pool_2x2(self.value(input).data(), n * c, h, w);
        let value = Tensor::new([n, c, h / 2, w / 2], data)?;
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }))
    }

    /// Affine map of each row of a (batch, features) input; weight is (out, features).
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let [batch, f] = x.shape()[..] else {
            return Err(mismatch(
                "linear",
                format!("input must be (batch, features), got {:?}", x.shape()),
            ));
        };
        let wt = self.value(weight);
        let [o, wf] = wt.shape()[..] else {
            return Err(mismatch(
                "linear",
                format!("weight must be a matrix, got {:?}", wt.shape()),
            ));
        };
        if wf != f {
            return Err(mismatch(
                "linear",
                format!("weight has {wf} columns, input has {f} features"),
            ));
        }
        let b = self.value(bias);
        if b.numel() != o {
            return Err(mismatch(
                "linear",
                format!("bias has {} entries for {o} outputs", b.numel()),
            ));
        }
        let mut data = Vec::with_capacity(batch * o);
        for row in x.data().chunks_exact(f) {
            for (wrow, bv) in wt.data().chunks_exact(f).zip(b.data()) {
                data.push(bv + wrow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let value = Tensor::new([batch, o], data)?;
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(
                what,
                format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(input))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch(
                "concat_channels",
                format!(
                    "shapes {:?} and {:?} differ outside the channel axis",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new([n, ca + cb, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(a, b)))
    }

    /// (N, C, H, W) -> (N * K, C, s, s), patches ordered image-major then by
    /// plan anchor.
    pub fn extract_patches(&mut self, input: Var, plan: Arc<PatchPlan>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        if (h, w) != (plan.height(), plan.width()) {
            return Err(mismatch(
                "extract_patches",
                format!(
                    "input is {h}x{w}, plan covers {}x{}",
                    plan.height(),
                    plan.width()
                ),
            ));
        }
        let (k, m) = (plan.num_patches(), plan.patch_len());
        let mut data = vec![0.0; n * k * c * m];
        let x = self.value(input).data();
        for b in 0..n {
            for p in 0..k {
                for ch in 0..c {
                    let plane = &x[(b * c + ch) * h * w..][..h * w];
                    let dst = &mut data[((b * k + p) * c + ch) * m..][..m];
                    plan.extract_into(plane, p, dst);
                }
            }
        }
        let side = plan.side();
        let value = Tensor::new([n * k, c, side, side], data)?;
        Ok(self.push(value, Op::ExtractPatches { input, plan }))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, input: Var, target: &Tensor) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != target.shape() {
            return Err(mismatch(
                "mse",
                format!("prediction {:?} vs target {:?}", x.shape(), target.shape()),
            ));
        }
        let n = x.numel() as f64;
        let loss = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                input,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Records an externally computed `output = op(inputs)`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Propagates `d loss / d node` to every node recorded before `loss`.
    pub fn reverse_pass(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(GlrError::Usage(
                "reverse pass already ran on this tape; record a new forward pass first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(GlrError::Usage(format!(
                "reverse pass needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.node_backward(idx, &g)?;
            for (var, contrib) in contributions {
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[idx].value.set_grad(g)?;
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk, gb) = kernels::conv2d_backward(val(*input), val(*kernel), g, geom);
                vec![(*input, gx), (*kernel, gk), (*bias, gb)]
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (gx, gk, gb) = kernels::tconv2d_backward(val(*input), val(*kernel), g, geom);
                vec![(*input, gx), (*kernel, gk), (*bias, gb)]
            }
            Op::Relu(input) => {
                let gx = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*input, gx)]
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut gx = vec![0.0; val(*input).len()];
                for (&a, &gv) in argmax.iter().zip(g) {
                    gx[a] += gv;
                }
                vec![(*input, gx)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let w = val(*weight);
                let o = self.nodes[bias.0].value.numel();
                let f = w.len() / o;
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                let mut gb = vec![0.0; o];
                for ((xrow, gxrow), grow) in x
                    .chunks_exact(f)
                    .zip(gx.chunks_exact_mut(f))
                    .zip(g.chunks_exact(o))
                {
                    for (j, &gv) in grow.iter().enumerate() {
                        gb[j] += gv;
                        let wrow = &w[j * f..(j + 1) * f];
                        let gwrow = &mut gw[j * f..(j + 1) * f];
                        for i in 0..f {
                            gxrow[i] += gv * wrow[i];
                            gwrow[i] += gv * xrow[i];
                        }
                    }
                }
                vec![(*input, gx), (*weight, gw), (*bias, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let ga = val(*b).iter().zip(g).map(|(y, g)| y * g).collect();
                let gb = val(*a).iter().zip(g).map(|(x, g)| x * g).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(input, factor) => vec![(*input, g.iter().map(|v| v * factor).collect())],
            Op::Sum(input) => vec![(*input, vec![g[0]; val(*input).len()])],
            Op::Reshape(input) => vec![(*input, g.to_vec())],
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.nodes[a.0].value.nchw()?;
                let cb = self.nodes[b.0].value.nchw()?.1;
                let plane = h * w;
                let mut ga = Vec::with_capacity(n * ca * plane);
                let mut gb = Vec::with_capacity(n * cb * plane);
                for chunk in g.chunks_exact((ca + cb) * plane) {
                    ga.extend_from_slice(&chunk[..ca * plane]);
                    gb.extend_from_slice(&chunk[ca * plane..]);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::ExtractPatches { input, plan } => {
                let (n, c, h, w) = self.nodes[input.0].value.nchw()?;
                let (k, m) = (plan.num_patches(), plan.patch_len());
                let mut gx = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for p in 0..k {
                        for ch in 0..c {
                            let src = &g[((b * k + p) * c + ch) * m..][..m];
                            plan.scatter_add(src, p, 1.0, &mut gx[(b * c + ch) * h * w..][..h * w]);
                        }
                    }
                }
                vec![(*input, gx)]
            }
            Op::Mse { input, target } => {
                let x = val(*input);
                let scale = 2.0 * g[0] / x.len() as f64;
                let gx = x.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                vec![(*input, gx)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let grads = op.backward(&ins, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(GlrError::Config(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(grads).collect()
            }
        })
    }

    /// Gradients of every parameter registered through [`Tape::param`];
    /// parameters the loss does not depend on get zeros.
    pub fn param_grads(&self) -> Result<Gradients> {
        if !self.backward_done {
            return Err(GlrError::Usage(
                "no reverse pass has run on this tape".into(),
            ));
        }
        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            let g = match self.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.value(v).numel()],
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Handles of registered parameters by name.
    pub fn param_vars(&self) -> HashMap<String, Var> {
        self.params.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }
}
