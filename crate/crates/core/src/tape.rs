//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Operations are recorded in forward order (every input precedes its use),
//! and `grad` replays the tape backward once, accumulating vector-Jacobian
//! products into each node that requires gradients. All reductions run in a
//! fixed order so repeated runs are bitwise identical.

use crate::error::{Error, Result};
use crate::quant::{self, GroupMap};
use crate::tensor::Tensor;

use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Scale {
        x: usize,
        c: f32,
    },
    /// Broadcast `b` over the leading dimensions of `x` (b.numel divides x.numel).
    AddBroadcastTrailing {
        x: usize,
        b: usize,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        live_out: Vec<bool>,
        live_in: Vec<bool>,
    },
    MaxPool2x2 {
        x: usize,
        argmax: Vec<u32>,
    },
    BatchNormTrain {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    /// Eval-mode batchnorm: per-channel affine using frozen running statistics.
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f32>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    QuantizeSte {
        x: usize,
        b: usize,
        e: usize,
        groups: GroupMap,
    },
    Reshape {
        x: usize,
    },
    BmmNT {
        a: usize,
        b: usize,
    },
    BmmNN {
        a: usize,
        b: usize,
    },
    CausalSoftmax {
        x: usize,
        scale: f32,
    },
    ConcatLast {
        parts: Vec<usize>,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    L1 {
        x: usize,
    },
    /// Scalar sum_i coeffs[i] * max(b[i], 0); the differentiable size penalty.
    SizePenalty {
        b: usize,
        coeffs: Vec<f32>,
    },
    /// Scalar sum_i coeffs[i] * inputs[i] over scalar inputs.
    LinComb {
        inputs: Vec<usize>,
        coeffs: Vec<f32>,
    },
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    tape: u64,
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        if id.tape != self.tape {
            return None;
        }
        self.by_node.get(id.idx).and_then(|g| g.as_deref())
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.iter().all(|g| g.is_none())
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.idx].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.idx].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        self.nodes[id.idx].data[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.idx].requires_grad
    }

    fn node(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id || id.idx >= self.nodes.len() {
            return Err(Error::DetachedNode);
        }
        Ok(id.idx)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Ok(NodeId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records a tensor as a leaf, honoring its requires_grad flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.nodes.push(Node {
            data: t.data.clone(),
            shape: t.shape.clone(),
            requires_grad: t.requires_grad,
            op: Op::Leaf,
        });
        NodeId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, data: Vec<f32>, shape: Vec<usize>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: false,
            op: Op::Leaf,
        });
        NodeId {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    // ── Elementwise and linear algebra ──────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.nodes[ai].shape.clone(),
                right: self.nodes[bi].shape.clone(),
            });
        }
        let data: Vec<f32> = self.nodes[ai]
            .data
            .iter()
            .zip(&self.nodes[bi].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push("add", data, shape, rg, Op::Add(ai, bi))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: self.nodes[ai].shape.clone(),
                right: self.nodes[bi].shape.clone(),
            });
        }
        let data: Vec<f32> = self.nodes[ai]
            .data
            .iter()
            .zip(&self.nodes[bi].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push("mul", data, shape, rg, Op::Mul(ai, bi))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        let xi = self.node(x)?;
        let data: Vec<f32> = self.nodes[xi].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        self.push("scale", data, shape, rg, Op::Scale { x: xi, c })
    }

    /// x + b where b broadcasts over the leading dimensions of x.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xi, bi) = (self.node(x)?, self.node(b)?);
        let xn = self.nodes[xi].data.len();
        let bn = self.nodes[bi].data.len();
        if bn == 0 || xn % bn != 0 {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                left: self.nodes[xi].shape.clone(),
                right: self.nodes[bi].shape.clone(),
            });
        }
        let mut data = self.nodes[xi].data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += self.nodes[bi].data[i % bn];
        }
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad || self.nodes[bi].requires_grad;
        self.push(
            "add_broadcast",
            data,
            shape,
            rg,
            Op::AddBroadcastTrailing { x: xi, b: bi },
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        let (ash, bsh) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ash.clone(),
                right: bsh.clone(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n);
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push("matmul", data, vec![m, n], rg, Op::Matmul { a: ai, b: bi })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.node(x)?;
        let data: Vec<f32> = self.nodes[xi].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad;
        self.push("relu", data, shape, rg, Op::Relu { x: xi })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xi = self.node(x)?;
        if shape.iter().product::<usize>() != self.nodes[xi].data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: "reshape must preserve element count".into(),
            });
        }
        let data = self.nodes[xi].data.clone();
        let rg = self.nodes[xi].requires_grad;
        self.push("reshape", data, shape, rg, Op::Reshape { x: xi })
    }

    // ── Convolution stack ───────────────────────────────────────────────

    /// 2-D cross-correlation over NCHW input. Dead output/input channels
    /// (live flags false) are skipped entirely; empty masks mean all-live.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
        live_out: &[bool],
        live_in: &[bool],
    ) -> Result<NodeId> {
        let (xi, wi) = (self.node(x)?, self.node(w)?);
        let bias_i = match bias {
            Some(b) => Some(self.node(b)?),
            None => None,
        };
        let xsh = self.nodes[xi].shape.clone();
        let wsh = self.nodes[wi].shape.clone();
        if xsh.len() != 4 || wsh.len() != 4 || xsh[1] != wsh[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xsh,
                right: wsh,
            });
        }
        let (bsz, c, h, wid) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let (oc, _, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
        if h + 2 * pad < kh || wid + 2 * pad < kw {
            return Err(Error::Invalid {
                what: format!(
                    "conv2d: kernel {}x{} larger than padded input {}x{}",
                    kh,
                    kw,
                    h + 2 * pad,
                    wid + 2 * pad
                ),
            });
        }
        if (h + 2 * pad - kh) % stride != 0 || (wid + 2 * pad - kw) % stride != 0 {
            return Err(Error::Invalid {
                what: "conv2d: non-integral output extent".into(),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wid + 2 * pad - kw) / stride + 1;
        let live_out = normalize_mask(live_out, oc);
        let live_in = normalize_mask(live_in, c);

        let mut out = vec![0.0f32; bsz * oc * ho * wo];
        let xd = &self.nodes[xi].data;
        let wd = &self.nodes[wi].data;
        for b in 0..bsz {
            for o in 0..oc {
                if !live_out[o] {
                    continue;
                }
                let obase = ((b * oc) + o) * ho * wo;
                if let Some(bi2) = bias_i {
                    let bv = self.nodes[bi2].data[o];
                    for v in &mut out[obase..obase + ho * wo] {
                        *v = bv;
                    }
                }
                for ic in 0..c {
                    if !live_in[ic] {
                        continue;
                    }
                    let xbase = ((b * c) + ic) * h * wid;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[((o * c + ic) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            accumulate_conv_row(
                                &mut out[obase..obase + ho * wo],
                                &xd[xbase..xbase + h * wid],
                                wv,
                                h,
                                wid,
                                ho,
                                wo,
                                stride,
                                pad,
                                ky,
                                kx,
                            );
                        }
                    }
                }
            }
        }
        let rg = self.nodes[xi].requires_grad
            || self.nodes[wi].requires_grad
            || bias_i.map(|b| self.nodes[b].requires_grad).unwrap_or(false);
        self.push(
            "conv2d",
            out,
            vec![bsz, oc, ho, wo],
            rg,
            Op::Conv2d {
                x: xi,
                w: wi,
                bias: bias_i,
                stride,
                pad,
                live_out,
                live_in,
            },
        )
    }

    /// 2x2 non-overlapping max pooling; gradient routes to the first maximal
    /// element of each window.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.node(x)?;
        let sh = self.nodes[xi].shape.clone();
        if sh.len() != 4 || sh[2] % 2 != 0 || sh[3] % 2 != 0 {
            return Err(Error::Invalid {
                what: format!("maxpool2x2 requires even spatial extents, got {:?}", sh),
            });
        }
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = &self.nodes[xi].data;
        let mut out = vec![0.0f32; b * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for bc in 0..b * c {
            let xbase = bc * h * w;
            let obase = bc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut besti = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = xbase + (oy * 2 + dy) * w + ox * 2 + dx;
                            if xd[idx] > best {
                                best = xd[idx];
                                besti = idx;
                            }
                        }
                    }
                    out[obase + oy * wo + ox] = best;
                    argmax[obase + oy * wo + ox] = besti as u32;
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        self.push(
            "maxpool2x2",
            out,
            vec![b, c, ho, wo],
            rg,
            Op::MaxPool2x2 { x: xi, argmax },
        )
    }

    /// Train-mode batch normalization over (B, H, W) per channel, eps 1e-5.
    /// Returns the node plus the biased batch mean/variance per channel so the
    /// caller can fold them into running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let (xi, gi, bi) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let sh = self.nodes[xi].shape.clone();
        if sh.len() != 4 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "batchnorm expects NCHW".into(),
            });
        }
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        if b < 2 {
            return Err(Error::BatchTooSmall { got: b });
        }
        if self.nodes[gi].data.len() != c || self.nodes[bi].data.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: sh,
                right: self.nodes[gi].shape.clone(),
            });
        }
        let eps = 1e-5f32;
        let n = (b * h * w) as f32;
        let xd = &self.nodes[xi].data;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for bb in 0..b {
                let base = ((bb * c) + ch) * h * w;
                for v in &xd[base..base + h * w] {
                    s += *v as f64;
                }
            }
            mean[ch] = (s / n as f64) as f32;
            let mut sv = 0.0f64;
            for bb in 0..b {
                let base = ((bb * c) + ch) * h * w;
                for v in &xd[base..base + h * w] {
                    let d = *v as f64 - mean[ch] as f64;
                    sv += d * d;
                }
            }
            var[ch] = (sv / n as f64) as f32;
        }
        let rstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        let gd = &self.nodes[gi].data;
        let bd = &self.nodes[bi].data;
        for bb in 0..b {
            for ch in 0..c {
                let base = ((bb * c) + ch) * h * w;
                for i in base..base + h * w {
                    let xh = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let rg = self.nodes[xi].requires_grad
            || self.nodes[gi].requires_grad
            || self.nodes[bi].requires_grad;
        let id = self.push(
            "batchnorm",
            out,
            sh,
            rg,
            Op::BatchNormTrain {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
        )?;
        Ok((id, mean, var))
    }

    /// Eval-mode batch normalization using running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<NodeId> {
        let (xi, gi, bi) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let sh = self.nodes[xi].shape.clone();
        if sh.len() != 4 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "batchnorm expects NCHW".into(),
            });
        }
        let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let eps = 1e-5f32;
        let rstd: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = &self.nodes[xi].data;
        let gd = &self.nodes[gi].data;
        let bd = &self.nodes[bi].data;
        let mut out = vec![0.0f32; xd.len()];
        for bb in 0..b {
            for ch in 0..c {
                let base = ((bb * c) + ch) * h * w;
                for i in base..base + h * w {
                    out[i] = gd[ch] * (xd[i] - running_mean[ch]) * rstd[ch] + bd[ch];
                }
            }
        }
        let rg = self.nodes[xi].requires_grad
            || self.nodes[gi].requires_grad
            || self.nodes[bi].requires_grad;
        self.push(
            "batchnorm_eval",
            out,
            sh,
            rg,
            Op::BatchNormEval {
                x: xi,
                gamma: gi,
                beta: bi,
                mean: running_mean.to_vec(),
                rstd,
            },
        )
    }

    /// Layer normalization over the last dimension, eps 1e-5.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (xi, gi, bi) = (self.node(x)?, self.node(gamma)?, self.node(beta)?);
        let sh = self.nodes[xi].shape.clone();
        let d = *sh.last().ok_or(Error::InvalidShape {
            shape: sh.clone(),
            reason: "layernorm needs at least one dimension".into(),
        })?;
        if self.nodes[gi].data.len() != d || self.nodes[bi].data.len() != d {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                left: sh,
                right: self.nodes[gi].shape.clone(),
            });
        }
        let eps = 1e-5f32;
        let rows = self.nodes[xi].data.len() / d;
        let xd = &self.nodes[xi].data;
        let gd = &self.nodes[gi].data;
        let bd = &self.nodes[bi].data;
        let mut mean = vec![0.0f32; rows];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().sum::<f32>() / d as f32;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / d as f32;
            let rs = 1.0 / (v + eps).sqrt();
            mean[r] = m;
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = gd[j] * (row[j] - m) * rs + bd[j];
            }
        }
        let rg = self.nodes[xi].requires_grad
            || self.nodes[gi].requires_grad
            || self.nodes[bi].requires_grad;
        self.push(
            "layernorm",
            out,
            sh,
            rg,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                rstd,
            },
        )
    }

    /// Mean cross-entropy over rows of (N, C) logits; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let li = self.node(logits)?;
        let sh = self.nodes[li].shape.clone();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: format!("expected (N, C) logits with N == {}", targets.len()),
            });
        }
        let (n, c) = (sh[0], sh[1]);
        let ld = &self.nodes[li].data;
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            let t = targets[i];
            if t >= c {
                return Err(Error::Invalid {
                    what: format!("target {} out of range for {} classes", t, c),
                });
            }
            loss -= (probs[i * c + t].max(1e-30) as f64).ln();
        }
        let rg = self.nodes[li].requires_grad;
        self.push(
            "softmax_cross_entropy",
            vec![(loss / n as f64) as f32],
            vec![1],
            rg,
            Op::SoftmaxXent {
                logits: li,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Row gather: out[i, :] = table[ids[i], :].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ti = self.node(table)?;
        let sh = self.nodes[ti].shape.clone();
        if sh.len() != 2 {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "embedding table must be 2-D".into(),
            });
        }
        let (v, d) = (sh[0], sh[1]);
        let mut out = vec![0.0f32; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::Invalid {
                    what: format!("token id {} out of vocabulary {}", id, v),
                });
            }
            out[i * d..(i + 1) * d].copy_from_slice(&self.nodes[ti].data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[ti].requires_grad;
        self.push(
            "embedding",
            out,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
        )
    }

    /// Differentiable quantizer with the straight-through surrogate backward.
    pub fn quantize(
        &mut self,
        x: NodeId,
        b: NodeId,
        e: NodeId,
        groups: GroupMap,
    ) -> Result<NodeId> {
        let (xi, bi, ei) = (self.node(x)?, self.node(b)?, self.node(e)?);
        let n = self.nodes[xi].data.len();
        groups.validate(n, self.nodes[bi].data.len())?;
        if self.nodes[bi].data.len() != self.nodes[ei].data.len() {
            return Err(Error::ShapeMismatch {
                op: "quantize",
                left: self.nodes[bi].shape.clone(),
                right: self.nodes[ei].shape.clone(),
            });
        }
        let out = quant::quantize_values(
            &self.nodes[xi].data,
            &self.nodes[bi].data,
            &self.nodes[ei].data,
            &groups,
        )?;
        let shape = self.nodes[xi].shape.clone();
        let rg = self.nodes[xi].requires_grad
            || self.nodes[bi].requires_grad
            || self.nodes[ei].requires_grad;
        self.push(
            "quantize",
            out,
            shape,
            rg,
            Op::QuantizeSte {
                x: xi,
                b: bi,
                e: ei,
                groups,
            },
        )
    }

    // ── Batched attention primitives ────────────────────────────────────

    /// out[b,t,s] = sum_d a[b,t,d] * bb[b,s,d].
    pub fn bmm_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        let (ash, bsh) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[2] {
            return Err(Error::ShapeMismatch {
                op: "bmm_nt",
                left: ash.clone(),
                right: bsh.clone(),
            });
        }
        let (bb, t, d, s) = (ash[0], ash[1], ash[2], bsh[1]);
        let ad = &self.nodes[ai].data;
        let bd = &self.nodes[bi].data;
        let mut out = vec![0.0f32; bb * t * s];
        for b2 in 0..bb {
            for ti in 0..t {
                let arow = &ad[(b2 * t + ti) * d..(b2 * t + ti + 1) * d];
                for si in 0..s {
                    let brow = &bd[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                    let mut acc = 0.0f32;
                    for (av, bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    out[(b2 * t + ti) * s + si] = acc;
                }
            }
        }
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push(
            "bmm_nt",
            out,
            vec![bb, t, s],
            rg,
            Op::BmmNT { a: ai, b: bi },
        )
    }

    /// out[b,t,d] = sum_s a[b,t,s] * bb[b,s,d].
    pub fn bmm_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ai, bi) = (self.node(a)?, self.node(b)?);
        let (ash, bsh) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm_nn",
                left: ash.clone(),
                right: bsh.clone(),
            });
        }
        let (bb, t, s, d) = (ash[0], ash[1], ash[2], bsh[2]);
        let ad = &self.nodes[ai].data;
        let bd = &self.nodes[bi].data;
        let mut out = vec![0.0f32; bb * t * d];
        for b2 in 0..bb {
            for ti in 0..t {
                let orow_base = (b2 * t + ti) * d;
                for si in 0..s {
                    let av = ad[(b2 * t + ti) * s + si];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                    let orow = &mut out[orow_base..orow_base + d];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        self.push(
            "bmm_nn",
            out,
            vec![bb, t, d],
            rg,
            Op::BmmNN { a: ai, b: bi },
        )
    }

    /// Causal row softmax over (B, T, T) scores: position t attends to 0..=t.
    /// `scale` multiplies the scores before the softmax; masked entries are 0.
    pub fn causal_softmax(&mut self, x: NodeId, scale: f32) -> Result<NodeId> {
        let xi = self.node(x)?;
        let sh = self.nodes[xi].shape.clone();
        if sh.len() != 3 || sh[1] != sh[2] {
            return Err(Error::InvalidShape {
                shape: sh,
                reason: "causal softmax expects (B, T, T)".into(),
            });
        }
        let (b, t) = (sh[0], sh[1]);
        let xd = &self.nodes[xi].data;
        let mut out = vec![0.0f32; xd.len()];
        for b2 in 0..b {
            for ti in 0..t {
                let base = (b2 * t + ti) * t;
                let mut mx = f32::NEG_INFINITY;
                for j in 0..=ti {
                    mx = mx.max(scale * xd[base + j]);
                }
                let mut z = 0.0f32;
                for j in 0..=ti {
                    let e = (scale * xd[base + j] - mx).exp();
                    out[base + j] = e;
                    z += e;
                }
                for j in 0..=ti {
                    out[base + j] /= z;
                }
            }
        }
        let rg = self.nodes[xi].requires_grad;
        self.push(
            "causal_softmax",
            out,
            sh,
            rg,
            Op::CausalSoftmax { x: xi, scale },
        )
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                what: "concat_last needs at least one input".into(),
            });
        }
        let idxs: Result<Vec<usize>> = parts.iter().map(|p| self.node(*p)).collect();
        let idxs = idxs?;
        let lead = self.nodes[idxs[0]].shape[..self.nodes[idxs[0]].shape.len() - 1].to_vec();
        let mut total_last = 0usize;
        for &i in &idxs {
            let sh = &self.nodes[i].shape;
            if sh[..sh.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_last",
                    left: self.nodes[idxs[0]].shape.clone(),
                    right: sh.clone(),
                });
            }
            total_last += sh[sh.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0f32; rows * total_last];
        let mut off = 0usize;
        for &i in &idxs {
            let last = *self.nodes[i].shape.last().unwrap();
            for r in 0..rows {
                out[r * total_last + off..r * total_last + off + last]
                    .copy_from_slice(&self.nodes[i].data[r * last..(r + 1) * last]);
            }
            off += last;
        }
        let mut shape = lead;
        shape.push(total_last);
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push("concat_last", out, shape, rg, Op::ConcatLast { parts: idxs })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.node(x)?;
        let s: f64 = self.nodes[xi].data.iter().map(|v| *v as f64).sum();
        let rg = self.nodes[xi].requires_grad;
        self.push("sum", vec![s as f32], vec![1], rg, Op::Sum { x: xi })
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.node(x)?;
        let n = self.nodes[xi].data.len();
        let s: f64 = self.nodes[xi].data.iter().map(|v| *v as f64).sum();
        let rg = self.nodes[xi].requires_grad;
        self.push(
            "mean",
            vec![(s / n as f64) as f32],
            vec![1],
            rg,
            Op::Mean { x: xi },
        )
    }

    /// Scalar sum of absolute values.
    pub fn l1(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.node(x)?;
        let s: f64 = self.nodes[xi].data.iter().map(|v| v.abs() as f64).sum();
        let rg = self.nodes[xi].requires_grad;
        self.push("l1", vec![s as f32], vec![1], rg, Op::L1 { x: xi })
    }

    /// Scalar sum_i coeffs[i] * max(b[i], 0).
    pub fn size_penalty(&mut self, b: NodeId, coeffs: &[f32]) -> Result<NodeId> {
        let bi = self.node(b)?;
        if coeffs.len() != self.nodes[bi].data.len() {
            return Err(Error::ShapeMismatch {
                op: "size_penalty",
                left: self.nodes[bi].shape.clone(),
                right: vec![coeffs.len()],
            });
        }
        let s: f64 = self.nodes[bi]
            .data
            .iter()
            .zip(coeffs)
            .map(|(b, c)| (b.max(0.0) * c) as f64)
            .sum();
        let rg = self.nodes[bi].requires_grad;
        self.push(
            "size_penalty",
            vec![s as f32],
            vec![1],
            rg,
            Op::SizePenalty {
                b: bi,
                coeffs: coeffs.to_vec(),
            },
        )
    }

    /// Scalar sum_i coeffs[i] * inputs[i] over scalar-valued inputs.
    pub fn lin_comb(&mut self, inputs: &[NodeId], coeffs: &[f32]) -> Result<NodeId> {
        if inputs.len() != coeffs.len() {
            return Err(Error::Invalid {
                what: "lin_comb: inputs and coeffs must have equal length".into(),
            });
        }
        let idxs: Result<Vec<usize>> = inputs.iter().map(|p| self.node(*p)).collect();
        let idxs = idxs?;
        let mut s = 0.0f64;
        for (&i, &c) in idxs.iter().zip(coeffs) {
            if self.nodes[i].data.len() != 1 {
                return Err(Error::NonScalarLoss {
                    shape: self.nodes[i].shape.clone(),
                });
            }
            s += self.nodes[i].data[0] as f64 * c as f64;
        }
        let rg = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(
            "lin_comb",
            vec![s as f32],
            vec![1],
            rg,
            Op::LinComb {
                inputs: idxs,
                coeffs: coeffs.to_vec(),
            },
        )
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode gradient of a scalar loss with respect to every node that
    /// requires gradients. The seed gradient of the loss is 1.
    pub fn grad(&self, loss: NodeId) -> Result<Gradients> {
        let li = self.node(loss)?;
        if self.nodes[li].data.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.nodes[li].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.nodes[li].requires_grad {
            return Ok(Gradients {
                tape: self.id,
                by_node: grads,
            });
        }
        grads[li] = Some(vec![1.0]);
        for idx in (0..=li).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            by_node: grads,
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<f32>>], idx: usize, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            *slot = Some(vec![0.0f32; self.nodes[idx].data.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        dx[i] += c * g[i];
                    }
                });
            }
            Op::AddBroadcastTrailing { x, b } => {
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                let bn = self.nodes[*b].data.len();
                self.accum(grads, *b, |db| {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % bn] += gv;
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // da[i,p] = dot(g[i,:], b[p,:])
                self.accum(grads, *a, |da| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, dap) in darow.iter_mut().enumerate() {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut acc = 0.0f32;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += gv * bv;
                            }
                            *dap += acc;
                        }
                    }
                });
                // db[p,:] += a[i,p] * g[i,:]
                self.accum(grads, *b, |db| {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let xd = &self.nodes[*x].data;
                self.accum(grads, *x, |dx| {
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                live_out,
                live_in,
            } => {
                self.conv2d_backward(idx, g, grads, *x, *w, *bias, *stride, *pad, live_out, live_in);
            }
            Op::MaxPool2x2 { x, argmax } => {
                self.accum(grads, *x, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[o];
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let sh = &self.nodes[idx].shape;
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let n = (b * h * w) as f32;
                let gd = &self.nodes[*gamma].data;
                self.accum(grads, *beta, |dbeta| {
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                });
                self.accum(grads, *gamma, |dgamma| {
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                dgamma[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                });
                if self.nodes[*x].requires_grad {
                    // Per-channel sums of dxhat and dxhat*xhat.
                    let mut s1 = vec![0.0f64; c];
                    let mut s2 = vec![0.0f64; c];
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                let dxh = (g[i] * gd[ch]) as f64;
                                s1[ch] += dxh;
                                s2[ch] += dxh * xhat[i] as f64;
                            }
                        }
                    }
                    self.accum(grads, *x, |dx| {
                        for bb in 0..b {
                            for ch in 0..c {
                                let base = ((bb * c) + ch) * h * w;
                                let (m1, m2) = ((s1[ch] / n as f64) as f32, (s2[ch] / n as f64) as f32);
                                for i in base..base + h * w {
                                    let dxh = g[i] * gd[ch];
                                    dx[i] += rstd[ch] * (dxh - m1 - xhat[i] * m2);
                                }
                            }
                        }
                    });
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let sh = &self.nodes[idx].shape;
                let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let gd = &self.nodes[*gamma].data;
                let xd = &self.nodes[*x].data;
                self.accum(grads, *beta, |dbeta| {
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                dbeta[ch] += g[i];
                            }
                        }
                    }
                });
                self.accum(grads, *gamma, |dgamma| {
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                dgamma[ch] += g[i] * (xd[i] - mean[ch]) * rstd[ch];
                            }
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for bb in 0..b {
                        for ch in 0..c {
                            let base = ((bb * c) + ch) * h * w;
                            for i in base..base + h * w {
                                dx[i] += g[i] * gd[ch] * rstd[ch];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *self.nodes[idx].shape.last().unwrap();
                let rows = g.len() / d;
                let gd = &self.nodes[*gamma].data;
                let xd = &self.nodes[*x].data;
                self.accum(grads, *beta, |dbeta| {
                    for r in 0..rows {
                        for j in 0..d {
                            dbeta[j] += g[r * d + j];
                        }
                    }
                });
                self.accum(grads, *gamma, |dgamma| {
                    for r in 0..rows {
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mean[r]) * rstd[r];
                            dgamma[j] += g[r * d + j] * xh;
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let mut s1 = 0.0f32;
                        let mut s2 = 0.0f32;
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mean[r]) * rstd[r];
                            let dxh = g[r * d + j] * gd[j];
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        let inv_d = 1.0 / d as f32;
                        for j in 0..d {
                            let xh = (xd[r * d + j] - mean[r]) * rstd[r];
                            let dxh = g[r * d + j] * gd[j];
                            dx[r * d + j] += rstd[r] * (dxh - inv_d * s1 - xh * inv_d * s2);
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[*logits].shape[1];
                let n = targets.len();
                let scale = g[0] / n as f32;
                self.accum(grads, *logits, |dl| {
                    for i in 0..n {
                        for j in 0..c {
                            let p = probs[i * c + j];
                            let y = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * c + j] += scale * (p - y);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[*table].shape[1];
                self.accum(grads, *table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::QuantizeSte { x, b, e, groups } => {
                let xd = &self.nodes[*x].data;
                let bd = &self.nodes[*b].data;
                let ed = &self.nodes[*e].data;
                let want_x = self.nodes[*x].requires_grad;
                let want_b = self.nodes[*b].requires_grad;
                let want_e = self.nodes[*e].requires_grad;
                let (dx, db, de) =
                    quant::quantize_backward_raw(g, xd, bd, ed, groups, want_x, want_b, want_e);
                if let Some(dxv) = dx {
                    self.accum(grads, *x, |dst| {
                        for i in 0..dst.len() {
                            dst[i] += dxv[i];
                        }
                    });
                }
                if let Some(dbv) = db {
                    self.accum(grads, *b, |dst| {
                        for i in 0..dst.len() {
                            dst[i] += dbv[i];
                        }
                    });
                }
                if let Some(dev) = de {
                    self.accum(grads, *e, |dst| {
                        for i in 0..dst.len() {
                            dst[i] += dev[i];
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::BmmNT { a, b } => {
                let ash = &self.nodes[*a].shape;
                let bsh = &self.nodes[*b].shape;
                let (bb, t, d, s) = (ash[0], ash[1], ash[2], bsh[1]);
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                self.accum(grads, *a, |da| {
                    for b2 in 0..bb {
                        for ti in 0..t {
                            let gbase = (b2 * t + ti) * s;
                            let dbase = (b2 * t + ti) * d;
                            for si in 0..s {
                                let gv = g[gbase + si];
                                if gv == 0.0 {
                                    continue;
                                }
                                let brow = &bd[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                                let darow = &mut da[dbase..dbase + d];
                                for (dv, bv) in darow.iter_mut().zip(brow) {
                                    *dv += gv * bv;
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for b2 in 0..bb {
                        for ti in 0..t {
                            let gbase = (b2 * t + ti) * s;
                            let arow = &ad[(b2 * t + ti) * d..(b2 * t + ti + 1) * d];
                            for si in 0..s {
                                let gv = g[gbase + si];
                                if gv == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                                for (dv, av) in dbrow.iter_mut().zip(arow) {
                                    *dv += gv * av;
                                }
                            }
                        }
                    }
                });
            }
            Op::BmmNN { a, b } => {
                let ash = &self.nodes[*a].shape;
                let bsh = &self.nodes[*b].shape;
                let (bb, t, s, d) = (ash[0], ash[1], ash[2], bsh[2]);
                let ad = &self.nodes[*a].data;
                let bd = &self.nodes[*b].data;
                self.accum(grads, *a, |da| {
                    for b2 in 0..bb {
                        for ti in 0..t {
                            let gbase = (b2 * t + ti) * d;
                            let grow = &g[gbase..gbase + d];
                            for si in 0..s {
                                let brow = &bd[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                                let mut acc = 0.0f32;
                                for (gv, bv) in grow.iter().zip(brow) {
                                    acc += gv * bv;
                                }
                                da[(b2 * t + ti) * s + si] += acc;
                            }
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for b2 in 0..bb {
                        for ti in 0..t {
                            let gbase = (b2 * t + ti) * d;
                            for si in 0..s {
                                let av = ad[(b2 * t + ti) * s + si];
                                if av == 0.0 {
                                    continue;
                                }
                                let dbrow = &mut db[(b2 * s + si) * d..(b2 * s + si + 1) * d];
                                let grow = &g[gbase..gbase + d];
                                for (dv, gv) in dbrow.iter_mut().zip(grow) {
                                    *dv += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::CausalSoftmax { x, scale } => {
                let sh = &self.nodes[idx].shape;
                let (b, t) = (sh[0], sh[1]);
                let p = &self.nodes[idx].data;
                let scale = *scale;
                self.accum(grads, *x, |dx| {
                    for b2 in 0..b {
                        for ti in 0..t {
                            let base = (b2 * t + ti) * t;
                            let mut dot = 0.0f32;
                            for j in 0..=ti {
                                dot += g[base + j] * p[base + j];
                            }
                            for j in 0..=ti {
                                dx[base + j] += scale * p[base + j] * (g[base + j] - dot);
                            }
                        }
                    }
                });
            }
            Op::ConcatLast { parts } => {
                let total_last = *self.nodes[idx].shape.last().unwrap();
                let rows = g.len() / total_last;
                let mut off = 0usize;
                for &pi in parts {
                    let last = *self.nodes[pi].shape.last().unwrap();
                    self.accum(grads, pi, |dp| {
                        for r in 0..rows {
                            for j in 0..last {
                                dp[r * last + j] += g[r * total_last + off + j];
                            }
                        }
                    });
                    off += last;
                }
            }
            Op::Sum { x } => {
                self.accum(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean { x } => {
                let n = self.nodes[*x].data.len() as f32;
                self.accum(grads, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::L1 { x } => {
                let xd = &self.nodes[*x].data;
                self.accum(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[0] * sign(xd[i]);
                    }
                });
            }
            Op::SizePenalty { b, coeffs } => {
                let bd = &self.nodes[*b].data;
                self.accum(grads, *b, |db| {
                    for i in 0..db.len() {
                        if bd[i] > 0.0 {
                            db[i] += g[0] * coeffs[i];
                        }
                    }
                });
            }
            Op::LinComb { inputs, coeffs } => {
                for (&i, &c) in inputs.iter().zip(coeffs) {
                    self.accum(grads, i, |di| {
                        di[0] += g[0] * c;
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        out_idx: usize,
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        live_out: &[bool],
        live_in: &[bool],
    ) {
        let osh = &self.nodes[out_idx].shape;
        let (bsz, oc, ho, wo) = (osh[0], osh[1], osh[2], osh[3]);
        let xsh = &self.nodes[x].shape;
        let (c, h, wid) = (xsh[1], xsh[2], xsh[3]);
        let wsh = &self.nodes[w].shape;
        let (kh, kw) = (wsh[2], wsh[3]);
        let xd = &self.nodes[x].data;
        let wd = &self.nodes[w].data;

        if let Some(bi) = bias {
            self.accum(grads, bi, |dbias| {
                for b in 0..bsz {
                    for o in 0..oc {
                        if !live_out[o] {
                            continue;
                        }
                        let obase = ((b * oc) + o) * ho * wo;
                        let mut s = 0.0f32;
                        for v in &g[obase..obase + ho * wo] {
                            s += v;
                        }
                        dbias[o] += s;
                    }
                }
            });
        }

        self.accum(grads, w, |dw| {
            for b in 0..bsz {
                for o in 0..oc {
                    if !live_out[o] {
                        continue;
                    }
                    let obase = ((b * oc) + o) * ho * wo;
                    for ic in 0..c {
                        if !live_in[ic] {
                            continue;
                        }
                        let xbase = ((b * c) + ic) * h * wid;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0f32;
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wid;
                                    let grow = obase + oy * wo;
                                    if stride == 1 {
                                        let ox_lo = pad.saturating_sub(kx);
                                        let ox_hi = (wid + pad - kx).min(wo);
                                        let n = ox_hi.saturating_sub(ox_lo);
                                        let gs = &g[grow + ox_lo..grow + ox_lo + n];
                                        let xs = &xd[xrow + ox_lo + kx - pad..xrow + ox_lo + kx - pad + n];
                                        for (gv, xv) in gs.iter().zip(xs) {
                                            acc += gv * xv;
                                        }
                                    } else {
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix as usize >= wid {
                                                continue;
                                            }
                                            acc += g[grow + ox] * xd[xrow + ix as usize];
                                        }
                                    }
                                }
                                dw[((o * c + ic) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            }
        });

        self.accum(grads, x, |dx| {
            for b in 0..bsz {
                for o in 0..oc {
                    if !live_out[o] {
                        continue;
                    }
                    let obase = ((b * oc) + o) * ho * wo;
                    for ic in 0..c {
                        if !live_in[ic] {
                            continue;
                        }
                        let xbase = ((b * c) + ic) * h * wid;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wd[((o * c + ic) * kh + ky) * kw + kx];
                                if wv == 0.0 {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy as usize >= h {
                                        continue;
                                    }
                                    let xrow = xbase + iy as usize * wid;
                                    let grow = obase + oy * wo;
                                    if stride == 1 {
                                        let ox_lo = pad.saturating_sub(kx);
                                        let ox_hi = (wid + pad - kx).min(wo);
                                        let n = ox_hi.saturating_sub(ox_lo);
                                        let gs = &g[grow + ox_lo..grow + ox_lo + n];
                                        let xs = &mut dx[xrow + ox_lo + kx - pad..xrow + ox_lo + kx - pad + n];
                                        for (dv, gv) in xs.iter_mut().zip(gs) {
                                            *dv += wv * gv;
                                        }
                                    } else {
                                        for ox in 0..wo {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix as usize >= wid {
                                                continue;
                                            }
                                            dx[xrow + ix as usize] += wv * g[grow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn normalize_mask(mask: &[bool], n: usize) -> Vec<bool> {
    if mask.is_empty() {
        vec![true; n]
    } else {
        debug_assert_eq!(mask.len(), n);
        mask.to_vec()
    }
}

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

/// Inner conv loop: out[oy, :] += wv * x[iy, ix..] for the valid output range.
#[allow(clippy::too_many_arguments)]
fn accumulate_conv_row(
    out: &mut [f32],
    x: &[f32],
    wv: f32,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - pad as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        let xrow = iy as usize * w;
        let orow = oy * wo;
        if stride == 1 {
            // Contiguous saxpy over the valid ox range.
            let ox_lo = if pad > kx { pad - kx } else { 0 };
            let ox_hi = (w + pad - kx).min(wo);
            let xoff = xrow + ox_lo + kx - pad;
            let n = ox_hi.saturating_sub(ox_lo);
            let xs = &x[xoff..xoff + n];
            let os = &mut out[orow + ox_lo..orow + ox_lo + n];
            for (o, xv) in os.iter_mut().zip(xs) {
                *o += wv * xv;
            }
        } else {
            for ox in 0..wo {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix as usize >= w {
                    continue;
                }
                out[orow + ox] += wv * x[xrow + ix as usize];
            }
        }
    }
}
