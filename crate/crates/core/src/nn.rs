//! Layer primitives for the two exemplar architectures: convolution blocks
//! with batch normalization, and pre-norm attention blocks with ReLU
//! feed-forward sublayers.

use crate::error::{Error, Result};
use crate::quant::{GroupMap, QuantParams};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    /// (out_ch, in_ch, kh, kw)
    pub w: Tensor,
    /// (out_ch)
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(out_ch: usize, in_ch: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if out_ch == 0 || k == 0 {
            return Err(Error::Invalid {
                what: "conv layer needs out_ch >= 1 and kernel >= 1".into(),
            });
        }
        let fan_in = in_ch * k * k;
        Ok(Conv2dLayer {
            w: Tensor::random_init(vec![out_ch, in_ch, k, k], fan_in, rng)?,
            bias: Tensor::zeros(vec![out_ch]).param(),
            stride: 1,
            padding: k / 2,
        })
    }

    pub fn out_ch(&self) -> usize {
        self.w.shape[0]
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::new(vec![channels], vec![1.0; channels])
                .unwrap()
                .param(),
            beta: Tensor::zeros(vec![channels]).param(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn update_running(&mut self, mean: &[f32], var: &[f32], n: usize) {
        let unbias = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] =
                (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * var[c] * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// (in, out)
    pub w: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inp: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Linear {
            w: Tensor::random_init(vec![inp, out], inp, rng)?,
            bias: Tensor::zeros(vec![out]).param(),
        })
    }

    /// x2d (N, in) -> (N, out)
    pub fn forward(&self, tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tape.matmul(x, w)?;
        tape.add_broadcast(y, b)
    }
}

/// Pre-norm transformer block: per-head q/k/v projections, an output
/// projection, a ReLU feed-forward sublayer, and two layer norms. Pruned
/// heads contribute exactly zero to the block output.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    /// (n_heads * d_head, d_model)
    pub wo: Tensor,
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1: Linear,
    pub ff2: Linear,
    pub d_model: usize,
    pub d_head: usize,
}

impl AttentionBlock {
    pub fn new(d_model: usize, n_heads: usize, ff_width: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::Invalid {
                what: "attention block needs n_heads >= 1".into(),
            });
        }
        if d_model % n_heads != 0 {
            return Err(Error::Invalid {
                what: format!("d_model {} not divisible by {} heads", d_model, n_heads),
            });
        }
        let d_head = d_model / n_heads;
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for _ in 0..n_heads {
            wq.push(Tensor::random_init(vec![d_model, d_head], d_model, rng)?);
            wk.push(Tensor::random_init(vec![d_model, d_head], d_model, rng)?);
            wv.push(Tensor::random_init(vec![d_model, d_head], d_model, rng)?);
        }
        Ok(AttentionBlock {
            wq,
            wk,
            wv,
            wo: Tensor::random_init(vec![n_heads * d_head, d_model], n_heads * d_head, rng)?,
            ln1_g: Tensor::new(vec![d_model], vec![1.0; d_model])?.param(),
            ln1_b: Tensor::zeros(vec![d_model]).param(),
            ln2_g: Tensor::new(vec![d_model], vec![1.0; d_model])?.param(),
            ln2_b: Tensor::zeros(vec![d_model]).param(),
            ff1: Linear::new(d_model, ff_width, rng)?,
            ff2: Linear::new(ff_width, d_model, rng)?,
            d_model,
            d_head,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.wq.len()
    }

    /// Registers this block's parameters on the tape, quantizing the per-head
    /// projections and the matching output-projection row groups when the
    /// quant nodes are given. Also returns the raw weight leaves that
    /// participate in the L1 term.
    pub fn register(
        &self,
        tape: &mut Tape,
        quant: Option<(NodeId, NodeId)>,
    ) -> Result<(BlockNodes, Vec<NodeId>)> {
        let h = self.n_heads();
        let mut weight_leafs = Vec::new();
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for i in 0..h {
            let (ql, kl, vl) = (
                tape.leaf(&self.wq[i]),
                tape.leaf(&self.wk[i]),
                tape.leaf(&self.wv[i]),
            );
            weight_leafs.extend([ql, kl, vl]);
            if let Some((bits, exps)) = quant {
                wq.push(tape.quantize(ql, bits, exps, GroupMap::All { group: i })?);
                wk.push(tape.quantize(kl, bits, exps, GroupMap::All { group: i })?);
                wv.push(tape.quantize(vl, bits, exps, GroupMap::All { group: i })?);
            } else {
                wq.push(ql);
                wk.push(kl);
                wv.push(vl);
            }
        }
        let wo_leaf = tape.leaf(&self.wo);
        weight_leafs.push(wo_leaf);
        let wo = if let Some((bits, exps)) = quant {
            tape.quantize(wo_leaf, bits, exps, GroupMap::Chunks { n_groups: h })?
        } else {
            wo_leaf
        };
        let ff1_w = tape.leaf(&self.ff1.w);
        let ff2_w = tape.leaf(&self.ff2.w);
        weight_leafs.extend([ff1_w, ff2_w]);
        Ok((
            BlockNodes {
                wq,
                wk,
                wv,
                wo,
                ln1_g: tape.leaf(&self.ln1_g),
                ln1_b: tape.leaf(&self.ln1_b),
                ln2_g: tape.leaf(&self.ln2_g),
                ln2_b: tape.leaf(&self.ln2_b),
                ff1_w,
                ff1_b: tape.leaf(&self.ff1.bias),
                ff2_w,
                ff2_b: tape.leaf(&self.ff2.bias),
            },
            weight_leafs,
        ))
    }

    /// Full block forward: x (B,T,D) -> (B,T,D) with causal masking.
    /// Dead heads (live[h] false) contribute zeros to the concat.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        nodes: &BlockNodes,
        live: &[bool],
    ) -> Result<NodeId> {
        let sh = tape.shape(x).to_vec();
        let (b, t, d) = (sh[0], sh[1], sh[2]);
        if d != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "attention_forward",
                left: sh,
                right: vec![self.d_model],
            });
        }
        let h = self.n_heads();
        let dh = self.d_head;
        let scale = 1.0 / (dh as f32).sqrt();

        let ln1 = tape.layernorm(x, nodes.ln1_g, nodes.ln1_b)?;
        let ln1_2d = tape.reshape(ln1, vec![b * t, d])?;
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            if !live[i] {
                heads.push(tape.constant(vec![0.0; b * t * dh], vec![b, t, dh]));
                continue;
            }
            let q = tape.matmul(ln1_2d, nodes.wq[i])?;
            let k = tape.matmul(ln1_2d, nodes.wk[i])?;
            let v = tape.matmul(ln1_2d, nodes.wv[i])?;
            let q3 = tape.reshape(q, vec![b, t, dh])?;
            let k3 = tape.reshape(k, vec![b, t, dh])?;
            let v3 = tape.reshape(v, vec![b, t, dh])?;
            let scores = tape.bmm_nt(q3, k3)?;
            let att = tape.causal_softmax(scores, scale)?;
            heads.push(tape.bmm_nn(att, v3)?);
        }
        let cat = tape.concat_last(&heads)?;
        let cat2d = tape.reshape(cat, vec![b * t, h * dh])?;
        let proj = tape.matmul(cat2d, nodes.wo)?;
        let proj3 = tape.reshape(proj, vec![b, t, d])?;
        let res1 = tape.add(x, proj3)?;

        let ln2 = tape.layernorm(res1, nodes.ln2_g, nodes.ln2_b)?;
        let ln2_2d = tape.reshape(ln2, vec![b * t, d])?;
        let f1 = self.ff1.forward(tape, ln2_2d, nodes.ff1_w, nodes.ff1_b)?;
        let f1r = tape.relu(f1)?;
        let f2 = self.ff2.forward(tape, f1r, nodes.ff2_w, nodes.ff2_b)?;
        let f2_3d = tape.reshape(f2, vec![b, t, d])?;
        tape.add(res1, f2_3d)
    }
}

/// Tape nodes for one attention block's parameters, with head projections
/// already quantized when quantization is active.
pub struct BlockNodes {
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: Vec<NodeId>,
    pub wo: NodeId,
    pub ln1_g: NodeId,
    pub ln1_b: NodeId,
    pub ln2_g: NodeId,
    pub ln2_b: NodeId,
    pub ff1_w: NodeId,
    pub ff1_b: NodeId,
    pub ff2_w: NodeId,
    pub ff2_b: NodeId,
}

/// Per-group max |w| across the tensors that share a group axis; used to
/// initialize quantization exponents.
pub fn conv_group_maxabs(w: &Tensor) -> Vec<f32> {
    let o = w.shape[0];
    let per = w.numel() / o;
    (0..o)
        .map(|g| {
            w.data[g * per..(g + 1) * per]
                .iter()
                .fold(0.0f32, |m, v| m.max(v.abs()))
        })
        .collect()
}

pub fn head_group_maxabs(block: &AttentionBlock) -> Vec<f32> {
    let h = block.n_heads();
    let dh = block.d_head;
    let d = block.d_model;
    (0..h)
        .map(|g| {
            let mut m = 0.0f32;
            for t in [&block.wq[g], &block.wk[g], &block.wv[g]] {
                m = t.data.iter().fold(m, |m, v| m.max(v.abs()));
            }
            for r in g * dh..(g + 1) * dh {
                for c in 0..d {
                    m = m.max(block.wo.data[r * d + c].abs());
                }
            }
            m
        })
        .collect()
}

/// Quant params for a conv layer (one group per output channel).
pub fn conv_quant_params(w: &Tensor, b0: f32) -> QuantParams {
    QuantParams::from_group_maxabs(b0, &conv_group_maxabs(w))
}

/// Quant params for an attention block (one group per head).
pub fn head_quant_params(block: &AttentionBlock, b0: f32) -> QuantParams {
    QuantParams::from_group_maxabs(b0, &head_group_maxabs(block))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_single_token_weights_are_one() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![3.7], vec![1, 1, 1]);
        let att = tape.causal_softmax(s, 0.3).unwrap();
        assert_eq!(tape.data(att), &[1.0]);

        let mut rng = Rng::new(1);
        let block = AttentionBlock::new(8, 2, 16, &mut rng).unwrap();
        let mut t2 = Tape::new();
        let x = t2.constant((0..8).map(|i| 0.1 * i as f32).collect(), vec![1, 1, 8]);
        let (nodes, _) = block.register(&mut t2, None).unwrap();
        let y = block.forward(&mut t2, x, &nodes, &[true, true]).unwrap();
        assert_eq!(t2.shape(y), &[1, 1, 8]);
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = Rng::new(3);
        let block = AttentionBlock::new(8, 2, 16, &mut rng).unwrap();
        let t = 4;
        let base: Vec<f32> = (0..t * 8).map(|_| rng.range_f32(-1.0, 1.0)).collect();
        let live = vec![true; 2];

        let run = |input: Vec<f32>| {
            let mut tape = Tape::new();
            let x = tape.constant(input, vec![1, t, 8]);
            let (nodes, _) = block.register(&mut tape, None).unwrap();
            let y = block.forward(&mut tape, x, &nodes, &live).unwrap();
            tape.data(y).to_vec()
        };

        let out1 = run(base.clone());
        let mut perturbed = base.clone();
        for v in &mut perturbed[2 * 8..] {
            *v += 5.0;
        }
        let out2 = run(perturbed);
        // Positions 0 and 1 must be bit-identical under the causal mask.
        for i in 0..2 * 8 {
            assert_eq!(out1[i], out2[i], "position {} changed", i / 8);
        }
    }

    #[test]
    fn masking_head_equals_zeroing_its_weights() {
        let mut rng = Rng::new(5);
        let block = AttentionBlock::new(8, 2, 16, &mut rng).unwrap();
        let t = 3;
        let input: Vec<f32> = (0..t * 8).map(|_| rng.range_f32(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.constant(input.clone(), vec![1, t, 8]);
        let (nodes, _) = block.register(&mut tape, None).unwrap();
        let y_masked = block.forward(&mut tape, x, &nodes, &[true, false]).unwrap();
        let masked = tape.data(y_masked).to_vec();

        let mut zeroed = block.clone();
        zeroed.wq[1].data.iter_mut().for_each(|v| *v = 0.0);
        zeroed.wk[1].data.iter_mut().for_each(|v| *v = 0.0);
        zeroed.wv[1].data.iter_mut().for_each(|v| *v = 0.0);
        let dh = block.d_head;
        for r in dh..2 * dh {
            for c in 0..8 {
                zeroed.wo.data[r * 8 + c] = 0.0;
            }
        }
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(input, vec![1, t, 8]);
        let (nodes2, _) = zeroed.register(&mut tape2, None).unwrap();
        let y_zero = zeroed
            .forward(&mut tape2, x2, &nodes2, &[true, true])
            .unwrap();
        let zeroed_out = tape2.data(y_zero).to_vec();

        for (a, b) in masked.iter().zip(&zeroed_out) {
            assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn attention_matches_naive_reference() {
        // 2-head, T=3 case against an explicit f64 loop reference.
        let mut rng = Rng::new(9);
        let d = 8usize;
        let h = 2usize;
        let dh = d / h;
        let t = 3usize;
        let block = AttentionBlock::new(d, h, 4, &mut rng).unwrap();
        let input: Vec<f32> = (0..t * d).map(|_| rng.range_f32(-1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.constant(input.clone(), vec![1, t, d]);
        let (nodes, _) = block.register(&mut tape, None).unwrap();
        let live = vec![true; h];
        let y = block.forward(&mut tape, x, &nodes, &live).unwrap();
        let got = tape.data(y).to_vec();

        let lnorm = |row: &[f64], g: &[f32], bb: &[f32]| -> Vec<f64> {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / row.len() as f64;
            let rs = 1.0 / (v + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, x)| g[j] as f64 * (x - m) * rs + bb[j] as f64)
                .collect()
        };
        let xf: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let mut ln1 = vec![0.0f64; t * d];
        for r in 0..t {
            let o = lnorm(&xf[r * d..(r + 1) * d], &block.ln1_g.data, &block.ln1_b.data);
            ln1[r * d..(r + 1) * d].copy_from_slice(&o);
        }
        let proj = |xr: &[f64], w: &Tensor| -> Vec<f64> {
            let (wi, wo_) = (w.shape[0], w.shape[1]);
            let mut out = vec![0.0; t * wo_];
            for r in 0..t {
                for j in 0..wo_ {
                    let mut s = 0.0;
                    for i in 0..wi {
                        s += xr[r * wi + i] * w.data[i * wo_ + j] as f64;
                    }
                    out[r * wo_ + j] = s;
                }
            }
            out
        };
        let mut cat = vec![0.0f64; t * d];
        for head in 0..h {
            let q = proj(&ln1, &block.wq[head]);
            let k = proj(&ln1, &block.wk[head]);
            let v = proj(&ln1, &block.wv[head]);
            for ti in 0..t {
                let mut sc = vec![0.0f64; ti + 1];
                for (j, scj) in sc.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for kk in 0..dh {
                        s += q[ti * dh + kk] * k[j * dh + kk];
                    }
                    *scj = s / (dh as f64).sqrt();
                }
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                for kk in 0..dh {
                    let mut acc = 0.0;
                    for (j, scj) in sc.iter().enumerate() {
                        acc += (scj - mx).exp() / z * v[j * dh + kk];
                    }
                    cat[ti * d + head * dh + kk] = acc;
                }
            }
        }
        let mut res1 = vec![0.0f64; t * d];
        for r in 0..t {
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..d {
                    s += cat[r * d + i] * block.wo.data[i * d + j] as f64;
                }
                res1[r * d + j] = xf[r * d + j] + s;
            }
        }
        let mut out_ref = vec![0.0f64; t * d];
        for r in 0..t {
            let l2 = lnorm(&res1[r * d..(r + 1) * d], &block.ln2_g.data, &block.ln2_b.data);
            let fw = block.ff1.w.shape[1];
            let mut f1 = vec![0.0f64; fw];
            for (j, f1j) in f1.iter_mut().enumerate() {
                let mut s = block.ff1.bias.data[j] as f64;
                for i in 0..d {
                    s += l2[i] * block.ff1.w.data[i * fw + j] as f64;
                }
                *f1j = s.max(0.0);
            }
            for j in 0..d {
                let mut s = block.ff2.bias.data[j] as f64;
                for (i, f1i) in f1.iter().enumerate() {
                    s += f1i * block.ff2.w.data[i * d + j] as f64;
                }
                out_ref[r * d + j] = res1[r * d + j] + s;
            }
        }
        let mut max_diff = 0.0f64;
        for i in 0..t * d {
            max_diff = max_diff.max((got[i] as f64 - out_ref[i]).abs());
        }
        assert!(max_diff <= 1e-5, "max diff {}", max_diff);
    }
}
