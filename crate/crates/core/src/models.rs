//! The two exemplar architectures and their wiring: a CNN with quantized
//! conv layers (per-output-channel groups) and a decoder-only transformer
//! with quantized attention heads (per-head groups). Feed-forward and
//! embedding parameters stay unquantized.

use crate::data::{Dataset, TextData, VisionData, VOCAB};
use crate::error::{Error, Result};
use crate::nn::{self, AttentionBlock, BatchNorm, Conv2dLayer, Linear};
use crate::quant::{GroupMap, LayerDesc, QuantParams, SizeModel};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CnnSpec {
    /// Output channels per conv layer; the layer count is channels.len().
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl Default for CnnSpec {
    fn default() -> Self {
        CnnSpec {
            channels: vec![16, 32],
            classes: 10,
        }
    }
}

impl CnnSpec {
    pub const INPUT: (usize, usize, usize) = (1, 28, 28);
    pub const KERNEL: usize = 3;

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Invalid {
                what: "cnn needs at least one conv layer with >= 1 channels".into(),
            });
        }
        if self.classes == 0 {
            return Err(Error::Invalid {
                what: "cnn needs >= 1 classes".into(),
            });
        }
        let mut s = Self::INPUT.1;
        for l in 0..self.channels.len() {
            if s % 2 != 0 || s / 2 == 0 {
                return Err(Error::Invalid {
                    what: format!(
                        "spatial extent {} at layer {} cannot be pooled; at most {} layers fit",
                        s, l, l
                    ),
                });
            }
            s /= 2;
        }
        Ok(())
    }

    /// Spatial extent of the conv output at layer l (before that layer's pool).
    pub fn conv_out_extent(&self, l: usize) -> usize {
        Self::INPUT.1 >> l
    }

    /// Spatial extent after the final pool.
    pub fn final_extent(&self) -> usize {
        Self::INPUT.1 >> self.channels.len()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub context: usize,
    pub ff_width: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec {
            vocab: VOCAB,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            context: 16,
            ff_width: 256,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.n_blocks == 0 || self.vocab == 0 || self.context == 0 {
            return Err(Error::Invalid {
                what: "decoder extents must be >= 1".into(),
            });
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid {
                what: format!(
                    "d_model {} not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            });
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Cnn(CnnSpec),
    Decoder(DecoderSpec),
}

// ── Parameter slots ─────────────────────────────────────────────────────

/// What a parameter slot is, for optimizer masking and checkpoint naming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotKind {
    Weight,
    Bias,
    Norm,
    EmbeddingTable,
    QuantBits { layer: usize },
    QuantExps { layer: usize },
}

pub struct SlotMut<'a> {
    pub name: String,
    pub kind: SlotKind,
    pub tensor: &'a mut Tensor,
}

pub struct SlotRef<'a> {
    pub name: String,
    pub kind: SlotKind,
    pub tensor: &'a Tensor,
}

/// Whether each element of a slot may be updated this step.
pub enum UpdateMask {
    Free,
    Mask(Vec<bool>),
}

/// Everything a training step needs from one forward pass.
pub struct Forward {
    pub logits: NodeId,
    pub task_loss: NodeId,
    /// Leaf node per parameter slot, in slot order.
    pub bindings: Vec<NodeId>,
    /// Raw weight leaves participating in the L1 term.
    pub weight_leafs: Vec<NodeId>,
    /// Bits leaf per quantized layer (empty when running unquantized).
    pub quant_bits_nodes: Vec<NodeId>,
    /// Saliency target: last conv output (CNN) or last block output (decoder).
    pub feature: NodeId,
    /// Flattened pre-classifier features.
    pub penultimate: NodeId,
    /// Batch statistics to fold into running stats (train phase only).
    pub bn_updates: Vec<BnUpdate>,
    /// Flattened targets used by the loss.
    pub targets: Vec<usize>,
}

pub struct BnUpdate {
    pub layer: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

// ── CNN ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CnnBlock {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm,
    pub qp: QuantParams,
}

#[derive(Debug, Clone)]
pub struct CnnModel {
    pub spec: CnnSpec,
    pub blocks: Vec<CnnBlock>,
    pub fc: Linear,
    pub trained: bool,
}

pub fn build_cnn(spec: &CnnSpec, b0: f32, rng: &mut Rng) -> Result<CnnModel> {
    spec.validate()?;
    let mut blocks = Vec::new();
    let mut in_ch = CnnSpec::INPUT.0;
    for &out_ch in &spec.channels {
        let conv = Conv2dLayer::new(out_ch, in_ch, CnnSpec::KERNEL, rng)?;
        let qp = nn::conv_quant_params(&conv.w, b0);
        blocks.push(CnnBlock {
            bn: BatchNorm::new(out_ch),
            conv,
            qp,
        });
        in_ch = out_ch;
    }
    let feat = spec.final_extent().pow(2) * spec.channels[spec.channels.len() - 1];
    let fc = Linear::new(feat, spec.classes, rng)?;
    Ok(CnnModel {
        spec: spec.clone(),
        blocks,
        fc,
        trained: false,
    })
}

impl CnnModel {
    fn live_in(&self, l: usize) -> Vec<bool> {
        if l == 0 {
            vec![true; CnnSpec::INPUT.0]
        } else {
            self.blocks[l - 1].qp.live.clone()
        }
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        data: &VisionData,
        ids: &[usize],
        phase: Phase,
        quantized: bool,
    ) -> Result<Forward> {
        let b = ids.len();
        let mut pixels = Vec::with_capacity(b * VisionData::PIXELS);
        let mut targets = Vec::with_capacity(b);
        for &id in ids {
            pixels.extend_from_slice(data.image(id));
            targets.push(data.labels[id]);
        }
        let mut x = tape.constant(pixels, vec![b, 1, 28, 28]);

        let mut bindings = Vec::new();
        let mut weight_leafs = Vec::new();
        let mut quant_bits_nodes = Vec::new();
        let mut bn_updates = Vec::new();
        let mut feature = x;
        for (l, blk) in self.blocks.iter().enumerate() {
            let w = tape.leaf(&blk.conv.w);
            let bias = tape.leaf(&blk.conv.bias);
            let gamma = tape.leaf(&blk.bn.gamma);
            let beta = tape.leaf(&blk.bn.beta);
            let bits = tape.leaf(&blk.qp.bits);
            let exps = tape.leaf(&blk.qp.exps);
            bindings.extend([w, bias, gamma, beta, bits, exps]);
            weight_leafs.push(w);
            let w_used = if quantized {
                quant_bits_nodes.push(bits);
                tape.quantize(
                    w,
                    bits,
                    exps,
                    GroupMap::Chunks {
                        n_groups: blk.conv.out_ch(),
                    },
                )?
            } else {
                w
            };
            let live_in = self.live_in(l);
            let conv = tape.conv2d(
                x,
                w_used,
                Some(bias),
                blk.conv.stride,
                blk.conv.padding,
                &blk.qp.live,
                &live_in,
            )?;
            if l + 1 == self.blocks.len() {
                feature = conv;
            }
            let bn = match phase {
                Phase::Train => {
                    let (node, mean, var) = tape.batchnorm_train(conv, gamma, beta)?;
                    let sh = tape.shape(node);
                    bn_updates.push(BnUpdate {
                        layer: l,
                        mean,
                        var,
                        count: sh[0] * sh[2] * sh[3],
                    });
                    node
                }
                Phase::Eval => {
                    tape.batchnorm_eval(conv, gamma, beta, &blk.bn.running_mean, &blk.bn.running_var)?
                }
            };
            let act = tape.relu(bn)?;
            x = tape.maxpool2x2(act)?;
        }
        let sh = tape.shape(x).to_vec();
        let flat = tape.reshape(x, vec![b, sh[1] * sh[2] * sh[3]])?;
        let fw = tape.leaf(&self.fc.w);
        let fb = tape.leaf(&self.fc.bias);
        bindings.extend([fw, fb]);
        weight_leafs.push(fw);
        let logits = self.fc.forward(tape, flat, fw, fb)?;
        let task_loss = tape.softmax_cross_entropy(logits, &targets)?;
        Ok(Forward {
            logits,
            task_loss,
            bindings,
            weight_leafs,
            quant_bits_nodes,
            feature,
            penultimate: flat,
            bn_updates,
            targets,
        })
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut v = Vec::new();
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            v.push(SlotMut {
                name: format!("conv{}.w", l),
                kind: SlotKind::Weight,
                tensor: &mut blk.conv.w,
            });
            v.push(SlotMut {
                name: format!("conv{}.bias", l),
                kind: SlotKind::Bias,
                tensor: &mut blk.conv.bias,
            });
            v.push(SlotMut {
                name: format!("conv{}.bn.gamma", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.bn.gamma,
            });
            v.push(SlotMut {
                name: format!("conv{}.bn.beta", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.bn.beta,
            });
            v.push(SlotMut {
                name: format!("conv{}.q.bits", l),
                kind: SlotKind::QuantBits { layer: l },
                tensor: &mut blk.qp.bits,
            });
            v.push(SlotMut {
                name: format!("conv{}.q.exps", l),
                kind: SlotKind::QuantExps { layer: l },
                tensor: &mut blk.qp.exps,
            });
        }
        v.push(SlotMut {
            name: "fc.w".into(),
            kind: SlotKind::Weight,
            tensor: &mut self.fc.w,
        });
        v.push(SlotMut {
            name: "fc.bias".into(),
            kind: SlotKind::Bias,
            tensor: &mut self.fc.bias,
        });
        v
    }

    fn update_masks(&self, step: u64) -> Vec<UpdateMask> {
        let mut v = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let live_out = &blk.qp.live;
            let live_in = self.live_in(l);
            let all_live = live_out.iter().all(|&x| x) && live_in.iter().all(|&x| x);
            let k2 = CnnSpec::KERNEL * CnnSpec::KERNEL;
            if all_live {
                v.push(UpdateMask::Free);
            } else {
                let mut m = Vec::with_capacity(blk.conv.w.numel());
                for &lo in live_out {
                    for &li in &live_in {
                        m.extend(std::iter::repeat(lo && li).take(k2));
                    }
                }
                v.push(UpdateMask::Mask(m));
            }
            let chan = |live: &Vec<bool>| {
                if live.iter().all(|&x| x) {
                    UpdateMask::Free
                } else {
                    UpdateMask::Mask(live.clone())
                }
            };
            v.push(chan(live_out)); // bias
            v.push(chan(live_out)); // gamma
            v.push(chan(live_out)); // beta
            let qmask: Vec<bool> = live_out
                .iter()
                .zip(&blk.qp.frozen_until)
                .map(|(&lv, &fu)| lv && step >= fu)
                .collect();
            let q = |m: &Vec<bool>| {
                if m.iter().all(|&x| x) {
                    UpdateMask::Free
                } else {
                    UpdateMask::Mask(m.clone())
                }
            };
            v.push(q(&qmask)); // bits
            v.push(q(&qmask)); // exps
        }
        // fc.w rows follow the flattened (channel, y, x) layout of the last block.
        let last_live = &self.blocks[self.blocks.len() - 1].qp.live;
        if last_live.iter().all(|&x| x) {
            v.push(UpdateMask::Free);
        } else {
            let hw = self.spec.final_extent().pow(2);
            let classes = self.spec.classes;
            let mut m = Vec::with_capacity(self.fc.w.numel());
            for &lv in last_live {
                m.extend(std::iter::repeat(lv).take(hw * classes));
            }
            v.push(UpdateMask::Mask(m));
        }
        v.push(UpdateMask::Free); // fc.bias
        v
    }

    /// Structurally removes conv channel `group` of layer `l`: zero its
    /// kernel, bias, and norm parameters, and mask the downstream consumer
    /// (next conv's input channel, or the fc rows fed by it).
    pub fn prune_group(&mut self, l: usize, group: usize) {
        let k2 = CnnSpec::KERNEL * CnnSpec::KERNEL;
        {
            let blk = &mut self.blocks[l];
            let per = blk.conv.w.numel() / blk.conv.out_ch();
            for v in &mut blk.conv.w.data[group * per..(group + 1) * per] {
                *v = 0.0;
            }
            blk.conv.bias.data[group] = 0.0;
            blk.bn.gamma.data[group] = 0.0;
            blk.bn.beta.data[group] = 0.0;
            blk.bn.running_mean[group] = 0.0;
            blk.bn.running_var[group] = 0.0;
            blk.qp.live[group] = false;
        }
        if l + 1 < self.blocks.len() {
            let next = &mut self.blocks[l + 1];
            let in_ch = self.spec.channels[l];
            let out_ch = next.conv.out_ch();
            for o in 0..out_ch {
                let base = (o * in_ch + group) * k2;
                for v in &mut next.conv.w.data[base..base + k2] {
                    *v = 0.0;
                }
            }
        } else {
            let hw = self.spec.final_extent().pow(2);
            let classes = self.spec.classes;
            for r in group * hw..(group + 1) * hw {
                for c in 0..classes {
                    self.fc.w.data[r * classes + c] = 0.0;
                }
            }
        }
    }

    fn size_model(&self) -> SizeModel {
        let layers = self
            .blocks
            .iter()
            .enumerate()
            .map(|(l, blk)| LayerDesc::Conv {
                in_ch: self.live_in(l).iter().filter(|x| **x).count(),
                out_h: self.spec.conv_out_extent(l),
                out_w: self.spec.conv_out_extent(l),
                out_ch: blk.conv.out_ch(),
                kh: CnnSpec::KERNEL,
                kw: CnnSpec::KERNEL,
            })
            .collect();
        SizeModel { layers }
    }

    /// Live elements of every unquantized parameter (conv biases, norms and
    /// their running stats, fc rows fed by live channels, fc bias).
    fn unquantized_live_params(&self) -> usize {
        let mut p = 0usize;
        for blk in &self.blocks {
            p += blk.qp.live_count() * 5; // bias + gamma + beta + running mean/var
        }
        let last_live = self.blocks[self.blocks.len() - 1].qp.live_count();
        p += last_live * self.spec.final_extent().pow(2) * self.spec.classes;
        p += self.spec.classes;
        p
    }

    /// Per-group all-zero test on the quantized weights of (layer, group).
    fn group_quantizes_to_zero(&self, l: usize, group: usize) -> bool {
        let blk = &self.blocks[l];
        if blk.qp.bits.data[group] <= 0.0 {
            return true;
        }
        let per = blk.conv.w.numel() / blk.conv.out_ch();
        let (b, e) = (blk.qp.bits.data[group], blk.qp.exps.data[group]);
        blk.conv.w.data[group * per..(group + 1) * per]
            .iter()
            .all(|&w| crate::quant::quantize_scalar(w, b, e) == 0.0)
    }
}

// ── Decoder ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DecoderBlockState {
    pub attn: AttentionBlock,
    pub qp: QuantParams,
}

#[derive(Debug, Clone)]
pub struct DecoderModel {
    pub spec: DecoderSpec,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<DecoderBlockState>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Linear,
    pub trained: bool,
}

pub fn build_decoder(spec: &DecoderSpec, b0: f32, rng: &mut Rng) -> Result<DecoderModel> {
    spec.validate()?;
    let d = spec.d_model;
    let mut blocks = Vec::new();
    for _ in 0..spec.n_blocks {
        let attn = AttentionBlock::new(d, spec.n_heads, spec.ff_width, rng)?;
        let qp = nn::head_quant_params(&attn, b0);
        blocks.push(DecoderBlockState { attn, qp });
    }
    Ok(DecoderModel {
        spec: spec.clone(),
        tok_emb: Tensor::random_init(vec![spec.vocab, d], d, rng)?,
        pos_emb: Tensor::random_init(vec![spec.context, d], d, rng)?,
        blocks,
        lnf_g: Tensor::new(vec![d], vec![1.0; d])?.param(),
        lnf_b: Tensor::zeros(vec![d]).param(),
        head: Linear::new(d, spec.vocab, rng)?,
        trained: false,
    })
}

impl DecoderModel {
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        data: &TextData,
        ids: &[usize],
        _phase: Phase,
        quantized: bool,
    ) -> Result<Forward> {
        let b = ids.len();
        let t = data.context;
        if t > self.spec.context {
            return Err(Error::Invalid {
                what: format!(
                    "window length {} exceeds context {}",
                    t, self.spec.context
                ),
            });
        }
        let d = self.spec.d_model;
        let mut flat_ids = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        for &id in ids {
            flat_ids.extend_from_slice(data.window(id));
            targets.extend(data.targets(id));
        }

        let mut bindings = Vec::new();
        let mut weight_leafs = Vec::new();
        let mut quant_bits_nodes = Vec::new();

        let tok = tape.leaf(&self.tok_emb);
        let pos = tape.leaf(&self.pos_emb);
        bindings.extend([tok, pos]);
        let emb = tape.embedding(tok, &flat_ids)?;
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos_rows = tape.embedding(pos, &pos_ids)?;
        let pos_flat = tape.reshape(pos_rows, vec![t * d])?;
        let emb_b = tape.reshape(emb, vec![b, t * d])?;
        let with_pos = tape.add_broadcast(emb_b, pos_flat)?;
        let mut x = tape.reshape(with_pos, vec![b, t, d])?;

        let mut feature = x;
        for blk in &self.blocks {
            let bits = tape.leaf(&blk.qp.bits);
            let exps = tape.leaf(&blk.qp.exps);
            let quant_nodes = if quantized {
                quant_bits_nodes.push(bits);
                Some((bits, exps))
            } else {
                None
            };
            let (nodes, wleafs) = blk.attn.register(tape, quant_nodes)?;
            // slot order within a block: per-head q/k/v, wo, norms, ff, bits, exps
            for h in 0..blk.attn.n_heads() {
                bindings.extend([wleafs[h * 3], wleafs[h * 3 + 1], wleafs[h * 3 + 2]]);
            }
            let wo_leaf = wleafs[blk.attn.n_heads() * 3];
            bindings.push(wo_leaf);
            bindings.extend([
                nodes.ln1_g, nodes.ln1_b, nodes.ln2_g, nodes.ln2_b, nodes.ff1_w, nodes.ff1_b,
                nodes.ff2_w, nodes.ff2_b, bits, exps,
            ]);
            weight_leafs.extend_from_slice(&wleafs);
            x = blk.attn.forward(tape, x, &nodes, &blk.qp.live)?;
            feature = x;
        }
        let lnf_g = tape.leaf(&self.lnf_g);
        let lnf_b = tape.leaf(&self.lnf_b);
        bindings.extend([lnf_g, lnf_b]);
        let normed = tape.layernorm(x, lnf_g, lnf_b)?;
        let flat = tape.reshape(normed, vec![b * t, d])?;
        let hw = tape.leaf(&self.head.w);
        let hb = tape.leaf(&self.head.bias);
        bindings.extend([hw, hb]);
        weight_leafs.push(hw);
        let logits = self.head.forward(tape, flat, hw, hb)?;
        let task_loss = tape.softmax_cross_entropy(logits, &targets)?;
        Ok(Forward {
            logits,
            task_loss,
            bindings,
            weight_leafs,
            quant_bits_nodes,
            feature,
            penultimate: flat,
            bn_updates: Vec::new(),
            targets,
        })
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        let mut v = Vec::new();
        v.push(SlotMut {
            name: "tok_emb".into(),
            kind: SlotKind::EmbeddingTable,
            tensor: &mut self.tok_emb,
        });
        v.push(SlotMut {
            name: "pos_emb".into(),
            kind: SlotKind::EmbeddingTable,
            tensor: &mut self.pos_emb,
        });
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            let heads = blk.attn.wq.len();
            let (wq, wk, wv) = (&mut blk.attn.wq, &mut blk.attn.wk, &mut blk.attn.wv);
            for (h, ((q, k), val)) in wq
                .iter_mut()
                .zip(wk.iter_mut())
                .zip(wv.iter_mut())
                .enumerate()
            {
                v.push(SlotMut {
                    name: format!("block{}.h{}.wq", l, h),
                    kind: SlotKind::Weight,
                    tensor: q,
                });
                v.push(SlotMut {
                    name: format!("block{}.h{}.wk", l, h),
                    kind: SlotKind::Weight,
                    tensor: k,
                });
                v.push(SlotMut {
                    name: format!("block{}.h{}.wv", l, h),
                    kind: SlotKind::Weight,
                    tensor: val,
                });
            }
            debug_assert_eq!(heads * 3, v.len() - 2 - l * (heads * 3 + 11));
            v.push(SlotMut {
                name: format!("block{}.wo", l),
                kind: SlotKind::Weight,
                tensor: &mut blk.attn.wo,
            });
            v.push(SlotMut {
                name: format!("block{}.ln1.g", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.attn.ln1_g,
            });
            v.push(SlotMut {
                name: format!("block{}.ln1.b", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.attn.ln1_b,
            });
            v.push(SlotMut {
                name: format!("block{}.ln2.g", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.attn.ln2_g,
            });
            v.push(SlotMut {
                name: format!("block{}.ln2.b", l),
                kind: SlotKind::Norm,
                tensor: &mut blk.attn.ln2_b,
            });
            v.push(SlotMut {
                name: format!("block{}.ff1.w", l),
                kind: SlotKind::Weight,
                tensor: &mut blk.attn.ff1.w,
            });
            v.push(SlotMut {
                name: format!("block{}.ff1.b", l),
                kind: SlotKind::Bias,
                tensor: &mut blk.attn.ff1.bias,
            });
            v.push(SlotMut {
                name: format!("block{}.ff2.w", l),
                kind: SlotKind::Weight,
                tensor: &mut blk.attn.ff2.w,
            });
            v.push(SlotMut {
                name: format!("block{}.ff2.b", l),
                kind: SlotKind::Bias,
                tensor: &mut blk.attn.ff2.bias,
            });
            v.push(SlotMut {
                name: format!("block{}.q.bits", l),
                kind: SlotKind::QuantBits { layer: l },
                tensor: &mut blk.qp.bits,
            });
            v.push(SlotMut {
                name: format!("block{}.q.exps", l),
                kind: SlotKind::QuantExps { layer: l },
                tensor: &mut blk.qp.exps,
            });
        }
        v.push(SlotMut {
            name: "lnf.g".into(),
            kind: SlotKind::Norm,
            tensor: &mut self.lnf_g,
        });
        v.push(SlotMut {
            name: "lnf.b".into(),
            kind: SlotKind::Norm,
            tensor: &mut self.lnf_b,
        });
        v.push(SlotMut {
            name: "head.w".into(),
            kind: SlotKind::Weight,
            tensor: &mut self.head.w,
        });
        v.push(SlotMut {
            name: "head.bias".into(),
            kind: SlotKind::Bias,
            tensor: &mut self.head.bias,
        });
        v
    }

    fn update_masks(&self, step: u64) -> Vec<UpdateMask> {
        let mut v = Vec::new();
        v.push(UpdateMask::Free); // tok_emb
        v.push(UpdateMask::Free); // pos_emb
        for blk in &self.blocks {
            let heads = blk.attn.n_heads();
            let dh = blk.attn.d_head;
            let d = blk.attn.d_model;
            for h in 0..heads {
                let m = if blk.qp.live[h] {
                    UpdateMask::Free
                } else {
                    UpdateMask::Mask(vec![false; d * dh])
                };
                for _ in 0..3 {
                    v.push(match &m {
                        UpdateMask::Free => UpdateMask::Free,
                        UpdateMask::Mask(x) => UpdateMask::Mask(x.clone()),
                    });
                }
            }
            if blk.qp.live.iter().all(|&x| x) {
                v.push(UpdateMask::Free); // wo
            } else {
                let mut m = Vec::with_capacity(heads * dh * d);
                for &lv in &blk.qp.live {
                    m.extend(std::iter::repeat(lv).take(dh * d));
                }
                v.push(UpdateMask::Mask(m));
            }
            for _ in 0..8 {
                v.push(UpdateMask::Free); // ln1 g/b, ln2 g/b, ff1 w/b, ff2 w/b
            }
            let qmask: Vec<bool> = blk
                .qp
                .live
                .iter()
                .zip(&blk.qp.frozen_until)
                .map(|(&lv, &fu)| lv && step >= fu)
                .collect();
            for _ in 0..2 {
                v.push(if qmask.iter().all(|&x| x) {
                    UpdateMask::Free
                } else {
                    UpdateMask::Mask(qmask.clone())
                });
            }
        }
        for _ in 0..4 {
            v.push(UpdateMask::Free); // lnf g/b, head w/b
        }
        v
    }

    /// Structurally removes head `group` of block `l`: zero its q/k/v
    /// projections and its slice of the output projection.
    pub fn prune_group(&mut self, l: usize, group: usize) {
        let blk = &mut self.blocks[l];
        for t in [
            &mut blk.attn.wq[group],
            &mut blk.attn.wk[group],
            &mut blk.attn.wv[group],
        ] {
            for v in &mut t.data {
                *v = 0.0;
            }
        }
        let dh = blk.attn.d_head;
        let d = blk.attn.d_model;
        for r in group * dh..(group + 1) * dh {
            for c in 0..d {
                blk.attn.wo.data[r * d + c] = 0.0;
            }
        }
        blk.qp.live[group] = false;
    }

    fn size_model(&self) -> SizeModel {
        let layers = (0..self.blocks.len())
            .map(|_| LayerDesc::Attention {
                d_model: self.spec.d_model,
                d_head: self.spec.d_head(),
                heads: self.spec.n_heads,
            })
            .collect();
        SizeModel { layers }
    }

    fn unquantized_live_params(&self) -> usize {
        let s = &self.spec;
        let mut p = s.vocab * s.d_model + s.context * s.d_model;
        for _ in &self.blocks {
            p += 4 * s.d_model; // two layer-norm pairs
            p += s.d_model * s.ff_width + s.ff_width; // ff1
            p += s.ff_width * s.d_model + s.d_model; // ff2
        }
        p += 2 * s.d_model; // final norm
        p += s.d_model * s.vocab + s.vocab; // head
        p
    }

    fn group_quantizes_to_zero(&self, l: usize, group: usize) -> bool {
        let blk = &self.blocks[l];
        if blk.qp.bits.data[group] <= 0.0 {
            return true;
        }
        let (b, e) = (blk.qp.bits.data[group], blk.qp.exps.data[group]);
        let q0 = |w: &f32| crate::quant::quantize_scalar(*w, b, e) == 0.0;
        let dh = blk.attn.d_head;
        let d = blk.attn.d_model;
        blk.attn.wq[group].data.iter().all(q0)
            && blk.attn.wk[group].data.iter().all(q0)
            && blk.attn.wv[group].data.iter().all(q0)
            && blk.attn.wo.data[group * dh * d..(group + 1) * dh * d]
                .iter()
                .all(q0)
    }
}

// ── Unified model ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum Model {
    Cnn(CnnModel),
    Decoder(DecoderModel),
}

impl Model {
    pub fn build(spec: &ModelSpec, b0: f32, rng: &mut Rng) -> Result<Model> {
        Ok(match spec {
            ModelSpec::Cnn(s) => Model::Cnn(build_cnn(s, b0, rng)?),
            ModelSpec::Decoder(s) => Model::Decoder(build_decoder(s, b0, rng)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Cnn(m) => ModelSpec::Cnn(m.spec.clone()),
            Model::Decoder(m) => ModelSpec::Decoder(m.spec.clone()),
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self, Model::Cnn(_))
    }

    pub fn trained(&self) -> bool {
        match self {
            Model::Cnn(m) => m.trained,
            Model::Decoder(m) => m.trained,
        }
    }

    pub fn set_trained(&mut self, trained: bool) {
        match self {
            Model::Cnn(m) => m.trained = trained,
            Model::Decoder(m) => m.trained = trained,
        }
    }

    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        data: &Dataset,
        ids: &[usize],
        phase: Phase,
        quantized: bool,
    ) -> Result<Forward> {
        match (self, data) {
            (Model::Cnn(m), Dataset::Vision(d)) => m.forward_batch(tape, d, ids, phase, quantized),
            (Model::Decoder(m), Dataset::Text(d)) => {
                m.forward_batch(tape, d, ids, phase, quantized)
            }
            _ => Err(Error::Invalid {
                what: "model/dataset modality mismatch".into(),
            }),
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        if let Model::Cnn(m) = self {
            for u in updates {
                m.blocks[u.layer].bn.update_running(&u.mean, &u.var, u.count);
            }
        }
    }

    pub fn slots_mut(&mut self) -> Vec<SlotMut<'_>> {
        match self {
            Model::Cnn(m) => m.slots_mut(),
            Model::Decoder(m) => m.slots_mut(),
        }
    }

    /// Immutable view of the slots in the same canonical order.
    pub fn slots(&mut self) -> Vec<SlotRef<'_>> {
        // Reuses the mutable enumeration to guarantee identical ordering.
        self.slots_mut()
            .into_iter()
            .map(|s| SlotRef {
                name: s.name,
                kind: s.kind,
                tensor: &*s.tensor,
            })
            .collect()
    }

    pub fn update_masks(&self, step: u64) -> Vec<UpdateMask> {
        match self {
            Model::Cnn(m) => m.update_masks(step),
            Model::Decoder(m) => m.update_masks(step),
        }
    }

    pub fn quant_layers(&self) -> usize {
        match self {
            Model::Cnn(m) => m.blocks.len(),
            Model::Decoder(m) => m.blocks.len(),
        }
    }

    pub fn quant(&self, l: usize) -> &QuantParams {
        match self {
            Model::Cnn(m) => &m.blocks[l].qp,
            Model::Decoder(m) => &m.blocks[l].qp,
        }
    }

    pub fn quant_mut(&mut self, l: usize) -> &mut QuantParams {
        match self {
            Model::Cnn(m) => &mut m.blocks[l].qp,
            Model::Decoder(m) => &mut m.blocks[l].qp,
        }
    }

    pub fn size_model(&self) -> SizeModel {
        match self {
            Model::Cnn(m) => m.size_model(),
            Model::Decoder(m) => m.size_model(),
        }
    }

    pub fn unquantized_live_params(&self) -> usize {
        match self {
            Model::Cnn(m) => m.unquantized_live_params(),
            Model::Decoder(m) => m.unquantized_live_params(),
        }
    }

    pub fn group_quantizes_to_zero(&self, l: usize, g: usize) -> bool {
        match self {
            Model::Cnn(m) => m.group_quantizes_to_zero(l, g),
            Model::Decoder(m) => m.group_quantizes_to_zero(l, g),
        }
    }

    pub fn prune_group(&mut self, l: usize, g: usize) {
        match self {
            Model::Cnn(m) => m.prune_group(l, g),
            Model::Decoder(m) => m.prune_group(l, g),
        }
    }

    /// Current average bit depth Q over the quantized layers, in bits.
    pub fn average_q(&self) -> f64 {
        let sm = self.size_model();
        let bits: Vec<(&[f32], &[bool])> = (0..self.quant_layers())
            .map(|l| {
                let qp = self.quant(l);
                (&qp.bits.data[..], &qp.live[..])
            })
            .collect();
        crate::quant::average_bit_depth(&sm, &bits).unwrap_or(0.0)
    }

    /// Realized storage bytes. With quantization off (baseline mode) every
    /// live parameter is a 32-bit real and no (b, e) pairs are stored.
    pub fn report_bytes(&self, quantized: bool) -> f64 {
        let sm = self.size_model();
        let unq = self.unquantized_live_params();
        if !quantized {
            let mut weights = 0usize;
            for (l, desc) in sm.layers.iter().enumerate() {
                weights += desc.group_elems() * self.quant(l).live_count();
            }
            return 4.0 * (unq + weights) as f64;
        }
        let bits: Vec<(&[f32], &[bool])> = (0..self.quant_layers())
            .map(|l| {
                let qp = self.quant(l);
                (&qp.bits.data[..], &qp.live[..])
            })
            .collect();
        crate::quant::model_bytes(&sm, &bits, unq)
    }

    /// Bytes of the quantized component alone (conv kernels / attention heads).
    pub fn quantized_component_bytes(&self, quantized: bool) -> f64 {
        let sm = self.size_model();
        let mut bytes = 0.0f64;
        for (l, desc) in sm.layers.iter().enumerate() {
            let qp = self.quant(l);
            for g in 0..qp.groups() {
                if !qp.live[g] {
                    continue;
                }
                if quantized {
                    bytes += desc.group_elems() as f64 * qp.bits.data[g].max(0.0).ceil() as f64
                        / 8.0
                        + 4.0;
                } else {
                    bytes += 4.0 * desc.group_elems() as f64;
                }
            }
        }
        bytes
    }

    /// All quantized-weight values post-quantization, for histogram export.
    pub fn quantized_weight_values(&self) -> Vec<f32> {
        let mut out = Vec::new();
        match self {
            Model::Cnn(m) => {
                for blk in &m.blocks {
                    let per = blk.conv.w.numel() / blk.conv.out_ch();
                    for g in 0..blk.conv.out_ch() {
                        let (b, e) = (blk.qp.bits.data[g], blk.qp.exps.data[g]);
                        for w in &blk.conv.w.data[g * per..(g + 1) * per] {
                            out.push(crate::quant::quantize_scalar(*w, b, e));
                        }
                    }
                }
            }
            Model::Decoder(m) => {
                for blk in &m.blocks {
                    let dh = blk.attn.d_head;
                    let d = blk.attn.d_model;
                    for g in 0..blk.attn.n_heads() {
                        let (b, e) = (blk.qp.bits.data[g], blk.qp.exps.data[g]);
                        for t in [&blk.attn.wq[g], &blk.attn.wk[g], &blk.attn.wv[g]] {
                            for w in &t.data {
                                out.push(crate::quant::quantize_scalar(*w, b, e));
                            }
                        }
                        for w in &blk.attn.wo.data[g * dh * d..(g + 1) * dh * d] {
                            out.push(crate::quant::quantize_scalar(*w, b, e));
                        }
                    }
                }
            }
        }
        out
    }
}

// ── Shared evaluation ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Mean cross-entropy in nats (per sample for the CNN, per token for the
    /// decoder).
    pub loss_nats: f64,
    /// Top-1 accuracy in percent (token-level for the decoder).
    pub accuracy_pct: f64,
}

/// Evaluates task loss and accuracy over the given sample ids, in eval phase.
pub fn evaluate_on(
    model: &Model,
    data: &Dataset,
    ids: &[usize],
    quantized: bool,
) -> Result<EvalMetrics> {
    if ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    let mut rows_total = 0usize;
    for chunk in ids.chunks(64) {
        let mut tape = Tape::new();
        let fw = model.forward_batch(&mut tape, data, chunk, Phase::Eval, quantized)?;
        let rows = fw.targets.len();
        loss_sum += tape.scalar_value(fw.task_loss) as f64 * rows as f64;
        let logits = tape.data(fw.logits);
        let classes = tape.shape(fw.logits)[1];
        for (r, &t) in fw.targets.iter().enumerate() {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == t {
                correct += 1;
            }
        }
        rows_total += rows;
    }
    Ok(EvalMetrics {
        loss_nats: loss_sum / rows_total as f64,
        accuracy_pct: 100.0 * correct as f64 / rows_total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn default_cnn_parameter_count_matches_hand_count() {
        let spec = CnnSpec::default();
        let mut rng = Rng::new(1);
        let m = build_cnn(&spec, 8.0, &mut rng).unwrap();
        // conv1 16*1*3*3 + conv2 32*16*3*3 weights
        let conv_w: usize = m.blocks.iter().map(|b| b.conv.w.numel()).sum();
        assert_eq!(conv_w, 144 + 4608);
        // biases + bn gamma/beta
        let small: usize = m
            .blocks
            .iter()
            .map(|b| b.conv.bias.numel() + b.bn.gamma.numel() + b.bn.beta.numel())
            .sum();
        assert_eq!(small, 3 * (16 + 32));
        // fc: 32*7*7 -> 10
        assert_eq!(m.fc.w.numel(), 32 * 49 * 10);
        assert_eq!(m.fc.bias.numel(), 10);
        // quantized group counts: O_l per layer
        assert_eq!(m.blocks[0].qp.groups(), 16);
        assert_eq!(m.blocks[1].qp.groups(), 32);
    }

    #[test]
    fn default_decoder_logits_shape() {
        let spec = DecoderSpec::default();
        let mut rng = Rng::new(2);
        let model = build_decoder(&spec, 8.0, &mut rng).unwrap();
        let data = crate::data::synthetic_text(8, 3, spec.context, Split::Train);
        let mut tape = Tape::new();
        let fw = model
            .forward_batch(&mut tape, &data, &[0, 1, 2], Phase::Eval, true)
            .unwrap();
        assert_eq!(tape.shape(fw.logits), &[3 * 16, 27]);
        // decoder block has n_heads quantized groups
        assert_eq!(model.blocks[0].qp.groups(), 4);
    }

    #[test]
    fn slots_and_bindings_align() {
        let mut rng = Rng::new(3);
        let mut model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let data = Dataset::Vision(crate::data::synthetic_vision(8, 1));
        let mut tape = Tape::new();
        let fw = model
            .forward_batch(&mut tape, &data, &[0, 1, 2, 3], Phase::Train, true)
            .unwrap();
        let shapes: Vec<Vec<usize>> = {
            let slots = model.slots();
            slots.iter().map(|s| s.tensor.shape.clone()).collect()
        };
        assert_eq!(fw.bindings.len(), shapes.len());
        for (node, shape) in fw.bindings.iter().zip(&shapes) {
            assert_eq!(tape.shape(*node), &shape[..]);
        }
        let masks = model.update_masks(0);
        assert_eq!(masks.len(), shapes.len());

        let mut dec = Model::Decoder(build_decoder(&DecoderSpec::default(), 8.0, &mut rng).unwrap());
        let tdata = Dataset::Text(crate::data::synthetic_text(8, 3, 16, Split::Train));
        let mut tape2 = Tape::new();
        let fw2 = dec
            .forward_batch(&mut tape2, &tdata, &[0, 1], Phase::Train, true)
            .unwrap();
        let shapes2: Vec<Vec<usize>> = dec
            .slots()
            .iter()
            .map(|s| s.tensor.shape.clone())
            .collect();
        assert_eq!(fw2.bindings.len(), shapes2.len());
        for (node, shape) in fw2.bindings.iter().zip(&shapes2) {
            assert_eq!(tape2.shape(*node), &shape[..]);
        }
        assert_eq!(dec.update_masks(0).len(), shapes2.len());
    }

    #[test]
    fn cnn_spec_rejects_unpoolable_depth() {
        let spec = CnnSpec {
            channels: vec![4, 4, 4],
            classes: 10,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn pruned_conv_channel_is_structurally_silent() {
        let mut rng = Rng::new(5);
        let mut model = build_cnn(
            &CnnSpec {
                channels: vec![4, 6],
                classes: 10,
            },
            8.0,
            &mut rng,
        )
        .unwrap();
        let data = crate::data::synthetic_vision(12, 9);

        let out_before = {
            let mut tape = Tape::new();
            let fw = model
                .forward_batch(&mut tape, &data, &[0, 1, 2, 3], Phase::Eval, false)
                .unwrap();
            tape.data(fw.logits).to_vec()
        };
        // Manually zero channel 2 of layer 0 everywhere it matters, then compare
        // with the structural prune path.
        model.prune_group(0, 2);
        let out_after = {
            let mut tape = Tape::new();
            let fw = model
                .forward_batch(&mut tape, &data, &[0, 1, 2, 3], Phase::Eval, false)
                .unwrap();
            tape.data(fw.logits).to_vec()
        };
        assert_eq!(out_before.len(), out_after.len());
        // Outputs change (the channel used to carry signal)...
        assert_ne!(out_before, out_after);
        // ...but running the pruned model with the channel masked vs. with its
        // weights zeroed must agree exactly; prune_group did both, so a second
        // forward is deterministic.
        let out_again = {
            let mut tape = Tape::new();
            let fw = model
                .forward_batch(&mut tape, &data, &[0, 1, 2, 3], Phase::Eval, false)
                .unwrap();
            tape.data(fw.logits).to_vec()
        };
        assert_eq!(out_after, out_again);
    }

    #[test]
    fn report_bytes_baseline_is_4p() {
        let mut rng = Rng::new(7);
        let model = Model::Cnn(build_cnn(&CnnSpec::default(), 8.0, &mut rng).unwrap());
        let p = model.unquantized_live_params() + 144 + 4608;
        assert_eq!(model.report_bytes(false), 4.0 * p as f64);
    }
}
