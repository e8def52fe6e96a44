//! The differentiable quantizer, its surrogate gradient, and the size model.
//!
//! Weights are mapped onto the grid {2^e * k} with k clamped to the signed
//! range of a b-bit integer. Both b and e are continuous, learnable, and kept
//! per group (conv output channel or attention head). Quantization is
//! simulated in f32; size is computed analytically.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const LN2: f32 = std::f32::consts::LN_2;

/// Maps each element of a tensor to its quantization group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum GroupMap {
    /// Every element belongs to one fixed group (a whole per-head tensor).
    All { group: usize },
    /// Equal contiguous chunks along the leading axis: element i belongs to
    /// group i / (numel / n_groups).
    Chunks { n_groups: usize },
}

impl GroupMap {
    pub fn validate(&self, numel: usize, n_groups_available: usize) -> Result<()> {
        match self {
            GroupMap::All { group } => {
                if *group >= n_groups_available {
                    return Err(Error::Invalid {
                        what: format!(
                            "group index {} out of range ({} groups)",
                            group, n_groups_available
                        ),
                    });
                }
            }
            GroupMap::Chunks { n_groups } => {
                if *n_groups == 0 || numel % n_groups != 0 {
                    return Err(Error::Invalid {
                        what: format!(
                            "{} elements cannot be split into {} equal groups",
                            numel, n_groups
                        ),
                    });
                }
                if *n_groups > n_groups_available {
                    return Err(Error::Invalid {
                        what: format!(
                            "need {} groups, only {} available",
                            n_groups, n_groups_available
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn group_of(&self, i: usize, numel: usize) -> usize {
        match self {
            GroupMap::All { group } => *group,
            GroupMap::Chunks { n_groups } => i / (numel / n_groups),
        }
    }
}

/// q(x, b, e) = 2^e * floor(clamp(2^-e * x, -2^(b-1), 2^(b-1) - 1)).
///
/// Two refinements keep the stated invariants exact in f32:
/// - the floor carries a relative guard of a few ulps so that re-quantizing a
///   grid value recovers the same integer (idempotence);
/// - the integer is bounded below by ceil(-2^(b-1)), which only differs from
///   the raw floor when b is fractional and keeps outputs on the grid.
///
/// Groups with b <= 0 quantize to exactly 0.
#[inline]
pub fn quantize_scalar(x: f32, b: f32, e: f32) -> f32 {
    if b <= 0.0 {
        return 0.0;
    }
    let s = e.exp2();
    let half = (b - 1.0).exp2();
    let upper = half - 1.0;
    let lower = -half;
    let y = x / s;
    let yc = y.clamp(lower, upper);
    let guarded = yc + yc.abs() * 5e-7 + 1e-12;
    let mut k = guarded.floor();
    let kmin = lower.ceil();
    if k < kmin {
        k = kmin;
    }
    s * k
}

/// Elementwise quantization with per-group (b, e).
pub fn quantize_values(x: &[f32], b: &[f32], e: &[f32], groups: &GroupMap) -> Result<Vec<f32>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { op: "quantize" });
    }
    if b.iter().chain(e.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { op: "quantize" });
    }
    groups.validate(x.len(), b.len())?;
    let n = x.len();
    let mut out = vec![0.0f32; n];
    match groups {
        GroupMap::All { group } => {
            let (bg, eg) = (b[*group], e[*group]);
            for i in 0..n {
                out[i] = quantize_scalar(x[i], bg, eg);
            }
        }
        GroupMap::Chunks { n_groups } => {
            let chunk = n / n_groups;
            for g in 0..*n_groups {
                let (bg, eg) = (b[g], e[g]);
                for i in g * chunk..(g + 1) * chunk {
                    out[i] = quantize_scalar(x[i], bg, eg);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the smooth surrogate s(x,b,e) = 2^e * clamp(2^-e x, -2^(b-1), 2^(b-1)-1),
/// i.e. the quantizer with the floor treated as identity (straight-through).
///
/// Per element: in the unclamped region ds/dx = 1 and ds/db = ds/de = 0;
/// when clamped, ds/dx = 0, ds/de = ln2 * s, and ds/db = ±2^e ln2 2^(b-1)
/// (positive at the high clamp, negative at the low clamp). Groups with
/// b <= 0 receive zero gradient everywhere.
#[allow(clippy::too_many_arguments)]
pub(crate) fn quantize_backward_raw(
    upstream: &[f32],
    x: &[f32],
    b: &[f32],
    e: &[f32],
    groups: &GroupMap,
    want_x: bool,
    want_b: bool,
    want_e: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let n = x.len();
    let mut dx = want_x.then(|| vec![0.0f32; n]);
    let mut db = want_b.then(|| vec![0.0f32; b.len()]);
    let mut de = want_e.then(|| vec![0.0f32; e.len()]);
    for i in 0..n {
        let g = groups.group_of(i, n);
        let (bg, eg) = (b[g], e[g]);
        if bg <= 0.0 {
            continue;
        }
        let s = eg.exp2();
        let half = (bg - 1.0).exp2();
        let upper = half - 1.0;
        let lower = -half;
        let y = x[i] / s;
        let up = upstream[i];
        if y > upper {
            // clamped high: s = 2^e (2^(b-1) - 1)
            if let Some(db) = db.as_mut() {
                db[g] += up * LN2 * s * half;
            }
            if let Some(de) = de.as_mut() {
                de[g] += up * LN2 * s * upper;
            }
        } else if y < lower {
            // clamped low: s = -2^e 2^(b-1)
            if let Some(db) = db.as_mut() {
                db[g] -= up * LN2 * s * half;
            }
            if let Some(de) = de.as_mut() {
                de[g] += up * LN2 * s * lower;
            }
        } else if let Some(dx) = dx.as_mut() {
            dx[i] = up;
        }
    }
    (dx, db, de)
}

/// Public form of the surrogate backward: returns (dx, db, de).
pub fn quantize_backward(
    upstream: &[f32],
    x: &[f32],
    b: &[f32],
    e: &[f32],
    groups: &GroupMap,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    groups.validate(x.len(), b.len())?;
    let (dx, db, de) = quantize_backward_raw(upstream, x, b, e, groups, true, true, true);
    Ok((dx.unwrap(), db.unwrap(), de.unwrap()))
}

// ── Learnable quantization state ────────────────────────────────────────

/// Learnable per-group quantization parameters plus prune/freeze state for
/// one quantized layer (conv output channels or attention heads).
#[derive(Debug, Clone)]
pub struct QuantParams {
    /// Continuous bit depth per group, clamped to [0, 16].
    pub bits: crate::tensor::Tensor,
    /// Continuous log2 scale per group, clamped to [-32, 32].
    pub exps: crate::tensor::Tensor,
    /// Step index until which each group's (b, e) stays frozen.
    pub frozen_until: Vec<u64>,
    /// False once the group has been structurally pruned.
    pub live: Vec<bool>,
}

impl QuantParams {
    /// b starts at b0 for every group; e starts at
    /// ceil(log2(max|w| + 1e-12)) - (b0 - 1) so the initial clamp range
    /// covers the group's weights.
    pub fn from_group_maxabs(b0: f32, group_maxabs: &[f32]) -> Self {
        let n = group_maxabs.len();
        let exps: Vec<f32> = group_maxabs
            .iter()
            .map(|m| ((m + 1e-12).log2().ceil() - (b0 - 1.0)).clamp(-32.0, 32.0))
            .collect();
        QuantParams {
            bits: crate::tensor::Tensor::new(vec![n], vec![b0; n])
                .unwrap()
                .param(),
            exps: crate::tensor::Tensor::new(vec![n], exps).unwrap().param(),
            frozen_until: vec![0; n],
            live: vec![true; n],
        }
    }

    pub fn groups(&self) -> usize {
        self.live.len()
    }

    pub fn live_count(&self) -> usize {
        self.live.iter().filter(|l| **l).count()
    }

    /// Clamp invariants applied after every optimizer update.
    pub fn clamp(&mut self) {
        for b in &mut self.bits.data {
            *b = b.clamp(0.0, 16.0);
        }
        for e in &mut self.exps.data {
            *e = e.clamp(-32.0, 32.0);
        }
    }
}

// ── Size model ──────────────────────────────────────────────────────────

/// Descriptor of one quantized layer for the size formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerDesc {
    Conv {
        /// Live input channels feeding this layer.
        in_ch: usize,
        /// Spatial extents of the layer's output feature map.
        out_h: usize,
        out_w: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
    },
    Attention {
        d_model: usize,
        d_head: usize,
        heads: usize,
    },
}

impl LayerDesc {
    pub fn groups(&self) -> usize {
        match self {
            LayerDesc::Conv { out_ch, .. } => *out_ch,
            LayerDesc::Attention { heads, .. } => *heads,
        }
    }

    /// Weight elements belonging to one group of this layer.
    pub fn group_elems(&self) -> usize {
        match self {
            LayerDesc::Conv { in_ch, kh, kw, .. } => in_ch * kh * kw,
            LayerDesc::Attention { d_model, d_head, .. } => 4 * d_model * d_head,
        }
    }

    /// The per-group coefficient of the differentiable size penalty:
    /// I*H*W for a conv channel, 4*d_model*d_head for an attention head.
    /// Dead groups contribute zero.
    pub fn penalty_coeffs(&self, live: &[bool]) -> Vec<f32> {
        let c = match self {
            LayerDesc::Conv {
                in_ch, out_h, out_w, ..
            } => (in_ch * out_h * out_w) as f32,
            LayerDesc::Attention { d_model, d_head, .. } => (4 * d_model * d_head) as f32,
        };
        live.iter().map(|&l| if l { c } else { 0.0 }).collect()
    }
}

/// Per-layer descriptors for every quantized layer of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeModel {
    pub layers: Vec<LayerDesc>,
}

/// z_l for a conv layer: I_l * H_l * W_l * sum_i max(b_i, 0), in bits.
/// Pruned groups contribute 0.
pub fn layer_quantized_size(desc: &LayerDesc, b: &[f32], live: &[bool]) -> Result<f64> {
    match desc {
        LayerDesc::Conv {
            in_ch,
            out_h,
            out_w,
            out_ch,
            ..
        } => {
            if b.len() != *out_ch || live.len() != *out_ch {
                return Err(Error::Invalid {
                    what: format!("expected {} per-channel bit depths, got {}", out_ch, b.len()),
                });
            }
            let mut s = 0.0f64;
            for i in 0..*out_ch {
                if live[i] {
                    s += b[i].max(0.0) as f64;
                }
            }
            Ok((in_ch * out_h * out_w) as f64 * s)
        }
        LayerDesc::Attention { .. } => Err(Error::Invalid {
            what: "layer_quantized_size expects a conv descriptor".into(),
        }),
    }
}

/// Attention-layer size: sum over live heads of p_h * max(b_h, 0) where
/// p_h = 4 * d_model * d_head (q/k/v projections plus the head's slice of the
/// output projection).
pub fn attention_quantized_size(desc: &LayerDesc, b: &[f32], live: &[bool]) -> Result<f64> {
    match desc {
        LayerDesc::Attention {
            d_model,
            d_head,
            heads,
        } => {
            if b.len() != *heads || live.len() != *heads {
                return Err(Error::Invalid {
                    what: format!("expected {} per-head bit depths, got {}", heads, b.len()),
                });
            }
            let p = (4 * d_model * d_head) as f64;
            let mut s = 0.0f64;
            for i in 0..*heads {
                if live[i] {
                    s += p * b[i].max(0.0) as f64;
                }
            }
            Ok(s)
        }
        LayerDesc::Conv { .. } => Err(Error::Invalid {
            what: "attention_quantized_size expects an attention descriptor".into(),
        }),
    }
}

fn quantized_size(desc: &LayerDesc, b: &[f32], live: &[bool]) -> Result<f64> {
    match desc {
        LayerDesc::Conv { .. } => layer_quantized_size(desc, b, live),
        LayerDesc::Attention { .. } => attention_quantized_size(desc, b, live),
    }
}

/// Q: the mean of per-layer quantized sizes z_l over the N quantized layers.
pub fn average_bit_depth(sm: &SizeModel, bits: &[(&[f32], &[bool])]) -> Result<f64> {
    if sm.layers.is_empty() {
        return Err(Error::Invalid {
            what: "no quantized layers".into(),
        });
    }
    if bits.len() != sm.layers.len() {
        return Err(Error::Invalid {
            what: format!(
                "size model has {} layers, got {} bit vectors",
                sm.layers.len(),
                bits.len()
            ),
        });
    }
    let mut total = 0.0f64;
    for (desc, (b, live)) in sm.layers.iter().zip(bits) {
        total += quantized_size(desc, b, live)?;
    }
    Ok(total / sm.layers.len() as f64)
}

/// Reporting metric (not the training penalty): realized storage in bytes.
///
/// Live quantized groups cost ceil(max(b,0))/8 bytes per weight element plus
/// 4 bytes for the stored (b, e) pair; every live unquantized parameter costs
/// 4 bytes. Dead groups and their masked consumers cost nothing.
pub fn model_bytes(sm: &SizeModel, bits: &[(&[f32], &[bool])], unquantized_params: usize) -> f64 {
    let mut bytes = 4.0 * unquantized_params as f64;
    for (desc, (b, live)) in sm.layers.iter().zip(bits) {
        let elems = desc.group_elems() as f64;
        for i in 0..b.len() {
            if live[i] {
                bytes += elems * (b[i].max(0.0).ceil() as f64) / 8.0;
                bytes += 4.0; // stored (b, e) pair
            }
        }
    }
    bytes
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: GroupMap = GroupMap::All { group: 0 };

    #[test]
    fn hand_evaluated_cases() {
        // 2^2*0.3 = 1.2 -> clamp [-8,7] -> floor 1 -> * 2^-2 = 0.25
        assert_eq!(quantize_scalar(0.3, 4.0, -2.0), 0.25);
        // saturation at 7
        assert_eq!(quantize_scalar(100.0, 4.0, 0.0), 7.0);
        // zero fixed point
        for b in [0.5f32, 2.0, 4.0, 8.0, 16.0] {
            for e in [-3.0f32, 0.0, 2.5] {
                assert_eq!(quantize_scalar(0.0, b, e), 0.0);
            }
        }
        // floor asymmetry: -1.2 -> floor -2 -> -0.5
        assert_eq!(quantize_scalar(-0.3, 4.0, -2.0), -0.5);
    }

    #[test]
    fn non_positive_bits_zero_out() {
        assert_eq!(quantize_scalar(5.0, 0.0, 1.0), 0.0);
        assert_eq!(quantize_scalar(5.0, -2.0, 1.0), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(quantize_values(&[f32::NAN], &[4.0], &[0.0], &ALL).is_err());
        assert!(quantize_values(&[1.0], &[f32::INFINITY], &[0.0], &ALL).is_err());
    }

    #[test]
    fn idempotent_for_integer_bits() {
        let mut rng = crate::tensor::Rng::new(42);
        for _ in 0..2000 {
            let b = [2.0f32, 4.0, 8.0, 16.0][rng.below(4)];
            let e = rng.range_f32(-8.0, 8.0);
            let x = rng.range_f32(-100.0, 100.0);
            let q1 = quantize_scalar(x, b, e);
            let q2 = quantize_scalar(q1, b, e);
            assert_eq!(
                q1.to_bits(),
                q2.to_bits(),
                "x={} b={} e={}: {} != {}",
                x,
                b,
                e,
                q1,
                q2
            );
        }
    }

    #[test]
    fn grid_and_saturation_fractional_bits() {
        let mut rng = crate::tensor::Rng::new(7);
        for _ in 0..2000 {
            let b = rng.range_f32(0.1, 16.0);
            let e = rng.range_f32(-6.0, 6.0);
            let x = rng.range_f32(-50.0, 50.0);
            let q = quantize_scalar(x, b, e);
            let s = e.exp2();
            let half = ((b - 1.0) as f64).exp2();
            if b < 1.0 {
                // No integer level exists between -2^(b-1) and 2^(b-1)-1.
                assert_eq!(q, 0.0);
                continue;
            }
            let k = (q / s) as f64;
            assert!(
                (k - k.round()).abs() < 1e-3,
                "not on grid: q={} s={} k={}",
                q,
                s,
                k
            );
            assert!(
                k.round() >= -half && k.round() <= half - 1.0,
                "k {} outside [-{}, {}-1]",
                k,
                half,
                half
            );
            assert!(q.abs() as f64 <= s as f64 * half + 1e-6);
        }
    }

    #[test]
    fn monotone_within_group() {
        let mut rng = crate::tensor::Rng::new(9);
        for _ in 0..500 {
            let b = rng.range_f32(0.5, 16.0);
            let e = rng.range_f32(-4.0, 4.0);
            let x1 = rng.range_f32(-20.0, 20.0);
            let x2 = rng.range_f32(-20.0, 20.0);
            let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
            assert!(quantize_scalar(lo, b, e) <= quantize_scalar(hi, b, e));
        }
    }

    #[test]
    fn backward_hand_cases() {
        // unclamped
        let (dx, db, de) =
            quantize_backward(&[1.0], &[0.3], &[4.0], &[-2.0], &ALL).unwrap();
        assert_eq!(dx, vec![1.0]);
        assert_eq!(db, vec![0.0]);
        assert_eq!(de, vec![0.0]);

        // clamped high at s = 7: de = ln2*7, db = ln2*8
        let (dx, db, de) = quantize_backward(&[1.0], &[100.0], &[4.0], &[0.0], &ALL).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert!((db[0] - LN2 * 8.0).abs() < 1e-6);
        assert!((de[0] - LN2 * 7.0).abs() < 1e-6);

        // clamped low at s = -8: de = -ln2*8, db = -ln2*8
        let (dx, db, de) = quantize_backward(&[1.0], &[-100.0], &[4.0], &[0.0], &ALL).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert!((db[0] + LN2 * 8.0).abs() < 1e-6);
        assert!((de[0] + LN2 * 8.0).abs() < 1e-6);

        // dead group
        let (dx, db, de) = quantize_backward(&[1.0], &[100.0], &[0.0], &[0.0], &ALL).unwrap();
        assert_eq!((dx[0], db[0], de[0]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn size_formulas_hand_cases() {
        let conv = LayerDesc::Conv {
            in_ch: 1,
            out_h: 28,
            out_w: 28,
            out_ch: 2,
            kh: 3,
            kw: 3,
        };
        let z = layer_quantized_size(&conv, &[4.0, 4.0], &[true, true]).unwrap();
        assert_eq!(z, 6272.0);
        assert_eq!(
            layer_quantized_size(&conv, &[0.0, 0.0], &[true, true]).unwrap(),
            0.0
        );

        let attn = LayerDesc::Attention {
            d_model: 64,
            d_head: 16,
            heads: 1,
        };
        assert_eq!(
            attention_quantized_size(&attn, &[8.0], &[true]).unwrap(),
            32768.0
        );

        let attn2 = LayerDesc::Attention {
            d_model: 64,
            d_head: 16,
            heads: 2,
        };
        let a = attention_quantized_size(&attn2, &[4.0, 12.0], &[true, true]).unwrap();
        let b = attention_quantized_size(&attn2, &[8.0, 8.0], &[true, true]).unwrap();
        assert_eq!(a, b);
        // pruned head contributes 0
        assert_eq!(
            attention_quantized_size(&attn2, &[8.0, 8.0], &[true, false]).unwrap(),
            attention_quantized_size(&attn, &[8.0], &[true]).unwrap()
        );
    }

    #[test]
    fn average_bit_depth_cases() {
        let sm = SizeModel {
            layers: vec![
                LayerDesc::Conv {
                    in_ch: 1,
                    out_h: 28,
                    out_w: 28,
                    out_ch: 2,
                    kh: 3,
                    kw: 3,
                },
                LayerDesc::Conv {
                    in_ch: 2,
                    out_h: 14,
                    out_w: 14,
                    out_ch: 2,
                    kh: 3,
                    kw: 3,
                },
            ],
        };
        let b1 = [4.0f32, 4.0];
        let b2 = [0.0f32, 0.0];
        let live = [true, true];
        let q = average_bit_depth(
            &sm,
            &[(&b1[..], &live[..]), (&b2[..], &live[..])],
        )
        .unwrap();
        assert_eq!(q, 3136.0);

        let empty = SizeModel { layers: vec![] };
        assert!(average_bit_depth(&empty, &[]).is_err());
    }

    #[test]
    fn model_bytes_cases() {
        // no quantized layers: P params at 4 bytes
        let sm = SizeModel { layers: vec![] };
        assert_eq!(model_bytes(&sm, &[], 1000), 4000.0);

        // one conv group of 16 elements at b=4: 8 bytes + 4 overhead
        let sm = SizeModel {
            layers: vec![LayerDesc::Conv {
                in_ch: 4,
                out_h: 1,
                out_w: 1,
                out_ch: 1,
                kh: 2,
                kw: 2,
            }],
        };
        let b = [4.0f32];
        let live = [true];
        assert_eq!(model_bytes(&sm, &[(&b[..], &live[..])], 0), 12.0);
    }
}
