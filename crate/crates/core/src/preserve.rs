//! Preservation-set construction: saliency (class-activation maps),
//! uncertainty sampling (predictive entropy), and cluster-based diversity
//! (k-means medoids). The set is built once on a warmed-up model and frozen;
//! during compression it serves as the guard that triggers precision
//! restoration.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{evaluate_on, EvalMetrics, Model, Phase};
use crate::tape::Tape;
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Saliency,
    Uncertainty,
    Diversity,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Saliency => "saliency",
            Provenance::Uncertainty => "uncertainty",
            Provenance::Diversity => "diversity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "saliency" => Some(Provenance::Saliency),
            "uncertainty" => Some(Provenance::Uncertainty),
            "diversity" => Some(Provenance::Diversity),
            _ => None,
        }
    }
}

/// Immutable set of training-sample indices with per-index provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservationSet {
    /// Sorted by index, no duplicates.
    pub entries: Vec<(usize, Provenance)>,
    pub rho: f32,
    pub seed: u64,
}

impl PreservationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.entries.iter().filter(|(_, q)| *q == p).count()
    }

    /// Plain-text form: `rho=<value>,seed=<value>` then one `index,provenance`
    /// line per sample.
    pub fn to_text(&self) -> String {
        let mut s = format!("rho={},seed={}\n", self.rho, self.seed);
        for (i, p) in &self.entries {
            s.push_str(&format!("{},{}\n", i, p.as_str()));
        }
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid {
            what: "empty preservation-set file".into(),
        })?;
        let mut rho = None;
        let mut seed = None;
        for part in header.split(',') {
            if let Some(v) = part.strip_prefix("rho=") {
                rho = v.parse::<f32>().ok();
            } else if let Some(v) = part.strip_prefix("seed=") {
                seed = v.parse::<u64>().ok();
            }
        }
        let (rho, seed) = match (rho, seed) {
            (Some(r), Some(s)) => (r, s),
            _ => {
                return Err(Error::Invalid {
                    what: format!("bad preservation-set header: {}", header),
                })
            }
        };
        let mut entries = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (idx, prov) = line.split_once(',').ok_or_else(|| Error::Invalid {
                what: format!("bad preservation-set line: {}", line),
            })?;
            let idx: usize = idx.parse().map_err(|_| Error::Invalid {
                what: format!("bad index: {}", line),
            })?;
            let prov = Provenance::parse(prov).ok_or_else(|| Error::Invalid {
                what: format!("bad provenance: {}", line),
            })?;
            entries.push((idx, prov));
        }
        Ok(PreservationSet { entries, rho, seed })
    }
}

// ── Scores ──────────────────────────────────────────────────────────────

/// Per-sample saliency: gradient of the true-class logit (CNN) or summed
/// correct-next-token logits (decoder) with respect to the target feature
/// maps (last conv output / last block output); channel weights are the
/// spatial (token) mean of the gradients; the map is relu(sum w_c * A_c); the
/// score is the mean of the map's top 10% values.
pub fn saliency_scores(model: &Model, data: &Dataset, quantized: bool) -> Result<Vec<f32>> {
    if !model.trained() {
        return Err(Error::NotWarmedUp);
    }
    let n = data.len();
    let ids: Vec<usize> = (0..n).collect();
    let mut scores = Vec::with_capacity(n);
    for chunk in ids.chunks(64) {
        let mut tape = Tape::new();
        let fw = model.forward_batch(&mut tape, data, chunk, Phase::Eval, quantized)?;
        // Score node: sum over rows of the target-class logit.
        let lsh = tape.shape(fw.logits).to_vec();
        let classes = lsh[1];
        let mut onehot = vec![0.0f32; lsh[0] * classes];
        for (r, &t) in fw.targets.iter().enumerate() {
            onehot[r * classes + t] = 1.0;
        }
        let oh = tape.constant(onehot, lsh);
        let picked = tape.mul(fw.logits, oh)?;
        let score_node = tape.sum(picked)?;
        let grads = tape.grad(score_node)?;
        let gfeat = grads.get(fw.feature).ok_or_else(|| Error::Invalid {
            what: "no gradient reached the saliency target layer".into(),
        })?;
        let act = tape.data(fw.feature);
        let fsh = tape.shape(fw.feature);
        // (B, C, H, W) for the CNN; (B, T, D) treated as positions x channels.
        let (b, channels, positions, channel_major) = match fsh.len() {
            4 => (fsh[0], fsh[1], fsh[2] * fsh[3], true),
            3 => (fsh[0], fsh[2], fsh[1], false),
            _ => {
                return Err(Error::Invalid {
                    what: format!("unexpected feature shape {:?}", fsh),
                })
            }
        };
        let top_k = (positions as f32 * 0.1).ceil().max(1.0) as usize;
        for s in 0..b {
            let at = |c: usize, p: usize| -> (f32, f32) {
                let idx = if channel_major {
                    (s * channels + c) * positions + p
                } else {
                    (s * positions + p) * channels + c
                };
                (act[idx], gfeat[idx])
            };
            let mut weights = vec![0.0f32; channels];
            for (c, w) in weights.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for p in 0..positions {
                    acc += at(c, p).1;
                }
                *w = acc / positions as f32;
            }
            let mut map = vec![0.0f32; positions];
            for (p, m) in map.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (c, w) in weights.iter().enumerate() {
                    acc += w * at(c, p).0;
                }
                *m = acc.max(0.0);
            }
            map.sort_by(|x, y| y.total_cmp(x));
            let score = map[..top_k].iter().sum::<f32>() / top_k as f32;
            scores.push(score);
        }
    }
    Ok(scores)
}

/// Predictive entropy of the output distribution: -sum p ln p over classes
/// (CNN) or the mean per-position next-token entropy (decoder).
pub fn uncertainty_scores(model: &Model, data: &Dataset, quantized: bool) -> Result<Vec<f32>> {
    let n = data.len();
    let ids: Vec<usize> = (0..n).collect();
    let mut scores = Vec::with_capacity(n);
    for chunk in ids.chunks(64) {
        let mut tape = Tape::new();
        let fw = model.forward_batch(&mut tape, data, chunk, Phase::Eval, quantized)?;
        let logits = tape.data(fw.logits);
        let lsh = tape.shape(fw.logits);
        let (rows, classes) = (lsh[0], lsh[1]);
        let rows_per_sample = rows / chunk.len();
        let mut row_ent = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &logits[r * classes..(r + 1) * classes];
            row_ent[r] = entropy_of_logits(row);
        }
        for s in 0..chunk.len() {
            let slice = &row_ent[s * rows_per_sample..(s + 1) * rows_per_sample];
            scores.push(slice.iter().sum::<f32>() / rows_per_sample as f32);
        }
    }
    Ok(scores)
}

/// Entropy of softmax(logits) in nats.
pub fn entropy_of_logits(row: &[f32]) -> f32 {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut z = 0.0f64;
    for v in row {
        z += ((v - mx) as f64).exp();
    }
    let mut h = 0.0f64;
    for v in row {
        let p = ((v - mx) as f64).exp() / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h as f32
}

/// Per-sample penultimate feature vectors for diversity clustering: the
/// flattened pre-classifier features (CNN) or the final-norm output averaged
/// over positions (decoder).
pub fn penultimate_features(
    model: &Model,
    data: &Dataset,
    ids: &[usize],
    quantized: bool,
) -> Result<(Vec<f32>, usize)> {
    let mut feats = Vec::new();
    let mut dim = 0usize;
    for chunk in ids.chunks(64) {
        let mut tape = Tape::new();
        let fw = model.forward_batch(&mut tape, data, chunk, Phase::Eval, quantized)?;
        let d = tape.data(fw.penultimate);
        let sh = tape.shape(fw.penultimate);
        let (rows, width) = (sh[0], sh[1]);
        dim = width;
        let rows_per_sample = rows / chunk.len();
        if rows_per_sample == 1 {
            feats.extend_from_slice(d);
        } else {
            for s in 0..chunk.len() {
                for j in 0..width {
                    let mut acc = 0.0f32;
                    for r in 0..rows_per_sample {
                        acc += d[(s * rows_per_sample + r) * width + j];
                    }
                    feats.push(acc / rows_per_sample as f32);
                }
            }
        }
    }
    Ok((feats, dim))
}

/// K-means (50 iterations, seeded init from distinct samples) followed by
/// medoid extraction: the member closest to each centroid, ties resolved to
/// the lowest id. Returns k sample positions (indices into `0..n`).
pub fn diversity_medoids(
    features: &[f32],
    dim: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let n = if dim == 0 { 0 } else { features.len() / dim };
    if k < 1 {
        return Err(Error::Invalid {
            what: "diversity_medoids needs k >= 1".into(),
        });
    }
    if k > n {
        return Err(Error::Invalid {
            what: format!("k = {} exceeds {} samples", k, n),
        });
    }
    let dist2 = |a: &[f32], b: &[f32]| -> f32 {
        let mut s = 0.0f32;
        for i in 0..dim {
            let d = a[i] - b[i];
            s += d * d;
        }
        s
    };
    let feat = |i: usize| &features[i * dim..(i + 1) * dim];

    let init = rng.choose_distinct(n, k);
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);
    for &i in &init {
        centroids.extend_from_slice(feat(i));
    }
    let mut assign = vec![0usize; n];
    for _ in 0..50 {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut bd = f32::INFINITY;
            for c in 0..k {
                let d = dist2(feat(i), &centroids[c * dim..(c + 1) * dim]);
                if d < bd {
                    bd = d;
                    best = c;
                }
            }
            *a = best;
        }
        let mut sums = vec![0.0f32; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..dim {
                sums[a * dim + j] += feat(i)[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f32;
                }
            }
            // empty clusters keep their previous centroid
        }
    }

    let mut medoids = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    for c in 0..k {
        let centroid = &centroids[c * dim..(c + 1) * dim];
        let mut best: Option<usize> = None;
        let mut bd = f32::INFINITY;
        for (i, &a) in assign.iter().enumerate() {
            if a != c || taken[i] {
                continue;
            }
            let d = dist2(feat(i), centroid);
            if d < bd {
                bd = d;
                best = Some(i);
            }
        }
        let chosen = best.unwrap_or_else(|| {
            // empty cluster: globally nearest unchosen sample
            let mut bi = 0usize;
            let mut bd = f32::INFINITY;
            for i in 0..n {
                if taken[i] {
                    continue;
                }
                let d = dist2(feat(i), centroid);
                if d < bd {
                    bd = d;
                    bi = i;
                }
            }
            bi
        });
        taken[chosen] = true;
        medoids.push(chosen);
    }
    Ok(medoids)
}

// ── Set construction ────────────────────────────────────────────────────

/// ceil(frac * n) with f32 representation noise snapped away, so that e.g.
/// rho = 0.1 (stored as 0.100000001...) times 60 yields 6, not 7.
pub fn ceil_fraction(frac: f32, n: usize) -> usize {
    let prod = frac as f64 * n as f64;
    (prod - 1e-6 * (n.max(1) as f64)).ceil().max(0.0) as usize
}

fn floor_fraction(frac: f32, n: usize) -> usize {
    let prod = frac as f64 * n as f64;
    (prod + 1e-6 * (n.max(1) as f64)).floor().max(0.0) as usize
}

/// Builds the preservation set: top quota_s*m by saliency, then top
/// quota_u*m by uncertainty among the rest, then k-means medoids over the
/// remainder for diversity. m = ceil(rho * n).
pub fn build_preservation_set(
    model: &Model,
    data: &Dataset,
    rho: f32,
    quotas: (f32, f32, f32),
    seed: u64,
    quantized: bool,
) -> Result<PreservationSet> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Invalid {
            what: format!("rho must be in (0, 1], got {}", rho),
        });
    }
    let qsum = quotas.0 + quotas.1 + quotas.2;
    if (qsum - 1.0).abs() > 1e-9 {
        return Err(Error::BadQuotas([quotas.0, quotas.1, quotas.2]));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let m = ceil_fraction(rho, n);
    let n_s = floor_fraction(quotas.0, m);
    let n_u = floor_fraction(quotas.1, m);
    let n_d = m - n_s - n_u;

    let mut chosen: Vec<(usize, Provenance)> = Vec::with_capacity(m);
    let mut in_set = vec![false; n];

    if n_s > 0 {
        let sal = saliency_scores(model, data, quantized)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| sal[b].total_cmp(&sal[a]).then(a.cmp(&b)));
        for &i in order.iter().take(n_s) {
            chosen.push((i, Provenance::Saliency));
            in_set[i] = true;
        }
    }
    if n_u > 0 {
        let unc = uncertainty_scores(model, data, quantized)?;
        let mut order: Vec<usize> = (0..n).filter(|&i| !in_set[i]).collect();
        order.sort_by(|&a, &b| unc[b].total_cmp(&unc[a]).then(a.cmp(&b)));
        let picks: Vec<usize> = order.iter().take(n_u).copied().collect();
        for i in picks {
            chosen.push((i, Provenance::Uncertainty));
            in_set[i] = true;
        }
    }
    if n_d > 0 {
        let pool: Vec<usize> = (0..n).filter(|&i| !in_set[i]).collect();
        let (feats, dim) = penultimate_features(model, data, &pool, quantized)?;
        let mut rng = Rng::new(seed);
        let meds = diversity_medoids(&feats, dim, n_d, &mut rng)?;
        for p in meds {
            chosen.push((pool[p], Provenance::Diversity));
            in_set[pool[p]] = true;
        }
    }
    chosen.sort_by_key(|(i, _)| *i);
    debug_assert_eq!(chosen.len(), m);
    Ok(PreservationSet {
        entries: chosen,
        rho,
        seed,
    })
}

/// Loss/accuracy over the preservation set on the current model state (the
/// differentiable counterpart inside the composite loss is assembled by the
/// trainer from a sub-batch).
pub fn preservation_metrics(
    model: &Model,
    data: &Dataset,
    pset: &PreservationSet,
    quantized: bool,
) -> Result<EvalMetrics> {
    if pset.is_empty() {
        return Err(Error::EmptyPreservationSet);
    }
    evaluate_on(model, data, &pset.indices(), quantized)
}
