//! Finite-difference verification of every differentiable primitive.
//!
//! Each op's tape backward is compared against central finite differences
//! (step 1e-3) of an independent f64 reference forward, on 20 seeds per
//! primitive, at points kept away from kinks. The f64 reference keeps the
//! difference quotient far below the 1e-2 relative / 1e-4 absolute tolerance.

use sdsc_core::quant::GroupMap;
use sdsc_core::tape::{NodeId, Tape};
use sdsc_core::tensor::{Rng, Tensor};

const H: f64 = 1e-3;
const REL: f64 = 1e-2;
const ABS: f64 = 1e-4;

fn rand_vec(n: usize, lo: f32, hi: f32, rng: &mut Rng) -> Vec<f32> {
    (0..n).map(|_| rng.range_f32(lo, hi)).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Compares tape gradients against central differences of `forward64`,
/// which maps the full f64 parameter set to the scalar loss.
fn check_grads<FB, F64>(
    params: &[Tensor],
    build: FB,
    forward64: F64,
    rel: f64,
    abs: f64,
    what: &str,
) where
    FB: Fn(&mut Tape, &[NodeId]) -> NodeId,
    F64: Fn(&[Vec<f64>]) -> f64,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids);
    assert_eq!(tape.shape(loss), &[1], "{}: loss must be scalar", what);
    let grads = tape.grad(loss).unwrap();

    let base: Vec<Vec<f64>> = params.iter().map(|p| to64(&p.data)).collect();
    // Consistency check: the f64 reference agrees with the f32 forward.
    // (Skipped for the quantizer, whose backward follows the smooth
    // surrogate rather than the floored forward.)
    if !what.contains("surrogate") {
        let l64 = forward64(&base);
        let l32 = tape.scalar_value(loss) as f64;
        assert!(
            (l64 - l32).abs() <= 1e-3 * l64.abs().max(1.0),
            "{}: reference forward {} disagrees with tape forward {}",
            what,
            l64,
            l32
        );
    }

    for (pi, p) in params.iter().enumerate() {
        let g = grads
            .get(ids[pi])
            .unwrap_or_else(|| panic!("{}: no grad for param {}", what, pi));
        for ei in 0..p.data.len() {
            let mut plus = base.clone();
            plus[pi][ei] += H;
            let mut minus = base.clone();
            minus[pi][ei] -= H;
            let fd = (forward64(&plus) - forward64(&minus)) / (2.0 * H);
            let gv = g[ei] as f64;
            let diff = (gv - fd).abs();
            let tol = abs.max(rel * gv.abs().max(fd.abs()));
            assert!(
                diff <= tol,
                "{}: param {} elem {}: grad {} vs fd {} (diff {} > tol {})",
                what,
                pi,
                ei,
                gv,
                fd,
                diff,
                tol
            );
        }
    }
}

/// Fixed per-test weighting to scalarize an op output.
fn loss_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed ^ 0xC0FFEE);
    (0..n).map(|_| rng.range_f32(-0.5, 0.5) as f64).collect()
}

fn weighted_sum_node(tape: &mut Tape, x: NodeId, w: &[f64]) -> NodeId {
    let shape = tape.shape(x).to_vec();
    let wf: Vec<f32> = w.iter().map(|v| *v as f32).collect();
    let wn = tape.constant(wf, shape);
    let prod = tape.mul(x, wn).unwrap();
    tape.sum(prod).unwrap()
}

fn dot(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[test]
fn fd_matmul_add_mul() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 100);
        let a = Tensor::new(vec![3, 4], rand_vec(12, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let b = Tensor::new(vec![4, 2], rand_vec(8, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let c = Tensor::new(vec![3, 2], rand_vec(6, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(6, seed);
        let w2 = w.clone();
        check_grads(
            &[a, b, c],
            move |tape, ids| {
                let mm = tape.matmul(ids[0], ids[1]).unwrap();
                let s = tape.add(mm, ids[2]).unwrap();
                let sq = tape.mul(s, s).unwrap();
                weighted_sum_node(tape, sq, &w2)
            },
            move |p| {
                let mm = matmul64(&p[0], &p[1], 3, 4, 2);
                let s: Vec<f64> = mm.iter().zip(&p[2]).map(|(x, y)| x + y).collect();
                let sq: Vec<f64> = s.iter().map(|x| x * x).collect();
                dot(&w, &sq)
            },
            REL,
            ABS,
            "matmul/add/mul",
        );
    }
}

#[test]
fn fd_matmul_chain_tight() {
    // Random 3x3 chain at rel 1e-3.
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 900);
        let a = Tensor::new(vec![3, 3], rand_vec(9, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let b = Tensor::new(vec![3, 3], rand_vec(9, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let c = Tensor::new(vec![3, 3], rand_vec(9, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(9, seed);
        let w2 = w.clone();
        check_grads(
            &[a, b, c],
            move |tape, ids| {
                let ab = tape.matmul(ids[0], ids[1]).unwrap();
                let abc = tape.matmul(ab, ids[2]).unwrap();
                weighted_sum_node(tape, abc, &w2)
            },
            move |p| {
                let ab = matmul64(&p[0], &p[1], 3, 3, 3);
                let abc = matmul64(&ab, &p[2], 3, 3, 3);
                dot(&w, &abc)
            },
            1e-3,
            1e-5,
            "matmul chain",
        );
    }
}

#[test]
fn fd_relu() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 200);
        let n = 35;
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let v = rng.range_f32(0.05, 1.0);
                if rng.next_f32() < 0.5 {
                    -v
                } else {
                    v
                }
            })
            .collect();
        let x = Tensor::new(vec![5, 7], data).unwrap().param();
        let w = loss_weights(n, seed);
        let w2 = w.clone();
        check_grads(
            &[x],
            move |tape, ids| {
                let y = tape.relu(ids[0]).unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let y: Vec<f64> = p[0].iter().map(|v| v.max(0.0)).collect();
                dot(&w, &y)
            },
            REL,
            ABS,
            "relu",
        );
    }
}

fn conv64(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    wid: usize,
    k: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; b * co * h * wid];
    for bb in 0..b {
        for o in 0..co {
            for oy in 0..h {
                for ox in 0..wid {
                    let mut acc = bias[o];
                    for ic in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wid as isize {
                                    continue;
                                }
                                acc += w[((o * ci + ic) * k + ky) * k + kx]
                                    * x[((bb * ci + ic) * h + iy as usize) * wid + ix as usize];
                            }
                        }
                    }
                    out[((bb * co + o) * h + oy) * wid + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn fd_conv2d() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 300);
        let (b, ci, co, h, wid, k) = (2, 2, 3, 6, 6, 3);
        let x = Tensor::new(vec![b, ci, h, wid], rand_vec(b * ci * h * wid, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let wt = Tensor::new(vec![co, ci, k, k], rand_vec(co * ci * k * k, -0.6, 0.6, &mut rng))
            .unwrap()
            .param();
        let bias = Tensor::new(vec![co], rand_vec(co, -0.2, 0.2, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(b * co * h * wid, seed);
        let w2 = w.clone();
        check_grads(
            &[x, wt, bias],
            move |tape, ids| {
                let y = tape
                    .conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, &[], &[])
                    .unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let y = conv64(&p[0], &p[1], &p[2], b, ci, co, h, wid, k, 1);
                dot(&w, &y)
            },
            REL,
            ABS,
            "conv2d",
        );
    }
}

#[test]
fn fd_maxpool() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 400);
        let n = 2 * 2 * 4 * 4;
        // Spread values so +-1e-3 never flips an argmax.
        let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - 1.5).collect();
        rng.shuffle(&mut vals);
        let x = Tensor::new(vec![2, 2, 4, 4], vals).unwrap().param();
        let w = loss_weights(2 * 2 * 2 * 2, seed);
        let w2 = w.clone();
        check_grads(
            &[x],
            move |tape, ids| {
                let y = tape.maxpool2x2(ids[0]).unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let mut out = Vec::new();
                for bc in 0..4 {
                    for oy in 0..2 {
                        for ox in 0..2 {
                            let mut best = f64::NEG_INFINITY;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    best =
                                        best.max(p[0][bc * 16 + (oy * 2 + dy) * 4 + ox * 2 + dx]);
                                }
                            }
                            out.push(best);
                        }
                    }
                }
                dot(&w, &out)
            },
            REL,
            ABS,
            "maxpool2x2",
        );
    }
}

#[test]
fn fd_batchnorm_train() {
    let (b, c, h, wd) = (4usize, 3usize, 2usize, 2usize);
    let n = b * h * wd;
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 500);
        let x = Tensor::new(vec![b, c, h, wd], rand_vec(b * c * h * wd, -2.0, 2.0, &mut rng))
            .unwrap()
            .param();
        let gamma = Tensor::new(vec![c], rand_vec(c, 0.5, 1.5, &mut rng))
            .unwrap()
            .param();
        let beta = Tensor::new(vec![c], rand_vec(c, -0.5, 0.5, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(b * c * h * wd, seed);
        let w2 = w.clone();
        check_grads(
            &[x, gamma, beta],
            move |tape, ids| {
                let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let eps = 1e-5f64;
                let mut out = vec![0.0; b * c * h * wd];
                for ch in 0..c {
                    let mut mean = 0.0;
                    for bb in 0..b {
                        for i in 0..h * wd {
                            mean += p[0][((bb * c) + ch) * h * wd + i];
                        }
                    }
                    mean /= n as f64;
                    let mut var = 0.0;
                    for bb in 0..b {
                        for i in 0..h * wd {
                            let d = p[0][((bb * c) + ch) * h * wd + i] - mean;
                            var += d * d;
                        }
                    }
                    var /= n as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for bb in 0..b {
                        for i in 0..h * wd {
                            let idx = ((bb * c) + ch) * h * wd + i;
                            out[idx] = p[1][ch] * (p[0][idx] - mean) * rstd + p[2][ch];
                        }
                    }
                }
                dot(&w, &out)
            },
            REL,
            ABS,
            "batchnorm",
        );
    }
}

#[test]
fn fd_layernorm() {
    let (rows, d) = (5usize, 6usize);
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 600);
        let x = Tensor::new(vec![rows, d], rand_vec(rows * d, -2.0, 2.0, &mut rng))
            .unwrap()
            .param();
        let gamma = Tensor::new(vec![d], rand_vec(d, 0.5, 1.5, &mut rng))
            .unwrap()
            .param();
        let beta = Tensor::new(vec![d], rand_vec(d, -0.5, 0.5, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(rows * d, seed);
        let w2 = w.clone();
        check_grads(
            &[x, gamma, beta],
            move |tape, ids| {
                let y = tape.layernorm(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let eps = 1e-5f64;
                let mut out = vec![0.0; rows * d];
                for r in 0..rows {
                    let row = &p[0][r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        out[r * d + j] = p[1][j] * (row[j] - mean) * rstd + p[2][j];
                    }
                }
                dot(&w, &out)
            },
            REL,
            ABS,
            "layernorm",
        );
    }
}

#[test]
fn fd_softmax_cross_entropy() {
    let (n, c) = (6usize, 5usize);
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 700);
        let logits = Tensor::new(vec![n, c], rand_vec(n * c, -2.0, 2.0, &mut rng))
            .unwrap()
            .param();
        let targets: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let t2 = targets.clone();
        check_grads(
            &[logits],
            move |tape, ids| tape.softmax_cross_entropy(ids[0], &t2).unwrap(),
            move |p| {
                let mut loss = 0.0;
                for i in 0..n {
                    let row = &p[0][i * c..(i + 1) * c];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    loss -= row[targets[i]] - mx - z.ln();
                }
                loss / n as f64
            },
            REL,
            ABS,
            "softmax_cross_entropy",
        );
    }
}

#[test]
fn fd_embedding() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 800);
        let (v, d) = (5usize, 4usize);
        let table = Tensor::new(vec![v, d], rand_vec(v * d, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let ids_v: Vec<usize> = (0..7).map(|_| rng.below(v)).collect();
        let ids2 = ids_v.clone();
        let w = loss_weights(7 * d, seed);
        let w2 = w.clone();
        check_grads(
            &[table],
            move |tape, ids| {
                let y = tape.embedding(ids[0], &ids2).unwrap();
                weighted_sum_node(tape, y, &w2)
            },
            move |p| {
                let mut out = Vec::new();
                for &id in &ids_v {
                    out.extend_from_slice(&p[0][id * d..(id + 1) * d]);
                }
                dot(&w, &out)
            },
            REL,
            ABS,
            "embedding",
        );
    }
}

#[test]
fn fd_attention_core() {
    // bmm_nt -> causal softmax -> bmm_nn against an f64 reference.
    let (b, t, dh) = (2usize, 3usize, 4usize);
    let scale = 1.0 / (dh as f64).sqrt();
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 1000);
        let q = Tensor::new(vec![b, t, dh], rand_vec(b * t * dh, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let k = Tensor::new(vec![b, t, dh], rand_vec(b * t * dh, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let v = Tensor::new(vec![b, t, dh], rand_vec(b * t * dh, -1.0, 1.0, &mut rng))
            .unwrap()
            .param();
        let w = loss_weights(b * t * dh, seed);
        let w2 = w.clone();
        check_grads(
            &[q, k, v],
            move |tape, ids| {
                let scores = tape.bmm_nt(ids[0], ids[1]).unwrap();
                let att = tape.causal_softmax(scores, scale as f32).unwrap();
                let ctx = tape.bmm_nn(att, ids[2]).unwrap();
                weighted_sum_node(tape, ctx, &w2)
            },
            move |p| {
                let mut out = vec![0.0; b * t * dh];
                for bb in 0..b {
                    for ti in 0..t {
                        let mut sc = vec![0.0; ti + 1];
                        for (j, scj) in sc.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for kk in 0..dh {
                                s += p[0][(bb * t + ti) * dh + kk] * p[1][(bb * t + j) * dh + kk];
                            }
                            *scj = s * scale;
                        }
                        let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                        for kk in 0..dh {
                            let mut acc = 0.0;
                            for (j, scj) in sc.iter().enumerate() {
                                acc += (scj - mx).exp() / z * p[2][(bb * t + j) * dh + kk];
                            }
                            out[(bb * t + ti) * dh + kk] = acc;
                        }
                    }
                }
                dot(&w, &out)
            },
            REL,
            ABS,
            "attention core",
        );
    }
}

#[test]
fn fd_quantize_surrogate() {
    // Tape backward vs central differences of the independent f64 surrogate
    // at rel 1e-3, away from clamp boundaries.
    let surrogate = |x: f64, b: f64, e: f64| -> f64 {
        if b <= 0.0 {
            return 0.0;
        }
        let s = e.exp2();
        let half = (b - 1.0).exp2();
        let y = (x / s).clamp(-half, half - 1.0);
        s * y
    };

    for seed in 0..20u64 {
        let mut rng = Rng::new(seed + 1200);
        let n = 9usize;
        let b0 = rng.range_f32(2.0, 6.0);
        let e0 = rng.range_f32(-2.0, 1.0);
        let half = ((b0 - 1.0) as f64).exp2();
        let s = (e0 as f64).exp2();
        let mut xs = Vec::new();
        for i in 0..n {
            let y_target = if i % 3 == 0 {
                rng.range_f32(half as f32 * 1.3, half as f32 * 3.0)
            } else if i % 3 == 1 {
                -rng.range_f32(half as f32 * 1.3, half as f32 * 3.0)
            } else {
                rng.range_f32(-half as f32 * 0.7, half as f32 * 0.7)
            };
            xs.push(y_target * s as f32);
        }
        let x = Tensor::new(vec![n], xs).unwrap().param();
        let bt = Tensor::new(vec![1], vec![b0]).unwrap().param();
        let et = Tensor::new(vec![1], vec![e0]).unwrap().param();
        let w = loss_weights(n, seed);
        let w2 = w.clone();
        check_grads(
            &[x, bt, et],
            move |tape, ids| {
                let q = tape
                    .quantize(ids[0], ids[1], ids[2], GroupMap::All { group: 0 })
                    .unwrap();
                weighted_sum_node(tape, q, &w2)
            },
            move |p| {
                let vals: Vec<f64> = p[0]
                    .iter()
                    .map(|x| surrogate(*x, p[1][0], p[2][0]))
                    .collect();
                dot(&w, &vals)
            },
            1e-3,
            ABS,
            "quantize surrogate",
        );
    }
}

#[test]
fn fd_size_penalty_exact() {
    // The size penalty is linear: tape gradients must equal the coefficients.
    for seed in 0..10u64 {
        let mut rng = Rng::new(seed + 1300);
        let n = 6usize;
        let b = Tensor::new(vec![n], rand_vec(n, 1.0, 12.0, &mut rng))
            .unwrap()
            .param();
        let coeffs: Vec<f32> = (0..n).map(|_| rng.range_f32(1.0, 100.0)).collect();
        let mut tape = Tape::new();
        let bn = tape.leaf(&b);
        let z = tape.size_penalty(bn, &coeffs).unwrap();
        let grads = tape.grad(z).unwrap();
        let g = grads.get(bn).unwrap();
        for i in 0..n {
            assert_eq!(g[i], coeffs[i]);
        }
    }
}
