//! Independent scalar-loop oracles shared by the integration tests.
#![allow(dead_code)]

use medmoe::ndtensor::check::grad_check;
use medmoe::ndtensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Sliding-window cross-correlation: for each output element the sum runs
/// over input channels (outer), kernel rows, then kernel columns, starting
/// from 0.0; out-of-bounds taps contribute `0.0 * k`.
pub fn conv2d_naive(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, w) = dims4(input);
    let (o, c2, kh, kw) = dims4(kernel);
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for bi in 0..b {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (x * stride + kx) as isize - pad as isize;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    input.at(&[bi, ci, iy as usize, ix as usize])
                                } else {
                                    0.0
                                };
                                s += v * kernel.at(&[oc, ci, ky, kx]);
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + x] = s;
                }
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out).unwrap()
}

pub fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Mean over rows i of −log(exp(cos(v_i,t_i)/τ) / Σ_j exp(cos(v_i,t_j)/τ)).
pub fn global_loss_oracle(v: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
    let b = v.len();
    let mut total = 0.0;
    for i in 0..b {
        let denom: f64 = (0..b).map(|j| (cos(&v[i], &t[j]) / tau).exp()).sum();
        total += -((cos(&v[i], &t[i]) / tau).exp() / denom).ln();
    }
    total / b as f64
}

/// Word-region attention for one sample: returns (a[N][M], c[N][D]).
pub fn word_region_oracle(tokens: &[Vec<f64>], regions: &[Vec<f64>], tau: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut att = Vec::new();
    let mut ctx = Vec::new();
    for t in tokens {
        let logits: Vec<f64> = regions
            .iter()
            .map(|v| t.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let a: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut c = vec![0.0; t.len()];
        for (aj, v) in a.iter().zip(regions) {
            for d in 0..c.len() {
                c[d] += aj * v[d];
            }
        }
        att.push(a);
        ctx.push(c);
    }
    (att, ctx)
}

/// Per-sample local loss normalised by the token count:
/// (1/N) Σ_i −log(exp(cos(c_i,t_i)/τ) / Σ_j exp(cos(c_i,t_j)/τ)).
pub fn local_loss_oracle(ctx: &[Vec<f64>], tokens: &[Vec<f64>], tau: f64) -> f64 {
    let n = tokens.len();
    let mut total = 0.0;
    for i in 0..n {
        let denom: f64 = (0..n).map(|j| (cos(&ctx[i], &tokens[j]) / tau).exp()).sum();
        total += -((cos(&ctx[i], &tokens[i]) / tau).exp() / denom).ln();
    }
    total / n as f64
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
        .collect()
}

pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

/// Largest relative finite-difference error of every differentiable op,
/// one entry per checked configuration.
pub fn op_gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(100 + seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> medmoe::Result<Var>| {
        out.push((name, grad_check(&inputs, 1e-5, 64, f).unwrap().max_rel_error));
    };
    // random weights make every scalar reduction depend on all entries
    let w4 = rand_tensor(&mut r, &[2, 3, 4, 4]);
    let wsum = move |g: &mut Graph, y: Var, w: &Tensor| {
        let wv = g.constant(w.shape(), w.data().to_vec())?;
        let p = g.mul(y, wv)?;
        g.sum(p)
    };

    check("add_broadcast", vec![rand_tensor(&mut r, &[2, 3, 4, 4]), rand_tensor(&mut r, &[1, 3, 1, 1])], &|g, v| {
        let y = g.add(v[0], v[1])?;
        wsum(g, y, &w4)
    });
    check("sub_mul", vec![rand_tensor(&mut r, &[2, 3, 4, 4]), rand_tensor(&mut r, &[2, 1, 4, 4])], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        let y = g.sub(y, v[0])?;
        wsum(g, y, &w4)
    });
    check("scale_relu_exp_log", vec![rand_tensor(&mut r, &[2, 3, 4, 4])], &|g, v| {
        let y = g.scale(v[0], 1.7)?;
        let y = g.relu(y)?;
        let e = g.exp(v[0])?;
        let l = g.log(e)?;
        let l = g.add_scalar(l, 0.3)?;
        let y = g.add(y, l)?;
        wsum(g, y, &w4)
    });
    check("mean_sum_axis", vec![rand_tensor(&mut r, &[2, 3, 4, 4])], &|g, v| {
        let y = g.sum_axis(v[0], 1)?;
        let y = g.mul(y, y)?;
        let m = g.mean_axis(v[0], 3)?;
        let m = g.mul(m, m)?;
        let a = g.mean(y)?;
        let b = g.sum(m)?;
        g.add(a, b)
    });
    check("matmul", vec![rand_tensor(&mut r, &[3, 5]), rand_tensor(&mut r, &[5, 4])], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("bmm_permute", vec![rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[2, 5, 4])], &|g, v| {
        let bt = g.transpose_last(v[1])?;
        let y = g.bmm(v[0], bt)?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (4, 0)] {
        let kh = if stride == 4 { 4 } else { 3 };
        let (ik, ok) = (rand_tensor(&mut r, &[2, 2, 8, 8]), rand_tensor(&mut r, &[3, 2, kh, kh]));
        check("conv2d", vec![ik, ok], &|g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad)?;
            let y = g.mul(y, y)?;
            g.sum(y)
        });
    }
    check("softmax", vec![rand_tensor(&mut r, &[2, 3, 4, 4])], &|g, v| {
        let y = g.softmax(v[0], 1)?;
        wsum(g, y, &w4)
    });
    check("bilinear_up", vec![rand_tensor(&mut r, &[2, 3, 2, 2])], &|g, v| {
        let y = g.bilinear_resize(v[0], 4, 4)?;
        wsum(g, y, &w4)
    });
    check("bilinear_down", vec![rand_tensor(&mut r, &[2, 3, 16, 12])], &|g, v| {
        let y = g.bilinear_resize(v[0], 4, 4)?;
        wsum(g, y, &w4)
    });
    check("concat_slice", vec![rand_tensor(&mut r, &[2, 1, 4, 4]), rand_tensor(&mut r, &[2, 2, 4, 4])], &|g, v| {
        let y = g.concat(&[v[0], v[1]], 1)?;
        let s = g.slice(y, 1, 1, 2)?;
        let s = g.mul(s, s)?;
        let t = g.sum(s)?;
        let u = wsum(g, y, &w4)?;
        g.add(t, u)
    });
    let stats = (Tensor::full(&[3], 0.2), Tensor::full(&[3], 0.7));
    for training in [true, false] {
        let inputs = vec![rand_tensor(&mut r, &[2, 3, 4, 4]), rand_tensor(&mut r, &[3]), rand_tensor(&mut r, &[3])];
        check("batch_norm2d", inputs, &|g, v| {
            let (y, _) = g.batch_norm2d(v[0], v[1], v[2], &stats.0, &stats.1, training)?;
            wsum(g, y, &w4)
        });
    }
    check("l2_normalize", vec![rand_tensor(&mut r, &[2, 3, 4, 4])], &|g, v| {
        let y = g.l2_normalize(v[0], 1)?;
        wsum(g, y, &w4)
    });
    check("cosine_matrix", vec![rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[5, 4])], &|g, v| {
        let y = g.cosine_similarity_matrix(v[0], v[1])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    check("gather_reshape", vec![rand_tensor(&mut r, &[4, 3])], &|g, v| {
        let y = g.gather(v[0], &[3, 0, 3, 1])?;
        let y = g.reshape(y, &[2, 6])?;
        let y = g.mul(y, y)?;
        g.sum(y)
    });
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 3 || i == 7).collect();
    check("softmax_cross_entropy", vec![rand_tensor(&mut r, &[3, 4])], &|g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 2], &[0.5, 0.25, 1.0], Some(&mask))
    });
    out
}

/// Σ_l β_l·F_l per location, then L2 normalisation of each D-vector.
pub fn fusion_oracle(per_scale: &[&[f64]], beta: &[f64], b: usize, d: usize, m: usize) -> Vec<f64> {
    let l = per_scale.len();
    let mut out = vec![0.0; b * m * d];
    for bi in 0..b {
        for p in 0..m {
            let mut v = vec![0.0; d];
            for (li, f) in per_scale.iter().enumerate() {
                let w = beta[(bi * l + li) * m + p];
                for (c, vc) in v.iter_mut().enumerate() {
                    *vc += w * f[(bi * d + c) * m + p];
                }
            }
            // a relu body can zero a whole location; normalisation clamps the norm there
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for c in 0..d {
                out[(bi * m + p) * d + c] = v[c] / n;
            }
        }
    }
    out
}
