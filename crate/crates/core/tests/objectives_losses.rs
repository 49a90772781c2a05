mod common;

use common::{flat, global_loss_oracle, local_loss_oracle, rng, unit_rows, word_region_oracle};
use medmoe::encoders::TextEncoding;
use medmoe::ndtensor::{Ctx, Graph, ParamStore, Tensor, Var};
use medmoe::objectives::{
    aux_loss, classification_loss, global_contrastive, local_contrastive, word_region_attention, AuxHead,
    LocalDenominator,
};
use medmoe::Error;
use rand::seq::SliceRandom;
use rand::Rng;

fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f64>) -> Var {
    g.leaf(Tensor::new(shape.to_vec(), data).unwrap()).unwrap()
}

fn text(g: &mut Graph, tokens: &[Vec<Vec<f64>>], n: usize, d: usize) -> TextEncoding {
    let b = tokens.len();
    let mut data = vec![0.0; b * n * d];
    // padding rows get a fixed unit vector so they are well defined but must stay inert
    for bi in 0..b {
        for i in 0..n {
            let row = &mut data[(bi * n + i) * d..(bi * n + i + 1) * d];
            match tokens[bi].get(i) {
                Some(t) => row.copy_from_slice(t),
                None => row[0] = 1.0,
            }
        }
    }
    let tv = leaf(g, &[b, n, d], data);
    let gv = leaf(g, &[b, d], flat(&tokens.iter().map(|t| t[0].clone()).collect::<Vec<_>>()));
    TextEncoding {
        tokens: tv,
        global: gv,
        valid_len: tokens.iter().map(Vec::len).collect(),
    }
}

#[test]
fn global_loss_anchors() {
    let mut r = rng(1);
    let mut g = Graph::new();
    let v = leaf(&mut g, &[1, 5], flat(&unit_rows(&mut r, 1, 5)));
    let t = leaf(&mut g, &[1, 5], flat(&unit_rows(&mut r, 1, 5)));
    let l = global_contrastive(&mut g, v, t, 0.07, false).unwrap();
    assert_eq!(g.data(l)[0], 0.0);

    for b in [2, 3, 8] {
        let v = leaf(&mut g, &[b, 5], flat(&unit_rows(&mut r, b, 5)));
        let one = unit_rows(&mut r, 1, 5);
        let t = leaf(&mut g, &[b, 5], flat(&vec![one[0].clone(); b]));
        let l = global_contrastive(&mut g, v, t, 0.07, false).unwrap();
        assert!((g.data(l)[0] - (b as f64).ln()).abs() < 1e-9);
    }

    let v = leaf(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let l = global_contrastive(&mut g, v, v, 1.0, false).unwrap();
    let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    assert!((g.data(l)[0] - want).abs() < 1e-12);
    assert!((g.data(l)[0] - 0.3133).abs() < 1e-4);
}

#[test]
fn global_loss_matches_oracle() {
    for case in 0..25 {
        let mut r = rng(10 + case);
        let b = r.gen_range(1..7);
        let d = r.gen_range(2..9);
        let tau = r.gen_range(0.05..2.0);
        let vr = unit_rows(&mut r, b, d);
        let tr = unit_rows(&mut r, b, d);
        let mut g = Graph::new();
        let v = leaf(&mut g, &[b, d], flat(&vr));
        let t = leaf(&mut g, &[b, d], flat(&tr));
        let l = global_contrastive(&mut g, v, t, tau, false).unwrap();
        assert!((g.data(l)[0] - global_loss_oracle(&vr, &tr, tau)).abs() < 1e-10);
        let s = global_contrastive(&mut g, v, t, tau, true).unwrap();
        let want = 0.5 * (global_loss_oracle(&vr, &tr, tau) + global_loss_oracle(&tr, &vr, tau));
        assert!((g.data(s)[0] - want).abs() < 1e-10);
    }
}

#[test]
fn global_loss_is_batch_permutation_invariant() {
    let mut r = rng(3);
    let (b, d) = (6, 4);
    let vr = unit_rows(&mut r, b, d);
    let tr = unit_rows(&mut r, b, d);
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(&mut r);
    let vp: Vec<_> = perm.iter().map(|&i| vr[i].clone()).collect();
    let tp: Vec<_> = perm.iter().map(|&i| tr[i].clone()).collect();
    let mut g = Graph::new();
    let (v1, t1) = (leaf(&mut g, &[b, d], flat(&vr)), leaf(&mut g, &[b, d], flat(&tr)));
    let (v2, t2) = (leaf(&mut g, &[b, d], flat(&vp)), leaf(&mut g, &[b, d], flat(&tp)));
    let a = global_contrastive(&mut g, v1, t1, 0.1, false).unwrap();
    let c = global_contrastive(&mut g, v2, t2, 0.1, false).unwrap();
    assert!((g.data(a)[0] - g.data(c)[0]).abs() < 1e-12);
}

#[test]
fn word_region_examples() {
    let mut r = rng(4);
    let d = 4;
    let toks = vec![unit_rows(&mut r, 3, d)];
    let mut g = Graph::new();
    let te = text(&mut g, &toks, 3, d);
    let region = unit_rows(&mut r, 1, d);
    let grid = leaf(&mut g, &[1, 1, d], region[0].clone());
    let att = word_region_attention(&mut g, &te, grid, 0.07).unwrap();
    assert!(g.data(att.a).iter().all(|&a| a == 1.0));
    for i in 0..3 {
        for k in 0..d {
            assert!((g.data(att.c)[i * d + k] - region[0][k]).abs() < 1e-15);
        }
    }

    // token along e0, regions in the e1..e3 subspace
    let toks = vec![vec![vec![1.0, 0.0, 0.0, 0.0]]];
    let te = text(&mut g, &toks, 1, d);
    let regions = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 0.6, 0.8], vec![0.0, 0.0, 0.0, 1.0]];
    let grid = leaf(&mut g, &[1, 3, d], flat(&regions));
    let att = word_region_attention(&mut g, &te, grid, 0.5).unwrap();
    for a in g.data(att.a) {
        assert!((a - 1.0 / 3.0).abs() < 1e-15);
    }
    for k in 0..d {
        let mean = regions.iter().map(|v| v[k]).sum::<f64>() / 3.0;
        assert!((g.data(att.c)[k] - mean).abs() < 1e-15);
    }

    let bad = leaf(&mut g, &[1, 3, d + 1], vec![0.1; 3 * (d + 1)]);
    assert!(matches!(word_region_attention(&mut g, &te, bad, 0.5), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn word_region_and_local_loss_match_oracles() {
    for case in 0..25 {
        let mut r = rng(40 + case);
        let b = r.gen_range(1..4);
        let n = r.gen_range(1..5);
        let m = r.gen_range(1..6);
        let d = r.gen_range(2..6);
        let tau = r.gen_range(0.05..1.5);
        let toks: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| {
                let len = r.gen_range(1..=n);
                unit_rows(&mut r, len, d)
            })
            .collect();
        let regions: Vec<Vec<Vec<f64>>> = (0..b).map(|_| unit_rows(&mut r, m, d)).collect();
        let mut g = Graph::new();
        let te = text(&mut g, &toks, n, d);
        let grid = leaf(&mut g, &[b, m, d], regions.iter().flat_map(|x| flat(x)).collect());
        let att = word_region_attention(&mut g, &te, grid, tau).unwrap();
        let mut want_loss = 0.0;
        for bi in 0..b {
            let (a, c) = word_region_oracle(&toks[bi], &regions[bi], tau);
            for i in 0..toks[bi].len() {
                let ra = &g.data(att.a)[(bi * n + i) * m..(bi * n + i + 1) * m];
                let rc = &g.data(att.c)[(bi * n + i) * d..(bi * n + i + 1) * d];
                assert!((ra.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                for j in 0..m {
                    assert!((ra[j] - a[i][j]).abs() < 1e-10);
                }
                for k in 0..d {
                    assert!((rc[k] - c[i][k]).abs() < 1e-10);
                }
            }
            want_loss += local_loss_oracle(&c, &toks[bi], tau);
        }
        want_loss /= b as f64;
        let l = local_contrastive(&mut g, &att, &te, tau, LocalDenominator::Tokens).unwrap();
        assert!((g.data(l)[0] - want_loss).abs() < 1e-10, "case {case}");
    }
}

#[test]
fn local_loss_anchors() {
    let mut r = rng(5);
    let d = 5;
    let toks = vec![unit_rows(&mut r, 1, d), unit_rows(&mut r, 1, d)];
    let mut g = Graph::new();
    let te = text(&mut g, &toks, 3, d);
    let grid = leaf(&mut g, &[2, 4, d], flat(&unit_rows(&mut r, 8, d)));
    let att = word_region_attention(&mut g, &te, grid, 0.07).unwrap();
    let l = local_contrastive(&mut g, &att, &te, 0.07, LocalDenominator::Tokens).unwrap();
    assert_eq!(g.data(l)[0], 0.0);

    let one = unit_rows(&mut r, 1, d);
    let toks = vec![vec![one[0].clone(); 4]];
    let te = text(&mut g, &toks, 6, d);
    let grid = leaf(&mut g, &[1, 4, d], flat(&unit_rows(&mut r, 4, d)));
    let att = word_region_attention(&mut g, &te, grid, 0.07).unwrap();
    let l = local_contrastive(&mut g, &att, &te, 0.07, LocalDenominator::Tokens).unwrap();
    assert!((g.data(l)[0] - 4f64.ln()).abs() < 1e-9);

    let mut empty = te.clone();
    empty.valid_len = vec![0];
    assert!(matches!(
        local_contrastive(&mut g, &att, &empty, 0.07, LocalDenominator::Tokens),
        Err(Error::EmptyReport { sample: 0 })
    ));
    assert!(matches!(
        local_contrastive(&mut g, &att, &te, -1.0, LocalDenominator::Tokens),
        Err(Error::InvalidTemperature(_))
    ));
}

#[test]
fn padding_content_does_not_change_local_loss() {
    let mut r = rng(6);
    let (d, n) = (4, 5);
    let toks = vec![unit_rows(&mut r, 2, d), unit_rows(&mut r, 5, d)];
    let regions = flat(&unit_rows(&mut r, 6, d));
    let mut out = Vec::new();
    for noise in [0.0, 3.0] {
        let mut g = Graph::new();
        let te = text(&mut g, &toks, n, d);
        let mut tv = g.value(te.tokens).clone();
        for i in 2..n {
            for k in 0..d {
                tv.data_mut()[i * d + k] += noise * (k as f64 + 1.0);
            }
        }
        let te = TextEncoding {
            tokens: g.leaf(tv).unwrap(),
            ..te
        };
        let grid = leaf(&mut g, &[2, 3, d], regions.clone());
        let att = word_region_attention(&mut g, &te, grid, 0.2).unwrap();
        for den in [LocalDenominator::Tokens, LocalDenominator::Batch] {
            let l = local_contrastive(&mut g, &att, &te, 0.2, den).unwrap();
            out.push(g.data(l)[0]);
        }
    }
    assert_eq!(out[0], out[2]);
    assert_eq!(out[1], out[3]);
}

#[test]
fn local_loss_is_token_permutation_invariant() {
    let mut r = rng(7);
    let d = 4;
    let toks = unit_rows(&mut r, 5, d);
    let regions = flat(&unit_rows(&mut r, 3, d));
    let mut perm: Vec<usize> = (0..5).collect();
    perm.shuffle(&mut r);
    let permuted: Vec<_> = perm.iter().map(|&i| toks[i].clone()).collect();
    let mut vals = Vec::new();
    for t in [toks, permuted] {
        let mut g = Graph::new();
        let te = text(&mut g, &[t], 5, d);
        let grid = leaf(&mut g, &[1, 3, d], regions.clone());
        let att = word_region_attention(&mut g, &te, grid, 0.3).unwrap();
        let l = local_contrastive(&mut g, &att, &te, 0.3, LocalDenominator::Tokens).unwrap();
        vals.push(g.data(l)[0]);
    }
    assert!((vals[0] - vals[1]).abs() < 1e-12);
}

#[test]
fn batch_denominator_matches_oracle() {
    let mut r = rng(8);
    let d = 3;
    let toks = vec![unit_rows(&mut r, 2, d), unit_rows(&mut r, 3, d)];
    let regions: Vec<Vec<Vec<f64>>> = (0..2).map(|_| unit_rows(&mut r, 4, d)).collect();
    let mut g = Graph::new();
    let te = text(&mut g, &toks, 3, d);
    let grid = leaf(&mut g, &[2, 4, d], regions.iter().flat_map(|x| flat(x)).collect());
    let att = word_region_attention(&mut g, &te, grid, 0.5).unwrap();
    let l = local_contrastive(&mut g, &att, &te, 0.5, LocalDenominator::Batch).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let all: Vec<&Vec<f64>> = toks.iter().flatten().collect();
    let mut want = 0.0;
    for bi in 0..2 {
        let (_, c) = word_region_oracle(&toks[bi], &regions[bi], 0.5);
        let mut s = 0.0;
        for (i, ci) in c.iter().enumerate() {
            let denom: f64 = all.iter().map(|t| (cos(ci, t) / 0.5).exp()).sum();
            s += -((cos(ci, &toks[bi][i]) / 0.5).exp() / denom).ln();
        }
        want += s / toks[bi].len() as f64;
    }
    want /= 2.0;
    assert!((g.data(l)[0] - want).abs() < 1e-10);
}

#[test]
fn lower_temperature_sharpens_attention() {
    let mut r = rng(9);
    let d = 4;
    let toks = vec![unit_rows(&mut r, 3, d)];
    let regions = flat(&unit_rows(&mut r, 5, d));
    let mut prev = [0.0; 3];
    for tau in [1.0, 0.5, 0.1] {
        let mut g = Graph::new();
        let te = text(&mut g, &toks, 3, d);
        let grid = leaf(&mut g, &[1, 5, d], regions.clone());
        let att = word_region_attention(&mut g, &te, grid, tau).unwrap();
        for i in 0..3 {
            let mx = g.data(att.a)[i * 5..(i + 1) * 5].iter().cloned().fold(0.0, f64::max);
            assert!(mx >= prev[i]);
            prev[i] = mx;
        }
    }
}

#[test]
fn aux_loss_examples() {
    let mut r = rng(11);
    let head = AuxHead::new("aux", 6, 4).unwrap();
    let mut store = ParamStore::new();
    head.init(&mut store, &mut r).unwrap();
    store.get_mut("aux.w").unwrap().data_mut().fill(0.0);
    let mut ctx = Ctx::new(&store, true);
    let t = ctx.g.leaf(Tensor::new(vec![3, 6], flat(&unit_rows(&mut r, 3, 6))).unwrap()).unwrap();
    let l = aux_loss(&mut ctx, t, &head, &[0, 3, 1]).unwrap();
    assert!((ctx.g.data(l)[0] - 4f64.ln()).abs() < 1e-9);
    assert!(matches!(
        aux_loss(&mut ctx, t, &head, &[0, 4, 1]),
        Err(Error::LabelOutOfRange { label: 4, classes: 4 })
    ));
    assert!(AuxHead::new("aux", 6, 1).is_err());

    let mut g = Graph::new();
    let mut prev = f64::INFINITY;
    for scale in [10.0, 20.0] {
        let logits = leaf(&mut g, &[2, 3], vec![scale, 0.0, 0.0, 0.0, 0.0, scale]);
        let l = classification_loss(&mut g, logits, &[0, 2]).unwrap();
        assert!(g.data(l)[0] < prev);
        prev = g.data(l)[0];
    }
    assert!(prev < 1e-8);

    let logits = leaf(&mut g, &[2, 2], vec![1.0, 2.0, 0.5, -0.5]);
    let l = classification_loss(&mut g, logits, &[1, 1]).unwrap();
    let ce0 = -(2f64.exp() / (1f64.exp() + 2f64.exp())).ln();
    let ce1 = -((-0.5f64).exp() / (0.5f64.exp() + (-0.5f64).exp())).ln();
    assert!((g.data(l)[0] - 0.5 * (ce0 + ce1)).abs() < 1e-12);
}
