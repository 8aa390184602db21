//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scunetpp_core::metrics::BinaryMask;
use scunetpp_core::nn::{Linear, ParamStore};
use scunetpp_core::swin::WindowAttention;
use scunetpp_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

pub fn random_mask(h: usize, w: usize, density: f64, r: &mut ChaCha8Rng) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(density))
}

fn linear(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(lin.weight).data();
    let mut y: Vec<f64> = match lin.bias {
        Some(b) => store.value(b).data().to_vec(),
        None => vec![0.0; lin.out_dim],
    };
    for (i, xi) in x.iter().enumerate() {
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += xi * w[i * lin.out_dim + o];
        }
    }
    y
}

/// Shifted-window attention computed token by token. After a cyclic shift by
/// `s`, a token at grid position `p` sits at `(p − s) mod n`. Two tokens
/// attend to each other iff they share a window of the shifted grid and, on
/// each axis, either both or neither wrapped around the border.
pub fn sw_msa_bruteforce(att: &WindowAttention, store: &ParamStore, x: &Tensor, s: usize) -> Tensor {
    let sh = x.shape();
    let (b, h, wd, c) = (sh[0], sh[1], sh[2], sh[3]);
    let (w, heads) = (att.window, att.heads);
    let d = c / heads;
    let token = |bi: usize, r: usize, col: usize| -> &[f64] {
        let o = ((bi * h + r) * wd + col) * c;
        &x.data()[o..o + c]
    };
    let shifted = |r: usize, n: usize| (r + n - s) % n;
    let key = |r: usize, col: usize| {
        let (rs, cs) = (shifted(r, h), shifted(col, wd));
        (rs / w, cs / w, s > 0 && r < s, s > 0 && col < s)
    };
    let mut out = vec![0.0; x.numel()];
    for bi in 0..b {
        let proj = |lin: &Linear| -> Vec<Vec<f64>> {
            (0..h * wd).map(|p| linear(store, lin, token(bi, p / wd, p % wd))).collect()
        };
        let (q, k, v) = (proj(&att.q), proj(&att.k), proj(&att.v));
        for p in 0..h * wd {
            let (pr, pc) = (p / wd, p % wd);
            let group: Vec<usize> = (0..h * wd).filter(|&t| key(t / wd, t % wd) == key(pr, pc)).collect();
            let mut merged = vec![0.0; c];
            for hd in 0..heads {
                let logits: Vec<f64> = group
                    .iter()
                    .map(|&t| {
                        let dot: f64 = (0..d).map(|e| q[p][hd * d + e] * k[t][hd * d + e]).sum();
                        let mut l = dot / (d as f64).sqrt();
                        if let Some(table) = att.rel_bias {
                            let dr = shifted(pr, h) % w + w - 1 - shifted(t / wd, h) % w;
                            let dc = shifted(pc, wd) % w + w - 1 - shifted(t % wd, wd) % w;
                            l += store.value(table).data()[(dr * (2 * w - 1) + dc) * heads + hd];
                        }
                        l
                    })
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (&t, l) in group.iter().zip(&logits) {
                    let a = (l - m).exp() / z;
                    for e in 0..d {
                        merged[hd * d + e] += a * v[t][hd * d + e];
                    }
                }
            }
            let y = linear(store, &att.o, &merged);
            let o = ((bi * h + pr) * wd + pc) * c;
            out[o..o + c].copy_from_slice(&y);
        }
    }
    Tensor::new(sh, out).unwrap()
}

pub fn dsc_bruteforce(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let (mut inter, mut nx, mut ny) = (0usize, 0usize, 0usize);
    for (a, b) in x.data().iter().zip(y.data()) {
        inter += (*a && *b) as usize;
        nx += *a as usize;
        ny += *b as usize;
    }
    if nx + ny == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (nx + ny) as f64
    }
}

fn nearest(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    set.iter()
        .map(|q| {
            let (dr, dc) = (p.0 as f64 - q.0 as f64, p.1 as f64 - q.1 as f64);
            (dr * dr + dc * dc).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// All pooled directed nearest-neighbour distances, sorted.
pub fn pooled_distances(x: &BinaryMask, y: &BinaryMask) -> Vec<f64> {
    let (px, py) = (x.points(), y.points());
    let mut d: Vec<f64> = px.iter().map(|&p| nearest(p, &py)).chain(py.iter().map(|&p| nearest(p, &px))).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d
}

pub fn hausdorff_bruteforce(x: &BinaryMask, y: &BinaryMask) -> f64 {
    *pooled_distances(x, y).last().unwrap()
}

pub fn hd95_percentile_bruteforce(x: &BinaryMask, y: &BinaryMask) -> f64 {
    let d = pooled_distances(x, y);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, frac) = (pos as usize, pos.fract());
    if lo + 1 < d.len() {
        d[lo] * (1.0 - frac) + d[lo + 1] * frac
    } else {
        d[lo]
    }
}

/// Expected NHWC extents at encoder level `i`: `(H/2^(i+2), C·2^i)`.
pub fn level_shape(b: usize, img: usize, c: usize, i: usize) -> Vec<usize> {
    let res = img >> (i + 2);
    vec![b, res, res, c << i]
}
