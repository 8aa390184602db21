use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn init_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut s = ParamStore::new();
    let mut init = Init::new(&mut s, ChaCha8Rng::seed_from_u64(seed));
    init.trunc_normal(shape, 1.0)
}

fn set(store: &mut ParamStore, id: ParamId, t: Tensor) {
    store.get_mut(id).value = t;
}

fn eye(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

#[test]
fn patch_embed_shapes() {
    let (mut s, rng) = init_store(0);
    let mut init = Init::new(&mut s, rng);
    let pe = PatchEmbed::new(&mut init, "pe", 3, 24).unwrap();
    let g = Graph::new();
    let y = pe.forward(&s, &g, g.constant(Tensor::zeros(&[1, 3, 64, 64]))).unwrap();
    assert_eq!(y.shape(), vec![1, 16, 16, 24]);
    let err = pe.forward(&s, &g, g.constant(Tensor::zeros(&[1, 3, 30, 30]))).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn patch_embed_full_scale_shape() {
    let (mut s, rng) = init_store(0);
    let mut init = Init::new(&mut s, rng);
    let pe = PatchEmbed::new(&mut init, "pe", 3, 96).unwrap();
    let g = Graph::new();
    let y = pe.forward(&s, &g, g.constant(Tensor::zeros(&[1, 3, 224, 224]))).unwrap();
    assert_eq!(y.shape(), vec![1, 56, 56, 96]);
}

#[test]
fn patch_flattening_order_is_row_col_channel() {
    let (mut s, rng) = init_store(0);
    let mut init = Init::new(&mut s, rng);
    let pe = PatchEmbed::new(&mut init, "pe", 3, 48).unwrap();
    set(&mut s, pe.proj.weight, eye(48));
    let g = Graph::new();
    // value encodes (channel, row, col)
    let img = Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64);
    let y = pe.forward(&s, &g, g.constant(img)).unwrap().value();
    for r in 0..4 {
        for c in 0..4 {
            for ch in 0..3 {
                assert_eq!(y.data()[(r * 4 + c) * 3 + ch], (ch * 16 + r * 4 + c) as f64);
            }
        }
    }
}

#[test]
fn window_partition_counts_and_round_trip() {
    let g = Graph::new();
    let x = g.constant(random(&[1, 8, 8, 4], 1));
    let w = window_partition(x, 4).unwrap();
    assert_eq!(w.shape(), vec![4, 16, 4]);
    let back = window_reverse(w, 4, 1, 8, 8).unwrap();
    assert_eq!(back.value(), x.value());
    assert!(matches!(window_partition(x, 3), Err(Error::Dimension(_))));
}

#[test]
fn first_window_holds_top_left_block() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64));
    let w = window_partition(x, 2).unwrap().value();
    assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&w.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
}

#[test]
fn attention_preserves_shape() {
    let (mut s, rng) = init_store(2);
    let mut init = Init::new(&mut s, rng);
    let attn = WindowAttention::new(&mut init, "a", 8, 2, 4, true).unwrap();
    let g = Graph::new();
    let x = g.constant(random(&[1, 8, 8, 8], 3));
    assert_eq!(attn.forward(&s, &g, x, 0).unwrap().shape(), vec![1, 8, 8, 8]);
    assert_eq!(attn.forward(&s, &g, x, 2).unwrap().shape(), vec![1, 8, 8, 8]);
    assert!(matches!(attn.forward(&s, &g, x, 4), Err(Error::Config(_))));
}

#[test]
fn zero_query_key_gives_window_mean() {
    let (mut s, rng) = init_store(4);
    let mut init = Init::new(&mut s, rng);
    let c = 4;
    let attn = WindowAttention::new(&mut init, "a", c, 2, 4, false).unwrap();
    for lin in [&attn.q, &attn.k] {
        set(&mut s, lin.weight, Tensor::zeros(&[c, c]));
    }
    for lin in [&attn.v, &attn.o] {
        set(&mut s, lin.weight, eye(c));
    }
    for lin in [&attn.q, &attn.k, &attn.v, &attn.o] {
        set(&mut s, lin.bias.unwrap(), Tensor::zeros(&[c]));
    }
    let xv = random(&[1, 8, 8, c], 5);
    let g = Graph::new();
    let y = attn.forward(&s, &g, g.constant(xv.clone()), 0).unwrap().value();
    for wi in 0..2 {
        for wj in 0..2 {
            for ch in 0..c {
                let mut mean = 0.0;
                for r in 0..4 {
                    for q in 0..4 {
                        mean += xv.data()[((wi * 4 + r) * 8 + wj * 4 + q) * c + ch];
                    }
                }
                mean /= 16.0;
                for r in 0..4 {
                    for q in 0..4 {
                        let got = y.data()[((wi * 4 + r) * 8 + wj * 4 + q) * c + ch];
                        assert!((got - mean).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions_and_mask_is_hard() {
    let (mut s, rng) = init_store(6);
    let mut init = Init::new(&mut s, rng);
    let attn = WindowAttention::new(&mut init, "a", 8, 2, 4, false).unwrap();
    // larger weights so probabilities are far from uniform
    for lin in [&attn.q, &attn.k] {
        set(&mut s, lin.weight, random(&[8, 8], 7));
    }
    let g = Graph::new();
    let x = g.constant(random(&[2, 8, 8, 8], 8));
    let (_, probs) = attn.forward_with_probs(&s, &g, x, 2).unwrap();
    let p = probs.value();
    let mask = shift_mask(8, 8, 4, 2);
    let t = 16;
    for (row_idx, row) in p.data().chunks(t).enumerate() {
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(row.iter().all(|&v| v >= 0.0));
        // rows are [B, nW, heads, T] ordered; pick the mask of this window
        let win = (row_idx / (2 * t)) % 4;
        let query = row_idx % t;
        for (key, &v) in row.iter().enumerate() {
            if mask.data()[(win * t + query) * t + key] != 0.0 {
                assert!(v < 1e-30);
            }
        }
    }
}

#[test]
fn shift_mask_only_splits_wrapped_windows() {
    let m = shift_mask(8, 8, 4, 2);
    assert_eq!(m.shape(), &[4, 16, 16]);
    assert!(m.data()[..256].iter().all(|&v| v == 0.0));
    let last = &m.data()[3 * 256..];
    let blocked = last.iter().filter(|&&v| v == MASK_NEG).count();
    // four 2x2 regions of 4 tokens: 16·16 − 4·16 pairs are cross-region
    assert_eq!(blocked, 256 - 64);
}

#[test]
fn relative_bias_table_covers_all_offsets() {
    let idx = relative_bias_index(4, 1);
    let mut seen = vec![false; 49];
    idx.iter().for_each(|&i| seen[i] = true);
    assert!(seen.iter().all(|&b| b));
    // the diagonal maps to the zero offset (row 3, col 3)
    assert_eq!(idx[0], 3 * 7 + 3);
}

fn spec(dim: usize, heads: usize, resolution: usize, window: usize) -> BlockSpec {
    BlockSpec { dim, heads, resolution, window, mlp_ratio: MLP_RATIO, rel_bias: false }
}

#[test]
fn swin_block_shapes_and_zero_branch() {
    let (mut s, rng) = init_store(9);
    let mut init = Init::new(&mut s, rng);
    let blk = SwinBlock::new(&mut init, "b", spec(24, 2, 16, 4), true).unwrap();
    assert_eq!(blk.fc1.out_dim, 4 * 24);
    assert_eq!(blk.shift, 2);
    let xv = random(&[1, 16, 16, 24], 10);
    let g = Graph::new();
    assert_eq!(blk.forward(&s, &g, g.constant(xv.clone())).unwrap().shape(), vec![1, 16, 16, 24]);

    let ids: Vec<ParamId> = s.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = s.value(id).shape().to_vec();
        set(&mut s, id, Tensor::zeros(&shape));
    }
    let g = Graph::new();
    assert_eq!(blk.forward(&s, &g, g.constant(xv.clone())).unwrap().value(), xv);
}

#[test]
fn double_block_is_composition_and_validates_flags() {
    let (mut s, rng) = init_store(11);
    let mut init = Init::new(&mut s, rng);
    let db = DoubleSwinBlock::new(&mut init, "d", spec(24, 2, 16, 4)).unwrap();
    let xv = random(&[1, 16, 16, 24], 12);
    let g = Graph::new();
    let x = g.constant(xv);
    let y = db.forward(&s, &g, x).unwrap().value();
    let manual = db.second.forward(&s, &g, db.first.forward(&s, &g, x).unwrap()).unwrap().value();
    assert_eq!(y, manual);
    assert_eq!(y.shape(), &[1, 16, 16, 24]);

    let err = DoubleSwinBlock::from_blocks(db.second.clone(), db.first.clone()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn window_is_clamped_to_small_grids() {
    assert_eq!(effective_window(16, 4, true), (4, 2));
    assert_eq!(effective_window(4, 4, true), (4, 0));
    assert_eq!(effective_window(2, 4, true), (2, 0));
    assert_eq!(effective_window(56, 7, true), (7, 3));
}

#[test]
fn merge_and_expand_shape_algebra() {
    let (mut s, rng) = init_store(13);
    let mut init = Init::new(&mut s, rng);
    let merge = PatchMerge::new(&mut init, "m", 96).unwrap();
    let expand = PatchExpand::new(&mut init, "e", 192).unwrap();
    let big_expand = PatchExpand::new(&mut init, "e8", 768).unwrap();
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 56, 56, 96]));
    let merged = merge.forward(&s, &g, x).unwrap();
    assert_eq!(merged.shape(), vec![1, 28, 28, 192]);
    assert_eq!(expand.forward(&s, &g, merged).unwrap().shape(), vec![1, 56, 56, 96]);
    let deep = g.constant(Tensor::zeros(&[1, 7, 7, 768]));
    assert_eq!(big_expand.forward(&s, &g, deep).unwrap().shape(), vec![1, 14, 14, 384]);

    let odd = g.constant(Tensor::zeros(&[1, 3, 3, 8]));
    let small_merge = PatchMerge::new(&mut Init::new(&mut s, ChaCha8Rng::seed_from_u64(0)), "m8", 8).unwrap();
    assert!(matches!(small_merge.forward(&s, &g, odd), Err(Error::Dimension(_))));
    assert!(matches!(PatchExpand::new(&mut Init::new(&mut s, ChaCha8Rng::seed_from_u64(0)), "e3", 3), Err(Error::Dimension(_))));
}

#[test]
fn expand_rejects_odd_channels_at_runtime() {
    let (mut s, rng) = init_store(14);
    let mut init = Init::new(&mut s, rng);
    let expand = PatchExpand::new(&mut init, "e", 4).unwrap();
    let g = Graph::new();
    assert!(expand.forward(&s, &g, g.constant(Tensor::zeros(&[1, 4, 4, 3]))).is_err());
}

#[test]
fn merge_order_and_spread_are_inverse_rearrangements() {
    let g = Graph::new();
    let xv = Tensor::from_fn(&[1, 4, 4, 2], |i| i as f64);
    let x = g.constant(xv.clone());
    let merged = PatchMerge::parity_concat(x).unwrap();
    let m = merged.value();
    // position (0,0): blocks (0,0), (1,0), (0,1), (1,1) of the input
    let at = |r: usize, c: usize, ch: usize| xv.data()[(r * 4 + c) * 2 + ch];
    assert_eq!(&m.data()[..8], &[at(0, 0, 0), at(0, 0, 1), at(1, 0, 0), at(1, 0, 1), at(0, 1, 0), at(0, 1, 1), at(1, 1, 0), at(1, 1, 1)]);
    assert_eq!(spread_channels(merged, 2).unwrap().value(), xv);
}

#[test]
fn constant_input_merges_to_constant_output() {
    let (mut s, rng) = init_store(15);
    let mut init = Init::new(&mut s, rng);
    let merge = PatchMerge::new(&mut init, "m", 2).unwrap();
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 4, 4, 2], 0.7));
    let y = merge.forward(&s, &g, x).unwrap().value();
    for pos in y.data().chunks(4) {
        assert_eq!(pos, &y.data()[..4]);
    }
}

#[test]
fn final_expand_shapes() {
    let (mut s, rng) = init_store(16);
    let mut init = Init::new(&mut s, rng);
    let fe = FinalExpand::new(&mut init, "f", 24).unwrap();
    let fe96 = FinalExpand::new(&mut init, "f96", 96).unwrap();
    let g = Graph::new();
    let y = fe.forward(&s, &g, g.constant(Tensor::zeros(&[1, 16, 16, 24]))).unwrap();
    assert_eq!(y.shape(), vec![1, 64, 64, 24]);
    let y = fe96.forward(&s, &g, g.constant(Tensor::zeros(&[1, 56, 56, 96]))).unwrap();
    assert_eq!(y.shape(), vec![1, 224, 224, 96]);
}
