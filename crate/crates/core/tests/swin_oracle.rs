mod common;

use rand::Rng;
use scunetpp_core::nn::{Init, ParamStore};
use scunetpp_core::swin::WindowAttention;
use scunetpp_core::Graph;

fn attention(seed: u64, rel_bias: bool) -> (ParamStore, WindowAttention) {
    let mut store = ParamStore::new();
    let att = WindowAttention::new(&mut Init::new(&mut store, common::rng(seed)), "att", 8, 2, 4, rel_bias).unwrap();
    let mut r = common::rng(seed + 1000);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
    }
    (store, att)
}

fn max_diff(seed: u64, shift: usize, rel_bias: bool) -> f64 {
    let (store, att) = attention(seed, rel_bias);
    let x = common::random(&[2, 8, 8, 8], seed + 2000);
    let g = Graph::new();
    let fast = att.forward(&store, &g, g.constant(x.clone()), shift).unwrap().value();
    let slow = common::sw_msa_bruteforce(&att, &store, &x, shift);
    fast.max_abs_diff(&slow).unwrap()
}

#[test]
fn shifted_window_attention_matches_group_oracle() {
    for seed in 0..20 {
        let d = max_diff(seed, 2, true);
        assert!(d < 1e-9, "seed {seed}: {d:e}");
    }
}

#[test]
fn shifted_window_attention_without_bias_matches_oracle() {
    for seed in 0..5 {
        assert!(max_diff(seed, 2, false) < 1e-9);
    }
}

#[test]
fn unshifted_window_attention_matches_oracle() {
    for seed in 0..5 {
        assert!(max_diff(seed, 0, true) < 1e-9);
    }
}

#[test]
fn a_shift_of_one_also_matches() {
    for seed in 0..3 {
        assert!(max_diff(seed, 1, true) < 1e-9);
    }
}
