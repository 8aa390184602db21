//! Finite-difference gradient suite over every differentiable op, the
//! composite layers and a small end-to-end model.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bottleneck::CnnBottleneck;
use crate::error::Result;
use crate::fusion::FuseNode;
use crate::metrics::BinaryMask;
use crate::model::{Model, ModelConfig};
use crate::nn::{Init, Mode, ParamStore};
use crate::swin::{BlockSpec, DoubleSwinBlock, FinalExpand, PatchEmbed, PatchExpand, PatchMerge, SwinBlock, WindowAttention};
use crate::tensor::gradcheck::{finite_diff_grad, relative_error};
use crate::tensor::{Graph, Tensor, Var};
use crate::trainer::{one_hot, seg_loss};

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const H_OP: f64 = 1e-6;
const MODEL_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.tol
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Ops,
    Layers,
    Model,
    Full,
}

impl std::str::FromStr for Level {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Level::Ops),
            "layers" => Ok(Level::Layers),
            "model" => Ok(Level::Model),
            "full" => Ok(Level::Full),
            _ => Err(crate::Error::Usage(format!("unknown gradcheck level {s:?}; expected ops, layers, model or full"))),
        }
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ salt)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values in `[−2, 2]` kept away from the ReLU kink.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = r.gen_range(0.05..2.0);
        if r.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

type OpFn<'a> = dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + 'a;

/// Checks `d/dx sum(f(x)·R)` for every input against central differences.
pub fn check_op(name: &str, seed: u64, inputs: Vec<Tensor>, f: &OpFn<'_>) -> Result<Check> {
    let weights = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = f(&g, &vars)?.shape();
        let mut r = rng(seed, 0x5eed);
        uniform(&shape, -1.0, 1.0, &mut r)
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars).expect("forward succeeded once");
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = f(&g, &vars)?.mul(g.constant(weights.clone()))?.sum()?;
    let grads = g.backward(loss)?;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (i, v) in vars.iter().enumerate() {
        let a = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        analytic.extend_from_slice(a.data());
        let n = finite_diff_grad(
            |t| {
                let mut xs = inputs.clone();
                xs[i] = t.clone();
                eval(&xs)
            },
            &inputs[i],
            H_OP,
        );
        numeric.extend_from_slice(n.data());
    }
    Ok(Check { name: name.into(), seed, rel_err: relative_error(&analytic, &numeric), tol: OP_TOL })
}

type ModuleFn<'a> = dyn for<'g> Fn(&ParamStore, &'g Graph, Var<'g>) -> Result<Var<'g>> + 'a;

/// Input gradient by full central differences, parameter gradient by
/// directional derivatives along random directions.
pub fn check_module(name: &str, seed: u64, store: &ParamStore, x: &Tensor, f: &ModuleFn<'_>) -> Result<Check> {
    let weights = {
        let g = Graph::new();
        let shape = f(store, &g, g.constant(x.clone()))?.shape();
        uniform(&shape, -1.0, 1.0, &mut rng(seed, 0x5eed))
    };
    let eval = |s: &ParamStore, x: &Tensor| -> f64 {
        let g = Graph::new();
        let out = f(s, &g, g.constant(x.clone())).expect("forward succeeded once");
        out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let g = Graph::new();
    let xv = g.input(x.clone(), true);
    let loss = f(store, &g, xv)?.mul(g.constant(weights.clone()))?.sum()?;
    let grads = g.backward(loss)?;
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.accumulate(&g, &grads)?;

    let mut analytic = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())).into_data();
    let mut numeric = finite_diff_grad(|t| eval(store, t), x, H_OP).into_data();
    let (a, n) = directional_params(&with_grads, seed, 3, &[1e-5, H_OP, 1e-7], |s| eval(s, x));
    analytic.extend(a);
    numeric.extend(n);
    Ok(Check { name: name.into(), seed, rel_err: relative_error(&analytic, &numeric), tol: OP_TOL })
}

/// `(analytic, numeric)` directional derivatives of `loss` over the trainable
/// parameters of `store`, whose `grad` fields hold the analytic gradient.
fn directional_params(
    store: &ParamStore,
    seed: u64,
    directions: usize,
    steps: &[f64],
    loss: impl Fn(&ParamStore) -> f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed, 0xd1);
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..directions {
        let dirs: Vec<Option<Tensor>> = store
            .iter()
            .map(|(_, p)| p.trainable.then(|| Tensor::from_fn(p.value.shape(), |_| r.sample(StandardNormal))))
            .collect();
        let dot: f64 = store
            .iter()
            .zip(&dirs)
            .filter_map(|((_, p), d)| d.as_ref().map(|d| (p, d)))
            .filter_map(|(p, d)| p.grad.as_ref().map(|gr| gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()))
            .sum();
        let shifted = |t: f64| {
            let mut s = store.clone();
            for (p, d) in s.iter_mut().zip(&dirs) {
                if let Some(d) = d {
                    p.value.data_mut().iter_mut().zip(d.data()).for_each(|(v, dv)| *v += t * dv);
                }
            }
            loss(&s)
        };
        analytic.push(dot);
        numeric.push(stable_central(shifted, steps));
    }
    (analytic, numeric)
}

/// Central difference, shrinking the step until two successive estimates
/// agree. A ReLU kink within reach of the larger step breaks agreement.
fn stable_central(f: impl Fn(f64) -> f64, steps: &[f64]) -> f64 {
    let mut prev: Option<f64> = None;
    for &h in steps {
        let d = (f(h) - f(-h)) / (2.0 * h);
        if let Some(p) = prev {
            if (d - p).abs() <= 1e-5 * d.abs().max(p.abs()) + 1e-8 {
                return d;
            }
        }
        prev = Some(d);
    }
    prev.expect("at least one step")
}

/// Every differentiable primitive, one check per seed.
pub fn op_checks(seeds: std::ops::Range<u64>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for seed in seeds {
        let mut r = rng(seed, 1);
        let mut u = |shape: &[usize]| uniform(shape, -2.0, 2.0, &mut r);
        let cases: Vec<(&str, Vec<Tensor>, Box<OpFn<'static>>)> = vec![
            ("add_broadcast", vec![u(&[2, 3, 4]), u(&[3, 1])], Box::new(|_, v| v[0].add(v[1]))),
            ("sub_broadcast", vec![u(&[2, 3, 4]), u(&[4])], Box::new(|_, v| v[0].sub(v[1]))),
            ("mul_broadcast", vec![u(&[2, 3, 4]), u(&[2, 1, 4])], Box::new(|_, v| v[0].mul(v[1]))),
            ("scale", vec![u(&[3, 4])], Box::new(|_, v| v[0].scale(-1.7))),
            ("add_scalar", vec![u(&[3, 4])], Box::new(|_, v| v[0].add_scalar(0.3)?.mul(v[0]))),
            ("matmul", vec![u(&[3, 4]), u(&[4, 5])], Box::new(|_, v| v[0].matmul(v[1]))),
            ("matmul_batched", vec![u(&[2, 1, 3, 4]), u(&[3, 4, 2])], Box::new(|_, v| v[0].matmul(v[1]))),
            ("reshape", vec![u(&[2, 6])], Box::new(|_, v| v[0].reshape(&[3, 4])?.mul(v[0].reshape(&[3, 4])?))),
            ("permute", vec![u(&[2, 3, 4])], Box::new(|_, v| v[0].permute(&[2, 0, 1])?.gelu())),
            ("roll", vec![u(&[3, 5])], Box::new(|_, v| v[0].roll(1, -2)?.mul(v[0]))),
            ("gather", vec![u(&[4, 3])], Box::new(|_, v| {
                let idx: Rc<[usize]> = vec![0, 5, 5, 11, 2, 7].into();
                v[0].gather(idx, &[2, 3])
            })),
            ("concat", vec![u(&[2, 3]), u(&[2, 2])], Box::new(|_, v| Var::concat(&[v[0], v[1], v[0]], 1)?.gelu())),
            ("sum", vec![u(&[3, 4])], Box::new(|_, v| v[0].mul(v[0])?.sum())),
            ("mean", vec![u(&[3, 4])], Box::new(|_, v| v[0].gelu()?.mean())),
            ("sum_last_axis", vec![u(&[2, 3, 4])], Box::new(|_, v| v[0].mul(v[0])?.sum_last_axis())),
            ("softmax", vec![u(&[3, 4, 2])], Box::new(|_, v| v[0].softmax(1))),
            ("log_softmax", vec![u(&[3, 4])], Box::new(|_, v| v[0].log_softmax(0))),
            ("layer_norm", vec![u(&[3, 5]), u(&[5]), u(&[5])], Box::new(|_, v| v[0].layer_norm(v[1], v[2], 1e-5))),
            ("batch_norm_train", vec![u(&[3, 2, 2, 2]), u(&[2]), u(&[2])], Box::new(|_, v| {
                let (rm, rv) = (Tensor::zeros(&[2]), Tensor::ones(&[2]));
                Ok(v[0].batch_norm(v[1], v[2], (&rm, &rv), true, 1e-5)?.0)
            })),
            ("batch_norm_eval", vec![u(&[2, 2, 2, 2]), u(&[2]), u(&[2])], Box::new(|_, v| {
                let (rm, rv) = (Tensor::new(&[2], vec![0.3, -0.2]).unwrap(), Tensor::new(&[2], vec![1.5, 0.7]).unwrap());
                Ok(v[0].batch_norm(v[1], v[2], (&rm, &rv), false, 1e-5)?.0)
            })),
            ("conv2d_pad1", vec![u(&[2, 2, 4, 4]), u(&[3, 2, 3, 3])], Box::new(|_, v| v[0].conv2d(v[1], 1, 1))),
            ("conv2d_stride2", vec![u(&[1, 2, 5, 5]), u(&[2, 2, 2, 2])], Box::new(|_, v| v[0].conv2d(v[1], 2, 0))),
            ("gelu", vec![u(&[4, 5])], Box::new(|_, v| v[0].gelu())),
        ];
        for (name, inputs, f) in cases {
            out.push(check_op(name, seed, inputs, f.as_ref())?);
        }
        let mut r = rng(seed, 2);
        let num = uniform(&[3, 4], -2.0, 2.0, &mut r);
        let den = Tensor::from_fn(&[4], |_| r.gen_range(0.5..2.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 });
        out.push(check_op("div_broadcast", seed, vec![num, den], &|_, v| v[0].div(v[1]))?);
        out.push(check_op("relu", seed, vec![away_from_zero(&[4, 5], &mut r)], &|_, v| v[0].relu())?);
    }
    Ok(out)
}

fn layer_store(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), rng(seed, 3))
}

/// Perturbs initial parameters so biases and norms are not at their
/// symmetric starting values.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed, 4);
    for p in store.iter_mut().filter(|p| p.trainable) {
        p.value.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.3..0.3));
    }
}

/// Composite layers, one check per seed.
pub fn layer_checks(seeds: std::ops::Range<u64>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for seed in seeds {
        let (mut store, init_rng) = layer_store(seed);
        let mut init = Init::new(&mut store, init_rng);
        let spec = BlockSpec { dim: 8, heads: 2, resolution: 8, window: 4, mlp_ratio: 4, rel_bias: true };
        let wmsa = WindowAttention::new(&mut init, "wmsa", 8, 2, 4, true)?;
        let block = SwinBlock::new(&mut init, "block", spec, true)?;
        let double = DoubleSwinBlock::new(&mut init, "double", spec)?;
        let merge = PatchMerge::new(&mut init, "merge", 8)?;
        let expand = PatchExpand::new(&mut init, "expand", 8)?;
        let final4 = FinalExpand::new(&mut init, "final", 4)?;
        let embed = PatchEmbed::new(&mut init, "embed", 3, 4)?;
        let cnn = CnnBottleneck::new(&mut init, "cnn", 16, 2, true)?;
        let fuse = FuseNode::new(&mut init, "fuse", 4, 2)?;
        jitter(&mut store, seed);
        let mut r = rng(seed, 5);
        let mut u = |shape: &[usize]| uniform(shape, -2.0, 2.0, &mut r);
        let x8 = u(&[1, 8, 8, 8]);
        out.push(check_module("w_msa", seed, &store, &x8, &|s, g, x| wmsa.forward(s, g, x, 0))?);
        out.push(check_module("sw_msa", seed, &store, &x8, &|s, g, x| wmsa.forward(s, g, x, 2))?);
        out.push(check_module("swin_block", seed, &store, &x8, &|s, g, x| block.forward(s, g, x))?);
        out.push(check_module("double_swin_block", seed, &store, &x8, &|s, g, x| double.forward(s, g, x))?);
        out.push(check_module("patch_merge", seed, &store, &u(&[2, 4, 4, 8]), &|s, g, x| merge.forward(s, g, x))?);
        out.push(check_module("patch_expand", seed, &store, &u(&[1, 2, 3, 8]), &|s, g, x| expand.forward(s, g, x))?);
        out.push(check_module("final_expand", seed, &store, &u(&[1, 2, 2, 4]), &|s, g, x| final4.forward(s, g, x))?);
        out.push(check_module("patch_embed", seed, &store, &u(&[1, 3, 8, 8]), &|s, g, x| embed.forward(s, g, x))?);
        let xc = u(&[2, 16, 2, 2]);
        out.push(check_module("cnn_bottleneck_train", seed, &store, &xc, &|s, g, x| cnn.forward(s, g, x, Mode::Train))?);
        out.push(check_module("cnn_bottleneck_eval", seed, &store, &xc, &|s, g, x| cnn.forward(s, g, x, Mode::Eval))?);
        let same = u(&[2, 4, 4, 4]);
        let below = u(&[2, 2, 2, 8]);
        out.push(check_module("fuse_node", seed, &store, &below, &|s, g, b| {
            let a = g.constant(same.clone());
            fuse.forward(s, g, &[a, a.scale(0.5)?], b, Mode::Train)
        })?);
        let masks = [BinaryMask::from_fn(3, 3, |r, c| r <= c), BinaryMask::from_fn(3, 3, |r, _| r == 1)];
        let target = one_hot(&masks, 2)?;
        out.push(check_op("seg_loss", seed, vec![u(&[2, 2, 3, 3])], &|_, v| seg_loss(v[0], &target, 0.5, 0.5))?);
    }
    Ok(out)
}

/// End-to-end check on the micro configuration: directional derivatives over
/// all parameters plus sampled input and parameter coordinates.
pub fn model_check(seed: u64) -> Result<Check> {
    let cfg = ModelConfig { seed, ..ModelConfig::micro() };
    let mut model = Model::build(&cfg)?;
    jitter(&mut model.store, seed);
    let mut r = rng(seed, 6);
    let x = uniform(&[1, 3, cfg.img_size, cfg.img_size], 0.0, 1.0, &mut r);
    let n = cfg.img_size;
    let (cr, cc, rad) = (r.gen_range(8..24) as f64, r.gen_range(8..24) as f64, r.gen_range(3.0..7.0));
    let mask = BinaryMask::from_fn(n, n, |i, j| (i as f64 - cr).powi(2) + (j as f64 - cc).powi(2) <= rad * rad);
    let target = one_hot(&[mask], cfg.num_classes)?;
    let loss_at = |m: &Model, x: &Tensor| -> f64 {
        let g = Graph::new();
        let out = m.forward(&g, g.constant(x.clone()), Mode::Eval).expect("forward succeeded once");
        seg_loss(out.logits, &target, 0.5, 0.5).and_then(|l| l.value().item()).expect("scalar loss")
    };

    let g = Graph::new();
    let xv = g.input(x.clone(), true);
    let out = model.forward(&g, xv, Mode::Eval)?;
    let grads = g.backward(seg_loss(out.logits, &target, 0.5, 0.5)?)?;
    model.store.zero_grad();
    model.store.accumulate(&g, &grads)?;
    let gx = grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let (mut analytic, mut numeric) = directional_params(&model.store, seed, 4, &MODEL_STEPS, |s| {
        let m = Model { store: s.clone(), ..model.clone() };
        loss_at(&m, &x)
    });
    // Input direction.
    let d = Tensor::from_fn(x.shape(), |_| r.sample(StandardNormal));
    let shifted = |t: f64| loss_at(&model, &Tensor::new(x.shape(), x.data().iter().zip(d.data()).map(|(a, b)| a + t * b).collect()).unwrap());
    analytic.push(gx.data().iter().zip(d.data()).map(|(a, b)| a * b).sum());
    numeric.push(stable_central(shifted, &MODEL_STEPS));
    // Sampled parameter coordinates.
    let trainable: Vec<usize> = model.store.iter().enumerate().filter(|(_, (_, p))| p.trainable).map(|(i, _)| i).collect();
    for _ in 0..6 {
        let slot = trainable[r.gen_range(0..trainable.len())];
        let len = model.store.iter().nth(slot).unwrap().1.value.numel();
        let k = r.gen_range(0..len);
        let g_k = model.store.iter().nth(slot).unwrap().1.grad.as_ref().map_or(0.0, |gr| gr.data()[k]);
        let at = |t: f64| {
            let mut m = model.clone();
            m.store.iter_mut().nth(slot).unwrap().value.data_mut()[k] += t;
            loss_at(&m, &x)
        };
        analytic.push(g_k);
        numeric.push(stable_central(at, &MODEL_STEPS));
    }
    Ok(Check { name: "micro_model".into(), seed, rel_err: relative_error(&analytic, &numeric), tol: MODEL_TOL })
}

pub fn run(level: Level, seeds: std::ops::Range<u64>) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(level, Level::Ops | Level::Full) {
        out.extend(op_checks(seeds.clone())?);
    }
    if matches!(level, Level::Layers | Level::Full) {
        out.extend(layer_checks(seeds.clone())?);
    }
    if matches!(level, Level::Model | Level::Full) {
        for s in seeds {
            out.push(model_check(s)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_seeds() {
        for c in op_checks(0..2).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn layers_pass_on_one_seed() {
        for c in layer_checks(0..1).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn micro_model_passes() {
        for seed in 0..4 {
            let c = model_check(seed).unwrap();
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let c = check_op("bad", 0, vec![Tensor::from_fn(&[3], |i| i as f64 + 1.0)], &|_, v| {
            // Stop-gradient on one factor makes the analytic derivative half the true one.
            let frozen = v[0].graph().constant(v[0].value());
            v[0].mul(frozen)
        })
        .unwrap();
        assert!(!c.passed());
    }
}
