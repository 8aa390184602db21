//! Loss, Adam, the seeded training loop, checkpoints and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_archive, save_archive};
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_named, BinaryMask, HdMode, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::nn::{Mode, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub seed: u64,
    /// Write `latest` every this many epochs (0: only after the last one).
    pub checkpoint_interval: usize,
    /// Stop once the train-split DSC reaches this value.
    pub target_train_dsc: Option<f64>,
    /// Record the train-split DSC every epoch even without a target.
    pub track_train_dsc: bool,
    pub hd_mode: HdMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4,
            epochs: 300,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ce_weight: 0.5,
            dice_weight: 0.5,
            seed: 0,
            checkpoint_interval: 10,
            target_train_dsc: None,
            track_train_dsc: false,
            hd_mode: HdMode::Percentile,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".to_string());
        }
        if self.epochs == 0 {
            errs.push("epochs must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            errs.push(format!("eps must be positive, got {}", self.eps));
        }
        if self.ce_weight < 0.0 || self.dice_weight < 0.0 || (self.ce_weight + self.dice_weight - 1.0).abs() > 1e-12 {
            errs.push(format!("loss weights ({}, {}) must be non-negative and sum to 1", self.ce_weight, self.dice_weight));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// `[B, K, H, W]` one-hot targets with class 1 on the mask.
pub fn one_hot(masks: &[BinaryMask], classes: usize) -> Result<Tensor> {
    if classes < 2 {
        return Err(Error::Config(format!("training needs at least 2 classes, got {classes}")));
    }
    let (h, w) = masks.first().ok_or_else(|| Error::Usage("empty mask batch".into()))?.shape();
    let hw = h * w;
    let mut data = vec![0.0; masks.len() * classes * hw];
    for (n, m) in masks.iter().enumerate() {
        if m.shape() != (h, w) {
            return Err(Error::dim(format!("mask shapes {:?} and {:?} in one batch", m.shape(), (h, w))));
        }
        for (p, &fg) in m.data().iter().enumerate() {
            data[(n * classes + usize::from(fg)) * hw + p] = 1.0;
        }
    }
    Tensor::new(&[masks.len(), classes, h, w], data)
}

/// `ce_w · CE + dice_w · (1 − soft Dice)` with per-sample foreground Dice
/// averaged over the batch. `target` is one-hot `[B, K, H, W]`.
pub fn seg_loss<'g>(logits: Var<'g>, target: &Tensor, ce_w: f64, dice_w: f64) -> Result<Var<'g>> {
    let s = logits.shape();
    if s != target.shape() || s.len() != 4 || s[1] < 2 {
        return Err(Error::dim(format!("logits {s:?} and targets {:?} disagree", target.shape())));
    }
    let g = logits.graph();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let t = g.constant(target.clone());
    let ce = logits.log_softmax(1)?.mul(t)?.sum()?.scale(-1.0 / (b * hw) as f64)?;

    let fg_index: Rc<[usize]> = (0..b).flat_map(|n| (n * k + 1) * hw..(n * k + 2) * hw).collect::<Vec<_>>().into();
    let p = logits.softmax(1)?.gather(fg_index.clone(), &[b, hw])?;
    let y = t.gather(fg_index, &[b, hw])?;
    let inter = p.mul(y)?.sum_last_axis()?.scale(2.0)?.add_scalar(DICE_SMOOTH)?;
    let denom = p.add(y)?.sum_last_axis()?.add_scalar(DICE_SMOOTH)?;
    let dice = inter.div(denom)?.mean()?;
    let dice_loss = dice.scale(-1.0)?.add_scalar(1.0)?;
    ce.scale(ce_w)?.add(dice_loss.scale(dice_w)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// Moments per parameter slot; `None` for buffers.
    pub m: Vec<Option<Tensor>>,
    pub v: Vec<Option<Tensor>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| p.trainable.then(|| Tensor::zeros(p.value.shape()))).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }

    pub fn save(&self, path: &Path, store: &ParamStore) -> Result<()> {
        let step = Tensor::scalar(self.step as f64);
        let mut names = Vec::new();
        for (i, (_, p)) in store.iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.m[i], &self.v[i]) {
                names.push((format!("m.{}", p.name), m));
                names.push((format!("v.{}", p.name), v));
            }
        }
        let mut entries: Vec<(&str, &Tensor)> = vec![("step", &step)];
        entries.extend(names.iter().map(|(n, t)| (n.as_str(), *t)));
        save_archive(path, &entries)
    }

    pub fn load(path: &Path, store: &ParamStore) -> Result<Self> {
        let mut st = AdamState::new(store);
        for (name, t) in load_archive(path)? {
            if name == "step" {
                st.step = t.item()? as u64;
                continue;
            }
            let (slot, pname) = name.split_at(2.min(name.len()));
            let id = store.id_of(pname).ok_or_else(|| Error::format(path, format!("unknown parameter {pname}")))?;
            let target = match slot {
                "m." => &mut st.m,
                "v." => &mut st.v,
                _ => return Err(Error::format(path, format!("unexpected entry {name}"))),
            };
            let i = store.iter().position(|(pid, _)| pid == id).expect("id from this store");
            match &target[i] {
                Some(old) if old.shape() == t.shape() => target[i] = Some(t),
                _ => return Err(Error::format(path, format!("{name} does not match the model"))),
            }
        }
        Ok(st)
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(Error::State(format!("missing gradient for {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        let m = state.m[i].as_mut().ok_or_else(|| Error::State(format!("no moments for {}", p.name)))?;
        let v = state.v[i].as_mut().ok_or_else(|| Error::State(format!("no moments for {}", p.name)))?;
        let it = p.value.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((theta, &g), (m, v)) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *theta -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: Option<f64>,
    pub val_hd95: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_dsc: Option<f64>,
}

pub fn stack_images(samples: &[&SegSample]) -> Result<Tensor> {
    let parts: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&parts)
}

/// Loss on one batch plus gradients moved into the store; running
/// statistics are updated.
pub fn train_batch(model: &mut Model, batch: &[&SegSample], cfg: &TrainConfig) -> Result<f64> {
    let images = stack_images(batch)?;
    let masks: Vec<BinaryMask> = batch.iter().map(|s| s.mask.clone()).collect();
    let target = one_hot(&masks, model.cfg.num_classes)?;
    let g = Graph::new();
    let out = model.forward(&g, g.constant(images), Mode::Train)?;
    let mut loss = seg_loss(out.logits, &target, cfg.ce_weight, cfg.dice_weight)?;
    if !out.aux.is_empty() {
        for a in &out.aux {
            loss = loss.add(seg_loss(*a, &target, cfg.ce_weight, cfg.dice_weight)?)?;
        }
        loss = loss.scale(1.0 / (out.aux.len() + 1) as f64)?;
    }
    let value = loss.value().item()?;
    let grads = g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&g, &grads)?;
    model.store.apply_pending(&g);
    Ok(value)
}

pub const EVAL_CHUNK: usize = 4;

/// Eval-mode masks for each sample, in order.
pub fn predict_masks(model: &Model, samples: &[SegSample]) -> Result<Vec<BinaryMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&SegSample> = chunk.iter().collect();
        out.extend(BinaryMask::from_logits(&model.predict(&stack_images(&refs)?)?)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, samples: &[SegSample], mode: HdMode) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let pred = predict_masks(model, samples)?;
    let gt: Vec<BinaryMask> = samples.iter().map(|s| s.mask.clone()).collect();
    let ids: Vec<String> = samples.iter().map(SegSample::id).collect();
    evaluate_named(&ids, &pred, &gt, mode)
}

/// Run-directory file names.
pub mod files {
    pub const LATEST: &str = "latest.ckp1";
    pub const BEST: &str = "best.ckp1";
    pub const OPTIMIZER: &str = "latest.adam";
    pub const HISTORY: &str = "history.jsonl";
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub train: &'a [SegSample],
    pub val: &'a [SegSample],
    pub out_dir: Option<PathBuf>,
    /// Called after every epoch.
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, train: &'a [SegSample], val: &'a [SegSample]) -> Self {
        Trainer { model_cfg, cfg, train, val, out_dir: None, on_epoch: None }
    }

    pub fn with_output(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn run(self) -> Result<TrainOutcome> {
        self.run_from(None)
    }

    /// Continues from `latest` in the output directory.
    pub fn resume(self) -> Result<TrainOutcome> {
        let dir = self.out_dir.clone().ok_or_else(|| Error::Usage("resume needs an output directory".into()))?;
        let mut model = Model::load(&dir.join(files::LATEST))?;
        if model.cfg != self.model_cfg {
            return Err(Error::Config("checkpoint config differs from the requested model config".into()));
        }
        let adam = AdamState::load(&dir.join(files::OPTIMIZER), &model.store)?;
        let history = read_history(&dir.join(files::HISTORY))?;
        model.store.zero_grad();
        self.run_from(Some((model, adam, history)))
    }

    fn run_from(mut self, start: Option<(Model, AdamState, Vec<EpochRecord>)>) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        if self.train.is_empty() {
            return Err(Error::Usage("training split is empty".into()));
        }
        let (mut model, mut adam, mut history) = match start {
            Some(s) => s,
            None => {
                let m = Model::build(&self.model_cfg)?;
                let a = AdamState::new(&m.store);
                (m, a, Vec::new())
            }
        };
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut best = history.iter().map(score).fold(None, |b: Option<f64>, s| Some(b.map_or(s, |b| b.max(s))));
        let cfg = self.cfg.clone();
        let first = history.len() + 1;
        for epoch in first..=cfg.epochs {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64)));
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&SegSample> = chunk.iter().map(|&i| &self.train[i]).collect();
                total += train_batch(&mut model, &batch, &cfg)? * batch.len() as f64;
                adam_step(&mut model.store, &mut adam, &cfg)?;
            }
            model.store.zero_grad();
            let (val_dsc, val_hd95) = if self.val.is_empty() {
                (None, None)
            } else {
                let r = evaluate(&model, self.val, cfg.hd_mode)?;
                (Some(r.aggregates.dsc_mean), r.aggregates.hd95_mean)
            };
            let train_dsc = if cfg.track_train_dsc || cfg.target_train_dsc.is_some() {
                Some(evaluate(&model, self.train, cfg.hd_mode)?.aggregates.dsc_mean)
            } else {
                None
            };
            let rec = EpochRecord { epoch, train_loss: total / self.train.len() as f64, val_dsc, val_hd95, train_dsc };
            if let Some(cb) = self.on_epoch.as_mut() {
                cb(&rec);
            }
            let s = score(&rec);
            let improved = best.map_or(true, |b| s > b);
            history.push(rec);
            let reached = matches!((cfg.target_train_dsc, train_dsc), (Some(t), Some(d)) if d >= t);
            let last = epoch == cfg.epochs || reached;
            if let Some(dir) = &self.out_dir {
                if improved {
                    model.save(&dir.join(files::BEST))?;
                }
                let due = cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0;
                if due || last {
                    model.save(&dir.join(files::LATEST))?;
                    adam.save(&dir.join(files::OPTIMIZER), &model.store)?;
                    write_history(&dir.join(files::HISTORY), &history)?;
                }
            }
            if improved {
                best = Some(s);
            }
            if reached {
                break;
            }
        }
        Ok(TrainOutcome { model, history })
    }
}

/// Validation DSC when available, otherwise negated training loss.
fn score(r: &EpochRecord) -> f64 {
    r.val_dsc.unwrap_or(-r.train_loss)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_diff_grad, relative_error};

    fn half_mask(h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, _| r < h / 2)
    }

    fn loss_of(logits: &Tensor, target: &Tensor) -> f64 {
        let g = Graph::new();
        seg_loss(g.constant(logits.clone()), target, 0.5, 0.5).unwrap().value().item().unwrap()
    }

    #[test]
    fn uniform_logits_give_ln2_cross_entropy() {
        let target = one_hot(&[half_mask(4, 4)], 2).unwrap();
        let g = Graph::new();
        let l = seg_loss(g.constant(Tensor::zeros(&[1, 2, 4, 4])), &target, 1.0, 0.0).unwrap();
        assert!((l.value().item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_small_loss() {
        let m = half_mask(4, 4);
        let target = one_hot(&[m.clone()], 2).unwrap();
        let logits = Tensor::from_fn(&[1, 2, 4, 4], |i| {
            let (c, p) = (i / 16, i % 16);
            let fg = m.data()[p];
            if (c == 1) == fg { 20.0 } else { -20.0 }
        });
        let l = loss_of(&logits, &target);
        assert!((0.0..0.01).contains(&l), "{l}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let target = one_hot(&[half_mask(3, 3), BinaryMask::from_fn(3, 3, |r, c| r == c)], 2).unwrap();
        let x = Tensor::from_fn(&[2, 2, 3, 3], |i| ((i as f64) * 0.71).sin() * 2.0);
        let g = Graph::new();
        let v = g.input(x.clone(), true);
        let grads = g.backward(seg_loss(v, &target, 0.5, 0.5).unwrap()).unwrap();
        let fd = finite_diff_grad(|t| loss_of(t, &target), &x, 1e-5);
        assert!(relative_error(grads.get(v).unwrap().data(), fd.data()) < 1e-6);
    }

    #[test]
    fn loss_rejects_mismatched_targets() {
        let target = one_hot(&[half_mask(4, 4)], 2).unwrap();
        let g = Graph::new();
        assert!(matches!(seg_loss(g.constant(Tensor::zeros(&[1, 2, 4, 3])), &target, 0.5, 0.5), Err(Error::Dimension(_))));
    }

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value), true).unwrap();
        s.add("buf", Tensor::scalar(3.0), false).unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        s.iter_mut().next().unwrap().grad = Some(Tensor::scalar(1.0));
        adam_step(&mut s, &mut st, &cfg).unwrap();
        let moved = 0.5 - s.iter().next().unwrap().1.value.item().unwrap();
        assert!((moved - cfg.lr / (1.0 + cfg.eps)).abs() / cfg.lr < 1e-10);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        s.iter_mut().next().unwrap().grad = Some(Tensor::scalar(0.0));
        adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item().unwrap(), 0.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        assert!(matches!(adam_step(&mut s, &mut st, &TrainConfig::default()), Err(Error::State(_))));
    }

    #[test]
    fn adam_state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = scalar_store(0.5);
        let mut st = AdamState::new(&s);
        s.iter_mut().next().unwrap().grad = Some(Tensor::scalar(0.3));
        adam_step(&mut s, &mut st, &TrainConfig::default()).unwrap();
        st.save(&dir.path().join("a"), &s).unwrap();
        assert_eq!(AdamState::load(&dir.path().join("a"), &s).unwrap(), st);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lr: 0.0, ce_weight: 0.7, ..TrainConfig::default() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("lr") && msg.contains("sum to 1"));
    }
}
