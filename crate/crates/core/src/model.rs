//! Full segmentation network: Swin encoder, bottleneck, dense skip lattice,
//! Swin decoder, 4× expand and per-pixel linear head.

use std::fmt;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bottleneck::CnnBottleneck;
use crate::checkpoint::{load_archive, save_archive};
use crate::error::{Error, Result};
use crate::fusion::{level_geoms, FillOrder, LevelGeom, SkipGrid, LEVELS};
use crate::nn::{Init, Linear, Mode, ParamStore};
use crate::swin::{effective_window, BlockSpec, DoubleSwinBlock, FinalExpand, PatchEmbed, PatchMerge, PATCH};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub base_dim: usize,
    pub window: usize,
    pub heads: Vec<usize>,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub dense_skips: bool,
    pub cnn_bottleneck: bool,
    pub bottleneck_units: usize,
    pub bottleneck_residual: bool,
    /// Without the CNN bottleneck, run the replacement Swin pair at 2C
    /// between linear 8C → 2C → 8C projections instead of at 8C.
    pub swin_bottleneck_mid: bool,
    pub rel_pos_bias: bool,
    pub deep_supervision: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            img_size: 64,
            patch_size: PATCH,
            in_channels: 3,
            base_dim: 24,
            window: 4,
            heads: vec![2, 4, 8, 8],
            mlp_ratio: crate::swin::MLP_RATIO,
            num_classes: 2,
            dense_skips: true,
            cnn_bottleneck: true,
            bottleneck_units: 2,
            bottleneck_residual: true,
            swin_bottleneck_mid: false,
            rel_pos_bias: true,
            deep_supervision: false,
            seed: 0,
        }
    }

    /// 224 × 224 inputs, C = 96, w = 7.
    pub fn standard() -> Self {
        ModelConfig { img_size: 224, base_dim: 96, window: 7, heads: vec![3, 6, 12, 24], ..Self::toy() }
    }

    /// The smallest configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig { img_size: 32, base_dim: 8, window: 4, heads: vec![1, 2, 4, 8], ..Self::toy() }
    }

    pub fn levels(&self) -> [LevelGeom; LEVELS] {
        level_geoms(self.img_size, self.base_dim)
    }

    fn swin_bottleneck_dim(&self) -> usize {
        if self.swin_bottleneck_mid {
            2 * self.base_dim
        } else {
            8 * self.base_dim
        }
    }

    /// Checks every structural constraint and reports all that fail.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.img_size == 0 || self.img_size % 32 != 0 {
            errs.push(format!("img_size {} must be a positive multiple of 32", self.img_size));
        }
        if self.patch_size != PATCH {
            errs.push(format!("patch_size must be {PATCH}, got {}", self.patch_size));
        }
        if self.in_channels == 0 {
            errs.push("in_channels must be positive".into());
        }
        if self.num_classes == 0 {
            errs.push("num_classes must be positive".into());
        }
        if self.base_dim == 0 {
            errs.push("base_dim must be positive".into());
        }
        if self.mlp_ratio == 0 {
            errs.push("mlp_ratio must be positive".into());
        }
        if self.window == 0 {
            errs.push("window must be positive".into());
        }
        if self.cnn_bottleneck && self.bottleneck_units == 0 {
            errs.push("bottleneck_units must be positive".into());
        }
        if self.heads.len() != LEVELS {
            errs.push(format!("heads needs {LEVELS} entries, got {}", self.heads.len()));
        } else if self.base_dim > 0 {
            for (k, &h) in self.heads.iter().enumerate() {
                if h == 0 || self.base_dim % h != 0 {
                    errs.push(format!("base_dim {} not divisible by stage {k} head count {h}", self.base_dim));
                }
            }
            if !self.cnn_bottleneck && self.heads[3] > 0 && self.swin_bottleneck_dim() % self.heads[3] != 0 {
                errs.push(format!(
                    "bottleneck width {} not divisible by head count {}",
                    self.swin_bottleneck_dim(),
                    self.heads[3]
                ));
            }
        }
        if errs.is_empty() && self.window > 0 {
            let swin_levels = if self.cnn_bottleneck { LEVELS - 1 } else { LEVELS };
            for (k, l) in self.levels().iter().enumerate().take(swin_levels) {
                let (w, _) = effective_window(l.res, self.window, true);
                if l.res % w != 0 {
                    errs.push(format!("stage {k} resolution {} not divisible by window {}", l.res, self.window));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    fn block_spec(&self, level: usize, dim: usize) -> BlockSpec {
        BlockSpec {
            dim,
            heads: self.heads[level],
            resolution: self.levels()[level].res,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            rel_bias: self.rel_pos_bias,
        }
    }

    /// Closed-form `(name, shape)` at every stage boundary for batch `b`.
    pub fn stage_table(&self, b: usize) -> Vec<(String, Vec<usize>)> {
        let l = self.levels();
        let nhwc = |i: usize| vec![b, l[i].res, l[i].res, l[i].dim];
        let mut out = vec![("embed".to_string(), nhwc(0))];
        for k in 0..LEVELS - 1 {
            out.push((format!("encoder{k}"), nhwc(k)));
            out.push((format!("merge{k}"), nhwc(k + 1)));
        }
        out.push(("bottleneck".into(), nhwc(3)));
        for k in (0..LEVELS - 1).rev() {
            out.push((format!("decoder{k}"), nhwc(k)));
        }
        out.push(("expand".into(), vec![b, self.img_size, self.img_size, self.base_dim]));
        out.push(("logits".into(), vec![b, self.num_classes, self.img_size, self.img_size]));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoDenseSkip,
    NoCnnBottleneck,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoDenseSkip, Variant::NoCnnBottleneck];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoDenseSkip => "no_dense_skip",
            Variant::NoCnnBottleneck => "no_cnn_bottleneck",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}; expected full, no_dense_skip or no_cnn_bottleneck")))
    }
}

pub fn ablate(cfg: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut out = cfg.clone();
    match variant {
        Variant::Full => {}
        Variant::NoDenseSkip => out.dense_skips = false,
        Variant::NoCnnBottleneck => {
            out.cnn_bottleneck = false;
            out.swin_bottleneck_mid = false;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub enum Bottleneck {
    Cnn(CnnBottleneck),
    Swin { down: Option<Linear>, blocks: DoubleSwinBlock, up: Option<Linear> },
}

pub struct ForwardOutput<'g> {
    /// `[B, num_classes, H, W]`.
    pub logits: Var<'g>,
    /// Deep-supervision logits, same shape as `logits`.
    pub aux: Vec<Var<'g>>,
    pub stages: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: PatchEmbed,
    pub encoder: Vec<(DoubleSwinBlock, PatchMerge)>,
    pub bottleneck: Bottleneck,
    pub grid: SkipGrid,
    pub decoder: Vec<DoubleSwinBlock>,
    pub final_expand: FinalExpand,
    pub head: Linear,
    pub aux_heads: Vec<((usize, usize), Linear)>,
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, ChaCha8Rng::seed_from_u64(cfg.seed));
        let levels = cfg.levels();
        let c = cfg.base_dim;

        let embed = PatchEmbed::new(&mut init, "embed", cfg.in_channels, c)?;
        let mut encoder = Vec::new();
        for k in 0..LEVELS - 1 {
            let dim = levels[k].dim;
            encoder.push((
                DoubleSwinBlock::new(&mut init, &format!("encoder{k}"), cfg.block_spec(k, dim))?,
                PatchMerge::new(&mut init, &format!("merge{k}"), dim)?,
            ));
        }
        let bottleneck = if cfg.cnn_bottleneck {
            Bottleneck::Cnn(CnnBottleneck::new(
                &mut init,
                "bottleneck",
                levels[3].dim,
                cfg.bottleneck_units,
                cfg.bottleneck_residual,
            )?)
        } else {
            let (wide, dim) = (levels[3].dim, cfg.swin_bottleneck_dim());
            let down = cfg
                .swin_bottleneck_mid
                .then(|| Linear::new(&mut init, "bottleneck.down", wide, dim, true))
                .transpose()?;
            let blocks = DoubleSwinBlock::new(&mut init, "bottleneck.swin", cfg.block_spec(3, dim))?;
            let up =
                cfg.swin_bottleneck_mid.then(|| Linear::new(&mut init, "bottleneck.up", dim, wide, true)).transpose()?;
            Bottleneck::Swin { down, blocks, up }
        };
        let grid = SkipGrid::new(&mut init, "skip", levels, cfg.dense_skips)?;
        let decoder = (0..LEVELS - 1)
            .map(|k| DoubleSwinBlock::new(&mut init, &format!("decoder{k}"), cfg.block_spec(k, levels[k].dim)))
            .collect::<Result<Vec<_>>>()?;
        let final_expand = FinalExpand::new(&mut init, "final", c)?;
        let head = Linear::new(&mut init, "head", c, cfg.num_classes, true)?;
        let mut aux_heads = Vec::new();
        if cfg.deep_supervision {
            for (i, j) in SkipGrid::fused_coords(cfg.dense_skips).into_iter().filter(|&(i, _)| i == 0) {
                aux_heads.push(((i, j), Linear::new(&mut init, &format!("aux{j}"), c, cfg.num_classes, true)?));
            }
        }
        Ok(Model { cfg: cfg.clone(), store, embed, encoder, bottleneck, grid, decoder, final_expand, head, aux_heads })
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn forward<'g>(&self, g: &'g Graph, batch: Var<'g>, mode: Mode) -> Result<ForwardOutput<'g>> {
        self.forward_ordered(g, batch, mode, FillOrder::ColumnMajor)
    }

    pub fn forward_ordered<'g>(
        &self,
        g: &'g Graph,
        batch: Var<'g>,
        mode: Mode,
        order: FillOrder,
    ) -> Result<ForwardOutput<'g>> {
        let cfg = &self.cfg;
        let s = batch.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.img_size || s[3] != cfg.img_size {
            return Err(Error::dim(format!(
                "model expects [B, {}, {}, {}], got {s:?}",
                cfg.in_channels, cfg.img_size, cfg.img_size
            )));
        }
        let b = s[0];
        let st = &self.store;
        let mut stages = Vec::new();
        let mut record = |name: String, v: &Var<'g>| stages.push((name, v.shape()));

        let mut h = self.embed.forward(st, g, batch)?;
        record("embed".into(), &h);
        let mut skips = Vec::new();
        for (k, (blocks, merge)) in self.encoder.iter().enumerate() {
            let x = blocks.forward(st, g, h)?;
            record(format!("encoder{k}"), &x);
            skips.push(x);
            h = merge.forward(st, g, x)?;
            record(format!("merge{k}"), &h);
        }
        let bott = match &self.bottleneck {
            Bottleneck::Cnn(cnn) => cnn.forward(st, g, h.permute(&[0, 3, 1, 2])?, mode)?.permute(&[0, 2, 3, 1])?,
            Bottleneck::Swin { down, blocks, up } => {
                let x = match down {
                    Some(l) => l.forward(st, g, h)?,
                    None => h,
                };
                let x = blocks.forward(st, g, x)?;
                match up {
                    Some(l) => l.forward(st, g, x)?,
                    None => x,
                }
            }
        };
        record("bottleneck".into(), &bott);

        let mut decoded = Vec::new();
        let mut decode = |i: usize, x: Var<'g>| -> Result<Var<'g>> {
            let d = self.decoder[i].forward(st, g, x)?;
            decoded.push((i, d.shape()));
            Ok(d)
        };
        let encoder: [Var<'g>; LEVELS - 1] = [skips[0], skips[1], skips[2]];
        let fg = self.grid.build(st, g, encoder, bott, mode, order, &mut decode)?;
        decoded.sort_by(|a, b| b.0.cmp(&a.0));
        for (i, shape) in decoded {
            stages.push((format!("decoder{i}"), shape));
        }
        let x = self.final_expand.forward(st, g, fg.output()?)?;
        stages.push(("expand".into(), x.shape()));
        let logits = self.head.forward(st, g, x)?.permute(&[0, 3, 1, 2])?;
        stages.push(("logits".into(), logits.shape()));

        let mut aux = Vec::new();
        for ((i, j), head) in &self.aux_heads {
            let node = fg.get(*i, *j).ok_or_else(|| Error::State(format!("grid node ({i},{j}) missing")))?;
            let small = head.forward(st, g, node)?;
            aux.push(upsample_nearest(small, PATCH)?.permute(&[0, 3, 1, 2])?);
        }

        let want = cfg.stage_table(b);
        if stages != want {
            return Err(Error::dim(format!("stage shapes {stages:?} differ from {want:?}")));
        }
        Ok(ForwardOutput { logits, aux, stages })
    }

    /// Eval-mode logits for a `[B, C, H, W]` batch.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let x = g.constant(batch.clone());
        Ok(self.forward(&g, x, Mode::Eval)?.logits.value())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
        save_archive(path, &entries)?;
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Rebuilds from the config sidecar and restores every stored tensor.
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side)?;
        let cfg: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, format!("bad config sidecar: {e}")))?;
        let mut m = Model::build(&cfg)?;
        m.load_params(path)?;
        Ok(m)
    }

    /// Replaces parameter values; names and shapes must match exactly.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let entries = load_archive(path)?;
        if entries.len() != self.store.len() {
            return Err(Error::format(
                path,
                format!("checkpoint has {} tensors, model has {}", entries.len(), self.store.len()),
            ));
        }
        for (name, t) in entries {
            let id = self.store.id_of(&name).ok_or_else(|| Error::format(path, format!("unknown parameter {name}")))?;
            let p = self.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::format(
                    path,
                    format!("{name}: shape {:?} does not match {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// `best.ckp1` → `best.json`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("json")
}

/// `[B, H, W, C]` → `[B, fH, fW, C]` by pixel replication.
pub fn upsample_nearest<'g>(x: Var<'g>, factor: usize) -> Result<Var<'g>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("upsample expects [B, H, W, C], got {s:?}")));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut index = Vec::with_capacity(b * ho * wo * c);
    for n in 0..b {
        for y in 0..ho {
            for xx in 0..wo {
                let base = ((n * h + y / factor) * w + xx / factor) * c;
                index.extend(base..base + c);
            }
        }
    }
    let index: Rc<[usize]> = index.into();
    x.gather(index, &[b, ho, wo, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(b: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[b, 3, size, size], |i| ((i as f64) * 0.013).sin())
    }

    #[test]
    fn toy_forward_shapes() {
        let m = Model::build(&ModelConfig::toy()).unwrap();
        let g = Graph::new();
        let out = m.forward(&g, g.constant(input(2, 64)), Mode::Train).unwrap();
        assert_eq!(out.logits.shape(), vec![2, 2, 64, 64]);
        assert_eq!(out.stages, ModelConfig::toy().stage_table(2));
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        let cfg = ModelConfig { img_size: 60, ..ModelConfig::toy() };
        let err = Model::build(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("img_size 60")));
        let cfg = ModelConfig { heads: vec![5, 4, 8, 8], ..ModelConfig::toy() };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("head count 5")));
        let cfg = ModelConfig { img_size: 96, window: 5, ..ModelConfig::toy() };
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("window 5")));
    }

    #[test]
    fn standard_widths() {
        let cfg = ModelConfig::standard();
        cfg.validate().unwrap();
        let dims: Vec<usize> = cfg.levels().iter().map(|l| l.dim).collect();
        assert_eq!(dims, vec![96, 192, 384, 768]);
    }

    #[test]
    fn variants_parse_and_apply() {
        let cfg = ModelConfig::toy();
        assert_eq!(ablate(&cfg, "full".parse().unwrap()), cfg);
        assert!(!ablate(&cfg, Variant::NoDenseSkip).dense_skips);
        assert!(!ablate(&cfg, Variant::NoCnnBottleneck).cnn_bottleneck);
        assert!(matches!("nope".parse::<Variant>(), Err(Error::Usage(_))));
    }

    #[test]
    fn param_count_is_seed_free_and_ordered() {
        let cfg = ModelConfig::toy();
        let full = Model::build(&cfg).unwrap().param_count();
        assert_eq!(Model::build(&ModelConfig { seed: 9, ..cfg.clone() }).unwrap().param_count(), full);
        let plain = Model::build(&ablate(&cfg, Variant::NoDenseSkip)).unwrap().param_count();
        assert!(full > plain);
        let mid = ModelConfig { dense_skips: false, cnn_bottleneck: false, swin_bottleneck_mid: true, ..cfg };
        assert!(full > Model::build(&mid).unwrap().param_count());
    }

    #[test]
    fn seeds_control_parameters() {
        let a = Model::build(&ModelConfig::micro()).unwrap();
        let b = Model::build(&ModelConfig::micro()).unwrap();
        let c = Model::build(&ModelConfig { seed: 1, ..ModelConfig::micro() }).unwrap();
        let vals = |m: &Model| m.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>();
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
    }

    #[test]
    fn deep_supervision_heads_match_logits() {
        let cfg = ModelConfig { deep_supervision: true, ..ModelConfig::micro() };
        let m = Model::build(&cfg).unwrap();
        assert_eq!(m.aux_heads.len(), 3);
        let g = Graph::new();
        let out = m.forward(&g, g.constant(input(1, 32)), Mode::Eval).unwrap();
        assert_eq!(out.aux.len(), 3);
        for a in out.aux {
            assert_eq!(a.shape(), out.logits.shape());
        }
    }

    #[test]
    fn nearest_upsample_replicates() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64));
        let y = upsample_nearest(x, 2).unwrap().value();
        assert_eq!(y.data(), &[0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckp1");
        let m = Model::build(&ModelConfig { seed: 4, ..ModelConfig::micro() }).unwrap();
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        let x = input(2, 32);
        assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
    }
}
