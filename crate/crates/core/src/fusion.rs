//! Nested dense skip lattice joining encoder and decoder.
//!
//! Node `X(i,j)` lives at level `i` (resolution `img/2^(i+2)`, width `C·2^i`).
//! Column 0 holds encoder outputs, with `X(3,0)` the bottleneck output.
//! Decoder nodes (the anti-diagonal `i + j = 3`, or column 1 without dense
//! skips) take their upsampled input from the decoder output one level
//! below, so the decoder Swin stages sit on the path to the head.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, Mode, ParamStore};
use crate::swin::PatchExpand;
use crate::tensor::{Graph, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeom {
    pub res: usize,
    pub dim: usize,
}

pub fn level_geoms(img_size: usize, base_dim: usize) -> [LevelGeom; LEVELS] {
    std::array::from_fn(|i| LevelGeom { res: img_size >> (i + 2), dim: base_dim << i })
}

/// Patch-expand the lower input, concatenate after the same-level inputs,
/// then Conv3×3-BN-ReLU back to the level width.
#[derive(Clone, Debug)]
pub struct FuseNode {
    pub expand: PatchExpand,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub dim: usize,
    pub inputs: usize,
}

impl FuseNode {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, inputs: usize) -> Result<Self> {
        if inputs == 0 {
            return Err(Error::Config(format!("{name}: fusion node needs a same-level input")));
        }
        Ok(FuseNode {
            expand: PatchExpand::new(init, &format!("{name}.up"), 2 * dim)?,
            conv: Conv2d::new(init, &format!("{name}.conv"), (inputs + 1) * dim, dim, 3, 1)?,
            bn: BatchNorm2d::new(init, &format!("{name}.bn"), dim)?,
            dim,
            inputs,
        })
    }

    pub fn forward<'g>(
        &self,
        store: &ParamStore,
        g: &'g Graph,
        same_level: &[Var<'g>],
        from_below: Var<'g>,
        mode: Mode,
    ) -> Result<Var<'g>> {
        if same_level.len() != self.inputs {
            return Err(Error::dim(format!(
                "fusion node expects {} same-level inputs, got {}",
                self.inputs,
                same_level.len()
            )));
        }
        let s = same_level[0].shape();
        if s.len() != 4 || s[3] != self.dim || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dim(format!("fusion node of width {} got same-level shape {s:?}", self.dim)));
        }
        for x in &same_level[1..] {
            if x.shape() != s {
                return Err(Error::dim(format!("same-level shapes differ: {:?} vs {s:?}", x.shape())));
            }
        }
        let below = vec![s[0], s[1] / 2, s[2] / 2, 2 * self.dim];
        if from_below.shape() != below {
            return Err(Error::dim(format!("lower input should be {below:?}, got {:?}", from_below.shape())));
        }
        let mut parts = same_level.to_vec();
        parts.push(self.expand.forward(store, g, from_below)?);
        let cat = Var::concat(&parts, 3)?.permute(&[0, 3, 1, 2])?;
        let y = self.bn.forward(store, g, self.conv.forward(store, g, cat)?, mode)?.relu()?;
        y.permute(&[0, 2, 3, 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillOrder {
    ColumnMajor,
    AntiDiagonal,
}

/// Where a node's upsampled input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Below {
    Node(usize, usize),
    Decoded(usize),
}

#[derive(Clone, Debug)]
pub struct SkipGrid {
    pub levels: [LevelGeom; LEVELS],
    pub dense: bool,
    pub nodes: BTreeMap<(usize, usize), FuseNode>,
}

impl SkipGrid {
    pub fn new(init: &mut Init<'_>, name: &str, levels: [LevelGeom; LEVELS], dense: bool) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (i, j) in Self::fused_coords(dense) {
            let inputs = if dense { j } else { 1 };
            nodes.insert((i, j), FuseNode::new(init, &format!("{name}.x{i}{j}"), levels[i].dim, inputs)?);
        }
        Ok(SkipGrid { levels, dense, nodes })
    }

    /// Coordinates of the learned fusion nodes.
    pub fn fused_coords(dense: bool) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for j in 1..LEVELS {
            for i in 0..LEVELS - j {
                if dense || j == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// The node at level `i` whose output feeds that level's decoder stage.
    pub fn decoder_node(&self, i: usize) -> (usize, usize) {
        if self.dense {
            (i, LEVELS - 1 - i)
        } else {
            (i, 1)
        }
    }

    fn sources(&self, i: usize, j: usize) -> (Vec<(usize, usize)>, Below) {
        let same = if self.dense { (0..j).map(|c| (i, c)).collect() } else { vec![(i, 0)] };
        let below = if self.decoder_node(i) == (i, j) { Below::Decoded(i + 1) } else { Below::Node(i + 1, j - 1) };
        (same, below)
    }

    /// Fills every node. `decode(i, x)` runs level `i`'s decoder stage on its
    /// decoder node; the result is kept as the level's decoder output.
    #[allow(clippy::too_many_arguments)]
    pub fn build<'g>(
        &self,
        store: &ParamStore,
        g: &'g Graph,
        encoder: [Var<'g>; LEVELS - 1],
        bottleneck: Var<'g>,
        mode: Mode,
        order: FillOrder,
        decode: &mut dyn FnMut(usize, Var<'g>) -> Result<Var<'g>>,
    ) -> Result<FeatureGrid<'g>> {
        let batch = encoder[0].shape()[0];
        let mut grid = FeatureGrid { batch, levels: self.levels, nodes: BTreeMap::new(), decoded: BTreeMap::new() };
        for (i, x) in encoder.into_iter().enumerate() {
            grid.insert((i, 0), x)?;
        }
        grid.insert((LEVELS - 1, 0), bottleneck)?;
        grid.decoded.insert(LEVELS - 1, bottleneck);

        let mut b = Builder { grid: self, store, g, mode, decode, out: grid };
        let coords = Self::fused_coords(self.dense);
        let visit: Vec<(usize, usize)> = match order {
            FillOrder::ColumnMajor => coords,
            FillOrder::AntiDiagonal => {
                let mut c = coords;
                c.sort_by_key(|&(i, j)| (i + j, std::cmp::Reverse(i)));
                c
            }
        };
        for (i, j) in visit {
            b.node(i, j)?;
        }
        Ok(b.out)
    }
}

struct Builder<'a, 'g> {
    grid: &'a SkipGrid,
    store: &'a ParamStore,
    g: &'g Graph,
    mode: Mode,
    decode: &'a mut dyn FnMut(usize, Var<'g>) -> Result<Var<'g>>,
    out: FeatureGrid<'g>,
}

impl<'a, 'g> Builder<'a, 'g> {
    fn node(&mut self, i: usize, j: usize) -> Result<Var<'g>> {
        if let Some(&v) = self.out.nodes.get(&(i, j)) {
            return Ok(v);
        }
        let fuse = self
            .grid
            .nodes
            .get(&(i, j))
            .ok_or_else(|| Error::State(format!("grid node ({i},{j}) has no prerequisite path")))?;
        let (same, below) = self.grid.sources(i, j);
        let same = same.into_iter().map(|(a, c)| self.node(a, c)).collect::<Result<Vec<_>>>()?;
        let below = match below {
            Below::Node(a, c) => self.node(a, c)?,
            Below::Decoded(level) => self.decoded(level)?,
        };
        let x = fuse.forward(self.store, self.g, &same, below, self.mode)?;
        self.out.insert((i, j), x)?;
        if self.grid.decoder_node(i) == (i, j) {
            let d = (self.decode)(i, x)?;
            self.out.check((i, 0), &d)?;
            self.out.decoded.insert(i, d);
        }
        Ok(x)
    }

    fn decoded(&mut self, level: usize) -> Result<Var<'g>> {
        if let Some(&d) = self.out.decoded.get(&level) {
            return Ok(d);
        }
        let (i, j) = self.grid.decoder_node(level);
        self.node(i, j)?;
        Ok(self.out.decoded[&level])
    }
}

/// Filled lattice plus the per-level decoder outputs.
#[derive(Clone, Debug)]
pub struct FeatureGrid<'g> {
    pub batch: usize,
    pub levels: [LevelGeom; LEVELS],
    pub nodes: BTreeMap<(usize, usize), Var<'g>>,
    pub decoded: BTreeMap<usize, Var<'g>>,
}

impl<'g> FeatureGrid<'g> {
    pub fn canonical_shape(&self, level: usize) -> Vec<usize> {
        let l = self.levels[level];
        vec![self.batch, l.res, l.res, l.dim]
    }

    fn check(&self, at: (usize, usize), x: &Var<'g>) -> Result<()> {
        let want = self.canonical_shape(at.0);
        if x.shape() != want {
            return Err(Error::dim(format!("grid node {at:?} should be {want:?}, got {:?}", x.shape())));
        }
        Ok(())
    }

    fn insert(&mut self, at: (usize, usize), x: Var<'g>) -> Result<()> {
        self.check(at, &x)?;
        self.nodes.insert(at, x);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<Var<'g>> {
        self.nodes.get(&(i, j)).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Decoder output at full patch resolution (level 0).
    pub fn output(&self) -> Result<Var<'g>> {
        self.decoded.get(&0).copied().ok_or_else(|| Error::State("level-0 decoder output missing".into()))
    }
}
