//! Shifted-window transformer layers on channels-last `[B, H, W, C]` maps.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Logit offset separating tokens from different pre-shift regions.
pub const MASK_NEG: f64 = -1e9;
pub const PATCH: usize = 4;

fn dims4(x: &Var<'_>, what: &str) -> Result<[usize; 4]> {
    let s = x.shape();
    <[usize; 4]>::try_from(s.as_slice()).map_err(|_| Error::dim(format!("{what} expects [B, H, W, C], got {s:?}")))
}

/// Window size and shift actually used at a `res × res` grid: a window never
/// exceeds the grid, and a window covering the whole grid is not shifted.
pub fn effective_window(res: usize, window: usize, shifted: bool) -> (usize, usize) {
    if res <= window {
        (res, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// 4×4 patch partition followed by a linear embedding 48 → C.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new(init: &mut Init<'_>, name: &str, in_channels: usize, dim: usize) -> Result<Self> {
        Ok(PatchEmbed { proj: Linear::new(init, &format!("{name}.proj"), PATCH * PATCH * in_channels, dim, true)?, in_channels })
    }

    /// `[B, 3, H, W]` → `[B, H/4, W/4, C]`; each patch flattens as (row, col, channel).
    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, image: Var<'g>) -> Result<Var<'g>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::dim(format!("patch embed expects [B, {}, H, W], got {s:?}", self.in_channels)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::dim(format!("image extent {h}x{w} not divisible by patch size {PATCH}")));
        }
        let (hp, wp) = (h / PATCH, w / PATCH);
        let patches = image
            .reshape(&[b, c, hp, PATCH, wp, PATCH])?
            .permute(&[0, 2, 4, 3, 5, 1])?
            .reshape(&[b, hp, wp, PATCH * PATCH * c])?;
        self.proj.forward(store, g, patches)
    }
}

/// `[B, H, W, C]` → `[B·(H/w)·(W/w), w·w, C]`, windows in row-major order.
pub fn window_partition<'g>(x: Var<'g>, w: usize) -> Result<Var<'g>> {
    let [b, h, wd, c] = dims4(&x, "window_partition")?;
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::dim(format!("grid {h}x{wd} not divisible by window {w}")));
    }
    x.reshape(&[b, h / w, w, wd / w, w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * (h / w) * (wd / w), w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<'g>(windows: Var<'g>, w: usize, b: usize, h: usize, wd: usize) -> Result<Var<'g>> {
    let s = windows.shape();
    if s.len() != 3 || h % w != 0 || wd % w != 0 || s[0] != b * (h / w) * (wd / w) || s[1] != w * w {
        return Err(Error::dim(format!("windows {s:?} do not tile a {b}x{h}x{wd} grid with window {w}")));
    }
    let c = s[2];
    windows
        .reshape(&[b, h / w, wd / w, w, w, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h, wd, c])
}

/// Region label of every position after a cyclic shift by `-s`, following
/// the three-band split per axis: `[0, n-w)`, `[n-w, n-s)`, `[n-s, n)`.
fn shift_regions(h: usize, wd: usize, w: usize, s: usize) -> Vec<usize> {
    let band = |i: usize, n: usize| {
        if i < n - w {
            0
        } else if i < n - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * wd);
    for i in 0..h {
        for j in 0..wd {
            labels.push(band(i, h) * 3 + band(j, wd));
        }
    }
    labels
}

/// Additive mask `[nW, T, T]`: 0 within a region, [`MASK_NEG`] across regions.
pub fn shift_mask(h: usize, wd: usize, w: usize, s: usize) -> Tensor {
    let labels = shift_regions(h, wd, w, s);
    let (nh, nw, t) = (h / w, wd / w, w * w);
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wi in 0..nh {
        for wj in 0..nw {
            let token = |k: usize| labels[(wi * w + k / w) * wd + wj * w + k % w];
            for a in 0..t {
                for bk in 0..t {
                    data.push(if token(a) == token(bk) { 0.0 } else { MASK_NEG });
                }
            }
        }
    }
    Tensor::new(&[nh * nw, t, t], data).expect("consistent extents")
}

/// Gather index mapping a `[(2w-1)², heads]` table to a `[heads, T, T]` bias.
fn relative_bias_index(w: usize, heads: usize) -> Rc<[usize]> {
    let t = w * w;
    let span = 2 * w - 1;
    let mut index = Vec::with_capacity(heads * t * t);
    for hd in 0..heads {
        for a in 0..t {
            for b in 0..t {
                let dr = a / w + w - 1 - b / w;
                let dc = a % w + w - 1 - b % w;
                index.push((dr * span + dc) * heads + hd);
            }
        }
    }
    index.into()
}

/// Multi-head self-attention inside non-overlapping windows.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub rel_bias: Option<ParamId>,
}

impl WindowAttention {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize, window: usize, rel_bias: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let rel_bias = if rel_bias {
            let rows = (2 * window - 1) * (2 * window - 1);
            let t = init.trunc_normal(&[rows, heads], crate::nn::INIT_STD);
            Some(init.store.add(format!("{name}.rel_pos_bias"), t, true)?)
        } else {
            None
        };
        Ok(WindowAttention {
            dim,
            heads,
            window,
            q: Linear::new(init, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim, true)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim, true)?,
            rel_bias,
        })
    }

    /// W-MSA when `shift == 0`, SW-MSA otherwise.
    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>, shift: usize) -> Result<Var<'g>> {
        Ok(self.forward_with_probs(store, g, x, shift)?.0)
    }

    /// Also returns the attention probabilities `[B·nW, heads, T, T]`.
    pub fn forward_with_probs<'g>(
        &self,
        store: &ParamStore,
        g: &'g Graph,
        x: Var<'g>,
        shift: usize,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let [b, h, wd, c] = dims4(&x, "window attention")?;
        let w = self.window;
        if c != self.dim {
            return Err(Error::dim(format!("attention built for dim {}, got {c}", self.dim)));
        }
        if shift >= w {
            return Err(Error::Config(format!("shift {shift} must be smaller than window {w}")));
        }
        if h % w != 0 || wd % w != 0 {
            return Err(Error::dim(format!("grid {h}x{wd} not divisible by window {w}")));
        }
        let (heads, d, t) = (self.heads, c / self.heads, w * w);
        let shifted = if shift > 0 { x.roll(1, -(shift as isize))?.roll(2, -(shift as isize))? } else { x };
        let win = window_partition(shifted, w)?;
        let bn = win.shape()[0];
        let split = |lin: &Linear, axes: &[usize]| -> Result<Var<'g>> {
            lin.forward(store, g, win)?.reshape(&[bn, t, heads, d])?.permute(axes)
        };
        let q = split(&self.q, &[0, 2, 1, 3])?;
        let kt = split(&self.k, &[0, 2, 3, 1])?;
        let v = split(&self.v, &[0, 2, 1, 3])?;
        let mut logits = q.matmul(kt)?.scale(1.0 / (d as f64).sqrt())?;
        if let Some(table) = self.rel_bias {
            let bias = store.var(g, table).gather(relative_bias_index(w, heads), &[heads, t, t])?;
            logits = logits.add(bias)?;
        }
        if shift > 0 {
            let n_win = (h / w) * (wd / w);
            let mask = shift_mask(h, wd, w, shift).reshape(&[n_win, 1, t, t])?;
            logits = logits
                .reshape(&[b, n_win, heads, t, t])?
                .add(g.constant(mask))?
                .reshape(&[bn, heads, t, t])?;
        }
        let probs = logits.softmax(3)?;
        let merged = probs.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[bn, t, c])?;
        let out = window_reverse(self.o.forward(store, g, merged)?, w, b, h, wd)?;
        let out = if shift > 0 { out.roll(1, shift as isize)?.roll(2, shift as isize)? } else { out };
        Ok((out, probs))
    }
}

pub const MLP_RATIO: usize = 4;

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
    pub shift: usize,
    pub resolution: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    /// Side of the square feature grid the block runs on.
    pub resolution: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub rel_bias: bool,
}

impl SwinBlock {
    pub fn new(init: &mut Init<'_>, name: &str, spec: BlockSpec, shifted: bool) -> Result<Self> {
        let (w, shift) = effective_window(spec.resolution, spec.window, shifted);
        if spec.resolution % w != 0 {
            return Err(Error::Config(format!("{name}: resolution {} not divisible by window {w}", spec.resolution)));
        }
        let hidden = spec.mlp_ratio * spec.dim;
        Ok(SwinBlock {
            norm1: LayerNorm::new(init, &format!("{name}.norm1"), spec.dim)?,
            attn: WindowAttention::new(init, &format!("{name}.attn"), spec.dim, spec.heads, w, spec.rel_bias)?,
            norm2: LayerNorm::new(init, &format!("{name}.norm2"), spec.dim)?,
            fc1: Linear::new(init, &format!("{name}.fc1"), spec.dim, hidden, true)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, spec.dim, true)?,
            shifted,
            shift,
            resolution: spec.resolution,
        })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let a = self.attn.forward(store, g, self.norm1.forward(store, g, x)?, self.shift)?;
        let x = x.add(a)?;
        let hidden = self.fc1.forward(store, g, self.norm2.forward(store, g, x)?)?.gelu()?;
        x.add(self.fc2.forward(store, g, hidden)?)
    }
}

/// A non-shifted block followed by a shifted one.
#[derive(Clone, Debug)]
pub struct DoubleSwinBlock {
    pub first: SwinBlock,
    pub second: SwinBlock,
}

impl DoubleSwinBlock {
    pub fn new(init: &mut Init<'_>, name: &str, spec: BlockSpec) -> Result<Self> {
        Self::from_blocks(
            SwinBlock::new(init, &format!("{name}.0"), spec, false)?,
            SwinBlock::new(init, &format!("{name}.1"), spec, true)?,
        )
    }

    pub fn from_blocks(first: SwinBlock, second: SwinBlock) -> Result<Self> {
        if first.shifted || !second.shifted {
            return Err(Error::Config(format!(
                "double block needs shift flags (false, true), got ({}, {})",
                first.shifted, second.shifted
            )));
        }
        Ok(DoubleSwinBlock { first, second })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let x = self.first.forward(store, g, x)?;
        self.second.forward(store, g, x)
    }
}

/// Parity-grid concatenation to 4C followed by a bias-free linear 4C → 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(PatchMerge { reduction: Linear::new(init, &format!("{name}.reduction"), 4 * dim, 2 * dim, false)? })
    }

    /// Channel blocks are ordered (even row, even col), (odd, even), (even, odd), (odd, odd).
    pub fn parity_concat<'g>(x: Var<'g>) -> Result<Var<'g>> {
        let [b, h, w, c] = dims4(&x, "patch merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dim(format!("patch merge needs even extents, got {h}x{w}")));
        }
        x.reshape(&[b, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[b, h / 2, w / 2, 4 * c])
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let merged = Self::parity_concat(x)?;
        self.reduction.forward(store, g, merged)
    }
}

/// Spreads each position's `f²·C'` channels over an `f × f` block of `C'`
/// channels, using the same offset order as [`PatchMerge::parity_concat`].
pub fn spread_channels<'g>(x: Var<'g>, factor: usize) -> Result<Var<'g>> {
    let [b, h, w, c] = dims4(&x, "channel spread")?;
    let f2 = factor * factor;
    if c % f2 != 0 {
        return Err(Error::dim(format!("{c} channels cannot spread over a {factor}x{factor} block")));
    }
    x.reshape(&[b, h, w, factor, factor, c / f2])?
        .permute(&[0, 1, 4, 2, 3, 5])?
        .reshape(&[b, h * factor, w * factor, c / f2])
}

/// Learned 2× upsampling: linear C → 2C, then a 2×2 spread to C/2 channels.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    pub expand: Linear,
}

impl PatchExpand {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        if dim % 2 != 0 {
            return Err(Error::dim(format!("patch expand needs an even channel count, got {dim}")));
        }
        Ok(PatchExpand { expand: Linear::new(init, &format!("{name}.expand"), dim, 2 * dim, false)? })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let c = dims4(&x, "patch expand")?[3];
        if c % 2 != 0 {
            return Err(Error::dim(format!("patch expand needs an even channel count, got {c}")));
        }
        spread_channels(self.expand.forward(store, g, x)?, 2)
    }
}

/// Final 4× upsampling: linear C → 16C, then a 4×4 spread keeping C channels.
#[derive(Clone, Debug)]
pub struct FinalExpand {
    pub expand: Linear,
}

impl FinalExpand {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(FinalExpand { expand: Linear::new(init, &format!("{name}.expand"), dim, 16 * dim, false)? })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        spread_channels(self.expand.forward(store, g, x)?, 4)
    }
}

#[cfg(test)]
mod tests;
