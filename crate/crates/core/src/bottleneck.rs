//! Convolutional bottleneck at the deepest resolution.
//!
//! Each unit is pre-activation: `[BN-ReLU-1×1] → [BN-ReLU-3×3] → [BN-ReLU-1×1]`,
//! compressing `8C → 2C`, working at `2C`, and restoring `2C → 8C`, with an
//! optional identity shortcut around the whole branch.

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Init, Mode, ParamStore};
use crate::tensor::{Graph, Var};

pub const COMPRESSION: usize = 4;

#[derive(Clone, Debug)]
pub struct CnnUnit {
    pub bn1: BatchNorm2d,
    pub reduce: Conv2d,
    pub bn2: BatchNorm2d,
    pub spatial: Conv2d,
    pub bn3: BatchNorm2d,
    pub restore: Conv2d,
    pub channels: usize,
    pub residual: bool,
}

impl CnnUnit {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, residual: bool) -> Result<Self> {
        if channels % COMPRESSION != 0 {
            return Err(Error::Config(format!("bottleneck width {channels} not divisible by {COMPRESSION}")));
        }
        let mid = channels / COMPRESSION;
        Ok(CnnUnit {
            bn1: BatchNorm2d::new(init, &format!("{name}.bn1"), channels)?,
            reduce: Conv2d::new(init, &format!("{name}.conv1"), channels, mid, 1, 0)?,
            bn2: BatchNorm2d::new(init, &format!("{name}.bn2"), mid)?,
            spatial: Conv2d::new(init, &format!("{name}.conv2"), mid, mid, 3, 1)?,
            bn3: BatchNorm2d::new(init, &format!("{name}.bn3"), mid)?,
            restore: Conv2d::new(init, &format!("{name}.conv3"), mid, channels, 1, 0)?,
            channels,
            residual,
        })
    }

    /// `x` is `[B, C, H, W]`; the output has the same shape.
    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::dim(format!("bottleneck expects [B, {}, H, W], got {s:?}", self.channels)));
        }
        let h = self.reduce.forward(store, g, self.bn1.forward(store, g, x, mode)?.relu()?)?;
        let h = self.spatial.forward(store, g, self.bn2.forward(store, g, h, mode)?.relu()?)?;
        let h = self.restore.forward(store, g, self.bn3.forward(store, g, h, mode)?.relu()?)?;
        if self.residual {
            x.add(h)
        } else {
            Ok(h)
        }
    }
}

/// A stack of [`CnnUnit`]s; resolution and width are unchanged.
#[derive(Clone, Debug)]
pub struct CnnBottleneck {
    pub units: Vec<CnnUnit>,
}

impl CnnBottleneck {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, units: usize, residual: bool) -> Result<Self> {
        let units = (0..units)
            .map(|i| CnnUnit::new(init, &format!("{name}.{i}"), channels, residual))
            .collect::<Result<_>>()?;
        Ok(CnnBottleneck { units })
    }

    pub fn forward<'g>(&self, store: &ParamStore, g: &'g Graph, x: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        self.units.iter().try_fold(x, |h, u| u.forward(store, g, h, mode))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::tensor::Tensor;

    fn build(channels: usize, residual: bool) -> (ParamStore, CnnBottleneck) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, ChaCha8Rng::seed_from_u64(1));
        let b = CnnBottleneck::new(&mut init, "bott", channels, 2, residual).unwrap();
        (store, b)
    }

    #[test]
    fn keeps_shape() {
        let (store, b) = build(192, true);
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 192, 2, 2], |i| (i as f64 * 0.1).sin()));
        assert_eq!(b.forward(&store, &g, x, Mode::Eval).unwrap().shape(), vec![1, 192, 2, 2]);
        assert_eq!(b.forward(&store, &g, x, Mode::Train).unwrap().shape(), vec![1, 192, 2, 2]);
    }

    #[test]
    fn channel_plan_compresses_by_four() {
        let (store, b) = build(32, true);
        let k = store.value(b.units[0].reduce.kernel).shape().to_vec();
        assert_eq!(k, vec![8, 32, 1, 1]);
        assert_eq!(store.value(b.units[0].spatial.kernel).shape(), &[8, 8, 3, 3]);
        assert_eq!(store.value(b.units[0].restore.kernel).shape(), &[32, 8, 1, 1]);
    }

    #[test]
    fn zero_kernels_give_identity() {
        let (mut store, b) = build(16, true);
        for u in &b.units {
            for conv in [&u.reduce, &u.spatial, &u.restore] {
                let shape = store.value(conv.kernel).shape().to_vec();
                store.get_mut(conv.kernel).value = Tensor::zeros(&shape);
            }
        }
        let g = Graph::new();
        let xv = Tensor::from_fn(&[2, 16, 3, 3], |i| i as f64 * 0.01 - 1.0);
        let y = b.forward(&store, &g, g.constant(xv.clone()), Mode::Train).unwrap();
        assert_eq!(y.value(), xv);
    }

    #[test]
    fn channel_mismatch_is_a_dimension_error() {
        let (store, b) = build(16, true);
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 8, 2, 2]));
        assert!(matches!(b.forward(&store, &g, x, Mode::Eval), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_value_batch_statistics_are_rejected() {
        let (store, b) = build(16, true);
        let g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 16, 1, 1]));
        assert!(matches!(b.forward(&store, &g, x, Mode::Train), Err(Error::DegenerateStatistics(_))));
        assert!(b.forward(&store, &g, x, Mode::Eval).is_ok());
    }

    #[test]
    fn eval_mode_is_batch_decoupled() {
        let (store, b) = build(16, true);
        let xa = Tensor::from_fn(&[1, 16, 2, 2], |i| (i as f64).cos());
        let xb = Tensor::from_fn(&[1, 16, 2, 2], |i| (i as f64 * 0.3).sin());
        let run = |x: Tensor| {
            let g = Graph::new();
            b.forward(&store, &g, g.constant(x), Mode::Eval).unwrap().value()
        };
        let ab = run(Tensor::stack_batch(&[xa.clone(), xb.clone()]).unwrap());
        let ba = run(Tensor::stack_batch(&[xb.clone(), xa.clone()]).unwrap());
        let (ab, ba) = (ab.unstack_batch(), ba.unstack_batch());
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
        assert_eq!(ab[0], run(xa));
    }
}
