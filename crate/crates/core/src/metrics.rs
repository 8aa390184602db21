//! Overlap and boundary-distance metrics on binary masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!("mask {h}x{w} needs {} pixels, got {}", h * w, data.len())));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        BinaryMask { h, w, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Foreground pixel coordinates in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len()).filter(|&i| self.data[i]).map(|i| (i / self.w, i % self.w)).collect()
    }

    /// `[B, K, H, W]` logits to one mask per sample: argmax over classes
    /// (ties go to the lower class), or a positive logit when `K == 1`.
    pub fn from_logits(logits: &Tensor) -> Result<Vec<BinaryMask>> {
        let s = logits.shape();
        if s.len() != 4 {
            return Err(Error::dim(format!("logits must be [B, K, H, W], got {s:?}")));
        }
        let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let d = logits.data();
        Ok((0..b)
            .map(|n| {
                let base = n * k * hw;
                let data = (0..hw)
                    .map(|p| {
                        if k == 1 {
                            return d[base + p] > 0.0;
                        }
                        let mut best = 0;
                        for c in 1..k {
                            if d[base + c * hw + p] > d[base + best * hw + p] {
                                best = c;
                            }
                        }
                        best == 1
                    })
                    .collect();
                BinaryMask { h, w, data }
            })
            .collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
            .expect("positive extents")
    }
}

fn same_shape(x: &BinaryMask, y: &BinaryMask) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::dim(format!("mask shapes {:?} and {:?} differ", x.shape(), y.shape())));
    }
    Ok(())
}

/// `2|X∩Y| / (|X|+|Y|)`; two empty masks score 1.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    same_shape(x, y)?;
    let (nx, ny) = (x.count(), y.count());
    if nx + ny == 0 {
        return Ok(1.0);
    }
    let inter = x.data.iter().zip(&y.data).filter(|(a, b)| **a && **b).count();
    Ok(2.0 * inter as f64 / (nx + ny) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdMode {
    /// 95th percentile of the pooled directed distances.
    #[default]
    Percentile,
    /// 0.95 times the symmetric Hausdorff distance.
    PaperScaled,
}

impl std::str::FromStr for HdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "percentile" => Ok(HdMode::Percentile),
            "paper_scaled" => Ok(HdMode::PaperScaled),
            _ => Err(Error::Usage(format!("unknown HD mode {s:?}; expected percentile or paper_scaled"))),
        }
    }
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `m`.
pub fn squared_edt(m: &BinaryMask) -> Vec<f64> {
    let (h, w) = m.shape();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    // Larger than any in-image squared distance, and exact in f64.
    let far = ((h + w) * (h + w)) as f64;
    let mut grid: Vec<f64> = m.data.iter().map(|&b| if b { 0.0 } else { far }).collect();
    let (mut col, mut out) = (vec![0.0; h], vec![0.0; h]);
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        edt_1d(&col, &mut out, &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = out[r];
        }
    }
    let mut row = vec![0.0; w];
    for r in 0..h {
        edt_1d(&grid[r * w..(r + 1) * w], &mut row, &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    grid
}

/// Distances from each foreground pixel of `from` to the nearest of `to`.
pub fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let edt = squared_edt(to);
    from.data.iter().zip(&edt).filter(|(b, _)| **b).map(|(_, d)| d.sqrt()).collect()
}

/// Linear interpolation between order statistics at `q · (n − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn hd95(x: &BinaryMask, y: &BinaryMask, mode: HdMode) -> Result<f64> {
    same_shape(x, y)?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::HdUndefined(format!(
            "{} mask is empty",
            if x.is_empty() { "predicted" } else { "reference" }
        )));
    }
    let mut d = directed_distances(x, y);
    d.extend(directed_distances(y, x));
    match mode {
        HdMode::Percentile => {
            d.sort_by(f64::total_cmp);
            Ok(percentile(&d, 0.95))
        }
        HdMode::PaperScaled => Ok(0.95 * d.iter().copied().fold(0.0, f64::max)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub count: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub hd_undefined: usize,
    pub hd_mode: HdMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub aggregates: Aggregates,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, hd_mode: HdMode) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Usage("cannot aggregate an empty metric set".into()));
        }
        let dscs: Vec<f64> = samples.iter().map(|s| s.dsc).collect();
        let hds: Vec<f64> = samples.iter().filter_map(|s| s.hd95).collect();
        let (dsc_mean, dsc_std) = mean_std(&dscs);
        let (hd95_mean, hd95_std) = if hds.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&hds);
            (Some(m), Some(s))
        };
        let aggregates = Aggregates {
            count: samples.len(),
            dsc_mean,
            dsc_std,
            hd95_mean,
            hd95_std,
            hd_undefined: samples.len() - hds.len(),
            hd_mode,
        };
        Ok(MetricReport { samples, aggregates })
    }

    /// Per-sample rows with columns `case_id, dsc, hd95, hd_defined`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let err = |e: csv::Error| Error::format(path, e.to_string());
        w.write_record(["case_id", "dsc", "hd95", "hd_defined"]).map_err(err)?;
        for s in &self.samples {
            let hd = s.hd95.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([s.case_id.clone(), s.dsc.to_string(), hd, s.hd95.is_some().to_string()]).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.aggregates)?)?;
        Ok(())
    }
}

/// Scores aligned prediction/reference lists; samples are named by index.
pub fn evaluate_set(pred: &[BinaryMask], gt: &[BinaryMask], mode: HdMode) -> Result<MetricReport> {
    let ids: Vec<String> = (0..pred.len()).map(|i| i.to_string()).collect();
    evaluate_named(&ids, pred, gt, mode)
}

pub fn evaluate_named(ids: &[String], pred: &[BinaryMask], gt: &[BinaryMask], mode: HdMode) -> Result<MetricReport> {
    if pred.len() != gt.len() || ids.len() != pred.len() {
        return Err(Error::Usage(format!(
            "{} predictions, {} references and {} ids are not aligned",
            pred.len(),
            gt.len(),
            ids.len()
        )));
    }
    let mut samples = Vec::with_capacity(pred.len());
    for ((id, p), g) in ids.iter().zip(pred).zip(gt) {
        let hd = match hd95(p, g, mode) {
            Ok(v) => Some(v),
            Err(Error::HdUndefined(_)) => None,
            Err(e) => return Err(e),
        };
        samples.push(SampleMetrics { case_id: id.clone(), dsc: dsc(p, g)?, hd95: hd });
    }
    MetricReport::from_samples(samples, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, pts: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| pts.contains(&(r, c)))
    }

    #[test]
    fn dsc_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (1, 1)]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert!((dsc(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&a, &mask(4, 4, &[(3, 3)])).unwrap(), 0.0);
        assert_eq!(dsc(&BinaryMask::empty(4, 4), &BinaryMask::empty(4, 4)).unwrap(), 1.0);
        assert_eq!(dsc(&BinaryMask::empty(4, 4), &b).unwrap(), 0.0);
        assert!(matches!(dsc(&a, &BinaryMask::empty(3, 4)), Err(Error::Dimension(_))));
    }

    #[test]
    fn three_four_five() {
        let x = mask(5, 5, &[(0, 0)]);
        let y = mask(5, 5, &[(3, 4)]);
        assert_eq!(hd95(&x, &y, HdMode::Percentile).unwrap(), 5.0);
        assert_eq!(hd95(&x, &y, HdMode::PaperScaled).unwrap(), 4.75);
        assert_eq!(hd95(&x, &x, HdMode::Percentile).unwrap(), 0.0);
        assert_eq!(hd95(&x, &x, HdMode::PaperScaled).unwrap(), 0.0);
    }

    #[test]
    fn empty_masks_leave_hd_undefined() {
        let x = mask(3, 3, &[(1, 1)]);
        assert!(matches!(hd95(&x, &BinaryMask::empty(3, 3), HdMode::Percentile), Err(Error::HdUndefined(_))));
    }

    #[test]
    fn edt_matches_direct_search() {
        let m = mask(6, 7, &[(0, 6), (4, 1), (5, 5)]);
        let edt = squared_edt(&m);
        for r in 0..6 {
            for c in 0..7 {
                let best = m
                    .points()
                    .iter()
                    .map(|&(a, b)| (a as f64 - r as f64).powi(2) + (b as f64 - c as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(edt[r * 7 + c], best);
            }
        }
    }

    #[test]
    fn aggregates_use_population_std() {
        let full = mask(2, 2, &[(0, 0), (1, 1)]);
        let half = mask(2, 2, &[(0, 0), (0, 1), (1, 0)]);
        let partial = mask(2, 2, &[(0, 0)]);
        let r = evaluate_set(&[full.clone(), partial.clone()], &[full.clone(), half.clone()], HdMode::Percentile)
            .unwrap();
        assert_eq!(r.aggregates.dsc_mean, 0.75);
        assert_eq!(r.aggregates.dsc_std, 0.25);
        let r = evaluate_set(
            &[full.clone(), BinaryMask::empty(2, 2), full.clone()],
            &[full.clone(), full.clone(), full.clone()],
            HdMode::Percentile,
        )
        .unwrap();
        assert_eq!(r.aggregates.hd_undefined, 1);
        assert_eq!(r.aggregates.hd95_mean, Some(0.0));
        assert!(matches!(evaluate_set(&[full.clone()], &[], HdMode::Percentile), Err(Error::Usage(_))));
    }

    #[test]
    fn single_identical_sample() {
        let m = mask(3, 3, &[(1, 1), (2, 2)]);
        let r = evaluate_set(&[m.clone()], &[m], HdMode::Percentile).unwrap();
        assert_eq!((r.aggregates.dsc_mean, r.aggregates.dsc_std), (1.0, 0.0));
        assert_eq!((r.aggregates.hd95_mean, r.aggregates.hd95_std), (Some(0.0), Some(0.0)));
    }

    #[test]
    fn logits_to_masks() {
        let t = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(BinaryMask::from_logits(&t).unwrap()[0].data(), &[false, false, true]);
        let t = Tensor::new(&[1, 1, 1, 2], vec![-0.5, 0.5]).unwrap();
        assert_eq!(BinaryMask::from_logits(&t).unwrap()[0].data(), &[false, true]);
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = mask(3, 3, &[(1, 1)]);
        let r = evaluate_named(&["a".into(), "b".into()], &[m.clone(), BinaryMask::empty(3, 3)], &[m.clone(), m], HdMode::Percentile)
            .unwrap();
        r.write_csv(&dir.path().join("r.csv")).unwrap();
        r.write_json(&dir.path().join("r.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv, "case_id,dsc,hd95,hd_defined\na,1,0,true\nb,0,,false\n");
    }
}
