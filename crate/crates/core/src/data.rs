//! Synthetic angiography phantoms, intensity windowing, case splits and
//! on-disk samples.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::io::{load_tensor, save_tensor, DType};
use crate::tensor::Tensor;

pub const PE_HU: (f64, f64) = (-50.0, 100.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub img_size: usize,
    pub vessels: (usize, usize),
    pub vessel_hu: (f64, f64),
    /// Full tube width in pixels.
    pub vessel_width: (f64, f64),
    pub background_hu: f64,
    pub emboli: (usize, usize),
    pub embolus_hu: (f64, f64),
    /// Semi-axis range of the embolus ellipse in pixels.
    pub embolus_radius: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            img_size: 64,
            vessels: (2, 4),
            vessel_hu: (200.0, 400.0),
            vessel_width: (7.0, 12.0),
            background_hu: -800.0,
            emboli: (1, 2),
            embolus_hu: PE_HU,
            embolus_radius: (2.0, 4.0),
            noise_std: 20.0,
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let err = |m: String| Err(Error::Generation(m));
        if self.img_size < 8 {
            return err(format!("image size {} too small", self.img_size));
        }
        if self.vessels.0 == 0 || self.vessels.0 > self.vessels.1 {
            return err(format!("vessel count range {:?} invalid", self.vessels));
        }
        if self.emboli.0 == 0 || self.emboli.0 > self.emboli.1 {
            return err(format!("embolus count range {:?} invalid", self.emboli));
        }
        if !range_ok(self.embolus_hu) || self.embolus_hu.0 < PE_HU.0 || self.embolus_hu.1 > PE_HU.1 {
            return err(format!("embolus HU range {:?} outside {PE_HU:?}", self.embolus_hu));
        }
        if !range_ok(self.vessel_hu) || !range_ok(self.vessel_width) || !range_ok(self.embolus_radius) {
            return err("intensity and size ranges must be ordered and finite".into());
        }
        if self.embolus_radius.0 < 1.0 {
            return err(format!("embolus radius {} below one pixel", self.embolus_radius.0));
        }
        if self.embolus_radius.1 > self.vessel_width.0 {
            return err(format!(
                "embolus radius {} exceeds the narrowest vessel width {}",
                self.embolus_radius.1, self.vessel_width.0
            ));
        }
        if self.vessel_width.1 * 2.0 >= self.img_size as f64 {
            return err(format!("vessel width {} too large for the image", self.vessel_width.1));
        }
        if !(self.noise_std >= 0.0) {
            return err(format!("noise std {} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// One generated slice; `vessel` is the generator's region bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSlice {
    pub hu: Tensor,
    /// HU values before noise.
    pub clean_hu: Tensor,
    pub mask: BinaryMask,
    pub vessel: BinaryMask,
}

struct Tube {
    pts: [(f64, f64); 3],
    half: f64,
}

impl Tube {
    fn dist(&self, p: (f64, f64)) -> f64 {
        seg_dist(p, self.pts[0], self.pts[1]).min(seg_dist(p, self.pts[1], self.pts[2]))
    }

    fn at(&self, t: f64) -> (f64, f64) {
        let (a, b, u) = if t < 0.5 { (self.pts[0], self.pts[1], 2.0 * t) } else { (self.pts[1], self.pts[2], 2.0 * t - 1.0) };
        (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u)
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn slice_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

fn synth_slice(p: &PhantomParams, rng: &mut ChaCha8Rng) -> Result<SynthSlice> {
    let n = p.img_size;
    let size = n as f64;
    let mut hu = vec![p.background_hu; n * n];
    let mut vessel = vec![false; n * n];
    let mut tubes = Vec::new();
    for _ in 0..rng.gen_range(p.vessels.0..=p.vessels.1) {
        let half = uniform(rng, p.vessel_width) / 2.0;
        let level = uniform(rng, p.vessel_hu);
        // Enter through the top or left edge, leave through the opposite one.
        let (a, c) = if rng.gen_bool(0.5) {
            ((0.0, rng.gen_range(0.0..size)), (size, rng.gen_range(0.0..size)))
        } else {
            ((rng.gen_range(0.0..size), 0.0), (rng.gen_range(0.0..size), size))
        };
        let margin = half.max(2.0);
        let mid = (rng.gen_range(margin..size - margin), rng.gen_range(margin..size - margin));
        let tube = Tube { pts: [a, mid, c], half };
        for r in 0..n {
            for col in 0..n {
                if tube.dist((r as f64 + 0.5, col as f64 + 0.5)) <= half {
                    hu[r * n + col] = level;
                    vessel[r * n + col] = true;
                }
            }
        }
        tubes.push(tube);
    }
    let mut mask = vec![false; n * n];
    for _ in 0..rng.gen_range(p.emboli.0..=p.emboli.1) {
        let tube = &tubes[rng.gen_range(0..tubes.len())];
        let ra = uniform(rng, p.embolus_radius).min(tube.half);
        let rb = uniform(rng, p.embolus_radius).min(tube.half);
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let level = uniform(rng, p.embolus_hu);
        // Centre on the centreline, well inside the image.
        let centre = loop {
            let c = tube.at(rng.gen_range(0.0..1.0));
            let m = ra.max(rb) + 1.0;
            if c.0 >= m && c.0 <= size - m && c.1 >= m && c.1 <= size - m {
                break c;
            }
        };
        let (cs, sn) = (theta.cos(), theta.sin());
        for r in 0..n {
            for col in 0..n {
                let i = r * n + col;
                if !vessel[i] {
                    continue;
                }
                let (dy, dx) = (r as f64 + 0.5 - centre.0, col as f64 + 0.5 - centre.1);
                let (u, v) = (dx * cs + dy * sn, -dx * sn + dy * cs);
                if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                    hu[i] = level;
                    mask[i] = true;
                }
            }
        }
    }
    let clean_hu = Tensor::new(&[n, n], hu)?;
    let noise = Normal::new(0.0, p.noise_std).map_err(|e| Error::Generation(e.to_string()))?;
    let noisy = clean_hu.data().iter().map(|&v| v + noise.sample(rng)).collect();
    Ok(SynthSlice {
        hu: Tensor::new(&[n, n], noisy)?,
        clean_hu,
        mask: BinaryMask::new(n, n, mask)?,
        vessel: BinaryMask::new(n, n, vessel)?,
    })
}

/// Deterministic slices; slice `k` draws from a stream seeded with `seed ⊕ k`.
pub fn synth_case(p: &PhantomParams, slices: usize) -> Result<Vec<SynthSlice>> {
    p.validate()?;
    if slices == 0 {
        return Err(Error::Generation("a case needs at least one slice".into()));
    }
    (0..slices)
        .map(|k| synth_slice(p, &mut ChaCha8Rng::seed_from_u64(slice_seed(p.seed, k))))
        .collect()
}

/// Clamps to `[center − width/2, center + width/2]` and maps linearly to `[0, 1]`.
pub fn hu_window(hu: &Tensor, center: f64, width: f64) -> Result<Tensor> {
    if !(width > 0.0) {
        return Err(Error::Usage(format!("window width must be positive, got {width}")));
    }
    let lo = center - width / 2.0;
    Ok(hu.map(|v| ((v - lo) / width).clamp(0.0, 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split {s:?}; expected train or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePaths {
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub split: Split,
    /// Paths relative to the dataset root.
    pub samples: Vec<SamplePaths>,
}

/// Held-out share: `floor(N / 10)`, at least one case.
pub fn test_count(n: usize) -> usize {
    (n / 10).max(1)
}

/// Seeded case-level split; each output keeps the input order.
pub fn split_cases(cases: &[CaseManifest], seed: u64) -> Result<(Vec<CaseManifest>, Vec<CaseManifest>)> {
    if cases.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 cases to split, got {}", cases.len())));
    }
    let mut order: Vec<usize> = (0..cases.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; cases.len()];
    order[..test_count(cases.len())].iter().for_each(|&i| is_test[i] = true);
    let tag = |c: &CaseManifest, split| CaseManifest { split, ..c.clone() };
    let train = cases.iter().zip(&is_test).filter(|(_, t)| !**t).map(|(c, _)| tag(c, Split::Train)).collect();
    let test = cases.iter().zip(&is_test).filter(|(_, t)| **t).map(|(c, _)| tag(c, Split::Test)).collect();
    Ok((train, test))
}

pub fn save_mask_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    let bytes: Vec<u8> = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_mask_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = std::fs::read(path)?;
    if !bytes.starts_with(b"P5") {
        return Err(Error::format(path, "not a binary PGM (missing P5 magic)"));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(Error::format(path, format!("expected 8-bit gray, got {:?}", other.color()))),
    };
    let (w, h) = img.dimensions();
    let data = img
        .as_raw()
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            255 => Ok(true),
            v => Err(Error::format(path, format!("mask value {v} is not 0 or 255"))),
        })
        .collect::<Result<Vec<_>>>()?;
    BinaryMask::new(h as usize, w as usize, data)
}

/// Image as f32 TSR1 `[H, W]`, mask as 0/255 PGM.
pub fn save_sample(image_path: &Path, mask_path: &Path, image: &Tensor, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.shape();
    if image.shape() != [h, w] {
        return Err(Error::dim(format!("image {:?} and mask {h}x{w} disagree", image.shape())));
    }
    save_tensor(image_path, image, DType::F32)?;
    save_mask_pgm(mask_path, mask)
}

pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<(Tensor, BinaryMask)> {
    let (image, _) = load_tensor(image_path)?;
    let mask = load_mask_pgm(mask_path)?;
    let (h, w) = mask.shape();
    if image.shape() != [h, w] {
        return Err(Error::format(
            image_path,
            format!("image shape {:?} does not match mask {} ({h}x{w})", image.shape(), mask_path.display()),
        ));
    }
    Ok((image, mask))
}

/// `[H, W]` → `[C, H, W]` by copying the single channel.
pub fn replicate_channels(image: &Tensor, channels: usize) -> Result<Tensor> {
    if image.rank() != 2 {
        return Err(Error::dim(format!("expected a [H, W] image, got {:?}", image.shape())));
    }
    let mut data = Vec::with_capacity(image.numel() * channels);
    for _ in 0..channels {
        data.extend_from_slice(image.data());
    }
    let s = image.shape();
    Tensor::new(&[channels, s[0], s[1]], data)
}

#[derive(Clone, Debug)]
pub struct SegSample {
    pub case_id: String,
    pub index: usize,
    /// `[3, H, W]` windowed intensities.
    pub image: Tensor,
    pub mask: BinaryMask,
}

impl SegSample {
    pub fn id(&self) -> String {
        format!("{}/{}", self.case_id, self.index)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cases: usize,
    pub slices: usize,
    pub window_center: f64,
    pub window_width: f64,
    pub seed: u64,
    pub phantom: PhantomParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { cases: 10, slices: 8, window_center: 50.0, window_width: 700.0, seed: 7, phantom: PhantomParams::default() }
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

fn case_seed(seed: u64, case: usize) -> u64 {
    seed.wrapping_add((case as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Generates, windows, splits and writes a dataset under `root`.
pub fn synth_dataset(root: &Path, cfg: &DataConfig) -> Result<Vec<CaseManifest>> {
    let mut cases = Vec::with_capacity(cfg.cases);
    for c in 0..cfg.cases {
        let case_id = format!("case{c:03}");
        let dir = root.join("cases").join(&case_id);
        std::fs::create_dir_all(&dir)?;
        let p = PhantomParams { seed: case_seed(cfg.seed, c), ..cfg.phantom.clone() };
        let mut samples = Vec::new();
        for (k, s) in synth_case(&p, cfg.slices)?.into_iter().enumerate() {
            let rel = SamplePaths {
                image: PathBuf::from("cases").join(&case_id).join(format!("{k}.img.tsr")),
                mask: PathBuf::from("cases").join(&case_id).join(format!("{k}.mask.pgm")),
            };
            let img = hu_window(&s.hu, cfg.window_center, cfg.window_width)?;
            save_sample(&root.join(&rel.image), &root.join(&rel.mask), &img, &s.mask)?;
            samples.push(rel);
        }
        cases.push(CaseManifest { case_id, split: Split::Train, samples });
    }
    let (train, test) = split_cases(&cases, cfg.seed)?;
    let mut all: Vec<CaseManifest> = train.into_iter().chain(test).collect();
    all.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    write_manifest(root, &all)?;
    Ok(all)
}

pub fn write_manifest(root: &Path, cases: &[CaseManifest]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(root.join(MANIFEST))?);
    for c in cases {
        writeln!(f, "{}", serde_json::to_string(c)?)?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub cases: Vec<CaseManifest>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let f = std::fs::File::open(&path)?;
        let mut cases = Vec::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let c: CaseManifest =
                serde_json::from_str(&line).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))?;
            cases.push(c);
        }
        Ok(Dataset { root: root.to_path_buf(), cases })
    }

    /// Every slice of every case in `split`, replicated to `channels`.
    pub fn load_split(&self, split: Split, channels: usize) -> Result<Vec<SegSample>> {
        let mut out = Vec::new();
        for c in self.cases.iter().filter(|c| c.split == split) {
            for (k, s) in c.samples.iter().enumerate() {
                let (img, mask) = load_sample(&self.root.join(&s.image), &self.root.join(&s.mask))?;
                out.push(SegSample { case_id: c.case_id.clone(), index: k, image: replicate_channels(&img, channels)?, mask });
            }
        }
        Ok(out)
    }
}
