//! Datasets: the FSLT binary format, class splits, and a deterministic
//! synthetic glyph generator.
//!
//! FSLT layout, little-endian:
//!
//! ```text
//! "FSLT"  u32 version=1
//! u32 count, u32 height, u32 width, u32 channels
//! count*h*w*c f32 pixels (image-major, row-major, channels last)
//! count u32 labels
//! u32 class count
//! optional: "NORM" then channels f64 means and channels f64 std devs
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::checkpoint::Reader;
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSLT";
pub const VERSION: u32 = 1;
const NORM_TAG: &[u8; 4] = b"NORM";

/// Per-channel pixel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, h, w, c]`, raw pixel values.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub norm: Option<Normalization>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Index(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[h, w, c]` of every image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Example indices of every class, in file order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// Images at `indices`, stacked into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.select(indices)
    }

    /// Examples at `indices`, keeping labels and statistics.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.gather(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
        })
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn compute_normalization(&self) -> Normalization {
        let c = self.image_shape()[2];
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for px in self.images.data().chunks(c) {
            for k in 0..c {
                sum[k] += px[k];
                sq[k] += px[k] * px[k];
            }
        }
        let n = (self.images.len() / c.max(1)).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        Normalization { mean, std }
    }

    /// Images standardized with the recorded statistics (or fresh ones when
    /// the file carried none).
    pub fn normalized_images(&self) -> Tensor {
        let norm = self.norm.clone().unwrap_or_else(|| self.compute_normalization());
        let c = norm.mean.len();
        let data = self
            .images
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - norm.mean[i % c]) / norm.std[i % c])
            .collect();
        Tensor::new(self.images.shape().to_vec(), data).expect("same shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [h, w, c] = self.image_shape();
        let mut out = Vec::with_capacity(32 + self.images.len() * 4 + self.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, h as u32, w as u32, c as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.images.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        if let Some(n) = &self.norm {
            out.extend_from_slice(NORM_TAG);
            for v in n.mean.iter().chain(&n.std) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FSLT\""));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported dataset version {version}")));
        }
        let count = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let len = count
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| Error::format(8, "image dimensions overflow"))?;
        let pixels_at = r.pos;
        let raw = r.take(
            len.checked_mul(4)
                .ok_or_else(|| Error::format(pixels_at, "payload too large"))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let labels_at = r.pos;
        let labels = (0..count)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let classes = r.u32()? as usize;
        if let Some(i) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::format(
                labels_at + 4 * i,
                format!("label {} not below class count {classes}", labels[i]),
            ));
        }
        let norm = if r.remaining() > 0 {
            let at = r.pos;
            if r.take(4)? != NORM_TAG {
                return Err(Error::format(at, "unknown trailing section"));
            }
            let mean = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let std = (0..c).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if r.remaining() > 0 {
                return Err(Error::format(r.pos, "trailing bytes after statistics"));
            }
            Some(Normalization { mean, std })
        } else {
            None
        };
        Ok(Dataset {
            images: Tensor::new(vec![count, h, w, c], data)?,
            labels,
            classes,
            norm,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" => Ok(Split::Novel),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// Assignment of every class id to exactly one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    assign: Vec<Split>,
}

impl SplitManifest {
    pub fn new(assign: Vec<Split>) -> Self {
        SplitManifest { assign }
    }

    /// Consecutive blocks: 60% base, 20% val, the rest novel
    /// (24/8/8 for 40 classes).
    pub fn standard(classes: usize) -> Self {
        let base = classes * 3 / 5;
        let val = classes / 5;
        let assign = (0..classes)
            .map(|j| {
                if j < base {
                    Split::Base
                } else if j < base + val {
                    Split::Val
                } else {
                    Split::Novel
                }
            })
            .collect();
        SplitManifest { assign }
    }

    pub fn classes(&self, split: Split) -> Vec<usize> {
        (0..self.assign.len()).filter(|&j| self.assign[j] == split).collect()
    }

    pub fn split_of(&self, class: usize) -> Option<Split> {
        self.assign.get(class).copied()
    }

    pub fn len(&self) -> usize {
        self.assign.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assign.is_empty()
    }

    /// Lines `class_id<TAB>split`; every id `0..n` must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, Split)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::Config(format!("split manifest line {}: {m}", n + 1));
            let (id, split) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected class_id<TAB>split".into()))?;
            let id: usize = id.trim().parse().map_err(|_| bad(format!("bad class id {id:?}")))?;
            let split: Split = split.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            entries.push((id, split));
        }
        let n = entries.len();
        let mut assign: Vec<Option<Split>> = vec![None; n];
        for (id, split) in entries {
            let slot = assign
                .get_mut(id)
                .ok_or_else(|| Error::Config(format!("class {id} out of range for {n} entries")))?;
            if slot.is_some() {
                return Err(Error::Config(format!("class {id} assigned twice")));
            }
            *slot = Some(split);
        }
        Ok(SplitManifest {
            assign: assign.into_iter().map(|s| s.expect("every id filled")).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for SplitManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (j, s) in self.assign.iter().enumerate() {
            writeln!(f, "{j}\t{s}")?;
        }
        Ok(())
    }
}

/// Split each class's examples into a training part and the last
/// `holdout` fraction, kept aside for base-class testing.
pub fn holdout_split(per_class: &[Vec<usize>], classes: &[usize], holdout: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for &j in classes {
        let idx = &per_class[j];
        let keep = idx.len() - ((idx.len() as f64 * holdout).round() as usize).min(idx.len());
        train.extend_from_slice(&idx[..keep]);
        test.extend_from_slice(&idx[keep..]);
    }
    (train, test)
}

/// Settings of the synthetic glyph generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Multiplier on per-image geometric jitter; 0 renders the template.
    pub jitter: f64,
    /// Random strokes added to every image on top of the class glyph's
    /// background, shared across classes.
    pub distractors: usize,
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            classes: 40,
            per_class: 100,
            height: 32,
            width: 32,
            channels: 3,
            seed: 17,
            noise: 0.08,
            jitter: 1.0,
            distractors: 2,
        }
    }
}

/// One stroke of a glyph, in unit coordinates.
#[derive(Debug, Clone, PartialEq)]
struct Bar {
    cx: f64,
    cy: f64,
    angle: f64,
    half_len: f64,
    thickness: f64,
    color: Vec<f64>,
}

/// Stroke colors shared by every class, so color alone never identifies
/// a class.
const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.95, 0.9],
    [0.95, 0.35, 0.2],
    [0.25, 0.85, 0.3],
    [0.3, 0.45, 0.95],
];

fn random_bar(rng: &mut crate::rng::Rng, channels: usize) -> Bar {
    let blob = rng.random_bool(0.25);
    let color = PALETTE[rng.random_range(0..PALETTE.len())];
    Bar {
        cx: rng.random_range(0.22..0.78),
        cy: rng.random_range(0.22..0.78),
        angle: rng.random_range(0.0..PI),
        half_len: if blob { 0.0 } else { rng.random_range(0.12..0.3) },
        thickness: if blob {
            rng.random_range(0.1..0.16)
        } else {
            rng.random_range(0.04..0.08)
        },
        color: (0..channels).map(|k| color[k % 3]).collect(),
    }
}

/// A class recipe: a set of colored bars and blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    bars: Vec<Bar>,
}

impl GlyphSpec {
    pub fn for_class(seed: u64, class: usize, channels: usize) -> Self {
        let mut rng = stream(seed, Purpose::Glyphs, class as u64);
        let n = rng.random_range(2..=4);
        GlyphSpec {
            bars: (0..n).map(|_| random_bar(&mut rng, channels)).collect(),
        }
    }

    /// Render one instance. `index` keys the jitter and noise stream.
    fn render(&self, cfg: &GlyphConfig, index: u64) -> Vec<f64> {
        let mut rng = stream(cfg.seed, Purpose::Glyphs, (1 << 40) | index);
        let j = cfg.jitter;
        let dx = j * rng.random_range(-0.06..0.06);
        let dy = j * rng.random_range(-0.06..0.06);
        let rot = j * rng.random_range(-0.2..0.2);
        let scale = 1.0 + j * rng.random_range(-0.1..0.1);
        let gain = 1.0 + j * rng.random_range(-0.15..0.15);
        let background: Vec<f64> = vec![rng.random_range(0.0..0.3); cfg.channels];
        let mut bars: Vec<Bar> = (0..cfg.distractors)
            .map(|_| {
                let mut b = random_bar(&mut rng, cfg.channels);
                b.half_len *= 0.6;
                b
            })
            .collect();
        bars.extend(self.bars.iter().map(|b| {
            let (ux, uy) = (b.cx - 0.5, b.cy - 0.5);
            let (s, c) = rot.sin_cos();
            Bar {
                cx: 0.5 + scale * (c * ux - s * uy) + dx + j * rng.random_range(-0.02..0.02),
                cy: 0.5 + scale * (s * ux + c * uy) + dy + j * rng.random_range(-0.02..0.02),
                angle: b.angle + rot,
                half_len: b.half_len * scale,
                thickness: b.thickness * scale,
                color: b.color.clone(),
            }
        }));
        let (h, w, ch) = (cfg.height, cfg.width, cfg.channels);
        let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
        let px = 1.0 / h.max(w) as f64;
        let mut out = Vec::with_capacity(h * w * ch);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let mut pix = background.clone();
                for b in &bars {
                    let (s, c) = b.angle.sin_cos();
                    let (rx, ry) = (u - b.cx, v - b.cy);
                    let along = (rx * c + ry * s).clamp(-b.half_len, b.half_len);
                    let (qx, qy) = (rx - along * c, ry - along * s);
                    let dist = (qx * qx + qy * qy).sqrt();
                    let cover = (1.0 - (dist - b.thickness / 2.0) / px).clamp(0.0, 1.0);
                    for (p, &col) in pix.iter_mut().zip(&b.color).take(ch) {
                        *p = *p * (1.0 - cover) + col * gain * cover;
                    }
                }
                for p in pix {
                    let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    out.push((p + n).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

/// Deterministic synthetic dataset, images grouped by class.
pub fn generate_glyphs(cfg: &GlyphConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Argument("glyph generator needs at least 2 classes".into()));
    }
    if cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 {
        return Err(Error::Argument("image dimensions must be >= 1".into()));
    }
    let specs: Vec<GlyphSpec> = (0..cfg.classes)
        .map(|j| GlyphSpec::for_class(cfg.seed, j, cfg.channels))
        .collect();
    let n = cfg.classes * cfg.per_class;
    let images: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| specs[i / cfg.per_class].render(cfg, i as u64))
        .collect();
    let data: Vec<f64> = images.into_iter().flatten().map(|v| v as f32 as f64).collect();
    let labels = (0..n).map(|i| i / cfg.per_class).collect();
    let mut ds = Dataset::new(
        Tensor::new(vec![n, cfg.height, cfg.width, cfg.channels], data)?,
        labels,
        cfg.classes,
    )?;
    ds.norm = Some(ds.compute_normalization());
    Ok(ds)
}
