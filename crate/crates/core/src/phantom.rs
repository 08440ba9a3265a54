//! Synthetic cardiac-like phantoms with a skewed class profile, and the
//! on-disk dataset format.
//!
//! Classes: 0 background, 1 disk (blood pool), 2 thin ring around the disk
//! (dropped from a fraction of slices), 3 crescent beside the ring. Fewer
//! classes drop structures from the end of that list.
//!
//! Image file layout (little-endian): `"SEGD" | u32 version | u32 h | u32 w |
//! f32 pixels row-major | u8 labels row-major`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Image, LabelMask};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"SEGD";
pub const VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

/// Relative jitter applied to every radius, per image.
const RADIUS_JITTER: f64 = 0.1;
/// Maximum centre displacement in pixels, per image and axis.
const CENTRE_JITTER: f64 = 2.0;
/// Distance between the disk centre and the crescent's outer circle centre,
/// in units of the outer ring radius.
const CRESCENT_OFFSET: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    /// Target pixel fraction per class over the whole dataset.
    pub fractions: Vec<f64>,
    /// Mean intensity per class before noise.
    pub intensities: Vec<f64>,
    /// Probability that the ring is absent from a slice.
    pub ring_dropout: f64,
    pub noise_sigma: f64,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    /// Extra labelled images reserved for final scoring; never trained on.
    pub n_test: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            classes: 4,
            fractions: vec![0.85, 0.08, 0.04, 0.03],
            intensities: vec![0.3, 0.85, 0.05, 0.6],
            ring_dropout: 0.3,
            noise_sigma: 0.1,
            n_labelled: 20,
            n_unlabelled: 180,
            n_test: 100,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=4).contains(&self.classes) {
            return bad(format!("phantoms support 2 to 4 classes, got {}", self.classes));
        }
        if self.fractions.len() != self.classes || self.intensities.len() != self.classes {
            return bad("fractions and intensities need one entry per class".into());
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("class fractions must lie in (0, 1)".into());
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 0.01 {
            return bad(format!("class fractions sum to {sum}, expected 1"));
        }
        if !(0.0..1.0).contains(&self.ring_dropout) {
            return bad("ring dropout must lie in [0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        if self.n_labelled == 0 || self.n_labelled >= self.n_unlabelled {
            return bad("need 0 < labelled count < unlabelled count".into());
        }
        if self.h < crate::model::MIN_SIDE || self.w < crate::model::MIN_SIDE {
            return bad(format!("images must be at least {0}x{0}", crate::model::MIN_SIDE));
        }
        Ok(())
    }
}

/// Nominal radii in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Geometry {
    disk: f64,
    ring_outer: f64,
    crescent: f64,
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cy: f64,
    cx: f64,
    scale: f64,
    ring: bool,
}

fn rasterize(cfg: &PhantomConfig, g: &Geometry, p: &Placement) -> Vec<u8> {
    let (disk, outer, cres) = (g.disk * p.scale, g.ring_outer * p.scale, g.crescent * p.scale);
    let offset = CRESCENT_OFFSET * outer;
    let mut labels = vec![0u8; cfg.h * cfg.w];
    for y in 0..cfg.h {
        for x in 0..cfg.w {
            let dy = y as f64 + 0.5 - p.cy;
            let dx = x as f64 + 0.5 - p.cx;
            let r = (dy * dy + dx * dx).sqrt();
            let rc = (dy * dy + (dx - offset) * (dx - offset)).sqrt();
            let label = if r < disk {
                1
            } else if r < outer {
                if cfg.classes >= 3 && p.ring {
                    2
                } else {
                    0
                }
            } else if cfg.classes >= 4 && rc < cres {
                3
            } else {
                0
            };
            labels[y * cfg.w + x] = label;
        }
    }
    labels
}

fn count(labels: &[u8], class: u8) -> f64 {
    labels.iter().filter(|&&l| l == class).count() as f64
}

/// Smallest radius in `[lo, hi]` whose rasterized count reaches `target`.
fn bisect(lo: f64, hi: f64, target: f64, mut area: impl FnMut(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if area(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Fits nominal radii so a centred, unjittered phantom matches the profile,
/// with the ring area inflated to compensate for dropout.
fn fit_geometry(cfg: &PhantomConfig) -> Result<Geometry> {
    let hw = (cfg.h * cfg.w) as f64;
    let centre = Placement { cy: cfg.h as f64 / 2.0, cx: cfg.w as f64 / 2.0, scale: 1.0, ring: true };
    let side = cfg.h.min(cfg.w) as f64;
    let mut g = Geometry { disk: 0.0, ring_outer: 0.0, crescent: 0.0 };
    g.disk = bisect(0.0, side, cfg.fractions[1] * hw, |r| {
        count(&rasterize(cfg, &Geometry { disk: r, ring_outer: r, crescent: 0.0 }, &centre), 1)
    });
    g.ring_outer = g.disk;
    if cfg.classes >= 3 {
        let target = cfg.fractions[2] * hw / (1.0 - cfg.ring_dropout);
        g.ring_outer = bisect(g.disk, side, target, |r| {
            count(&rasterize(cfg, &Geometry { ring_outer: r, ..g }, &centre), 2)
        });
    }
    if cfg.classes >= 4 {
        let target = cfg.fractions[3] * hw;
        g.crescent = bisect(0.0, side, target, |r| count(&rasterize(cfg, &Geometry { crescent: r, ..g }, &centre), 3));
    }
    // every jittered placement must keep all structures inside the image
    let grow = 1.0 + RADIUS_JITTER;
    let reach_x = (g.ring_outer * grow).max(CRESCENT_OFFSET * g.ring_outer * grow + g.crescent * grow);
    let reach_y = (g.ring_outer * grow).max(g.crescent * grow);
    let fits = |half: f64, reach: f64| reach + CENTRE_JITTER <= half;
    if !fits(cfg.w as f64 / 2.0, reach_x) || !fits(cfg.h as f64 / 2.0, reach_y) {
        return Err(Error::InfeasibleGeometry(format!(
            "structures need a half-extent of {:.1}x{:.1} px but the image is {}x{}",
            reach_y + CENTRE_JITTER,
            reach_x + CENTRE_JITTER,
            cfg.h,
            cfg.w
        )));
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Labelled,
    Unlabelled,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomDataset {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl PhantomDataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Pixel fraction of each class over every image.
    pub fn class_fractions(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.classes];
        for s in &self.samples {
            for &l in &s.mask.labels {
                counts[l as usize] += 1;
            }
        }
        let total = (self.samples.len() * self.h * self.w) as f64;
        counts.into_iter().map(|c| c as f64 / total).collect()
    }
}

fn render<R: Rng>(cfg: &PhantomConfig, labels: &[u8], rng: &mut R) -> Vec<f64> {
    let gain: f64 = rng.random_range(0.9..=1.1);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    // gentle background ramp so intensity alone does not separate the classes
    let (gy, gx): (f64, f64) = (rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1));
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let y = (i / cfg.w) as f64 / cfg.h as f64 - 0.5;
            let x = (i % cfg.w) as f64 / cfg.w as f64 - 0.5;
            let base = cfg.intensities[l as usize] * gain + gy * y + gx * x;
            let n = if cfg.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            // stored as f32 on disk, so quantize here to keep memory and disk identical
            (base + n).clamp(0.0, 1.0) as f32 as f64
        })
        .collect()
}

pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<PhantomDataset> {
    cfg.validate()?;
    let geometry = fit_geometry(cfg)?;
    let total = cfg.n_labelled + cfg.n_unlabelled + cfg.n_test;
    let mut samples = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for i in 0..total {
        let mut r = rng::stream(cfg.seed, rng::purpose::PHANTOM, i as u64, 0);
        let placement = Placement {
            cy: cfg.h as f64 / 2.0 + r.random_range(-CENTRE_JITTER..=CENTRE_JITTER),
            cx: cfg.w as f64 / 2.0 + r.random_range(-CENTRE_JITTER..=CENTRE_JITTER),
            scale: r.random_range(1.0 - RADIUS_JITTER..=1.0 + RADIUS_JITTER),
            ring: r.random::<f64>() >= cfg.ring_dropout,
        };
        let labels = rasterize(cfg, &geometry, &placement);
        let pixels = render(cfg, &labels, &mut r);
        samples.push(Sample {
            image: Image::new(cfg.h, cfg.w, 1, pixels)?,
            mask: LabelMask::new(cfg.h, cfg.w, labels)?,
        });
        splits.push(if i < cfg.n_labelled {
            Split::Labelled
        } else if i < cfg.n_labelled + cfg.n_unlabelled {
            Split::Unlabelled
        } else {
            Split::Test
        });
    }
    Ok(PhantomDataset { h: cfg.h, w: cfg.w, classes: cfg.classes, seed: cfg.seed, samples, splits })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub seed: u64,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub n_test: usize,
    pub files: Vec<MetaEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaEntry {
    pub file: String,
    pub split: Split,
}

pub fn encode_sample(sample: &Sample) -> Vec<u8> {
    let (h, w) = (sample.mask.h, sample.mask.w);
    let mut out = Vec::with_capacity(16 + 5 * h * w);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in &sample.image.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.extend_from_slice(&sample.mask.labels);
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let fail = |m: &str| Error::Format(format!("image file: {m}"));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(fail(&format!("unsupported version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let n = h * w;
    if bytes.len() != 16 + 5 * n {
        return Err(fail(&format!("expected {} bytes for {h}x{w}, found {}", 16 + 5 * n, bytes.len())));
    }
    let data = bytes[16..16 + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = bytes[16 + 4 * n..].to_vec();
    Ok(Sample { image: Image::new(h, w, 1, data)?, mask: LabelMask::new(h, w, labels)? })
}

pub fn save_dataset(data: &PhantomDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(data.samples.len());
    for (i, (s, split)) in data.samples.iter().zip(&data.splits).enumerate() {
        let name = format!("img_{i:05}.segd");
        fs::write(dir.join(&name), encode_sample(s))?;
        files.push(MetaEntry { file: name, split: *split });
    }
    let count = |s: Split| data.splits.iter().filter(|&&x| x == s).count();
    let meta = DatasetMeta {
        format_version: VERSION,
        h: data.h,
        w: data.w,
        classes: data.classes,
        seed: data.seed,
        n_labelled: count(Split::Labelled),
        n_unlabelled: count(Split::Unlabelled),
        n_test: count(Split::Test),
        files,
    };
    let mut f = fs::File::create(dir.join(META_FILE))?;
    serde_json::to_writer_pretty(&mut f, &meta)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<PhantomDataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    if meta.format_version != VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", meta.format_version)));
    }
    let mut samples = Vec::with_capacity(meta.files.len());
    let mut splits = Vec::with_capacity(meta.files.len());
    for entry in &meta.files {
        let s = decode_sample(&fs::read(dir.join(&entry.file))?)?;
        if s.mask.h != meta.h || s.mask.w != meta.w {
            return Err(Error::Format(format!("{} is {}x{}, meta says {}x{}", entry.file, s.mask.h, s.mask.w, meta.h, meta.w)));
        }
        s.mask.check_classes(meta.classes)?;
        samples.push(s);
        splits.push(entry.split);
    }
    let data = PhantomDataset { h: meta.h, w: meta.w, classes: meta.classes, seed: meta.seed, samples, splits };
    let counts = [Split::Labelled, Split::Unlabelled, Split::Test].map(|s| data.indices(s).len());
    if counts != [meta.n_labelled, meta.n_unlabelled, meta.n_test] {
        return Err(Error::Format("split counts in meta.json do not match the file list".into()));
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { n_labelled: 4, n_unlabelled: 12, n_test: 4, ..PhantomConfig::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_phantoms(&small()).unwrap();
        let b = generate_phantoms(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantoms(&PhantomConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn default_profile_frequencies() {
        let cfg = PhantomConfig { n_labelled: 20, n_unlabelled: 180, n_test: 0, ..PhantomConfig::default() };
        let data = generate_phantoms(&cfg).unwrap();
        let realized = data.class_fractions();
        for (r, t) in realized.iter().zip(&cfg.fractions) {
            assert!((r - t).abs() <= 0.2 * t, "realized {realized:?} vs {:?}", cfg.fractions);
        }
    }

    #[test]
    fn no_dropout_keeps_ring_everywhere() {
        let cfg = PhantomConfig { ring_dropout: 0.0, ..small() };
        let data = generate_phantoms(&cfg).unwrap();
        assert!(data.samples.iter().all(|s| s.mask.count(2) > 0));
    }

    #[test]
    fn dropout_removes_ring_sometimes() {
        let data = generate_phantoms(&PhantomConfig { n_unlabelled: 60, ..small() }).unwrap();
        let missing = data.samples.iter().filter(|s| s.mask.count(2) == 0).count();
        assert!(missing > 0 && missing < data.samples.len());
        // the disk is always there
        assert!(data.samples.iter().all(|s| s.mask.count(1) > 0));
    }

    #[test]
    fn splits_follow_counts() {
        let data = generate_phantoms(&small()).unwrap();
        assert_eq!(data.indices(Split::Labelled), (0..4).collect::<Vec<_>>());
        assert_eq!(data.indices(Split::Unlabelled).len(), 12);
        assert_eq!(data.indices(Split::Test).len(), 4);
    }

    #[test]
    fn fewer_classes() {
        for c in 2..=3 {
            let mut cfg = small();
            cfg.classes = c;
            cfg.fractions = if c == 2 { vec![0.9, 0.1] } else { vec![0.86, 0.09, 0.05] };
            cfg.intensities.truncate(c);
            let data = generate_phantoms(&cfg).unwrap();
            assert!(data.samples.iter().all(|s| s.mask.labels.iter().all(|&l| (l as usize) < c)));
        }
    }

    #[test]
    fn infeasible_and_invalid_configs() {
        let huge = PhantomConfig { fractions: vec![0.25, 0.25, 0.25, 0.25], ..small() };
        assert!(matches!(generate_phantoms(&huge), Err(Error::InfeasibleGeometry(_))));
        let bad_sum = PhantomConfig { fractions: vec![0.5, 0.08, 0.04, 0.03], ..small() };
        assert!(matches!(generate_phantoms(&bad_sum), Err(Error::Config(_))));
        let bad_counts = PhantomConfig { n_labelled: 12, n_unlabelled: 12, ..small() };
        assert!(matches!(generate_phantoms(&bad_counts), Err(Error::Config(_))));
    }

    #[test]
    fn disk_round_trip_is_exact() {
        let data = generate_phantoms(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn decode_rejects_corruption() {
        let data = generate_phantoms(&small()).unwrap();
        let bytes = encode_sample(&data.samples[0]);
        assert_eq!(&bytes[..4], b"SEGD");
        assert_eq!(decode_sample(&bytes).unwrap(), data.samples[0]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_sample(&bad).is_err());
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_label = bytes.clone();
        *bad_label.last_mut().unwrap() = 200;
        assert!(decode_sample(&bad_label).unwrap().mask.check_classes(4).is_err());
    }
}
