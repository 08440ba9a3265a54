//! Weak and strong data augmentation. Geometric parts (flip, translation)
//! move image, labels and probability maps together; photometric parts
//! (gamma, noise, cutout) touch the image only.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::{clamp_probs, Image, LabelMask, ProbMap, PROB_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSpec {
    pub flip_p: f64,
    pub max_shift: usize,
    /// Noise sigma is drawn uniformly from `[0, noise_sigma_max]`.
    pub noise_sigma_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    /// Upper bound on the cutout area as a fraction of the image; 0 disables it.
    pub cutout_max_frac: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self::weak()
    }
}

impl AugmentSpec {
    pub fn weak() -> Self {
        Self {
            flip_p: 0.5,
            max_shift: 2,
            noise_sigma_max: 0.0,
            gamma_min: 1.0,
            gamma_max: 1.0,
            cutout_max_frac: 0.0,
        }
    }

    pub fn strong() -> Self {
        Self {
            noise_sigma_max: 0.1,
            gamma_min: 0.7,
            gamma_max: 1.4,
            cutout_max_frac: 0.25,
            ..Self::weak()
        }
    }

    pub fn identity() -> Self {
        Self { flip_p: 0.0, max_shift: 0, ..Self::weak() }
    }
}

/// Horizontal flip followed by an integer translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometric {
    pub flip: bool,
    pub dy: i32,
    pub dx: i32,
}

impl Geometric {
    pub fn is_identity(&self) -> bool {
        !self.flip && self.dy == 0 && self.dx == 0
    }

    /// Transforms one `h x w` plane; pixels shifted in from outside take `fill`.
    pub fn apply_plane<T: Copy>(&self, src: &[T], h: usize, w: usize, fill: T) -> Vec<T> {
        let mut out = vec![fill; h * w];
        for y in 0..h {
            let sy = y as i64 - self.dy as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let tx = x as i64 - self.dx as i64;
                if tx < 0 || tx >= w as i64 {
                    continue;
                }
                let sx = if self.flip { w as i64 - 1 - tx } else { tx };
                out[y * w + x] = src[sy as usize * w + sx as usize];
            }
        }
        out
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let hw = img.pixels();
        let data = (0..img.channels)
            .flat_map(|c| self.apply_plane(&img.data[c * hw..(c + 1) * hw], img.h, img.w, 0.0))
            .collect();
        Image { data, ..img.clone() }
    }

    /// Pixels entering from outside are labelled background (class 0).
    pub fn apply_mask(&self, mask: &LabelMask) -> LabelMask {
        LabelMask { labels: self.apply_plane(&mask.labels, mask.h, mask.w, 0), ..mask.clone() }
    }

    /// Pixels entering from outside become confident background.
    pub fn apply_probs(&self, p: &ProbMap) -> ProbMap {
        let hw = p.pixels();
        let probs = (0..p.classes)
            .flat_map(|c| {
                let fill = if c == 0 { 1.0 } else { 0.0 };
                self.apply_plane(&p.probs[c * hw..(c + 1) * hw], p.h, p.w, fill)
            })
            .collect();
        clamp_probs(ProbMap { probs, ..p.clone() }, PROB_EPS)
    }
}

/// Rectangle zeroed by cutout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cutout {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// One realized augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub geometric: Geometric,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
    pub cutout: Option<Cutout>,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        Self { geometric: Geometric::default(), gamma: 1.0, noise_sigma: 0.0, noise_seed: 0, cutout: None }
    }

    pub fn sample<R: Rng + ?Sized>(spec: &AugmentSpec, h: usize, w: usize, rng: &mut R) -> Self {
        let flip = spec.flip_p > 0.0 && rng.random::<f64>() < spec.flip_p;
        let s = spec.max_shift as i32;
        let (dy, dx) = if s > 0 {
            (rng.random_range(-s..=s), rng.random_range(-s..=s))
        } else {
            (0, 0)
        };
        let gamma = if spec.gamma_max > spec.gamma_min {
            rng.random_range(spec.gamma_min..=spec.gamma_max)
        } else {
            spec.gamma_min
        };
        let noise_sigma = if spec.noise_sigma_max > 0.0 {
            rng.random_range(0.0..=spec.noise_sigma_max)
        } else {
            0.0
        };
        let noise_seed = rng.random();
        let cutout = (spec.cutout_max_frac > 0.0).then(|| {
            let area = rng.random_range(0.0..=spec.cutout_max_frac) * (h * w) as f64;
            let aspect: f64 = rng.random_range(0.5..=2.0);
            let ch = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let cw = ((area / ch as f64).floor() as usize).clamp(1, w);
            let y = rng.random_range(0..=h - ch);
            let x = rng.random_range(0..=w - cw);
            Cutout { y, x, h: ch, w: cw }
        });
        Self { geometric: Geometric { flip, dy, dx }, gamma, noise_sigma, noise_seed, cutout }
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let mut out = self.geometric.apply_image(img);
        if self.gamma != 1.0 {
            for v in out.data.iter_mut() {
                *v = v.clamp(0.0, 1.0).powf(self.gamma);
            }
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("positive sigma");
            let mut r = crate::rng::stream(self.noise_seed, 0, 0, 0);
            for v in out.data.iter_mut() {
                *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
        if let Some(c) = self.cutout {
            let hw = out.pixels();
            for ch in 0..out.channels {
                for y in c.y..c.y + c.h {
                    let row = ch * hw + y * out.w;
                    out.data[row + c.x..row + c.x + c.w].fill(0.0);
                }
            }
        }
        out
    }
}

/// Draws and applies an augmentation; labels follow the geometric part only.
pub fn augment<R: Rng + ?Sized>(
    img: &Image,
    gt: Option<&LabelMask>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> (Image, Option<LabelMask>, AugmentDraw) {
    let draw = AugmentDraw::sample(spec, img.h, img.w, rng);
    let out = draw.apply_image(img);
    let mask = gt.map(|m| draw.geometric.apply_mask(m));
    (out, mask, draw)
}
