//! Per-class segmentation metrics: Dice, average symmetric surface distance
//! and Hausdorff distance over 4-connected mask boundaries, plus sensitivity.
//!
//! Distances are Euclidean in pixel units and are computed through an exact
//! squared Euclidean distance transform of the opposite boundary.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::LabelMask;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::ShapeMismatch(format!("mask has {} bits, expected {}", bits.len(), h * w)));
        }
        Ok(Self { h, w, bits })
    }

    pub fn from_labels(mask: &LabelMask, class: usize) -> Self {
        let bits = mask.labels.iter().map(|&l| l as usize == class).collect();
        Self { h: mask.h, w: mask.w, bits }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Member pixels with a 4-neighbour outside the mask or on the image edge.
    pub fn boundary(&self) -> BinaryMask {
        let (h, w) = (self.h, self.w);
        let at = |y: usize, x: usize| self.bits[y * w + x];
        let mut bits = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !at(y, x) {
                    continue;
                }
                bits[y * w + x] = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !at(y - 1, x)
                    || !at(y + 1, x)
                    || !at(y, x - 1)
                    || !at(y, x + 1);
            }
        }
        BinaryMask { h, w, bits }
    }

    fn same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// `2 |A n B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_shape(b)?;
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

const INF: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel.
fn squared_distance_transform(sites: &BinaryMask) -> Vec<f64> {
    let (h, w) = (sites.h, sites.w);
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut grid: Vec<f64> = sites.bits.iter().map(|&b| if b { 0.0 } else { INF }).collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out, &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
fn boundary_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let dt = squared_distance_transform(to);
    from.bits
        .iter()
        .zip(&dt)
        .filter(|(b, _)| **b)
        .map(|(_, d)| d.sqrt())
        .collect()
}

fn boundaries(a: &BinaryMask, b: &BinaryMask) -> Result<(BinaryMask, BinaryMask)> {
    a.same_shape(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance needs two non-empty masks"));
    }
    Ok((a.boundary(), b.boundary()))
}

/// Symmetric Hausdorff distance between the two boundaries.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (ba, bb) = boundaries(a, b)?;
    let ab = boundary_distances(&ba, &bb).into_iter().fold(0.0, f64::max);
    let ba_ = boundary_distances(&bb, &ba).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba_))
}

/// Average symmetric surface distance.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (ba, bb) = boundaries(a, b)?;
    let ab = boundary_distances(&ba, &bb);
    let ba_ = boundary_distances(&bb, &ba);
    let n = ab.len() + ba_.len();
    Ok((ab.iter().sum::<f64>() + ba_.iter().sum::<f64>()) / n as f64)
}

/// `TP / (TP + FN)`; undefined when the reference mask is empty.
pub fn sensitivity(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<f64>> {
    pred.same_shape(gt)?;
    let tp = pred.bits.iter().zip(&gt.bits).filter(|(p, g)| **p && **g).count();
    let pos = gt.count();
    Ok((pos > 0).then(|| tp as f64 / pos as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    pub asd: Option<f64>,
    pub hd: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Per-class metrics and their macro averages. Macro averages run over the
/// foreground classes `1..C` (all classes when `C == 1`); undefined distance
/// values are skipped and counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_dsc: f64,
    pub macro_asd: Option<f64>,
    pub macro_hd: Option<f64>,
    pub macro_sensitivity: Option<f64>,
    pub excluded_asd: usize,
    pub excluded_hd: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

impl MetricReport {
    fn from_classes(classes: Vec<ClassMetrics>) -> Self {
        let fg: Vec<&ClassMetrics> = if classes.len() > 1 { classes[1..].iter().collect() } else { classes.iter().collect() };
        let macro_dsc = fg.iter().map(|c| c.dsc).sum::<f64>() / fg.len().max(1) as f64;
        let (macro_asd, excluded_asd) = mean_defined(fg.iter().map(|c| c.asd));
        let (macro_hd, excluded_hd) = mean_defined(fg.iter().map(|c| c.hd));
        let (macro_sensitivity, _) = mean_defined(fg.iter().map(|c| c.sensitivity));
        Self { classes, macro_dsc, macro_asd, macro_hd, macro_sensitivity, excluded_asd, excluded_hd }
    }

    pub fn class(&self, c: usize) -> &ClassMetrics {
        &self.classes[c]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["class", "dsc", "asd", "hd", "sensitivity"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for c in &self.classes {
            wtr.write_record([
                c.class.to_string(),
                c.dsc.to_string(),
                opt(c.asd),
                opt(c.hd),
                opt(c.sensitivity),
            ])?;
        }
        wtr.write_record([
            "macro".to_string(),
            self.macro_dsc.to_string(),
            opt(self.macro_asd),
            opt(self.macro_hd),
            opt(self.macro_sensitivity),
        ])?;
        wtr.flush()?;
        Ok(())
    }
}

/// One-vs-rest metrics for every class of a single image.
pub fn evaluate(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<MetricReport> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    pred.check_classes(classes)?;
    gt.check_classes(classes)?;
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let p = BinaryMask::from_labels(pred, c);
        let g = BinaryMask::from_labels(gt, c);
        let defined = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        };
        per_class.push(ClassMetrics {
            class: c,
            dsc: dice(&p, &g)?,
            asd: defined(asd(&p, &g))?,
            hd: defined(hausdorff(&p, &g))?,
            sensitivity: sensitivity(&p, &g)?,
        });
    }
    Ok(MetricReport::from_classes(per_class))
}

/// Dataset-level metrics built one image at a time. Dice and sensitivity pool
/// pixel counts over every image, so the evaluated set behaves like one
/// volume; HD and ASD are averaged over the images where they are defined.
#[derive(Clone, Debug)]
pub struct DatasetMetrics {
    classes: usize,
    intersection: Vec<usize>,
    pred: Vec<usize>,
    gt: Vec<usize>,
    asd_sum: Vec<f64>,
    asd_n: Vec<usize>,
    hd_sum: Vec<f64>,
    hd_n: Vec<usize>,
    images: usize,
}

impl DatasetMetrics {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            intersection: vec![0; classes],
            pred: vec![0; classes],
            gt: vec![0; classes],
            asd_sum: vec![0.0; classes],
            asd_n: vec![0; classes],
            hd_sum: vec![0.0; classes],
            hd_n: vec![0; classes],
            images: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        let report = evaluate(pred, gt, self.classes)?;
        for c in 0..self.classes {
            for (p, g) in pred.labels.iter().zip(&gt.labels) {
                let (p, g) = (*p as usize == c, *g as usize == c);
                self.intersection[c] += (p && g) as usize;
                self.pred[c] += p as usize;
                self.gt[c] += g as usize;
            }
            let m = &report.classes[c];
            if let Some(v) = m.asd {
                self.asd_sum[c] += v;
                self.asd_n[c] += 1;
            }
            if let Some(v) = m.hd {
                self.hd_sum[c] += v;
                self.hd_n[c] += 1;
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn images(&self) -> usize {
        self.images
    }

    pub fn report(&self) -> MetricReport {
        let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let per_class = (0..self.classes)
            .map(|c| {
                let total = self.pred[c] + self.gt[c];
                ClassMetrics {
                    class: c,
                    dsc: if total == 0 { 1.0 } else { 2.0 * self.intersection[c] as f64 / total as f64 },
                    asd: mean(self.asd_sum[c], self.asd_n[c]),
                    hd: mean(self.hd_sum[c], self.hd_n[c]),
                    sensitivity: (self.gt[c] > 0).then(|| self.intersection[c] as f64 / self.gt[c] as f64),
                }
            })
            .collect();
        MetricReport::from_classes(per_class)
    }
}
