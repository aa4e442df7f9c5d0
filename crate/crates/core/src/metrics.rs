//! Segmentation metrics: Dice (DSC), IoU, micro-averaged pixel F1 (F1-S),
//! 95th-percentile Hausdorff distance (HD95), per-class reports and their
//! aggregation over folds and runs.
//!
//! Conventions:
//! * Dice and IoU of two empty masks are 1.
//! * HD95 pools the nearest-neighbour distance of every foreground pixel of
//!   each mask to the other mask and takes the linearly interpolated 95th
//!   percentile. Two empty masks give 0; exactly one empty mask gives the
//!   image diagonal and is flagged.
//! * Per-class DSC/IoU/HD95 average per-image values over the images whose
//!   ground truth contains the class (all images when none does); F1 pools
//!   pixel counts over the whole set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer class-id masks `[B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBatch {
    data: Array3<u8>,
    num_classes: usize,
}

impl MaskBatch {
    pub fn new(data: Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::data("mask batch needs at least one class"));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::data(format!(
                "mask value {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self { data, num_classes })
    }

    pub fn from_masks(masks: &[Array2<u8>], num_classes: usize) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::data("empty mask list"))?;
        let (h, w) = first.dim();
        let mut data = Array3::<u8>::zeros((masks.len(), h, w));
        for (i, m) in masks.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::shape(format!(
                    "mask {i} is {:?}, expected {:?}",
                    m.dim(),
                    (h, w)
                )));
            }
            data.index_axis_mut(ndarray::Axis(0), i).assign(m);
        }
        Self::new(data, num_classes)
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn of(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Self {
        let mut c = Counts::default();
        Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        });
        c
    }

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

fn same_shape(a: ArrayView2<bool>, b: ArrayView2<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`.
pub fn dice(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(Counts::of(pred, gt).dice())
}

/// `|A∩B| / |A∪B|`.
pub fn iou(pred: ArrayView2<bool>, gt: ArrayView2<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(Counts::of(pred, gt).iou())
}

/// Pixel F1 for class `cls`, pooling TP/FP/FN over every image.
pub fn f1_micro(preds: &[Array2<u8>], gts: &[Array2<u8>], cls: u8) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::data("f1 over an empty image list"));
    }
    if preds.len() != gts.len() {
        return Err(Error::data(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = Counts::default();
    for (p, g) in preds.iter().zip(gts) {
        let (p, g) = (p.mapv(|v| v == cls), g.mapv(|v| v == cls));
        same_shape(p.view(), g.view())?;
        total = total.add(Counts::of(p.view(), g.view()));
    }
    Ok(total.dice())
}

/// Physical pixel size `(row, column)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spacing(pub f64, pub f64);

impl Default for Spacing {
    fn default() -> Self {
        Spacing(1.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hd95 {
    pub value: f64,
    /// Exactly one mask was empty; `value` is the image diagonal.
    pub one_empty: bool,
}

/// One-dimensional squared distance transform (lower envelope of
/// parabolas) over `f`, with sample spacing `step`. Infinite entries are
/// treated as absent sites.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let s2 = step * step;
    let pos = |q: usize| q as f64 * step;
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        loop {
            let p = *v.last().expect("non-empty envelope");
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p)))
                / (2.0 * (pos(q) - pos(p)));
            if s <= z[z.len() - 2] && v.len() > 1 {
                v.pop();
                z.pop();
                continue;
            }
            if s <= z[z.len() - 2] {
                // Single remaining parabola dominated everywhere.
                v[0] = q;
                break;
            }
            let last = z.len() - 1;
            z[last] = s;
            v.push(q);
            z.push(f64::INFINITY);
            break;
        }
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let x = pos(i);
        while z[k + 1] < x {
            k += 1;
        }
        let d = (i as f64 - v[k] as f64) * (i as f64 - v[k] as f64) * s2;
        *o = d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `mask` (infinity when `mask` is empty).
pub fn squared_distance_transform(mask: ArrayView2<bool>, spacing: Spacing) -> Array2<f64> {
    let (h, w) = mask.dim();
    let mut cols = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    let mut f = vec![0.0; h];
    let mut out = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            f[r] = if mask[(r, c)] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&f, spacing.0, &mut out);
        for r in 0..h {
            cols[(r, c)] = out[r];
        }
    }
    let mut result = Array2::<f64>::zeros((h, w));
    let mut f = vec![0.0; w];
    let mut out = vec![0.0; w];
    for r in 0..h {
        for c in 0..w {
            f[c] = cols[(r, c)];
        }
        edt_1d(&f, spacing.1, &mut out);
        for c in 0..w {
            result[(r, c)] = out[c];
        }
    }
    result
}

/// Pooled directed nearest-neighbour distances A→B and B→A.
pub fn pooled_surface_distances(
    a: ArrayView2<bool>,
    b: ArrayView2<bool>,
    spacing: Spacing,
) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let to_b = squared_distance_transform(b, spacing);
    let to_a = squared_distance_transform(a, spacing);
    let mut d = Vec::new();
    Zip::from(a).and(&to_b).for_each(|&m, &sq| {
        if m {
            d.push(sq.sqrt());
        }
    });
    Zip::from(b).and(&to_a).for_each(|&m, &sq| {
        if m {
            d.push(sq.sqrt());
        }
    });
    Ok(d)
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (rank - lo as f64)
}

pub fn hd95_detailed(pred: ArrayView2<bool>, gt: ArrayView2<bool>, spacing: Spacing) -> Result<Hd95> {
    same_shape(pred, gt)?;
    let (pa, ga) = (pred.iter().any(|&v| v), gt.iter().any(|&v| v));
    match (pa, ga) {
        (false, false) => Ok(Hd95 {
            value: 0.0,
            one_empty: false,
        }),
        (true, false) | (false, true) => {
            let (h, w) = pred.dim();
            let diag = ((h as f64 * spacing.0).powi(2) + (w as f64 * spacing.1).powi(2)).sqrt();
            Ok(Hd95 {
                value: diag,
                one_empty: true,
            })
        }
        (true, true) => {
            let mut d = pooled_surface_distances(pred, gt, spacing)?;
            Ok(Hd95 {
                value: percentile(&mut d, 0.95),
                one_empty: false,
            })
        }
    }
}

pub fn hd95(pred: ArrayView2<bool>, gt: ArrayView2<bool>, spacing: Spacing) -> Result<f64> {
    Ok(hd95_detailed(pred, gt, spacing)?.value)
}

/// Classic (100th percentile) Hausdorff distance over the same pooled set.
pub fn hausdorff(pred: ArrayView2<bool>, gt: ArrayView2<bool>, spacing: Spacing) -> Result<f64> {
    let d = pooled_surface_distances(pred, gt, spacing)?;
    Ok(d.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub f1: f64,
    pub hd95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScheme {
    MeanPerImage,
    FiveFold,
    ThreeRunsOfFiveFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub scheme: AggregationScheme,
    /// Number of values the standard deviation is taken over.
    pub groups: usize,
    pub dsc: MeanStd,
    pub iou: MeanStd,
    pub f1: MeanStd,
    pub hd95: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub mean_f1: f64,
    pub mean_hd95: f64,
    /// Image/class pairs whose HD95 fell back to the diagonal.
    pub hd95_flagged: usize,
    pub fold_stats: Option<FoldStats>,
}

impl MetricsReport {
    fn from_classes(per_class: BTreeMap<usize, ClassMetrics>, hd95_flagged: usize) -> Self {
        let n = per_class.len().max(1) as f64;
        let mean = |f: fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / n;
        Self {
            mean_dsc: mean(|c| c.dsc),
            mean_iou: mean(|c| c.iou),
            mean_f1: mean(|c| c.f1),
            mean_hd95: mean(|c| c.hd95),
            per_class,
            hd95_flagged,
            fold_stats: None,
        }
    }

    /// CSV with header `class,dsc,iou,f1,hd95`, one row per foreground class
    /// and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dsc,iou,f1,hd95\n");
        for (k, c) in &self.per_class {
            let _ = writeln!(s, "{k},{:.6},{:.6},{:.6},{:.6}", c.dsc, c.iou, c.f1, c.hd95);
        }
        let _ = writeln!(
            s,
            "mean,{:.6},{:.6},{:.6},{:.6}",
            self.mean_dsc, self.mean_iou, self.mean_f1, self.mean_hd95
        );
        s
    }

    /// Human-readable canonical text form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, c) in &self.per_class {
            let _ = writeln!(
                s,
                "class {k}: dsc={:.6} iou={:.6} f1={:.6} hd95={:.6}",
                c.dsc, c.iou, c.f1, c.hd95
            );
        }
        let _ = writeln!(
            s,
            "mean: dsc={:.6} iou={:.6} f1={:.6} hd95={:.6}",
            self.mean_dsc, self.mean_iou, self.mean_f1, self.mean_hd95
        );
        let _ = writeln!(s, "hd95 diagonal fallbacks: {}", self.hd95_flagged);
        if let Some(f) = &self.fold_stats {
            let _ = writeln!(s, "aggregation: {:?} over {} groups", f.scheme, f.groups);
            for (name, m) in [("dsc", f.dsc), ("iou", f.iou), ("f1", f.f1), ("hd95", f.hd95)] {
                let _ = writeln!(s, "  {name}: {:.6} ± {:.6}", m.mean, m.std);
            }
        }
        s
    }
}

/// Per-class report over a set of predicted/ground-truth class-id masks.
/// Class 0 is background and excluded.
pub fn evaluate_masks(
    preds: &[Array2<u8>],
    gts: &[Array2<u8>],
    num_classes: usize,
    spacing: Spacing,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::data("cannot evaluate an empty image list"));
    }
    if preds.len() != gts.len() {
        return Err(Error::data(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_class = BTreeMap::new();
    let mut flagged = 0;
    for k in 1..num_classes {
        let cls = k as u8;
        let binary: Vec<(Array2<bool>, Array2<bool>)> = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| (p.mapv(|v| v == cls), g.mapv(|v| v == cls)))
            .collect();
        let present: Vec<usize> = (0..binary.len())
            .filter(|&i| binary[i].1.iter().any(|&v| v))
            .collect();
        let considered: Vec<usize> = if present.is_empty() {
            (0..binary.len()).collect()
        } else {
            present
        };
        let (mut d, mut j, mut h) = (0.0, 0.0, 0.0);
        for &i in &considered {
            let (p, g) = (&binary[i].0, &binary[i].1);
            let c = Counts::of(p.view(), g.view());
            d += c.dice();
            j += c.iou();
            let hd = hd95_detailed(p.view(), g.view(), spacing)?;
            flagged += usize::from(hd.one_empty);
            h += hd.value;
        }
        let n = considered.len() as f64;
        per_class.insert(
            k,
            ClassMetrics {
                dsc: d / n,
                iou: j / n,
                f1: f1_micro(preds, gts, cls)?,
                hd95: h / n,
            },
        );
    }
    Ok(MetricsReport::from_classes(per_class, flagged))
}

/// Combine leaf reports (folds, runs or images) into mean ± std.
///
/// `ThreeRunsOfFiveFold` expects 15 reports ordered run-major; each run's
/// five folds are averaged first and the spread is taken over the three run
/// means.
pub fn aggregate(reports: &[MetricsReport], scheme: AggregationScheme) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::data("aggregate over an empty report list"))?;
    let classes: Vec<usize> = first.per_class.keys().copied().collect();
    if reports
        .iter()
        .any(|r| r.per_class.keys().copied().collect::<Vec<_>>() != classes)
    {
        return Err(Error::data("reports cover different class sets"));
    }
    let expected = match scheme {
        AggregationScheme::MeanPerImage => None,
        AggregationScheme::FiveFold => Some(5),
        AggregationScheme::ThreeRunsOfFiveFold => Some(15),
    };
    if let Some(n) = expected {
        if reports.len() != n {
            return Err(Error::data(format!(
                "{scheme:?} needs {n} reports, got {}",
                reports.len()
            )));
        }
    }

    let groups: Vec<MetricsReport> = match scheme {
        AggregationScheme::ThreeRunsOfFiveFold => reports
            .chunks(5)
            .map(|run| mean_report(run))
            .collect(),
        _ => reports.to_vec(),
    };
    let mut out = mean_report(&groups);
    let stat = |f: fn(&MetricsReport) -> f64| MeanStd::of(&groups.iter().map(f).collect::<Vec<_>>());
    out.fold_stats = Some(FoldStats {
        scheme,
        groups: groups.len(),
        dsc: stat(|r| r.mean_dsc),
        iou: stat(|r| r.mean_iou),
        f1: stat(|r| r.mean_f1),
        hd95: stat(|r| r.mean_hd95),
    });
    Ok(out)
}

fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len() as f64;
    let mut per_class = BTreeMap::new();
    for k in reports[0].per_class.keys() {
        let avg = |f: fn(&ClassMetrics) -> f64| reports.iter().map(|r| f(&r.per_class[k])).sum::<f64>() / n;
        per_class.insert(
            *k,
            ClassMetrics {
                dsc: avg(|c| c.dsc),
                iou: avg(|c| c.iou),
                f1: avg(|c| c.f1),
                hd95: avg(|c| c.hd95),
            },
        );
    }
    let flagged = reports.iter().map(|r| r.hd95_flagged).sum();
    MetricsReport::from_classes(per_class, flagged)
}
