//! Fidelity and tagging metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::parallel::Execution;
use crate::tags::{TagSet, TagVocabulary};

/// Reported in place of +∞ for identical images, and the cap for any larger value.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn planes(a: &ImageTensor, b: &ImageTensor, y_channel: bool) -> Result<(ImageTensor, ImageTensor)> {
    if !a.same_shape(b) {
        bail!(Argument, "image shapes differ: {:?} vs {:?}", a.dims(), b.dims());
    }
    if y_channel && a.channels() == 3 {
        Ok((a.luma(), b.luma()))
    } else {
        Ok((a.clone(), b.clone()))
    }
}

/// `10·log10(1/MSE)` on the `[0, 1]` scale, optionally on BT.601 luma.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, y_channel: bool) -> Result<f64> {
    let (a, b) = planes(a, b, y_channel)?;
    let n = a.data().len() as f64;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, y_channel: bool) -> Result<f64> {
    let (a, b) = planes(a, b, y_channel)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        bail!(Argument, "SSIM needs sides >= {SSIM_WINDOW}, got {h}x{w}");
    }
    let k = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data()[i * c + ch] as f64).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data()[i * c + ch] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (ma, oh, ow) = filter_valid(&pa, h, w, &k);
        let (mb, ..) = filter_valid(&pb, h, w, &k);
        let (saa, ..) = filter_valid(&prod(&pa, &pa), h, w, &k);
        let (sbb, ..) = filter_valid(&prod(&pb, &pb), h, w, &k);
        let (sab, ..) = filter_valid(&prod(&pa, &pb), h, w, &k);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (mu_a, mu_b) = (ma[i], mb[i]);
            let va = saa[i] - mu_a * mu_a;
            let vb = sbb[i] - mu_b * mu_b;
            let cov = sab[i] - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2);
            acc += num / den;
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

/// Per-class image counts behind OP and OR.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagConfusionCounts {
    /// Images predicted with the class.
    pub predicted: Vec<u64>,
    /// Images predicted with the class that also carry it in the ground truth.
    pub correct: Vec<u64>,
    /// Images whose ground truth carries the class.
    pub ground_truth: Vec<u64>,
}

impl TagConfusionCounts {
    pub fn zeros(classes: usize) -> Self {
        Self {
            predicted: vec![0; classes],
            correct: vec![0; classes],
            ground_truth: vec![0; classes],
        }
    }

    pub fn totals(&self) -> (u64, u64, u64) {
        (
            self.predicted.iter().sum(),
            self.correct.iter().sum(),
            self.ground_truth.iter().sum(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpOr {
    /// `None` when nothing was predicted.
    pub op: Option<f64>,
    /// `None` when the ground truth is empty.
    pub or: Option<f64>,
    pub counts: TagConfusionCounts,
    pub warnings: Vec<String>,
}

/// Overall precision `ΣN_t/ΣN_p` and overall recall `ΣN_t/ΣN_g`.
pub fn compute_op_or(predictions: &[TagSet], truths: &[TagSet], vocab: &TagVocabulary) -> Result<OpOr> {
    if predictions.len() != truths.len() {
        bail!(Argument, "{} predictions for {} ground-truth sets", predictions.len(), truths.len());
    }
    let mut counts = TagConfusionCounts::zeros(vocab.len());
    for (p, g) in predictions.iter().zip(truths) {
        p.check_vocabulary(vocab)?;
        g.check_vocabulary(vocab)?;
        for &i in p.indices() {
            counts.predicted[i] += 1;
            if g.contains(i) {
                counts.correct[i] += 1;
            }
        }
        for &i in g.indices() {
            counts.ground_truth[i] += 1;
        }
    }
    let (np, nt, ng) = counts.totals();
    let mut warnings = Vec::new();
    let op = if np == 0 {
        warnings.push("OP undefined: no tags predicted".to_string());
        None
    } else {
        Some(nt as f64 / np as f64)
    };
    let or = if ng == 0 {
        warnings.push("OR undefined: no ground-truth tags".to_string());
        None
    } else {
        Some(nt as f64 / ng as f64)
    };
    Ok(OpOr { op, or, counts, warnings })
}

/// All-points interpolated AP of one class; `None` without positives.
pub fn class_average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let npos = positive.iter().filter(|p| **p).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // Tied scores form one threshold.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / npos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

/// Mean of per-class AP over classes with at least one positive.
/// `scores[i][c]` is image `i`'s probability for class `c`.
pub fn average_precision(scores: &[Vec<f64>], truths: &[TagSet], classes: usize) -> Result<Option<f64>> {
    if scores.len() != truths.len() {
        bail!(Argument, "{} score rows for {} ground-truth sets", scores.len(), truths.len());
    }
    for row in scores {
        if row.len() != classes {
            bail!(Argument, "score row of length {} for {classes} classes", row.len());
        }
        if row.iter().any(|s| !(0.0..=1.0).contains(s)) {
            bail!(Argument, "scores must lie in [0, 1]");
        }
    }
    let mut aps = Vec::new();
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let p: Vec<bool> = truths.iter().map(|t| t.contains(c)).collect();
        if let Some(ap) = class_average_precision(&s, &p) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Ok(None);
    }
    Ok(Some(aps.iter().sum::<f64>() / aps.len() as f64))
}

/// Pixels whose luma variance in a `window x window` neighbourhood lies below
/// the given percentile of all such variances.
pub fn flat_mask(reference: &ImageTensor, window: usize, percentile: f64) -> Vec<bool> {
    let y = reference.luma();
    let (h, w, _) = y.dims();
    let r = (window / 2) as isize;
    let mut var = vec![0.0f64; h * w];
    for yy in 0..h {
        for xx in 0..w {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (py, px) = (yy as isize + dy, xx as isize + dx);
                    if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                        let v = y.get(py as usize, px as usize, 0) as f64;
                        s += v;
                        s2 += v * v;
                        n += 1.0;
                    }
                }
            }
            var[yy * w + xx] = s2 / n - (s / n).powi(2);
        }
    }
    let mut sorted = var.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = ((percentile / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    let cut = sorted[idx.min(sorted.len() - 1)];
    var.iter().map(|v| *v <= cut).collect()
}

/// Mean absolute difference between two images over the masked pixels.
pub fn masked_mean_abs_diff(a: &ImageTensor, b: &ImageTensor, mask: &[bool]) -> Result<f64> {
    if !a.same_shape(b) || mask.len() != a.height() * a.width() {
        bail!(Argument, "image or mask shapes differ");
    }
    let c = a.channels();
    let (mut s, mut n) = (0.0, 0usize);
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for ch in 0..c {
                s += (a.data()[i * c + ch] as f64 - b.data()[i * c + ch] as f64).abs();
            }
            n += c;
        }
    }
    if n == 0 {
        bail!(Argument, "empty mask");
    }
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub checkpoints: BTreeMap<String, String>,
    /// Convention used for AP.
    pub ap_interpolation: String,
    pub y_channel: bool,
    /// Digest of the LR inputs and sampler seeds, shared by runs on identical inputs.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub inputs_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub images: Vec<ImageMetrics>,
    pub psnr: f64,
    pub ssim: f64,
    pub op: Option<f64>,
    pub or: Option<f64>,
    pub ap: Option<f64>,
    /// Means of the per-image `extra` entries plus distributional plugin values.
    pub aggregates: BTreeMap<String, f64>,
    pub meta: RunMeta,
    pub warnings: Vec<String>,
}

/// Tagging inputs for a report: predicted sets, per-class scores, truths.
pub struct TaggingInputs<'a> {
    pub predictions: &'a [TagSet],
    pub scores: &'a [Vec<f64>],
    pub truths: &'a [TagSet],
    pub vocab: &'a TagVocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    PerImage,
    Distributional,
}

/// Extension point for metrics that need external models (learned IQA and the like).
pub trait MetricPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn kind(&self) -> MetricKind;
    /// Score of one output, with its reference when one exists.
    fn per_image(&self, _output: &ImageTensor, _reference: Option<&ImageTensor>) -> Result<f64> {
        bail!(Argument, "{} is not a per-image metric", self.name())
    }
    /// Score of a whole output set against a reference set.
    fn distributional(&self, _outputs: &[ImageTensor], _references: &[ImageTensor]) -> Result<f64> {
        bail!(Argument, "{} is not a distributional metric", self.name())
    }
}

/// Builds a report; per-image work runs through `exec`.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    name: &str,
    ids: &[String],
    outputs: &[ImageTensor],
    references: &[ImageTensor],
    tagging: Option<TaggingInputs<'_>>,
    plugins: &[&dyn MetricPlugin],
    meta: RunMeta,
    exec: Execution,
) -> Result<MetricsReport> {
    if outputs.len() != references.len() || outputs.len() != ids.len() {
        bail!(Argument, "{} outputs, {} references, {} ids", outputs.len(), references.len(), ids.len());
    }
    let y = meta.y_channel;
    let images = exec.try_map_range(outputs.len(), |i| -> Result<ImageMetrics> {
        let mut extra = BTreeMap::new();
        for p in plugins.iter().filter(|p| p.kind() == MetricKind::PerImage) {
            extra.insert(p.name().to_string(), p.per_image(&outputs[i], Some(&references[i]))?);
        }
        Ok(ImageMetrics {
            id: ids[i].clone(),
            psnr: psnr(&outputs[i], &references[i], y)?,
            ssim: ssim(&outputs[i], &references[i], y)?,
            extra,
        })
    })?;
    let mut report = MetricsReport {
        name: name.to_string(),
        images,
        psnr: 0.0,
        ssim: 0.0,
        op: None,
        or: None,
        ap: None,
        aggregates: BTreeMap::new(),
        meta,
        warnings: Vec::new(),
    };
    if let Some(t) = tagging {
        let o = compute_op_or(t.predictions, t.truths, t.vocab)?;
        report.op = o.op;
        report.or = o.or;
        report.warnings.extend(o.warnings);
        if t.scores.is_empty() {
            report.warnings.push("AP undefined: no tag scores were produced".to_string());
        } else {
            report.ap = average_precision(t.scores, t.truths, t.vocab.len())?;
            if report.ap.is_none() {
                report.warnings.push("AP undefined: no class has a positive".to_string());
            }
        }
    }
    for p in plugins.iter().filter(|p| p.kind() == MetricKind::Distributional) {
        report
            .aggregates
            .insert(p.name().to_string(), p.distributional(outputs, references)?);
    }
    report.recompute_aggregates();
    Ok(report)
}

impl MetricsReport {
    /// Refreshes PSNR/SSIM means and per-image `extra` means from `images`.
    pub fn recompute_aggregates(&mut self) {
        let n = self.images.len().max(1) as f64;
        self.psnr = self.images.iter().map(|m| m.psnr).sum::<f64>() / n;
        self.ssim = self.images.iter().map(|m| m.ssim).sum::<f64>() / n;
        let mut keys: Vec<String> = self.images.iter().flat_map(|m| m.extra.keys().cloned()).collect();
        keys.sort();
        keys.dedup();
        for k in keys {
            let vals: Vec<f64> = self.images.iter().filter_map(|m| m.extra.get(&k).copied()).collect();
            self.aggregates.insert(k, vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(f: impl Fn(usize, usize, usize) -> f32) -> ImageTensor {
        ImageTensor::from_fn(16, 16, 3, f).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(|y, x, c| ((y + x + c) % 5) as f32 * 0.1);
        assert_eq!(psnr(&a, &a, true).unwrap(), PSNR_CAP_DB);
        let b = img(|y, x, c| ((y + x + c) % 5) as f32 * 0.1 + 0.5);
        assert!((psnr(&a, &b, false).unwrap() - 6.020599913279624).abs() < 1e-5);
        let mut c = a.clone();
        c.set(3, 4, 1, a.get(3, 4, 1) + 0.25);
        let n = (16 * 16 * 3) as f64;
        let want = 10.0 * (n / 0.0625f64).log10();
        assert!((psnr(&a, &c, false).unwrap() - want).abs() < 1e-4);
        assert!(psnr(&a, &ImageTensor::filled(8, 8, 3, 0.0).unwrap(), false).is_err());
    }

    #[test]
    fn ssim_cases() {
        let a = img(|y, x, _| if (y / 4 + x / 4) % 2 == 0 { 1.0 } else { 0.0 });
        assert_eq!(ssim(&a, &a, true).unwrap(), 1.0);
        let inv = img(|y, x, _| if (y / 4 + x / 4) % 2 == 0 { 0.0 } else { 1.0 });
        assert!(ssim(&a, &inv, true).unwrap() < 0.0);
        let k = ImageTensor::filled(16, 16, 3, 0.3).unwrap();
        assert_eq!(ssim(&k, &k, false).unwrap(), 1.0);
        let small = ImageTensor::filled(10, 10, 3, 0.3).unwrap();
        assert!(ssim(&small, &small, false).is_err());
    }

    fn vocab() -> TagVocabulary {
        TagVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn op_or_hand_case() {
        let v = vocab();
        let p = [TagSet::parse("a, b", &v).unwrap(), TagSet::parse("a", &v).unwrap()];
        let g = [TagSet::parse("a", &v).unwrap(), TagSet::parse("a, c", &v).unwrap()];
        let r = compute_op_or(&p, &g, &v).unwrap();
        assert!((r.op.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.or.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.counts.totals(), (3, 2, 3));
    }

    #[test]
    fn op_or_degenerate_cases() {
        let v = vocab();
        let g = [TagSet::parse("a", &v).unwrap()];
        assert_eq!(compute_op_or(&g, &g, &v).unwrap().op, Some(1.0));
        let r = compute_op_or(&[TagSet::empty()], &g, &v).unwrap();
        assert_eq!((r.op, r.or), (None, Some(0.0)));
        assert!(!r.warnings.is_empty());
        assert!(compute_op_or(&[TagSet::from_indices([7])], &g, &v).is_err());
        assert!(compute_op_or(&[], &g, &v).is_err());
    }

    #[test]
    fn ap_hand_cases() {
        assert!((class_average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(class_average_precision(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        let n = 5;
        let mut s: Vec<f64> = (0..n).map(|i| 0.9 - i as f64 * 0.1).collect();
        s.reverse();
        let mut p = vec![false; n];
        p[0] = true;
        assert!((class_average_precision(&s, &p).unwrap() - 1.0 / n as f64).abs() < 1e-12);
        assert_eq!(class_average_precision(&[0.5], &[false]), None);
    }

    #[test]
    fn report_means_match_images() {
        let a = img(|y, x, c| ((y * 3 + x + c) % 7) as f32 / 7.0);
        let b = img(|y, x, c| ((y + x * 5 + c) % 7) as f32 / 7.0);
        let r = build_report(
            "t",
            &["0".into(), "1".into()],
            &[a.clone(), b.clone()],
            &[b, a],
            None,
            &[],
            RunMeta::default(),
            Execution::Sequential,
        )
        .unwrap();
        let mean = (r.images[0].psnr + r.images[1].psnr) / 2.0;
        assert!((r.psnr - mean).abs() < 1e-9);
        assert_eq!(r.images[0].psnr, r.images[1].psnr);
    }
}
