//! Ablation suite: the prompt-source arms and the LRE on/off pair, all run on
//! the same LR inputs with the same sampler seeds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dape::{Dape, PromptBundle};
use crate::degradation::bicubic;
use crate::diffusion::models::SrModel;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::vae::Vae;
use crate::error::{bail, Result};
use crate::image::ImageTensor;
use crate::metrics::{build_report, flat_mask, masked_mean_abs_diff, MetricPlugin, MetricKind, MetricsReport, RunMeta, TaggingInputs};
use crate::parallel::Execution;
use crate::sampler::{batch_seed, sample_batched, SamplerConfig};
use crate::tags::{sigmoid, TagSet, TagVocabulary};
use crate::teacher::{Embeddings, TagTeacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Null hard and soft prompts; only the LR image conditions the model.
    NoPrompt,
    /// The un-adapted tagger applied to the LR image supplies both prompts.
    Teacher,
    HardOnly,
    SoftOnly,
    Full,
    LreOn,
    LreOff,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::NoPrompt,
        Arm::Teacher,
        Arm::HardOnly,
        Arm::SoftOnly,
        Arm::Full,
        Arm::LreOn,
        Arm::LreOff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoPrompt => "no-prompt",
            Arm::Teacher => "teacher",
            Arm::HardOnly => "hard-only",
            Arm::SoftOnly => "soft-only",
            Arm::Full => "full",
            Arm::LreOn => "lre-on",
            Arm::LreOff => "lre-off",
        }
    }

    fn use_lre(self, default: bool) -> bool {
        match self {
            Arm::LreOn => true,
            Arm::LreOff => false,
            _ => default,
        }
    }

    fn source(self) -> PromptSource {
        match self {
            Arm::NoPrompt => PromptSource::Null,
            Arm::Teacher => PromptSource::Teacher,
            Arm::HardOnly => PromptSource::HardOnly,
            Arm::SoftOnly => PromptSource::SoftOnly,
            Arm::Full | Arm::LreOn | Arm::LreOff => PromptSource::Full,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PromptSource {
    Null,
    Teacher,
    HardOnly,
    SoftOnly,
    Full,
}

pub struct AblationModels<'a> {
    pub sr: &'a SrModel,
    pub vae: &'a Vae,
    pub dape: &'a Dape,
    pub teacher: &'a TagTeacher,
    pub schedule: &'a NoiseSchedule,
}

pub struct Benchmark<'a> {
    pub ids: &'a [String],
    pub lr: &'a [ImageTensor],
    pub hr: &'a [ImageTensor],
    pub truths: &'a [TagSet],
    pub vocab: &'a TagVocabulary,
}

#[derive(Debug, Clone)]
pub struct AblationSettings {
    pub sampler: SamplerConfig,
    pub batch_size: usize,
    pub threshold: f64,
    pub flat_window: usize,
    pub flat_percentile: f64,
    pub parallel_arms: bool,
    /// Copied into every report, with seeds and the input digest filled in.
    pub meta: RunMeta,
}

pub struct ArmResult {
    pub arm: Arm,
    pub report: MetricsReport,
    pub outputs: Vec<ImageTensor>,
}

/// Name of the per-image metric holding the flat-region deviation from bicubic.
pub const FLAT_DEVIATION: &str = "flat_dev_bicubic";

/// Mean absolute deviation from the bicubic upsampling of the LR input,
/// restricted to pixels that are flat in the reference.
pub struct FlatDeviation {
    pub bicubic: Vec<ImageTensor>,
    pub window: usize,
    pub percentile: f64,
}

impl FlatDeviation {
    fn score(&self, i: usize, output: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
        masked_mean_abs_diff(output, &self.bicubic[i], &flat_mask(reference, self.window, self.percentile))
    }
}

/// Digest of the LR pixels and the sampler seeds that an arm consumes.
pub fn inputs_digest(lrs: &[ImageTensor], seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    for im in lrs {
        let (a, b, c) = im.dims();
        for d in [a, b, c] {
            h.update((d as u64).to_le_bytes());
        }
        for v in im.data() {
            h.update(v.to_le_bytes());
        }
    }
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

fn sigmoid_scores(emb: &Embeddings) -> Vec<f64> {
    emb.logits.iter().map(|&l| sigmoid(l as f64)).collect()
}

struct Prompts {
    bundles: Vec<PromptBundle>,
    scores: Vec<Vec<f64>>,
}

fn extract<F>(lrs: &[ImageTensor], vocab: &TagVocabulary, threshold: f64, encode: F) -> Result<Prompts>
where
    F: Fn(&[&ImageTensor]) -> Result<Vec<Embeddings>>,
{
    let mut bundles = Vec::with_capacity(lrs.len());
    let mut scores = Vec::with_capacity(lrs.len());
    for chunk in lrs.chunks(32) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        for emb in encode(&refs)? {
            scores.push(sigmoid_scores(&emb));
            bundles.push(PromptBundle::from_embeddings(emb, vocab, threshold)?);
        }
    }
    Ok(Prompts { bundles, scores })
}

/// Runs every arm and returns one report per arm, in [`Arm::ALL`] order.
pub fn run_ablation(
    models: &AblationModels<'_>,
    bench: &Benchmark<'_>,
    settings: &AblationSettings,
    exec: Execution,
) -> Result<Vec<ArmResult>> {
    let n = bench.lr.len();
    if n == 0 || bench.hr.len() != n || bench.ids.len() != n || bench.truths.len() != n {
        bail!(Argument, "benchmark needs matching non-empty id, LR, HR and tag lists");
    }
    let scale = bench.hr[0].height() / bench.lr[0].height();
    let (seq, dim) = models.dape.seq_shape();
    let dape = extract(bench.lr, bench.vocab, settings.threshold, |im| models.dape.encode_batch(im))?;
    let teacher = extract(bench.lr, bench.vocab, settings.threshold, |im| models.teacher.encode_batch(im))?;

    let bundles_for = |src: PromptSource| -> Vec<PromptBundle> {
        match src {
            PromptSource::Null => (0..n).map(|_| PromptBundle::null(seq, dim)).collect(),
            PromptSource::Teacher => teacher.bundles.clone(),
            PromptSource::HardOnly => dape.bundles.iter().cloned().map(PromptBundle::without_soft).collect(),
            PromptSource::SoftOnly => dape.bundles.iter().cloned().map(PromptBundle::without_hard).collect(),
            PromptSource::Full => dape.bundles.clone(),
        }
    };

    // Arms that share a prompt source and LRE setting share their outputs.
    let mut jobs: Vec<(PromptSource, bool)> = Arm::ALL
        .iter()
        .map(|a| (a.source(), a.use_lre(settings.sampler.use_lre)))
        .collect();
    jobs.sort();
    jobs.dedup();
    let job_exec = if settings.parallel_arms { exec } else { Execution::Sequential };
    let job_outputs = job_exec.try_map_range(jobs.len(), |j| {
        let (src, lre) = jobs[j];
        let cfg = SamplerConfig {
            use_lre: lre,
            ..settings.sampler.clone()
        };
        sample_batched(
            models.sr,
            models.vae,
            bench.lr,
            &bundles_for(src),
            scale,
            models.schedule,
            &cfg,
            settings.batch_size,
        )
    })?;

    let flat = FlatDeviation {
        bicubic: exec.try_map_range(n, |i| {
            Ok::<_, crate::Error>(bicubic(&bench.lr[i], bench.hr[i].height(), bench.hr[i].width())?.clamp01())
        })?,
        window: settings.flat_window,
        percentile: settings.flat_percentile,
    };
    let seeds: Vec<u64> = (0..n.div_ceil(settings.batch_size.max(1)))
        .map(|k| batch_seed(settings.sampler.seed, k))
        .collect();
    let digest = inputs_digest(bench.lr, &seeds);
    let empty: Vec<TagSet> = vec![TagSet::empty(); n];
    let no_scores: Vec<Vec<f64>> = Vec::new();

    let mut results = Vec::with_capacity(Arm::ALL.len());
    for arm in Arm::ALL {
        let key = (arm.source(), arm.use_lre(settings.sampler.use_lre));
        let j = jobs.iter().position(|k| *k == key).expect("every arm has a job");
        let outputs = job_outputs[j].clone();
        let (predictions, scores): (Vec<TagSet>, &[Vec<f64>]) = match arm.source() {
            PromptSource::Null => (empty.clone(), &no_scores),
            PromptSource::Teacher => (teacher.bundles.iter().map(|b| b.hard_prompt.clone()).collect(), &teacher.scores),
            _ => (dape.bundles.iter().map(|b| b.hard_prompt.clone()).collect(), &dape.scores),
        };
        let mut meta = settings.meta.clone();
        meta.seeds = seeds.clone();
        meta.inputs_digest = digest.clone();
        let mut report = build_report(
            arm.name(),
            bench.ids,
            &outputs,
            bench.hr,
            Some(TaggingInputs {
                predictions: &predictions,
                scores,
                truths: bench.truths,
                vocab: bench.vocab,
            }),
            &[],
            meta,
            exec,
        )?;
        for (i, m) in report.images.iter_mut().enumerate() {
            m.extra.insert(FLAT_DEVIATION.to_string(), flat.score(i, &outputs[i], &bench.hr[i])?);
        }
        report.recompute_aggregates();
        results.push(ArmResult { arm, report, outputs });
    }
    Ok(results)
}

/// Rows are metrics, columns are arms. Undefined values print as `null`.
pub fn comparison_rows(reports: &[&MetricsReport]) -> (Vec<String>, Vec<(String, Vec<Option<f64>>)>) {
    let header: Vec<String> = reports.iter().map(|r| r.name.clone()).collect();
    let mut extra: Vec<String> = reports.iter().flat_map(|r| r.aggregates.keys().cloned()).collect();
    extra.sort();
    extra.dedup();
    let mut rows: Vec<(String, Vec<Option<f64>>)> = vec![
        ("psnr_y".into(), reports.iter().map(|r| Some(r.psnr)).collect()),
        ("ssim_y".into(), reports.iter().map(|r| Some(r.ssim)).collect()),
        ("op".into(), reports.iter().map(|r| r.op).collect()),
        ("or".into(), reports.iter().map(|r| r.or).collect()),
        ("ap".into(), reports.iter().map(|r| r.ap).collect()),
    ];
    for k in extra {
        let vals = reports.iter().map(|r| r.aggregates.get(&k).copied()).collect();
        rows.push((k, vals));
    }
    (header, rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| format!("{x:.4}"))
}

pub fn table_csv(reports: &[&MetricsReport]) -> String {
    let (header, rows) = comparison_rows(reports);
    let mut out = format!("metric,{}\n", header.join(","));
    for (name, vals) in rows {
        let cells: Vec<String> = vals.into_iter().map(cell).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

pub fn table_text(reports: &[&MetricsReport]) -> String {
    let (header, rows) = comparison_rows(reports);
    let mut grid = vec![std::iter::once("metric".to_string()).chain(header).collect::<Vec<_>>()];
    for (name, vals) in rows {
        grid.push(std::iter::once(name).chain(vals.into_iter().map(cell)).collect());
    }
    let cols = grid[0].len();
    let widths: Vec<usize> = (0..cols).map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &grid {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Plugin form of the flat-region deviation, for callers that build their own reports.
impl MetricPlugin for FlatDeviation {
    fn name(&self) -> &str {
        FLAT_DEVIATION
    }

    fn kind(&self) -> MetricKind {
        MetricKind::Distributional
    }

    fn distributional(&self, outputs: &[ImageTensor], references: &[ImageTensor]) -> Result<f64> {
        if outputs.len() != self.bicubic.len() || references.len() != outputs.len() {
            bail!(Argument, "flat deviation expects one bicubic image per output");
        }
        let mut total = 0.0;
        for (i, (o, r)) in outputs.iter().zip(references).enumerate() {
            total += self.score(i, o, r)?;
        }
        Ok(total / outputs.len().max(1) as f64)
    }
}

/// Mean of a per-image metric over the images both reports share, by id.
pub fn paired_means(a: &MetricsReport, b: &MetricsReport, metric: impl Fn(&crate::metrics::ImageMetrics) -> f64) -> (f64, f64) {
    let bmap: BTreeMap<&str, f64> = b.images.iter().map(|m| (m.id.as_str(), metric(m))).collect();
    let pairs: Vec<(f64, f64)> = a
        .images
        .iter()
        .filter_map(|m| bmap.get(m.id.as_str()).map(|&v| (metric(m), v)))
        .collect();
    let n = pairs.len().max(1) as f64;
    (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ImageMetrics;

    fn report(name: &str, psnr: f64, op: Option<f64>) -> MetricsReport {
        let mut r = MetricsReport {
            name: name.into(),
            images: vec![ImageMetrics {
                id: "a".into(),
                psnr,
                ssim: 0.5,
                extra: [(FLAT_DEVIATION.to_string(), 0.25)].into(),
            }],
            psnr: 0.0,
            ssim: 0.0,
            op,
            or: op,
            ap: None,
            aggregates: BTreeMap::new(),
            meta: RunMeta::default(),
            warnings: vec![],
        };
        r.recompute_aggregates();
        r
    }

    #[test]
    fn seven_distinct_arm_names() {
        let mut names: Vec<&str> = Arm::ALL.iter().map(|a| a.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 7);
        assert_eq!(serde_json::to_string(&Arm::HardOnly).unwrap(), "\"hard-only\"");
    }

    #[test]
    fn lre_pair_overrides_the_default_only() {
        assert!(Arm::LreOn.use_lre(false));
        assert!(!Arm::LreOff.use_lre(true));
        assert!(!Arm::Full.use_lre(false));
        assert_eq!(Arm::LreOn.source(), Arm::Full.source());
    }

    #[test]
    fn tables_put_metrics_in_rows_and_arms_in_columns() {
        let a = report("no-prompt", 20.0, None);
        let b = report("full", 22.5, Some(0.75));
        let csv = table_csv(&[&a, &b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,no-prompt,full");
        assert_eq!(lines[1], "psnr_y,20.0000,22.5000");
        assert!(lines.contains(&"op,null,0.7500"));
        assert!(lines.contains(&"flat_dev_bicubic,0.2500,0.2500"));
        let text = table_text(&[&a, &b]);
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn digest_tracks_pixels_and_seeds() {
        let a = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        let b = ImageTensor::filled(8, 8, 3, 0.25).unwrap();
        let d = inputs_digest(std::slice::from_ref(&a), &[1]);
        assert_eq!(d, inputs_digest(std::slice::from_ref(&a), &[1]));
        assert_ne!(d, inputs_digest(std::slice::from_ref(&b), &[1]));
        assert_ne!(d, inputs_digest(std::slice::from_ref(&a), &[2]));
    }

    #[test]
    fn paired_means_match_by_id() {
        let a = report("x", 10.0, None);
        let b = report("y", 12.0, None);
        assert_eq!(paired_means(&a, &b, |m| m.psnr), (10.0, 12.0));
    }
}
