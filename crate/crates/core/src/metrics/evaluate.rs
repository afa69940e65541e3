//! Case-level and split-level evaluation of a trained network.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use super::{
    cnr, dice, frechet_distance, mae, mean_std, mse, psnr_from_mse, select_lesion_slices,
    snr_delta, ssim,
};
use crate::autodiff::{Tape, Tensor};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{InputBatch, TriPfNet};
use crate::phantom::mark_unavailable;
use crate::volume::{Phase, PhaseVolume};

/// Which slices of each volume enter the pixel metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceSelection {
    /// The five-slice lesion window around the largest tumor cross-section.
    Lesion,
    /// Only the largest tumor cross-section.
    Center,
    /// Every slice.
    All,
}

/// Maps 2-D slices to feature vectors for the Fréchet distance.
#[derive(Clone, Debug)]
pub enum FeatureExtractor {
    /// Block-averaged `grid × grid` thumbnail.
    Downsample { grid: usize },
    /// Pooled deepest-scale features of one encoder stream of a frozen
    /// reference network.
    Encoder { net: Arc<TriPfNet>, stream: String },
}

impl FeatureExtractor {
    pub fn describe(&self) -> String {
        match self {
            FeatureExtractor::Downsample { grid } => format!("downsample-{grid}x{grid}"),
            FeatureExtractor::Encoder { stream, .. } => format!("encoder-{stream}-bottleneck"),
        }
    }

    pub fn extract(&self, slices: &[Vec<f64>], h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            FeatureExtractor::Downsample { grid } => {
                let g = *grid;
                if g == 0 || g > h || g > w {
                    return Err(Error::InvalidArgument(format!(
                        "downsample grid {g} does not fit a {h}x{w} slice"
                    )));
                }
                Ok(slices
                    .iter()
                    .map(|s| {
                        let mut sum = vec![0.0; g * g];
                        let mut cnt = vec![0.0; g * g];
                        for y in 0..h {
                            for x in 0..w {
                                let cell = (y * g / h) * g + x * g / w;
                                sum[cell] += s[y * w + x];
                                cnt[cell] += 1.0;
                            }
                        }
                        sum.iter().zip(&cnt).map(|(s, c)| s / c).collect()
                    })
                    .collect())
            }
            FeatureExtractor::Encoder { net, stream } => {
                let mut out = Vec::with_capacity(slices.len());
                for chunk in slices.chunks(16) {
                    let data: Vec<f64> = chunk.iter().flatten().copied().collect();
                    let x = Tensor::new([chunk.len(), 1, h, w], data)?;
                    let mut tape = Tape::new();
                    let params = net.register(&mut tape, false);
                    let xv = tape.constant(x);
                    let feats = net.erge_encode(&mut tape, &params, stream, xv)?;
                    let deepest = *feats.last().expect("depth >= 2");
                    let pooled = tape.mean_spatial(deepest)?;
                    let p = tape.value(pooled);
                    let c = p.shape()[1];
                    out.extend(p.data().chunks(c).map(<[f64]>::to_vec));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub selection: SliceSelection,
    /// Evaluate with AP and VP flagged unavailable.
    pub t1_only: bool,
    pub batch_size: usize,
    /// `None` skips the Fréchet distance.
    pub extractor: Option<FeatureExtractor>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            selection: SliceSelection::Lesion,
            t1_only: false,
            batch_size: 8,
            extractor: Some(FeatureExtractor::Downsample { grid: 8 }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LesionRecord {
    pub slice: usize,
    pub cnr_pred: f64,
    pub cnr_real: f64,
    pub snr_delta: f64,
}

/// Whether a synthesized slice follows the expected enhancement pattern.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriorCheck {
    pub slice: usize,
    /// Predicted parenchyma is brighter than T1 parenchyma.
    pub liver_enhanced: bool,
    /// Predicted tumor is darker than predicted parenchyma.
    pub tumor_hypointense: bool,
}

impl PriorCheck {
    pub fn holds(&self) -> bool {
        self.liver_enhanced && self.tumor_hypointense
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseMetrics {
    pub patient_id: String,
    pub slices: Vec<usize>,
    pub mae: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ssim_fallback: bool,
    pub dice_liver: f64,
    pub dice_tumor: f64,
    pub lesions: Vec<LesionRecord>,
    pub priors: Vec<PriorCheck>,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CaseOutcome {
    Ok(CaseMetrics),
    Failed { patient_id: String, error: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Aggregate {
            mean,
            std,
            n: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub cases: usize,
    pub failed: usize,
    pub mae: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub frd: Option<f64>,
    pub dice_liver: Aggregate,
    pub dice_tumor: Aggregate,
    pub cnr_pred: Aggregate,
    pub cnr_real: Aggregate,
    pub snr_delta: Aggregate,
    /// Fraction of checked slices satisfying both enhancement priors.
    pub prior_pass: f64,
    pub prior_checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub selection: SliceSelection,
    pub t1_only: bool,
    pub features: Option<String>,
    pub cases: Vec<CaseOutcome>,
    pub summary: Summary,
}

fn region_mean(img: &[f64], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for (i, v) in img.iter().enumerate() {
        if keep(i) {
            s += v;
            n += 1;
        }
    }
    (n > 0).then(|| s / n as f64)
}

/// Threshold segmentation applied identically to predicted and real images.
/// Thresholds sit midway between region means of the real image.
struct Segmenter {
    liver_threshold: f64,
    tumor_threshold: Option<f64>,
}

impl Segmenter {
    fn calibrate(real: &[f64], liver: &[f64], tumor: &[f64]) -> Self {
        let bg = region_mean(real, |i| liver[i] == 0.0).unwrap_or(0.0);
        let par = region_mean(real, |i| liver[i] == 1.0 && tumor[i] == 0.0);
        let tum = region_mean(real, |i| tumor[i] == 1.0);
        let par_or_tum = par.or(tum).unwrap_or(1.0);
        Segmenter {
            liver_threshold: 0.5 * (bg + par_or_tum),
            tumor_threshold: match (par, tum) {
                (Some(p), Some(t)) => Some(0.5 * (p + t)),
                _ => None,
            },
        }
    }

    /// (liver, tumor) masks. Tumor candidates are searched inside the
    /// reference liver mask only.
    fn segment(&self, img: &[f64], liver: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let tumor: Vec<f64> = img
            .iter()
            .zip(liver)
            .map(|(&v, &l)| match self.tumor_threshold {
                Some(t) if l == 1.0 && v < t => 1.0,
                _ => 0.0,
            })
            .collect();
        let liver_seg = img
            .iter()
            .zip(&tumor)
            .map(|(&v, &t)| {
                if v > self.liver_threshold || t == 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (liver_seg, tumor)
    }
}

/// Anything that can produce predicted HBP slices for a volume.
pub trait SlicePredictor {
    /// Predicted slices for `zs`, in order, each `H·W` values.
    fn predict_slices(&self, v: &PhaseVolume, zs: &[usize], batch_size: usize)
        -> Result<Vec<Vec<f64>>>;
}

impl SlicePredictor for TriPfNet {
    fn predict_slices(
        &self,
        v: &PhaseVolume,
        zs: &[usize],
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(zs.len());
        for chunk in zs.chunks(batch_size.max(1)) {
            let items: Vec<(&PhaseVolume, usize)> = chunk.iter().map(|&z| (v, z)).collect();
            let pred = self.predict(&InputBatch::from_slices(&items)?)?;
            let len = v.t1.slice_len();
            out.extend(pred.data().chunks(len).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

/// Evaluated case with the predicted and real slices used for the pixel
/// metrics (in `CaseMetrics::slices` order).
pub struct CaseEvaluation {
    pub metrics: CaseMetrics,
    pub predicted: Vec<Vec<f64>>,
    pub real: Vec<Vec<f64>>,
}

pub fn evaluate_volume<P: SlicePredictor + ?Sized>(
    net: &P,
    volume: &PhaseVolume,
    opts: &EvalOptions,
) -> Result<CaseEvaluation> {
    let mut v = volume.clone();
    if opts.t1_only {
        mark_unavailable(&mut v, Phase::Arterial);
        mark_unavailable(&mut v, Phase::Venous);
    }
    if v.t1.data().iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{}: T1 is missing (all-zero volume)",
            v.patient_id
        )));
    }
    let [d, h, w] = v.shape();
    let lesion = select_lesion_slices(&v.tumor_mask).ok();
    let slices: Vec<usize> = match opts.selection {
        SliceSelection::All => (0..d).collect(),
        SliceSelection::Lesion => lesion
            .as_ref()
            .map(|l| l.indices.clone())
            .unwrap_or_else(|| vec![d / 2]),
        SliceSelection::Center => vec![lesion.as_ref().map_or(d / 2, |l| l.center)],
    };
    let mut needed = slices.clone();
    if let Some(l) = &lesion {
        needed.extend(&l.indices);
    }
    needed.sort_unstable();
    needed.dedup();
    let preds = net.predict_slices(&v, &needed, opts.batch_size)?;
    let pred_of = |z: usize| &preds[needed.binary_search(&z).expect("predicted")];

    // Pixel metrics over the selected slices, pooled.
    let pred_all: Vec<f64> = slices.iter().flat_map(|&z| pred_of(z).iter().copied()).collect();
    let real_all: Vec<f64> = slices.iter().flat_map(|&z| v.hbp.slice(z).iter().copied()).collect();
    let liver_all: Vec<f64> = slices
        .iter()
        .flat_map(|&z| v.liver_mask.slice(z).iter().copied())
        .collect();
    let tumor_all: Vec<f64> = slices
        .iter()
        .flat_map(|&z| v.tumor_mask.slice(z).iter().copied())
        .collect();
    let case_mse = mse(&pred_all, &real_all)?;
    let mut ssim_sum = 0.0;
    let mut fallback = false;
    for &z in &slices {
        let s = ssim(pred_of(z), v.hbp.slice(z), h, w)?;
        ssim_sum += s.value;
        fallback |= s.global_fallback;
    }
    let seg = Segmenter::calibrate(&real_all, &liver_all, &tumor_all);
    let (pl, pt) = seg.segment(&pred_all, &liver_all);
    let (rl, rt) = seg.segment(&real_all, &liver_all);

    let mut lesions = Vec::new();
    let mut priors = Vec::new();
    if let Some(l) = &lesion {
        for &z in &l.indices {
            let (liver, tumor) = (v.liver_mask.slice(z), v.tumor_mask.slice(z));
            let par = v.parenchyma_slice(z);
            if tumor.iter().all(|&t| t == 0.0) || par.iter().all(|&p| p == 0.0) {
                continue;
            }
            let p = pred_of(z);
            let bg = v.background_slice(z);
            lesions.push(LesionRecord {
                slice: z,
                cnr_pred: cnr(p, liver, tumor)?,
                cnr_real: cnr(v.hbp.slice(z), liver, tumor)?,
                snr_delta: snr_delta(p, v.hbp.slice(z), tumor, &bg)?,
            });
            let mp = region_mean(p, |i| par[i] == 1.0).expect("nonempty");
            let mt = region_mean(p, |i| tumor[i] == 1.0).expect("nonempty");
            let m1 = region_mean(v.t1.slice(z), |i| par[i] == 1.0).expect("nonempty");
            priors.push(PriorCheck {
                slice: z,
                liver_enhanced: mp > m1,
                tumor_hypointense: mt < mp,
            });
        }
    }

    let metrics = CaseMetrics {
        patient_id: v.patient_id.clone(),
        slices: slices.clone(),
        mae: mae(&pred_all, &real_all)?,
        mse: case_mse,
        psnr: psnr_from_mse(case_mse),
        ssim: ssim_sum / slices.len() as f64,
        ssim_fallback: fallback,
        dice_liver: dice(&pl, &rl)?,
        dice_tumor: dice(&pt, &rt)?,
        lesions,
        priors,
    };
    let predicted = slices.iter().map(|&z| pred_of(z).clone()).collect();
    let real = slices.iter().map(|&z| v.hbp.slice(z).to_vec()).collect();
    Ok(CaseEvaluation {
        metrics,
        predicted,
        real,
    })
}

fn summarize(
    cases: &[CaseOutcome],
    frd: Option<f64>,
) -> Summary {
    let ok: Vec<&CaseMetrics> = cases
        .iter()
        .filter_map(|c| match c {
            CaseOutcome::Ok(m) => Some(m),
            CaseOutcome::Failed { .. } => None,
        })
        .collect();
    let col = |f: &dyn Fn(&CaseMetrics) -> f64| Aggregate::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
    let lesions: Vec<&LesionRecord> = ok.iter().flat_map(|m| &m.lesions).collect();
    let lcol = |f: &dyn Fn(&LesionRecord) -> f64| {
        Aggregate::of(&lesions.iter().map(|l| f(l)).collect::<Vec<_>>())
    };
    let priors: Vec<&PriorCheck> = ok.iter().flat_map(|m| &m.priors).collect();
    let passed = priors.iter().filter(|p| p.holds()).count();
    Summary {
        cases: ok.len(),
        failed: cases.len() - ok.len(),
        mae: col(&|m| m.mae),
        psnr: col(&|m| m.psnr),
        ssim: col(&|m| m.ssim),
        frd,
        dice_liver: col(&|m| m.dice_liver),
        dice_tumor: col(&|m| m.dice_tumor),
        cnr_pred: lcol(&|l| l.cnr_pred),
        cnr_real: lcol(&|l| l.cnr_real),
        snr_delta: lcol(&|l| l.snr_delta),
        prior_pass: if priors.is_empty() {
            f64::NAN
        } else {
            passed as f64 / priors.len() as f64
        },
        prior_checked: priors.len(),
    }
}

/// Evaluates in-memory volumes. Cases that fail are reported individually
/// and excluded from the aggregates.
pub fn evaluate_volumes<P: SlicePredictor + ?Sized>(
    net: &P,
    volumes: impl IntoIterator<Item = (String, Result<PhaseVolume>)>,
    split: &str,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    let mut pred_slices = Vec::new();
    let mut real_slices = Vec::new();
    let mut dims = None;
    for (id, loaded) in volumes {
        let outcome = loaded.and_then(|v| {
            let [_, h, w] = v.shape();
            dims = Some((h, w));
            evaluate_volume(net, &v, opts)
        });
        match outcome {
            Ok(ev) => {
                pred_slices.extend(ev.predicted);
                real_slices.extend(ev.real);
                cases.push(CaseOutcome::Ok(ev.metrics));
            }
            Err(e) => cases.push(CaseOutcome::Failed {
                patient_id: id,
                error: e.to_string(),
            }),
        }
    }
    if cases.is_empty() {
        return Err(Error::InvalidArgument(format!("split '{split}' is empty")));
    }
    let frd = match (&opts.extractor, dims) {
        (Some(ex), Some((h, w))) if pred_slices.len() >= 2 => {
            let fa = ex.extract(&pred_slices, h, w)?;
            let fb = ex.extract(&real_slices, h, w)?;
            Some(frechet_distance(&fa, &fb)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        split: split.to_string(),
        selection: opts.selection,
        t1_only: opts.t1_only,
        features: opts.extractor.as_ref().map(FeatureExtractor::describe),
        summary: summarize(&cases, frd),
        cases,
    })
}

/// Evaluates every patient of one split of a dataset on disk.
pub fn evaluate_dataset<P: SlicePredictor + ?Sized>(
    net: &P,
    dataset: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let items = dataset
        .entries(split)
        .map(|e| (e.id.clone(), dataset.load(e)))
        .collect::<Vec<_>>();
    evaluate_volumes(net, items, split.label(), opts)
}

fn pm(a: &Aggregate, prec: usize) -> String {
    format!("{:.prec$} ± {:.prec$}", a.mean, a.std)
}

/// Quality table with one row per labelled summary: MAE, PSNR, SSIM, FrD.
pub fn quality_table(rows: &[(&str, &Summary)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>18} {:>18} {:>18} {:>10}",
        "Method", "MAE", "PSNR (dB)", "SSIM", "FrD"
    );
    for (label, m) in rows {
        let frd = m.frd.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            s,
            "{:<22} {:>18} {:>18} {:>18} {:>10}",
            label,
            pm(&m.mae, 2),
            pm(&m.psnr, 2),
            pm(&m.ssim, 4),
            frd
        );
    }
    s
}

/// Lesion table: CNR of synthesized and real images and the SNR delta.
pub fn lesion_table(rows: &[(&str, &Summary)]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:>20} {:>20} {:>20} {:>8}",
        "Method", "CNR (synth)", "CNR (real)", "SNR delta (dB)", "slices"
    );
    for (label, m) in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>20} {:>20} {:>20} {:>8}",
            label,
            pm(&m.cnr_pred, 4),
            pm(&m.cnr_real, 4),
            pm(&m.snr_delta, 4),
            m.cnr_pred.n
        );
    }
    s
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self, label: &str) -> String {
        let mut s = quality_table(&[(label, &self.summary)]);
        s.push('\n');
        s.push_str(&lesion_table(&[(label, &self.summary)]));
        let _ = writeln!(
            s,
            "\ncases: {} evaluated, {} failed; Dice liver {}, tumor {}",
            self.summary.cases,
            self.summary.failed,
            pm(&self.summary.dice_liver, 4),
            pm(&self.summary.dice_tumor, 4)
        );
        s
    }
}
