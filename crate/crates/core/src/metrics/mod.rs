//! Image-quality and lesion metrics.
//!
//! Pixel metrics (MAE, PSNR) are reported on a 0–255 scale; images are
//! stored on [0, 1]. SSIM works on the unit range directly.

mod evaluate;
mod frechet;

pub use evaluate::{
    evaluate_dataset, evaluate_volume, evaluate_volumes, lesion_table, quality_table, Aggregate,
    CaseEvaluation, CaseMetrics, CaseOutcome, EvalOptions, EvalReport, FeatureExtractor,
    LesionRecord, PriorCheck, SlicePredictor, SliceSelection, Summary,
};
pub use frechet::{frechet_distance, frechet_gaussian, GaussianStats};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Reporting scale for MAE and PSNR.
pub const REPORT_SCALE: f64 = 255.0;

/// Floor applied to standard deviations in CNR and SNR denominators.
pub const STD_FLOOR: f64 = 1e-6;

fn same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Metric(format!("{op}: empty input")));
    }
    Ok(())
}

/// Mean absolute error on the 0–255 scale.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mae", pred, target)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(REPORT_SCALE * s / pred.len() as f64)
}

/// Mean squared error on the 0–255 scale.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("mse", pred, target)?;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = REPORT_SCALE * (p - t);
            d * d
        })
        .sum();
    Ok(s / pred.len() as f64)
}

/// PSNR from an MSE on the 0–255 scale. Zero error gives `+inf`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (REPORT_SCALE * REPORT_SCALE / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ssim {
    pub value: f64,
    /// The image was smaller than the window, so global statistics were
    /// used instead of the sliding window.
    pub global_fallback: bool,
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
        / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter, keeping only positions where the window fits.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `h×w` images on the unit range.
pub fn ssim(pred: &[f64], target: &[f64], h: usize, w: usize) -> Result<Ssim> {
    same_len("ssim", pred, target)?;
    if h * w != pred.len() {
        return Err(Error::shape("ssim", format!("{h}x{w} vs {} values", pred.len())));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        let n = pred.len() as f64;
        let mx = pred.iter().sum::<f64>() / n;
        let my = target.iter().sum::<f64>() / n;
        let vx = pred.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>() / n;
        let vy = target.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / n;
        let cxy = pred
            .iter()
            .zip(target)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / n;
        return Ok(Ssim {
            value: ssim_formula(mx, my, vx, vy, cxy),
            global_fallback: true,
        });
    }
    let g = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        pred.iter().zip(target).map(|(&a, &b)| f(a, b)).collect()
    };
    let mu_x = filter_valid(pred, h, w, &g);
    let mu_y = filter_valid(target, h, w, &g);
    let xx = filter_valid(&prod(&|a, _| a * a), h, w, &g);
    let yy = filter_valid(&prod(&|_, b| b * b), h, w, &g);
    let xy = filter_valid(&prod(&|a, b| a * b), h, w, &g);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            ssim_formula(mx, my, xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my)
        })
        .sum();
    Ok(Ssim {
        value: total / mu_x.len() as f64,
        global_fallback: false,
    })
}

fn check_binary(op: &str, m: &[f64]) -> Result<()> {
    if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Metric(format!("{op}: mask is not binary (found {v})")));
    }
    Ok(())
}

/// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks count as a perfect
/// match.
pub fn dice(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len("dice", a, b)?;
    check_binary("dice", a)?;
    check_binary("dice", b)?;
    let inter = a.iter().zip(b).filter(|(x, y)| **x == 1.0 && **y == 1.0).count();
    let total = a.iter().filter(|&&x| x == 1.0).count() + b.iter().filter(|&&x| x == 1.0).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Slices chosen for lesion-level analysis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LesionSlices {
    /// Slice with the largest tumor area (smallest index on ties).
    pub center: usize,
    /// `center-2 ..= center+2`, clipped to the volume, ascending.
    pub indices: Vec<usize>,
    /// Clipping removed at least one slice.
    pub clipped: bool,
}

pub fn select_lesion_slices(tumor: &Volume) -> Result<LesionSlices> {
    check_binary("select_lesion_slices", tumor.data())?;
    let depth = tumor.depth();
    let mut best: Option<(usize, usize)> = None;
    for z in 0..depth {
        let area = tumor.slice_count(z);
        if area > 0 && best.is_none_or(|(_, a)| area > a) {
            best = Some((z, area));
        }
    }
    let (center, _) =
        best.ok_or_else(|| Error::Metric("tumor mask is empty; no lesion slices".into()))?;
    let lo = center.saturating_sub(2);
    let hi = (center + 2).min(depth - 1);
    let indices: Vec<usize> = (lo..=hi).collect();
    Ok(LesionSlices {
        center,
        clipped: indices.len() < 5,
        indices,
    })
}

fn region_stats(op: &str, image: &[f64], mask: &dyn Fn(usize) -> bool) -> Result<(f64, f64)> {
    let vals: Vec<f64> = (0..image.len()).filter(|&i| mask(i)).map(|i| image[i]).collect();
    if vals.is_empty() {
        return Err(Error::Metric(format!("{op}: region is empty")));
    }
    let n = vals.len() as f64;
    // Anchoring on the first value keeps constant regions exactly constant.
    let anchor = vals[0];
    let mean = anchor + vals.iter().map(|v| v - anchor).sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Lesion contrast-to-noise ratio:
/// `|mean(tumor) − mean(parenchyma)| / std(parenchyma)`, with population
/// standard deviation floored at [`STD_FLOOR`].
pub fn cnr(image: &[f64], liver: &[f64], tumor: &[f64]) -> Result<f64> {
    same_len("cnr", image, liver)?;
    same_len("cnr", image, tumor)?;
    let (mt, _) = region_stats("cnr tumor", image, &|i| tumor[i] == 1.0)?;
    let (mp, sp) = region_stats("cnr parenchyma", image, &|i| {
        liver[i] == 1.0 && tumor[i] == 0.0
    })?;
    Ok((mt - mp).abs() / sp.max(STD_FLOOR))
}

fn snr_db(op: &str, image: &[f64], tumor: &[f64], background: &[f64]) -> Result<f64> {
    let (mt, _) = region_stats(op, image, &|i| tumor[i] == 1.0)?;
    let (_, sb) = region_stats(op, image, &|i| background[i] == 1.0)?;
    if mt <= 0.0 {
        return Err(Error::Metric(format!(
            "{op}: lesion mean {mt} is not positive; SNR undefined"
        )));
    }
    Ok(20.0 * (mt / sb.max(STD_FLOOR)).log10())
}

/// Lesion SNR of the prediction minus that of the real image, in dB, where
/// SNR = `20·log10(mean(tumor) / std(background))`.
pub fn snr_delta(pred: &[f64], real: &[f64], tumor: &[f64], background: &[f64]) -> Result<f64> {
    same_len("snr_delta", pred, real)?;
    same_len("snr_delta", pred, tumor)?;
    same_len("snr_delta", pred, background)?;
    Ok(snr_db("snr_delta pred", pred, tumor, background)?
        - snr_db("snr_delta real", real, tumor, background)?)
}

/// Sample mean and standard deviation (`n−1` denominator; zero for one
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
