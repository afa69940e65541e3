//! Region-guided training losses.
//!
//! Every term is evaluated per image and then averaged over the batch, so a
//! slice with a large liver does not drown out one with a small liver. The
//! three regions are background (outside the liver mask), parenchyma (liver
//! minus tumor) and tumor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgsfWeights {
    pub lambda_back: f64,
    pub lambda_liver: f64,
    pub lambda_tumor: f64,
    /// Margin by which the predicted parenchyma mean should exceed the T1
    /// parenchyma mean.
    pub delta_liver: f64,
    /// Weight of the lesion-to-liver contrast term.
    pub delta_tumor_contrast: f64,
}

impl Default for RgsfWeights {
    fn default() -> Self {
        RgsfWeights {
            lambda_back: 1.0,
            lambda_liver: 2.0,
            lambda_tumor: 4.0,
            delta_liver: 0.05,
            delta_tumor_contrast: 1.0,
        }
    }
}

impl RgsfWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_back,
            self.lambda_liver,
            self.lambda_tumor,
            self.delta_liver,
            self.delta_tumor_contrast,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        if self.lambda_back + self.lambda_liver + self.lambda_tumor == 0.0 {
            return Err(Error::InvalidArgument(
                "at least one region weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image region masks laid out over the whole batch tensor, so each can
/// be fed straight to [`Tape::masked_mean`].
#[derive(Clone, Debug)]
pub struct RegionMasks {
    shape: Vec<usize>,
    background: Vec<Arc<Tensor>>,
    parenchyma: Vec<Arc<Tensor>>,
    tumor: Vec<Arc<Tensor>>,
}

impl RegionMasks {
    /// `liver` and `tumor` are binary tensors whose leading axis is the batch.
    pub fn new(liver: &Tensor, tumor: &Tensor) -> Result<Self> {
        if liver.shape() != tumor.shape() {
            return Err(Error::shape(
                "regions",
                format!("liver {:?} vs tumor {:?}", liver.shape(), tumor.shape()),
            ));
        }
        let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
        if !binary(liver) || !binary(tumor) {
            return Err(Error::InvalidArgument("region masks must be binary".into()));
        }
        let n = liver.shape().first().copied().unwrap_or(0);
        let inner = liver.numel() / n.max(1);
        let region = |i: usize, keep: &dyn Fn(f64, f64) -> bool| {
            let data = (0..liver.numel())
                .map(|j| {
                    let inside = j / inner == i && keep(liver.data()[j], tumor.data()[j]);
                    if inside {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Arc::new(Tensor::new(liver.shape().to_vec(), data).expect("same shape"))
        };
        Ok(RegionMasks {
            shape: liver.shape().to_vec(),
            background: (0..n).map(|i| region(i, &|l, _| l == 0.0)).collect(),
            parenchyma: (0..n).map(|i| region(i, &|l, t| l == 1.0 && t == 0.0)).collect(),
            tumor: (0..n).map(|i| region(i, &|_, t| t == 1.0)).collect(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.background.len()
    }

    fn check(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.shape() != self.shape.as_slice() {
            return Err(Error::shape(
                op,
                format!("expected {:?}, got {:?}", self.shape, t.shape()),
            ));
        }
        Ok(())
    }
}

fn count(mask: &Tensor) -> f64 {
    mask.data().iter().sum()
}

fn plain_masked_mean(values: &Tensor, mask: &Tensor) -> f64 {
    let c = count(mask);
    let s: f64 = values.data().iter().zip(mask.data()).map(|(v, m)| v * m).sum();
    s / c
}

/// Averages per-image scalars over the batch.
fn batch_mean(tape: &mut Tape, terms: Vec<Var>) -> Var {
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t).expect("scalars");
    }
    tape.scale(acc, 1.0 / n as f64)
}

fn abs_error(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    Ok(tape.abs(d))
}

/// Mean absolute error over the background of each image.
pub fn l_back(tape: &mut Tape, pred: Var, target: &Tensor, regions: &RegionMasks) -> Result<Var> {
    regions.check("l_back", tape.value(pred))?;
    regions.check("l_back", target)?;
    let err = abs_error(tape, pred, target)?;
    let terms = regions
        .background
        .iter()
        .map(|m| tape.masked_mean(err, m.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_mean(tape, terms))
}

/// Parenchyma L1 plus a hinge asking the predicted parenchyma mean to
/// exceed the T1 parenchyma mean by `delta_liver`.
pub fn l_liver(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    t1: &Tensor,
    regions: &RegionMasks,
    delta_liver: f64,
) -> Result<Var> {
    regions.check("l_liver", tape.value(pred))?;
    regions.check("l_liver", target)?;
    regions.check("l_liver", t1)?;
    let err = abs_error(tape, pred, target)?;
    let mut terms = Vec::with_capacity(regions.batch_size());
    for m in &regions.parenchyma {
        let l1 = tape.masked_mean(err, m.clone())?;
        if count(m) == 0.0 {
            terms.push(l1);
            continue;
        }
        let baseline = plain_masked_mean(t1, m);
        let mp = tape.masked_mean(pred, m.clone())?;
        let neg = tape.scale(mp, -1.0);
        let gap = tape.shift(neg, baseline + delta_liver);
        let hinge = tape.relu(gap);
        terms.push(tape.add(l1, hinge)?);
    }
    Ok(batch_mean(tape, terms))
}

/// Tumor L1 plus a penalty on the change in lesion-to-parenchyma contrast.
pub fn l_tumor(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    regions: &RegionMasks,
    delta_tumor_contrast: f64,
) -> Result<Var> {
    regions.check("l_tumor", tape.value(pred))?;
    regions.check("l_tumor", target)?;
    let err = abs_error(tape, pred, target)?;
    let mut terms = Vec::with_capacity(regions.batch_size());
    for (mt, mp) in regions.tumor.iter().zip(&regions.parenchyma) {
        let l1 = tape.masked_mean(err, mt.clone())?;
        if count(mt) == 0.0 || count(mp) == 0.0 {
            terms.push(l1);
            continue;
        }
        let real_contrast = plain_masked_mean(target, mp) - plain_masked_mean(target, mt);
        let par = tape.masked_mean(pred, mp.clone())?;
        let tum = tape.masked_mean(pred, mt.clone())?;
        let contrast = tape.sub(par, tum)?;
        let dev = tape.shift(contrast, -real_contrast);
        let dev = tape.abs(dev);
        let weighted = tape.scale(dev, delta_tumor_contrast);
        terms.push(tape.add(l1, weighted)?);
    }
    Ok(batch_mean(tape, terms))
}

/// Weighted sum of the three region terms:
/// `(λ_B·back + λ_L·liver) + λ_T·tumor`.
pub fn rgsf(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    t1: &Tensor,
    regions: &RegionMasks,
    w: &RgsfWeights,
) -> Result<Var> {
    w.validate()?;
    let b = l_back(tape, pred, target, regions)?;
    let l = l_liver(tape, pred, target, t1, regions, w.delta_liver)?;
    let t = l_tumor(tape, pred, target, regions, w.delta_tumor_contrast)?;
    let b = tape.scale(b, w.lambda_back);
    let l = tape.scale(l, w.lambda_liver);
    let t = tape.scale(t, w.lambda_tumor);
    let bl = tape.add(b, l)?;
    tape.add(bl, t)
}

/// Plain mean absolute error over every voxel, the ablation baseline.
pub fn plain_l1(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let err = abs_error(tape, pred, target)?;
    Ok(tape.mean(err))
}
