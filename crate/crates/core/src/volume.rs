//! Co-registered multi-phase volumes and their region masks.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Number of clinical covariates carried per patient.
pub const CLINICAL_DIM: usize = 22;

/// Index of each named covariate inside the clinical vector.
pub mod clinical {
    pub const AGE: usize = 0;
    pub const SEX: usize = 1;
    pub const TOTAL_BILIRUBIN: usize = 2;
    pub const ALBUMIN: usize = 3;

    /// Reference (mean, std) used to standardize each named covariate
    /// before it enters the network. Generic covariates are already unit
    /// scale.
    pub const NAMED_REFERENCE: [(f64, f64); 4] =
        [(60.0, 10.0), (0.5, 0.5), (15.0, 6.0), (40.0, 5.0)];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    T1,
    Arterial,
    Venous,
    Hepatobiliary,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::T1,
        Phase::Arterial,
        Phase::Venous,
        Phase::Hepatobiliary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::T1 => "T1",
            Phase::Arterial => "AP",
            Phase::Venous => "VP",
            Phase::Hepatobiliary => "HBP",
        }
    }
}

/// Dense `[D,H,W]` volume of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "volume",
                format!("{shape:?} vs {} values", data.len()),
            ));
        }
        Ok(Volume { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape[0]
    }

    pub fn slice_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [f64] {
        let n = self.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    /// One slice as an `[1,1,H,W]` tensor.
    pub fn slice_tensor(&self, z: usize) -> Tensor {
        Tensor::new([1, 1, self.shape[1], self.shape[2]], self.slice(z).to_vec())
            .expect("slice shape")
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Voxel count of a binary mask on slice `z`.
    pub fn slice_count(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&v| v != 0.0).count()
    }
}

/// One patient's co-registered T1/AP/VP/HBP stack with masks and
/// covariates. AP and VP may be flagged unavailable, in which case their
/// volumes hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    pub patient_id: String,
    pub t1: Volume,
    pub ap: Volume,
    pub vp: Volume,
    pub hbp: Volume,
    pub ap_available: bool,
    pub vp_available: bool,
    pub liver_mask: Volume,
    pub tumor_mask: Volume,
    pub clinical: [f64; CLINICAL_DIM],
}

impl PhaseVolume {
    pub fn shape(&self) -> [usize; 3] {
        self.t1.shape()
    }

    pub fn phase(&self, phase: Phase) -> &Volume {
        match phase {
            Phase::T1 => &self.t1,
            Phase::Arterial => &self.ap,
            Phase::Venous => &self.vp,
            Phase::Hepatobiliary => &self.hbp,
        }
    }

    pub fn phase_mut(&mut self, phase: Phase) -> &mut Volume {
        match phase {
            Phase::T1 => &mut self.t1,
            Phase::Arterial => &mut self.ap,
            Phase::Venous => &mut self.vp,
            Phase::Hepatobiliary => &mut self.hbp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        for phase in Phase::ALL {
            let v = self.phase(phase);
            if v.shape() != shape {
                return Err(Error::shape(
                    "phase volume",
                    format!("{} is {:?}, T1 is {shape:?}", phase.label(), v.shape()),
                ));
            }
            if v.data().iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::InvalidArgument(format!(
                    "{}: intensities outside [0, 1]",
                    phase.label()
                )));
            }
        }
        for (name, m) in [("liver", &self.liver_mask), ("tumor", &self.tumor_mask)] {
            if m.shape() != shape || !m.is_binary() {
                return Err(Error::InvalidArgument(format!(
                    "{name} mask must be binary with shape {shape:?}"
                )));
            }
        }
        let escaped = self
            .tumor_mask
            .data()
            .iter()
            .zip(self.liver_mask.data())
            .any(|(&t, &l)| t != 0.0 && l == 0.0);
        if escaped {
            return Err(Error::InvalidArgument(
                "tumor mask extends outside the liver".into(),
            ));
        }
        Ok(())
    }

    /// Clinical vector standardized for network input.
    pub fn clinical_features(&self) -> [f64; CLINICAL_DIM] {
        let mut out = self.clinical;
        for (i, &(mean, std)) in clinical::NAMED_REFERENCE.iter().enumerate() {
            out[i] = (out[i] - mean) / std;
        }
        out
    }

    /// Liver parenchyma (liver minus tumor) on slice `z`.
    pub fn parenchyma_slice(&self, z: usize) -> Vec<f64> {
        self.liver_mask
            .slice(z)
            .iter()
            .zip(self.tumor_mask.slice(z))
            .map(|(&l, &t)| if l != 0.0 && t == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Background (outside the liver) on slice `z`.
    pub fn background_slice(&self, z: usize) -> Vec<f64> {
        self.liver_mask
            .slice(z)
            .iter()
            .map(|&l| if l == 0.0 { 1.0 } else { 0.0 })
            .collect()
    }

    /// Slices containing any liver voxel.
    pub fn liver_slices(&self) -> Vec<usize> {
        (0..self.t1.depth())
            .filter(|&z| self.liver_mask.slice_count(z) > 0)
            .collect()
    }
}
