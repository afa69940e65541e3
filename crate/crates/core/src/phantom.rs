//! Procedural four-phase liver phantoms.
//!
//! Each patient is a body cross-section cylinder holding an ellipsoidal
//! liver with one to three spherical lesions inside it. Region intensities
//! per phase follow a [`KineticsProfile`]: lesions peak in the arterial
//! phase and wash out, parenchyma enhances progressively toward the
//! hepatobiliary phase. Patient-level jitter perturbs the region means, and
//! the liver's hepatobiliary uptake tracks the patient's albumin value.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{clinical, Phase, PhaseVolume, Volume, CLINICAL_DIM};

/// Target mean intensity per phase (T1, AP, VP, HBP) of one tissue class.
pub type PhaseTargets = [f64; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct KineticsProfile {
    pub liver: PhaseTargets,
    pub tumor: PhaseTargets,
    /// Body tissue outside the liver.
    pub background: PhaseTargets,
    /// Voxel noise standard deviation per phase.
    pub noise_std: [f64; 4],
    /// Standard deviation of the per-patient shift of each region mean.
    pub jitter_std: f64,
    /// Peak amplitude of the smooth texture laid over background tissue.
    pub texture_amplitude: f64,
}

impl Default for KineticsProfile {
    fn default() -> Self {
        KineticsProfile {
            liver: [0.35, 0.55, 0.70, 0.75],
            tumor: [0.30, 0.80, 0.60, 0.40],
            background: [0.12, 0.16, 0.18, 0.14],
            noise_std: [0.02; 4],
            jitter_std: 0.03,
            texture_amplitude: 0.03,
        }
    }
}

fn argmax(v: &PhaseTargets) -> usize {
    (0..4).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

impl KineticsProfile {
    pub fn with_noise(mut self, std: f64) -> Self {
        self.noise_std = [std; 4];
        self
    }

    /// Profile with every stochastic component switched off.
    pub fn noiseless(self) -> Self {
        KineticsProfile {
            noise_std: [0.0; 4],
            jitter_std: 0.0,
            ..self
        }
    }

    /// Checks the enhancement ordering the phantom must honour.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("kinetics: {m}")));
        let all = self.liver.iter().chain(&self.tumor).chain(&self.background);
        if all.clone().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("targets must lie in [0, 1]");
        }
        if argmax(&self.tumor) != Phase::Arterial.index() {
            return bad("tumor must peak in the arterial phase");
        }
        let l = argmax(&self.liver);
        if l != Phase::Venous.index() && l != Phase::Hepatobiliary.index() {
            return bad("liver must peak in the venous or hepatobiliary phase");
        }
        if self.tumor[3] >= self.liver[3] {
            return bad("tumor must be hypointense to liver in the hepatobiliary phase");
        }
        if self.liver[3] <= self.liver[0] {
            return bad("liver must enhance from T1 to the hepatobiliary phase");
        }
        if self.noise_std.iter().any(|&s| s < 0.0) || self.jitter_std < 0.0 {
            return bad("noise levels must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeometryConfig {
    pub depth: usize,
    /// In-plane side length (H = W).
    pub size: usize,
    /// Slice thickness relative to the in-plane pixel spacing.
    pub slice_thickness: f64,
    pub max_retries: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            depth: 16,
            size: 64,
            slice_thickness: 2.0,
            max_retries: 32,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn level(&self, z: f64, y: f64, x: f64) -> f64 {
        let d = [
            (z - self.center[0]) / self.radii[0],
            (y - self.center[1]) / self.radii[1],
            (x - self.center[2]) / self.radii[2],
        ];
        d.iter().map(|v| v * v).sum()
    }

    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        self.level(z as f64, y as f64, x as f64) <= 1.0
    }
}

/// Mixes a dataset seed and a patient index into an independent stream seed.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x6A09_E667);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

struct Anatomy {
    liver: Ellipsoid,
    tumors: Vec<Ellipsoid>,
}

fn sample_anatomy(rng: &mut ChaCha8Rng, geo: &GeometryConfig) -> Option<Anatomy> {
    let (d, s) = (geo.depth as f64, geo.size as f64);
    let liver = Ellipsoid {
        center: [
            (d - 1.0) / 2.0 + rng.random_range(-0.5..=0.5),
            s * rng.random_range(0.46..0.54),
            s * rng.random_range(0.42..0.50),
        ],
        radii: [
            d * rng.random_range(0.38..0.46),
            s * rng.random_range(0.24..0.30),
            s * rng.random_range(0.26..0.32),
        ],
    };
    let n_tumors = rng.random_range(1..=3);
    let mut tumors = Vec::with_capacity(n_tumors);
    for _ in 0..n_tumors {
        let r = s * rng.random_range(0.055..0.11);
        let rz = (r / geo.slice_thickness).max(1.0);
        // place the centre well inside the liver, then verify containment
        let u: f64 = rng.random_range(0.0..0.55);
        let a: f64 = rng.random_range(0.0..2.0 * PI);
        let zc = liver.center[0] + rng.random_range(-0.35..0.35) * liver.radii[0];
        let t = Ellipsoid {
            center: [
                zc,
                liver.center[1] + u * liver.radii[1] * a.sin(),
                liver.center[2] + u * liver.radii[2] * a.cos(),
            ],
            radii: [rz, r, r],
        };
        tumors.push(t);
    }
    Some(Anatomy { liver, tumors })
}

/// Generates one patient deterministically from `seed`.
pub fn generate_patient(
    seed: u64,
    geo: &GeometryConfig,
    kinetics: &KineticsProfile,
) -> Result<PhaseVolume> {
    kinetics.validate()?;
    if geo.depth == 0 || geo.size < 8 {
        return Err(Error::InvalidArgument(
            "phantom geometry needs depth >= 1 and size >= 8".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [geo.depth, geo.size, geo.size];
    let n = geo.depth * geo.size * geo.size;

    let mut liver_mask = vec![0.0; n];
    let mut tumor_mask = vec![0.0; n];
    let mut placed = false;
    for _ in 0..geo.max_retries.max(1) {
        let Some(anatomy) = sample_anatomy(&mut rng, geo) else {
            continue;
        };
        liver_mask.fill(0.0);
        tumor_mask.fill(0.0);
        let mut fits = true;
        let mut any_tumor = vec![false; anatomy.tumors.len()];
        for z in 0..geo.depth {
            for y in 0..geo.size {
                for x in 0..geo.size {
                    let i = (z * geo.size + y) * geo.size + x;
                    let in_liver = anatomy.liver.contains(z, y, x);
                    if in_liver {
                        liver_mask[i] = 1.0;
                    }
                    for (k, t) in anatomy.tumors.iter().enumerate() {
                        if t.contains(z, y, x) {
                            any_tumor[k] = true;
                            if !in_liver {
                                fits = false;
                            }
                            tumor_mask[i] = 1.0;
                        }
                    }
                }
            }
        }
        if fits && any_tumor.iter().all(|&b| b) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(Error::Phantom(format!(
            "could not fit lesions inside the liver after {} attempts (seed {seed})",
            geo.max_retries
        )));
    }

    // Clinical covariates: age, sex, total bilirubin, albumin, then generic labs.
    let mut clin = [0.0; CLINICAL_DIM];
    clin[clinical::AGE] = (60.0 + 10.0 * gauss(&mut rng)).clamp(20.0, 90.0);
    clin[clinical::SEX] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    clin[clinical::TOTAL_BILIRUBIN] = 15.0 * (0.35 * gauss(&mut rng)).exp();
    let albumin_z = gauss(&mut rng).clamp(-3.0, 3.0);
    let (alb_mean, alb_std) = clinical::NAMED_REFERENCE[clinical::ALBUMIN];
    clin[clinical::ALBUMIN] = alb_mean + alb_std * albumin_z;
    for v in clin.iter_mut().skip(4) {
        *v = gauss(&mut rng);
    }

    // Region means: a shared per-region enhancement factor couples the
    // post-contrast phases; liver HBP uptake follows albumin.
    let j = kinetics.jitter_std;
    let mut region_means = [kinetics.liver, kinetics.tumor, kinetics.background];
    for (r, means) in region_means.iter_mut().enumerate() {
        let shared = gauss(&mut rng);
        for (p, m) in means.iter_mut().enumerate() {
            let own = gauss(&mut rng);
            let z = match (r, p) {
                (_, 0) => own,
                (0, 3) => (shared + albumin_z) / 2f64.sqrt(),
                _ => (shared + own) / 2f64.sqrt(),
            };
            *m = (*m + j * z).clamp(0.0, 1.0);
        }
    }

    // Smooth background texture: a few random plane waves per patient.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let a = rng.random_range(0.0..PI);
            let f = rng.random_range(1.5..4.0) * 2.0 * PI / geo.size as f64;
            (a, f, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let body = Ellipsoid {
        center: [
            0.0,
            (geo.size as f64 - 1.0) / 2.0,
            (geo.size as f64 - 1.0) / 2.0,
        ],
        radii: [
            f64::INFINITY,
            geo.size as f64 * 0.45,
            geo.size as f64 * 0.47,
        ],
    };
    let air = 0.02;

    let mut phases: Vec<Vec<f64>> = vec![vec![0.0; n]; 4];
    for (p, vol) in phases.iter_mut().enumerate() {
        let noise = Normal::new(0.0, kinetics.noise_std[p].max(0.0))
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for z in 0..geo.depth {
            for y in 0..geo.size {
                for x in 0..geo.size {
                    let i = (z * geo.size + y) * geo.size + x;
                    let base = if tumor_mask[i] != 0.0 {
                        region_means[1][p]
                    } else if liver_mask[i] != 0.0 {
                        region_means[0][p]
                    } else if body.level(0.0, y as f64, x as f64) <= 1.0 {
                        let tex: f64 = waves
                            .iter()
                            .map(|&(a, f, ph)| {
                                (f * (x as f64 * a.cos() + y as f64 * a.sin()) + ph).sin()
                            })
                            .sum::<f64>()
                            / waves.len() as f64;
                        region_means[2][p] + kinetics.texture_amplitude * tex
                    } else {
                        air
                    };
                    let eps = if kinetics.noise_std[p] > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    vol[i] = (base + eps).clamp(0.0, 1.0);
                }
            }
        }
    }
    let mut it = phases.into_iter();
    let mut next = || Volume::new(shape, it.next().expect("four phases"));
    let volume = PhaseVolume {
        patient_id: format!("P{seed:016x}"),
        t1: next()?,
        ap: next()?,
        vp: next()?,
        hbp: next()?,
        ap_available: true,
        vp_available: true,
        liver_mask: Volume::new(shape, liver_mask)?,
        tumor_mask: Volume::new(shape, tumor_mask)?,
        clinical: clin,
    };
    volume.validate()?;
    Ok(volume)
}

/// Independently marks AP and VP unavailable with the given probabilities,
/// zeroing the dropped volumes. T1, HBP, masks and covariates are untouched.
pub fn drop_phases(v: &PhaseVolume, p_drop_ap: f64, p_drop_vp: f64, seed: u64) -> PhaseVolume {
    let (drop_ap, drop_vp) = drop_decision(p_drop_ap, p_drop_vp, seed);
    let mut out = v.clone();
    if drop_ap {
        mark_unavailable(&mut out, Phase::Arterial);
    }
    if drop_vp {
        mark_unavailable(&mut out, Phase::Venous);
    }
    out
}

/// The (drop AP, drop VP) draw used by [`drop_phases`].
pub fn drop_decision(p_drop_ap: f64, p_drop_vp: f64, seed: u64) -> (bool, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drop_ap = rng.random::<f64>() < p_drop_ap;
    let drop_vp = rng.random::<f64>() < p_drop_vp;
    (drop_ap, drop_vp)
}

/// Flags one contrast phase unavailable and zeroes its volume.
pub fn mark_unavailable(v: &mut PhaseVolume, phase: Phase) {
    match phase {
        Phase::Arterial => v.ap_available = false,
        Phase::Venous => v.vp_available = false,
        _ => return,
    }
    v.phase_mut(phase).data_mut().fill(0.0);
}
