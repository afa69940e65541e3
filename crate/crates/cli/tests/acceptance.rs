//! Acceptance gate.
//!
//! Runs every acceptance criterion at its stated tolerance and prints one
//! `[PASS]`/`[FAIL]` line per criterion, followed by a tally. The desk-scale
//! training runs (200 phantoms at 64×64, base width 16, 30 epochs, seeds
//! 0–2, five configurations each) dominate the cost; each finished run is
//! stored under the cargo target directory keyed by its manifest and a hash
//! of the core sources, so re-running against unchanged code reuses it.
//! `TRIPF_ACCEPTANCE_FRESH=1` ignores stored runs.
//!
//! The process exits 0 after printing the verdicts; with
//! `TRIPF_ACCEPTANCE_STRICT=1` any FAIL makes it exit 1.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use base64::Engine as _;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tripf_cli::server::{router, AppState};
use tripf_core::autodiff::{check_gradients, GradCheckReport, GradTolerance};
use tripf_core::checkpoint;
use tripf_core::dataset::{generate_patients, GenerateOptions, Split};
use tripf_core::gabor::{gabor_layer, make_gabor_bank, GaborParams};
use tripf_core::loss::{rgsf, RegionMasks, RgsfWeights};
use tripf_core::metrics::{
    cnr, dice, evaluate_volumes, frechet_distance, mae, psnr, select_lesion_slices, snr_delta,
    ssim, EvalOptions, EvalReport,
};
use tripf_core::model::{InputBatch, ModelConfig, TriPfNet};
use tripf_core::phantom::{generate_patient, GeometryConfig, KineticsProfile};
use tripf_core::study::{read_log, CaseBank, StudyLog, StudyService};
use tripf_core::training::{train_volumes, EpochLog, RunManifest, Variant};
use tripf_core::volume::{PhaseVolume, Volume};
use tripf_core::{Result, Tape, Tensor, Var};

const SEEDS: [u64; 3] = [0, 1, 2];
const PATIENTS: usize = 200;
const EPOCHS: usize = 30;
const BASE_CHANNELS: usize = 16;
const RUN_BUDGET_S: f64 = 600.0;
const GRAD_BUDGET_S: f64 = 120.0;
const MIN_COORDS: usize = 50;

// ------------------------------------------------------------------ verdicts

#[derive(Default)]
struct Gate {
    verdicts: Vec<(String, bool)>,
}

impl Gate {
    fn record(&mut self, name: &str, pass: bool, detail: &str) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {name}: {detail}");
        self.verdicts.push((name.to_string(), pass));
    }
}

/// Detail line under a criterion.
fn note(msg: impl AsRef<str>) {
    println!("       {}", msg.as_ref());
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("  .. {}", msg.as_ref());
}

// ------------------------------------------------------------------ gradients

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.value(y).shape(), seed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn small_net(depth: usize, seed: u64) -> TriPfNet {
    let cfg = ModelConfig {
        base_channels: 4,
        depth,
        attention_hidden: 4,
        ..ModelConfig::default()
    };
    let mut net = TriPfNet::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    let names = net.params().names().to_vec();
    for (name, t) in names.iter().zip(net.params_mut().tensors_mut()) {
        if name.ends_with(".b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    net
}

fn check_params<F>(
    net: &TriPfNet,
    keep: impl Fn(&str) -> bool,
    extra: Vec<Tensor>,
    samples: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let names = net.params().names();
    let selected: Vec<usize> = (0..names.len()).filter(|&i| keep(&names[i])).collect();
    let mut leaves: Vec<Tensor> = selected.iter().map(|&i| net.params().tensors()[i].clone()).collect();
    let n_sel = leaves.len();
    leaves.extend(extra);
    check_gradients(
        &leaves,
        |tape, vars| {
            let mut params = Vec::with_capacity(names.len());
            let mut next = 0;
            for (i, t) in net.params().tensors().iter().enumerate() {
                if selected.get(next) == Some(&i) {
                    params.push(vars[next]);
                    next += 1;
                } else {
                    params.push(tape.constant(t.clone()));
                }
            }
            f(tape, &params, &vars[n_sel..])
        },
        samples,
        1e-6,
        GradTolerance::default(),
        11,
    )
}

fn phantom_slice(size: usize) -> (InputBatch, Tensor, RegionMasks) {
    let geo = GeometryConfig {
        depth: 8,
        size,
        ..GeometryConfig::default()
    };
    let v = generate_patient(5, &geo, &KineticsProfile::default()).unwrap();
    let z = select_lesion_slices(&v.tumor_mask).unwrap().center;
    let batch = InputBatch::from_slices(&[(&v, z)]).unwrap();
    let t = |vol: &Volume| Tensor::new([1, 1, size, size], vol.slice(z).to_vec()).unwrap();
    let regions = RegionMasks::new(&t(&v.liver_mask), &t(&v.tumor_mask)).unwrap();
    (batch, t(&v.hbp), regions)
}

fn gradient_suite(gate: &mut Gate) {
    let started = Instant::now();
    let tol = GradTolerance::default();
    let mut results: Vec<(String, Result<GradCheckReport>)> = Vec::new();

    let conv_leaves = vec![random(&[2, 3, 7, 7], 1), random(&[4, 3, 3, 3], 2), random(&[4], 3)];
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let r = check_gradients(
            &conv_leaves,
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                project(tape, y, 4)
            },
            30,
            1e-6,
            tol,
            1,
        );
        results.push((format!("conv2d stride {stride} pad {pad}"), r));
    }
    let r = check_gradients(
        &[random(&[3, 22], 1), random(&[8, 22], 2), random(&[8], 3)],
        |tape, v| {
            let y = tape.affine(v[0], v[1], v[2])?;
            let y = tape.tanh(y);
            project(tape, y, 9)
        },
        30,
        1e-6,
        tol,
        2,
    );
    results.push(("affine".into(), r));

    let bank = Arc::new(make_gabor_bank(&GaborParams::default()).unwrap());
    let r = check_gradients(
        &[random(&[2, 3, 6, 6], 1), random(&[3, 12, 1, 1], 2), random(&[3], 3)],
        |tape, v| {
            let y = gabor_layer(tape, v[0], &bank, v[1], v[2])?;
            project(tape, y, 6)
        },
        40,
        1e-6,
        tol,
        5,
    );
    results.push(("gabor 1x1 mix".into(), r));

    let net = small_net(3, 21);
    let feats: Vec<Tensor> = (0..4).map(|i| random(&[2, 8, 4, 4], 30 + i)).collect();
    let mut extra = feats.clone();
    extra.push(random(&[2, 22], 40));
    let mask = vec![true, true, false, true, true, false, true, true];
    for (label, prefix, samples) in [
        ("attention MLP", "fuse.s1.", 8),
        ("clinical projection", "clin.s1.", 40),
    ] {
        let r = check_params(&net, |n| n.starts_with(prefix), extra.clone(), samples, |tape, params, x| {
            let (fused, _) = net.fuse_scale(tape, params, 1, &x[..4], &mask, x[4])?;
            project(tape, fused, 8)
        });
        results.push((label.into(), r));
    }

    let net = small_net(3, 22);
    let fused = vec![random(&[1, 4, 8, 8], 1), random(&[1, 8, 4, 4], 2), random(&[1, 16, 2, 2], 3)];
    let r = check_params(&net, |n| n.starts_with("dec.") || n.starts_with("head."), fused, 6, |tape, params, x| {
        let y = net.decode(tape, params, x)?;
        project(tape, y, 10)
    });
    results.push(("decoder".into(), r));

    let (batch, target, regions) = phantom_slice(16);
    let t1 = batch.phases[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pred = Tensor::from_fn([1, 1, 16, 16], |_| rng.random_range(0.05..0.95));
    let r = check_gradients(
        &[pred],
        |tape, v| rgsf(tape, v[0], &target, &t1, &regions, &RgsfWeights::default()),
        120,
        1e-6,
        tol,
        6,
    );
    results.push(("region-guided loss".into(), r));

    let net = small_net(5, 23);
    let mask = batch.stream_mask();
    let [x1, x2, x3] = batch.gated_phases();
    let r = check_params(&net, |_| true, vec![], 1, |tape, params, _| {
        let inputs = [tape.constant(x1.clone()), tape.constant(x2.clone()), tape.constant(x3.clone())];
        let clinical = tape.constant(batch.clinical.clone());
        let out = net.forward_vars(tape, params, inputs, &mask, clinical)?;
        rgsf(tape, out.prediction, &target, &t1, &regions, &RgsfWeights::default())
    });
    results.push(("full network end to end".into(), r));

    let elapsed = started.elapsed().as_secs_f64();
    let mut all = true;
    for (label, r) in &results {
        match r {
            Ok(r) => {
                let ok = r.passed() && r.checked >= MIN_COORDS;
                all &= ok;
                note(format!(
                    "{label:<26} {:>4} coords, {} failures, worst error/allowance {:.2e}{}",
                    r.checked,
                    r.failures,
                    r.worst_ratio(),
                    if ok { "" } else { "  <-- FAIL" }
                ));
            }
            Err(e) => {
                all = false;
                note(format!("{label:<26} error: {e}  <-- FAIL"));
            }
        }
    }
    let in_time = elapsed < GRAD_BUDGET_S;
    gate.record(
        "gradient-suite",
        all && in_time,
        &format!(
            "{} paths, every path >= {MIN_COORDS} coords within max(1e-4 abs, 1e-3 rel); {elapsed:.1} s (budget {GRAD_BUDGET_S:.0} s)",
            results.len()
        ),
    );
}

// ------------------------------------------------------------------ oracles

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (&[n, c, h, wd], &[o, _, k, _]) = (x.shape(), w.shape()) else { unreachable!() };
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy = (y * stride + dy) as isize - pad as isize;
                                let ix = (xx * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oi * c + ci) * k + dy) * k + dx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = 11;
    let mut g = [[0.0; 11]; 11];
    let mut z = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let (mut total, mut count) = (0.0, 0.0);
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = g[i][j] / z;
                    let (a, b) = (x[(oy + i) * w + ox + j], y[(oy + i) * w + ox + j]);
                    mx += wt * a;
                    my += wt * b;
                    xx += wt * a * a;
                    yy += wt * b * b;
                    xy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

/// Samples whose sample mean and unbiased covariance are exactly `mean`
/// and `l·lᵀ`.
fn exact_moment_samples(mean: &[f64], l: &DMatrix<f64>, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let d = mean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0));
    let mu = x.column_mean();
    for mut c in x.column_iter_mut() {
        c -= &mu;
    }
    let cov = &x * x.transpose() / (n - 1) as f64;
    let white = cov.cholesky().unwrap().l().solve_lower_triangular(&x).unwrap();
    let colored = l * white;
    colored.column_iter().map(|c| (0..d).map(|i| c[i] + mean[i]).collect()).collect()
}

fn oracle_suite(gate: &mut Gate) {
    let mut checks: Vec<(&str, f64, f64)> = Vec::new(); // (name, error, tolerance)

    // conv2d against a quadruple loop
    let mut worst = 0.0f64;
    for (stride, pad, seed) in [(1, 0, 1), (1, 1, 2), (2, 1, 3)] {
        let x = random(&[2, 3, 7, 7], seed);
        let w = random(&[4, 3, 3, 3], seed + 10);
        let b = random(&[4], seed + 20);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        worst = worst.max(max_abs_diff(tape.value(y).data(), &conv_oracle(&x, &w, b.data(), stride, pad)));
    }
    checks.push(("conv2d vs direct loops", worst, 1e-12));

    // affine against a triple loop
    let (x, w, b) = (random(&[5, 7], 1), random(&[3, 7], 2), random(&[3], 3));
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.affine(xv, wv, bv).unwrap();
    let mut expect = vec![0.0; 15];
    for n in 0..5 {
        for o in 0..3 {
            expect[n * 3 + o] = b.data()[o] + (0..7).map(|i| x.data()[n * 7 + i] * w.data()[o * 7 + i]).sum::<f64>();
        }
    }
    checks.push(("affine vs direct loops", max_abs_diff(tape.value(y).data(), &expect), 1e-12));

    // max pooling against window maxima
    let x = random(&[2, 3, 6, 6], 4);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.maxpool2d(xv, 2).unwrap();
    let mut expect = Vec::new();
    for plane in x.data().chunks(36) {
        for oy in 0..3 {
            for ox in 0..3 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| plane[(2 * oy + dy) * 6 + 2 * ox + dx])
                    .fold(f64::NEG_INFINITY, f64::max);
                expect.push(m);
            }
        }
    }
    checks.push(("maxpool vs window maxima", max_abs_diff(tape.value(y).data(), &expect), 0.0));

    // MAE / PSNR
    let a = uniform(100, 1);
    let shifted: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    checks.push(("mae: +0.1 offset = 25.5", (mae(&shifted, &a).unwrap() - 25.5).abs(), 1e-12));
    checks.push(("psnr: +0.1 offset = 20 dB", (psnr(&shifted, &a).unwrap() - 20.0).abs(), 1e-10));
    let b = uniform(100, 2);
    let m: f64 = a.iter().zip(&b).map(|(x, y)| (255.0 * (x - y)).powi(2)).sum::<f64>() / 100.0;
    checks.push((
        "psnr vs 10·log10(255²/mse)",
        (psnr(&a, &b).unwrap() - 10.0 * (255.0f64 * 255.0 / m).log10()).abs(),
        1e-10,
    ));

    // SSIM
    let s = ssim(&vec![0.5; 256], &vec![0.25; 256], 16, 16).unwrap();
    checks.push((
        "ssim constant pair closed form",
        (s.value - (0.25 + 1e-4) / (0.3125 + 1e-4)).abs(),
        1e-12,
    ));
    let (h, w) = (17, 14);
    let a = uniform(h * w, 5);
    let b: Vec<f64> = a.iter().zip(uniform(h * w, 6)).map(|(x, n)| 0.7 * x + 0.3 * n).collect();
    checks.push((
        "ssim vs full 2-D window",
        (ssim(&a, &b, h, w).unwrap().value - ssim_oracle(&a, &b, h, w)).abs(),
        1e-10,
    ));

    // Dice
    let mut ma = vec![0.0; 16];
    let mut mb = vec![0.0; 16];
    let both_empty = (dice(&ma, &mb).unwrap() - 1.0).abs();
    ma[..8].fill(1.0);
    mb[4..12].fill(1.0);
    checks.push(("dice: both empty = 1", both_empty, 0.0));
    checks.push(("dice: half overlap = 0.5", (dice(&ma, &mb).unwrap() - 0.5).abs(), 0.0));

    // CNR / SNR on a hand fixture
    let mut img = vec![0.1; 25];
    let mut liver = vec![0.0; 25];
    let mut tumor = vec![0.0; 25];
    for i in 0..16 {
        liver[i] = 1.0;
        if i < 4 {
            tumor[i] = 1.0;
            img[i] = 0.4;
        } else {
            img[i] = if i % 2 == 0 { 0.70 } else { 0.80 };
        }
    }
    checks.push(("cnr fixture = 7", (cnr(&img, &liver, &tumor).unwrap() - 7.0).abs(), 1e-9));
    let bg: Vec<f64> = liver.iter().map(|l| 1.0 - l).collect();
    for (i, v) in img.iter_mut().enumerate().skip(16) {
        *v = 0.1 + 0.01 * (i % 3) as f64;
    }
    let mut doubled = img.clone();
    doubled[..4].iter_mut().for_each(|v| *v *= 2.0);
    checks.push((
        "snr_delta: doubled lesion = 20·log10 2",
        (snr_delta(&doubled, &img, &tumor, &bg).unwrap() - 20.0 * 2f64.log10()).abs(),
        1e-12,
    ));

    // Fréchet on Gaussians with known parameters
    let one = DMatrix::from_element(1, 1, 1.0);
    let fa = exact_moment_samples(&[0.0], &one, 40, 1);
    let fb = exact_moment_samples(&[3.0], &DMatrix::from_element(1, 1, 2.5), 40, 2);
    checks.push((
        "frechet 1-D: Δμ² + (σa−σb)²",
        (frechet_distance(&fa, &fb).unwrap() - (9.0 + 1.5f64.powi(2))).abs(),
        1e-6,
    ));
    let la = DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.4, 0.7]);
    let lb = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, -0.3, 1.1]);
    let (mu_a, mu_b): ([f64; 2], [f64; 2]) = ([0.5, -1.0], [2.0, 0.25]);
    let (ca, cb) = (&la * la.transpose(), &lb * lb.transpose());
    let det: f64 = ca.determinant() * cb.determinant();
    let cross: f64 = (&ca * &cb).trace() + 2.0 * det.sqrt();
    let analytic = (mu_a[0] - mu_b[0]).powi(2) + (mu_a[1] - mu_b[1]).powi(2) + ca.trace() + cb.trace()
        - 2.0 * cross.sqrt();
    let got = frechet_distance(&exact_moment_samples(&mu_a, &la, 60, 4), &exact_moment_samples(&mu_b, &lb, 80, 5)).unwrap();
    checks.push(("frechet 2-D: closed form", (got - analytic).abs(), 1e-6 * analytic.abs().max(1.0)));

    let mut all = true;
    for (name, err, tol) in &checks {
        let ok = err <= tol;
        all &= ok;
        note(format!("{name:<40} error {err:.2e} (tolerance {tol:.0e}){}", if ok { "" } else { "  <-- FAIL" }));
    }
    gate.record("oracle-suite", all, &format!("{} closed-form / brute-force comparisons", checks.len()));
}

// ------------------------------------------------------------------ desk runs

#[derive(Serialize, Deserialize)]
struct StoredRun {
    log: Vec<EpochLog>,
    best_epoch: usize,
    seconds: f64,
}

struct Run {
    net: TriPfNet,
    log: Vec<EpochLog>,
    seconds: f64,
    reused: bool,
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hash_tree(h: &mut Sha256, dir: &Path) {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            hash_tree(h, &p);
        } else {
            h.update(p.strip_prefix(workspace_root()).unwrap_or(&p).to_string_lossy().as_bytes());
            h.update(fs::read(&p).unwrap());
        }
    }
}

/// Hash of everything that can change a training result.
fn code_fingerprint() -> String {
    let root = workspace_root();
    let mut h = Sha256::new();
    hash_tree(&mut h, &root.join("crates/core/src"));
    for f in ["crates/core/Cargo.toml", "Cargo.toml", "Cargo.lock"] {
        h.update(fs::read(root.join(f)).unwrap_or_default());
    }
    hex::encode(h.finalize())
}

struct Desk {
    fingerprint: String,
    store: PathBuf,
    fresh: bool,
}

struct SeedData {
    all: Vec<PhaseVolume>,
    train: Vec<PhaseVolume>,
    val: Vec<PhaseVolume>,
    test: Vec<PhaseVolume>,
}

fn seed_data(seed: u64) -> SeedData {
    let opts = GenerateOptions {
        patients: PATIENTS,
        seed,
        ..GenerateOptions::default()
    };
    let pats = generate_patients(&opts).unwrap();
    let pick = |s| pats.iter().filter(|p| p.1 == s).map(|p| p.0.clone()).collect::<Vec<_>>();
    SeedData {
        train: pick(Split::Train),
        val: pick(Split::Val),
        test: pick(Split::Test),
        all: pats.into_iter().map(|p| p.0).collect(),
    }
}

fn manifest(seed: u64, variant: Variant) -> RunManifest {
    let mut m = RunManifest::new(seed, "in-memory", "none");
    m.epochs = EPOCHS;
    m.model.base_channels = BASE_CHANNELS;
    variant.manifest(&m)
}

impl Desk {
    fn run(&self, seed: u64, variant: Variant, data: &SeedData) -> Run {
        let m = manifest(seed, variant);
        let mut h = Sha256::new();
        h.update(&self.fingerprint);
        h.update(m.to_toml());
        h.update(format!("{PATIENTS} patients, data seed {seed}, {:?}", GeometryConfig::default()));
        let key = hex::encode(h.finalize());
        let (meta, ckpt) = (self.store.join(format!("{key}.json")), self.store.join(format!("{key}.tpfc")));
        if !self.fresh {
            if let (Ok(text), Ok(entries)) = (fs::read_to_string(&meta), checkpoint::load(&ckpt)) {
                if let Ok(stored) = serde_json::from_str::<StoredRun>(&text) {
                    if let Ok(net) = TriPfNet::from_entries(m.model_config(), entries, "stored run") {
                        progress(format!("seed {seed} {}: reusing stored run {}", variant.label(), &key[..12]));
                        return Run {
                            net,
                            log: stored.log,
                            seconds: stored.seconds,
                            reused: true,
                        };
                    }
                }
            }
        }
        progress(format!("seed {seed} {}: training {EPOCHS} epochs", variant.label()));
        let label = variant.label();
        let out = train_volumes(&m, &data.train, &data.val, None, &mut |r| {
            progress(format!("seed {seed} {label} epoch {:>2} val MAE {:.3}", r.epoch, r.val_mae));
        })
        .unwrap();
        fs::create_dir_all(&self.store).unwrap();
        checkpoint::save(&ckpt, &out.best.params().to_entries()).unwrap();
        let stored = StoredRun {
            log: out.log.clone(),
            best_epoch: out.best_epoch,
            seconds: out.seconds,
        };
        fs::write(&meta, serde_json::to_string(&stored).unwrap()).unwrap();
        Run {
            net: out.best,
            log: out.log,
            seconds: out.seconds,
            reused: false,
        }
    }
}

fn evaluate(net: &TriPfNet, vols: &[PhaseVolume], split: &str, t1_only: bool) -> EvalReport {
    let opts = EvalOptions {
        t1_only,
        ..EvalOptions::default()
    };
    let items = vols.iter().map(|v| (v.patient_id.clone(), Ok(v.clone())));
    evaluate_volumes(net, items, split, &opts).unwrap()
}

struct SeedResult {
    seed: u64,
    full: Run,
    val_all: EvalReport,
    val_t1: EvalReport,
    test_all: EvalReport,
    variants: HashMap<&'static str, (EvalReport, Vec<EpochLog>)>,
    /// Mean lesion contrast (synthesized, real) and parenchyma std
    /// (synthesized, real) over the test lesion slices.
    contrast: [f64; 4],
}

/// First epoch from which the validation MAE never moves by more than
/// 0.01 again, if that leaves at least five flat epochs.
fn stalled_since(log: &[EpochLog]) -> Option<usize> {
    let last = log.last()?.val_mae;
    let start = log.iter().rposition(|r| (r.val_mae - last).abs() > 0.01).map_or(0, |i| i + 1);
    (log.len() - start >= 5).then(|| log[start].epoch)
}

fn pop_stats(img: &[f64], keep: impl Fn(usize) -> bool) -> (f64, f64) {
    let vals: Vec<f64> = (0..img.len()).filter(|&i| keep(i)).map(|i| img[i]).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (mean, (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Where the CNR gap comes from: lesion/parenchyma contrast and parenchyma
/// noise, synthesized vs real.
fn contrast_diagnostics(net: &TriPfNet, vols: &[PhaseVolume]) -> [f64; 4] {
    let mut acc = [0.0; 4];
    let mut n = 0.0;
    for v in vols {
        let Ok(l) = select_lesion_slices(&v.tumor_mask) else { continue };
        for &z in &l.indices {
            let (liver, tumor) = (v.liver_mask.slice(z), v.tumor_mask.slice(z));
            if !tumor.iter().any(|&t| t == 1.0) {
                continue;
            }
            let pred = net.synthesize(v, z).unwrap();
            for (k, img) in [pred.data(), v.hbp.slice(z)].into_iter().enumerate() {
                let (mt, _) = pop_stats(img, |i| tumor[i] == 1.0);
                let (mp, sp) = pop_stats(img, |i| liver[i] == 1.0 && tumor[i] == 0.0);
                acc[k] += (mt - mp).abs();
                acc[2 + k] += sp;
            }
            n += 1.0;
        }
    }
    acc.map(|a| a / n)
}

/// With every phase flag false, the data behind the flags must not matter.
fn flag_governed(net: &TriPfNet, vols: &[PhaseVolume]) -> (bool, bool, usize) {
    let (mut governed, mut in_range, mut checked) = (true, true, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for v in vols.iter().take(6) {
        let z = select_lesion_slices(&v.tumor_mask).map_or(0, |l| l.center);
        for (ap, vp) in [(false, true), (true, false), (false, false)] {
            let mut a = v.clone();
            a.ap_available = ap;
            a.vp_available = vp;
            let mut b = a.clone();
            let junk = |rng: &mut ChaCha8Rng, vol: &Volume| {
                Volume::new(vol.shape(), (0..vol.data().len()).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap()
            };
            if !ap {
                b.ap = junk(&mut rng, &a.ap);
            }
            if !vp {
                b.vp = junk(&mut rng, &a.vp);
            }
            let pa = net.synthesize(&a, z).unwrap();
            let pb = net.synthesize(&b, z).unwrap();
            governed &= pa == pb;
            in_range &= pa.data().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x));
            checked += 1;
        }
    }
    (governed, in_range, checked)
}

fn desk_criteria(gate: &mut Gate) -> Option<(TriPfNet, Vec<PhaseVolume>)> {
    let desk = Desk {
        fingerprint: code_fingerprint(),
        store: PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"),
        fresh: std::env::var("TRIPF_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1"),
    };
    let mut results = Vec::new();
    let mut reference = None;
    let mut flags = (true, true, 0usize);
    let mut interior = (0usize, 0usize);
    for seed in SEEDS {
        let data = seed_data(seed);
        for v in &data.all {
            let l = select_lesion_slices(&v.tumor_mask).unwrap();
            let depth = v.shape()[0];
            if l.center >= 2 && l.center + 2 < depth {
                interior.0 += 1;
                let want: Vec<usize> = (l.center - 2..=l.center + 2).collect();
                interior.1 += (l.indices == want && !l.clipped) as usize;
            }
        }
        let full = desk.run(seed, Variant::Full, &data);
        let f = flag_governed(&full.net, &data.val);
        flags = (flags.0 && f.0, flags.1 && f.1, flags.2 + f.2);
        let val_all = evaluate(&full.net, &data.val, "val", false);
        let val_t1 = evaluate(&full.net, &data.val, "val", true);
        let test_all = evaluate(&full.net, &data.test, "test", false);
        let mut variants = HashMap::new();
        for v in [Variant::Baseline, Variant::Gabor, Variant::Rgsf, Variant::Clinical] {
            let run = desk.run(seed, v, &data);
            variants.insert(v.label(), (evaluate(&run.net, &data.val, "val", false), run.log));
        }
        if seed == SEEDS[0] {
            reference = Some((full.net.clone(), data.test.clone()));
        }
        let contrast = contrast_diagnostics(&full.net, &data.test);
        results.push(SeedResult {
            seed,
            contrast,
            full,
            val_all,
            val_t1,
            test_all,
            variants,
        });
    }

    // missing-phase robustness
    let mut degrade_ok = true;
    for r in &results {
        let (all, t1) = (r.val_all.summary.mae.mean, r.val_t1.summary.mae.mean);
        let ok = t1 > all && t1 < 2.0 * all;
        degrade_ok &= ok;
        note(format!(
            "seed {}: val MAE all phases {all:.3}, T1 only {t1:.3} (ratio {:.3}){}",
            r.seed,
            t1 / all,
            if ok { "" } else { "  <-- FAIL" }
        ));
    }
    note(format!(
        "{} availability patterns on trained models: flag-governed {}, finite and in [0,1] {}",
        flags.2, flags.0, flags.1
    ));
    gate.record(
        "missing-phase-robustness",
        degrade_ok && flags.0 && flags.1,
        "finite, in [0,1], flag-governed; all-phase < T1-only val MAE < 2x all-phase, 3 seeds",
    );

    // multi-phase beats T1-only; runtime budget
    let mut order_ok = true;
    let mut time_ok = true;
    for r in &results {
        let (ma, mt) = (r.val_all.summary.mae.mean, r.val_t1.summary.mae.mean);
        let (sa, st) = (r.val_all.summary.ssim.mean, r.val_t1.summary.ssim.mean);
        let ok = ma < mt && sa > st;
        order_ok &= ok;
        let in_time = r.full.seconds < RUN_BUDGET_S;
        time_ok &= in_time;
        note(format!(
            "seed {}: MAE {ma:.3} vs {mt:.3} (margin {:.3}), SSIM {sa:.4} vs {st:.4} (margin {:.4}); trained in {:.0} s{}{}",
            r.seed,
            mt - ma,
            sa - st,
            r.full.seconds,
            if r.full.reused { " (stored run)" } else { "" },
            if ok && in_time { "" } else { "  <-- FAIL" }
        ));
    }
    gate.record(
        "multi-phase-beats-t1-only",
        order_ok && time_ok,
        &format!(
            "val MAE and SSIM ordering on 3 seeds: {}; every run under {:.0} min: {}",
            if order_ok { "holds" } else { "violated" },
            RUN_BUDGET_S / 60.0,
            if time_ok { "yes" } else { "no" }
        ),
    );

    // training progress
    let mut progress_ok = true;
    for r in &results {
        let (first, last) = (r.full.log[0].val_mae, r.full.log.last().unwrap().val_mae);
        let ok = last <= 0.5 * first;
        progress_ok &= ok;
        note(format!(
            "seed {}: val MAE {first:.3} at initialization, {last:.3} after {EPOCHS} epochs ({:.1}% lower){}",
            r.seed,
            100.0 * (1.0 - last / first),
            if ok { "" } else { "  <-- FAIL" }
        ));
    }
    gate.record("training-progress", progress_ok, "final val MAE at least 50% below the initial one, 3 seeds");

    // ablation direction
    let mut gabor_ok = true;
    let mut rgsf_ok = true;
    for r in &results {
        let mae = |label: &str| r.variants[label].0.summary.mae.mean;
        let (base, gabor, rg, clin) = (mae("Baseline"), mae("Baseline_Gabor"), mae("Baseline_RGSF_loss"), mae("Baseline_clinical"));
        gabor_ok &= gabor < base;
        rgsf_ok &= rg < base;
        note(format!(
            "seed {}: val MAE baseline {base:.3}, +Gabor {gabor:.3}{}, +region loss {rg:.3}{}, +clinical {clin:.3} (recorded), full {:.3}",
            r.seed,
            if gabor < base { "" } else { " <-- FAIL" },
            if rg < base { "" } else { " <-- FAIL" },
            r.val_all.summary.mae.mean
        ));
        for label in ["Baseline", "Baseline_Gabor", "Baseline_RGSF_loss", "Baseline_clinical"] {
            let log = &r.variants[label].1;
            if let Some(epoch) = stalled_since(log) {
                note(format!(
                    "seed {}: {label} stopped learning at epoch {epoch} (val MAE flat at {:.3}; saturated output)",
                    r.seed,
                    log.last().unwrap().val_mae
                ));
            }
        }
    }
    gate.record(
        "ablation-direction",
        gabor_ok && rgsf_ok,
        &format!(
            "Gabor improves on baseline: {}; region-guided loss improves on plain L1: {} (3 seeds)",
            if gabor_ok { "yes" } else { "no" },
            if rgsf_ok { "yes" } else { "no" }
        ),
    );

    // enhancement priors on the test split
    let mut prior_ok = true;
    for r in &results {
        let s = &r.test_all.summary;
        let ok = s.prior_pass >= 0.9;
        prior_ok &= ok;
        note(format!(
            "seed {}: {:.1}% of {} test slices satisfy both priors{}",
            r.seed,
            100.0 * s.prior_pass,
            s.prior_checked,
            if ok { "" } else { "  <-- FAIL" }
        ));
    }
    gate.record("enhancement-priors", prior_ok, ">= 90% of synthesized test slices, 3 seeds");

    // lesion protocol
    let reference_run = &results[0];
    let s = &reference_run.test_all.summary;
    let gap = (s.cnr_pred.mean - s.cnr_real.mean).abs() / s.cnr_real.mean;
    note(format!(
        "{} of {} interior lesions get exactly the 5 centred slices",
        interior.1, interior.0
    ));
    for r in &results {
        let t = &r.test_all.summary;
        let [cp, cr, sp, sr] = r.contrast;
        note(format!(
            "seed {}{}: test CNR synthesized {:.3} vs real {:.3} ({:.1}% apart); mean contrast {:.4} vs {:.4}, parenchyma std {:.4} vs {:.4}",
            r.seed,
            if r.seed == reference_run.seed { " (reference)" } else { "" },
            t.cnr_pred.mean,
            t.cnr_real.mean,
            100.0 * (t.cnr_pred.mean - t.cnr_real.mean).abs() / t.cnr_real.mean,
            cp, cr, sp, sr
        ));
    }
    gate.record(
        "lesion-protocol",
        interior.0 > 0 && interior.1 == interior.0 && gap < 0.3,
        &format!("5-slice windows on interior lesions; reference-run CNR means {:.1}% apart (limit 30%)", 100.0 * gap),
    );

    reference
}

// ------------------------------------------------------------------ study

fn decode_png(image: &Value) -> Vec<u16> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(image["png"].as_str().unwrap()).unwrap();
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf[..info.buffer_size()].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
}

async fn study_script(bank: CaseBank, dir: &Path) -> std::result::Result<Vec<String>, String> {
    let mut notes = Vec::new();
    let reals: BTreeSet<Vec<u16>> = bank.cases.iter().map(|c: &tripf_core::study::StudyCase| c.real.pixels.clone()).collect();
    let fakes: BTreeSet<Vec<u16>> = bank.cases.iter().map(|c| c.synthetic.pixels.clone()).collect();
    let n = bank.cases.len();
    let log_path = dir.join("log.jsonl");
    let service = StudyService::new(bank, StudyLog::open(&log_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let app = router(AppState::new(service, 3), None);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    let c = reqwest::Client::new();
    let ensure = |cond: bool, msg: String| if cond { Ok(()) } else { Err(msg) };

    let root = c.get(format!("{base}/")).send().await.map_err(|e| e.to_string())?;
    ensure(root.status().is_success(), "server without a UI bundle does not answer /".into())?;

    // reader A: two categories, real for the first k cases
    // reader B: three categories, plan real / gen / similar in thirds
    let k = (n * 2).div_ceil(3);
    let plans: [(&str, &str, Box<dyn Fn(usize) -> &'static str>); 2] = [
        ("reader-a", "two_category", Box::new(move |i| if i < k { "real" } else { "gen" })),
        ("reader-b", "three_category", Box::new(move |i| match i * 3 / n { 0 => "real", 1 => "gen", _ => "similar" })),
    ];
    let mut token_bits: Vec<Vec<bool>> = Vec::new();
    let mut truth = Vec::new();
    let mut expected: Vec<[usize; 3]> = Vec::new();
    for (reader, mode, plan) in &plans {
        let created: Value = c
            .post(format!("{base}/api/sessions"))
            .json(&json!({ "reader_id": reader, "mode": mode }))
            .send()
            .await
            .map_err(|e| e.to_string())?
            .json()
            .await
            .map_err(|e| e.to_string())?;
        let id = created["session_id"].as_str().ok_or("no session id")?.to_string();
        let mut counts = [0usize; 3];
        for i in 0.. {
            let v: Value = c.get(format!("{base}/api/sessions/{id}/case")).send().await.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
            if v["done"] == json!(true) {
                ensure(i == n, format!("session ended after {i} of {n} cases"))?;
                break;
            }
            // blinding: schema and content of everything but the pixels
            let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
            ensure(
                keys == BTreeSet::from(["done", "token", "mode", "position", "total", "left", "right"]),
                format!("unexpected case fields {keys:?}"),
            )?;
            let mut stripped = v.clone();
            stripped["left"]["png"] = json!("");
            stripped["right"]["png"] = json!("");
            let plain = stripped.to_string().to_lowercase();
            for word in ["real", "synth", "gen", "fake", "hbp", "p0"] {
                ensure(!plain.contains(word), format!("{word:?} visible in case payload"))?;
            }
            let (left, right) = (decode_png(&v["left"]), decode_png(&v["right"]));
            let left_real = reals.contains(&left) && fakes.contains(&right);
            ensure(left_real || (reals.contains(&right) && fakes.contains(&left)), "served images do not match the case bank".into())?;
            truth.push(left_real);
            let token = v["token"].as_str().unwrap().to_string();
            token_bits.push(token.bytes().flat_map(|b| (0..8).map(move |j| b >> j & 1 == 1)).collect());
            let want = plan(i);
            let choice = match (want, left_real) {
                ("similar", _) => "similar",
                ("real", true) | ("gen", false) => "left",
                _ => "right",
            };
            counts[match want { "real" => 0, "gen" => 1, _ => 2 }] += 1;
            let r = c.post(format!("{base}/api/sessions/{id}/answer")).json(&json!({ "token": token, "choice": choice })).send().await.map_err(|e| e.to_string())?;
            ensure(r.status() == reqwest::StatusCode::OK, format!("answer rejected: {}", r.status()))?;
            if i == 0 {
                // duplicate submission of the same token
                let dup = c.post(format!("{base}/api/sessions/{id}/answer")).json(&json!({ "token": token, "choice": choice })).send().await.map_err(|e| e.to_string())?;
                ensure(dup.status() == reqwest::StatusCode::CONFLICT, format!("duplicate answer got {}", dup.status()))?;
                if *mode == "two_category" {
                    let next: Value = c.get(format!("{base}/api/sessions/{id}/case")).send().await.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
                    let bad = c.post(format!("{base}/api/sessions/{id}/answer")).json(&json!({ "token": next["token"], "choice": "similar" })).send().await.map_err(|e| e.to_string())?;
                    ensure(bad.status() == reqwest::StatusCode::BAD_REQUEST, "'similar' accepted in two-category mode".into())?;
                }
            }
        }
        expected.push(counts);
    }

    let log = read_log(&log_path).map_err(|e| e.to_string())?;
    ensure(log.len() == 2 * n, format!("log has {} records, expected {}", log.len(), 2 * n))?;
    ensure(log.iter().map(|r| r.left_is_real).eq(truth.iter().copied()), "log assignments differ from served images".into())?;
    for b in 0..token_bits[0].len() {
        let agree = (0..truth.len()).filter(|&i| token_bits[i][b] == truth[i]).count();
        ensure(agree != 0 && agree != truth.len(), format!("token bit {b} encodes the assignment"))?;
    }

    let sum: Value = c.get(format!("{base}/api/summary")).send().await.map_err(|e| e.to_string())?.json().await.map_err(|e| e.to_string())?;
    let readers = sum["readers"].as_array().ok_or("no summary")?;
    ensure(readers.len() == 2, "summary should list both readers".into())?;
    for (row, counts) in readers.iter().zip(&expected) {
        let pct = |k: usize| 100.0 * k as f64 / n as f64;
        let got = ["pct_real", "pct_gen", "pct_similar"].map(|f| row[f].as_f64().unwrap());
        let want = [pct(counts[0]), pct(counts[1]), pct(counts[2])];
        ensure(got == want, format!("{}: percentages {got:?}, expected {want:?}", row["reader_id"]))?;
        notes.push(format!("{}: {:?} of {n} -> {:.2}% / {:.2}% / {:.2}%", row["reader_id"].as_str().unwrap(), counts, want[0], want[1], want[2]));
    }
    Ok(notes)
}

fn study_criterion(gate: &mut Gate, model: Option<(TriPfNet, Vec<PhaseVolume>)>) {
    let Some((net, test)) = model else {
        gate.record("study-service", false, "no trained reference model");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let outcome = CaseBank::synthesize(&net, &test).map_err(|e| e.to_string()).and_then(|bank| {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(study_script(bank, dir.path()))
    });
    match outcome {
        Ok(notes) => {
            for n in notes {
                note(n);
            }
            gate.record(
                "study-service",
                true,
                &format!("{} test cases over HTTP without a UI: exact percentages, blinding audit, duplicate rejected", test.len()),
            );
        }
        Err(e) => gate.record("study-service", false, &e),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut gate = Gate::default();
    println!("acceptance: {PATIENTS} phantoms at 64x64, base width {BASE_CHANNELS}, {EPOCHS} epochs, seeds {SEEDS:?}");
    gradient_suite(&mut gate);
    oracle_suite(&mut gate);
    let reference = desk_criteria(&mut gate);
    study_criterion(&mut gate, reference);

    let passed = gate.verdicts.iter().filter(|v| v.1).count();
    let mut tally = format!("acceptance: {passed}/{} criteria passed", gate.verdicts.len());
    let failed: Vec<&str> = gate.verdicts.iter().filter(|v| !v.1).map(|v| v.0.as_str()).collect();
    if !failed.is_empty() {
        let _ = write!(tally, "; failing: {}", failed.join(", "));
    }
    println!("{tally} ({:.0} s)", started.elapsed().as_secs_f64());
    let strict = std::env::var("TRIPF_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && !failed.is_empty() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
