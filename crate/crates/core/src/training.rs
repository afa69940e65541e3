//! Optimization loop, missing-phase curriculum, run manifests and the
//! ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gabor::GaborParams;
use crate::loss::{plain_l1, rgsf, RegionMasks, RgsfWeights};
use crate::metrics::{self, select_lesion_slices, EvalOptions, EvalReport, Summary};
use crate::model::{GaborSettings, InputBatch, ModelConfig, TriPfNet};
use crate::phantom::{derive_seed, drop_decision};
use crate::volume::PhaseVolume;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Which optional components are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub gabor_on: bool,
    pub clinical_on: bool,
    pub rgsf_on: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            gabor_on: true,
            clinical_on: true,
            rgsf_on: true,
        }
    }
}

/// Architecture settings other than the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub base_channels: usize,
    pub depth: usize,
    pub attention_hidden: usize,
    pub gabor: GaborSettings,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSpec {
            base_channels: d.base_channels,
            depth: d.depth,
            attention_hidden: d.attention_hidden,
            gabor: GaborSettings::from(&GaborParams::default()),
        }
    }
}

/// How AP/VP availability is chosen for each training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropSchedule {
    /// Independent drops with the manifest probabilities every epoch.
    Stochastic,
    /// First third of the epochs with every phase, second third with
    /// exactly one of AP/VP dropped, last third with any of the four
    /// availability patterns.
    Staged,
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    /// Dataset directory (holding `dataset.toml`).
    pub dataset: PathBuf,
    /// Directory receiving checkpoints and logs.
    pub output: PathBuf,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_drop")]
    pub p_drop_ap: f64,
    #[serde(default = "default_drop")]
    pub p_drop_vp: f64,
    #[serde(default = "default_schedule")]
    pub schedule: DropSchedule,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub loss: RgsfWeights,
}

fn default_batch() -> usize {
    8
}
fn default_epochs() -> usize {
    30
}
fn default_drop() -> f64 {
    0.3
}
fn default_schedule() -> DropSchedule {
    DropSchedule::Stochastic
}

impl RunManifest {
    pub fn new(seed: u64, dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunManifest {
            seed,
            dataset: dataset.into(),
            output: output.into(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            p_drop_ap: default_drop(),
            p_drop_vp: default_drop(),
            schedule: default_schedule(),
            optimizer: AdamConfig::default(),
            ablation: Ablation::default(),
            model: ModelSpec::default(),
            loss: RgsfWeights::default(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            attention_hidden: self.model.attention_hidden,
            gabor: self.model.gabor.clone(),
            gabor_on: self.ablation.gabor_on,
            clinical_on: self.ablation.clinical_on,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        for (name, p) in [("p_drop_ap", self.p_drop_ap), ("p_drop_vp", self.p_drop_vp)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.epsilon > 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }

    /// Parses a manifest; relative paths are resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: RunManifest = toml::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if m.dataset.is_relative() {
            m.dataset = base.join(&m.dataset);
        }
        if m.output.is_relative() {
            m.output = base.join(&m.output);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

/// One line of the training log. Epoch 0 is the untrained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Mean absolute error (0–255 scale) on the largest-lesion slice of
    /// every validation patient.
    pub val_mae: f64,
}

pub struct TrainOutcome {
    /// Network at the epoch with the lowest validation MAE.
    pub best: TriPfNet,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub seconds: f64,
}

/// Availability (AP, VP) for one training sample.
fn availability(
    manifest: &RunManifest,
    epoch: usize,
    sample_seed: u64,
    base: (bool, bool),
) -> (bool, bool) {
    let (drop_ap, drop_vp) = match manifest.schedule {
        DropSchedule::Stochastic => drop_decision(manifest.p_drop_ap, manifest.p_drop_vp, sample_seed),
        DropSchedule::Staged => {
            let stage = (3 * (epoch - 1)) / manifest.epochs.max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            match stage {
                0 => (false, false),
                1 => {
                    let ap = rng.random_bool(0.5);
                    (ap, !ap)
                }
                _ => {
                    let pattern = rng.random_range(0..4u8);
                    (pattern & 1 != 0, pattern & 2 != 0)
                }
            }
        }
    };
    (base.0 && !drop_ap, base.1 && !drop_vp)
}

struct Sample<'a> {
    volume: &'a PhaseVolume,
    slice: usize,
    available: (bool, bool),
}

struct PreparedBatch {
    input: InputBatch,
    target: Tensor,
    t1: Tensor,
    regions: RegionMasks,
}

fn prepare(samples: &[Sample]) -> Result<PreparedBatch> {
    let items: Vec<(&PhaseVolume, usize)> = samples.iter().map(|s| (s.volume, s.slice)).collect();
    let mut input = InputBatch::from_slices(&items)?;
    for (a, s) in input.available.iter_mut().zip(samples) {
        *a = s.available;
    }
    let [_, h, w] = samples[0].volume.shape();
    let stack = |pick: fn(&PhaseVolume) -> &crate::volume::Volume| -> Result<Tensor> {
        let data = samples
            .iter()
            .flat_map(|s| pick(s.volume).slice(s.slice).iter().copied())
            .collect();
        Tensor::new([samples.len(), 1, h, w], data)
    };
    let target = stack(|v| &v.hbp)?;
    let t1 = stack(|v| &v.t1)?;
    let liver = stack(|v| &v.liver_mask)?;
    let tumor = stack(|v| &v.tumor_mask)?;
    Ok(PreparedBatch {
        regions: RegionMasks::new(&liver, &tumor)?,
        input,
        target,
        t1,
    })
}

fn loss_on_tape(
    tape: &mut Tape,
    pred: crate::Var,
    batch: &PreparedBatch,
    manifest: &RunManifest,
) -> Result<crate::Var> {
    if manifest.ablation.rgsf_on {
        rgsf(tape, pred, &batch.target, &batch.t1, &batch.regions, &manifest.loss)
    } else {
        plain_l1(tape, pred, &batch.target)
    }
}

/// Validation loss and MAE on the largest-lesion slice of each volume.
fn validate(net: &TriPfNet, val: &[PhaseVolume], manifest: &RunManifest) -> Result<(f64, f64)> {
    let samples: Vec<Sample> = val
        .iter()
        .map(|v| Sample {
            volume: v,
            slice: select_lesion_slices(&v.tumor_mask)
                .map_or(v.shape()[0] / 2, |l| l.center),
            available: (v.ap_available, v.vp_available),
        })
        .collect();
    let (mut loss_sum, mut abs_sum, mut count) = (0.0, 0.0, 0usize);
    for chunk in samples.chunks(manifest.batch_size) {
        let batch = prepare(chunk)?;
        let mut tape = Tape::new();
        let params = net.register(&mut tape, false);
        let out = net.forward(&mut tape, &params, &batch.input)?;
        let loss = loss_on_tape(&mut tape, out.prediction, &batch, manifest)?;
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        let pred = tape.value(out.prediction);
        abs_sum += pred
            .data()
            .iter()
            .zip(batch.target.data())
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>();
        count += chunk.len();
    }
    let n_vox = (count * val[0].t1.slice_len()) as f64;
    Ok((loss_sum / count as f64, metrics::REPORT_SCALE * abs_sum / n_vox))
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::is_finite)
}

/// Writes run artifacts into `dir`.
struct RunWriter {
    dir: PathBuf,
    log: fs::File,
}

impl RunWriter {
    fn create(dir: &Path, manifest: &RunManifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.toml"), manifest.to_toml())?;
        fs::write(
            dir.join(MODEL_CONFIG_FILE),
            toml::to_string_pretty(&manifest.model_config()).expect("config serializes"),
        )?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            log: fs::File::create(dir.join("log.jsonl"))?,
        })
    }

    fn epoch(&mut self, rec: &EpochLog) -> Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(rec).expect("log serializes"))?;
        Ok(())
    }
}

pub const MODEL_CONFIG_FILE: &str = "model.toml";
pub const BEST_CHECKPOINT: &str = "best.tpfc";
pub const FINAL_CHECKPOINT: &str = "final.tpfc";

/// Reads the model configuration saved next to a checkpoint.
pub fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: ModelConfig =
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Trains on in-memory volumes. When `out` is given, the manifest echo,
/// model config, per-epoch log and best/final checkpoints are written
/// there. `on_epoch` observes every log record as it is produced.
pub fn train_volumes(
    manifest: &RunManifest,
    train: &[PhaseVolume],
    val: &[PhaseVolume],
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    manifest.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty train and val splits".into(),
        ));
    }
    let started = std::time::Instant::now();
    let mut writer = out.map(|d| RunWriter::create(d, manifest)).transpose()?;
    let mut net = TriPfNet::new(manifest.model_config(), manifest.seed)?;
    let mut adam = Adam::new(manifest.optimizer, net.params().tensors());

    let mut log = Vec::with_capacity(manifest.epochs + 1);
    let (val_loss, val_mae) = validate(&net, val, manifest)?;
    let rec = EpochLog {
        epoch: 0,
        train_loss: None,
        val_loss,
        val_mae,
    };
    on_epoch(&rec);
    if let Some(w) = writer.as_mut() {
        w.epoch(&rec)?;
        net.save(&w.dir.join(BEST_CHECKPOINT))?;
    }
    log.push(rec);
    let mut best = (val_mae, 0usize, net.params().clone());

    let liver_slices: Vec<Vec<usize>> = train
        .iter()
        .map(|v| {
            let s = v.liver_slices();
            if s.is_empty() {
                (0..v.shape()[0]).collect()
            } else {
                s
            }
        })
        .collect();

    for epoch in 1..=manifest.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(manifest.seed, epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let samples: Vec<Sample> = order
            .iter()
            .map(|&i| {
                let z = liver_slices[i][rng.random_range(0..liver_slices[i].len())];
                let sample_seed = rng.random::<u64>();
                let v = &train[i];
                Sample {
                    volume: v,
                    slice: z,
                    available: availability(
                        manifest,
                        epoch,
                        sample_seed,
                        (v.ap_available, v.vp_available),
                    ),
                }
            })
            .collect();

        let mut loss_sum = 0.0;
        for (step, chunk) in samples.chunks(manifest.batch_size).enumerate() {
            let batch = prepare(chunk)?;
            let mut tape = Tape::new();
            let params = net.register(&mut tape, true);
            let fwd = net.forward(&mut tape, &params, &batch.input)?;
            let loss = loss_on_tape(&mut tape, fwd.prediction, &batch, manifest)?;
            let value = tape.value(loss).item();
            let diverged = |msg: String| {
                let hint = out.map_or(String::new(), |d| {
                    format!("; last good checkpoint: {}", d.join(BEST_CHECKPOINT).display())
                });
                Error::Diverged {
                    epoch,
                    step,
                    msg: format!("{msg}{hint}"),
                }
            };
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = params
                .iter()
                .map(|&p| tape.grad(p).expect("parameter gradient"))
                .collect();
            drop(tape);
            if !all_finite(&grads) {
                return Err(diverged("non-finite gradient".into()));
            }
            adam.step(net.params_mut().tensors_mut(), &grads);
            if !all_finite(net.params().tensors()) {
                return Err(diverged("non-finite parameter after update".into()));
            }
            loss_sum += value * chunk.len() as f64;
        }

        let (val_loss, val_mae) = validate(&net, val, manifest)?;
        let rec = EpochLog {
            epoch,
            train_loss: Some(loss_sum / samples.len() as f64),
            val_loss,
            val_mae,
        };
        on_epoch(&rec);
        if val_mae < best.0 {
            best = (val_mae, epoch, net.params().clone());
            if let Some(w) = writer.as_ref() {
                net.save(&w.dir.join(BEST_CHECKPOINT))?;
            }
        }
        if let Some(w) = writer.as_mut() {
            w.epoch(&rec)?;
        }
        log.push(rec);
    }
    if let Some(w) = writer.as_ref() {
        net.save(&w.dir.join(FINAL_CHECKPOINT))?;
    }
    let (_, best_epoch, best_params) = best;
    let best_net = TriPfNet::from_entries(
        manifest.model_config(),
        best_params.to_entries(),
        "best parameters",
    )?;
    Ok(TrainOutcome {
        best: best_net,
        best_epoch,
        log,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Trains from the dataset and output directory named in the manifest.
pub fn train(manifest: &RunManifest, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    manifest.validate()?;
    let ds = Dataset::open(&manifest.dataset)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    train_volumes(manifest, &train, &val, Some(&manifest.output), on_epoch)
}

/// Ablation variants: the baseline, each component alone, and everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Variant {
    Baseline,
    Clinical,
    Rgsf,
    Gabor,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Clinical,
        Variant::Rgsf,
        Variant::Gabor,
        Variant::Full,
    ];

    pub fn ablation(self) -> Ablation {
        let off = Ablation {
            gabor_on: false,
            clinical_on: false,
            rgsf_on: false,
        };
        match self {
            Variant::Baseline => off,
            Variant::Clinical => Ablation {
                clinical_on: true,
                ..off
            },
            Variant::Rgsf => Ablation {
                rgsf_on: true,
                ..off
            },
            Variant::Gabor => Ablation {
                gabor_on: true,
                ..off
            },
            Variant::Full => Ablation::default(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Clinical => "Baseline_clinical",
            Variant::Rgsf => "Baseline_RGSF_loss",
            Variant::Gabor => "Baseline_Gabor",
            Variant::Full => "Full",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Clinical => "clinical",
            Variant::Rgsf => "rgsf",
            Variant::Gabor => "gabor",
            Variant::Full => "full",
        }
    }

    /// `base` with this variant's switches.
    pub fn manifest(self, base: &RunManifest) -> RunManifest {
        RunManifest {
            ablation: self.ablation(),
            output: base.output.join(self.slug()),
            ..base.clone()
        }
    }
}

pub struct VariantResult {
    pub variant: Variant,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains every variant with the same seed and data and evaluates each
/// best checkpoint on the validation split.
pub fn ablate_volumes(
    base: &RunManifest,
    variants: &[Variant],
    train: &[PhaseVolume],
    val: &[PhaseVolume],
    write: bool,
    eval: &EvalOptions,
    on_epoch: &mut dyn FnMut(Variant, &EpochLog),
) -> Result<Vec<VariantResult>> {
    base.validate()?;
    let mut out = Vec::with_capacity(variants.len());
    for &variant in variants {
        let m = variant.manifest(base);
        let dir = write.then(|| m.output.clone());
        let outcome = train_volumes(&m, train, val, dir.as_deref(), &mut |rec| on_epoch(variant, rec))?;
        let items = val.iter().map(|v| (v.patient_id.clone(), Ok(v.clone())));
        let report = metrics::evaluate_volumes(&outcome.best, items, "val", eval)?;
        out.push(VariantResult {
            variant,
            outcome,
            report,
        });
    }
    Ok(out)
}

pub fn ablate(
    base: &RunManifest,
    eval: &EvalOptions,
    on_epoch: &mut dyn FnMut(Variant, &EpochLog),
) -> Result<Vec<VariantResult>> {
    base.validate()?;
    let ds = Dataset::open(&base.dataset)?;
    let train = ds.load_split(Split::Train)?;
    let val = ds.load_split(Split::Val)?;
    let results = ablate_volumes(base, &Variant::ALL, &train, &val, true, eval, on_epoch)?;
    fs::write(base.output.join("ablation.txt"), ablation_table(&results))?;
    Ok(results)
}

/// Ablation table: MAE, PSNR, SSIM and FrD per variant.
pub fn ablation_table(results: &[VariantResult]) -> String {
    let rows: Vec<(&str, &Summary)> = results
        .iter()
        .map(|r| (r.variant.label(), &r.report.summary))
        .collect();
    let mut s = metrics::quality_table(&rows);
    let _ = writeln!(s);
    for r in results {
        let _ = writeln!(
            s,
            "{:<22} best epoch {:>3}, training time {:.0} s",
            r.variant.label(),
            r.outcome.best_epoch,
            r.outcome.seconds
        );
    }
    s
}
