use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tripf_core::dataset::{self, Dataset, GenerateOptions, Split};
use tripf_core::metrics::{self, EvalOptions, FeatureExtractor, SliceSelection};
use tripf_core::model::{ModelConfig, TriPfNet, STREAMS};
use tripf_core::phantom::{mark_unavailable, GeometryConfig, KineticsProfile};
use tripf_core::study::{self, CaseBank, StudyLog, StudyService};
use tripf_core::training::{self, RunManifest, MODEL_CONFIG_FILE};
use tripf_core::volume::Phase;

use crate::error::{CliError, CliResult};
use crate::raster::slice_png;
use crate::server::{self, AppState};

/// Multi-phase liver MRI synthesis on phantoms: data generation, training,
/// evaluation and a blinded reader study.
#[derive(Debug, Parser)]
#[command(name = "tripf", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic phantom datasets.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Train one network from a run manifest.
    Train(ManifestArgs),
    /// Predict the hepatobiliary volume of one patient file.
    Synthesize(SynthesizeArgs),
    /// Score a checkpoint on one split of a dataset.
    Evaluate(EvaluateArgs),
    /// Train and compare the ablation variants of a manifest.
    Ablate(ManifestArgs),
    /// Blinded reader study.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Debug, Subcommand)]
pub enum PhantomCommand {
    /// Generate a dataset directory with a split index.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 200)]
    pub patients: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Slices per volume.
    #[arg(long, default_value_t = 16)]
    pub depth: usize,
    /// In-plane size in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Per-voxel noise standard deviation on the [0, 1] scale.
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Model configuration; defaults to the one saved next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> CliResult<TriPfNet> {
        load_net(&self.checkpoint, self.config.as_deref())
    }
}

fn load_net(checkpoint: &Path, config: Option<&Path>) -> CliResult<TriPfNet> {
    let cfg_path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(MODEL_CONFIG_FILE),
    };
    if !checkpoint.is_file() {
        return Err(CliError::Input(format!("checkpoint {} not found", checkpoint.display())));
    }
    if !cfg_path.is_file() {
        return Err(CliError::Input(format!(
            "model configuration {} not found (pass --config)",
            cfg_path.display()
        )));
    }
    let cfg: ModelConfig = training::read_model_config(&cfg_path)?;
    Ok(TriPfNet::load(cfg, checkpoint)?)
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Patient file (`.tpv`).
    #[arg(long)]
    pub input: PathBuf,
    /// Output volume file.
    #[arg(long)]
    pub out: PathBuf,
    /// Treat the arterial phase as unavailable.
    #[arg(long)]
    pub no_ap: bool,
    /// Treat the portal-venous phase as unavailable.
    #[arg(long)]
    pub no_vp: bool,
    /// Also write the largest-lesion slice as a PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SlicesArg {
    Lesion,
    Center,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = SlicesArg::Lesion)]
    pub slices: SlicesArg,
    /// Evaluate with the arterial and portal-venous phases withheld.
    #[arg(long)]
    pub t1_only: bool,
    /// Fréchet features from the deepest encoder scale of this reference
    /// checkpoint instead of block-averaged thumbnails.
    #[arg(long)]
    pub frd_reference: Option<PathBuf>,
    /// Encoder stream of the reference network used for features.
    #[arg(long, default_value = "t1")]
    pub frd_stream: String,
    /// Thumbnail grid when no reference checkpoint is given.
    #[arg(long, default_value_t = 8)]
    pub frd_grid: usize,
    /// Skip the Fréchet distance.
    #[arg(long)]
    pub no_frd: bool,
    /// Write the full per-case report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum StudyCommand {
    /// Serve the reader study over HTTP.
    Serve(ServeArgs),
    /// Print reader percentages from a decision log.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Append-only decision log.
    #[arg(long, default_value = "study_log.jsonl")]
    pub log: PathBuf,
    /// Directory with the built study UI.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Seeds the case order of sessions that do not supply their own.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Phantom(PhantomCommand::Generate(a)) => generate(a, out),
        Command::Train(a) => train(a, out),
        Command::Synthesize(a) => synthesize(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Ablate(a) => ablate(a, out),
        Command::Study(StudyCommand::Serve(a)) => serve(a, out),
        Command::Study(StudyCommand::Report(a)) => report(a, out),
    }
}

fn generate(a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.patients == 0 {
        return Err(CliError::Input("--patients must be positive".into()));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Input(format!("--noise must be non-negative, got {}", a.noise)));
    }
    if a.out.join(dataset::INDEX_FILE).exists() {
        return Err(CliError::Input(format!(
            "{} already holds a dataset",
            a.out.display()
        )));
    }
    let opts = GenerateOptions {
        patients: a.patients,
        seed: a.seed,
        geometry: GeometryConfig {
            depth: a.depth,
            size: a.size,
            ..GeometryConfig::default()
        },
        kinetics: KineticsProfile::default().with_noise(a.noise),
        ..GenerateOptions::default()
    };
    // Everything is generated (and validated) in memory before the first
    // file is written.
    let patients = dataset::generate_patients(&opts)?;
    let ds = dataset::write_dataset(&a.out, &patients, &opts)?;
    let count = |s| ds.index.patients.iter().filter(|e| e.split == s).count();
    writeln!(
        out,
        "wrote {} patients to {} (train {}, val {}, test {})",
        ds.index.patients.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    )?;
    Ok(())
}

fn load_manifest(path: &Path) -> CliResult<RunManifest> {
    if !path.is_file() {
        return Err(CliError::Input(format!("manifest {} not found", path.display())));
    }
    let m = RunManifest::load(path)?;
    if !m.dataset.join(dataset::INDEX_FILE).is_file() {
        return Err(CliError::Input(format!(
            "no dataset index in {}",
            m.dataset.display()
        )));
    }
    Ok(m)
}

fn train(a: ManifestArgs, out: &mut dyn Write) -> CliResult<()> {
    let m = load_manifest(&a.manifest)?;
    let mut io = Ok(());
    let outcome = training::train(&m, &mut |rec| {
        if io.is_ok() {
            io = writeln!(
                out,
                "epoch {:>3}  train loss {}  val loss {:.5}  val MAE {:.3}",
                rec.epoch,
                rec.train_loss.map_or("-".to_string(), |l| format!("{l:.5}")),
                rec.val_loss,
                rec.val_mae
            );
        }
    })?;
    io?;
    writeln!(
        out,
        "best epoch {} (val MAE {:.3}) in {:.0} s; checkpoints in {}",
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].val_mae,
        outcome.seconds,
        m.output.display()
    )?;
    Ok(())
}

fn synthesize(a: SynthesizeArgs, out: &mut dyn Write) -> CliResult<()> {
    if a.batch_size == 0 {
        return Err(CliError::Input("--batch-size must be positive".into()));
    }
    let net = a.model.load()?;
    let mut v = dataset::read_patient(&a.input)?;
    if a.no_ap {
        mark_unavailable(&mut v, Phase::Arterial);
    }
    if a.no_vp {
        mark_unavailable(&mut v, Phase::Venous);
    }
    let pred = net.synthesize_volume(&v, a.batch_size)?;
    dataset::write_volume(&a.out, &pred)?;
    writeln!(out, "wrote {:?} volume to {}", pred.shape(), a.out.display())?;
    if let Some(png) = &a.png {
        let z = metrics::select_lesion_slices(&v.tumor_mask).map_or(v.shape()[0] / 2, |l| l.center);
        let [_, h, w] = pred.shape();
        fs::write(png, slice_png(pred.slice(z), h, w)?)?;
        writeln!(out, "wrote slice {z} to {}", png.display())?;
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CliResult<()> {
    if !STREAMS.contains(&a.frd_stream.as_str()) {
        return Err(CliError::Input(format!(
            "--frd-stream must be one of {STREAMS:?}, got {:?}",
            a.frd_stream
        )));
    }
    let net = a.model.load()?;
    let ds = Dataset::open(&a.dataset)?;
    let extractor = match (&a.frd_reference, a.no_frd) {
        (_, true) => None,
        (Some(reference), false) => Some(FeatureExtractor::Encoder {
            net: Arc::new(load_net(reference, None)?),
            stream: a.frd_stream.clone(),
        }),
        (None, false) => Some(FeatureExtractor::Downsample { grid: a.frd_grid }),
    };
    let opts = EvalOptions {
        selection: match a.slices {
            SlicesArg::Lesion => SliceSelection::Lesion,
            SlicesArg::Center => SliceSelection::Center,
            SlicesArg::All => SliceSelection::All,
        },
        t1_only: a.t1_only,
        extractor,
        ..EvalOptions::default()
    };
    let report = metrics::evaluate_dataset(&net, &ds, a.split.into(), &opts)?;
    let label = if a.t1_only { "T1 only" } else { "all phases" };
    write!(out, "{}", report.to_table(label))?;
    if let Some(path) = &a.json {
        fs::write(path, report.to_json())?;
        writeln!(out, "report written to {}", path.display())?;
    }
    Ok(())
}

fn ablate(a: ManifestArgs, out: &mut dyn Write) -> CliResult<()> {
    let m = load_manifest(&a.manifest)?;
    let mut io = Ok(());
    let results = training::ablate(&m, &EvalOptions::default(), &mut |variant, rec| {
        if io.is_ok() {
            io = writeln!(
                out,
                "{:<20} epoch {:>3}  val MAE {:.3}",
                variant.label(),
                rec.epoch,
                rec.val_mae
            );
        }
    })?;
    io?;
    write!(out, "{}", training::ablation_table(&results))?;
    Ok(())
}

/// Validated study server: case bank built, log opened, listener bound.
pub struct PreparedStudy {
    pub state: AppState,
    pub ui: Option<PathBuf>,
    pub address: String,
}

pub fn prepare_study(a: &ServeArgs) -> CliResult<PreparedStudy> {
    if let Some(ui) = &a.ui {
        if !ui.is_dir() {
            return Err(CliError::Input(format!("UI directory {} not found", ui.display())));
        }
    }
    let net = a.model.load()?;
    let ds = Dataset::open(&a.dataset)?;
    let volumes = ds.load_split(a.split.into())?;
    if volumes.is_empty() {
        return Err(CliError::Input("the selected split has no patients".into()));
    }
    let bank = CaseBank::synthesize(&net, &volumes)?;
    let service = StudyService::new(bank, StudyLog::open(&a.log)?)?;
    Ok(PreparedStudy {
        state: AppState::new(service, a.seed),
        ui: a.ui.clone(),
        address: format!("{}:{}", a.host, a.port),
    })
}

fn serve(a: ServeArgs, out: &mut dyn Write) -> CliResult<()> {
    let prepared = prepare_study(&a)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&prepared.address).await?;
        writeln!(
            out,
            "reader study on http://{} (log: {})",
            listener.local_addr()?,
            a.log.display()
        )?;
        out.flush()?;
        let app = server::router(prepared.state, prepared.ui);
        server::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::Server(e.to_string()))
    })
}

fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult<()> {
    let rows = study::summarize(&study::read_log(&a.log)?);
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&rows).expect("summary serializes"))?;
    } else {
        write!(out, "{}", study::summary_table(&rows))?;
    }
    Ok(())
}
