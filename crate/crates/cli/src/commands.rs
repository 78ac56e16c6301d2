use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cryoflex::eval::{
    bimodality_coefficient, conditional_correlation, distance_marginal, emd_rmsd, encode_means, fraction_below,
    latent_interpolation, mode_proportions, prior_samples, write_assignment_csv, write_columns_csv, write_quadrants_csv, AtomRef,
    EvalError, Z_99_ONE_SIDED,
};
use cryoflex::model::{ModelError, Stage};
use cryoflex::nn::Matrix;
use cryoflex::simulate::{
    compose_micrograph, extract_particles, hinge_conformation, read_sidecar, simulate_dataset, truth_conformation, write_stack,
    DatasetMeta, ParticleDataset, ParticleStack, SimulateError, TruthRecord, SIDECAR_FILE,
};
use cryoflex::structure::{read_pdb_ensemble, write_pdb_file, BaseStructure, Conformation, StructureError};
use cryoflex::train::{
    checkpoint_stem, configure_for_dataset, select_best, split_indices, Checkpoint, StepRecord, TrainError, Trainer,
};
use cryoflex::nn::counter_rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, EvalConfig};

/// Cutoffs used for mode proportions when nothing better is known.
const FALLBACK_CUTS: (f64, f64) = (6.5, 37.0);

/// Exemplar particles encoded per mode for `interpolate --between-modes`.
const EXEMPLARS_PER_MODE: usize = 64;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }

    pub fn numeric(m: impl Into<String>) -> Self {
        Self { code: 4, message: m.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<StructureError> for CliError {
    fn from(e: StructureError) -> Self {
        match e {
            StructureError::Io(e) => e.into(),
            StructureError::Geom(_) => Self::numeric(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SimulateError> for CliError {
    fn from(e: SimulateError) -> Self {
        match e {
            SimulateError::Io(e) => e.into(),
            SimulateError::Structure(e) => e.into(),
            SimulateError::InvalidSpec(_) | SimulateError::Render(_) => Self::usage(e.to_string()),
            SimulateError::Geom(_) => Self::numeric(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Self::usage(e.to_string()),
            ModelError::NumericalOverflow(_) | ModelError::Geom(_) => Self::numeric(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io(e) => e.into(),
            TrainError::Model(e) => e.into(),
            TrainError::InvalidConfig(_) => Self::usage(e.to_string()),
            TrainError::Diverged { .. } | TrainError::NumericalOverflow(_) => Self::numeric(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::NonFinite { .. } | EvalError::Geom(_) => Self::numeric(e.to_string()),
            EvalError::LengthMismatch(_) | EvalError::Nn(_) => Self::data(e.to_string()),
            _ => Self::usage(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cryoflex", version, about = "Simulate, train and evaluate atomic-model VAEs for heterogeneous cryo-EM")]
pub struct Cli {
    /// Worker threads (default: all cores). Results are identical for any count.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Render a toy particle stack with ground-truth sidecar.
    Simulate(SimulateArgs),
    /// Run the two-stage training protocol on a particle stack.
    Train(TrainArgs),
    /// Decode conformations drawn from the latent prior.
    Sample(SampleArgs),
    /// Compute ensemble-level metrics.
    Evaluate(EvaluateArgs),
    /// Decode a straight path through latent space.
    Interpolate(InterpolateArgs),
    /// Re-run a command from its run manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Target signal-to-noise ratio used to calibrate the noise level.
    #[arg(long, conflicts_with = "noise_sigma")]
    pub snr: Option<f64>,
    /// Fixed per-pixel noise standard deviation.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    /// Place the particles on a micrograph canvas and re-extract them.
    #[arg(long)]
    pub micrograph: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

impl StageArg {
    fn label(self) -> &'static str {
        match self {
            StageArg::One => "1",
            StageArg::Two => "2",
            StageArg::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeedArg {
    All,
    One(u64),
}

fn parse_seed(s: &str) -> Result<SeedArg, String> {
    if s == "all" {
        return Ok(SeedArg::All);
    }
    s.parse().map(SeedArg::One).map_err(|_| format!("expected a non-negative integer or `all`, got {s:?}"))
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub stage: StageArg,
    /// Seed to train, or `all` for every seed in the configuration followed
    /// by held-out model selection.
    #[arg(long, alias = "rng-seed", value_parser = parse_seed, default_value = "all")]
    pub seed: SeedArg,
    /// Continue from this checkpoint manifest.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 2048)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    EmdRmsd,
    Marginals,
    Modes,
    Conditional,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Model whose prior samples are evaluated.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Multi-model PDB evaluated instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub ensemble: Option<PathBuf>,
    /// Multi-model PDB used as the reference ensemble for EMD-RMSD.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Dataset directory; its truth sidecar supplies ground truth.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Ensemble size for EMD-RMSD.
    #[arg(long)]
    pub n: Option<usize>,
    /// Prior samples drawn for marginals and modes.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Distance pair `residue:atom,residue:atom`.
    #[arg(long)]
    pub pair_a: Option<String>,
    #[arg(long)]
    pub pair_b: Option<String>,
    #[arg(long)]
    pub x_cut: Option<f64>,
    #[arg(long)]
    pub y_cut: Option<f64>,
    #[arg(long)]
    pub rng_seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Comma-separated start latent.
    #[arg(long, requires = "z_end", conflicts_with = "between_modes", allow_hyphen_values = true)]
    pub z_start: Option<String>,
    #[arg(long, requires = "z_start", allow_hyphen_values = true)]
    pub z_end: Option<String>,
    /// Use the mean latents of exemplar particles from the first two modes.
    #[arg(long, requires = "data")]
    pub between_modes: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Record of one command invocation, enough to run it again.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Command,
    /// Configuration after flag overrides.
    pub config: Config,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub threads: usize,
    pub started_unix: f64,
    /// Filled in when the command finishes.
    pub wall_clock_seconds: Option<f64>,
}

impl RunManifest {
    fn new(command: Command, config: Config, seeds: Vec<u64>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        Self {
            command,
            config,
            seeds,
            inputs,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            wall_clock_seconds: None,
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::data(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// Writes the manifest on creation and again, with timing, on `finish`.
struct ManifestGuard {
    manifest: RunManifest,
    path: PathBuf,
    start: Instant,
}

impl ManifestGuard {
    fn begin(manifest: RunManifest, out_dir: &Path, name: &str) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(name);
        manifest.write(&path)?;
        Ok(Self {
            manifest,
            path,
            start: Instant::now(),
        })
    }

    fn finish(mut self) -> Result<(), CliError> {
        self.manifest.wall_clock_seconds = Some(self.start.elapsed().as_secs_f64());
        self.manifest.write(&self.path)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    pool.build_global().map_err(|e| CliError::usage(e.to_string()))?;
    execute(cli.command, None)
}

/// Runs a command; `snapshot` replaces the config file when replaying.
fn execute(command: Command, snapshot: Option<Config>) -> Result<(), CliError> {
    let config = |path: &Option<PathBuf>| match &snapshot {
        Some(c) => Ok((c.clone(), None)),
        None => load_config(path.as_deref()),
    };
    match command {
        Command::Simulate(a) => {
            let (c, raw) = config(&a.config)?;
            cmd_simulate(a, c, raw)
        }
        Command::Train(a) => {
            let (c, _) = config(&a.config)?;
            cmd_train(a, c)
        }
        Command::Sample(a) => cmd_sample(a, snapshot.unwrap_or_default()),
        Command::Evaluate(a) => {
            let (c, _) = config(&a.config)?;
            cmd_evaluate(a, c)
        }
        Command::Interpolate(a) => cmd_interpolate(a, snapshot.unwrap_or_default()),
        Command::Replay(a) => {
            if snapshot.is_some() {
                return Err(CliError::usage("a replay manifest cannot contain another replay"));
            }
            let m = RunManifest::load(&a.manifest)?;
            if matches!(m.command, Command::Replay(_)) {
                return Err(CliError::data("a replay manifest cannot contain another replay"));
            }
            execute(m.command, Some(m.config))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(Config, Option<toml::Table>), CliError> {
    let cfg = Config::load(path)?;
    let raw = match path {
        Some(p) => Some(
            fs::read_to_string(p)?
                .parse::<toml::Table>()
                .map_err(|e| CliError::usage(format!("{}: {}", p.display(), e.message())))?,
        ),
        None => None,
    };
    Ok((cfg, raw))
}

fn sets_key(raw: &Option<toml::Table>, section: &str, key: &str) -> bool {
    raw.as_ref()
        .and_then(|t| t.get(section))
        .and_then(|s| s.as_table())
        .is_some_and(|s| s.contains_key(key))
}

fn drawn_seed() -> u64 {
    rand::random::<u32>() as u64
}

fn summary(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", line.join(" "));
}

fn cmd_simulate(mut a: SimulateArgs, mut cfg: Config, raw: Option<toml::Table>) -> Result<(), CliError> {
    let sim = &mut cfg.simulation;
    if let Some(n) = a.particles {
        sim.particles = n;
    }
    if let Some(s) = a.snr {
        sim.snr = s;
        sim.noise_sigma = None;
    }
    if let Some(s) = a.noise_sigma {
        sim.noise_sigma = Some(s);
    }
    let seed = a.rng_seed.unwrap_or_else(|| if sets_key(&raw, "simulation", "seed") { sim.seed } else { drawn_seed() });
    sim.seed = seed;
    a.rng_seed = Some(seed);
    sim.ensemble.validate()?;
    sim.ctf.validate().map_err(|e| CliError::usage(e.to_string()))?;

    let out = a.out.clone();
    let mut outputs = vec![
        out.join(cryoflex::simulate::STACK_FILE),
        out.join(SIDECAR_FILE),
        out.join(cryoflex::simulate::META_FILE),
        out.join(cryoflex::simulate::BASE_JSON_FILE),
        out.join(cryoflex::simulate::BASE_PDB_FILE),
    ];
    if a.micrograph {
        outputs.push(out.join(MICROGRAPH_FILE));
        outputs.push(out.join(MICROGRAPH_POSITIONS_FILE));
    }
    let micrograph = a.micrograph;
    let guard = ManifestGuard::begin(
        RunManifest::new(Command::Simulate(a), cfg.clone(), vec![seed], Vec::new(), outputs),
        &out,
        "simulate.manifest.json",
    )?;

    let mut ds = simulate_dataset(&cfg.simulation)?;
    if micrograph {
        let per_row = (ds.stack.len() as f64).sqrt().ceil().max(1.0) as usize;
        let margin = ds.stack.width / 4;
        let mic = compose_micrograph(&ds.stack, per_row, margin, &mut counter_rng(seed, MICROGRAPH_STREAM, 0, 0));
        let mut canvas = ParticleStack::new(mic.height, mic.width, ds.stack.pixel_size);
        canvas.data.clone_from(&mic.data);
        write_stack(out.join(MICROGRAPH_FILE), &canvas)?;
        let mut f = io::BufWriter::new(fs::File::create(out.join(MICROGRAPH_POSITIONS_FILE))?);
        writeln!(f, "index,row,col")?;
        for (i, (r, c)) in mic.positions.iter().enumerate() {
            writeln!(f, "{i},{r},{c}")?;
        }
        f.flush()?;
        ds.stack = extract_particles(&mic, ds.stack.height, ds.stack.width, ds.stack.pixel_size);
    }
    ds.write(&out)?;
    guard.finish()?;
    summary(&[
        ("command", "simulate".into()),
        ("particles", ds.stack.len().to_string()),
        ("noise_sigma", format!("{:.6}", ds.meta.noise_sigma)),
        ("seed", seed.to_string()),
        ("out", out.display().to_string()),
    ]);
    Ok(())
}

const MICROGRAPH_FILE: &str = "micrograph.cemp";
const MICROGRAPH_POSITIONS_FILE: &str = "micrograph_positions.csv";
const MICROGRAPH_STREAM: u64 = 4;

fn load_dataset(dir: &Path) -> Result<ParticleDataset, CliError> {
    ParticleDataset::load(dir).map_err(|e| match e {
        SimulateError::Io(io) => CliError::usage(format!("{}: {io}", dir.display())),
        other => other.into(),
    })
}

fn cmd_train(a: TrainArgs, mut cfg: Config) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(e) = a.stage1_epochs {
        t.stage1_epochs = e;
    }
    if let Some(e) = a.stage2_epochs {
        t.stage2_epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    t.validate()?;
    let seeds = match a.seed {
        SeedArg::All => t.seeds.clone(),
        SeedArg::One(s) => vec![s],
    };
    if a.resume.is_some() && seeds.len() != 1 {
        return Err(CliError::usage("--resume needs a single --seed"));
    }

    // Validate every input before anything is written.
    let data = load_dataset(&a.data)?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut model_cfg = cfg.model.clone();
    configure_for_dataset(&mut model_cfg, &data.meta, data.base.n_residues());
    model_cfg.validate()?;
    let stage1_inputs: Vec<PathBuf> = if a.stage == StageArg::Two && resume.is_none() {
        let paths: Vec<PathBuf> = seeds
            .iter()
            .map(|&s| checkpoint_stem(&a.out, s, Stage::PoseOnly, "final").with_extension("json"))
            .collect();
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(CliError::usage(format!("stage 2 needs the stage-1 checkpoint {} (or --resume)", p.display())));
        }
        paths
    } else {
        Vec::new()
    };

    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.resume.clone());
    inputs.extend(stage1_inputs.iter().cloned());
    let out = a.out.clone();
    let stage = a.stage;
    let guard = ManifestGuard::begin(
        RunManifest::new(Command::Train(a), cfg.clone(), seeds.clone(), inputs, vec![out.clone()]),
        &out,
        &format!("train_stage{}.manifest.json", stage.label()),
    )?;

    let mut resume = resume;
    let mut finals = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let mut trainer = if let Some(ckpt) = resume.take() {
            Trainer::resume(&data, ckpt, Some(cfg.train.clone()))?
        } else if stage == StageArg::Two {
            Trainer::resume(&data, Checkpoint::load(&stage1_inputs[k])?, Some(cfg.train.clone()))?
        } else {
            Trainer::new(&data, model_cfg.clone(), cfg.train.clone(), seed)?
        };
        let seed = trainer.seed;
        let mut report = |r: &StepRecord, trainer_stage: Stage, epoch: usize| {
            eprintln!(
                "seed={seed} stage={} epoch={epoch} step={} total={:.4} reconstruction={:.4}",
                stage_number(trainer_stage),
                r.step,
                r.loss.total,
                r.loss.reconstruction
            );
        };
        if stage != StageArg::Two && trainer.progress.stage == Stage::PoseOnly {
            let path = run_logged(&mut trainer, &out, &mut report)?;
            summary(&[
                ("seed", seed.to_string()),
                ("stage", "1".into()),
                ("checkpoint", path.display().to_string()),
            ]);
        }
        if stage != StageArg::One {
            if trainer.progress.stage == Stage::PoseOnly {
                if !trainer.stage_done() {
                    return Err(CliError::usage("checkpoint is in the middle of stage 1; finish it with --stage 1 first"));
                }
                trainer.advance_stage();
            }
            let path = run_logged(&mut trainer, &out, &mut report)?;
            summary(&[
                ("seed", seed.to_string()),
                ("stage", "2".into()),
                ("checkpoint", path.display().to_string()),
            ]);
            finals.push(path);
        }
    }
    if finals.len() > 1 {
        let ckpts = finals.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
        let (best, scores) = select_best(&ckpts, &data, cfg.train.heldout_every, cfg.train.selection_images)?;
        let best_path = ckpts[best].save(out.join("best"))?;
        let scores: Vec<String> = scores.iter().map(|s| format!("{s:.6}")).collect();
        summary(&[
            ("best_seed", ckpts[best].manifest.seed.to_string()),
            ("heldout_scores", scores.join(",")),
            ("checkpoint", best_path.display().to_string()),
        ]);
    }
    guard.finish()
}

fn stage_number(s: Stage) -> u8 {
    match s {
        Stage::PoseOnly => 1,
        Stage::Full => 2,
    }
}

/// Runs the trainer's current stage, reporting the last step of each epoch.
fn run_logged(trainer: &mut Trainer, out: &Path, report: &mut impl FnMut(&StepRecord, Stage, usize)) -> Result<PathBuf, CliError> {
    let stage = trainer.progress.stage;
    let per_epoch = trainer.n_batches() as u64;
    let mut seen = 0u64;
    let path = trainer.run_stage(out, |r| {
        seen += 1;
        if per_epoch > 0 && seen % per_epoch == 0 {
            report(r, stage, (seen / per_epoch - 1) as usize);
        }
    })?;
    Ok(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        TrainError::Io(io) => CliError::usage(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn latent_columns(z: &Matrix) -> (Vec<String>, Vec<Vec<f64>>) {
    let names = (0..z.cols).map(|j| format!("z{j}")).collect();
    let cols = (0..z.cols).map(|j| (0..z.rows).map(|i| z.row(i)[j]).collect()).collect();
    (names, cols)
}

fn write_latents(path: &Path, z: &Matrix) -> Result<(), CliError> {
    let (names, cols) = latent_columns(z);
    let columns: Vec<(&str, &[f64])> = names.iter().map(|s| s.as_str()).zip(cols.iter().map(|c| c.as_slice())).collect();
    write_columns_csv(io::BufWriter::new(fs::File::create(path)?), &columns)?;
    Ok(())
}

fn cmd_sample(mut a: SampleArgs, cfg: Config) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let seed = *a.rng_seed.get_or_insert_with(drawn_seed);
    let out = a.out.clone();
    let (pdb, latents) = (out.join("samples.pdb"), out.join("latents.csv"));
    let (count, input) = (a.count, a.checkpoint.clone());
    let guard = ManifestGuard::begin(
        RunManifest::new(Command::Sample(a), cfg, vec![seed], vec![input], vec![pdb.clone(), latents.clone()]),
        &out,
        "sample.manifest.json",
    )?;
    let (confs, z) = prior_samples(&model, &ckpt.store, count, seed)?;
    write_pdb_file(&pdb, &confs)?;
    write_latents(&latents, &z)?;
    guard.finish()?;
    summary(&[
        ("command", "sample".into()),
        ("count", count.to_string()),
        ("seed", seed.to_string()),
        ("pdb", pdb.display().to_string()),
    ]);
    Ok(())
}

fn parse_pair(s: &str) -> Result<[String; 2], CliError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => {
            let pair = [a.to_string(), b.to_string()];
            EvalConfig::pair(&pair)?;
            Ok(pair)
        }
        _ => Err(CliError::usage(format!("expected residue:atom,residue:atom, got {s:?}"))),
    }
}

/// Dataset with its optional ground truth.
struct TruthData {
    data: ParticleDataset,
    truth: Option<Vec<TruthRecord>>,
}

impl TruthData {
    fn load(dir: &Path) -> Result<Self, CliError> {
        let data = load_dataset(dir)?;
        let sidecar = dir.join(SIDECAR_FILE);
        let truth = if sidecar.exists() { Some(read_sidecar(&sidecar)?) } else { None };
        if let Some(t) = &truth {
            if t.len() != data.len() {
                return Err(CliError::data(format!("sidecar has {} records for {} particles", t.len(), data.len())));
            }
        }
        Ok(Self { data, truth })
    }

    fn require_truth(&self) -> Result<&[TruthRecord], CliError> {
        self.truth.as_deref().ok_or_else(|| EvalError::MissingGroundTruth.into())
    }

    fn conformations(&self, idx: &[usize]) -> Result<Vec<Conformation>, CliError> {
        let truth = self.require_truth()?;
        Ok(idx
            .iter()
            .map(|&i| truth_conformation(&self.data.base, &self.data.meta.ensemble, &truth[i]))
            .collect())
    }
}

/// Midpoint between the smallest and largest mode-centre distance of a pair.
fn mode_cut(base: &BaseStructure, meta: &DatasetMeta, pair: &(AtomRef, AtomRef)) -> Result<Option<f64>, CliError> {
    if meta.ensemble.modes.len() < 2 {
        return Ok(None);
    }
    let centres: Vec<Conformation> = meta.ensemble.modes.iter().map(|m| hinge_conformation(base, m, m.angle_mean)).collect();
    let d = distance_marginal(&centres, &pair.0, &pair.1)?;
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(0.5 * (lo + hi)))
}

fn cmd_evaluate(mut a: EvaluateArgs, mut cfg: Config) -> Result<(), CliError> {
    let e = &mut cfg.eval;
    if let Some(n) = a.n {
        e.emd_samples = n;
    }
    if let Some(n) = a.samples {
        e.prior_samples = n;
    }
    if let Some(p) = &a.pair_a {
        e.pair_a = parse_pair(p)?;
    }
    if let Some(p) = &a.pair_b {
        e.pair_b = Some(parse_pair(p)?);
    }
    if a.x_cut.is_some() {
        e.x_cut = a.x_cut;
    }
    if a.y_cut.is_some() {
        e.y_cut = a.y_cut;
    }
    let pair_a = EvalConfig::pair(&e.pair_a)?;
    let pair_b = e.pair_b.as_ref().map(EvalConfig::pair).transpose()?;

    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let model = ckpt.as_ref().map(|c| c.model()).transpose()?;
    let ensemble = a.ensemble.as_deref().map(read_pdb_ensemble).transpose()?;
    let reference = a.reference.as_deref().map(read_pdb_ensemble).transpose()?;
    let data = a.data.as_deref().map(TruthData::load).transpose()?;
    match a.metric {
        Metric::EmdRmsd => {
            if model.is_none() && ensemble.is_none() {
                return Err(CliError::usage("emd-rmsd needs --checkpoint or --ensemble"));
            }
            if reference.is_none() && data.is_none() {
                return Err(CliError::usage("emd-rmsd needs --reference or --data"));
            }
        }
        Metric::Marginals | Metric::Modes => {
            if model.is_none() && ensemble.is_none() && (a.metric == Metric::Marginals || data.is_none()) {
                return Err(CliError::usage("needs --checkpoint or --ensemble (modes also accepts --data alone)"));
            }
        }
        Metric::Conditional => {
            if model.is_none() {
                return Err(CliError::usage("conditional needs --checkpoint"));
            }
            match &data {
                None => return Err(CliError::usage("conditional needs --data")),
                Some(d) => {
                    d.require_truth()?;
                }
            }
        }
    }
    let seed = *a.rng_seed.get_or_insert_with(drawn_seed);
    let out = a.out.clone();
    let metric = a.metric;
    let inputs: Vec<PathBuf> = [&a.checkpoint, &a.ensemble, &a.reference, &a.data].into_iter().flatten().cloned().collect();
    let guard = ManifestGuard::begin(
        RunManifest::new(Command::Evaluate(a), cfg.clone(), vec![seed], inputs, vec![out.clone()]),
        &out,
        &format!("evaluate_{}.manifest.json", metric_name(metric)),
    )?;

    let e = &cfg.eval;
    // Samples under evaluation: explicit ensemble, else prior samples.
    let evaluated = |n: usize| -> Result<Option<Vec<Conformation>>, CliError> {
        if let Some(ens) = &ensemble {
            return Ok(Some(ens.clone()));
        }
        match (&model, &ckpt) {
            (Some(m), Some(c)) => Ok(Some(prior_samples(m, &c.store, n, seed)?.0)),
            _ => Ok(None),
        }
    };
    let heldout = |d: &TruthData| -> Result<Vec<Conformation>, CliError> {
        let (_, held) = split_indices(d.data.len(), cfg.train.heldout_every);
        d.conformations(&held)
    };

    let mut line: Vec<(&str, String)> = vec![("metric", metric_name(metric).into())];
    match metric {
        Metric::EmdRmsd => {
            let samples = evaluated(e.emd_samples)?.expect("checked above");
            let truth = match (&reference, &data) {
                (Some(r), _) => r.clone(),
                (None, Some(d)) => heldout(d)?,
                (None, None) => unreachable!("checked above"),
            };
            let n = e.emd_samples.min(samples.len()).min(truth.len());
            let res = emd_rmsd(&samples, &truth, n, seed, e.atoms)?;
            write_assignment_csv(io::BufWriter::new(fs::File::create(out.join("emd_assignment.csv"))?), &res)?;
            line.push(("n", n.to_string()));
            line.push(("emd_rmsd", format!("{:.6}", res.mean)));
            if let Some(d) = &data {
                let base = vec![d.data.base.conformation(); n];
                let baseline = emd_rmsd(&base, &truth, n, seed, e.atoms)?;
                line.push(("baseline_emd_rmsd", format!("{:.6}", baseline.mean)));
                line.push(("reduction", format!("{:.4}", 1.0 - res.mean / baseline.mean)));
            }
        }
        Metric::Marginals => {
            let samples = evaluated(e.prior_samples)?.expect("checked above");
            let da = distance_marginal(&samples, &pair_a.0, &pair_a.1)?;
            let db = pair_b.as_ref().map(|p| distance_marginal(&samples, &p.0, &p.1)).transpose()?;
            let mut cols: Vec<(&str, &[f64])> = vec![("distance_a", &da)];
            if let Some(db) = &db {
                cols.push(("distance_b", db));
            }
            write_columns_csv(io::BufWriter::new(fs::File::create(out.join("marginals.csv"))?), &cols)?;
            let mean = da.iter().sum::<f64>() / da.len() as f64;
            line.push(("n", da.len().to_string()));
            line.push(("mean_a", format!("{mean:.4}")));
            line.push(("bimodality_a", format!("{:.4}", bimodality_coefficient(&da))));
        }
        Metric::Modes => {
            let samples = match evaluated(e.prior_samples)? {
                Some(s) => s,
                None => {
                    let d = data.as_ref().expect("checked above");
                    d.conformations(&(0..d.data.len()).collect::<Vec<_>>())?
                }
            };
            let auto = |p: &(AtomRef, AtomRef)| -> Result<Option<f64>, CliError> {
                match &data {
                    Some(d) => mode_cut(&d.data.base, &d.data.meta, p),
                    None => Ok(None),
                }
            };
            let x_cut = match e.x_cut {
                Some(c) => c,
                None => auto(&pair_a)?.unwrap_or(FALLBACK_CUTS.0),
            };
            let xs = distance_marginal(&samples, &pair_a.0, &pair_a.1)?;
            line.push(("n", xs.len().to_string()));
            line.push(("x_cut", format!("{x_cut:.4}")));
            match &pair_b {
                Some(pb) => {
                    let y_cut = match e.y_cut {
                        Some(c) => c,
                        None => auto(pb)?.unwrap_or(FALLBACK_CUTS.1),
                    };
                    let ys = distance_marginal(&samples, &pb.0, &pb.1)?;
                    let q = mode_proportions(&xs, &ys, x_cut, y_cut)?;
                    write_quadrants_csv(io::BufWriter::new(fs::File::create(out.join("modes.csv"))?), &q, x_cut, y_cut)?;
                    line.push(("y_cut", format!("{y_cut:.4}")));
                    for (k, v) in ["low_low", "high_low", "low_high", "high_high"].into_iter().zip(q.as_array()) {
                        line.push((k, format!("{v:.4}")));
                    }
                }
                None => {
                    let below = fraction_below(&xs, x_cut);
                    let mut f = io::BufWriter::new(fs::File::create(out.join("modes.csv"))?);
                    writeln!(f, "group,cut,fraction")?;
                    writeln!(f, "below,{x_cut},{below}")?;
                    writeln!(f, "above,{x_cut},{}", 1.0 - below)?;
                    f.flush()?;
                    line.push(("below", format!("{below:.4}")));
                    line.push(("above", format!("{:.4}", 1.0 - below)));
                }
            }
            line.push(("bimodality", format!("{:.4}", bimodality_coefficient(&xs))));
        }
        Metric::Conditional => {
            let (m, c, d) = (model.as_ref().expect("checked"), ckpt.as_ref().expect("checked"), data.as_ref().expect("checked"));
            let (_, mut held) = split_indices(d.data.len(), cfg.train.heldout_every);
            held.truncate(e.prior_samples);
            let images: Vec<Vec<f64>> = held.iter().map(|&i| d.data.stack.image_f64(i)).collect();
            let truth = d.conformations(&held)?;
            let res = conditional_correlation(m, &c.store, &images, Some(&truth), (&pair_a.0, &pair_a.1), seed)?;
            write_columns_csv(
                io::BufWriter::new(fs::File::create(out.join("conditional.csv"))?),
                &[("predicted", &res.predicted), ("truth", &res.truth)],
            )?;
            line.push(("n", res.predicted.len().to_string()));
            line.push(("r", format!("{:.6}", res.r)));
            line.push(("z", format!("{:.4}", res.z)));
            line.push(("significant_99", (res.z > Z_99_ONE_SIDED).to_string()));
        }
    }
    guard.finish()?;
    line.push(("seed", seed.to_string()));
    summary(&line);
    Ok(())
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::EmdRmsd => "emd-rmsd",
        Metric::Marginals => "marginals",
        Metric::Modes => "modes",
        Metric::Conditional => "conditional",
    }
}

fn parse_latent(s: &str, dim: usize) -> Result<Vec<f64>, CliError> {
    let z: Vec<f64> = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::usage(format!("bad latent entry {v:?}"))))
        .collect::<Result<_, _>>()?;
    if z.len() != dim {
        return Err(CliError::usage(format!("latent has {} entries, model expects {dim}", z.len())));
    }
    Ok(z)
}

fn cmd_interpolate(a: InterpolateArgs, cfg: Config) -> Result<(), CliError> {
    if a.steps < 2 {
        return Err(CliError::usage("--steps must be at least 2"));
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let dim = model.config.conf_dim;
    let (z_start, z_end) = match (&a.z_start, &a.z_end, a.between_modes) {
        (Some(s), Some(e), false) => (parse_latent(s, dim)?, parse_latent(e, dim)?),
        (None, None, true) => {
            let d = TruthData::load(a.data.as_deref().expect("clap requires --data"))?;
            let truth = d.require_truth()?;
            if d.data.meta.ensemble.modes.len() < 2 {
                return Err(CliError::usage("--between-modes needs a dataset with at least two modes"));
            }
            let mut ends = Vec::new();
            for mode in 0..2 {
                let idx: Vec<usize> = truth.iter().filter(|r| r.mode == mode).map(|r| r.index).take(EXEMPLARS_PER_MODE).collect();
                if idx.is_empty() {
                    return Err(CliError::data(format!("no particles of mode {mode} in the dataset")));
                }
                let images: Vec<Vec<f64>> = idx.iter().map(|&i| d.data.stack.image_f64(i)).collect();
                let means = encode_means(&model, &ckpt.store, &images)?;
                let mut z = vec![0.0; dim];
                for m in &means {
                    for (zi, mi) in z.iter_mut().zip(m) {
                        *zi += mi / means.len() as f64;
                    }
                }
                ends.push(z);
            }
            let end = ends.pop().expect("two modes");
            (ends.pop().expect("two modes"), end)
        }
        _ => return Err(CliError::usage("give either --z-start and --z-end or --between-modes")),
    };
    let out = a.out.clone();
    let (pdb, latents) = (out.join("trajectory.pdb"), out.join("latents.csv"));
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(a.data.clone());
    let steps = a.steps;
    let guard = ManifestGuard::begin(
        RunManifest::new(Command::Interpolate(a), cfg, Vec::new(), inputs, vec![pdb.clone(), latents.clone()]),
        &out,
        "interpolate.manifest.json",
    )?;
    let (confs, z) = latent_interpolation(&model, &ckpt.store, &z_start, &z_end, steps)?;
    write_pdb_file(&pdb, &confs)?;
    write_latents(&latents, &z)?;
    guard.finish()?;
    summary(&[
        ("command", "interpolate".into()),
        ("steps", steps.to_string()),
        ("pdb", pdb.display().to_string()),
    ]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_argument() {
        assert_eq!(parse_seed("all").unwrap(), SeedArg::All);
        assert_eq!(parse_seed("7").unwrap(), SeedArg::One(7));
        assert!(parse_seed("-1").is_err());
    }

    #[test]
    fn pair_argument() {
        assert_eq!(parse_pair("0:CA, 31:CA").unwrap(), ["0:CA".to_string(), "31:CA".to_string()]);
        assert!(parse_pair("0:CA").is_err());
        assert_eq!(parse_pair("x:CA,1:CA").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn latent_argument() {
        assert_eq!(parse_latent("1, -2.5", 2).unwrap(), vec![1.0, -2.5]);
        assert!(parse_latent("1,2,3", 2).is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(CliError::from(EvalError::MissingGroundTruth).exit_code(), 2);
        assert_eq!(CliError::from(SimulateError::BadMagic { found: *b"XXXX" }).exit_code(), 3);
        let div = TrainError::Diverged {
            step: 3,
            reason: "backbone".into(),
        };
        assert_eq!(CliError::from(div).exit_code(), 4);
    }

    #[test]
    fn manifest_round_trips() {
        let cmd = Command::Sample(SampleArgs {
            checkpoint: "a.json".into(),
            count: 3,
            out: "o".into(),
            rng_seed: Some(9),
        });
        let m = RunManifest::new(cmd, Config::default(), vec![9], vec![], vec![]);
        let text = serde_json::to_string(&m).unwrap();
        let back: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.config, m.config);
        assert!(matches!(back.command, Command::Sample(SampleArgs { count: 3, rng_seed: Some(9), .. })));
    }
}
