//! The `afford` command line: data generation, training, exploration,
//! evaluation, sampling and reporting. Every command writes a run directory
//! holding the resolved config, a `run.json` record and its artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::affordance::{AffordanceModel, GoalSampler, NoiseSampler, RandomCodeSampler};
use crate::checkpoint::{sha256_hex, Checkpoint, Payload};
use crate::config::{Preset, RunConfig};
use crate::cvae::{train_cvae, Cvae};
use crate::dataset::{generate_pairs, ingest_pairs, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    build_suite, eval_affordances, eval_policy, report, sample_panel, EvalReport, LearnedPolicy, OraclePolicy,
    TaskSuite, ZeroPolicy, METRICS_FILE, SAMPLES_FILE,
};
use crate::explorer::{explore_loop, EpisodeMetrics, ExploreObserver, Policy, Trajectory};
use crate::image::Image;
use crate::prior::{train_prior, Prior};
use crate::seed;
use crate::simenv::reset;
use crate::vqvae::{train_vqvae, VqVae};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";

#[derive(Debug, Parser)]
#[command(name = "afford", version, about = "Goal sampling and self-supervised exploration on a tabletop simulator")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; unset keys take the preset's values.
    #[arg(long, global = true, alias = "env")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Affordance,
    Cvae,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Affordance,
    Cvae,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (o_c, o_g) pairs with the scripted behaviors, or ingest a
    /// directory of `<id>_c.png` / `<id>_g.png` files.
    GenData {
        /// Run directory; defaults to a timestamped one under the run root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `dataset.pairs`.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        ingest: Option<PathBuf>,
    },
    /// Train the VQ-VAE on every frame of a dataset.
    TrainVqvae {
        /// A gen-data run directory or its `data/` directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the conditional prior on code pairs from a frozen VQ-VAE.
    TrainPrior {
        #[arg(long)]
        data: PathBuf,
        /// VQ-VAE checkpoint; fixes the vocabulary and sequence length.
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the conditional VAE baseline.
    TrainCvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta_kl: Option<f64>,
    },
    /// Goal-conditioned exploration with hindsight relabeling.
    Explore {
        /// Where exploration goals come from.
        #[arg(long, value_enum)]
        sampler: SamplerKind,
        /// Frozen codec for policy inputs and the random-goal sampler.
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success rates on the test-goal suite, and optionally affordance
    /// plausibility and diversity.
    Evaluate {
        /// A policy checkpoint, or `oracle`, `zero` or `untrained`.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        /// Suite file; built and saved here when missing.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// With `--vqvae`, also score affordance samples from this prior.
        #[arg(long)]
        prior: Option<PathBuf>,
        /// With `--vqvae`, also score samples from this CVAE.
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Goal images for one conditioning image.
    Sample {
        #[arg(long, value_enum, default_value = "affordance")]
        model: ModelKind,
        #[arg(long)]
        vqvae: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        #[arg(long)]
        cvae: Option<PathBuf>,
        /// Conditioning PNG, resized to the model's input size.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tables and figures from evaluation and exploration run directories.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainVqvae { .. } => "train-vqvae",
            Command::TrainPrior { .. } => "train-prior",
            Command::TrainCvae { .. } => "train-cvae",
            Command::Explore { .. } => "explore",
            Command::Evaluate { .. } => "evaluate",
            Command::Sample { .. } => "sample",
            Command::Report { .. } => "report",
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Command::GenData { out, .. }
            | Command::TrainVqvae { out, .. }
            | Command::TrainPrior { out, .. }
            | Command::TrainCvae { out, .. }
            | Command::Explore { out, .. }
            | Command::Evaluate { out, .. }
            | Command::Sample { out, .. } => out.as_deref(),
            Command::Report { out, .. } => Some(out),
        }
    }
}

/// Process exit status for an error: 3 config, 4 checkpoint, 5 file or
/// data, 1 anything else. Usage errors exit with clap's 2.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Checkpoint { .. } | Error::Incompatible(_) => 4,
        Error::File { .. } | Error::MissingPartner { .. } | Error::EmptyDataset | Error::Io(_) => 5,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The fully resolved configuration: preset, then file, then `--seed`.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            let base = RunConfig::preset(common.preset).to_toml()?;
            merged_config(&base, &text).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                e => e,
            })?
        }
        None => RunConfig::preset(common.preset),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `overlay` applied key by key on top of `base`, then parsed strictly.
fn merged_config(base: &str, overlay: &str) -> Result<RunConfig> {
    let mut b: toml::Table = toml::from_str(base).map_err(|e| Error::Config(e.message().to_string()))?;
    let o: toml::Table = toml::from_str(overlay).map_err(|e| Error::Config(e.message().to_string()))?;
    merge(&mut b, o);
    RunConfig::from_toml(&toml::to_string(&b).map_err(|e| Error::Config(e.to_string()))?)
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Provenance record written as `run.json`.
#[derive(Debug, Serialize)]
struct RunRecord {
    command: String,
    argv: Vec<String>,
    version: String,
    seed: u64,
    config_hash: String,
    started: String,
    finished: Option<String>,
    /// sha256 of every input file, by role.
    inputs: BTreeMap<String, String>,
    /// sha256 of every file written, by name relative to the run directory.
    outputs: BTreeMap<String, String>,
}

struct Run {
    dir: PathBuf,
    cfg: RunConfig,
    record: RunRecord,
}

impl Run {
    fn start(cmd: &Command, cfg: RunConfig) -> Result<Self> {
        let now = chrono::Local::now();
        let dir = match cmd.out() {
            Some(d) => d.to_path_buf(),
            None => cfg.run_root().join(format!("{}-{}", now.format("%Y%m%d-%H%M%S"), cmd.name())),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
        let record = RunRecord {
            command: cmd.name().into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            started: now.to_rfc3339(),
            finished: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        let run = Self { dir, cfg, record };
        let p = run.path(CONFIG_FILE);
        fs::write(&p, run.cfg.to_toml()?).map_err(|e| Error::file(&p, e))?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let h = if path.is_dir() { dir_hash(path)? } else { file_hash(path)? };
        self.record.inputs.insert(role.into(), h);
        Ok(())
    }

    fn save_checkpoint(&self, ckpt: &Checkpoint, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        ckpt.save(&p)?;
        Ok(p)
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.record.finished = Some(chrono::Local::now().to_rfc3339());
        let mut outputs = BTreeMap::new();
        collect_hashes(&self.dir, &self.dir, &mut outputs)?;
        outputs.remove(RUN_FILE);
        self.record.outputs = outputs;
        let p = self.path(RUN_FILE);
        fs::write(&p, serde_json::to_string_pretty(&self.record)?).map_err(|e| Error::file(&p, e))?;
        Ok(self.dir)
    }
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::file(path, e))?))
}

fn dir_hash(dir: &Path) -> Result<String> {
    let mut all = BTreeMap::new();
    collect_hashes(dir, dir, &mut all)?;
    Ok(sha256_hex(serde_json::to_string(&all)?.as_bytes()))
}

fn collect_hashes(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::file(dir, e))? {
        let p = entry?.path();
        if p.is_dir() {
            collect_hashes(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, file_hash(&p)?);
        }
    }
    Ok(())
}

/// Appends JSON lines to a file, creating it.
struct JsonLines {
    path: PathBuf,
    file: fs::File,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
        Ok(Self { path, file })
    }

    fn write<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.file, "{line}").map_err(|e| Error::file(&self.path, e))
    }
}

fn load_ckpt(path: &Path, payload: Payload) -> Result<Checkpoint> {
    Checkpoint::load(path, payload, &Device::Cpu)
}

fn load_vqvae(path: &Path) -> Result<(Checkpoint, VqVae)> {
    let c = load_ckpt(path, Payload::Vqvae)?;
    let m = VqVae::from_checkpoint(&c, DType::F32)?;
    Ok((c, m))
}

fn need<'a>(what: &str, p: &'a Option<PathBuf>) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{what} is required here")))
}

pub fn run(cli: Cli) -> Result<PathBuf> {
    if let Command::Report { dirs, out } = &cli.command {
        let r = report(dirs, out)?;
        for f in &r.files {
            tracing::info!(file = %f.display(), "wrote");
        }
        return Ok(out.clone());
    }
    let cfg = resolve_config(&cli.common)?;
    let mut run = Run::start(&cli.command, cfg)?;
    match &cli.command {
        Command::GenData { pairs, ingest, .. } => gen_data(&mut run, *pairs, ingest.as_deref())?,
        Command::TrainVqvae { data, steps, .. } => cmd_train_vqvae(&mut run, data, *steps)?,
        Command::TrainPrior { data, vqvae, steps, .. } => cmd_train_prior(&mut run, data, vqvae, *steps)?,
        Command::TrainCvae { data, steps, beta_kl, .. } => cmd_train_cvae(&mut run, data, *steps, *beta_kl)?,
        Command::Explore { sampler, vqvae, prior, cvae, episodes, .. } => {
            cmd_explore(&mut run, *sampler, vqvae, prior, cvae, *episodes)?
        }
        Command::Evaluate { policy, vqvae, suite, trials, prior, cvae, .. } => {
            cmd_evaluate(&mut run, policy, vqvae, suite, *trials, prior, cvae)?
        }
        Command::Sample { model, vqvae, prior, cvae, image, n, temperature, top_k, .. } => {
            cmd_sample(&mut run, *model, vqvae, prior, cvae, image, *n, *temperature, *top_k)?
        }
        Command::Report { .. } => unreachable!(),
    }
    run.finish()
}

fn gen_data(run: &mut Run, pairs: Option<usize>, ingest: Option<&Path>) -> Result<()> {
    let cfg = &run.cfg;
    let data = match ingest {
        Some(dir) => {
            let d = ingest_pairs(dir, cfg.env.image_size)?;
            let n = d.pairs.len();
            if n == 0 {
                return Err(Error::EmptyDataset);
            }
            d.with_split(cfg.dataset.val_fraction, seed::derive_named(cfg.seed, "split"))
        }
        None => generate_pairs(&cfg.env, &cfg.dataset, pairs.unwrap_or(cfg.dataset.pairs), seed::derive_named(cfg.seed, "data"))?,
    };
    if let Some(dir) = ingest {
        run.input("ingest", dir)?;
    }
    data.save(&run.path("data"))?;
    tracing::info!(pairs = data.pairs.len(), train = data.split.train.len(), val = data.split.val.len(), "dataset written");
    Ok(())
}

/// `path` may be a dataset directory or a gen-data run directory.
fn load_data(run: &mut Run, path: &Path) -> Result<Dataset> {
    let dir = if path.join("data").is_dir() { path.join("data") } else { path.to_path_buf() };
    run.input("data", &dir)?;
    let d = Dataset::load(&dir)?;
    if d.pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((h, w)) = d.dims() {
        let s = run.cfg.env.image_size;
        if (h, w) != (s, s) {
            return Err(Error::Config(format!("dataset frames are {h}x{w} but env.image_size is {s}")));
        }
    }
    Ok(d)
}

fn cmd_train_vqvae(run: &mut Run, data: &Path, steps: Option<usize>) -> Result<()> {
    let d = load_data(run, data)?;
    let mut cfg = run.cfg.vqvae.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let train = Dataset::images(d.train());
    let val = Dataset::images(d.val());
    let mut log = JsonLines::create(run.path(TRAIN_LOG_FILE))?;
    let mut log_err = None;
    let (model, _) = train_vqvae(
        &train,
        &val,
        &cfg,
        seed::derive_named(run.cfg.seed, "vqvae"),
        |e| {
            if let Err(err) = log.write(e) {
                log_err.get_or_insert(err);
            }
        },
        |step, m| {
            if step < cfg.steps {
                run.save_checkpoint(&m.to_checkpoint()?, &format!("vqvae-{step:06}.safetensors"))?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    run.save_checkpoint(&model.to_checkpoint()?, "vqvae.safetensors")?;
    Ok(())
}

fn cmd_train_prior(run: &mut Run, data: &Path, vqvae: &Path, steps: Option<usize>) -> Result<()> {
    let d = load_data(run, data)?;
    run.input("vqvae", vqvae)?;
    let (_, vq) = load_vqvae(vqvae)?;
    let vc = vq.config();
    // vocabulary and sequence length always follow the codec
    let mut cfg = run.cfg.prior.clone();
    cfg.vocab = vc.codebook_size;
    cfg.seq_len = vc.seq_len();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let encode = |pairs: Vec<&crate::dataset::FramePair>| -> Result<Vec<_>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(256) {
            let c = vq.codes(&chunk.iter().map(|p| &p.o_c).collect::<Vec<_>>())?;
            let g = vq.codes(&chunk.iter().map(|p| &p.o_g).collect::<Vec<_>>())?;
            out.extend(c.into_iter().zip(g));
        }
        Ok(out)
    };
    let train = encode(d.train().collect())?;
    let val = encode(d.val().collect())?;
    let identity = vq.identity()?;
    let mut log = JsonLines::create(run.path(TRAIN_LOG_FILE))?;
    let mut log_err = None;
    let (model, _) = train_prior(
        &train,
        &val,
        &cfg,
        seed::derive_named(run.cfg.seed, "prior"),
        |e| {
            if let Err(err) = log.write(e) {
                log_err.get_or_insert(err);
            }
        },
        |step, m: &Prior| {
            if step < cfg.steps {
                run.save_checkpoint(&m.to_checkpoint(&identity)?, &format!("prior-{step:06}.safetensors"))?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    run.save_checkpoint(&model.to_checkpoint(&identity)?, "prior.safetensors")?;
    Ok(())
}

fn cmd_train_cvae(run: &mut Run, data: &Path, steps: Option<usize>, beta_kl: Option<f64>) -> Result<()> {
    let d = load_data(run, data)?;
    let mut cfg = run.cfg.cvae.clone();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(b) = beta_kl {
        cfg.beta_kl = b;
    }
    cfg.validate()?;
    let pairs: Vec<(&Image, &Image)> = d.train().map(|p| (&p.o_c, &p.o_g)).collect();
    let mut log = JsonLines::create(run.path(TRAIN_LOG_FILE))?;
    let mut log_err = None;
    let (model, _) = train_cvae(
        &pairs,
        &cfg,
        seed::derive_named(run.cfg.seed, "cvae"),
        |e| {
            if let Err(err) = log.write(e) {
                log_err.get_or_insert(err);
            }
        },
        |step, m| {
            if step < cfg.steps {
                run.save_checkpoint(&m.to_checkpoint()?, &format!("cvae-{step:06}.safetensors"))?;
            }
            Ok(())
        },
    )?;
    if let Some(e) = log_err {
        return Err(e);
    }
    run.save_checkpoint(&model.to_checkpoint()?, "cvae.safetensors")?;
    Ok(())
}

/// Builds the requested goal sampler from checkpoints.
fn goal_sampler(
    run: &mut Run,
    kind: SamplerKind,
    vq_ckpt: &Checkpoint,
    prior: &Option<PathBuf>,
    cvae: &Option<PathBuf>,
) -> Result<Box<dyn GoalSampler>> {
    Ok(match kind {
        SamplerKind::Affordance => {
            let p = need("prior", prior)?;
            run.input("prior", p)?;
            let pc = load_ckpt(p, Payload::Prior)?;
            Box::new(AffordanceModel::from_checkpoints(vq_ckpt, &pc, run.cfg.affordance.clone())?)
        }
        SamplerKind::Cvae => {
            let p = need("cvae", cvae)?;
            run.input("cvae", p)?;
            Box::new(Cvae::from_checkpoint(&load_ckpt(p, Payload::Cvae)?)?)
        }
        SamplerKind::Random => Box::new(RandomCodeSampler::new(VqVae::from_checkpoint(vq_ckpt, DType::F32)?)),
    })
}

#[derive(Serialize)]
struct TrajectoryRecord<'a> {
    episode: u64,
    sampler: &'a str,
    goal_hash: String,
    final_hash: String,
    actions: Vec<[f64; 4]>,
    /// Object (x, y, stack height) per step, including the final state.
    objects: Vec<Vec<[f64; 3]>>,
}

struct ExploreFiles<'r> {
    run: &'r Run,
    metrics: JsonLines,
    trajectories: JsonLines,
    vqvae: String,
}

impl ExploreObserver for ExploreFiles<'_> {
    fn episode(&mut self, m: &EpisodeMetrics, traj: &Trajectory) -> Result<()> {
        self.metrics.write(m)?;
        let rec = TrajectoryRecord {
            episode: traj.episode,
            sampler: &m.sampler,
            goal_hash: traj.sampled_goal.hash(),
            final_hash: traj.observations.last().map(|o| o.hash()).unwrap_or_default(),
            actions: traj.actions.iter().map(|a| [a.dx, a.dy, a.dz, a.grip]).collect(),
            objects: traj
                .states
                .iter()
                .map(|s| s.objects.iter().map(|o| [o.pos[0], o.pos[1], o.stack_height as f64]).collect())
                .collect(),
        };
        self.trajectories.write(&rec)
    }

    fn checkpoint(&mut self, done: usize, policy: &Policy) -> Result<()> {
        self.run.save_checkpoint(&policy.to_checkpoint(&self.vqvae)?, &format!("policy-{done:06}.safetensors"))?;
        Ok(())
    }
}

fn policy_config(run: &Run, vq: &VqVae) -> crate::explorer::PolicyConfig {
    let mut pc = run.cfg.explorer.policy.clone();
    pc.vocab = vq.config().codebook_size;
    pc.seq_len = vq.config().seq_len();
    pc
}

fn cmd_explore(
    run: &mut Run,
    kind: SamplerKind,
    vqvae: &Path,
    prior: &Option<PathBuf>,
    cvae: &Option<PathBuf>,
    episodes: Option<usize>,
) -> Result<()> {
    run.input("vqvae", vqvae)?;
    let (vq_ckpt, vq) = load_vqvae(vqvae)?;
    let sampler = goal_sampler(run, kind, &vq_ckpt, prior, cvae)?;
    let mut cfg = run.cfg.explorer.clone();
    cfg.policy = policy_config(run, &vq);
    if let Some(e) = episodes {
        cfg.episodes = e;
    }
    let s = run.cfg.seed;
    let mut policy = Policy::new(&cfg.policy, DType::F32, seed::derive_named(s, "policy.init"))?;
    let identity = vq.identity()?;
    let env = run.cfg.env.clone();
    let mut files = ExploreFiles {
        run,
        metrics: JsonLines::create(run.path(METRICS_FILE))?,
        trajectories: JsonLines::create(run.path(TRAJECTORIES_FILE))?,
        vqvae: identity.clone(),
    };
    let summary = explore_loop(&env, sampler.as_ref(), &vq, &mut policy, &cfg, seed::derive_named(s, "explore"), &mut files)?;
    tracing::info!(episodes = summary.metrics.len(), sampler_calls = summary.sampler_calls, "exploration done");
    run.save_checkpoint(&policy.to_checkpoint(&identity)?, "policy.safetensors")?;
    Ok(())
}

fn load_or_build_suite(run: &mut Run, path: &Path) -> Result<TaskSuite> {
    if path.exists() {
        run.input("suite", path)?;
        let suite = TaskSuite::load(path)?;
        if suite.env != run.cfg.env {
            return Err(Error::Config(format!("{}: suite was built for a different env config", path.display())));
        }
        return Ok(suite);
    }
    let suite = build_suite(&run.cfg.env, &run.cfg.eval.suite, seed::derive_named(run.cfg.seed, "suite"))?;
    suite.save(path)?;
    tracing::info!(tasks = suite.tasks.len(), path = %path.display(), "built test-goal suite");
    run.input("suite", path)?;
    Ok(suite)
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    run: &mut Run,
    policy_arg: &str,
    vqvae: &Option<PathBuf>,
    suite_path: &Path,
    trials: Option<usize>,
    prior: &Option<PathBuf>,
    cvae: &Option<PathBuf>,
) -> Result<()> {
    let suite = load_or_build_suite(run, suite_path)?;
    let trials = trials.unwrap_or(run.cfg.eval.trials);
    let eval_seed = seed::derive_named(run.cfg.seed, "eval");
    let vq = match vqvae {
        Some(p) => {
            run.input("vqvae", p)?;
            Some(load_vqvae(p)?)
        }
        None => None,
    };
    let mut hashes = BTreeMap::new();
    if let Some((c, _)) = &vq {
        hashes.insert("vqvae".to_string(), c.config_hash());
    }
    let mut report: EvalReport = match policy_arg {
        "oracle" => eval_policy(&mut OraclePolicy::new(suite.env.clone()), &suite, trials, eval_seed)?,
        "zero" => eval_policy(&mut ZeroPolicy, &suite, trials, eval_seed)?,
        other => {
            let (vc, vm) = vq.as_ref().ok_or_else(|| Error::Config("--vqvae is required for learned policies".into()))?;
            let policy = if other == "untrained" {
                let pc = policy_config(run, vm);
                Policy::new(&pc, DType::F32, seed::derive_named(run.cfg.seed, "policy.init"))?
            } else {
                let p = Path::new(other);
                run.input("policy", p)?;
                let c = load_ckpt(p, Payload::Policy)?;
                c.require_parent("vqvae", &vc.identity()?)?;
                hashes.insert("policy".to_string(), c.config_hash());
                Policy::from_checkpoint(&c)?
            };
            let mut lp = LearnedPolicy::new(other, &policy, vm);
            eval_policy(&mut lp, &suite, trials, eval_seed)?
        }
    };
    if let Some((vc, vm)) = &vq {
        let e = run.cfg.eval.clone();
        let scenes = (0..e.affordance_scenes as u64)
            .map(|i| reset(&suite.env, seed::derive_seed(seed::derive_named(run.cfg.seed, "heldout"), i)))
            .collect::<Result<Vec<_>>>()?;
        let aff_seed = seed::derive_named(run.cfg.seed, "affordances");
        let mut samplers: Vec<Box<dyn GoalSampler>> = Vec::new();
        if prior.is_some() {
            samplers.push(goal_sampler(run, SamplerKind::Affordance, vc, prior, cvae)?);
        }
        if cvae.is_some() {
            samplers.push(goal_sampler(run, SamplerKind::Cvae, vc, prior, cvae)?);
        }
        if !samplers.is_empty() {
            samplers.push(goal_sampler(run, SamplerKind::Random, vc, prior, cvae)?);
            samplers.push(Box::new(NoiseSampler));
        }
        for s in &samplers {
            let m = eval_affordances(s.as_ref(), &scenes, &suite.env, &run.cfg.parse, vm, e.samples_per_image, aff_seed)?;
            tracing::info!(sampler = %m.sampler, plausibility = m.plausibility, diversity = m.diversity, "affordances");
            report.affordances.push(m);
        }
    }
    report.config_hashes = hashes;
    report.save(&run.dir)?;
    for (k, v) in &report.by_kind {
        tracing::info!(policy = %report.policy, kind = %k, success = v, "evaluation");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    run: &mut Run,
    model: ModelKind,
    vqvae: &Option<PathBuf>,
    prior: &Option<PathBuf>,
    cvae: &Option<PathBuf>,
    image: &Path,
    n: usize,
    temperature: Option<f64>,
    top_k: Option<usize>,
) -> Result<()> {
    run.input("image", image)?;
    let o_c = Image::load_resized(image, run.cfg.env.image_size)?;
    if let Some(t) = temperature {
        run.cfg.affordance.sampling.temperature = t;
    }
    if top_k.is_some() {
        run.cfg.affordance.sampling.top_k = top_k;
    }
    let sampler: Box<dyn GoalSampler> = match model {
        ModelKind::Affordance => {
            let p = need("vqvae", vqvae)?;
            run.input("vqvae", p)?;
            let vc = load_ckpt(p, Payload::Vqvae)?;
            goal_sampler(run, SamplerKind::Affordance, &vc, prior, cvae)?
        }
        ModelKind::Cvae => {
            let p = need("cvae", cvae)?;
            run.input("cvae", p)?;
            Box::new(Cvae::from_checkpoint(&load_ckpt(p, Payload::Cvae)?)?)
        }
    };
    let goals = sampler.sample_goals(&o_c, None, n, seed::derive_named(run.cfg.seed, "sample"))?;
    for (i, g) in goals.iter().enumerate() {
        g.save_png(&run.path(&format!("goal_{i:03}.png")))?;
    }
    if let Some(sheet) = sample_panel(&o_c, &goals) {
        sheet.save_png(&run.path(SAMPLES_FILE))?;
    }
    // the resolved sampling settings belong in the run's config
    let p = run.path(CONFIG_FILE);
    fs::write(&p, run.cfg.to_toml()?).map_err(|e| Error::file(&p, e))?;
    run.record.config_hash = run.cfg.hash()?;
    Ok(())
}
