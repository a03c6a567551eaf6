//! Pipeline stages behind the `fixsynth` binary: configuration, per-stage
//! seeds, artifact layout and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fixsynth::autoencoder::{self, AeConfig, AttrModel};
use fixsynth::backtest::{self, GridConfig};
use fixsynth::corrgan::{self, GanConfig, TrainedGan};
use fixsynth::market::{
    build_snapshots, ingest_returns, read_jsonl, records_to_matrices, records_to_snapshots, synth_corpus, write_jsonl,
    CorpusConfig, ReturnPanel, SnapshotConfig, SnapshotRecord,
};
use fixsynth::metrics::{summarize, write_table1};
use fixsynth::simulation::MvConfig;
use fixsynth::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "fixsynth", version, about = "Synthetic correlation datasets and tracking-error backtests")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand)]
pub enum Command {
    /// Read a returns CSV and split it into training snapshots and a test panel.
    Ingest {
        /// Overrides the config input path.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate the built-in synthetic return panel and split it.
    SynthCorpus,
    TrainGan,
    /// Draw correlation matrices from the trained generator.
    Sample,
    TrainAe,
    /// Attach generated attributes to the sampled matrices.
    GenerateDataset,
    /// Matrix statistics per dataset.
    Metrics,
    Backtest,
    Report,
    /// Every stage in order.
    Run,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::SynthCorpus => "synth-corpus",
            Command::TrainGan => "train-gan",
            Command::Sample => "sample",
            Command::TrainAe => "train-ae",
            Command::GenerateDataset => "generate-dataset",
            Command::Metrics => "metrics",
            Command::Backtest => "backtest",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

/// Bad configuration, flags or missing upstream artifacts (exit code 1).
#[derive(Debug)]
pub struct ValidationError(pub String);

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

/// 1 for validation failures anywhere in the chain, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ValidationError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<fixsynth::Error>() {
            if e.is_validation() {
                return 1;
            }
        }
    }
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputConfig {
    Synthetic {
        #[serde(default)]
        corpus: CorpusConfig,
    },
    Csv {
        path: PathBuf,
    },
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Synthetic {
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_end: NaiveDate::from_ymd_opt(2017, 3, 31).expect("valid date"),
            test_start: NaiveDate::from_ymd_opt(2017, 5, 5).expect("valid date"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub input: InputConfig,
    pub split: SplitConfig,
    pub snapshot: SnapshotConfig,
    pub gan: GanConfig,
    /// Matrices drawn from the generator.
    pub samples: usize,
    pub ae: AeConfig,
    pub mv: MvConfig,
    pub grid: GridConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("fixsynth-out"),
            input: InputConfig::default(),
            split: SplitConfig::default(),
            snapshot: SnapshotConfig::default(),
            gan: GanConfig::default(),
            samples: 4000,
            ae: AeConfig::default(),
            mv: MvConfig::default(),
            grid: GridConfig::default(),
        }
    }
}

pub const STAGES: [&str; 5] = ["corpus", "gan", "sample", "ae", "mv"];

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed for a named stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, fnv1a(stage))
}

impl RunConfig {
    /// Parses JSON, reporting schema violations with their field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(format!("config field `{path}`: {}", e.inner()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies flag overrides and pushes stage seeds into the stage configs.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
        self.gan.seed = stage_seed(self.seed, "gan");
        self.ae.seed = stage_seed(self.seed, "ae");
        self.mv.seed = stage_seed(self.seed, "mv");
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.split.test_start <= self.split.train_end {
            return Err(invalid(format!(
                "split: test_start {} must be after train_end {}",
                self.split.test_start, self.split.train_end
            )));
        }
        self.gan.validate().map_err(|e| invalid(format!("gan: {e}")))?;
        autoencoder::build(&self.ae).map_err(|e| invalid(format!("ae: {e}")))?;
        if self.gan.n != self.ae.n {
            return Err(invalid(format!("gan.n = {} but ae.n = {}", self.gan.n, self.ae.n)));
        }
        match &self.input {
            InputConfig::Synthetic { corpus } => {
                corpus.validate().map_err(|e| invalid(format!("input.corpus: {e}")))?;
                let n = corpus.n_bonds + corpus.n_fx;
                if n != self.gan.n {
                    return Err(invalid(format!("input.corpus has {n} assets but gan.n = {}", self.gan.n)));
                }
            }
            InputConfig::Csv { path } => {
                if !path.exists() {
                    return Err(invalid(format!("input.path {} does not exist", path.display())));
                }
            }
        }
        if self.samples == 0 {
            return Err(invalid("samples must be positive"));
        }
        if self.grid.targets_bps.is_empty() || self.grid.kinds.is_empty() {
            return Err(invalid("grid needs at least one target and one sim kind"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Artifact file names inside the output directory.
pub mod artifacts {
    pub const PANEL: &str = "panel.csv";
    pub const TRAIN_SNAPSHOTS: &str = "train_snapshots.jsonl";
    pub const TEST_PANEL: &str = "test_panel.csv";
    pub const GAN: &str = "gan.bin";
    pub const SAMPLED: &str = "sampled.jsonl";
    pub const SAMPLE_REPORT: &str = "sample_report.json";
    pub const AE: &str = "ae.bin";
    pub const SYNTHETIC: &str = "synthetic_snapshots.jsonl";
    pub const TABLE1: &str = "table1.csv";
    pub const EXPERIMENTS: &str = "experiments.jsonl";
    pub const TABLE4: &str = "table4.csv";
    pub const SUMMARY: &str = "summary.txt";
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    master_seed: u64,
    stage_seeds: BTreeMap<&'static str, u64>,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub out: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<&'static str>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            cfg,
            out,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Fails with every missing artifact named, and records input hashes.
    fn require(&mut self, names: &[&str], hint: &str) -> Result<()> {
        let missing: Vec<String> = names
            .iter()
            .map(|n| self.path(n))
            .filter(|p| !p.exists())
            .map(|p| p.display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(invalid(format!("missing upstream artifact(s): {} (run {hint} first)", missing.join(", "))));
        }
        for n in names {
            if !self.outputs.contains(n) {
                self.inputs.insert(n.to_string(), file_sha256(&self.path(n))?);
            }
        }
        Ok(())
    }

    fn produced(&mut self, name: &'static str) {
        if !self.outputs.contains(&name) {
            self.outputs.push(name);
        }
    }

    pub fn execute(&mut self, cmd: &Command) -> Result<()> {
        match cmd {
            Command::Ingest { input } => self.ingest(input.clone()),
            Command::SynthCorpus => self.synth_corpus(),
            Command::TrainGan => self.train_gan(),
            Command::Sample => self.sample(),
            Command::TrainAe => self.train_ae(),
            Command::GenerateDataset => self.generate_dataset(),
            Command::Metrics => self.metrics(),
            Command::Backtest => self.backtest(),
            Command::Report => self.report(),
            Command::Run => {
                match &self.cfg.input {
                    InputConfig::Synthetic { .. } => self.synth_corpus()?,
                    InputConfig::Csv { .. } => self.ingest(None)?,
                }
                self.train_gan()?;
                self.sample()?;
                self.train_ae()?;
                self.generate_dataset()?;
                self.metrics()?;
                self.backtest()?;
                self.report()
            }
        }?;
        self.write_manifest(cmd.name())
    }

    fn write_manifest(&self, command: &str) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.to_string(), file_sha256(&self.path(name))?);
        }
        let stage_seeds = STAGES.iter().map(|s| (*s, stage_seed(self.cfg.seed, s))).collect();
        let m = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: self.cfg.hash(),
            master_seed: self.cfg.seed,
            stage_seeds,
            config: &self.cfg,
            inputs: self.inputs.clone(),
            outputs,
        };
        let dir = self.out.join("manifests");
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(format!("{command}.json")), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }

    fn split(&mut self, panel: ReturnPanel) -> Result<()> {
        let s = self.cfg.split;
        panel.write_csv(&self.path(artifacts::PANEL))?;
        self.produced(artifacts::PANEL);
        let train = panel.slice_dates(None, Some(s.train_end))?;
        let test = panel.slice_dates(Some(s.test_start), None)?;
        if test.is_empty() {
            return Err(invalid(format!("no data on or after test_start {}", s.test_start)));
        }
        let snaps = build_snapshots(&train, &self.cfg.snapshot)?;
        log::info!(
            "{} training snapshots up to {}, {} test weeks from {}",
            snaps.len(),
            s.train_end,
            test.len(),
            s.test_start
        );
        write_jsonl(&self.path(artifacts::TRAIN_SNAPSHOTS), snaps.iter().map(SnapshotRecord::from))?;
        test.write_csv(&self.path(artifacts::TEST_PANEL))?;
        self.produced(artifacts::TRAIN_SNAPSHOTS);
        self.produced(artifacts::TEST_PANEL);
        Ok(())
    }

    pub fn ingest(&mut self, input: Option<PathBuf>) -> Result<()> {
        let path = match (input, &self.cfg.input) {
            (Some(p), _) => p,
            (None, InputConfig::Csv { path }) => path.clone(),
            (None, InputConfig::Synthetic { .. }) => {
                return Err(invalid("ingest needs --input or an input of kind `csv`"));
            }
        };
        let panel = ingest_returns(&path)?;
        self.inputs.insert(path.display().to_string(), file_sha256(&path)?);
        if panel.n() != self.cfg.gan.n {
            return Err(invalid(format!("{} has {} assets but gan.n = {}", path.display(), panel.n(), self.cfg.gan.n)));
        }
        self.split(panel)
    }

    pub fn synth_corpus(&mut self) -> Result<()> {
        let corpus = match &self.cfg.input {
            InputConfig::Synthetic { corpus } => corpus.clone(),
            InputConfig::Csv { .. } => CorpusConfig::default(),
        };
        let panel = synth_corpus(&corpus, stage_seed(self.cfg.seed, "corpus"))?;
        self.split(panel)
    }

    fn train_records(&mut self) -> Result<Vec<SnapshotRecord>> {
        self.require(&[artifacts::TRAIN_SNAPSHOTS], "`ingest` or `synth-corpus`")?;
        Ok(read_jsonl(&self.path(artifacts::TRAIN_SNAPSHOTS))?)
    }

    pub fn train_gan(&mut self) -> Result<()> {
        let matrices = records_to_matrices(&self.train_records()?)?;
        log::info!("training {} on {} matrices for {} steps", self.cfg.gan.variant.as_str(), matrices.len(), self.cfg.gan.steps);
        let gan = corrgan::train(&matrices, &self.cfg.gan)?;
        if let Some(step) = gan.history.collapse_warning {
            log::warn!("mode-collapse heuristic fired at step {step}");
        }
        gan.save(&self.path(artifacts::GAN))?;
        self.produced(artifacts::GAN);
        Ok(())
    }

    pub fn sample(&mut self) -> Result<()> {
        self.require(&[artifacts::GAN], "`train-gan`")?;
        let gan = TrainedGan::load(&self.path(artifacts::GAN))?;
        let seed = stage_seed(self.cfg.seed, "sample");
        let out = gan.sample(self.cfg.samples, seed)?;
        let diag = gan.raw_diagonal_mean(self.cfg.samples, seed)?;
        log::info!(
            "sampled {} matrices ({} skipped), raw diagonal mean {diag:.5}",
            out.matrices.len(),
            out.failed.len()
        );
        write_jsonl(&self.path(artifacts::SAMPLED), out.matrices.iter().map(SnapshotRecord::from))?;
        let report = serde_json::json!({
            "requested": self.cfg.samples,
            "returned": out.matrices.len(),
            "failed": out.failed,
            "raw_diagonal_mean": diag,
        });
        fs::write(self.path(artifacts::SAMPLE_REPORT), serde_json::to_vec_pretty(&report)?)?;
        self.produced(artifacts::SAMPLED);
        self.produced(artifacts::SAMPLE_REPORT);
        Ok(())
    }

    pub fn train_ae(&mut self) -> Result<()> {
        let snaps = records_to_snapshots(&self.train_records()?)?;
        log::info!("training autoencoder on {} snapshots for {} steps", snaps.len(), self.cfg.ae.steps);
        let model = autoencoder::train(&snaps, &self.cfg.ae)?;
        if let Some(v) = model.history.validation.last() {
            log::info!("validation loss vol {:.4} er {:.4} fr {:.4}", v.vol, v.er, v.fr);
        }
        model.save(&self.path(artifacts::AE))?;
        self.produced(artifacts::AE);
        Ok(())
    }

    pub fn generate_dataset(&mut self) -> Result<()> {
        self.require(&[artifacts::AE, artifacts::SAMPLED], "`train-ae` and `sample`")?;
        let model = AttrModel::load(&self.path(artifacts::AE))?;
        let matrices = records_to_matrices(&read_jsonl(&self.path(artifacts::SAMPLED))?)?;
        if matrices.first().is_some_and(|m| m.ids() != &model.ids) {
            return Err(invalid("sampled matrices and autoencoder disagree on the asset universe"));
        }
        let snaps = model.generate_snapshots(&matrices)?;
        write_jsonl(&self.path(artifacts::SYNTHETIC), snaps.iter().map(SnapshotRecord::from))?;
        self.produced(artifacts::SYNTHETIC);
        Ok(())
    }

    pub fn metrics(&mut self) -> Result<()> {
        let mut rows = vec![(
            "Empirical".to_string(),
            summarize(&records_to_matrices(&self.train_records()?)?)?,
        )];
        let sampled = self.path(artifacts::SAMPLED);
        if sampled.exists() {
            self.require(&[artifacts::SAMPLED], "`sample`")?;
            let m = records_to_matrices(&read_jsonl(&sampled)?)?;
            rows.push((format!("GAN ({})", self.cfg.gan.variant.as_str()), summarize(&m)?));
        }
        write_table1(&self.path(artifacts::TABLE1), &rows)?;
        self.produced(artifacts::TABLE1);
        Ok(())
    }

    pub fn backtest(&mut self) -> Result<()> {
        self.require(
            &[
                artifacts::TRAIN_SNAPSHOTS,
                artifacts::TEST_PANEL,
                artifacts::GAN,
                artifacts::AE,
                artifacts::SYNTHETIC,
            ],
            "`train-gan`, `sample`, `train-ae` and `generate-dataset`",
        )?;
        let train = records_to_snapshots(&read_jsonl(&self.path(artifacts::TRAIN_SNAPSHOTS))?)?;
        let synthetic = records_to_snapshots(&read_jsonl(&self.path(artifacts::SYNTHETIC))?)?;
        let test = ingest_returns(&self.path(artifacts::TEST_PANEL))?;
        let results = backtest::run_grid(&train, &synthetic, &test, &self.grid_config())?;
        let solved = results.iter().filter(|r| r.converged).count();
        log::info!("{} experiments, {solved} solved", results.len());
        backtest::write_experiments(&self.path(artifacts::EXPERIMENTS), &results)?;
        self.produced(artifacts::EXPERIMENTS);
        Ok(())
    }

    fn grid_config(&self) -> GridConfig {
        GridConfig {
            mv: self.cfg.mv,
            ..self.cfg.grid.clone()
        }
    }

    pub fn report(&mut self) -> Result<()> {
        self.require(&[artifacts::EXPERIMENTS], "`backtest`")?;
        let text = fs::read_to_string(self.path(artifacts::EXPERIMENTS))?;
        let results: Vec<backtest::ExperimentResult> = text
            .lines()
            .enumerate()
            .map(|(k, l)| serde_json::from_str(l).with_context(|| format!("experiments.jsonl line {}", k + 1)))
            .collect::<Result<_>>()?;
        let rep = backtest::report(&results)?;
        backtest::write_table4(&self.path(artifacts::TABLE4), &rep)?;
        fs::write(self.path(artifacts::SUMMARY), backtest::summary_text(&rep))?;
        self.produced(artifacts::TABLE4);
        self.produced(artifacts::SUMMARY);
        Ok(())
    }
}

/// Loads the config, applies flags and runs one command.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.seed, cli.out.clone());
    let mut p = Pipeline::new(cfg)?;
    log::info!("{} -> {} (config {})", cli.command.name(), p.out.display(), &p.cfg.hash()[..12]);
    p.execute(&cli.command)
}
