//! `qsdnet` command-line front end.
//!
//! Every subcommand reads a JSON config (or a named preset), writes CSV
//! results into `--out`, and records the fully resolved config, seed and
//! crate version in `metadata.json`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::discrimination::{
    build_map_rule, expected_multi_copy_error, log_slope, map_error, multi_copy_posterior,
    ErrorMode, OutcomeTable,
};
use crate::error::QsdError;
use crate::experiment::{
    postselect_k_photon, score_batch, simulate_batch, CurveOptions, CurvePoint, EventRecord,
    NoiseModel,
};
use crate::format::{
    fmt_f64, write_distribution_csv, write_outcome_table_csv, write_scaling_csv,
    write_series_csv, write_sink_table_csv, write_trace_csv, ScalingRow,
};
use crate::network::{
    conditional_distribution, cumulative_correct, decay_free_distribution, evolve,
    loop_operator, ExtractionSchedule, NetworkConfig, Sink, DEFAULT_MAX_LOOPS,
};
use crate::quantum::{ensemble_by_name, helstrom_bound, inner_product, Ensemble, PureState};
use crate::receiver::{
    binary_optimal, gu_receiver, optimize, tetrad_receiver, waveplate_decomposition,
    ObjectiveSpec, Receiver, SearchSpec,
};
use crate::seed::{derive_seed, rng_for};
use crate::{Unitary2, VERSION};

#[derive(Debug, Parser)]
#[command(name = "qsdnet", version, about = "Sink-network receivers for quantum state discrimination")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in config: binary, gu, tetrad or orthogonal (montecarlo also
    /// accepts quick and background).
    #[arg(long, global = true, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Time-binned, conditional, decay-free and cumulative-correct curves.
    Simulate,
    /// Search for a receiver.
    Optimize,
    /// Outcome table, MAP rule and posteriors for recorded events.
    Discriminate,
    /// Multi-copy error against the number of copies.
    Scaling,
    /// Simulated photon-counting campaign.
    Montecarlo,
    /// The built-in state sets.
    States,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Optimize => "optimize",
            Command::Discriminate => "discriminate",
            Command::Scaling => "scaling",
            Command::Montecarlo => "montecarlo",
            Command::States => "states",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Capacity(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Capacity(m) => write!(f, "capacity error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl From<QsdError> for CliError {
    fn from(e: QsdError) -> Self {
        match e {
            QsdError::Capacity { .. } => CliError::Capacity(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnsembleSpec {
    Preset(String),
    Custom {
        states: Vec<PureState>,
        #[serde(default)]
        priors: Option<Vec<f64>>,
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
}

struct Resolved {
    name: String,
    labels: Vec<String>,
    ensemble: Ensemble,
}

impl EnsembleSpec {
    fn resolve(&self) -> CliResult<Resolved> {
        match self {
            EnsembleSpec::Preset(name) => {
                let e = ensemble_by_name(name)
                    .ok_or_else(|| config_err(format!("unknown ensemble preset {name:?}")))?;
                Ok(Resolved {
                    name: e.name.to_string(),
                    labels: e.labels.iter().map(|l| l.to_string()).collect(),
                    ensemble: e.ensemble,
                })
            }
            EnsembleSpec::Custom {
                states,
                priors,
                labels,
            } => {
                let ensemble = match priors {
                    Some(p) => Ensemble::new(states.clone(), p.clone()),
                    None => Ensemble::uniform(states.clone()),
                }
                .map_err(config_err)?;
                let labels = match labels {
                    Some(l) if l.len() == states.len() => l.clone(),
                    Some(l) => {
                        return Err(config_err(format!(
                            "{} labels for {} states",
                            l.len(),
                            states.len()
                        )))
                    }
                    None => (1..=states.len()).map(|i| format!("psi{i}")).collect(),
                };
                Ok(Resolved {
                    name: "custom".into(),
                    labels,
                    ensemble,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ReceiverSpec {
    /// gu, tetrad, binary (Helstrom receiver for the ensemble), hadamard or
    /// identity.
    Preset(String),
    Matrices {
        u_forward: Unitary2,
        u_backward: Unitary2,
    },
    /// A receiver file written by `optimize`.
    File(PathBuf),
}

impl ReceiverSpec {
    fn resolve(&self, ensemble: &Ensemble) -> CliResult<Receiver> {
        match self {
            ReceiverSpec::Preset(name) => match name.to_ascii_lowercase().as_str() {
                "gu" => Ok(gu_receiver()),
                "tetrad" => Ok(tetrad_receiver()),
                "hadamard" => Ok(Receiver::new(Unitary2::hadamard(), Unitary2::hadamard())),
                "identity" => Ok(Receiver::new(Unitary2::identity(), Unitary2::identity())),
                "binary" => {
                    if ensemble.len() != 2 {
                        return Err(config_err("the binary receiver needs a two-state ensemble"));
                    }
                    let (s, p) = (ensemble.states(), ensemble.priors());
                    binary_optimal(&s[0], &s[1], p[0], p[1]).map_err(config_err)
                }
                _ => Err(config_err(format!("unknown receiver preset {name:?}"))),
            },
            ReceiverSpec::Matrices {
                u_forward,
                u_backward,
            } => Ok(Receiver::new(*u_forward, *u_backward)),
            ReceiverSpec::File(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
            }
        }
    }
}

fn default_schedule() -> ExtractionSchedule {
    ExtractionSchedule::experimental()
}

fn default_max_loops() -> usize {
    DEFAULT_MAX_LOOPS
}

fn default_sink_map() -> [Sink; 2] {
    [Sink::S5, Sink::S6]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub ensemble: EnsembleSpec,
    pub receiver: ReceiverSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ExtractionSchedule,
    #[serde(default = "default_max_loops")]
    pub max_loops: usize,
    /// Sink read as each state of a two-state ensemble.
    #[serde(default = "default_sink_map")]
    pub sink_map: [Sink; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfig {
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub search: SearchSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminateConfig {
    pub ensemble: EnsembleSpec,
    pub receiver: ReceiverSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ExtractionSchedule,
    #[serde(default = "default_max_loops")]
    pub max_loops: usize,
    /// Event-record CSVs to classify.
    #[serde(default)]
    pub events: Vec<PathBuf>,
    /// Copies each event is rounded to; defaults to its rounded total.
    #[serde(default)]
    pub copies: Option<u64>,
}

fn default_m_max() -> u64 {
    10
}

fn default_exact_max_m() -> u64 {
    6
}

fn default_trials() -> u64 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub ensemble: EnsembleSpec,
    pub receiver: ReceiverSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ExtractionSchedule,
    #[serde(default = "default_max_loops")]
    pub max_loops: usize,
    #[serde(default = "default_m_max")]
    pub m_max: u64,
    /// Largest `m` evaluated by exact enumeration.
    #[serde(default = "default_exact_max_m")]
    pub exact_max_m: u64,
    /// Monte Carlo trials per `m` above `exact_max_m`; 0 disables.
    #[serde(default = "default_trials")]
    pub montecarlo_trials: u64,
    /// Also run Monte Carlo where exact values exist.
    #[serde(default)]
    pub montecarlo_all: bool,
    #[serde(default)]
    pub epsilon_floor: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_k_values() -> Vec<u64> {
    (1..=10).collect()
}

fn default_runs() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub ensemble: EnsembleSpec,
    pub receiver: ReceiverSpec,
    #[serde(default = "default_schedule")]
    pub schedule: ExtractionSchedule,
    #[serde(default = "default_max_loops")]
    pub max_loops: usize,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<u64>,
    #[serde(default = "default_runs")]
    pub runs_per_k: usize,
    #[serde(default)]
    pub curve: CurveOptions,
    /// Run length; defaults to `k / pair_rate`. Required when `pair_rate` is 0.
    #[serde(default)]
    pub duration_seconds: Option<f64>,
    /// Hide state labels from the records and list them in `key.csv`.
    #[serde(default)]
    pub blind: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_state_sets() -> Vec<EnsembleSpec> {
    ["binary", "gu", "tetrad", "orthogonal"]
        .map(|n| EnsembleSpec::Preset(n.into()))
        .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatesConfig {
    #[serde(default = "default_state_sets")]
    pub ensembles: Vec<EnsembleSpec>,
}

impl Default for StatesConfig {
    fn default() -> Self {
        StatesConfig {
            ensembles: default_state_sets(),
        }
    }
}

/// Config JSON for a built-in preset.
pub fn preset_config(command: Command, name: &str) -> CliResult<Value> {
    let name = name.to_ascii_lowercase();
    let (ensemble, receiver) = match name.as_str() {
        "binary" => ("binary", "binary"),
        "gu" => ("gu", "gu"),
        "tetrad" => ("tetrad", "tetrad"),
        "orthogonal" => ("orthogonal", "identity"),
        "quick" | "background" if command == Command::Montecarlo => ("gu", "gu"),
        _ => {
            return Err(config_err(format!(
                "unknown preset {name:?} for {}",
                command.name()
            )))
        }
    };
    let schedule = serde_json::to_value(ExtractionSchedule::experimental()).expect("serializable");
    let base = json!({
        "ensemble": { "preset": ensemble },
        "receiver": { "preset": receiver },
        "schedule": schedule,
    });
    let v = match command {
        Command::Simulate | Command::Discriminate | Command::Scaling => base,
        Command::Optimize => json!({
            "ensemble": { "preset": ensemble },
            "objective": { "schedule": schedule },
        }),
        Command::Montecarlo => {
            let mut v = base;
            let extra = match name.as_str() {
                "quick" => json!({
                    "noise": { "pair_rate": 1.5, "accidental_rate_per_bin": 0.0 },
                    "k_values": [100],
                    "runs_per_k": 100,
                }),
                "background" => json!({
                    "noise": { "pair_rate": 0.0, "accidental_rate_per_bin": 0.5 },
                    "k_values": [1],
                    "runs_per_k": 50,
                    "duration_seconds": 20.0,
                }),
                _ => json!({
                    "noise": { "pair_rate": 1.5, "accidental_rate_per_bin": 0.02 },
                }),
            };
            v.as_object_mut()
                .expect("object")
                .extend(extra.as_object().expect("object").clone());
            v
        }
        Command::States => json!({ "ensembles": [{ "preset": ensemble }] }),
    };
    Ok(v)
}

fn load<T: DeserializeOwned + Serialize>(cli: &Cli, fallback: Option<T>) -> CliResult<T> {
    match (&cli.config, &cli.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
        }
        (None, Some(name)) => serde_json::from_value(preset_config(cli.command, name)?)
            .map_err(|e| config_err(format!("preset {name}: {e}"))),
        (None, None) => fallback
            .ok_or_else(|| config_err(format!("{} needs --config or --preset", cli.command.name()))),
    }
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        Ok(Output {
            dir: dir.to_path_buf(),
        })
    }

    fn file(&self, name: &str) -> CliResult<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(BufWriter::new(File::create(path)?))
    }

    fn json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Runtime(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn metadata(&self, cli: &Cli, config: &impl Serialize, seed: Option<u64>) -> CliResult<()> {
        self.json(
            "metadata.json",
            &json!({
                "command": cli.command.name(),
                "version": VERSION,
                "seed": seed,
                "preset": cli.preset,
                "config": config,
            }),
        )
    }
}

/// File-name fragment for state `i`.
fn file_tag(i: usize, label: &str) -> String {
    let mut tag = String::new();
    for ch in label.chars() {
        match ch {
            '+' => tag.push_str("plus"),
            '-' => tag.push_str("minus"),
            c if c.is_ascii_alphanumeric() => tag.push(c),
            _ => tag.push('_'),
        }
    }
    format!("{i}_{tag}")
}

fn network(receiver: &Receiver, schedule: ExtractionSchedule, max_loops: usize) -> CliResult<NetworkConfig> {
    receiver.network(schedule, max_loops).map_err(config_err)
}

/// Runs the selected subcommand inside a pool of `--threads` workers.
pub fn run(cli: &Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(config_err("--threads must be >= 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Simulate => cmd_simulate(cli),
        Command::Optimize => cmd_optimize(cli),
        Command::Discriminate => cmd_discriminate(cli),
        Command::Scaling => cmd_scaling(cli),
        Command::Montecarlo => cmd_montecarlo(cli),
        Command::States => cmd_states(cli),
    })
}

fn cmd_simulate(cli: &Cli) -> CliResult<()> {
    let cfg: SimulateConfig = load(cli, None)?;
    let ens = cfg.ensemble.resolve()?;
    let receiver = cfg.receiver.resolve(&ens.ensemble)?;
    let net = network(&receiver, cfg.schedule, cfg.max_loops)?;
    let out = Output::new(&cli.out)?;

    for (i, (state, label)) in ens.ensemble.states().iter().zip(&ens.labels).enumerate() {
        let tag = file_tag(i, label);
        let dist = evolve(&net, state);
        write_distribution_csv(&dist, out.file(&format!("distribution_{tag}.csv"))?)?;
        write_sink_table_csv(
            &conditional_distribution(&dist)?,
            out.file(&format!("conditional_{tag}.csv"))?,
        )?;
        write_sink_table_csv(
            &decay_free_distribution(&dist, &net.schedule)?,
            out.file(&format!("decay_free_{tag}.csv"))?,
        )?;
    }
    if ens.ensemble.len() == 2 {
        let curve = cumulative_correct(&net, &ens.ensemble, cfg.sink_map)?;
        let steps: Vec<usize> = evolve(&net, &ens.ensemble.states()[0])
            .retained()
            .map(|(k, _)| k)
            .collect();
        write_series_csv("cumulative_correct", &steps, &curve, out.file("cumulative_correct.csv")?)?;
    }
    let table = OutcomeTable::from_network(&net, &ens.ensemble)?;
    write_outcome_table_csv(&table, &ens.labels, out.file("outcome_table.csv")?)?;
    out.json(
        "summary.json",
        &json!({
            "ensemble": ens.name,
            "single_copy_error": map_error(&table, ens.ensemble.priors())?,
            "loop_operator": loop_operator(&net),
        }),
    )?;
    out.metadata(cli, &cfg, None)
}

#[derive(Serialize)]
struct ReceiverFile<'a> {
    #[serde(flatten)]
    result: &'a crate::receiver::OptimizeResult,
    waveplates: BTreeMap<&'static str, crate::receiver::WaveplateAngles>,
}

fn cmd_optimize(cli: &Cli) -> CliResult<()> {
    let mut cfg: OptimizeConfig = load(cli, None)?;
    if let Some(seed) = cli.seed {
        cfg.search.seed = seed;
    }
    let ens = cfg.ensemble.resolve()?;
    let result = optimize(&ens.ensemble, &cfg.objective, &cfg.search).map_err(|e| match e {
        QsdError::Capacity { .. } => CliError::from(e),
        e => config_err(e),
    })?;
    let out = Output::new(&cli.out)?;
    let waveplates = BTreeMap::from([
        ("u_forward", waveplate_decomposition(&result.u_forward)),
        ("u_backward", waveplate_decomposition(&result.u_backward)),
    ]);
    out.json(
        "receiver.json",
        &ReceiverFile {
            result: &result,
            waveplates,
        },
    )?;
    write_trace_csv(&result.trace, out.file("trace.csv")?)?;
    println!("objective {}", fmt_f64(result.objective));
    out.metadata(cli, &cfg, Some(cfg.search.seed))
}

fn cmd_discriminate(cli: &Cli) -> CliResult<()> {
    let cfg: DiscriminateConfig = load(cli, None)?;
    let ens = cfg.ensemble.resolve()?;
    let receiver = cfg.receiver.resolve(&ens.ensemble)?;
    let net = network(&receiver, cfg.schedule, cfg.max_loops)?;
    let priors = ens.ensemble.priors();
    let table = OutcomeTable::from_network(&net, &ens.ensemble)?;
    let rule = build_map_rule(&table, priors)?;
    let out = Output::new(&cli.out)?;

    write_outcome_table_csv(&table, &ens.labels, out.file("outcome_table.csv")?)?;
    let mut wtr = csv::Writer::from_writer(out.file("decision_rule.csv")?);
    wtr.write_record(["outcome", "guess"]).map_err(QsdError::from)?;
    for (j, o) in table.outcomes().iter().enumerate() {
        wtr.write_record([o.to_string(), ens.labels[rule.guess(j)].clone()])
            .map_err(QsdError::from)?;
    }
    wtr.flush()?;

    if !cfg.events.is_empty() {
        let mut wtr = csv::Writer::from_writer(out.file("posteriors.csv")?);
        let mut header = vec!["event".to_string(), "copies".to_string()];
        header.extend(ens.labels.iter().cloned());
        header.push("guess".into());
        wtr.write_record(&header).map_err(QsdError::from)?;
        for path in &cfg.events {
            let file = File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
            let rec = EventRecord::read_csv(file)?;
            if rec.outcomes != table.outcomes() {
                return Err(config_err(format!(
                    "{}: cells do not match the outcome table",
                    path.display()
                )));
            }
            let m = cfg.copies.unwrap_or_else(|| rec.total().round() as u64);
            let counts = rec.to_copies(m)?;
            let post = multi_copy_posterior(&counts, &table, priors)?;
            let guess = (0..post.len()).fold(0, |b, i| if post[i] > post[b] { i } else { b });
            let mut row = vec![path.display().to_string(), m.to_string()];
            row.extend(post.iter().map(|p| fmt_f64(*p)));
            row.push(ens.labels[guess].clone());
            wtr.write_record(&row).map_err(QsdError::from)?;
        }
        wtr.flush()?;
    }

    let helstrom = (ens.ensemble.len() == 2).then(|| {
        let s = ens.ensemble.states();
        1.0 - helstrom_bound(&s[0], &s[1], priors[0], priors[1])
    });
    out.json(
        "summary.json",
        &json!({
            "ensemble": ens.name,
            "single_copy_error": map_error(&table, priors)?,
            "helstrom_error": helstrom,
        }),
    )?;
    out.metadata(cli, &cfg, None)
}

fn cmd_scaling(cli: &Cli) -> CliResult<()> {
    let mut cfg: ScalingConfig = load(cli, None)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cfg.m_max == 0 {
        return Err(config_err("m_max must be >= 1"));
    }
    let ens = cfg.ensemble.resolve()?;
    let receiver = cfg.receiver.resolve(&ens.ensemble)?;
    let net = network(&receiver, cfg.schedule, cfg.max_loops)?;
    let priors = ens.ensemble.priors();
    let table = OutcomeTable::from_network(&net, &ens.ensemble)?;

    let mut rows = Vec::new();
    let mut fit_points = Vec::new();
    for m in 1..=cfg.m_max {
        let exact = if m <= cfg.exact_max_m {
            Some(expected_multi_copy_error(&table, priors, m, ErrorMode::Exact)?)
        } else {
            None
        };
        let mc = if cfg.montecarlo_trials > 0 && (exact.is_none() || cfg.montecarlo_all) {
            let mode = ErrorMode::MonteCarlo {
                seed: derive_seed(cfg.seed, m),
                trials: cfg.montecarlo_trials,
                epsilon_floor: cfg.epsilon_floor,
            };
            Some(expected_multi_copy_error(&table, priors, m, mode)?)
        } else {
            None
        };
        if let Some(e) = exact.or(mc) {
            fit_points.push((m, e));
        }
        rows.push(ScalingRow {
            m,
            exact: exact.map(|e| e.value),
            montecarlo: mc.map(|e| e.value),
            montecarlo_se: mc.map(|e| e.std_error),
        });
    }
    let out = Output::new(&cli.out)?;
    write_scaling_csv(&rows, out.file("scaling.csv")?)?;
    let fit = log_slope(&fit_points).ok();
    out.json(
        "slope.json",
        &json!({
            "fit": fit,
            "std_error": fit.map(|f| f.std_error()),
            "negative_at_3_sigma": fit.map(|f| f.significantly_negative(3.0)),
        }),
    )?;
    out.metadata(cli, &cfg, Some(cfg.seed))
}

#[derive(Serialize)]
struct HypothesisCheck {
    label: String,
    pooled_counts: f64,
    /// Total-variation distance between pooled cleaned counts and the
    /// analytic conditional distribution.
    tv_distance: Option<f64>,
    mean_clamped_cells: f64,
}

fn cmd_montecarlo(cli: &Cli) -> CliResult<()> {
    let mut cfg: MonteCarloConfig = load(cli, None)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.noise.validate().map_err(config_err)?;
    if cfg.k_values.is_empty() || cfg.k_values.contains(&0) || cfg.runs_per_k == 0 {
        return Err(config_err("k_values must be non-empty and positive, runs_per_k >= 1"));
    }
    if cfg.noise.pair_rate == 0.0 && cfg.duration_seconds.is_none() {
        return Err(config_err("duration_seconds is required when pair_rate is 0"));
    }
    if let Some(d) = cfg.duration_seconds {
        if !(d.is_finite() && d > 0.0) {
            return Err(config_err("duration_seconds must be > 0"));
        }
    }
    let ens = cfg.ensemble.resolve()?;
    let receiver = cfg.receiver.resolve(&ens.ensemble)?;
    let net = network(&receiver, cfg.schedule, cfg.max_loops)?;
    let priors = ens.ensemble.priors();
    let table = OutcomeTable::from_network(&net, &ens.ensemble)?;
    let tags: Vec<String> = ens.labels.iter().enumerate().map(|(i, l)| file_tag(i, l)).collect();
    let out = Output::new(&cli.out)?;
    let bg_runs = cfg.curve.background_runs.unwrap_or(cfg.runs_per_k);

    let n_cells = table.n_outcomes();
    let mut pooled = vec![vec![0.0; n_cells]; ens.ensemble.len()];
    let mut clamped = vec![0usize; ens.ensemble.len()];
    let mut curve: Vec<CurvePoint> = Vec::new();
    let mut key = Vec::new();

    for (ki, &k) in cfg.k_values.iter().enumerate() {
        let duration = cfg.duration_seconds.unwrap_or(k as f64 / cfg.noise.pair_rate);
        let batch = simulate_batch(
            &net,
            &ens.ensemble,
            &cfg.noise,
            k,
            ki as u64,
            duration,
            cfg.runs_per_k,
            bg_runs,
            cfg.seed,
        )?;

        let mut bg = csv::Writer::from_writer(out.file(&format!("background/k{k}.csv"))?);
        bg.write_record(["outcome", "rate", "std_error", "zero_count_upper"])
            .map_err(QsdError::from)?;
        for (j, o) in batch.background.outcomes.iter().enumerate() {
            bg.write_record([
                o.to_string(),
                fmt_f64(batch.background.rates[j]),
                fmt_f64(batch.background.std_errors[j]),
                batch.background.zero_count_upper[j].map(fmt_f64).unwrap_or_default(),
            ])
            .map_err(QsdError::from)?;
        }
        bg.flush()?;

        let mut slots: Vec<(usize, usize)> = (0..ens.ensemble.len())
            .flat_map(|h| (0..cfg.runs_per_k).map(move |r| (h, r)))
            .collect();
        if cfg.blind {
            slots.shuffle(&mut rng_for(cfg.seed ^ 0xB1D, ki as u64));
        }
        for (idx, &(h, r)) in slots.iter().enumerate() {
            let name = if cfg.blind {
                format!("k{k}_{idx:05}.csv")
            } else {
                format!("k{k}_{}_{r:05}.csv", tags[h])
            };
            for (kind, recs) in [("raw", &batch.raw), ("cleaned", &batch.cleaned)] {
                let mut rec = recs[h][r].clone();
                rec.label = Some(ens.labels[h].clone());
                rec.write_csv(out.file(&format!("records/{kind}/{name}"))?, !cfg.blind)?;
            }
            if cfg.blind {
                key.push((name, ens.labels[h].clone()));
            }
        }
        for (h, recs) in batch.cleaned.iter().enumerate() {
            for rec in recs {
                for (p, c) in pooled[h].iter_mut().zip(&rec.counts) {
                    *p += c;
                }
                clamped[h] += rec.clamped_cells;
            }
        }

        if cfg.noise.pair_rate > 0.0 {
            for (h, recs) in batch.cleaned.iter().enumerate() {
                match postselect_k_photon(recs, k, cfg.curve.window_sigmas) {
                    Ok(sel) => {
                        let mut avg = sel.average;
                        avg.label = Some(ens.labels[h].clone());
                        avg.write_csv(out.file(&format!("postselected/k{k}_{}.csv", tags[h]))?, true)?;
                    }
                    Err(QsdError::NoEventsInWindow { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            curve.push(score_batch(&batch, &table, priors, &cfg.curve)?);
        }
    }

    if cfg.blind {
        let mut wtr = csv::Writer::from_writer(out.file("key.csv")?);
        wtr.write_record(["record", "label"]).map_err(QsdError::from)?;
        for (name, label) in &key {
            wtr.write_record([name, label]).map_err(QsdError::from)?;
        }
        wtr.flush()?;
    }

    let mut wtr = csv::Writer::from_writer(out.file("summary.csv")?);
    wtr.write_record([
        "k",
        "p_err",
        "std_error",
        "p_err_true_posterior",
        "true_posterior_std_error",
        "kept",
        "discarded",
        "floored_events",
    ])
    .map_err(QsdError::from)?;
    for p in &curve {
        wtr.write_record([
            p.k.to_string(),
            fmt_f64(p.p_err),
            fmt_f64(p.std_error),
            fmt_f64(p.p_err_true_posterior),
            fmt_f64(p.true_posterior_std_error),
            p.kept.to_string(),
            p.discarded.to_string(),
            p.floored_events.to_string(),
        ])
        .map_err(QsdError::from)?;
    }
    wtr.flush()?;

    let total_runs = (cfg.k_values.len() * cfg.runs_per_k) as f64;
    let checks: Vec<HypothesisCheck> = pooled
        .iter()
        .enumerate()
        .map(|(h, counts)| {
            let n: f64 = counts.iter().sum();
            let tv = (cfg.noise.pair_rate > 0.0 && n > 0.0).then(|| {
                0.5 * counts
                    .iter()
                    .zip(&table.rows()[h])
                    .map(|(c, p)| (c / n - p).abs())
                    .sum::<f64>()
            });
            HypothesisCheck {
                label: ens.labels[h].clone(),
                pooled_counts: n,
                tv_distance: tv,
                mean_clamped_cells: clamped[h] as f64 / total_runs,
            }
        })
        .collect();
    out.json(
        "summary.json",
        &json!({
            "ensemble": ens.name,
            "curve": curve,
            "hypotheses": checks,
        }),
    )?;
    out.metadata(cli, &cfg, Some(cfg.seed))
}

fn cmd_states(cli: &Cli) -> CliResult<()> {
    let cfg: StatesConfig = load(cli, Some(StatesConfig::default()))?;
    let out = Output::new(&cli.out)?;
    let mut states = csv::Writer::from_writer(out.file("states.csv")?);
    states
        .write_record(["ensemble", "label", "a0_re", "a0_im", "a1_re", "a1_im", "prior"])
        .map_err(QsdError::from)?;
    let mut overlaps = csv::Writer::from_writer(out.file("overlaps.csv")?);
    overlaps
        .write_record(["ensemble", "first", "second", "overlap_sq"])
        .map_err(QsdError::from)?;
    let mut summary = Vec::new();
    for spec in &cfg.ensembles {
        let ens = spec.resolve()?;
        let s = ens.ensemble.states();
        let p = ens.ensemble.priors();
        for (i, (state, label)) in s.iter().zip(&ens.labels).enumerate() {
            let [a0, a1] = state.amplitudes();
            states
                .write_record([
                    ens.name.clone(),
                    label.clone(),
                    fmt_f64(a0.re),
                    fmt_f64(a0.im),
                    fmt_f64(a1.re),
                    fmt_f64(a1.im),
                    fmt_f64(p[i]),
                ])
                .map_err(QsdError::from)?;
            for j in i + 1..s.len() {
                overlaps
                    .write_record([
                        ens.name.clone(),
                        label.clone(),
                        ens.labels[j].clone(),
                        fmt_f64(inner_product(state, &s[j]).norm_sqr()),
                    ])
                    .map_err(QsdError::from)?;
            }
        }
        let helstrom = (s.len() == 2).then(|| helstrom_bound(&s[0], &s[1], p[0], p[1]));
        summary.push(json!({ "ensemble": ens.name, "helstrom_success": helstrom }));
    }
    states.flush()?;
    overlaps.flush()?;
    out.json("summary.json", &summary)?;
    out.metadata(cli, &cfg, None)
}
