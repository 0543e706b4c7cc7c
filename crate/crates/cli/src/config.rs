//! Command-line arguments and the optional JSON config file.
//!
//! Every option is an `Option` so that flags, config-file values and built-in
//! defaults can be layered: a flag wins over the config file, which wins over
//! the default. A config file holds one object per subcommand, keyed by the
//! subcommand name, with the same field names as the long flags (underscores
//! instead of dashes). The `config` object of a run's `metadata.json` has the
//! same layout, so a run can be repeated with `--config metadata.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use htmm::hdp::AssignmentMove;
use htmm::ModelKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "htmm",
    version,
    about = "Hidden tree Markov models: EM training, scoring, sampling and HDP Gibbs chains"
)]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON file with defaults for any option.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a finite TD or BU model by EM.
    Train(TrainArgs),
    /// Log-likelihood of every tree in a dataset.
    Score(ScoreArgs),
    /// Generate labeled trees from a model.
    Sample(SampleArgs),
    /// Run blocked Gibbs chains for the infinite BU model.
    Gibbs(GibbsArgs),
    /// Check a dataset and/or model file.
    Validate(ValidateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Score(_) => "score",
            Command::Sample(_) => "sample",
            Command::Gibbs(_) => "gibbs",
            Command::Validate(_) => "validate",
        }
    }
}

macro_rules! layered {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $name {
            /// Fills unset fields from `fallback`.
            pub fn or(self, fallback: Self) -> Self {
                $name { $($field: self.$field.or(fallback.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Training trees, one per line.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for model.json, trace.csv and metadata.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model kind: td or bu.
    #[arg(long)]
    pub kind: Option<ModelKind>,
    /// Number of hidden states C.
    #[arg(long)]
    pub states: Option<usize>,
    /// Alphabet size M.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Maximum out-degree L.
    #[arg(long)]
    pub max_outdegree: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative log-likelihood improvement below which EM stops.
    #[arg(long)]
    pub rel_tol: Option<f64>,
    /// Additive pseudocount in every M-step.
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Dirichlet concentration of the random initialization.
    #[arg(long)]
    pub init_concentration: Option<f64>,
    /// Random initializations; the best final log-likelihood wins.
    #[arg(long)]
    pub restarts: Option<usize>,
}

layered!(TrainArgs {
    data,
    out,
    kind,
    states,
    labels,
    max_outdegree,
    seed,
    max_iters,
    rel_tol,
    smoothing,
    init_concentration,
    restarts,
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

layered!(ScoreArgs { model, data, out });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Skeleton trees; their labels are ignored.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of random skeletons when no --data is given.
    #[arg(long)]
    pub trees: Option<usize>,
    /// Node budget of each random skeleton.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Probability that a slot of a random skeleton holds a child.
    #[arg(long)]
    pub branching: Option<f64>,
}

layered!(SampleArgs {
    model,
    data,
    out,
    seed,
    trees,
    nodes,
    branching,
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GibbsArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; one chain-N subdirectory per chain.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Alphabet size M.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Maximum out-degree L.
    #[arg(long)]
    pub max_outdegree: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sweeps: Option<usize>,
    #[arg(long)]
    pub burn_in: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Independent chains; chain N uses RNG stream N.
    #[arg(long)]
    pub chains: Option<usize>,
    /// Truncation level K.
    #[arg(long)]
    pub truncation: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// One value per position, or a single value for all (comma-separated).
    #[arg(long, value_delimiter = ',')]
    pub alpha_position: Option<Vec<f64>>,
    #[arg(long)]
    pub alpha_transition: Option<f64>,
    #[arg(long)]
    pub alpha_switch: Option<f64>,
    #[arg(long)]
    pub emission_base: Option<f64>,
    /// Assignment move: tree (joint per tree) or node (single site).
    #[arg(long = "move")]
    #[serde(rename = "move")]
    pub assignment_move: Option<AssignmentMove>,
}

layered!(GibbsArgs {
    data,
    out,
    labels,
    max_outdegree,
    seed,
    sweeps,
    burn_in,
    thin,
    chains,
    truncation,
    gamma,
    alpha_position,
    alpha_transition,
    alpha_switch,
    emission_base,
    assignment_move,
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Alphabet size M; taken from --model when absent.
    #[arg(long)]
    pub labels: Option<usize>,
    /// Maximum out-degree L; taken from --model when absent.
    #[arg(long)]
    pub max_outdegree: Option<usize>,
}

layered!(ValidateArgs {
    data,
    model,
    labels,
    max_outdegree,
});

/// Contents of a `--config` file. A `metadata.json` written by a previous run
/// is accepted too: its `config` object is used and everything else ignored.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub threads: Option<usize>,
    pub train: Option<TrainArgs>,
    pub score: Option<ScoreArgs>,
    pub sample: Option<SampleArgs>,
    pub gibbs: Option<GibbsArgs>,
    pub validate: Option<ValidateArgs>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::io(path, source))?;
        let invalid = |e: serde_json::Error| CliError::Usage(format!("{}: {e}", path.display()));
        let mut doc: serde_json::Value = serde_json::from_str(&text).map_err(invalid)?;
        if doc.is_null() {
            return Ok(ConfigFile::default());
        }
        if let Some(inner) = doc.get_mut("config").filter(|c| c.is_object()) {
            doc = inner.take();
        }
        serde_json::from_value(doc).map_err(invalid)
    }
}

pub fn required<T>(value: Option<T>, name: &str) -> Result<T, CliError> {
    value.ok_or_else(|| {
        CliError::Usage(format!(
            "missing --{} (or \"{}\" in the config file)",
            name.replace('_', "-"),
            name
        ))
    })
}
