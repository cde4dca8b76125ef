//! Command-line definitions and config-file merging.
//!
//! A config file (`--config path`) holds `key=value` lines or a flat JSON
//! object whose keys are long flag names. Its entries are spliced in front of
//! the real flags, and every flag overrides itself, so anything given on the
//! command line wins.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrpo::losses::{LossConfig, LossKind, WeightMode};
use mrpo::optim::OptimizerConfig;
use mrpo::policy::PolicyDims;
use mrpo::prefmath::{ClipConfig, ClipMode, ReferenceWeights};
use mrpo::trainer::TrainConfig;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mrpo",
    version,
    about = "Multi-reference preference optimization on a toy policy"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted-reward train/test preference files.
    Synth(SynthArgs),
    /// Build a reference policy of a given quality for a synthetic task.
    MakeRef(MakeRefArgs),
    /// Score a dataset under one or more reference checkpoints.
    ScoreRefs(ScoreRefsArgs),
    /// Train a policy initialized from reference 0.
    Train(TrainArgs),
    /// Preference accuracy and reward margin of a policy.
    Eval(EvalArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Compare methods across seeds on planted-reward data.
    Experiment(ExperimentArgs),
    /// Re-run a command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.9)]
    pub train_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, Args)]
#[command(args_override_self = true)]
pub struct DimsArgs {
    #[arg(long, default_value_t = PolicyDims::default().embed)]
    pub embed: usize,
    #[arg(long, default_value_t = PolicyDims::default().hidden)]
    pub hidden: usize,
    #[arg(long, default_value_t = PolicyDims::default().context)]
    pub context: usize,
}

impl DimsArgs {
    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            embed: self.embed,
            hidden: self.hidden,
            context: self.context,
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct MakeRefArgs {
    /// Planted reward written by `synth` (reward.json).
    #[arg(long)]
    pub reward: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 = random init, 1 = full reference-training budget.
    #[arg(long)]
    pub quality: f64,
    #[command(flatten)]
    pub dims: DimsArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ScoreRefsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Reference checkpoints; the first is the initializing reference.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub refs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Dpo,
    MultiDpo,
    Mrpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClipArg {
    None,
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

/// Loss hyperparameters; flag names follow the usual symbols (beta, eps-max, alpha).
#[derive(Debug, Clone, Args)]
#[command(args_override_self = true)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value = "mrpo")]
    pub loss: LossArg,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub eps_max: f64,
    #[arg(long, value_enum, default_value = "adaptive")]
    pub clip: ClipArg,
    /// `uniform`, `arwc`, or `fixed=a0,a1,...`.
    #[arg(long, default_value = "arwc")]
    pub alpha_mode: String,
}

impl LossArgs {
    pub fn config(&self) -> Result<LossConfig, CliError> {
        let kind = match self.loss {
            LossArg::Dpo => LossKind::Dpo,
            LossArg::MultiDpo => LossKind::MultiDpo,
            LossArg::Mrpo => LossKind::Mrpo,
        };
        let mode = match self.clip {
            ClipArg::None => ClipMode::None,
            ClipArg::Fixed => ClipMode::Fixed,
            ClipArg::Adaptive => ClipMode::Adaptive,
        };
        let clip = ClipConfig::new(self.eps_max, mode)?;
        let config = LossConfig {
            beta: self.beta,
            kind,
            clip,
            weight_mode: parse_alpha_mode(&self.alpha_mode)?,
        };
        config.validate()?;
        Ok(config)
    }
}

pub fn parse_alpha_mode(s: &str) -> Result<WeightMode, CliError> {
    match s {
        "uniform" => Ok(WeightMode::Uniform),
        "arwc" => Ok(WeightMode::Arwc),
        other => {
            let list = other
                .strip_prefix("fixed=")
                .ok_or_else(|| CliError::Usage(format!("unknown alpha mode {other:?}")))?;
            let alphas = list
                .split(',')
                .map(|a| a.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(format!("bad fixed alpha list {list:?}: {e}")))?;
            Ok(WeightMode::Fixed(ReferenceWeights::new(alphas)?))
        }
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, requires = "test_cache")]
    pub test: Option<PathBuf>,
    #[arg(long, requires = "test")]
    pub test_cache: Option<PathBuf>,
    /// Initial policy; must be reference 0's checkpoint.
    #[arg(long)]
    pub init: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 10.0)]
    pub divergence_threshold: f64,
    /// Output directory for policy.ckpt, metrics.jsonl and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig, CliError> {
        let config = TrainConfig {
            loss: self.loss.config()?,
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => OptimizerConfig::default(),
                OptimizerArg::Sgd => OptimizerConfig::Sgd,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_every: self.eval_every,
            divergence_threshold: self.divergence_threshold,
            record_wall_time: false,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    /// Also write the result as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Prop1,
    Prop2,
    Jensen,
    Gradcheck,
    All,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ExperimentArgs {
    /// Experiment spec as JSON; defaults to the weak-base / strong-reference
    /// comparison of dpo, multi-dpo and mrpo.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated seeds (overrides the spec).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory for report.txt, report.csv and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Parse a config file into `(flag, value)` pairs. `true` means a bare flag;
/// `false` drops it.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, Option<String>)>, CliError> {
    let trimmed = text.trim_start();
    let pairs: Vec<(String, String)> = if trimmed.starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(trimmed)
            .map_err(|e| CliError::Usage(format!("config file is not valid JSON: {e}")))?;
        map.into_iter()
            .map(|(k, v)| {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|i| i.as_str().map(str::to_owned).unwrap_or_else(|| i.to_string()))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                (k, v)
            })
            .collect()
    } else {
        text.lines()
            .enumerate()
            .map(|(i, l)| (i, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .map(|(i, l)| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
                    .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value", i + 1)))
            })
            .collect::<Result<_, _>>()?
    };
    Ok(pairs
        .into_iter()
        .filter(|(_, v)| v != "false")
        .map(|(k, v)| {
            let flag = k.trim_start_matches('-').replace('_', "-");
            (flag, (v != "true").then_some(v))
        })
        .collect())
}

/// Expand `--config FILE` into explicit flags placed right after the
/// subcommand name, ahead of the user's own flags.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, CliError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config_path = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            config_path = Some(
                it.next()
                    .ok_or_else(|| CliError::Usage("--config needs a path".into()))?,
            );
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_owned());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config_path else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{path}: {e}")))?;
    let mut injected = Vec::new();
    for (flag, value) in parse_config_file(&text)? {
        injected.push(format!("--{flag}"));
        injected.extend(value);
    }
    // argv[0] is the program, argv[1] the subcommand.
    let split = rest.len().min(2);
    let mut out: Vec<String> = rest[..split].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[split..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_config() {
        let got = parse_config_file("# c\nbeta = 0.5\nloss=dpo\n\nverbose=true\nquiet=false\n").unwrap();
        assert_eq!(
            got,
            vec![
                ("beta".into(), Some("0.5".into())),
                ("loss".into(), Some("dpo".into())),
                ("verbose".into(), None)
            ]
        );
        assert!(parse_config_file("nonsense").is_err());
    }

    #[test]
    fn json_config() {
        let got = parse_config_file(r#"{"eps_max": 0.2, "refs": ["a", "b"]}"#).unwrap();
        assert!(got.contains(&("eps-max".into(), Some("0.2".into()))));
        assert!(got.contains(&("refs".into(), Some("a,b".into()))));
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, "seed=3\npairs=50\n").unwrap();
        let argv: Vec<String> = [
            "mrpo",
            "synth",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            "x",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let cli = Cli::try_parse_from(expand_config(argv).unwrap()).unwrap();
        match cli.command {
            Command::Synth(a) => assert_eq!((a.seed, a.pairs), (9, 50)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alpha_modes() {
        assert_eq!(parse_alpha_mode("arwc").unwrap(), WeightMode::Arwc);
        assert!(matches!(
            parse_alpha_mode("fixed=0.9,0.1").unwrap(),
            WeightMode::Fixed(_)
        ));
        assert!(parse_alpha_mode("fixed=0.9,0.3").is_err());
        assert!(parse_alpha_mode("best").is_err());
    }
}
