//! Flat key=value config files for the train subcommand.
//!
//! `[section]` headers are allowed as visual grouping and ignored; keys use
//! the long flag names (`batch-size=64`). Unknown keys are errors. Command
//! line flags override file values, which override built-in defaults; the
//! merged result is echoed and written next to the checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use representor::data::Objective;

use crate::TrainArgs;

const KNOWN_KEYS: [&str; 19] = [
    "src",
    "tgt",
    "vocab",
    "out-dir",
    "objective",
    "seed",
    "steps",
    "batch-size",
    "warmup",
    "label-smoothing",
    "dropout",
    "grad-clip",
    "checkpoint-every",
    "layers",
    "dim",
    "heads",
    "ffn",
    "max-len",
    "resume",
];
const KNOWN_BOOL_KEYS: [&str; 3] = ["es", "eds", "ls"];

pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile { values: BTreeMap::new() }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) && !KNOWN_BOOL_KEYS.contains(&key.as_str()) {
                return Err(format!("config line {}: unknown key {key:?}", i + 1));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, String> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| format!("config key {key}: cannot parse {raw:?}")),
        }
    }
}

/// Fully resolved training settings after flag/file/default merging.
pub struct MergedTrain {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub vocab: PathBuf,
    pub out_dir: PathBuf,
    pub objective: Objective,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub warmup: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub es: bool,
    pub eds: bool,
    pub ls: bool,
    pub resume: Option<PathBuf>,
}

fn objective_from_str(raw: &str) -> Result<Objective, String> {
    match raw {
        "baseline" => Ok(Objective::Baseline),
        "st-ts" => Ok(Objective::StTs),
        "lr-rl" => Ok(Objective::LrRl),
        "cfp" => Ok(Objective::Cfp),
        other => Err(format!("unknown objective {other:?}")),
    }
}

impl MergedTrain {
    pub fn merge(args: &TrainArgs, file: &ConfigFile) -> Result<MergedTrain, String> {
        let path_of = |flag: &Option<PathBuf>, key: &str| -> Option<PathBuf> {
            flag.clone().or_else(|| file.get(key).map(PathBuf::from))
        };
        let required = |flag: &Option<PathBuf>, key: &str| -> Result<PathBuf, String> {
            path_of(flag, key).ok_or_else(|| format!("--{key} is required (flag or config file)"))
        };
        let objective = match args.objective {
            Some(o) => Objective::from(o),
            None => match file.get("objective") {
                Some(raw) => objective_from_str(raw)?,
                None => Objective::Cfp,
            },
        };
        Ok(MergedTrain {
            src: required(&args.src, "src")?,
            tgt: required(&args.tgt, "tgt")?,
            vocab: required(&args.vocab, "vocab")?,
            out_dir: required(&args.out_dir, "out-dir")?,
            objective,
            seed: args.seed.or(file.parse("seed")?).unwrap_or(1),
            steps: args.steps.or(file.parse("steps")?).unwrap_or(1000),
            batch_size: args.batch_size.or(file.parse("batch-size")?).unwrap_or(64),
            warmup: args.warmup.or(file.parse("warmup")?).unwrap_or(4000),
            label_smoothing: args
                .label_smoothing
                .or(file.parse("label-smoothing")?)
                .unwrap_or(0.1),
            dropout: args.dropout.or(file.parse("dropout")?).unwrap_or(0.0),
            grad_clip: args.grad_clip.or(file.parse("grad-clip")?),
            checkpoint_every: args
                .checkpoint_every
                .or(file.parse("checkpoint-every")?)
                .unwrap_or(0),
            layers: args.layers.or(file.parse("layers")?).unwrap_or(2),
            dim: args.dim.or(file.parse("dim")?).unwrap_or(64),
            heads: args.heads.or(file.parse("heads")?).unwrap_or(4),
            ffn: args.ffn.or(file.parse("ffn")?).unwrap_or(128),
            max_len: args.max_len.or(file.parse("max-len")?).unwrap_or(256),
            es: args.es.or(file.parse("es")?).unwrap_or(true),
            eds: args.eds.or(file.parse("eds")?).unwrap_or(true),
            ls: args.ls.or(file.parse("ls")?).unwrap_or(false),
            resume: path_of(&args.resume, "resume"),
        })
    }

    /// The effective configuration, key=value per line, written next to the
    /// checkpoints for reproducibility.
    pub fn echo(&self) -> String {
        let objective = match self.objective {
            Objective::Baseline => "baseline",
            Objective::StTs => "st-ts",
            Objective::LrRl => "lr-rl",
            Objective::Cfp => "cfp",
        };
        let mut out = String::from("[data]\n");
        out.push_str(&format!("src={}\n", self.src.display()));
        out.push_str(&format!("tgt={}\n", self.tgt.display()));
        out.push_str(&format!("vocab={}\n", self.vocab.display()));
        out.push_str(&format!("out-dir={}\n", self.out_dir.display()));
        out.push_str("[model]\n");
        out.push_str(&format!("layers={}\n", self.layers));
        out.push_str(&format!("dim={}\n", self.dim));
        out.push_str(&format!("heads={}\n", self.heads));
        out.push_str(&format!("ffn={}\n", self.ffn));
        out.push_str(&format!("max-len={}\n", self.max_len));
        out.push_str(&format!("es={}\neds={}\nls={}\n", self.es, self.eds, self.ls));
        out.push_str("[train]\n");
        out.push_str(&format!("objective={objective}\n"));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("steps={}\n", self.steps));
        out.push_str(&format!("batch-size={}\n", self.batch_size));
        out.push_str(&format!("warmup={}\n", self.warmup));
        out.push_str(&format!("label-smoothing={}\n", self.label_smoothing));
        out.push_str(&format!("dropout={}\n", self.dropout));
        if let Some(c) = self.grad_clip {
            out.push_str(&format!("grad-clip={c}\n"));
        }
        out.push_str(&format!("checkpoint-every={}\n", self.checkpoint_every));
        if let Some(r) = &self.resume {
            out.push_str(&format!("resume={}\n", r.display()));
        }
        out
    }
}
