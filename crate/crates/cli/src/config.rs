//! Run configuration: `key = value` files, overrides and echo.

use std::collections::BTreeSet;
use std::path::PathBuf;

use gapcoref::encoder::EncoderConfig;
use gapcoref::train::{ModelKind, ScheduleKind, TrainerConfig};

use crate::error::CliError;

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parse a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Usage(format!("override {s:?} is not key=value")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: ModelKind,
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub folds: usize,
    pub seed: u64,
    pub trainer: TrainerConfig,
    /// `vocab_size` is filled in once the vocabulary is known.
    pub encoder: EncoderConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::Usage(format!("invalid value for {key}: {v:?}")))
}

fn parse_layers(key: &str, v: &str) -> Result<BTreeSet<usize>, CliError> {
    let mut set = BTreeSet::new();
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        return Ok(set);
    }
    for part in v.split(',') {
        let part = part.trim();
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (parse(key, a.trim())?, parse(key, b.trim())?);
                if a > b {
                    return Err(CliError::Usage(format!("invalid layer range {part:?}")));
                }
                set.extend(a..=b);
            }
            None => {
                set.insert(parse(key, part)?);
            }
        }
    }
    Ok(set)
}

fn optional(v: &str) -> Option<&str> {
    (!v.eq_ignore_ascii_case("none") && !v.is_empty()).then_some(v)
}

impl RunConfig {
    pub fn defaults(kind: ModelKind) -> RunConfig {
        RunConfig {
            kind,
            data: None,
            test: None,
            vocab: None,
            embeddings: None,
            out_dir: PathBuf::from("out"),
            folds: 5,
            seed: 0,
            trainer: TrainerConfig::for_kind(kind),
            encoder: EncoderConfig::new(0),
        }
    }

    /// Later pairs override earlier ones. The model kind is resolved first
    /// so per-kind defaults sit underneath every explicit value.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<RunConfig, CliError> {
        let kind = match pairs.iter().rev().find(|(k, _)| k == "kind") {
            Some((_, v)) => v.parse::<ModelKind>().map_err(CliError::Usage)?,
            None => ModelKind::Qa,
        };
        let mut c = RunConfig::defaults(kind);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        let t = &mut self.trainer;
        let p = &mut t.pipeline;
        let e = &mut self.encoder;
        match key {
            "kind" => {}
            "data" => self.data = optional(v).map(PathBuf::from),
            "test" => self.test = optional(v).map(PathBuf::from),
            "vocab" => self.vocab = optional(v).map(PathBuf::from),
            "embeddings" => self.embeddings = optional(v).map(PathBuf::from),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "folds" => self.folds = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "beta1" => t.adam.beta1 = parse(key, v)?,
            "beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "weight_decay" => t.adam.weight_decay = parse(key, v)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "schedule" => t.schedule = v.parse::<ScheduleKind>().map_err(CliError::Usage)?,
            "triangular_steps_per_cycle" => {
                t.triangular_steps_per_cycle = optional(v).map(|s| parse(key, s)).transpose()?
            }
            "clip_norm" => t.clip_norm = optional(v).map(|s| parse(key, s)).transpose()?,
            "window" => p.window = parse(key, v)?,
            "max_seq_len" => p.max_seq_len = parse(key, v)?,
            "max_answer_len" => p.max_answer_len = parse(key, v)?,
            "seq_hidden_units" => p.seq_hidden_units = parse(key, v)?,
            "seq_dropout" => p.seq_dropout = parse(key, v)?,
            "lr_c" => p.lr_c = parse(key, v)?,
            "num_layers" => e.num_layers = parse(key, v)?,
            "hidden_dim" => e.hidden_dim = parse(key, v)?,
            "num_heads" => e.num_heads = parse(key, v)?,
            "ffn_dim" => e.ffn_dim = parse(key, v)?,
            "max_positions" => e.max_positions = parse(key, v)?,
            "frozen_layers" => e.frozen_layers = parse_layers(key, v)?,
            "output_layer" => e.output_layer = optional(v).map(|s| parse(key, s)).transpose()?,
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.trainer.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.folds == 0 {
            return Err(CliError::Usage("folds must be at least 1".into()));
        }
        if self.encoder.max_positions < self.trainer.pipeline.max_seq_len {
            return Err(CliError::Usage(format!(
                "max_positions {} is below max_seq_len {}",
                self.encoder.max_positions, self.trainer.pipeline.max_seq_len
            )));
        }
        let mut probe = self.encoder.clone();
        probe.vocab_size = 1;
        probe.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    /// Every effective value, one `key = value` line each.
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".to_string());
        let t = &self.trainer;
        let p = &t.pipeline;
        let e = &self.encoder;
        let frozen = if e.frozen_layers.is_empty() {
            "none".to_string()
        } else {
            e.frozen_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        };
        let rows: Vec<(&str, String)> = vec![
            ("kind", self.kind.to_string()),
            ("data", path(&self.data)),
            ("test", path(&self.test)),
            ("vocab", path(&self.vocab)),
            ("embeddings", path(&self.embeddings)),
            ("out_dir", self.out_dir.display().to_string()),
            ("folds", self.folds.to_string()),
            ("seed", self.seed.to_string()),
            ("learning_rate", format!("{:e}", t.learning_rate)),
            ("beta1", t.adam.beta1.to_string()),
            ("beta2", t.adam.beta2.to_string()),
            ("adam_eps", format!("{:e}", t.adam.eps)),
            ("weight_decay", t.adam.weight_decay.to_string()),
            ("warmup_fraction", t.warmup_fraction.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("schedule", t.schedule.to_string()),
            ("triangular_steps_per_cycle", opt(t.triangular_steps_per_cycle.map(|s| s.to_string()))),
            ("clip_norm", opt(t.clip_norm.map(|c| c.to_string()))),
            ("window", p.window.to_string()),
            ("max_seq_len", p.max_seq_len.to_string()),
            ("max_answer_len", p.max_answer_len.to_string()),
            ("seq_hidden_units", p.seq_hidden_units.to_string()),
            ("seq_dropout", p.seq_dropout.to_string()),
            ("lr_c", p.lr_c.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("hidden_dim", e.hidden_dim.to_string()),
            ("num_heads", e.num_heads.to_string()),
            ("ffn_dim", e.ffn_dim.to_string()),
            ("max_positions", e.max_positions.to_string()),
            ("frozen_layers", frozen),
            ("output_layer", opt(e.output_layer.map(|l| l.to_string()))),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_config_text(text).unwrap()
    }

    #[test]
    fn per_kind_defaults_and_overrides() {
        let c = RunConfig::from_pairs(&pairs("kind = qa\n")).unwrap();
        let echo = c.echo();
        assert!(echo.contains("learning_rate = 1e-5\n"));
        assert!(echo.contains("batch_size = 12\n"));
        assert!(echo.contains("epochs = 2\n"));
        let c =
            RunConfig::from_pairs(&pairs("kind = seq # comment\nepochs = 3\n\n# full comment\nfrozen_layers = 1-2,4"))
                .unwrap();
        assert_eq!(c.trainer.batch_size, 10);
        assert_eq!(c.trainer.epochs, 3);
        assert_eq!(c.encoder.frozen_layers, BTreeSet::from([1, 2, 4]));
        let mut p = pairs("kind = mc\nbatch_size = 7");
        p.push(parse_override("batch_size=9").unwrap());
        assert_eq!(RunConfig::from_pairs(&p).unwrap().trainer.batch_size, 9);
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_pairs(&pairs("kind = seq\nclip_norm = none\noutput_layer = 2\nvocab = v.txt")).unwrap();
        let again = RunConfig::from_pairs(&pairs(&c.echo())).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn errors_are_usage_errors() {
        for bad in
            ["kind = svm", "nonsense = 1", "epochs = two", "no equals sign", "warmup_fraction = 0", "hidden_dim = 130"]
        {
            let r = parse_config_text(bad).and_then(|p| RunConfig::from_pairs(&p));
            assert!(matches!(r, Err(CliError::Usage(_))), "{bad}");
        }
    }
}
