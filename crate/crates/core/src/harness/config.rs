//! Run configuration files.
//!
//! UTF-8 text, one `key = value` per line, `#` starts a comment. Every key
//! is known in advance; unknown or repeated keys are errors, as are missing
//! required keys. List values are comma separated.
//!
//! ```text
//! task = clustering
//! model_dim = 64
//! heads = 4
//! encoder = isab:16, isab:16
//! pooling = pma:4
//! post_sabs = 1
//! output_dim = 5
//! output_rows = 4
//! lr = 0.001
//! batch_size = 10
//! steps = 10000
//! seed = 0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{DecoderConfig, EncoderBlock, EncoderConfig, ModelConfig, Pooling};
use crate::tasks::mog::MogGenConfig;
use crate::train::{LrSchedule, Task, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "STFM_SEED";

const REQUIRED: &[&str] = &[
    "task",
    "model_dim",
    "heads",
    "encoder",
    "pooling",
    "output_dim",
    "lr",
    "batch_size",
    "steps",
    "seed",
];

const OPTIONAL: &[&str] = &[
    "post_sabs",
    "pma_rff",
    "decoder_hidden",
    "output_rows",
    "lr_decay_step",
    "lr_decay_factor",
    "eval_every",
    "eval_datasets",
    "grad_clip",
    "workers",
    "k",
    "data_dim",
    "n_min",
    "n_max",
    "mu_min",
    "mu_max",
    "sigma_gen",
    "dirichlet_alpha",
    "out_dir",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        match self.0.get(key) {
            Some(raw) => parse_value(key, raw),
            None => Err(Error::Config(format!("missing required key `{key}`"))),
        }
    }

    fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        self.0.get(key).map_or(Ok(default), |raw| parse_value(key, raw))
    }

    fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key).map(String::as_str) {
            None | Some("none") => Ok(None),
            Some(raw) => parse_value(key, raw).map(Some),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !REQUIRED.contains(&key) && !OPTIONAL.contains(&key) {
                return Err(Error::Config(format!("unknown key `{key}` on line {}", lineno + 1)));
            }
            if map.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!("key `{key}` given twice")));
            }
        }
        if let Some(key) = REQUIRED.iter().find(|k| !map.contains_key(**k)) {
            return Err(Error::Config(format!("missing required key `{key}`")));
        }
        let f = Fields(map);

        let task: Task = f.get("task")?;
        let defaults = MogGenConfig::default();
        let mog = MogGenConfig {
            k: f.get_or("k", defaults.k)?,
            dim: f.get_or("data_dim", defaults.dim)?,
            n_min: f.get_or("n_min", defaults.n_min)?,
            n_max: f.get_or("n_max", defaults.n_max)?,
            mu_lo: f.get_or("mu_min", defaults.mu_lo)?,
            mu_hi: f.get_or("mu_max", defaults.mu_hi)?,
            sigma: f.get_or("sigma_gen", defaults.sigma)?,
            alpha: f.get_or("dirichlet_alpha", defaults.alpha)?,
        };
        let input_dim = match task {
            Task::MaxRegression => 1,
            Task::Clustering => mog.dim,
        };
        let blocks: Vec<EncoderBlock> = parse_list("encoder", &f.0["encoder"])?;
        let hidden: Vec<usize> = match f.0.get("decoder_hidden") {
            Some(raw) => parse_list("decoder_hidden", raw)?,
            None => Vec::new(),
        };
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim,
                dim: f.get("model_dim")?,
                heads: f.get("heads")?,
                blocks,
            },
            decoder: DecoderConfig {
                pooling: f.get::<Pooling>("pooling")?,
                post_sabs: f.get_or("post_sabs", 0)?,
                pma_rff: f.get_or("pma_rff", false)?,
                hidden,
                output_dim: f.get("output_dim")?,
                output_rows: f.get_or("output_rows", 1)?,
            },
        };
        let train = TrainConfig {
            task,
            model,
            schedule: LrSchedule {
                lr: f.get("lr")?,
                decay_step: f.get_opt("lr_decay_step")?,
                decay_factor: f.get_or("lr_decay_factor", 0.1)?,
            },
            batch_size: f.get("batch_size")?,
            steps: f.get("steps")?,
            seed: f.get("seed")?,
            eval_every: f.get_or("eval_every", 1000)?,
            eval_datasets: f.get_or("eval_datasets", 100)?,
            grad_clip: f.get_opt("grad_clip")?,
            workers: f.get_or("workers", 1)?,
            mog,
        };
        train.validate()?;
        Ok(Self {
            train,
            out_dir: f.get_opt::<String>("out_dir")?.map(PathBuf::from),
        })
    }

    pub fn from_train(train: TrainConfig) -> Self {
        Self { train, out_dir: None }
    }

    /// Canonical text: every key in a fixed order, floats in shortest
    /// round-trip form. `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let e = &t.model.encoder;
        let d = &t.model.decoder;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let pairs: Vec<(&str, String)> = vec![
            ("task", t.task.to_string()),
            ("model_dim", e.dim.to_string()),
            ("heads", e.heads.to_string()),
            ("encoder", join(&e.blocks)),
            ("pooling", d.pooling.to_string()),
            ("post_sabs", d.post_sabs.to_string()),
            ("pma_rff", d.pma_rff.to_string()),
            ("decoder_hidden", join(&d.hidden)),
            ("output_dim", d.output_dim.to_string()),
            ("output_rows", d.output_rows.to_string()),
            ("lr", t.schedule.lr.to_string()),
            ("lr_decay_step", opt(t.schedule.decay_step.map(|s| s.to_string()))),
            ("lr_decay_factor", t.schedule.decay_factor.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("steps", t.steps.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("eval_datasets", t.eval_datasets.to_string()),
            ("grad_clip", opt(t.grad_clip.map(|c| c.to_string()))),
            ("workers", t.workers.to_string()),
            ("k", t.mog.k.to_string()),
            ("data_dim", t.mog.dim.to_string()),
            ("n_min", t.mog.n_min.to_string()),
            ("n_max", t.mog.n_max.to_string()),
            ("mu_min", t.mog.mu_lo.to_string()),
            ("mu_max", t.mog.mu_hi.to_string()),
            ("sigma_gen", t.mog.sigma.to_string()),
            ("dirichlet_alpha", t.mog.alpha.to_string()),
            ("out_dir", opt(self.out_dir.as_ref().map(|p| p.display().to_string()))),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Applies `STFM_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.train.seed = parse_value(SEED_ENV, raw.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::presets;

    const MINIMAL: &str = "
        # max regression, SAB encoder
        task = max-regression
        model_dim = 8
        heads = 2
        encoder = sab, sab
        pooling = pma:1
        output_dim = 1
        lr = 1e-3
        batch_size = 4
        steps = 3
        seed = 7   # trailing comment
    ";

    #[test]
    fn minimal_file_parses_with_defaults() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train.model.encoder.blocks, vec![EncoderBlock::Sab; 2]);
        assert_eq!(c.train.model.encoder.input_dim, 1);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.workers, 1);
        assert_eq!(c.train.schedule.decay_step, None);
        assert_eq!(c.out_dir, None);
    }

    #[test]
    fn canonical_text_round_trips() {
        for name in presets::NAMES {
            let mut c = RunConfig::from_train(presets::by_name(name).unwrap());
            c.out_dir = Some("runs/x".into());
            c.train.grad_clip = Some(0.1 + 0.2);
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, c, "{name}");
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&format!("{MINIMAL}\nlearning_rate = 1")).unwrap_err();
        assert!(err.to_string().contains("`learning_rate`"), "{err}");
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = MINIMAL.lines().filter(|l| !l.contains("steps")).collect::<Vec<_>>().join("\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("`steps`"), "{err}");
    }

    #[test]
    fn bad_value_and_duplicate_rejected() {
        let err = RunConfig::parse(&MINIMAL.replace("heads = 2", "heads = two")).unwrap_err();
        assert!(err.to_string().contains("`heads`"));
        assert!(RunConfig::parse(&format!("{MINIMAL}\nseed = 1")).is_err());
        assert!(RunConfig::parse(&MINIMAL.replace("heads = 2", "heads = 3")).is_err());
    }
}
