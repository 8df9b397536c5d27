//! Flat run configuration: every field is a scalar addressable by key.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// How the data owner tunes the adapter slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneMode {
    Full,
    Lora,
}

impl FromStr for TuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TuneMode::Full),
            "lora" => Ok(TuneMode::Lora),
            _ => Err(Error::invalid(format!("tune mode must be `full` or `lora`, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for TuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TuneMode::Full => "full",
            TuneMode::Lora => "lora",
        })
    }
}

/// Comma-separated list of reals, e.g. `0,0.25,0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealList(pub Vec<f64>);

impl FromStr for RealList {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::invalid(format!("bad number `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(RealList)
    }
}

impl std::fmt::Display for RealList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(f64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated list of seeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl FromStr for SeedList {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::invalid(format!("bad seed `{p}` in `{s}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(SeedList)
    }
}

impl std::fmt::Display for SeedList {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        /// All knobs of a run. Keys in files and flags equal the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            /// `(key, help)` for every field, in declaration order.
            pub const FIELDS: &'static [(&'static str, &'static str)] = &[$((stringify!($field), $doc),)*];

            /// Parse `value` into the field named `key`.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse::<$ty>().map_err(|_| {
                            Error::invalid(format!("cannot parse `{}` for `{}`", value, key))
                        })?;
                    })*
                    _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Textual value of the field named `key`.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($field) => Some(self.$field.to_string()),)*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "master seed for every random stream";
    n_layers: usize = 16, "transformer blocks (n)";
    d_model: usize = 64, "hidden width";
    n_heads: usize = 4, "attention heads";
    d_ffn: usize = 256, "feed-forward width";
    context_len: usize = 128, "maximum sequence length";
    harmonizer_rank: usize = 16, "harmonizer bottleneck rank";
    batch_size: usize = 4, "sequences per training step";
    seq_len: usize = 128, "input positions per training sequence";
    grad_clip: f64 = 1.0, "global gradient-norm clip (0 disables)";
    pretrain_steps: usize = 2000, "pretraining steps";
    pretrain_lr: f64 = 3e-3, "pretraining learning rate";
    n_candidates: usize = 3, "candidates per importance update (N_c)";
    n_groups: usize = 4, "layer groups (N_g)";
    est_total_steps: usize = 2000, "harmonizer training steps during estimation";
    rl_interval: usize = 10, "harmonizer steps between importance updates";
    est_lr: f64 = 1e-3, "harmonizer learning rate";
    n_adapter: usize = 4, "adapter layers (N_a)";
    alpha: f64 = 0.25, "fraction of each group replaced by harmonizers";
    beta: f64 = 0.8, "attention rank-reduction ratio";
    tune_steps: usize = 500, "downstream tuning steps";
    tune_lr: f64 = 1e-3, "downstream learning rate for full-layer tuning";
    tune_mode: TuneMode = TuneMode::Full, "`full` adapter layers or `lora` factors";
    lora_rank: usize = 4, "LoRA rank";
    lora_lr: f64 = 3e-3, "downstream learning rate for LoRA factors";
    pretrain_path: String = String::new(), "pretraining corpus file";
    downstream_path: String = String::new(), "downstream corpus file";
    val_split_fraction: f64 = 0.05, "tail fraction of the pretraining corpus held out for validation";
    eval_split_fraction: f64 = 0.1, "tail fraction of each corpus held out for evaluation";
    eval_max_windows: usize = 0, "cap on evaluation windows (0 = all)";
    tolerance: f64 = 0.10, "relative slack of the plug-in versus full fine-tuning condition";
    sweep_alphas: RealList = RealList(vec![0.0, 0.25, 0.5]), "sweep values of alpha";
    sweep_betas: RealList = RealList(vec![0.0, 0.4, 0.8]), "sweep values of beta";
    sweep_seeds: SeedList = SeedList(vec![0, 1, 2]), "sweep seeds";
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            context_len: self.context_len,
            vocab_size: crate::model::BYTE_VOCAB,
        }
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, _) in Self::FIELDS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.seq_len > self.context_len || self.seq_len == 0 {
            return fail("seq_len must be in 1..=context_len");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.n_candidates < 2 {
            return fail("n_candidates must be at least 2");
        }
        if self.n_groups == 0 || self.n_groups > self.n_layers {
            return fail("n_groups must be in 1..=n_layers");
        }
        if self.rl_interval == 0 {
            return fail("rl_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return fail("alpha and beta must lie in [0, 1]");
        }
        if self.harmonizer_rank == 0 || self.lora_rank == 0 || self.lora_rank > self.d_model {
            return fail("harmonizer_rank and lora_rank must be positive, lora_rank at most d_model");
        }
        if self.tolerance < 0.0 {
            return fail("tolerance must be non-negative");
        }
        Ok(())
    }
}
