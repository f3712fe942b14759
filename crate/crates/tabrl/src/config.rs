//! Plain-text key-value configuration files.
//!
//! Format: one `key = value` per line, `#` comments, blank lines ignored.
//! Lists are comma-separated. Unknown keys are errors.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::advantage::{BalancerConfig, WeightConfig};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grpo::{BalancerUpdate, KlReference, TrainerConfig};
use crate::pipeline::{ContextSpec, CorpusSpec, FilterConfig};
use crate::rewards::RewardConfig;
use crate::synthesis::SynthesisConfig;

/// A parsed key-value file with typed, tracked access.
pub struct KvConfig {
    map: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KvConfig { map, used: BTreeSet::new() })
    }

    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn empty() -> Self {
        KvConfig { map: BTreeMap::new(), used: BTreeSet::new() }
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let value = self.map.get(key).cloned();
        if value.is_some() {
            self.used.insert(key.to_string());
        }
        value
    }

    fn typed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{s}'"))),
        }
    }

    pub fn f64(&mut self, key: &str, default: f64) -> Result<f64> {
        self.typed(key, default)
    }

    pub fn usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.typed(key, default)
    }

    pub fn u64(&mut self, key: &str, default: u64) -> Result<u64> {
        self.typed(key, default)
    }

    pub fn bool(&mut self, key: &str, default: bool) -> Result<bool> {
        self.typed(key, default)
    }

    pub fn string(&mut self, key: &str, default: &str) -> Result<String> {
        self.typed(key, default.to_string())
    }

    pub fn usize_list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        self.list(key, default)
    }

    pub fn u64_list(&mut self, key: &str, default: &[u64]) -> Result<Vec<u64>> {
        self.list(key, default)
    }

    fn list<T: std::str::FromStr + Clone>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{tok}'")))
                })
                .collect(),
        }
    }

    /// Fails if any key was never consumed (catches typos).
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self.map.keys().filter(|k| !self.used.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

fn filter_config(kv: &mut KvConfig) -> Result<FilterConfig> {
    let d = FilterConfig::default();
    let cfg = FilterConfig {
        rho: kv.f64("rho", d.rho)?,
        m_min: kv.usize("m_min", d.m_min)?,
        n_bins: kv.usize("n_bins", d.n_bins)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn context_spec(kv: &mut KvConfig, default_seed: u64, shots: Option<&[usize]>) -> Result<ContextSpec> {
    let d = ContextSpec::default();
    let spec = ContextSpec {
        shots: match shots {
            Some(shots) => shots.to_vec(),
            None => kv.usize_list("shots", &d.shots)?,
        },
        pool_size: kv.usize("pool_size", d.pool_size)?,
        ratio_lo: kv.f64("ratio_lo", d.ratio_lo)?,
        ratio_hi: kv.f64("ratio_hi", d.ratio_hi)?,
        seed: kv.u64("seed", default_seed)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Loads the pipeline + synthesis configuration used by `synth`.
pub fn load_synth_config(kv: &mut KvConfig, default_seed: u64) -> Result<(CorpusSpec, SynthesisConfig)> {
    let filter = filter_config(kv)?;
    let context = context_spec(kv, default_seed, None)?;
    let corpus = CorpusSpec {
        filter,
        context,
        queries_per_table: kv.usize("queries_per_table", 4)?,
    };
    let ds = SynthesisConfig::default();
    let synth = SynthesisConfig {
        max_retries: kv.usize("max_retries", ds.max_retries)?,
        mape_gate: kv.f64("mape_gate", ds.mape_gate)?,
        min_tokens: kv.usize("min_tokens", ds.min_tokens)?,
        max_tokens: kv.usize("max_tokens", ds.max_tokens)?,
        n_votes: kv.usize("n_votes", ds.n_votes)?,
        max_targets_per_table: kv.usize("max_targets_per_table", ds.max_targets_per_table)?,
        delta: kv.f64("delta", ds.delta)?,
    };
    Ok((corpus, synth))
}

/// Loads the trainer configuration used by `train`.
pub fn load_trainer_config(kv: &mut KvConfig) -> Result<TrainerConfig> {
    let d = TrainerConfig::default();
    let balancer_update = match kv.string("balancer_update", "per_batch")?.as_str() {
        "per_batch" => BalancerUpdate::PerBatch,
        "per_group" => BalancerUpdate::PerGroup,
        other => return Err(Error::Config(format!("balancer_update: unknown value '{other}'"))),
    };
    let kl_reference = match kv.string("kl_reference", "behavior")?.as_str() {
        "behavior" => KlReference::Behavior,
        "initial" => KlReference::Initial,
        other => return Err(Error::Config(format!("kl_reference: unknown value '{other}'"))),
    };
    let dw = WeightConfig::default();
    let db = BalancerConfig::default();
    let dr = RewardConfig::default();
    let cfg = TrainerConfig {
        group_size: kv.usize("group_size", d.group_size)?,
        eps_low: kv.f64("eps_low", d.eps_low)?,
        eps_high: kv.f64("eps_high", d.eps_high)?,
        kl_coef: kv.f64("kl_coef", d.kl_coef)?,
        learning_rate: kv.f64("learning_rate", d.learning_rate)?,
        batch_size: kv.usize("batch_size", d.batch_size)?,
        steps: kv.usize("steps", d.steps)?,
        seed: kv.u64("seed", d.seed)?,
        sync_every: kv.usize("sync_every", d.sync_every)?,
        balancing: kv.bool("balancing", d.balancing)?,
        balancer_update,
        kl_reference,
        weights: WeightConfig {
            lambda_f: kv.f64("lambda_f", dw.lambda_f)?,
            lambda_e: kv.f64("lambda_e", dw.lambda_e)?,
            lambda_c: kv.f64("lambda_c", dw.lambda_c)?,
            eps_a: kv.f64("eps_a", dw.eps_a)?,
        },
        reward: RewardConfig {
            gamma: kv.f64("gamma", dr.gamma)?,
            delta: kv.f64("delta", dr.delta)?,
            eps_f: kv.f64("eps_f", dr.eps_f)?,
        },
        balancer: BalancerConfig {
            beta: kv.f64("beta", db.beta)?,
            eta_min: kv.f64("eta_min", db.eta_min)?,
            eta_max: kv.f64("eta_max", db.eta_max)?,
            eps_b: kv.f64("eps_b", db.eps_b)?,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the evaluation configuration used by `eval`.
pub fn load_eval_config(kv: &mut KvConfig) -> Result<(EvalConfig, ContextSpec, FilterConfig)> {
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        shot_budgets: kv.usize_list("shot_budgets", &d.shot_budgets)?,
        seeds: kv.u64_list("seeds", &d.seeds)?,
        nmae_clip: kv.f64("nmae_clip", d.nmae_clip)?,
        sample_cap: kv.usize("sample_cap", d.sample_cap)?,
    };
    cfg.validate()?;
    let context = context_spec(kv, 0, Some(&cfg.shot_budgets))?;
    let filter = filter_config(kv)?;
    Ok((cfg, context, filter))
}
