use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use icl_core::env::EnvId;
use icl_core::icl::IclConfig;
use serde_json::Value;

/// Flags shared by every command that builds an [`IclConfig`].
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Environment: gridworld-a, gridworld-b, cartpole-mr, cartpole-mid, or a spec file.
    #[arg(long)]
    pub env: Option<String>,
    /// JSON config file; any subset of the configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// ICL iterations `n`.
    #[arg(long)]
    pub iters: Option<usize>,
    /// PPO epochs `m` per forward step.
    #[arg(long)]
    pub ppo_epochs: Option<usize>,
    /// Constraint adjustment epochs `e`.
    #[arg(long)]
    pub adjust_epochs: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Early-exit threshold on NAD; absent runs all iterations.
    #[arg(long)]
    pub eps: Option<f64>,
}

/// Recursively overlay `patch` onto `base`. Objects merge key by key, every
/// other value replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if !value.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    Ok(value)
}

/// Defaults for the environment, then the config file, then the flags.
/// Top-level `beta` and `gamma` are copied into the stage configs last.
pub fn build(o: &Overrides) -> Result<IclConfig> {
    let file = o.config.as_deref().map(read_config_file).transpose()?;
    let env: EnvId = match (&o.env, file.as_ref().and_then(|f| f.get("env"))) {
        (Some(name), _) => name.parse().expect("EnvId parsing is infallible"),
        (None, Some(v)) => serde_json::from_value(v.clone()).context("config field env")?,
        (None, None) => bail!("no environment given: pass --env or set env in the config file"),
    };
    let mut value = serde_json::to_value(IclConfig::for_env(env.clone())?)?;
    if let Some(f) = file {
        merge(&mut value, f);
    }
    value["env"] = serde_json::to_value(&env)?;
    let mut cfg: IclConfig = serde_json::from_value(value).context("invalid configuration")?;
    if let Some(b) = o.beta {
        cfg.beta = b;
    }
    if let Some(n) = o.iters {
        cfg.iterations = n;
    }
    if let Some(m) = o.ppo_epochs {
        cfg.ppo.epochs = m;
    }
    if let Some(e) = o.adjust_epochs {
        cfg.adjust.epochs = e;
    }
    if let Some(l) = o.lambda {
        cfg.adjust.lambda = l;
    }
    if o.eps.is_some() {
        cfg.epsilon = o.eps;
    }
    let cfg = cfg.synced();
    cfg.validate()?;
    Ok(cfg)
}

/// `"3"`, `"1,2,5"` or the inclusive range `"1-5"`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty seed range {text}");
        }
        return Ok((a..=b).collect());
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().with_context(|| format!("bad seed {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}
