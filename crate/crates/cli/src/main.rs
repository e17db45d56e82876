mod config;
mod sweep;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use icl_core::adjust::ConstraintFn;
use icl_core::crl::TrueConstraint;
use icl_core::env::Env;
use icl_core::icl::{generate_expert, Variant};
use icl_core::metrics::{cmse, nad};
use icl_core::oracle::{alternate, TabularMdp};
use icl_core::trajectory::{read_trajectories, write_trajectories};
use icl_core::{rng_from_seed, Trajectory};

use config::{parse_seeds, Overrides};
use sweep::{sweep, RunInfo};

#[derive(Parser)]
#[command(name = "icl", version, about = "Learn soft constraints from expert demonstrations")]
struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy under the environment's true constraint and sample demonstrations.
    GenExpert(GenExpertArgs),
    /// Learn a constraint from expert demonstrations.
    Icl(IclArgs),
    /// Run an ablated ICL variant.
    Ablate(AblateArgs),
    /// Compare datasets (NAD) and score a learned constraint (CMSE).
    Metrics(MetricsArgs),
    /// Exact tabular alternation on a finite MDP.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenExpertArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of demonstrations to sample.
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IclArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Expert trajectory file (one JSON trajectory per line).
    #[arg(long)]
    expert: PathBuf,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seed list `1,2,3` or inclusive range `1-5`.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory; each seed runs in `seed-<s>` below it.
    #[arg(long)]
    out: PathBuf,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: IclArgs,
    /// no-mixture, uniform-mixture or full.
    #[arg(long)]
    variant: Variant,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    env: String,
    /// Reference (expert) trajectories.
    #[arg(long)]
    expert: PathBuf,
    /// Trajectories to compare against the expert.
    #[arg(long)]
    agent: Option<PathBuf>,
    /// Learned constraint checkpoint to score against the true map.
    #[arg(long)]
    constraint: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// MDP spec file, or `chain` for the bundled five-state chain.
    #[arg(long)]
    mdp_spec: String,
    /// Threshold; defaults to the spec's own.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    /// Directory for the alternation trace CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_expert(path: &Path, env: &Env) -> Result<Vec<Trajectory>> {
    let data = read_trajectories(path)?;
    env.validate_dataset(&data)
        .with_context(|| format!("{} does not fit {}", path.display(), env.id()))?;
    Ok(data)
}

fn gen_expert(args: &GenExpertArgs) -> Result<()> {
    let cfg = config::build(&args.overrides)?;
    let env = Env::new(cfg.env.clone())?;
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&cfg.ppo)?)?;
    let mut rng = rng_from_seed(args.seed);
    let (data, policy, log) = generate_expert(&env, &cfg.ppo, args.count, &mut rng)?;
    write_trajectories(&args.out.join("expert.jsonl"), &data)?;
    log.write_csv(&args.out.join("training.csv"))?;
    policy.save_json(&args.out.join("policy.json"))?;
    let features = env.dataset_features(&data);
    let truth = TrueConstraint(&env);
    let j: f64 = features
        .iter()
        .map(|t| icl_core::adjust::cgamma(t, &truth, cfg.gamma))
        .sum::<icl_core::Result<f64>>()?
        / features.len() as f64;
    let reward = data.iter().map(Trajectory::total_reward).sum::<f64>() / data.len() as f64;
    println!(
        "wrote {} trajectories to {}: mean reward {reward:.3}, true constraint value {j:.3} (beta {})",
        data.len(),
        args.out.join("expert.jsonl").display(),
        cfg.beta
    );
    Ok(())
}

fn run_icl(args: &IclArgs, variant: Variant) -> Result<()> {
    let cfg = config::build(&args.overrides)?;
    let env = Env::new(cfg.env.clone())?;
    let expert = load_expert(&args.expert, &env)?;
    let seeds = match (&args.seeds, args.seed) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(s)) => vec![s],
        (None, None) => vec![cfg.seed],
    };
    let info = RunInfo {
        variant,
        expert: args.expert.clone(),
    };
    let runs = sweep(&cfg, &seeds, &expert, &info, &args.out, args.workers)?;
    for (seed, r) in seeds.iter().zip(&runs) {
        let last = r.records.last();
        println!(
            "seed {seed}: {} iterations, final cmse {}, final nad {}",
            r.records.len(),
            last.and_then(|x| x.cmse).map_or("n/a".into(), |v| format!("{v:.4}")),
            last.map_or("n/a".into(), |x| format!("{:.4}", x.nad)),
        );
    }
    Ok(())
}

fn metrics(args: &MetricsArgs) -> Result<()> {
    let env = Env::new(args.env.parse().expect("EnvId parsing is infallible"))?;
    let expert = load_expert(&args.expert, &env)?;
    if let Some(agent) = &args.agent {
        let agent = load_expert(agent, &env)?;
        println!("nad {:.6}", nad(&expert, &agent, &env)?);
    }
    if let Some(path) = &args.constraint {
        if !env.has_true_constraint() {
            bail!("{} has no true constraint to score against", env.id());
        }
        let c = ConstraintFn::load_json(path)?;
        println!("cmse {:.6}", cmse(&c, &env)?);
    }
    if args.agent.is_none() && args.constraint.is_none() {
        println!("nad {:.6}", nad(&expert, &expert, &env)?);
    }
    Ok(())
}

fn oracle(args: &OracleArgs) -> Result<()> {
    let mdp = if args.mdp_spec == "chain" {
        TabularMdp::chain()
    } else {
        TabularMdp::load(Path::new(&args.mdp_spec))?
    };
    let c_true = mdp.flat_true_constraint()?;
    let beta = match args.beta.or(mdp.beta) {
        Some(b) => b,
        None => bail!("no threshold: pass --beta or set beta in the spec"),
    };
    let res = alternate(&mdp, &c_true, beta, args.max_iter)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        res.write_trace_csv(&dir.join("trace.csv"))?;
    }
    let status = if res.converged { "converged" } else { "not converged" };
    let distance = res
        .expert_distance()
        .map_or("n/a".to_string(), |d| format!("{d:.3e}"));
    println!(
        "{status} after {} iterations, {} policies, occupancy distance to expert {distance}",
        res.trace.len(),
        res.policies.len()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::GenExpert(a) => gen_expert(a),
        Command::Icl(a) => run_icl(a, Variant::Full),
        Command::Ablate(a) => run_icl(&a.run, a.variant),
        Command::Metrics(a) => metrics(a),
        Command::Oracle(a) => oracle(a),
    }
}
