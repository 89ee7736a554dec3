use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use hessope::estimators::{CriticSpec, EstimatorConfig, EstimatorKind, TaypoQ};
use hessope::harness::{
    default_estimators, gnuplot_template, run_offpolicy_sweep, run_sample_sweep,
    run_validation_suite, ExperimentConfig, SweepReport,
};
use hessope::mdp::{generate_random_mdp, make_offpolicy_pair, RandomMdpParams, TabularMdp};
use hessope::metagrad::{
    meta_train_demo, plugin_bias_probe, write_learning_curve_csv, write_plugin_bias_csv,
    MetaConfig, MetaModes, Source,
};
use hessope::oracle::DEFAULT_ENUMERATION_BUDGET;
use hessope::tmaml::{expected_tmaml_hessian, BaselineTable};
use hessope::{exec, Exec};

#[derive(Parser)]
#[command(
    name = "hessope",
    version,
    about = "Off-policy value, gradient and Hessian estimation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a random Dirichlet MDP and print it as JSON
    GenMdp,
    /// Accuracy of each estimator as the target moves away from the behavior policy
    SweepOffpolicy,
    /// Accuracy of each estimator as a function of the number of trajectories
    SweepSamples,
    /// Exact expected Hessian of the TMAML control-variate objective
    TmamlBias,
    /// Monte-Carlo bias of the plug-in meta-gradient versus batch size
    PluginBias,
    /// Meta-train a softmax policy on a multi-goal bandit
    MetaDemo,
    /// Run the exact enumeration checks and print a JSON report
    Validate,
}

/// Flags shared by all subcommands. Every flag can also be given in the
/// `--config` JSON file under its snake_case name; flags win.
#[derive(clap::Args, Deserialize, Default, Clone)]
#[serde(default, deny_unknown_fields)]
struct Opts {
    /// Master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of states
    #[arg(long, global = true)]
    num_states: Option<usize>,
    /// Number of actions
    #[arg(long, global = true)]
    num_actions: Option<usize>,
    /// Discount factor in [0, 1)
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Episode length
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Dirichlet concentration of the transition rows
    #[arg(long, global = true)]
    alpha_dirichlet: Option<f64>,
    /// Mixture coefficient(s), comma separated; a grid for sweep-offpolicy
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    /// Sample size(s), comma separated; a grid for sweep-samples and plugin-bias
    #[arg(long, global = true, value_delimiter = ',')]
    num_samples: Option<Vec<usize>>,
    /// Number of seeds (sweeps) or replications (plugin-bias)
    #[arg(long, global = true)]
    num_seeds: Option<usize>,
    /// Estimators, comma separated: step-is, dr, truncated-dr, taypo-K, taypo-sub-K, mixture
    #[arg(long, global = true, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Critic: zero, exact-q-mu or exact-q-pi
    #[arg(long, global = true)]
    critic: Option<String>,
    /// Q^mu source inside TayPO: returns, critic or advantage (sweep default)
    #[arg(long, global = true)]
    taypo_q: Option<String>,
    /// Derivative order(s) to score, comma separated (1 = gradient, 2 = Hessian)
    #[arg(long, global = true, value_delimiter = ',')]
    order: Option<Vec<usize>>,
    /// Truncation level of the truncated DR estimator
    #[arg(long, global = true)]
    rho_bar: Option<f64>,
    /// Weight of the second-order term in the mixture estimator
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Inner step size for meta-gradients
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Outer learning rate for meta-demo
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Outer iterations for meta-demo
    #[arg(long, global = true)]
    iterations: Option<usize>,
    /// Number of goals for meta-demo
    #[arg(long, global = true)]
    num_goals: Option<usize>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output file (default: stdout)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file with default values for any of these flags
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

macro_rules! merge {
    ($flags:expr, $file:expr, $($field:ident),*) => {
        Opts { $($field: $flags.$field.or($file.$field),)* config: $flags.config }
    };
}

impl Opts {
    fn merged(self) -> Result<Opts, UsageError> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
        let file: Opts = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
        Ok(merge!(
            self,
            file,
            seed,
            num_states,
            num_actions,
            gamma,
            horizon,
            alpha_dirichlet,
            epsilon,
            num_samples,
            num_seeds,
            estimators,
            critic,
            taypo_q,
            order,
            rho_bar,
            beta,
            eta,
            alpha,
            iterations,
            num_goals,
            workers,
            out
        ))
    }

    fn mdp_params(&self, base: RandomMdpParams) -> RandomMdpParams {
        RandomMdpParams {
            num_states: self.num_states.unwrap_or(base.num_states),
            num_actions: self.num_actions.unwrap_or(base.num_actions),
            dirichlet_alpha: self.alpha_dirichlet.unwrap_or(base.dirichlet_alpha),
            gamma: self.gamma.unwrap_or(base.gamma),
            horizon: self.horizon.unwrap_or(base.horizon),
            ..base
        }
    }

    fn single<T: Copy>(list: &Option<Vec<T>>, name: &str) -> Result<Option<T>, UsageError> {
        match list.as_deref() {
            None => Ok(None),
            Some([v]) => Ok(Some(*v)),
            Some(_) => Err(UsageError(format!("--{name} takes a single value here"))),
        }
    }

    fn critic(&self) -> Result<Option<CriticSpec>, UsageError> {
        self.critic
            .as_deref()
            .map(|c| {
                c.parse::<CriticSpec>()
                    .map_err(|e| UsageError(e.to_string()))
            })
            .transpose()
    }

    fn taypo_q(&self) -> Result<Option<TaypoQ>, UsageError> {
        self.taypo_q
            .as_deref()
            .map(|c| c.parse::<TaypoQ>().map_err(|e| UsageError(e.to_string())))
            .transpose()
    }

    fn estimators(&self) -> Result<Option<Vec<EstimatorKind>>, UsageError> {
        let Some(names) = &self.estimators else {
            return Ok(None);
        };
        names
            .iter()
            .map(|n| {
                n.parse::<EstimatorKind>()
                    .map(|k| k.with_params(self.rho_bar, self.beta))
                    .map_err(|e| UsageError(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }
}

/// Bad flags or configuration; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// The validation suite reported failures; exits with status 1.
#[derive(Debug)]
struct ValidationFailed;

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation failed")
    }
}

impl std::error::Error for ValidationFailed {}

fn is_usage(err: &anyhow::Error) -> bool {
    use hessope::Error as E;
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<E>(),
                Some(
                    E::InvalidArgument(_)
                        | E::InvalidMdp(_)
                        | E::InvalidPolicy(_)
                        | E::UnsupportedOrder(_)
                        | E::EnumerationBudget { .. }
                        | E::Taylor2(_)
                )
            )
    })
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn tiny_defaults() -> RandomMdpParams {
    RandomMdpParams {
        num_states: 3,
        num_actions: 2,
        dirichlet_alpha: 1.0,
        horizon: 4,
        ..RandomMdpParams::default()
    }
}

fn experiment_config(opts: &Opts, sweep_samples: bool) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::default();
    let mut cfg = ExperimentConfig {
        mdp: opts.mdp_params(base.mdp.clone()),
        master_seed: opts.seed.unwrap_or(base.master_seed),
        num_seeds: opts.num_seeds.unwrap_or(base.num_seeds),
        estimators: opts.estimators()?.unwrap_or_else(|| {
            default_estimators()
                .into_iter()
                .map(|k| k.with_params(opts.rho_bar, opts.beta))
                .collect()
        }),
        critic: opts.critic()?.unwrap_or(base.critic.clone()),
        taypo_q: opts.taypo_q()?.unwrap_or(base.taypo_q),
        orders: opts.order.clone().unwrap_or(base.orders.clone()),
        ..base
    };
    if sweep_samples {
        if let Some(grid) = &opts.num_samples {
            cfg.sample_grid = grid.clone();
        }
        if let Some(e) = Opts::single(&opts.epsilon, "epsilon")? {
            cfg.epsilon = e;
        }
    } else {
        if let Some(grid) = &opts.epsilon {
            cfg.epsilon_grid = grid.clone();
        }
        if let Some(n) = Opts::single(&opts.num_samples, "num-samples")? {
            cfg.num_samples = n;
        }
    }
    Ok(cfg)
}

fn write_sweep(report: &SweepReport, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let csv = report.to_csv_string()?;
    emit(out, &csv)?;
    if let Some(p) = out {
        let order = *cfg.orders.last().expect("validated non-empty");
        let script = gnuplot_template(
            &p.display().to_string(),
            report.axis,
            &cfg.estimators,
            order,
        );
        let gp = p.with_extension("gp");
        fs::write(&gp, script).with_context(|| format!("writing {}", gp.display()))?;
    }
    Ok(())
}

fn run(command: Command, opts: Opts) -> Result<()> {
    let out = opts.out.as_deref();
    let seed = opts.seed.unwrap_or(0);
    let exec = Exec::Parallel;
    match command {
        Command::GenMdp => {
            let mdp = generate_random_mdp(&opts.mdp_params(RandomMdpParams::default()), seed)?;
            emit(out, &(mdp.to_json()? + "\n"))
        }
        Command::SweepOffpolicy => {
            let cfg = experiment_config(&opts, false)?;
            let report = run_offpolicy_sweep(&cfg, exec)?;
            write_sweep(&report, &cfg, out)
        }
        Command::SweepSamples => {
            let cfg = experiment_config(&opts, true)?;
            let report = run_sample_sweep(&cfg, exec)?;
            write_sweep(&report, &cfg, out)
        }
        Command::TmamlBias => {
            let params = opts.mdp_params(tiny_defaults());
            let mdp = generate_random_mdp(&params, seed)?;
            let eps = Opts::single(&opts.epsilon, "epsilon")?.unwrap_or(0.5);
            let theta = make_offpolicy_pair(&mdp, eps, seed)?.theta;
            let audit = expected_tmaml_hessian(
                &mdp,
                &theta,
                &BaselineTable::constant(params.num_states, 1.0),
                DEFAULT_ENUMERATION_BUDGET,
                exec,
            )?;
            emit(out, &(serde_json::to_string_pretty(&audit)? + "\n"))
        }
        Command::PluginBias => {
            let params = opts.mdp_params(RandomMdpParams {
                num_states: 2,
                horizon: 3,
                ..tiny_defaults()
            });
            let mdp = generate_random_mdp(&params, seed)?;
            let eps = Opts::single(&opts.epsilon, "epsilon")?.unwrap_or(0.5);
            let theta = make_offpolicy_pair(&mdp, eps, seed)?.theta;
            let config = MetaConfig {
                eta: opts.eta.unwrap_or(1.0),
                inner_estimator: EstimatorConfig::new(
                    EstimatorKind::Dr,
                    opts.critic()?.unwrap_or(CriticSpec::Zero),
                ),
                seed,
                modes: MetaModes {
                    inner_update: Source::Sampled,
                    hessian: Source::Exact,
                    outer_gradient: Source::Exact,
                },
                ..MetaConfig::default()
            };
            let grid = opts
                .num_samples
                .clone()
                .unwrap_or_else(|| vec![1, 4, 16, 64, 256, 1024, 4096]);
            let reps = opts.num_seeds.unwrap_or(200);
            let rows = plugin_bias_probe(&mdp, &theta, None, &config, &grid, reps, exec)?;
            let mut buf = Vec::new();
            write_plugin_bias_csv(&rows, &mut buf)?;
            emit(out, &String::from_utf8(buf)?)
        }
        Command::MetaDemo => {
            let goals = opts.num_goals.unwrap_or(2);
            let mdp = TabularMdp::goal_bandit(
                opts.num_actions.unwrap_or(4),
                goals,
                opts.gamma.unwrap_or(0.8),
                opts.horizon.unwrap_or(2),
            )?;
            let config = MetaConfig {
                eta: opts.eta.unwrap_or(0.5),
                alpha: opts.alpha.unwrap_or(0.5),
                num_tasks: 4,
                trajectories_per_task: Opts::single(&opts.num_samples, "num-samples")?.unwrap_or(8),
                seed,
                ..MetaConfig::default()
            };
            let records = meta_train_demo(&mdp, &config, opts.iterations.unwrap_or(200), exec)?;
            let mut buf = Vec::new();
            write_learning_curve_csv(&records, &mut buf)?;
            emit(out, &String::from_utf8(buf)?)
        }
        Command::Validate => {
            let report = run_validation_suite(exec)?;
            emit(out, &(report.to_json()? + "\n"))?;
            if report.passed {
                Ok(())
            } else {
                Err(ValidationFailed.into())
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let opts = match cli.opts.merged() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let workers = opts.workers;
    let command = cli.command;
    match exec::with_workers(workers, move || run(command, opts)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
