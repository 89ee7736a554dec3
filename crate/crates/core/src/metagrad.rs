//! MAML meta-gradients for tabular softmax policies.
//!
//! The meta-objective of one task is `F(theta) = V(theta + eta grad V(theta))`.
//! Its gradient is `(I + eta hess V(theta)) grad V(theta')`, estimated here as
//! `v + eta (H v)` with `H` taken from the Taylor2 Hessian of the inner
//! estimate and `v` a policy-gradient estimate at the adapted parameters.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{CriticSpec, Estimator, EstimatorConfig, EstimatorKind};
use crate::exec::{try_fold_chunks, try_map_indexed, Exec};
use crate::mdp::{policy_probs, sample_trajectory, PolicyParams, TabularMdp, Trajectory};
use crate::oracle::{exact_q_table, exact_value_dp};
use crate::rng::{substream, substream_seed, TAG_INNER, TAG_OUTER, TAG_TASK};

/// Whether a quantity is estimated from samples or taken from the exact oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    #[default]
    Sampled,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct MetaModes {
    /// Gradient used for the adaptation step `theta' = theta + eta g`.
    pub inner_update: Source,
    /// Hessian in the chain-rule correction.
    pub hessian: Source,
    /// Policy gradient at the adapted parameters.
    pub outer_gradient: Source,
}

impl MetaModes {
    pub fn exact() -> Self {
        MetaModes {
            inner_update: Source::Exact,
            hessian: Source::Exact,
            outer_gradient: Source::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    /// Inner step size.
    pub eta: f64,
    /// Outer learning rate.
    pub alpha: f64,
    pub num_tasks: usize,
    /// Trajectories sampled per task for the inner estimate.
    pub trajectories_per_task: usize,
    /// Trajectories sampled per task for the outer policy gradient; defaults
    /// to `trajectories_per_task`.
    #[serde(default)]
    pub outer_trajectories: Option<usize>,
    pub inner_estimator: EstimatorConfig,
    pub seed: u64,
    #[serde(default)]
    pub modes: MetaModes,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 0.1,
            alpha: 0.1,
            num_tasks: 4,
            trajectories_per_task: 16,
            outer_trajectories: None,
            inner_estimator: EstimatorConfig::new(EstimatorKind::Dr, CriticSpec::ExactQMu),
            seed: 0,
            modes: MetaModes::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta must be >= 0, got {}",
                self.eta
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if self.num_tasks == 0
            || self.trajectories_per_task == 0
            || self.outer_trajectories == Some(0)
        {
            return Err(Error::InvalidArgument(
                "task and trajectory counts must be positive".into(),
            ));
        }
        if self.inner_estimator.kind.is_randomized() {
            return Err(Error::InvalidArgument(
                "the inner estimate must be deterministic given its trajectories".into(),
            ));
        }
        self.inner_estimator.kind.validate()
    }

    fn outer_count(&self) -> usize {
        self.outer_trajectories
            .unwrap_or(self.trajectories_per_task)
    }
}

/// Result of one inner adaptation step.
#[derive(Debug, Clone)]
pub struct InnerUpdate {
    pub adapted: PolicyParams,
    /// Gradient used for the step.
    pub gradient: Vec<f64>,
    /// Mean inner estimate with its derivatives.
    pub estimate: crate::Taylor2,
}

/// `theta' = theta + eta * grad(mean inner estimate)` over on-policy
/// trajectories sampled under `pi_theta`.
pub fn inner_update(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    trajectories: &[Trajectory],
    config: &MetaConfig,
    estimate_seed: u64,
) -> Result<InnerUpdate> {
    let behavior = theta.to_table();
    let est = Estimator::new(config.inner_estimator.clone(), mdp, theta, &behavior, goal)?;
    let estimate = est.mean_estimate(trajectories, estimate_seed, Exec::Sequential)?;
    let gradient = estimate.grad().to_vec();
    let adapted = theta.offset(config.eta, &gradient)?;
    Ok(InnerUpdate {
        adapted,
        gradient,
        estimate,
    })
}

/// Score-function estimate of `grad V` at `theta` with the exact
/// time-indexed advantage `Q^pi_t - V^pi_t` as the weight:
/// `mean over trajectories of sum_t gamma^t grad log pi(a_t|x_t) (Q_t - V_t)`.
pub fn policy_gradient_estimate(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    trajectories: &[Trajectory],
) -> Result<Vec<f64>> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument(
            "no trajectories for the policy gradient".into(),
        ));
    }
    let policy = theta.to_table();
    let q = exact_q_table(mdp, &policy, goal)?;
    let na = theta.num_actions();
    let mut grad = vec![0.0; theta.dim()];
    for traj in trajectories {
        let mut discount = 1.0;
        for (t, s) in traj.steps.iter().enumerate() {
            let adv = q.q(t, s.state, s.action) - q.v(t, s.state);
            let p = policy_probs(theta, s.state);
            for a in 0..na {
                let score = if a == s.action { 1.0 } else { 0.0 } - p[a];
                grad[s.state * na + a] += discount * adv * score;
            }
            discount *= mdp.gamma();
        }
    }
    let n = trajectories.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

fn sample_batch<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let policy = theta.to_table();
    (0..count)
        .map(|_| sample_trajectory(mdp, &policy, goal, rng))
        .collect()
}

/// Meta-gradient of a single task; `task_seed` fixes all of its randomness.
pub fn task_meta_gradient(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    config: &MetaConfig,
    task_seed: u64,
) -> Result<Vec<f64>> {
    let modes = config.modes;
    let needs_sample = modes.inner_update == Source::Sampled || modes.hessian == Source::Sampled;
    let sampled = if needs_sample {
        let mut rng = substream(task_seed, &[TAG_INNER]);
        let trajs = sample_batch(mdp, theta, goal, config.trajectories_per_task, &mut rng)?;
        Some(inner_update(
            mdp,
            theta,
            goal,
            &trajs,
            config,
            substream_seed(task_seed, &[TAG_INNER, 1]),
        )?)
    } else {
        None
    };
    let exact = if modes.inner_update == Source::Exact || modes.hessian == Source::Exact {
        Some(exact_value_dp(mdp, theta, goal)?)
    } else {
        None
    };

    let inner_grad = match (modes.inner_update, &sampled, &exact) {
        (Source::Sampled, Some(s), _) => s.gradient.clone(),
        (Source::Exact, _, Some(e)) => e.grad.clone(),
        _ => unreachable!("inner source computed above"),
    };
    let adapted = theta.offset(config.eta, &inner_grad)?;

    let outer = match modes.outer_gradient {
        Source::Sampled => {
            let mut rng = substream(task_seed, &[TAG_OUTER]);
            let trajs = sample_batch(mdp, &adapted, goal, config.outer_count(), &mut rng)?;
            policy_gradient_estimate(mdp, &adapted, goal, &trajs)?
        }
        Source::Exact => exact_value_dp(mdp, &adapted, goal)?.grad,
    };

    let hv = match (modes.hessian, &sampled, &exact) {
        (Source::Sampled, Some(s), _) => s.estimate.hvp(&outer),
        (Source::Exact, _, Some(e)) => e.hvp(&outer),
        _ => unreachable!("hessian source computed above"),
    };
    Ok(outer
        .iter()
        .zip(&hv)
        .map(|(v, h)| v + config.eta * h)
        .collect())
}

/// Mean meta-gradient over `tasks`, reduced in task order. Task `i` uses the
/// substream `(config.seed, i)`.
pub fn meta_gradient_estimate(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    tasks: &[Option<usize>],
    config: &MetaConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks".into()));
    }
    let d = theta.dim();
    let sum = try_fold_chunks(
        exec,
        tasks.len(),
        || vec![0.0; d],
        |acc, i| {
            let seed = substream_seed(config.seed, &[TAG_TASK, i as u64]);
            let g = task_meta_gradient(mdp, theta, tasks[i], config, seed)?;
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            Ok::<(), Error>(())
        },
        |acc, part| acc.iter_mut().zip(part).for_each(|(a, v)| *a += v),
    )?;
    let n = tasks.len() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

/// `F(theta) = V^{pi_theta'}(x_0, g)` with the exact adaptation
/// `theta' = theta + eta grad V^{pi_theta}(x_0, g)`.
pub fn meta_objective_exact(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    eta: f64,
    goal: Option<usize>,
) -> Result<f64> {
    let inner = exact_value_dp(mdp, theta, goal)?;
    let adapted = theta.offset(eta, &inner.grad)?;
    Ok(exact_value_dp(mdp, &adapted, goal)?.value)
}

/// Exact meta-gradient averaged over `tasks`.
pub fn exact_meta_gradient(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    tasks: &[Option<usize>],
    eta: f64,
) -> Result<Vec<f64>> {
    let config = MetaConfig {
        eta,
        modes: MetaModes::exact(),
        ..MetaConfig::default()
    };
    meta_gradient_estimate(mdp, theta, tasks, &config, Exec::Sequential)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PluginBiasRow {
    pub trajectories_per_task: usize,
    pub num_reps: usize,
    /// `|mean estimate - exact meta-gradient|_2`.
    pub bias_norm: f64,
    /// `sqrt(sum_i se_i^2)` of the Monte-Carlo mean.
    pub std_error_norm: f64,
}

/// Monte-Carlo bias of the single-task meta-gradient estimate for each `B`
/// in `batch_sizes`. Replication `r` at batch size `B` is seeded with
/// `(config.seed, B, r)`.
pub fn plugin_bias_probe(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    config: &MetaConfig,
    batch_sizes: &[usize],
    num_reps: usize,
    exec: Exec,
) -> Result<Vec<PluginBiasRow>> {
    if num_reps < 2 {
        return Err(Error::InvalidArgument(
            "the bias probe needs at least 2 replications".into(),
        ));
    }
    let exact = exact_meta_gradient(mdp, theta, &[goal], config.eta)?;
    let d = theta.dim();
    batch_sizes
        .iter()
        .map(|&b| {
            let cfg = MetaConfig {
                trajectories_per_task: b,
                num_tasks: 1,
                ..config.clone()
            };
            cfg.validate()?;
            let reps = try_map_indexed(exec, num_reps, |r| {
                let seed = substream_seed(config.seed, &[b as u64, r as u64]);
                task_meta_gradient(mdp, theta, goal, &cfg, seed)
            })?;
            let n = num_reps as f64;
            let mut mean = vec![0.0; d];
            for g in &reps {
                mean.iter_mut().zip(g).for_each(|(m, v)| *m += v / n);
            }
            let mut var = vec![0.0; d];
            for g in &reps {
                var.iter_mut()
                    .zip(g.iter().zip(&mean))
                    .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / (n - 1.0));
            }
            Ok(PluginBiasRow {
                trajectories_per_task: b,
                num_reps,
                bias_norm: mean
                    .iter()
                    .zip(&exact)
                    .map(|(m, e)| (m - e) * (m - e))
                    .sum::<f64>()
                    .sqrt(),
                std_error_norm: (var.iter().sum::<f64>() / n).sqrt(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveRecord {
    pub iteration: usize,
    /// Mean exact value over all goals before adaptation.
    pub pre_value: f64,
    /// Mean exact value over all goals after one exact adaptation step.
    pub post_value: f64,
    /// Norm of the meta-gradient applied at this iteration.
    pub grad_norm: f64,
}

/// Outer-loop ascent `theta <- theta + alpha * meta-gradient` from
/// `theta = 0`, with `num_tasks` goals drawn uniformly per iteration.
pub fn meta_train_demo(
    mdp: &TabularMdp,
    config: &MetaConfig,
    num_iterations: usize,
    exec: Exec,
) -> Result<Vec<LearningCurveRecord>> {
    config.validate()?;
    let goals = mdp.num_goals();
    let mut theta = PolicyParams::zeros(mdp.num_states(), mdp.num_actions());
    let mut records = Vec::with_capacity(num_iterations);
    for iteration in 0..num_iterations {
        let (mut pre, mut post) = (0.0, 0.0);
        for g in 0..goals {
            pre += exact_value_dp(mdp, &theta, Some(g))?.value / goals as f64;
            post += meta_objective_exact(mdp, &theta, config.eta, Some(g))? / goals as f64;
        }
        let mut rng = substream(config.seed, &[TAG_TASK, iteration as u64]);
        let tasks: Vec<Option<usize>> = (0..config.num_tasks)
            .map(|_| Some(rng.random_range(0..goals)))
            .collect();
        let iter_config = MetaConfig {
            seed: substream_seed(config.seed, &[iteration as u64]),
            ..config.clone()
        };
        let grad = meta_gradient_estimate(mdp, &theta, &tasks, &iter_config, exec)?;
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        theta = theta.offset(config.alpha, &grad)?;
        records.push(LearningCurveRecord {
            iteration,
            pre_value: pre,
            post_value: post,
            grad_norm,
        });
    }
    Ok(records)
}

pub fn write_learning_curve_csv<W: Write>(records: &[LearningCurveRecord], out: W) -> Result<()> {
    write_rows(records, out)
}

pub fn write_plugin_bias_csv<W: Write>(rows: &[PluginBiasRow], out: W) -> Result<()> {
    write_rows(rows, out)
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
