//! Off-policy value estimators evaluated in [`Taylor2`] arithmetic.
//!
//! Every estimator is a function of one behavior trajectory and the target
//! parameters; its gradient and Hessian with respect to `theta` come out of
//! the arithmetic. [`dr_derivatives_analytic`] is an independent closed-form
//! implementation of the doubly-robust derivatives.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_fold_chunks, Exec};
use crate::mdp::{policy_probs, PolicyParams, PolicyTable, TabularMdp, Trajectory};
use crate::oracle::{exact_q_table, taylor2_policy};
use crate::rng::{substream, TAG_ESTIMATOR};
use crate::taylor2::{Dim, Taylor2};

pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_RHO_BAR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimatorKind {
    StepIs,
    Dr,
    TruncatedDr { rho_bar: f64 },
    Taypo { order: usize },
    SubsampledTaypo { order: usize, num_chains: usize },
    Mixture { beta: f64 },
}

impl EstimatorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EstimatorKind::TruncatedDr { rho_bar } if !(rho_bar > 0.0) => Err(
                Error::InvalidArgument(format!("rho_bar must be positive, got {rho_bar}")),
            ),
            EstimatorKind::Taypo { order } if order > 2 => Err(Error::UnsupportedOrder(order)),
            EstimatorKind::SubsampledTaypo { order, num_chains }
                if order == 0 || num_chains == 0 =>
            {
                Err(Error::InvalidArgument(
                    "sub-sampled TayPO needs order >= 1 and at least one chain".into(),
                ))
            }
            EstimatorKind::Mixture { beta } if !(0.0..=1.0).contains(&beta) => Err(
                Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")),
            ),
            _ => Ok(()),
        }
    }

    /// Replaces the truncation level and mixture weight where they apply.
    pub fn with_params(self, rho_bar: Option<f64>, beta: Option<f64>) -> Self {
        match self {
            EstimatorKind::TruncatedDr { rho_bar: r } => EstimatorKind::TruncatedDr {
                rho_bar: rho_bar.unwrap_or(r),
            },
            EstimatorKind::Mixture { beta: b } => EstimatorKind::Mixture {
                beta: beta.unwrap_or(b),
            },
            other => other,
        }
    }

    /// Short name used in CSV output and on the command line.
    pub fn label(&self) -> String {
        match self {
            EstimatorKind::StepIs => "step-is".into(),
            EstimatorKind::Dr => "dr".into(),
            EstimatorKind::TruncatedDr { .. } => "truncated-dr".into(),
            EstimatorKind::Taypo { order } => format!("taypo-{order}"),
            EstimatorKind::SubsampledTaypo { order, .. } => format!("taypo-sub-{order}"),
            EstimatorKind::Mixture { .. } => "mixture".into(),
        }
    }

    pub fn is_randomized(&self) -> bool {
        matches!(self, EstimatorKind::SubsampledTaypo { .. })
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    /// Parses `step-is`, `dr`, `truncated-dr`, `taypo-K`, `taypo-sub-K` or
    /// `mixture`, with default truncation level, mixture weight and one chain.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let order = |rest: &str| {
            rest.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad TayPO order in '{s}'")))
        };
        let kind = match s.as_str() {
            "step-is" | "is" => EstimatorKind::StepIs,
            "dr" => EstimatorKind::Dr,
            "truncated-dr" => EstimatorKind::TruncatedDr {
                rho_bar: DEFAULT_RHO_BAR,
            },
            "mixture" => EstimatorKind::Mixture { beta: DEFAULT_BETA },
            _ => {
                if let Some(rest) = s.strip_prefix("taypo-sub-") {
                    EstimatorKind::SubsampledTaypo {
                        order: order(rest)?,
                        num_chains: 1,
                    }
                } else if let Some(rest) = s.strip_prefix("taypo-") {
                    EstimatorKind::Taypo {
                        order: order(rest)?,
                    }
                } else {
                    return Err(Error::InvalidArgument(format!("unknown estimator '{s}'")));
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// A fixed `Q[x][a]` table, flattened x-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTable {
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl CriticTable {
    pub fn new(num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_states * num_actions {
            return Err(Error::InvalidArgument(format!(
                "critic has {} entries, expected {}",
                values.len(),
                num_states * num_actions
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "critic entries must be finite".into(),
            ));
        }
        Ok(CriticTable {
            num_states,
            num_actions,
            values,
        })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        CriticTable {
            num_states,
            num_actions,
            values: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.num_actions + action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.num_actions..(state + 1) * self.num_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `sum_a Q(x, a) p(a)`.
    pub fn expected(&self, state: usize, probs: &[f64]) -> f64 {
        self.row(state).iter().zip(probs).map(|(q, p)| q * p).sum()
    }
}

/// Where the critic comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CriticSpec {
    Zero,
    /// Finite-horizon `Q^mu_t` from exact dynamic programming.
    #[default]
    ExactQMu,
    /// Finite-horizon `Q^{pi_theta}_t`, held fixed in `theta`.
    ExactQPi,
    Custom(CriticTable),
}

impl CriticSpec {
    /// The critic table at the first step.
    pub fn resolve(
        &self,
        mdp: &TabularMdp,
        theta: &PolicyParams,
        behavior: &PolicyTable,
        goal: Option<usize>,
    ) -> Result<CriticTable> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        match self {
            CriticSpec::Zero => Ok(CriticTable::zeros(ns, na)),
            CriticSpec::ExactQMu => {
                CriticTable::new(ns, na, exact_q_table(mdp, behavior, goal)?.q_at(0).to_vec())
            }
            CriticSpec::ExactQPi => CriticTable::new(
                ns,
                na,
                exact_q_table(mdp, &theta.to_table(), goal)?
                    .q_at(0)
                    .to_vec(),
            ),
            CriticSpec::Custom(table) => {
                if table.num_states != ns || table.num_actions != na {
                    return Err(Error::InvalidArgument(
                        "custom critic shape does not match the MDP".into(),
                    ));
                }
                Ok(table.clone())
            }
        }
    }

    /// Per-time critic tables. The exact critics give `Q_t` for
    /// `t = 0..T-1` followed by the zero table at the horizon; the others a
    /// single table used at every step.
    pub fn resolve_by_time(
        &self,
        mdp: &TabularMdp,
        theta: &PolicyParams,
        behavior: &PolicyTable,
        goal: Option<usize>,
    ) -> Result<Vec<CriticTable>> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let q = match self {
            CriticSpec::ExactQMu => exact_q_table(mdp, behavior, goal)?,
            CriticSpec::ExactQPi => exact_q_table(mdp, &theta.to_table(), goal)?,
            other => return Ok(vec![other.resolve(mdp, theta, behavior, goal)?]),
        };
        let mut tables = (0..q.horizon())
            .map(|t| CriticTable::new(ns, na, q.q_at(t).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        tables.push(CriticTable::zeros(ns, na));
        Ok(tables)
    }

    pub fn label(&self) -> &'static str {
        match self {
            CriticSpec::Zero => "zero",
            CriticSpec::ExactQMu => "exact-q-mu",
            CriticSpec::ExactQPi => "exact-q-pi",
            CriticSpec::Custom(_) => "custom",
        }
    }
}

impl FromStr for CriticSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "zero" => Ok(CriticSpec::Zero),
            "exact-q-mu" | "q-mu" => Ok(CriticSpec::ExactQMu),
            "exact-q-pi" | "q-pi" => Ok(CriticSpec::ExactQPi),
            other => Err(Error::InvalidArgument(format!(
                "unknown critic '{other}' (custom tables are loaded from a config file)"
            ))),
        }
    }
}

/// Where the TayPO estimators take `Q^mu(x_t, a_t)` from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaypoQ {
    /// Discounted tail return of the trajectory (plus the terminal bootstrap).
    #[default]
    Returns,
    /// The critic at step `t` evaluated at `(x_t, a_t)`. The exact `Q^mu`
    /// critic makes each increment's factor its own conditional expectation.
    Critic,
    /// As `Critic`, minus the state baseline `sum_b mu(b|x_t) Q_t(x_t, b)`.
    Advantage,
}

impl TaypoQ {
    pub fn label(&self) -> &'static str {
        match self {
            TaypoQ::Returns => "returns",
            TaypoQ::Critic => "critic",
            TaypoQ::Advantage => "advantage",
        }
    }
}

impl FromStr for TaypoQ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "returns" => Ok(TaypoQ::Returns),
            "critic" => Ok(TaypoQ::Critic),
            "advantage" => Ok(TaypoQ::Advantage),
            other => Err(Error::InvalidArgument(format!(
                "unknown TayPO Q source '{other}' (expected returns, critic or advantage)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    #[serde(flatten)]
    pub kind: EstimatorKind,
    #[serde(default)]
    pub critic: CriticSpec,
    /// Bootstrap the final state with the critic instead of a zero tail.
    #[serde(default)]
    pub bootstrap_terminal: bool,
    #[serde(default)]
    pub taypo_q: TaypoQ,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, critic: CriticSpec) -> Self {
        EstimatorConfig {
            kind,
            critic,
            bootstrap_terminal: false,
            taypo_q: TaypoQ::Returns,
        }
    }
}

/// Everything an estimator needs besides the trajectory: target action
/// probabilities in Taylor2 form, the critic and `Q(x, pi_theta(x))`.
///
/// The critic may be time-indexed: step `t` reads table `t`, and steps past
/// the last table reuse it.
#[derive(Debug, Clone)]
pub struct EvalContext {
    dim: Dim,
    num_actions: usize,
    target: Vec<Taylor2>,
    target_values: Vec<f64>,
    critics: Vec<CriticTable>,
    /// `Q_t(x, pi_theta(x))` per table and state.
    critic_pi: Vec<Vec<Taylor2>>,
    /// `Q_t(x, mu(x))` per table and state, when the behavior is known.
    critic_mu: Option<Vec<Vec<f64>>>,
    gamma: f64,
    bootstrap_terminal: bool,
    taypo_q: TaypoQ,
}

impl EvalContext {
    pub fn new(
        theta: &PolicyParams,
        critic: CriticTable,
        behavior: Option<&PolicyTable>,
        gamma: f64,
        bootstrap_terminal: bool,
    ) -> Result<Self> {
        Self::time_indexed(theta, vec![critic], behavior, gamma, bootstrap_terminal)
    }

    /// A context whose critic at step `t` is `critics[min(t, len - 1)]`.
    pub fn time_indexed(
        theta: &PolicyParams,
        critics: Vec<CriticTable>,
        behavior: Option<&PolicyTable>,
        gamma: f64,
        bootstrap_terminal: bool,
    ) -> Result<Self> {
        let (ns, na) = (theta.num_states(), theta.num_actions());
        if critics.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one critic table is needed".into(),
            ));
        }
        if critics
            .iter()
            .any(|c| c.num_states != ns || c.num_actions != na)
        {
            return Err(Error::InvalidArgument(
                "critic shape does not match the policy".into(),
            ));
        }
        let dim = Dim::new(theta.dim())?;
        let target = taylor2_policy(theta);
        let target_values = target.iter().map(Taylor2::value).collect();
        let critic_pi = critics
            .iter()
            .map(|critic| {
                (0..ns)
                    .map(|x| {
                        let mut acc = Taylor2::constant(0.0, dim);
                        for a in 0..na {
                            acc.axpy(critic.get(x, a), &target[x * na + a]);
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        let critic_mu = behavior.map(|mu| {
            critics
                .iter()
                .map(|c| (0..ns).map(|x| c.expected(x, mu.row(x))).collect())
                .collect()
        });
        Ok(EvalContext {
            dim,
            num_actions: na,
            target,
            target_values,
            critics,
            critic_pi,
            critic_mu,
            gamma,
            bootstrap_terminal,
            taypo_q: TaypoQ::Returns,
        })
    }

    /// Chooses the `Q^mu` source of the TayPO estimators.
    pub fn with_taypo_q(mut self, source: TaypoQ) -> Result<Self> {
        if source == TaypoQ::Advantage && self.critic_mu.is_none() {
            return Err(Error::InvalidArgument(
                "the advantage source needs the behavior policy".into(),
            ));
        }
        self.taypo_q = source;
        Ok(self)
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The critic at the first step.
    pub fn critic(&self) -> &CriticTable {
        &self.critics[0]
    }

    pub fn critic_at(&self, t: usize) -> &CriticTable {
        &self.critics[self.table_index(t)]
    }

    pub fn target_prob(&self, state: usize, action: usize) -> &Taylor2 {
        &self.target[state * self.num_actions + action]
    }

    fn table_index(&self, t: usize) -> usize {
        t.min(self.critics.len() - 1)
    }

    fn critic_pi_at(&self, t: usize, state: usize) -> &Taylor2 {
        &self.critic_pi[self.table_index(t)][state]
    }

    fn critic_mu_at(&self, t: usize, state: usize) -> f64 {
        self.critic_mu
            .as_ref()
            .map_or(0.0, |m| m[self.table_index(t)][state])
    }

    fn zero(&self) -> Taylor2 {
        Taylor2::constant(0.0, self.dim)
    }

    fn terminal_pi(&self, traj: &Trajectory) -> Taylor2 {
        if self.bootstrap_terminal {
            self.critic_pi_at(traj.len(), traj.final_state).clone()
        } else {
            self.zero()
        }
    }

    /// The order-0 term and the `Q^mu(x_t, a_t)` factors (less the state
    /// baseline for [`TaypoQ::Advantage`]) of the TayPO increments.
    ///
    /// Subtracting a state baseline keeps every increment's expectation, and
    /// that of all its derivatives, because `E_mu[rho_t - 1 | x_t] = 0` for
    /// any target.
    fn taypo_inputs(&self, traj: &Trajectory) -> (f64, Vec<f64>) {
        let mut q: Vec<f64> = match self.taypo_q {
            TaypoQ::Returns => self.tail_returns(traj),
            TaypoQ::Critic | TaypoQ::Advantage => traj
                .steps
                .iter()
                .enumerate()
                .map(|(t, s)| self.critic_at(t).get(s.state, s.action))
                .collect(),
        };
        let base = q.first().copied().unwrap_or(0.0);
        if self.taypo_q == TaypoQ::Advantage {
            for (t, (qt, s)) in q.iter_mut().zip(&traj.steps).enumerate() {
                *qt -= self.critic_mu_at(t, s.state);
            }
        }
        (base, q)
    }

    /// Tail returns `Q^mu_hat(x_t, a_t)` for every `t`.
    fn tail_returns(&self, traj: &Trajectory) -> Vec<f64> {
        let mut q = vec![0.0; traj.len()];
        let mut acc = if self.bootstrap_terminal {
            self.critic_mu_at(traj.len(), traj.final_state)
        } else {
            0.0
        };
        for (t, s) in traj.steps.iter().enumerate().rev() {
            acc = s.reward + self.gamma * acc;
            q[t] = acc;
        }
        q
    }

    fn ratio_value(&self, traj: &Trajectory, t: usize) -> Result<f64> {
        let s = &traj.steps[t];
        check_behavior(traj, t)?;
        Ok(
            self.target_values[s.state * self.num_actions + s.action]
                * (-s.behavior_log_prob).exp(),
        )
    }
}

fn check_behavior(traj: &Trajectory, t: usize) -> Result<()> {
    let s = &traj.steps[t];
    if !s.behavior_log_prob.is_finite() {
        return Err(Error::ZeroBehaviorProbability {
            state: s.state,
            action: s.action,
        });
    }
    Ok(())
}

/// `rho_t = pi_theta(a_t | x_t) / mu(a_t | x_t)` with full derivatives.
pub fn is_ratio(ctx: &EvalContext, traj: &Trajectory, t: usize) -> Result<Taylor2> {
    check_behavior(traj, t)?;
    let s = &traj.steps[t];
    Ok(ctx
        .target_prob(s.state, s.action)
        .scale((-s.behavior_log_prob).exp()))
}

fn ratios(ctx: &EvalContext, traj: &Trajectory) -> Result<Vec<Taylor2>> {
    (0..traj.len()).map(|t| is_ratio(ctx, traj, t)).collect()
}

/// `sum_t gamma^t (prod_{s <= t} rho_s) r_t`.
pub fn eval_step_is(ctx: &EvalContext, traj: &Trajectory) -> Result<Taylor2> {
    let mut weight = Taylor2::constant(1.0, ctx.dim);
    let mut total = ctx.zero();
    let mut discount = 1.0;
    for (t, s) in traj.steps.iter().enumerate() {
        weight = &weight * &is_ratio(ctx, traj, t)?;
        total.axpy(discount * s.reward, &weight);
        discount *= ctx.gamma;
    }
    Ok(total)
}

/// Doubly-robust backward recursion
/// `V_t = Q(x_t, pi(x_t)) + rho_t (r_t + gamma V_{t+1} - Q(x_t, a_t))`.
pub fn eval_dr(ctx: &EvalContext, traj: &Trajectory) -> Result<Taylor2> {
    dr_recursion(ctx, traj, |_, rho| rho)
}

/// [`eval_dr`] with `rho_t` replaced by `min(rho_t, rho_bar)`. When the
/// ratio reaches `rho_bar` (ties included) the constant branch is taken and
/// contributes no derivative.
pub fn eval_dr_truncated(ctx: &EvalContext, traj: &Trajectory, rho_bar: f64) -> Result<Taylor2> {
    if !(rho_bar > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "rho_bar must be positive, got {rho_bar}"
        )));
    }
    let dim = ctx.dim;
    dr_recursion(ctx, traj, move |_, rho| {
        if rho.value() >= rho_bar {
            Taylor2::constant(rho_bar, dim)
        } else {
            rho
        }
    })
}

fn dr_recursion(
    ctx: &EvalContext,
    traj: &Trajectory,
    weight: impl Fn(usize, Taylor2) -> Taylor2,
) -> Result<Taylor2> {
    let mut v = ctx.terminal_pi(traj);
    for (t, s) in traj.steps.iter().enumerate().rev() {
        let rho = weight(t, is_ratio(ctx, traj, t)?);
        let target = v
            .scale(ctx.gamma)
            .add_scalar(s.reward - ctx.critic_at(t).get(s.state, s.action));
        v = ctx.critic_pi_at(t, s.state) + &(&rho * &target);
    }
    Ok(v)
}

/// Tail returns and the pieces of the order-1 and order-2 expansions.
struct TaypoTerms {
    base: f64,
    first: Taylor2,
    second: Option<Taylor2>,
}

fn taypo_terms(ctx: &EvalContext, traj: &Trajectory, want_second: bool) -> Result<TaypoTerms> {
    let (base, q) = ctx.taypo_inputs(traj);
    let shifted: Vec<Taylor2> = ratios(ctx, traj)?
        .into_iter()
        .map(|r| r.add_scalar(-1.0))
        .collect();
    let mut first = ctx.zero();
    let mut second = want_second.then(|| ctx.zero());
    // suffix = sum_{s > t} gamma^s (rho_s - 1) Q_s
    let mut suffix = ctx.zero();
    let mut discount = ctx.gamma.powi(traj.len() as i32);
    for t in (0..traj.len()).rev() {
        discount /= ctx.gamma;
        if let Some(second) = second.as_mut() {
            *second += &(&shifted[t] * &suffix);
        }
        let term = shifted[t].scale(discount * q[t]);
        first += &term;
        suffix += &term;
    }
    Ok(TaypoTerms {
        base,
        first,
        second,
    })
}

/// TayPO-K for `K` in `{0, 1, 2}`: the tail return at `t = 0` plus the
/// first `K` sampled Taylor increments.
pub fn eval_taypo(ctx: &EvalContext, traj: &Trajectory, order: usize) -> Result<Taylor2> {
    if order > 2 {
        return Err(Error::UnsupportedOrder(order));
    }
    if order == 0 {
        return Ok(Taylor2::constant(ctx.taypo_inputs(traj).0, ctx.dim));
    }
    let terms = taypo_terms(ctx, traj, order == 2)?;
    let mut v = terms.first.add_scalar(terms.base);
    if let Some(second) = terms.second {
        v += &second;
    }
    Ok(v)
}

/// `(1 - beta) TayPO-1 + beta TayPO-2`.
pub fn eval_mixture(ctx: &EvalContext, traj: &Trajectory, beta: f64) -> Result<Taylor2> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "beta must lie in [0, 1], got {beta}"
        )));
    }
    let terms = taypo_terms(ctx, traj, true)?;
    let mut v = terms.first.add_scalar(terms.base);
    v.axpy(beta, &terms.second.expect("second-order term requested"));
    Ok(v)
}

/// Geometric draw `P(j) = (1 - gamma) gamma^j`.
fn geometric<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    // 1 - u lies in (0, 1]
    let j = ((1.0 - u).ln() / gamma.ln()).floor();
    if j.is_finite() && j < usize::MAX as f64 {
        j as usize
    } else {
        usize::MAX
    }
}

/// One draw of the unbiased increment estimates `U_1 .. U_K` along `traj`.
///
/// Time indices are drawn as `t_1 ~ Geom` and `t_{i+1} = t_i + 1 + Geom`,
/// with `P(j) = (1 - gamma) gamma^j`. The prefix `t_1 < .. < t_k` is weighted by
/// `gamma^{k-1} / (1 - gamma)^k` so that its expectation is `U_k`; chains
/// running past the horizon contribute zero.
fn subsampled_increments<R: Rng + ?Sized>(
    ctx: &EvalContext,
    traj: &Trajectory,
    tail: &[f64],
    order: usize,
    rng: &mut R,
) -> Result<Vec<Taylor2>> {
    let gamma = ctx.gamma;
    let mut out = Vec::with_capacity(order);
    let mut product = Taylor2::constant(1.0, ctx.dim);
    let mut t = geometric(gamma, rng);
    for k in 1..=order {
        if t >= traj.len() {
            out.resize(order, ctx.zero());
            break;
        }
        product = &product * &is_ratio(ctx, traj, t)?.add_scalar(-1.0);
        let weight = gamma.powi(k as i32 - 1) / (1.0 - gamma).powi(k as i32);
        out.push(product.scale(weight * tail[t]));
        if k < order {
            t = t.saturating_add(1).saturating_add(geometric(gamma, rng));
        }
    }
    Ok(out)
}

/// Sub-sampled TayPO-K on a single trajectory: tail return at `t = 0` plus
/// increment estimates averaged over `num_chains` independent time draws.
pub fn eval_taypo_subsampled_on<R: Rng + ?Sized>(
    ctx: &EvalContext,
    traj: &Trajectory,
    order: usize,
    num_chains: usize,
    rng: &mut R,
) -> Result<Taylor2> {
    if order == 0 || num_chains == 0 {
        return Err(Error::InvalidArgument(
            "sub-sampled TayPO needs order >= 1 and at least one chain".into(),
        ));
    }
    let (base, tail) = ctx.taypo_inputs(traj);
    let mut sum = ctx.zero();
    for _ in 0..num_chains {
        for inc in subsampled_increments(ctx, traj, &tail, order, rng)? {
            sum += &inc;
        }
    }
    let mut v = sum.scale(1.0 / num_chains as f64);
    v = v.add_scalar(base);
    Ok(v)
}

/// Monte-Carlo summary of the sub-sampled TayPO-K estimator over many
/// independent chains, each on a fresh behavior trajectory.
#[derive(Debug, Clone)]
pub struct SubsampledEstimate {
    /// Mean of `V_hat_K = Q_hat(x_0, a_0) + sum_k U_hat_k`.
    pub estimate: Taylor2,
    /// Mean value of each increment `U_hat_1 .. U_hat_K`.
    pub increment_means: Vec<f64>,
    /// Standard error of each entry of `increment_means`.
    pub increment_std_errors: Vec<f64>,
    pub num_chains: usize,
}

/// Runs `num_chains` chains in parallel. Chain `i` draws its trajectory and
/// time indices from the substream `(seed, i)`.
pub fn eval_taypo_subsampled<S>(
    sampler: S,
    ctx: &EvalContext,
    order: usize,
    num_chains: usize,
    seed: u64,
    exec: Exec,
) -> Result<SubsampledEstimate>
where
    S: Fn(&mut dyn RngCore) -> Result<Trajectory> + Sync + Send,
{
    if order == 0 || num_chains == 0 {
        return Err(Error::InvalidArgument(
            "sub-sampled TayPO needs order >= 1 and at least one chain".into(),
        ));
    }
    struct Acc {
        estimate: Taylor2,
        sum: Vec<f64>,
        sum_sq: Vec<f64>,
    }
    let dim = ctx.dim;
    let acc = try_fold_chunks(
        exec,
        num_chains,
        || Acc {
            estimate: Taylor2::constant(0.0, dim),
            sum: vec![0.0; order],
            sum_sq: vec![0.0; order],
        },
        |acc, i| {
            let mut rng = substream(seed, &[TAG_ESTIMATOR, i as u64]);
            let traj = sampler(&mut rng)?;
            let (base, tail) = ctx.taypo_inputs(&traj);
            let incs = subsampled_increments(ctx, &traj, &tail, order, &mut rng)?;
            let mut v = Taylor2::constant(base, dim);
            for (k, inc) in incs.iter().enumerate() {
                acc.sum[k] += inc.value();
                acc.sum_sq[k] += inc.value() * inc.value();
                v += inc;
            }
            acc.estimate += &v;
            Ok::<(), Error>(())
        },
        |acc, part| {
            acc.estimate += &part.estimate;
            for k in 0..order {
                acc.sum[k] += part.sum[k];
                acc.sum_sq[k] += part.sum_sq[k];
            }
        },
    )?;
    let n = num_chains as f64;
    let means: Vec<f64> = acc.sum.iter().map(|s| s / n).collect();
    let std_errors = acc
        .sum_sq
        .iter()
        .zip(&means)
        .map(|(sq, m)| {
            if num_chains < 2 {
                0.0
            } else {
                ((sq - n * m * m).max(0.0) / (n - 1.0) / n).sqrt()
            }
        })
        .collect();
    Ok(SubsampledEstimate {
        estimate: acc.estimate.scale(1.0 / n),
        increment_means: means,
        increment_std_errors: std_errors,
        num_chains,
    })
}

/// Closed-form value, gradient and Hessian of the doubly-robust estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DrDerivatives {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// Backward recursions for the DR derivatives, with `g_t = grad log pi(a_t|x_t)`
/// and `delta_t = r_t + gamma V_{t+1} - Q(x_t, a_t)`:
///
/// ```text
/// grad V_t = grad Q(x_t, pi) + rho_t delta_t g_t + gamma rho_t grad V_{t+1}
/// hess V_t = hess Q(x_t, pi) + rho_t delta_t (hess log pi_t + g_t g_t^T)
///          + gamma rho_t (grad V_{t+1} g_t^T + g_t grad V_{t+1}^T)
///          + gamma rho_t hess V_{t+1}
/// ```
pub fn dr_derivatives_analytic(
    theta: &PolicyParams,
    ctx: &EvalContext,
    traj: &Trajectory,
) -> Result<DrDerivatives> {
    dr_derivatives_analytic_with_cross_sign(theta, ctx, traj, 1.0)
}

/// [`dr_derivatives_analytic`] with the cross terms multiplied by `sign`.
/// Only useful for checking that the validation suite catches a wrong sign.
#[doc(hidden)]
pub fn dr_derivatives_analytic_with_cross_sign(
    theta: &PolicyParams,
    ctx: &EvalContext,
    traj: &Trajectory,
    sign: f64,
) -> Result<DrDerivatives> {
    let d = theta.dim();
    let na = theta.num_actions();
    let probs: Vec<Vec<f64>> = (0..theta.num_states())
        .map(|x| policy_probs(theta, x))
        .collect();

    // Q(x, pi(x)) and its derivatives, nonzero only in the block of x.
    let critic_terms = |t: usize, x: usize| {
        let p = &probs[x];
        let q = ctx.critic_at(t).row(x);
        let base = x * na;
        let mean: f64 = p.iter().zip(q).map(|(p, q)| p * q).sum();
        let mut grad = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for a in 0..na {
            grad[base + a] = p[a] * (q[a] - mean);
        }
        for a in 0..na {
            for i in 0..na {
                let ei = if i == a { 1.0 } else { 0.0 };
                for j in 0..na {
                    let ej = if j == a { 1.0 } else { 0.0 };
                    let fisher = if i == j { p[i] } else { 0.0 } - p[i] * p[j];
                    hess[(base + i, base + j)] +=
                        q[a] * p[a] * ((ei - p[i]) * (ej - p[j]) - fisher);
                }
            }
        }
        (mean, grad, hess)
    };

    let (mut value, mut grad, mut hess) = if ctx.bootstrap_terminal {
        critic_terms(traj.len(), traj.final_state)
    } else {
        (0.0, DVector::zeros(d), DMatrix::zeros(d, d))
    };
    for (t, s) in traj.steps.iter().enumerate().rev() {
        let x = s.state;
        let p = &probs[x];
        let rho = p[s.action] * (-s.behavior_log_prob).exp();
        check_behavior(traj, t)?;
        let delta = s.reward + ctx.gamma * value - ctx.critic_at(t).get(x, s.action);

        let base = x * na;
        let mut score = DVector::zeros(d);
        let mut score_hess = DMatrix::zeros(d, d);
        for i in 0..na {
            score[base + i] = if i == s.action { 1.0 } else { 0.0 } - p[i];
            for j in 0..na {
                score_hess[(base + i, base + j)] = p[i] * p[j] - if i == j { p[i] } else { 0.0 };
            }
        }

        let (q_pi, q_grad, q_hess) = critic_terms(t, x);
        let cross = &grad * score.transpose();
        let new_hess = q_hess
            + (score_hess + &score * score.transpose()) * (rho * delta)
            + (&cross + cross.transpose()) * (sign * ctx.gamma * rho)
            + &hess * (ctx.gamma * rho);
        let new_grad = q_grad + &score * (rho * delta) + &grad * (ctx.gamma * rho);
        value = q_pi + rho * delta;
        grad = new_grad;
        hess = new_hess;
    }
    Ok(DrDerivatives { value, grad, hess })
}

/// A configured estimator bound to one `(theta, mu, critic)` setting.
#[derive(Debug, Clone)]
pub struct Estimator {
    config: EstimatorConfig,
    ctx: EvalContext,
}

impl Estimator {
    pub fn new(
        config: EstimatorConfig,
        mdp: &TabularMdp,
        theta: &PolicyParams,
        behavior: &PolicyTable,
        goal: Option<usize>,
    ) -> Result<Self> {
        config.kind.validate()?;
        let ctx = EvalContext::time_indexed(
            theta,
            config.critic.resolve_by_time(mdp, theta, behavior, goal)?,
            Some(behavior),
            mdp.gamma(),
            config.bootstrap_terminal,
        )?
        .with_taypo_q(config.taypo_q)?;
        Ok(Estimator { config, ctx })
    }

    pub fn from_context(config: EstimatorConfig, ctx: EvalContext) -> Result<Self> {
        config.kind.validate()?;
        Ok(Estimator { config, ctx })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn context(&self) -> &EvalContext {
        &self.ctx
    }

    pub fn evaluate(&self, traj: &Trajectory, rng: &mut dyn RngCore) -> Result<Taylor2> {
        match self.config.kind {
            EstimatorKind::SubsampledTaypo { order, num_chains } => {
                eval_taypo_subsampled_on(&self.ctx, traj, order, num_chains, rng)
            }
            _ => self.evaluate_deterministic(traj),
        }
    }

    /// Evaluates a non-randomized estimator.
    pub fn evaluate_deterministic(&self, traj: &Trajectory) -> Result<Taylor2> {
        let ctx = &self.ctx;
        match self.config.kind {
            EstimatorKind::StepIs => eval_step_is(ctx, traj),
            EstimatorKind::Dr => eval_dr(ctx, traj),
            EstimatorKind::TruncatedDr { rho_bar } => eval_dr_truncated(ctx, traj, rho_bar),
            EstimatorKind::Taypo { order } => eval_taypo(ctx, traj, order),
            EstimatorKind::Mixture { beta } => eval_mixture(ctx, traj, beta),
            EstimatorKind::SubsampledTaypo { .. } => Err(Error::InvalidArgument(
                "the sub-sampled TayPO estimator needs a random source".into(),
            )),
        }
    }

    /// Arithmetic mean over `trajs` in index order. Randomized estimators
    /// draw from the substream `(seed, i)` for trajectory `i`.
    pub fn mean_estimate(&self, trajs: &[Trajectory], seed: u64, exec: Exec) -> Result<Taylor2> {
        if trajs.is_empty() {
            return Err(Error::InvalidArgument("no trajectories to average".into()));
        }
        let dim = self.ctx.dim;
        let sum = try_fold_chunks(
            exec,
            trajs.len(),
            || Taylor2::constant(0.0, dim),
            |acc, i| {
                let mut rng = substream(seed, &[TAG_ESTIMATOR, i as u64]);
                *acc += &self.evaluate(&trajs[i], &mut rng)?;
                Ok::<(), Error>(())
            },
            |acc, part| *acc += &part,
        )?;
        Ok(sum.scale(1.0 / trajs.len() as f64))
    }

    /// Value of the IS ratio along `traj` at step `t`, without derivatives.
    pub fn ratio_value(&self, traj: &Trajectory, t: usize) -> Result<f64> {
        self.ctx.ratio_value(traj, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Step;
    use approx::assert_abs_diff_eq;

    fn two_action_theta(p0: f64) -> PolicyParams {
        PolicyParams::from_policy(&PolicyTable::new(1, 2, vec![p0, 1.0 - p0]).unwrap()).unwrap()
    }

    fn traj(steps: &[(usize, usize, f64, f64)]) -> Trajectory {
        Trajectory {
            steps: steps
                .iter()
                .map(|&(state, action, reward, mu)| Step {
                    state,
                    action,
                    reward,
                    behavior_log_prob: f64::ln(mu),
                })
                .collect(),
            final_state: 0,
        }
    }

    fn ctx(theta: &PolicyParams, gamma: f64) -> EvalContext {
        EvalContext::new(
            theta,
            CriticTable::zeros(theta.num_states(), theta.num_actions()),
            None,
            gamma,
            false,
        )
        .unwrap()
    }

    #[test]
    fn ratio_examples() {
        let theta = two_action_theta(0.75);
        let c = ctx(&theta, 0.9);
        let tr = traj(&[(0, 0, 0.0, 0.25)]);
        let rho = is_ratio(&c, &tr, 0).unwrap();
        assert_abs_diff_eq!(rho.value(), 3.0, epsilon = 1e-12);
        // grad rho = rho * (e_a - pi)
        assert_abs_diff_eq!(rho.grad()[0], 3.0 * 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.grad()[1], -3.0 * 0.25, epsilon = 1e-12);

        let on = traj(&[(0, 1, 0.0, 0.25)]);
        let rho = is_ratio(&c, &on, 0).unwrap();
        assert_abs_diff_eq!(rho.value(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho.grad()[1], 0.75, epsilon = 1e-12);

        let bad = traj(&[(0, 0, 0.0, 0.0)]);
        assert!(matches!(
            is_ratio(&c, &bad, 0),
            Err(Error::ZeroBehaviorProbability {
                state: 0,
                action: 0
            })
        ));
    }

    #[test]
    fn step_is_examples() {
        let theta = two_action_theta(0.5);
        let c = ctx(&theta, 0.8);
        let on = traj(&[(0, 0, 1.0, 0.5), (0, 1, 1.0, 0.5)]);
        assert_abs_diff_eq!(eval_step_is(&c, &on).unwrap().value(), 1.8, epsilon = 1e-12);

        let one = traj(&[(0, 0, 1.0, 0.25)]);
        assert_abs_diff_eq!(
            eval_step_is(&c, &one).unwrap().value(),
            2.0,
            epsilon = 1e-12
        );

        let zero = traj(&[(0, 0, 0.0, 0.3), (0, 1, 0.0, 0.7)]);
        let v = eval_step_is(&c, &zero).unwrap();
        assert_eq!(v.value(), 0.0);
        assert!(v.grad().iter().chain(v.packed_hessian()).all(|&g| g == 0.0));
    }

    #[test]
    fn dr_with_zero_critic_is_step_is() {
        let theta = PolicyParams::new(2, 2, vec![0.3, -0.4, 1.0, 0.2]).unwrap();
        let c = ctx(&theta, 0.7);
        let tr = traj(&[(0, 1, 0.5, 0.4), (1, 0, -1.0, 0.2), (0, 0, 2.0, 0.9)]);
        let a = eval_dr(&c, &tr).unwrap();
        let b = eval_step_is(&c, &tr).unwrap();
        assert_abs_diff_eq!(a.value(), b.value(), epsilon = 1e-12);
        for (x, y) in a.grad().iter().zip(b.grad()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        for (x, y) in a.packed_hessian().iter().zip(b.packed_hessian()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let inf = eval_dr_truncated(&c, &tr, f64::INFINITY).unwrap();
        assert_eq!(inf, a);
    }

    #[test]
    fn taypo_hand_example() {
        // rho = [2, 0.5] from pi = 0.5 and mu = [0.25, 1.0]
        let theta = two_action_theta(0.5);
        let c = ctx(&theta, 0.5);
        let tr = traj(&[(0, 0, 1.0, 0.25), (0, 1, 1.0, 1.0)]);
        assert_abs_diff_eq!(
            eval_taypo(&c, &tr, 0).unwrap().value(),
            1.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            eval_taypo(&c, &tr, 1).unwrap().value(),
            2.75,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            eval_taypo(&c, &tr, 2).unwrap().value(),
            2.5,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            eval_mixture(&c, &tr, 0.3).unwrap().value(),
            0.7 * 2.75 + 0.3 * 2.5,
            epsilon = 1e-12
        );
        assert_eq!(
            eval_mixture(&c, &tr, 0.0).unwrap(),
            eval_taypo(&c, &tr, 1).unwrap()
        );
        assert!(matches!(
            eval_taypo(&c, &tr, 3),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn analytic_one_step_score_function() {
        let theta = two_action_theta(0.6);
        let c = ctx(&theta, 0.9);
        let tr = traj(&[(0, 0, 2.0, 0.5)]);
        let d = dr_derivatives_analytic(&theta, &c, &tr).unwrap();
        let rho = 0.6 / 0.5;
        assert_abs_diff_eq!(d.value, rho * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.grad[0], rho * 2.0 * 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(d.grad[1], -rho * 2.0 * 0.4, epsilon = 1e-12);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("dr".parse::<EstimatorKind>().unwrap(), EstimatorKind::Dr);
        assert_eq!(
            "TayPO-2".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::Taypo { order: 2 }
        );
        assert_eq!(
            "taypo-sub-3".parse::<EstimatorKind>().unwrap(),
            EstimatorKind::SubsampledTaypo {
                order: 3,
                num_chains: 1
            }
        );
        assert!(matches!(
            "taypo-5".parse::<EstimatorKind>(),
            Err(Error::UnsupportedOrder(5))
        ));
        assert!("nope".parse::<EstimatorKind>().is_err());
        let k = "mixture"
            .parse::<EstimatorKind>()
            .unwrap()
            .with_params(None, Some(0.5));
        assert_eq!(k, EstimatorKind::Mixture { beta: 0.5 });
        let json = serde_json::to_string(&EstimatorConfig::new(k, CriticSpec::Zero)).unwrap();
        let back: EstimatorConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.kind, k);
    }
}
