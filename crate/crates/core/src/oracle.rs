//! Exact finite-horizon ground truth.
//!
//! Two independent routes compute `V`, `grad V` and `hess V` at the start
//! state: backward dynamic programming in [`Taylor2`] arithmetic, and
//! brute-force enumeration of every length-`T` trajectory. Enumeration also
//! gives exact expectations of any estimator under the behavior policy.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{Estimator, EstimatorConfig, EstimatorKind};
use crate::exec::{try_fold_chunks, Exec};
use crate::mdp::{policy_probs_taylor2, PolicyParams, PolicyTable, Step, TabularMdp, Trajectory};
use crate::taylor2::{Dim, Taylor2};

/// Default cap on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMethod {
    Dp,
    Enumeration,
}

/// Value, gradient and row-major Hessian of one scalar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeReport {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
    pub method: OracleMethod,
}

impl DerivativeReport {
    pub fn from_taylor2(x: &Taylor2, method: OracleMethod) -> Self {
        DerivativeReport {
            value: x.value(),
            grad: x.grad().to_vec(),
            hess: x.hessian_dense(),
            method,
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_at(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.dim() + j]
    }

    /// `H v` using the dense Hessian.
    pub fn hvp(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.hess[i * d + j] * v[j]).sum())
            .collect()
    }

    pub fn max_grad_diff(&self, other: &DerivativeReport) -> f64 {
        max_abs_diff(&self.grad, &other.grad)
    }

    pub fn max_hess_diff(&self, other: &DerivativeReport) -> f64 {
        max_abs_diff(&self.hess, &other.hess)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Taylor2 action probabilities for every state, x-major.
pub(crate) fn taylor2_policy(theta: &PolicyParams) -> Vec<Taylor2> {
    (0..theta.num_states())
        .flat_map(|x| policy_probs_taylor2(theta, x))
        .collect()
}

fn check_shapes(mdp: &TabularMdp, theta: &PolicyParams) -> Result<()> {
    if theta.num_states() != mdp.num_states() || theta.num_actions() != mdp.num_actions() {
        return Err(Error::InvalidPolicy(format!(
            "policy is {}x{}, MDP is {}x{}",
            theta.num_states(),
            theta.num_actions(),
            mdp.num_states(),
            mdp.num_actions()
        )));
    }
    Ok(())
}

/// Finite-horizon Bellman backups in Taylor2 arithmetic:
/// `V_t(x) = sum_a pi(a|x) (r(x,a) + gamma sum_x' P(x'|x,a) V_{t+1}(x'))`,
/// `V_T = 0`.
pub fn exact_value_dp(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
) -> Result<DerivativeReport> {
    check_shapes(mdp, theta)?;
    mdp.check_goal(goal)?;
    let dim = Dim::new(theta.dim())?;
    let probs = taylor2_policy(theta);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gamma = mdp.gamma();
    let mut next: Vec<Taylor2> = vec![Taylor2::constant(0.0, dim); ns];
    for t in (0..mdp.horizon()).rev() {
        let states: Vec<usize> = if t == 0 {
            vec![mdp.start_state()]
        } else {
            (0..ns).collect()
        };
        let mut current = next.clone();
        for x in states {
            let mut v = Taylor2::constant(0.0, dim);
            for a in 0..na {
                let mut q = Taylor2::constant(mdp.reward(x, a, goal), dim);
                for (y, &p) in mdp.transition_row(x, a).iter().enumerate() {
                    if p != 0.0 {
                        q.axpy(gamma * p, &next[y]);
                    }
                }
                v += &(&probs[x * na + a] * &q);
            }
            current[x] = v;
        }
        next = current;
    }
    Ok(DerivativeReport::from_taylor2(
        &next[mdp.start_state()],
        OracleMethod::Dp,
    ))
}

/// Time-indexed `Q_t` and `V_t` of a fixed policy over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteHorizonQ {
    num_actions: usize,
    /// `q[t][x * |A| + a]` for `t < T`.
    q: Vec<Vec<f64>>,
    /// `v[t][x]` for `t <= T`; `v[T] = 0`.
    v: Vec<Vec<f64>>,
}

impl FiniteHorizonQ {
    pub fn horizon(&self) -> usize {
        self.q.len()
    }

    pub fn q_at(&self, t: usize) -> &[f64] {
        &self.q[t]
    }

    pub fn q(&self, t: usize, state: usize, action: usize) -> f64 {
        self.q[t][state * self.num_actions + action]
    }

    pub fn v(&self, t: usize, state: usize) -> f64 {
        self.v[t][state]
    }

    pub fn v_at(&self, t: usize) -> &[f64] {
        &self.v[t]
    }
}

/// Finite-horizon `Q` of a fixed policy (no derivative tracking).
pub fn exact_q_table(
    mdp: &TabularMdp,
    policy: &PolicyTable,
    goal: Option<usize>,
) -> Result<FiniteHorizonQ> {
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(Error::InvalidPolicy(
            "policy shape does not match the MDP".into(),
        ));
    }
    mdp.check_goal(goal)?;
    let (ns, na, horizon) = (mdp.num_states(), mdp.num_actions(), mdp.horizon());
    let mut q = vec![Vec::new(); horizon];
    let mut v = vec![vec![0.0; ns]; horizon + 1];
    for t in (0..horizon).rev() {
        let mut qt = vec![0.0; ns * na];
        for x in 0..ns {
            for a in 0..na {
                let cont: f64 = mdp
                    .transition_row(x, a)
                    .iter()
                    .zip(&v[t + 1])
                    .map(|(p, vn)| p * vn)
                    .sum();
                qt[x * na + a] = mdp.reward(x, a, goal) + mdp.gamma() * cont;
            }
            v[t][x] = policy
                .row(x)
                .iter()
                .zip(&qt[x * na..(x + 1) * na])
                .map(|(p, qv)| p * qv)
                .sum();
        }
        q[t] = qt;
    }
    Ok(FiniteHorizonQ {
        num_actions: na,
        q,
        v,
    })
}

/// Every trajectory of length `T` from the start state, indexed densely.
///
/// Leaf `i` is decoded as `T` base-`|X||A|` digits; digit `t` selects
/// `(a_t, x_{t+1})`.
pub(crate) struct PathSpace<'a> {
    mdp: &'a TabularMdp,
    leaves: usize,
}

impl<'a> PathSpace<'a> {
    pub(crate) fn new(mdp: &'a TabularMdp, budget: u64) -> Result<Self> {
        let base = (mdp.num_states() * mdp.num_actions()) as u128;
        let count = (0..mdp.horizon()).try_fold(1u128, |acc, _| acc.checked_mul(base));
        match count {
            Some(c) if c <= budget as u128 => Ok(PathSpace {
                mdp,
                leaves: c as usize,
            }),
            other => Err(Error::EnumerationBudget {
                paths: other
                    .map_or_else(|| format!("({base})^{}", mdp.horizon()), |c| c.to_string()),
                budget,
            }),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.leaves
    }

    /// Fills `actions` (length T) and `states` (length T + 1) for leaf `idx`.
    /// Returns the product of transition probabilities along the path.
    pub(crate) fn decode(
        &self,
        mut idx: usize,
        actions: &mut Vec<usize>,
        states: &mut Vec<usize>,
    ) -> f64 {
        let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
        let horizon = self.mdp.horizon();
        actions.clear();
        states.clear();
        states.push(self.mdp.start_state());
        let mut digits = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            digits.push(idx % (ns * na));
            idx /= ns * na;
        }
        let mut prob = 1.0;
        for &d in digits.iter().rev() {
            let (a, y) = (d / ns, d % ns);
            let x = *states.last().expect("non-empty");
            prob *= self.mdp.transition_row(x, a)[y];
            actions.push(a);
            states.push(y);
        }
        prob
    }
}

/// Folds `visit(acc, trajectory, probability)` over every trajectory with
/// positive probability under `behavior`, in a thread-count-invariant order.
pub(crate) fn fold_trajectories<A, Init, Visit, Comb>(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
    init: Init,
    visit: Visit,
    combine: Comb,
) -> Result<A>
where
    A: Send,
    Init: Fn() -> A + Sync + Send,
    Visit: Fn(&mut A, &Trajectory, f64) -> Result<()> + Sync + Send,
    Comb: Fn(&mut A, A),
{
    mdp.check_goal(goal)?;
    let space = PathSpace::new(mdp, budget)?;
    try_fold_chunks(
        exec,
        space.len(),
        init,
        |acc, idx| {
            let mut actions = Vec::new();
            let mut states = Vec::new();
            let p_env = space.decode(idx, &mut actions, &mut states);
            if p_env == 0.0 {
                return Ok(());
            }
            let mut prob = p_env;
            let mut steps = Vec::with_capacity(actions.len());
            for (t, &a) in actions.iter().enumerate() {
                let x = states[t];
                let mu = behavior.prob(x, a);
                prob *= mu;
                steps.push(Step {
                    state: x,
                    action: a,
                    reward: mdp.reward(x, a, goal),
                    behavior_log_prob: mu.ln(),
                });
            }
            if prob == 0.0 {
                return Ok(());
            }
            let traj = Trajectory {
                steps,
                final_state: *states.last().expect("non-empty"),
            };
            visit(acc, &traj, prob)
        },
        combine,
    )
}

/// Sum over all paths of `P_theta(path) * return(path)`, with the path
/// probability carried in Taylor2 arithmetic.
pub fn exact_value_enumeration(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
) -> Result<DerivativeReport> {
    check_shapes(mdp, theta)?;
    mdp.check_goal(goal)?;
    let dim = Dim::new(theta.dim())?;
    let probs = taylor2_policy(theta);
    let na = mdp.num_actions();
    let gamma = mdp.gamma();
    let space = PathSpace::new(mdp, budget)?;
    let total = try_fold_chunks::<_, Error, _, _, _>(
        exec,
        space.len(),
        || Taylor2::constant(0.0, dim),
        |acc, idx| {
            let mut actions = Vec::new();
            let mut states = Vec::new();
            let p_env = space.decode(idx, &mut actions, &mut states);
            if p_env == 0.0 {
                return Ok(());
            }
            let mut path = Taylor2::constant(p_env, dim);
            let mut ret = 0.0;
            let mut discount = 1.0;
            for (t, &a) in actions.iter().enumerate() {
                let x = states[t];
                path = &path * &probs[x * na + a];
                ret += discount * mdp.reward(x, a, goal);
                discount *= gamma;
            }
            acc.axpy(ret, &path);
            Ok(())
        },
        |acc, part| *acc += &part,
    )?;
    Ok(DerivativeReport::from_taylor2(
        &total,
        OracleMethod::Enumeration,
    ))
}

/// Exact `E_mu[estimate]` together with its exact expected gradient and
/// Hessian, by enumerating every behavior trajectory.
pub fn exact_expected_estimate(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    behavior: &PolicyTable,
    config: &EstimatorConfig,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
) -> Result<DerivativeReport> {
    if matches!(config.kind, EstimatorKind::SubsampledTaypo { .. }) {
        return Err(Error::InvalidArgument(
            "the sub-sampled TayPO estimator is randomized; enumerate its exact increments instead"
                .into(),
        ));
    }
    check_shapes(mdp, theta)?;
    let estimator = Estimator::new(config.clone(), mdp, theta, behavior, goal)?;
    let dim = Dim::new(theta.dim())?;
    let total = fold_trajectories(
        mdp,
        behavior,
        goal,
        budget,
        exec,
        || Taylor2::constant(0.0, dim),
        |acc, traj, prob| {
            let est = estimator.evaluate_deterministic(traj)?;
            acc.axpy(prob, &est);
            Ok(())
        },
        |acc, part| *acc += &part,
    )?;
    Ok(DerivativeReport::from_taylor2(
        &total,
        OracleMethod::Enumeration,
    ))
}

/// Exact Taylor increments `U_0 .. U_max_order` of `V^{pi_theta}` around the
/// behavior policy, by enumeration with the time-indexed `Q^mu_t`.
///
/// `U_0 = V^mu(x_0)`; for `k >= 1`,
/// `U_k = E_mu[ sum_{t_1 < ... < t_k} gamma^{t_k} prod_i (rho_{t_i} - 1) Q^mu_{t_k}(x_{t_k}, a_{t_k}) ]`.
pub fn exact_increments(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    behavior: &PolicyTable,
    max_order: usize,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
) -> Result<Vec<f64>> {
    check_shapes(mdp, theta)?;
    behavior.check_full_support()?;
    let target = theta.to_table();
    let q_mu = exact_q_table(mdp, behavior, goal)?;
    let gamma = mdp.gamma();
    let mut increments = fold_trajectories(
        mdp,
        behavior,
        goal,
        budget,
        exec,
        || vec![0.0; max_order + 1],
        |acc, traj, prob| {
            let horizon = traj.len();
            let c: Vec<f64> = traj
                .steps
                .iter()
                .map(|s| target.prob(s.state, s.action) / s.behavior_log_prob.exp() - 1.0)
                .collect();
            // level[t] = sum over chains t_1 < ... < t_k = t of prod (rho - 1)
            let mut level = c.clone();
            for k in 1..=max_order {
                if k > 1 {
                    let mut prefix = 0.0;
                    let prev = level.clone();
                    for t in 0..horizon {
                        level[t] = c[t] * prefix;
                        prefix += prev[t];
                    }
                }
                let mut discount = 1.0;
                let mut u = 0.0;
                for (t, s) in traj.steps.iter().enumerate() {
                    u += discount * level[t] * q_mu.q(t, s.state, s.action);
                    discount *= gamma;
                }
                acc[k] += prob * u;
            }
            Ok(())
        },
        |acc, part| acc.iter_mut().zip(part).for_each(|(a, p)| *a += p),
    )?;
    increments[0] = q_mu.v(0, mdp.start_state());
    Ok(increments)
}

/// The single increment `U_K`.
pub fn exact_increment(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    behavior: &PolicyTable,
    order: usize,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
) -> Result<f64> {
    Ok(exact_increments(mdp, theta, behavior, order, goal, budget, exec)?[order])
}

/// The Taylor partial sum `V_K = U_0 + ... + U_K`.
pub fn taylor_partial_sum(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    behavior: &PolicyTable,
    order: usize,
    goal: Option<usize>,
    budget: u64,
    exec: Exec,
) -> Result<f64> {
    Ok(
        exact_increments(mdp, theta, behavior, order, goal, budget, exec)?
            .iter()
            .sum(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_mdp, make_offpolicy_pair, RandomMdpParams};
    use approx::assert_abs_diff_eq;

    fn tiny(states: usize, actions: usize, horizon: usize, seed: u64) -> TabularMdp {
        generate_random_mdp(
            &RandomMdpParams {
                num_states: states,
                num_actions: actions,
                dirichlet_alpha: 1.0,
                gamma: 0.8,
                horizon,
                start_state: 0,
                num_goals: 1,
            },
            seed,
        )
        .unwrap()
    }

    fn random_theta(mdp: &TabularMdp, seed: u64) -> PolicyParams {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, &[42]);
        PolicyParams::new(
            mdp.num_states(),
            mdp.num_actions(),
            (0..mdp.dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn constant_rewards_have_flat_value() {
        let c = 0.7;
        let mut mdp_json: serde_json::Value =
            serde_json::from_str(&tiny(3, 2, 6, 1).to_json().unwrap()).unwrap();
        mdp_json["rewards"] = serde_json::json!([vec![c; 6]]);
        let mdp = TabularMdp::from_json(&mdp_json.to_string()).unwrap();
        let theta = PolicyParams::new(3, 2, vec![0.4; 6]).unwrap();
        let rep = exact_value_dp(&mdp, &theta, None).unwrap();
        let gamma: f64 = 0.8;
        assert_abs_diff_eq!(
            rep.value,
            c * (1.0 - gamma.powi(6)) / (1.0 - gamma),
            epsilon = 1e-10
        );
        assert!(rep.grad.iter().all(|g| g.abs() < 1e-10));
        assert!(rep.hess.iter().all(|h| h.abs() < 1e-10));
    }

    #[test]
    fn one_step_bandit_value_is_action_probability() {
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![vec![1.0, 0.0]], 0.9, 1, 0).unwrap();
        let theta = PolicyParams::new(1, 2, vec![0.3, -0.2]).unwrap();
        let rep = exact_value_dp(&mdp, &theta, None).unwrap();
        let p0 = crate::mdp::policy_probs(&theta, 0)[0];
        assert_abs_diff_eq!(rep.value, p0, epsilon = 1e-15);
        // d pi_0 / d theta = pi_0 (e_0 - pi)
        assert_abs_diff_eq!(rep.grad[0], p0 * (1.0 - p0), epsilon = 1e-15);
        assert_abs_diff_eq!(rep.grad[1], -p0 * (1.0 - p0), epsilon = 1e-15);
    }

    #[test]
    fn dp_matches_enumeration() {
        for seed in 0..4 {
            let mdp = tiny(2, 2, 3, seed);
            let theta = random_theta(&mdp, seed);
            let dp = exact_value_dp(&mdp, &theta, None).unwrap();
            let en = exact_value_enumeration(
                &mdp,
                &theta,
                None,
                DEFAULT_ENUMERATION_BUDGET,
                Exec::Parallel,
            )
            .unwrap();
            assert_abs_diff_eq!(dp.value, en.value, epsilon = 1e-10);
            assert!(dp.max_grad_diff(&en) < 1e-10);
            assert!(dp.max_hess_diff(&en) < 1e-10);
        }
    }

    #[test]
    fn enumeration_degenerate_cases() {
        // deterministic single path
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![vec![0.5]], 0.5, 3, 0).unwrap();
        let theta = PolicyParams::zeros(1, 1);
        let rep = exact_value_enumeration(&mdp, &theta, None, 100, Exec::Sequential).unwrap();
        assert_eq!(rep.value, 0.5 + 0.25 + 0.125);

        // horizon one
        let mdp = tiny(3, 2, 1, 5);
        let theta = random_theta(&mdp, 5);
        let rep = exact_value_enumeration(&mdp, &theta, None, 100, Exec::Sequential).unwrap();
        let p = crate::mdp::policy_probs(&theta, 0);
        let want: f64 = (0..2).map(|a| p[a] * mdp.reward(0, a, None)).sum();
        assert_abs_diff_eq!(rep.value, want, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_budget_is_enforced() {
        let mdp = tiny(3, 2, 8, 1);
        let theta = random_theta(&mdp, 1);
        let err = exact_value_enumeration(&mdp, &theta, None, 1000, Exec::Sequential).unwrap_err();
        assert!(matches!(err, Error::EnumerationBudget { .. }));
        assert!(err.to_string().contains("shrink"));
    }

    #[test]
    fn q_table_cases() {
        let mdp = tiny(3, 2, 5, 2);
        let mu = PolicyTable::uniform(3, 2);
        let q = exact_q_table(&mdp, &mu, None).unwrap();
        for t in 0..5 {
            for x in 0..3 {
                for a in 0..2 {
                    let cont: f64 = mdp
                        .transition_row(x, a)
                        .iter()
                        .enumerate()
                        .map(|(y, p)| p * q.v(t + 1, y))
                        .sum();
                    assert_abs_diff_eq!(
                        q.q(t, x, a),
                        mdp.reward(x, a, None) + 0.8 * cont,
                        epsilon = 1e-12
                    );
                }
            }
        }
        let one = exact_q_table(&mdp.with_horizon(1).unwrap(), &mu, None).unwrap();
        assert_eq!(one.q_at(0), mdp.reward_table(None));

        let zero = TabularMdp::new(
            3,
            2,
            mdp.transitions().to_vec(),
            vec![vec![0.0; 6]],
            0.8,
            5,
            0,
        )
        .unwrap();
        let q0 = exact_q_table(&zero, &mu, None).unwrap();
        assert!(q0.q_at(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn increments_vanish_on_policy() {
        let mdp = tiny(2, 2, 4, 3);
        let mu = PolicyTable::new(2, 2, vec![0.3, 0.7, 0.55, 0.45]).unwrap();
        let theta = PolicyParams::from_policy(&mu).unwrap();
        let inc = exact_increments(
            &mdp,
            &theta,
            &mu,
            4,
            None,
            DEFAULT_ENUMERATION_BUDGET,
            Exec::Parallel,
        )
        .unwrap();
        let v_mu = exact_q_table(&mdp, &mu, None).unwrap().v(0, 0);
        assert_abs_diff_eq!(inc[0], v_mu, epsilon = 1e-15);
        for u in &inc[1..] {
            assert!(u.abs() < 1e-14);
        }
    }

    #[test]
    fn full_expansion_recovers_value() {
        let mdp = tiny(2, 2, 4, 7);
        let pair = make_offpolicy_pair(&mdp, 0.6, 7).unwrap();
        let inc = exact_increments(
            &mdp,
            &pair.theta,
            &pair.behavior,
            4,
            None,
            DEFAULT_ENUMERATION_BUDGET,
            Exec::Parallel,
        )
        .unwrap();
        let v = exact_value_dp(&mdp, &pair.theta, None).unwrap().value;
        assert_abs_diff_eq!(inc.iter().sum::<f64>(), v, epsilon = 1e-12);
    }
}
