//! Tabular MDPs, softmax policies and behavior-policy trajectory sampling.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, TAG_MDP, TAG_POLICY};
use crate::taylor2::{Dim, Taylor2};

/// Probability floor applied to the mixture target policy before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-6;

const ROW_SUM_TOL: f64 = 1e-9;

/// Finite-horizon tabular MDP with one or more reward tables (goals).
///
/// Transitions are stored row-major as `P[x][a][x']`; each reward table is
/// stored x-major as `r[x][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDocument")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    horizon: usize,
    start_state: usize,
}

/// Unvalidated wire form of [`TabularMdp`].
#[derive(Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<f64>,
    rewards: Vec<Vec<f64>>,
    gamma: f64,
    horizon: usize,
    start_state: usize,
}

impl TryFrom<MdpDocument> for TabularMdp {
    type Error = Error;

    fn try_from(d: MdpDocument) -> Result<Self> {
        TabularMdp::new(
            d.num_states,
            d.num_actions,
            d.transitions,
            d.rewards,
            d.gamma,
            d.horizon,
            d.start_state,
        )
    }
}

impl TabularMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<Vec<f64>>,
        gamma: f64,
        horizon: usize,
        start_state: usize,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidMdp(msg));
        if num_states == 0 || num_actions == 0 {
            return bad("need at least one state and one action".into());
        }
        if transitions.len() != num_states * num_actions * num_states {
            return bad(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions * num_states
            ));
        }
        for (row_idx, row) in transitions.chunks(num_states).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return bad(format!(
                    "transition row {row_idx} has a negative or non-finite entry"
                ));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("transition row {row_idx} sums to {sum}"));
            }
        }
        if rewards.is_empty() {
            return bad("at least one reward table is required".into());
        }
        for (g, table) in rewards.iter().enumerate() {
            if table.len() != num_states * num_actions {
                return bad(format!("reward table {g} has {} entries", table.len()));
            }
            if table.iter().any(|r| !r.is_finite()) {
                return bad(format!("reward table {g} has a non-finite entry"));
            }
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return bad(format!("discount {gamma} outside (0, 1)"));
        }
        if horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if start_state >= num_states {
            return bad(format!("start state {start_state} out of range"));
        }
        Ok(TabularMdp {
            num_states,
            num_actions,
            transitions,
            rewards,
            gamma,
            horizon,
            start_state,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_goals(&self) -> usize {
        self.rewards.len()
    }

    /// Parameter dimension `|X| * |A|` of a tabular softmax policy.
    pub fn dim(&self) -> usize {
        self.num_states * self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn start_state(&self) -> usize {
        self.start_state
    }

    /// `P(. | x, a)`.
    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.num_actions + action) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// Reward table for `goal` (`None` selects goal 0). Panics on an
    /// out-of-range goal.
    pub fn reward_table(&self, goal: Option<usize>) -> &[f64] {
        &self.rewards[goal.unwrap_or(0)]
    }

    pub fn reward(&self, state: usize, action: usize, goal: Option<usize>) -> f64 {
        self.reward_table(goal)[state * self.num_actions + action]
    }

    pub fn check_goal(&self, goal: Option<usize>) -> Result<()> {
        match goal {
            Some(g) if g >= self.rewards.len() => Err(Error::InvalidArgument(format!(
                "goal {g} out of range ({} goals)",
                self.rewards.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        let mut out = self.clone();
        if horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be at least 1".into()));
        }
        out.horizon = horizon;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Single-state meta-learning bandit: under goal `g` action `g` pays 1
    /// and every other action pays 0. Used by the meta-training demo.
    pub fn goal_bandit(
        num_actions: usize,
        num_goals: usize,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        if num_goals == 0 || num_goals > num_actions {
            return Err(Error::InvalidMdp(format!(
                "goal bandit needs 1..={num_actions} goals, got {num_goals}"
            )));
        }
        let rewards = (0..num_goals)
            .map(|g| {
                (0..num_actions)
                    .map(|a| if a == g { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        TabularMdp::new(
            1,
            num_actions,
            vec![1.0; num_actions],
            rewards,
            gamma,
            horizon,
            0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpParams {
    pub num_states: usize,
    pub num_actions: usize,
    pub dirichlet_alpha: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub start_state: usize,
    /// Number of independent reward tables; 1 for the plain study.
    pub num_goals: usize,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams {
            num_states: 10,
            num_actions: 5,
            dirichlet_alpha: 0.001,
            gamma: 0.8,
            horizon: 20,
            start_state: 0,
            num_goals: 1,
        }
    }
}

/// Draws one Dirichlet(alpha, ..., alpha) vector of length `n`.
///
/// Small concentrations underflow ordinary Gamma sampling, so the Gamma
/// variates are drawn in log space: for alpha < 1,
/// `ln G(alpha) = ln G(alpha + 1) + ln(U) / alpha`.
fn sample_dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let (shape, boost) = if alpha < 1.0 {
        (alpha + 1.0, true)
    } else {
        (alpha, false)
    };
    let gamma = Gamma::new(shape, 1.0).expect("positive Gamma shape");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut l = g.max(f64::MIN_POSITIVE).ln();
            if boost {
                // U in (0, 1]
                let u: f64 = 1.0 - rng.random::<f64>();
                l += u.ln() / alpha;
            }
            l
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Random MDP: Dirichlet(alpha) transition rows and Uniform[0, 1] rewards per
/// `(x, a)` (one table per goal). Deterministic in `seed`.
pub fn generate_random_mdp(params: &RandomMdpParams, seed: u64) -> Result<TabularMdp> {
    let RandomMdpParams {
        num_states,
        num_actions,
        dirichlet_alpha,
        ..
    } = *params;
    if !(dirichlet_alpha > 0.0) || !dirichlet_alpha.is_finite() {
        return Err(Error::InvalidMdp(format!(
            "Dirichlet concentration {dirichlet_alpha} must be positive"
        )));
    }
    if num_states == 0 || num_actions == 0 || params.num_goals == 0 {
        return Err(Error::InvalidMdp(
            "need at least one state, action and goal".into(),
        ));
    }
    let mut rng = substream(seed, &[TAG_MDP]);
    let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
    for _ in 0..num_states * num_actions {
        transitions.extend(sample_dirichlet(num_states, dirichlet_alpha, &mut rng));
    }
    let rewards = (0..params.num_goals)
        .map(|_| {
            (0..num_states * num_actions)
                .map(|_| rng.random::<f64>())
                .collect()
        })
        .collect();
    TabularMdp::new(
        num_states,
        num_actions,
        transitions,
        rewards,
        params.gamma,
        params.horizon,
        params.start_state,
    )
}

/// Numeric policy `pi(a | x)`, x-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions || num_actions == 0 {
            return Err(Error::InvalidPolicy(format!(
                "policy table has {} entries for {num_states}x{num_actions}",
                probs.len()
            )));
        }
        for (x, row) in probs.chunks(num_actions).enumerate() {
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidPolicy(format!(
                    "negative probability in state {x}"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidPolicy(format!("state {x} row sums to {sum}")));
            }
        }
        Ok(PolicyTable {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        PolicyTable {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        let a = self.num_actions;
        &self.probs[state * a..(state + 1) * a]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.num_actions + action]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Errors if any action has zero probability.
    pub fn check_full_support(&self) -> Result<()> {
        match self.probs.iter().position(|&p| !(p > 0.0)) {
            Some(i) => Err(Error::ZeroBehaviorProbability {
                state: i / self.num_actions,
                action: i % self.num_actions,
            }),
            None => Ok(()),
        }
    }
}

/// Softmax logits `theta[x][a]`, flattened x-major: index `x * |A| + a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    num_states: usize,
    num_actions: usize,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(num_states: usize, num_actions: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != num_states * num_actions || theta.is_empty() {
            return Err(Error::InvalidPolicy(format!(
                "{} logits for {num_states}x{num_actions}",
                theta.len()
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidPolicy("non-finite logit".into()));
        }
        Ok(PolicyParams {
            num_states,
            num_actions,
            theta,
        })
    }

    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        PolicyParams {
            num_states,
            num_actions,
            theta: vec![0.0; num_states * num_actions],
        }
    }

    /// Logits `log pi(a | x)` of a strictly positive policy table.
    pub fn from_policy(table: &PolicyTable) -> Result<Self> {
        table.check_full_support()?;
        PolicyParams::new(
            table.num_states,
            table.num_actions,
            table.probs.iter().map(|p| p.ln()).collect(),
        )
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn index(&self, state: usize, action: usize) -> usize {
        state * self.num_actions + action
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        let a = self.num_actions;
        &self.theta[state * a..(state + 1) * a]
    }

    /// `theta + step * direction`.
    pub fn offset(&self, step: f64, direction: &[f64]) -> Result<Self> {
        if direction.len() != self.theta.len() {
            return Err(Error::InvalidArgument(format!(
                "direction has length {}, expected {}",
                direction.len(),
                self.theta.len()
            )));
        }
        PolicyParams::new(
            self.num_states,
            self.num_actions,
            self.theta
                .iter()
                .zip(direction)
                .map(|(t, d)| t + step * d)
                .collect(),
        )
    }

    pub fn to_table(&self) -> PolicyTable {
        let probs = (0..self.num_states)
            .flat_map(|x| policy_probs(self, x))
            .collect();
        PolicyTable {
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs,
        }
    }
}

/// Softmax of the logit row of `state`.
pub fn policy_probs(theta: &PolicyParams, state: usize) -> Vec<f64> {
    let logits = theta.logits(state);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log pi(. | state)` as [`Taylor2`] scalars seeded on the flattened logits.
pub fn log_policy_probs_taylor2(theta: &PolicyParams, state: usize) -> Vec<Taylor2> {
    let dim = Dim::new(theta.dim()).expect("policy dimension is positive");
    let logits = theta.logits(state);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<Taylor2> = logits
        .iter()
        .enumerate()
        .map(|(a, &l)| {
            Taylor2::variable(l, theta.index(state, a), dim)
                .expect("index within dimension")
                .add_scalar(-max)
        })
        .collect();
    let exps: Vec<Taylor2> = shifted.iter().map(Taylor2::exp).collect();
    // The max term contributes exp(0) = 1, so the normalizer is >= 1.
    let log_norm = Taylor2::sum(&exps, dim)
        .ln()
        .expect("softmax normalizer is at least one");
    shifted.iter().map(|s| s - &log_norm).collect()
}

/// `pi(. | state)` as [`Taylor2`] scalars; gradient and Hessian are nonzero
/// only inside the block of `state`.
pub fn policy_probs_taylor2(theta: &PolicyParams, state: usize) -> Vec<Taylor2> {
    log_policy_probs_taylor2(theta, state)
        .iter()
        .map(Taylor2::exp)
        .collect()
}

/// Max over states of the L1 distance between action distributions.
pub fn l1_distance(pi: &PolicyTable, mu: &PolicyTable) -> f64 {
    assert_eq!(
        (pi.num_states, pi.num_actions),
        (mu.num_states, mu.num_actions),
        "policy shapes differ"
    );
    (0..pi.num_states)
        .map(|x| {
            pi.row(x)
                .iter()
                .zip(mu.row(x))
                .map(|(p, m)| (p - m).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Target/behavior pair for the off-policyness study.
#[derive(Debug, Clone, PartialEq)]
pub struct OffPolicyPair {
    pub epsilon: f64,
    /// `theta(x, a) = log pi(a | x)` for the floored mixture `pi`.
    pub theta: PolicyParams,
    /// Uniform behavior policy `mu`.
    pub behavior: PolicyTable,
    /// Action chosen by the deterministic policy in each state.
    pub deterministic_actions: Vec<usize>,
    /// The mixture target policy after flooring.
    pub target: PolicyTable,
}

impl OffPolicyPair {
    pub fn deterministic_policy(&self) -> PolicyTable {
        let (s, a) = (self.behavior.num_states, self.behavior.num_actions);
        let mut probs = vec![0.0; s * a];
        for (x, &d) in self.deterministic_actions.iter().enumerate() {
            probs[x * a + d] = 1.0;
        }
        PolicyTable {
            num_states: s,
            num_actions: a,
            probs,
        }
    }

    pub fn l1_distance(&self) -> f64 {
        l1_distance(&self.target, &self.behavior)
    }
}

/// Builds `pi = (1 - eps) mu + eps pi_d` with uniform `mu` and a seeded
/// deterministic `pi_d`. Rows with entries below [`PROBABILITY_FLOOR`] are
/// floored and renormalized so the logits stay finite; other rows are left
/// untouched.
pub fn make_offpolicy_pair(mdp: &TabularMdp, epsilon: f64, seed: u64) -> Result<OffPolicyPair> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "mixture coefficient {epsilon} outside [0, 1]"
        )));
    }
    let (s, a) = (mdp.num_states(), mdp.num_actions());
    let mut rng = substream(seed, &[TAG_POLICY]);
    let deterministic_actions: Vec<usize> = (0..s).map(|_| rng.random_range(0..a)).collect();
    let behavior = PolicyTable::uniform(s, a);
    let mut probs = Vec::with_capacity(s * a);
    for (x, &d) in deterministic_actions.iter().enumerate() {
        let mut row: Vec<f64> = (0..a)
            .map(|b| {
                let det = if b == d { 1.0 } else { 0.0 };
                (1.0 - epsilon) * behavior.prob(x, b) + epsilon * det
            })
            .collect();
        if row.iter().any(|&p| p < PROBABILITY_FLOOR) {
            row.iter_mut().for_each(|p| *p = p.max(PROBABILITY_FLOOR));
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= total);
        }
        probs.extend(row);
    }
    let target = PolicyTable::new(s, a, probs)?;
    let theta = PolicyParams::from_policy(&target)?;
    Ok(OffPolicyPair {
        epsilon,
        theta,
        behavior,
        deterministic_actions,
        target,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `log mu(a_t | x_t)` recorded at sampling time.
    pub behavior_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    /// State reached after the last step, used only for terminal bootstraps.
    pub final_state: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .rev()
            .fold(0.0, |acc, s| s.reward + gamma * acc)
    }
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Samples one episode of exactly `T` steps from the start state.
pub fn sample_trajectory<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    behavior: &PolicyTable,
    goal: Option<usize>,
    rng: &mut R,
) -> Result<Trajectory> {
    if behavior.num_states != mdp.num_states() || behavior.num_actions != mdp.num_actions() {
        return Err(Error::InvalidPolicy(
            "behavior shape does not match the MDP".into(),
        ));
    }
    behavior.check_full_support()?;
    mdp.check_goal(goal)?;
    let mut state = mdp.start_state();
    let mut steps = Vec::with_capacity(mdp.horizon());
    for _ in 0..mdp.horizon() {
        let action = sample_index(behavior.row(state), rng);
        steps.push(Step {
            state,
            action,
            reward: mdp.reward(state, action, goal),
            behavior_log_prob: behavior.prob(state, action).ln(),
        });
        state = sample_index(mdp.transition_row(state, action), rng);
    }
    Ok(Trajectory {
        steps,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn default_scale_params() -> RandomMdpParams {
        RandomMdpParams::default()
    }

    #[test]
    fn random_mdp_rows_are_distributions() {
        let mdp = generate_random_mdp(&default_scale_params(), 11).unwrap();
        for x in 0..10 {
            for a in 0..5 {
                let row = mdp.transition_row(x, a);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
        assert!(mdp
            .reward_table(None)
            .iter()
            .all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn single_state_mdp_is_exact() {
        let params = RandomMdpParams {
            num_states: 1,
            num_actions: 1,
            dirichlet_alpha: 0.3,
            ..default_scale_params()
        };
        let mdp = generate_random_mdp(&params, 3).unwrap();
        assert_eq!(mdp.transition_row(0, 0), &[1.0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_random_mdp(&default_scale_params(), 5).unwrap();
        let b = generate_random_mdp(&default_scale_params(), 5).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate_random_mdp(&default_scale_params(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_generation_inputs() {
        let mut p = default_scale_params();
        p.dirichlet_alpha = 0.0;
        assert!(generate_random_mdp(&p, 0).is_err());
        let mut p = default_scale_params();
        p.num_states = 0;
        assert!(generate_random_mdp(&p, 0).is_err());
        let mut p = default_scale_params();
        p.gamma = 1.0;
        assert!(generate_random_mdp(&p, 0).is_err());
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let mdp = generate_random_mdp(&default_scale_params(), 9).unwrap();
        let back = TabularMdp::from_json(&mdp.to_json().unwrap()).unwrap();
        assert_eq!(back, mdp);
        let broken = mdp
            .to_json()
            .unwrap()
            .replace("\"horizon\": 20", "\"horizon\": 0");
        assert!(TabularMdp::from_json(&broken).is_err());
    }

    #[test]
    fn softmax_examples() {
        let theta = PolicyParams::zeros(1, 5);
        for p in policy_probs(&theta, 0) {
            assert_abs_diff_eq!(p, 0.2, epsilon = 1e-15);
        }
        let theta = PolicyParams::new(1, 2, vec![1f64.ln(), 3f64.ln()]).unwrap();
        let p = policy_probs(&theta, 0);
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
        let shifted = PolicyParams::new(1, 2, vec![1f64.ln() + 7.5, 3f64.ln() + 7.5]).unwrap();
        for (a, b) in policy_probs(&shifted, 0).iter().zip(&p) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_taylor2_uniform_two_actions() {
        let theta = PolicyParams::zeros(2, 2);
        let logs = log_policy_probs_taylor2(&theta, 1);
        let l0 = &logs[0];
        assert_abs_diff_eq!(l0.grad()[2], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(l0.grad()[3], -0.5, epsilon = 1e-15);
        assert_eq!(&l0.grad()[..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(l0.hess(2, 2), -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(l0.hess(2, 3), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(l0.hess(3, 3), -0.25, epsilon = 1e-15);
        assert_eq!(l0.hess(0, 2), 0.0);

        let probs = policy_probs_taylor2(&theta, 1);
        let total = Taylor2::sum(&probs, Dim::new(4).unwrap());
        assert_abs_diff_eq!(total.value(), 1.0, epsilon = 1e-12);
        assert!(total.grad().iter().all(|g| g.abs() < 1e-12));
        assert!(total.packed_hessian().iter().all(|h| h.abs() < 1e-12));
    }

    #[test]
    fn mixture_pair_examples() {
        let mdp = generate_random_mdp(&default_scale_params(), 1).unwrap();
        let pair = make_offpolicy_pair(&mdp, 0.0, 4).unwrap();
        assert!(pair.theta.as_slice().iter().all(|&t| t == 0.2f64.ln()));
        assert_eq!(pair.l1_distance(), 0.0);

        let pair = make_offpolicy_pair(&mdp, 0.5, 4).unwrap();
        for x in 0..10 {
            let d = pair.deterministic_actions[x];
            for a in 0..5 {
                let want = if a == d { 0.6 } else { 0.1 };
                assert_abs_diff_eq!(pair.target.prob(x, a), want, epsilon = 1e-12);
            }
        }

        let pair = make_offpolicy_pair(&mdp, 1.0, 4).unwrap();
        assert!(pair.theta.as_slice().iter().all(|t| t.is_finite()));
        let d = pair.deterministic_actions[0];
        assert_abs_diff_eq!(pair.target.prob(0, d), 1.0 / (1.0 + 4e-6), epsilon = 1e-15);
        assert_abs_diff_eq!(
            pair.target.prob(0, (d + 1) % 5),
            1e-6 / (1.0 + 4e-6),
            epsilon = 1e-18
        );

        assert!(make_offpolicy_pair(&mdp, 1.5, 4).is_err());
        assert!(make_offpolicy_pair(&mdp, -0.1, 4).is_err());
    }

    #[test]
    fn l1_examples() {
        let mu = PolicyTable::uniform(3, 5);
        assert_eq!(l1_distance(&mu, &mu), 0.0);
        let mdp = generate_random_mdp(&default_scale_params(), 2).unwrap();
        let pair = make_offpolicy_pair(&mdp, 0.3, 8).unwrap();
        let det = pair.deterministic_policy();
        assert_abs_diff_eq!(l1_distance(&det, &pair.behavior), 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(pair.l1_distance(), 0.3 * 1.6, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_chain_is_reproduced() {
        // 0 -> 1 -> 2 -> 2 under action 0; behavior always picks action 0.
        let transitions = vec![
            0.0, 1.0, 0.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0, 0.0, 0.0,
        ];
        let rewards = vec![vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]];
        let mdp = TabularMdp::new(3, 2, transitions, rewards, 0.5, 4, 0).unwrap();
        // Full support is required, so use a heavily skewed behavior and
        // condition on the seed producing the all-zero action path.
        let behavior = PolicyTable::new(3, 2, vec![1.0 - 1e-300, 1e-300].repeat(3)).unwrap();
        let traj = sample_trajectory(&mdp, &behavior, None, &mut substream(1, &[])).unwrap();
        let states: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        assert_eq!(states, vec![0, 1, 2, 2]);
        assert_eq!(traj.final_state, 2);
        assert_abs_diff_eq!(traj.discounted_return(0.5), 1.0 + 1.0 + 0.75 + 0.375);
        let again = sample_trajectory(&mdp, &behavior, None, &mut substream(1, &[])).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn zero_probability_behavior_is_rejected() {
        let mdp = generate_random_mdp(&default_scale_params(), 1).unwrap();
        let mut probs = vec![0.2; 50];
        probs[7] = 0.0;
        probs[8] = 0.4;
        let behavior = PolicyTable::new(10, 5, probs).unwrap();
        let err = sample_trajectory(&mdp, &behavior, None, &mut substream(0, &[])).unwrap_err();
        assert!(matches!(
            err,
            Error::ZeroBehaviorProbability {
                state: 1,
                action: 2
            }
        ));
    }

    #[test]
    fn visit_frequencies_match_exact_occupancy() {
        let transitions = vec![0.7, 0.3, 0.2, 0.8, 0.4, 0.6, 0.9, 0.1];
        let rewards = vec![vec![0.0; 4]];
        let mdp = TabularMdp::new(2, 2, transitions, rewards, 0.9, 5, 0).unwrap();
        let behavior = PolicyTable::new(2, 2, vec![0.3, 0.7, 0.6, 0.4]).unwrap();

        // exact occupancy of state 1 at each time via the state-chain powers
        let chain = |x: usize, y: usize| -> f64 {
            (0..2)
                .map(|a| behavior.prob(x, a) * mdp.transition_row(x, a)[y])
                .sum()
        };
        let mut dist = [1.0, 0.0];
        let mut exact = Vec::new();
        for _ in 0..5 {
            exact.push(dist[1]);
            dist = [
                dist[0] * chain(0, 0) + dist[1] * chain(1, 0),
                dist[0] * chain(0, 1) + dist[1] * chain(1, 1),
            ];
        }

        let n = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = substream(99, &[]);
        for _ in 0..n {
            let traj = sample_trajectory(&mdp, &behavior, None, &mut rng).unwrap();
            for (t, s) in traj.steps.iter().enumerate() {
                counts[t] += s.state;
            }
        }
        for t in 0..5 {
            let p = exact[t];
            let freq = counts[t] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt().max(1e-12);
            assert!(
                (freq - p).abs() <= 3.0 * se + 1e-12,
                "t={t}: {freq} vs {p} (se {se})"
            );
        }
    }
}
