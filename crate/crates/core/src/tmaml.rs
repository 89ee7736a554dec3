//! Audit of the TMAML control-variate objective
//! `J = sum_t (1 - prod_{s<=t} rho_s) (1 - rho_t) b(x_t)`.
//!
//! On-policy `J` is zero in value, yet its expected Hessian
//! `E[2 sum_t g_t g_t^T b(x_t)]` (with `g_t = grad log pi(a_t|x_t)`) is not,
//! so adding `J` to a second-order objective biases the Hessian estimate.
//! The objective is undiscounted.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mdp::{policy_probs, PolicyParams, TabularMdp, Trajectory};
use crate::oracle::{fold_trajectories, taylor2_policy};
use crate::taylor2::{Dim, Taylor2};

/// State-dependent baseline `b(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTable {
    values: Vec<f64>,
}

impl BaselineTable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "baseline must be a non-empty table of finite values".into(),
            ));
        }
        Ok(BaselineTable { values })
    }

    pub fn constant(num_states: usize, value: f64) -> Self {
        BaselineTable {
            values: vec![value; num_states],
        }
    }

    pub fn get(&self, state: usize) -> f64 {
        self.values[state]
    }

    pub fn num_states(&self) -> usize {
        self.values.len()
    }
}

fn check(theta: &PolicyParams, baseline: &BaselineTable) -> Result<()> {
    if baseline.num_states() != theta.num_states() {
        return Err(Error::InvalidArgument(format!(
            "baseline covers {} states, policy has {}",
            baseline.num_states(),
            theta.num_states()
        )));
    }
    Ok(())
}

/// `J` on one trajectory with `rho_t = pi_theta(a_t|x_t) / const(pi_theta(a_t|x_t))`,
/// i.e. the behavior frozen at the current policy.
pub fn eval_tmaml_j(
    theta: &PolicyParams,
    traj: &Trajectory,
    baseline: &BaselineTable,
) -> Result<Taylor2> {
    check(theta, baseline)?;
    let probs = taylor2_policy(theta);
    Ok(eval_with_probs(&probs, theta, traj, baseline))
}

fn eval_with_probs(
    probs: &[Taylor2],
    theta: &PolicyParams,
    traj: &Trajectory,
    baseline: &BaselineTable,
) -> Taylor2 {
    let dim = Dim::new(theta.dim()).expect("positive dimension");
    let na = theta.num_actions();
    let mut cumulative = Taylor2::constant(1.0, dim);
    let mut j = Taylor2::constant(0.0, dim);
    for s in &traj.steps {
        let p = &probs[s.state * na + s.action];
        let rho = p.scale(1.0 / p.value());
        cumulative = &cumulative * &rho;
        let one_minus_cum = -&cumulative + 1.0;
        let one_minus_rho = -&rho + 1.0;
        j.axpy(baseline.get(s.state), &(&one_minus_cum * &one_minus_rho));
    }
    j
}

fn scores(theta: &PolicyParams, traj: &Trajectory) -> Vec<Vec<f64>> {
    let na = theta.num_actions();
    traj.steps
        .iter()
        .map(|s| {
            let p = policy_probs(theta, s.state);
            let mut g = vec![0.0; theta.dim()];
            for a in 0..na {
                g[s.state * na + a] = if a == s.action { 1.0 } else { 0.0 } - p[a];
            }
            g
        })
        .collect()
}

fn add_outer(m: &mut [f64], d: usize, u: &[f64], v: &[f64], c: f64) {
    for i in 0..d {
        if u[i] == 0.0 {
            continue;
        }
        for j in 0..d {
            m[i * d + j] += c * u[i] * v[j];
        }
    }
}

/// Pieces of the per-trajectory closed form, each row-major `D x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TmamlClosedForm {
    /// `2 sum_t g_t (sum_{s>=t} g_s b(x_s))^T`.
    pub full: Vec<f64>,
    /// `2 sum_t g_t g_t^T b(x_t)`.
    pub diagonal: Vec<f64>,
    /// `2 sum_t sum_{s>t} g_t g_s^T b(x_s)`.
    pub cross: Vec<f64>,
}

impl TmamlClosedForm {
    /// `(full + full^T) / 2`, which is what the Hessian of `J` equals.
    pub fn symmetrized(&self) -> Vec<f64> {
        let d = (self.full.len() as f64).sqrt() as usize;
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = 0.5 * (self.full[i * d + j] + self.full[j * d + i]);
            }
        }
        out
    }
}

pub fn tmaml_closed_form(
    theta: &PolicyParams,
    traj: &Trajectory,
    baseline: &BaselineTable,
) -> Result<TmamlClosedForm> {
    check(theta, baseline)?;
    let d = theta.dim();
    let g = scores(theta, traj);
    let b: Vec<f64> = traj.steps.iter().map(|s| baseline.get(s.state)).collect();
    let mut diagonal = vec![0.0; d * d];
    let mut cross = vec![0.0; d * d];
    for t in 0..g.len() {
        add_outer(&mut diagonal, d, &g[t], &g[t], 2.0 * b[t]);
        for s in t + 1..g.len() {
            add_outer(&mut cross, d, &g[t], &g[s], 2.0 * b[s]);
        }
    }
    let full = diagonal.iter().zip(&cross).map(|(a, c)| a + c).collect();
    Ok(TmamlClosedForm {
        full,
        diagonal,
        cross,
    })
}

/// Exact on-policy expectations of `J`, its derivatives and the closed-form
/// pieces. Matrices are stored as rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TmamlAudit {
    pub expected_value: f64,
    pub expected_gradient: Vec<f64>,
    /// `E[hess J]` from Taylor2 arithmetic.
    pub expected_hessian: Vec<Vec<f64>>,
    /// `E[2 sum_t g_t g_t^T b(x_t)]`.
    pub closed_form_expected: Vec<Vec<f64>>,
    /// `E[2 sum_{s>t} g_t g_s^T b(x_s)]`, zero in theory.
    pub cross_term_expected: Vec<Vec<f64>>,
    pub frobenius_norm: f64,
    /// Max entry of `|E[hess J] - E[closed form]|`.
    pub identity_error: f64,
    pub max_abs_cross_term: f64,
    pub min_eigenvalue: f64,
}

fn rows(m: &[f64], d: usize) -> Vec<Vec<f64>> {
    m.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Exact `E_{pi_theta}[hess J]` by enumerating trajectories under `pi_theta`.
pub fn expected_tmaml_hessian(
    mdp: &TabularMdp,
    theta: &PolicyParams,
    baseline: &BaselineTable,
    budget: u64,
    exec: Exec,
) -> Result<TmamlAudit> {
    check(theta, baseline)?;
    let d = theta.dim();
    let dim = Dim::new(d)?;
    let probs = taylor2_policy(theta);
    let policy = theta.to_table();
    struct Acc {
        j: Taylor2,
        diagonal: Vec<f64>,
        cross: Vec<f64>,
    }
    let acc = fold_trajectories(
        mdp,
        &policy,
        None,
        budget,
        exec,
        || Acc {
            j: Taylor2::constant(0.0, dim),
            diagonal: vec![0.0; d * d],
            cross: vec![0.0; d * d],
        },
        |acc, traj, prob| {
            acc.j
                .axpy(prob, &eval_with_probs(&probs, theta, traj, baseline));
            let cf = tmaml_closed_form(theta, traj, baseline)?;
            for k in 0..d * d {
                acc.diagonal[k] += prob * cf.diagonal[k];
                acc.cross[k] += prob * cf.cross[k];
            }
            Ok(())
        },
        |acc, part| {
            acc.j += &part.j;
            for k in 0..d * d {
                acc.diagonal[k] += part.diagonal[k];
                acc.cross[k] += part.cross[k];
            }
        },
    )?;
    let hess = acc.j.hessian_dense();
    let frobenius_norm = hess.iter().map(|h| h * h).sum::<f64>().sqrt();
    let identity_error = hess
        .iter()
        .zip(&acc.diagonal)
        .map(|(h, c)| (h - c).abs())
        .fold(0.0, f64::max);
    let max_abs_cross_term = acc.cross.iter().map(|c| c.abs()).fold(0.0, f64::max);
    let min_eigenvalue = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &hess))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    Ok(TmamlAudit {
        expected_value: acc.j.value(),
        expected_gradient: acc.j.grad().to_vec(),
        expected_hessian: rows(&hess, d),
        closed_form_expected: rows(&acc.diagonal, d),
        cross_term_expected: rows(&acc.cross, d),
        frobenius_norm,
        identity_error,
        max_abs_cross_term,
        min_eigenvalue,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{generate_random_mdp, sample_trajectory, RandomMdpParams};
    use crate::oracle::DEFAULT_ENUMERATION_BUDGET;
    use crate::rng::substream;

    fn bandit() -> TabularMdp {
        TabularMdp::new(1, 2, vec![1.0, 1.0], vec![vec![0.0, 0.0]], 0.5, 1, 0).unwrap()
    }

    #[test]
    fn uniform_bandit_hessian() {
        let theta = PolicyParams::zeros(1, 2);
        let audit = expected_tmaml_hessian(
            &bandit(),
            &theta,
            &BaselineTable::constant(1, 1.0),
            100,
            Exec::Sequential,
        )
        .unwrap();
        let want = [[0.5, -0.5], [-0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((audit.expected_hessian[i][j] - want[i][j]).abs() < 1e-15);
            }
        }
        let zero = expected_tmaml_hessian(
            &bandit(),
            &theta,
            &BaselineTable::constant(1, 0.0),
            100,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(zero.frobenius_norm, 0.0);
    }

    #[test]
    fn per_trajectory_hessian_is_symmetrized_closed_form() {
        let mdp = generate_random_mdp(
            &RandomMdpParams {
                num_states: 3,
                num_actions: 3,
                dirichlet_alpha: 1.0,
                horizon: 6,
                ..RandomMdpParams::default()
            },
            3,
        )
        .unwrap();
        let theta =
            PolicyParams::new(3, 3, (0..9).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
        let baseline = BaselineTable::new(vec![0.5, -1.0, 2.0]).unwrap();
        let mut rng = substream(1, &[0]);
        for _ in 0..10 {
            let traj = sample_trajectory(&mdp, &theta.to_table(), None, &mut rng).unwrap();
            let j = eval_tmaml_j(&theta, &traj, &baseline).unwrap();
            assert_eq!(j.value(), 0.0);
            let cf = tmaml_closed_form(&theta, &traj, &baseline).unwrap();
            for (h, c) in j.hessian_dense().iter().zip(cf.symmetrized()) {
                assert!((h - c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn random_mdp_bias_is_nonzero_and_psd() {
        let mdp = generate_random_mdp(
            &RandomMdpParams {
                num_states: 3,
                num_actions: 2,
                dirichlet_alpha: 1.0,
                horizon: 4,
                ..RandomMdpParams::default()
            },
            9,
        )
        .unwrap();
        let theta = PolicyParams::new(3, 2, vec![0.2, -0.1, 0.5, 0.0, -0.4, 0.3]).unwrap();
        let audit = expected_tmaml_hessian(
            &mdp,
            &theta,
            &BaselineTable::constant(3, 1.0),
            DEFAULT_ENUMERATION_BUDGET,
            Exec::Parallel,
        )
        .unwrap();
        assert!(audit.frobenius_norm > 1e-3);
        assert!(audit.identity_error < 1e-10);
        assert!(audit.max_abs_cross_term < 1e-10);
        assert!(audit.expected_gradient.iter().all(|g| g.abs() < 1e-10));
        assert!(audit.min_eigenvalue > -1e-12);
    }
}
