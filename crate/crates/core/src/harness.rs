//! Experiment engine: accuracy metric, off-policyness and sample-size sweeps,
//! CSV/gnuplot output and the enumeration-based validation suite.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    dr_derivatives_analytic, eval_dr, CriticSpec, DrDerivatives, Estimator, EstimatorConfig,
    EstimatorKind, EvalContext, TaypoQ, DEFAULT_RHO_BAR,
};
use crate::exec::{try_map_indexed, Exec};
use crate::mdp::{
    generate_random_mdp, make_offpolicy_pair, sample_trajectory, PolicyParams, RandomMdpParams,
    TabularMdp, Trajectory,
};
use crate::metagrad::{exact_meta_gradient, meta_objective_exact};
use crate::oracle::{
    exact_expected_estimate, exact_increments, exact_value_dp, exact_value_enumeration,
    DerivativeReport, DEFAULT_ENUMERATION_BUDGET,
};
use crate::rng::{substream, substream_seed, TAG_ESTIMATOR, TAG_MDP, TAG_POLICY, TAG_TRAJECTORY};
use crate::tmaml::{expected_tmaml_hessian, BaselineTable};

/// Cosine similarity of two flattened tensors, clamped to `[-1, 1]`.
///
/// A zero-norm estimate scores 0 and sets the returned flag; a zero-norm
/// truth is an error.
pub fn accuracy(estimate: &[f64], truth: &[f64]) -> Result<(f64, bool)> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "tensor lengths differ: {} vs {}",
            estimate.len(),
            truth.len()
        )));
    }
    let nt = l2_norm(truth);
    if nt == 0.0 {
        return Err(Error::ZeroNormTruth);
    }
    let ne = l2_norm(estimate);
    if ne == 0.0 {
        return Ok((0.0, true));
    }
    let dot: f64 = estimate.iter().zip(truth).map(|(a, b)| a * b).sum();
    Ok(((dot / (ne * nt)).clamp(-1.0, 1.0), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    Epsilon,
    Samples,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Samples => "n_samples",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            SweepAxis::Epsilon => 1,
            SweepAxis::Samples => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mdp: RandomMdpParams,
    pub epsilon_grid: Vec<f64>,
    pub sample_grid: Vec<usize>,
    /// Mixture coefficient held fixed in the sample-size sweep.
    pub epsilon: f64,
    /// Sample size held fixed in the off-policyness sweep.
    pub num_samples: usize,
    pub estimators: Vec<EstimatorKind>,
    pub critic: CriticSpec,
    pub bootstrap_terminal: bool,
    /// `Q^mu` source inside the TayPO estimators.
    pub taypo_q: TaypoQ,
    /// Derivative orders to score (1 = gradient, 2 = Hessian).
    pub orders: Vec<usize>,
    pub num_seeds: usize,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mdp: RandomMdpParams::default(),
            epsilon_grid: (0..10).map(|i| i as f64 / 10.0).collect(),
            sample_grid: vec![10, 30, 100, 300, 1000, 3000],
            epsilon: 0.5,
            num_samples: 1000,
            estimators: default_estimators(),
            critic: CriticSpec::ExactQMu,
            bootstrap_terminal: false,
            taypo_q: TaypoQ::Advantage,
            orders: vec![1, 2],
            num_seeds: 10,
            master_seed: 0,
        }
    }
}

pub fn default_estimators() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::StepIs,
        EstimatorKind::Dr,
        EstimatorKind::TruncatedDr {
            rho_bar: DEFAULT_RHO_BAR,
        },
        EstimatorKind::Taypo { order: 1 },
        EstimatorKind::Taypo { order: 2 },
    ]
}

impl ExperimentConfig {
    pub fn validate(&self, axis: SweepAxis) -> Result<()> {
        let grid_len = match axis {
            SweepAxis::Epsilon => self.epsilon_grid.len(),
            SweepAxis::Samples => self.sample_grid.len(),
        };
        if grid_len == 0 {
            return Err(Error::InvalidArgument("sweep grid is empty".into()));
        }
        if self.num_seeds == 0 {
            return Err(Error::InvalidArgument(
                "num_seeds must be at least 1".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidArgument("no estimators selected".into()));
        }
        if self.orders.is_empty() || self.orders.iter().any(|&m| m != 1 && m != 2) {
            return Err(Error::InvalidArgument(
                "derivative orders must be 1 and/or 2".into(),
            ));
        }
        if self.num_samples == 0 || self.sample_grid.contains(&0) {
            return Err(Error::InvalidArgument(
                "sample sizes must be positive".into(),
            ));
        }
        for e in self.epsilon_grid.iter().chain([&self.epsilon]) {
            if !(0.0..=1.0).contains(e) {
                return Err(Error::InvalidArgument(format!(
                    "epsilon {e} outside [0, 1]"
                )));
            }
        }
        for k in &self.estimators {
            k.validate()?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One CSV line. Aggregate rows carry `seed = "mean"` or `"stderr"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_axis: String,
    pub sweep_value: String,
    pub seed: String,
    pub estimator: String,
    pub critic: String,
    pub derivative_order: usize,
    pub accuracy: f64,
    pub n_samples: usize,
    pub epsilon_mixture: f64,
    pub l1_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Cells where an estimate had zero norm and scored 0.
    pub warnings: Vec<String>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
    }

    /// Aggregate row for `(value, estimator, order)` with the given flag.
    pub fn aggregate(
        &self,
        value: &str,
        estimator: &str,
        order: usize,
        which: &str,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.sweep_value == value
                    && r.estimator == estimator
                    && r.derivative_order == order
                    && r.seed == which
            })
            .map(|r| r.accuracy)
    }

    pub fn mean(&self, value: &str, estimator: &str, order: usize) -> Option<f64> {
        self.aggregate(value, estimator, order, "mean")
    }

    pub fn stderr(&self, value: &str, estimator: &str, order: usize) -> Option<f64> {
        self.aggregate(value, estimator, order, "stderr")
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Formats a sweep value as it appears in the CSV.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// Seed-level ingredients shared by every cell with the same seed index.
fn seed_mdp(config: &ExperimentConfig, seed_index: usize) -> Result<TabularMdp> {
    generate_random_mdp(
        &config.mdp,
        substream_seed(config.master_seed, &[TAG_MDP, seed_index as u64]),
    )
}

struct CellResult {
    /// Accuracy per (estimator, order), estimator-major.
    accuracies: Vec<f64>,
    l1_distance: f64,
    warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
    epsilon: f64,
    n: usize,
    seed_index: usize,
    mdp: &TabularMdp,
    exec: Exec,
) -> Result<CellResult> {
    let pair = make_offpolicy_pair(
        mdp,
        epsilon,
        substream_seed(config.master_seed, &[TAG_POLICY, seed_index as u64]),
    )?;
    let truth = exact_value_dp(mdp, &pair.theta, None)?;
    let cell_key = [axis.tag(), value.to_bits(), seed_index as u64];
    let trajs: Vec<Trajectory> = try_map_indexed(exec, n, |i| {
        let mut tags = vec![TAG_TRAJECTORY];
        tags.extend_from_slice(&cell_key);
        tags.push(i as u64);
        let mut rng = substream(config.master_seed, &tags);
        sample_trajectory(mdp, &pair.behavior, None, &mut rng)
    })?;
    let mut accuracies = Vec::new();
    let mut warnings = Vec::new();
    for &m in &config.orders {
        let truth_tensor = if m == 1 { &truth.grad } else { &truth.hess };
        if l2_norm(truth_tensor) == 0.0 {
            let msg = format!(
                "{}={} seed={} order={}: true derivative is zero, accuracy recorded as NaN",
                axis.name(),
                format_value(value),
                seed_index,
                m
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }
    for (k, kind) in config.estimators.iter().enumerate() {
        let est_config = EstimatorConfig {
            kind: *kind,
            critic: config.critic.clone(),
            bootstrap_terminal: config.bootstrap_terminal,
            taypo_q: config.taypo_q,
        };
        let est = Estimator::new(est_config, mdp, &pair.theta, &pair.behavior, None)?;
        let mut tags = vec![TAG_ESTIMATOR];
        tags.extend_from_slice(&cell_key);
        tags.push(k as u64);
        let mean = est.mean_estimate(&trajs, substream_seed(config.master_seed, &tags), exec)?;
        for &m in &config.orders {
            let scored = if m == 1 {
                accuracy(mean.grad(), &truth.grad)
            } else {
                accuracy(&mean.hessian_dense(), &truth.hess)
            };
            let (acc, zero) = match scored {
                Err(Error::ZeroNormTruth) => (f64::NAN, false),
                other => other?,
            };
            if zero {
                let msg = format!(
                    "{}={} seed={} estimator={} order={}: zero-norm estimate scored 0",
                    axis.name(),
                    format_value(value),
                    seed_index,
                    kind.label(),
                    m
                );
                warn!("{msg}");
                warnings.push(msg);
            }
            accuracies.push(acc);
        }
    }
    Ok(CellResult {
        accuracies,
        l1_distance: pair.l1_distance(),
        warnings,
    })
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`; 0 for
/// a single value). NaN entries are skipped; all-NaN input gives NaN.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let values: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_sweep(config: &ExperimentConfig, axis: SweepAxis, exec: Exec) -> Result<SweepReport> {
    config.validate(axis)?;
    let values: Vec<f64> = match axis {
        SweepAxis::Epsilon => config.epsilon_grid.clone(),
        SweepAxis::Samples => config.sample_grid.iter().map(|&n| n as f64).collect(),
    };
    let seeds = config.num_seeds;
    let mdps = try_map_indexed(exec, seeds, |s| seed_mdp(config, s))?;
    let cells = try_map_indexed(exec, values.len() * seeds, |c| {
        let (vi, s) = (c / seeds, c % seeds);
        let value = values[vi];
        let (epsilon, n) = match axis {
            SweepAxis::Epsilon => (value, config.num_samples),
            SweepAxis::Samples => (config.epsilon, config.sample_grid[vi]),
        };
        run_cell(config, axis, value, epsilon, n, s, &mdps[s], exec)
    })?;

    let critic = config.critic.label().to_string();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (vi, &value) in values.iter().enumerate() {
        let (epsilon, n) = match axis {
            SweepAxis::Epsilon => (value, config.num_samples),
            SweepAxis::Samples => (config.epsilon, config.sample_grid[vi]),
        };
        let cell_rows = &cells[vi * seeds..(vi + 1) * seeds];
        let row =
            |seed: String, estimator: &EstimatorKind, order: usize, acc: f64, l1: f64| SweepRow {
                sweep_axis: axis.name().to_string(),
                sweep_value: format_value(value),
                seed,
                estimator: estimator.label(),
                critic: critic.clone(),
                derivative_order: order,
                accuracy: acc,
                n_samples: n,
                epsilon_mixture: epsilon,
                l1_distance: l1,
            };
        for (s, cell) in cell_rows.iter().enumerate() {
            warnings.extend(cell.warnings.iter().cloned());
            let mut idx = 0;
            for kind in &config.estimators {
                for &m in &config.orders {
                    rows.push(row(
                        s.to_string(),
                        kind,
                        m,
                        cell.accuracies[idx],
                        cell.l1_distance,
                    ));
                    idx += 1;
                }
            }
        }
        let l1s: Vec<f64> = cell_rows.iter().map(|c| c.l1_distance).collect();
        let (l1_mean, _) = mean_and_stderr(&l1s);
        let mut idx = 0;
        for kind in &config.estimators {
            for &m in &config.orders {
                let accs: Vec<f64> = cell_rows.iter().map(|c| c.accuracies[idx]).collect();
                let (mean, se) = mean_and_stderr(&accs);
                rows.push(row("mean".into(), kind, m, mean, l1_mean));
                rows.push(row("stderr".into(), kind, m, se, l1_mean));
                idx += 1;
            }
        }
    }
    Ok(SweepReport {
        axis,
        rows,
        warnings,
    })
}

/// Accuracy of each estimator as a function of the mixture coefficient at a
/// fixed sample size.
pub fn run_offpolicy_sweep(config: &ExperimentConfig, exec: Exec) -> Result<SweepReport> {
    run_sweep(config, SweepAxis::Epsilon, exec)
}

/// Accuracy of each estimator as a function of the sample size at a fixed
/// mixture coefficient.
pub fn run_sample_sweep(config: &ExperimentConfig, exec: Exec) -> Result<SweepReport> {
    run_sweep(config, SweepAxis::Samples, exec)
}

/// Gnuplot script plotting mean accuracy with standard-error bars for every
/// estimator at one derivative order.
pub fn gnuplot_template(
    csv_path: &str,
    axis: SweepAxis,
    estimators: &[EstimatorKind],
    order: usize,
) -> String {
    let mut s = String::new();
    s.push_str("# Mean accuracy with standard-error bars.\n");
    s.push_str("set datafile separator ','\n");
    s.push_str("set key outside right\n");
    s.push_str(&format!("set xlabel '{}'\n", axis.name()));
    s.push_str(&format!(
        "set ylabel 'accuracy ({})'\n",
        if order == 1 { "gradient" } else { "Hessian" }
    ));
    if axis == SweepAxis::Samples {
        s.push_str("set logscale x\n");
    }
    s.push_str("set yrange [-1:1]\n");
    // CSV columns: 2 = sweep_value, 3 = seed, 4 = estimator, 6 = order, 7 = accuracy.
    // Each mean row precedes its stderr row, so awk can pair them.
    let plots: Vec<String> = estimators
        .iter()
        .map(|k| {
            let label = k.label();
            format!(
                "'< awk -F, -v e={label} -v m={order} ''$4==e && $6==m && $3==\"mean\" {{a=$7}} \
                 $4==e && $6==m && $3==\"stderr\" {{print $2\",\"a\",\"$7}}'' {csv_path}' \
                 using 1:2:3 with yerrorlines title '{label}'"
            )
        })
        .collect();
    s.push_str("plot ");
    s.push_str(&plots.join(", \\\n     "));
    s.push('\n');
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparison {
    /// Passes when the measured error is at most the tolerance.
    Below,
    /// Passes when the measured quantity exceeds the threshold.
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
    pub comparison: Comparison,
}

impl CheckResult {
    fn below(name: &str, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            passed: max_error <= tolerance,
            max_error,
            tolerance,
            comparison: Comparison::Below,
        }
    }

    fn above(name: &str, measured: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.into(),
            passed: measured > threshold,
            max_error: measured,
            tolerance: threshold,
            comparison: Comparison::Above,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Signature of the closed-form DR derivative routine under validation.
pub type AnalyticDr =
    dyn Fn(&PolicyParams, &EvalContext, &Trajectory) -> Result<DrDerivatives> + Sync;

fn tiny_params(states: usize, actions: usize, horizon: usize) -> RandomMdpParams {
    RandomMdpParams {
        num_states: states,
        num_actions: actions,
        dirichlet_alpha: 1.0,
        gamma: 0.8,
        horizon,
        start_state: 0,
        num_goals: 1,
    }
}

fn report_diff(a: &DerivativeReport, b: &DerivativeReport) -> f64 {
    (a.value - b.value)
        .abs()
        .max(a.max_grad_diff(b))
        .max(a.max_hess_diff(b))
}

/// Runs every enumeration-based exactness check on seeded tiny MDPs.
pub fn run_validation_suite(exec: Exec) -> Result<ValidationReport> {
    run_validation_suite_with(
        &|theta, ctx, traj| dr_derivatives_analytic(theta, ctx, traj),
        exec,
    )
}

/// [`run_validation_suite`] with a replaceable closed-form DR routine, so a
/// deliberately broken implementation can be shown to fail.
pub fn run_validation_suite_with(analytic: &AnalyticDr, exec: Exec) -> Result<ValidationReport> {
    let budget = DEFAULT_ENUMERATION_BUDGET;
    let mut checks = Vec::new();
    let mdp = generate_random_mdp(&tiny_params(3, 2, 4), 1)?;

    // DP and enumeration agree.
    let theta = make_offpolicy_pair(&mdp, 0.5, 1)?.theta;
    let dp = exact_value_dp(&mdp, &theta, None)?;
    let en = exact_value_enumeration(&mdp, &theta, None, budget, exec)?;
    checks.push(CheckResult::below(
        "oracle_dp_matches_enumeration",
        report_diff(&dp, &en),
        1e-10,
    ));

    // Unbiasedness of step-IS and DR, all derivative orders.
    let mut is_err: f64 = 0.0;
    let mut dr_err: f64 = 0.0;
    for eps in [0.0, 0.3, 0.7] {
        let pair = make_offpolicy_pair(&mdp, eps, 2)?;
        let truth = exact_value_dp(&mdp, &pair.theta, None)?;
        for (kind, critic, err) in [
            (EstimatorKind::StepIs, CriticSpec::Zero, &mut is_err),
            (EstimatorKind::Dr, CriticSpec::ExactQMu, &mut dr_err),
        ] {
            let est = exact_expected_estimate(
                &mdp,
                &pair.theta,
                &pair.behavior,
                &EstimatorConfig::new(kind, critic),
                None,
                budget,
                exec,
            )?;
            *err = err.max(report_diff(&truth, &est));
        }
    }
    checks.push(CheckResult::below("step_is_unbiased", is_err, 1e-8));
    checks.push(CheckResult::below("dr_unbiased", dr_err, 1e-8));

    // TayPO-K keeps derivatives up to order K on-policy.
    let pair = make_offpolicy_pair(&mdp, 0.0, 3)?;
    let truth = exact_value_dp(&mdp, &pair.theta, None)?;
    let expect = |order| {
        exact_expected_estimate(
            &mdp,
            &pair.theta,
            &pair.behavior,
            &EstimatorConfig::new(EstimatorKind::Taypo { order }, CriticSpec::ExactQMu),
            None,
            budget,
            exec,
        )
    };
    let (k1, k2) = (expect(1)?, expect(2)?);
    checks.push(CheckResult::below(
        "taypo_preserves_low_orders",
        k1.max_grad_diff(&truth)
            .max(k2.max_grad_diff(&truth))
            .max(k2.max_hess_diff(&truth)),
        1e-8,
    ));
    let bias = k1
        .hess
        .iter()
        .zip(&truth.hess)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    checks.push(CheckResult::above("taypo1_hessian_biased", bias, 1e-4));

    // Closed-form DR derivatives against Taylor2.
    let mut max_err: f64 = 0.0;
    for seed in 0..5u64 {
        let m = generate_random_mdp(&tiny_params(4, 3, 6), 10 + seed)?;
        let pair = make_offpolicy_pair(&m, 0.4, seed)?;
        let critic = CriticSpec::ExactQMu.resolve(&m, &pair.theta, &pair.behavior, None)?;
        let ctx = EvalContext::new(&pair.theta, critic, Some(&pair.behavior), m.gamma(), false)?;
        let mut rng = substream(seed, &[TAG_TRAJECTORY]);
        for _ in 0..20 {
            let traj = sample_trajectory(&m, &pair.behavior, None, &mut rng)?;
            let auto = eval_dr(&ctx, &traj)?;
            let ana = analytic(&pair.theta, &ctx, &traj)?;
            let d = pair.theta.dim();
            max_err = max_err.max((auto.value() - ana.value).abs());
            for i in 0..d {
                max_err = max_err.max((auto.grad()[i] - ana.grad[i]).abs());
                for j in 0..d {
                    max_err = max_err.max((auto.hess(i, j) - ana.hess[(i, j)]).abs());
                }
            }
        }
    }
    checks.push(CheckResult::below(
        "dr_recursion_matches_autodiff",
        max_err,
        1e-10,
    ));

    // Taylor residuals decay when the policies are close.
    let pair = make_offpolicy_pair(&mdp, 0.05, 4)?;
    let v = exact_value_dp(&mdp, &pair.theta, None)?.value;
    let inc = exact_increments(
        &mdp,
        &pair.theta,
        &pair.behavior,
        mdp.horizon(),
        None,
        budget,
        exec,
    )?;
    let mut partial = 0.0;
    let mut last = f64::INFINITY;
    let mut worst_increase: f64 = 0.0;
    for u in &inc {
        partial += u;
        let r = (v - partial).abs();
        worst_increase = worst_increase.max(r - last);
        last = r;
    }
    checks.push(CheckResult::below(
        "taylor_residual_non_increasing",
        worst_increase.max(0.0),
        1e-15,
    ));
    checks.push(CheckResult::below(
        "taylor_full_expansion_exact",
        last,
        1e-6,
    ));

    // TMAML audit.
    let bandit = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![vec![0.0, 0.0]], 0.5, 1, 0)?;
    let audit = expected_tmaml_hessian(
        &bandit,
        &PolicyParams::zeros(1, 2),
        &BaselineTable::constant(1, 1.0),
        budget,
        exec,
    )?;
    let want = [[0.5, -0.5], [-0.5, 0.5]];
    let mut err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            err = err.max((audit.expected_hessian[i][j] - want[i][j]).abs());
        }
    }
    checks.push(CheckResult::below(
        "tmaml_uniform_bandit_hessian",
        err,
        1e-10,
    ));
    let theta = make_offpolicy_pair(&mdp, 0.5, 5)?.theta;
    let audit =
        expected_tmaml_hessian(&mdp, &theta, &BaselineTable::constant(3, 1.0), budget, exec)?;
    checks.push(CheckResult::below(
        "tmaml_cross_term_vanishes",
        audit.max_abs_cross_term,
        1e-10,
    ));
    checks.push(CheckResult::below(
        "tmaml_closed_form_identity",
        audit.identity_error,
        1e-10,
    ));
    checks.push(CheckResult::above(
        "tmaml_hessian_nonzero",
        audit.frobenius_norm,
        1e-3,
    ));

    // Exact meta-gradient against finite differences of F.
    let eta = 0.5;
    let g = exact_meta_gradient(&mdp, &theta, &[None], eta)?;
    let h = 1e-5;
    let mut rel: f64 = 0.0;
    for i in 0..theta.dim() {
        let mut e = vec![0.0; theta.dim()];
        e[i] = 1.0;
        let plus = meta_objective_exact(&mdp, &theta.offset(h, &e)?, eta, None)?;
        let minus = meta_objective_exact(&mdp, &theta.offset(-h, &e)?, eta, None)?;
        let fd = (plus - minus) / (2.0 * h);
        rel = rel.max((fd - g[i]).abs() / g[i].abs().max(1e-3));
    }
    checks.push(CheckResult::below(
        "meta_gradient_finite_differences",
        rel,
        1e-4,
    ));

    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
