//! Bulk marking, the adaptive loop and the tools to analyse its output.

use std::collections::HashMap;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::estimate::{
    data_oscillation, indicators_for_field, oscillations_for_field, EstimateError, EstimatorKind, IndicatorReport,
};
use crate::fem::{solve_problem_with, FemError, MixedSolution, SolverKind};
use crate::mesh::{ElemKey, Mesh, MeshError};
use crate::par::Execution;
use crate::problems::{exact_errors_with, reference_errors, ErrorTriple, ProblemError, ProblemSpec, ScalarField};

#[derive(Debug, Error)]
pub enum AdaptError {
    #[error("theta {0} outside (0, 1]")]
    InvalidTheta(f64),
    #[error("bisection count must be at least 1")]
    InvalidB,
    #[error("no stopping rule: set a positive tolerance or a dof budget")]
    NoStopping,
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("empty indicator report")]
    EmptyReport,
    #[error("need at least {needed} usable rows for a fit, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("iteration cap {0} reached before the tolerance was met")]
    IterationCap(usize),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// Elements selected by bulk marking.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkSet {
    /// Ascending element ids.
    pub ids: Vec<usize>,
    pub marked_sum: f64,
    pub total: f64,
    pub theta_used: f64,
    /// Set when every indicator vanished; `ids` is then empty.
    pub all_zero: bool,
}

impl MarkSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Minimal-cardinality Dörfler set for the local squared indicators `eta2`.
///
/// Indicators are visited in descending order (ties by ascending id) and the
/// shortest prefix with `sum >= theta^2 * total` is taken.
pub fn dorfler_mark_values(eta2: &[f64], theta: f64) -> Result<MarkSet, AdaptError> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(AdaptError::InvalidTheta(theta));
    }
    if eta2.is_empty() {
        return Err(AdaptError::EmptyReport);
    }
    let mut order: Vec<usize> = (0..eta2.len()).collect();
    order.sort_by(|&a, &b| eta2[b].total_cmp(&eta2[a]).then(a.cmp(&b)));
    let total = order.iter().fold(0.0, |s, &t| s + eta2[t]);
    if total <= 0.0 {
        return Ok(MarkSet {
            ids: Vec::new(),
            marked_sum: 0.0,
            total,
            theta_used: theta,
            all_zero: true,
        });
    }
    let target = theta * theta * total;
    let mut sum = 0.0;
    let mut count = 0;
    for &t in &order {
        if eta2[t] <= 0.0 || (theta < 1.0 && sum >= target) {
            break;
        }
        sum += eta2[t];
        count += 1;
    }
    let mut ids = order[..count].to_vec();
    ids.sort_unstable();
    Ok(MarkSet {
        ids,
        marked_sum: sum,
        total,
        theta_used: theta,
        all_zero: false,
    })
}

pub fn dorfler_mark(report: &IndicatorReport, theta: f64) -> Result<MarkSet, AdaptError> {
    dorfler_mark_values(&report.locals(), theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Adaptive,
    Uniform,
    TwoStep,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adaptive" => Ok(Mode::Adaptive),
            "uniform" => Ok(Mode::Uniform),
            "two_step" | "two-step" => Ok(Mode::TwoStep),
            _ => Err(format!("unknown mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub theta: f64,
    pub b: u32,
    /// Stop once `eta < eps`.
    pub eps: Option<f64>,
    /// Never solve on a mesh with more flux dofs than this.
    pub max_dofs: Option<usize>,
    pub max_iter: usize,
    pub mode: Mode,
    /// Indicator used for marking and for the `eta2` column.
    pub estimator: EstimatorKind,
    /// Weight of the estimator in the logged quasi-error.
    pub gamma: f64,
    pub solver: SolverKind,
    pub execution: Execution,
    /// Fill error columns from a reference solution when no exact solution exists.
    pub surrogate: bool,
    /// Record wall time; off by default so traces are reproducible byte for byte.
    pub timing: bool,
    /// Bulk parameter of the data approximation step.
    pub approx_theta: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            theta: 0.5,
            b: 1,
            eps: Some(1e-3),
            max_dofs: Some(100_000),
            max_iter: 200,
            mode: Mode::Adaptive,
            estimator: EstimatorKind::Stress,
            gamma: 1.0,
            solver: SolverKind::Direct,
            execution: Execution::default(),
            surrogate: true,
            timing: false,
            approx_theta: 0.6,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(AdaptError::InvalidTheta(self.theta));
        }
        if self.b == 0 {
            return Err(AdaptError::InvalidB);
        }
        match self.eps {
            Some(e) if !(e > 0.0) => return Err(AdaptError::InvalidTolerance(e)),
            None if self.max_dofs.is_none() => return Err(AdaptError::NoStopping),
            _ => {}
        }
        if let EstimatorKind::Full { kappa } = self.estimator {
            if !(0.0..=1.0).contains(&kappa) {
                return Err(EstimateError::InvalidKappa(kappa).into());
            }
        }
        Ok(())
    }
}

/// One iteration of the loop.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TraceRow {
    pub k: usize,
    pub n_elem: usize,
    pub n_flux_dofs: usize,
    pub eta2: f64,
    pub osc2: f64,
    pub osc_f2: f64,
    pub n_marked: usize,
    pub e2: Option<f64>,
    pub quasi_err: Option<f64>,
    pub secs: f64,
    pub errors: Option<ErrorTriple>,
    /// `(#T_k - #T_0) / sum_{j<k} #M_j`, from `k = 1` on.
    pub complexity: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    Budget,
    IterationCap,
    /// All indicators vanished; nothing left to mark.
    ZeroEstimator,
    Failed,
}

/// A solved mesh of the sequence together with its marking.
#[derive(Debug, Clone)]
pub struct Step {
    pub mesh: Mesh,
    pub solution: MixedSolution,
    pub indicators: IndicatorReport,
    pub marks: Option<MarkSet>,
    /// Elements of `mesh` that were bisected to reach the next mesh.
    pub refined: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub rows: Vec<TraceRow>,
    pub steps: Vec<Step>,
    pub stop: StopReason,
    pub failure: Option<String>,
    pub surrogate: bool,
    pub n_initial: usize,
    /// Data approximation phase of the two-step driver.
    pub approx: Option<ApproxResult>,
}

impl AdaptRun {
    pub fn final_step(&self) -> Option<&Step> {
        self.steps.last()
    }

    pub fn max_complexity(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.complexity).fold(0.0, f64::max)
    }

    /// `eta_k / sqrt(E_k^2 + osc_k^2)` for every row with an error.
    pub fn efficiency_indices(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.e2.map(|e2| (r.eta2 / (e2 + r.osc2)).sqrt()))
            .collect()
    }

    /// `(#T_k, value)` pairs for a rate fit.
    pub fn series(&self, column: ErrorColumn) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| {
                let v = match column {
                    ErrorColumn::Flux => r.errors?.flux_err,
                    ErrorColumn::Energy => r.e2?.sqrt(),
                    ErrorColumn::Displacement => r.errors?.disp_err,
                    ErrorColumn::Estimator => r.eta2.sqrt(),
                };
                Some((r.n_elem, v))
            })
            .collect()
    }

    pub fn fit(&self, column: ErrorColumn, burn_in: usize) -> Result<RateFit, AdaptError> {
        fit_rate(&self.series(column), self.n_initial, burn_in)
    }

    pub fn contraction(&self, grid: &[f64]) -> Option<ContractionScan> {
        let pairs: Option<Vec<(f64, f64)>> = self.rows.iter().map(|r| r.e2.map(|e| (e, r.eta2))).collect();
        contraction_scan(&pairs?, grid)
    }
}

fn solve_on(mesh: &Mesh, problem: &ProblemSpec, cfg: &AdaptConfig) -> Result<MixedSolution, FemError> {
    solve_problem_with(cfg.execution, mesh, problem, cfg.solver)
}

/// The solve, estimate, mark, refine loop started from the problem's initial mesh.
pub fn amfem(problem: &ProblemSpec, cfg: &AdaptConfig) -> Result<AdaptRun, AdaptError> {
    match cfg.mode {
        Mode::TwoStep => two_step(problem, cfg),
        _ => amfem_from(problem.initial_mesh()?, problem, problem, cfg),
    }
}

/// Runs the loop from `mesh0`. Errors are measured against `reference`, which
/// carries the exact solution (it differs from `problem` in the two-step driver).
pub fn amfem_from(
    mesh0: Mesh,
    problem: &ProblemSpec,
    reference: &ProblemSpec,
    cfg: &AdaptConfig,
) -> Result<AdaptRun, AdaptError> {
    cfg.validate()?;
    let n0 = mesh0.n_elements();
    let mut run = AdaptRun {
        rows: Vec::new(),
        steps: Vec::new(),
        stop: StopReason::IterationCap,
        failure: None,
        surrogate: false,
        n_initial: n0,
        approx: None,
    };
    let mut mesh = mesh0;
    let mut cumulative_marked = 0usize;
    for k in 0..cfg.max_iter {
        if cfg.max_dofs.is_some_and(|cap| mesh.n_edges() > cap) {
            run.stop = StopReason::Budget;
            break;
        }
        let start = Instant::now();
        let outcome = (|| -> Result<_, AdaptError> {
            let sol = solve_on(&mesh, problem, cfg)?;
            let ind = indicators_for_field(cfg.execution, &mesh, &sol.p, &sol.f_h, problem, cfg.estimator)?;
            let osc = oscillations_for_field(cfg.execution, &mesh, &sol.p, &sol.f_h, problem)?;
            let errors = match reference.exact {
                Some(_) => Some(exact_errors_with(cfg.execution, &mesh, &sol, reference)?),
                None => None,
            };
            Ok((sol, ind, osc, errors))
        })();
        let (sol, ind, osc, errors) = match outcome {
            Ok(v) => v,
            Err(e) => {
                run.stop = StopReason::Failed;
                run.failure = Some(e.to_string());
                return Ok(run);
            }
        };
        let eta2 = ind.total();
        let converged = cfg.eps.is_some_and(|eps| eta2.sqrt() < eps);
        let marks = if converged {
            None
        } else {
            match cfg.mode {
                Mode::Uniform => {
                    let ids: Vec<usize> = (0..mesh.n_elements()).collect();
                    Some(MarkSet {
                        marked_sum: ind.sum_over(&ids),
                        ids,
                        total: eta2,
                        theta_used: 1.0,
                        all_zero: false,
                    })
                }
                _ => Some(dorfler_mark(&ind, cfg.theta)?),
            }
        };
        let e2 = errors.map(|e| e.weighted_sq());
        run.rows.push(TraceRow {
            k,
            n_elem: mesh.n_elements(),
            n_flux_dofs: mesh.n_edges(),
            eta2,
            osc2: osc.osc2(),
            osc_f2: osc.osc_f2(),
            n_marked: marks.as_ref().map_or(0, |m| m.len()),
            e2,
            quasi_err: e2.map(|e| e + cfg.gamma * eta2),
            secs: if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
            errors,
            complexity: (k > 0).then(|| (mesh.n_elements() - n0) as f64 / cumulative_marked as f64),
        });
        let step_mesh = mesh.clone();
        let mut step = Step {
            mesh: step_mesh,
            solution: sol,
            indicators: ind,
            marks: marks.clone(),
            refined: Vec::new(),
        };
        match marks {
            None => {
                run.steps.push(step);
                run.stop = StopReason::Converged;
                break;
            }
            Some(m) if m.all_zero => {
                run.steps.push(step);
                run.stop = StopReason::ZeroEstimator;
                break;
            }
            Some(m) => {
                let refined = mesh.refine(&m.ids, cfg.b)?;
                cumulative_marked += m.len();
                step.refined = refined.refined_set;
                run.steps.push(step);
                mesh = refined.mesh;
            }
        }
    }
    if reference.exact.is_none() && cfg.surrogate && !run.steps.is_empty() {
        if let Err(e) = fill_surrogate(&mut run, reference, cfg) {
            run.failure = Some(format!("reference solve: {e}"));
        }
    }
    Ok(run)
}

/// Errors against a reference solution on the last mesh refined twice more uniformly.
fn fill_surrogate(run: &mut AdaptRun, problem: &ProblemSpec, cfg: &AdaptConfig) -> Result<(), AdaptError> {
    let last = &run.steps.last().expect("nonempty").mesh;
    let ref_mesh = last.refine_uniform(2)?;
    let ref_sol = solve_on(&ref_mesh, problem, cfg)?;
    for (row, step) in run.rows.iter_mut().zip(&run.steps) {
        let err = reference_errors(&step.mesh, &step.solution, &ref_mesh, &ref_sol, problem)?;
        let e2 = err.weighted_sq();
        row.errors = Some(err);
        row.e2 = Some(e2);
        row.quasi_err = Some(e2 + cfg.gamma * row.eta2);
    }
    run.surrogate = true;
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct ApproxResult {
    #[serde(skip)]
    pub mesh: Option<Mesh>,
    /// `(#T, osc(f, T))` for every visited mesh.
    pub history: Vec<(usize, f64)>,
    pub eps: f64,
}

/// Greedy data approximation: refine by bulk marking of `osc(f, T)^2` until
/// `osc(f, T_H) <= eps`.
pub fn approx_data(
    f: &ScalarField,
    mesh0: &Mesh,
    eps: f64,
    theta: f64,
    max_iter: usize,
) -> Result<ApproxResult, AdaptError> {
    if !(eps > 0.0) {
        return Err(AdaptError::InvalidTolerance(eps));
    }
    let mut mesh = mesh0.clone();
    let mut history = Vec::new();
    for _ in 0..=max_iter {
        let osc = data_oscillation(&mesh, f)?;
        let total = osc.iter().fold(0.0, |s, v| s + v).sqrt();
        history.push((mesh.n_elements(), total));
        if total <= eps {
            return Ok(ApproxResult {
                mesh: Some(mesh),
                history,
                eps,
            });
        }
        let marks = dorfler_mark_values(&osc, theta)?;
        mesh = mesh.refine(&marks.ids, 1)?.mesh;
    }
    Err(AdaptError::IterationCap(max_iter))
}

/// Piecewise-constant field taking `values[t]` on element `t` of `mesh` and on
/// all of its descendants.
pub fn piecewise_constant(mesh: &Mesh, values: &[f64]) -> ScalarField {
    let lookup: HashMap<ElemKey, f64> = mesh.keys().iter().copied().zip(values.iter().copied()).collect();
    ScalarField::new(move |_, key| {
        let mut cur = Some(key);
        while let Some(k) = cur {
            if let Some(&v) = lookup.get(&k) {
                return v;
            }
            cur = k.parent();
        }
        f64::NAN
    })
}

/// Data approximation to `eps / 2`, then the adaptive loop with the projected
/// source and tolerance `eps / 2`.
pub fn two_step(problem: &ProblemSpec, cfg: &AdaptConfig) -> Result<AdaptRun, AdaptError> {
    cfg.validate()?;
    let eps = cfg.eps.ok_or(AdaptError::NoStopping)?;
    let mesh0 = problem.initial_mesh()?;
    let mut approx = approx_data(&problem.f, &mesh0, eps / 2.0, cfg.approx_theta, cfg.max_iter)?;
    let mesh_h = approx.mesh.take().expect("approx mesh");
    let f_h = crate::fem::project_f(&problem.f, &mesh_h)?;
    let projected = problem.with_source(&problem.name, piecewise_constant(&mesh_h, &f_h));
    let inner = AdaptConfig {
        eps: Some(eps / 2.0),
        mode: Mode::Adaptive,
        ..cfg.clone()
    };
    let mut run = amfem_from(mesh_h, &projected, problem, &inner)?;
    run.n_initial = mesh0.n_elements();
    run.approx = Some(approx);
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorColumn {
    /// `||A^{-1/2}(p - p_h)||`.
    Flux,
    /// `sqrt(E^2)` including the weighted divergence error.
    Energy,
    Displacement,
    Estimator,
}

/// Least-squares fit of `log(err) = c - s log(#T - #T_0)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub s: f64,
    pub intercept: f64,
    pub std_err: f64,
    /// 95% confidence band for `s`.
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

pub fn fit_rate(series: &[(usize, f64)], n0: usize, burn_in: usize) -> Result<RateFit, AdaptError> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .skip(burn_in)
        .filter(|&&(n, e)| n > n0 && e > 0.0)
        .map(|&(n, e)| (((n - n0) as f64).ln(), e.ln()))
        .collect();
    let n = pts.len();
    if n < 3 {
        return Err(AdaptError::InsufficientRows { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if !(sxx > 0.0) {
        return Err(AdaptError::InsufficientRows { needed: 3, got: 1 });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let std_err = (rss / (nf - 2.0) / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, nf - 2.0).map_or(f64::NAN, |d| d.inverse_cdf(0.975));
    Ok(RateFit {
        s: -slope,
        intercept,
        std_err,
        lower: -slope - t * std_err,
        upper: -slope + t * std_err,
        points: n,
    })
}

/// Log-spaced grid `10^-3 ... 10^1` in half decades.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=8).map(|i| 10f64.powf(-3.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ContractionScan {
    pub best_gamma: f64,
    pub best_ratio: f64,
    /// `(gamma, max_k q_{k+1} / q_k)`.
    pub ratios: Vec<(f64, f64)>,
}

/// For each `gamma`, the worst one-step ratio of `E^2 + gamma eta^2` over
/// consecutive `(E^2, eta^2)` pairs.
pub fn contraction_scan(pairs: &[(f64, f64)], grid: &[f64]) -> Option<ContractionScan> {
    if pairs.len() < 2 || grid.is_empty() {
        return None;
    }
    let ratios: Vec<(f64, f64)> = grid
        .iter()
        .map(|&g| {
            let q: Vec<f64> = pairs.iter().map(|&(e, eta)| e + g * eta).collect();
            let worst = q.windows(2).map(|w| w[1] / w[0]).fold(f64::NEG_INFINITY, f64::max);
            (g, worst)
        })
        .collect();
    let &(best_gamma, best_ratio) = ratios.iter().min_by(|a, b| a.1.total_cmp(&b.1))?;
    Some(ContractionScan {
        best_gamma,
        best_ratio,
        ratios,
    })
}
