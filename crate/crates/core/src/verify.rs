//! Randomized and run-based property suites. Each check reports the measured
//! quantity next to the bound it is compared with.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{amfem, dorfler_mark_values, AdaptConfig, AdaptError, AdaptRun, Mode};
use crate::estimate::{indicators_for_field, oscillations_for_field, EstimatorKind};
use crate::fem::{prolongate_flux, project_f, solve_problem, MixedSolution, SolverKind};
use crate::mesh::{Domain, Mesh};
use crate::par::Execution;
use crate::problems::{reference_errors, ProblemSpec};

pub const SUITES: [&str; 7] = ["mesh", "dorfler", "pythagoras", "reduction", "oscillation", "upper_bound", "all"];

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
}

impl Check {
    /// Passes when `measured <= bound`.
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64, detail: impl Into<String>) -> Check {
        Check {
            name: name.into(),
            passed: measured <= bound,
            measured,
            bound,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Report {
    pub suite: String,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("unknown suite `{0}` (expected one of {SUITES:?})")]
    UnknownSuite(String),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

pub fn run_suite(name: &str, seed: u64) -> Result<Report, VerifyError> {
    let checks = match name {
        "mesh" => mesh_suite(seed)?,
        "dorfler" => dorfler_suite(seed, 100),
        "pythagoras" => pythagoras_suite()?,
        "reduction" => reduction_suite()?,
        "oscillation" => oscillation_suite()?,
        "upper_bound" => upper_bound_suite()?,
        "all" => {
            let mut all = Vec::new();
            for s in &SUITES[..SUITES.len() - 1] {
                all.extend(run_suite(s, seed)?.checks);
            }
            all
        }
        other => return Err(VerifyError::UnknownSuite(other.to_string())),
    };
    Ok(Report {
        suite: name.to_string(),
        seed,
        checks,
    })
}

/// `max_T |div p_h + f_h| / (1 + |f_h|_inf)`.
pub fn div_exactness(mesh: &Mesh, sol: &MixedSolution) -> f64 {
    let scale = 1.0 + sol.f_h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    sol.div_defect(mesh) / scale
}

/// Worst div-exactness defect over every solve of a run.
pub fn run_div_exactness(run: &AdaptRun) -> f64 {
    run.steps.iter().map(|s| div_exactness(&s.mesh, &s.solution)).fold(0.0, f64::max)
}

pub const DIV_TOL: f64 = 1e-9;

fn random_refinement(mesh: &Mesh, rng: &mut ChaCha8Rng, rounds: usize) -> Result<Mesh, AdaptError> {
    let mut m = mesh.clone();
    for _ in 0..rounds {
        let frac = rng.random_range(0.05..0.3);
        let marked: Vec<usize> = (0..m.n_elements()).filter(|_| rng.random_bool(frac)).collect();
        let b = rng.random_range(1..=2);
        m = m.refine(&marked, b)?.mesh;
    }
    Ok(m)
}

/// Conformity, area halving, marked-subset-of-refined, shape regularity, the
/// text round trip and the overlay cardinality bound.
pub fn mesh_suite(seed: u64) -> Result<Vec<Check>, AdaptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let (mut conform_fail, mut area_defect, mut marked_fail, mut roundtrip_fail) = (0usize, 0.0f64, 0usize, 0usize);
    let mut shape_ratio = 0.0f64;
    for domain in [Domain::UnitSquare, Domain::LShape, Domain::Checkerboard] {
        let m0 = Mesh::create_initial(domain)?;
        let shape_ref = m0.refine_uniform(4)?.shape_constant();
        for _ in 0..10 {
            let mut m = m0.clone();
            for _ in 0..rng.random_range(1..6) {
                let marked: Vec<usize> = (0..m.n_elements()).filter(|_| rng.random_bool(0.2)).collect();
                let b = rng.random_range(1..=3);
                let r = m.refine(&marked, b)?;
                if marked.iter().any(|t| r.refined_set.binary_search(t).is_err()) {
                    marked_fail += 1;
                }
                m = r.mesh;
                if m.check_conformity().is_err() {
                    conform_fail += 1;
                }
                for t in 0..m.n_elements() {
                    let key = m.key(t);
                    let root = m.roots().triangles[key.root_id()];
                    let root_area = 0.5
                        * ((root[1][0] - root[0][0]) * (root[2][1] - root[0][1])
                            - (root[2][0] - root[0][0]) * (root[1][1] - root[0][1]))
                            .abs();
                    let expect = root_area / f64::powi(2.0, key.depth() as i32);
                    area_defect = area_defect.max((m.area(t) - expect).abs() / expect);
                }
            }
            shape_ratio = shape_ratio.max(m.shape_constant() / shape_ref);
            match Mesh::from_text(&m.to_text()) {
                Ok(back) if back.to_text() == m.to_text() && back.vertices() == m.vertices() => {}
                _ => roundtrip_fail += 1,
            }
        }
    }
    checks.push(Check::at_most("mesh.conformity_failures", conform_fail as f64, 0.0, "randomized refinements"));
    checks.push(Check::at_most("mesh.area_halving_defect", area_defect, 1e-12, "|T| = |root| 2^-depth"));
    checks.push(Check::at_most("mesh.marked_not_refined", marked_fail as f64, 0.0, "marked elements must be bisected"));
    checks.push(Check::at_most(
        "mesh.shape_constant_ratio",
        shape_ratio,
        1.0 + 1e-12,
        "relative to four uniform bisections of the initial mesh",
    ));
    checks.push(Check::at_most("mesh.text_roundtrip_failures", roundtrip_fail as f64, 0.0, "bit-exact"));
    let (violations, worst) = overlay_bound(seed, 200)?;
    checks.push(Check::at_most(
        "mesh.overlay_bound_violations",
        violations as f64,
        0.0,
        format!("200 pairs, worst #overlay - (#m1 + #m2 - #T0) = {worst}"),
    ));
    Ok(checks)
}

/// Counts pairs with `#(m1 + m2) > #m1 + #m2 - #T0`, and the worst slack.
pub fn overlay_bound(seed: u64, pairs: usize) -> Result<(usize, i64), AdaptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f76_6572);
    let domains = [Domain::UnitSquare, Domain::LShape, Domain::Checkerboard];
    let mut violations = 0;
    let mut worst = i64::MIN;
    for i in 0..pairs {
        let m0 = Mesh::create_initial(domains[i % 3])?;
        let r1 = rng.random_range(1..6);
        let r2 = rng.random_range(1..6);
        let a = random_refinement(&m0, &mut rng, r1)?;
        let b = random_refinement(&m0, &mut rng, r2)?;
        let o = a.overlay(&b)?;
        let slack = o.n_elements() as i64 - (a.n_elements() + b.n_elements()) as i64 + m0.n_elements() as i64;
        worst = worst.max(slack);
        let nested = o.ancestor_map(&a).is_ok() && o.ancestor_map(&b).is_ok() && o.check_conformity().is_ok();
        if slack > 0 || !nested {
            violations += 1;
        }
    }
    Ok((violations, worst))
}

/// Smallest subset size reaching `theta^2 * total`, by exhaustive search.
pub fn brute_force_min_cardinality(eta2: &[f64], theta: f64) -> usize {
    let n = eta2.len();
    let mut sorted: Vec<(usize, f64)> = eta2.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let total = sorted.iter().fold(0.0, |s, v| s + v.1);
    let target = theta * theta * total;
    let mut best = n;
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if size >= best {
            continue;
        }
        let sum = (0..n).filter(|i| mask >> i & 1 == 1).fold(0.0, |s, i| s + sorted[i].1);
        if sum >= target {
            best = size;
        }
    }
    best
}

/// Greedy marking against exhaustive search, and monotonicity in theta.
pub fn dorfler_suite(seed: u64, reports: usize) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mismatch, mut nonmonotone) = (0usize, 0usize);
    for _ in 0..reports {
        let n = rng.random_range(1..=12);
        let eta2: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
        let theta = rng.random_range(0.05..=1.0);
        let greedy = dorfler_mark_values(&eta2, theta).expect("valid input");
        if greedy.len() != brute_force_min_cardinality(&eta2, theta) {
            mismatch += 1;
        }
        let theta2 = rng.random_range(theta..=1.0);
        let larger = dorfler_mark_values(&eta2, theta2).expect("valid input");
        if !greedy.ids.iter().all(|t| larger.ids.contains(t)) {
            nonmonotone += 1;
        }
    }
    vec![
        Check::at_most(
            "dorfler.greedy_vs_bruteforce_mismatches",
            mismatch as f64,
            0.0,
            format!("{reports} random reports with at most 12 elements"),
        ),
        Check::at_most("dorfler.theta_monotonicity_violations", nonmonotone as f64, 0.0, ""),
    ]
}

/// Pythagoras data on three nested meshes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PythagorasTriple {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_defect: f64,
    pub div_exactness: f64,
}

/// `||p_ref - p_H||^2` against `||p_ref - p_h||^2 + ||p_h - p_H||^2` for the
/// coarse mesh, one adaptive step, and two more uniform refinements.
pub fn pythagoras(problem: &ProblemSpec, coarse: &Mesh, theta: f64) -> Result<PythagorasTriple, AdaptError> {
    let sol_c = solve_problem(coarse, problem, SolverKind::Direct)?;
    let ind = indicators_for_field(Execution::default(), coarse, &sol_c.p, &sol_c.f_h, problem, EstimatorKind::Stress)?;
    let marks = dorfler_mark_values(&ind.locals(), theta)?;
    let fine = coarse.refine(&marks.ids, 1)?.mesh;
    let sol_f = solve_problem(&fine, problem, SolverKind::Direct)?;
    let reference = fine.refine_uniform(2)?;
    let sol_r = solve_problem(&reference, problem, SolverKind::Direct)?;
    let e_c = reference_errors(coarse, &sol_c, &reference, &sol_r, problem)?.flux_err.powi(2);
    let e_f = reference_errors(&fine, &sol_f, &reference, &sol_r, problem)?.flux_err.powi(2);
    let d = reference_errors(coarse, &sol_c, &fine, &sol_f, problem)?.flux_err.powi(2);
    let div = [
        div_exactness(coarse, &sol_c),
        div_exactness(&fine, &sol_f),
        div_exactness(&reference, &sol_r),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(PythagorasTriple {
        lhs: e_c,
        rhs: e_f + d,
        rel_defect: (e_c - e_f - d).abs() / e_c,
        div_exactness: div,
    })
}

pub fn pythagoras_suite() -> Result<Vec<Check>, AdaptError> {
    let p = ProblemSpec::builtin("square_pwconst")?;
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    let mut div = 0.0f64;
    let mut mesh = p.initial_mesh()?.refine_uniform(2)?;
    for _ in 0..4 {
        let t = pythagoras(&p, &mesh, 0.5)?;
        worst = worst.max(t.rel_defect);
        div = div.max(t.div_exactness);
        mesh = mesh.refine_uniform(1)?;
    }
    checks.push(Check::at_most("pythagoras.relative_defect", worst, 1e-8, "square_pwconst, four coarse meshes"));
    checks.push(Check::at_most("pythagoras.div_exactness", div, DIV_TOL, "all solves"));
    Ok(checks)
}

/// Worst violation of the fixed-field reduction inequality over a run
/// (negative means it holds with room to spare), in units of `eta_k^2`.
pub fn fixed_field_reduction(run: &AdaptRun, problem: &ProblemSpec, b: u32) -> Result<(f64, f64), AdaptError> {
    let lambda = 1.0 - 2f64.powf(-(b as f64) / 2.0);
    let mut worst_abs = f64::NEG_INFINITY;
    let mut worst_rel = f64::NEG_INFINITY;
    for w in run.steps.windows(2) {
        let (c, f) = (&w[0], &w[1]);
        let Some(marks) = &c.marks else { continue };
        let p_fine = prolongate_flux(&c.mesh, &c.solution.p, &f.mesh)?;
        let f_h = project_f(&problem.f, &f.mesh)?;
        let fine = indicators_for_field(Execution::default(), &f.mesh, &p_fine, &f_h, problem, EstimatorKind::Stress)?;
        let coarse = &c.indicators;
        let excess = fine.total() - (coarse.total() - lambda * coarse.sum_over(&marks.ids));
        worst_abs = worst_abs.max(excess);
        worst_rel = worst_rel.max(excess / coarse.total());
    }
    Ok((worst_abs, worst_rel))
}

fn stress_run(name: &str, max_dofs: usize, theta: f64, b: u32) -> Result<(ProblemSpec, AdaptRun), AdaptError> {
    let p = ProblemSpec::builtin(name)?;
    let cfg = AdaptConfig {
        theta,
        b,
        eps: None,
        max_dofs: Some(max_dofs),
        surrogate: false,
        ..Default::default()
    };
    let run = amfem(&p, &cfg)?;
    Ok((p, run))
}

pub fn reduction_suite() -> Result<Vec<Check>, AdaptError> {
    let mut checks = Vec::new();
    for (name, b) in [("square_sine", 1), ("lshape_singular", 1), ("checkerboard", 1), ("square_sine", 2)] {
        let (p, run) = stress_run(name, 20_000, 0.5, b)?;
        let (abs, rel) = fixed_field_reduction(&run, &p, b)?;
        checks.push(Check::at_most(
            format!("reduction.{name}.b{b}"),
            abs,
            1e-10,
            format!("{} steps, worst excess relative to eta^2: {rel:.3e}", run.steps.len()),
        ));
        checks.push(Check::at_most(format!("reduction.{name}.b{b}.div_exactness"), run_div_exactness(&run), DIV_TOL, ""));
    }
    Ok(checks)
}

/// `osc(f_h, T_H)` with `f_h` the projection on the finer mesh, evaluated exactly.
pub fn projected_data_oscillation(coarse: &Mesh, fine: &Mesh, f_fine: &[f64]) -> Result<f64, AdaptError> {
    let anc = fine.ancestor_map(coarse)?;
    let mut mass = vec![0.0; coarse.n_elements()];
    for t in 0..fine.n_elements() {
        mass[anc[t]] += fine.area(t) * f_fine[t];
    }
    let mean: Vec<f64> = (0..coarse.n_elements()).map(|c| mass[c] / coarse.area(c)).collect();
    let mut local = vec![0.0; coarse.n_elements()];
    for t in 0..fine.n_elements() {
        let d = f_fine[t] - mean[anc[t]];
        local[anc[t]] += fine.area(t) * d * d;
    }
    Ok((0..coarse.n_elements()).fold(0.0, |s, c| s + coarse.area(c) * local[c]).sqrt())
}

/// Largest `osc(f_h, T_H) - osc(f, T_H)` over consecutive meshes of a run.
pub fn oscillation_monotonicity(run: &AdaptRun) -> Result<f64, AdaptError> {
    let mut worst = f64::NEG_INFINITY;
    for (k, w) in run.steps.windows(2).enumerate() {
        let lhs = projected_data_oscillation(&w[0].mesh, &w[1].mesh, &w[1].solution.f_h)?;
        let rhs = run.rows[k].osc_f2.sqrt();
        worst = worst.max(lhs - rhs);
    }
    Ok(worst)
}

pub fn oscillation_suite() -> Result<Vec<Check>, AdaptError> {
    let mut checks = Vec::new();
    for name in ["square_sine", "checkerboard", "lshape_singular"] {
        let (p, run) = stress_run(name, 20_000, 0.5, 1)?;
        if name != "lshape_singular" {
            checks.push(Check::at_most(
                format!("oscillation.{name}.projected_data"),
                oscillation_monotonicity(&run)?,
                1e-12,
                "osc(f_h, T_H) - osc(f, T_H) on consecutive meshes",
            ));
        }
        let mut dominance = f64::NEG_INFINITY;
        for s in &run.steps {
            let osc = oscillations_for_field(Execution::default(), &s.mesh, &s.solution.p, &s.solution.f_h, &p)?;
            for t in 0..s.mesh.n_elements() {
                let eta = s.indicators.local(t);
                dominance = dominance.max(osc.local(t) - eta * (1.0 + 1e-12));
            }
        }
        checks.push(Check::at_most(format!("oscillation.{name}.dominated_by_eta"), dominance, 0.0, "osc_T - eta_T"));
    }
    Ok(checks)
}

/// `||A^{-1/2}(p_h - p_H)||^2 / (eta_H^2(R) + osc^2(f, T_H))` for each step.
pub fn upper_bound_constants(run: &AdaptRun, problem: &ProblemSpec) -> Result<Vec<f64>, AdaptError> {
    let mut out = Vec::new();
    for (k, w) in run.steps.windows(2).enumerate() {
        let (c, f) = (&w[0], &w[1]);
        let d = reference_errors(&c.mesh, &c.solution, &f.mesh, &f.solution, problem)?.flux_err.powi(2);
        let denom = c.indicators.sum_over(&c.refined) + run.rows[k].osc_f2;
        out.push(d / denom);
    }
    Ok(out)
}

pub const UPPER_BOUND_CONSTANT: f64 = 10.0;

pub fn upper_bound_suite() -> Result<Vec<Check>, AdaptError> {
    let mut checks = Vec::new();
    for name in ["square_sine", "square_pwconst", "lshape_singular", "checkerboard"] {
        let (p, run) = stress_run(name, 20_000, 0.5, 1)?;
        let consts = upper_bound_constants(&run, &p)?;
        let max = consts.iter().copied().fold(0.0, f64::max);
        checks.push(Check::at_most(
            format!("upper_bound.{name}"),
            max,
            UPPER_BOUND_CONSTANT,
            format!("max over {} nested pairs", consts.len()),
        ));
    }
    let (p, run) = stress_run("square_sine", 5_000, 0.5, 1)?;
    let uniform = AdaptConfig {
        mode: Mode::Uniform,
        eps: None,
        max_dofs: Some(5_000),
        surrogate: false,
        ..Default::default()
    };
    let urun = amfem(&p, &uniform)?;
    let max = upper_bound_constants(&urun, &p)?.into_iter().fold(0.0, f64::max);
    checks.push(Check::at_most("upper_bound.square_sine.uniform", max, UPPER_BOUND_CONSTANT, ""));
    checks.push(Check::at_most("upper_bound.div_exactness", run_div_exactness(&run), DIV_TOL, ""));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_examples() {
        assert_eq!(brute_force_min_cardinality(&[16.0, 9.0, 4.0, 1.0], 0.5), 1);
        assert_eq!(brute_force_min_cardinality(&[16.0, 9.0, 4.0, 1.0], 0.9), 2);
        assert_eq!(brute_force_min_cardinality(&[1.0, 1.0, 1.0], 1.0), 3);
    }

    #[test]
    fn unknown_suite() {
        assert!(matches!(run_suite("nope", 1), Err(VerifyError::UnknownSuite(_))));
    }

    #[test]
    fn dorfler_suite_passes() {
        assert!(dorfler_suite(7, 100).iter().all(|c| c.passed));
    }

    #[test]
    fn exact_projection_oscillation_of_constant_is_zero() {
        let m = Mesh::create_initial(Domain::UnitSquare).unwrap();
        let f = m.refine_uniform(2).unwrap();
        let v = vec![2.5; f.n_elements()];
        assert_eq!(projected_data_oscillation(&m, &f, &v).unwrap(), 0.0);
    }
}
