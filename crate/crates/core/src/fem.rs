//! Lowest-order Raviart-Thomas / piecewise-constant mixed discretization.
//!
//! Flux unknowns are the normal fluxes through the mesh edges (in the global
//! normal direction of each edge); on element `T` with vertices `a_j` the basis
//! function of local edge `j` is `s_j (x - a_j) / (2|T|)`, where `s_j` is the
//! orientation sign of the edge for `T`. Displacement unknowns are element
//! values. With these bases the divergence block has entries `s_j`.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;
use thiserror::Error;

use crate::mesh::{Mesh, MeshError, Point};
use crate::par::{map_range, try_map_range, Execution};
use crate::problems::{dot, is_spd, mat_vec, ProblemSpec, ScalarField};
use crate::quadrature::{EDGE_GAUSS5, TRI_DEG4};
use crate::sparse::CsrMatrix;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("source is not finite at {point:?} in element {elem}")]
    NonFiniteSource { elem: usize, point: Point },
    #[error("A^-1 is not symmetric positive definite at {point:?} in element {elem}")]
    NotSpd { elem: usize, point: Point },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("solver residual {residual:e} exceeds tolerance {tol:e}")]
    Residual { residual: f64, tol: f64 },
    #[error("system size mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Degrees of freedom: one flux per edge, one value per element.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub n_flux: usize,
    pub n_disp: usize,
    /// Flux dofs of each element, ordered by local edge.
    pub elem_dofs: Vec<[usize; 3]>,
    pub signs: Vec<[f64; 3]>,
}

impl DofMap {
    pub fn build(mesh: &Mesh) -> DofMap {
        DofMap {
            n_flux: mesh.n_edges(),
            n_disp: mesh.n_elements(),
            elem_dofs: (0..mesh.n_elements()).map(|t| mesh.element_edges(t)).collect(),
            signs: (0..mesh.n_elements()).map(|t| mesh.signs(t)).collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.n_flux + self.n_disp
    }
}

/// A Raviart-Thomas field restricted to one element: `p(x) = sum_j c_j (x - a_j) / (2|T|)`
/// with `c_j` the signed edge fluxes.
#[derive(Debug, Clone, Copy)]
pub struct LocalFlux {
    pub corners: [Point; 3],
    pub area: f64,
    pub coef: [f64; 3],
}

impl LocalFlux {
    pub fn new(mesh: &Mesh, p: &[f64], elem: usize) -> LocalFlux {
        let ids = mesh.element_edges(elem);
        let s = mesh.signs(elem);
        LocalFlux {
            corners: mesh.corners(elem),
            area: mesh.area(elem),
            coef: std::array::from_fn(|j| s[j] * p[ids[j]]),
        }
    }

    #[inline]
    pub fn eval(&self, x: Point) -> Point {
        let inv = 0.5 / self.area;
        let mut v = [0.0; 2];
        for j in 0..3 {
            let a = self.corners[j];
            v[0] += self.coef[j] * (x[0] - a[0]) * inv;
            v[1] += self.coef[j] * (x[1] - a[1]) * inv;
        }
        v
    }

    /// Constant divergence `sum_j c_j / |T|`.
    pub fn div(&self) -> f64 {
        (self.coef[0] + self.coef[1] + self.coef[2]) / self.area
    }

    /// The field is `alpha + beta x`; returns `beta`.
    pub fn radial_coefficient(&self) -> f64 {
        0.5 * self.div()
    }
}

/// Piecewise-constant `L^2` projection with the degree-4 rule. Written as a
/// correction to the first sample so constants are reproduced exactly.
pub fn project_f(f: &ScalarField, mesh: &Mesh) -> Result<Vec<f64>, FemError> {
    project_f_with(Execution::default(), f, mesh)
}

pub fn project_f_with(exec: Execution, f: &ScalarField, mesh: &Mesh) -> Result<Vec<f64>, FemError> {
    try_map_range(exec, mesh.n_elements(), |t| {
        let key = mesh.key(t);
        let corners = mesh.corners(t);
        let mut first = None;
        let mut acc = 0.0;
        for (x, w) in TRI_DEG4.map(&corners) {
            let v = f.eval(x, key);
            if !v.is_finite() {
                return Err(FemError::NonFiniteSource { elem: t, point: x });
            }
            let c = *first.get_or_insert(v);
            acc += w * (v - c);
        }
        Ok(first.unwrap_or(0.0) + acc)
    })
}

/// Block system `[[M, B^T], [B, 0]] (p, u) = (rhs_flux, rhs_div)`.
#[derive(Debug, Clone)]
pub struct SaddleSystem {
    pub m: CsrMatrix,
    pub b: CsrMatrix,
    pub rhs_flux: Vec<f64>,
    pub rhs_div: Vec<f64>,
}

impl SaddleSystem {
    pub fn n_flux(&self) -> usize {
        self.rhs_flux.len()
    }

    pub fn n_disp(&self) -> usize {
        self.rhs_div.len()
    }

    /// Block residual `K x - rhs`.
    pub fn residual(&self, p: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut r1 = self.m.mul_vec(p);
        let btu = self.b.mul_transpose_vec(u);
        for i in 0..r1.len() {
            r1[i] += btu[i] - self.rhs_flux[i];
        }
        let mut r2 = self.b.mul_vec(p);
        for (r, g) in r2.iter_mut().zip(&self.rhs_div) {
            *r -= g;
        }
        (r1, r2)
    }

    pub fn rhs_norm_inf(&self) -> f64 {
        self.rhs_flux.iter().chain(&self.rhs_div).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Assembles the mixed system for `problem` on `mesh`.
pub fn assemble(
    mesh: &Mesh,
    problem: &ProblemSpec,
    dofmap: &DofMap,
    f_h: &[f64],
) -> Result<SaddleSystem, FemError> {
    assemble_with(Execution::default(), mesh, problem, dofmap, f_h)
}

pub fn assemble_with(
    exec: Execution,
    mesh: &Mesh,
    problem: &ProblemSpec,
    dofmap: &DofMap,
    f_h: &[f64],
) -> Result<SaddleSystem, FemError> {
    if f_h.len() != mesh.n_elements() || dofmap.n_flux != mesh.n_edges() {
        return Err(FemError::Mismatch("dof map or projected data does not match the mesh".into()));
    }
    let local = try_map_range(exec, mesh.n_elements(), |t| local_mass(mesh, problem, dofmap, t))?;
    let mut m_trip = Vec::with_capacity(9 * mesh.n_elements());
    let mut b_trip = Vec::with_capacity(3 * mesh.n_elements());
    for (t, mt) in local.iter().enumerate() {
        let dofs = dofmap.elem_dofs[t];
        for i in 0..3 {
            for j in 0..3 {
                m_trip.push((dofs[i], dofs[j], mt[i][j]));
            }
            b_trip.push((t, dofs[i], dofmap.signs[t][i]));
        }
    }
    let m = CsrMatrix::from_triplets(dofmap.n_flux, dofmap.n_flux, m_trip);
    let b = CsrMatrix::from_triplets(dofmap.n_disp, dofmap.n_flux, b_trip);

    let mut rhs_flux = vec![0.0; dofmap.n_flux];
    if let Some(dir) = &problem.dirichlet {
        for (e, rec) in mesh.edges().iter().enumerate() {
            if !rec.is_boundary() {
                continue;
            }
            let inc = rec.incidences().next().expect("boundary edge has one element");
            let key = mesh.key(inc.elem);
            let [a, b] = mesh.edge_endpoints(e);
            let mean: f64 = EDGE_GAUSS5.map(a, b).map(|(x, w)| w * dir.g.eval(x, key)).sum();
            rhs_flux[e] = inc.sign * mean;
        }
    }
    let rhs_div = (0..mesh.n_elements()).map(|t| -mesh.area(t) * f_h[t]).collect();
    Ok(SaddleSystem {
        m,
        b,
        rhs_flux,
        rhs_div,
    })
}

fn local_mass(mesh: &Mesh, problem: &ProblemSpec, dofmap: &DofMap, t: usize) -> Result<[[f64; 3]; 3], FemError> {
    let key = mesh.key(t);
    let corners = mesh.corners(t);
    let area = mesh.area(t);
    let s = dofmap.signs[t];
    let mut mt = [[0.0; 3]; 3];
    for (x, w) in TRI_DEG4.map(&corners) {
        let a_inv = problem.coefficient.a_inv(x, key);
        if !is_spd(a_inv) {
            return Err(FemError::NotSpd { elem: t, point: x });
        }
        let phi: [Point; 3] = std::array::from_fn(|j| {
            let c = corners[j];
            let k = s[j] * 0.5 / area;
            [k * (x[0] - c[0]), k * (x[1] - c[1])]
        });
        for i in 0..3 {
            let ai = mat_vec(a_inv, phi[i]);
            for j in 0..3 {
                mt[i][j] += w * area * dot(ai, phi[j]);
            }
        }
    }
    Ok(mt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Sparse LU of the full indefinite block system.
    #[default]
    Direct,
    /// Conjugate gradients on the Schur complement `B M^{-1} B^T`, with a
    /// sparse Cholesky factorization of `M` for the inner solves.
    SchurCg,
}

/// Discrete solution of the mixed problem.
#[derive(Debug, Clone)]
pub struct MixedSolution {
    /// Edge fluxes (global normal direction).
    pub p: Vec<f64>,
    /// Element values of the displacement.
    pub u: Vec<f64>,
    /// Projected source on each element.
    pub f_h: Vec<f64>,
    /// Block residual infinity norm reported by the solver.
    pub residual: f64,
}

impl MixedSolution {
    /// Elementwise divergence of the flux.
    pub fn div_p(&self, mesh: &Mesh) -> Vec<f64> {
        (0..mesh.n_elements()).map(|t| LocalFlux::new(mesh, &self.p, t).div()).collect()
    }

    /// `max_T |div p_h + f_h|`.
    pub fn div_defect(&self, mesh: &Mesh) -> f64 {
        self.div_p(mesh)
            .iter()
            .zip(&self.f_h)
            .fold(0.0, |m, (d, f)| m.max((d + f).abs()))
    }
}

fn residual_tolerance(system: &SaddleSystem) -> f64 {
    1e-10 * (1.0 + system.rhs_norm_inf())
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the saddle-point system; the result satisfies the block residual
/// bound `1e-10 (1 + |rhs|_inf)`.
pub fn solve(system: &SaddleSystem, f_h: Vec<f64>, kind: SolverKind) -> Result<MixedSolution, FemError> {
    let (p, u) = match kind {
        SolverKind::Direct => solve_direct(system)?,
        SolverKind::SchurCg => solve_schur(system)?,
    };
    let (r1, r2) = system.residual(&p, &u);
    let residual = norm_inf(&r1).max(norm_inf(&r2));
    let tol = residual_tolerance(system);
    if !(residual <= tol) {
        return Err(FemError::Residual { residual, tol });
    }
    Ok(MixedSolution { p, u, f_h, residual })
}

fn solve_direct(system: &SaddleSystem) -> Result<(Vec<f64>, Vec<f64>), FemError> {
    let (nf, nd) = (system.n_flux(), system.n_disp());
    let n = nf + nd;
    let mut trip = Vec::with_capacity(system.m.nnz() + 2 * system.b.nnz());
    for (i, j, v) in system.m.iter() {
        trip.push(Triplet::new(i, j, v));
    }
    for (i, j, v) in system.b.iter() {
        trip.push(Triplet::new(nf + i, j, v));
        trip.push(Triplet::new(j, nf + i, v));
    }
    let k = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
        .map_err(|e| FemError::Factorization(format!("{e:?}")))?;
    let lu = k.sp_lu().map_err(|e| FemError::Factorization(format!("{e:?}")))?;
    let rhs: Vec<f64> = system.rhs_flux.iter().chain(&system.rhs_div).copied().collect();
    let mut x = lu.solve(faer::Col::<f64>::from_fn(n, |i| rhs[i]));
    let tol = residual_tolerance(system);
    // A couple of refinement sweeps against the assembled operator.
    for _ in 0..3 {
        let xs: Vec<f64> = (0..n).map(|i| x[i]).collect();
        let (r1, r2) = system.residual(&xs[..nf], &xs[nf..]);
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(FemError::Factorization("singular system (non-finite solution)".into()));
        }
        if norm_inf(&r1).max(norm_inf(&r2)) <= 0.01 * tol {
            break;
        }
        let r: Vec<f64> = r1.into_iter().chain(r2).collect();
        let dx = lu.solve(faer::Col::<f64>::from_fn(n, |i| r[i]));
        for i in 0..n {
            x[i] -= dx[i];
        }
    }
    let xs: Vec<f64> = (0..n).map(|i| x[i]).collect();
    Ok((xs[..nf].to_vec(), xs[nf..].to_vec()))
}

fn solve_schur(system: &SaddleSystem) -> Result<(Vec<f64>, Vec<f64>), FemError> {
    let nf = system.n_flux();
    let trip: Vec<_> = system.m.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
    let m = SparseColMat::<usize, f64>::try_new_from_triplets(nf, nf, &trip)
        .map_err(|e| FemError::Factorization(format!("{e:?}")))?;
    let llt = m
        .sp_cholesky(Side::Lower)
        .map_err(|e| FemError::Factorization(format!("mass matrix: {e:?}")))?;
    let m_solve = |v: &[f64]| -> Vec<f64> {
        let x = llt.solve(faer::Col::<f64>::from_fn(nf, |i| v[i]));
        (0..nf).map(|i| x[i]).collect()
    };
    let schur = |u: &[f64]| -> Vec<f64> { system.b.mul_vec(&m_solve(&system.b.mul_transpose_vec(u))) };

    // S u = B M^{-1} F - G
    let mut rhs = system.b.mul_vec(&m_solve(&system.rhs_flux));
    for (r, g) in rhs.iter_mut().zip(&system.rhs_div) {
        *r -= g;
    }
    let u = conjugate_gradient(schur, &rhs, 1e-14, 20 * rhs.len() + 100);
    let mut f = system.rhs_flux.clone();
    for (fi, bt) in f.iter_mut().zip(system.b.mul_transpose_vec(&u)) {
        *fi -= bt;
    }
    Ok((m_solve(&f), u))
}

/// Unpreconditioned CG for a symmetric positive definite operator.
fn conjugate_gradient(apply: impl Fn(&[f64]) -> Vec<f64>, rhs: &[f64], rel_tol: f64, max_iter: usize) -> Vec<f64> {
    let n = rhs.len();
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut d = r.clone();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..max_iter {
        if rr.sqrt() <= rel_tol * rhs_norm {
            break;
        }
        let ad = apply(&d);
        let alpha = rr / d.iter().zip(&ad).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * d[i];
            r[i] -= alpha * ad[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            d[i] = r[i] + beta * d[i];
        }
    }
    x
}

/// Project, assemble and solve in one call.
pub fn solve_problem(mesh: &Mesh, problem: &ProblemSpec, kind: SolverKind) -> Result<MixedSolution, FemError> {
    solve_problem_with(Execution::default(), mesh, problem, kind)
}

pub fn solve_problem_with(
    exec: Execution,
    mesh: &Mesh,
    problem: &ProblemSpec,
    kind: SolverKind,
) -> Result<MixedSolution, FemError> {
    let f_h = project_f_with(exec, &problem.f, mesh)?;
    let dofmap = DofMap::build(mesh);
    let system = assemble_with(exec, mesh, problem, &dofmap, &f_h)?;
    let mut sol = solve(&system, f_h, kind)?;
    if sol.f_h.iter().all(|&f| f == 0.0) {
        if let Some(p) = stream_function_flux(mesh, &sol.p) {
            let (r1, r2) = system.residual(&p, &sol.u);
            let residual = norm_inf(&r1).max(norm_inf(&r2));
            if residual <= residual_tolerance(&system) {
                sol.p = p;
                sol.residual = residual;
            }
        }
    }
    Ok(sol)
}

/// Rebuilds a divergence-free flux as the rotated gradient of a continuous
/// piecewise-linear stream function, `p_E = psi(b) - psi(a)`.
///
/// `psi` is shifted so all vertex values lie within a factor of two of each
/// other; every difference is then exact in floating point and the three
/// signed fluxes of each element cancel exactly, however small the element.
/// Returns `None` unless the mesh is connected and simply connected.
pub fn stream_function_flux(mesh: &Mesh, p: &[f64]) -> Option<Vec<f64>> {
    let (nv, ne, nt) = (mesh.n_vertices(), mesh.n_edges(), mesh.n_elements());
    if nv + nt != ne + 1 || p.len() != ne {
        return None;
    }
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nv];
    for (e, rec) in mesh.edges().iter().enumerate() {
        let [a, b] = rec.vertices;
        adj[a].push((b, e));
        adj[b].push((a, e));
    }
    let mut psi = vec![f64::NAN; nv];
    let mut queue = std::collections::VecDeque::from([0usize]);
    psi[0] = 0.0;
    while let Some(v) = queue.pop_front() {
        for &(w, e) in &adj[v] {
            if psi[w].is_nan() {
                // The tangent runs from vertices[0] to vertices[1].
                psi[w] = if mesh.edges()[e].vertices[0] == v { psi[v] + p[e] } else { psi[v] - p[e] };
                queue.push_back(w);
            }
        }
    }
    if psi.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let lo = psi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    // Values land in [2 span, 3 span], up to rounding of the shift.
    let shift = 2.0 * span - lo;
    let shifted: Vec<f64> = psi.iter().map(|v| v + shift).collect();
    let (min, max) = shifted.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if !(min > 0.0 && max <= 2.0 * min) {
        return None;
    }
    Some(mesh.edges().iter().map(|rec| shifted[rec.vertices[1]] - shifted[rec.vertices[0]]).collect())
}

/// Raviart-Thomas interpolant: `p_e = int_E p . nu_E`.
pub fn interpolate_flux(mesh: &Mesh, p: &crate::problems::VectorField) -> Vec<f64> {
    map_range(Execution::default(), mesh.n_edges(), |e| {
        let rec = &mesh.edges()[e];
        let key = mesh.key(rec.incidences().next().expect("edge has an element").elem);
        let (_, nu) = mesh.edge_frame(e);
        let [a, b] = mesh.edge_endpoints(e);
        let len = mesh.edge_length(e);
        EDGE_GAUSS5.map(a, b).map(|(x, w)| w * len * dot(p.eval(x, key), nu)).sum()
    })
}

/// Expresses a flux field of `coarse` in the basis of a refinement `fine`.
/// Exact: normal components of lowest-order fields are constant on segments.
pub fn prolongate_flux(coarse: &Mesh, p: &[f64], fine: &Mesh) -> Result<Vec<f64>, MeshError> {
    let anc = fine.ancestor_map(coarse)?;
    Ok(map_range(Execution::default(), fine.n_edges(), |e| {
        let inc = fine.edges()[e].incidences().next().expect("edge has an element");
        let field = LocalFlux::new(coarse, p, anc[inc.elem]);
        let [a, b] = fine.edge_endpoints(e);
        let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
        let (_, nu) = fine.edge_frame(e);
        fine.edge_length(e) * dot(field.eval(mid), nu)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Domain, ElemKey, RootMesh};
    use crate::problems::{Coefficient, VectorField};
    use std::sync::Arc;

    fn reference_triangle() -> Mesh {
        Mesh::from_parts(
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![[2, 0, 1]],
            vec![ElemKey::root(0)],
            Arc::new(RootMesh {
                triangles: vec![[[0.0, 1.0], [0.0, 0.0], [1.0, 0.0]]],
            }),
        )
        .unwrap()
    }

    fn square() -> Mesh {
        Mesh::create_initial(Domain::UnitSquare).unwrap()
    }

    #[test]
    fn dof_counts() {
        let d = DofMap::build(&square());
        assert_eq!((d.n_flux, d.n_disp), (5, 2));
        let d = DofMap::build(&square().refine(&[0], 1).unwrap().mesh);
        // V - E + F = 1 with 5 vertices and 4 triangles.
        assert_eq!((d.n_flux, d.n_disp), (8, 4));
        let d = DofMap::build(&reference_triangle());
        assert_eq!((d.n_flux, d.n_disp), (3, 1));
    }

    #[test]
    fn projection_examples() {
        let m = square().refine_uniform(3).unwrap();
        assert!(project_f(&ScalarField::constant(3.0), &m).unwrap().iter().all(|&v| v == 3.0));
        let x1 = ScalarField::from_fn(|x| x[0]);
        let r = project_f(&x1, &reference_triangle()).unwrap();
        assert!((r[0] - 1.0 / 3.0).abs() < 1e-15);
        // Element (1,0),(1,1),(0,1): centroid x = 2/3.
        let reflected = Mesh::from_parts(
            vec![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            vec![[0, 1, 2]],
            vec![ElemKey::root(0)],
            Arc::new(RootMesh {
                triangles: vec![[[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]],
            }),
        )
        .unwrap();
        assert!((project_f(&x1, &reflected).unwrap()[0] - 2.0 / 3.0).abs() < 1e-15);
        let bad = ScalarField::from_fn(|x| if x[0] > 0.5 { f64::NAN } else { 0.0 });
        assert!(matches!(project_f(&bad, &m), Err(FemError::NonFiniteSource { .. })));
    }

    #[test]
    fn divergence_block_has_unit_entries() {
        let m = square().refine_uniform(4).unwrap();
        let p = ProblemSpec::builtin("square_sine").unwrap();
        let f_h = project_f(&p.f, &m).unwrap();
        let d = DofMap::build(&m);
        let s = assemble(&m, &p, &d, &f_h).unwrap();
        for t in 0..m.n_elements() {
            let row: Vec<_> = s.b.row(t).collect();
            assert_eq!(row.len(), 3);
            for (j, v) in row {
                let local = m.element_edges(t).iter().position(|&e| e == j).unwrap();
                assert_eq!(v, m.signs(t)[local]);
            }
        }
        assert!(s.m.is_symmetric(1e-14));
    }

    #[test]
    fn homogeneous_data_gives_zero_rhs_and_zero_solution() {
        let m = square().refine_uniform(3).unwrap();
        let mut p = ProblemSpec::builtin("checkerboard").unwrap();
        p.domain = Domain::UnitSquare;
        p.coefficient = Coefficient::Identity;
        p.f = ScalarField::constant(0.0);
        let f_h = project_f(&p.f, &m).unwrap();
        let s = assemble(&m, &p, &DofMap::build(&m), &f_h).unwrap();
        assert!(s.rhs_flux.iter().chain(&s.rhs_div).all(|&v| v == 0.0));
        let sol = solve(&s, f_h, SolverKind::Direct).unwrap();
        assert!(sol.p.iter().chain(&sol.u).all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn mass_matrix_is_linear_in_inverse_coefficient() {
        let m = square().refine_uniform(3).unwrap();
        let mut p1 = ProblemSpec::builtin("square_sine").unwrap();
        let mut p2 = p1.clone();
        p1.coefficient = Coefficient::Identity;
        p2.coefficient = Coefficient::PiecewiseScalar(vec![2.0, 2.0]);
        let f_h = project_f(&p1.f, &m).unwrap();
        let d = DofMap::build(&m);
        let s1 = assemble(&m, &p1, &d, &f_h).unwrap();
        let s2 = assemble(&m, &p2, &d, &f_h).unwrap();
        for ((_, _, a), (_, _, b)) in s1.m.iter().zip(s2.m.iter()) {
            assert!((0.5 * a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_indefinite_coefficient() {
        let m = square();
        let mut p = ProblemSpec::builtin("square_sine").unwrap();
        p.coefficient = Coefficient::PiecewiseScalar(vec![1.0, -1.0]);
        let f_h = project_f(&p.f, &m).unwrap();
        assert!(matches!(
            assemble(&m, &p, &DofMap::build(&m), &f_h),
            Err(FemError::NotSpd { elem: 1, .. })
        ));
    }

    #[test]
    fn global_flux_balance_for_unit_source() {
        let m = square().refine_uniform(4).unwrap();
        let mut p = ProblemSpec::builtin("square_sine").unwrap();
        p.f = ScalarField::constant(1.0);
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let total: f64 = sol.div_p(&m).iter().enumerate().map(|(t, d)| m.area(t) * d).sum();
        assert!((total + 1.0).abs() < 1e-12);
        assert!(sol.div_defect(&m) < 1e-9);
    }

    #[test]
    fn schur_fallback_matches_direct() {
        let m = Mesh::create_initial(Domain::Checkerboard).unwrap().refine_uniform(4).unwrap();
        let p = ProblemSpec::builtin("checkerboard").unwrap();
        let a = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let b = solve_problem(&m, &p, SolverKind::SchurCg).unwrap();
        for (x, y) in a.p.iter().zip(&b.p) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_flux_is_reproduced_exactly() {
        // u = 2x - y: p = (2, -1), f = 0, g = u.
        let c = [2.0, -1.0];
        let mut p = ProblemSpec::builtin("square_sine").unwrap();
        p.f = ScalarField::constant(0.0);
        p.dirichlet = Some(crate::problems::DirichletData {
            g: ScalarField::from_fn(move |x| c[0] * x[0] + c[1] * x[1]),
            grad: VectorField::constant(c),
        });
        let m = square().refine_uniform(4).unwrap();
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let exact = interpolate_flux(&m, &VectorField::constant(c));
        for (a, b) in sol.p.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_free_flux_balances_exactly() {
        let p = ProblemSpec::builtin("lshape_singular").unwrap();
        let mut m = p.initial_mesh().unwrap();
        // Grade towards the reentrant corner.
        for _ in 0..40 {
            let near: Vec<usize> = (0..m.n_elements())
                .filter(|&t| m.corners(t).iter().any(|c| c[0] == 0.0 && c[1] == 0.0))
                .collect();
            m = m.refine(&near, 1).unwrap().mesh;
        }
        assert!((0..m.n_elements()).map(|t| m.area(t)).fold(1.0, f64::min) < 1e-11);
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        assert!(sol.div_p(&m).iter().all(|&d| d == 0.0));
        let exact = crate::problems::exact_errors(&m, &sol, &p).unwrap();
        assert!(exact.flux_err < 0.5);
    }

    #[test]
    fn prolongation_preserves_the_field() {
        let coarse = square().refine_uniform(2).unwrap();
        let p = ProblemSpec::builtin("square_sine").unwrap();
        let sol = solve_problem(&coarse, &p, SolverKind::Direct).unwrap();
        let fine = coarse.refine(&[0, 3, 5], 2).unwrap().mesh;
        let pf = prolongate_flux(&coarse, &sol.p, &fine).unwrap();
        let anc = fine.ancestor_map(&coarse).unwrap();
        for (t, &parent) in anc.iter().enumerate() {
            let c = fine.corners(t);
            let x = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
            let a = LocalFlux::new(&fine, &pf, t).eval(x);
            let b = LocalFlux::new(&coarse, &sol.p, parent).eval(x);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }
}
