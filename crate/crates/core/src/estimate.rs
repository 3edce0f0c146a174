//! Residual-type a posteriori indicators and oscillation terms.
//!
//! The element weight is `h_T = |T|^{1/2}`. Interior edge contributions are
//! counted once in each of the two adjacent elements.

use thiserror::Error;

use crate::fem::{LocalFlux, MixedSolution};
use crate::mesh::{Mesh, MeshError, Point};
use crate::par::{map_range, try_map_range, Execution};
use crate::problems::{dot, mat_vec, ProblemSpec};
use crate::quadrature::{EDGE_GAUSS5, TRI_DEG4};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("solution does not match mesh: {0}")]
    Mismatch(String),
    #[error("kappa {0} outside [0, 1]")]
    InvalidKappa(f64),
    #[error("ill-conditioned local mass matrix on element {0}")]
    IllConditioned(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
#[derive(Default)]
pub enum EstimatorKind {
    /// Data, curl and jump terms for the flux alone.
    #[default]
    Stress,
    /// Adds the displacement term; the data residual is weighted by `h^kappa`.
    Full { kappa: f64 },
}


/// Squared local indicator terms, one entry per element.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorReport {
    pub kind: EstimatorKind,
    pub data: Vec<f64>,
    pub curl: Vec<f64>,
    pub jump: Vec<f64>,
    pub displacement: Vec<f64>,
    pub h: Vec<f64>,
}

impl IndicatorReport {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `eta_T^2`.
    pub fn local(&self, t: usize) -> f64 {
        self.data[t] + self.curl[t] + self.jump[t] + self.displacement[t]
    }

    pub fn locals(&self) -> Vec<f64> {
        (0..self.len()).map(|t| self.local(t)).collect()
    }

    /// `eta^2`, summed in ascending element order.
    pub fn total(&self) -> f64 {
        (0..self.len()).fold(0.0, |s, t| s + self.local(t))
    }

    /// Sum of `eta_T^2` over `ids`, accumulated in ascending id order.
    pub fn sum_over(&self, ids: &[usize]) -> f64 {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().fold(0.0, |s, t| s + self.local(t))
    }
}

/// Squared oscillation terms per element.
#[derive(Debug, Clone, PartialEq)]
pub struct OscReport {
    pub curl: Vec<f64>,
    pub jump: Vec<f64>,
    pub data: Vec<f64>,
    pub displacement: Vec<f64>,
}

impl OscReport {
    /// `osc_T(p_h, T)^2`.
    pub fn local(&self, t: usize) -> f64 {
        self.curl[t] + self.jump[t] + self.data[t]
    }

    pub fn osc2(&self) -> f64 {
        (0..self.data.len()).fold(0.0, |s, t| s + self.local(t))
    }

    /// `osc(f, T)^2`.
    pub fn osc_f2(&self) -> f64 {
        self.data.iter().fold(0.0, |s, v| s + v)
    }

    /// Oscillation including the displacement part.
    pub fn osc_tilde2(&self) -> f64 {
        (0..self.data.len()).fold(0.0, |s, t| s + self.local(t) + self.displacement[t])
    }
}

/// Shifted Legendre polynomials on [0, 1]; orthogonal for the 5-point rule.
fn legendre(t: f64) -> [f64; 3] {
    [1.0, 2.0 * t - 1.0, 6.0 * t * t - 6.0 * t + 1.0]
}

/// `sum_q w_q (g_q - (P_2 g)_q)^2` for samples at the 5-point Gauss nodes.
fn edge_p2_residual(samples: &[f64]) -> f64 {
    let rule = EDGE_GAUSS5;
    let mut c = [0.0; 3];
    for ((&t, &w), &g) in rule.points.iter().zip(rule.weights).zip(samples) {
        let l = legendre(t);
        for k in 0..3 {
            c[k] += (2 * k + 1) as f64 * w * g * l[k];
        }
    }
    rule.points
        .iter()
        .zip(rule.weights)
        .zip(samples)
        .map(|((&t, &w), &g)| {
            let l = legendre(t);
            let r = g - (c[0] * l[0] + c[1] * l[1] + c[2] * l[2]);
            w * r * r
        })
        .sum()
}

/// Discrete `L^2` projection onto affine functions on one element, under the
/// degree-4 rule. Returns `sum_q w_q |g_q - (P_1 g)_q|^2` (unscaled by area)
/// for each of `K` sample components.
struct ElementP1 {
    phi: Vec<[f64; 3]>,
    weights: Vec<f64>,
    inv: [[f64; 3]; 3],
}

impl ElementP1 {
    fn new(corners: &[Point; 3], elem: usize) -> Result<Self, EstimateError> {
        let c = [
            (corners[0][0] + corners[1][0] + corners[2][0]) / 3.0,
            (corners[0][1] + corners[1][1] + corners[2][1]) / 3.0,
        ];
        let area = 0.5
            * ((corners[1][0] - corners[0][0]) * (corners[2][1] - corners[0][1])
                - (corners[2][0] - corners[0][0]) * (corners[1][1] - corners[0][1]))
                .abs();
        let s = area.sqrt();
        if !(s > 0.0) {
            return Err(EstimateError::IllConditioned(elem));
        }
        let mut phi = Vec::with_capacity(TRI_DEG4.len());
        let mut weights = Vec::with_capacity(TRI_DEG4.len());
        let mut m = [[0.0; 3]; 3];
        for (x, w) in TRI_DEG4.map(corners) {
            let b = [1.0, (x[0] - c[0]) / s, (x[1] - c[1]) / s];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += w * b[i] * b[j];
                }
            }
            phi.push(b);
            weights.push(w);
        }
        let inv = inv3(m).ok_or(EstimateError::IllConditioned(elem))?;
        Ok(ElementP1 { phi, weights, inv })
    }

    fn residual(&self, samples: &[f64]) -> f64 {
        let mut rhs = [0.0; 3];
        for ((b, &w), &g) in self.phi.iter().zip(&self.weights).zip(samples) {
            for i in 0..3 {
                rhs[i] += w * g * b[i];
            }
        }
        let c: [f64; 3] = std::array::from_fn(|i| (0..3).map(|j| self.inv[i][j] * rhs[j]).sum());
        self.phi
            .iter()
            .zip(&self.weights)
            .zip(samples)
            .map(|((b, &w), &g)| {
                let r = g - (c[0] * b[0] + c[1] * b[1] + c[2] * b[2]);
                w * r * r
            })
            .sum()
    }
}

fn inv3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let cof = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    let det = m[0][0] * cof(0, 0) + m[0][1] * cof(0, 1) + m[0][2] * cof(0, 2);
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(det.abs() > 1e-12 * scale.powi(3)) {
        return None;
    }
    Some(std::array::from_fn(|i| std::array::from_fn(|j| cof(j, i) / det)))
}

fn check(mesh: &Mesh, p: &[f64], f_h: &[f64]) -> Result<(), EstimateError> {
    if p.len() != mesh.n_edges() || f_h.len() != mesh.n_elements() {
        return Err(EstimateError::Mismatch(format!(
            "{} fluxes / {} source values for {} edges / {} elements",
            p.len(),
            f_h.len(),
            mesh.n_edges(),
            mesh.n_elements()
        )));
    }
    Ok(())
}

/// `J(A^{-1} p_h . tau)` at the 5-point nodes of `edge`.
fn jump_samples(mesh: &Mesh, p: &[f64], problem: &ProblemSpec, edge: usize) -> Vec<(Point, f64)> {
    let rec = &mesh.edges()[edge];
    let (tau, _) = mesh.edge_frame(edge);
    let [a, b] = mesh.edge_endpoints(edge);
    let side = |t: usize, x: Point| {
        let q = LocalFlux::new(mesh, p, t).eval(x);
        dot(mat_vec(problem.coefficient.a_inv(x, mesh.key(t)), q), tau)
    };
    let boundary = |t: usize, x: Point| match &problem.dirichlet {
        Some(d) => dot(d.grad.eval(x, mesh.key(t)), tau),
        None => 0.0,
    };
    EDGE_GAUSS5
        .map(a, b)
        .map(|(x, _)| {
            let j = match (rec.plus, rec.minus) {
                (Some(a), Some(b)) => side(a.elem, x) - side(b.elem, x),
                // The Dirichlet data stands in for the missing side.
                (Some(i), None) => side(i.elem, x) - boundary(i.elem, x),
                (None, Some(i)) => boundary(i.elem, x) - side(i.elem, x),
                (None, None) => unreachable!("edge without elements"),
            };
            (x, j)
        })
        .collect()
}

/// Tangential jump of `A^{-1} p_h` across `edge`, sampled at the edge quadrature
/// nodes: the trace from the element the edge normal leaves minus the other one.
/// On the boundary the tangential derivative of the Dirichlet data takes the
/// place of the missing side.
pub fn tangential_jump(
    mesh: &Mesh,
    sol: &MixedSolution,
    problem: &ProblemSpec,
    edge: usize,
) -> Result<Vec<(Point, f64)>, EstimateError> {
    mesh.edge(edge)?;
    check(mesh, &sol.p, &sol.f_h)?;
    Ok(jump_samples(mesh, &sol.p, problem, edge))
}

/// Per-edge `(int_E J^2, int_E |J - P_2 J|^2)`.
fn edge_terms(exec: Execution, mesh: &Mesh, p: &[f64], problem: &ProblemSpec) -> Vec<(f64, f64)> {
    map_range(exec, mesh.n_edges(), |e| {
        let samples: Vec<f64> = jump_samples(mesh, p, problem, e).into_iter().map(|(_, j)| j).collect();
        let len = mesh.edge_length(e);
        let full: f64 = EDGE_GAUSS5.weights.iter().zip(&samples).map(|(w, j)| w * j * j).sum();
        (len * full, len * edge_p2_residual(&samples))
    })
}

/// Three-term stress indicator for the discrete solution.
pub fn indicators_stress(mesh: &Mesh, sol: &MixedSolution, problem: &ProblemSpec) -> Result<IndicatorReport, EstimateError> {
    indicators_for_field(Execution::default(), mesh, &sol.p, &sol.f_h, problem, EstimatorKind::Stress)
}

/// Four-term indicator `eta_{T,kappa}`.
pub fn indicators_full(
    mesh: &Mesh,
    sol: &MixedSolution,
    problem: &ProblemSpec,
    kappa: f64,
) -> Result<IndicatorReport, EstimateError> {
    indicators_for_field(Execution::default(), mesh, &sol.p, &sol.f_h, problem, EstimatorKind::Full { kappa })
}

pub fn indicators(
    mesh: &Mesh,
    sol: &MixedSolution,
    problem: &ProblemSpec,
    kind: EstimatorKind,
) -> Result<IndicatorReport, EstimateError> {
    indicators_for_field(Execution::default(), mesh, &sol.p, &sol.f_h, problem, kind)
}

/// Indicators of an arbitrary flux field `p` with projected source `f_h`.
pub fn indicators_for_field(
    exec: Execution,
    mesh: &Mesh,
    p: &[f64],
    f_h: &[f64],
    problem: &ProblemSpec,
    kind: EstimatorKind,
) -> Result<IndicatorReport, EstimateError> {
    check(mesh, p, f_h)?;
    if let EstimatorKind::Full { kappa } = kind {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(EstimateError::InvalidKappa(kappa));
        }
    }
    let edges = edge_terms(exec, mesh, p, problem);
    let local = map_range(exec, mesh.n_elements(), |t| {
        let key = mesh.key(t);
        let flux = LocalFlux::new(mesh, p, t);
        let area = flux.area;
        let h2 = area;
        let h = area.sqrt();
        let div = flux.div();
        let (mut data, mut curl, mut disp) = (0.0, 0.0, 0.0);
        for (x, w) in TRI_DEG4.map(&flux.corners) {
            let q = flux.eval(x);
            let fx = problem.f.eval(x, key);
            match kind {
                EstimatorKind::Stress => {
                    let d = fx - f_h[t];
                    data += w * d * d;
                }
                EstimatorKind::Full { .. } => {
                    let d = fx + div;
                    data += w * d * d;
                    let v = mat_vec(problem.coefficient.a_inv(x, key), q);
                    disp += w * dot(v, v);
                }
            }
            let c = dot(problem.coefficient.curl_a_inv(x, key), q);
            curl += w * c * c;
        }
        let data_weight = match kind {
            EstimatorKind::Stress => h2,
            EstimatorKind::Full { kappa } => h.powf(2.0 * kappa),
        };
        let jump = h * mesh.element_edges(t).iter().fold(0.0, |s, &e| s + edges[e].0);
        [data_weight * area * data, h2 * area * curl, jump, h2 * area * disp, h]
    });
    let col = |i: usize| local.iter().map(|l| l[i]).collect::<Vec<_>>();
    Ok(IndicatorReport {
        kind,
        data: col(0),
        curl: col(1),
        jump: col(2),
        displacement: col(3),
        h: col(4),
    })
}

/// Oscillation terms for the discrete solution.
pub fn oscillations(mesh: &Mesh, sol: &MixedSolution, problem: &ProblemSpec) -> Result<OscReport, EstimateError> {
    oscillations_for_field(Execution::default(), mesh, &sol.p, &sol.f_h, problem)
}

pub fn oscillations_for_field(
    exec: Execution,
    mesh: &Mesh,
    p: &[f64],
    f_h: &[f64],
    problem: &ProblemSpec,
) -> Result<OscReport, EstimateError> {
    check(mesh, p, f_h)?;
    let edges = edge_terms(exec, mesh, p, problem);
    let local = try_map_range(exec, mesh.n_elements(), |t| {
        let key = mesh.key(t);
        let flux = LocalFlux::new(mesh, p, t);
        let area = flux.area;
        let h = area.sqrt();
        let proj = ElementP1::new(&flux.corners, t)?;
        let mut curl = Vec::with_capacity(TRI_DEG4.len());
        let mut v1 = Vec::with_capacity(TRI_DEG4.len());
        let mut v2 = Vec::with_capacity(TRI_DEG4.len());
        let mut data = 0.0;
        for (x, w) in TRI_DEG4.map(&flux.corners) {
            let q = flux.eval(x);
            curl.push(dot(problem.coefficient.curl_a_inv(x, key), q));
            let v = mat_vec(problem.coefficient.a_inv(x, key), q);
            v1.push(v[0]);
            v2.push(v[1]);
            let d = problem.f.eval(x, key) - f_h[t];
            data += w * d * d;
        }
        let jump = h * mesh.element_edges(t).iter().fold(0.0, |s, &e| s + edges[e].1);
        Ok::<_, EstimateError>([
            area * area * proj.residual(&curl),
            jump,
            area * area * data,
            area * area * (proj.residual(&v1) + proj.residual(&v2)),
        ])
    })?;
    let col = |i: usize| local.iter().map(|l| l[i]).collect::<Vec<_>>();
    Ok(OscReport {
        curl: col(0),
        jump: col(1),
        data: col(2),
        displacement: col(3),
    })
}

/// `osc(g, T)^2 = h_T^2 ||g - g_T||^2` per element for a scalar field `g`,
/// with `g_T` the projection computed the same way as the source projection.
pub fn data_oscillation(
    mesh: &Mesh,
    g: &crate::problems::ScalarField,
) -> Result<Vec<f64>, crate::fem::FemError> {
    let g_h = crate::fem::project_f(g, mesh)?;
    Ok(data_oscillation_against(mesh, g, &g_h))
}

/// `h_T^2 ||g - c_T||^2` for given element constants `c`.
pub fn data_oscillation_against(mesh: &Mesh, g: &crate::problems::ScalarField, c: &[f64]) -> Vec<f64> {
    map_range(Execution::default(), mesh.n_elements(), |t| {
        let key = mesh.key(t);
        let area = mesh.area(t);
        let s: f64 = TRI_DEG4
            .map(&mesh.corners(t))
            .map(|(x, w)| {
                let d = g.eval(x, key) - c[t];
                w * d * d
            })
            .sum();
        area * area * s
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{interpolate_flux, project_f, solve_problem, SolverKind};
    use crate::mesh::{Domain, ElemKey, RootMesh};
    use crate::problems::{ScalarField, VectorField};
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

    fn homogeneous(f: ScalarField) -> ProblemSpec {
        let mut p = ProblemSpec::builtin("square_sine").unwrap();
        p.f = f;
        p.exact = None;
        p
    }

    #[test]
    fn linear_source_on_reference_triangle() {
        let m = reference_triangle();
        let p = homogeneous(ScalarField::from_fn(|x| x[0]));
        let f_h = project_f(&p.f, &m).unwrap();
        let r = indicators_for_field(Execution::Sequential, &m, &[0.0; 3], &f_h, &p, EstimatorKind::Stress).unwrap();
        assert!((r.data[0] - 1.0 / 72.0).abs() < 1e-15);
        assert_eq!(r.curl[0], 0.0);
        assert_eq!(r.jump[0], 0.0);
        let o = oscillations_for_field(Execution::Sequential, &m, &[0.0; 3], &f_h, &p).unwrap();
        assert!((o.data[0] - 1.0 / 72.0).abs() < 1e-15);
        assert!((o.osc_f2() - 1.0 / 72.0).abs() < 1e-15);
    }

    #[test]
    fn constant_field_has_no_indicator() {
        let c = [0.7, -1.3];
        let mut p = homogeneous(ScalarField::constant(0.0));
        p.dirichlet = Some(crate::problems::DirichletData {
            g: ScalarField::from_fn(move |x| c[0] * x[0] + c[1] * x[1]),
            grad: VectorField::constant(c),
        });
        let m = Mesh::create_initial(Domain::UnitSquare).unwrap().refine_uniform(3).unwrap();
        let q = interpolate_flux(&m, &VectorField::constant(c));
        let f_h = vec![0.0; m.n_elements()];
        let r = indicators_for_field(Execution::Sequential, &m, &q, &f_h, &p, EstimatorKind::Stress).unwrap();
        assert!(r.total() < 1e-26, "{}", r.total());
        for e in 0..m.n_edges() {
            let sol = MixedSolution {
                p: q.clone(),
                u: vec![0.0; m.n_elements()],
                f_h: f_h.clone(),
                residual: 0.0,
            };
            for (_, j) in tangential_jump(&m, &sol, &p, e).unwrap() {
                assert!(j.abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_data_gives_zero_estimator() {
        let m = Mesh::create_initial(Domain::LShape).unwrap().refine_uniform(2).unwrap();
        let p = homogeneous(ScalarField::constant(0.0));
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let r = indicators_full(&m, &sol, &p, 0.5).unwrap();
        assert_eq!(r.total(), 0.0);
        assert!(indicators_full(&m, &sol, &p, 1.5).is_err());
    }

    #[test]
    fn checkerboard_jumps_only_on_interfaces() {
        let p = ProblemSpec::builtin("checkerboard").unwrap();
        let m = p.initial_mesh().unwrap().refine_uniform(4).unwrap();
        let c = [1.0, 0.5];
        let q = interpolate_flux(&m, &VectorField::constant(c));
        let sol = MixedSolution {
            p: q,
            u: vec![0.0; m.n_elements()],
            f_h: vec![1.0; m.n_elements()],
            residual: 0.0,
        };
        for (e, rec) in m.edges().iter().enumerate() {
            let (Some(plus), Some(minus)) = (rec.plus, rec.minus) else { continue };
            let (a, b) = (m.key(plus.elem).root_id(), m.key(minus.elem).root_id());
            let xa = p.coefficient.a([0.0; 2], m.key(plus.elem))[0][0];
            let xb = p.coefficient.a([0.0; 2], m.key(minus.elem))[0][0];
            let j = tangential_jump(&m, &sol, &p, e).unwrap();
            if xa == xb {
                assert!(j.iter().all(|(_, v)| v.abs() < 1e-13), "roots {a} {b}");
            } else {
                let (tau, _) = m.edge_frame(e);
                let expect = (1.0 / xa - 1.0 / xb) * dot(c, tau);
                assert!(j.iter().all(|(_, v)| (v - expect).abs() < 1e-12));
                assert!(expect.abs() > 0.0);
            }
        }
        let r = indicators_stress(&m, &sol, &p).unwrap();
        assert!(r.jump.iter().any(|&v| v > 0.0));
        assert!(r.jump.contains(&0.0));
    }

    #[test]
    fn jump_is_independent_of_edge_orientation() {
        // Reversing the vertex numbering flips every tangent and swaps the two
        // sides of every edge; the two sign changes cancel.
        let p = ProblemSpec::builtin("checkerboard").unwrap();
        let m = p.initial_mesh().unwrap().refine_uniform(1).unwrap();
        let n = m.n_vertices();
        let verts: Vec<_> = (0..n).map(|i| m.vertices()[n - 1 - i]).collect();
        let tris: Vec<_> = m.triangles().iter().map(|t| t.map(|v| n - 1 - v)).collect();
        let r = Mesh::from_parts(verts, tris, m.keys().to_vec(), Arc::new(m.roots().clone())).unwrap();
        let field = VectorField::constant([0.3, 1.0]);
        let mk = |mesh: &Mesh| MixedSolution {
            p: interpolate_flux(mesh, &field),
            u: vec![0.0; mesh.n_elements()],
            f_h: vec![1.0; mesh.n_elements()],
            residual: 0.0,
        };
        let (s1, s2) = (mk(&m), mk(&r));
        for e in 0..m.n_edges() {
            let ends = m.edges()[e].vertices.map(|v| n - 1 - v);
            let e2 = (0..r.n_edges())
                .find(|&k| {
                    let v = r.edges()[k].vertices;
                    (v[0] == ends[0] && v[1] == ends[1]) || (v[0] == ends[1] && v[1] == ends[0])
                })
                .unwrap();
            assert_eq!(m.edge_frame(e).0.map(|v| -v), r.edge_frame(e2).0);
            let j1 = tangential_jump(&m, &s1, &p, e).unwrap();
            let mut j2 = tangential_jump(&r, &s2, &p, e2).unwrap();
            j2.reverse();
            for ((_, a), (_, b)) in j1.iter().zip(&j2) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(tangential_jump(&m, &s1, &p, m.n_edges()).is_err());
    }

    #[test]
    fn kappa_scales_data_term() {
        let p = ProblemSpec::builtin("square_sine").unwrap();
        let m = p.initial_mesh().unwrap().refine_uniform(4).unwrap();
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let r0 = indicators_full(&m, &sol, &p, 0.0).unwrap();
        let r1 = indicators_full(&m, &sol, &p, 1.0).unwrap();
        for t in 0..m.n_elements() {
            let h2 = r0.h[t] * r0.h[t];
            assert!((r0.data[t] - r1.data[t] / h2).abs() <= 1e-12 * r0.data[t]);
            assert!(r0.displacement[t] > 0.0);
        }
    }

    #[test]
    fn oscillation_vanishes_for_constant_coefficients() {
        let p = ProblemSpec::builtin("square_pwconst").unwrap();
        let m = p.initial_mesh().unwrap().refine_uniform(5).unwrap();
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let o = oscillations(&m, &sol, &p).unwrap();
        let eta = indicators_stress(&m, &sol, &p).unwrap();
        for t in 0..m.n_elements() {
            assert_eq!(o.data[t], 0.0);
            assert!(o.curl[t] < 1e-28);
            assert!(o.jump[t] <= 1e-24 * eta.jump[t].max(1e-6), "{}", o.jump[t]);
        }
    }

    #[test]
    fn oscillation_is_dominated_by_indicator() {
        let p = ProblemSpec::builtin("lshape_singular").unwrap();
        let m = p.initial_mesh().unwrap().refine_uniform(3).unwrap();
        let sol = solve_problem(&m, &p, SolverKind::Direct).unwrap();
        let o = oscillations(&m, &sol, &p).unwrap();
        let eta = indicators_stress(&m, &sol, &p).unwrap();
        for t in 0..m.n_elements() {
            assert!(o.local(t) <= eta.local(t) * (1.0 + 1e-12) + 1e-300);
        }
        assert!(o.jump.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn p2_residual_reproduces_quadratics() {
        let s: Vec<f64> = EDGE_GAUSS5.points.iter().map(|t| 3.0 - t + 4.0 * t * t).collect();
        assert!(edge_p2_residual(&s) < 1e-28);
        let s: Vec<f64> = EDGE_GAUSS5.points.iter().map(|t| t * t * t).collect();
        assert!(edge_p2_residual(&s) > 1e-6);
    }

    #[test]
    fn element_projection_reproduces_affine_fields() {
        let m = reference_triangle();
        let proj = ElementP1::new(&m.corners(0), 0).unwrap();
        let s: Vec<f64> = TRI_DEG4.map(&m.corners(0)).map(|(x, _)| 2.0 + x[0] - 3.0 * x[1]).collect();
        assert!(proj.residual(&s) < 1e-28);
        let s: Vec<f64> = TRI_DEG4.map(&m.corners(0)).map(|(x, _)| x[0] * x[1]).collect();
        assert!(proj.residual(&s) > 0.0);
        assert!(ElementP1::new(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 3).is_err());
    }

    #[test]
    fn locality_under_refinement() {
        let p = ProblemSpec::builtin("square_sine").unwrap();
        let coarse = p.initial_mesh().unwrap().refine_uniform(3).unwrap();
        let sol = solve_problem(&coarse, &p, SolverKind::Direct).unwrap();
        let fine = coarse.refine(&[0], 1).unwrap().mesh;
        let pf = crate::fem::prolongate_flux(&coarse, &sol.p, &fine).unwrap();
        let f_h = project_f(&p.f, &fine).unwrap();
        let rc = indicators_stress(&coarse, &sol, &p).unwrap();
        let rf = indicators_for_field(Execution::Parallel, &fine, &pf, &f_h, &p, EstimatorKind::Stress).unwrap();
        let mut matched = 0;
        for t in 0..fine.n_elements() {
            if let Some(c) = (0..coarse.n_elements()).find(|&c| coarse.key(c) == fine.key(t)) {
                assert!((rc.local(c) - rf.local(t)).abs() <= 1e-12 * rc.local(c));
                matched += 1;
            }
        }
        assert!(matched > 0);
        assert!(rf.total() <= rc.total());
    }
}
