//! Sequential against rayon-parallel element loops on a uniformly refined
//! checkerboard (variable coefficient, so every quadrature point does work).
//! Build with `--no-default-features` to see the fallback path alone; both
//! variants then run sequentially.

use amfem_core::estimate::{indicators_for_field, oscillations_for_field, EstimatorKind};
use amfem_core::fem::{assemble_with, project_f_with, solve_problem_with, DofMap, SolverKind};
use amfem_core::par::Execution;
use amfem_core::problems::ProblemSpec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn element_loops(c: &mut Criterion) {
    let problem = ProblemSpec::builtin("checkerboard").unwrap();
    let mesh = problem.initial_mesh().unwrap().refine_uniform(10).unwrap();
    let dofs = DofMap::build(&mesh);
    let f_h = project_f_with(Execution::Parallel, &problem.f, &mesh).unwrap();
    let sol = solve_problem_with(Execution::Parallel, &mesh, &problem, SolverKind::Direct).unwrap();
    let n = mesh.n_elements();

    let mut g = c.benchmark_group("assemble");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &e| {
            b.iter(|| assemble_with(e, &mesh, &problem, &dofs, black_box(&f_h)).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("indicators");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &e| {
            b.iter(|| indicators_for_field(e, &mesh, black_box(&sol.p), &sol.f_h, &problem, EstimatorKind::Stress).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("oscillations");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, n), &exec, |b, &e| {
            b.iter(|| oscillations_for_field(e, &mesh, black_box(&sol.p), &sol.f_h, &problem).unwrap())
        });
    }
    g.finish();
}

fn full_solve(c: &mut Criterion) {
    let problem = ProblemSpec::builtin("checkerboard").unwrap();
    let mesh = problem.initial_mesh().unwrap().refine_uniform(8).unwrap();
    let mut g = c.benchmark_group("solve_problem");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new(name, mesh.n_elements()), &exec, |b, &e| {
            b.iter(|| solve_problem_with(e, &mesh, &problem, SolverKind::Direct).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, element_loops, full_solve);
criterion_main!(benches);
