use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ldg_core::energy::{EnergyParams, Forms, SpontaneousCurvature};
use ldg_core::flow::{assemble_step, solve_step, FlowConfig, FlowOperator};
use ldg_core::hessian::LiftingConfig;
use ldg_core::mesh::{build_rect_mesh, BoundarySelector};
use ldg_core::space::{flat_plate, DGSpace};

fn cylinder_forms(nx: usize, ny: usize) -> Arc<Forms> {
    let mesh = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, nx, ny, BoundarySelector::Left).unwrap();
    let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
    Arc::new(Forms::new(space, LiftingConfig::default(), EnergyParams::default()).unwrap())
}

fn hessian_and_energy(c: &mut Criterion) {
    let mut group = c.benchmark_group("discrete_hessian");
    for (nx, ny) in [(8, 8), (16, 16)] {
        let forms = cylinder_forms(nx, ny);
        let y = flat_plate(forms.space()).unwrap();
        let z = SpontaneousCurvature::constant(forms.space().mesh(), [[1.0, 0.0], [0.0, 1.0]]);
        let label = nx * ny;
        group.bench_with_input(BenchmarkId::new("hessian", label), &y, |b, y| b.iter(|| black_box(forms.hessian(y))));
        group.bench_with_input(BenchmarkId::new("energy_report", label), &y, |b, y| {
            b.iter(|| black_box(forms.report(y, &z).unwrap()))
        });
    }
    group.finish();
}

fn flow_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("flow_step");
    group.sample_size(10);
    for (nx, ny) in [(8, 8), (16, 16)] {
        let forms = cylinder_forms(nx, ny);
        let config = FlowConfig::default();
        let y = flat_plate(forms.space()).unwrap();
        let z = SpontaneousCurvature::constant(forms.space().mesh(), [[1.0, 0.0], [0.0, 1.0]]);
        let label = nx * ny;
        group.bench_function(BenchmarkId::new("operator_factorization", label), |b| {
            b.iter(|| black_box(FlowOperator::new(forms.clone(), &config).unwrap()))
        });
        let op = FlowOperator::new(forms.clone(), &config).unwrap();
        let hy = forms.hessian(&y);
        group.bench_function(BenchmarkId::new("assemble", label), |b| {
            b.iter(|| black_box(assemble_step(&op, &y, &hy, &z).unwrap()))
        });
        let sys = assemble_step(&op, &y, &hy, &z).unwrap();
        group.bench_function(BenchmarkId::new("schur_cg", label), |b| {
            b.iter(|| black_box(solve_step(&sys, &config, None).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, hessian_and_energy, flow_step);
criterion_main!(benches);
