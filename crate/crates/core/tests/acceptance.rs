//! Acceptance criteria. Each test prints one PASS/FAIL line.
//!
//! Criteria 11-14 reproduce published numbers on production-size meshes and
//! take a long time; they are ignored by default:
//! `cargo test --release -p ldg-core --test acceptance -- --ignored --nocapture`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ldg_core::energy::{EnergyParams, Forms, SpontaneousCurvature};
use ldg_core::flow::{assemble_step, run_flow, FlowConfig, FlowOperator, FlowState, SchurPreconditioner};
use ldg_core::hessian::{frob, BasisHessianTable, LiftingConfig, LiftingMode};
use ldg_core::mesh::{build_crease_mesh, build_rect_mesh, build_tri_rect_mesh, BoundarySelector};
use ldg_core::oracle::{
    element_quadrature, fd_variation, midpoint_rule, schur_spectrum_probe, smallest_singular_value,
    solve_matrix_equation,
};
use ldg_core::scenario::{
    cylinder_config, first_step_cg_iterations, manufactured_study, preset, prepare, ScenarioConfig, StudyKind,
};
use ldg_core::space::{flat_plate, interpolate, BoundaryData, DGField, DGSpace};
use nalgebra::{Matrix2, Matrix3x2};

fn verdict(id: &str, pass: bool, detail: String) {
    println!("criterion {id}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn cylinder_forms(nx: usize, ny: usize) -> Arc<Forms> {
    let mesh = build_rect_mesh(-5.0, 5.0, -2.0, 2.0, nx, ny, BoundarySelector::Left).unwrap();
    let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
    Arc::new(Forms::new(space, LiftingConfig::default(), EnergyParams::default()).unwrap())
}

fn identity_curvature(forms: &Forms) -> SpontaneousCurvature {
    SpontaneousCurvature::constant(forms.space().mesh(), [[1.0, 0.0], [0.0, 1.0]])
}

fn barycenter_gradients(y: &DGField) -> Vec<[[f64; 2]; 3]> {
    (0..y.space().mesh().num_elements()).map(|e| y.eval_center(e).grad).collect()
}

#[test]
fn criterion_01_flat_state_neutrality() {
    let forms = cylinder_forms(8, 4);
    let y = flat_plate(forms.space()).unwrap();
    let z = SpontaneousCurvature::zero(forms.space().mesh());
    let state = run_flow(forms, y, &z, &FlowConfig::default(), &mut |_| Ok(())).unwrap();
    let max_e = state.history.iter().map(|r| r.energy.abs()).fold(0.0, f64::max);
    let inc = state.history[1].increment_norm;
    verdict(
        "1",
        state.step == 1 && state.converged && max_e <= 1e-12 && inc < 1e-10,
        format!("steps {}, max |E_h| {max_e:.2e}, |dy| {inc:.2e}", state.step),
    );
}

#[test]
fn criterion_02_discrete_hessian_consistency() {
    let mesh = build_rect_mesh(-1.0, 2.0, 0.0, 1.5, 6, 3, BoundarySelector::All).unwrap();
    let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
    let table = BasisHessianTable::new(space.clone(), LiftingConfig::default()).unwrap();
    let f = |x: [f64; 2]| [x[0] * x[0] - 0.5 * x[1], 2.0 * x[0] * x[1] + x[1] * x[1], 1.0 - 3.0 * x[1] * x[1] + x[0]];
    let g = |x: [f64; 2]| [[2.0 * x[0], -0.5], [2.0 * x[1], 2.0 * x[0] + 2.0 * x[1]], [1.0, -6.0 * x[1]]];
    let v = interpolate(&space, f, Some(BoundaryData::new(f, g))).unwrap();
    let h = table.hessian_of(&v);
    let mut worst: f64 = 0.0;
    for e in 0..space.mesh().num_elements() {
        for q in 0..space.nq() {
            let broken = v.hessian_qp(e, q);
            for c in 0..3 {
                let d = h.value(e, c, q);
                for a in 0..2 {
                    for b in 0..2 {
                        worst = worst.max((d[a][b] - broken[c][a][b]).abs());
                    }
                }
            }
        }
    }
    let y = flat_plate(&space).unwrap();
    let hf = table.hessian_of(&y);
    let flat = hf.values().iter().map(|m| frob(m, m).sqrt()).fold(0.0, f64::max);
    verdict("2", worst < 1e-11 && flat < 1e-11, format!("max |H_h - D2_h| {worst:.2e}, flat max |H_h| {flat:.2e}"));
}

#[test]
fn criterion_03_hessian_convergence() {
    let rows = manufactured_study(StudyKind::HessianConvergence, 4).unwrap();
    let ratios: Vec<f64> = rows.iter().filter_map(|r| r.ratio).collect();
    verdict("3", ratios.iter().all(|r| *r >= 1.7), format!("error ratios {ratios:.3?}"));
}

#[test]
fn criterion_04_variation_oracles() {
    let mesh = build_rect_mesh(0.0, 2.0, 0.0, 1.0, 3, 2, BoundarySelector::Left).unwrap();
    let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
    let forms = Forms::new(space.clone(), LiftingConfig::default(), EnergyParams::default()).unwrap();
    let z = SpontaneousCurvature::constant(space.mesh(), [[1.0, -0.4], [-0.4, 2.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flat = flat_plate(&space).unwrap();
    let mut worst_l: f64 = 0.0;
    let mut worst_a: f64 = 0.0;
    for _ in 0..20 {
        let mut y = flat.clone();
        let noise: Vec<f64> = (0..space.total_dofs()).map(|_| rng.random_range(-0.2..0.2)).collect();
        y.axpy(1.0, &noise);
        let dv: Vec<f64> = (0..space.total_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = DGField::from_coefficients(space.clone(), dv).unwrap();
        let l = forms.ell_form(&y, &v, &z).unwrap();
        let fd_c = fd_variation(|w| forms.cubic_energy(w, &z), &y, &v, 1e-5).unwrap();
        worst_l = worst_l.max((fd_c - l).abs() / l.abs());
        let a = forms.a_form(&y, &v).unwrap();
        let fd_b = fd_variation(|w| forms.bending_energy(w), &y, &v, 1e-5).unwrap();
        worst_a = worst_a.max((fd_b - a).abs() / a.abs());
    }
    verdict(
        "4",
        worst_l < 1e-6 && worst_a < 1e-6,
        format!("max relative error: ell {worst_l:.2e}, a {worst_a:.2e}"),
    );
}

#[test]
fn criterion_05_matrix_lemma() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut bounds = true;
    let mut count = 0;
    while count < 1000 {
        let b = Matrix3x2::from_fn(|_, _| rng.random_range(-2.0..2.0));
        if smallest_singular_value(&b) < 0.1 {
            continue;
        }
        let (p, q, r): (f64, f64, f64) =
            (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let c = Matrix2::new(p, q, q, r);
        let res = solve_matrix_equation(&b, &c).unwrap();
        worst = worst.max(res.residual);
        bounds &= res.bound_holds();
        count += 1;
    }
    verdict("5", worst < 1e-12 && bounds, format!("max residual {worst:.2e}, bounds hold {bounds}"));
}

#[test]
fn criterion_06_midpoint_exactness() {
    let mut worst: f64 = 0.0;
    for mesh in [
        build_rect_mesh(-1.0, 3.0, 0.0, 2.0, 5, 3, BoundarySelector::None).unwrap(),
        build_tri_rect_mesh(-1.0, 3.0, 0.0, 2.0, 4, 3, BoundarySelector::None).unwrap(),
    ] {
        let space = DGSpace::new(Arc::new(mesh), 2).unwrap();
        let coef = |e: usize| {
            let s = e as f64;
            [(0.3 * s).sin(), (1.1 * s).cos(), 0.5 - 0.1 * s]
        };
        let f = |e: usize, x: [f64; 2]| {
            let c = coef(e);
            c[0] + c[1] * x[0] + c[2] * x[1]
        };
        let mid = midpoint_rule(space.mesh(), f);
        let exact = element_quadrature(&space, f);
        worst = worst.max((mid - exact).abs());
    }
    verdict("6", worst < 1e-13, format!("max error {worst:.2e}"));
}

/// Cylinder on 32 elements for a fixed number of steps, checking every
/// accepted iterate from the outside.
fn cylinder_run(tau: f64, steps: usize) -> (FlowState, bool, f64) {
    let forms = cylinder_forms(8, 4);
    let z = identity_curvature(&forms);
    let y = flat_plate(forms.space()).unwrap();
    let config = FlowConfig { tau, tol: 1e-14, max_steps: steps, ..FlowConfig::default() };
    let mut bounds_ok = true;
    let mut worst_bound_gap: f64 = 0.0;
    let state = run_flow(forms, y, &z, &config, &mut |s| {
        let delta = s.last().unwrap().max_defect;
        for g in barycenter_gradients(&s.y) {
            for i in 0..2 {
                let n2: f64 = (0..3).map(|c| g[c][i] * g[c][i]).sum();
                let gap = (n2 - 1.0).abs() - delta;
                worst_bound_gap = worst_bound_gap.max(gap);
                bounds_ok &= gap <= 1e-12;
            }
        }
        Ok(())
    })
    .unwrap();
    (state, bounds_ok, worst_bound_gap)
}

#[test]
fn criterion_07_energy_monotonicity_and_tangency() {
    let (state, _, _) = cylinder_run(5e-3, 500);
    let cg_tol = FlowConfig::default().cg_rel_tol;
    let mut worst_rise = f64::NEG_INFINITY;
    let mut monotone = true;
    for w in state.history.windows(2) {
        let slack = 1e-8 * (1.0 + w[0].energy.abs());
        let rise = w[1].energy - w[0].energy;
        worst_rise = worst_rise.max(rise);
        monotone &= rise <= slack;
    }
    let worst_tan = state.history.iter().map(|r| r.tangency).fold(0.0, f64::max);
    verdict(
        "7",
        state.step == 500 && monotone && worst_tan <= 10.0 * cg_tol,
        format!(
            "{} steps, E_h {:.4} -> {:.4}, max step change {worst_rise:.2e}, max tangency {worst_tan:.2e}",
            state.step,
            state.history[0].energy,
            state.history.last().unwrap().energy
        ),
    );
}

#[test]
fn criterion_08_defect_tau_scaling() {
    let taus: [f64; 3] = [1e-2, 5e-3, 2.5e-3];
    let defects: Vec<f64> = taus
        .iter()
        .map(|&tau| {
            let steps = (1.0 / tau).round() as usize;
            let (state, _, _) = cylinder_run(tau, steps);
            state.history.last().unwrap().max_defect
        })
        .collect();
    let ratios = [defects[0] / defects[1], defects[1] / defects[2]];
    let pass = defects[0] > defects[1] && defects[1] > defects[2] && ratios.iter().all(|r| (1.5..=2.7).contains(r));
    verdict("8", pass, format!("final max defects {defects:?}, ratios {ratios:.3?}"));
}

#[test]
fn criterion_09_pointwise_constraint_bounds() {
    let (state, ok, gap) = cylinder_run(5e-3, 200);
    let inner = state.checks.iter().all(|c| c.constraint_bounds && c.defect_growth);
    verdict(
        "9",
        ok && inner,
        format!("{} iterates, worst excess over delta {gap:.2e}, defect growth bound held {inner}", state.history.len()),
    );
}

#[test]
fn criterion_10_crease_mode_ignores_kinks() {
    let (ymax, crease) = (15.0, [[0.0, 2.0], [9.6, 2.0], [4.8, 6.0]]);
    let mesh = build_crease_mesh(0.0, 9.6, 0.0, ymax, crease, 6, 8).unwrap();
    let coef = ldg_core::mesh::quadratic_through([crease[0], crease[2], crease[1]]).unwrap();
    let space = Arc::new(DGSpace::new(Arc::new(mesh), 2).unwrap());
    // flat in the plane, vertical displacement growing linearly in the
    // normalized distance above the crease: C^1 away from it, kinked across it
    let f = |x: [f64; 2]| {
        let c = coef[0] + coef[1] * x[0] + coef[2] * x[0] * x[0];
        let s = if x[1] > c { (x[1] - c) / (ymax - c) } else { 0.0 };
        [x[0], x[1], s]
    };
    let u = interpolate(&space, f, None).unwrap();
    let crease_mode = LiftingConfig { mode: LiftingMode::Crease, ..LiftingConfig::default() };
    let h_crease = BasisHessianTable::new(space.clone(), crease_mode).unwrap().hessian_of(&u);
    let h_std = BasisHessianTable::new(space.clone(), LiftingConfig::default()).unwrap().hessian_of(&u);
    let (mut d_crease, mut d_std): (f64, f64) = (0.0, 0.0);
    for e in 0..space.mesh().num_elements() {
        for q in 0..space.nq() {
            let broken = u.hessian_qp(e, q);
            for c in 0..3 {
                for (h, d) in [(&h_crease, &mut d_crease), (&h_std, &mut d_std)] {
                    let m = h.value(e, c, q);
                    let diff = [
                        [m[0][0] - broken[c][0][0], m[0][1] - broken[c][0][1]],
                        [m[1][0] - broken[c][1][0], m[1][1] - broken[c][1][1]],
                    ];
                    *d = d.max(frob(&diff, &diff).sqrt());
                }
            }
        }
    }
    verdict(
        "10",
        d_crease < 1e-10 && d_std > 1e-3,
        format!("max |H - D2_h|: crease mode {d_crease:.2e}, standard mode {d_std:.2e}"),
    );
}

fn run_preset(config: &ScenarioConfig) -> FlowState {
    let p = prepare(config).unwrap();
    let t = std::time::Instant::now();
    let state = run_flow(p.forms, p.initial, &p.curvature, &config.flow, &mut |s| {
        let r = s.last().unwrap();
        if r.step % 1000 == 0 {
            eprintln!("  [{}] step {} E_full {:.5} defect {:.3e}", config.name, r.step, r.energy_full, r.max_defect);
        }
        Ok(())
    })
    .unwrap();
    let r = state.last().unwrap();
    eprintln!(
        "  [{}] finished: {} steps, converged {}, E_h {:.5}, E_full {:.5}, max defect {:.3e}, {:.0} s",
        config.name,
        state.step,
        state.converged,
        r.energy,
        r.energy_full,
        r.max_defect,
        t.elapsed().as_secs_f64()
    );
    state
}

#[test]
#[ignore = "long run; reproduces published energies"]
fn criterion_11_cylinder_energy() {
    let coarse = run_preset(&cylinder_config(16, 16)).last().unwrap().energy_full;
    let fine = run_preset(&cylinder_config(32, 32)).last().unwrap().energy_full;
    let pass = (coarse - 16.8627).abs() <= 0.5 && (fine - 17.8038).abs() <= 0.5 && coarse < 20.0 && fine < 20.0;
    verdict("11", pass, format!("E_h 256 elements {coarse:.4} (ref 16.8627), 1024 elements {fine:.4} (ref 17.8038)"));
}

#[test]
#[ignore = "long run; reproduces published energies"]
fn criterion_12_cigar_and_helix_energy() {
    let cigar = run_preset(&preset("cigar").unwrap()).last().unwrap().energy_full;
    let helix = run_preset(&preset("helix").unwrap()).last().unwrap().energy_full;
    let pass = (cigar - 46.3898).abs() <= 1.5 && (helix - 3.2507).abs() <= 0.3;
    verdict("12", pass, format!("cigar E_h {cigar:.4} (ref 46.3898), helix E_h {helix:.4} (ref 3.2507)"));
}

#[test]
#[ignore = "long run; solver scaling across three meshes"]
fn criterion_13_cg_and_condition_scaling() {
    let mut iters = Vec::new();
    let mut kappas = Vec::new();
    for n in [8, 16, 32] {
        let mut cfg = cylinder_config(n, n);
        cfg.flow.schur_preconditioner = SchurPreconditioner::None;
        iters.push(first_step_cg_iterations(&cfg).unwrap().0 as f64);
        let p = prepare(&cfg).unwrap();
        let op = FlowOperator::new(p.forms.clone(), &cfg.flow).unwrap();
        let hy = p.forms.hessian(&p.initial);
        let sys = assemble_step(&op, &p.initial, &hy, &p.curvature).unwrap();
        let probe = schur_spectrum_probe(&sys, 300);
        assert!(probe.lambda_min > 0.0);
        kappas.push(probe.condition);
    }
    let it_ratios = [iters[1] / iters[0], iters[2] / iters[1]];
    let k_ratios = [kappas[1] / kappas[0], kappas[2] / kappas[1]];
    let pass = it_ratios.iter().all(|r| *r <= 2.5) && k_ratios.iter().all(|r| *r <= 5.0);
    verdict(
        "13",
        pass,
        format!("CG iterations {iters:?} (ratios {it_ratios:.2?}), kappa {kappas:?} (ratios {k_ratios:.2?})"),
    );
}

#[test]
#[ignore = "long run; folding across a curved crease"]
fn criterion_14_origami_fold() {
    let cfg = preset("origami").unwrap();
    let state = run_preset(&cfg);
    let p = prepare(&cfg).unwrap();
    let forms = p.forms;
    let y = DGField::from_coefficients(forms.space().clone(), state.y.coefficients().to_vec()).unwrap();
    let h = forms.hessian(&y);
    let mesh = forms.space().mesh();
    let mut curvature = [0.0f64; 2];
    for e in 0..mesh.num_elements() {
        let g = y.eval_center(e).grad;
        let (d1, d2) = ([g[0][0], g[1][0], g[2][0]], [g[0][1], g[1][1], g[2][1]]);
        let n = [d1[1] * d2[2] - d1[2] * d2[1], d1[2] * d2[0] - d1[0] * d2[2], d1[0] * d2[1] - d1[1] * d2[0]];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        let hb = h.reduced(e);
        let ii22: f64 = (0..3).map(|c| hb[c][1][1] * n[c]).sum::<f64>() / nn;
        curvature[mesh.region(e) as usize] += mesh.area(e) * ii22;
    }
    let defect = state.last().unwrap().max_defect;
    let pass = curvature[0] * curvature[1] < 0.0 && (1e-5..=1e-1).contains(&defect);
    verdict(
        "14",
        pass,
        format!("integrated II_22 below {:.4}, above {:.4}; max defect {defect:.3e}", curvature[0], curvature[1]),
    );
}
