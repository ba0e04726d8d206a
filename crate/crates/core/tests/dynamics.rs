mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sheaf_sysid::dynamics::{equilibrium_projection, integrate, simulate_ensemble};
use sheaf_sysid::{
    CoboundaryOperator, Cochain0, Cochain1, DirectedGraph, EdgePotential, EdgeStalk, NodeField, Sheaf32, SimConfig,
};

use common::{cycle, gaussian_vector, random_sheaf, rng};

fn cfg(step: f64, horizon: f64) -> SimConfig<f64> {
    SimConfig {
        step,
        horizon,
        ..SimConfig::default()
    }
}

fn energy(op: &CoboundaryOperator<f64>, m: &EdgePotential<f64>, nf: &NodeField<f64>, x: &Cochain0<f64>) -> f64 {
    m.value(op.edge_space(), &op.apply_delta(x).unwrap()).unwrap() + nf.value(op, x).unwrap()
}

fn energy_is_monotone(
    op: &CoboundaryOperator<f64>,
    model: &EdgePotential<f64>,
    nf: &NodeField<f64>,
    x0: &Cochain0<f64>,
) -> std::result::Result<(), String> {
    let traj = integrate(op, model, nf, x0, &cfg(0.005, 2.0)).unwrap();
    let e: Vec<f64> = traj.states.iter().map(|x| energy(op, model, nf, x)).collect();
    for w in e.windows(2) {
        if w[1] > w[0] + 1e-9 {
            return Err(format!("energy rose from {} to {}", w[0], w[1]));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn energy_never_increases(seed in any::<u64>(), kind in 0usize..3) {
        let op = CoboundaryOperator::build(&random_sheaf(seed)).unwrap();
        let mut r = rng(seed ^ 1);
        let x0 = Cochain0(gaussian_vector(&mut r, op.d0()));
        let model = match kind {
            0 => EdgePotential::Quadratic,
            1 => EdgePotential::Monomial { coefficients: vec![1.0, 0.25, 0.03] },
            _ => EdgePotential::BoundedConfidence { threshold: 1.0 },
        };
        let res = energy_is_monotone(&op, &model, &NodeField::Zero, &x0);
        prop_assert!(res.is_ok(), "{:?}", res);
        // A node potential in the vertex metric keeps the flow a gradient flow.
        let nf = NodeField::Anchored { stiffness: 0.3, anchor: Cochain0(gaussian_vector(&mut r, op.d0())) };
        let res = energy_is_monotone(&op, &model, &nf, &x0);
        prop_assert!(res.is_ok(), "{:?}", res);
    }

    #[test]
    fn harmonic_forces_do_not_move_nodes(seed in any::<u64>()) {
        let op = CoboundaryOperator::build(&random_sheaf(seed)).unwrap();
        let h = op.harmonic_basis(1e-10).unwrap();
        prop_assume!(h.dim() > 0);
        let mut r = rng(seed ^ 2);
        let coefficients = vec![1.0, 0.2];
        let plain = EdgePotential::Monomial { coefficients: coefficients.clone() };
        // A random direction in ker δ*.
        let c = h.basis.clone() * gaussian_vector(&mut r, h.dim());
        let augmented = EdgePotential::HarmonicAugmented {
            coefficients,
            harmonic_coefficient: 0.8,
            direction: Cochain1(c),
        };
        let x0 = Cochain0(gaussian_vector(&mut r, op.d0()));
        let a = integrate(&op, &plain, &NodeField::Zero, &x0, &cfg(0.01, 2.0)).unwrap();
        let b = integrate(&op, &augmented, &NodeField::Zero, &x0, &cfg(0.01, 2.0)).unwrap();
        for (p, q) in a.states.iter().zip(&b.states) {
            prop_assert!((&p.0 - &q.0).amax() <= 1e-12);
        }
    }
}

#[test]
fn shifted_quadratic_reaches_predicted_equilibrium() {
    for (n, angle) in [
        (3, 0.0),
        (5, 0.0),
        (3, std::f64::consts::FRAC_PI_4),
        (5, std::f64::consts::FRAC_PI_4),
    ] {
        let op = cycle(n, angle);
        let mut r = rng(n as u64);
        let b = Cochain1(gaussian_vector(&mut r, op.d1()));
        let x0 = Cochain0(gaussian_vector(&mut r, op.d0()));
        let model = EdgePotential::ShiftedQuadratic { target: b.clone() };
        let traj = integrate(&op, &model, &NodeField::Zero, &x0, &cfg(0.01, 20.0)).unwrap();
        let want = equilibrium_projection(&op, &b, &x0).unwrap();
        let err = (&traj.terminal_state().0 - &want.0).amax();
        // Linear flow: the offset decays at least like exp(−gap·t) in the vertex norm.
        let gap = op.laplacian_spectrum().into_iter().find(|&l| l > 1e-9).unwrap();
        let offset = Cochain0(&x0.0 - &want.0);
        let bound = (-gap * 20.0).exp() * op.norm0_squared(&offset).sqrt();
        if bound < 1e-7 {
            assert!(err <= 1e-6, "n={n} angle={angle}: {err}");
        } else {
            assert!(err <= bound, "n={n} angle={angle}: {err} above bound {bound}");
        }
    }
}

#[test]
fn bounded_confidence_step_halving() {
    let op = cycle(3, std::f64::consts::FRAC_PI_4);
    let model = EdgePotential::BoundedConfidence { threshold: 1.0 };
    for seed in 0..4 {
        let x0 = Cochain0(gaussian_vector(&mut rng(seed), op.d0()) * 1.5);
        let coarse = integrate(&op, &model, &NodeField::Zero, &x0, &cfg(0.01, 10.0)).unwrap();
        let fine = integrate(&op, &model, &NodeField::Zero, &x0, &cfg(0.005, 10.0)).unwrap();
        let diff = (&coarse.terminal_state().0 - &fine.terminal_state().0).amax();
        assert!(diff <= 1e-8, "seed {seed}: {diff}");
    }
}

#[test]
fn quadratic_flow_matches_matrix_exponential() {
    let op = CoboundaryOperator::build(&random_sheaf(7)).unwrap();
    let l: DMatrix<f64> = op.adjoint_matrix() * op.matrix();
    let x0 = gaussian_vector(&mut rng(8), op.d0());
    let traj = integrate(
        &op,
        &EdgePotential::Quadratic,
        &NodeField::Zero,
        &Cochain0(x0.clone()),
        &cfg(0.01, 1.0),
    )
    .unwrap();
    let want = (-l).exp() * x0;
    assert!((&traj.terminal_state().0 - want).amax() <= 1e-8);
}

#[test]
fn quadratic_flow_converges_to_section_projection() {
    let op = cycle(5, 0.0);
    let x0 = Cochain0(gaussian_vector(&mut rng(3), op.d0()));
    let traj = integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &cfg(0.01, 20.0)).unwrap();
    let sections = op.global_section_basis(1e-10).unwrap();
    let want = op.project_to_sections(&sections, &x0).unwrap();
    assert!((&traj.terminal_state().0 - &want.0).amax() <= 1e-6);
    // Identity cycle: the section is the vertex average.
    for k in 0..2 {
        let mean = (0..5).map(|v| x0[2 * v + k]).sum::<f64>() / 5.0;
        assert!((want[k] - mean).abs() < 1e-12);
    }
}

#[test]
fn rk4_is_fourth_order() {
    let op = cycle(3, std::f64::consts::FRAC_PI_4);
    let model = EdgePotential::Monomial {
        coefficients: vec![1.0, 0.25, 0.03],
    };
    let x0 = Cochain0(gaussian_vector(&mut rng(4), op.d0()));
    let end = |h: f64| {
        integrate(&op, &model, &NodeField::Zero, &x0, &cfg(h, 1.0))
            .unwrap()
            .terminal_state()
            .0
            .clone()
    };
    let reference = end(0.1 / 64.0);
    let e1 = (end(0.1) - &reference).amax();
    let e2 = (end(0.05) - &reference).amax();
    assert!(e1 / e2 >= 12.0, "error ratio {}", e1 / e2);
}

#[test]
fn ensemble_is_deterministic_and_ordered() {
    let op = cycle(3, 0.0);
    let model = EdgePotential::Monomial {
        coefficients: vec![1.0, 0.1],
    };
    let mut r = rng(5);
    let ics: Vec<Cochain0<f64>> = (0..6).map(|_| Cochain0(gaussian_vector(&mut r, op.d0()))).collect();
    let c = SimConfig {
        noise_std: 0.01,
        seed: 99,
        ..cfg(0.01, 1.0)
    };
    let a = simulate_ensemble(&op, &model, &NodeField::Zero, &ics, &c);
    let b = simulate_ensemble(&op, &model, &NodeField::Zero, &ics, &c);
    assert_eq!(a.len(), 6);
    for (i, (p, q)) in a.iter().zip(&b).enumerate() {
        let (p, q) = (p.as_ref().unwrap(), q.as_ref().unwrap());
        assert_eq!(p, q);
        // Noise is added after integration, so the first sample sits near its IC.
        assert!((&p.states[0].0 - &ics[i].0).amax() < 0.1);
    }
    // Distinct per-trajectory noise streams.
    let d0: DVector<f64> = &a[0].as_ref().unwrap().states[0].0 - &ics[0].0;
    let d1: DVector<f64> = &a[1].as_ref().unwrap().states[0].0 - &ics[1].0;
    assert!((d0 - d1).amax() > 1e-6);
    assert!(simulate_ensemble(&op, &model, &NodeField::Zero, &[], &c).is_empty());
}

#[test]
fn single_precision_flow_tracks_double() {
    let id = DMatrix::<f32>::identity(2, 2);
    let s = Sheaf32::new(
        DirectedGraph::cycle(3).unwrap(),
        vec![2; 3],
        (0..3).map(|_| EdgeStalk::new(id.clone(), id.clone())).collect(),
    )
    .unwrap();
    let op32 = CoboundaryOperator::build(&s).unwrap();
    let op64 = cycle(3, 0.0);
    let x0: Vec<f64> = vec![1.0, -0.5, 0.2, 0.3, -0.7, 0.9];
    let c32 = SimConfig::<f32> {
        horizon: 1.0,
        ..SimConfig::default()
    };
    let a = integrate(
        &op32,
        &EdgePotential::Quadratic,
        &NodeField::Zero,
        &Cochain0::from_slice(&x0.iter().map(|&v| v as f32).collect::<Vec<_>>()),
        &c32,
    )
    .unwrap();
    let b = integrate(
        &op64,
        &EdgePotential::Quadratic,
        &NodeField::Zero,
        &Cochain0::from_slice(&x0),
        &cfg(0.01, 1.0),
    )
    .unwrap();
    for (p, q) in a.terminal_state().iter().zip(b.terminal_state().iter()) {
        assert!((*p as f64 - q).abs() < 1e-5);
    }
}
