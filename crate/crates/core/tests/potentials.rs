mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use sheaf_sysid::potentials::{bounded_confidence_profile, bounded_confidence_slope};
use sheaf_sysid::{CoboundaryOperator, Cochain1, DirectedGraph, EdgePotential, EdgeSpace, EdgeStalk, Sheaf};

use common::{rng, spd};

/// Three edges on a triangle, stalk dims 2, 1, 3, with random SPD edge Grams.
fn space(seed: u64) -> EdgeSpace<f64> {
    let mut r = rng(seed);
    let dims = [2usize, 1, 3];
    let stalks = dims
        .iter()
        .map(|&d| EdgeStalk::new(DMatrix::identity(d, 2), DMatrix::identity(d, 2)).with_gram(spd(&mut r, d)))
        .collect();
    let s = Sheaf::new(DirectedGraph::cycle(3).unwrap(), vec![2; 3], stalks).unwrap();
    CoboundaryOperator::build(&s).unwrap().edge_space().clone()
}

fn models(space: &EdgeSpace<f64>, seed: u64) -> Vec<EdgePotential<f64>> {
    let mut r = rng(seed ^ 0x5EED);
    let d = space.dim();
    let v = |r: &mut rand_chacha::ChaCha8Rng| Cochain1::from_vec((0..d).map(|_| r.random_range(-1.0..1.0)).collect());
    vec![
        EdgePotential::Quadratic,
        EdgePotential::ShiftedQuadratic { target: v(&mut r) },
        EdgePotential::BoundedConfidence { threshold: 1.3 },
        EdgePotential::Antagonistic {
            negative: vec![true, false, true],
        },
        EdgePotential::Monomial {
            coefficients: vec![1.0, 0.25, 0.03],
        },
        EdgePotential::HarmonicAugmented {
            coefficients: vec![0.5, -0.1, 0.02],
            harmonic_coefficient: 0.7,
            direction: v(&mut r),
        },
    ]
}

fn near_seam(space: &EdgeSpace<f64>, y: &[f64], eps: f64) -> bool {
    (0..space.edge_count()).any(|e| {
        let r = space.norm_squared(e, &y[space.layout().range(e)]).sqrt();
        (r - eps).abs() < 1e-3
    })
}

/// Euclidean gradient of `U` by central differences.
fn fd_gradient(space: &EdgeSpace<f64>, m: &EdgePotential<f64>, y: &DVector<f64>) -> DVector<f64> {
    let h = 1e-6;
    DVector::from_fn(y.len(), |i, _| {
        let (mut a, mut b) = (y.clone(), y.clone());
        a[i] += h;
        b[i] -= h;
        (m.value(space, &Cochain1(a)).unwrap() - m.value(space, &Cochain1(b)).unwrap()) / (2.0 * h)
    })
}

/// `R_e Φ_e`, the Euclidean gradient implied by the force.
fn lowered_force(space: &EdgeSpace<f64>, m: &EdgePotential<f64>, y: &DVector<f64>) -> DVector<f64> {
    let f = m.force(space, &Cochain1(y.clone())).unwrap();
    let mut out = DVector::zeros(y.len());
    for e in 0..space.edge_count() {
        let r = space.layout().range(e);
        space.lower(e, &f.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn force_is_gradient(seed in any::<u64>()) {
        let sp = space(seed);
        let mut r = rng(seed);
        let y = DVector::from_fn(sp.dim(), |_, _| r.random_range(-1.2..1.2));
        prop_assume!(!near_seam(&sp, y.as_slice(), 1.3));
        for m in models(&sp, seed) {
            let fd = fd_gradient(&sp, &m, &y);
            let an = lowered_force(&sp, &m, &y);
            let err = (&fd - &an).amax();
            prop_assert!(err <= 1e-6 * (1.0 + an.amax()), "{}: {} vs {}", m.kind_name(), fd, an);
        }
    }

    #[test]
    fn forces_are_edge_separable(seed in any::<u64>(), edge in 0usize..3) {
        let sp = space(seed);
        let mut r = rng(seed ^ 3);
        let y = DVector::from_fn(sp.dim(), |_, _| r.random_range(-1.0..1.0));
        let mut y2 = y.clone();
        for i in sp.layout().range(edge) {
            y2[i] += r.random_range(-0.5..0.5);
        }
        for m in models(&sp, seed) {
            let a = m.force(&sp, &Cochain1(y.clone())).unwrap();
            let b = m.force(&sp, &Cochain1(y2.clone())).unwrap();
            for e in (0..3).filter(|&e| e != edge) {
                prop_assert_eq!(a.block(sp.layout(), e), b.block(sp.layout(), e));
            }
        }
    }

    #[test]
    fn closed_loops_do_no_work(seed in any::<u64>()) {
        let sp = space(seed);
        let mut r = rng(seed ^ 5);
        // A small random quadrilateral away from the bounded-confidence seam.
        let center = DVector::from_fn(sp.dim(), |_, _| r.random_range(-0.4..0.4));
        let corners: Vec<DVector<f64>> = (0..4)
            .map(|_| &center + DVector::from_fn(sp.dim(), |_, _| r.random_range(-0.2..0.2)))
            .collect();
        // Gauss–Legendre, 5 nodes: exact for the polynomial integrands here.
        let nodes = [0.0, -0.538_469_310_105_683, 0.538_469_310_105_683, -0.906_179_845_938_664, 0.906_179_845_938_664];
        let weights = [0.568_888_888_888_889, 0.478_628_670_499_366, 0.478_628_670_499_366, 0.236_926_885_056_189, 0.236_926_885_056_189];
        for m in models(&sp, seed) {
            let mut work = 0.0;
            for k in 0..4 {
                let (a, b) = (&corners[k], &corners[(k + 1) % 4]);
                let dir = b - a;
                for (t, w) in nodes.iter().zip(weights) {
                    let p = a + &dir * (0.5 * (t + 1.0));
                    work += 0.5 * w * lowered_force(&sp, &m, &p).dot(&dir);
                }
            }
            prop_assert!(work.abs() <= 1e-8, "{}: loop work {}", m.kind_name(), work);
        }
    }

    #[test]
    fn parameter_jacobian_matches_differences(seed in any::<u64>(), edge in 0usize..3) {
        let sp = space(seed);
        let mut r = rng(seed ^ 9);
        let y: Vec<f64> = (0..sp.layout().dim(edge)).map(|_| r.random_range(-0.8..0.8)).collect();
        for m in models(&sp, seed) {
            let Some(theta) = m.parameters() else { continue };
            let jac = m.force_param_jacobian(&sp, edge, &y).unwrap();
            let family = sheaf_sysid::ParametricFamily::try_from(&m).unwrap();
            for k in 0..theta.len() {
                let h = 1e-6;
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[k] += h;
                tm[k] -= h;
                let (mut fp, mut fm) = (vec![0.0; y.len()], vec![0.0; y.len()]);
                family.at(&tp).unwrap().edge_force(&sp, edge, &y, &mut fp);
                family.at(&tm).unwrap().edge_force(&sp, edge, &y, &mut fm);
                for i in 0..y.len() {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    prop_assert!((fd - jac[(i, k)]).abs() <= 1e-6 * (1.0 + jac[(i, k)].abs()));
                }
            }
        }
    }
}

#[test]
fn bounded_confidence_profile_is_smooth_at_the_seam() {
    for eps in [0.5f64, 1.0, 2.0] {
        let below = bounded_confidence_profile(eps * (1.0 - 1e-9), eps);
        let above = bounded_confidence_profile(eps * (1.0 + 1e-9), eps);
        assert!((below - above).abs() < 1e-9);
        assert!(bounded_confidence_slope(eps * (1.0 - 1e-6), eps).abs() < 1e-9);
        for k in 1..100 {
            let r = eps * k as f64 / 100.0;
            assert!(bounded_confidence_slope(r, eps) > 0.0);
        }
    }
}

#[test]
fn shifted_quadratic_is_strongly_convex() {
    let sp = space(1);
    let b = Cochain1::from_vec((0..sp.dim()).map(|i| i as f64 * 0.1).collect());
    let m = EdgePotential::ShiftedQuadratic { target: b.clone() };
    assert_eq!(m.force(&sp, &b).unwrap().amax(), 0.0);
    // U(b + d) − U(b) = ½‖d‖²_R ≥ (λ_min(R)/2)‖d‖².
    let mut r = rng(2);
    for _ in 0..20 {
        let d = DVector::from_fn(sp.dim(), |_, _| r.random_range(-1.0..1.0));
        let u = m.value(&sp, &Cochain1(&b.0 + &d)).unwrap();
        assert!(u > 0.25 * d.norm_squared() * 0.5);
    }
}
