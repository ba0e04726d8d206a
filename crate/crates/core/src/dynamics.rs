//! Nonlinear sheaf-Laplacian flow `ẋ = −α δ*Φ(δx) − Ψ(x)`, fixed-step RK4
//! integration, ensembles, and the equilibrium predicted for strongly convex
//! edge potentials.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::coboundary::CoboundaryOperator;
use crate::cochain::{Cochain0, Cochain1};
use crate::error::{check_len, Error, Result};
use crate::potentials::{EdgePotential, NodeField};
use crate::Real;

/// Integration and observation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<T: Real> {
    /// Diffusivity α.
    pub alpha: T,
    pub step: T,
    pub horizon: T,
    /// Seeds the observation noise.
    pub seed: u64,
    /// Standard deviation of i.i.d. Gaussian noise added to recorded states.
    pub noise_std: T,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::one(),
            step: T::lit(0.01),
            horizon: T::lit(10.0),
            seed: 0,
            noise_std: T::zero(),
        }
    }
}

impl<T: Real> SimConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > T::zero()) || !self.step.is_finite() {
            return Err(Error::Parameter(format!("step must be positive, got {}", self.step)));
        }
        if !(self.horizon >= self.step) || !self.horizon.is_finite() {
            return Err(Error::Parameter(format!(
                "horizon {} must be at least one step ({})",
                self.horizon, self.step
            )));
        }
        if !(self.noise_std >= T::zero()) {
            return Err(Error::Parameter(format!(
                "noise std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        if !(self.alpha > T::zero()) {
            return Err(Error::Parameter(format!(
                "diffusivity must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Number of RK4 steps; the horizon is rounded to the nearest whole step.
    pub fn step_count(&self) -> usize {
        (self.horizon / self.step).as_f64().round() as usize
    }
}

/// Sampled node trajectory. `derivs[k]` is the exact vector field at the
/// noiseless state behind `states[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    pub times: Vec<T>,
    pub states: Vec<Cochain0<T>>,
    pub derivs: Option<Vec<Cochain0<T>>>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn initial_state(&self) -> &Cochain0<T> {
        &self.states[0]
    }

    pub fn terminal_state(&self) -> &Cochain0<T> {
        self.states.last().expect("trajectory has at least one sample")
    }

    /// Common sample spacing, or a usage error when spacing is not uniform
    /// (relative tolerance 1e-9).
    pub fn uniform_step(&self) -> Result<T> {
        if self.times.len() < 2 {
            return Err(Error::Usage("trajectory needs at least two samples".into()));
        }
        let h = self.times[1] - self.times[0];
        if !(h > T::zero()) {
            return Err(Error::Usage("sample times must be strictly increasing".into()));
        }
        let tol = T::lit(1e-9) * h.max(T::one());
        for w in self.times.windows(2) {
            if ((w[1] - w[0]) - h).abs() > tol {
                return Err(Error::Usage(format!(
                    "non-uniform sampling: step {} differs from {}",
                    w[1] - w[0],
                    h
                )));
            }
        }
        Ok(h)
    }
}

/// `δ*Φ(δx)`.
pub fn laplacian_apply<T: Real>(
    op: &CoboundaryOperator<T>,
    model: &EdgePotential<T>,
    x: &Cochain0<T>,
) -> Result<Cochain0<T>> {
    check_len("0-cochain", op.d0(), x.len())?;
    model.validate(op.edge_space())?;
    let mut field = FlowField::new(op, model, &NodeField::Zero, T::one());
    let mut out = DVector::zeros(op.d0());
    field.laplacian_into(&x.0, &mut out);
    Ok(Cochain0(out))
}

/// The right-hand side `f(x) = −α δ*Φ(δx) − Ψ(x)` with scratch buffers.
pub struct FlowField<'a, T: Real> {
    op: &'a CoboundaryOperator<T>,
    model: &'a EdgePotential<T>,
    node_field: &'a NodeField<T>,
    alpha: T,
    y: DVector<T>,
    phi: DVector<T>,
    psi: DVector<T>,
}

impl<'a, T: Real> FlowField<'a, T> {
    /// Callers validate `model` and `node_field` against `op` first.
    pub fn new(
        op: &'a CoboundaryOperator<T>,
        model: &'a EdgePotential<T>,
        node_field: &'a NodeField<T>,
        alpha: T,
    ) -> Self {
        Self {
            op,
            model,
            node_field,
            alpha,
            y: DVector::zeros(op.d1()),
            phi: DVector::zeros(op.d1()),
            psi: DVector::zeros(op.d0()),
        }
    }

    pub fn laplacian_into(&mut self, x: &DVector<T>, out: &mut DVector<T>) {
        self.op.delta_into(x, &mut self.y);
        self.model.force_into(self.op.edge_space(), &self.y, &mut self.phi);
        self.op.delta_star_into(&self.phi, out);
    }

    pub fn eval_into(&mut self, x: &DVector<T>, out: &mut DVector<T>) {
        self.laplacian_into(x, out);
        *out *= -self.alpha;
        if !self.node_field.is_zero() {
            self.node_field.field_into(self.op.vertex_layout(), x, &mut self.psi);
            *out -= &self.psi;
        }
    }
}

/// Classical RK4 with fixed step. Recorded states get seeded observation noise;
/// the integration itself is noiseless.
pub fn integrate<T: Real>(
    op: &CoboundaryOperator<T>,
    model: &EdgePotential<T>,
    node_field: &NodeField<T>,
    x0: &Cochain0<T>,
    cfg: &SimConfig<T>,
) -> Result<Trajectory<T>> {
    cfg.validate()?;
    check_len("initial condition", op.d0(), x0.len())?;
    model.validate(op.edge_space())?;
    node_field.validate(op.vertex_layout())?;

    let n = cfg.step_count();
    let h = cfg.step;
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let d0 = op.d0();
    let mut f = FlowField::new(op, model, node_field, cfg.alpha);
    let (mut k1, mut k2, mut k3, mut k4) = (
        DVector::zeros(d0),
        DVector::zeros(d0),
        DVector::zeros(d0),
        DVector::zeros(d0),
    );
    let mut tmp = DVector::zeros(d0);

    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    let mut x = x0.0.clone();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { time: 0.0 });
    }

    for k in 0..=n {
        let t = T::from_usize(k).unwrap() * h;
        f.eval_into(&x, &mut k1);
        times.push(t);
        states.push(x.clone());
        derivs.push(k1.clone());
        if k == n {
            break;
        }
        tmp.copy_from(&x);
        tmp.axpy(half * h, &k1, T::one());
        f.eval_into(&tmp, &mut k2);
        tmp.copy_from(&x);
        tmp.axpy(half * h, &k2, T::one());
        f.eval_into(&tmp, &mut k3);
        tmp.copy_from(&x);
        tmp.axpy(h, &k3, T::one());
        f.eval_into(&tmp, &mut k4);
        k2 += &k3;
        k1.axpy(T::lit(2.0), &k2, T::one());
        k1 += &k4;
        x.axpy(h * sixth, &k1, T::one());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: (t + h).as_f64() });
        }
    }

    if cfg.noise_std > T::zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for s in &mut states {
            for v in s.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.noise_std * T::lit(z);
            }
        }
    }

    Ok(Trajectory {
        times,
        states: states.into_iter().map(Cochain0).collect(),
        derivs: Some(derivs.into_iter().map(Cochain0).collect()),
    })
}

/// SplitMix64 finalizer: decorrelated child seeds from one base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` initial conditions with i.i.d. `N(0, scale²)` entries; condition
/// `i` draws from the stream `derive_seed(seed, i)`.
pub fn gaussian_initial_conditions<T: Real>(dim: usize, count: usize, scale: T, seed: u64) -> Vec<Cochain0<T>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            Cochain0::from_vec(
                (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        scale * T::lit(z)
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Integrates every initial condition; trajectory `i` uses noise seed
/// `derive_seed(cfg.seed, i)`. Failures are reported per entry.
pub fn simulate_ensemble<T: Real>(
    op: &CoboundaryOperator<T>,
    model: &EdgePotential<T>,
    node_field: &NodeField<T>,
    initial_conditions: &[Cochain0<T>],
    cfg: &SimConfig<T>,
) -> Vec<Result<Trajectory<T>>> {
    initial_conditions
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let cfg_i = SimConfig {
                seed: derive_seed(cfg.seed, i as u64),
                ..cfg.clone()
            };
            integrate(op, model, node_field, x0, &cfg_i)
        })
        .collect()
}

/// Limit point `δ⁺b + P_{H⁰}(x0 − δ⁺b)` of the shifted-quadratic flow, with
/// the projection taken in the vertex inner product.
pub fn equilibrium_projection<T: Real>(
    op: &CoboundaryOperator<T>,
    b: &Cochain1<T>,
    x0: &Cochain0<T>,
) -> Result<Cochain0<T>> {
    check_len("initial condition", op.d0(), x0.len())?;
    let tol = T::default_rank_tol();
    let particular = op.delta_pseudoinverse_apply(b, tol)?;
    let sections = op.global_section_basis(tol)?;
    let offset = Cochain0(&x0.0 - &particular.0);
    let proj = op.project_to_sections(&sections, &offset)?;
    Ok(Cochain0(particular.0 + proj.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;
    use crate::sheaf::{EdgeStalk, Sheaf};
    use nalgebra::DMatrix;

    fn identity_cycle(n: usize) -> CoboundaryOperator<f64> {
        let g = DirectedGraph::cycle(n).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        let s = Sheaf::new(
            g,
            vec![2; n],
            (0..n).map(|_| EdgeStalk::new(id.clone(), id.clone())).collect(),
        )
        .unwrap();
        CoboundaryOperator::build(&s).unwrap()
    }

    #[test]
    fn quadratic_laplacian_is_linear_laplacian() {
        let op = identity_cycle(3);
        let x = Cochain0::from_slice(&[0.3, -1.0, 2.0, 0.5, -0.7, 0.1]);
        let got = laplacian_apply(&op, &EdgePotential::Quadratic, &x).unwrap();
        let want = op.adjoint_matrix() * op.matrix() * &x.0;
        assert!((got.0 - want).amax() < 1e-12);
    }

    #[test]
    fn global_section_is_stationary() {
        let op = identity_cycle(3);
        let x0 = Cochain0::from_slice(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let cfg = SimConfig {
            horizon: 1.0,
            ..SimConfig::default()
        };
        let traj = integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &cfg).unwrap();
        assert_eq!(traj.len(), 101);
        assert!(traj.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn antagonistic_cutset_diverges() {
        let op = identity_cycle(3);
        let model = EdgePotential::Antagonistic {
            negative: vec![true, true, true],
        };
        let x0 = Cochain0::from_slice(&[1.0, 0.0, 0.0, 0.0, -1.0, 0.5]);
        let cfg = SimConfig {
            horizon: 200.0,
            step: 0.05,
            ..SimConfig::default()
        };
        let err = integrate(&op, &model, &NodeField::Zero, &x0, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { time } if time > 0.0));
    }

    #[test]
    fn noise_only_touches_recorded_states() {
        let op = identity_cycle(3);
        let x0 = Cochain0::from_slice(&[0.3, -1.0, 2.0, 0.5, -0.7, 0.1]);
        let clean = SimConfig {
            horizon: 0.5,
            ..SimConfig::default()
        };
        let noisy = SimConfig {
            noise_std: 1e-3,
            seed: 7,
            ..clean.clone()
        };
        let a = integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &clean).unwrap();
        let b = integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &noisy).unwrap();
        assert_eq!(a.derivs, b.derivs);
        assert_ne!(a.states, b.states);
        let c = integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &noisy).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn rejects_bad_config() {
        let op = identity_cycle(3);
        let x0 = Cochain0::zeros(6);
        let cfg = SimConfig {
            step: 0.0,
            ..SimConfig::default()
        };
        assert!(integrate(&op, &EdgePotential::Quadratic, &NodeField::Zero, &x0, &cfg).is_err());
    }

    #[test]
    fn uniform_step_detection() {
        let t = Trajectory::<f64> {
            times: vec![0.0, 0.1, 0.25],
            states: vec![Cochain0::zeros(1); 3],
            derivs: None,
        };
        assert!(t.uniform_step().is_err());
    }

    #[test]
    fn gaussian_initial_conditions_are_seeded() {
        let a = gaussian_initial_conditions::<f64>(4, 3, 2.0, 7);
        assert_eq!(a, gaussian_initial_conditions(4, 3, 2.0, 7));
        assert_ne!(a[0], a[1]);
        // Prefixes agree, so adding conditions does not reshuffle earlier ones.
        assert_eq!(a[..2], gaussian_initial_conditions(4, 2, 2.0, 7)[..]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 3), derive_seed(5, 3));
    }

    #[test]
    fn equilibrium_without_target_is_section_projection() {
        let op = identity_cycle(3);
        let x0 = Cochain0::from_slice(&[1.0, 0.0, 2.0, 3.0, 0.0, 3.0]);
        let eq = equilibrium_projection(&op, &Cochain1::zeros(6), &x0).unwrap();
        let want = [1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        for (a, b) in eq.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
