//! Edge potentials `U(y) = Σ_e U_e(y_e)` with their forces `Φ = ∇U`, and node
//! potentials `W(x) = Σ_v W_v(x_v)` with `Ψ = ∇W`.
//!
//! Gradients are taken in the stalk inner products: on an edge with Gram `R_e`
//! the force of `U_e` is the vector `Φ_e` with `dU_e(y_e)[h] = ⟨Φ_e, h⟩_e`, so
//! the Euclidean gradient equals `R_e Φ_e`. With this convention every force
//! formula below reads the same as in the identity-Gram case, with
//! `r = ‖y_e‖_e`.

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::coboundary::{CoboundaryOperator, EdgeSpace};
use crate::cochain::{BlockLayout, Cochain0, Cochain1};
use crate::error::{check_len, Error, Result};
use crate::Real;

/// An edge potential family instantiated at concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgePotential<T: Real> {
    /// `U_e = ½‖y_e‖²`, `Φ = id`.
    Quadratic,
    /// `U_e = ½‖y_e − b_e‖²` (formation control).
    ShiftedQuadratic { target: Cochain1<T> },
    /// `U_e = ψ_ε(‖y_e‖)` with the piecewise sextic
    /// `ψ_ε(r) = r²/2 − r⁴/(2ε²) + r⁶/(6ε⁴)` for `r ≤ ε`, `ε²/6` beyond.
    BoundedConfidence { threshold: T },
    /// `U_e = −‖y_e‖²` on edges flagged `true`, `½‖y_e‖²` on the others.
    Antagonistic { negative: Vec<bool> },
    /// `U_e = Σ_m θ_m r^{2m}/(2m)`, force `y_e (θ₁ + θ₂ r² + θ₃ r⁴ + …)`.
    Monomial { coefficients: Vec<T> },
    /// Monomial law plus the linear potential `θ_c ⟨c_e, y_e⟩_e`, whose force is
    /// the constant cochain `θ_c c`.
    HarmonicAugmented {
        coefficients: Vec<T>,
        harmonic_coefficient: T,
        direction: Cochain1<T>,
    },
}

fn monomial_factor<T: Real>(coefficients: &[T], r2: T) -> T {
    // θ₁ + θ₂ r² + θ₃ r⁴ + … by Horner in r².
    coefficients.iter().rev().fold(T::zero(), |acc, &c| acc * r2 + c)
}

fn monomial_value<T: Real>(coefficients: &[T], r2: T) -> T {
    let mut pow = r2;
    let mut acc = T::zero();
    for (m, &c) in coefficients.iter().enumerate() {
        acc += c * pow / T::lit(2.0 * (m as f64 + 1.0));
        pow *= r2;
    }
    acc
}

/// `ψ_ε(r)` of the bounded-confidence law.
pub fn bounded_confidence_profile<T: Real>(r: T, eps: T) -> T {
    if r <= eps {
        let e2 = eps * eps;
        let r2 = r * r;
        r2 / T::lit(2.0) - r2 * r2 / (T::lit(2.0) * e2) + r2 * r2 * r2 / (T::lit(6.0) * e2 * e2)
    } else {
        eps * eps / T::lit(6.0)
    }
}

/// `ψ'_ε(r) = r − 2r³/ε² + r⁵/ε⁴ = r (1 − r²/ε²)²` for `r ≤ ε`, zero beyond.
pub fn bounded_confidence_slope<T: Real>(r: T, eps: T) -> T {
    r * bounded_confidence_gain(r * r, eps)
}

/// Force gain `(1 − r²/ε²)²` so that `Φ_e = gain · y_e`.
fn bounded_confidence_gain<T: Real>(r2: T, eps: T) -> T {
    if r2 <= eps * eps {
        let s = T::one() - r2 / (eps * eps);
        s * s
    } else {
        T::zero()
    }
}

/// `∂_ε` of the force gain: `4 (1 − r²/ε²) r² / ε³` inside the threshold.
fn bounded_confidence_gain_deps<T: Real>(r2: T, eps: T) -> T {
    if r2 <= eps * eps {
        let e2 = eps * eps;
        T::lit(4.0) * (T::one() - r2 / e2) * r2 / (e2 * eps)
    } else {
        T::zero()
    }
}

impl<T: Real> EdgePotential<T> {
    /// Checks parameters and cochain shapes against the edge space.
    pub fn validate(&self, space: &EdgeSpace<T>) -> Result<()> {
        match self {
            Self::Quadratic => Ok(()),
            Self::ShiftedQuadratic { target } => check_len("formation target", space.dim(), target.len()),
            Self::BoundedConfidence { threshold } => {
                if *threshold > T::zero() && threshold.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!(
                        "confidence threshold must be positive, got {threshold}"
                    )))
                }
            }
            Self::Antagonistic { negative } => check_len("antagonistic edge flags", space.edge_count(), negative.len()),
            Self::Monomial { coefficients } => {
                if coefficients.is_empty() {
                    Err(Error::Parameter("monomial law needs at least one coefficient".into()))
                } else {
                    Ok(())
                }
            }
            Self::HarmonicAugmented {
                coefficients,
                direction,
                ..
            } => {
                if coefficients.is_empty() {
                    return Err(Error::Parameter("monomial law needs at least one coefficient".into()));
                }
                check_len("harmonic direction", space.dim(), direction.len())
            }
        }
    }

    /// `U_e(y_e)`.
    pub fn edge_value(&self, space: &EdgeSpace<T>, edge: usize, y_e: &[T]) -> T {
        let r2 = space.norm_squared(edge, y_e);
        let half = T::lit(0.5);
        match self {
            Self::Quadratic => half * r2,
            Self::ShiftedQuadratic { target } => {
                let b = target.block(space.layout(), edge);
                let diff: Vec<T> = y_e.iter().zip(b).map(|(&a, &b)| a - b).collect();
                half * space.norm_squared(edge, &diff)
            }
            Self::BoundedConfidence { threshold } => bounded_confidence_profile(r2.sqrt(), *threshold),
            Self::Antagonistic { negative } => {
                if negative[edge] {
                    -r2
                } else {
                    half * r2
                }
            }
            Self::Monomial { coefficients } => monomial_value(coefficients, r2),
            Self::HarmonicAugmented {
                coefficients,
                harmonic_coefficient,
                direction,
            } => {
                let c = direction.block(space.layout(), edge);
                monomial_value(coefficients, r2) + *harmonic_coefficient * space.inner(edge, c, y_e)
            }
        }
    }

    /// Writes `Φ_e(y_e)` into `out`.
    pub fn edge_force(&self, space: &EdgeSpace<T>, edge: usize, y_e: &[T], out: &mut [T]) {
        let scale_into = |gain: T, out: &mut [T]| {
            for (o, &y) in out.iter_mut().zip(y_e) {
                *o = gain * y;
            }
        };
        match self {
            Self::Quadratic => out.copy_from_slice(y_e),
            Self::ShiftedQuadratic { target } => {
                let b = target.block(space.layout(), edge);
                for ((o, &y), &b) in out.iter_mut().zip(y_e).zip(b) {
                    *o = y - b;
                }
            }
            Self::BoundedConfidence { threshold } => {
                let r2 = space.norm_squared(edge, y_e);
                scale_into(bounded_confidence_gain(r2, *threshold), out);
            }
            Self::Antagonistic { negative } => {
                let gain = if negative[edge] { -T::lit(2.0) } else { T::one() };
                scale_into(gain, out);
            }
            Self::Monomial { coefficients } => {
                let r2 = space.norm_squared(edge, y_e);
                scale_into(monomial_factor(coefficients, r2), out);
            }
            Self::HarmonicAugmented {
                coefficients,
                harmonic_coefficient,
                direction,
            } => {
                let r2 = space.norm_squared(edge, y_e);
                scale_into(monomial_factor(coefficients, r2), out);
                let c = direction.block(space.layout(), edge);
                for (o, &c) in out.iter_mut().zip(c) {
                    *o += *harmonic_coefficient * c;
                }
            }
        }
    }

    /// `U(y) = Σ_e U_e(y_e)`.
    pub fn value(&self, space: &EdgeSpace<T>, y: &Cochain1<T>) -> Result<T> {
        self.validate(space)?;
        check_len("1-cochain", space.dim(), y.len())?;
        let layout = space.layout();
        Ok((0..space.edge_count()).fold(T::zero(), |acc, e| acc + self.edge_value(space, e, y.block(layout, e))))
    }

    /// `Φ(y) = ∇U(y)`, block by block.
    pub fn force(&self, space: &EdgeSpace<T>, y: &Cochain1<T>) -> Result<Cochain1<T>> {
        self.validate(space)?;
        check_len("1-cochain", space.dim(), y.len())?;
        let mut out = DVector::zeros(space.dim());
        self.force_into(space, &y.0, &mut out);
        Ok(Cochain1(out))
    }

    /// Unchecked `out = Φ(y)`; `y` and `out` must have length d1.
    pub fn force_into(&self, space: &EdgeSpace<T>, y: &DVector<T>, out: &mut DVector<T>) {
        let layout = space.layout();
        for e in 0..space.edge_count() {
            let range = layout.range(e);
            self.edge_force(space, e, &y.as_slice()[range.clone()], &mut out.as_mut_slice()[range]);
        }
    }

    /// The free parameter vector of parametric kinds.
    pub fn parameters(&self) -> Option<Vec<T>> {
        match self {
            Self::BoundedConfidence { threshold } => Some(vec![*threshold]),
            Self::Monomial { coefficients } => Some(coefficients.clone()),
            Self::HarmonicAugmented {
                coefficients,
                harmonic_coefficient,
                ..
            } => {
                let mut p = coefficients.clone();
                p.push(*harmonic_coefficient);
                Some(p)
            }
            _ => None,
        }
    }

    /// `∂Φ_e/∂θ` at `y_e`, one column per parameter (edge-dim × p).
    pub fn force_param_jacobian(&self, space: &EdgeSpace<T>, edge: usize, y_e: &[T]) -> Result<DMatrix<T>> {
        self.validate(space)?;
        check_len("edge vector", space.layout().dim(edge), y_e.len())?;
        let d = y_e.len();
        let r2 = space.norm_squared(edge, y_e);
        match self {
            Self::BoundedConfidence { threshold } => {
                let g = bounded_confidence_gain_deps(r2, *threshold);
                Ok(DMatrix::from_iterator(d, 1, y_e.iter().map(|&y| g * y)))
            }
            Self::Monomial { coefficients } => Ok(monomial_columns(y_e, r2, coefficients.len(), None)),
            Self::HarmonicAugmented {
                coefficients,
                direction,
                ..
            } => Ok(monomial_columns(
                y_e,
                r2,
                coefficients.len(),
                Some(direction.block(space.layout(), edge)),
            )),
            other => Err(Error::Usage(format!("{} has no parameters", other.kind_name()))),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Quadratic => "quadratic",
            Self::ShiftedQuadratic { .. } => "shifted_quadratic",
            Self::BoundedConfidence { .. } => "bounded_confidence",
            Self::Antagonistic { .. } => "antagonistic",
            Self::Monomial { .. } => "monomial",
            Self::HarmonicAugmented { .. } => "harmonic_augmented",
        }
    }
}

/// Columns `y_e r^{2(m-1)}`, m = 1..degree, optionally followed by `c_e`.
fn monomial_columns<T: Real>(y_e: &[T], r2: T, degree: usize, harmonic: Option<&[T]>) -> DMatrix<T> {
    let d = y_e.len();
    let p = degree + usize::from(harmonic.is_some());
    let mut m = DMatrix::zeros(d, p);
    let mut pow = T::one();
    for k in 0..degree {
        for i in 0..d {
            m[(i, k)] = y_e[i] * pow;
        }
        pow *= r2;
    }
    if let Some(c) = harmonic {
        for i in 0..d {
            m[(i, degree)] = c[i];
        }
    }
    m
}

/// A parameterized edge-law family, used by the estimators.
#[derive(Debug, Clone, PartialEq)]
pub enum ParametricFamily<T: Real> {
    /// Monomial basis `ψ_m(r) = r^{2m}/(2m)`, m = 1..degree; linear in θ.
    Monomial { degree: usize },
    /// Monomial basis plus one constant-force column `c`; linear in θ.
    MonomialWithHarmonic { degree: usize, direction: Cochain1<T> },
    /// The bounded-confidence law with θ = (ε); nonlinear in θ.
    BoundedConfidence,
}

impl<T: Real> ParametricFamily<T> {
    pub fn num_params(&self) -> usize {
        match self {
            Self::Monomial { degree } => *degree,
            Self::MonomialWithHarmonic { degree, .. } => degree + 1,
            Self::BoundedConfidence => 1,
        }
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::BoundedConfidence)
    }

    /// The family member at `theta`.
    pub fn at(&self, theta: &[T]) -> Result<EdgePotential<T>> {
        check_len("parameter vector", self.num_params(), theta.len())?;
        Ok(match self {
            Self::Monomial { .. } => EdgePotential::Monomial {
                coefficients: theta.to_vec(),
            },
            Self::MonomialWithHarmonic { degree, direction } => EdgePotential::HarmonicAugmented {
                coefficients: theta[..*degree].to_vec(),
                harmonic_coefficient: theta[*degree],
                direction: direction.clone(),
            },
            Self::BoundedConfidence => EdgePotential::BoundedConfidence { threshold: theta[0] },
        })
    }

    /// Basis forces `∇ψ_m(y_e)` as columns (edge-dim × p). Linear families only.
    pub fn basis_forces(&self, space: &EdgeSpace<T>, edge: usize, y_e: &[T]) -> Result<DMatrix<T>> {
        let r2 = space.norm_squared(edge, y_e);
        match self {
            Self::Monomial { degree } => Ok(monomial_columns(y_e, r2, *degree, None)),
            Self::MonomialWithHarmonic { degree, direction } => {
                check_len("harmonic direction", space.dim(), direction.len())?;
                Ok(monomial_columns(
                    y_e,
                    r2,
                    *degree,
                    Some(direction.block(space.layout(), edge)),
                ))
            }
            Self::BoundedConfidence => Err(Error::Usage(
                "bounded-confidence family is nonlinear in its parameter; use the scalar information number".into(),
            )),
        }
    }
}

impl<T: Real> TryFrom<&EdgePotential<T>> for ParametricFamily<T> {
    type Error = Error;

    fn try_from(model: &EdgePotential<T>) -> Result<Self> {
        match model {
            EdgePotential::Monomial { coefficients } => Ok(Self::Monomial {
                degree: coefficients.len(),
            }),
            EdgePotential::HarmonicAugmented {
                coefficients,
                direction,
                ..
            } => Ok(Self::MonomialWithHarmonic {
                degree: coefficients.len(),
                direction: direction.clone(),
            }),
            EdgePotential::BoundedConfidence { .. } => Ok(Self::BoundedConfidence),
            other => Err(Error::Usage(format!(
                "{} is not a parametric family",
                other.kind_name()
            ))),
        }
    }
}

/// A per-vertex node potential `W_v`; `gradient` must return the gradient in
/// the vertex inner product `⟨·,·⟩_v`.
pub trait NodePotential<T: Real>: Send + Sync + Debug {
    fn value(&self, vertex: usize, x_v: &[T]) -> T;
    fn gradient(&self, vertex: usize, x_v: &[T], out: &mut [T]);
}

/// The node field `Ψ = ∇W`.
#[derive(Debug, Clone, Default)]
pub enum NodeField<T: Real> {
    #[default]
    Zero,
    /// `W_v = (k/2) ‖x_v − a_v‖²_v`, a pull toward fixed anchors.
    Anchored {
        stiffness: T,
        anchor: Cochain0<T>,
    },
    Custom(Arc<dyn NodePotential<T>>),
}

impl<T: Real> NodeField<T> {
    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    pub fn validate(&self, layout: &BlockLayout) -> Result<()> {
        match self {
            Self::Anchored { anchor, .. } => check_len("node anchor", layout.total(), anchor.len()),
            _ => Ok(()),
        }
    }

    /// `W(x)`, with anchored norms taken in the vertex inner product of `op`.
    pub fn value(&self, op: &CoboundaryOperator<T>, x: &Cochain0<T>) -> Result<T> {
        let layout = op.vertex_layout();
        self.validate(layout)?;
        check_len("0-cochain", layout.total(), x.len())?;
        Ok(match self {
            Self::Zero => T::zero(),
            Self::Anchored { stiffness, anchor } => {
                let d = &x.0 - &anchor.0;
                *stiffness * T::lit(0.5) * op.inner0(&d, &d)
            }
            Self::Custom(w) => (0..layout.block_count()).fold(T::zero(), |acc, v| acc + w.value(v, x.block(layout, v))),
        })
    }

    /// `Ψ(x)`.
    pub fn field(&self, layout: &BlockLayout, x: &Cochain0<T>) -> Result<Cochain0<T>> {
        self.validate(layout)?;
        check_len("0-cochain", layout.total(), x.len())?;
        let mut out = DVector::zeros(layout.total());
        self.field_into(layout, &x.0, &mut out);
        Ok(Cochain0(out))
    }

    /// Unchecked `out = Ψ(x)`.
    pub fn field_into(&self, layout: &BlockLayout, x: &DVector<T>, out: &mut DVector<T>) {
        match self {
            Self::Zero => out.fill(T::zero()),
            Self::Anchored { stiffness, anchor } => {
                for i in 0..x.len() {
                    out[i] = *stiffness * (x[i] - anchor[i]);
                }
            }
            Self::Custom(w) => {
                for v in 0..layout.block_count() {
                    let r = layout.range(v);
                    w.gradient(v, &x.as_slice()[r.clone()], &mut out.as_mut_slice()[r]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;
    use crate::sheaf::{EdgeStalk, Sheaf};
    use approx::assert_relative_eq;

    fn space() -> EdgeSpace<f64> {
        let g = DirectedGraph::cycle(3).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        let s = Sheaf::new(
            g,
            vec![2; 3],
            (0..3).map(|_| EdgeStalk::new(id.clone(), id.clone())).collect(),
        )
        .unwrap();
        CoboundaryOperator::build(&s).unwrap().edge_space().clone()
    }

    #[test]
    fn bounded_confidence_plateau_and_seam() {
        let sp = space();
        let m = EdgePotential::BoundedConfidence { threshold: 1.0 };
        let y = Cochain1::from_slice(&[2.0, 0.0, 0.0, 1.5, 3.0, 3.0]);
        assert_relative_eq!(m.value(&sp, &y).unwrap(), 3.0 / 6.0, epsilon = 1e-15);
        let mut out = [9.0; 2];
        m.edge_force(&sp, 0, &[1.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
        assert_eq!(bounded_confidence_slope(1.0, 1.0), 0.0);
        assert_relative_eq!(bounded_confidence_profile(1.0_f64, 1.0), 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn bounded_confidence_rejects_nonpositive_threshold() {
        let sp = space();
        let m = EdgePotential::BoundedConfidence { threshold: 0.0 };
        assert!(matches!(m.value(&sp, &Cochain1::zeros(6)), Err(Error::Parameter(_))));
    }

    #[test]
    fn monomial_unit_radius_gain() {
        let sp = space();
        let m = EdgePotential::Monomial {
            coefficients: vec![1.0, 0.25, 0.03],
        };
        let mut out = [0.0; 2];
        m.edge_force(&sp, 1, &[0.6, 0.8], &mut out);
        assert_relative_eq!(out[0], 1.28 * 0.6, epsilon = 1e-15);
        assert_relative_eq!(out[1], 1.28 * 0.8, epsilon = 1e-15);
        m.edge_force(&sp, 1, &[0.0, 0.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn monomial_jacobian_columns() {
        let sp = space();
        let m = EdgePotential::Monomial {
            coefficients: vec![1.0, 0.25, 0.03],
        };
        let j = m.force_param_jacobian(&sp, 0, &[1.0, 0.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn bounded_confidence_jacobian_vanishes_beyond_threshold() {
        let sp = space();
        let m = EdgePotential::BoundedConfidence { threshold: 1.0 };
        let j = m.force_param_jacobian(&sp, 0, &[1.0, 0.5]).unwrap();
        assert_eq!(j.amax(), 0.0);
    }

    #[test]
    fn nonparametric_jacobian_is_usage_error() {
        let sp = space();
        let m = EdgePotential::<f64>::Quadratic;
        assert!(matches!(
            m.force_param_jacobian(&sp, 0, &[1.0, 0.0]),
            Err(Error::Usage(_))
        ));
        assert!(ParametricFamily::try_from(&m).is_err());
    }

    #[test]
    fn shifted_quadratic_minimum() {
        let sp = space();
        let b = Cochain1::from_slice(&[0.1, 0.2, -0.3, 0.4, 0.5, -0.6]);
        let m = EdgePotential::ShiftedQuadratic { target: b.clone() };
        assert_eq!(m.value(&sp, &b).unwrap(), 0.0);
        assert_eq!(m.force(&sp, &b).unwrap().amax(), 0.0);
    }

    #[test]
    fn antagonistic_signs() {
        let sp = space();
        let m = EdgePotential::Antagonistic {
            negative: vec![true, false, false],
        };
        let y = Cochain1::from_slice(&[1.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        let f = m.force(&sp, &y).unwrap();
        assert_eq!(f.as_slice(), &[-2.0, 0.0, 1.0, 0.0, 0.0, 2.0]);
        assert_eq!(m.value(&sp, &y).unwrap(), -1.0 + 0.5 + 2.0);
    }

    #[test]
    fn family_round_trip() {
        let fam = ParametricFamily::<f64>::Monomial { degree: 3 };
        let m = fam.at(&[1.0, 0.25, 0.03]).unwrap();
        assert_eq!(m.parameters().unwrap(), vec![1.0, 0.25, 0.03]);
        assert_eq!(ParametricFamily::try_from(&m).unwrap(), fam);
        assert!(fam.at(&[1.0]).is_err());
    }

    #[test]
    fn anchored_node_field() {
        let g = DirectedGraph::path(2).unwrap();
        let id = DMatrix::<f64>::identity(2, 2);
        let s = Sheaf::with_vertex_grams(
            g,
            vec![2, 2],
            vec![EdgeStalk::new(id.clone(), id.clone())],
            vec![id.clone(), id * 3.0],
        )
        .unwrap();
        let op = CoboundaryOperator::build(&s).unwrap();
        let layout = op.vertex_layout().clone();
        let nf = NodeField::Anchored {
            stiffness: 2.0,
            anchor: Cochain0::from_slice(&[1.0, 1.0, 0.0, 0.0]),
        };
        let x = Cochain0::from_slice(&[2.0, 1.0, 0.0, -1.0]);
        assert_eq!(nf.field(&layout, &x).unwrap().as_slice(), &[2.0, 0.0, 0.0, -2.0]);
        // ½·2·(1 + 3·1).
        assert_eq!(nf.value(&op, &x).unwrap(), 4.0);
    }
}
