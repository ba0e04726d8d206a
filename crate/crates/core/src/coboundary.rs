//! The coboundary operator of a sheaf, its Hilbert-space adjoint, and the
//! Hodge decomposition of C¹ into `im δ ⊕ ker δ*`.
//!
//! All rank decisions go through one SVD of the coboundary expressed in
//! whitened coordinates. With symmetric factors `M1 = L1 L1ᵀ`,
//! `M2 = L2 L2ᵀ` the whitened operator is `B̃ = L2ᵀ B L1⁻ᵀ`, an isometric
//! image of δ between Euclidean spaces:
//!
//! * `ker δ*  = L2⁻ᵀ · ker B̃ᵀ`  (M2-orthonormal basis),
//! * `ker δ   = L1⁻ᵀ · ker B̃`   (M1-orthonormal basis),
//! * `δ⁺ b    = L1⁻ᵀ B̃⁺ L2ᵀ b`  (minimum M1-norm least squares in the M2 norm).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::cochain::{BlockLayout, Cochain0, Cochain1};
use crate::error::{check_len, Error, Result};
use crate::sheaf::Sheaf;
use crate::Real;

/// Edge-side data needed to evaluate edge potentials: block layout of C¹ and
/// the per-edge Gram matrices defining `‖y_e‖_e`.
#[derive(Debug, Clone)]
pub struct EdgeSpace<T: Real> {
    layout: BlockLayout,
    grams: Vec<DMatrix<T>>,
    identity: Vec<bool>,
}

impl<T: Real> EdgeSpace<T> {
    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn edge_count(&self) -> usize {
        self.layout.block_count()
    }

    pub fn dim(&self) -> usize {
        self.layout.total()
    }

    pub fn gram(&self, edge: usize) -> &DMatrix<T> {
        &self.grams[edge]
    }

    /// `⟨a, b⟩_e = aᵀ R_e b` on the stalk of `edge`.
    pub fn inner(&self, edge: usize, a: &[T], b: &[T]) -> T {
        if self.identity[edge] {
            return a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
        let r = &self.grams[edge];
        let mut acc = T::zero();
        for i in 0..a.len() {
            let mut row = T::zero();
            for j in 0..b.len() {
                row += r[(i, j)] * b[j];
            }
            acc += a[i] * row;
        }
        acc
    }

    pub fn norm_squared(&self, edge: usize, a: &[T]) -> T {
        self.inner(edge, a, a)
    }

    /// Applies `R_e` to an edge vector (Riesz map to Euclidean coordinates).
    pub fn lower(&self, edge: usize, a: &[T], out: &mut [T]) {
        if self.identity[edge] {
            out.copy_from_slice(a);
            return;
        }
        let r = &self.grams[edge];
        for i in 0..a.len() {
            out[i] = (0..a.len()).fold(T::zero(), |acc, j| acc + r[(i, j)] * a[j]);
        }
    }
}

/// Block-diagonal factor `L` with `M = L Lᵀ`, together with `L⁻ᵀ` and `M⁻¹`.
#[derive(Debug, Clone)]
struct GramFactor<T: Real> {
    factor: DMatrix<T>,
    inv_t: DMatrix<T>,
    inverse: DMatrix<T>,
}

fn factor_block_diagonal<T: Real>(blocks: &[DMatrix<T>], layout: &BlockLayout) -> Result<GramFactor<T>> {
    let n = layout.total();
    let mut factor = DMatrix::zeros(n, n);
    let mut inv_t = DMatrix::zeros(n, n);
    let mut inverse = DMatrix::zeros(n, n);
    for (b, gram) in blocks.iter().enumerate() {
        let d = layout.dim(b);
        if d == 0 {
            continue;
        }
        let (l, l_inv) = match Cholesky::new(gram.clone()) {
            Some(ch) => {
                let l = ch.l();
                let l_inv = l
                    .clone()
                    .try_inverse()
                    .ok_or_else(|| Error::Structure(format!("Gram block {b} is singular")))?;
                (l, l_inv)
            }
            None => {
                // Cholesky pivot failed: fall back to L = Q Λ^{1/2}.
                let eig = SymmetricEigen::new(gram.clone());
                if eig.eigenvalues.iter().any(|&l| l <= T::zero()) {
                    return Err(Error::Structure(format!("Gram block {b} is not positive definite")));
                }
                let sqrt = eig.eigenvalues.map(|l| l.sqrt());
                let inv_sqrt = sqrt.map(|s| T::one() / s);
                let l = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
                let l_inv = DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
                (l, l_inv)
            }
        };
        let o = layout.offset(b);
        let inv_block = l_inv.transpose() * &l_inv;
        factor.view_mut((o, o), (d, d)).copy_from(&l);
        inv_t.view_mut((o, o), (d, d)).copy_from(&l_inv.transpose());
        inverse.view_mut((o, o), (d, d)).copy_from(&inv_block);
    }
    Ok(GramFactor { factor, inv_t, inverse })
}

fn block_diagonal<T: Real>(blocks: &[DMatrix<T>], layout: &BlockLayout) -> DMatrix<T> {
    let n = layout.total();
    let mut m = DMatrix::zeros(n, n);
    for (b, block) in blocks.iter().enumerate() {
        let o = layout.offset(b);
        let d = layout.dim(b);
        m.view_mut((o, o), (d, d)).copy_from(block);
    }
    m
}

/// Thin SVD of the whitened coboundary.
#[derive(Debug, Clone)]
struct WhitenedSvd<T: Real> {
    /// d1 × k left singular vectors.
    u: DMatrix<T>,
    sigma: Vec<T>,
    /// d0 × k right singular vectors.
    v: DMatrix<T>,
}

/// Matrix form of δ with the Gram matrices of C⁰ and C¹.
#[derive(Debug, Clone)]
pub struct CoboundaryOperator<T: Real> {
    matrix: DMatrix<T>,
    vertex_gram: DMatrix<T>,
    edge_gram: DMatrix<T>,
    adjoint: DMatrix<T>,
    vertex_layout: BlockLayout,
    edge_space: EdgeSpace<T>,
    m1: GramFactor<T>,
    m2: GramFactor<T>,
    svd: WhitenedSvd<T>,
}

/// M2-orthonormal basis of `ker δ* ≅ H¹(G; F)`, stored as columns.
#[derive(Debug, Clone)]
pub struct HarmonicSpace<T: Real> {
    pub basis: DMatrix<T>,
}

impl<T: Real> HarmonicSpace<T> {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn column(&self, j: usize) -> Cochain1<T> {
        Cochain1(self.basis.column(j).into_owned())
    }
}

/// M1-orthonormal basis of `ker δ = H⁰(G; F)`, stored as columns.
#[derive(Debug, Clone)]
pub struct SectionSpace<T: Real> {
    pub basis: DMatrix<T>,
}

impl<T: Real> SectionSpace<T> {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }
}

impl<T: Real> CoboundaryOperator<T> {
    /// Assembles `B`, `M1`, `M2`. Block row `e` holds `+F_{h(e)◁e}` in the
    /// column block of `h(e)` and `−F_{t(e)◁e}` in that of `t(e)`; self-loops
    /// accumulate both into one block.
    pub fn build(sheaf: &Sheaf<T>) -> Result<Self> {
        let vl = sheaf.vertex_layout().clone();
        let el = sheaf.edge_layout().clone();
        let (d0, d1) = (vl.total(), el.total());
        let mut b = DMatrix::zeros(d1, d0);
        for (e, (edge, stalk)) in sheaf.graph().edges().iter().zip(sheaf.edge_stalks()).enumerate() {
            let row = el.offset(e);
            let de = el.dim(e);
            if stalk.head_map.shape() != (de, vl.dim(edge.head)) || stalk.tail_map.shape() != (de, vl.dim(edge.tail)) {
                return Err(Error::Structure(format!("edge {e}: restriction map shape mismatch")));
            }
            let mut hv = b.view_mut((row, vl.offset(edge.head)), (de, vl.dim(edge.head)));
            hv += &stalk.head_map;
            let mut tv = b.view_mut((row, vl.offset(edge.tail)), (de, vl.dim(edge.tail)));
            tv -= &stalk.tail_map;
        }
        let edge_grams: Vec<DMatrix<T>> = sheaf.edge_stalks().iter().map(|s| s.gram.clone()).collect();
        let vertex_gram = block_diagonal(sheaf.vertex_grams(), &vl);
        let edge_gram = block_diagonal(&edge_grams, &el);
        let m1 = factor_block_diagonal(sheaf.vertex_grams(), &vl)?;
        let m2 = factor_block_diagonal(&edge_grams, &el)?;
        let adjoint = &m1.inverse * b.transpose() * &edge_gram;

        let whitened = m2.factor.transpose() * &b * &m1.inv_t;
        let svd = whitened_svd(whitened);

        let identity = edge_grams
            .iter()
            .map(|g| *g == DMatrix::identity(g.nrows(), g.ncols()))
            .collect();
        Ok(Self {
            matrix: b,
            vertex_gram,
            edge_gram,
            adjoint,
            vertex_layout: vl,
            edge_space: EdgeSpace {
                layout: el,
                grams: edge_grams,
                identity,
            },
            m1,
            m2,
            svd,
        })
    }

    /// The d1 × d0 matrix `B`.
    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// `M1`, Gram matrix of C⁰.
    pub fn vertex_gram(&self) -> &DMatrix<T> {
        &self.vertex_gram
    }

    /// `M2`, Gram matrix of C¹.
    pub fn edge_gram(&self) -> &DMatrix<T> {
        &self.edge_gram
    }

    /// `M1⁻¹ Bᵀ M2`.
    pub fn adjoint_matrix(&self) -> &DMatrix<T> {
        &self.adjoint
    }

    pub fn vertex_layout(&self) -> &BlockLayout {
        &self.vertex_layout
    }

    pub fn edge_space(&self) -> &EdgeSpace<T> {
        &self.edge_space
    }

    pub fn d0(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn d1(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply_delta(&self, x: &Cochain0<T>) -> Result<Cochain1<T>> {
        check_len("0-cochain", self.d0(), x.len())?;
        Ok(Cochain1(&self.matrix * &x.0))
    }

    pub fn apply_delta_star(&self, y: &Cochain1<T>) -> Result<Cochain0<T>> {
        check_len("1-cochain", self.d1(), y.len())?;
        Ok(Cochain0(&self.adjoint * &y.0))
    }

    /// `out = B x` without shape checks.
    pub fn delta_into(&self, x: &DVector<T>, out: &mut DVector<T>) {
        out.gemv(T::one(), &self.matrix, x, T::zero());
    }

    /// `out = δ* y` without shape checks.
    pub fn delta_star_into(&self, y: &DVector<T>, out: &mut DVector<T>) {
        out.gemv(T::one(), &self.adjoint, y, T::zero());
    }

    pub fn inner0(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        a.dot(&(&self.vertex_gram * b))
    }

    pub fn inner1(&self, a: &DVector<T>, b: &DVector<T>) -> T {
        a.dot(&(&self.edge_gram * b))
    }

    pub fn norm0_squared(&self, a: &DVector<T>) -> T {
        self.inner0(a, a)
    }

    pub fn norm1_squared(&self, a: &DVector<T>) -> T {
        self.inner1(a, a)
    }

    /// Singular values of the whitened coboundary, descending. Their squares
    /// are the nonzero-or-not eigenvalues of `δ*δ` (padded with zeros to d0).
    pub fn singular_values(&self) -> &[T] {
        &self.svd.sigma
    }

    /// Eigenvalues of the linear sheaf Laplacian `δ*δ` in ascending order.
    pub fn laplacian_spectrum(&self) -> Vec<T> {
        let mut ev: Vec<T> = self.svd.sigma.iter().map(|&s| s * s).collect();
        ev.resize(self.d0(), T::zero());
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ev
    }

    fn kept(&self, tol: T) -> Vec<usize> {
        let smax = self.svd.sigma.iter().copied().fold(T::zero(), |a, b| a.max(b));
        let cutoff = tol * smax;
        (0..self.svd.sigma.len())
            .filter(|&i| self.svd.sigma[i] > cutoff)
            .collect()
    }

    pub fn rank(&self, tol: T) -> usize {
        self.kept(tol).len()
    }

    /// M2-orthonormal basis of `ker δ*`; columns with `σ ≤ tol·σ_max` count as zero.
    pub fn harmonic_basis(&self, tol: T) -> Result<HarmonicSpace<T>> {
        let keep = self.kept(tol);
        let u = complement_basis(&self.svd.u, &keep, self.d1());
        Ok(HarmonicSpace {
            basis: &self.m2.inv_t * u,
        })
    }

    /// M1-orthonormal basis of `ker δ` (global sections).
    pub fn global_section_basis(&self, tol: T) -> Result<SectionSpace<T>> {
        let keep = self.kept(tol);
        let w = complement_basis(&self.svd.v, &keep, self.d0());
        Ok(SectionSpace {
            basis: &self.m1.inv_t * w,
        })
    }

    /// Splits `y` into its `im δ` and harmonic parts; the parts are M2-orthogonal.
    pub fn hodge_project(&self, harmonic: &HarmonicSpace<T>, y: &Cochain1<T>) -> Result<(Cochain1<T>, Cochain1<T>)> {
        check_len("1-cochain", self.d1(), y.len())?;
        check_len("harmonic basis rows", self.d1(), harmonic.basis.nrows())?;
        let coeffs = harmonic.basis.transpose() * (&self.edge_gram * &y.0);
        let harm = &harmonic.basis * coeffs;
        let im = &y.0 - &harm;
        Ok((Cochain1(im), Cochain1(harm)))
    }

    /// M1-orthogonal projection onto `ker δ`.
    pub fn project_to_sections(&self, sections: &SectionSpace<T>, x: &Cochain0<T>) -> Result<Cochain0<T>> {
        check_len("0-cochain", self.d0(), x.len())?;
        let coeffs = sections.basis.transpose() * (&self.vertex_gram * &x.0);
        Ok(Cochain0(&sections.basis * coeffs))
    }

    /// `δ⁺ b`: the minimum-M1-norm minimizer of `‖δx − b‖_{M2}`; lies in `(ker δ)^⊥`.
    pub fn delta_pseudoinverse_apply(&self, b: &Cochain1<T>, tol: T) -> Result<Cochain0<T>> {
        check_len("1-cochain", self.d1(), b.len())?;
        let rhs = self.m2.factor.transpose() * &b.0;
        let mut w = DVector::zeros(self.d0());
        for i in self.kept(tol) {
            let ui = self.svd.u.column(i);
            let coef = ui.dot(&rhs) / self.svd.sigma[i];
            w.axpy(coef, &self.svd.v.column(i), T::one());
        }
        Ok(Cochain0(&self.m1.inv_t * w))
    }
}

fn whitened_svd<T: Real>(m: DMatrix<T>) -> WhitenedSvd<T> {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return WhitenedSvd {
            u: DMatrix::zeros(r, 0),
            sigma: Vec::new(),
            v: DMatrix::zeros(c, 0),
        };
    }
    let svd = SVD::new(m, true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested Vᵀ").transpose();
    WhitenedSvd {
        u,
        sigma: svd.singular_values.iter().copied().collect(),
        v,
    }
}

/// Orthonormal basis of the complement of the span of `vectors[:, keep]` in ℝⁿ.
/// The thin SVD does not provide full singular bases, so the complement is read
/// off the eigenvectors of the orthogonal projector `I − U Uᵀ` (eigenvalues 0 or 1).
fn complement_basis<T: Real>(vectors: &DMatrix<T>, keep: &[usize], n: usize) -> DMatrix<T> {
    if keep.len() == n {
        return DMatrix::zeros(n, 0);
    }
    let mut proj = DMatrix::identity(n, n);
    for &i in keep {
        let col = vectors.column(i);
        proj.ger(-T::one(), &col, &col, T::one());
    }
    proj = (&proj + proj.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(proj);
    let half = T::lit(0.5);
    let mut idx: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > half).collect();
    idx.sort_unstable();
    let mut out = DMatrix::zeros(n, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        // Sign convention: largest-magnitude entry positive, for reproducible output.
        let imax = col.iamax();
        if col[imax] < T::zero() {
            col.neg_mut();
        }
        out.set_column(j, &col);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::DirectedGraph;
    use crate::sheaf::EdgeStalk;
    use approx::assert_abs_diff_eq;

    fn id(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    fn identity_cycle(n: usize) -> Sheaf<f64> {
        let g = DirectedGraph::cycle(n).unwrap();
        Sheaf::new(g, vec![2; n], (0..n).map(|_| EdgeStalk::new(id(2), id(2))).collect()).unwrap()
    }

    #[test]
    fn single_edge_identity() {
        let g = DirectedGraph::new(2, [(0, 1)]).unwrap();
        let s = Sheaf::new(g, vec![2, 2], vec![EdgeStalk::new(id(2), id(2))]).unwrap();
        let op = CoboundaryOperator::build(&s).unwrap();
        let expected = DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0]);
        assert_eq!(op.matrix(), &expected);
        let y = op.apply_delta(&Cochain0::from_slice(&[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(y.as_slice(), &[-1.0, 1.0]);
        assert_eq!(op.harmonic_basis(1e-10).unwrap().dim(), 0);
    }

    #[test]
    fn self_loop_accumulates() {
        let g = DirectedGraph::new(1, [(0, 0)]).unwrap();
        let s = Sheaf::new(
            g,
            vec![1],
            vec![EdgeStalk::new(
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 2.0),
            )],
        )
        .unwrap();
        let op = CoboundaryOperator::build(&s).unwrap();
        assert_eq!(op.matrix()[(0, 0)], -1.0);
    }

    #[test]
    fn identity_cycle_circulant_blocks() {
        let op = CoboundaryOperator::build(&identity_cycle(3)).unwrap();
        let b = op.matrix();
        assert_eq!(b.shape(), (6, 6));
        // edge 2: 2 -> 0, head block at vertex 0, tail block at vertex 2
        assert_eq!(b[(4, 0)], 1.0);
        assert_eq!(b[(4, 4)], -1.0);
        assert_eq!(b[(0, 2)], 1.0);
        assert_eq!(b[(0, 0)], -1.0);
    }

    #[test]
    fn constant_edge_cochain_is_harmonic_on_identity_cycle() {
        let op = CoboundaryOperator::build(&identity_cycle(3)).unwrap();
        let y = Cochain1::from_slice(&[0.3, -1.0, 0.3, -1.0, 0.3, -1.0]);
        let r = op.apply_delta_star(&y).unwrap();
        assert!(r.amax() < 1e-15);
        let x = Cochain0::from_slice(&[2.0, 5.0, 2.0, 5.0, 2.0, 5.0]);
        assert!(op.apply_delta(&x).unwrap().amax() < 1e-15);
    }

    #[test]
    fn cycle_cohomology_dims() {
        let op = CoboundaryOperator::build(&identity_cycle(3)).unwrap();
        assert_eq!(op.harmonic_basis(1e-10).unwrap().dim(), 2);
        assert_eq!(op.global_section_basis(1e-10).unwrap().dim(), 2);
    }

    #[test]
    fn no_edges_everything_is_a_section() {
        let g = DirectedGraph::new(2, []).unwrap();
        let s: Sheaf<f64> = Sheaf::new(g, vec![2, 2], vec![]).unwrap();
        let op = CoboundaryOperator::build(&s).unwrap();
        assert_eq!(op.global_section_basis(1e-10).unwrap().dim(), 4);
        assert_eq!(op.harmonic_basis(1e-10).unwrap().dim(), 0);
    }

    #[test]
    fn shape_errors() {
        let op = CoboundaryOperator::build(&identity_cycle(3)).unwrap();
        assert!(matches!(
            op.apply_delta(&Cochain0::zeros(5)),
            Err(Error::Dimension {
                expected: 6,
                found: 5,
                ..
            })
        ));
        assert!(op.apply_delta_star(&Cochain1::zeros(7)).is_err());
    }

    #[test]
    fn non_identity_grams_adjoint() {
        let g = DirectedGraph::new(2, [(0, 1)]).unwrap();
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = Sheaf::with_vertex_grams(
            g,
            vec![2, 2],
            vec![EdgeStalk::new(id(2), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).with_gram(r.clone())],
            vec![r.clone(), id(2) * 3.0],
        )
        .unwrap();
        let op = CoboundaryOperator::build(&s).unwrap();
        let x = DVector::from_column_slice(&[0.1, -0.4, 1.3, 0.2]);
        let y = DVector::from_column_slice(&[0.7, -2.0]);
        let lhs = op.inner1(&(op.matrix() * &x), &y);
        let rhs = op.inner0(&x, &(op.adjoint_matrix() * &y));
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }
}
