//! Euclidean sheaves over directed graphs.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::cochain::BlockLayout;
use crate::error::{Error, Result};
use crate::graph::DirectedGraph;
use crate::Real;

/// Edge stalk data: restriction maps from the head and tail vertex stalks and
/// the Gram matrix of the edge inner product. The stalk dimension is the row
/// count of the restriction maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeStalk<T: Real> {
    pub head_map: DMatrix<T>,
    pub tail_map: DMatrix<T>,
    pub gram: DMatrix<T>,
}

impl<T: Real> EdgeStalk<T> {
    /// Edge stalk with the identity Gram matrix.
    pub fn new(head_map: DMatrix<T>, tail_map: DMatrix<T>) -> Self {
        let d = head_map.nrows();
        Self {
            head_map,
            tail_map,
            gram: DMatrix::identity(d, d),
        }
    }

    pub fn with_gram(mut self, gram: DMatrix<T>) -> Self {
        self.gram = gram;
        self
    }

    pub fn dim(&self) -> usize {
        self.head_map.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sheaf<T: Real> {
    graph: DirectedGraph,
    vertex_dims: Vec<usize>,
    vertex_grams: Vec<DMatrix<T>>,
    edge_stalks: Vec<EdgeStalk<T>>,
    vertex_layout: BlockLayout,
    edge_layout: BlockLayout,
}

impl<T: Real> Sheaf<T> {
    /// Builds a sheaf with identity vertex Grams.
    pub fn new(graph: DirectedGraph, vertex_dims: Vec<usize>, edge_stalks: Vec<EdgeStalk<T>>) -> Result<Self> {
        let grams = vertex_dims.iter().map(|&d| DMatrix::identity(d, d)).collect();
        Self::with_vertex_grams(graph, vertex_dims, edge_stalks, grams)
    }

    pub fn with_vertex_grams(
        graph: DirectedGraph,
        vertex_dims: Vec<usize>,
        edge_stalks: Vec<EdgeStalk<T>>,
        vertex_grams: Vec<DMatrix<T>>,
    ) -> Result<Self> {
        if vertex_dims.len() != graph.vertex_count() {
            return Err(Error::Structure(format!(
                "{} vertex stalk dims for {} vertices",
                vertex_dims.len(),
                graph.vertex_count()
            )));
        }
        if edge_stalks.len() != graph.edge_count() {
            return Err(Error::Structure(format!(
                "{} edge stalks for {} edges",
                edge_stalks.len(),
                graph.edge_count()
            )));
        }
        if vertex_grams.len() != vertex_dims.len() {
            return Err(Error::Structure(format!(
                "{} vertex Grams for {} vertices",
                vertex_grams.len(),
                vertex_dims.len()
            )));
        }
        for (v, (gram, &d)) in vertex_grams.iter().zip(&vertex_dims).enumerate() {
            check_spd(gram, d).map_err(|m| Error::Structure(format!("vertex {v} Gram: {m}")))?;
        }
        for (i, (stalk, edge)) in edge_stalks.iter().zip(graph.edges()).enumerate() {
            let d = stalk.dim();
            let shape_ok = stalk.head_map.shape() == (d, vertex_dims[edge.head])
                && stalk.tail_map.shape() == (d, vertex_dims[edge.tail]);
            if !shape_ok {
                return Err(Error::Structure(format!(
                    "edge {i}: head map {:?} / tail map {:?} do not match stalks F(e)={d}, F(h)={}, F(t)={}",
                    stalk.head_map.shape(),
                    stalk.tail_map.shape(),
                    vertex_dims[edge.head],
                    vertex_dims[edge.tail]
                )));
            }
            check_spd(&stalk.gram, d).map_err(|m| Error::Structure(format!("edge {i} Gram: {m}")))?;
        }
        let vertex_layout = BlockLayout::from_dims(&vertex_dims);
        let edge_dims: Vec<usize> = edge_stalks.iter().map(EdgeStalk::dim).collect();
        let edge_layout = BlockLayout::from_dims(&edge_dims);
        Ok(Self {
            graph,
            vertex_dims,
            vertex_grams,
            edge_stalks,
            vertex_layout,
            edge_layout,
        })
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn vertex_dims(&self) -> &[usize] {
        &self.vertex_dims
    }

    pub fn edge_dims(&self) -> Vec<usize> {
        self.edge_layout.dims()
    }

    pub fn vertex_grams(&self) -> &[DMatrix<T>] {
        &self.vertex_grams
    }

    pub fn edge_stalks(&self) -> &[EdgeStalk<T>] {
        &self.edge_stalks
    }

    pub fn vertex_layout(&self) -> &BlockLayout {
        &self.vertex_layout
    }

    pub fn edge_layout(&self) -> &BlockLayout {
        &self.edge_layout
    }

    /// Dimension of C⁰.
    pub fn d0(&self) -> usize {
        self.vertex_layout.total()
    }

    /// Dimension of C¹.
    pub fn d1(&self) -> usize {
        self.edge_layout.total()
    }
}

fn check_spd<T: Real>(gram: &DMatrix<T>, dim: usize) -> std::result::Result<(), String> {
    if gram.shape() != (dim, dim) {
        return Err(format!("shape {:?}, expected ({dim}, {dim})", gram.shape()));
    }
    if dim == 0 {
        return Ok(());
    }
    if gram.iter().any(|x| !x.is_finite()) {
        return Err("non-finite entry".into());
    }
    let scale = gram.amax();
    let asym = (gram - gram.transpose()).amax();
    if asym > T::lit(1e-12) * (T::one() + scale) {
        return Err(format!("not symmetric (max |R - Rᵀ| = {asym})"));
    }
    let eig = SymmetricEigen::new(gram.clone());
    let min = eig.eigenvalues.min();
    if min <= T::default_rank_tol() * scale {
        return Err(format!("not positive definite (smallest eigenvalue {min})"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(n: usize) -> DMatrix<f64> {
        DMatrix::identity(n, n)
    }

    #[test]
    fn rejects_shape_mismatch() {
        let g = DirectedGraph::new(2, [(0, 1)]).unwrap();
        let bad = EdgeStalk::new(id(2), DMatrix::zeros(2, 3));
        assert!(matches!(Sheaf::new(g, vec![2, 2], vec![bad]), Err(Error::Structure(_))));
    }

    #[test]
    fn rejects_indefinite_gram() {
        let g = DirectedGraph::new(2, [(0, 1)]).unwrap();
        let stalk = EdgeStalk::new(id(1), id(1)).with_gram(DMatrix::from_element(1, 1, -1.0));
        assert!(Sheaf::new(g, vec![1, 1], vec![stalk]).is_err());
    }

    #[test]
    fn rejects_asymmetric_gram() {
        let g = DirectedGraph::new(1, []).unwrap();
        let gram = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert!(Sheaf::<f64>::with_vertex_grams(g, vec![2], vec![], vec![gram]).is_err());
    }

    #[test]
    fn layouts_follow_input_order() {
        let g = DirectedGraph::new(3, [(0, 1), (1, 2)]).unwrap();
        let s = Sheaf::<f64>::new(
            g,
            vec![1, 2, 3],
            vec![
                EdgeStalk::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1)),
                EdgeStalk::new(DMatrix::zeros(1, 3), DMatrix::zeros(1, 2)),
            ],
        )
        .unwrap();
        assert_eq!(s.d0(), 6);
        assert_eq!(s.d1(), 3);
        assert_eq!(s.vertex_layout().range(2), 3..6);
        assert_eq!(s.edge_dims(), vec![2, 1]);
    }
}
