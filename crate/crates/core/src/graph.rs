use crate::error::{Error, Result};

/// A directed edge `tail -> head`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
}

/// Finite directed multigraph. Edge order is fixed at construction and
/// defines the block order of 1-cochains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedGraph {
    vertex_count: usize,
    edges: Vec<Edge>,
}

impl DirectedGraph {
    pub fn new(vertex_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let edges: Vec<Edge> = edges.into_iter().map(|(tail, head)| Edge { tail, head }).collect();
        for (i, e) in edges.iter().enumerate() {
            if e.tail >= vertex_count || e.head >= vertex_count {
                return Err(Error::Structure(format!(
                    "edge {i} ({} -> {}) references a vertex outside 0..{vertex_count}",
                    e.tail, e.head
                )));
            }
        }
        Ok(Self { vertex_count, edges })
    }

    /// Directed cycle `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn cycle(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Structure(format!("cycle needs at least 2 vertices, got {n}")));
        }
        Self::new(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    /// Directed path `0 -> 1 -> ... -> n-1`.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> Edge {
        self.edges[index]
    }
}
