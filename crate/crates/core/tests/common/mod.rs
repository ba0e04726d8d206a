#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sheaf_sysid::{CoboundaryOperator, DirectedGraph, EdgeStalk, Sheaf};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Well-conditioned SPD matrix `I + QQᵀ/d`.
pub fn spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let q = gaussian_matrix(rng, d, d);
    DMatrix::identity(d, d) + &q * q.transpose() / d as f64
}

/// Random sheaf: 1–5 vertices, 0–6 edges (self-loops allowed), stalk dims
/// 1–3, random restriction maps and SPD Grams.
pub fn random_sheaf(seed: u64) -> Sheaf<f64> {
    let mut r = rng(seed);
    let nv = r.random_range(1..=5);
    let ne = r.random_range(0..=6);
    let edges: Vec<(usize, usize)> = (0..ne)
        .map(|_| (r.random_range(0..nv), r.random_range(0..nv)))
        .collect();
    let dims: Vec<usize> = (0..nv).map(|_| r.random_range(1..=3)).collect();
    let stalks = edges
        .iter()
        .map(|&(t, h)| {
            let d = r.random_range(1..=3);
            let head = gaussian_matrix(&mut r, d, dims[h]);
            let tail = gaussian_matrix(&mut r, d, dims[t]);
            let g = spd(&mut r, d);
            EdgeStalk::new(head, tail).with_gram(g)
        })
        .collect();
    let grams = dims.iter().map(|&d| spd(&mut r, d)).collect();
    Sheaf::with_vertex_grams(DirectedGraph::new(nv, edges).unwrap(), dims, stalks, grams).unwrap()
}

/// Directed n-cycle, ℝ² stalks, identity head maps, tail maps rotated by `angle`.
pub fn cycle(n: usize, angle: f64) -> CoboundaryOperator<f64> {
    let (s, c) = angle.sin_cos();
    let tail = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
    let stalks = (0..n)
        .map(|_| EdgeStalk::new(DMatrix::identity(2, 2), tail.clone()))
        .collect();
    let sheaf = Sheaf::new(DirectedGraph::cycle(n).unwrap(), vec![2; n], stalks).unwrap();
    CoboundaryOperator::build(&sheaf).unwrap()
}
