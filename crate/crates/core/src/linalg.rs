//! Block-sparse symmetric matrices, an envelope Cholesky factorization with
//! reverse Cuthill–McKee ordering, conjugate gradients and a Lanczos
//! spectrum estimate.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{LdgError, Result};

/// A symmetric matrix made of dense `bs x bs` blocks on an element graph.
#[derive(Debug, Clone)]
pub struct BlockSparse {
    n_blocks: usize,
    bs: usize,
    /// Per block row: sorted `(column block, row-major block)`.
    rows: Vec<Vec<(usize, Vec<f64>)>>,
}

/// Accumulates blocks before freezing them into a [`BlockSparse`].
#[derive(Debug, Clone)]
pub struct BlockSparseBuilder {
    n_blocks: usize,
    bs: usize,
    rows: Vec<BTreeMap<usize, Vec<f64>>>,
}

impl BlockSparseBuilder {
    pub fn new(n_blocks: usize, bs: usize) -> Self {
        BlockSparseBuilder { n_blocks, bs, rows: vec![BTreeMap::new(); n_blocks] }
    }

    /// Add `scale * block` to block `(i, j)`.
    pub fn add(&mut self, i: usize, j: usize, block: &[f64], scale: f64) {
        let bs = self.bs;
        let entry = self.rows[i].entry(j).or_insert_with(|| vec![0.0; bs * bs]);
        for (a, b) in entry.iter_mut().zip(block) {
            *a += scale * b;
        }
    }

    /// Merge another builder of the same shape.
    pub fn merge(&mut self, other: BlockSparseBuilder) {
        for (i, row) in other.rows.into_iter().enumerate() {
            for (j, block) in row {
                self.add(i, j, &block, 1.0);
            }
        }
    }

    pub fn build(self) -> BlockSparse {
        BlockSparse {
            n_blocks: self.n_blocks,
            bs: self.bs,
            rows: self.rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        }
    }
}

impl BlockSparse {
    pub fn dim(&self) -> usize {
        self.n_blocks * self.bs
    }

    pub fn block_size(&self) -> usize {
        self.bs
    }

    pub fn num_blocks(&self) -> usize {
        self.n_blocks
    }

    /// Stored nonzeros.
    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum::<usize>() * self.bs * self.bs
    }

    pub fn block_row(&self, i: usize) -> &[(usize, Vec<f64>)] {
        &self.rows[i]
    }

    /// `alpha * self + beta * other` on the union pattern.
    pub fn linear_combination(&self, alpha: f64, other: &BlockSparse, beta: f64) -> BlockSparse {
        let mut b = BlockSparseBuilder::new(self.n_blocks, self.bs);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, block) in row {
                b.add(i, *j, block, alpha);
            }
        }
        for (i, row) in other.rows.iter().enumerate() {
            for (j, block) in row {
                b.add(i, *j, block, beta);
            }
        }
        b.build()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let bs = self.bs;
        let out: Vec<Vec<f64>> = self
            .rows
            .par_iter()
            .map(|row| {
                let mut y = vec![0.0; bs];
                for (j, block) in row {
                    let xj = &x[j * bs..(j + 1) * bs];
                    for r in 0..bs {
                        y[r] += block[r * bs..(r + 1) * bs].iter().zip(xj).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                y
            })
            .collect();
        out.concat()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let bs = self.bs;
        let (i, a) = (r / bs, r % bs);
        let (j, b) = (c / bs, c % bs);
        match self.rows[i].binary_search_by_key(&j, |(k, _)| *k) {
            Ok(p) => self.rows[i][p].1[a * bs + b],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let bs = self.bs;
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in self.rows.iter().enumerate() {
            for (j, block) in row {
                for a in 0..bs {
                    for b in 0..bs {
                        m[(i * bs + a, j * bs + b)] = block[a * bs + b];
                    }
                }
            }
        }
        m
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let bs = self.bs;
        let mut worst: f64 = 0.0;
        for (i, row) in self.rows.iter().enumerate() {
            for (j, block) in row {
                for a in 0..bs {
                    for b in 0..bs {
                        let t = self.get(j * bs + b, i * bs + a);
                        worst = worst.max((block[a * bs + b] - t).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Reverse Cuthill–McKee ordering of a graph given by adjacency lists.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let degree = |v: usize| adjacency[v].len();
    while order.len() < n {
        // start each component from a pseudo-peripheral node of minimal degree
        let mut start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree(v), v)).unwrap();
        let mut depth = eccentricity(&bfs_levels(adjacency, start, &visited));
        loop {
            let levels = bfs_levels(adjacency, start, &visited);
            let candidate = (0..n).filter(|&v| levels[v] == Some(depth)).min_by_key(|&v| (degree(v), v)).unwrap();
            let d = eccentricity(&bfs_levels(adjacency, candidate, &visited));
            if d <= depth {
                break;
            }
            start = candidate;
            depth = d;
        }
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nb: Vec<usize> = adjacency[v].iter().copied().filter(|&w| !visited[w]).collect();
            nb.sort_by_key(|&w| (degree(w), w));
            for w in nb {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn eccentricity(levels: &[Option<usize>]) -> usize {
    levels.iter().flatten().max().copied().unwrap_or(0)
}

fn bfs_levels(adjacency: &[Vec<usize>], start: usize, excluded: &[bool]) -> Vec<Option<usize>> {
    let mut level = vec![None; adjacency.len()];
    let mut queue = VecDeque::new();
    level[start] = Some(0);
    queue.push_back(start);
    while let Some(v) = queue.pop_front() {
        let l = level[v].unwrap();
        for &w in &adjacency[v] {
            if !excluded[w] && level[w].is_none() {
                level[w] = Some(l + 1);
                queue.push_back(w);
            }
        }
    }
    level
}

/// Envelope (skyline) Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    first: Vec<usize>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factorize a symmetric positive definite block matrix.
    pub fn factor(a: &BlockSparse) -> Result<EnvelopeCholesky> {
        let nbk = a.num_blocks();
        let bs = a.block_size();
        let adjacency: Vec<Vec<usize>> =
            (0..nbk).map(|i| a.block_row(i).iter().map(|(j, _)| *j).filter(|&j| j != i).collect()).collect();
        let block_order = reverse_cuthill_mckee(&adjacency);
        let mut block_pos = vec![0; nbk];
        for (p, &b) in block_order.iter().enumerate() {
            block_pos[b] = p;
        }
        let n = a.dim();
        let perm: Vec<usize> = block_order.iter().flat_map(|&b| (0..bs).map(move |i| b * bs + i)).collect();
        // envelope: first column per permuted row
        let mut first = vec![usize::MAX; n];
        for (i, row) in (0..nbk).map(|i| (i, a.block_row(i))) {
            let pi = block_pos[i];
            let min_block = row.iter().map(|(j, _)| block_pos[*j]).min().unwrap_or(pi).min(pi);
            for r in 0..bs {
                first[pi * bs + r] = min_block * bs;
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for i in 0..n {
            let len = i + 1 - first[i];
            offsets.push(offsets[i] + len);
        }
        let mut data = vec![0.0; offsets[n]];
        // scatter the lower triangle
        for i in 0..nbk {
            let pi = block_pos[i];
            for (j, block) in a.block_row(i) {
                let pj = block_pos[*j];
                for r in 0..bs {
                    let row = pi * bs + r;
                    for c in 0..bs {
                        let col = pj * bs + c;
                        if col <= row {
                            data[offsets[row] + col - first[row]] = block[r * bs + c];
                        }
                    }
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (head, tail) = data.split_at_mut(offsets[i]);
                let row_i = &mut tail[..i + 1 - fi];
                let dot: f64 = if j < i {
                    let row_j = &head[offsets[j]..offsets[j + 1]];
                    row_i[k0 - fi..j - fi].iter().zip(&row_j[k0 - fj..j - fj]).map(|(x, y)| x * y).sum()
                } else {
                    row_i[k0 - fi..i - fi].iter().map(|x| x * x).sum()
                };
                let s = row_i[j - fi] - dot;
                if j < i {
                    let ljj = head[offsets[j + 1] - 1];
                    row_i[j - fi] = s / ljj;
                } else {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(LdgError::Singular(format!("Cholesky pivot {i} is {s:e}")));
                    }
                    row_i[j - fi] = s.sqrt();
                }
            }
        }
        Ok(EnvelopeCholesky { n, perm, first, offsets, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut z: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            let dot: f64 = row[..i - fi].iter().zip(&z[fi..i]).map(|(x, y)| x * y).sum();
            z[i] = (z[i] - dot) / row[i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offsets[i]..self.offsets[i + 1]];
            z[i] /= row[i - fi];
            let xi = z[i];
            for (k, l) in row[..i - fi].iter().enumerate() {
                z[fi + k] -= l * xi;
            }
        }
        let mut x = vec![0.0; n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = z[new];
        }
        x
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Conjugate gradients for an SPD operator, starting from `x0`.
///
/// Stops when `||b - A x|| <= tol * ||b||`. Non-positive curvature is reported
/// as [`LdgError::IndefiniteSchur`].
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<CgResult> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(CgResult { x: vec![0.0; n], iterations: 0, relative_residual: 0.0 });
    }
    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let mut r: Vec<f64> = if x.iter().any(|v| *v != 0.0) {
        let ax = apply(&x);
        b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect()
    } else {
        b.to_vec()
    };
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= tol * bnorm {
        return Ok(CgResult { x, iterations: 0, relative_residual: rr.sqrt() / bnorm });
    }
    let mut p = r.clone();
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LdgError::IndefiniteSchur { iteration: it, curvature: pap / dot(&p, &p) });
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * bnorm {
            return Ok(CgResult { x, iterations: it, relative_residual: rr_new.sqrt() / bnorm });
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(LdgError::CgNotConverged { iterations: max_iter, residual: rr.sqrt() / bnorm })
}

/// Extremal Ritz values of an SPD operator after `steps` Lanczos iterations
/// with full reorthogonalization, from a deterministic start vector.
pub fn lanczos_extremes(apply: impl Fn(&[f64]) -> Vec<f64>, n: usize, steps: usize) -> (f64, f64) {
    let m = steps.min(n).max(1);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(m);
    // deterministic, non-degenerate start vector
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i as f64 + 1.0) * 0.618_033_988_75).fract()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    for k in 0..m {
        q.push(v.clone());
        let mut w = apply(&v);
        let alpha = dot(&w, &v);
        alphas.push(alpha);
        for _ in 0..2 {
            for qi in &q {
                let c = dot(&w, qi);
                w.iter_mut().zip(qi).for_each(|(a, b)| *a -= c * b);
            }
        }
        let beta = norm(&w);
        if k + 1 == m || beta < 1e-13 * alpha.abs().max(1e-300) {
            break;
        }
        betas.push(beta);
        v = w.into_iter().map(|x| x / beta).collect();
    }
    let k = alphas.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t).eigenvalues;
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_blocks(nx: usize, bs: usize) -> BlockSparse {
        // block tridiagonal SPD matrix on a path of blocks
        let mut b = BlockSparseBuilder::new(nx, bs);
        for i in 0..nx {
            let mut d = vec![0.0; bs * bs];
            for r in 0..bs {
                d[r * bs + r] = 4.0 + r as f64;
                if r + 1 < bs {
                    d[r * bs + r + 1] = -1.0;
                    d[(r + 1) * bs + r] = -1.0;
                }
            }
            b.add(i, i, &d, 1.0);
            if i + 1 < nx {
                let mut o = vec![0.0; bs * bs];
                for r in 0..bs {
                    o[r * bs + r] = -1.0;
                }
                b.add(i, i + 1, &o, 1.0);
                b.add(i + 1, i, &o, 1.0);
            }
        }
        b.build()
    }

    #[test]
    fn cholesky_solves_against_dense() {
        let a = laplacian_blocks(7, 3);
        let f = EnvelopeCholesky::factor(&a).unwrap();
        let b: Vec<f64> = (0..21).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
        let dense = a.to_dense().cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b.clone()));
        for (xi, di) in x.iter().zip(dense.iter()) {
            assert!((xi - di).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut b = BlockSparseBuilder::new(1, 2);
        b.add(0, 0, &[1.0, 2.0, 2.0, 1.0], 1.0);
        assert!(EnvelopeCholesky::factor(&b.build()).is_err());
    }

    #[test]
    fn rcm_orders_a_path_contiguously() {
        let adj = vec![vec![3], vec![2, 3], vec![1], vec![0, 1]];
        let order = reverse_cuthill_mckee(&adj);
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        let pos: Vec<usize> = (0..4).map(|v| order.iter().position(|&o| o == v).unwrap()).collect();
        for (v, nb) in adj.iter().enumerate() {
            for w in nb {
                assert_eq!((pos[v] as i64 - pos[*w] as i64).abs(), 1);
            }
        }
    }

    #[test]
    fn cg_and_lanczos_on_diagonal() {
        let d: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let apply = |x: &[f64]| x.iter().zip(&d).map(|(a, b)| a * b).collect::<Vec<_>>();
        let b = vec![1.0; 20];
        let res = conjugate_gradient(apply, &b, None, 1e-12, 100).unwrap();
        for (xi, di) in res.x.iter().zip(&d) {
            assert!((xi - 1.0 / di).abs() < 1e-10);
        }
        let (lo, hi) = lanczos_extremes(apply, 20, 20);
        assert!((lo - 1.0).abs() < 1e-8 && (hi - 20.0).abs() < 1e-8);
    }

    #[test]
    fn cg_detects_negative_curvature() {
        let apply = |x: &[f64]| vec![x[0], -x[1]];
        let err = conjugate_gradient(apply, &[0.0, 1.0], None, 1e-10, 10).unwrap_err();
        assert!(matches!(err, LdgError::IndefiniteSchur { .. }));
    }

    #[test]
    fn zero_rhs_needs_no_iterations() {
        let res = conjugate_gradient(|x: &[f64]| x.to_vec(), &[0.0; 4], None, 1e-10, 10).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.x.iter().all(|v| *v == 0.0));
    }
}
