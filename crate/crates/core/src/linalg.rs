//! Sparse assembly, preconditioned conjugate gradients and compensated sums.

use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Neumaier (improved Kahan) summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = NeumaierSum::default();
    values.into_iter().for_each(|v| s.add(v));
    s.value()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Triplet accumulator; duplicates are summed on [`SparseBuilder::build`].
pub struct SparseBuilder {
    coo: CooMatrix<f64>,
}

impl SparseBuilder {
    pub fn new(n: usize) -> Self {
        SparseBuilder { coo: CooMatrix::new(n, n) }
    }

    #[inline]
    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            self.coo.push(i, j, v);
        }
    }

    pub fn build(self) -> SparseMatrix {
        SparseMatrix { csr: CsrMatrix::from(&self.coo) }
    }
}

/// Square CSR matrix.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    csr: CsrMatrix<f64>,
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.csr.nrows()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        let offsets = self.csr.row_offsets();
        let cols = self.csr.col_indices();
        let vals = self.csr.values();
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in offsets[i]..offsets[i + 1] {
                acc += vals[k] * x[cols[k]];
            }
            *yi = acc;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let offsets = self.csr.row_offsets();
        let cols = self.csr.col_indices();
        let vals = self.csr.values();
        (0..self.dim())
            .map(|i| (offsets[i]..offsets[i + 1]).filter(|&k| cols[k] == i).map(|k| vals[k]).sum())
            .collect()
    }

    /// Adds `mu` to every diagonal entry.
    pub fn shift_diagonal(&mut self, mu: f64) {
        let n = self.dim();
        let mut coo = CooMatrix::from(&self.csr);
        for i in 0..n {
            coo.push(i, i, mu);
        }
        self.csr = CsrMatrix::from(&coo);
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for (i, j, v) in self.csr.triplet_iter() {
            m[(i, j)] += *v;
        }
        m
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    /// Relative residual target `|r| / |b|`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-12, max_iter: 20_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

impl CgReport {
    pub fn into_result(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::CgNotConverged { iterations: self.iterations, residual: self.residual })
        }
    }
}

/// Jacobi-preconditioned CG for a symmetric positive (semi-)definite operator.
///
/// `project`, when given, maps vectors onto the subspace where the operator is
/// definite (for instance mean-zero fields on a torus); it is applied to the
/// right-hand side and to every residual.
pub fn pcg<A>(
    apply: A,
    b: &[f64],
    x: &mut [f64],
    diag: Option<&[f64]>,
    project: Option<&dyn Fn(&mut [f64])>,
    opts: CgOptions,
) -> CgReport
where
    A: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut rhs = b.to_vec();
    if let Some(p) = project {
        p(&mut rhs);
        p(x);
    }
    let bnorm = norm2(&rhs);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return CgReport { iterations: 0, residual: 0.0, converged: true };
    }
    let precondition = |r: &[f64], z: &mut [f64]| match diag {
        Some(dg) => {
            for i in 0..n {
                z[i] = if dg[i] > 0.0 { r[i] / dg[i] } else { r[i] };
            }
            if let Some(p) = project {
                p(z);
            }
        }
        None => z.copy_from_slice(r),
    };
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if let Some(p) = project {
        p(&mut r);
    }
    let mut z = vec![0.0; n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = norm2(&r) / bnorm;
    let mut it = 0;
    while residual > opts.tol && it < opts.max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if let Some(pr) = project {
            pr(&mut r);
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        it += 1;
        residual = norm2(&r) / bnorm;
    }
    // true residual, the recursive one drifts
    apply(x, &mut ax);
    let mut r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
    if let Some(p) = project {
        p(&mut r);
    }
    let residual = norm2(&r) / bnorm;
    CgReport { iterations: it, residual, converged: residual <= opts.tol.max(1e3 * f64::EPSILON) }
}

/// Solves `m x = b` with PCG.
pub fn solve_spd(m: &SparseMatrix, b: &[f64], x: &mut [f64], project: Option<&dyn Fn(&mut [f64])>, opts: CgOptions) -> CgReport {
    let diag = m.diagonal();
    pcg(|v, out| m.mul_vec(v, out), b, x, Some(&diag), project, opts)
}
