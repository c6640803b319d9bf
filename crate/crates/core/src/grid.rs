//! Box domains, nodal and cell-wise random fields, gradients and quadrature.
//!
//! Nodal fields are multilinear on each grid cell. Gradients are evaluated at
//! cell centers (one-point quadrature), which is exact for the cell average of
//! the gradient of a multilinear function. Zero-order terms use nodal
//! trapezoidal weights.
//!
//! # Binary dump layout
//!
//! All integers and floats little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4 | magic `SUFB` |
//! | 4 | `u32` format version (1) |
//! | 4 | `u32` location: 0 nodal, 1 cell |
//! | 4 | `u32` dimension `d` |
//! | 12 | `u32` x3 cells per axis (unused axes 1) |
//! | 24 | `f64` x3 box side lengths (unused axes 0) |
//! | 4 | `u32` components per point |
//! | 8 | `u64` realization count `R` |
//! | 8R | `f64` realization weights |
//! | 8·R·P·m | `f64` values, realization-major, then point (axis 1 fastest), then component |

use std::io::Write;
use std::path::Path;

use crate::env::MAX_DIM;
use crate::error::{Error, Result};
use crate::linalg::NeumaierSum;

/// Axis-aligned box `[0, s_1] x ... x [0, s_d]` with `n_i` cells per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    d: usize,
    size: [f64; MAX_DIM],
    n: [usize; MAX_DIM],
}

impl Domain {
    pub fn new(size: &[f64], n: &[usize]) -> Result<Self> {
        let d = size.len();
        if !(1..=MAX_DIM).contains(&d) || n.len() != d {
            return Err(Error::InvalidDomain(format!("dimension mismatch: {} sizes, {} counts", size.len(), n.len())));
        }
        if n.iter().any(|&k| k < 2) {
            return Err(Error::InvalidDomain("need at least 2 cells per axis".into()));
        }
        if size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidDomain("side lengths must be positive".into()));
        }
        let mut s = [0.0; MAX_DIM];
        let mut k = [1; MAX_DIM];
        s[..d].copy_from_slice(size);
        k[..d].copy_from_slice(n);
        Ok(Domain { d, size: s, n: k })
    }

    /// Unit box `[0,1]^d` with `n` cells per axis.
    pub fn unit(d: usize, n: usize) -> Result<Self> {
        Self::new(&vec![1.0; d], &vec![n; d])
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.n[..self.d]
    }

    pub fn size(&self) -> &[f64] {
        &self.size[..self.d]
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.size[axis] / self.n[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.d).map(|i| self.h(i)).product()
    }

    pub fn volume(&self) -> f64 {
        self.size[..self.d].iter().product()
    }

    pub fn node_count(&self) -> usize {
        self.n[..self.d].iter().map(|k| k + 1).product()
    }

    pub fn cell_count(&self) -> usize {
        self.n[..self.d].iter().product()
    }

    /// Corners per cell, `2^d`.
    pub fn corners(&self) -> usize {
        1 << self.d
    }

    pub fn node_multi(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        for axis in 0..self.d {
            let k = self.n[axis] + 1;
            m[axis] = idx % k;
            idx /= k;
        }
        m
    }

    pub fn node_index(&self, m: &[usize; MAX_DIM]) -> usize {
        let mut idx = 0;
        for axis in (0..self.d).rev() {
            idx = idx * (self.n[axis] + 1) + m[axis];
        }
        idx
    }

    pub fn cell_multi(&self, mut idx: usize) -> [usize; MAX_DIM] {
        let mut m = [0; MAX_DIM];
        for axis in 0..self.d {
            m[axis] = idx % self.n[axis];
            idx /= self.n[axis];
        }
        m
    }

    pub fn node_coord(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.node_multi(idx);
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.d {
            x[axis] = m[axis] as f64 * self.h(axis);
        }
        x
    }

    pub fn cell_center(&self, idx: usize) -> [f64; MAX_DIM] {
        let m = self.cell_multi(idx);
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.d {
            x[axis] = (m[axis] as f64 + 0.5) * self.h(axis);
        }
        x
    }

    pub fn is_boundary_node(&self, idx: usize) -> bool {
        let m = self.node_multi(idx);
        (0..self.d).any(|axis| m[axis] == 0 || m[axis] == self.n[axis])
    }

    /// Node indices of the cell's corners; corner `b` sits at offset bit `j` of `b` along axis `j`.
    pub fn cell_corners(&self, cell: usize) -> [usize; 1 << MAX_DIM] {
        let base = self.cell_multi(cell);
        let mut out = [0; 1 << MAX_DIM];
        for (b, slot) in out.iter_mut().enumerate().take(self.corners()) {
            let mut m = base;
            for (axis, mi) in m.iter_mut().enumerate().take(self.d) {
                *mi += (b >> axis) & 1;
            }
            *slot = self.node_index(&m);
        }
        out
    }

    /// Weight of corner `b` in the center gradient along `axis`.
    #[inline]
    pub fn gradient_weight(&self, corner: usize, axis: usize) -> f64 {
        let sign = if (corner >> axis) & 1 == 1 { 1.0 } else { -1.0 };
        sign / (self.h(axis) * (1usize << (self.d - 1)) as f64)
    }

    /// Trapezoidal quadrature weights at the nodes.
    pub fn node_weights(&self) -> Vec<f64> {
        let share = self.cell_volume() / self.corners() as f64;
        let mut w = vec![0.0; self.node_count()];
        for c in 0..self.cell_count() {
            for &node in &self.cell_corners(c)[..self.corners()] {
                w[node] += share;
            }
        }
        w
    }

    /// Number of coefficient cells per axis at scale `eps`, checking `eps = 1/m` with
    /// an integer number of grid cells per coefficient cell.
    pub fn coefficient_cells(&self, eps: f64) -> Result<[usize; MAX_DIM]> {
        if !(eps > 0.0) {
            return Err(Error::Incommensurate { eps, reason: "eps must be positive".into() });
        }
        let inv = 1.0 / eps;
        if (inv - inv.round()).abs() > 1e-9 * inv.max(1.0) || inv.round() < 1.0 {
            return Err(Error::Incommensurate { eps, reason: "eps must be 1/m for an integer m".into() });
        }
        let mut out = [1; MAX_DIM];
        for axis in 0..self.d {
            let cells = self.size[axis] * inv;
            if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) {
                return Err(Error::Incommensurate {
                    eps,
                    reason: format!("side {} is not a multiple of eps", self.size[axis]),
                });
            }
            let cells = cells.round() as usize;
            if cells == 0 || self.n[axis] % cells != 0 {
                return Err(Error::Incommensurate {
                    eps,
                    reason: format!("{cells} coefficient cells do not divide n = {} along axis {}", self.n[axis], axis + 1),
                });
            }
            out[axis] = cells;
        }
        Ok(out)
    }

    /// Lattice cell `floor(x_center / eps)` of every grid cell.
    pub fn lattice_cells(&self, eps: f64) -> Result<Vec<[i64; MAX_DIM]>> {
        let coarse = self.coefficient_cells(eps)?;
        Ok((0..self.cell_count())
            .map(|c| {
                let m = self.cell_multi(c);
                let mut z = [0i64; MAX_DIM];
                for axis in 0..self.d {
                    let per = self.n[axis] / coarse[axis];
                    z[axis] = (m[axis] / per) as i64;
                }
                z
            })
            .collect())
    }
}

/// Nodal field on `Omega x Q`: one array per realization.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomField {
    pub domain: Domain,
    pub components: usize,
    pub weights: Vec<f64>,
    /// `values[r][node * components + c]`.
    pub values: Vec<Vec<f64>>,
    /// Scale the field was sampled at, when oscillatory.
    pub eps: Option<f64>,
    /// Whether the field is constrained to vanish on the boundary.
    pub dirichlet: bool,
}

/// Piecewise-constant field on grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    pub domain: Domain,
    pub components: usize,
    pub weights: Vec<f64>,
    /// `values[r][cell * components + c]`.
    pub values: Vec<Vec<f64>>,
    pub eps: Option<f64>,
}

impl RandomField {
    pub fn zeros(domain: &Domain, components: usize, weights: &[f64]) -> Self {
        let n = domain.node_count() * components;
        RandomField {
            domain: domain.clone(),
            components,
            weights: weights.to_vec(),
            values: vec![vec![0.0; n]; weights.len()],
            eps: None,
            dirichlet: false,
        }
    }

    /// Field from a closure `(realization index, node coordinate, component) -> value`.
    pub fn from_fn<F>(domain: &Domain, components: usize, weights: &[f64], f: F) -> Self
    where
        F: Fn(usize, &[f64; MAX_DIM], usize) -> f64,
    {
        let mut out = Self::zeros(domain, components, weights);
        for (r, vals) in out.values.iter_mut().enumerate() {
            for node in 0..domain.node_count() {
                let x = domain.node_coord(node);
                for c in 0..components {
                    vals[node * components + c] = f(r, &x, c);
                }
            }
        }
        out
    }

    /// Deterministic field (single realization, weight 1).
    pub fn deterministic<F>(domain: &Domain, components: usize, f: F) -> Self
    where
        F: Fn(&[f64; MAX_DIM], usize) -> f64,
    {
        Self::from_fn(domain, components, &[1.0], |_, x, c| f(x, c))
    }

    /// Zeroes boundary nodes and flags the field as `W^{1,p}_0`.
    pub fn with_dirichlet(mut self) -> Self {
        let m = self.components;
        for vals in &mut self.values {
            for node in 0..self.domain.node_count() {
                if self.domain.is_boundary_node(node) {
                    vals[node * m..(node + 1) * m].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        self.dirichlet = true;
        self
    }

    pub fn realizations(&self) -> usize {
        self.values.len()
    }

    /// Copies a single-realization field onto every member of an ensemble.
    pub fn broadcast(&self, weights: &[f64]) -> Self {
        assert_eq!(self.realizations(), 1, "broadcast needs a deterministic field");
        RandomField { weights: weights.to_vec(), values: vec![self.values[0].clone(); weights.len()], ..self.clone() }
    }

    /// `<u>` as a deterministic field.
    pub fn mean(&self) -> Self {
        let n = self.values[0].len();
        let mut mean = vec![0.0; n];
        for i in 0..n {
            let mut s = NeumaierSum::default();
            for (vals, w) in self.values.iter().zip(&self.weights) {
                s.add(w * vals[i]);
            }
            mean[i] = s.value();
        }
        RandomField { weights: vec![1.0], values: vec![mean], ..self.clone() }
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &RandomField, beta: f64) -> Result<Self> {
        check_same(&self.domain, self.components, &self.weights, &other.domain, other.components, &other.weights)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect())
            .collect();
        Ok(RandomField { values, dirichlet: self.dirichlet && other.dirichlet, ..self.clone() })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let values = self.values.iter().map(|v| v.iter().map(|x| alpha * x).collect()).collect();
        RandomField { values, ..self.clone() }
    }

    /// Cell averages of the nodal values.
    pub fn cell_average(&self) -> CellField {
        let dom = &self.domain;
        let m = self.components;
        let k = dom.corners();
        let values = self
            .values
            .iter()
            .map(|vals| {
                let mut out = vec![0.0; dom.cell_count() * m];
                for c in 0..dom.cell_count() {
                    for &node in &dom.cell_corners(c)[..k] {
                        for comp in 0..m {
                            out[c * m + comp] += vals[node * m + comp] / k as f64;
                        }
                    }
                }
                out
            })
            .collect();
        CellField { domain: dom.clone(), components: m, weights: self.weights.clone(), values, eps: self.eps }
    }

    /// `(sum_omega w sum_nodes vol |u|^p)^(1/p)` with trapezoidal node volumes.
    pub fn norm_p(&self, p: f64) -> f64 {
        let nw = self.domain.node_weights();
        let m = self.components;
        let mut s = NeumaierSum::default();
        for (vals, w) in self.values.iter().zip(&self.weights) {
            for (node, vol) in nw.iter().enumerate() {
                let mag = pointwise_norm(&vals[node * m..(node + 1) * m]);
                s.add(w * vol * mag.powf(p));
            }
        }
        s.value().powf(1.0 / p)
    }

    /// `L^2(Omega x Q)` pairing with trapezoidal node volumes.
    pub fn inner(&self, other: &RandomField) -> Result<f64> {
        check_same(&self.domain, self.components, &self.weights, &other.domain, other.components, &other.weights)?;
        let nw = self.domain.node_weights();
        let m = self.components;
        let mut s = NeumaierSum::default();
        for ((a, b), w) in self.values.iter().zip(&other.values).zip(&self.weights) {
            for (node, vol) in nw.iter().enumerate() {
                let mut dot = 0.0;
                for c in 0..m {
                    dot += a[node * m + c] * b[node * m + c];
                }
                s.add(w * vol * dot);
            }
        }
        Ok(s.value())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let dom = &self.domain;
        write_field_csv(path, dom, self.components, &self.values, dom.node_count(), |i| dom.node_multi(i))
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        write_field_binary(path, 0, &self.domain, self.components, &self.weights, &self.values)
    }
}

impl CellField {
    pub fn zeros(domain: &Domain, components: usize, weights: &[f64]) -> Self {
        CellField {
            domain: domain.clone(),
            components,
            weights: weights.to_vec(),
            values: vec![vec![0.0; domain.cell_count() * components]; weights.len()],
            eps: None,
        }
    }

    /// Field from `(realization index, cell center, component) -> value`.
    pub fn from_fn<F>(domain: &Domain, components: usize, weights: &[f64], f: F) -> Self
    where
        F: Fn(usize, &[f64; MAX_DIM], usize) -> f64,
    {
        let mut out = Self::zeros(domain, components, weights);
        for (r, vals) in out.values.iter_mut().enumerate() {
            for cell in 0..domain.cell_count() {
                let x = domain.cell_center(cell);
                for c in 0..components {
                    vals[cell * components + c] = f(r, &x, c);
                }
            }
        }
        out
    }

    pub fn realizations(&self) -> usize {
        self.values.len()
    }

    /// Copies a single-realization field onto every member of an ensemble.
    pub fn broadcast(&self, weights: &[f64]) -> Self {
        assert_eq!(self.realizations(), 1, "broadcast needs a deterministic field");
        CellField { weights: weights.to_vec(), values: vec![self.values[0].clone(); weights.len()], ..self.clone() }
    }

    pub fn combine(&self, alpha: f64, other: &CellField, beta: f64) -> Result<Self> {
        check_same(&self.domain, self.components, &self.weights, &other.domain, other.components, &other.weights)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect())
            .collect();
        Ok(CellField { values, ..self.clone() })
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let values = self.values.iter().map(|v| v.iter().map(|x| alpha * x).collect()).collect();
        CellField { values, ..self.clone() }
    }

    /// `(sum_omega w sum_cells vol |u|^p)^(1/p)`.
    pub fn norm_p(&self, p: f64) -> f64 {
        let vol = self.domain.cell_volume();
        let m = self.components;
        let mut s = NeumaierSum::default();
        for (vals, w) in self.values.iter().zip(&self.weights) {
            for cell in vals.chunks_exact(m) {
                s.add(w * vol * pointwise_norm(cell).powf(p));
            }
        }
        s.value().powf(1.0 / p)
    }

    pub fn inner(&self, other: &CellField) -> Result<f64> {
        check_same(&self.domain, self.components, &self.weights, &other.domain, other.components, &other.weights)?;
        let vol = self.domain.cell_volume();
        let mut s = NeumaierSum::default();
        for ((a, b), w) in self.values.iter().zip(&other.values).zip(&self.weights) {
            for (x, y) in a.iter().zip(b) {
                s.add(w * vol * x * y);
            }
        }
        Ok(s.value())
    }

    pub fn max_abs_diff(&self, other: &CellField) -> Result<f64> {
        check_same(&self.domain, self.components, &self.weights, &other.domain, other.components, &other.weights)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let dom = &self.domain;
        write_field_csv(path, dom, self.components, &self.values, dom.cell_count(), |i| dom.cell_multi(i))
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        write_field_binary(path, 1, &self.domain, self.components, &self.weights, &self.values)
    }
}

/// Cell-center gradient; component `i * d + j` holds `d_j u_i`.
pub fn gradient(u: &RandomField) -> CellField {
    let dom = &u.domain;
    let d = dom.dim();
    let m = u.components;
    let k = dom.corners();
    let values = u
        .values
        .iter()
        .map(|vals| {
            let mut out = vec![0.0; dom.cell_count() * m * d];
            for c in 0..dom.cell_count() {
                let corners = dom.cell_corners(c);
                for (b, &node) in corners[..k].iter().enumerate() {
                    for i in 0..m {
                        let v = vals[node * m + i];
                        for j in 0..d {
                            out[(c * m + i) * d + j] += dom.gradient_weight(b, j) * v;
                        }
                    }
                }
            }
            out
        })
        .collect();
    CellField { domain: dom.clone(), components: m * d, weights: u.weights.clone(), values, eps: u.eps }
}

/// `1/2 (grad U + grad U^T)` for a vector field with `d` components.
pub fn sym_gradient(u: &RandomField) -> Result<CellField> {
    let d = u.domain.dim();
    if u.components != d {
        return Err(Error::FieldMismatch(format!("sym_gradient needs {d} components, got {}", u.components)));
    }
    let mut g = gradient(u);
    for vals in &mut g.values {
        for cell in vals.chunks_exact_mut(d * d) {
            symmetrize(cell, d);
        }
    }
    Ok(g)
}

/// In-place symmetric part of a row-major `d x d` block.
#[inline]
pub fn symmetrize(m: &mut [f64], d: usize) {
    for i in 0..d {
        for j in 0..i {
            let s = 0.5 * (m[i * d + j] + m[j * d + i]);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
}

#[inline]
fn pointwise_norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn check_same(d1: &Domain, m1: usize, w1: &[f64], d2: &Domain, m2: usize, w2: &[f64]) -> Result<()> {
    if d1 != d2 {
        return Err(Error::FieldMismatch("fields live on different grids".into()));
    }
    if m1 != m2 {
        return Err(Error::FieldMismatch(format!("component counts differ ({m1} vs {m2})")));
    }
    if w1 != w2 {
        return Err(Error::FieldMismatch("fields use different sampling plans".into()));
    }
    Ok(())
}

fn write_field_csv<F>(path: impl AsRef<Path>, dom: &Domain, m: usize, values: &[Vec<f64>], points: usize, multi: F) -> Result<()>
where
    F: Fn(usize) -> [usize; MAX_DIM],
{
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    let mut header = vec!["realization".to_string()];
    header.extend((0..dom.dim()).map(|a| format!("i{}", a + 1)));
    header.extend((0..m).map(|c| format!("c{c}")));
    w.write_record(&header).map_err(|e| Error::Parse(e.to_string()))?;
    for (r, vals) in values.iter().enumerate() {
        for p in 0..points {
            let idx = multi(p);
            let mut rec = vec![r.to_string()];
            rec.extend(idx[..dom.dim()].iter().map(|i| i.to_string()));
            rec.extend(vals[p * m..(p + 1) * m].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_field_binary(path: impl AsRef<Path>, location: u32, dom: &Domain, m: usize, weights: &[f64], values: &[Vec<f64>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"SUFB");
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&location.to_le_bytes());
    buf.extend_from_slice(&(dom.dim() as u32).to_le_bytes());
    for axis in 0..MAX_DIM {
        buf.extend_from_slice(&(dom.n[axis] as u32).to_le_bytes());
    }
    for axis in 0..MAX_DIM {
        buf.extend_from_slice(&dom.size[axis].to_le_bytes());
    }
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for w in weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    for vals in values {
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}
