//! Degree-of-freedom maps and assembly for nodal fields with cell-center gradients.

use crate::grid::Domain;
use crate::linalg::{SparseBuilder, SparseMatrix};

/// Map from `node * m + component` to an unknown index (`None` for constrained entries).
#[derive(Clone, Debug)]
pub struct Dofs {
    pub components: usize,
    map: Vec<Option<usize>>,
    free: Vec<usize>,
}

impl Dofs {
    /// Every boundary node fixed to zero.
    pub fn dirichlet(domain: &Domain, components: usize) -> Self {
        Self::build(domain, components, |node| domain.is_boundary_node(node))
    }

    /// No constraints.
    pub fn free(domain: &Domain, components: usize) -> Self {
        Self::build(domain, components, |_| false)
    }

    fn build(domain: &Domain, components: usize, fixed: impl Fn(usize) -> bool) -> Self {
        let mut map = vec![None; domain.node_count() * components];
        let mut free = Vec::new();
        for node in 0..domain.node_count() {
            if fixed(node) {
                continue;
            }
            for c in 0..components {
                map[node * components + c] = Some(free.len());
                free.push(node * components + c);
            }
        }
        Dofs { components, map, free }
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    #[inline]
    pub fn dof(&self, entry: usize) -> Option<usize> {
        self.map[entry]
    }

    /// Nodal vector from unknowns (constrained entries zero).
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.map.len()];
        self.expand_into(x, &mut full);
        full
    }

    pub fn expand_into(&self, x: &[f64], full: &mut [f64]) {
        full.iter_mut().for_each(|v| *v = 0.0);
        for (k, &e) in self.free.iter().enumerate() {
            full[e] = x[k];
        }
    }

    /// Unknowns from a nodal vector (constrained entries dropped).
    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&e| full[e]).collect()
    }
}

/// Cell-center gradient of a nodal vector: `out[i * d + j] = d_j u_i`.
pub fn cell_gradient(domain: &Domain, cell: usize, full: &[f64], m: usize, out: &mut [f64]) {
    let d = domain.dim();
    out.iter_mut().for_each(|v| *v = 0.0);
    let corners = domain.cell_corners(cell);
    for (b, &node) in corners[..domain.corners()].iter().enumerate() {
        for i in 0..m {
            let v = full[node * m + i];
            for j in 0..d {
                out[i * d + j] += domain.gradient_weight(b, j) * v;
            }
        }
    }
}

/// Adds `vol * sum_j w_bj flux_ij` to the residual for every corner of `cell`.
pub fn scatter_flux(domain: &Domain, cell: usize, flux: &[f64], dofs: &Dofs, scale: f64, out: &mut [f64]) {
    let d = domain.dim();
    let m = dofs.components;
    let corners = domain.cell_corners(cell);
    for (b, &node) in corners[..domain.corners()].iter().enumerate() {
        for i in 0..m {
            if let Some(k) = dofs.dof(node * m + i) {
                let mut s = 0.0;
                for j in 0..d {
                    s += domain.gradient_weight(b, j) * flux[i * d + j];
                }
                out[k] += scale * s;
            }
        }
    }
}

/// Adds the cell contribution of a gradient-space tensor `t` (`md x md`, row-major)
/// to a sparse builder, times `scale`.
pub fn scatter_tensor(domain: &Domain, cell: usize, t: &[f64], dofs: &Dofs, scale: f64, builder: &mut SparseBuilder) {
    let d = domain.dim();
    let m = dofs.components;
    let n = m * d;
    let k = domain.corners();
    let corners = domain.cell_corners(cell);
    for (a, &na) in corners[..k].iter().enumerate() {
        for i in 0..m {
            let Some(ra) = dofs.dof(na * m + i) else { continue };
            for (b, &nb) in corners[..k].iter().enumerate() {
                for l in 0..m {
                    let Some(rb) = dofs.dof(nb * m + l) else { continue };
                    let mut s = 0.0;
                    for j in 0..d {
                        let wa = domain.gradient_weight(a, j);
                        for q in 0..d {
                            s += wa * t[(i * d + j) * n + l * d + q] * domain.gradient_weight(b, q);
                        }
                    }
                    builder.push(ra, rb, scale * s);
                }
            }
        }
    }
}

/// Stiffness matrix of `sum_cells vol t(cell) grad u . grad v`.
pub fn assemble_stiffness<T>(domain: &Domain, dofs: &Dofs, tensor: T) -> SparseMatrix
where
    T: Fn(usize, &mut [f64]),
{
    let n = dofs.components * domain.dim();
    let vol = domain.cell_volume();
    let mut t = vec![0.0; n * n];
    let mut b = SparseBuilder::new(dofs.len());
    for cell in 0..domain.cell_count() {
        tensor(cell, &mut t);
        scatter_tensor(domain, cell, &t, dofs, vol, &mut b);
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplacian_annihilates_linear_fields_away_from_boundary() {
        let dom = Domain::unit(2, 4).unwrap();
        let dofs = Dofs::free(&dom, 1);
        let k = assemble_stiffness(&dom, &dofs, |_, t| {
            t.iter_mut().for_each(|v| *v = 0.0);
            t[0] = 1.0;
            t[3] = 1.0;
        });
        let u: Vec<f64> = (0..dom.node_count()).map(|i| 2.0 * dom.node_coord(i)[0] - dom.node_coord(i)[1]).collect();
        let mut y = vec![0.0; u.len()];
        k.mul_vec(&u, &mut y);
        for node in 0..dom.node_count() {
            if !dom.is_boundary_node(node) {
                assert!(y[node].abs() < 1e-12);
            }
        }
        // sum of all rows vanishes for constants
        let ones = vec![1.0; u.len()];
        k.mul_vec(&ones, &mut y);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dirichlet_dofs_skip_boundary() {
        let dom = Domain::unit(2, 4).unwrap();
        let dofs = Dofs::dirichlet(&dom, 2);
        assert_eq!(dofs.len(), 9 * 2);
        let x: Vec<f64> = (0..dofs.len()).map(|i| i as f64).collect();
        assert_eq!(dofs.restrict(&dofs.expand(&x)), x);
    }
}
