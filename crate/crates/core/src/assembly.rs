//! The discrete monotone operator on the P1 space.
//!
//! With one-point barycenter quadrature,
//!
//! ```text
//! r_i(u)   = sum_T |T| a(x_T, Du|_T) . D phi_i|_T
//! <A u, v> = sum_T |T| a(x_T, Du|_T) . Dv|_T
//! ```
//!
//! Residuals are gathered node by node over the incident triangles in a
//! fixed order, so the sequential and parallel paths are bitwise identical.

use rayon::prelude::*;

use crate::flux::{Flux, Vec2};
use crate::linalg::CsrMatrix;
use crate::mesh::Mesh;

/// Per-triangle `|T| a(x_T, Du|_T)`.
fn triangle_fluxes(mesh: &Mesh, flux: &Flux, u: &[f64]) -> Vec<Vec2> {
    let area = mesh.triangle_area();
    (0..mesh.num_triangles())
        .map(|t| flux.eval(mesh.barycenter(t), mesh.grad_on(t, u)) * area)
        .collect()
}

fn triangle_fluxes_par(mesh: &Mesh, flux: &Flux, u: &[f64]) -> Vec<Vec2> {
    let area = mesh.triangle_area();
    (0..mesh.num_triangles())
        .into_par_iter()
        .map(|t| flux.eval(mesh.barycenter(t), mesh.grad_on(t, u)) * area)
        .collect()
}

#[inline]
fn gather(mesh: &Mesh, per_tri: &[Vec2], node: usize) -> f64 {
    let tris = mesh.triangles();
    mesh.triangles_of(node)
        .iter()
        .map(|&t| {
            let local = tris[t].iter().position(|&v| v == node).unwrap();
            per_tri[t].dot(&mesh.gradients(t)[local])
        })
        .sum()
}

fn check_len(mesh: &Mesh, u: &[f64]) {
    assert_eq!(u.len(), mesh.num_nodes(), "nodal field does not match mesh");
}

/// Residual vector `r_i = <A u, phi_i>` over all nodes.
pub fn residual(mesh: &Mesh, flux: &Flux, u: &[f64]) -> Vec<f64> {
    check_len(mesh, u);
    let per_tri = triangle_fluxes(mesh, flux, u);
    (0..mesh.num_nodes()).map(|k| gather(mesh, &per_tri, k)).collect()
}

/// Parallel residual; bitwise equal to [`residual`].
pub fn residual_parallel(mesh: &Mesh, flux: &Flux, u: &[f64]) -> Vec<f64> {
    check_len(mesh, u);
    let per_tri = triangle_fluxes_par(mesh, flux, u);
    (0..mesh.num_nodes()).into_par_iter().map(|k| gather(mesh, &per_tri, k)).collect()
}

/// `<A u, v>`.
pub fn pairing(mesh: &Mesh, flux: &Flux, u: &[f64], v: &[f64]) -> f64 {
    check_len(mesh, u);
    check_len(mesh, v);
    let area = mesh.triangle_area();
    (0..mesh.num_triangles())
        .map(|t| flux.eval(mesh.barycenter(t), mesh.grad_on(t, u)).dot(&mesh.grad_on(t, v)) * area)
        .sum()
}

/// Directional derivative of the residual at `u` along `w`, using the
/// `eps`-regularized flux Jacobian.
pub fn jacobian_apply(mesh: &Mesh, flux: &Flux, u: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    check_len(mesh, u);
    check_len(mesh, w);
    let area = mesh.triangle_area();
    let per_tri: Vec<Vec2> = (0..mesh.num_triangles())
        .map(|t| {
            let j = flux.jacobian(mesh.barycenter(t), mesh.grad_on(t, u), eps);
            j * mesh.grad_on(t, w) * area
        })
        .collect();
    (0..mesh.num_nodes()).map(|k| gather(mesh, &per_tri, k)).collect()
}

/// Sparse Jacobian restricted to a set of free nodes.
#[derive(Clone, Debug)]
pub struct FreeSystem {
    local: Vec<usize>,
    free: Vec<usize>,
    pattern: CsrMatrix,
    // per triangle, CSR slot of (row a, col b) for local vertices a, b
    scatter: Vec<[usize; 9]>,
}

const NONE: usize = usize::MAX;

impl FreeSystem {
    pub fn new(mesh: &Mesh, free_mask: &[bool]) -> Self {
        check_len_mask(mesh, free_mask);
        let mut local = vec![NONE; mesh.num_nodes()];
        let free: Vec<usize> = (0..mesh.num_nodes()).filter(|k| free_mask[*k]).collect();
        for (i, &k) in free.iter().enumerate() {
            local[k] = i;
        }
        let tris = mesh.triangles();
        let rows: Vec<Vec<usize>> = free
            .iter()
            .map(|&k| {
                let mut cols: Vec<usize> = mesh
                    .triangles_of(k)
                    .iter()
                    .flat_map(|&t| tris[t].iter().map(|&v| local[v]))
                    .filter(|&c| c != NONE)
                    .collect();
                cols.sort_unstable();
                cols.dedup();
                cols
            })
            .collect();
        let pattern = CsrMatrix::from_pattern(&rows);
        let scatter = tris
            .iter()
            .map(|t| {
                let mut s = [NONE; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        let (ra, cb) = (local[t[a]], local[t[b]]);
                        if ra != NONE && cb != NONE {
                            s[3 * a + b] = pattern.position(ra, cb).unwrap();
                        }
                    }
                }
                s
            })
            .collect();
        FreeSystem { local, free, pattern, scatter }
    }

    pub fn free_nodes(&self) -> &[usize] {
        &self.free
    }

    pub fn dim(&self) -> usize {
        self.free.len()
    }

    /// Local index of a free node.
    pub fn local_index(&self, node: usize) -> Option<usize> {
        let l = self.local[node];
        (l != NONE).then_some(l)
    }

    /// Assembles `d r_free / d u_free` with the `eps`-regularized flux
    /// Jacobian, plus `shift` times the P1 Laplacian.
    pub fn jacobian(&self, mesh: &Mesh, flux: &Flux, u: &[f64], eps: f64, shift: f64) -> CsrMatrix {
        let mut mat = self.pattern.clone();
        let area = mesh.triangle_area();
        let vals = mat.values_mut();
        for (t, slots) in self.scatter.iter().enumerate() {
            if slots.iter().all(|s| *s == NONE) {
                continue;
            }
            let g = mesh.gradients(t);
            let j = flux.jacobian(mesh.barycenter(t), mesh.grad_on(t, u), eps);
            for b in 0..3 {
                let jg = j * g[b] + g[b] * shift;
                for a in 0..3 {
                    let slot = slots[3 * a + b];
                    if slot != NONE {
                        vals[slot] += area * g[a].dot(&jg);
                    }
                }
            }
        }
        mat
    }
}

fn check_len_mask(mesh: &Mesh, m: &[bool]) {
    assert_eq!(m.len(), mesh.num_nodes(), "mask does not match mesh");
}
