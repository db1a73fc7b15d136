//! Uniform P1 triangulation of `[0, L]^2`, node sets and shape rasterization.
//!
//! Node `(i, j)` sits at `(i L / N, j L / N)` with row-major index
//! `j (N + 1) + i`. Each cell is split along its positive-slope diagonal
//! into a lower-right and an upper-left right triangle, so interior nodes
//! have six incident triangles and the P1 Laplacian is the 5-point stencil.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flux::Vec2;

/// Identifies a mesh by its construction parameters; identical `(N, L)`
/// builds share an id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MeshId {
    pub n: usize,
    pub l_bits: u64,
}

#[derive(Clone, Debug)]
pub struct Mesh {
    n: usize,
    l: f64,
    h: f64,
    nodes: Vec<Vec2>,
    triangles: Vec<[usize; 3]>,
    grads: Vec<[Vec2; 3]>,
    barycenters: Vec<Vec2>,
    area: f64,
    // node -> incident triangles (CSR)
    tri_offsets: Vec<usize>,
    tri_list: Vec<usize>,
}

impl Mesh {
    /// Builds the `N x N` cell mesh of `[0, L]^2`.
    pub fn build(n: usize, l: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("mesh needs N >= 2 cells per side, got {n}")));
        }
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::invalid(format!("side length must be positive, got {l}")));
        }
        let h = l / n as f64;
        let side = n + 1;
        let nodes = (0..side)
            .flat_map(|j| (0..side).map(move |i| (i, j)))
            .map(|(i, j)| Vec2::new(i as f64 * l / n as f64, j as f64 * l / n as f64))
            .collect::<Vec<_>>();

        let lower = [Vec2::new(-1.0, 0.0) / h, Vec2::new(1.0, -1.0) / h, Vec2::new(0.0, 1.0) / h];
        let upper = [Vec2::new(0.0, -1.0) / h, Vec2::new(1.0, 0.0) / h, Vec2::new(-1.0, 1.0) / h];
        let mut triangles = Vec::with_capacity(2 * n * n);
        let mut grads = Vec::with_capacity(2 * n * n);
        for j in 0..n {
            for i in 0..n {
                let n00 = j * side + i;
                let n10 = n00 + 1;
                let n01 = n00 + side;
                let n11 = n01 + 1;
                triangles.push([n00, n10, n11]);
                grads.push(lower);
                triangles.push([n00, n11, n01]);
                grads.push(upper);
            }
        }
        let barycenters = triangles
            .iter()
            .map(|t| (nodes[t[0]] + nodes[t[1]] + nodes[t[2]]) / 3.0)
            .collect();

        let mut counts = vec![0usize; nodes.len() + 1];
        for t in &triangles {
            for &v in t {
                counts[v + 1] += 1;
            }
        }
        for k in 1..counts.len() {
            counts[k] += counts[k - 1];
        }
        let mut fill = counts.clone();
        let mut tri_list = vec![0usize; counts[nodes.len()]];
        for (ti, t) in triangles.iter().enumerate() {
            for &v in t {
                tri_list[fill[v]] = ti;
                fill[v] += 1;
            }
        }

        Ok(Mesh {
            n,
            l,
            h,
            nodes,
            triangles,
            grads,
            barycenters,
            area: 0.5 * h * h,
            tri_offsets: counts,
            tri_list,
        })
    }

    pub fn id(&self) -> MeshId {
        MeshId { n: self.n, l_bits: self.l.to_bits() }
    }

    /// Cells per side.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side_length(&self) -> f64 {
        self.l
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn nodes(&self) -> &[Vec2] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> Vec2 {
        self.nodes[k]
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Gradients of the three local hat functions on triangle `t`.
    pub fn gradients(&self, t: usize) -> &[Vec2; 3] {
        &self.grads[t]
    }

    pub fn barycenter(&self, t: usize) -> Vec2 {
        self.barycenters[t]
    }

    /// Area of every triangle, `L^2 / (2 N^2)`.
    pub fn triangle_area(&self) -> f64 {
        self.area
    }

    pub fn triangles_of(&self, node: usize) -> &[usize] {
        &self.tri_list[self.tri_offsets[node]..self.tri_offsets[node + 1]]
    }

    /// Constant gradient of the P1 interpolant of `u` on triangle `t`.
    #[inline]
    pub fn grad_on(&self, t: usize, u: &[f64]) -> Vec2 {
        let [a, b, c] = self.triangles[t];
        let g = &self.grads[t];
        g[0] * u[a] + g[1] * u[b] + g[2] * u[c]
    }

    /// True for nodes on the outer edge of the square.
    pub fn on_outer_boundary(&self, k: usize) -> bool {
        let side = self.n + 1;
        let (i, j) = (k % side, k / side);
        i == 0 || j == 0 || i == self.n || j == self.n
    }

    pub fn empty_set(&self, name: &str) -> NodeSet {
        NodeSet { mask: vec![false; self.num_nodes()], name: name.to_string(), mesh_id: self.id() }
    }

    pub fn full_set(&self, name: &str) -> NodeSet {
        NodeSet { mask: vec![true; self.num_nodes()], name: name.to_string(), mesh_id: self.id() }
    }

    pub fn set_from_mask(&self, name: &str, mask: Vec<bool>) -> Result<NodeSet> {
        if mask.len() != self.num_nodes() {
            return Err(Error::invalid("mask length does not match node count"));
        }
        Ok(NodeSet { mask, name: name.to_string(), mesh_id: self.id() })
    }

    pub fn set_from_indices(&self, name: &str, idx: impl IntoIterator<Item = usize>) -> NodeSet {
        let mut s = self.empty_set(name);
        for k in idx {
            s.mask[k] = true;
        }
        s
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSet {
    mask: Vec<bool>,
    name: String,
    mesh_id: MeshId,
}

impl NodeSet {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn mesh_id(&self) -> MeshId {
        self.mesh_id
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, k: usize) -> bool {
        self.mask[k]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|b| *b)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask.iter().enumerate().filter(|(_, b)| **b).map(|(k, _)| k)
    }

    fn same_mesh(&self, other: &NodeSet) -> Result<()> {
        if self.mesh_id == other.mesh_id {
            Ok(())
        } else {
            Err(Error::MeshMismatch)
        }
    }

    fn zip(&self, other: &NodeSet, name: String, f: impl Fn(bool, bool) -> bool) -> Result<NodeSet> {
        self.same_mesh(other)?;
        let mask = self.mask.iter().zip(&other.mask).map(|(a, b)| f(*a, *b)).collect();
        Ok(NodeSet { mask, name, mesh_id: self.mesh_id })
    }

    pub fn union(&self, other: &NodeSet) -> Result<NodeSet> {
        self.zip(other, format!("({}|{})", self.name, other.name), |a, b| a || b)
    }

    pub fn intersect(&self, other: &NodeSet) -> Result<NodeSet> {
        self.zip(other, format!("({}&{})", self.name, other.name), |a, b| a && b)
    }

    pub fn difference(&self, other: &NodeSet) -> Result<NodeSet> {
        self.zip(other, format!("({}\\{})", self.name, other.name), |a, b| a && !b)
    }

    pub fn complement(&self) -> NodeSet {
        NodeSet {
            mask: self.mask.iter().map(|b| !b).collect(),
            name: format!("~{}", self.name),
            mesh_id: self.mesh_id,
        }
    }

    pub fn is_subset(&self, other: &NodeSet) -> Result<bool> {
        self.same_mesh(other)?;
        Ok(self.mask.iter().zip(&other.mask).all(|(a, b)| !a || *b))
    }

    /// Mask equality (names are ignored).
    pub fn same_nodes(&self, other: &NodeSet) -> Result<bool> {
        self.same_mesh(other)?;
        Ok(self.mask == other.mask)
    }

    /// Run-length encoding of the mask: `(start, length)` of every run of members.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut k = 0;
        while k < self.mask.len() {
            if self.mask[k] {
                let start = k;
                while k < self.mask.len() && self.mask[k] {
                    k += 1;
                }
                out.push((start, k - start));
            } else {
                k += 1;
            }
        }
        out
    }

    pub fn to_rle(&self) -> RleMask {
        RleMask {
            name: self.name.clone(),
            mesh: self.mesh_id,
            len: self.mask.len(),
            runs: self.runs().into_iter().map(|(s, l)| [s, l]).collect(),
        }
    }

    pub fn from_rle(rle: &RleMask) -> Result<NodeSet> {
        let mut mask = vec![false; rle.len];
        for &[start, len] in &rle.runs {
            let end = start.checked_add(len).filter(|e| *e <= rle.len);
            let end = end.ok_or_else(|| Error::invalid("run exceeds mask length"))?;
            mask[start..end].iter_mut().for_each(|b| *b = true);
        }
        Ok(NodeSet { mask, name: rle.name.clone(), mesh_id: rle.mesh })
    }
}

/// Run-length-encoded mask as written to JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub name: String,
    pub mesh: MeshId,
    pub len: usize,
    pub runs: Vec<[usize; 2]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetOp {
    Union,
    Intersect,
    Difference,
    Subset,
    Equal,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SetResult {
    Set(NodeSet),
    Bool(bool),
}

pub fn set_algebra(op: SetOp, a: &NodeSet, b: &NodeSet) -> Result<SetResult> {
    Ok(match op {
        SetOp::Union => SetResult::Set(a.union(b)?),
        SetOp::Intersect => SetResult::Set(a.intersect(b)?),
        SetOp::Difference => SetResult::Set(a.difference(b)?),
        SetOp::Subset => SetResult::Bool(a.is_subset(b)?),
        SetOp::Equal => SetResult::Bool(a.same_nodes(b)?),
    })
}

/// Nodes of `e` that share a triangle with a node outside `e`.
pub fn discrete_boundary(e: &NodeSet, mesh: &Mesh) -> Result<NodeSet> {
    if e.mesh_id != mesh.id() {
        return Err(Error::MeshMismatch);
    }
    let tris = mesh.triangles();
    let mask = (0..mesh.num_nodes())
        .map(|k| {
            e.mask[k]
                && mesh
                    .triangles_of(k)
                    .iter()
                    .any(|&t| tris[t].iter().any(|&v| !e.mask[v]))
        })
        .collect();
    Ok(NodeSet { mask, name: format!("bd({})", e.name), mesh_id: e.mesh_id })
}

/// A compatible `(E, F)` pair: `E` is contained in `F`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidatedPair {
    pub e: NodeSet,
    pub f: NodeSet,
    pub free_nodes: usize,
    /// `F` reaches the edge of the square, where the discrete problem
    /// carries a natural zero-flux condition instead of `u = 0`.
    pub touches_outer_boundary: bool,
}

pub fn validate_pair(e: &NodeSet, f: &NodeSet, mesh: &Mesh) -> Result<ValidatedPair> {
    if e.mesh_id != mesh.id() || f.mesh_id != mesh.id() {
        return Err(Error::MeshMismatch);
    }
    if !e.is_subset(f)? {
        let outside = e.difference(f)?.len();
        return Err(Error::Incompatible(format!(
            "{} has {outside} node(s) outside {}",
            e.name, f.name
        )));
    }
    let free_nodes = f.difference(e)?.len();
    let touches_outer_boundary = f.indices().any(|k| mesh.on_outer_boundary(k));
    Ok(ValidatedPair { e: e.clone(), f: f.clone(), free_nodes, touches_outer_boundary })
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// coordinate <= threshold
    Le,
    /// coordinate >= threshold
    Ge,
}

/// Geometric predicate over the square, serialized as nested
/// `{"disk": {...}}` / `{"union": [...]}` objects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeExpr {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Halfplane { axis: Axis, threshold: f64, side: Side },
    All,
    #[serde(rename = "none")]
    Empty,
    Union(Vec<ShapeExpr>),
    Intersect(Vec<ShapeExpr>),
    Difference(Box<ShapeExpr>, Box<ShapeExpr>),
    Complement(Box<ShapeExpr>),
}

impl ShapeExpr {
    pub fn disk(cx: f64, cy: f64, r: f64) -> Self {
        ShapeExpr::Disk { cx, cy, r }
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        ShapeExpr::Rect { x0, y0, x1, y1 }
    }

    pub fn halfplane(axis: Axis, threshold: f64, side: Side) -> Self {
        ShapeExpr::Halfplane { axis, threshold, side }
    }

    /// Checks coordinates against `[0, L]` and primitive well-formedness.
    pub fn validate(&self, l: f64) -> Result<()> {
        let inside = |v: f64| v.is_finite() && (0.0..=l).contains(&v);
        match self {
            ShapeExpr::Disk { cx, cy, r } => {
                if !(inside(*cx) && inside(*cy) && r.is_finite() && *r >= 0.0) {
                    return Err(Error::invalid(format!("bad disk ({cx}, {cy}, {r})")));
                }
            }
            ShapeExpr::Rect { x0, y0, x1, y1 } => {
                if !([x0, y0, x1, y1].iter().all(|v| inside(**v)) && x0 <= x1 && y0 <= y1) {
                    return Err(Error::invalid(format!("bad rect ({x0}, {y0}, {x1}, {y1})")));
                }
            }
            ShapeExpr::Halfplane { threshold, .. } => {
                if !inside(*threshold) {
                    return Err(Error::invalid(format!("halfplane threshold {threshold} outside [0, {l}]")));
                }
            }
            ShapeExpr::All | ShapeExpr::Empty => {}
            ShapeExpr::Union(v) | ShapeExpr::Intersect(v) => v.iter().try_for_each(|s| s.validate(l))?,
            ShapeExpr::Difference(a, b) => {
                a.validate(l)?;
                b.validate(l)?;
            }
            ShapeExpr::Complement(a) => a.validate(l)?,
        }
        Ok(())
    }

    /// Closed-inequality membership test with a `1e-12 L` round-off allowance.
    pub fn contains(&self, x: Vec2, l: f64) -> bool {
        let tol = 1e-12 * l;
        match self {
            ShapeExpr::Disk { cx, cy, r } => (x.x - cx).hypot(x.y - cy) <= r + tol,
            ShapeExpr::Rect { x0, y0, x1, y1 } => {
                x.x >= x0 - tol && x.x <= x1 + tol && x.y >= y0 - tol && x.y <= y1 + tol
            }
            ShapeExpr::Halfplane { axis, threshold, side } => {
                let c = match axis {
                    Axis::X => x.x,
                    Axis::Y => x.y,
                };
                match side {
                    Side::Le => c <= threshold + tol,
                    Side::Ge => c >= threshold - tol,
                }
            }
            ShapeExpr::All => true,
            ShapeExpr::Empty => false,
            ShapeExpr::Union(v) => v.iter().any(|s| s.contains(x, l)),
            ShapeExpr::Intersect(v) => v.iter().all(|s| s.contains(x, l)),
            ShapeExpr::Difference(a, b) => a.contains(x, l) && !b.contains(x, l),
            ShapeExpr::Complement(a) => !a.contains(x, l),
        }
    }
}

/// Node-level rasterization of `shape`.
pub fn rasterize(shape: &ShapeExpr, mesh: &Mesh, name: &str) -> NodeSet {
    let l = mesh.side_length();
    let mask = mesh.nodes().iter().map(|x| shape.contains(*x, l)).collect();
    NodeSet { mask, name: name.to_string(), mesh_id: mesh.id() }
}
