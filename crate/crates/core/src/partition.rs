//! Box decomposition of a structured mesh, interface equivalence classes,
//! interior/dual/primal index sets and the change of basis that turns edge
//! and face averages into explicit primal unknowns.
//!
//! Interface vectors are indexed by "interface positions": position
//! `f * n_gamma + p` holds field `f` at the `p`-th interface node (nodes in
//! increasing global order). Transformed vectors reuse the same layout; inside
//! an averaged group the first position carries the average.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mesh;

pub const FIELDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrimalConfig {
    /// Subdomain vertices only.
    #[serde(rename = "v")]
    V,
    /// Vertices plus edge averages.
    #[serde(rename = "ve")]
    VE,
    /// Vertices plus edge and face averages.
    #[serde(rename = "vef")]
    VEF,
}

impl PrimalConfig {
    pub const ALL: [PrimalConfig; 3] = [PrimalConfig::V, PrimalConfig::VE, PrimalConfig::VEF];

    fn averages(&self, kind: ClassKind) -> bool {
        matches!(
            (self, kind),
            (PrimalConfig::VE, ClassKind::Edge)
                | (PrimalConfig::VEF, ClassKind::Edge)
                | (PrimalConfig::VEF, ClassKind::Face)
        )
    }
}

impl fmt::Display for PrimalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrimalConfig::V => "V",
            PrimalConfig::VE => "V+E",
            PrimalConfig::VEF => "V+E+F",
        })
    }
}

impl FromStr for PrimalConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('+', "").as_str() {
            "v" => Ok(PrimalConfig::V),
            "ve" => Ok(PrimalConfig::VE),
            "vef" => Ok(PrimalConfig::VEF),
            _ => Err(Error::Config(format!("unknown primal space '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassKind {
    Face,
    Edge,
    Vertex,
}

/// Interface nodes sharing the same set of subdomains.
#[derive(Debug, Clone)]
pub struct InterfaceClass {
    pub kind: ClassKind,
    pub sharers: Vec<usize>,
    /// Global node ids, increasing.
    pub nodes: Vec<usize>,
}

/// A set of interface positions of one field whose mean becomes a primal unknown.
#[derive(Debug, Clone)]
pub struct AvgGroup {
    pub class: usize,
    pub field: usize,
    /// Global interface positions, in increasing node order.
    pub positions: Vec<usize>,
    /// T = [1 | Q], with Q orthonormal and orthogonal to the constants.
    pub t: DMatrix<f64>,
}

impl AvgGroup {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Role of an interface position in the transformed basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primal(usize),
    Dual,
}

#[derive(Debug, Clone)]
pub struct Subdomain {
    pub id: usize,
    pub coords: [usize; 3],
    /// Element index ranges [lo, hi) per direction.
    pub elem_lo: [usize; 3],
    pub elem_hi: [usize; 3],
    pub elems: Vec<usize>,
    /// Global node ids; local node index = position.
    pub nodes: Vec<usize>,
    /// Local dofs (field-major over local nodes) not on the interface.
    pub interior_dofs: Vec<usize>,
    /// Local dofs on the interface, in local interface-position order.
    pub gamma_dofs: Vec<usize>,
    /// Global interface position of each local interface position.
    pub gamma_global: Vec<usize>,
    /// Averaged groups touching this subdomain: (group id, local positions).
    pub groups: Vec<(usize, Vec<usize>)>,
    /// Local interface positions with a dual role, and their class.
    pub dual: Vec<(usize, usize)>,
    /// Local interface positions with a primal role, and the primal index.
    pub primal: Vec<(usize, usize)>,
}

impl Subdomain {
    pub fn n_local_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_local_dofs(&self) -> usize {
        FIELDS * self.nodes.len()
    }

    pub fn n_gamma(&self) -> usize {
        self.gamma_dofs.len()
    }

    /// Map from global node id to local index (usize::MAX when absent).
    pub fn node_map(&self, n_global: usize) -> Vec<usize> {
        let mut map = vec![usize::MAX; n_global];
        for (l, &g) in self.nodes.iter().enumerate() {
            map[g] = l;
        }
        map
    }

    /// Local field-major dof vector from a global field-major vector.
    pub fn gather(&self, global: &[f64]) -> Vec<f64> {
        let n = global.len() / FIELDS;
        let mut out = Vec::with_capacity(self.n_local_dofs());
        for f in 0..FIELDS {
            out.extend(self.nodes.iter().map(|&g| global[f * n + g]));
        }
        out
    }

    /// Restriction of a global interface vector to this subdomain.
    pub fn restrict_gamma(&self, global: &[f64]) -> Vec<f64> {
        self.gamma_global.iter().map(|&g| global[g]).collect()
    }

    /// global += R_Γᵀ local
    pub fn extend_gamma_add(&self, local: &[f64], global: &mut [f64]) {
        for (&g, &v) in self.gamma_global.iter().zip(local) {
            global[g] += v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub grid: [usize; 3],
    /// Elements per subdomain in each direction.
    pub local: [usize; 3],
    pub mesh_dims: [usize; 3],
    pub n_nodes: usize,
    pub primal_config: PrimalConfig,
    pub subdomains: Vec<Subdomain>,
    pub classes: Vec<InterfaceClass>,
    /// Interface nodes in increasing order.
    pub gamma_nodes: Vec<usize>,
    /// Class of each interface node (indexed like `gamma_nodes`).
    pub gamma_class: Vec<usize>,
    /// Subdomain vertices: interface nodes on a box corner.
    pub corners: Vec<usize>,
    pub groups: Vec<AvgGroup>,
    /// Role of each global interface position.
    pub roles: Vec<Role>,
    pub n_primal: usize,
    /// Subdomain diameter (largest over subdomains).
    pub h_sub: f64,
}

fn direction_sharers(i: usize, l: usize, p: usize, n: usize) -> Vec<usize> {
    if i % l == 0 && i > 0 && i < n {
        vec![i / l - 1, i / l]
    } else {
        vec![(i / l).min(p - 1)]
    }
}

/// Orthonormal Householder completion: returns T = [1 | Q] for size m.
pub fn average_basis(m: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(m, m);
    if m == 0 {
        return t;
    }
    let u = 1.0 / (m as f64).sqrt();
    // H = I - 2 v vᵀ / (vᵀv) with v = e1 - u·1 maps e1 to u·1
    let mut v = vec![-u; m];
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    for r in 0..m {
        t[(r, 0)] = 1.0;
        for c in 1..m {
            let id = if r == c { 1.0 } else { 0.0 };
            t[(r, c)] = if vv > 0.0 { id - 2.0 * v[r] * v[c] / vv } else { id };
        }
    }
    t
}

impl Decomposition {
    pub fn new(mesh: &Mesh, grid: [usize; 3], primal: PrimalConfig) -> Result<Self> {
        let dims = mesh.dims();
        for d in 0..3 {
            if grid[d] == 0 || dims[d] % grid[d] != 0 {
                return Err(Error::Partition(format!(
                    "{} subdomains do not tile {} elements in direction {d}",
                    grid[d], dims[d]
                )));
            }
        }
        let local = [dims[0] / grid[0], dims[1] / grid[1], dims[2] / grid[2]];
        let sub_id = |c: [usize; 3]| c[0] + grid[0] * (c[1] + grid[1] * c[2]);
        let n_nodes = mesh.n_nodes();

        // sharing sets and classes
        let mut class_of_set: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        let mut classes: Vec<InterfaceClass> = Vec::new();
        let mut gamma_nodes = Vec::new();
        let mut gamma_class = Vec::new();
        let mut corners = Vec::new();
        for n in 0..n_nodes {
            let ijk = mesh.node_ijk(n);
            let per_dir: Vec<Vec<usize>> = (0..3)
                .map(|d| direction_sharers(ijk[d], local[d], grid[d], dims[d]))
                .collect();
            let cuts = per_dir.iter().filter(|s| s.len() == 2).count();
            if cuts == 0 {
                continue;
            }
            let mut set = Vec::new();
            for &a in &per_dir[0] {
                for &b in &per_dir[1] {
                    for &c in &per_dir[2] {
                        set.push(sub_id([a, b, c]));
                    }
                }
            }
            set.sort_unstable();
            let next = classes.len();
            let cid = *class_of_set.entry(set.clone()).or_insert(next);
            if cid == next {
                let kind = match cuts {
                    1 => ClassKind::Face,
                    2 => ClassKind::Edge,
                    _ => ClassKind::Vertex,
                };
                classes.push(InterfaceClass {
                    kind,
                    sharers: set,
                    nodes: Vec::new(),
                });
            }
            classes[cid].nodes.push(n);
            gamma_nodes.push(n);
            gamma_class.push(cid);
            if (0..3).all(|d| ijk[d] % local[d] == 0) {
                corners.push(n);
            }
        }
        // renumber classes in the BTreeMap order so ids do not depend on traversal
        let order: Vec<usize> = class_of_set.values().cloned().collect();
        let mut new_id = vec![0; classes.len()];
        for (k, &old) in order.iter().enumerate() {
            new_id[old] = k;
        }
        let mut sorted: Vec<Option<InterfaceClass>> = vec![None; classes.len()];
        for (old, c) in classes.into_iter().enumerate() {
            sorted[new_id[old]] = Some(c);
        }
        let classes: Vec<InterfaceClass> = sorted.into_iter().map(|c| c.unwrap()).collect();
        for c in gamma_class.iter_mut() {
            *c = new_id[*c];
        }

        let n_gamma = gamma_nodes.len();
        let mut gamma_pos = vec![usize::MAX; n_nodes];
        for (p, &g) in gamma_nodes.iter().enumerate() {
            gamma_pos[g] = p;
        }
        let is_corner = {
            let mut v = vec![false; n_nodes];
            for &c in &corners {
                v[c] = true;
            }
            v
        };

        // roles and averaged groups
        let mut roles = vec![Role::Dual; FIELDS * n_gamma];
        let nc = corners.len();
        for (ci, &c) in corners.iter().enumerate() {
            for f in 0..FIELDS {
                roles[f * n_gamma + gamma_pos[c]] = Role::Primal(f * nc + ci);
            }
        }
        let mut n_primal = FIELDS * nc;
        let mut groups = Vec::new();
        let mut basis_cache: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        for (cid, class) in classes.iter().enumerate() {
            if !primal.averages(class.kind) {
                continue;
            }
            let free: Vec<usize> = class.nodes.iter().cloned().filter(|&n| !is_corner[n]).collect();
            if free.is_empty() {
                continue;
            }
            let t = basis_cache
                .entry(free.len())
                .or_insert_with(|| average_basis(free.len()))
                .clone();
            for f in 0..FIELDS {
                let positions: Vec<usize> = free.iter().map(|&n| f * n_gamma + gamma_pos[n]).collect();
                roles[positions[0]] = Role::Primal(n_primal);
                n_primal += 1;
                groups.push(AvgGroup {
                    class: cid,
                    field: f,
                    positions,
                    t: t.clone(),
                });
            }
        }

        // subdomains
        let mut subdomains = Vec::new();
        let mut h_sub: f64 = 0.0;
        for cz in 0..grid[2] {
            for cy in 0..grid[1] {
                for cx in 0..grid[0] {
                    let c = [cx, cy, cz];
                    let id = sub_id(c);
                    let lo = [cx * local[0], cy * local[1], cz * local[2]];
                    let hi = [lo[0] + local[0], lo[1] + local[1], lo[2] + local[2]];
                    let mut elems = Vec::with_capacity(local.iter().product());
                    for k in lo[2]..hi[2] {
                        for j in lo[1]..hi[1] {
                            for i in lo[0]..hi[0] {
                                elems.push(mesh.elem_index(i, j, k));
                            }
                        }
                    }
                    let mut nodes = Vec::new();
                    for k in lo[2]..=hi[2] {
                        for j in lo[1]..=hi[1] {
                            for i in lo[0]..=hi[0] {
                                nodes.push(mesh.node_index(i, j, k));
                            }
                        }
                    }
                    let nl = nodes.len();
                    let local_gamma: Vec<usize> = (0..nl).filter(|&l| gamma_pos[nodes[l]] != usize::MAX).collect();
                    let ng = local_gamma.len();
                    let mut interior_dofs = Vec::new();
                    let mut gamma_dofs = Vec::new();
                    let mut gamma_global = Vec::new();
                    for f in 0..FIELDS {
                        for l in 0..nl {
                            if gamma_pos[nodes[l]] == usize::MAX {
                                interior_dofs.push(f * nl + l);
                            }
                        }
                        for &l in &local_gamma {
                            gamma_dofs.push(f * nl + l);
                            gamma_global.push(f * n_gamma + gamma_pos[nodes[l]]);
                        }
                    }
                    let mut global_to_local = BTreeMap::new();
                    for (q, &g) in gamma_global.iter().enumerate() {
                        global_to_local.insert(g, q);
                    }
                    let mut sub_groups = Vec::new();
                    for (gid, grp) in groups.iter().enumerate() {
                        if classes[grp.class].sharers.binary_search(&id).is_ok() {
                            let pos = grp.positions.iter().map(|g| global_to_local[g]).collect();
                            sub_groups.push((gid, pos));
                        }
                    }
                    let mut dual = Vec::new();
                    let mut prim = Vec::new();
                    for (q, &g) in gamma_global.iter().enumerate() {
                        match roles[g] {
                            Role::Primal(p) => prim.push((q, p)),
                            Role::Dual => dual.push((q, gamma_class[g % n_gamma])),
                        }
                    }
                    debug_assert_eq!(ng * FIELDS, gamma_dofs.len());
                    let corner_pts: Vec<[f64; 3]> = [
                        [lo[0], lo[1], lo[2]],
                        [hi[0], hi[1], hi[2]],
                        [hi[0], lo[1], lo[2]],
                        [lo[0], hi[1], hi[2]],
                        [lo[0], hi[1], lo[2]],
                        [hi[0], lo[1], hi[2]],
                        [lo[0], lo[1], hi[2]],
                        [hi[0], hi[1], lo[2]],
                    ]
                    .iter()
                    .map(|p| mesh.coords()[mesh.node_index(p[0], p[1], p[2])])
                    .collect();
                    for a in 0..8 {
                        for b in a + 1..8 {
                            let d: f64 = (0..3).map(|k| (corner_pts[a][k] - corner_pts[b][k]).powi(2)).sum();
                            h_sub = h_sub.max(d.sqrt());
                        }
                    }
                    subdomains.push(Subdomain {
                        id,
                        coords: c,
                        elem_lo: lo,
                        elem_hi: hi,
                        elems,
                        nodes,
                        interior_dofs,
                        gamma_dofs,
                        gamma_global,
                        groups: sub_groups,
                        dual,
                        primal: prim,
                    });
                }
            }
        }
        Ok(Self {
            grid,
            local,
            mesh_dims: dims,
            n_nodes,
            primal_config: primal,
            subdomains,
            classes,
            gamma_nodes,
            gamma_class,
            corners,
            groups,
            roles,
            n_primal,
            h_sub,
        })
    }

    pub fn n_subdomains(&self) -> usize {
        self.subdomains.len()
    }

    pub fn n_gamma_nodes(&self) -> usize {
        self.gamma_nodes.len()
    }

    /// Length of a global interface vector (three fields).
    pub fn n_gamma(&self) -> usize {
        FIELDS * self.gamma_nodes.len()
    }

    /// Ratio H/h measured in elements (largest over directions).
    pub fn h_ratio(&self) -> usize {
        *self.local.iter().max().unwrap()
    }

    pub fn class_counts(&self) -> (usize, usize, usize) {
        let count = |k| self.classes.iter().filter(|c| c.kind == k).count();
        (count(ClassKind::Face), count(ClassKind::Edge), count(ClassKind::Vertex))
    }

    /// Number of subdomains sharing each global interface position.
    pub fn multiplicity(&self) -> Vec<usize> {
        let ng = self.n_gamma_nodes();
        (0..self.n_gamma())
            .map(|g| self.classes[self.gamma_class[g % ng]].sharers.len())
            .collect()
    }

    /// Class id of a global interface position.
    pub fn class_of_position(&self, g: usize) -> usize {
        self.gamma_class[g % self.n_gamma_nodes()]
    }

    /// Global interface vector from a global field-major nodal vector.
    pub fn gather_gamma(&self, global: &[f64]) -> Vec<f64> {
        let n = self.n_nodes;
        let mut out = Vec::with_capacity(self.n_gamma());
        for f in 0..FIELDS {
            out.extend(self.gamma_nodes.iter().map(|&g| global[f * n + g]));
        }
        out
    }

    /// Writes a global interface vector into a field-major nodal vector.
    pub fn scatter_gamma(&self, gamma: &[f64], global: &mut [f64]) {
        let n = self.n_nodes;
        let ng = self.n_gamma_nodes();
        for f in 0..FIELDS {
            for (p, &g) in self.gamma_nodes.iter().enumerate() {
                global[f * n + g] = gamma[f * ng + p];
            }
        }
    }

    /// x = T x̂ on a global interface vector (in place).
    pub fn t_apply(&self, x: &mut [f64]) {
        for grp in &self.groups {
            apply_group(&grp.t, &grp.positions, x, false);
        }
    }

    /// x̂ = Tᵀ x on a global interface vector (in place).
    pub fn t_apply_transpose(&self, x: &mut [f64]) {
        for grp in &self.groups {
            apply_group(&grp.t, &grp.positions, x, true);
        }
    }

    /// Local T x̂ for subdomain `j` on a local interface vector.
    pub fn t_apply_local(&self, j: usize, x: &mut [f64]) {
        for (gid, pos) in &self.subdomains[j].groups {
            apply_group(&self.groups[*gid].t, pos, x, false);
        }
    }

    /// Local Tᵀ x for subdomain `j` on a local interface vector.
    pub fn t_apply_transpose_local(&self, j: usize, x: &mut [f64]) {
        for (gid, pos) in &self.subdomains[j].groups {
            apply_group(&self.groups[*gid].t, pos, x, true);
        }
    }

    /// Primal deflation vector: one on potential-field primal unknowns.
    pub fn primal_kernel(&self) -> Vec<f64> {
        let mut k = vec![0.0; self.n_primal];
        let ng = self.n_gamma_nodes();
        for (g, role) in self.roles.iter().enumerate() {
            if let Role::Primal(p) = role {
                if g / ng < 2 {
                    k[*p] = 1.0;
                }
            }
        }
        k
    }
}

fn apply_group(t: &DMatrix<f64>, pos: &[usize], x: &mut [f64], transpose: bool) {
    let m = pos.len();
    if m <= 1 {
        return;
    }
    let v: Vec<f64> = pos.iter().map(|&p| x[p]).collect();
    for (r, &p) in pos.iter().enumerate() {
        x[p] = (0..m)
            .map(|c| if transpose { t[(c, r)] } else { t[(r, c)] } * v[c])
            .sum();
    }
}
