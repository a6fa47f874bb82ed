//! Linear finite elements for `-div(exp(kappa) grad u) = f` with element-wise
//! constant `kappa`, the Gaussian observation model, adjoint gradients and
//! the boundary-flux quantity of interest.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{reverse_cuthill_mckee, AdjacencyGraph};
use crate::likelihood::LogLikelihood;
use crate::linalg::{BandCholesky, LowerBand};
use crate::mesh::{BoundaryFacet, ElementKind, Mesh, Point};

const QUAD_REF: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
const GAUSS: f64 = 0.577_350_269_189_625_8;

/// Dense local matrix of at most four nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMatrix {
    pub n: usize,
    pub a: [f64; 16],
}

impl LocalMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * 4 + j]
    }
}

/// Unit-coefficient stiffness matrices and load integrals `∫ φ_i` per element.
#[derive(Debug, Clone)]
pub struct ElementCache {
    stiffness: Vec<LocalMatrix>,
    loads: Vec<[f64; 4]>,
}

impl ElementCache {
    pub fn stiffness(&self, e: usize) -> &LocalMatrix {
        &self.stiffness[e]
    }

    pub fn load(&self, e: usize) -> &[f64; 4] {
        &self.loads[e]
    }
}

pub fn precompute_element_matrices(mesh: &Mesh) -> Result<ElementCache> {
    let mut stiffness = Vec::with_capacity(mesh.num_elements());
    let mut loads = Vec::with_capacity(mesh.num_elements());
    for (e, el) in mesh.elements().iter().enumerate() {
        let x: Vec<Point> = el.nodes.iter().map(|&n| mesh.coords()[n]).collect();
        let mut m = LocalMatrix { n: el.nodes.len(), a: [0.0; 16] };
        let mut load = [0.0; 4];
        match el.kind {
            ElementKind::Segment2 => {
                let h = x[1][0] - x[0][0];
                if !(h.abs() > 1e-14) {
                    return Err(Error::DegenerateElement { index: e, measure: h });
                }
                let k = 1.0 / h.abs();
                m.a[0] = k;
                m.a[1] = -k;
                m.a[4] = -k;
                m.a[5] = k;
                load[0] = 0.5 * h.abs();
                load[1] = 0.5 * h.abs();
            }
            ElementKind::Triangle3 => {
                let (grads, area) = triangle_gradients(&x);
                if !(area > 1e-14) {
                    return Err(Error::DegenerateElement { index: e, measure: area });
                }
                for i in 0..3 {
                    for j in 0..3 {
                        m.a[i * 4 + j] = area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    }
                    load[i] = area / 3.0;
                }
            }
            ElementKind::Quad4 => {
                for &xi in &[-GAUSS, GAUSS] {
                    for &eta in &[-GAUSS, GAUSS] {
                        let (grads, det) = quad_gradients(&x, xi, eta);
                        if !(det.abs() > 1e-14) {
                            return Err(Error::DegenerateElement { index: e, measure: det });
                        }
                        let w = det.abs();
                        let n = quad_shape(xi, eta);
                        for i in 0..4 {
                            for j in 0..4 {
                                m.a[i * 4 + j] += w * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                            }
                            load[i] += w * n[i];
                        }
                    }
                }
            }
        }
        stiffness.push(m);
        loads.push(load);
    }
    Ok(ElementCache { stiffness, loads })
}

/// Gradients of the barycentric basis and the triangle area.
fn triangle_gradients(x: &[Point]) -> ([[f64; 2]; 3], f64) {
    let det = (x[1][0] - x[0][0]) * (x[2][1] - x[0][1]) - (x[2][0] - x[0][0]) * (x[1][1] - x[0][1]);
    let b = [x[1][1] - x[2][1], x[2][1] - x[0][1], x[0][1] - x[1][1]];
    let c = [x[2][0] - x[1][0], x[0][0] - x[2][0], x[1][0] - x[0][0]];
    let mut g = [[0.0; 2]; 3];
    for i in 0..3 {
        g[i] = [b[i] / det, c[i] / det];
    }
    (g, 0.5 * det.abs())
}

fn quad_shape(xi: f64, eta: f64) -> [f64; 4] {
    let mut n = [0.0; 4];
    for i in 0..4 {
        n[i] = 0.25 * (1.0 + xi * QUAD_REF[i][0]) * (1.0 + eta * QUAD_REF[i][1]);
    }
    n
}

/// Physical basis gradients and Jacobian determinant of a bilinear quad.
fn quad_gradients(x: &[Point], xi: f64, eta: f64) -> ([[f64; 2]; 4], f64) {
    let mut dref = [[0.0; 2]; 4];
    for i in 0..4 {
        let [si, ti] = QUAD_REF[i];
        dref[i] = [0.25 * si * (1.0 + eta * ti), 0.25 * ti * (1.0 + xi * si)];
    }
    // jac[a][b] = d x_a / d ref_b
    let mut jac = [[0.0; 2]; 2];
    for i in 0..4 {
        for a in 0..2 {
            for b in 0..2 {
                jac[a][b] += x[i][a] * dref[i][b];
            }
        }
    }
    let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
    let mut g = [[0.0; 2]; 4];
    for i in 0..4 {
        // grad = J^{-T} dref
        g[i][0] = (jac[1][1] * dref[i][0] - jac[1][0] * dref[i][1]) / det;
        g[i][1] = (-jac[0][1] * dref[i][0] + jac[0][0] * dref[i][1]) / det;
    }
    (g, det)
}

/// The forward problem on a fixed mesh with a constant source.
///
/// The unknown `kappa` may be coarser than the mesh: `coefficient_map[e]`
/// names the parameter that sets the log-conductivity of element `e`.
#[derive(Debug, Clone)]
pub struct Poisson {
    mesh: Mesh,
    cache: ElementCache,
    source: f64,
    coefficient_map: Vec<usize>,
    n_params: usize,
    // band position -> node, and node -> band position
    free: Vec<usize>,
    slot: Vec<Option<usize>>,
    bw: usize,
    dirichlet_nodes: Vec<usize>,
    dirichlet_values: Vec<f64>,
}

/// Nodal solution together with the factorisation that produced it.
#[derive(Debug, Clone)]
pub struct Solution {
    pub u: Vec<f64>,
    element_kappa: Vec<f64>,
    chol: BandCholesky,
}

impl Solution {
    pub fn element_kappa(&self) -> &[f64] {
        &self.element_kappa
    }
}

impl Poisson {
    /// One parameter per element.
    pub fn new(mesh: Mesh, source: f64) -> Result<Self> {
        let n = mesh.num_elements();
        Self::with_coefficient_map(mesh, source, (0..n).collect(), n)
    }

    pub fn with_coefficient_map(
        mesh: Mesh,
        source: f64,
        coefficient_map: Vec<usize>,
        n_params: usize,
    ) -> Result<Self> {
        if coefficient_map.len() != mesh.num_elements() {
            return Err(Error::dims("coefficient map", mesh.num_elements(), coefficient_map.len()));
        }
        if let Some(&bad) = coefficient_map.iter().find(|&&p| p >= n_params) {
            return Err(Error::Config(format!("coefficient map refers to parameter {bad} of {n_params}")));
        }
        if mesh.dirichlet().is_empty() {
            return Err(Error::SingularSystem("no Dirichlet nodes, the stiffness matrix is singular".into()));
        }
        if !source.is_finite() {
            return Err(Error::NonFinite("source term"));
        }
        let cache = precompute_element_matrices(&mesh)?;

        let nn = mesh.num_nodes();
        let natural: Vec<usize> = (0..nn).filter(|n| !mesh.dirichlet().contains_key(n)).collect();
        let mut index = vec![usize::MAX; nn];
        for (k, &n) in natural.iter().enumerate() {
            index[n] = k;
        }
        let mut edges = Vec::new();
        for el in mesh.elements() {
            for &a in &el.nodes {
                for &b in &el.nodes {
                    if a < b && index[a] != usize::MAX && index[b] != usize::MAX {
                        edges.push((index[a], index[b]));
                    }
                }
            }
        }
        let graph = AdjacencyGraph::from_edges(natural.len(), &edges);
        let profile = reverse_cuthill_mckee(&graph);
        let free: Vec<usize> = profile.permutation.iter().map(|&k| natural[k]).collect();
        let mut slot = vec![None; nn];
        for (p, &n) in free.iter().enumerate() {
            slot[n] = Some(p);
        }
        let (dirichlet_nodes, dirichlet_values) = mesh.dirichlet().iter().map(|(&n, &v)| (n, v)).unzip();
        Ok(Poisson {
            mesh,
            cache,
            source,
            coefficient_map,
            n_params,
            free,
            slot,
            bw: profile.bandwidth,
            dirichlet_nodes,
            dirichlet_values,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn cache(&self) -> &ElementCache {
        &self.cache
    }

    pub fn source(&self) -> f64 {
        self.source
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn coefficient_map(&self) -> &[usize] {
        &self.coefficient_map
    }

    /// Free nodes in ascending order.
    pub fn free_nodes(&self) -> Vec<usize> {
        let mut f = self.free.clone();
        f.sort_unstable();
        f
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    /// Half-bandwidth of the reordered free-node system.
    pub fn system_bandwidth(&self) -> usize {
        self.bw
    }

    /// Dirichlet nodes in ascending order with their default values.
    pub fn dirichlet_nodes(&self) -> &[usize] {
        &self.dirichlet_nodes
    }

    pub fn dirichlet_values(&self) -> &[f64] {
        &self.dirichlet_values
    }

    pub fn element_kappa(&self, params: &[f64]) -> Result<Vec<f64>> {
        if params.len() != self.n_params {
            return Err(Error::dims("kappa", self.n_params, params.len()));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kappa"));
        }
        Ok(self.coefficient_map.iter().map(|&p| params[p]).collect())
    }

    pub fn solve(&self, params: &[f64]) -> Result<Solution> {
        self.solve_bc(params, &self.dirichlet_values)
    }

    /// Solve with the Dirichlet values overridden (same node order as
    /// [`Poisson::dirichlet_nodes`]).
    pub fn solve_bc(&self, params: &[f64], bc: &[f64]) -> Result<Solution> {
        if bc.len() != self.dirichlet_nodes.len() {
            return Err(Error::dims("Dirichlet values", self.dirichlet_nodes.len(), bc.len()));
        }
        let kappa = self.element_kappa(params)?;
        let mut u = vec![0.0; self.mesh.num_nodes()];
        for (&n, &v) in self.dirichlet_nodes.iter().zip(bc) {
            u[n] = v;
        }
        let nf = self.free.len();
        let mut a = LowerBand::zeros(nf, self.bw);
        let mut rhs = vec![0.0; nf];
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let k = kappa[e].exp();
            let m = &self.cache.stiffness[e];
            let load = &self.cache.loads[e];
            for (i, &ni) in el.nodes.iter().enumerate() {
                let Some(pi) = self.slot[ni] else { continue };
                rhs[pi] += self.source * load[i];
                for (j, &nj) in el.nodes.iter().enumerate() {
                    match self.slot[nj] {
                        Some(pj) if pj <= pi => a.add_sym(pi, pj, k * m.get(i, j)),
                        Some(_) => {}
                        None => rhs[pi] -= k * m.get(i, j) * u[nj],
                    }
                }
            }
        }
        let chol = a.into_cholesky()?;
        chol.solve_in_place(&mut rhs);
        for (p, &n) in self.free.iter().enumerate() {
            u[n] = rhs[p];
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("FEM solution"));
        }
        Ok(Solution { u, element_kappa: kappa, chol })
    }

    /// `A u` restricted to free nodes minus the load, in natural free-node
    /// order, together with the load. Used to check solver residuals.
    pub fn residual(&self, sol: &Solution) -> (Vec<f64>, Vec<f64>) {
        let nn = self.mesh.num_nodes();
        let mut au = vec![0.0; nn];
        let mut f = vec![0.0; nn];
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let k = sol.element_kappa[e].exp();
            let m = &self.cache.stiffness[e];
            for (i, &ni) in el.nodes.iter().enumerate() {
                f[ni] += self.source * self.cache.loads[e][i];
                for (j, &nj) in el.nodes.iter().enumerate() {
                    au[ni] += k * m.get(i, j) * sol.u[nj];
                }
            }
        }
        let free = self.free_nodes();
        (free.iter().map(|&n| au[n] - f[n]).collect(), free.iter().map(|&n| f[n]).collect())
    }

    /// Log-likelihood with gradients with respect to the parameters and to
    /// the Dirichlet values, by one adjoint solve reusing the factorisation.
    pub fn adjoint_gradient(&self, sol: &Solution, obs: &ObservationModel) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if sol.u.len() != obs.n_nodes {
            return Err(Error::dims("solution vector", obs.n_nodes, sol.u.len()));
        }
        let ll = obs.log_likelihood(&sol.u)?;
        let s = obs.misfit_gradient(&sol.u)?;
        let mut lambda = vec![0.0; self.free.len()];
        for (p, &n) in self.free.iter().enumerate() {
            lambda[p] = s[n];
        }
        sol.chol.solve_in_place(&mut lambda);
        let mut lam_node = vec![0.0; self.mesh.num_nodes()];
        for (p, &n) in self.free.iter().enumerate() {
            lam_node[n] = lambda[p];
        }
        let mut grad = vec![0.0; self.n_params];
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let k = sol.element_kappa[e].exp();
            let m = &self.cache.stiffness[e];
            let mut acc = 0.0;
            for (i, &ni) in el.nodes.iter().enumerate() {
                if lam_node[ni] == 0.0 {
                    continue;
                }
                let mut au = 0.0;
                for (j, &nj) in el.nodes.iter().enumerate() {
                    au += m.get(i, j) * sol.u[nj];
                }
                acc += lam_node[ni] * au;
            }
            grad[self.coefficient_map[e]] -= k * acc;
        }
        // d/du_d: direct term minus lambda^T A_fd
        let mut bc_grad: Vec<f64> = self.dirichlet_nodes.iter().map(|&n| s[n]).collect();
        let dpos: BTreeMap<usize, usize> = self.dirichlet_nodes.iter().enumerate().map(|(k, &n)| (n, k)).collect();
        for (e, el) in self.mesh.elements().iter().enumerate() {
            let k = sol.element_kappa[e].exp();
            let m = &self.cache.stiffness[e];
            for (j, nj) in el.nodes.iter().enumerate() {
                let Some(&d) = dpos.get(nj) else { continue };
                for (i, &ni) in el.nodes.iter().enumerate() {
                    bc_grad[d] -= lam_node[ni] * k * m.get(i, j);
                }
            }
        }
        Ok((ll, grad, bc_grad))
    }

    pub fn log_likelihood_and_grad(&self, params: &[f64], obs: &ObservationModel) -> Result<(f64, Vec<f64>)> {
        let sol = self.solve(params)?;
        let (ll, g, _) = self.adjoint_gradient(&sol, obs)?;
        Ok((ll, g))
    }

    /// `r = ln Σ exp(kappa_e) ∇u·n |facet|` over `facets`, with `n` the unit
    /// normal pointing into the owning element. For a positive source and
    /// zero boundary values this is the physical flux leaving the domain.
    pub fn boundary_flux(&self, params: &[f64], u: &[f64], facets: &[BoundaryFacet]) -> Result<f64> {
        let kappa = self.element_kappa(params)?;
        let total = self.boundary_flux_raw(&kappa, u, facets)?;
        if !(total > 0.0) {
            return Err(Error::NonPositiveFlux(total));
        }
        Ok(total.ln())
    }

    /// The flux integral before the logarithm, for element-level `kappa`.
    pub fn boundary_flux_raw(&self, kappa: &[f64], u: &[f64], facets: &[BoundaryFacet]) -> Result<f64> {
        if u.len() != self.mesh.num_nodes() {
            return Err(Error::dims("solution vector", self.mesh.num_nodes(), u.len()));
        }
        if kappa.len() != self.mesh.num_elements() {
            return Err(Error::dims("element kappa", self.mesh.num_elements(), kappa.len()));
        }
        let coords = self.mesh.coords();
        let mut total = 0.0;
        for f in facets {
            let el = self.mesh.element(f.element);
            let k = kappa[f.element].exp();
            let x: Vec<Point> = el.nodes.iter().map(|&n| coords[n]).collect();
            let ue: Vec<f64> = el.nodes.iter().map(|&n| u[n]).collect();
            match el.kind {
                ElementKind::Segment2 => {
                    let (a, b) = if f.nodes[0] == el.nodes[0] { (0, 1) } else { (1, 0) };
                    let h = (x[b][0] - x[a][0]).abs();
                    total += k * (ue[b] - ue[a]) / h;
                }
                ElementKind::Triangle3 => {
                    let (g, _) = triangle_gradients(&x);
                    let grad = [0, 1].map(|d| (0..3).map(|i| g[i][d] * ue[i]).sum::<f64>());
                    let (n, len) = inward_normal(coords[f.nodes[0]], coords[f.nodes[1]], self.mesh.centroids()[f.element]);
                    total += k * (grad[0] * n[0] + grad[1] * n[1]) * len;
                }
                ElementKind::Quad4 => {
                    let la = el.nodes.iter().position(|&n| n == f.nodes[0]).unwrap();
                    let lb = el.nodes.iter().position(|&n| n == f.nodes[1]).unwrap();
                    let (n, len) = inward_normal(coords[f.nodes[0]], coords[f.nodes[1]], self.mesh.centroids()[f.element]);
                    let (ra, rb) = (QUAD_REF[la], QUAD_REF[lb]);
                    for &t in &[-GAUSS, GAUSS] {
                        let s = 0.5 * (1.0 + t);
                        let xi = ra[0] + s * (rb[0] - ra[0]);
                        let eta = ra[1] + s * (rb[1] - ra[1]);
                        let (g, _) = quad_gradients(&x, xi, eta);
                        let grad = [0, 1].map(|d| (0..4).map(|i| g[i][d] * ue[i]).sum::<f64>());
                        total += k * (grad[0] * n[0] + grad[1] * n[1]) * 0.5 * len;
                    }
                }
            }
        }
        Ok(total)
    }
}

fn inward_normal(a: Point, b: Point, centroid: Point) -> ([f64; 2], f64) {
    let t = [b[0] - a[0], b[1] - a[1]];
    let len = t[0].hypot(t[1]);
    let mut n = [t[1] / len, -t[0] / len];
    let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])];
    if n[0] * (centroid[0] - mid[0]) + n[1] * (centroid[1] - mid[1]) < 0.0 {
        n = [-n[0], -n[1]];
    }
    (n, len)
}

/// Sensor rows, noise level and replicated data `y_1..y_{N_y}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    rows: Vec<Vec<(usize, f64)>>,
    sigma: f64,
    data: Vec<Vec<f64>>,
    n_nodes: usize,
}

impl ObservationModel {
    pub fn new(rows: Vec<Vec<(usize, f64)>>, n_nodes: usize, sigma: f64, data: Vec<Vec<f64>>) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("noise level must be positive, got {sigma}")));
        }
        for (r, row) in rows.iter().enumerate() {
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::Config(format!("sensor row {r} sums to {s}, expected 1")));
            }
            if let Some(&(bad, _)) = row.iter().find(|&&(n, _)| n >= n_nodes) {
                return Err(Error::dims("sensor node index bound", n_nodes, bad));
            }
        }
        for y in &data {
            if y.len() != rows.len() {
                return Err(Error::dims("observation replicate", rows.len(), y.len()));
            }
        }
        Ok(ObservationModel { rows, sigma, data, n_nodes })
    }

    /// One sensor at each listed node.
    pub fn nodal(nodes: &[usize], n_nodes: usize, sigma: f64, data: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(nodes.iter().map(|&n| vec![(n, 1.0)]).collect(), n_nodes, sigma, data)
    }

    /// Sensors at arbitrary points, interpolated with the element basis.
    pub fn at_points(mesh: &Mesh, points: &[Point], sigma: f64, data: Vec<Vec<f64>>) -> Result<Self> {
        let rows = points.iter().map(|&p| interpolation_row(mesh, p)).collect::<Result<Vec<_>>>()?;
        Self::new(rows, mesh.num_nodes(), sigma, data)
    }

    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.rows.clone(), self.n_nodes, self.sigma, data)
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.rows.clone(), self.n_nodes, sigma, self.data.clone())
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn n_y(&self) -> usize {
        self.rows.len()
    }

    pub fn n_replicates(&self) -> usize {
        self.data.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// `P u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|row| row.iter().map(|&(n, w)| w * u[n]).sum()).collect()
    }

    pub fn log_likelihood(&self, u: &[f64]) -> Result<f64> {
        if u.len() != self.n_nodes {
            return Err(Error::dims("solution vector", self.n_nodes, u.len()));
        }
        let pu = self.apply(u);
        let s2 = self.sigma * self.sigma;
        let norm = -0.5 * self.n_y() as f64 * (2.0 * std::f64::consts::PI * s2).ln();
        let mut total = 0.0;
        for y in &self.data {
            let r2: f64 = y.iter().zip(&pu).map(|(a, b)| (a - b) * (a - b)).sum();
            total += norm - 0.5 * r2 / s2;
        }
        Ok(total)
    }

    /// Gradient of the log-likelihood with respect to nodal values,
    /// `Pᵀ Γ⁻¹ Σ_i (y_i - P u)`.
    pub fn misfit_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n_nodes {
            return Err(Error::dims("solution vector", self.n_nodes, u.len()));
        }
        let pu = self.apply(u);
        let s2 = self.sigma * self.sigma;
        let mut out = vec![0.0; self.n_nodes];
        for (r, row) in self.rows.iter().enumerate() {
            let res: f64 = self.data.iter().map(|y| y[r] - pu[r]).sum::<f64>() / s2;
            for &(n, w) in row {
                out[n] += w * res;
            }
        }
        Ok(out)
    }
}

fn interpolation_row(mesh: &Mesh, p: Point) -> Result<Vec<(usize, f64)>> {
    let tol = 1e-10;
    for el in mesh.elements() {
        let x: Vec<Point> = el.nodes.iter().map(|&n| mesh.coords()[n]).collect();
        let weights: Option<Vec<f64>> = match el.kind {
            ElementKind::Segment2 => {
                let t = (p[0] - x[0][0]) / (x[1][0] - x[0][0]);
                (-tol..=1.0 + tol).contains(&t).then(|| vec![1.0 - t, t])
            }
            ElementKind::Triangle3 => {
                let (g, _) = triangle_gradients(&x);
                let l1 = g[1][0] * (p[0] - x[0][0]) + g[1][1] * (p[1] - x[0][1]);
                let l2 = g[2][0] * (p[0] - x[0][0]) + g[2][1] * (p[1] - x[0][1]);
                let w = vec![1.0 - l1 - l2, l1, l2];
                w.iter().all(|&v| v >= -tol).then_some(w)
            }
            ElementKind::Quad4 => quad_inverse_map(&x, p)
                .filter(|r| r[0].abs() <= 1.0 + tol && r[1].abs() <= 1.0 + tol)
                .map(|r| quad_shape(r[0], r[1]).to_vec()),
        };
        if let Some(w) = weights {
            let w: Vec<f64> = w.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let s: f64 = w.iter().sum();
            return Ok(el.nodes.iter().zip(&w).filter(|(_, &v)| v > 0.0).map(|(&n, &v)| (n, v / s)).collect());
        }
    }
    Err(Error::DataMismatch(format!("sensor at ({}, {}) lies outside the mesh", p[0], p[1])))
}

fn quad_inverse_map(x: &[Point], p: Point) -> Option<[f64; 2]> {
    let mut r = [0.0, 0.0];
    for _ in 0..30 {
        let n = quad_shape(r[0], r[1]);
        let mut f = [-p[0], -p[1]];
        for i in 0..4 {
            f[0] += n[i] * x[i][0];
            f[1] += n[i] * x[i][1];
        }
        let mut jac = [[0.0; 2]; 2];
        for i in 0..4 {
            let [si, ti] = QUAD_REF[i];
            let d = [0.25 * si * (1.0 + r[1] * ti), 0.25 * ti * (1.0 + r[0] * si)];
            for a in 0..2 {
                for b in 0..2 {
                    jac[a][b] += x[i][a] * d[b];
                }
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det.abs() < 1e-300 {
            return None;
        }
        let dx = (jac[1][1] * f[0] - jac[0][1] * f[1]) / det;
        let dy = (-jac[1][0] * f[0] + jac[0][0] * f[1]) / det;
        r[0] -= dx;
        r[1] -= dy;
        if dx.abs() + dy.abs() < 1e-14 {
            break;
        }
        if r[0].abs() > 10.0 || r[1].abs() > 10.0 {
            return None;
        }
    }
    Some(r)
}

/// Draws `n_rep` noisy replicates of `P u`.
pub fn noisy_replicates<R: Rng + ?Sized>(clean: &[f64], sigma: f64, n_rep: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n_rep)
        .map(|_| clean.iter().map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Solves at `kappa_true` and returns `N_y` noisy replicates at the sensors
/// described by `rows`.
pub fn synthesize<R: Rng + ?Sized>(
    problem: &Poisson,
    kappa_true: &[f64],
    rows: Vec<Vec<(usize, f64)>>,
    sigma: f64,
    n_rep: usize,
    rng: &mut R,
) -> Result<ObservationModel> {
    let sol = problem.solve(kappa_true)?;
    let template = ObservationModel::new(rows, problem.mesh().num_nodes(), sigma.max(f64::MIN_POSITIVE), vec![])?;
    let clean = template.apply(&sol.u);
    let data = noisy_replicates(&clean, sigma, n_rep, rng);
    template.with_data(data)
}

/// The forward problem paired with data.
#[derive(Debug, Clone)]
pub struct PoissonLikelihood {
    pub problem: Poisson,
    pub obs: ObservationModel,
}

impl LogLikelihood for PoissonLikelihood {
    fn dim(&self) -> usize {
        self.problem.n_params()
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.problem.log_likelihood_and_grad(theta, &self.obs)
    }

    fn value(&self, theta: &[f64]) -> Result<f64> {
        let sol = self.problem.solve(theta)?;
        self.obs.log_likelihood(&sol.u)
    }
}

/// `exp(kappa) u'' = 2` on (0, 1) with `u(0) = 0`, `u(1) = u_R`, observed at
/// `x = 0.5`.
#[derive(Debug, Clone)]
pub struct MultimodalProblem {
    poisson: Poisson,
    mid: usize,
}

impl MultimodalProblem {
    pub fn new(n_elements: usize) -> Result<Self> {
        if !n_elements.is_multiple_of(2) {
            return Err(Error::Config("the multimodal problem needs an even element count".into()));
        }
        let mut mesh = Mesh::interval(n_elements, 0.0, 1.0)?;
        mesh.set_dirichlet(0, 0.0)?;
        mesh.set_dirichlet(n_elements, 1.0)?;
        let poisson = Poisson::with_coefficient_map(mesh, -2.0, vec![0; n_elements], 1)?;
        Ok(MultimodalProblem { poisson, mid: n_elements / 2 })
    }

    pub fn poisson(&self) -> &Poisson {
        &self.poisson
    }

    pub fn observation_node(&self) -> usize {
        self.mid
    }

    pub fn solve(&self, kappa: f64, u_r: f64) -> Result<Solution> {
        self.poisson.solve_bc(&[kappa], &[0.0, u_r])
    }

    /// `u(0.5)`.
    pub fn forward(&self, kappa: f64, u_r: f64) -> Result<f64> {
        Ok(self.solve(kappa, u_r)?.u[self.mid])
    }
}

pub fn forward_multimodal(kappa: f64, u_r: f64) -> Result<f64> {
    MultimodalProblem::new(8)?.forward(kappa, u_r)
}

/// Likelihood over `(kappa, ln u_R)`.
#[derive(Debug, Clone)]
pub struct MultimodalLikelihood {
    pub problem: MultimodalProblem,
    pub obs: ObservationModel,
}

impl MultimodalLikelihood {
    pub fn new(problem: MultimodalProblem, sigma: f64, data: Vec<f64>) -> Result<Self> {
        let nn = problem.poisson.mesh().num_nodes();
        let obs = ObservationModel::nodal(&[problem.mid], nn, sigma, data.into_iter().map(|v| vec![v]).collect())?;
        Ok(MultimodalLikelihood { problem, obs })
    }
}

impl LogLikelihood for MultimodalLikelihood {
    fn dim(&self) -> usize {
        2
    }

    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != 2 {
            return Err(Error::dims("multimodal parameters", 2, theta.len()));
        }
        let u_r = theta[1].exp();
        let sol = self.problem.solve(theta[0], u_r)?;
        let (ll, g, gbc) = self.problem.poisson.adjoint_gradient(&sol, &self.obs)?;
        Ok((ll, vec![g[0], gbc[1] * u_r]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bar(n: usize) -> Poisson {
        let mut m = Mesh::interval(n, 0.0, 1.0).unwrap();
        m.set_dirichlet(0, 0.0).unwrap();
        m.set_dirichlet(n, 0.0).unwrap();
        Poisson::new(m, 1.0).unwrap()
    }

    #[test]
    fn element_matrix_examples() {
        let m = Mesh::interval(4, 0.0, 1.0).unwrap();
        let c = precompute_element_matrices(&m).unwrap();
        let k = c.stiffness(0);
        assert!((k.get(0, 0) - 4.0).abs() < 1e-14 && (k.get(0, 1) + 4.0).abs() < 1e-14);

        let tri = Mesh::new(
            2,
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![crate::mesh::Element::new(ElementKind::Triangle3, vec![0, 1, 2])],
            BTreeMap::new(),
        )
        .unwrap();
        let k = *precompute_element_matrices(&tri).unwrap().stiffness(0);
        let expect = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((k.get(i, j) - expect[i][j]).abs() < 1e-14);
            }
        }

        let quad = Mesh::unit_square_quads(1, 1).unwrap();
        let k = *precompute_element_matrices(&quad).unwrap().stiffness(0);
        for i in 0..4 {
            assert!((k.get(i, i) - 2.0 / 3.0).abs() < 1e-14);
            assert!((k.get(i, (i + 2) % 4) + 1.0 / 3.0).abs() < 1e-14);
            assert!((k.get(i, (i + 1) % 4) + 1.0 / 6.0).abs() < 1e-14);
            let row: f64 = (0..4).map(|j| k.get(i, j)).sum();
            assert!(row.abs() < 1e-14);
        }
    }

    #[test]
    fn bar_is_nodally_exact() {
        let p = bar(32);
        let sol = p.solve(&[0.0; 32]).unwrap();
        for (i, x) in p.mesh().coords().iter().enumerate() {
            assert!((sol.u[i] - x[0] * (1.0 - x[0]) / 2.0).abs() < 1e-10);
        }
        let c = 0.7;
        let shifted = p.solve(&[c; 32]).unwrap();
        for i in 0..33 {
            assert!((shifted.u[i] - (-c).exp() * sol.u[i]).abs() < 1e-14);
        }
        let (res, f) = p.residual(&sol);
        let rn = res.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(rn <= 1e-10 * fnorm);
    }

    #[test]
    fn pure_neumann_is_rejected() {
        let m = Mesh::interval(3, 0.0, 1.0).unwrap();
        assert!(matches!(Poisson::new(m, 1.0), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn exact_data_gives_zero_gradient() {
        let p = bar(8);
        let kappa: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let sol = p.solve(&kappa).unwrap();
        let free = p.free_nodes();
        let clean: Vec<f64> = free.iter().map(|&n| sol.u[n]).collect();
        let obs = ObservationModel::nodal(&free, 9, 0.01, vec![clean.clone(), clean]).unwrap();
        let (ll, g) = p.log_likelihood_and_grad(&kappa, &obs).unwrap();
        let single = -0.5 * 7.0 * (2.0 * std::f64::consts::PI * 1e-4).ln();
        assert!((ll - 2.0 * single).abs() < 1e-9);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    fn fd_check(p: &Poisson, obs: &ObservationModel, kappa: &[f64]) -> f64 {
        let (_, g) = p.log_likelihood_and_grad(kappa, obs).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..kappa.len() {
            let mut kp = kappa.to_vec();
            let mut km = kappa.to_vec();
            kp[i] += h;
            km[i] -= h;
            let fd = (obs.log_likelihood(&p.solve(&kp).unwrap().u).unwrap()
                - obs.log_likelihood(&p.solve(&km).unwrap().u).unwrap())
                / (2.0 * h);
            let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-3 * scale));
        }
        worst
    }

    #[test]
    fn adjoint_matches_finite_differences_1d() {
        let p = bar(12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kappa: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let free = p.free_nodes();
        let data: Vec<Vec<f64>> = (0..2).map(|_| free.iter().map(|_| 0.05 * rng.random::<f64>()).collect()).collect();
        let obs = ObservationModel::nodal(&free, 13, 0.1, data).unwrap();
        assert!(fd_check(&p, &obs, &kappa) < 1e-6);
    }

    #[test]
    fn adjoint_with_interpolated_sensors_and_coarse_map() {
        let mut mesh = Mesh::unit_square_quads(4, 4).unwrap();
        mesh.set_dirichlet_where(0.0, |x| x[0] < 1e-12 || x[0] > 1.0 - 1e-12 || x[1] < 1e-12 || x[1] > 1.0 - 1e-12);
        let map: Vec<usize> = (0..16).map(|e| (e / 4 / 2) * 2 + (e % 4) / 2).collect();
        let p = Poisson::with_coefficient_map(mesh.clone(), 10.0, map, 4).unwrap();
        let pts = vec![[0.3, 0.3], [0.6, 0.2], [0.55, 0.8]];
        let obs = ObservationModel::at_points(&mesh, &pts, 0.05, vec![vec![0.1, 0.2, 0.3]]).unwrap();
        assert!(fd_check(&p, &obs, &[0.3, -0.4, 0.2, 0.9]) < 1e-6);
    }

    #[test]
    fn doubling_sigma_quarters_gradient() {
        let p = bar(6);
        let kappa = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1];
        let free = p.free_nodes();
        let data = vec![vec![0.05; free.len()]];
        let a = ObservationModel::nodal(&free, 7, 0.1, data.clone()).unwrap();
        let b = a.with_sigma(0.2).unwrap();
        let (_, ga) = p.log_likelihood_and_grad(&kappa, &a).unwrap();
        let (_, gb) = p.log_likelihood_and_grad(&kappa, &b).unwrap();
        for i in 0..6 {
            assert!((gb[i] * 4.0 - ga[i]).abs() < 1e-10 * ga[i].abs().max(1.0));
        }
    }

    #[test]
    fn likelihood_matches_direct_density() {
        let p = bar(5);
        let sol = p.solve(&[0.2, 0.1, -0.3, 0.0, 0.4]).unwrap();
        let free = p.free_nodes();
        let data = vec![vec![0.1, 0.05, -0.02, 0.07], vec![0.0, 0.03, 0.01, 0.09]];
        let obs = ObservationModel::nodal(&free, 6, 0.07, data.clone()).unwrap();
        let mut direct = 0.0;
        for y in &data {
            let r = DVector::from_iterator(4, free.iter().zip(y).map(|(&n, v)| v - sol.u[n]));
            let cov = DMatrix::<f64>::identity(4, 4) * 0.0049;
            let inv = cov.clone().try_inverse().unwrap();
            direct += -0.5 * (r.transpose() * inv * &r)[(0, 0)]
                - 0.5 * cov.determinant().ln()
                - 2.0 * (2.0 * std::f64::consts::PI).ln();
        }
        assert!((obs.log_likelihood(&sol.u).unwrap() - direct).abs() < 1e-10);
        assert!(obs.log_likelihood(&sol.u[..5]).is_err());
    }

    #[test]
    fn flux_examples() {
        let p = bar(32);
        let kappa = [0.0; 32];
        let sol = p.solve(&kappa).unwrap();
        let left = p.mesh().select_boundary(|x| x[0] < 1e-12);
        let r = p.boundary_flux(&kappa, &sol.u, &left).unwrap();
        // one-sided element gradient: (1 - h) / 2 against the analytic 1/2
        assert!((r - (0.5f64 * (1.0 - 1.0 / 32.0)).ln()).abs() < 1e-12);
        let fine = bar(2048);
        let u = fine.solve(&[0.0; 2048]).unwrap().u;
        let rf = fine.boundary_flux(&[0.0; 2048], &u, &fine.mesh().select_boundary(|x| x[0] < 1e-12)).unwrap();
        assert!((rf - 0.5f64.ln()).abs() < 1e-3);
        let shifted = [0.4; 32];
        let r2 = p.boundary_flux(&shifted, &sol.u, &left).unwrap();
        assert!((r2 - r - 0.4).abs() < 1e-12);
        let neg: Vec<f64> = sol.u.iter().map(|v| -v).collect();
        assert!(matches!(p.boundary_flux(&kappa, &neg, &left), Err(Error::NonPositiveFlux(_))));
    }

    #[test]
    fn multimodal_matches_analytic() {
        assert!((forward_multimodal(0.0, 1.0).unwrap() - 0.25).abs() < 1e-12);
        assert!(forward_multimodal(0.0, 0.5).unwrap().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let k: f64 = rng.random_range(-2.0..2.0);
            let ur: f64 = rng.random_range(0.0..3.0);
            let exact = 0.5 * ur - 0.25 * (-k).exp();
            assert!((forward_multimodal(k, ur).unwrap() - exact).abs() < 1e-10);
        }
    }

    #[test]
    fn multimodal_gradient_matches_fd() {
        let lik = MultimodalLikelihood::new(MultimodalProblem::new(8).unwrap(), 0.05, vec![-0.4, -0.45]).unwrap();
        let theta = [0.3, -0.7];
        let (_, g) = lik.value_and_grad(&theta).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut a = theta;
            let mut b = theta;
            a[i] += h;
            b[i] -= h;
            let fd = (lik.value(&a).unwrap() - lik.value(&b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * g[i].abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn synthetic_noiseless_and_deterministic() {
        let p = bar(8);
        let kappa = [0.0; 8];
        let rows: Vec<Vec<(usize, f64)>> = p.free_nodes().iter().map(|&n| vec![(n, 1.0)]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = synthesize(&p, &kappa, rows.clone(), 0.0, 3, &mut rng).unwrap();
        assert_eq!(obs.data()[0], obs.data()[2]);
        let a = synthesize(&p, &kappa, rows.clone(), 0.1, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = synthesize(&p, &kappa, rows, 0.1, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        let m = Mesh::unit_square_triangles(5, 5, None).unwrap();
        let obs = ObservationModel::at_points(&m, &[[0.33, 0.71], [1.0, 1.0], [0.0, 0.5]], 1.0, vec![]).unwrap();
        let lin: Vec<f64> = m.coords().iter().map(|x| 2.0 * x[0] - x[1] + 0.5).collect();
        let pu = obs.apply(&lin);
        assert!((pu[0] - (0.66 - 0.71 + 0.5)).abs() < 1e-12);
        assert!((pu[1] - 1.5).abs() < 1e-12);
        assert!(ObservationModel::at_points(&m, &[[1.5, 0.5]], 1.0, vec![]).is_err());
    }

    fn square(n: usize) -> Mesh {
        let mut m = Mesh::unit_square_triangles(n, n, None).unwrap();
        m.set_dirichlet_where(0.0, |p| p[0] < 1e-12 || p[0] > 1.0 - 1e-12);
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn solve_succeeds_with_small_residual(kappa in prop::collection::vec(-6.0f64..6.0, 32)) {
            let p = Poisson::new(square(4), 1.0).unwrap();
            let sol = p.solve(&kappa).unwrap();
            let (r, f) = p.residual(&sol);
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(norm(&r) <= 1e-10 * norm(&f));
        }

        #[test]
        fn uniform_shift_scales_solution(kappa in prop::collection::vec(-2.0f64..2.0, 16), c in 0.01f64..3.0) {
            let p = bar(16);
            let u = p.solve(&kappa).unwrap().u;
            let shifted: Vec<f64> = kappa.iter().map(|k| k + c).collect();
            let v = p.solve(&shifted).unwrap().u;
            for (a, b) in u.iter().zip(&v) {
                prop_assert!((b - (-c).exp() * a).abs() <= 1e-12 * a.abs().max(1e-3));
            }
        }

        #[test]
        fn flux_shifts_with_kappa(kappa in prop::collection::vec(-1.0f64..1.0, 32), c in -3.0f64..3.0) {
            let p = Poisson::new(square(4), 1.0).unwrap();
            let u = p.solve(&kappa).unwrap().u;
            let facets = p.mesh().select_boundary(|x| x[0] < 1e-12);
            let r = p.boundary_flux(&kappa, &u, &facets).unwrap();
            let shifted: Vec<f64> = kappa.iter().map(|k| k + c).collect();
            let r2 = p.boundary_flux(&shifted, &u, &facets).unwrap();
            prop_assert!((r2 - r - c).abs() < 1e-12);
        }

        #[test]
        fn likelihood_ignores_element_numbering(
            kappa in prop::collection::vec(-1.0f64..1.0, 32),
            perm in Just((0..32).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let m = square(4);
            let els: Vec<_> = perm.iter().map(|&e| m.element(e).clone()).collect();
            let m2 = Mesh::new(2, m.coords().to_vec(), els, m.dirichlet().clone()).unwrap();
            let (p, p2) = (Poisson::new(m, 1.0).unwrap(), Poisson::new(m2, 1.0).unwrap());
            let free = p.free_nodes();
            let y = [p.solve(&vec![0.3; 32]).unwrap().u.iter().map(|v| v + 0.01).collect::<Vec<_>>()];
            let rows: Vec<Vec<(usize, f64)>> = free.iter().map(|&n| vec![(n, 1.0)]).collect();
            let data = vec![rows.iter().map(|r| y[0][r[0].0]).collect::<Vec<_>>()];
            let obs = ObservationModel::new(rows, p.mesh().num_nodes(), 0.05, data).unwrap();
            let k2: Vec<f64> = perm.iter().map(|&e| kappa[e]).collect();
            let (l1, g1) = p.log_likelihood_and_grad(&kappa, &obs).unwrap();
            let (l2, g2) = p2.log_likelihood_and_grad(&k2, &obs).unwrap();
            prop_assert!((l1 - l2).abs() <= 1e-9 * l1.abs().max(1.0));
            for (i, &e) in perm.iter().enumerate() {
                prop_assert!((g2[i] - g1[e]).abs() <= 1e-8 * g1[e].abs().max(1.0));
            }
        }
    }
}
