//! Semidefinite programs over symmetric matrix variables that enter every
//! LMI block through congruences, and a log-det barrier solver for them.
//!
//! The problem is
//!
//! ```text
//! maximize    Σ_g ⟨C_g, S_g⟩
//! subject to  F_b(S) = F_b0 + Σ_t w_t K_tᵀ S_{g_t} K_t ⪰ 0   for every block b
//! ```
//!
//! where each `S_g` is a symmetric matrix whose free entries are described
//! by a [`SymLayout`]. Writing the blocks as congruences keeps both storage
//! and the Newton system assembly proportional to the (small) matrix sizes
//! rather than to the number of scalar variables.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result, SolverStatus};

/// Free entries `(a, b)` with `a ≤ b` of a symmetric `dim × dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymLayout {
    dim: usize,
    entries: Vec<(usize, usize)>,
}

impl SymLayout {
    /// Every upper-triangular entry over `indices` is free; all others are
    /// fixed at zero.
    pub fn over(dim: usize, indices: &[usize]) -> Self {
        let mut entries = Vec::new();
        for (i, &a) in indices.iter().enumerate() {
            for &b in &indices[i..] {
                entries.push((a.min(b), a.max(b)));
            }
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nvars(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn matrix(&self, y: &[f64]) -> DMatrix<f64> {
        debug_assert_eq!(y.len(), self.nvars());
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for (&(a, b), &v) in self.entries.iter().zip(y) {
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
        m
    }

    /// Inverse of [`SymLayout::matrix`] on the free entries.
    pub fn extract(&self, m: &DMatrix<f64>) -> Vec<f64> {
        self.entries
            .iter()
            .map(|&(a, b)| 0.5 * (m[(a, b)] + m[(b, a)]))
            .collect()
    }

    /// Coefficients `c` with `⟨C, S(y)⟩ = cᵀy`.
    pub fn linear_functional(&self, c: &DMatrix<f64>) -> Vec<f64> {
        self.entries
            .iter()
            .map(|&(a, b)| if a == b { c[(a, a)] } else { c[(a, b)] + c[(b, a)] })
            .collect()
    }
}

/// `weight · maps[map]ᵀ · S_group · maps[map]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CongruenceTerm {
    pub group: usize,
    pub weight: f64,
    pub map: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub constant: usize,
    pub terms: Vec<CongruenceTerm>,
}

#[derive(Debug, Clone)]
pub struct StructuredSdp {
    pub layout: SymLayout,
    pub groups: usize,
    pub maps: Vec<DMatrix<f64>>,
    pub constants: Vec<DMatrix<f64>>,
    pub blocks: Vec<LmiBlock>,
    /// Objective contributions `⟨C, S_group⟩`.
    pub objective: Vec<(usize, DMatrix<f64>)>,
}

impl StructuredSdp {
    pub fn nvars(&self) -> usize {
        self.groups * self.layout.nvars()
    }

    pub fn group_slice<'a>(&self, y: &'a [f64], g: usize) -> &'a [f64] {
        let nv = self.layout.nvars();
        &y[g * nv..(g + 1) * nv]
    }

    pub fn group_matrix(&self, y: &[f64], g: usize) -> DMatrix<f64> {
        self.layout.matrix(self.group_slice(y, g))
    }

    pub fn objective_vector(&self) -> DVector<f64> {
        let nv = self.layout.nvars();
        let mut c = DVector::zeros(self.nvars());
        for (g, cm) in &self.objective {
            let coeffs = self.layout.linear_functional(cm);
            for (j, v) in coeffs.into_iter().enumerate() {
                c[g * nv + j] += v;
            }
        }
        c
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective_vector().dot(&DVector::from_column_slice(y))
    }

    /// Sum of the barrier degrees (block dimensions).
    pub fn barrier_degree(&self) -> usize {
        self.blocks.iter().map(|b| self.constants[b.constant].nrows()).sum()
    }

    fn linear_part(&self, block: &LmiBlock, groups: &[DMatrix<f64>]) -> DMatrix<f64> {
        let n = self.constants[block.constant].nrows();
        let mut out = DMatrix::zeros(n, n);
        for t in &block.terms {
            let k = &self.maps[t.map];
            out += (k.transpose() * &groups[t.group] * k) * t.weight;
        }
        out
    }

    fn all_groups(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        (0..self.groups).map(|g| self.group_matrix(y, g)).collect()
    }

    /// Value of every block at `y`.
    pub fn block_values(&self, y: &[f64]) -> Vec<DMatrix<f64>> {
        let groups = self.all_groups(y);
        self.blocks
            .iter()
            .map(|b| &self.constants[b.constant] + self.linear_part(b, &groups))
            .collect()
    }

    /// Smallest eigenvalue over all blocks at `y`.
    pub fn min_eigenvalue(&self, y: &[f64]) -> f64 {
        self.block_values(y)
            .into_iter()
            .map(|m| m.symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Explicit affine form of one block, `F0 + Σ_j y_j F_j`, listing only
    /// the variables with a nonzero coefficient matrix. This is the
    /// vectorized standard form handed to general-purpose conic solvers.
    pub fn expand_block(&self, b: usize) -> (DMatrix<f64>, Vec<(usize, DMatrix<f64>)>) {
        let block = &self.blocks[b];
        let nv = self.layout.nvars();
        let mut coeffs: HashMap<usize, DMatrix<f64>> = HashMap::new();
        let n = self.constants[block.constant].nrows();
        for t in &block.terms {
            let k = &self.maps[t.map];
            for (j, &(a, c)) in self.layout.entries().iter().enumerate() {
                let ra = k.row(a);
                let rc = k.row(c);
                let mut f = ra.transpose() * rc;
                if a != c {
                    f += rc.transpose() * ra;
                }
                f *= t.weight;
                if f.amax() == 0.0 {
                    continue;
                }
                *coeffs.entry(t.group * nv + j).or_insert_with(|| DMatrix::zeros(n, n)) += f;
            }
        }
        let mut list: Vec<_> = coeffs.into_iter().collect();
        list.sort_by_key(|(j, _)| *j);
        (self.constants[block.constant].clone(), list)
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub y: Vec<f64>,
    pub objective: f64,
    /// Duality gap at termination.
    pub gap_bound: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub min_eigenvalue: f64,
}

/// A solver for [`StructuredSdp`] problems, started from a strictly
/// feasible point.
pub trait SdpSolver {
    fn solve(&self, problem: &StructuredSdp, start: &[f64]) -> Result<SdpSolution>;
}

#[derive(Debug, Clone, Copy)]
pub struct InteriorPointSettings {
    pub rel_gap: f64,
    pub abs_gap: f64,
    /// Relative residual of the dual equality constraints.
    pub feas_tol: f64,
    pub max_iterations: usize,
    /// Accuracy at which a stalled solve still returns its best iterate.
    pub fallback_rel_gap: f64,
    pub fallback_feas_tol: f64,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    pub verbose: bool,
}

impl Default for InteriorPointSettings {
    fn default() -> Self {
        Self {
            rel_gap: 1e-9,
            abs_gap: 1e-8,
            feas_tol: 1e-7,
            max_iterations: 200,
            fallback_rel_gap: 1e-6,
            fallback_feas_tol: 1e-5,
            step_fraction: 0.98,
            verbose: false,
        }
    }
}

/// Primal–dual path following with Nesterov–Todd scaling and a Mehrotra
/// centering heuristic. The LMI iterate `y` stays strictly feasible; the
/// multipliers `X_b ⪰ 0` start at the identity and become feasible along
/// the way.
#[derive(Debug, Clone, Default)]
pub struct InteriorPointSolver {
    pub settings: InteriorPointSettings,
}

impl InteriorPointSolver {
    pub fn new(settings: InteriorPointSettings) -> Self {
        Self { settings }
    }
}

/// Symmetric positive definite band matrix, lower band stored row-wise.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Adds `v` at `(i, j)`; entries above the diagonal are ignored.
    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        if j <= i {
            let k = self.idx(i, j);
            self.data[k] += v;
        }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    fn max_diag(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i).abs()).fold(0.0, f64::max)
    }

    fn add_diag(&mut self, v: f64) {
        for i in 0..self.n {
            let k = self.idx(i, i);
            self.data[k] += v;
        }
    }

    /// `A v` for the symmetric matrix whose lower band is stored.
    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            for j in i.saturating_sub(self.bw)..i {
                let a = self.get(i, j);
                out[i] += a * v[j];
                out[j] += a * v[i];
            }
            out[i] += self.get(i, i) * v[i];
        }
        out
    }

    /// In-place Cholesky factor `L` with `A = L Lᵀ`.
    pub(crate) fn cholesky(&mut self) -> bool {
        let (n, bw) = (self.n, self.bw);
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut d = self.get(j, j);
            for k in lo..j {
                let l = self.get(j, k);
                d -= l * l;
            }
            if d.is_nan() || d <= 0.0 || d.is_infinite() {
                return false;
            }
            let djj = d.sqrt();
            let kj = self.idx(j, j);
            self.data[kj] = djj;
            for i in j + 1..(j + bw + 1).min(n) {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.get(i, j);
                for k in lo_i..j {
                    s -= self.get(i, k) * self.get(j, k);
                }
                let kij = self.idx(i, j);
                self.data[kij] = s / djj;
            }
        }
        true
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw) = (self.n, self.bw);
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for (k, &yk) in y.iter().enumerate().take(i).skip(i.saturating_sub(bw)) {
                s -= self.get(i, k) * yk;
            }
            y[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for (k, &yk) in y.iter().enumerate().take((i + bw + 1).min(n)).skip(i + 1) {
                s -= self.get(k, i) * yk;
            }
            y[i] = s / self.get(i, i);
        }
        y
    }
}

/// Reverse Cuthill–McKee ordering of the group coupling graph.
fn group_ordering(problem: &StructuredSdp) -> Vec<usize> {
    let n = problem.groups;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for b in &problem.blocks {
        for s in &b.terms {
            for t in &b.terms {
                if s.group != t.group && !adj[s.group].contains(&t.group) {
                    adj[s.group].push(t.group);
                }
            }
        }
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n)
            .filter(|&g| !visited[g])
            .min_by_key(|&g| (degree[g], g))
            .expect("unvisited group");
        visited[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(g) = queue.pop_front() {
            order.push(g);
            let mut next: Vec<usize> = adj[g].iter().copied().filter(|&h| !visited[h]).collect();
            next.sort_by_key(|&h| (degree[h], h));
            for h in next {
                visited[h] = true;
                queue.push_back(h);
            }
        }
    }
    order.reverse();
    order
}

struct Workspace<'a> {
    problem: &'a StructuredSdp,
    /// `(a, b)` of each free entry, and `ν/√2` with `ν = 2` off the
    /// diagonal and `1` on it.
    entries: Vec<(usize, usize)>,
    scale: Vec<f64>,
    /// Position of each group in the band ordering.
    position: Vec<usize>,
    bw: usize,
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a StructuredSdp) -> Self {
        let order = group_ordering(problem);
        let mut position = vec![0; problem.groups];
        for (pos, &g) in order.iter().enumerate() {
            position[g] = pos;
        }
        let mut group_bw = 0;
        for b in &problem.blocks {
            for s in &b.terms {
                for t in &b.terms {
                    group_bw = group_bw.max(position[s.group].abs_diff(position[t.group]));
                }
            }
        }
        let nv = problem.layout.nvars();
        let entries = problem.layout.entries().to_vec();
        let scale = entries
            .iter()
            .map(|&(a, b)| {
                if a == b {
                    std::f64::consts::FRAC_1_SQRT_2
                } else {
                    std::f64::consts::SQRT_2
                }
            })
            .collect();
        Self {
            problem,
            entries,
            scale,
            position,
            bw: (group_bw + 1) * nv - 1,
        }
    }

    fn permuted(&self, g: usize, j: usize) -> usize {
        self.position[g] * self.problem.layout.nvars() + j
    }

    fn to_band_order(&self, v: &[f64]) -> Vec<f64> {
        let nv = self.problem.layout.nvars();
        let mut out = vec![0.0; v.len()];
        for g in 0..self.problem.groups {
            for j in 0..nv {
                out[self.permuted(g, j)] = v[g * nv + j];
            }
        }
        out
    }

    fn unpermute_band(&self, v: &[f64]) -> Vec<f64> {
        let nv = self.problem.layout.nvars();
        let mut out = vec![0.0; v.len()];
        for g in 0..self.problem.groups {
            for j in 0..nv {
                out[g * nv + j] = v[self.permuted(g, j)];
            }
        }
        out
    }

    /// `(⟨F_j, U_b⟩ summed over blocks)_j` for symmetric block matrices `U`.
    fn adjoint(&self, mats: &[DMatrix<f64>]) -> Vec<f64> {
        let p = self.problem;
        let nv = p.layout.nvars();
        let mut out = vec![0.0; p.nvars()];
        for (block, u) in p.blocks.iter().zip(mats) {
            for t in &block.terms {
                let k = &p.maps[t.map];
                let x = k * u * k.transpose();
                for (j, &(a, b)) in self.entries.iter().enumerate() {
                    let nu = if a == b { 1.0 } else { 2.0 };
                    out[t.group * nv + j] += t.weight * nu * x[(a, b)];
                }
            }
        }
        out
    }

    /// `H_jk = Σ_b tr(F_j W_b F_k W_b)` in band ordering.
    fn hessian(&self, scalings: &[DMatrix<f64>]) -> BandMatrix {
        let p = self.problem;
        let nv = p.layout.nvars();
        let dim = p.layout.dim();
        let mut hess = BandMatrix::zeros(p.nvars(), self.bw);
        // same-term contributions per group (upper triangle), and cross-term
        // contributions per ordered group pair
        let mut diag: Vec<Vec<f64>> = vec![vec![0.0; nv * nv]; p.groups];
        let mut cross: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        let mut xa = vec![0.0; dim];
        let mut xb = vec![0.0; dim];

        for (block, w) in p.blocks.iter().zip(scalings) {
            let y: Vec<DMatrix<f64>> = block.terms.iter().map(|t| &p.maps[t.map] * w).collect();
            for (si, s) in block.terms.iter().enumerate() {
                for (ti, t) in block.terms.iter().enumerate().skip(si) {
                    let xst = &y[si] * p.maps[t.map].transpose();
                    let wst = s.weight * t.weight;
                    let acc = if ti == si {
                        &mut diag[s.group]
                    } else {
                        cross.entry((s.group, t.group)).or_insert_with(|| vec![0.0; nv * nv])
                    };
                    // h_jk = tr(E_j X E_k Xᵀ) = ½ν_jν_k (X_bc X_ad + X_bd X_ac)
                    for (j, &(a, b)) in self.entries.iter().enumerate() {
                        for c in 0..dim {
                            xa[c] = xst[(a, c)];
                            xb[c] = xst[(b, c)];
                        }
                        let wj = wst * self.scale[j];
                        let k0 = if ti == si { j } else { 0 };
                        let row = &mut acc[j * nv + k0..(j + 1) * nv];
                        let ents = &self.entries[k0..];
                        let scales = &self.scale[k0..];
                        for ((out, &(c, d)), &sk) in row.iter_mut().zip(ents).zip(scales) {
                            *out += wj * sk * (xb[c] * xa[d] + xb[d] * xa[c]);
                        }
                    }
                }
            }
        }

        for (g, mut h) in diag.into_iter().enumerate() {
            for j in 0..nv {
                for k in 0..j {
                    h[j * nv + k] = h[k * nv + j];
                }
            }
            self.scatter(&mut hess, g, g, &h, false);
        }
        for ((gs, gt), h) in cross {
            self.scatter(&mut hess, gs, gt, &h, true);
        }
        hess
    }

    /// Adds the `(gs, gt)` Hessian block `h` (and its transpose at `(gt, gs)`
    /// when `mirror` is set) into the band matrix.
    fn scatter(&self, hess: &mut BandMatrix, gs: usize, gt: usize, h: &[f64], mirror: bool) {
        let nv = self.problem.layout.nvars();
        for j in 0..nv {
            let r = self.permuted(gs, j);
            for k in 0..nv {
                let c = self.permuted(gt, k);
                let v = h[j * nv + k];
                if v == 0.0 {
                    continue;
                }
                if r >= c {
                    hess.add(r, c, v);
                }
                if mirror && c >= r {
                    hess.add(c, r, v);
                }
            }
        }
    }
}

/// Largest `α` with `Z + αD ⪰ 0`, for `Z ≻ 0`.
fn max_step(z: &DMatrix<f64>, d: &DMatrix<f64>) -> Option<f64> {
    let l = z.clone().cholesky()?.unpack();
    let linv = l.solve_lower_triangular(&DMatrix::identity(z.nrows(), z.nrows()))?;
    let m = &linv * d * linv.transpose();
    let lmin = ((&m + m.transpose()) * 0.5).symmetric_eigenvalues().min();
    Some(if lmin < 0.0 { -1.0 / lmin } else { f64::INFINITY })
}

/// Nesterov–Todd scaling of one block: `W = G Gᵀ` with `W Z W = X`, the
/// scaled point `V = Gᵀ Z G = G⁻¹ X G⁻ᵀ`, and `Z⁻¹`.
struct NtScaling {
    w: DMatrix<f64>,
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    v_vectors: DMatrix<f64>,
    v_values: DVector<f64>,
    z_inv: DMatrix<f64>,
}

fn sym_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> Option<DMatrix<f64>> {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    if eig.eigenvalues.min() <= 0.0 {
        return None;
    }
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(f)) * eig.eigenvectors.transpose())
}

fn nt_scaling(z: &DMatrix<f64>, x: &DMatrix<f64>) -> Option<NtScaling> {
    let n = z.nrows();
    let l = z.clone().cholesky()?.unpack();
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n))?;
    let s = l.transpose() * x * &l;
    let w = linv.transpose() * sym_function(&s, f64::sqrt)? * &linv;
    let w = (&w + w.transpose()) * 0.5;
    let g = sym_function(&w, f64::sqrt)?;
    let g_inv = sym_function(&w, |v| 1.0 / v.sqrt())?;
    let v = g.transpose() * z * &g;
    let eig = ((&v + v.transpose()) * 0.5).symmetric_eigen();
    Some(NtScaling {
        w,
        g,
        g_inv,
        v_vectors: eig.eigenvectors,
        v_values: eig.eigenvalues,
        z_inv: linv.transpose() * &linv,
    })
}

impl NtScaling {
    /// `G L_V⁻¹(ΔX̃ ∘ ΔZ̃) Gᵀ` with `ΔX̃ = G⁻¹ΔX G⁻ᵀ`, `ΔZ̃ = GᵀΔZ G`, where
    /// `A ∘ B = (AB + BA)/2` and `L_V(U) = V ∘ U`.
    fn second_order(&self, dx: &DMatrix<f64>, dz: &DMatrix<f64>) -> DMatrix<f64> {
        let dxs = &self.g_inv * dx * self.g_inv.transpose();
        let dzs = self.g.transpose() * dz * &self.g;
        let prod = &dxs * &dzs;
        let jordan = (&prod + prod.transpose()) * 0.5;
        let q = &self.v_vectors;
        let mut r = q.transpose() * jordan * q;
        let n = r.nrows();
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] *= 2.0 / (self.v_values[i] + self.v_values[j]);
            }
        }
        let u = q * r * q.transpose();
        &self.g * u * self.g.transpose()
    }
}

fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

impl SdpSolver for InteriorPointSolver {
    fn solve(&self, problem: &StructuredSdp, start: &[f64]) -> Result<SdpSolution> {
        let cfg = &self.settings;
        let n = problem.nvars();
        if start.len() != n {
            return Err(Error::Dimension(format!(
                "start has {} entries, expected {n}",
                start.len()
            )));
        }
        let fail = |status: SolverStatus, detail: String| Error::Solver { status, detail };
        let numerical = |what: &str| fail(SolverStatus::NumericalFailure, what.to_string());

        let ws = Workspace::new(problem);
        let c: Vec<f64> = problem.objective_vector().iter().copied().collect();
        let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nu = problem.barrier_degree() as f64;

        let mut y = start.to_vec();
        let mut z = problem.block_values(&y);
        if z.iter().any(|m| m.clone().cholesky().is_none()) {
            return Err(fail(
                SolverStatus::Infeasible,
                "starting point is not strictly feasible".into(),
            ));
        }
        let mut x: Vec<DMatrix<f64>> = z.iter().map(|m| DMatrix::identity(m.nrows(), m.nrows())).collect();
        let mut best: Option<SdpSolution> = None;
        let finish = |y: Vec<f64>, objective: f64, gap: f64, status: SolverStatus, iterations: usize| {
            let min_eigenvalue = problem
                .block_values(&y)
                .into_iter()
                .map(|m| m.symmetric_eigenvalues().min())
                .fold(f64::INFINITY, f64::min);
            SdpSolution {
                y,
                objective,
                gap_bound: gap,
                status,
                iterations,
                min_eigenvalue,
            }
        };
        let give_up = |best: Option<SdpSolution>, err: Error| -> Result<SdpSolution> {
            match best {
                Some(sol) => {
                    if cfg.verbose {
                        eprintln!("stalled ({err}); returning iterate {}", sol.iterations);
                    }
                    Ok(sol)
                }
                None => Err(err),
            }
        };

        for iter in 0..cfg.max_iterations {
            let gap: f64 = x.iter().zip(&z).map(|(a, b)| frobenius(a, b)).sum();
            let mu = gap / nu;
            let ax = ws.adjoint(&x);
            let rp_norm = c.iter().zip(&ax).map(|(ci, a)| (ci + a).powi(2)).sum::<f64>().sqrt();
            let rel_rp = rp_norm / (1.0 + c_norm);
            let dobj: f64 = c.iter().zip(&y).map(|(a, b)| a * b).sum();
            if cfg.verbose {
                eprintln!("{iter:3}  obj={dobj:.10e}  gap={gap:.3e}  infeas={rel_rp:.3e}");
            }
            if rel_rp <= cfg.feas_tol && gap <= cfg.abs_gap + cfg.rel_gap * dobj.abs() {
                return Ok(finish(y, dobj, gap, SolverStatus::Optimal, iter));
            }
            let acceptable = rel_rp <= cfg.fallback_feas_tol && gap <= cfg.fallback_rel_gap * dobj.abs().max(1.0);
            if acceptable && best.as_ref().is_none_or(|b| gap < b.gap_bound) {
                best = Some(finish(y.clone(), dobj, gap, SolverStatus::NearOptimal, iter));
            }
            if !dobj.is_finite() || dobj.abs() > 1e14 {
                return Err(fail(SolverStatus::Unbounded, format!("objective {dobj:.3e}")));
            }

            let Some(scalings): Option<Vec<NtScaling>> = z
                .iter()
                .zip(&x)
                .map(|(zb, xb)| nt_scaling(zb, xb))
                .collect::<Option<_>>()
            else {
                return give_up(best, numerical("lost positive definiteness"));
            };
            let ws_mats: Vec<DMatrix<f64>> = scalings.iter().map(|sc| sc.w.clone()).collect();
            let hess = ws.hessian(&ws_mats);
            let mut factored = hess.clone();
            let mut reg = 0.0;
            while !factored.cholesky() {
                let scale = hess.max_diag().max(1e-300);
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
                if reg > 1e-4 * scale {
                    return give_up(best, numerical("singular Schur complement"));
                }
                factored = hess.clone();
                factored.add_diag(reg);
            }

            // Newton direction for a complementarity target R_b:
            // H Δy = c + A*(X + R), ΔZ = F_lin(Δy), ΔX = R − W ΔZ W
            let direction = |r: &[DMatrix<f64>]| -> (Vec<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
                let xr: Vec<DMatrix<f64>> = x.iter().zip(r).map(|(a, b)| a + b).collect();
                let rhs: Vec<f64> = c.iter().zip(ws.adjoint(&xr)).map(|(ci, a)| ci + a).collect();
                let rhs_p = ws.to_band_order(&rhs);
                let mut sol = factored.solve(&rhs_p);
                let resid: Vec<f64> = rhs_p.iter().zip(hess.mul_vec(&sol)).map(|(a, b)| a - b).collect();
                for (v, d) in sol.iter_mut().zip(factored.solve(&resid)) {
                    *v += d;
                }
                let dy = ws.unpermute_band(&sol);
                let groups_d: Vec<_> = (0..problem.groups).map(|gr| problem.group_matrix(&dy, gr)).collect();
                let dz: Vec<DMatrix<f64>> = problem
                    .blocks
                    .iter()
                    .map(|b| problem.linear_part(b, &groups_d))
                    .collect();
                let dx: Vec<DMatrix<f64>> = dz
                    .iter()
                    .zip(&scalings)
                    .zip(r)
                    .map(|((d, sc), rb)| {
                        let m = rb - &sc.w * d * &sc.w;
                        (&m + m.transpose()) * 0.5
                    })
                    .collect();
                (dy, dz, dx)
            };
            let step_lengths = |dz: &[DMatrix<f64>], dx: &[DMatrix<f64>]| -> Option<(f64, f64)> {
                let mut ap = f64::INFINITY;
                let mut ad = f64::INFINITY;
                for b in 0..z.len() {
                    ad = ad.min(max_step(&z[b], &dz[b])?);
                    ap = ap.min(max_step(&x[b], &dx[b])?);
                }
                Some((ap, ad))
            };

            let r_aff: Vec<DMatrix<f64>> = x.iter().map(|xb| -xb).collect();
            let (_, dz_aff, dx_aff) = direction(&r_aff);
            let Some((ap, ad)) = step_lengths(&dz_aff, &dx_aff) else {
                return give_up(best, numerical("step length"));
            };
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let gap_aff: f64 = (0..z.len())
                .map(|b| frobenius(&(&x[b] + &dx_aff[b] * ap), &(&z[b] + &dz_aff[b] * ad)))
                .sum();
            let sigma = (gap_aff / gap).clamp(0.0, 1.0).powi(3);

            let r_cor: Vec<DMatrix<f64>> = (0..z.len())
                .map(|b| {
                    let sc = &scalings[b];
                    &sc.z_inv * (sigma * mu) - &x[b] - sc.second_order(&dx_aff[b], &dz_aff[b])
                })
                .collect();
            let (dy, dz, dx) = direction(&r_cor);
            let Some((ap, ad)) = step_lengths(&dz, &dx) else {
                return give_up(best, numerical("step length"));
            };
            let ap = (cfg.step_fraction * ap).min(1.0);
            let ad = (cfg.step_fraction * ad).min(1.0);
            for (a, d) in y.iter_mut().zip(&dy) {
                *a += ad * d;
            }
            for b in 0..z.len() {
                z[b] += &dz[b] * ad;
                x[b] += &dx[b] * ap;
            }
            // refresh Z from y to keep it exactly affine in y
            if iter % 10 == 9 {
                let fresh = problem.block_values(&y);
                if fresh.iter().all(|m| m.clone().cholesky().is_some()) {
                    z = fresh;
                }
            }
        }
        give_up(
            best,
            fail(
                SolverStatus::MaxIterations,
                format!("{} iterations", cfg.max_iterations),
            ),
        )
    }
}
