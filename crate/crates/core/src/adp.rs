//! Offline training of the quadratic tail cost from an iterated Bellman
//! inequality, and the text artifact that carries it to the controller.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::augment::{
    feasible_inputs, input_vector, AugmentedModel, AugmentedState, ControllerParams, InputVec, StateVec, CONST, FLT,
    NX, UPREV,
};
use crate::error::{Error, Result};
use crate::model::{PerUnitParams, SwitchPosition};
use crate::sdp::{CongruenceTerm, InteriorPointSolver, LmiBlock, SdpSolver, StructuredSdp, SymLayout};

/// Homogeneous dimension `[z; 1]`.
pub const NH: usize = NX + 1;
/// Free coordinates of a constraint block: physical, oscillator and filter
/// states plus the homogenizing one.
pub const NB: usize = 9;

pub type HomMatrix = SMatrix<f64, NH, NH>;
pub type BlockMatrix = SMatrix<f64, NB, NB>;
type LiftMap = SMatrix<f64, NH, NB>;

/// `V(z) = zᵀPz + 2qᵀz + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadValueFunction {
    pub p: SMatrix<f64, NX, NX>,
    pub q: StateVec,
    pub r: f64,
}

impl QuadValueFunction {
    pub fn zero() -> Self {
        Self {
            p: SMatrix::zeros(),
            q: StateVec::zeros(),
            r: 0.0,
        }
    }

    pub fn evaluate(&self, z: &StateVec) -> f64 {
        (z.transpose() * self.p * z)[0] + 2.0 * self.q.dot(z) + self.r
    }

    /// `[[P, q], [qᵀ, r]]`.
    pub fn homogeneous(&self) -> HomMatrix {
        let mut s = HomMatrix::zeros();
        s.fixed_view_mut::<NX, NX>(0, 0).copy_from(&self.p);
        s.fixed_view_mut::<NX, 1>(0, NX).copy_from(&self.q);
        s.fixed_view_mut::<1, NX>(NX, 0).copy_from(&self.q.transpose());
        s[(NX, NX)] = self.r;
        s
    }

    /// Inverse of [`QuadValueFunction::homogeneous`]. Any weight on the
    /// constant-one state coordinate is folded into `r` so that the
    /// constant lives in a single place.
    pub fn from_homogeneous(s: &HomMatrix) -> Self {
        let sym = (s + s.transpose()) * 0.5;
        let mut p: SMatrix<f64, NX, NX> = sym.fixed_view::<NX, NX>(0, 0).into();
        let mut q: StateVec = sym.fixed_view::<NX, 1>(0, NX).into();
        let mut r = sym[(NX, NX)];
        r += p[(CONST, CONST)] + 2.0 * q[CONST];
        q[CONST] = 0.0;
        for j in 0..NX {
            if j != CONST {
                q[j] += p[(CONST, j)];
            }
        }
        p.row_mut(CONST).fill(0.0);
        p.column_mut(CONST).fill(0.0);
        Self { p, q, r }
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.q.iter()).all(|v| v.is_finite()) && self.r.is_finite()
    }
}

pub fn evaluate_tail(vf: &QuadValueFunction, x: &AugmentedState) -> f64 {
    vf.evaluate(&x.to_vector())
}

/// One pair `(u_sw, u_prev)` satisfying the switching constraint, with the
/// transition indicators it implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combo {
    pub u: SwitchPosition,
    pub u_prev: SwitchPosition,
    pub p: [u8; 3],
}

impl Combo {
    pub fn input(&self) -> InputVec {
        input_vector(self.u, self.p)
    }
}

/// All 343 admissible `(u_sw, u_prev)` pairs, ordered by `u_prev` and then
/// by `u_sw`, both lexicographically.
pub fn enumerate_combos() -> Vec<Combo> {
    SwitchPosition::all()
        .flat_map(|u_prev| {
            feasible_inputs(u_prev)
                .into_iter()
                .map(move |(u, p)| Combo { u, u_prev, p })
        })
        .collect()
}

/// `blkdiag(CᵀC, 0)`.
pub fn stage_matrix(model: &AugmentedModel) -> HomMatrix {
    let mut l = HomMatrix::zeros();
    l.fixed_view_mut::<NX, NX>(0, 0)
        .copy_from(&(model.c.transpose() * model.c));
    l
}

/// `[[A, Bu], [0, 1]]`.
fn homogeneous_dynamics(model: &AugmentedModel, u: &InputVec) -> HomMatrix {
    let mut a = HomMatrix::zeros();
    a.fixed_view_mut::<NX, NX>(0, 0).copy_from(&model.a);
    a.fixed_view_mut::<NX, 1>(0, NX).copy_from(&(model.b * u));
    a[(NX, NX)] = 1.0;
    a
}

/// `M_i(u) = L + γ Āᵀ S_i Ā − S_{i−1}`, whose quadratic form at `[z; 1]` is
/// `ℓ(z) + γ V_i(Az + Bu) − V_{i−1}(z)`.
pub fn build_bellman_matrix(
    vf_i: &QuadValueFunction,
    vf_prev: &QuadValueFunction,
    u: &InputVec,
    model: &AugmentedModel,
) -> HomMatrix {
    let abar = homogeneous_dynamics(model, u);
    stage_matrix(model) + abar.transpose() * vf_i.homogeneous() * abar * model.gamma - vf_prev.homogeneous()
}

/// Maps `[z̃; 1]` to `[z; 1]` with the constant state at one and `u_prev`
/// fixed by the combo.
pub fn lift_map(combo: &Combo) -> LiftMap {
    let mut j = LiftMap::zeros();
    for k in 0..FLT.end {
        j[(k, k)] = 1.0;
    }
    j[(CONST, NB - 1)] = 1.0;
    let up = combo.u_prev.to_vector();
    for k in 0..3 {
        j[(UPREV.start + k, NB - 1)] = up[k];
    }
    j[(NX, NB - 1)] = 1.0;
    j
}

/// Restriction of a 13×13 form to the free coordinates of `combo`.
pub fn reduce_to_mtilde(m_full: &HomMatrix, combo: &Combo) -> BlockMatrix {
    let j = lift_map(combo);
    j.transpose() * m_full * j
}

/// Free entries of `[[P, q], [qᵀ, r]]`: everything except the constant
/// state's row and column.
pub fn value_layout() -> SymLayout {
    let idx: Vec<usize> = (0..NH).filter(|&k| k != CONST).collect();
    SymLayout::over(NH, &idx)
}

#[derive(Debug, Clone)]
pub struct BellmanSdp {
    pub iterations: usize,
    pub gamma: f64,
    pub mu_c: StateVec,
    /// Covariance of the state measure; the objective uses the second
    /// moment `Σ_c + μ_c μ_cᵀ`.
    pub sigma_c: SMatrix<f64, NX, NX>,
    pub combos: Vec<Combo>,
}

impl BellmanSdp {
    pub fn new(iterations: usize, gamma: f64) -> Self {
        Self {
            iterations,
            gamma,
            mu_c: default_mu_c(),
            sigma_c: default_sigma_c(),
            combos: enumerate_combos(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter(
                "at least one Bellman iteration is required".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.combos.is_empty() {
            return Err(Error::InvalidParameter("empty combo set".into()));
        }
        let sym = (self.sigma_c + self.sigma_c.transpose()) * 0.5;
        if (sym - self.sigma_c).amax() > 1e-12 || sym.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::InvalidParameter(
                "Sigma_c must be symmetric positive semidefinite".into(),
            ));
        }
        if self.sigma_c.row(CONST).amax() > 0.0 || (self.mu_c[CONST] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(
                "the constant state must have mean 1 and no spread".into(),
            ));
        }
        Ok(())
    }

    fn moment_matrix(&self) -> HomMatrix {
        let mut w = HomMatrix::zeros();
        w.fixed_view_mut::<NX, NX>(0, 0)
            .copy_from(&(self.sigma_c + self.mu_c * self.mu_c.transpose()));
        w.fixed_view_mut::<NX, 1>(0, NX).copy_from(&self.mu_c);
        w.fixed_view_mut::<1, NX>(NX, 0).copy_from(&self.mu_c.transpose());
        w[(NX, NX)] = 1.0;
        w
    }

    /// Congruence form of the problem: group `g` holds `S_g`, and block
    /// `(i, m)` for `i = 1..M` reads
    /// `Jᵀ L J + γ Kᵀ S_{i mod M} K − Jᵀ S_{i−1} J` with `K = Ā(m) J`.
    pub fn structured(&self, model: &AugmentedModel) -> StructuredSdp {
        let l = stage_matrix(model);
        let nc = self.combos.len();
        let mut maps = Vec::with_capacity(2 * nc);
        let mut constants = Vec::with_capacity(nc);
        for combo in &self.combos {
            let j = lift_map(combo);
            let k = homogeneous_dynamics(model, &combo.input()) * j;
            constants.push(to_dynamic(&(j.transpose() * l * j)));
            maps.push(to_dynamic(&j));
            maps.push(to_dynamic(&k));
        }
        let m = self.iterations;
        let mut blocks = Vec::with_capacity(m * nc);
        for i in 1..=m {
            for c in 0..nc {
                let mut terms = Vec::with_capacity(2);
                if self.gamma != 0.0 {
                    terms.push(CongruenceTerm {
                        group: i % m,
                        weight: self.gamma,
                        map: 2 * c + 1,
                    });
                }
                terms.push(CongruenceTerm {
                    group: i - 1,
                    weight: -1.0,
                    map: 2 * c,
                });
                blocks.push(LmiBlock { constant: c, terms });
            }
        }
        StructuredSdp {
            layout: value_layout(),
            groups: m,
            maps,
            constants,
            blocks,
            objective: vec![(0, to_dynamic(&self.moment_matrix()))],
        }
    }

    /// A point with every block positive definite: all iterates equal to
    /// `−Π` restricted to the state plus a large negative constant, where
    /// `Π` solves the discounted Lyapunov equation of the free dynamics.
    pub fn strictly_feasible_start(&self, model: &AugmentedModel, problem: &StructuredSdp) -> Result<Vec<f64>> {
        let mut a_free = SMatrix::<f64, 8, 8>::zeros();
        a_free.copy_from(&model.a.fixed_view::<8, 8>(0, 0));
        let pi = discounted_lyapunov(&a_free, self.gamma.max(0.5))?;
        let mut s = HomMatrix::zeros();
        s.fixed_view_mut::<8, 8>(0, 0).copy_from(&(-pi));
        for k in UPREV {
            s[(k, k)] = -1.0;
        }
        let scale = pi.amax().max(1.0);
        let mut r = -scale;
        for _ in 0..80 {
            s[(NX, NX)] = r;
            let group = problem.layout.extract(&to_dynamic(&s));
            let y: Vec<f64> = (0..problem.groups).flat_map(|_| group.iter().copied()).collect();
            if problem.min_eigenvalue(&y) > 1e-9 * scale {
                return Ok(y);
            }
            r *= 2.0;
        }
        Err(Error::Solver {
            status: crate::error::SolverStatus::Infeasible,
            detail: "no strictly feasible starting point found".into(),
        })
    }
}

/// Moment-measure mean: zero currents, fluxes and reference (the oscillator
/// averages out over a period), filter states at the target frequency,
/// constant one, no previous switching.
pub fn default_mu_c() -> StateVec {
    let mut mu = StateVec::zeros();
    mu[FLT.start] = 1.0;
    mu[FLT.start + 1] = 1.0;
    mu[CONST] = 1.0;
    mu
}

/// Identity on the free (continuous) coordinates.
pub fn default_sigma_c() -> SMatrix<f64, NX, NX> {
    let mut s = SMatrix::zeros();
    for k in 0..FLT.end {
        s[(k, k)] = 1.0;
    }
    s
}

/// Measure concentrated around the periodic operating point: currents equal
/// to a rotating reference of the given amplitude with the matching
/// steady-state flux, an isotropic spread `spread` on the continuous
/// machine and reference states, filter states at the target with spread
/// `filter_spread`, and previous positions uniform over the three levels.
pub fn operating_point_measure(
    params: &PerUnitParams,
    amplitude: f64,
    spread: f64,
    filter_spread: f64,
) -> (StateVec, SMatrix<f64, NX, NX>) {
    let mu = default_mu_c();
    let mut sigma = SMatrix::<f64, NX, NX>::zeros();
    let n = 64;
    for k in 0..n {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let i = nalgebra::Vector2::new(theta.sin(), -theta.cos()) * amplitude;
        let psi = crate::model::steady_state_flux(&i, params);
        let mut v = StateVec::zeros();
        v.fixed_rows_mut::<2>(0).copy_from(&i);
        v.fixed_rows_mut::<2>(2).copy_from(&psi);
        v.fixed_rows_mut::<2>(4).copy_from(&i);
        sigma += v * v.transpose() / n as f64;
    }
    for k in 0..FLT.start {
        sigma[(k, k)] += spread * spread;
    }
    for k in FLT {
        sigma[(k, k)] += filter_spread * filter_spread;
    }
    for k in UPREV {
        sigma[(k, k)] = 2.0 / 3.0;
    }
    (mu, sigma)
}

fn to_dynamic<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// `Π = Σ γᵏ (Aᵀ)ᵏ Aᵏ` by doubling.
fn discounted_lyapunov(a: &SMatrix<f64, 8, 8>, gamma: f64) -> Result<SMatrix<f64, 8, 8>> {
    let mut x = SMatrix::<f64, 8, 8>::identity();
    let mut ak = a * gamma.sqrt();
    for _ in 0..64 {
        let inc = ak.transpose() * x * ak;
        x += inc;
        if inc.amax() <= 1e-15 * x.amax() {
            return Ok(x);
        }
        ak = ak * ak;
    }
    Err(Error::Singular("discounted free dynamics are not stable"))
}

#[derive(Debug, Clone)]
pub struct TailSolution {
    /// `V₀`, the tail cost.
    pub tail: QuadValueFunction,
    /// `V₀, …, V_{M−1}`.
    pub iterates: Vec<QuadValueFunction>,
    pub objective: f64,
    pub gap_bound: f64,
    pub iterations: usize,
    pub min_block_eigenvalue: f64,
    pub status: crate::error::SolverStatus,
}

pub fn solve_tail_sdp(sdp: &BellmanSdp, model: &AugmentedModel) -> Result<TailSolution> {
    solve_tail_sdp_with(sdp, model, &InteriorPointSolver::default())
}

pub fn solve_tail_sdp_with(sdp: &BellmanSdp, model: &AugmentedModel, solver: &dyn SdpSolver) -> Result<TailSolution> {
    sdp.validate()?;
    let problem = sdp.structured(model);
    let start = sdp.strictly_feasible_start(model, &problem)?;
    let sol = solver.solve(&problem, &start)?;
    let iterates: Vec<QuadValueFunction> = (0..problem.groups)
        .map(|g| {
            let s = problem.group_matrix(&sol.y, g);
            QuadValueFunction::from_homogeneous(&HomMatrix::from_column_slice(s.as_slice()))
        })
        .collect();
    Ok(TailSolution {
        tail: iterates[0].clone(),
        iterates,
        objective: sol.objective,
        gap_bound: sol.gap_bound,
        iterations: sol.iterations,
        min_block_eigenvalue: sol.min_eigenvalue,
        status: sol.status,
    })
}

/// `min_u [ℓ(z) + γ V_next(Az + Bu)] − V_prev(z)` over the inputs allowed
/// from the `u_prev` stored in `z`.
pub fn bellman_residual(
    prev: &QuadValueFunction,
    next: &QuadValueFunction,
    model: &AugmentedModel,
    z: &StateVec,
) -> Result<f64> {
    let up = [z[UPREV.start], z[UPREV.start + 1], z[UPREV.start + 2]].map(|v| v.round() as i8);
    let u_prev = SwitchPosition::from_array(up)?;
    let stage = model.stage_cost(z);
    let best = feasible_inputs(u_prev)
        .into_iter()
        .map(|(u, p)| stage + model.gamma * next.evaluate(&model.step(z, &input_vector(u, p))))
        .fold(f64::INFINITY, f64::min);
    Ok(best - prev.evaluate(z))
}

/// Smallest Bellman residual over every consecutive iterate pair
/// `(V_{i−1}, V_i)` with `V_M = V₀`.
pub fn min_iterated_residual(iterates: &[QuadValueFunction], model: &AugmentedModel, z: &StateVec) -> Result<f64> {
    let m = iterates.len();
    let mut worst = f64::INFINITY;
    for i in 1..=m {
        worst = worst.min(bellman_residual(&iterates[i - 1], &iterates[i % m], model, z)?);
    }
    Ok(worst)
}

/// Random augmented state: continuous coordinates uniform in `±scale`,
/// constant 1 and a uniformly drawn previous switch position.
pub fn sample_state<R: Rng>(rng: &mut R, scale: f64) -> StateVec {
    let mut z = StateVec::zeros();
    for k in 0..CONST {
        z[k] = rng.random_range(-scale..=scale);
    }
    z[CONST] = 1.0;
    for k in UPREV {
        z[k] = rng.random_range(-1i8..=1) as f64;
    }
    z
}

/// Smallest iterated Bellman slack over `samples` seeded random states.
pub fn spot_check(
    iterates: &[QuadValueFunction],
    model: &AugmentedModel,
    samples: usize,
    scale: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        worst = worst.min(min_iterated_residual(iterates, model, &sample_state(&mut rng, scale))?);
    }
    Ok(worst)
}

/// Parameters a trained tail cost depends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailFingerprint {
    pub gamma: f64,
    pub delta: f64,
    pub fsw_target: f64,
    pub r1: f64,
    pub r2: f64,
    pub omega_r: f64,
    pub vdc: f64,
}

impl TailFingerprint {
    pub fn new(params: &PerUnitParams, ctrl: &ControllerParams) -> Self {
        Self {
            gamma: ctrl.gamma,
            delta: ctrl.delta,
            fsw_target: ctrl.fsw_target,
            r1: ctrl.r1,
            r2: ctrl.r2,
            omega_r: params.omega_r,
            vdc: params.vdc,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("fsw_target", self.fsw_target),
            ("r1", self.r1),
            ("r2", self.r2),
            ("omega_r", self.omega_r),
            ("vdc", self.vdc),
        ]
    }

    pub fn check(&self, expected: &TailFingerprint) -> Result<()> {
        for ((name, have), (_, want)) in self.fields().iter().zip(expected.fields()) {
            if (have - want).abs() > 1e-12 * want.abs().max(1.0) {
                return Err(Error::FingerprintMismatch(format!(
                    "{name}: tail trained with {have}, run uses {want}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TailArtifact {
    pub tail: QuadValueFunction,
    pub fingerprint: TailFingerprint,
    pub iterations: usize,
    pub objective: f64,
    /// Hash of the run configuration that produced the artifact.
    pub config: Option<String>,
}

const ARTIFACT_HEADER: &str = "# fcsmpc tail cost v1";

impl TailArtifact {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{ARTIFACT_HEADER}").unwrap();
        if let Some(c) = &self.config {
            writeln!(s, "# config {c}").unwrap();
        }
        for (name, v) in self.fingerprint.fields() {
            writeln!(s, "{name} {v:e}").unwrap();
        }
        writeln!(s, "iterations {}", self.iterations).unwrap();
        writeln!(s, "objective {:e}", self.objective).unwrap();
        writeln!(s, "P").unwrap();
        for i in 0..NX {
            let row: Vec<String> = (0..NX).map(|j| format!("{:e}", self.tail.p[(i, j)])).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
        writeln!(s, "q").unwrap();
        let q: Vec<String> = self.tail.q.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", q.join(" ")).unwrap();
        writeln!(s, "r").unwrap();
        writeln!(s, "{:e}", self.tail.r).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Artifact(m);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
        if lines.next() != Some(ARTIFACT_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut config = None;
        while let Some(c) = lines.peek().and_then(|l| l.strip_prefix('#')) {
            if let Some(fp) = c.trim().strip_prefix("config ") {
                config = Some(fp.trim().to_string());
            }
            lines.next();
        }
        let mut next_kv = |key: &str| -> Result<f64> {
            let line = lines.next().ok_or_else(|| bad(format!("missing {key}")))?;
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("malformed line '{line}'")))?;
            if k != key {
                return Err(bad(format!("expected {key}, found {k}")));
            }
            v.trim().parse::<f64>().map_err(|e| bad(format!("{key}: {e}")))
        };
        let fingerprint = TailFingerprint {
            gamma: next_kv("gamma")?,
            delta: next_kv("delta")?,
            fsw_target: next_kv("fsw_target")?,
            r1: next_kv("r1")?,
            r2: next_kv("r2")?,
            omega_r: next_kv("omega_r")?,
            vdc: next_kv("vdc")?,
        };
        let iterations = next_kv("iterations")? as usize;
        let objective = next_kv("objective")?;

        let mut section = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
            if lines.next() != Some(name) {
                return Err(bad(format!("expected section {name}")));
            }
            let mut out = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next().ok_or_else(|| bad(format!("{name} truncated")))?;
                let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|e| bad(format!("{name}: {e}")))?;
                if vals.len() != cols {
                    return Err(bad(format!("{name}: expected {cols} columns, found {}", vals.len())));
                }
                out.extend(vals);
            }
            Ok(out)
        };
        let p = SMatrix::<f64, NX, NX>::from_row_slice(&section("P", NX, NX)?);
        let q = SVector::<f64, NX>::from_column_slice(&section("q", 1, NX)?);
        let r = section("r", 1, 1)?[0];
        if lines.next().is_some() {
            return Err(bad("trailing content".into()));
        }
        if (p - p.transpose()).amax() > 1e-9 * p.amax().max(1.0) {
            return Err(bad("P is not symmetric".into()));
        }
        let tail = QuadValueFunction { p, q, r };
        if !tail.is_finite() {
            return Err(bad("non-finite coefficients".into()));
        }
        Ok(Self {
            tail,
            fingerprint,
            iterations,
            objective,
            config,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The tail cost, provided it was trained for `expected`.
    pub fn tail_for(&self, expected: &TailFingerprint) -> Result<&QuadValueFunction> {
        self.fingerprint.check(expected)?;
        Ok(&self.tail)
    }
}

/// Builds the augmented model, solves the iterated Bellman SDP with `m`
/// iterations and packages the result with its fingerprint.
pub fn train_tail(
    params: &PerUnitParams,
    ctrl: &ControllerParams,
    sdp: &BellmanSdp,
) -> Result<(TailArtifact, TailSolution)> {
    let dm = crate::model::discretize(&crate::model::build_continuous(params)?, params)?;
    let model = crate::augment::assemble_augmented(&dm, params, ctrl)?;
    let sol = solve_tail_sdp(sdp, &model)?;
    let artifact = TailArtifact {
        tail: sol.tail.clone(),
        fingerprint: TailFingerprint::new(params, ctrl),
        iterations: sdp.iterations,
        objective: sol.objective,
        config: None,
    };
    Ok((artifact, sol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{assemble_augmented, OscState};
    use crate::model::{build_continuous, discretize};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn model() -> AugmentedModel {
        let params = PerUnitParams::default();
        let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
        assemble_augmented(&dm, &params, &ControllerParams::default()).unwrap()
    }

    fn random_vf(rng: &mut StdRng) -> QuadValueFunction {
        let mut p = SMatrix::<f64, NX, NX>::from_fn(|_, _| rng.random_range(-1.0..1.0));
        p = (p + p.transpose()) * 0.5;
        QuadValueFunction {
            p,
            q: StateVec::from_fn(|_, _| rng.random_range(-1.0..1.0)),
            r: rng.random_range(-1.0..1.0),
        }
    }

    fn random_state(rng: &mut StdRng, u_prev: SwitchPosition) -> StateVec {
        let mut z = StateVec::from_fn(|_, _| rng.random_range(-1.5..1.5));
        z[CONST] = 1.0;
        z.fixed_rows_mut::<3>(UPREV.start).copy_from(&u_prev.to_vector());
        z
    }

    fn random_combo(rng: &mut StdRng, combos: &[Combo]) -> Combo {
        combos[rng.random_range(0..combos.len())]
    }

    #[test]
    fn combos() {
        let c = enumerate_combos();
        assert_eq!(c.len(), 343);
        assert!(c
            .iter()
            .any(|m| m.u == SwitchPosition::ZERO && m.u_prev == SwitchPosition::ZERO));
        assert!(c.iter().all(|m| m.u.max_step(&m.u_prev) <= 1));
        // independent count: filter the 729 raw pairs
        let raw = SwitchPosition::all()
            .flat_map(|a| SwitchPosition::all().map(move |b| (a, b)))
            .filter(|(a, b)| a.phases().iter().zip(b.phases()).all(|(x, y)| (x - y).abs() <= 1))
            .count();
        assert_eq!(raw, 343);
        assert_eq!(enumerate_combos(), c);
    }

    #[test]
    fn evaluate_examples() {
        let z = StateVec::from_fn(|i, _| if i == 3 { 1.0 } else { 0.0 });
        assert_eq!(QuadValueFunction::zero().evaluate(&z), 0.0);
        let id = QuadValueFunction {
            p: SMatrix::identity(),
            q: StateVec::zeros(),
            r: 0.0,
        };
        assert_eq!(id.evaluate(&z), 1.0);

        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..100 {
            let vf = random_vf(&mut rng);
            let x = StateVec::from_fn(|_, _| rng.random_range(-2.0..2.0));
            // transposed accumulation order
            let mut acc = vf.r;
            for j in (0..NX).rev() {
                acc += 2.0 * vf.q[j] * x[j];
                for i in (0..NX).rev() {
                    acc += x[j] * vf.p[(j, i)] * x[i];
                }
            }
            assert_relative_eq!(vf.evaluate(&x), acc, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn evaluate_tail_uses_augmented_vector() {
        let mut rng = StdRng::seed_from_u64(2);
        let vf = random_vf(&mut rng);
        let st = AugmentedState {
            phys: crate::model::PhysState::new(0.3, -0.2, 0.9, 0.1),
            osc: OscState::at_angle(0.4, 1.0),
            sw: nalgebra::Vector3::new(1.1, 0.9, 1.0),
            u_prev: SwitchPosition::new(1, 0, -1).unwrap(),
        };
        assert_eq!(evaluate_tail(&vf, &st), vf.evaluate(&st.to_vector()));
    }

    #[test]
    fn homogeneous_folds_constant_into_r() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let vf = random_vf(&mut rng);
            let folded = QuadValueFunction::from_homogeneous(&vf.homogeneous());
            assert!(folded.p.row(CONST).amax() == 0.0 && folded.q[CONST] == 0.0);
            let z = random_state(&mut rng, SwitchPosition::ZERO);
            assert_relative_eq!(folded.evaluate(&z), vf.evaluate(&z), epsilon = 1e-12);
        }
    }

    #[test]
    fn bellman_matrix_examples() {
        let m = model();
        let zero = QuadValueFunction::zero();
        let u = input_vector(SwitchPosition::new(1, 0, 0).unwrap(), [1, 0, 0]);
        assert_eq!(build_bellman_matrix(&zero, &zero, &u, &m), stage_matrix(&m));

        let mut rng = StdRng::seed_from_u64(4);
        let vi = random_vf(&mut rng);
        let vp = random_vf(&mut rng);
        let mut m0 = m.clone();
        m0.gamma = 0.0;
        assert_eq!(
            build_bellman_matrix(&vi, &vp, &u, &m0),
            stage_matrix(&m) - vp.homogeneous()
        );

        let combos = enumerate_combos();
        for _ in 0..200 {
            let c = random_combo(&mut rng, &combos);
            let z = random_state(&mut rng, c.u_prev);
            let mut zh = SVector::<f64, NH>::zeros();
            zh.fixed_rows_mut::<NX>(0).copy_from(&z);
            zh[NX] = 1.0;
            let full = build_bellman_matrix(&vi, &vp, &c.input(), &m);
            let quad = (zh.transpose() * full * zh)[0];
            let direct = m.stage_cost(&z) + m.gamma * vi.evaluate(&m.step(&z, &c.input())) - vp.evaluate(&z);
            assert_relative_eq!(quad, direct, epsilon = 1e-9, max_relative = 1e-12);
        }
    }

    #[test]
    fn reduction_preserves_form() {
        let m = model();
        let mut rng = StdRng::seed_from_u64(5);
        let combos = enumerate_combos();
        assert_eq!(reduce_to_mtilde(&HomMatrix::zeros(), &combos[0]), BlockMatrix::zeros());
        let vi = random_vf(&mut rng);
        let vp = random_vf(&mut rng);
        for c in &combos {
            let full = build_bellman_matrix(&vi, &vp, &c.input(), &m);
            let red = reduce_to_mtilde(&full, c);
            assert!((red - red.transpose()).amax() < 1e-12);
            let z = random_state(&mut rng, c.u_prev);
            let mut w = SVector::<f64, NB>::zeros();
            w.fixed_rows_mut::<8>(0).copy_from(&z.fixed_rows::<8>(0));
            w[NB - 1] = 1.0;
            let mut zh = SVector::<f64, NH>::zeros();
            zh.fixed_rows_mut::<NX>(0).copy_from(&z);
            zh[NX] = 1.0;
            let a = (w.transpose() * red * w)[0];
            let b = (zh.transpose() * full * zh)[0];
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-12);
        }
    }

    #[test]
    fn structured_blocks_match_direct_construction() {
        let m = model();
        let sdp = BellmanSdp::new(3, m.gamma);
        let problem = sdp.structured(&m);
        assert_eq!(problem.blocks.len(), 3 * 343);
        let mut rng = StdRng::seed_from_u64(6);
        let vfs: Vec<QuadValueFunction> = (0..3)
            .map(|_| QuadValueFunction::from_homogeneous(&random_vf(&mut rng).homogeneous()))
            .collect();
        let y: Vec<f64> = vfs
            .iter()
            .flat_map(|vf| problem.layout.extract(&to_dynamic(&vf.homogeneous())))
            .collect();
        let values = problem.block_values(&y);
        for (b, value) in values.iter().enumerate().step_by(37) {
            let i = b / 343 + 1;
            let c = &sdp.combos[b % 343];
            let full = build_bellman_matrix(&vfs[i % 3], &vfs[i - 1], &c.input(), &m);
            let red = reduce_to_mtilde(&full, c);
            assert!((to_dynamic(&red) - value).amax() < 1e-10);
        }
    }

    #[test]
    fn artifact_roundtrip_and_fingerprint() {
        let mut rng = StdRng::seed_from_u64(7);
        let tail = QuadValueFunction::from_homogeneous(&random_vf(&mut rng).homogeneous());
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let art = TailArtifact {
            tail: tail.clone(),
            fingerprint: TailFingerprint::new(&params, &ctrl),
            iterations: 5,
            objective: -1.25,
            config: Some("abc123".into()),
        };
        let back = TailArtifact::parse(&art.to_text()).unwrap();
        assert_eq!(back.tail, tail);
        assert_eq!(back.iterations, 5);
        assert_eq!(back.config.as_deref(), Some("abc123"));
        let bare = TailArtifact {
            config: None,
            ..art.clone()
        };
        assert_eq!(TailArtifact::parse(&bare.to_text()).unwrap().config, None);
        assert!(back.tail_for(&TailFingerprint::new(&params, &ctrl)).is_ok());

        let other = ControllerParams { delta: 3.0, ..ctrl };
        assert!(matches!(
            back.tail_for(&TailFingerprint::new(&params, &other)),
            Err(Error::FingerprintMismatch(_))
        ));
        assert!(matches!(TailArtifact::parse("garbage"), Err(Error::Artifact(_))));
        let truncated: String = art.to_text().lines().take(12).collect::<Vec<_>>().join("\n");
        assert!(TailArtifact::parse(&truncated).is_err());
    }

    #[test]
    fn one_step_undiscounted_is_stage_underestimator() {
        let mut m = model();
        m.gamma = 0.0;
        let sol = solve_tail_sdp(&BellmanSdp::new(1, 0.0), &m).unwrap();
        assert!(sol.min_block_eigenvalue > -1e-7);
        let mut rng = StdRng::seed_from_u64(8);
        let positions: Vec<SwitchPosition> = SwitchPosition::all().collect();
        for _ in 0..10_000 {
            let up = positions[rng.random_range(0..27)];
            let z = random_state(&mut rng, up);
            assert!(sol.tail.evaluate(&z) <= m.stage_cost(&z) + 1e-6);
        }
        // the stage cost itself is quadratic, so it is the best under-estimator
        assert_relative_eq!(
            sol.objective,
            expected_stage_integral(&m, &BellmanSdp::new(1, 0.0)),
            epsilon = 1e-5
        );
    }

    fn expected_stage_integral(m: &AugmentedModel, sdp: &BellmanSdp) -> f64 {
        let ctc = m.c.transpose() * m.c;
        (ctc * (sdp.sigma_c + sdp.mu_c * sdp.mu_c.transpose())).trace()
    }

    #[test]
    fn short_horizon_solution_satisfies_bellman_inequality() {
        let m = model();
        let sdp = BellmanSdp::new(2, m.gamma);
        let sol = solve_tail_sdp(&sdp, &m).unwrap();
        assert_eq!(sol.iterates.len(), 2);
        assert!(sol.min_block_eigenvalue > -1e-7);
        for vf in &sol.iterates {
            assert!((vf.p - vf.p.transpose()).amax() < 1e-9);
        }
        let mut rng = StdRng::seed_from_u64(9);
        let positions: Vec<SwitchPosition> = SwitchPosition::all().collect();
        for _ in 0..2000 {
            let up = positions[rng.random_range(0..27)];
            let z = random_state(&mut rng, up);
            assert!(min_iterated_residual(&sol.iterates, &m, &z).unwrap() >= -1e-6);
        }
    }
}
