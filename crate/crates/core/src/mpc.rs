//! Condensed integer QP over a short horizon, its exhaustive-search solver,
//! the baseline switching-penalty direct MPC, and the stateful controller.

use nalgebra::{DMatrix, DVector};

use crate::adp::QuadValueFunction;
use crate::augment::{
    reset_oscillator, step_filter, step_oscillator, AugmentedModel, AugmentedState, ControllerParams, FilterState,
    OscState, StateVec, NU, NX, OSC, PHYS,
};
use crate::error::{Error, Result};
use crate::model::{PerUnitParams, PhysState, SwitchPosition};

pub const MAX_HORIZON: usize = 3;
/// Cost assigned to infeasible candidates in floating point.
pub const J_UB: f64 = f64::MAX;
const FEAS_TOL: f64 = 1e-9;

/// `minimize UᵀQU + 2f(x₀)ᵀU  s.t.  A_ineq U ≤ b_ineq(x₀)` over the
/// enumerated switch sequences, with `U = [u(0); …; u(N−1)]` and
/// `u(k) = [u_sw(k); p(k)]`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub horizon: usize,
    pub q: DMatrix<f64>,
    /// `f(x₀) = f_map x₀ + f_const`.
    pub f_map: DMatrix<f64>,
    pub f_const: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    /// `b_ineq(x₀) = b_map x₀ + b_const`.
    pub b_map: DMatrix<f64>,
    pub b_const: DVector<f64>,
    /// Selects every `u_sw(k)` from `U`.
    pub g_stack: DMatrix<f64>,
    /// All `27^N` switch sequences, stage 0 most significant.
    pub table: Vec<Vec<SwitchPosition>>,
}

/// All `27^n` sequences of switch positions in lexicographic order.
pub fn sequence_table(n: usize) -> Vec<Vec<SwitchPosition>> {
    let all: Vec<SwitchPosition> = SwitchPosition::all().collect();
    let mut table = vec![Vec::new()];
    for _ in 0..n {
        table = table
            .into_iter()
            .flat_map(|prefix| {
                all.iter().map(move |&u| {
                    let mut v = prefix.clone();
                    v.push(u);
                    v
                })
            })
            .collect();
    }
    table
}

/// Stacked prediction `X = 𝒜x₀ + ℬU` for stages `0..=n`.
fn prediction_matrices(model: &AugmentedModel, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_column_slice(NX, NX, model.a.as_slice());
    let b = DMatrix::from_column_slice(NX, NU, model.b.as_slice());
    let mut big_a = DMatrix::zeros(NX * (n + 1), NX);
    let mut big_b = DMatrix::zeros(NX * (n + 1), NU * n);
    let mut ak = DMatrix::identity(NX, NX);
    for k in 0..=n {
        big_a.view_mut((k * NX, 0), (NX, NX)).copy_from(&ak);
        ak = &a * ak;
    }
    for k in 1..=n {
        let mut m = b.clone();
        for j in (0..k).rev() {
            big_b.view_mut((k * NX, j * NU), (NX, NU)).copy_from(&m);
            m = &a * m;
        }
    }
    (big_a, big_b)
}

pub fn build_condensed(model: &AugmentedModel, tail: &QuadValueFunction, n: usize) -> Result<CondensedQp> {
    if n == 0 || n > MAX_HORIZON {
        return Err(Error::InvalidParameter(format!(
            "horizon must be in 1..={MAX_HORIZON}, got {n}"
        )));
    }
    if !tail.is_finite() {
        return Err(Error::InvalidParameter("tail cost has non-finite coefficients".into()));
    }
    let (big_a, big_b) = prediction_matrices(model, n);
    let ctc = model.c.transpose() * model.c;
    let ctc = DMatrix::from_column_slice(NX, NX, ctc.as_slice());
    let mut h = DMatrix::zeros(NX * (n + 1), NX * (n + 1));
    let mut w = 1.0;
    for k in 0..n {
        h.view_mut((k * NX, k * NX), (NX, NX)).copy_from(&(&ctc * w));
        w *= model.gamma;
    }
    let gn = w;
    let p0 = DMatrix::from_column_slice(NX, NX, tail.p.as_slice());
    let q0 = DVector::from_column_slice(tail.q.as_slice());
    let b_end = big_b.rows(n * NX, NX).into_owned();
    let a_n = big_a.rows(n * NX, NX).into_owned();

    let bt_h = big_b.transpose() * &h;
    let q = &bt_h * &big_b + b_end.transpose() * &p0 * &b_end * gn;
    let q = (&q + q.transpose()) * 0.5;
    let f_map = &bt_h * &big_a + b_end.transpose() * &p0 * &a_n * gn;
    let f_const = b_end.transpose() * &q0 * gn;

    // (ℛ − 𝒮ℬ)U ≤ 𝒮𝒜x₀ and ℱU ≤ 1
    let g = DMatrix::from_column_slice(3, NU, model.g.as_slice());
    let t = DMatrix::from_column_slice(3, NU, model.t.as_slice());
    let wsel = DMatrix::from_column_slice(3, NX, model.w.as_slice());
    let m = 3 * n;
    let mut r = DMatrix::zeros(2 * m, NU * n);
    let mut s = DMatrix::zeros(2 * m, NX * (n + 1));
    let mut f = DMatrix::zeros(2 * m, NU * n);
    let mut g_stack = DMatrix::zeros(m, NU * n);
    for k in 0..n {
        r.view_mut((3 * k, NU * k), (3, NU)).copy_from(&(&g - &t));
        r.view_mut((m + 3 * k, NU * k), (3, NU)).copy_from(&(-&g - &t));
        s.view_mut((3 * k, NX * k), (3, NX)).copy_from(&wsel);
        s.view_mut((m + 3 * k, NX * k), (3, NX)).copy_from(&(-&wsel));
        f.view_mut((3 * k, NU * k), (3, NU)).copy_from(&t);
        f.view_mut((m + 3 * k, NU * k), (3, NU)).copy_from(&(-&t));
        g_stack.view_mut((3 * k, NU * k), (3, NU)).copy_from(&g);
    }
    let mut a_ineq = DMatrix::zeros(4 * m, NU * n);
    a_ineq.rows_mut(0, 2 * m).copy_from(&(&r - &s * &big_b));
    a_ineq.rows_mut(2 * m, 2 * m).copy_from(&f);
    let mut b_map = DMatrix::zeros(4 * m, NX);
    b_map.rows_mut(0, 2 * m).copy_from(&(&s * &big_a));
    let mut b_const = DVector::zeros(4 * m);
    b_const.rows_mut(2 * m, 2 * m).fill(1.0);

    Ok(CondensedQp {
        horizon: n,
        q,
        f_map,
        f_const,
        a_ineq,
        b_map,
        b_const,
        g_stack,
        table: sequence_table(n),
    })
}

impl CondensedQp {
    pub fn candidate_count(&self) -> usize {
        self.table.len()
    }

    pub fn f(&self, x0: &StateVec) -> DVector<f64> {
        &self.f_map * DVector::from_column_slice(x0.as_slice()) + &self.f_const
    }

    pub fn b_ineq(&self, x0: &StateVec) -> DVector<f64> {
        &self.b_map * DVector::from_column_slice(x0.as_slice()) + &self.b_const
    }

    /// Stacked input for candidate `i`, with the transition indicators
    /// chained from `u_prev` through the horizon. Indicators may exceed one
    /// for sequences that jump two levels; the inequalities reject those.
    pub fn input_sequence(&self, i: usize, u_prev: SwitchPosition) -> DVector<f64> {
        let mut u = DVector::zeros(NU * self.horizon);
        let mut prev = u_prev.phases();
        for (k, pos) in self.table[i].iter().enumerate() {
            let cur = pos.phases();
            for ph in 0..3 {
                u[NU * k + ph] = cur[ph] as f64;
                u[NU * k + 3 + ph] = (cur[ph] - prev[ph]).abs() as f64;
            }
            prev = cur;
        }
        u
    }

    pub fn cost(&self, u: &DVector<f64>, f: &DVector<f64>) -> f64 {
        let n = u.len();
        let mut quad = 0.0;
        for j in 0..n {
            if u[j] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for k in 0..n {
                row += self.q[(j, k)] * u[k];
            }
            quad += u[j] * row;
        }
        quad + 2.0 * f.dot(u)
    }

    pub fn is_feasible(&self, u: &DVector<f64>, b: &DVector<f64>) -> bool {
        (0..self.a_ineq.nrows()).all(|r| self.a_ineq.row(r).transpose().dot(u) <= b[r] + FEAS_TOL)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub u_sw: SwitchPosition,
    pub p: [u8; 3],
    pub j_min: f64,
    /// Table index of the chosen sequence.
    pub index: usize,
    pub candidates_evaluated: usize,
    pub feasible_count: usize,
}

fn first_stage_p(u: &DVector<f64>) -> [u8; 3] {
    [u[3] as u8, u[4] as u8, u[5] as u8]
}

/// Picks the minimizer of a cost table with the `≤` comparison of the
/// reference loop, so the last of several tying candidates wins.
fn find_minimum(costs: &[f64], j_ub: f64) -> (usize, f64) {
    let mut j_min = j_ub;
    let mut i_min = 0;
    for (i, &j) in costs.iter().enumerate() {
        if j <= j_min {
            j_min = j;
            i_min = i;
        }
    }
    (i_min, j_min)
}

pub fn exhaustive_solve(qp: &CondensedQp, x0: &StateVec, u_prev: SwitchPosition) -> Result<ControlDecision> {
    let f = qp.f(x0);
    let b = qp.b_ineq(x0);
    let mut costs = Vec::with_capacity(qp.candidate_count());
    let mut feasible = 0;
    for i in 0..qp.candidate_count() {
        let u = qp.input_sequence(i, u_prev);
        if qp.is_feasible(&u, &b) {
            feasible += 1;
            costs.push(qp.cost(&u, &f));
        } else {
            costs.push(J_UB);
        }
    }
    if feasible == 0 {
        return Err(Error::NoFeasibleCandidate(qp.candidate_count()));
    }
    let (index, j_min) = find_minimum(&costs, J_UB);
    let u = qp.input_sequence(index, u_prev);
    Ok(ControlDecision {
        u_sw: qp.table[index][0],
        p: first_stage_p(&u),
        j_min,
        index,
        candidates_evaluated: qp.candidate_count(),
        feasible_count: feasible,
    })
}

/// Direct MPC with cost `Σ_k ‖i(k+1) − i*(k+1)‖² + λ_u ‖u(k) − u(k−1)‖₁`
/// over the same enumerated feasible set, without discount or tail.
pub fn baseline_dmpc_solve(
    model: &AugmentedModel,
    table: &[Vec<SwitchPosition>],
    x0: &StateVec,
    u_prev: SwitchPosition,
    lambda_u: f64,
) -> Result<ControlDecision> {
    if lambda_u.is_nan() || lambda_u < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "lambda_u must be non-negative, got {lambda_u}"
        )));
    }
    let mut costs = Vec::with_capacity(table.len());
    let mut feasible = 0;
    for seq in table {
        let mut x = *x0;
        let mut prev = u_prev;
        let mut cost = 0.0;
        let mut ok = true;
        for &u in seq {
            let p = match crate::augment::p_from_inputs(u, prev) {
                Ok(p) => p,
                Err(_) => {
                    ok = false;
                    break;
                }
            };
            x = model.step(&x, &crate::augment::input_vector(u, p));
            let e = model.c.fixed_rows::<2>(0) * x;
            cost += e.norm_squared() + lambda_u * p.iter().map(|&v| v as f64).sum::<f64>();
            prev = u;
        }
        if ok {
            feasible += 1;
            costs.push(cost);
        } else {
            costs.push(J_UB);
        }
    }
    if feasible == 0 {
        return Err(Error::NoFeasibleCandidate(table.len()));
    }
    let (index, j_min) = find_minimum(&costs, J_UB);
    let u_sw = table[index][0];
    Ok(ControlDecision {
        u_sw,
        p: crate::augment::p_from_inputs(u_sw, u_prev)?,
        j_min,
        index,
        candidates_evaluated: table.len(),
        feasible_count: feasible,
    })
}

#[derive(Debug, Clone)]
pub enum Policy {
    Adp(Box<CondensedQp>),
    Baseline {
        table: Vec<Vec<SwitchPosition>>,
        lambda_u: f64,
    },
}

impl Policy {
    pub fn horizon(&self) -> usize {
        match self {
            Policy::Adp(qp) => qp.horizon,
            Policy::Baseline { table, .. } => table.first().map_or(0, |s| s.len()),
        }
    }
}

/// Internal memory of the controller between sampling instants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerMemory {
    pub osc: OscState,
    pub flt: FilterState,
    pub p_prev: [u8; 3],
    pub u_prev: SwitchPosition,
    pub t_star: f64,
}

/// Receding-horizon controller: updates oscillator and filter, builds the
/// initial state, solves, and remembers the applied input.
#[derive(Debug, Clone)]
pub struct Controller {
    pub model: AugmentedModel,
    pub params: PerUnitParams,
    pub ctrl: ControllerParams,
    pub policy: Policy,
    pub memory: ControllerMemory,
}

impl Controller {
    pub fn new(
        model: AugmentedModel,
        params: PerUnitParams,
        ctrl: ControllerParams,
        policy: Policy,
        memory: ControllerMemory,
    ) -> Result<Self> {
        ctrl.validate()?;
        params.validate()?;
        let h = policy.horizon();
        if h == 0 || h > MAX_HORIZON {
            return Err(Error::InvalidParameter(format!(
                "horizon must be in 1..={MAX_HORIZON}, got {h}"
            )));
        }
        Ok(Self {
            model,
            params,
            ctrl,
            policy,
            memory,
        })
    }

    pub fn adp(
        model: AugmentedModel,
        params: PerUnitParams,
        ctrl: ControllerParams,
        tail: &QuadValueFunction,
        horizon: usize,
        memory: ControllerMemory,
    ) -> Result<Self> {
        let qp = build_condensed(&model, tail, horizon)?;
        Self::new(model, params, ctrl, Policy::Adp(Box::new(qp)), memory)
    }

    pub fn baseline(
        model: AugmentedModel,
        params: PerUnitParams,
        ctrl: ControllerParams,
        horizon: usize,
        lambda_u: f64,
        memory: ControllerMemory,
    ) -> Result<Self> {
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(Error::InvalidParameter(format!(
                "horizon must be in 1..={MAX_HORIZON}, got {horizon}"
            )));
        }
        let table = sequence_table(horizon);
        Self::new(model, params, ctrl, Policy::Baseline { table, lambda_u }, memory)
    }

    /// Oscillator and filter update for the new sampling instant, returning
    /// the initial state of the prediction.
    pub fn initial_state(&mut self, t_star: f64, x_ph: &PhysState) -> Result<StateVec> {
        let mem = &mut self.memory;
        let rotated = step_oscillator(&mem.osc, &self.params);
        mem.osc = if t_star != mem.t_star {
            reset_oscillator(t_star, &rotated, &self.ctrl)?
        } else {
            rotated
        };
        mem.t_star = t_star;
        mem.flt = step_filter(&mem.flt, mem.p_prev, &self.ctrl, &self.params);
        let st = AugmentedState::new(*x_ph, mem.osc, &mem.flt, self.ctrl.fsw_target, mem.u_prev);
        Ok(st.to_vector())
    }

    pub fn step(&mut self, t_star: f64, x_ph: &PhysState) -> Result<ControlDecision> {
        let x0 = self.initial_state(t_star, x_ph)?;
        let decision = match &self.policy {
            Policy::Adp(qp) => exhaustive_solve(qp, &x0, self.memory.u_prev)?,
            Policy::Baseline { table, lambda_u } => {
                baseline_dmpc_solve(&self.model, table, &x0, self.memory.u_prev, *lambda_u)?
            }
        };
        self.memory.u_prev = decision.u_sw;
        self.memory.p_prev = decision.p;
        Ok(decision)
    }

    /// Current reference `i*` held by the oscillator.
    pub fn reference(&self) -> nalgebra::Vector2<f64> {
        self.memory.osc.x_osc()
    }
}

/// Explicit rollout cost `Σ_{k<N} γᵏ ℓ(x_k) + γᴺ V(x_N)` of a chained input
/// sequence.
pub fn rollout_cost(model: &AugmentedModel, tail: &QuadValueFunction, x0: &StateVec, u: &DVector<f64>) -> f64 {
    let n = u.len() / NU;
    let mut x = *x0;
    let mut cost = 0.0;
    let mut w = 1.0;
    for k in 0..n {
        cost += w * model.stage_cost(&x);
        let uk = crate::augment::InputVec::from_column_slice(&u.as_slice()[NU * k..NU * (k + 1)]);
        x = model.step(&x, &uk);
        w *= model.gamma;
    }
    cost + w * tail.evaluate(&x)
}

/// Physical block and oscillator of an augmented state.
pub fn tracking_error(x: &StateVec) -> nalgebra::Vector2<f64> {
    nalgebra::Vector2::new(x[PHYS.start] - x[OSC.start], x[PHYS.start + 1] - x[OSC.start + 1])
}
