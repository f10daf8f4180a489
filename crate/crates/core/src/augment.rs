//! Augmented 12-state prediction model: plant, reference oscillator,
//! switching-frequency estimator and the previous switch position.
//!
//! State layout: `[is_α, is_β, ψ_α, ψ_β, i*_α, i*_β, x_flt/f*, 1, u_prev]`.
//! Input layout: `[u_sw, p]`.

use std::ops::Range;

use nalgebra::{Matrix2, Matrix2x3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rotation, DiscreteModel, PerUnitParams, PhysState, SwitchPosition};

pub const NX: usize = 12;
pub const NU: usize = 6;

pub const PHYS: Range<usize> = 0..4;
pub const OSC: Range<usize> = 4..6;
pub const FLT: Range<usize> = 6..8;
pub const CONST: usize = 8;
pub const UPREV: Range<usize> = 9..12;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;

/// Controller tuning shared by the augmented model, the trainer and the
/// online controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerParams {
    pub gamma: f64,
    pub delta: f64,
    pub r1: f64,
    pub r2: f64,
    /// Target switching frequency in Hz.
    pub fsw_target: f64,
    /// Reference current amplitude at rated torque.
    pub ref_amplitude: f64,
    pub rated_torque: f64,
    pub max_torque: f64,
}

impl Default for ControllerParams {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            delta: 4.0,
            r1: 800.0,
            r2: 800.0,
            fsw_target: 300.0,
            ref_amplitude: 1.0,
            rated_torque: 1.0,
            max_torque: 1.0,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad("delta must be non-negative");
        }
        if !(self.r1 > 1.0 && self.r2 > 1.0) {
            return bad("filter constants r1, r2 must exceed 1");
        }
        if !(self.fsw_target > 0.0 && self.fsw_target.is_finite()) {
            return bad("target switching frequency must be positive");
        }
        if !(self.rated_torque > 0.0 && self.max_torque >= 0.0 && self.ref_amplitude >= 0.0) {
            return bad("torque scaling must be positive");
        }
        Ok(())
    }

    pub fn a1(&self) -> f64 {
        1.0 - 1.0 / self.r1
    }

    pub fn a2(&self) -> f64 {
        1.0 - 1.0 / self.r2
    }
}

/// Reference current generator. The phase is tracked as a unit phasor so
/// that it survives a zero-amplitude reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OscState {
    pub phasor: Vector2<f64>,
    pub amplitude: f64,
}

impl OscState {
    /// Reference `[sin θ, −cos θ]` at angle `θ` with the given amplitude.
    pub fn at_angle(angle: f64, amplitude: f64) -> Self {
        Self {
            phasor: Vector2::new(angle.sin(), -angle.cos()),
            amplitude,
        }
    }

    pub fn x_osc(&self) -> Vector2<f64> {
        self.phasor * self.amplitude
    }
}

impl Default for OscState {
    fn default() -> Self {
        Self::at_angle(0.0, 1.0)
    }
}

pub fn step_oscillator(osc: &OscState, params: &PerUnitParams) -> OscState {
    OscState {
        phasor: rotation(params.t_hat()) * osc.phasor,
        amplitude: osc.amplitude,
    }
}

/// Rescales the reference so that, at rated rotor flux, the torque equals
/// `t_star`. The phase is left untouched.
pub fn reset_oscillator(t_star: f64, osc: &OscState, ctrl: &ControllerParams) -> Result<OscState> {
    if !t_star.is_finite() || t_star.abs() > ctrl.max_torque {
        return Err(Error::InvalidParameter(format!(
            "torque reference {t_star} outside ±{}",
            ctrl.max_torque
        )));
    }
    Ok(OscState {
        phasor: osc.phasor,
        amplitude: ctrl.ref_amplitude * t_star / ctrl.rated_torque,
    })
}

/// Per-phase transition indicator `|u_now − u_prev|`.
pub fn p_from_inputs(u_now: SwitchPosition, u_prev: SwitchPosition) -> Result<[u8; 3]> {
    let (now, prev) = (u_now.phases(), u_prev.phases());
    let mut p = [0u8; 3];
    for k in 0..3 {
        let d = (now[k] - prev[k]).abs();
        if d > 1 {
            return Err(Error::ShootThrough {
                phase: k,
                from: prev[k],
                to: now[k],
            });
        }
        p[k] = d as u8;
    }
    Ok(p)
}

pub fn p_vector(p: [u8; 3]) -> Vector3<f64> {
    Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
}

/// Switching-frequency IIR estimator state in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterState {
    pub x: Vector2<f64>,
}

impl FilterState {
    pub fn f_hat(&self) -> f64 {
        self.x[1]
    }

    /// Equilibrium of the filter under a constant switching rate `f` (Hz).
    pub fn steady(f: f64, ctrl: &ControllerParams) -> Self {
        Self {
            x: Vector2::new(f * (1.0 - ctrl.a2()) / (1.0 - ctrl.a1()), f),
        }
    }
}

pub fn filter_matrices(ctrl: &ControllerParams, params: &PerUnitParams) -> (Matrix2<f64>, Matrix2x3<f64>) {
    let (a1, a2) = (ctrl.a1(), ctrl.a2());
    let a = Matrix2::new(a1, 0.0, 1.0 - a1, a2);
    let g = (1.0 - a2) / (12.0 * params.ts);
    let b = Matrix2x3::new(g, g, g, 0.0, 0.0, 0.0);
    (a, b)
}

pub fn step_filter(flt: &FilterState, p: [u8; 3], ctrl: &ControllerParams, params: &PerUnitParams) -> FilterState {
    let (a, b) = filter_matrices(ctrl, params);
    FilterState {
        x: a * flt.x + b * p_vector(p),
    }
}

/// Full controller-side state `x(k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub phys: PhysState,
    pub osc: OscState,
    /// `[x_flt / f*, 1]`.
    pub sw: Vector3<f64>,
    pub u_prev: SwitchPosition,
}

impl AugmentedState {
    pub fn new(phys: PhysState, osc: OscState, flt: &FilterState, fsw_target: f64, u_prev: SwitchPosition) -> Self {
        Self {
            phys,
            osc,
            sw: Vector3::new(flt.x[0] / fsw_target, flt.x[1] / fsw_target, 1.0),
            u_prev,
        }
    }

    pub fn to_vector(&self) -> StateVec {
        let mut x = StateVec::zeros();
        x.fixed_rows_mut::<4>(PHYS.start).copy_from(&self.phys.to_vector());
        x.fixed_rows_mut::<2>(OSC.start).copy_from(&self.osc.x_osc());
        x.fixed_rows_mut::<3>(FLT.start).copy_from(&self.sw);
        x.fixed_rows_mut::<3>(UPREV.start).copy_from(&self.u_prev.to_vector());
        x
    }
}

pub fn input_vector(u: SwitchPosition, p: [u8; 3]) -> InputVec {
    let mut v = InputVec::zeros();
    v.fixed_rows_mut::<3>(0).copy_from(&u.to_vector());
    v.fixed_rows_mut::<3>(3).copy_from(&p_vector(p));
    v
}

/// Augmented dynamics `x(k+1) = A x(k) + B u(k)` with stage cost `‖C x‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedModel {
    pub a: SMatrix<f64, NX, NX>,
    pub b: SMatrix<f64, NX, NU>,
    pub c: SMatrix<f64, 3, NX>,
    /// `u_sw = G u`.
    pub g: SMatrix<f64, 3, NU>,
    /// `p = T u`.
    pub t: SMatrix<f64, 3, NU>,
    /// `u_prev = W x`.
    pub w: SMatrix<f64, 3, NX>,
    pub gamma: f64,
    pub delta: f64,
    pub fsw_target: f64,
}

pub fn assemble_augmented(
    dm: &DiscreteModel,
    params: &PerUnitParams,
    ctrl: &ControllerParams,
) -> Result<AugmentedModel> {
    params.validate()?;
    ctrl.validate()?;
    if dm.a.iter().chain(dm.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Dimension("discrete plant model has non-finite entries".into()));
    }

    let mut g = SMatrix::<f64, 3, NU>::zeros();
    let mut t = SMatrix::<f64, 3, NU>::zeros();
    let mut w = SMatrix::<f64, 3, NX>::zeros();
    for k in 0..3 {
        g[(k, k)] = 1.0;
        t[(k, 3 + k)] = 1.0;
        w[(k, UPREV.start + k)] = 1.0;
    }

    let (a_flt, b_flt) = filter_matrices(ctrl, params);

    let mut a = SMatrix::<f64, NX, NX>::zeros();
    a.fixed_view_mut::<4, 4>(PHYS.start, PHYS.start).copy_from(&dm.a);
    a.fixed_view_mut::<2, 2>(OSC.start, OSC.start)
        .copy_from(&rotation(params.t_hat()));
    a.fixed_view_mut::<2, 2>(FLT.start, FLT.start).copy_from(&a_flt);
    a[(CONST, CONST)] = 1.0;

    let mut b = SMatrix::<f64, NX, NU>::zeros();
    b.fixed_view_mut::<4, 3>(PHYS.start, 0).copy_from(&dm.b);
    b.fixed_view_mut::<2, 3>(FLT.start, 3)
        .copy_from(&(b_flt / ctrl.fsw_target));
    b.fixed_view_mut::<3, 3>(UPREV.start, 0)
        .copy_from(&SMatrix::<f64, 3, 3>::identity());

    let mut c = SMatrix::<f64, 3, NX>::zeros();
    c[(0, 0)] = 1.0;
    c[(0, OSC.start)] = -1.0;
    c[(1, 1)] = 1.0;
    c[(1, OSC.start + 1)] = -1.0;
    let sd = ctrl.delta.sqrt();
    c[(2, FLT.start + 1)] = sd;
    c[(2, CONST)] = -sd;

    Ok(AugmentedModel {
        a,
        b,
        c,
        g,
        t,
        w,
        gamma: ctrl.gamma,
        delta: ctrl.delta,
        fsw_target: ctrl.fsw_target,
    })
}

impl AugmentedModel {
    pub fn step(&self, x: &StateVec, u: &InputVec) -> StateVec {
        self.a * x + self.b * u
    }

    pub fn stage_cost(&self, x: &StateVec) -> f64 {
        (self.c * x).norm_squared()
    }
}

/// All switch positions reachable from `u_prev` without a two-level jump,
/// paired with their transition indicators, in lexicographic order.
pub fn feasible_inputs(u_prev: SwitchPosition) -> Vec<(SwitchPosition, [u8; 3])> {
    SwitchPosition::all()
        .filter_map(|u| p_from_inputs(u, u_prev).ok().map(|p| (u, p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_continuous, discretize, step_plant};
    use approx::assert_relative_eq;

    fn setup() -> (PerUnitParams, ControllerParams, DiscreteModel, AugmentedModel) {
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
        let model = assemble_augmented(&dm, &params, &ctrl).unwrap();
        (params, ctrl, dm, model)
    }

    #[test]
    fn oscillator_single_step() {
        let params = PerUnitParams::default();
        let osc = OscState {
            phasor: Vector2::new(0.0, -1.0),
            amplitude: 1.0,
        };
        let next = step_oscillator(&osc, &params);
        let th = params.t_hat();
        assert_relative_eq!(next.x_osc(), Vector2::new(th.sin(), -th.cos()), epsilon = 1e-15);
        assert_relative_eq!(next.x_osc()[0], 7.8539e-3, epsilon = 1e-7);
        assert_relative_eq!(next.x_osc()[1], -0.99997, epsilon = 1e-5);
    }

    #[test]
    fn oscillator_full_period() {
        let params = PerUnitParams::default();
        assert_relative_eq!(params.samples_per_period(), 800.0, epsilon = 1e-9);
        let start = OscState::at_angle(0.3, 0.8);
        let mut osc = start;
        for _ in 0..800 {
            osc = step_oscillator(&osc, &params);
        }
        assert!((osc.x_osc() - start.x_osc()).amax() < 1e-6);
        assert_relative_eq!(osc.x_osc().norm(), 0.8, epsilon = 1e-9);
    }

    #[test]
    fn oscillator_reset() {
        let ctrl = ControllerParams::default();
        let osc = OscState::at_angle(1.1, 1.0);
        assert_eq!(reset_oscillator(1.0, &osc, &ctrl).unwrap(), osc);
        let zero = reset_oscillator(0.0, &osc, &ctrl).unwrap();
        assert_eq!(zero.x_osc().norm(), 0.0);
        let half = reset_oscillator(0.5, &osc, &ctrl).unwrap();
        assert_relative_eq!(half.x_osc(), osc.x_osc() * 0.5, epsilon = 1e-15);
        assert_eq!(half.phasor, osc.phasor);
        assert!(reset_oscillator(1.5, &osc, &ctrl).is_err());
        // phase survives a pass through zero amplitude
        let back = reset_oscillator(1.0, &zero, &ctrl).unwrap();
        assert_eq!(back, osc);
    }

    #[test]
    fn transition_indicators() {
        let u = |a, b, c| SwitchPosition::new(a, b, c).unwrap();
        assert_eq!(p_from_inputs(u(1, 0, -1), u(1, 0, -1)).unwrap(), [0, 0, 0]);
        assert_eq!(p_from_inputs(u(1, 0, 0), u(0, 0, 0)).unwrap(), [1, 0, 0]);
        assert!(matches!(
            p_from_inputs(u(1, -1, 0), u(-1, 1, 0)),
            Err(Error::ShootThrough { phase: 0, .. })
        ));
    }

    #[test]
    fn filter_idle_stays_zero() {
        let (params, ctrl, ..) = setup();
        let mut f = FilterState::default();
        for _ in 0..1000 {
            f = step_filter(&f, [0, 0, 0], &ctrl, &params);
        }
        assert_eq!(f.f_hat(), 0.0);
    }

    #[test]
    fn filter_dc_gain() {
        let (params, ctrl, ..) = setup();
        let mut f = FilterState::default();
        for _ in 0..50_000 {
            f = step_filter(&f, [1, 1, 1], &ctrl, &params);
        }
        assert_relative_eq!(f.f_hat(), 3.0 / (12.0 * 25e-6), max_relative = 1e-9);
        assert_relative_eq!(f.f_hat(), 10_000.0, max_relative = 1e-9);
    }

    /// Causal sliding-window count of transitions, the FIR definition of the
    /// switching frequency.
    fn fir_estimate(p_hist: &[[u8; 3]], window: usize, ts: f64) -> f64 {
        let tail = &p_hist[p_hist.len() - window..];
        let n: u32 = tail.iter().map(|p| p.iter().map(|&v| v as u32).sum::<u32>()).sum();
        n as f64 / (12.0 * window as f64 * ts)
    }

    #[test]
    fn filter_tracks_periodic_switching() {
        let (params, ctrl, ..) = setup();
        // Each phase runs the 0,1,0,−1 cycle at 250 Hz (4 transitions per 160 steps),
        // phases staggered.
        let period = 160usize;
        let level = |k: usize, phase: usize| -> i8 {
            let k = (k + phase * period / 3) % period;
            [0, 1, 0, -1][k * 4 / period]
        };
        let mut f = FilterState::default();
        let mut hist = Vec::new();
        let mut prev = SwitchPosition::ZERO;
        for k in 0..40_000 {
            let u = SwitchPosition::new(level(k, 0), level(k, 1), level(k, 2)).unwrap();
            let p = p_from_inputs(u, prev).unwrap();
            hist.push(p);
            f = step_filter(&f, p, &ctrl, &params);
            prev = u;
        }
        let fir = fir_estimate(&hist, 32_000, params.ts);
        assert_relative_eq!(fir, 250.0, max_relative = 1e-2);
        assert!((f.f_hat() - fir).abs() / fir < 0.05, "iir {} fir {}", f.f_hat(), fir);
    }

    #[test]
    fn augmented_structure() {
        let (params, ctrl, dm, model) = setup();
        // block-lower-triangular over (phys, osc, sw, u_prev)
        let blocks = [0..4, 4..6, 6..9, 9..12];
        for (bi, rows) in blocks.iter().enumerate() {
            for cols in blocks.iter().skip(bi + 1) {
                for r in rows.clone() {
                    for c in cols.clone() {
                        assert_eq!(model.a[(r, c)], 0.0);
                    }
                }
            }
        }
        let rot = model.a.fixed_view::<2, 2>(4, 4).into_owned();
        assert_relative_eq!(rot, rotation(params.t_hat()));
        assert_eq!(model.a.fixed_view::<4, 4>(0, 0).into_owned(), dm.a);
        assert_eq!(model.a[(CONST, CONST)], 1.0);

        let u = SwitchPosition::new(1, 0, -1).unwrap();
        let uv = input_vector(u, [1, 0, 1]);
        assert_eq!(model.g * uv, u.to_vector());
        assert_eq!(model.t * uv, Vector3::new(1.0, 0.0, 1.0));
        let x = AugmentedState::new(
            PhysState::default(),
            OscState::default(),
            &FilterState::default(),
            ctrl.fsw_target,
            u,
        );
        assert_eq!(model.w * x.to_vector(), u.to_vector());
    }

    #[test]
    fn stage_cost_zero_at_ideal_tracking() {
        let (params, ctrl, _, model) = setup();
        let osc = OscState::at_angle(0.7, 1.0);
        let i = osc.x_osc();
        let phys = PhysState::new(i[0], i[1], 0.4, -0.2);
        let flt = FilterState::steady(ctrl.fsw_target, &ctrl);
        let x = AugmentedState::new(phys, osc, &flt, ctrl.fsw_target, SwitchPosition::ZERO);
        assert_relative_eq!(model.stage_cost(&x.to_vector()), 0.0, epsilon = 1e-24);

        let flt2 = FilterState::steady(2.0 * ctrl.fsw_target, &ctrl);
        let x2 = AugmentedState::new(phys, osc, &flt2, ctrl.fsw_target, SwitchPosition::ZERO);
        assert_relative_eq!(model.stage_cost(&x2.to_vector()), ctrl.delta, epsilon = 1e-12);
        let _ = params;
    }

    #[test]
    fn augmented_step_matches_components() {
        let (params, ctrl, dm, model) = setup();
        let phys = PhysState::new(0.3, -0.8, 0.9, 0.1);
        let osc = OscState::at_angle(0.2, 0.9);
        let flt = FilterState {
            x: Vector2::new(280.0, 310.0),
        };
        let u_prev = SwitchPosition::new(0, 1, -1).unwrap();
        let x = AugmentedState::new(phys, osc, &flt, ctrl.fsw_target, u_prev);
        for (u, p) in feasible_inputs(u_prev) {
            let next = model.step(&x.to_vector(), &input_vector(u, p));
            let expected = AugmentedState::new(
                step_plant(&phys, u, &dm),
                step_oscillator(&osc, &params),
                &step_filter(&flt, p, &ctrl, &params),
                ctrl.fsw_target,
                u,
            );
            assert!((next - expected.to_vector()).amax() < 1e-12);
        }
    }

    #[test]
    fn feasible_counts_and_order() {
        let u = |a, b, c| SwitchPosition::new(a, b, c).unwrap();
        let zero = feasible_inputs(SwitchPosition::ZERO);
        assert_eq!(zero.len(), 27);
        assert!(zero.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(feasible_inputs(u(1, 1, 1)).len(), 8);
        assert_eq!(feasible_inputs(u(1, 1, 0)).len(), 12);
        assert_eq!(feasible_inputs(u(1, 0, 0)).len(), 18);
        assert_eq!(feasible_inputs(u(-1, 0, 1)).len(), 12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_position() -> impl Strategy<Value = SwitchPosition> {
            (-1i8..=1, -1i8..=1, -1i8..=1).prop_map(|(a, b, c)| SwitchPosition::new(a, b, c).unwrap())
        }

        proptest! {
            #[test]
            fn oscillator_preserves_norm(angle in -10.0f64..10.0, amp in 0.0f64..2.0) {
                let params = PerUnitParams::default();
                let osc = OscState::at_angle(angle, amp);
                let next = step_oscillator(&osc, &params);
                prop_assert!((next.x_osc().norm() - osc.x_osc().norm()).abs() < 1e-12);
            }

            #[test]
            fn staying_is_always_feasible(u in any_position()) {
                let set = feasible_inputs(u);
                prop_assert!(set.contains(&(u, [0, 0, 0])));
            }

            #[test]
            fn feasible_pairs_satisfy_switching_constraint(u_prev in any_position()) {
                let (params, ctrl, dm, model) = {
                    let params = PerUnitParams::default();
                    let ctrl = ControllerParams::default();
                    let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
                    let model = assemble_augmented(&dm, &params, &ctrl).unwrap();
                    (params, ctrl, dm, model)
                };
                let _ = (params, dm);
                let x = AugmentedState::new(PhysState::default(), OscState::default(), &FilterState::default(), ctrl.fsw_target, u_prev).to_vector();
                for (u, p) in feasible_inputs(u_prev) {
                    let uv = input_vector(u, p);
                    let d = model.g * uv - model.w * x;
                    let tu = model.t * uv;
                    for k in 0..3 {
                        prop_assert!(-tu[k] <= d[k] && d[k] <= tu[k]);
                        prop_assert!(tu[k] <= 1.0);
                    }
                }
            }
        }
    }
}
