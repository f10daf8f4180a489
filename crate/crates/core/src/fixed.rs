//! Bit-accurate emulation of the controller in signed fixed-point
//! arithmetic. All online arithmetic runs on integer mantissas.

use std::fmt::Write as _;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::augment::{
    reset_oscillator, step_filter, step_oscillator, ControllerParams, FilterState, OscState, StateVec, CONST, FLT, NX,
    OSC, PHYS, UPREV,
};
use crate::error::{Error, Result};
use crate::model::{rotation, PerUnitParams, PhysState, SwitchPosition};
use crate::mpc::{CondensedQp, ControlDecision, Controller, ControllerMemory, Policy};
use crate::sim::DriveController;

/// `Q(int_bits, frac_bits)`. When signed, the integer bits include the sign,
/// so `Q(2,22)` spans `[−2, 2)` with resolution `2^−22`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedFormat {
    pub int_bits: u32,
    pub frac_bits: u32,
    pub signed: bool,
}

impl FixedFormat {
    pub const fn q(int_bits: u32, frac_bits: u32) -> Self {
        Self {
            int_bits,
            frac_bits,
            signed: true,
        }
    }

    pub fn total_bits(&self) -> u32 {
        self.int_bits + self.frac_bits
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_bits() > 64 || (self.signed && self.magnitude_bits() == 0) {
            return Err(Error::InvalidParameter(format!(
                "fixed-point format Q({},{}) needs {} bits, at most 64 supported",
                self.int_bits,
                self.frac_bits,
                self.total_bits()
            )));
        }
        Ok(())
    }

    fn magnitude_bits(&self) -> u32 {
        self.total_bits() - self.signed as u32
    }

    pub fn max_raw(&self) -> i64 {
        ((1i128 << self.magnitude_bits()) - 1) as i64
    }

    pub fn min_raw(&self) -> i64 {
        if self.signed {
            (-(1i128 << self.magnitude_bits())) as i64
        } else {
            0
        }
    }

    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn one(&self) -> i64 {
        1i64 << self.frac_bits
    }

    /// Clamps a wide mantissa into range, reporting whether it saturated.
    pub fn saturate(&self, raw: i128) -> (i64, bool) {
        if raw > self.max_raw() as i128 {
            (self.max_raw(), true)
        } else if raw < self.min_raw() as i128 {
            (self.min_raw(), true)
        } else {
            (raw as i64, false)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedScalar {
    pub raw: i64,
    pub format: FixedFormat,
    pub saturated: bool,
}

impl FixedScalar {
    pub fn to_f64(&self) -> f64 {
        self.raw as f64 * self.format.resolution()
    }
}

/// Round to nearest, ties to even, then saturate.
pub fn quantize(x: f64, fmt: FixedFormat) -> FixedScalar {
    if x.is_nan() {
        return FixedScalar {
            raw: 0,
            format: fmt,
            saturated: true,
        };
    }
    let scaled = (x * (fmt.frac_bits as f64).exp2()).round_ties_even();
    let (raw, saturated) = if scaled >= fmt.max_raw() as f64 {
        (fmt.max_raw(), scaled > fmt.max_raw() as f64)
    } else if scaled <= fmt.min_raw() as f64 {
        (fmt.min_raw(), scaled < fmt.min_raw() as f64)
    } else {
        (scaled as i64, false)
    };
    FixedScalar {
        raw,
        format: fmt,
        saturated,
    }
}

/// `v · 2^−shift` rounded to nearest, ties to even.
pub fn shift_round(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Word lengths used by the emulated controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedProfile {
    /// Switch positions and transition indicators.
    pub input: FixedFormat,
    /// Measured and internal states.
    pub state: FixedFormat,
    /// Condensed-problem coefficients.
    pub coeff: FixedFormat,
    /// Linear terms and candidate costs.
    pub cost: FixedFormat,
}

impl Default for FixedProfile {
    fn default() -> Self {
        Self {
            input: FixedFormat::q(4, 0),
            state: FixedFormat::q(2, 22),
            coeff: FixedFormat::q(24, 22),
            cost: FixedFormat::q(30, 22),
        }
    }
}

impl FixedProfile {
    pub fn validate(&self) -> Result<()> {
        for f in [self.input, self.state, self.coeff, self.cost] {
            f.validate()?;
        }
        if self.input.frac_bits != 0 {
            return Err(Error::InvalidParameter("input format must be integer".into()));
        }
        if self.coeff.frac_bits != self.cost.frac_bits {
            return Err(Error::InvalidParameter(
                "coefficient and cost formats must share the fraction".into(),
            ));
        }
        Ok(())
    }
}

/// Counters of quantization effects over a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizationAudit {
    pub steps: u64,
    pub saturations: u64,
    pub coefficient_saturations: u64,
    /// Largest input quantization error, in units of the state resolution.
    pub max_input_error_lsb: f64,
    pub cost_evaluations: u64,
    pub oscillator_renormalizations: u64,
    /// Largest deviation of the fixed oscillator from its float shadow.
    pub max_oscillator_drift: f64,
    /// Largest deviation of the fixed filter estimate from its float shadow, in Hz.
    pub max_filter_drift_hz: f64,
}

impl QuantizationAudit {
    pub fn to_text(&self, fingerprint: &str, profile: &FixedProfile) -> String {
        let f = |x: &FixedFormat| format!("Q({},{})", x.int_bits, x.frac_bits);
        let mut s = String::new();
        let _ = writeln!(s, "# fingerprint {fingerprint}");
        let _ = writeln!(s, "input_format = {}", f(&profile.input));
        let _ = writeln!(s, "state_format = {}", f(&profile.state));
        let _ = writeln!(s, "coeff_format = {}", f(&profile.coeff));
        let _ = writeln!(s, "cost_format = {}", f(&profile.cost));
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "saturations = {}", self.saturations);
        let _ = writeln!(s, "coefficient_saturations = {}", self.coefficient_saturations);
        let _ = writeln!(s, "max_input_error_lsb = {:.6}", self.max_input_error_lsb);
        let _ = writeln!(s, "cost_evaluations = {}", self.cost_evaluations);
        let _ = writeln!(s, "oscillator_renormalizations = {}", self.oscillator_renormalizations);
        let _ = writeln!(s, "max_oscillator_drift = {:.3e}", self.max_oscillator_drift);
        let _ = writeln!(s, "max_filter_drift_hz = {:.3e}", self.max_filter_drift_hz);
        s
    }
}

fn quantize_all(xs: impl IntoIterator<Item = f64>, fmt: FixedFormat, sat: &mut u64) -> Vec<i64> {
    xs.into_iter()
        .map(|x| {
            let q = quantize(x, fmt);
            *sat += q.saturated as u64;
            q.raw
        })
        .collect()
}

/// Fixed-point twin of [`Controller`] for the ADP policy.
#[derive(Debug, Clone)]
pub struct FixedController {
    pub profile: FixedProfile,
    pub audit: QuantizationAudit,
    horizon: usize,
    nu: usize,
    /// Row-major `nu × nu`.
    q: Vec<i64>,
    /// Row-major `nu × NX`.
    f_map: Vec<i64>,
    f_const: Vec<i64>,
    /// Integer constraint rows, row-major `rows × nu`.
    a_ineq: Vec<i64>,
    b_map: Vec<i64>,
    b_const: Vec<i64>,
    n_rows: usize,
    qp: CondensedQp,
    rot: [i64; 4],
    flt_a: [i64; 4],
    /// Gain of the sum of transition indicators into the first filter state.
    flt_b: i64,
    phasor: [i64; 2],
    amplitude: i64,
    flt: [i64; 2],
    u_prev: SwitchPosition,
    p_prev: [u8; 3],
    t_star: f64,
    steps_since_renorm: usize,
    renorm_interval: usize,
    ctrl: ControllerParams,
    params: PerUnitParams,
    shadow_osc: OscState,
    shadow_flt: FilterState,
}

impl FixedController {
    pub fn from_float(c: &Controller, profile: FixedProfile) -> Result<Self> {
        profile.validate()?;
        let qp = match &c.policy {
            Policy::Adp(qp) => qp.as_ref().clone(),
            Policy::Baseline { .. } => {
                return Err(Error::Config(
                    "fixed-point profile is only available for the ADP controller".into(),
                ))
            }
        };
        let nu = qp.q.nrows();
        let mut sat = 0;
        let q = quantize_all(qp.q.transpose().iter().copied(), profile.coeff, &mut sat);
        let f_map = quantize_all(qp.f_map.transpose().iter().copied(), profile.coeff, &mut sat);
        let f_const = quantize_all(qp.f_const.iter().copied(), profile.coeff, &mut sat);
        let to_int = |m: &nalgebra::DMatrix<f64>| -> Result<Vec<i64>> {
            m.transpose()
                .iter()
                .map(|&v| {
                    let r = v.round();
                    if (v - r).abs() > 1e-9 {
                        Err(Error::Dimension(format!(
                            "constraint coefficient {v} is not an integer"
                        )))
                    } else {
                        Ok(r as i64)
                    }
                })
                .collect()
        };
        let a_ineq = to_int(&qp.a_ineq)?;
        let b_map = to_int(&qp.b_map)?;
        let b_const = to_int(&nalgebra::DMatrix::from_column_slice(
            qp.b_const.len(),
            1,
            qp.b_const.as_slice(),
        ))?;
        let n_rows = qp.a_ineq.nrows();

        let st = profile.state;
        let r = rotation(c.params.t_hat());
        let rot = [r[(0, 0)], r[(0, 1)], r[(1, 0)], r[(1, 1)]].map(|v| quantize(v, st).raw);
        let (fa, fb) = crate::augment::filter_matrices(&c.ctrl, &c.params);
        let flt_a = [fa[(0, 0)], fa[(0, 1)], fa[(1, 0)], fa[(1, 1)]].map(|v| quantize(v, st).raw);
        let flt_b = quantize(fb[(0, 0)] / c.ctrl.fsw_target, st).raw;

        let mem = &c.memory;
        let phasor = [quantize(mem.osc.phasor[0], st).raw, quantize(mem.osc.phasor[1], st).raw];
        let amplitude = quantize(mem.osc.amplitude, st).raw;
        let flt = [
            quantize(mem.flt.x[0] / c.ctrl.fsw_target, st).raw,
            quantize(mem.flt.x[1] / c.ctrl.fsw_target, st).raw,
        ];
        let audit = QuantizationAudit {
            coefficient_saturations: sat,
            ..Default::default()
        };
        Ok(Self {
            profile,
            audit,
            horizon: qp.horizon,
            nu,
            q,
            f_map,
            f_const,
            a_ineq,
            b_map,
            b_const,
            n_rows,
            qp,
            rot,
            flt_a,
            flt_b,
            phasor,
            amplitude,
            flt,
            u_prev: mem.u_prev,
            p_prev: mem.p_prev,
            t_star: mem.t_star,
            steps_since_renorm: 0,
            renorm_interval: c.params.samples_per_period().round().max(1.0) as usize,
            ctrl: c.ctrl,
            params: c.params,
            shadow_osc: mem.osc,
            shadow_flt: mem.flt,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn st(&self) -> FixedFormat {
        self.profile.state
    }

    fn mul_state(&mut self, a: i64, b: i64) -> i64 {
        let st = self.st();
        let (v, s) = st.saturate(shift_round(a as i128 * b as i128, st.frac_bits));
        self.audit.saturations += s as u64;
        v
    }

    fn dot_state(&mut self, a: &[i64], b: &[i64]) -> i64 {
        let st = self.st();
        let acc: i128 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| shift_round(x as i128 * y as i128, st.frac_bits))
            .sum();
        let (v, s) = st.saturate(acc);
        self.audit.saturations += s as u64;
        v
    }

    fn renormalize(&mut self) {
        let fb = self.st().frac_bits;
        let n2 = self.phasor[0] as i128 * self.phasor[0] as i128 + self.phasor[1] as i128 * self.phasor[1] as i128;
        let norm = n2.isqrt();
        if norm == 0 {
            return;
        }
        for v in &mut self.phasor {
            let num = (*v as i128) << (fb + 1);
            // (2·num/norm + 1) / 2 rounds half away from zero
            let q = num / norm;
            *v = ((q + q.signum()) / 2) as i64;
        }
        self.audit.oscillator_renormalizations += 1;
    }

    /// Oscillator and filter update followed by the quantized initial state.
    pub fn initial_state(&mut self, t_star: f64, x_ph: &PhysState) -> Result<Vec<i64>> {
        let st = self.st();
        let rot = self.rot;
        let ph = self.phasor;
        self.phasor = [self.dot_state(&rot[0..2], &ph), self.dot_state(&rot[2..4], &ph)];
        let rotated = step_oscillator(&self.shadow_osc, &self.params);
        if t_star != self.t_star {
            let reset = reset_oscillator(t_star, &rotated, &self.ctrl)?;
            let q = quantize(reset.amplitude, st);
            self.audit.saturations += q.saturated as u64;
            self.amplitude = q.raw;
            self.shadow_osc = reset;
        } else {
            self.shadow_osc = rotated;
        }
        self.t_star = t_star;
        self.steps_since_renorm += 1;
        if self.steps_since_renorm >= self.renorm_interval {
            self.steps_since_renorm = 0;
            self.renormalize();
        }

        let fa = self.flt_a;
        let fx = self.flt;
        let psum: i64 = self.p_prev.iter().map(|&p| p as i64).sum();
        let (b0, s) = st.saturate(self.flt_b as i128 * psum as i128);
        self.audit.saturations += s as u64;
        let x0 = self.dot_state(&fa[0..2], &fx);
        let x1 = self.dot_state(&fa[2..4], &fx);
        let (x0, s) = st.saturate(x0 as i128 + b0 as i128);
        self.audit.saturations += s as u64;
        self.flt = [x0, x1];
        self.shadow_flt = step_filter(&self.shadow_flt, self.p_prev, &self.ctrl, &self.params);

        let mut x = vec![0i64; NX];
        let phys = x_ph.to_vector();
        for k in 0..4 {
            let q = quantize(phys[k], st);
            self.audit.saturations += q.saturated as u64;
            let err = (q.to_f64() - phys[k]).abs() / st.resolution();
            self.audit.max_input_error_lsb = self.audit.max_input_error_lsb.max(err);
            x[PHYS.start + k] = q.raw;
        }
        let amp = self.amplitude;
        x[OSC.start] = self.mul_state(amp, self.phasor[0]);
        x[OSC.start + 1] = self.mul_state(amp, self.phasor[1]);
        x[FLT.start] = self.flt[0];
        x[FLT.start + 1] = self.flt[1];
        x[CONST] = st.one();
        let up = self.u_prev.phases();
        for k in 0..3 {
            x[UPREV.start + k] = up[k] as i64 * st.one();
        }

        let osc_ref = self.shadow_osc.x_osc();
        let drift = (Vector2::new(x[OSC.start] as f64, x[OSC.start + 1] as f64) * st.resolution() - osc_ref).amax();
        self.audit.max_oscillator_drift = self.audit.max_oscillator_drift.max(drift);
        let fdrift = (self.flt[1] as f64 * st.resolution() * self.ctrl.fsw_target - self.shadow_flt.f_hat()).abs();
        self.audit.max_filter_drift_hz = self.audit.max_filter_drift_hz.max(fdrift);
        Ok(x)
    }

    /// Linear cost term `f(x₀)` in the cost format; each product is rounded
    /// once.
    pub fn linear_term(&mut self, x0: &[i64]) -> Vec<i64> {
        let (cf, st, cost) = (self.profile.coeff, self.st(), self.profile.cost);
        let shift = st.frac_bits;
        debug_assert_eq!(cf.frac_bits, cost.frac_bits);
        let mut f = Vec::with_capacity(self.nu);
        for j in 0..self.nu {
            let mut acc = self.f_const[j] as i128;
            for (k, &xk) in x0.iter().enumerate().take(NX) {
                acc += shift_round(self.f_map[j * NX + k] as i128 * xk as i128, shift);
            }
            let (v, s) = cost.saturate(acc);
            self.audit.saturations += s as u64;
            f.push(v);
        }
        f
    }

    /// Cost mantissa of every candidate, `None` for infeasible ones.
    pub fn candidate_costs(&mut self, x0: &[i64]) -> Vec<Option<i64>> {
        let f = self.linear_term(x0);
        let one = self.st().one();
        let b: Vec<i128> = (0..self.n_rows)
            .map(|r| {
                let lin: i128 = (0..NX).map(|k| self.b_map[r * NX + k] as i128 * x0[k] as i128).sum();
                lin + self.b_const[r] as i128 * one as i128
            })
            .collect();
        let cost_fmt = self.profile.cost;
        let mut out = Vec::with_capacity(self.qp.candidate_count());
        let mut u = vec![0i64; self.nu];
        for i in 0..self.qp.candidate_count() {
            let uf = self.qp.input_sequence(i, self.u_prev);
            for (d, s) in u.iter_mut().zip(uf.iter()) {
                *d = *s as i64;
            }
            let feasible = (0..self.n_rows).all(|r| {
                let lhs: i128 = (0..self.nu)
                    .map(|j| self.a_ineq[r * self.nu + j] as i128 * u[j] as i128)
                    .sum();
                lhs * one as i128 <= b[r]
            });
            if !feasible {
                out.push(None);
                continue;
            }
            let mut acc: i128 = 0;
            for j in 0..self.nu {
                if u[j] == 0 {
                    continue;
                }
                let row: i128 = (0..self.nu)
                    .map(|k| self.q[j * self.nu + k] as i128 * u[k] as i128)
                    .sum();
                acc += u[j] as i128 * (row + 2 * f[j] as i128);
            }
            let (v, s) = cost_fmt.saturate(acc);
            self.audit.saturations += s as u64;
            self.audit.cost_evaluations += 1;
            out.push(Some(v));
        }
        out
    }

    pub fn decide(&mut self, x0: &[i64]) -> Result<ControlDecision> {
        let costs = self.candidate_costs(x0);
        let mut best: Option<(usize, i64)> = None;
        let mut feasible = 0;
        for (i, c) in costs.iter().enumerate() {
            if let Some(c) = *c {
                feasible += 1;
                if best.is_none_or(|(_, b)| c <= b) {
                    best = Some((i, c));
                }
            }
        }
        let (index, j) = best.ok_or(Error::NoFeasibleCandidate(costs.len()))?;
        let u = self.qp.input_sequence(index, self.u_prev);
        Ok(ControlDecision {
            u_sw: self.qp.table[index][0],
            p: [u[3] as u8, u[4] as u8, u[5] as u8],
            j_min: j as f64 * self.profile.cost.resolution(),
            index,
            candidates_evaluated: costs.len(),
            feasible_count: feasible,
        })
    }

    /// Dequantized copy of the internal state, for comparisons.
    pub fn memory(&self) -> ControllerMemory {
        let r = self.st().resolution();
        ControllerMemory {
            osc: OscState {
                phasor: Vector2::new(self.phasor[0] as f64 * r, self.phasor[1] as f64 * r),
                amplitude: self.amplitude as f64 * r,
            },
            flt: FilterState {
                x: Vector2::new(self.flt[0] as f64, self.flt[1] as f64) * (r * self.ctrl.fsw_target),
            },
            p_prev: self.p_prev,
            u_prev: self.u_prev,
            t_star: self.t_star,
        }
    }

    pub fn dequantize_state(&self, x: &[i64]) -> StateVec {
        let r = self.st().resolution();
        StateVec::from_iterator(x.iter().map(|&v| v as f64 * r))
    }
}

impl DriveController for FixedController {
    fn step(&mut self, t_star: f64, x_ph: &PhysState) -> Result<ControlDecision> {
        let x0 = self.initial_state(t_star, x_ph)?;
        let d = self.decide(&x0)?;
        self.u_prev = d.u_sw;
        self.p_prev = d.p;
        self.audit.steps += 1;
        Ok(d)
    }

    fn reference(&self) -> Vector2<f64> {
        let r = self.st().resolution();
        let a = self.amplitude as f64 * r;
        Vector2::new(self.phasor[0] as f64, self.phasor[1] as f64) * (r * a)
    }

    fn f_hat(&self) -> f64 {
        self.flt[1] as f64 * self.st().resolution() * self.ctrl.fsw_target
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adp::QuadValueFunction;
    use crate::augment::assemble_augmented;
    use crate::model::{build_continuous, discretize};
    use crate::sim::steady_initial_condition;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const Q222: FixedFormat = FixedFormat::q(2, 22);

    #[test]
    fn quantize_examples() {
        let a = quantize(0.5, Q222);
        assert_eq!(a.raw, 1 << 21);
        assert!(!a.saturated);
        assert_eq!(quantize((-23f64).exp2(), Q222).raw, 0);
        assert_eq!(quantize(3.0 * (-23f64).exp2(), Q222).raw, 2);
        let s = quantize(5.0, Q222);
        assert!(s.saturated);
        assert!((s.to_f64() - 1.999_999_76).abs() < 1e-8);
        assert_eq!(quantize(-5.0, Q222).to_f64(), -2.0);
        assert_eq!(quantize(7.4, FixedFormat::q(4, 0)).raw, 7);
        assert!(FixedFormat::q(40, 30).validate().is_err());
        assert_eq!(FixedFormat::q(4, 0).max_raw(), 7);
    }

    #[test]
    fn shift_round_ties_to_even() {
        assert_eq!(shift_round(5, 1), 2);
        assert_eq!(shift_round(7, 1), 4);
        assert_eq!(shift_round(-5, 1), -2);
        assert_eq!(shift_round(-7, 1), -4);
        assert_eq!(shift_round(6, 2), 2);
        assert_eq!(shift_round(-6, 2), -2);
    }

    proptest! {
        #[test]
        fn quantize_error_within_half_lsb(x in -1.99f64..1.99) {
            let q = quantize(x, Q222);
            prop_assert!(!q.saturated);
            prop_assert!((q.to_f64() - x).abs() <= 0.5 * Q222.resolution());
        }

        #[test]
        fn shift_round_matches_float(v in -1i64<<40..1i64<<40, s in 1u32..20) {
            let exact = v as f64 / (s as f64).exp2();
            prop_assert_eq!(shift_round(v as i128, s) as f64, exact.round_ties_even());
        }
    }

    fn controller(tail: &QuadValueFunction, n: usize) -> Controller {
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
        let model = assemble_augmented(&dm, &params, &ctrl).unwrap();
        let (mem, _) = steady_initial_condition(&params, &ctrl, 1.0, 1.0);
        Controller::adp(model, params, ctrl, tail, n, mem).unwrap()
    }

    fn tail(rng: &mut StdRng) -> QuadValueFunction {
        let m = nalgebra::SMatrix::<f64, NX, NX>::from_fn(|_, _| rng.random_range(-2.0..2.0));
        let mut p = m.transpose() * m;
        p.row_mut(CONST).fill(0.0);
        p.column_mut(CONST).fill(0.0);
        let mut q = StateVec::from_fn(|_, _| rng.random_range(-3.0..3.0));
        q[CONST] = 0.0;
        QuadValueFunction { p, q, r: 0.0 }
    }

    #[test]
    fn costs_within_rounding_bound_of_dequantized_float() {
        let mut rng = StdRng::seed_from_u64(31);
        for n in 1..=2 {
            let c = controller(&tail(&mut rng), n);
            let mut fc = FixedController::from_float(&c, FixedProfile::default()).unwrap();
            let res = fc.profile.cost.resolution();
            let qd = nalgebra::DMatrix::from_row_slice(fc.nu, fc.nu, &fc.q).map(|v| v as f64 * res);
            let fm = nalgebra::DMatrix::from_row_slice(fc.nu, NX, &fc.f_map).map(|v| v as f64 * res);
            let f0 = nalgebra::DVector::from_vec(fc.f_const.clone()).map(|v| v as f64 * res);
            for _ in 0..20 {
                let x_ph = PhysState::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                let x0 = fc.initial_state(1.0, &x_ph).unwrap();
                let xd = nalgebra::DVector::from_iterator(NX, fc.dequantize_state(&x0).iter().copied());
                let f = &fm * &xd + &f0;
                let costs = fc.candidate_costs(&x0);
                for (i, c) in costs.iter().enumerate() {
                    let Some(c) = c else { continue };
                    let u = fc.qp.input_sequence(i, fc.u_prev);
                    let exact = (u.transpose() * &qd * &u)[0] + 2.0 * f.dot(&u);
                    let macs = u.iter().map(|v| v.abs()).sum::<f64>() * 2.0 * NX as f64;
                    assert!(
                        (*c as f64 * res - exact).abs() <= res * macs.max(1.0),
                        "candidate {i}: {} vs {exact}",
                        *c as f64 * res
                    );
                }
            }
        }
    }

    #[test]
    fn zero_state_ranking_matches_float() {
        let mut rng = StdRng::seed_from_u64(32);
        let t = tail(&mut rng);
        let c = controller(&t, 1);
        let mut fc = FixedController::from_float(&c, FixedProfile::default()).unwrap();
        let mut x0 = vec![0i64; NX];
        x0[CONST] = fc.st().one();
        let fixed = fc.decide(&x0).unwrap();
        let mut xf = StateVec::zeros();
        xf[CONST] = 1.0;
        let Policy::Adp(qp) = &c.policy else { unreachable!() };
        let float = crate::mpc::exhaustive_solve(qp, &xf, SwitchPosition::ZERO).unwrap();
        assert_eq!(fixed.u_sw, float.u_sw);
        assert_eq!(fixed.feasible_count, 27);
    }

    #[test]
    fn renormalization_restores_unit_phasor() {
        let mut rng = StdRng::seed_from_u64(33);
        let c = controller(&tail(&mut rng), 1);
        let mut fc = FixedController::from_float(&c, FixedProfile::default()).unwrap();
        fc.phasor = [quantize(0.6 * 1.01, Q222).raw, quantize(-0.8 * 1.01, Q222).raw];
        fc.renormalize();
        let n = ((fc.phasor[0] as f64).powi(2) + (fc.phasor[1] as f64).powi(2)).sqrt() * Q222.resolution();
        assert!((n - 1.0).abs() < 4.0 * Q222.resolution());
    }

    #[test]
    fn deterministic_mantissas() {
        let mut rng = StdRng::seed_from_u64(34);
        let c = controller(&tail(&mut rng), 1);
        let mut a = FixedController::from_float(&c, FixedProfile::default()).unwrap();
        let mut b = a.clone();
        let x = PhysState::new(0.1, -0.95, 0.4, -0.9);
        for _ in 0..2000 {
            assert_eq!(a.step(1.0, &x).unwrap(), b.step(1.0, &x).unwrap());
        }
        assert_eq!(a.phasor, b.phasor);
        assert_eq!(a.flt, b.flt);
        assert_eq!(a.audit, b.audit);
        assert_eq!(a.audit.oscillator_renormalizations, 2);
        assert!(a.audit.max_oscillator_drift < 1e-3);
    }

    #[test]
    fn baseline_has_no_fixed_profile() {
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
        let model = assemble_augmented(&dm, &params, &ctrl).unwrap();
        let (mem, _) = steady_initial_condition(&params, &ctrl, 1.0, 1.0);
        let c = Controller::baseline(model, params, ctrl, 1, 0.01, mem).unwrap();
        assert!(FixedController::from_float(&c, FixedProfile::default()).is_err());
    }
}
