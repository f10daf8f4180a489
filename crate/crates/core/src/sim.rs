//! Closed-loop simulation of controller and plant, with the THD, switching
//! frequency and settling-time metrics.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::adp::QuadValueFunction;
use crate::augment::{assemble_augmented, ControllerParams, FilterState, OscState};
use crate::error::{Error, Result};
use crate::fixed::{FixedController, FixedProfile, QuantizationAudit};
use crate::model::{
    build_continuous, discretize, inverse_clarke, steady_state_flux, steady_state_torque, step_plant, torque,
    PerUnitParams, PhysState, SwitchPosition,
};
use crate::mpc::{ControlDecision, Controller, ControllerMemory};

/// Physical state norm beyond which a run is aborted.
pub const BLOW_UP_LIMIT: f64 = 1e3;
/// Settling band as a fraction of rated torque.
pub const SETTLING_BAND: f64 = 0.05;

/// Anything that picks a switch position once per sampling instant.
pub trait DriveController {
    fn step(&mut self, t_star: f64, x_ph: &PhysState) -> Result<ControlDecision>;
    /// Current reference in αβ after the latest step.
    fn reference(&self) -> Vector2<f64>;
    /// Switching frequency estimate in Hz after the latest step.
    fn f_hat(&self) -> f64;
}

impl DriveController for Controller {
    fn step(&mut self, t_star: f64, x_ph: &PhysState) -> Result<ControlDecision> {
        Controller::step(self, t_star, x_ph)
    }

    fn reference(&self) -> Vector2<f64> {
        Controller::reference(self)
    }

    fn f_hat(&self) -> f64 {
        self.memory.flt.f_hat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerVariant {
    Adp { horizon: usize },
    Baseline { horizon: usize, lambda_u: f64 },
}

impl ControllerVariant {
    pub fn horizon(&self) -> usize {
        match *self {
            ControllerVariant::Adp { horizon } | ControllerVariant::Baseline { horizon, .. } => horizon,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            ControllerVariant::Adp { horizon } => format!("adp-n{horizon}"),
            ControllerVariant::Baseline { horizon, lambda_u } => format!("dmpc-n{horizon}-l{lambda_u}"),
        }
    }
}

/// Torque references are in units of rated torque, i.e. the steady-state
/// torque of the unit-amplitude reference current.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    /// Total length in fundamental periods, warmup included.
    pub duration_periods: usize,
    pub warmup_periods: usize,
    pub initial_torque: f64,
    /// `(seconds after warmup, new torque reference)`, sorted by time.
    pub torque_steps: Vec<(f64, f64)>,
    pub variant: ControllerVariant,
    /// Emulate the controller in fixed point with these word lengths.
    pub fixed_point: Option<FixedProfile>,
}

impl Scenario {
    pub fn steady_state(name: &str, variant: ControllerVariant) -> Self {
        Self {
            name: name.into(),
            duration_periods: 24,
            warmup_periods: 4,
            initial_torque: 1.0,
            torque_steps: Vec::new(),
            variant,
            fixed_point: None,
        }
    }

    /// Steps 1 → 0 at 10 ms and 0 → 1 at 20 ms after warmup.
    pub fn torque_steps(name: &str, variant: ControllerVariant) -> Self {
        Self {
            name: name.into(),
            duration_periods: 6,
            warmup_periods: 4,
            initial_torque: 1.0,
            torque_steps: vec![(0.010, 0.0), (0.020, 1.0)],
            variant,
            fixed_point: None,
        }
    }

    pub fn validate(&self, params: &PerUnitParams) -> Result<()> {
        if self.warmup_periods >= self.duration_periods {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} periods)",
                self.warmup_periods, self.duration_periods
            )));
        }
        let window = (self.duration_periods - self.warmup_periods) as f64 * period_seconds(params);
        let mut last = 0.0;
        for &(t, tq) in &self.torque_steps {
            if !(t >= last && t < window) {
                return Err(Error::Config(format!(
                    "torque step at {t} s outside the recorded window or out of order"
                )));
            }
            if !tq.is_finite() {
                return Err(Error::Config("non-finite torque reference".into()));
            }
            last = t;
        }
        let h = self.variant.horizon();
        if h == 0 || h > crate::mpc::MAX_HORIZON {
            return Err(Error::Config(format!("horizon {h} not supported")));
        }
        Ok(())
    }
}

pub fn period_seconds(params: &PerUnitParams) -> f64 {
    2.0 * std::f64::consts::PI / params.omega_b
}

pub fn samples_per_period(params: &PerUnitParams) -> usize {
    params.samples_per_period().round() as usize
}

/// Recorded sample at the start of sampling interval `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub phys: PhysState,
    pub i_ref: Vector2<f64>,
    pub u: SwitchPosition,
    pub f_hat: f64,
    /// Torque in units of rated torque.
    pub torque: f64,
    pub torque_ref: f64,
}

impl TraceRow {
    pub fn i_abc(&self) -> Vector3<f64> {
        inverse_clarke(&self.phys.current())
    }

    pub fn i_ref_abc(&self) -> Vector3<f64> {
        inverse_clarke(&self.i_ref)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub ts: f64,
    pub samples_per_period: usize,
    /// Switch position applied just before the first recorded row.
    pub u_before: SwitchPosition,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_HEADER: &str = "t,ia,ib,ic,ia_ref,ib_ref,ic_ref,ua,ub,uc,f_hat,torque";

impl Trace {
    pub fn write_csv<W: Write>(&self, mut out: W, fingerprint: &str) -> Result<()> {
        writeln!(out, "# fingerprint {fingerprint}")?;
        writeln!(out, "{TRACE_HEADER}")?;
        let mut line = String::new();
        for r in &self.rows {
            line.clear();
            let (i, ir, u) = (r.i_abc(), r.i_ref_abc(), r.u.phases());
            write!(
                line,
                "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{},{:.6e},{:.9e}",
                r.t, i[0], i[1], i[2], ir[0], ir[1], ir[2], u[0], u[1], u[2], r.f_hat, r.torque
            )
            .expect("formatting into a String");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn inputs(&self) -> Vec<SwitchPosition> {
        self.rows.iter().map(|r| r.u).collect()
    }

    /// Largest per-phase jump between consecutive applied positions.
    pub fn max_phase_jump(&self) -> i8 {
        let mut prev = self.u_before;
        let mut worst = 0;
        for r in &self.rows {
            worst = worst.max(r.u.max_step(&prev));
            prev = r.u;
        }
        worst
    }
}

/// THD of one phase in percent, `None` when the fundamental vanishes.
pub type Thd = Option<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub thd_phase: [Thd; 3],
    pub thd_mean: Thd,
    pub fsw_measured: f64,
    pub fsw_filter_final: f64,
    /// One entry per torque step, in milliseconds; `None` if never settled.
    pub settling_ms: Vec<Option<f64>>,
    pub max_current_error: f64,
    pub recorded_steps: usize,
}

impl RunMetrics {
    pub fn to_text(&self, fingerprint: &str, label: &str) -> String {
        let fmt = |t: Thd| t.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "# fingerprint {fingerprint}");
        let _ = writeln!(s, "controller = {label}");
        let _ = writeln!(s, "recorded_steps = {}", self.recorded_steps);
        for (k, ph) in ["a", "b", "c"].iter().enumerate() {
            let _ = writeln!(s, "thd_{ph}_percent = {}", fmt(self.thd_phase[k]));
        }
        let _ = writeln!(s, "thd_mean_percent = {}", fmt(self.thd_mean));
        let _ = writeln!(s, "fsw_measured_hz = {:.3}", self.fsw_measured);
        let _ = writeln!(s, "fsw_filter_final_hz = {:.3}", self.fsw_filter_final);
        for (k, st) in self.settling_ms.iter().enumerate() {
            let v = st.map_or("not settled".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "settling_ms_step{} = {v}", k + 1);
        }
        let _ = writeln!(s, "max_current_error = {:.6}", self.max_current_error);
        s
    }
}

/// Spectrum-based THD of a window spanning `periods` whole fundamental
/// periods, in percent. All bins up to Nyquist other than DC and the
/// fundamental count as distortion.
pub fn thd_percent(signal: &[f64], periods: usize) -> Thd {
    let n = signal.len();
    if periods == 0 || n < 2 * periods + 2 {
        return None;
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let fund = buf[periods].norm_sqr();
    let total: f64 = buf[1..=n / 2].iter().map(|c| c.norm_sqr()).sum();
    let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if fund.sqrt() <= 1e-9 * n as f64 * peak.max(1e-300) || fund == 0.0 {
        return None;
    }
    Some(100.0 * ((total - fund).max(0.0) / fund).sqrt())
}

/// Per-phase and mean THD of the recorded stator currents.
pub fn compute_thd(trace: &Trace) -> ([Thd; 3], Thd) {
    let spp = trace.samples_per_period.max(1);
    let periods = trace.rows.len() / spp;
    let len = periods * spp;
    let mut per = [None; 3];
    for (ph, slot) in per.iter_mut().enumerate() {
        let sig: Vec<f64> = trace.rows[..len].iter().map(|r| r.i_abc()[ph]).collect();
        *slot = thd_percent(&sig, periods);
    }
    let mean = if per.iter().all(|t| t.is_some()) {
        Some(per.iter().map(|t| t.unwrap()).sum::<f64>() / 3.0)
    } else {
        None
    };
    (per, mean)
}

/// Device-averaged switching frequency over the whole trace.
pub fn compute_fsw(trace: &Trace) -> f64 {
    if trace.rows.is_empty() {
        return 0.0;
    }
    let mut prev = trace.u_before;
    let mut count = 0i64;
    for r in &trace.rows {
        let (a, b) = (r.u.phases(), prev.phases());
        count += (0..3).map(|k| (a[k] - b[k]).abs() as i64).sum::<i64>();
        prev = r.u;
    }
    count as f64 / (12.0 * trace.rows.len() as f64 * trace.ts)
}

/// Time from `start` until the torque first enters `target ± band` before
/// `end` (exclusive), in seconds. The switching ripple alone exceeds a 5%
/// band, so the instantaneous torque never stays inside it.
pub fn settling_time(trace: &Trace, start: usize, end: usize, target: f64, band: f64) -> Option<f64> {
    let end = end.min(trace.rows.len());
    (start..end)
        .find(|&k| (trace.rows[k].torque - target).abs() <= band)
        .map(|k| (k - start) as f64 * trace.ts)
}

/// Initial controller memory and plant state at the periodic steady state of
/// the reference with amplitude `amplitude`.
pub fn steady_initial_condition(
    params: &PerUnitParams,
    ctrl: &ControllerParams,
    amplitude: f64,
    t_star: f64,
) -> (ControllerMemory, PhysState) {
    // the controller rotates the oscillator before its first use
    let osc = OscState::at_angle(-params.t_hat(), amplitude);
    let i0 = OscState::at_angle(0.0, amplitude).x_osc();
    let psi = steady_state_flux(&i0, params);
    let mem = ControllerMemory {
        osc,
        flt: FilterState::steady(ctrl.fsw_target, ctrl),
        p_prev: [0; 3],
        u_prev: SwitchPosition::ZERO,
        t_star,
    };
    (mem, PhysState::new(i0[0], i0[1], psi[0], psi[1]))
}

/// Controller of either numeric profile.
pub enum AnyController {
    Float(Box<Controller>),
    Fixed(Box<FixedController>),
}

impl AnyController {
    pub fn as_dyn(&mut self) -> &mut dyn DriveController {
        match self {
            AnyController::Float(c) => c.as_mut(),
            AnyController::Fixed(c) => c.as_mut(),
        }
    }

    pub fn audit(&self) -> Option<&QuantizationAudit> {
        match self {
            AnyController::Float(_) => None,
            AnyController::Fixed(c) => Some(&c.audit),
        }
    }
}

pub fn build_controller(
    scenario: &Scenario,
    params: &PerUnitParams,
    ctrl: &ControllerParams,
    tail: Option<&QuadValueFunction>,
    memory: ControllerMemory,
) -> Result<AnyController> {
    let dm = discretize(&build_continuous(params)?, params)?;
    let model = assemble_augmented(&dm, params, ctrl)?;
    let float = match scenario.variant {
        ControllerVariant::Adp { horizon } => {
            let tail = tail.ok_or_else(|| Error::Config("ADP controller needs a tail cost".into()))?;
            Controller::adp(model, *params, *ctrl, tail, horizon, memory)?
        }
        ControllerVariant::Baseline { horizon, lambda_u } => {
            Controller::baseline(model, *params, *ctrl, horizon, lambda_u, memory)?
        }
    };
    if let Some(profile) = scenario.fixed_point {
        Ok(AnyController::Fixed(Box::new(FixedController::from_float(
            &float, profile,
        )?)))
    } else {
        Ok(AnyController::Float(Box::new(float)))
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: RunMetrics,
    pub audit: Option<QuantizationAudit>,
}

/// Steps plant and controller over the scenario and evaluates the metrics on
/// the post-warmup window.
pub fn run_closed_loop(
    scenario: &Scenario,
    params: &PerUnitParams,
    ctrl: &ControllerParams,
    tail: Option<&QuadValueFunction>,
) -> Result<RunOutput> {
    scenario.validate(params)?;
    let ctrl_run = *ctrl;
    let dm = discretize(&build_continuous(params)?, params)?;
    let amp0 = ctrl_run.ref_amplitude * scenario.initial_torque;
    let (memory, mut x) = steady_initial_condition(params, &ctrl_run, amp0, scenario.initial_torque);
    let mut controller = build_controller(scenario, params, &ctrl_run, tail, memory)?;
    let torque_scale = steady_state_torque(ctrl_run.ref_amplitude, params);
    if torque_scale.abs() < 1e-12 {
        return Err(Error::InvalidParameter(
            "reference produces no steady-state torque".into(),
        ));
    }

    let spp = samples_per_period(params);
    let total = scenario.duration_periods * spp;
    let warm = scenario.warmup_periods * spp;
    let step_idx: Vec<(usize, f64)> = scenario
        .torque_steps
        .iter()
        .map(|&(t, tq)| (warm + (t / params.ts).round() as usize, tq))
        .collect();

    let mut rows = Vec::with_capacity(total - warm);
    let mut u_before = SwitchPosition::ZERO;
    let mut u_last = SwitchPosition::ZERO;
    let mut t_star = scenario.initial_torque;
    let mut next = 0;
    for k in 0..total {
        while next < step_idx.len() && step_idx[next].0 == k {
            t_star = step_idx[next].1;
            next += 1;
        }
        let c = controller.as_dyn();
        let d = c.step(t_star, &x)?;
        if k == warm {
            u_before = u_last;
        }
        if k >= warm {
            rows.push(TraceRow {
                t: (k - warm) as f64 * params.ts,
                phys: x,
                i_ref: c.reference(),
                u: d.u_sw,
                f_hat: c.f_hat(),
                torque: torque(&x, params) / torque_scale,
                torque_ref: t_star,
            });
        }
        u_last = d.u_sw;
        x = step_plant(&x, d.u_sw, &dm);
        let norm = x.norm();
        if !norm.is_finite() || norm > BLOW_UP_LIMIT {
            return Err(Error::StateBlowUp { step: k, norm });
        }
    }

    let trace = Trace {
        ts: params.ts,
        samples_per_period: spp,
        u_before,
        rows,
    };
    let metrics = evaluate(
        &trace,
        &step_idx.iter().map(|&(k, tq)| (k - warm, tq)).collect::<Vec<_>>(),
    );
    Ok(RunOutput {
        trace,
        metrics,
        audit: controller.audit().cloned(),
    })
}

/// Metrics of a recorded trace; `steps` are row indices with new targets.
pub fn evaluate(trace: &Trace, steps: &[(usize, f64)]) -> RunMetrics {
    let (thd_phase, thd_mean) = compute_thd(trace);
    let settling_ms = steps
        .iter()
        .enumerate()
        .map(|(j, &(k, tq))| {
            let end = steps.get(j + 1).map_or(trace.rows.len(), |s| s.0);
            settling_time(trace, k, end, tq, SETTLING_BAND).map(|s| s * 1e3)
        })
        .collect();
    let max_current_error = trace
        .rows
        .iter()
        .map(|r| (r.phys.current() - r.i_ref).norm())
        .fold(0.0, f64::max);
    RunMetrics {
        thd_phase,
        thd_mean,
        fsw_measured: compute_fsw(trace),
        fsw_filter_final: trace.rows.last().map_or(0.0, |r| r.f_hat),
        settling_ms,
        max_current_error,
        recorded_steps: trace.rows.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn sine(n: usize, periods: usize, h: usize, amp: f64, phase: f64) -> Vec<f64> {
        (0..n)
            .map(|k| amp * (2.0 * PI * (h * periods) as f64 * k as f64 / n as f64 + phase).sin())
            .collect()
    }

    #[test]
    fn thd_of_sinusoids() {
        let s = sine(16000, 20, 1, 1.0, 0.3);
        assert!(thd_percent(&s, 20).unwrap() < 1e-9);
        let h5 = sine(16000, 20, 5, 0.05, 1.1);
        let mix: Vec<f64> = s.iter().zip(&h5).map(|(a, b)| a + b).collect();
        assert_relative_eq!(thd_percent(&mix, 20).unwrap(), 5.0, epsilon = 1e-9);
        assert_eq!(thd_percent(&vec![0.0; 16000], 20), None);
    }

    #[test]
    fn thd_of_square_wave() {
        let n = 16000;
        let sq: Vec<f64> = (0..n).map(|k| if (k % 800) < 400 { 1.0 } else { -1.0 }).collect();
        let oracle = (PI * PI / 8.0 - 1.0).sqrt() * 100.0;
        assert_relative_eq!(thd_percent(&sq, 20).unwrap(), oracle, epsilon = 0.05);
    }

    #[test]
    fn thd_is_invariant_to_window_rotation() {
        let s: Vec<f64> = (0..8000)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / 800.0;
                t.sin() + 0.03 * (7.0 * t).cos() + 0.01 * (11.0 * t + 0.2).sin()
            })
            .collect();
        let a = thd_percent(&s, 10).unwrap();
        let mut r = s.clone();
        r.rotate_left(137);
        assert_relative_eq!(a, thd_percent(&r, 10).unwrap(), epsilon = 1e-9);
    }

    fn trace_with_inputs(u: Vec<SwitchPosition>) -> Trace {
        let rows = u
            .into_iter()
            .enumerate()
            .map(|(k, u)| TraceRow {
                t: k as f64 * 25e-6,
                phys: PhysState::new(0.0, 0.0, 0.0, 0.0),
                i_ref: Vector2::zeros(),
                u,
                f_hat: 0.0,
                torque: 0.0,
                torque_ref: 0.0,
            })
            .collect();
        Trace {
            ts: 25e-6,
            samples_per_period: 800,
            u_before: SwitchPosition::ZERO,
            rows,
        }
    }

    #[test]
    fn fsw_examples() {
        assert_eq!(compute_fsw(&trace_with_inputs(vec![SwitchPosition::ZERO; 800])), 0.0);
        let one = SwitchPosition::new(1, 0, 0).unwrap();
        let toggling = (0..40_000)
            .map(|k| if k % 2 == 0 { one } else { SwitchPosition::ZERO })
            .collect();
        assert_relative_eq!(
            compute_fsw(&trace_with_inputs(toggling)),
            40_000.0 / 12.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn settling_examples() {
        let mut t = trace_with_inputs(vec![SwitchPosition::ZERO; 100]);
        for (k, r) in t.rows.iter_mut().enumerate() {
            r.torque = if k < 40 { 1.0 } else { 0.0 };
        }
        t.rows[45].torque = 0.5;
        assert_eq!(settling_time(&t, 50, 100, 0.0, 0.05), Some(0.0));
        assert_relative_eq!(settling_time(&t, 30, 100, 0.0, 0.05).unwrap(), 10.0 * 25e-6);
        assert_eq!(settling_time(&t, 30, 100, 0.5, 0.05), Some(15.0 * 25e-6));
        assert_eq!(settling_time(&t, 30, 100, 0.3, 0.05), None);
        assert_eq!(settling_time(&t, 100, 100, 0.0, 0.05), None);
    }

    #[test]
    fn zero_reference_holds_zero_input() {
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let mut sc = Scenario::steady_state(
            "zero",
            ControllerVariant::Baseline {
                horizon: 1,
                lambda_u: 0.01,
            },
        );
        sc.initial_torque = 0.0;
        sc.duration_periods = 3;
        sc.warmup_periods = 1;
        let out = run_closed_loop(&sc, &params, &ctrl, None).unwrap();
        assert!(out.trace.rows.iter().all(|r| r.u == SwitchPosition::ZERO));
        assert_eq!(out.metrics.thd_mean, None);
        assert_eq!(out.metrics.fsw_measured, 0.0);
    }

    #[test]
    fn unforced_plant_cost_does_not_grow() {
        let params = PerUnitParams::default();
        let dm = discretize(&build_continuous(&params).unwrap(), &params).unwrap();
        let mut x = PhysState::new(0.4, -0.7, 0.9, 0.3);
        let mut prev = f64::INFINITY;
        for period in 0..50 {
            let mut peak = 0.0f64;
            for _ in 0..800 {
                x = step_plant(&x, SwitchPosition::ZERO, &dm);
                peak = peak.max(x.current().norm_squared());
            }
            if period > 2 {
                assert!(peak <= prev, "period {period}: {peak} > {prev}");
            }
            prev = peak;
        }
    }

    #[test]
    fn initial_condition_matches_reference() {
        let params = PerUnitParams::default();
        let ctrl = ControllerParams::default();
        let (mem, x) = steady_initial_condition(&params, &ctrl, 1.0, 1.0);
        let rotated = crate::augment::step_oscillator(&mem.osc, &params);
        assert_relative_eq!(rotated.x_osc(), x.current(), epsilon = 1e-12);
    }

    #[test]
    fn scenario_validation() {
        let params = PerUnitParams::default();
        let mut sc = Scenario::torque_steps("x", ControllerVariant::Adp { horizon: 1 });
        assert!(sc.validate(&params).is_ok());
        sc.warmup_periods = sc.duration_periods;
        assert!(sc.validate(&params).is_err());
        let mut sc = Scenario::torque_steps("x", ControllerVariant::Adp { horizon: 1 });
        sc.torque_steps.push((1.0, 0.0));
        assert!(sc.validate(&params).is_err());
    }
}
