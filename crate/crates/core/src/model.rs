//! Per-unit model of the three-level NPC inverter and the induction machine.
//!
//! Time is normalized by the base angular velocity, so one unit of model
//! time is `1/omega_b` seconds and the sampling interval used for
//! discretization is `ts * omega_b`.

use nalgebra::{Matrix2x4, Matrix4, Matrix4x3, SMatrix, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Machine and inverter constants in per unit, plus the sampling data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerUnitParams {
    pub rs: f64,
    pub rr: f64,
    pub xls: f64,
    pub xlr: f64,
    pub xm: f64,
    pub vdc: f64,
    /// Electrical rotor speed, held constant over a run.
    pub omega_r: f64,
    /// Controller sampling period in seconds.
    pub ts: f64,
    /// Base angular velocity in rad/s.
    pub omega_b: f64,
    /// Carried for completeness; unused while the rotor speed is frozen.
    pub load_torque: f64,
    /// Carried for completeness; unused while the rotor speed is frozen.
    pub inertia: f64,
}

impl Default for PerUnitParams {
    fn default() -> Self {
        Self {
            rs: 0.0108,
            rr: 0.0091,
            xls: 0.1493,
            xlr: 0.1104,
            xm: 2.3489,
            vdc: 1.930,
            // Slip at which a unit stator current produces unit rotor flux.
            omega_r: 0.9921,
            ts: 25e-6,
            omega_b: 2.0 * std::f64::consts::PI * 50.0,
            load_torque: 0.0,
            inertia: 0.0,
        }
    }
}

impl PerUnitParams {
    pub fn xs(&self) -> f64 {
        self.xls + self.xm
    }

    pub fn xr(&self) -> f64 {
        self.xlr + self.xm
    }

    /// `Xs·Xr − Xm²`.
    pub fn det(&self) -> f64 {
        self.xs() * self.xr() - self.xm * self.xm
    }

    /// Transient stator time constant.
    pub fn tau_s(&self) -> f64 {
        let xr = self.xr();
        xr * self.det() / (self.rs * xr * xr + self.rr * self.xm * self.xm)
    }

    /// Rotor time constant.
    pub fn tau_r(&self) -> f64 {
        self.xr() / self.rr
    }

    /// Sampling interval in per-unit time.
    pub fn t_hat(&self) -> f64 {
        self.ts * self.omega_b
    }

    /// Number of controller samples in one fundamental period (1 pu frequency).
    pub fn samples_per_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.t_hat()
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rs,
            self.rr,
            self.xls,
            self.xlr,
            self.xm,
            self.vdc,
            self.omega_r,
            self.ts,
            self.omega_b,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite machine parameter".into()));
        }
        let checks = [
            (self.det() > 0.0, "Xs·Xr − Xm² must be positive"),
            (self.tau_s() > 0.0, "tau_s must be positive"),
            (self.tau_r() > 0.0, "tau_r must be positive"),
            (self.ts > 0.0, "Ts must be positive"),
            (self.omega_b > 0.0, "omega_b must be positive"),
            (self.vdc > 0.0, "Vdc must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidParameter(msg.into()));
            }
        }
        Ok(())
    }
}

/// Stator current and rotor flux in the stationary αβ frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhysState {
    pub is_alpha: f64,
    pub is_beta: f64,
    pub psi_alpha: f64,
    pub psi_beta: f64,
}

impl PhysState {
    pub fn new(is_alpha: f64, is_beta: f64, psi_alpha: f64, psi_beta: f64) -> Self {
        Self {
            is_alpha,
            is_beta,
            psi_alpha,
            psi_beta,
        }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.is_alpha, self.is_beta, self.psi_alpha, self.psi_beta)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn current(&self) -> Vector2<f64> {
        Vector2::new(self.is_alpha, self.is_beta)
    }

    pub fn flux(&self) -> Vector2<f64> {
        Vector2::new(self.psi_alpha, self.psi_beta)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Three-phase switch position, each leg in {−1, 0, 1}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct SwitchPosition([i8; 3]);

impl SwitchPosition {
    pub const ZERO: SwitchPosition = SwitchPosition([0, 0, 0]);

    pub fn new(ua: i8, ub: i8, uc: i8) -> Result<Self> {
        Self::from_array([ua, ub, uc])
    }

    pub fn from_array(u: [i8; 3]) -> Result<Self> {
        if u.iter().all(|v| (-1..=1).contains(v)) {
            Ok(Self(u))
        } else {
            Err(Error::InvalidParameter(format!(
                "switch position {u:?} outside {{-1,0,1}}"
            )))
        }
    }

    pub fn phases(&self) -> [i8; 3] {
        self.0
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.0[0] as f64, self.0[1] as f64, self.0[2] as f64)
    }

    /// All 27 positions in lexicographic order (phase a slowest, −1 < 0 < 1).
    pub fn all() -> impl Iterator<Item = SwitchPosition> {
        (0..27).map(|i| {
            let digit = |d: i32| ((i / d) % 3) as i8 - 1;
            SwitchPosition([digit(9), digit(3), digit(1)])
        })
    }

    /// Largest per-phase step between two positions.
    pub fn max_step(&self, other: &SwitchPosition) -> i8 {
        (0..3).map(|k| (self.0[k] - other.0[k]).abs()).max().unwrap_or(0)
    }
}

/// Clarke transform matrix `P`.
pub fn clarke_matrix() -> SMatrix<f64, 2, 3> {
    SMatrix::<f64, 2, 3>::new(1.0, -0.5, -0.5, 0.0, SQRT3 / 2.0, -SQRT3 / 2.0) * (2.0 / 3.0)
}

/// Pseudo-inverse of the Clarke transform.
pub fn inverse_clarke_matrix() -> SMatrix<f64, 3, 2> {
    SMatrix::<f64, 3, 2>::new(1.0, 0.0, -0.5, SQRT3 / 2.0, -0.5, -SQRT3 / 2.0)
}

pub fn clarke(xi_abc: &Vector3<f64>) -> Vector2<f64> {
    clarke_matrix() * xi_abc
}

pub fn inverse_clarke(xi_ab: &Vector2<f64>) -> Vector3<f64> {
    inverse_clarke_matrix() * xi_ab
}

/// Inverter output voltage in αβ for a given switch position.
pub fn inverter_voltage(u: SwitchPosition, params: &PerUnitParams) -> Vector2<f64> {
    clarke(&u.to_vector()) * (params.vdc / 2.0)
}

/// Electromagnetic torque `(Xm/Xr)·(ψr × is)`.
pub fn torque(state: &PhysState, params: &PerUnitParams) -> f64 {
    params.xm / params.xr() * (state.psi_alpha * state.is_beta - state.psi_beta * state.is_alpha)
}

/// Continuous-time model `dx/dt = D x + E u`, `y = F x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub d: Matrix4<f64>,
    pub e: Matrix4x3<f64>,
    pub f: Matrix2x4<f64>,
}

/// Discrete-time model sampled with a zero-order hold on the switch input.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a: Matrix4<f64>,
    pub b: Matrix4x3<f64>,
    pub c: Matrix2x4<f64>,
}

pub fn build_continuous(params: &PerUnitParams) -> Result<ContinuousModel> {
    params.validate()?;
    let tau_s = params.tau_s();
    let tau_r = params.tau_r();
    let det = params.det();
    let xm = params.xm;
    let wr = params.omega_r;

    #[rustfmt::skip]
    let d = Matrix4::new(
        -1.0 / tau_s, 0.0,          xm / (tau_r * det), wr * xm / det,
        0.0,          -1.0 / tau_s, -wr * xm / det,     xm / (tau_r * det),
        xm / tau_r,   0.0,          -1.0 / tau_r,       -wr,
        0.0,          xm / tau_r,   wr,                 -1.0 / tau_r,
    );
    if d.determinant().abs() < f64::EPSILON {
        return Err(Error::Singular("continuous state matrix D"));
    }

    let mut e = Matrix4x3::zeros();
    let gain = params.xr() / det * params.vdc / 2.0;
    e.fixed_view_mut::<2, 3>(0, 0).copy_from(&(clarke_matrix() * gain));

    #[rustfmt::skip]
    let f = Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
    );
    Ok(ContinuousModel { d, e, f })
}

fn inf_norm<const N: usize, const M: usize>(m: &SMatrix<f64, N, M>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const EXPM_TOL: f64 = 1e-12;
const EXPM_MAX_TERMS: usize = 40;

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm<const N: usize>(m: &SMatrix<f64, N, N>) -> Result<SMatrix<f64, N, N>> {
    let norm = inf_norm(m);
    if !norm.is_finite() {
        return Err(Error::ExpmNotConverged);
    }
    let mut squarings = 0u32;
    while norm / 2f64.powi(squarings as i32) > 0.5 {
        squarings += 1;
    }
    let scaled = m / 2f64.powi(squarings as i32);

    let mut sum = SMatrix::<f64, N, N>::identity();
    let mut term = SMatrix::<f64, N, N>::identity();
    let mut converged = false;
    for k in 1..=EXPM_MAX_TERMS {
        term = term * scaled / k as f64;
        sum += term;
        if inf_norm(&term) <= EXPM_TOL * 1e-4 * inf_norm(&sum) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::ExpmNotConverged);
    }
    for _ in 0..squarings {
        sum = sum * sum;
    }
    Ok(sum)
}

/// `Σ_k (M)^k / (k+1)!`, the integral of `exp(M s)` over `s ∈ [0, 1]`.
fn phi1<const N: usize>(m: &SMatrix<f64, N, N>) -> Result<SMatrix<f64, N, N>> {
    let mut sum = SMatrix::<f64, N, N>::identity();
    let mut term = SMatrix::<f64, N, N>::identity();
    for k in 1..=EXPM_MAX_TERMS {
        term = term * m / (k + 1) as f64;
        sum += term;
        if inf_norm(&term) <= EXPM_TOL * 1e-4 * inf_norm(&sum) {
            return Ok(sum);
        }
    }
    Err(Error::ExpmNotConverged)
}

pub fn discretize(cm: &ContinuousModel, params: &PerUnitParams) -> Result<DiscreteModel> {
    let t = params.t_hat();
    let dt = cm.d * t;
    let a = expm(&dt)?;
    let b = if cm.d.iter().all(|v| *v == 0.0) {
        phi1(&dt)? * cm.e * t
    } else {
        let d_inv = cm.d.try_inverse().ok_or(Error::Singular("continuous state matrix D"))?;
        -d_inv * (Matrix4::identity() - a) * cm.e
    };
    Ok(DiscreteModel { a, b, c: cm.f })
}

/// One exact sampling interval of the plant.
pub fn step_plant(state: &PhysState, u: SwitchPosition, dm: &DiscreteModel) -> PhysState {
    PhysState::from_vector(&(dm.a * state.to_vector() + dm.b * u.to_vector()))
}

/// Rotation of a 2-vector by `angle` radians.
pub fn rotation(angle: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// Periodic steady-state rotor flux for a stator current phasor rotating at
/// 1 pu electrical frequency.
pub fn steady_state_flux(current: &Vector2<f64>, params: &PerUnitParams) -> Vector2<f64> {
    // ψ = Xm·I / (1 + j·τr·(1 − ωr)) in complex αβ notation
    let k = params.tau_r() * (1.0 - params.omega_r);
    let den = 1.0 + k * k;
    let (ia, ib) = (current[0], current[1]);
    Vector2::new(params.xm * (ia + k * ib) / den, params.xm * (ib - k * ia) / den)
}

/// Torque in periodic steady state when the stator current is a rotating
/// phasor of the given amplitude.
pub fn steady_state_torque(amplitude: f64, params: &PerUnitParams) -> f64 {
    let i = Vector2::new(0.0, -amplitude);
    let psi = steady_state_flux(&i, params);
    torque(&PhysState::new(i[0], i[1], psi[0], psi[1]), params)
}
