//! Navigation sensor simulation and unscented Kalman filter fusion.
//!
//! The filter state is `[x, y, v, a, psi, omega]` under the CTRA process
//! model. Measurements are applied at their own timestamps; the posterior is
//! then propagated to every requested output time (the radar pulse times)
//! without feeding those extrapolations back into the filter.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{rotate, wrap_angle, Vec2};
use crate::kinematics::{ctra_propagate, CtraState};
use crate::scene::{PlatformPose, Trajectory};

pub const STATE_DIM: usize = 6;
pub type StateVector = SVector<f64, STATE_DIM>;
pub type StateCovariance = SMatrix<f64, STATE_DIM, STATE_DIM>;

const PSI: usize = 4;
const JITTER: f64 = 1e-9;

/// Placeholder wheelbase for the bicycle steering relation.
pub const DEFAULT_WHEELBASE: f64 = 2.82;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub a: f64,
    pub psi: f64,
    pub omega: f64,
}

impl NavState {
    pub fn to_vector(&self) -> StateVector {
        StateVector::from([self.x, self.y, self.v, self.a, self.psi, self.omega])
    }

    pub fn from_vector(s: &StateVector) -> Self {
        NavState {
            x: s[0],
            y: s[1],
            v: s[2],
            a: s[3],
            psi: wrap_angle(s[4]),
            omega: s[5],
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Exact CTRA step; `a` and `omega` are carried unchanged.
pub fn ctra_predict(state: &NavState, dt: f64) -> NavState {
    let next = ctra_propagate(
        &CtraState {
            position: state.position(),
            heading: state.psi,
            speed: state.v,
            acceleration: state.a,
            turn_rate: state.omega,
        },
        dt,
    );
    NavState {
        x: next.position.x,
        y: next.position.y,
        v: next.speed,
        a: state.a,
        psi: wrap_angle(next.heading),
        omega: state.omega,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SensorKind {
    ImuAccel,
    Gyro,
    WheelSpeed,
    SteeringAngle,
    GnssPosition,
}

impl SensorKind {
    pub const ALL: [SensorKind; 5] = [
        SensorKind::ImuAccel,
        SensorKind::Gyro,
        SensorKind::WheelSpeed,
        SensorKind::SteeringAngle,
        SensorKind::GnssPosition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SensorKind::ImuAccel => "imu_accel",
            SensorKind::Gyro => "gyro",
            SensorKind::WheelSpeed => "wheel_speed",
            SensorKind::SteeringAngle => "steering_angle",
            SensorKind::GnssPosition => "gnss_position",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        SensorKind::ALL.into_iter().find(|k| k.name() == s)
    }

    fn stream(self) -> u64 {
        self as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reading {
    /// Body-frame longitudinal and lateral acceleration, m/s^2.
    ImuAccel { ax: f64, ay: f64 },
    Gyro { omega: f64 },
    WheelSpeed { v: f64 },
    SteeringAngle { delta: f64 },
    GnssPosition { x: f64, y: f64 },
}

impl Reading {
    pub fn kind(&self) -> SensorKind {
        match self {
            Reading::ImuAccel { .. } => SensorKind::ImuAccel,
            Reading::Gyro { .. } => SensorKind::Gyro,
            Reading::WheelSpeed { .. } => SensorKind::WheelSpeed,
            Reading::SteeringAngle { .. } => SensorKind::SteeringAngle,
            Reading::GnssPosition { .. } => SensorKind::GnssPosition,
        }
    }

    fn values(&self) -> (f64, Option<f64>) {
        match *self {
            Reading::ImuAccel { ax, ay } => (ax, Some(ay)),
            Reading::Gyro { omega } => (omega, None),
            Reading::WheelSpeed { v } => (v, None),
            Reading::SteeringAngle { delta } => (delta, None),
            Reading::GnssPosition { x, y } => (x, Some(y)),
        }
    }

    fn from_values(kind: SensorKind, a: f64, b: Option<f64>) -> Option<Self> {
        Some(match kind {
            SensorKind::ImuAccel => Reading::ImuAccel { ax: a, ay: b? },
            SensorKind::Gyro => Reading::Gyro { omega: a },
            SensorKind::WheelSpeed => Reading::WheelSpeed { v: a },
            SensorKind::SteeringAngle => Reading::SteeringAngle { delta: a },
            SensorKind::GnssPosition => Reading::GnssPosition { x: a, y: b? },
        })
    }

    fn as_vector(&self) -> DVector<f64> {
        match self.values() {
            (a, Some(b)) => DVector::from_vec(vec![a, b]),
            (a, None) => DVector::from_vec(vec![a]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorMeasurement {
    pub tau: f64,
    pub reading: Reading,
    /// Standard deviation the filter assumes for each component.
    pub noise_std: f64,
}

impl SensorMeasurement {
    pub fn kind(&self) -> SensorKind {
        self.reading.kind()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSpec {
    pub rate_hz: f64,
    /// Standard deviation of the Gaussian noise added in simulation.
    pub noise_std: f64,
    /// Standard deviation written into the measurements (what the filter
    /// believes); must be positive.
    pub reported_std: f64,
}

impl SensorSpec {
    pub fn new(rate_hz: f64, noise_std: f64) -> Self {
        SensorSpec {
            rate_hz,
            noise_std,
            reported_std: noise_std,
        }
    }

    fn validate(&self, kind: SensorKind) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::invalid("rate_hz", format!("{} rate must be positive", kind.name())));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std", format!("{} noise must be non-negative", kind.name())));
        }
        if !(self.reported_std > 0.0) {
            return Err(Error::invalid(
                "reported_std",
                format!("{} measurement std must be positive", kind.name()),
            ));
        }
        Ok(())
    }
}

/// Rates and noise levels of the simulated sensor set; `None` disables a sensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSuite {
    pub imu: Option<SensorSpec>,
    pub gyro: Option<SensorSpec>,
    pub wheel: Option<SensorSpec>,
    pub steering: Option<SensorSpec>,
    pub gnss: Option<SensorSpec>,
    pub wheelbase: f64,
    /// GNSS antenna offset in the vehicle frame.
    pub gnss_lever_arm: Vec2,
}

impl Default for SensorSuite {
    fn default() -> Self {
        SensorSuite {
            imu: Some(SensorSpec::new(100.0, 0.05)),
            gyro: Some(SensorSpec::new(100.0, 0.002)),
            wheel: Some(SensorSpec::new(50.0, 0.02)),
            steering: Some(SensorSpec::new(20.0, 0.005)),
            gnss: Some(SensorSpec::new(10.0, 0.05)),
            wheelbase: DEFAULT_WHEELBASE,
            gnss_lever_arm: Vec2::new(2.0, 0.0),
        }
    }
}

impl SensorSuite {
    pub fn get(&self, kind: SensorKind) -> Option<SensorSpec> {
        match kind {
            SensorKind::ImuAccel => self.imu,
            SensorKind::Gyro => self.gyro,
            SensorKind::WheelSpeed => self.wheel,
            SensorKind::SteeringAngle => self.steering,
            SensorKind::GnssPosition => self.gnss,
        }
    }

    pub fn set(&mut self, kind: SensorKind, spec: Option<SensorSpec>) {
        let slot = match kind {
            SensorKind::ImuAccel => &mut self.imu,
            SensorKind::Gyro => &mut self.gyro,
            SensorKind::WheelSpeed => &mut self.wheel,
            SensorKind::SteeringAngle => &mut self.steering,
            SensorKind::GnssPosition => &mut self.gnss,
        };
        *slot = spec;
    }
}

/// Full kinematic state at every pose, with acceleration and turn rate from
/// forward differences (backward at the last pose).
pub fn truth_states(traj: &Trajectory) -> Vec<NavState> {
    let p = traj.poses();
    (0..p.len())
        .map(|k| {
            let (i, j) = match (k + 1 < p.len(), k > 0) {
                (true, _) => (k, k + 1),
                (false, true) => (k - 1, k),
                (false, false) => (k, k),
            };
            let dt = p[j].tau - p[i].tau;
            let (a, omega) = if dt > 0.0 {
                (
                    (p[j].speed - p[i].speed) / dt,
                    wrap_angle(p[j].heading - p[i].heading) / dt,
                )
            } else {
                (0.0, 0.0)
            };
            NavState {
                x: p[k].position.x,
                y: p[k].position.y,
                v: p[k].speed,
                a,
                psi: p[k].heading,
                omega,
            }
        })
        .collect()
}

fn ideal_reading(kind: SensorKind, s: &NavState, suite: &SensorSuite) -> Reading {
    match kind {
        SensorKind::ImuAccel => Reading::ImuAccel {
            ax: s.a,
            ay: s.v * s.omega,
        },
        SensorKind::Gyro => Reading::Gyro { omega: s.omega },
        SensorKind::WheelSpeed => Reading::WheelSpeed { v: s.v },
        SensorKind::SteeringAngle => Reading::SteeringAngle {
            delta: steering_angle(s, suite.wheelbase),
        },
        SensorKind::GnssPosition => {
            let p = s.position() + rotate(suite.gnss_lever_arm, s.psi);
            Reading::GnssPosition { x: p.x, y: p.y }
        }
    }
}

fn steering_angle(s: &NavState, wheelbase: f64) -> f64 {
    (wheelbase * s.omega).atan2(s.v)
}

/// Samples every enabled sensor at the pose closest to its rate (every
/// `round(prf / rate)` poses) and adds seeded Gaussian noise. Each sensor kind
/// draws from its own random stream, so enabling or disabling one sensor does
/// not change the others. Output is ordered by time, then by sensor kind.
pub fn simulate_sensors(truth: &Trajectory, suite: &SensorSuite, seed: u64) -> Result<Vec<SensorMeasurement>> {
    let prf = truth
        .prf()
        .ok_or_else(|| Error::invalid("trajectory", "at least two poses are needed"))?;
    let kinds: Vec<(SensorKind, SensorSpec)> = SensorKind::ALL
        .into_iter()
        .filter_map(|k| suite.get(k).map(|s| (k, s)))
        .collect();
    for (k, spec) in &kinds {
        spec.validate(*k)?;
        if spec.rate_hz > prf * (1.0 + 1e-9) {
            return Err(Error::invalid(
                "rate_hz",
                format!("{} rate {} Hz exceeds the trajectory rate {prf} Hz", k.name(), spec.rate_hz),
            ));
        }
    }
    if !(suite.wheelbase > 0.0) {
        return Err(Error::invalid("wheelbase", "must be positive"));
    }
    let states = truth_states(truth);
    let poses = truth.poses();
    let per_kind: Vec<Vec<SensorMeasurement>> = kinds
        .par_iter()
        .map(|&(kind, spec)| {
            let stride = ((prf / spec.rate_hz).round() as usize).max(1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(kind.stream());
            let mut noise = || -> f64 {
                let n: f64 = StandardNormal.sample(&mut rng);
                spec.noise_std * n
            };
            (0..poses.len())
                .step_by(stride)
                .map(|k| {
                    let ideal = ideal_reading(kind, &states[k], suite);
                    let (a, b) = ideal.values();
                    let a = a + noise();
                    let b = b.map(|b| b + noise());
                    SensorMeasurement {
                        tau: poses[k].tau,
                        reading: Reading::from_values(kind, a, b).expect("same arity"),
                        noise_std: spec.reported_std,
                    }
                })
                .collect()
        })
        .collect();
    let mut all: Vec<SensorMeasurement> = per_kind.into_iter().flatten().collect();
    all.sort_by(|a, b| a.tau.total_cmp(&b.tau).then(a.kind().cmp(&b.kind())));
    Ok(all)
}

pub fn write_measurements_csv<W: Write>(ms: &[SensorMeasurement], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau", "kind", "value1", "value2", "std"])?;
    for m in ms {
        let (a, b) = m.reading.values();
        w.write_record(&[
            m.tau.to_string(),
            m.kind().name().to_string(),
            a.to_string(),
            b.map(|b| b.to_string()).unwrap_or_default(),
            m.noise_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_measurements_csv<R: Read>(input: R) -> Result<Vec<SensorMeasurement>> {
    let bad = |reason: String| Error::Format {
        format: "measurement csv",
        reason,
    };
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["tau", "kind", "value1", "value2", "std"] {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|e| bad(format!("record {}: column {i}: {e}", line + 1)))
        };
        let kind = SensorKind::from_name(rec[1].trim())
            .ok_or_else(|| bad(format!("record {}: unknown kind `{}`", line + 1, &rec[1])))?;
        let b = if rec[3].trim().is_empty() { None } else { Some(num(3)?) };
        let reading = Reading::from_values(kind, num(2)?, b)
            .ok_or_else(|| bad(format!("record {}: missing second value", line + 1)))?;
        out.push(SensorMeasurement {
            tau: num(0)?,
            reading,
            noise_std: num(4)?,
        });
    }
    Ok(out)
}

/// Continuous-time noise densities for the process model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessNoise {
    /// Isotropic white velocity noise on the position, m^2/s.
    pub position: f64,
    /// White jerk along the heading, m^2/s^5.
    pub jerk: f64,
    /// White yaw acceleration, rad^2/s^3.
    pub yaw_acceleration: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise {
            position: 1e-4,
            jerk: 0.5,
            yaw_acceleration: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfConfig {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    pub process_noise: ProcessNoise,
    pub initial_covariance: StateCovariance,
    pub wheelbase: f64,
    pub gnss_lever_arm: Vec2,
    /// Steering updates are skipped below this speed, where the bicycle
    /// relation is ill-conditioned.
    pub min_steering_speed: f64,
}

impl Default for UkfConfig {
    fn default() -> Self {
        UkfConfig {
            alpha: 1e-3,
            beta: 2.0,
            kappa: 0.0,
            process_noise: ProcessNoise::default(),
            initial_covariance: StateCovariance::from_diagonal(&StateVector::from([
                0.05f64.powi(2),
                0.05f64.powi(2),
                0.1f64.powi(2),
                0.1f64.powi(2),
                0.01f64.powi(2),
                0.01f64.powi(2),
            ])),
            wheelbase: DEFAULT_WHEELBASE,
            gnss_lever_arm: Vec2::new(2.0, 0.0),
            min_steering_speed: 0.5,
        }
    }
}

/// Scaled unscented transform weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaWeights {
    pub mean0: f64,
    pub cov0: f64,
    pub rest: f64,
    /// `sqrt(n + lambda)`.
    pub spread: f64,
}

impl SigmaWeights {
    pub fn new(alpha: f64, beta: f64, kappa: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("{alpha} not in (0, 1]")));
        }
        let n = STATE_DIM as f64;
        let lambda = alpha * alpha * (n + kappa) - n;
        let c = n + lambda;
        if !(c > 0.0) {
            return Err(Error::invalid("kappa", "n + lambda must be positive"));
        }
        Ok(SigmaWeights {
            mean0: lambda / c,
            cov0: lambda / c + (1.0 - alpha * alpha + beta),
            rest: 0.5 / c,
            spread: c.sqrt(),
        })
    }

    pub fn mean_sum(&self) -> f64 {
        self.mean0 + 2.0 * STATE_DIM as f64 * self.rest
    }
}

type Sigma = [StateVector; 2 * STATE_DIM + 1];

fn state_diff(a: &StateVector, b: &StateVector) -> StateVector {
    let mut d = a - b;
    d[PSI] = wrap_angle(d[PSI]);
    d
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

fn cholesky(p: &StateCovariance, tau: f64, stage: &'static str) -> Result<StateCovariance> {
    if let Some(c) = p.cholesky() {
        return Ok(c.l());
    }
    let repaired = symmetrize(p) + StateCovariance::identity() * JITTER;
    match repaired.cholesky() {
        Some(c) => {
            log::debug!("covariance repaired with jitter at tau = {tau} ({stage})");
            Ok(c.l())
        }
        None => Err(Error::CovarianceNotPositiveDefinite { tau, stage }),
    }
}

/// Sigma points `x`, `x +- spread * L e_i` with `L L^T = P`.
pub fn sigma_points(
    x: &StateVector,
    p: &StateCovariance,
    w: &SigmaWeights,
    tau: f64,
    stage: &'static str,
) -> Result<[StateVector; 2 * STATE_DIM + 1]> {
    let l = cholesky(p, tau, stage)? * w.spread;
    let mut pts: Sigma = [*x; 2 * STATE_DIM + 1];
    for i in 0..STATE_DIM {
        let col = l.column(i).into_owned();
        pts[1 + i] = x + col;
        pts[1 + STATE_DIM + i] = x - col;
    }
    Ok(pts)
}

/// Weighted mean written relative to the central point, which keeps the
/// large opposite-signed weights of small `alpha` from cancelling.
pub fn sigma_mean(pts: &[StateVector], w: &SigmaWeights) -> StateVector {
    let mut m = pts[0];
    for p in &pts[1..] {
        m += state_diff(p, &pts[0]) * w.rest;
    }
    m[PSI] = wrap_angle(m[PSI]);
    m
}

pub fn sigma_covariance(pts: &[StateVector], mean: &StateVector, w: &SigmaWeights) -> StateCovariance {
    let mut p = StateCovariance::zeros();
    for (i, s) in pts.iter().enumerate() {
        let d = state_diff(s, mean);
        p += d * d.transpose() * if i == 0 { w.cov0 } else { w.rest };
    }
    symmetrize(&p)
}

fn process_covariance(q: &ProcessNoise, psi: f64, dt: f64) -> StateCovariance {
    let (s, c) = psi.sin_cos();
    let j = q.jerk;
    let (dt2, dt3) = (dt * dt, dt * dt * dt);
    let (dt4, dt5) = (dt3 * dt, dt3 * dt2);
    let mut m = StateCovariance::zeros();
    let along = [j * dt5 / 20.0, j * dt4 / 8.0, j * dt3 / 6.0];
    m[(0, 0)] = along[0] * c * c + q.position * dt;
    m[(1, 1)] = along[0] * s * s + q.position * dt;
    m[(0, 1)] = along[0] * c * s;
    m[(0, 2)] = along[1] * c;
    m[(1, 2)] = along[1] * s;
    m[(0, 3)] = along[2] * c;
    m[(1, 3)] = along[2] * s;
    m[(2, 2)] = j * dt3 / 3.0;
    m[(2, 3)] = j * dt2 / 2.0;
    m[(3, 3)] = j * dt;
    let y = q.yaw_acceleration;
    m[(4, 4)] = y * dt3 / 3.0;
    m[(4, 5)] = y * dt2 / 2.0;
    m[(5, 5)] = y * dt;
    for r in 0..STATE_DIM {
        for col in 0..r {
            m[(r, col)] = m[(col, r)];
        }
    }
    m
}

fn propagate_vector(x: &StateVector, dt: f64) -> StateVector {
    ctra_predict(&NavState::from_vector(x), dt).to_vector()
}

/// Filter posterior with its time stamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub tau: f64,
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

/// Unscented Kalman filter over [`NavState`].
#[derive(Debug, Clone)]
pub struct Ukf {
    config: UkfConfig,
    weights: SigmaWeights,
    post: Posterior,
}

impl Ukf {
    pub fn new(config: UkfConfig, initial: &NavState, tau0: f64) -> Result<Self> {
        let weights = SigmaWeights::new(config.alpha, config.beta, config.kappa)?;
        if !(config.wheelbase > 0.0) {
            return Err(Error::invalid("wheelbase", "must be positive"));
        }
        let p = config.initial_covariance;
        if (p - p.transpose()).abs().max() > 1e-12 * p.abs().max() || p.cholesky().is_none() {
            return Err(Error::invalid(
                "initial_covariance",
                "must be symmetric positive definite",
            ));
        }
        Ok(Ukf {
            config,
            weights,
            post: Posterior {
                tau: tau0,
                mean: initial.to_vector(),
                covariance: p,
            },
        })
    }

    pub fn posterior(&self) -> &Posterior {
        &self.post
    }

    /// Unscented prediction of `post` forward to `tau`.
    fn predicted(&self, post: &Posterior, tau: f64) -> Result<Posterior> {
        let dt = tau - post.tau;
        if dt <= 0.0 {
            return Ok(Posterior { tau, ..*post });
        }
        let pts = sigma_points(&post.mean, &post.covariance, &self.weights, post.tau, "predict")?;
        let moved: Vec<StateVector> = pts.iter().map(|p| propagate_vector(p, dt)).collect();
        let mean = sigma_mean(&moved, &self.weights);
        let cov = sigma_covariance(&moved, &mean, &self.weights)
            + process_covariance(&self.config.process_noise, mean[PSI], dt);
        Ok(Posterior {
            tau,
            mean,
            covariance: symmetrize(&cov),
        })
    }

    pub fn predict(&mut self, tau: f64) -> Result<()> {
        self.post = self.predicted(&self.post, tau)?;
        Ok(())
    }

    /// Prediction to `tau` without changing the filter.
    pub fn extrapolate(&self, tau: f64) -> Result<Posterior> {
        self.predicted(&self.post, tau)
    }

    fn observe(&self, kind: SensorKind, x: &StateVector) -> DVector<f64> {
        let s = NavState::from_vector(x);
        ideal_reading(
            kind,
            &s,
            &SensorSuite {
                wheelbase: self.config.wheelbase,
                gnss_lever_arm: self.config.gnss_lever_arm,
                ..SensorSuite::default()
            },
        )
        .as_vector()
    }

    /// Predicts to the measurement time and applies the update.
    pub fn process(&mut self, m: &SensorMeasurement) -> Result<()> {
        if m.tau < self.post.tau {
            return Err(Error::invalid(
                "measurements",
                format!("measurement at {} precedes filter time {}", m.tau, self.post.tau),
            ));
        }
        if !(m.noise_std > 0.0) {
            return Err(Error::invalid("noise_std", format!("non-positive std at tau = {}", m.tau)));
        }
        self.predict(m.tau)?;
        if m.kind() == SensorKind::SteeringAngle && self.post.mean[2] < self.config.min_steering_speed {
            return Ok(());
        }
        let w = &self.weights;
        let pts = sigma_points(&self.post.mean, &self.post.covariance, w, m.tau, "update")?;
        let zs: Vec<DVector<f64>> = pts.iter().map(|p| self.observe(m.kind(), p)).collect();
        let dim = zs[0].len();
        let mut z_mean = zs[0].clone();
        for z in &zs[1..] {
            z_mean += (z - &zs[0]) * w.rest;
        }
        let mut s = DMatrix::from_diagonal_element(dim, dim, m.noise_std * m.noise_std);
        let mut pxz = DMatrix::zeros(STATE_DIM, dim);
        for (i, (p, z)) in pts.iter().zip(&zs).enumerate() {
            let wc = if i == 0 { w.cov0 } else { w.rest };
            let dz = z - &z_mean;
            let dx = DVector::from_column_slice(state_diff(p, &self.post.mean).as_slice());
            s += &dz * dz.transpose() * wc;
            pxz += dx * dz.transpose() * wc;
        }
        let s_inv = s
            .clone()
            .cholesky()
            .ok_or(Error::CovarianceNotPositiveDefinite {
                tau: m.tau,
                stage: "innovation",
            })?
            .inverse();
        let gain = &pxz * s_inv;
        let innovation = m.reading.as_vector() - z_mean;
        let dx = &gain * innovation;
        let mut mean = self.post.mean + StateVector::from_column_slice(dx.as_slice());
        mean[PSI] = wrap_angle(mean[PSI]);
        let dp = &gain * s * gain.transpose();
        let cov = self.post.covariance - StateCovariance::from_column_slice(dp.as_slice());
        let cov = symmetrize(&cov);
        cholesky(&cov, m.tau, "posterior")?;
        self.post = Posterior {
            tau: m.tau,
            mean,
            covariance: cov,
        };
        Ok(())
    }
}

/// Estimated trajectory at the output times and the full state covariance per pose.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub trajectory: Trajectory,
    pub states: Vec<NavState>,
    pub covariances: Vec<StateCovariance>,
}

impl Estimate {
    /// Trajectory CSV with extra covariance columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "x", "y", "heading", "speed", "var_x", "cov_xy", "var_y", "var_heading", "var_speed"])?;
        for (p, c) in self.trajectory.poses().iter().zip(&self.covariances) {
            w.write_record(
                [
                    p.tau,
                    p.position.x,
                    p.position.y,
                    p.heading,
                    p.speed,
                    c[(0, 0)],
                    c[(0, 1)],
                    c[(1, 1)],
                    c[(4, 4)],
                    c[(2, 2)],
                ]
                .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the filter over `measurements` (time-ordered) and reports the state
/// at every `output_times` entry. The filter starts at `output_times[0]`.
/// Measurements at or before an output time are applied before it is reported.
pub fn ukf_fuse(
    measurements: &[SensorMeasurement],
    config: &UkfConfig,
    initial: &NavState,
    output_times: &[f64],
) -> Result<Estimate> {
    let Some(&tau0) = output_times.first() else {
        return Err(Error::invalid("output_times", "no output times requested"));
    };
    if measurements.windows(2).any(|w| w[1].tau < w[0].tau) {
        return Err(Error::invalid("measurements", "not time-ordered"));
    }
    let mut ukf = Ukf::new(*config, initial, tau0)?;
    let mut next = measurements.partition_point(|m| m.tau < tau0);
    if next > 0 {
        log::debug!("skipping {next} measurements before the first output time");
    }
    let mut poses = Vec::with_capacity(output_times.len());
    let mut states = Vec::with_capacity(output_times.len());
    let mut covariances = Vec::with_capacity(output_times.len());
    for &tau in output_times {
        while next < measurements.len() && measurements[next].tau <= tau {
            ukf.process(&measurements[next])?;
            next += 1;
        }
        let post = ukf.extrapolate(tau)?;
        let s = NavState::from_vector(&post.mean);
        poses.push(PlatformPose {
            tau,
            position: s.position(),
            heading: s.psi,
            speed: s.v.max(0.0),
        });
        states.push(s);
        covariances.push(post.covariance);
    }
    Ok(Estimate {
        trajectory: Trajectory::new(poses)?,
        states,
        covariances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_trajectory, CtraSegment};
    use proptest::prelude::*;

    fn start() -> PlatformPose {
        PlatformPose {
            tau: 0.0,
            position: Vec2::zeros(),
            heading: 0.0,
            speed: 0.0,
        }
    }

    fn track(segs: &[(f64, f64, f64, f64)], prf: f64) -> Trajectory {
        let segs: Vec<CtraSegment> = segs
            .iter()
            .map(|&(duration, speed, acceleration, turn_rate)| CtraSegment {
                duration,
                speed,
                acceleration,
                turn_rate,
            })
            .collect();
        generate_trajectory(&segs, prf, start()).unwrap()
    }

    #[test]
    fn predict_examples() {
        let s = NavState {
            x: 1.0,
            y: 2.0,
            v: 5.0,
            a: 0.3,
            psi: 0.4,
            omega: 0.1,
        };
        assert_eq!(ctra_predict(&s, 0.0), s);
        let straight = NavState { a: 0.0, omega: 0.0, psi: 0.0, ..s };
        let out = ctra_predict(&straight, 1.0);
        assert!((out.x - 6.0).abs() < 1e-15 && out.y == 2.0 && out.v == 5.0 && out.psi == 0.0);
        let turn = NavState {
            x: 0.0,
            y: 0.0,
            v: 5.0,
            a: 0.0,
            psi: 0.0,
            omega: 0.1,
        };
        let end = ctra_predict(&turn, 10.0);
        let chord = (end.position()).norm();
        assert!((chord - 100.0 * 0.5f64.sin()).abs() < 1e-9);
        assert!(((end.position() - Vec2::new(0.0, 50.0)).norm() - 50.0).abs() < 1e-9);
        assert_eq!(end.a, 0.0);
        assert_eq!(end.omega, 0.1);
    }

    fn quiet(spec_rate: f64) -> Option<SensorSpec> {
        Some(SensorSpec {
            rate_hz: spec_rate,
            noise_std: 0.0,
            reported_std: 1e-3,
        })
    }

    fn quiet_suite() -> SensorSuite {
        SensorSuite {
            imu: quiet(100.0),
            gyro: quiet(100.0),
            wheel: quiet(50.0),
            steering: quiet(20.0),
            gnss: quiet(10.0),
            ..SensorSuite::default()
        }
    }

    #[test]
    fn noiseless_sensor_examples() {
        let straight = track(&[(2.0, 4.0, 0.0, 0.0)], 200.0);
        let ms = simulate_sensors(&straight, &quiet_suite(), 1).unwrap();
        let wheel: Vec<_> = ms.iter().filter(|m| m.kind() == SensorKind::WheelSpeed).collect();
        assert_eq!(wheel.len(), 100);
        assert!(wheel.iter().all(|m| m.reading == Reading::WheelSpeed { v: 4.0 }));

        let circle = track(&[(2.0, 3.0, 0.0, 0.4)], 200.0);
        let ms = simulate_sensors(&circle, &quiet_suite(), 1).unwrap();
        for m in ms.iter().filter(|m| m.kind() == SensorKind::Gyro) {
            let Reading::Gyro { omega } = m.reading else { unreachable!() };
            assert!((omega - 0.4).abs() < 1e-9, "{omega}");
        }
        assert!(ms.windows(2).all(|w| w[0].tau <= w[1].tau));
    }

    #[test]
    fn sensors_are_deterministic_and_validated() {
        let t = track(&[(1.0, 4.0, 0.2, 0.1)], 200.0);
        let a = simulate_sensors(&t, &SensorSuite::default(), 7).unwrap();
        let b = simulate_sensors(&t, &SensorSuite::default(), 7).unwrap();
        let c = simulate_sensors(&t, &SensorSuite::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut fast = SensorSuite::default();
        fast.imu = Some(SensorSpec::new(500.0, 0.1));
        assert!(simulate_sensors(&t, &fast, 7).is_err());
        let mut bad = SensorSuite::default();
        bad.gnss = Some(SensorSpec::new(10.0, 0.0));
        assert!(simulate_sensors(&t, &bad, 7).is_err());
    }

    #[test]
    fn measurement_csv_round_trip() {
        let t = track(&[(1.0, 4.0, 0.2, 0.1)], 100.0);
        let ms = simulate_sensors(&t, &SensorSuite::default(), 3).unwrap();
        let mut buf = Vec::new();
        write_measurements_csv(&ms, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("tau,kind,value1,value2,std\n"));
        assert_eq!(read_measurements_csv(&buf[..]).unwrap(), ms);
        assert!(read_measurements_csv("tau,kind,value1,value2,std\n0,sonar,1,,1\n".as_bytes()).is_err());
    }

    #[test]
    fn weights_sum_to_one() {
        for &(a, b, k) in &[(1e-3, 2.0, 0.0), (0.5, 2.0, 1.0), (1.0, 0.0, 3.0)] {
            let w = SigmaWeights::new(a, b, k).unwrap();
            assert!((w.mean_sum() - 1.0).abs() < 1e-9);
        }
        assert!(SigmaWeights::new(0.0, 2.0, 0.0).is_err());
        assert!(SigmaWeights::new(1.5, 2.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn unscented_round_trip(
            mean in proptest::collection::vec(-3.0f64..3.0, 6),
            diag in proptest::collection::vec(0.01f64..2.0, 6),
            off in proptest::collection::vec(-0.5f64..0.5, 15),
            alpha in 1e-3f64..1.0,
        ) {
            let mut l = StateCovariance::from_diagonal(&StateVector::from_column_slice(&diag));
            let mut k = 0;
            for r in 0..6 {
                for c in 0..r {
                    l[(r, c)] = off[k] * diag[c].sqrt();
                    k += 1;
                }
            }
            // Keep the heading spread well inside (-pi, pi] so the wrapped
            // differences stay linear.
            for c in 0..6 {
                l[(4, c)] *= 0.1;
            }
            let p = l * l.transpose();
            let x = StateVector::from_column_slice(&mean);
            let w = SigmaWeights::new(alpha, 2.0, 0.0).unwrap();
            let pts = sigma_points(&x, &p, &w, 0.0, "test").unwrap();
            let m = sigma_mean(&pts, &w);
            // Identity transform: the covariance weights differ from the mean
            // weights only at the centre, where the deviation vanishes.
            let wc = SigmaWeights { cov0: w.mean0, ..w };
            let c = sigma_covariance(&pts, &m, &wc);
            prop_assert!((m - x).abs().max() < 1e-9);
            prop_assert!((c - p).abs().max() < 1e-9 * p.abs().max().max(1.0));
        }
    }

    #[test]
    fn noiseless_fusion_tracks_truth() {
        let truth = track(&[(4.0, 5.0, 0.4, 0.15)], 400.0);
        let ms = simulate_sensors(&truth, &quiet_suite(), 11).unwrap();
        let init = truth_states(&truth)[0];
        let cfg = UkfConfig {
            initial_covariance: StateCovariance::identity() * 1e-12,
            process_noise: ProcessNoise {
                position: 1e-12,
                jerk: 1e-12,
                yaw_acceleration: 1e-12,
            },
            ..UkfConfig::default()
        };
        let est = ukf_fuse(&ms, &cfg, &init, &truth.taus()).unwrap();
        assert_eq!(est.trajectory.taus(), truth.taus());
        let worst = est
            .trajectory
            .poses()
            .iter()
            .zip(truth.poses())
            .map(|(e, t)| (e.position - t.position).norm())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-6, "worst position error {worst}");
        for c in &est.covariances {
            assert!(c.cholesky().is_some());
            assert_eq!(*c, c.transpose());
        }
    }

    /// Stationary GNSS-only case against a scalar Kalman filter per axis.
    #[test]
    fn stationary_gnss_matches_linear_filter() {
        let prf = 20.0;
        let poses: Vec<_> = (0..2000)
            .map(|k| PlatformPose {
                tau: k as f64 / prf,
                position: Vec2::new(3.0, -1.0),
                heading: 0.3,
                speed: 0.0,
            })
            .collect();
        let truth = Trajectory::new(poses).unwrap();
        let suite = SensorSuite {
            imu: None,
            gyro: None,
            wheel: None,
            steering: None,
            gnss: Some(SensorSpec::new(10.0, 0.1)),
            gnss_lever_arm: Vec2::zeros(),
            ..SensorSuite::default()
        };
        let ms = simulate_sensors(&truth, &suite, 5).unwrap();
        assert_eq!(ms.len(), 1000);
        let p0 = 1.0;
        let cfg = UkfConfig {
            initial_covariance: StateCovariance::from_diagonal(&StateVector::from([p0, p0, 1e-24, 1e-24, 1e-16, 1e-24])),
            process_noise: ProcessNoise {
                position: 0.0,
                jerk: 0.0,
                yaw_acceleration: 0.0,
            },
            gnss_lever_arm: Vec2::zeros(),
            ..UkfConfig::default()
        };
        let init = NavState {
            x: 3.5,
            y: -1.5,
            v: 0.0,
            a: 0.0,
            psi: 0.3,
            omega: 0.0,
        };
        let est = ukf_fuse(&ms, &cfg, &init, &truth.taus()).unwrap();

        // Oracle: x_k = x_{k-1} + P_{k-1}/(P_{k-1}+R) (z_k - x_{k-1}).
        let r = 0.01;
        let (mut kx, mut ky, mut kp) = (init.x, init.y, p0);
        for m in &ms {
            let Reading::GnssPosition { x, y } = m.reading else { unreachable!() };
            let g = kp / (kp + r);
            kx += g * (x - kx);
            ky += g * (y - ky);
            kp *= 1.0 - g;
        }
        let last = est.states.last().unwrap();
        let cov = est.covariances.last().unwrap();
        assert!((last.x - kx).abs() < 1e-6 && (last.y - ky).abs() < 1e-6, "{} {} vs {kx} {ky}", last.x, last.y);
        assert!((cov[(0, 0)] - kp).abs() < 1e-9);
        assert!(cov[(0, 0)].sqrt() < 0.02);
        assert!((kp - 1.0 / (1.0 / p0 + 1000.0 / r)).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_bad_input() {
        let truth = track(&[(1.0, 5.0, 0.0, 0.0)], 100.0);
        let mut ms = simulate_sensors(&truth, &SensorSuite::default(), 1).unwrap();
        let init = truth_states(&truth)[0];
        let mut cfg = UkfConfig::default();
        cfg.initial_covariance[(0, 0)] = -1.0;
        assert!(ukf_fuse(&ms, &cfg, &init, &truth.taus()).is_err());
        ms.swap(0, 5);
        assert!(ukf_fuse(&ms, &UkfConfig::default(), &init, &truth.taus()).is_err());
        assert!(ukf_fuse(&[], &UkfConfig::default(), &init, &[]).is_err());
    }
}
