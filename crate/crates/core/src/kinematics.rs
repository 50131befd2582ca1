//! Closed-form constant turn rate and acceleration (CTRA) motion.
//!
//! Speed is linear in time, heading is linear in time, and the position is the
//! exact integral of `v(t) * (cos psi(t), sin psi(t))`. The integral is written
//! in terms of the mid-interval heading so it stays well conditioned as the
//! turn rate goes to zero:
//!
//! ```text
//! h  = omega * dt / 2,  psi_m = psi + h
//! dx = (v dt + a dt^2 / 2) cos(psi_m) sinc(h) + a sin(psi_m) (omega dt^3 / 4) g(h)
//! dy = (v dt + a dt^2 / 2) sin(psi_m) sinc(h) - a cos(psi_m) (omega dt^3 / 4) g(h)
//! g(h) = (h cos h - sin h) / h^3
//! ```

use crate::geometry::Vec2;

/// Turn rates below this magnitude use the straight-line formula.
pub const STRAIGHT_LINE_THRESHOLD: f64 = 1e-12;

/// Kinematic state carried through a CTRA interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtraState {
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub turn_rate: f64,
}

/// Propagates `state` forward by `dt` seconds. Acceleration and turn rate are
/// held constant; the heading is not wrapped.
pub fn ctra_propagate(state: &CtraState, dt: f64) -> CtraState {
    let CtraState {
        position,
        heading,
        speed,
        acceleration,
        turn_rate,
    } = *state;
    let along = speed * dt + 0.5 * acceleration * dt * dt;
    let delta = if turn_rate.abs() < STRAIGHT_LINE_THRESHOLD {
        let (s, c) = heading.sin_cos();
        Vec2::new(along * c, along * s)
    } else {
        let h = 0.5 * turn_rate * dt;
        let (s, c) = (heading + h).sin_cos();
        let sinc = sinc_unnormalized(h);
        let bend = acceleration * turn_rate * dt * dt * dt * 0.25 * cubic_residual(h);
        Vec2::new(along * c * sinc + bend * s, along * s * sinc - bend * c)
    };
    CtraState {
        position: position + delta,
        heading: heading + turn_rate * dt,
        speed: speed + acceleration * dt,
        acceleration,
        turn_rate,
    }
}

/// `sin(h) / h` with the removable singularity filled in.
fn sinc_unnormalized(h: f64) -> f64 {
    if h.abs() < 1e-4 {
        let h2 = h * h;
        1.0 - h2 / 6.0 + h2 * h2 / 120.0
    } else {
        h.sin() / h
    }
}

/// `(h cos h - sin h) / h^3`, which tends to -1/3.
fn cubic_residual(h: f64) -> f64 {
    if h.abs() < 2e-2 {
        let h2 = h * h;
        -1.0 / 3.0 + h2 / 30.0 - h2 * h2 / 840.0 + h2 * h2 * h2 / 45360.0
    } else {
        (h * h.cos() - h.sin()) / (h * h * h)
    }
}
