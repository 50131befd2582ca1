//! Planar geometry shared by every module. The world frame is the local
//! East-North plane; angles are radians, counter-clockwise from +x.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};

/// Propagation speed used throughout (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub type Vec2 = Vector2<f64>;

/// Wraps an angle to the principal interval (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let two_pi = 2.0 * PI;
    let mut r = angle % two_pi;
    if r <= -PI {
        r += two_pi;
    } else if r > PI {
        r -= two_pi;
    }
    r
}

/// Rotation of a body-frame vector into the world frame.
pub fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c) * v
}

pub fn deg(value: f64) -> f64 {
    value.to_radians()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wrap_keeps_pi_and_maps_minus_pi_to_pi() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn rotation_by_quarter_turn() {
        let r = rotate(Vec2::new(2.0, 0.0), PI / 2.0);
        assert!((r - Vec2::new(0.0, 2.0)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn wrap_lands_in_principal_interval(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            let k = (a - w) / (2.0 * PI);
            prop_assert!((k - k.round()).abs() < 1e-9);
        }
    }
}
