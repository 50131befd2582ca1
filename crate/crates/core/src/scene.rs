//! World model: point scatterers with angular responses, the platform
//! trajectory and the radar mounting geometry.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate, wrap_angle, Vec2};
use crate::kinematics::{ctra_propagate, CtraState};

/// Angular scattering behaviour of a point target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScatteringPattern {
    /// Same reflectivity from every direction (poles, pedestrian legs).
    Isotropic,
    /// Strong return only around the surface normal (walls, fences).
    Specular { normal: f64, beamwidth: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub position: Vec2,
    pub amplitude: Complex64,
    pub pattern: ScatteringPattern,
}

impl Scatterer {
    pub fn new(position: Vec2, amplitude: Complex64, pattern: ScatteringPattern) -> Result<Self> {
        if !(amplitude.norm() > 0.0) {
            return Err(Error::invalid("amplitude", "scatterer amplitude must be non-zero"));
        }
        if let ScatteringPattern::Specular { beamwidth, .. } = pattern {
            if !(beamwidth > 0.0 && beamwidth <= PI) {
                return Err(Error::invalid("beamwidth", format!("{beamwidth} not in (0, pi]")));
            }
        }
        Ok(Scatterer {
            position,
            amplitude,
            pattern,
        })
    }

    pub fn isotropic(position: Vec2, amplitude: Complex64) -> Result<Self> {
        Self::new(position, amplitude, ScatteringPattern::Isotropic)
    }
}

/// Reflectivity weight seen from `look_angle`, the world-frame direction from
/// the scatterer toward the platform. The specular lobe has the same Gaussian
/// shape as the processing beam filter.
pub fn scattering_gain(s: &Scatterer, look_angle: f64) -> f64 {
    match s.pattern {
        ScatteringPattern::Isotropic => 1.0,
        ScatteringPattern::Specular { normal, beamwidth } => {
            let d = wrap_angle(look_angle - normal) / beamwidth;
            (-4.0 * d * d).exp()
        }
    }
}

/// Axis-aligned bounding rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Extent {
    pub fn new(min: Vec2, max: Vec2) -> Result<Self> {
        if !(min.x <= max.x && min.y <= max.y) {
            return Err(Error::invalid("extent", "min corner must not exceed max corner"));
        }
        Ok(Extent {
            min: [min.x, min.y],
            max: [max.x, max.y],
        })
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min[0] && p.x <= self.max[0] && p.y >= self.min[1] && p.y <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    scatterers: Vec<Scatterer>,
    extent: Extent,
}

impl Scene {
    pub fn new(extent: Extent) -> Self {
        Scene {
            scatterers: Vec::new(),
            extent,
        }
    }

    pub fn with_scatterers(extent: Extent, scatterers: Vec<Scatterer>) -> Result<Self> {
        let mut scene = Scene::new(extent);
        for s in scatterers {
            scene.push(s)?;
        }
        Ok(scene)
    }

    pub fn push(&mut self, s: Scatterer) -> Result<()> {
        if !self.extent.contains(s.position) {
            return Err(Error::invalid(
                "position",
                format!(
                    "scatterer at ({}, {}) lies outside the scene extent",
                    s.position.x, s.position.y
                ),
            ));
        }
        self.scatterers.push(s);
        Ok(())
    }

    /// Adds a straight row of identical scatterers from `start` to `end`
    /// (inclusive) no further apart than `spacing`. Walls and fences are
    /// modelled this way. Returns the number of scatterers added.
    pub fn add_row(
        &mut self,
        start: Vec2,
        end: Vec2,
        spacing: f64,
        amplitude: Complex64,
        pattern: ScatteringPattern,
    ) -> Result<usize> {
        if !(spacing > 0.0) {
            return Err(Error::invalid("spacing", "row spacing must be positive"));
        }
        let length = (end - start).norm();
        let count = (length / spacing).ceil() as usize + 1;
        for k in 0..count {
            let t = if count == 1 { 0.0 } else { k as f64 / (count - 1) as f64 };
            self.push(Scatterer::new(start + (end - start) * t, amplitude, pattern)?)?;
        }
        Ok(count)
    }

    pub fn scatterers(&self) -> &[Scatterer] {
        &self.scatterers
    }

    pub fn extent(&self) -> &Extent {
        &self.extent
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatformPose {
    pub tau: f64,
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<PlatformPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<PlatformPose>) -> Result<Self> {
        for w in poses.windows(2) {
            if !(w[1].tau > w[0].tau) {
                return Err(Error::invalid("tau", format!("slow time not increasing at {}", w[1].tau)));
            }
        }
        if let Some(p) = poses.iter().find(|p| !(p.speed >= 0.0)) {
            return Err(Error::invalid("speed", format!("negative speed at tau = {}", p.tau)));
        }
        Ok(Trajectory { poses })
    }

    pub fn poses(&self) -> &[PlatformPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.poses.iter().map(|p| p.tau).collect()
    }

    /// Pulse rate implied by the first two poses.
    pub fn prf(&self) -> Option<f64> {
        match self.poses.as_slice() {
            [a, b, ..] => Some(1.0 / (b.tau - a.tau)),
            _ => None,
        }
    }

    /// Sum of straight-line distances between consecutive poses.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }

    pub fn max_speed(&self) -> f64 {
        self.poses.iter().map(|p| p.speed).fold(0.0, f64::max)
    }

    /// Writes the trajectory as CSV with header `tau,x,y,heading,speed`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "x", "y", "heading", "speed"])?;
        for p in &self.poses {
            w.write_record(&[
                p.tau.to_string(),
                p.position.x.to_string(),
                p.position.y.to_string(),
                p.heading.to_string(),
                p.speed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a trajectory CSV. Extra trailing columns (covariances) are ignored.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let expected = ["tau", "x", "y", "heading", "speed"];
        if header.len() < 5 || header.iter().zip(expected).any(|(a, b)| a != b) {
            return Err(Error::Format {
                format: "trajectory csv",
                reason: format!("unexpected header {:?}", header),
            });
        }
        let mut poses = Vec::new();
        for record in r.records() {
            let record = record?;
            let field = |i: usize| -> Result<f64> {
                record[i].trim().parse::<f64>().map_err(|e| Error::Format {
                    format: "trajectory csv",
                    reason: format!("column {}: {e}", expected[i]),
                })
            };
            poses.push(PlatformPose {
                tau: field(0)?,
                position: Vec2::new(field(1)?, field(2)?),
                heading: field(3)?,
                speed: field(4)?,
            });
        }
        Trajectory::new(poses)
    }
}

/// One constant turn rate and acceleration piece of a drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtraSegment {
    pub duration: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub turn_rate: f64,
}

/// Samples a piecewise-CTRA drive at the pulse rate. Poses are taken at
/// `start.tau + k / prf` for every `k` with `k / prf` inside the half-open
/// drive interval `[0, total duration)`. Position and heading are continuous
/// across segments; each segment starts at its own initial speed.
pub fn generate_trajectory(segments: &[CtraSegment], prf: f64, start: PlatformPose) -> Result<Trajectory> {
    if !(prf > 0.0) {
        return Err(Error::invalid("prf", "pulse repetition frequency must be positive"));
    }
    if segments.is_empty() {
        return Err(Error::invalid("segments", "at least one segment is required"));
    }
    let mut boundaries = Vec::with_capacity(segments.len());
    let mut state = CtraState {
        position: start.position,
        heading: start.heading,
        speed: 0.0,
        acceleration: 0.0,
        turn_rate: 0.0,
    };
    let mut t0 = 0.0;
    for seg in segments {
        if !(seg.duration > 0.0) {
            return Err(Error::invalid("duration", "segment duration must be positive"));
        }
        if !(seg.speed >= 0.0) || seg.speed + seg.acceleration * seg.duration < 0.0 {
            return Err(Error::invalid("speed", "speed would become negative within a segment"));
        }
        let seg_start = CtraState {
            speed: seg.speed,
            acceleration: seg.acceleration,
            turn_rate: seg.turn_rate,
            ..state
        };
        boundaries.push((t0, seg_start));
        state = ctra_propagate(&seg_start, seg.duration);
        t0 += seg.duration;
    }
    let total = t0;
    let count = (total * prf - 1e-9).ceil().max(1.0) as usize;
    let mut poses = Vec::with_capacity(count);
    let mut seg_idx = 0;
    for k in 0..count {
        let t = k as f64 / prf;
        while seg_idx + 1 < boundaries.len() && t >= boundaries[seg_idx + 1].0 {
            seg_idx += 1;
        }
        let (seg_t0, seg_state) = boundaries[seg_idx];
        let s = ctra_propagate(&seg_state, t - seg_t0);
        poses.push(PlatformPose {
            tau: start.tau + t,
            position: s.position,
            heading: wrap_angle(s.heading),
            speed: s.speed.max(0.0),
        });
    }
    Trajectory::new(poses)
}

/// Which side of the vehicle the radar looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    #[default]
    Right,
}

impl Side {
    /// +1 for left (counter-clockwise from the driving direction), -1 for right.
    pub fn sign(self) -> f64 {
        match self {
            Side::Left => 1.0,
            Side::Right => -1.0,
        }
    }
}

/// Rigid mounting of the radar on the vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarMount {
    /// Boresight angle from the driving direction, positive toward `side`.
    pub squint: f64,
    /// Full antenna field of view.
    pub fov: f64,
    /// Phase-center offset in the vehicle frame (x forward, y left).
    pub lever_arm: Vec2,
    pub side: Side,
}

impl RadarMount {
    pub fn new(squint: f64, fov: f64, lever_arm: Vec2, side: Side) -> Result<Self> {
        if !(fov > 0.0 && fov <= PI) {
            return Err(Error::invalid("fov", format!("{fov} not in (0, pi]")));
        }
        Ok(RadarMount {
            squint,
            fov,
            lever_arm,
            side,
        })
    }
}

impl Default for RadarMount {
    /// Front-side looking, 60 degrees from the driving direction with a
    /// 120-degree field of view. The 2 m lever arm is a placeholder.
    fn default() -> Self {
        RadarMount {
            squint: 60f64.to_radians(),
            fov: 120f64.to_radians(),
            lever_arm: Vec2::new(2.0, 0.0),
            side: Side::Right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseCenter {
    pub position: Vec2,
    /// World-frame boresight direction.
    pub boresight: f64,
}

pub fn radar_phase_center(pose: &PlatformPose, mount: &RadarMount) -> PhaseCenter {
    PhaseCenter {
        position: pose.position + rotate(mount.lever_arm, pose.heading),
        boresight: pose.heading + mount.side.sign() * mount.squint,
    }
}
