//! Time-domain back-projection with a Gaussian angular beam filter.
//!
//! For every pixel and every pulse (ascending slow time) the kernel adds
//!
//! ```text
//! F(alpha; alpha_P) * (d_RC(r) * exp(-j 2 pi f0 T_D)),   r = c T_D / 2
//! F = exp(-4 ((alpha - alpha_P) / delta_alpha)^2)
//! ```
//!
//! where `d_RC(r)` is the range-compressed column interpolated at the pixel
//! range. Pulses for which the pixel is outside the antenna field of view, past
//! the maximum range, or (optionally) more than `cutoff * delta_alpha` away
//! from the beam axis contribute nothing.
//!
//! Work is split into square pixel tiles. A tile skips a pulse only when its
//! bounding disc is provably outside every gate, so the per-pixel sums (and
//! their summation order) are the same for any tile size or worker count.

use std::f64::consts::{FRAC_PI_2, LN_2, PI};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec2, SPEED_OF_LIGHT};
use crate::scene::{radar_phase_center, PlatformPose, RadarMount, Side, Trajectory};
use crate::signal::{FmcwParams, RangeCompressedMatrix};

/// -3 dB width of the squared normalized sinc, in units of its first-null spacing.
pub const SINC_HALF_POWER_WIDTH: f64 = 0.885_892_941_378_9;

/// Default filter truncation, in units of `delta_alpha` (weight below e^-16).
pub const DEFAULT_CUTOFF: f64 = 2.0;

pub const DEFAULT_TILE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

impl ImageGrid {
    pub fn new(x0: f64, y0: f64, dx: f64, dy: f64, nx: usize, ny: usize) -> Result<Self> {
        let g = ImageGrid { x0, y0, dx, dy, nx, ny };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::invalid("grid", "pixel spacing must be positive"));
        }
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::invalid("grid", "pixel counts must be at least one"));
        }
        Ok(())
    }

    /// True when the spacing exceeds half the range resolution.
    pub fn undersampled(&self, params: &FmcwParams) -> bool {
        let half = 0.5 * params.range_resolution();
        self.dx > half || self.dy > half
    }

    pub fn pixel(&self, ix: usize, iy: usize) -> Vec2 {
        Vec2::new(self.x0 + ix as f64 * self.dx, self.y0 + iy as f64 * self.dy)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Processing beam: pointing angle from broadside and angular resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub alpha_p: f64,
    pub delta_alpha: f64,
}

impl Beam {
    pub fn new(alpha_p: f64, delta_alpha: f64) -> Result<Self> {
        if !(delta_alpha > 0.0) {
            return Err(Error::invalid("delta_alpha", "beam resolution must be positive"));
        }
        Ok(Beam { alpha_p, delta_alpha })
    }

    /// Filter weight for an angular offset from the beam axis.
    #[inline]
    pub fn weight_for_offset(&self, offset: f64) -> f64 {
        let u = offset / self.delta_alpha;
        (-4.0 * u * u).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FocusedImage {
    pub grid: ImageGrid,
    pub beam: Beam,
    /// Row-major, `ny` rows of `nx` pixels; row `iy` is `y0 + iy * dy`.
    pub pixels: Vec<Complex64>,
}

impl FocusedImage {
    pub fn at(&self, ix: usize, iy: usize) -> Complex64 {
        self.pixels[iy * self.grid.nx + ix]
    }

    pub fn energy(&self) -> f64 {
        self.pixels.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Index (ix, iy) and magnitude of the brightest pixel.
    pub fn peak(&self) -> ((usize, usize), f64) {
        let (i, m) = self
            .pixels
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, z)| if z.norm() > best.1 { (i, z.norm()) } else { best });
        ((i % self.grid.nx, i / self.grid.nx), m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocusOptions {
    pub interp: Interpolation,
    /// Filter truncation in units of `delta_alpha`; `None` keeps every pulse.
    pub cutoff: Option<f64>,
    pub tile_size: usize,
}

impl Default for FocusOptions {
    fn default() -> Self {
        FocusOptions {
            interp: Interpolation::Linear,
            cutoff: Some(DEFAULT_CUTOFF),
            tile_size: DEFAULT_TILE,
        }
    }
}

/// Two-way delay `(2 / c) |pixel - platform|`.
pub fn two_way_delay(platform: Vec2, pixel: Vec2) -> Result<f64> {
    let r = (pixel - platform).norm();
    if r == 0.0 {
        return Err(Error::ZeroRange {
            what: "pixel",
            x: pixel.x,
            y: pixel.y,
        });
    }
    Ok(2.0 * r / SPEED_OF_LIGHT)
}

/// Line-of-sight angle from `pose` to `pixel`, measured from broadside on the
/// imaged `side` and positive toward the driving direction.
pub fn look_angle(pose: &PlatformPose, pixel: Vec2, side: Side) -> Result<f64> {
    let d = pixel - pose.position;
    if d.x == 0.0 && d.y == 0.0 {
        return Err(Error::ZeroRange {
            what: "pixel",
            x: pixel.x,
            y: pixel.y,
        });
    }
    Ok(broadside_angle(pose.heading, d.y.atan2(d.x), side.sign()))
}

#[inline]
fn broadside_angle(heading: f64, theta: f64, side_sign: f64) -> f64 {
    wrap_angle(FRAC_PI_2 + side_sign * (heading - theta))
}

/// Gaussian angular weight `exp(-4 ((alpha - alpha_P) / delta_alpha)^2)`.
pub fn spatial_filter(alpha: f64, beam: &Beam) -> f64 {
    beam.weight_for_offset(wrap_angle(alpha - beam.alpha_p))
}

/// Beam resolution giving a focused point target the same -3 dB cross-range
/// width as an ideal range response of resolution `cross_range_resolution`.
///
/// The Gaussian angular taper maps to a Gaussian point response whose -3 dB
/// width is `(2 / pi) sqrt(ln 2 / 2) lambda / delta_alpha`; equating that to
/// `0.886 * delta_cr` gives `delta_alpha ~= 0.423 lambda / delta_cr`.
pub fn beamwidth_for_resolution(cross_range_resolution: f64, f0: f64) -> Result<f64> {
    if !(cross_range_resolution > 0.0) {
        return Err(Error::invalid("cross_range_resolution", "must be positive"));
    }
    let lambda = SPEED_OF_LIGHT / f0;
    let gaussian_width = 2.0 * (LN_2 / 2.0).sqrt() / PI;
    Ok(gaussian_width * lambda / (SINC_HALF_POWER_WIDTH * cross_range_resolution))
}

/// -3 dB cross-range width of the point response for a given beam resolution.
pub fn cross_range_width(delta_alpha: f64, f0: f64) -> f64 {
    2.0 * (LN_2 / 2.0).sqrt() / PI * (SPEED_OF_LIGHT / f0) / delta_alpha
}

/// Single-beam back-projection.
pub fn backproject(
    rc: &RangeCompressedMatrix,
    traj: &Trajectory,
    mount: &RadarMount,
    grid: &ImageGrid,
    beam: &Beam,
    options: &FocusOptions,
) -> Result<FocusedImage> {
    let mut images = multi_beam_focus(rc, traj, mount, grid, std::slice::from_ref(beam), options)?;
    Ok(images.remove(0))
}

struct PulseGeometry {
    position: Vec2,
    heading: f64,
}

/// Angular slack of the vector pre-gate (rad).
const GATE_MARGIN: f64 = 1e-6;

struct Kernel<'a> {
    rc: &'a RangeCompressedMatrix,
    pulses: Vec<PulseGeometry>,
    beams: &'a [Beam],
    grid: ImageGrid,
    options: FocusOptions,
    side_sign: f64,
    boresight: f64,
    half_fov: f64,
    max_range: f64,
    /// `-2 pi f0`, applied to the two-way delay.
    phase_rate: f64,
}

#[derive(Clone, Copy)]
struct Tile {
    ix0: usize,
    iy0: usize,
    nx: usize,
    ny: usize,
}

/// Focuses one image per beam. Pixel geometry and the interpolated,
/// phase-compensated sample are computed once per pulse and pixel and shared
/// by all beams.
pub fn multi_beam_focus(
    rc: &RangeCompressedMatrix,
    traj: &Trajectory,
    mount: &RadarMount,
    grid: &ImageGrid,
    beams: &[Beam],
    options: &FocusOptions,
) -> Result<Vec<FocusedImage>> {
    grid.validate()?;
    if rc.pulses() != traj.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} range-compressed pulses but {} trajectory poses",
            rc.pulses(),
            traj.len()
        )));
    }
    if let Some((a, p)) = rc
        .taus
        .iter()
        .zip(traj.poses())
        .find(|(a, p)| (**a - p.tau).abs() > 1e-9)
    {
        return Err(Error::DimensionMismatch(format!(
            "slow time {a} of the data does not match trajectory time {}",
            p.tau
        )));
    }
    if options.tile_size == 0 {
        return Err(Error::invalid("tile_size", "must be positive"));
    }
    if beams.is_empty() {
        return Ok(Vec::new());
    }
    if grid.undersampled(&rc.params) {
        log::warn!(
            "pixel spacing ({}, {}) m exceeds half the range resolution",
            grid.dx,
            grid.dy
        );
    }

    let pulses = traj
        .poses()
        .iter()
        .map(|pose| PulseGeometry {
            position: radar_phase_center(pose, mount).position,
            heading: pose.heading,
        })
        .collect();
    let kernel = Kernel {
        rc,
        pulses,
        beams,
        grid: *grid,
        options: *options,
        side_sign: mount.side.sign(),
        boresight: FRAC_PI_2 - mount.squint,
        half_fov: 0.5 * mount.fov,
        max_range: rc.params.max_range,
        phase_rate: -2.0 * PI * rc.params.f0,
    };

    let ts = options.tile_size;
    let mut tiles = Vec::new();
    for iy0 in (0..grid.ny).step_by(ts) {
        for ix0 in (0..grid.nx).step_by(ts) {
            tiles.push(Tile {
                ix0,
                iy0,
                nx: ts.min(grid.nx - ix0),
                ny: ts.min(grid.ny - iy0),
            });
        }
    }
    let blocks: Vec<Vec<Complex64>> = tiles.par_iter().map(|t| kernel.focus_tile(t)).collect();

    let nb = beams.len();
    let mut images: Vec<FocusedImage> = beams
        .iter()
        .map(|b| FocusedImage {
            grid: *grid,
            beam: *b,
            pixels: vec![Complex64::new(0.0, 0.0); grid.len()],
        })
        .collect();
    for (tile, block) in tiles.iter().zip(&blocks) {
        for ty in 0..tile.ny {
            for tx in 0..tile.nx {
                let dst = (tile.iy0 + ty) * grid.nx + tile.ix0 + tx;
                let src = (ty * tile.nx + tx) * nb;
                for (b, img) in images.iter_mut().enumerate() {
                    img.pixels[dst] = block[src + b];
                }
            }
        }
    }
    if images.iter().all(|img| img.pixels.iter().all(|z| z.norm_sqr() == 0.0)) && rc.data.as_slice().iter().any(|z| z.norm_sqr() > 0.0) {
        log::warn!("focused images are empty: no pixel was illuminated within the beam gates");
    }
    Ok(images)
}

impl Kernel<'_> {
    fn focus_tile(&self, tile: &Tile) -> Vec<Complex64> {
        let nb = self.beams.len();
        let g = &self.grid;
        let mut acc = vec![Complex64::new(0.0, 0.0); tile.nx * tile.ny * nb];
        let xs: Vec<f64> = (0..tile.nx).map(|tx| g.x0 + (tile.ix0 + tx) as f64 * g.dx).collect();
        let ys: Vec<f64> = (0..tile.ny).map(|ty| g.y0 + (tile.iy0 + ty) as f64 * g.dy).collect();
        let centre = Vec2::new(
            0.5 * (xs[0] + xs[tile.nx - 1]),
            0.5 * (ys[0] + ys[tile.ny - 1]),
        );
        let half_diag = 0.5 * Vec2::new(xs[tile.nx - 1] - xs[0], ys[tile.ny - 1] - ys[0]).norm();
        let spacing = self.rc.range_spacing;
        let bins = self.rc.range_bins();
        let cutoff = self.options.cutoff;
        let mut weights = vec![0.0; nb];
        // Beam axes as world-frame unit vectors, with the cosine of the gate
        // half-width widened by a small margin. Pixels failing every axis test
        // are outside every exact angular gate too; the rest take the exact path.
        let gates: Vec<f64> = match cutoff {
            Some(c) => self
                .beams
                .iter()
                .map(|b| {
                    let half = c * b.delta_alpha + GATE_MARGIN;
                    if half >= PI { -2.0 } else { half.cos() }
                })
                .collect(),
            None => Vec::new(),
        };
        let mut axes = vec![Vec2::zeros(); gates.len()];

        for (p, geom) in self.pulses.iter().enumerate() {
            if self.tile_is_dark(geom, centre, half_diag) {
                continue;
            }
            for (axis, beam) in axes.iter_mut().zip(self.beams) {
                let theta = geom.heading - self.side_sign * (beam.alpha_p - FRAC_PI_2);
                *axis = Vec2::new(theta.cos(), theta.sin());
            }
            let column = self.rc.data.column(p);
            let (px, py) = (geom.position.x, geom.position.y);
            for (ty, &y) in ys.iter().enumerate() {
                let dy = y - py;
                for (tx, &x) in xs.iter().enumerate() {
                    let dx = x - px;
                    let r = (dx * dx + dy * dy).sqrt();
                    if r > self.max_range || r == 0.0 {
                        continue;
                    }
                    if !gates.is_empty()
                        && axes
                            .iter()
                            .zip(&gates)
                            .all(|(u, &g)| dx * u.x + dy * u.y < g * r)
                    {
                        continue;
                    }
                    let alpha = broadside_angle(geom.heading, dy.atan2(dx), self.side_sign);
                    if wrap_angle(alpha - self.boresight).abs() > self.half_fov {
                        continue;
                    }
                    let mut any = false;
                    for (w, beam) in weights.iter_mut().zip(self.beams) {
                        let off = wrap_angle(alpha - beam.alpha_p);
                        *w = match cutoff {
                            Some(c) if off.abs() > c * beam.delta_alpha => 0.0,
                            _ => {
                                any = true;
                                beam.weight_for_offset(off)
                            }
                        };
                    }
                    if !any {
                        continue;
                    }
                    let pos = r / spacing;
                    let sample = match self.options.interp {
                        Interpolation::Nearest => {
                            let k = (pos + 0.5).floor() as usize;
                            if k >= bins {
                                continue;
                            }
                            column[k]
                        }
                        Interpolation::Linear => {
                            let k = pos.floor();
                            let ki = k as usize;
                            if ki + 1 >= bins {
                                continue;
                            }
                            let f = pos - k;
                            column[ki] * (1.0 - f) + column[ki + 1] * f
                        }
                    };
                    let delay = 2.0 * r / SPEED_OF_LIGHT;
                    let v = sample * Complex64::from_polar(1.0, self.phase_rate * delay);
                    let base = (ty * tile.nx + tx) * nb;
                    for (b, &w) in weights.iter().enumerate() {
                        if w != 0.0 {
                            acc[base + b] += v * w;
                        }
                    }
                }
            }
        }
        acc
    }

    /// Conservative test that no pixel of the tile passes the gates for this pulse.
    fn tile_is_dark(&self, geom: &PulseGeometry, centre: Vec2, half_diag: f64) -> bool {
        let d = centre - geom.position;
        let dist = d.norm();
        if dist - half_diag > self.max_range {
            return true;
        }
        if dist <= half_diag * 1.000_001 + 1e-9 {
            return false;
        }
        let spread = (half_diag / dist).asin() + 1e-9;
        let alpha = broadside_angle(geom.heading, d.y.atan2(d.x), self.side_sign);
        if wrap_angle(alpha - self.boresight).abs() > self.half_fov + spread {
            return true;
        }
        match self.options.cutoff {
            Some(c) => self
                .beams
                .iter()
                .all(|b| wrap_angle(alpha - b.alpha_p).abs() > c * b.delta_alpha + spread),
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::deg;
    use approx::assert_relative_eq;

    fn pose(heading: f64) -> PlatformPose {
        PlatformPose {
            tau: 0.0,
            position: Vec2::zeros(),
            heading,
            speed: 1.0,
        }
    }

    #[test]
    fn delay_examples() {
        assert_relative_eq!(two_way_delay(Vec2::zeros(), Vec2::new(15.0, 0.0)).unwrap(), 100e-9, max_relative = 1e-12);
        assert_relative_eq!(
            two_way_delay(Vec2::zeros(), Vec2::new(3.0, 4.0)).unwrap(),
            33.333_333e-9,
            max_relative = 1e-6
        );
        assert_relative_eq!(two_way_delay(Vec2::zeros(), Vec2::new(0.0, 26.0)).unwrap(), 173.333_33e-9, max_relative = 1e-6);
        assert!(two_way_delay(Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn look_angle_examples() {
        let left = Side::Left;
        assert_eq!(look_angle(&pose(0.0), Vec2::new(0.0, 3.0), left).unwrap(), 0.0);
        assert_relative_eq!(look_angle(&pose(0.0), Vec2::new(2.0, 2.0), left).unwrap(), PI / 4.0);
        assert_relative_eq!(look_angle(&pose(0.0), Vec2::new(-2.0, 2.0), left).unwrap(), -PI / 4.0);
        // Mirror image on the right-hand side.
        assert_relative_eq!(look_angle(&pose(0.0), Vec2::new(2.0, -2.0), Side::Right).unwrap(), PI / 4.0);
        assert_relative_eq!(look_angle(&pose(PI / 2.0), Vec2::new(3.0, 0.0), Side::Right).unwrap(), 0.0);
        assert!(look_angle(&pose(0.0), Vec2::zeros(), left).is_err());
    }

    #[test]
    fn filter_examples() {
        let beam = Beam::new(deg(5.0), 0.04).unwrap();
        assert_eq!(spatial_filter(deg(5.0), &beam), 1.0);
        let b0 = Beam::new(0.0, 0.04).unwrap();
        assert_relative_eq!(spatial_filter(0.04, &b0), (-4.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(spatial_filter(-0.02, &b0), (-1.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(spatial_filter(-0.02, &b0), 0.367_879, max_relative = 1e-5);
        assert!(Beam::new(0.0, 0.0).is_err());
        let b = Beam::new(0.25, 0.1).unwrap();
        assert_eq!(spatial_filter(0.25 + 0.125, &b), spatial_filter(0.25 - 0.125, &b));
        for k in 0..50 {
            let d = 0.003 * k as f64;
            assert_eq!(b.weight_for_offset(d), b.weight_for_offset(-d));
        }
        assert!(spatial_filter(0.25 + 2.0 * 0.1, &b) < 1.2e-7);
    }

    #[test]
    fn sinc_half_power_constant() {
        let f = |x: f64| (PI * x).sin() / (PI * x) - 0.5f64.sqrt();
        let (mut lo, mut hi) = (0.3, 0.6);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((2.0 * lo - SINC_HALF_POWER_WIDTH).abs() < 1e-12);
    }

    #[test]
    fn beamwidth_examples() {
        let f0 = 77e9;
        let lambda = SPEED_OF_LIGHT / f0;
        let d = beamwidth_for_resolution(0.05, f0).unwrap();
        assert_relative_eq!(d, 0.032_964, max_relative = 1e-4);
        assert_relative_eq!(cross_range_width(d, f0), SINC_HALF_POWER_WIDTH * 0.05, max_relative = 1e-12);
        let half = beamwidth_for_resolution(lambda / 2.0, f0).unwrap();
        assert_relative_eq!(half, 2.0 * 0.423_055, max_relative = 1e-5);
        let d2 = beamwidth_for_resolution(0.10, f0).unwrap();
        assert_relative_eq!(d2, d / 2.0, max_relative = 1e-14);
        assert!(beamwidth_for_resolution(0.0, f0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(ImageGrid::new(0.0, 0.0, 0.0, 0.01, 4, 4).is_err());
        assert!(ImageGrid::new(0.0, 0.0, 0.01, 0.01, 0, 4).is_err());
        let g = ImageGrid::new(0.0, 0.0, 0.04, 0.01, 4, 4).unwrap();
        assert!(g.undersampled(&FmcwParams::table_one()));
        assert_eq!(g.pixel(2, 3), Vec2::new(0.08, 0.03));
    }
}
