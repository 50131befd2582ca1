//! Dechirped FMCW echo synthesis and range compression.
//!
//! The fast-time axis of every pulse is centred on the middle of the chirp,
//! `t_n = (n - (N - 1) / 2) / fs`, and the range FFT is phase-referenced to the
//! same point. With that convention a target at delay `T_D` compresses to a
//! real sinc-like kernel times `exp(j 2 pi f0 T_D)`, which is the form of the
//! range-compressed reference signal used for focusing.
//!
//! Normalization: a unit-amplitude tone that falls exactly on a bin produces a
//! peak of magnitude 1 for every window (the window's coherent gain is divided
//! out). The full zero-padded transform of one column then satisfies
//! `sum |X|^2 = M / (N cg)^2 * sum |w x|^2`, with `M` the padded length and
//! `cg` the window mean.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::focus::Beam;
use crate::geometry::{wrap_angle, SPEED_OF_LIGHT};
use crate::matrix::ColumnMatrix;
use crate::scene::{radar_phase_center, scattering_gain, RadarMount, Scene, Trajectory};

/// Samples between exact re-evaluations of the tone phasor.
const PHASOR_REANCHOR: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmcwParams {
    /// Carrier at the chirp centre (Hz).
    pub f0: f64,
    pub bandwidth: f64,
    pub pulse_duration: f64,
    pub prf: f64,
    pub max_range: f64,
    pub fast_time_samples: usize,
}

impl FmcwParams {
    /// 77 GHz, 3 GHz sweep, 155 us chirp, 990 Hz PRF, 26 m maximum range.
    /// 1040 samples is the smallest count meeting the beat-signal Nyquist
    /// bound with a factor-two margin.
    pub fn table_one() -> Self {
        FmcwParams {
            f0: 77e9,
            bandwidth: 3e9,
            pulse_duration: 155e-6,
            prf: 990.0,
            max_range: 26.0,
            fast_time_samples: 1040,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("f0", self.f0),
            ("bandwidth", self.bandwidth),
            ("pulse_duration", self.pulse_duration),
            ("prf", self.prf),
            ("max_range", self.max_range),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if self.prf * self.pulse_duration > 1.0 {
            return Err(Error::invalid("prf", "prf * pulse_duration exceeds 1"));
        }
        let min = self.min_fast_time_samples();
        if self.fast_time_samples < min {
            return Err(Error::invalid(
                "fast_time_samples",
                format!("{} below the Nyquist bound {min}", self.fast_time_samples),
            ));
        }
        Ok(())
    }

    /// `2 * max_range * bandwidth * 2 / c`, rounded up.
    pub fn min_fast_time_samples(&self) -> usize {
        (4.0 * self.max_range * self.bandwidth / SPEED_OF_LIGHT - 1e-9).ceil() as usize
    }

    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f0
    }

    pub fn sample_rate(&self) -> f64 {
        self.fast_time_samples as f64 / self.pulse_duration
    }

    pub fn chirp_rate(&self) -> f64 {
        self.bandwidth / self.pulse_duration
    }

    pub fn beat_frequency(&self, delay: f64) -> f64 {
        self.chirp_rate() * delay
    }

    /// Range-bin spacing after zero padding by `pad`.
    pub fn bin_spacing(&self, pad: usize) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth * pad as f64)
    }
}

impl Default for FmcwParams {
    fn default() -> Self {
        Self::table_one()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Rectangular,
    #[default]
    Hann,
    /// Four-term Taylor, -30 dB sidelobes.
    Taylor,
}

impl Window {
    pub fn id(self) -> u32 {
        match self {
            Window::Rectangular => 0,
            Window::Hann => 1,
            Window::Taylor => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Window::Rectangular),
            1 => Ok(Window::Hann),
            2 => Ok(Window::Taylor),
            _ => Err(Error::invalid("window", format!("unknown window id {id}"))),
        }
    }

    /// Symmetric window coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => {
                if n < 2 {
                    return vec![1.0; n];
                }
                (0..n)
                    .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
                    .collect()
            }
            Window::Taylor => taylor(n, 4, 30.0),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rectangular" | "rect" => Ok(Window::Rectangular),
            "hann" => Ok(Window::Hann),
            "taylor" => Ok(Window::Taylor),
            other => Err(Error::invalid("window", format!("unknown window `{other}`"))),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Window::Rectangular => "rectangular",
            Window::Hann => "hann",
            Window::Taylor => "taylor",
        })
    }
}

fn taylor(n: usize, nbar: usize, sll_db: f64) -> Vec<f64> {
    let a = (10f64.powf(sll_db / 20.0)).acosh() / PI;
    let sigma2 = (nbar * nbar) as f64 / (a * a + (nbar as f64 - 0.5).powi(2));
    let coeffs: Vec<f64> = (1..nbar)
        .map(|m| {
            let m = m as f64;
            let num: f64 = (1..nbar)
                .map(|k| 1.0 - m * m / sigma2 / (a * a + (k as f64 - 0.5).powi(2)))
                .product();
            let den: f64 = (1..nbar)
                .filter(|&k| k as f64 != m)
                .map(|k| 1.0 - m * m / (k * k) as f64)
                .product();
            let sign = if (m as usize) % 2 == 1 { 1.0 } else { -1.0 };
            sign * num / (2.0 * den)
        })
        .collect();
    (0..n)
        .map(|i| {
            let x = (i as f64 - (n as f64 - 1.0) / 2.0) / n as f64;
            1.0 + 2.0
                * coeffs
                    .iter()
                    .enumerate()
                    .map(|(m, f)| f * (2.0 * PI * (m + 1) as f64 * x).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Dechirped beat signal, one column per pulse.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatMatrix {
    pub data: ColumnMatrix,
    pub taus: Vec<f64>,
}

/// Angular gains below this are treated as zero by the synthesis; a specular
/// lobe reaches it about 2.6 beamwidths off its normal.
pub const NEGLIGIBLE_GAIN: f64 = 1e-12;

/// Builds the dechirped echoes of `scene` along `traj`.
///
/// Each scatterer inside the antenna field of view and within `max_range`
/// adds a tone at `f_b = (B / T_p) T_D` with phase `2 pi f0 T_D` at the chirp
/// centre, weighted by its amplitude and angular gain. Stop-and-go: the
/// platform is frozen during a pulse. Circular white noise of standard
/// deviation `noise_std` is drawn from a ChaCha stream keyed by
/// `(seed, pulse index)`, so output does not depend on the worker count.
pub fn synthesize_dechirped(
    scene: &Scene,
    traj: &Trajectory,
    mount: &RadarMount,
    params: &FmcwParams,
    noise_std: f64,
    seed: u64,
) -> Result<BeatMatrix> {
    params.validate()?;
    if traj.is_empty() {
        return Err(Error::invalid("trajectory", "trajectory has no poses"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std", "must be non-negative"));
    }
    let n = params.fast_time_samples;
    let fs = params.sample_rate();
    let centre = (n as f64 - 1.0) / 2.0;
    let half_fov = 0.5 * mount.fov;

    for pose in traj.poses() {
        let pc = radar_phase_center(pose, mount);
        if let Some(s) = scene.scatterers().iter().find(|s| (s.position - pc.position).norm() == 0.0) {
            return Err(Error::ZeroRange {
                what: "scatterer",
                x: s.position.x,
                y: s.position.y,
            });
        }
    }

    let mut data = ColumnMatrix::zeros(n, traj.len());
    let poses = traj.poses();
    data.columns_mut()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .for_each(|(col, out)| {
            let pc = radar_phase_center(&poses[col], mount);
            for s in scene.scatterers() {
                let los = s.position - pc.position;
                let range = los.norm();
                if range > params.max_range {
                    continue;
                }
                let theta = los.y.atan2(los.x);
                if wrap_angle(theta - pc.boresight).abs() > half_fov {
                    continue;
                }
                let gain = scattering_gain(s, theta + PI);
                if gain < NEGLIGIBLE_GAIN {
                    continue;
                }
                let weight = s.amplitude * gain;
                let delay = 2.0 * range / SPEED_OF_LIGHT;
                let phase0 = 2.0 * PI * params.f0 * delay;
                let step = 2.0 * PI * params.beat_frequency(delay) / fs;
                add_tone(out, weight, phase0, step, centre);
            }
            if noise_std > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(col as u64);
                let sigma = noise_std / 2f64.sqrt();
                for z in out.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *z += Complex64::new(sigma * re, sigma * im);
                }
            }
        });
    Ok(BeatMatrix {
        data,
        taus: traj.taus(),
    })
}

/// Accumulates `weight * exp(j (phase0 + step (n - centre)))` into `out`.
fn add_tone(out: &mut [Complex64], weight: Complex64, phase0: f64, step: f64, centre: f64) {
    // Four interleaved recurrences advanced by rot^4 keep the multiply chain short.
    let rot4 = Complex64::from_polar(1.0, 4.0 * step);
    for (block, chunk) in out.chunks_mut(PHASOR_REANCHOR).enumerate() {
        let n0 = (block * PHASOR_REANCHOR) as f64;
        let mut z: [Complex64; 4] =
            std::array::from_fn(|l| weight * Complex64::from_polar(1.0, phase0 + step * (n0 + l as f64 - centre)));
        let mut quads = chunk.chunks_exact_mut(4);
        for q in &mut quads {
            for l in 0..4 {
                q[l] += z[l];
                z[l] *= rot4;
            }
        }
        for (v, zl) in quads.into_remainder().iter_mut().zip(z) {
            *v += zl;
        }
    }
}

/// Range-compressed data: rows are range bins starting at zero range, columns
/// are pulses.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeCompressedMatrix {
    pub data: ColumnMatrix,
    pub range_spacing: f64,
    pub taus: Vec<f64>,
    pub params: FmcwParams,
    pub window: Window,
    pub zero_pad_factor: usize,
}

impl RangeCompressedMatrix {
    pub fn range_bins(&self) -> usize {
        self.data.rows()
    }

    pub fn pulses(&self) -> usize {
        self.data.cols()
    }

    pub fn range_of_bin(&self, k: usize) -> f64 {
        k as f64 * self.range_spacing
    }
}

/// Per-column range transform shared by [`range_compress`] and its tests.
pub struct ColumnCompressor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    phase_ref: Vec<Complex64>,
    scale: f64,
    padded_len: usize,
}

impl ColumnCompressor {
    pub fn new(samples: usize, window: Window, zero_pad_factor: usize) -> Result<Self> {
        if ![1, 2, 4, 8].contains(&zero_pad_factor) {
            return Err(Error::invalid(
                "zero_pad_factor",
                format!("{zero_pad_factor} not in {{1, 2, 4, 8}}"),
            ));
        }
        if samples == 0 {
            return Err(Error::invalid("fast_time_samples", "must be positive"));
        }
        let m = samples * zero_pad_factor;
        let coeffs = window.coefficients(samples);
        let coherent_gain = coeffs.iter().sum::<f64>() / samples as f64;
        // exp(+j 2 pi k c / M) with c = (N - 1) / 2, reduced exactly modulo 2M.
        let two_m = 2 * m;
        let phase_ref = (0..m)
            .map(|k| {
                let q = (k * (samples - 1)) % two_m;
                Complex64::from_polar(1.0, PI * q as f64 / m as f64)
            })
            .collect();
        Ok(ColumnCompressor {
            fft: FftPlanner::new().plan_fft_forward(m),
            window: coeffs,
            phase_ref,
            scale: 1.0 / (samples as f64 * coherent_gain),
            padded_len: m,
        })
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    /// Windowed, zero-padded, centre-referenced and gain-normalized FFT.
    /// `buffer` must have the padded length.
    pub fn transform(&self, input: &[Complex64], buffer: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        debug_assert_eq!(buffer.len(), self.padded_len);
        for (b, (x, w)) in buffer.iter_mut().zip(input.iter().zip(&self.window)) {
            *b = x * *w;
        }
        for b in buffer[input.len()..].iter_mut() {
            *b = Complex64::new(0.0, 0.0);
        }
        scratch.resize(self.fft.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        self.fft.process_with_scratch(buffer, scratch);
        for (b, p) in buffer.iter_mut().zip(&self.phase_ref) {
            *b = *b * *p * self.scale;
        }
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }
}

/// Range compression by fast-time FFT. Only bins up to `max_range` (plus one
/// guard bin) are kept; the discarded bins hold ranges the synthesis never
/// populates.
pub fn range_compress(
    raw: &BeatMatrix,
    params: &FmcwParams,
    window: Window,
    zero_pad_factor: usize,
) -> Result<RangeCompressedMatrix> {
    params.validate()?;
    let n = params.fast_time_samples;
    if raw.data.rows() != n {
        return Err(Error::DimensionMismatch(format!(
            "beat matrix has {} fast-time samples, parameters say {n}",
            raw.data.rows()
        )));
    }
    if raw.taus.len() != raw.data.cols() {
        return Err(Error::DimensionMismatch("slow-time axis length".into()));
    }
    let compressor = ColumnCompressor::new(n, window, zero_pad_factor)?;
    let m = compressor.padded_len();
    let spacing = params.bin_spacing(zero_pad_factor);
    let keep = ((params.max_range / spacing).ceil() as usize + 2).min(m);

    let mut data = ColumnMatrix::zeros(keep, raw.data.cols());
    data.columns_mut()
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .for_each_init(
            || (vec![Complex64::new(0.0, 0.0); m], Vec::new()),
            |(buffer, scratch), (col, out)| {
                compressor.transform(raw.data.column(col), buffer, scratch);
                out.copy_from_slice(&buffer[..keep]);
            },
        );
    Ok(RangeCompressedMatrix {
        data,
        range_spacing: spacing,
        taus: raw.taus.clone(),
        params: *params,
        window,
        zero_pad_factor,
    })
}

/// Range-compressed reference return of one target,
/// `A T_p sinc[B (t - T_D)] exp(j 2 pi f0 T_D)`, with the normalized sinc.
/// [`range_compress`] output equals this divided by `T_p` (rectangular window).
pub fn rc_model(target_delay: f64, amplitude: Complex64, t: f64, params: &FmcwParams) -> Complex64 {
    amplitude
        * params.pulse_duration
        * sinc(params.bandwidth * (t - target_delay))
        * Complex64::from_polar(1.0, 2.0 * PI * params.f0 * target_delay)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingCheck {
    Ok {
        displacement: f64,
        limit: f64,
    },
    Warning {
        displacement: f64,
        limit: f64,
        max_unambiguous_speed: f64,
    },
}

impl SamplingCheck {
    pub fn is_ok(&self) -> bool {
        matches!(self, SamplingCheck::Ok { .. })
    }

    pub fn displacement(&self) -> f64 {
        match *self {
            SamplingCheck::Ok { displacement, .. } | SamplingCheck::Warning { displacement, .. } => displacement,
        }
    }

    pub fn limit(&self) -> f64 {
        match *self {
            SamplingCheck::Ok { limit, .. } | SamplingCheck::Warning { limit, .. } => limit,
        }
    }
}

/// Spatial Nyquist check for one processing beam: the per-pulse platform
/// displacement `v / PRF` must not exceed `lambda / (4 sin(|alpha_P| + delta_alpha))`.
/// `channels` phase centres interleaved evenly along track divide the
/// displacement.
pub fn aperture_sampling_check(traj: &Trajectory, params: &FmcwParams, beam: &Beam, channels: usize) -> SamplingCheck {
    let prf = params.prf * channels.max(1) as f64;
    let displacement = traj.max_speed() / prf;
    let extent = (beam.alpha_p.abs() + beam.delta_alpha).min(PI / 2.0);
    let limit = params.wavelength() / (4.0 * extent.sin());
    if displacement <= limit {
        SamplingCheck::Ok { displacement, limit }
    } else {
        SamplingCheck::Warning {
            displacement,
            limit,
            max_unambiguous_speed: limit * prf,
        }
    }
}
