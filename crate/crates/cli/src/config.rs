//! Scenario configuration: TOML text, `key=value` overrides, validation with
//! line numbers, and conversion into library types.

use std::fmt;
use std::path::{Path, PathBuf};

use mbsar::focus::{beamwidth_for_resolution, Beam, FocusOptions, ImageGrid, Interpolation};
use mbsar::geometry::{deg, Vec2};
use mbsar::navigation::{ProcessNoise, SensorSpec, SensorSuite, StateCovariance, StateVector, UkfConfig, DEFAULT_WHEELBASE};
use mbsar::scene::{CtraSegment, Extent, PlatformPose, RadarMount, Scatterer, ScatteringPattern, Scene, Side};
use mbsar::signal::{FmcwParams, Window};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: `{}`: {}", self.key, self.message),
            None if self.key.is_empty() => write!(f, "{}", self.message),
            None => write!(f, "`{}`: {}", self.key, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub radar: RadarConfig,
    #[serde(default)]
    pub mount: MountConfig,
    pub trajectory: TrajectoryConfig,
    pub scene: SceneConfig,
    #[serde(default)]
    pub sensors: SensorsConfig,
    #[serde(default)]
    pub ukf: UkfSection,
    pub focus: FocusConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RadarConfig {
    pub f0: f64,
    pub bandwidth: f64,
    pub pulse_duration: f64,
    pub prf: f64,
    pub max_range: f64,
    /// Defaults to the Nyquist minimum for `max_range`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_time_samples: Option<usize>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default = "default_window")]
    pub window: String,
    #[serde(default = "default_pad")]
    pub zero_pad_factor: usize,
    /// Per-channel phase-centre offsets added to the mount lever arm.
    #[serde(default = "default_channels")]
    pub channel_offsets: Vec<[f64; 2]>,
}

fn default_window() -> String {
    "hann".into()
}

fn default_pad() -> usize {
    4
}

fn default_channels() -> Vec<[f64; 2]> {
    vec![[0.0, 0.0]]
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MountConfig {
    pub squint_deg: f64,
    pub fov_deg: f64,
    pub lever_arm: [f64; 2],
    pub side: Side,
}

impl Default for MountConfig {
    fn default() -> Self {
        MountConfig {
            squint_deg: 60.0,
            fov_deg: 120.0,
            lever_arm: [2.0, 0.0],
            side: Side::Right,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    #[serde(default)]
    pub start: [f64; 2],
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default)]
    pub start_tau: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub segments: Vec<CtraSegment>,
    /// Trajectory CSV used instead of `segments`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub extent_min: [f64; 2],
    pub extent_max: [f64; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<PointConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<RowConfig>,
}

/// Specular when `normal_deg` is given, isotropic otherwise.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    pub position: [f64; 2],
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub phase_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_deg: Option<f64>,
    #[serde(default = "default_lobe")]
    pub beamwidth_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RowConfig {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub spacing: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default)]
    pub phase_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_deg: Option<f64>,
    #[serde(default = "default_lobe")]
    pub beamwidth_deg: f64,
}

fn one() -> f64 {
    1.0
}

fn default_lobe() -> f64 {
    5.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    #[serde(default = "yes")]
    pub enabled: bool,
    pub rate_hz: f64,
    pub noise_std: f64,
    /// Standard deviation assumed by the filter; defaults to `noise_std`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reported_std: Option<f64>,
}

fn yes() -> bool {
    true
}

impl From<SensorSpec> for SensorConfig {
    fn from(s: SensorSpec) -> Self {
        SensorConfig {
            enabled: true,
            rate_hz: s.rate_hz,
            noise_std: s.noise_std,
            reported_std: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SensorsConfig {
    pub imu: SensorConfig,
    pub gyro: SensorConfig,
    pub wheel: SensorConfig,
    pub steering: SensorConfig,
    pub gnss: SensorConfig,
    pub wheelbase: f64,
    /// GNSS antenna offset; defaults to the radar lever arm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gnss_lever_arm: Option<[f64; 2]>,
}

impl Default for SensorsConfig {
    fn default() -> Self {
        let d = SensorSuite::default();
        SensorsConfig {
            imu: d.imu.unwrap().into(),
            gyro: d.gyro.unwrap().into(),
            wheel: d.wheel.unwrap().into(),
            steering: d.steering.unwrap().into(),
            gnss: d.gnss.unwrap().into(),
            wheelbase: DEFAULT_WHEELBASE,
            gnss_lever_arm: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProcessNoiseConfig {
    pub position: f64,
    pub jerk: f64,
    pub yaw_acceleration: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct UkfSection {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Initial standard deviations of `[x, y, v, a, psi, omega]`.
    pub initial_std: [f64; 6],
    pub process_noise: ProcessNoiseConfig,
    pub min_steering_speed: f64,
}

impl Default for UkfSection {
    fn default() -> Self {
        let d = UkfConfig::default();
        let p = d.process_noise;
        UkfSection {
            alpha: d.alpha,
            beta: d.beta,
            kappa: d.kappa,
            initial_std: std::array::from_fn(|i| d.initial_covariance[(i, i)].sqrt()),
            process_noise: ProcessNoiseConfig {
                position: p.position,
                jerk: p.jerk,
                yaw_acceleration: p.yaw_acceleration,
            },
            min_steering_speed: d.min_steering_speed,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrajectorySource {
    True,
    #[default]
    Estimated,
}

impl TrajectorySource {
    pub fn name(self) -> &'static str {
        match self {
            TrajectorySource::True => "true",
            TrajectorySource::Estimated => "estimated",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x0: f64,
    pub y0: f64,
    #[serde(default = "default_pixel")]
    pub dx: f64,
    #[serde(default = "default_pixel")]
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
}

fn default_pixel() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FocusConfig {
    pub grid: GridConfig,
    #[serde(default = "default_beams")]
    pub beams_deg: Vec<f64>,
    #[serde(default = "default_resolution")]
    pub cross_range_resolution: f64,
    /// Overrides the beam resolution derived from `cross_range_resolution`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_alpha_deg: Option<f64>,
    #[serde(default)]
    pub interp: Interpolation,
    /// Filter truncation in beam resolutions; 0 disables it.
    #[serde(default = "default_cutoff")]
    pub cutoff: f64,
    #[serde(default = "default_tile")]
    pub tile_size: usize,
    #[serde(default)]
    pub trajectory: TrajectorySource,
    #[serde(default = "default_dr")]
    pub dynamic_range_db: f64,
}

fn default_beams() -> Vec<f64> {
    vec![0.0, 5.0, 20.0]
}

fn default_resolution() -> f64 {
    0.05
}

fn default_cutoff() -> f64 {
    mbsar::focus::DEFAULT_CUTOFF
}

fn default_tile() -> usize {
    mbsar::focus::DEFAULT_TILE
}

fn default_dr() -> f64 {
    mbsar::imaging::DEFAULT_DYNAMIC_RANGE_DB
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub workers: Vec<usize>,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workers: vec![1, 2, 4],
            repetitions: 3,
        }
    }
}

/// Validated scenario in library types.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub params: FmcwParams,
    pub window: Window,
    pub mount: RadarMount,
    /// One mount per channel; lever arms include the channel offsets.
    pub channels: Vec<RadarMount>,
    pub scene: Scene,
    pub segments: Vec<CtraSegment>,
    pub start: PlatformPose,
    pub trajectory_file: Option<PathBuf>,
    pub sensors: SensorSuite,
    pub ukf: UkfConfig,
    pub grid: ImageGrid,
    pub beams: Vec<Beam>,
    pub focus: FocusOptions,
}

/// Configuration text together with where it came from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    /// Effective configuration after overrides, as TOML.
    pub effective: String,
}

fn err(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        line,
        message: message.into(),
    }
}

/// Line (1-based) of `key` inside table `table` of a TOML document. Array
/// tables are addressed as `name.N`. Purely textual, good enough for
/// diagnostics.
pub fn locate(text: &str, dotted: &str) -> Option<usize> {
    let parts: Vec<&str> = dotted.split('.').collect();
    // Longest prefix naming a table header, with an optional array index.
    for split in (0..parts.len()).rev() {
        let (table, rest) = parts.split_at(split);
        let (table, index) = match table.last().and_then(|s| s.parse::<usize>().ok()) {
            Some(i) => (&table[..table.len() - 1], Some(i)),
            None => (table, None),
        };
        let name = table.join(".");
        let key = rest.first().copied()?;
        if let Some(line) = find_in_table(text, &name, index, key) {
            return Some(line);
        }
    }
    None
}

fn find_in_table(text: &str, table: &str, index: Option<usize>, key: &str) -> Option<usize> {
    let mut seen = 0usize;
    let mut active = table.is_empty() && index.is_none();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix("[[").and_then(|l| l.split("]]").next()) {
            active = h.trim() == table
                && match index {
                    Some(want) => {
                        seen += 1;
                        seen - 1 == want
                    }
                    None => false,
                };
            continue;
        }
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.split(']').next()) {
            active = h.trim() == table && index.is_none();
            continue;
        }
        if active {
            if let Some(rest) = line.strip_prefix(key) {
                let rest = rest.trim_start();
                if rest.starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Applies `key=value` overrides to a parsed document. Values are parsed as
/// TOML and fall back to bare strings. Array elements are addressed by index,
/// e.g. `trajectory.segments.1.speed=2.5`.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<(), ConfigError> {
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| err(o.clone(), None, "override must look like key=value"))?;
        let key = key.trim();
        let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", value.trim())) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.trim().to_string()),
        };
        let parts: Vec<&str> = key.split('.').collect();
        let mut root = toml::Value::Table(std::mem::take(doc));
        let result = set_path(&mut root, &parts, value, key);
        if let toml::Value::Table(t) = root {
            *doc = t;
        }
        result?;
    }
    Ok(())
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, key: &str) -> Result<(), ConfigError> {
    let (head, rest) = parts.split_first().ok_or_else(|| err(key, None, "empty key"))?;
    let child = match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.to_string(), value);
                return Ok(());
            }
            t.entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let idx: usize = head
                .parse()
                .map_err(|_| err(key, None, format!("`{head}` is not an array index")))?;
            let len = a.len();
            let slot = a
                .get_mut(idx)
                .ok_or_else(|| err(key, None, format!("index {idx} out of range (length {len})")))?;
            if rest.is_empty() {
                *slot = value;
                return Ok(());
            }
            slot
        }
        _ => return Err(err(key, None, format!("cannot descend into `{head}`"))),
    };
    set_path(child, rest, value, key)
}

/// Reads a scenario file (TOML, or the JSON run manifest) and applies overrides.
pub fn load(path: &Path, overrides: &[String]) -> Result<Loaded, crate::error::CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| crate::error::CliError::Io(format!("{}: {e}", path.display())))?;
    let text = if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| err("", None, format!("{}: invalid manifest: {e}", path.display())))?;
        v.get("effective_config")
            .and_then(|c| c.as_str())
            .ok_or_else(|| err("effective_config", None, "manifest has no embedded configuration"))?
            .to_string()
    } else {
        text
    };
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse(&text, overrides, base)?)
}

/// Parses configuration text. Relative file references resolve against `base`.
pub fn parse(text: &str, overrides: &[String], base: &Path) -> Result<Loaded, ConfigError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| {
        err(
            "",
            e.span().map(|s| line_of_offset(text, s.start)),
            format!("syntax error: {}", e.message()),
        )
    })?;
    // Type errors are reported against the file text before overrides.
    if let Err(e) = toml::from_str::<ScenarioConfig>(text) {
        return Err(err("", e.span().map(|s| line_of_offset(text, s.start)), e.message().to_string()));
    }
    apply_overrides(&mut doc, overrides)?;
    let config: ScenarioConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| err("", None, format!("after overrides: {}", e.message())))?;
    let line = |key: &str| locate(text, key);
    let scenario = build(config, base, &line)?;
    let effective = toml::to_string(&scenario.config).map_err(|e| err("", None, e.to_string()))?;
    Ok(Loaded { scenario, effective })
}

fn build(mut config: ScenarioConfig, base: &Path, line: &dyn Fn(&str) -> Option<usize>) -> Result<Scenario, ConfigError> {
    let fail = |key: &str, msg: String| err(key, line(key), msg);
    let lib = |prefix: &str, e: mbsar::Error| -> ConfigError {
        match e {
            mbsar::Error::InvalidParameter { name, reason } => {
                let key = format!("{prefix}.{name}");
                err(key.clone(), line(&key), reason)
            }
            other => err(prefix, line(prefix), other.to_string()),
        }
    };

    let r = &config.radar;
    let mut params = FmcwParams {
        f0: r.f0,
        bandwidth: r.bandwidth,
        pulse_duration: r.pulse_duration,
        prf: r.prf,
        max_range: r.max_range,
        fast_time_samples: 1,
    };
    if !(params.bandwidth > 0.0) {
        return Err(fail("radar.bandwidth", format!("bandwidth must be positive, got {}", params.bandwidth)));
    }
    if !(params.max_range > 0.0) {
        return Err(fail("radar.max_range", "must be positive".into()));
    }
    params.fast_time_samples = match r.fast_time_samples {
        Some(n) => n,
        None => params.min_fast_time_samples(),
    };
    params.validate().map_err(|e| lib("radar", e))?;
    let window: Window = r
        .window
        .parse()
        .map_err(|e: mbsar::Error| fail("radar.window", e.to_string()))?;
    if ![1, 2, 4, 8].contains(&r.zero_pad_factor) {
        return Err(fail("radar.zero_pad_factor", format!("{} not in {{1, 2, 4, 8}}", r.zero_pad_factor)));
    }
    if !(r.noise_std >= 0.0) {
        return Err(fail("radar.noise_std", "must be non-negative".into()));
    }
    if r.channel_offsets.is_empty() {
        return Err(fail("radar.channel_offsets", "at least one channel is required".into()));
    }

    let m = &config.mount;
    let mount = RadarMount::new(deg(m.squint_deg), deg(m.fov_deg), v2(m.lever_arm), m.side).map_err(|e| lib("mount", e))?;
    let channels = r
        .channel_offsets
        .iter()
        .map(|o| RadarMount {
            lever_arm: mount.lever_arm + v2(*o),
            ..mount
        })
        .collect();

    let t = &config.trajectory;
    let trajectory_file = match &t.file {
        Some(f) => {
            let p = if f.is_absolute() { f.clone() } else { base.join(f) };
            if !p.exists() {
                return Err(fail("trajectory.file", format!("{} does not exist", p.display())));
            }
            Some(p)
        }
        None => None,
    };
    if trajectory_file.is_none() && t.segments.is_empty() {
        return Err(fail("trajectory.segments", "give segments or a trajectory file".into()));
    }
    for (i, s) in t.segments.iter().enumerate() {
        if !(s.duration > 0.0) {
            let key = format!("trajectory.segments.{i}.duration");
            return Err(err(key.clone(), line(&key), "must be positive"));
        }
        if !(s.speed >= 0.0) || s.speed + s.acceleration * s.duration < 0.0 {
            let key = format!("trajectory.segments.{i}.speed");
            return Err(err(key.clone(), line(&key), "speed must stay non-negative"));
        }
    }
    let start = PlatformPose {
        tau: t.start_tau,
        position: v2(t.start),
        heading: deg(t.heading_deg),
        speed: 0.0,
    };

    let sc = &config.scene;
    let extent = Extent::new(v2(sc.extent_min), v2(sc.extent_max)).map_err(|e| lib("scene", e))?;
    let mut scene = Scene::new(extent);
    let pattern = |normal: Option<f64>, lobe: f64| match normal {
        Some(n) => ScatteringPattern::Specular {
            normal: deg(n),
            beamwidth: deg(lobe),
        },
        None => ScatteringPattern::Isotropic,
    };
    for (i, p) in sc.points.iter().enumerate() {
        let key = format!("scene.points.{i}.position");
        let s = Scatterer::new(
            v2(p.position),
            Complex64::from_polar(p.amplitude, deg(p.phase_deg)),
            pattern(p.normal_deg, p.beamwidth_deg),
        )
        .and_then(|s| scene.push(s));
        s.map_err(|e| err(key.clone(), line(&key), e.to_string()))?;
    }
    for (i, row) in sc.rows.iter().enumerate() {
        let key = format!("scene.rows.{i}.start");
        scene
            .add_row(
                v2(row.start),
                v2(row.end),
                row.spacing,
                Complex64::from_polar(row.amplitude, deg(row.phase_deg)),
                pattern(row.normal_deg, row.beamwidth_deg),
            )
            .map_err(|e| err(key.clone(), line(&key), e.to_string()))?;
    }

    let s = &config.sensors;
    let spec = |name: &str, c: &SensorConfig| -> Result<Option<SensorSpec>, ConfigError> {
        if !c.enabled {
            return Ok(None);
        }
        let key = format!("sensors.{name}");
        if !(c.rate_hz > 0.0 && c.rate_hz <= params.prf) {
            return Err(err(key.clone(), line(&key), format!("rate must be in (0, prf], got {}", c.rate_hz)));
        }
        if !(c.noise_std >= 0.0) {
            return Err(err(key.clone(), line(&key), "noise_std must be non-negative"));
        }
        let reported = c.reported_std.unwrap_or(c.noise_std);
        if !(reported > 0.0) {
            return Err(err(key.clone(), line(&key), "reported_std (or noise_std) must be positive"));
        }
        Ok(Some(SensorSpec {
            rate_hz: c.rate_hz,
            noise_std: c.noise_std,
            reported_std: reported,
        }))
    };
    if !(s.wheelbase > 0.0) {
        return Err(fail("sensors.wheelbase", "must be positive".into()));
    }
    let gnss_lever_arm = s.gnss_lever_arm.map(v2).unwrap_or(mount.lever_arm);
    let sensors = SensorSuite {
        imu: spec("imu", &s.imu)?,
        gyro: spec("gyro", &s.gyro)?,
        wheel: spec("wheel", &s.wheel)?,
        steering: spec("steering", &s.steering)?,
        gnss: spec("gnss", &s.gnss)?,
        wheelbase: s.wheelbase,
        gnss_lever_arm,
    };

    let u = &config.ukf;
    if !(u.alpha > 0.0 && u.alpha <= 1.0) {
        return Err(fail("ukf.alpha", format!("{} not in (0, 1]", u.alpha)));
    }
    if u.initial_std.iter().any(|s| !(*s > 0.0)) {
        return Err(fail("ukf.initial_std", "every standard deviation must be positive".into()));
    }
    let pn = &u.process_noise;
    if [pn.position, pn.jerk, pn.yaw_acceleration].iter().any(|q| !(*q >= 0.0)) {
        return Err(fail("ukf.process_noise", "densities must be non-negative".into()));
    }
    let ukf = UkfConfig {
        alpha: u.alpha,
        beta: u.beta,
        kappa: u.kappa,
        process_noise: ProcessNoise {
            position: pn.position,
            jerk: pn.jerk,
            yaw_acceleration: pn.yaw_acceleration,
        },
        initial_covariance: StateCovariance::from_diagonal(&StateVector::from(u.initial_std.map(|s| s * s))),
        wheelbase: s.wheelbase,
        gnss_lever_arm,
        min_steering_speed: u.min_steering_speed,
    };
    mbsar::navigation::SigmaWeights::new(u.alpha, u.beta, u.kappa).map_err(|e| lib("ukf", e))?;

    let f = &config.focus;
    let g = &f.grid;
    let grid = ImageGrid::new(g.x0, g.y0, g.dx, g.dy, g.nx, g.ny).map_err(|e| fail("focus.grid", e.to_string()))?;
    if f.beams_deg.is_empty() {
        return Err(fail("focus.beams_deg", "at least one beam is required".into()));
    }
    let delta_alpha = match f.delta_alpha_deg {
        Some(d) if d > 0.0 => deg(d),
        Some(_) => return Err(fail("focus.delta_alpha_deg", "must be positive".into())),
        None => beamwidth_for_resolution(f.cross_range_resolution, params.f0)
            .map_err(|e| fail("focus.cross_range_resolution", e.to_string()))?,
    };
    let beams = f
        .beams_deg
        .iter()
        .map(|b| Beam::new(deg(*b), delta_alpha))
        .collect::<mbsar::Result<Vec<_>>>()
        .map_err(|e| fail("focus.beams_deg", e.to_string()))?;
    if !(f.cutoff >= 0.0) {
        return Err(fail("focus.cutoff", "must be non-negative (0 disables)".into()));
    }
    if f.tile_size == 0 {
        return Err(fail("focus.tile_size", "must be positive".into()));
    }
    if !(f.dynamic_range_db > 0.0) {
        return Err(fail("focus.dynamic_range_db", "must be positive".into()));
    }
    let focus = FocusOptions {
        interp: f.interp,
        cutoff: (f.cutoff > 0.0).then_some(f.cutoff),
        tile_size: f.tile_size,
    };
    if config.bench.workers.is_empty() || config.bench.workers.contains(&0) {
        return Err(fail("bench.workers", "worker counts must be positive".into()));
    }
    if config.bench.repetitions == 0 {
        return Err(fail("bench.repetitions", "must be positive".into()));
    }

    // Record the derived sample count so the effective config is explicit.
    config.radar.fast_time_samples = Some(params.fast_time_samples);
    Ok(Scenario {
        params,
        window,
        mount,
        channels,
        scene,
        segments: config.trajectory.segments.clone(),
        start,
        trajectory_file,
        sensors,
        ukf,
        grid,
        beams,
        focus,
        config,
    })
}

fn v2(a: [f64; 2]) -> Vec2 {
    Vec2::new(a[0], a[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "mini"
seed = 3

[radar]
f0 = 77e9
bandwidth = 3e9
pulse_duration = 155e-6
prf = 990.0
max_range = 10.0

[trajectory]
[[trajectory.segments]]
duration = 1.0
speed = 2.0
acceleration = 0.0
turn_rate = 0.0

[[trajectory.segments]]
duration = 1.0
speed = 2.0
acceleration = 0.0
turn_rate = 0.1

[scene]
extent_min = [-5.0, -12.0]
extent_max = [10.0, 2.0]

[[scene.points]]
position = [1.0, -5.0]

[focus]
grid = { x0 = 0.0, y0 = -6.0, nx = 50, ny = 50 }
"#;

    fn parse_ok(overrides: &[&str]) -> Loaded {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse(MINIMAL, &o, Path::new(".")).unwrap()
    }

    fn parse_err(text: &str, overrides: &[&str]) -> ConfigError {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse(text, &o, Path::new(".")).unwrap_err()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let l = parse_ok(&[]);
        let s = &l.scenario;
        assert_eq!(s.params.fast_time_samples, 400);
        assert_eq!(s.window, Window::Hann);
        assert_eq!(s.beams.len(), 3);
        assert_eq!(s.channels.len(), 1);
        assert_eq!(s.scene.scatterers().len(), 1);
        assert!((s.beams[0].delta_alpha - 0.032_96).abs() < 1e-4);
        assert!(l.effective.contains("fast_time_samples = 400"));
    }

    #[test]
    fn effective_config_round_trips() {
        let l = parse_ok(&["focus.trajectory=\"true\"", "trajectory.segments.1.speed=2.5"]);
        assert_eq!(l.scenario.config.focus.trajectory, TrajectorySource::True);
        assert_eq!(l.scenario.segments[1].speed, 2.5);
        let again = parse(&l.effective, &[], Path::new(".")).unwrap();
        assert_eq!(again.scenario.config, l.scenario.config);
        assert_eq!(again.effective, l.effective);
    }

    #[test]
    fn negative_bandwidth_names_field_and_line() {
        let text = MINIMAL.replace("bandwidth = 3e9", "bandwidth = -3e9");
        let e = parse_err(&text, &[]);
        assert_eq!(e.key, "radar.bandwidth");
        assert_eq!(e.line, Some(7));
        assert!(e.to_string().contains("bandwidth"));
        let e = parse_err(MINIMAL, &["radar.bandwidth=-1"]);
        assert_eq!(e.key, "radar.bandwidth");
    }

    #[test]
    fn errors_point_at_lines() {
        let e = parse_err(&MINIMAL.replace("speed = 2.0\nacceleration = 0.0\nturn_rate = 0.1", "speed = -2.0\nacceleration = 0.0\nturn_rate = 0.1"), &[]);
        assert_eq!(e.key, "trajectory.segments.1.speed");
        assert_eq!(e.line, Some(21));
        let e = parse_err(&MINIMAL.replace("seed = 3", "seed = 3\nbogus = 1"), &[]);
        assert!(e.message.contains("bogus"), "{e}");
        assert_eq!(e.line, Some(4));
        let e = parse_err("name = \n", &[]);
        assert_eq!(e.line, Some(1));
        let e = parse_err(&MINIMAL.replace("max_range = 10.0", "max_range = 10.0\nwindow = \"kaiser\""), &[]);
        assert_eq!(e.key, "radar.window");
        assert_eq!(e.line, Some(11));
    }

    #[test]
    fn missing_trajectory_file_is_rejected() {
        let text = MINIMAL.replace("[trajectory]", "[trajectory]\nfile = \"no/such.csv\"");
        let e = parse_err(&text, &[]);
        assert_eq!(e.key, "trajectory.file");
    }

    #[test]
    fn locate_handles_tables_and_arrays() {
        assert_eq!(locate(MINIMAL, "seed"), Some(3));
        assert_eq!(locate(MINIMAL, "radar.prf"), Some(9));
        assert_eq!(locate(MINIMAL, "trajectory.segments.0.duration"), Some(14));
        assert_eq!(locate(MINIMAL, "focus.grid"), Some(33));
        assert_eq!(locate(MINIMAL, "radar.nothing"), None);
    }
}
