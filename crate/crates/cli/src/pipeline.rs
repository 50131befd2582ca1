//! Pipeline stages and their artifacts.
//!
//! Every artifact is written to `<name>.partial` first and renamed once it is
//! complete, so an interrupted or failed stage leaves only `.partial` files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mbsar::container;
use mbsar::focus::{multi_beam_focus, FocusedImage};
use mbsar::imaging::{magnitude_db, rgb_compose, write_magnitude_f32, write_pgm, write_png, write_ppm, RgbComposite, Sidecar};
use mbsar::navigation::{read_measurements_csv, simulate_sensors, truth_states, ukf_fuse, write_measurements_csv, Estimate, SensorMeasurement};
use mbsar::scene::{generate_trajectory, Trajectory};
use mbsar::signal::{range_compress, synthesize_dechirped, RangeCompressedMatrix};
use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Loaded, Scenario, TrajectorySource};
use crate::error::CliError;

pub const TRUE_TRAJECTORY: &str = "true_trajectory.csv";
pub const ESTIMATED_TRAJECTORY: &str = "estimated_trajectory.csv";
pub const MEASUREMENTS: &str = "measurements.csv";
pub const MANIFEST: &str = "manifest.json";

const SENSOR_SEED_SALT: u64 = 0x5EED_0000_0000_0001;

pub fn rc_file(channel: usize) -> String {
    format!("rc_ch{channel}.sarc")
}

pub fn image_stem(beam: usize) -> String {
    format!("image_beam{beam}")
}

/// Writes `path` through a `.partial` file that is renamed on success.
pub fn write_artifact<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    let file = File::create(&partial).map_err(|e| CliError::Io(format!("{}: {e}", partial.display())))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&partial, path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Output directory plus the per-stage timing log of one run.
pub struct Run<'a> {
    pub scenario: &'a Scenario,
    pub out: PathBuf,
    pub timings: Vec<StageTiming>,
}

impl<'a> Run<'a> {
    pub fn new(scenario: &'a Scenario, out: impl Into<PathBuf>) -> Result<Self, CliError> {
        let out = out.into();
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        Ok(Run {
            scenario,
            out,
            timings: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T, CliError>) -> Result<T, CliError> {
        let t0 = Instant::now();
        log::info!("stage {stage}");
        let r = f(self)?;
        let seconds = t0.elapsed().as_secs_f64();
        log::info!("stage {stage} finished in {seconds:.2} s");
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds,
        });
        Ok(r)
    }
}

/// Ground-truth trajectory from the configured segments or CSV file.
pub fn true_trajectory(s: &Scenario) -> Result<Trajectory, CliError> {
    match &s.trajectory_file {
        Some(path) => Ok(Trajectory::read_csv(open(path)?)?),
        None => Ok(generate_trajectory(&s.segments, s.params.prf, s.start)?),
    }
}

fn channel_seed(seed: u64, channel: usize) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(channel as u64 + 1))
}

/// Range-compressed data for every channel.
pub fn synthesize(s: &Scenario, truth: &Trajectory) -> Result<Vec<RangeCompressedMatrix>, CliError> {
    let r = &s.config.radar;
    s.channels
        .iter()
        .enumerate()
        .map(|(k, mount)| {
            let raw = synthesize_dechirped(&s.scene, truth, mount, &s.params, r.noise_std, channel_seed(s.config.seed, k))?;
            Ok(range_compress(&raw, &s.params, s.window, r.zero_pad_factor)?)
        })
        .collect()
}

/// Rounds to the single precision of the containers, so later stages see
/// the same samples whether they run in-process or from the files.
fn to_stored_precision(z: &mut Complex64) {
    *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
}

pub struct Simulated {
    pub truth: Trajectory,
    pub rc: Vec<RangeCompressedMatrix>,
    pub measurements: Vec<SensorMeasurement>,
}

pub fn simulate(run: &mut Run) -> Result<Simulated, CliError> {
    run.timed("simulate", |run| {
        let s = run.scenario;
        let truth = true_trajectory(s)?;
        write_artifact(&run.path(TRUE_TRAJECTORY), |w| Ok(truth.write_csv(w)?))?;
        let mut rc = synthesize(s, &truth)?;
        for (k, m) in rc.iter_mut().enumerate() {
            write_artifact(&run.path(&rc_file(k)), |w| Ok(container::write_rc(m, w)?))?;
            m.data.as_mut_slice().iter_mut().for_each(to_stored_precision);
        }
        let measurements = simulate_sensors(&truth, &s.sensors, s.config.seed ^ SENSOR_SEED_SALT)?;
        write_artifact(&run.path(MEASUREMENTS), |w| Ok(write_measurements_csv(&measurements, w)?))?;
        Ok(Simulated { truth, rc, measurements })
    })
}

pub fn fuse(run: &mut Run, truth: &Trajectory, measurements: &[SensorMeasurement]) -> Result<Estimate, CliError> {
    run.timed("fuse", |run| {
        let s = run.scenario;
        let init = *truth_states(truth)
            .first()
            .ok_or_else(|| CliError::Numerical("empty trajectory".into()))?;
        let est = ukf_fuse(measurements, &s.ukf, &init, &truth.taus())?;
        write_artifact(&run.path(ESTIMATED_TRAJECTORY), |w| Ok(est.write_csv(w)?))?;
        Ok(est)
    })
}

/// Focuses every channel and sums the per-channel images.
pub fn focus_images(s: &Scenario, rc: &[RangeCompressedMatrix], traj: &Trajectory) -> Result<Vec<FocusedImage>, CliError> {
    let mut total: Option<Vec<FocusedImage>> = None;
    for (data, mount) in rc.iter().zip(&s.channels) {
        let images = multi_beam_focus(data, traj, mount, &s.grid, &s.beams, &s.focus)?;
        total = Some(match total {
            None => images,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&images) {
                    for (p, q) in a.pixels.iter_mut().zip(&b.pixels) {
                        *p += q;
                    }
                }
                acc
            }
        });
    }
    total.ok_or_else(|| CliError::Numerical("no channels to focus".into()))
}

pub fn focus(run: &mut Run, rc: &[RangeCompressedMatrix], traj: &Trajectory) -> Result<Vec<FocusedImage>, CliError> {
    run.timed("focus", |run| {
        let s = run.scenario;
        let mut images = focus_images(s, rc, traj)?;
        let floor = -s.config.focus.dynamic_range_db;
        for img in &mut images {
            img.pixels.iter_mut().for_each(to_stored_precision);
        }
        for (b, img) in images.iter().enumerate() {
            let stem = image_stem(b);
            write_artifact(&run.path(&format!("{stem}.sari")), |w| Ok(container::write_image(img, &s.params, w)?))?;
            write_artifact(&run.path(&format!("{stem}.f32")), |w| Ok(write_magnitude_f32(img, w)?))?;
            write_artifact(&run.path(&format!("{stem}.json")), |w| {
                Ok(Sidecar::for_image(img, "float32 magnitude, row-major, row 0 at y0").write(w)?)
            })?;
            let db = magnitude_db(img, floor);
            write_artifact(&run.path(&format!("{stem}_db.pgm")), |w| Ok(write_pgm(&db, &img.grid, floor, w)?))?;
        }
        Ok(images)
    })
}

pub fn compose(run: &mut Run, images: &[FocusedImage]) -> Result<Option<RgbComposite>, CliError> {
    run.timed("compose", |run| {
        if images.len() != 3 {
            log::warn!("composite skipped: {} beams configured, 3 needed", images.len());
            return Ok(None);
        }
        let c = rgb_compose(images, run.scenario.config.focus.dynamic_range_db)?;
        write_artifact(&run.path("composite.ppm"), |w| Ok(write_ppm(&c, w)?))?;
        write_artifact(&run.path("composite.png"), |w| Ok(write_png(&c, w)?))?;
        write_artifact(&run.path("composite.json"), |w| Ok(Sidecar::for_composite(&c).write(w)?))?;
        Ok(Some(c))
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    name: &'a str,
    seed: u64,
    config_hash: String,
    versions: Versions,
    trajectory_source: &'static str,
    stages: &'a [StageTiming],
    artifacts: Vec<ArtifactEntry>,
    effective_config: &'a str,
}

#[derive(Debug, Serialize)]
struct Versions {
    mbsar: &'static str,
    container_format: u32,
}

#[derive(Debug, Serialize)]
struct ArtifactEntry {
    file: String,
    sha256: String,
}

pub fn write_manifest(run: &Run, loaded: &Loaded) -> Result<(), CliError> {
    let mut artifacts = Vec::new();
    let mut names: Vec<String> = fs::read_dir(&run.out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST && !n.ends_with(".partial"))
        .collect();
    names.sort();
    for name in names {
        let bytes = fs::read(run.path(&name))?;
        artifacts.push(ArtifactEntry {
            file: name,
            sha256: sha256_hex(&bytes),
        });
    }
    let s = run.scenario;
    let manifest = Manifest {
        name: &s.config.name,
        seed: s.config.seed,
        config_hash: sha256_hex(loaded.effective.as_bytes()),
        versions: Versions {
            mbsar: env!("CARGO_PKG_VERSION"),
            container_format: container::VERSION,
        },
        trajectory_source: s.config.focus.trajectory.name(),
        stages: &run.timings,
        artifacts,
        effective_config: &loaded.effective,
    };
    write_artifact(&run.path(MANIFEST), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|e| CliError::Io(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })
}

pub struct PipelineOutput {
    pub truth: Trajectory,
    pub estimate: Estimate,
    pub images: Vec<FocusedImage>,
    pub composite: Option<RgbComposite>,
}

/// Simulate, fuse, focus with the configured trajectory source, compose and
/// write the manifest.
pub fn run_pipeline(loaded: &Loaded, out: &Path) -> Result<PipelineOutput, CliError> {
    let s = &loaded.scenario;
    let mut run = Run::new(s, out)?;
    let sim = simulate(&mut run)?;
    let estimate = fuse(&mut run, &sim.truth, &sim.measurements)?;
    let traj = match s.config.focus.trajectory {
        TrajectorySource::True => &sim.truth,
        TrajectorySource::Estimated => &estimate.trajectory,
    };
    let images = focus(&mut run, &sim.rc, traj)?;
    let composite = compose(&mut run, &images)?;
    write_manifest(&run, loaded)?;
    Ok(PipelineOutput {
        truth: sim.truth,
        estimate,
        images,
        composite,
    })
}

/// Stand-alone `fuse`: reads the measurement log written by `simulate`.
pub fn run_fuse(s: &Scenario, out: &Path) -> Result<Estimate, CliError> {
    let mut run = Run::new(s, out)?;
    let truth = true_trajectory(s)?;
    let ms = read_measurements_csv(open(&run.path(MEASUREMENTS))?)?;
    fuse(&mut run, &truth, &ms)
}

/// Stand-alone `focus`: reads the range-compressed containers and the
/// trajectory CSV selected by the configuration.
pub fn run_focus(s: &Scenario, out: &Path) -> Result<Vec<FocusedImage>, CliError> {
    let mut run = Run::new(s, out)?;
    let rc = (0..s.channels.len())
        .map(|k| Ok(container::read(open(&run.path(&rc_file(k)))?)?.into_rc(&s.params)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let name = match s.config.focus.trajectory {
        TrajectorySource::True => TRUE_TRAJECTORY,
        TrajectorySource::Estimated => ESTIMATED_TRAJECTORY,
    };
    let traj = Trajectory::read_csv(open(&run.path(name))?)?;
    focus(&mut run, &rc, &traj)
}

/// Stand-alone `compose`: reads the per-beam image containers.
pub fn run_compose(s: &Scenario, out: &Path) -> Result<Option<RgbComposite>, CliError> {
    let mut run = Run::new(s, out)?;
    let images = s
        .beams
        .iter()
        .enumerate()
        .map(|(b, beam)| {
            let stored = container::read(open(&run.path(&format!("{}.sari", image_stem(b))))?)?;
            let h = stored.header;
            if h.kind != container::Kind::Image || (h.rows as usize, h.cols as usize) != (s.grid.ny, s.grid.nx) {
                return Err(CliError::Io(format!("image {b} does not match the configured grid")));
            }
            Ok(FocusedImage {
                grid: s.grid,
                beam: *beam,
                pixels: stored.data,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    compose(&mut run, &images)
}

/// Checksum of a set of complex images over their exact f64 bit patterns.
pub fn image_checksum(images: &[FocusedImage]) -> String {
    let mut h = Sha256::new();
    for img in images {
        for z in &img.pixels {
            let Complex64 { re, im } = *z;
            h.update(re.to_le_bytes());
            h.update(im.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
