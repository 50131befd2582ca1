use std::f64::consts::PI;

use mbsar::focus::{
    backproject, multi_beam_focus, Beam, FocusOptions, FocusedImage, ImageGrid, Interpolation,
};
use mbsar::geometry::{deg, Vec2};
use mbsar::matrix::ColumnMatrix;
use mbsar::scene::{
    generate_trajectory, CtraSegment, Extent, PlatformPose, RadarMount, Scatterer, Scene, Side,
    Trajectory,
};
use mbsar::signal::{range_compress, synthesize_dechirped, FmcwParams, RangeCompressedMatrix, Window};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: f64 = 3.0e8;

/// Brute-force reference: pixel -> pulse -> beam, written without the
/// library's geometry helpers.
fn oracle(
    rc: &RangeCompressedMatrix,
    traj: &Trajectory,
    mount: &RadarMount,
    grid: &ImageGrid,
    beam: &Beam,
    nearest: bool,
    cutoff: Option<f64>,
) -> Vec<Complex64> {
    fn wrap(a: f64) -> f64 {
        if a > -PI && a <= PI {
            return a;
        }
        let mut r = a % (2.0 * PI);
        if r <= -PI {
            r += 2.0 * PI;
        } else if r > PI {
            r -= 2.0 * PI;
        }
        r
    }
    let side = if mount.side == Side::Left { 1.0 } else { -1.0 };
    let boresight = PI / 2.0 - mount.squint;
    let mut out = vec![Complex64::new(0.0, 0.0); grid.nx * grid.ny];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let x = grid.x0 + ix as f64 * grid.dx;
            let y = grid.y0 + iy as f64 * grid.dy;
            let mut acc = Complex64::new(0.0, 0.0);
            for (p, pose) in traj.poses().iter().enumerate() {
                let (s, c) = pose.heading.sin_cos();
                let (lx, ly) = (mount.lever_arm.x, mount.lever_arm.y);
                let px = pose.position.x + (c * lx - s * ly);
                let py = pose.position.y + (s * lx + c * ly);
                let (dx, dy) = (x - px, y - py);
                let r = (dx * dx + dy * dy).sqrt();
                if r > rc.params.max_range || r == 0.0 {
                    continue;
                }
                let alpha = wrap(PI / 2.0 + side * (pose.heading - dy.atan2(dx)));
                if wrap(alpha - boresight).abs() > 0.5 * mount.fov {
                    continue;
                }
                let off = wrap(alpha - beam.alpha_p);
                if let Some(k) = cutoff {
                    if off.abs() > k * beam.delta_alpha {
                        continue;
                    }
                }
                let u = off / beam.delta_alpha;
                let w = (-4.0 * u * u).exp();
                let pos = r / rc.range_spacing;
                let sample = if nearest {
                    let k = (pos + 0.5).floor() as usize;
                    if k >= rc.range_bins() {
                        continue;
                    }
                    rc.data.get(k, p)
                } else {
                    let k = pos.floor();
                    let ki = k as usize;
                    if ki + 1 >= rc.range_bins() {
                        continue;
                    }
                    let f = pos - k;
                    rc.data.get(ki, p) * (1.0 - f) + rc.data.get(ki + 1, p) * f
                };
                let delay = 2.0 * r / C;
                let v = sample * Complex64::from_polar(1.0, (-2.0 * PI * rc.params.f0) * delay);
                acc += v * w;
            }
            out[iy * grid.nx + ix] = acc;
        }
    }
    out
}

fn straight(length: f64, speed: f64, prf: f64) -> Trajectory {
    let start = PlatformPose {
        tau: 0.0,
        position: Vec2::new(-length / 2.0, 0.0),
        heading: 0.0,
        speed,
    };
    generate_trajectory(
        &[CtraSegment {
            duration: length / speed,
            speed,
            acceleration: 0.0,
            turn_rate: 0.0,
        }],
        prf,
        start,
    )
    .unwrap()
}

fn random_rc(bins: usize, traj: &Trajectory, seed: u64, params: FmcwParams) -> RangeCompressedMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pulses = traj.len();
    let data = (0..bins * pulses)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    RangeCompressedMatrix {
        data: ColumnMatrix::from_columns(bins, pulses, data),
        range_spacing: params.bin_spacing(1),
        taus: traj.taus(),
        params,
        window: Window::Rectangular,
        zero_pad_factor: 1,
    }
}

/// Small geometry where 64 bins of 5 cm cover the whole image.
fn small_case(pulses: usize, bins: usize, n: usize, seed: u64) -> (RangeCompressedMatrix, Trajectory, RadarMount, ImageGrid) {
    let params = FmcwParams {
        max_range: 0.05 * (bins as f64 - 1.0),
        ..FmcwParams::table_one()
    };
    let prf = params.prf;
    let traj = straight(pulses as f64 * 0.01, 0.01 * prf, prf);
    assert_eq!(traj.len(), pulses);
    let mount = RadarMount::new(deg(80.0), deg(150.0), Vec2::new(0.3, 0.1), Side::Right).unwrap();
    let rc = random_rc(bins, &traj, seed, params);
    let span = 0.5 * params.max_range;
    let d = span / n as f64;
    let grid = ImageGrid::new(-0.5 * span, -0.2 - span, d, d, n, n).unwrap();
    (rc, traj, mount, grid)
}

fn focus_one(rc: &RangeCompressedMatrix, traj: &Trajectory, mount: &RadarMount, grid: &ImageGrid, beam: &Beam, opts: FocusOptions) -> FocusedImage {
    backproject(rc, traj, mount, grid, beam, &opts).unwrap()
}

#[test]
fn kernel_matches_triple_loop_exactly() {
    let (rc, traj, mount, grid) = small_case(32, 64, 16, 1);
    let beam = Beam::new(deg(10.0), deg(25.0)).unwrap();
    let reference = oracle(&rc, &traj, &mount, &grid, &beam, true, None);
    let opts = FocusOptions {
        interp: Interpolation::Nearest,
        cutoff: None,
        tile_size: 32,
    };
    let img = focus_one(&rc, &traj, &mount, &grid, &beam, opts);
    assert!(reference.iter().filter(|z| z.norm() > 0.0).count() > 100);
    assert_eq!(img.pixels, reference);
}

#[test]
fn kernel_matches_triple_loop_on_larger_instance_with_cutoff_and_linear() {
    let (rc, traj, mount, grid) = small_case(128, 128, 64, 2);
    let beam = Beam::new(deg(-5.0), deg(8.0)).unwrap();
    for (interp, nearest) in [(Interpolation::Linear, false), (Interpolation::Nearest, true)] {
        let reference = oracle(&rc, &traj, &mount, &grid, &beam, nearest, Some(2.0));
        let opts = FocusOptions {
            interp,
            cutoff: Some(2.0),
            tile_size: 16,
        };
        let img = focus_one(&rc, &traj, &mount, &grid, &beam, opts);
        assert!(reference.iter().filter(|z| z.norm() > 0.0).count() > 500);
        assert_eq!(img.pixels, reference);
    }
}

#[test]
fn result_is_independent_of_workers_and_tiles() {
    let (rc, traj, mount, grid) = small_case(64, 96, 40, 3);
    let beams = [Beam::new(0.0, deg(6.0)).unwrap(), Beam::new(deg(20.0), deg(6.0)).unwrap()];
    let run = |threads: usize, tile: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            multi_beam_focus(
                &rc,
                &traj,
                &mount,
                &grid,
                &beams,
                &FocusOptions {
                    tile_size: tile,
                    ..FocusOptions::default()
                },
            )
            .unwrap()
        })
    };
    let base = run(1, 32);
    for (threads, tile) in [(3, 32), (2, 7), (4, 1), (1, 64)] {
        assert_eq!(run(threads, tile), base, "threads {threads}, tile {tile}");
    }
}

#[test]
fn multi_beam_equals_single_beam_calls() {
    let (rc, traj, mount, grid) = small_case(48, 80, 24, 4);
    let beams = [
        Beam::new(0.0, deg(5.0)).unwrap(),
        Beam::new(deg(5.0), deg(5.0)).unwrap(),
        Beam::new(deg(20.0), deg(3.0)).unwrap(),
    ];
    let opts = FocusOptions::default();
    let many = multi_beam_focus(&rc, &traj, &mount, &grid, &beams, &opts).unwrap();
    for (img, beam) in many.iter().zip(&beams) {
        assert_eq!(*img, focus_one(&rc, &traj, &mount, &grid, beam, opts));
    }
    let single = multi_beam_focus(&rc, &traj, &mount, &grid, &beams[..1], &opts).unwrap();
    assert_eq!(single[0], many[0]);
}

#[test]
fn focusing_is_linear() {
    let (a, traj, mount, grid) = small_case(40, 64, 20, 5);
    let (b, ..) = small_case(40, 64, 20, 6);
    let mut sum = a.clone();
    for (s, y) in sum.data.as_mut_slice().iter_mut().zip(b.data.as_slice()) {
        *s += y;
    }
    let beam = Beam::new(0.0, deg(10.0)).unwrap();
    let opts = FocusOptions::default();
    let ia = focus_one(&a, &traj, &mount, &grid, &beam, opts);
    let ib = focus_one(&b, &traj, &mount, &grid, &beam, opts);
    let is = focus_one(&sum, &traj, &mount, &grid, &beam, opts);
    let scale = is.pixels.iter().map(|z| z.norm()).fold(0.0, f64::max);
    for ((s, x), y) in is.pixels.iter().zip(&ia.pixels).zip(&ib.pixels) {
        assert!((s - (x + y)).norm() <= 1e-9 * scale);
    }
}

#[test]
fn zero_data_gives_zero_image_and_bad_inputs_fail() {
    let (mut rc, traj, mount, grid) = small_case(16, 32, 8, 7);
    rc.data.as_mut_slice().fill(Complex64::new(0.0, 0.0));
    let beam = Beam::new(0.0, 0.1).unwrap();
    let img = focus_one(&rc, &traj, &mount, &grid, &beam, FocusOptions::default());
    assert!(img.pixels.iter().all(|z| z.norm() == 0.0));

    let short = Trajectory::new(traj.poses()[..10].to_vec()).unwrap();
    assert!(backproject(&rc, &short, &mount, &grid, &beam, &FocusOptions::default()).is_err());
    let mut shifted = rc.clone();
    shifted.taus[3] += 1e-3;
    assert!(backproject(&shifted, &traj, &mount, &grid, &beam, &FocusOptions::default()).is_err());
}

/// Noiseless point target focused with the exact trajectory.
#[test]
fn point_target_peak_position_and_phase() {
    let params = FmcwParams {
        max_range: 12.0,
        ..FmcwParams::table_one()
    };
    let params = FmcwParams {
        fast_time_samples: params.min_fast_time_samples(),
        ..params
    };
    let traj = straight(5.0, 5.556, params.prf);
    let mount = RadarMount::default();
    let target = Vec2::new(2.0, -8.0);
    let amp = Complex64::from_polar(0.7, 1.1);
    let extent = Extent::new(Vec2::new(-20.0, -20.0), Vec2::new(20.0, 20.0)).unwrap();
    let scene = Scene::with_scatterers(extent, vec![Scatterer::isotropic(target, amp).unwrap()]).unwrap();
    let raw = synthesize_dechirped(&scene, &traj, &mount, &params, 0.0, 0).unwrap();
    let rc = range_compress(&raw, &params, Window::Hann, 4).unwrap();
    let d = 0.005;
    let grid = ImageGrid::new(target.x - 20.0 * d, target.y - 20.0 * d, d, d, 41, 41).unwrap();
    let beam = Beam::new(0.0, mbsar::focus::beamwidth_for_resolution(0.05, params.f0).unwrap()).unwrap();
    let img = focus_one(&rc, &traj, &mount, &grid, &beam, FocusOptions::default());
    let ((ix, iy), peak) = img.peak();
    let found = grid.pixel(ix, iy);
    assert!((found - target).norm() <= 0.5 * d * 2f64.sqrt() + 1e-12, "{found:?}");
    assert!(peak > 0.0);
    let at_target = img.at(20, 20);
    let phase_error = (at_target / amp).arg();
    assert!(phase_error.abs() < 1e-2, "phase error {phase_error}");
}
