mod common;

use std::path::Path;

use cmfuot_core::scene::{steering_for_point, transfer_for_points, ArrayGeometry, Point3, Scene};
use cmfuot_core::signalsim::{add_noise_for_snr, empirical_covariance, synthesize_snapshots};
use common::*;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

fn desk_scene() -> Scene {
    Scene::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_scene.json")).unwrap()
}

/// Monopole entry written out with real arithmetic only.
fn scalar_entry(sensor: &Point3, p: &Point3, f: f64, c: f64) -> (f64, f64) {
    let (dx, dy, dz) = (p.x - sensor.x, p.y - sensor.y, p.z - sensor.z);
    let r = (dx * dx + dy * dy + dz * dz).sqrt();
    let phase = 2.0 * std::f64::consts::PI * f * r / c;
    (phase.cos() / r, -phase.sin() / r)
}

#[test]
fn desk_transfer_matches_scalar_oracle() {
    let scene = desk_scene();
    let points: Vec<Point3> = (0..500).map(|m| scene.grid.point(m * 19)).collect();
    let g = transfer_for_points(&scene.array, &points, scene.frequency, scene.sound_speed).unwrap();
    assert_eq!((g.sensors(), g.points()), (32, 500));
    for (m, p) in points.iter().enumerate() {
        for (i, s) in scene.array.sensors().iter().enumerate() {
            let (re, im) = scalar_entry(s, p, scene.frequency, scene.sound_speed);
            let z = g.matrix()[(i, m)];
            let err = ((z.re - re).powi(2) + (z.im - im).powi(2)).sqrt() / (re * re + im * im).sqrt();
            assert!(err < 1e-12, "entry ({i},{m}) relative error {err}");
        }
    }
}

#[test]
fn steering_vectors_agree_with_grid_columns_and_oracle() {
    let scene = desk_scene();
    let g = scene.transfer_matrix().unwrap();
    for m in [0, 1234, scene.grid.len() - 1] {
        let v = steering_for_point(&scene.array, &scene.grid.point(m), scene.frequency, scene.sound_speed).unwrap();
        assert_eq!(v.as_slice(), g.column(m));
    }
    let mut r = rng(3);
    let p = Point3::new(r.random_range(2.0..4.0), r.random_range(-1.0..1.0), r.random_range(-0.5..0.5));
    let v = steering_for_point(&scene.array, &p, scene.frequency, scene.sound_speed).unwrap();
    for (i, s) in scene.array.sensors().iter().enumerate() {
        let (re, im) = scalar_entry(s, &p, scene.frequency, scene.sound_speed);
        assert!((v[i] - Complex64::new(re, im)).norm() < 1e-12 * v[i].norm());
    }
}

fn single_source_deviation(snapshots: usize, seed: u64) -> f64 {
    let array =
        ArrayGeometry::new(vec![Point3::zeros(), Point3::new(0.0, 0.3, 0.0), Point3::new(0.0, 0.0, 0.4)]).unwrap();
    let g = steering_for_point(&array, &Point3::new(2.0, 0.1, 0.2), FREQ, SPEED).unwrap();
    let steering = DMatrix::from_column_slice(3, 1, g.as_slice());
    let block = synthesize_snapshots(&steering, &[2.0], snapshots, seed).unwrap();
    let sigma = empirical_covariance(&block);
    let truth = &g * g.adjoint() * Complex64::new(2.0, 0.0);
    (&sigma.sigma - truth).norm() / 2.0
}

#[test]
fn sample_covariance_converges_at_root_l_rate() {
    let mean = |l: usize| (0..20).map(|s| single_source_deviation(l, s)).sum::<f64>() / 20.0;
    let (small, large) = (mean(100), mean(10_000));
    let ratio = small / large;
    // sqrt(10_000 / 100) = 10
    assert!((6.0..16.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn cross_terms_of_uncorrelated_sources_vanish() {
    // Identity steering exposes the source cross-correlation directly.
    let steering = DMatrix::<Complex64>::identity(2, 2);
    let cross = |l: usize| {
        (0..20)
            .map(|s| {
                empirical_covariance(&synthesize_snapshots(&steering, &[1.0, 1.0], l, s).unwrap()).sigma[(0, 1)].norm()
            })
            .sum::<f64>()
            / 20.0
    };
    let (small, large) = (cross(100), cross(10_000));
    assert!(large < 0.03, "{large}");
    assert!((6.0..16.0).contains(&(small / large)), "ratio {}", small / large);
}

#[test]
fn simulation_chain_is_bit_reproducible() {
    let scene = desk_scene();
    let steering = scene.source_steering().unwrap();
    let run = || {
        let block = synthesize_snapshots(&steering, scene.sources.powers(), 513, 99).unwrap();
        empirical_covariance(&add_noise_for_snr(&block, 0.0, 99).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn desk_scene_operating_snr_is_met() {
    let scene = desk_scene();
    let steering = scene.source_steering().unwrap();
    let block = synthesize_snapshots(&steering, scene.sources.powers(), 513, 5).unwrap();
    let noisy = add_noise_for_snr(&block, 10.0, 5).unwrap();
    let noise_power = (&noisy.x - &block.x).iter().map(|z| z.norm_sqr()).sum::<f64>() / block.x.len() as f64;
    let snr = 10.0 * (block.mean_power() / noise_power).log10();
    assert!((snr - 10.0).abs() < 0.5, "{snr}");
}

#[test]
fn trace_equals_block_energy() {
    let mut r = rng(8);
    let x = DMatrix::from_fn(6, 40, |_, _| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)));
    let block = cmfuot_core::signalsim::SnapshotBlock { x: x.clone(), seed: 0, noise_variance: 0.0 };
    let sigma = empirical_covariance(&block);
    let energy = x.iter().map(|z| z.norm_sqr()).sum::<f64>() / 40.0;
    assert!(relative_error(sigma.trace(), energy) < 1e-12);
}
