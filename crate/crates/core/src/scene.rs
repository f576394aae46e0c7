//! Array geometry, candidate grid, ground-truth sources and the free-field
//! transfer matrix that links them.
//!
//! Grid points are stored implicitly: flat index `m = i + nx * (j + ny * k)`
//! (x fastest). The transfer matrix entry for sensor `i` and point `m` is the
//! monopole response `exp(-j k r) / r` with `k = 2 pi f / c`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::DetectionSpec;
use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

pub const DEFAULT_SOUND_SPEED: f64 = 343.0;
pub const DEFAULT_FREQUENCY: f64 = 4000.0;
pub const DEFAULT_SNAPSHOTS: usize = 513;

fn check_finite(p: &Point3, what: &str) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} has a non-finite coordinate")))
    }
}

/// Sensor positions of the array, in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayGeometry {
    sensors: Vec<Point3>,
}

impl ArrayGeometry {
    pub fn new(sensors: Vec<Point3>) -> Result<Self> {
        if sensors.len() < 2 {
            return Err(Error::InvalidInput(format!("array needs at least 2 sensors, got {}", sensors.len())));
        }
        for (i, s) in sensors.iter().enumerate() {
            check_finite(s, &format!("sensor {i}"))?;
        }
        for i in 0..sensors.len() {
            for j in (i + 1)..sensors.len() {
                if (sensors[i] - sensors[j]).norm() <= 0.0 {
                    return Err(Error::DegenerateGeometry(format!("sensors {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { sensors })
    }

    /// Sensors spread irregularly along `lines` horizontal lines in the plane
    /// `x = center.x`, covering `width` (along y) by `height` (along z).
    pub fn irregular_lines(
        count: usize,
        lines: usize,
        width: f64,
        height: f64,
        center: Point3,
        seed: u64,
    ) -> Result<Self> {
        if lines == 0 || count < lines {
            return Err(Error::InvalidInput(format!("cannot spread {count} sensors over {lines} lines")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sensors = Vec::with_capacity(count);
        for i in 0..count {
            let line = i % lines;
            let z = if lines == 1 { 0.0 } else { -height / 2.0 + height * line as f64 / (lines - 1) as f64 };
            let y = rng.random_range(-width / 2.0..=width / 2.0);
            sensors.push(center + Vector3::new(0.0, y, z));
        }
        Self::new(sensors)
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[Point3] {
        &self.sensors
    }

    pub fn centroid(&self) -> Point3 {
        self.sensors.iter().sum::<Point3>() / self.sensors.len() as f64
    }
}

/// Axis-aligned lattice of candidate source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    origin: Point3,
    extents: [f64; 3],
    step: f64,
    dims: [usize; 3],
}

impl Grid {
    pub fn new(origin: Point3, extents: [f64; 3], step: f64) -> Result<Self> {
        check_finite(&origin, "grid origin")?;
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidInput(format!("grid step must be positive, got {step}")));
        }
        let mut dims = [0usize; 3];
        for (axis, &e) in extents.iter().enumerate() {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::InvalidInput(format!("grid extent {axis} must be positive, got {e}")));
            }
            // Lattice points that fit inside the extent; the slack absorbs
            // representation error when the extent is a multiple of the step.
            dims[axis] = (e / step + 1e-9).floor() as usize + 1;
        }
        Ok(Self { origin, extents, step, dims })
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn extents(&self) -> [f64; 3] {
        self.extents
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lattice(&self, m: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [m % nx, (m / nx) % ny, m / (nx * ny)]
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        let [nx, ny, _] = self.dims;
        idx[0] + nx * (idx[1] + ny * idx[2])
    }

    pub fn point(&self, m: usize) -> Point3 {
        let [i, j, k] = self.lattice(m);
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.step
    }

    pub fn points(&self) -> Vec<Point3> {
        (0..self.len()).map(|m| self.point(m)).collect()
    }

    /// Index of the lattice point closest to `p`, clamped to the grid.
    pub fn nearest_index(&self, p: &Point3) -> usize {
        let rel = (p - self.origin) / self.step;
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let v = rel[axis].round().max(0.0) as usize;
            idx[axis] = v.min(self.dims[axis] - 1);
        }
        self.flat(idx)
    }

    pub fn diagonal(&self) -> f64 {
        Vector3::from(self.extents).norm()
    }

    pub fn translated(&self, offset: &Point3) -> Self {
        Self { origin: self.origin + offset, ..self.clone() }
    }
}

/// Ground-truth sources with positive linear powers.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSet {
    positions: Vec<Point3>,
    powers: Vec<f64>,
}

impl SourceSet {
    pub fn new(positions: Vec<Point3>, powers: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("source set is empty".into()));
        }
        if positions.len() != powers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} source positions but {} powers",
                positions.len(),
                powers.len()
            )));
        }
        for (i, p) in positions.iter().enumerate() {
            check_finite(p, &format!("source {i}"))?;
        }
        if let Some(p) = powers.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(Error::InvalidInput(format!("source power must be positive, got {p}")));
        }
        Ok(Self { positions, powers })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn powers(&self) -> &[f64] {
        &self.powers
    }

    pub fn translated(&self, offset: &Point3) -> Self {
        Self { positions: self.positions.iter().map(|p| p + offset).collect(), powers: self.powers.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: [f64; 3],
    pub normal: [f64; 3],
}

impl Plane {
    pub fn point(&self) -> Point3 {
        Point3::from(self.point)
    }

    pub fn unit_normal(&self) -> Result<Point3> {
        let n = Point3::from(self.normal);
        let len = n.norm();
        if !(len.is_finite() && len > 0.0) {
            return Err(Error::DegenerateGeometry("plane normal has zero length".into()));
        }
        Ok(n / len)
    }

    /// Intersection of the ray `origin + t * dir` (t > 0) with the plane.
    pub fn intersect_ray(&self, origin: &Point3, dir: &Point3) -> Result<Point3> {
        let n = self.unit_normal()?;
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 * dir.norm() {
            return Err(Error::DegenerateGeometry("ray is parallel to the reference plane".into()));
        }
        let t = n.dot(&(self.point() - origin)) / denom;
        if t <= 0.0 {
            return Err(Error::DegenerateGeometry("reference plane is behind the camera".into()));
        }
        Ok(origin + dir * t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub position: Point3,
    pub plane: Plane,
}

impl CameraPose {
    pub fn new(position: Point3, plane: Plane) -> Result<Self> {
        check_finite(&position, "camera position")?;
        plane.unit_normal()?;
        Ok(Self { position, plane })
    }
}

/// Complex sensor-by-grid propagation matrix with cached column norms.
#[derive(Debug, Clone)]
pub struct TransferMatrix {
    g: DMatrix<Complex64>,
    frequency: f64,
    sound_speed: f64,
    norm_sq: Vec<f64>,
    norm_quad: Vec<f64>,
}

impl TransferMatrix {
    /// Wraps an arbitrary matrix, e.g. a measured or randomly drawn one.
    pub fn from_matrix(g: DMatrix<Complex64>, frequency: f64, sound_speed: f64) -> Result<Self> {
        let norm_sq: Vec<f64> = g.column_iter().map(|c| c.norm_squared()).collect();
        if let Some(m) = norm_sq.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
            return Err(Error::DegenerateGeometry(format!("transfer column {m} is zero")));
        }
        let norm_quad = norm_sq.iter().map(|n| n * n).collect();
        Ok(Self { g, frequency, sound_speed, norm_sq, norm_quad })
    }

    pub fn sensors(&self) -> usize {
        self.g.nrows()
    }

    pub fn points(&self) -> usize {
        self.g.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.g
    }

    pub fn column(&self, m: usize) -> &[Complex64] {
        let i = self.g.nrows();
        &self.g.as_slice()[m * i..(m + 1) * i]
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn sound_speed(&self) -> f64 {
        self.sound_speed
    }

    /// Cached `|g_m|^2`.
    pub fn norm_sq(&self) -> &[f64] {
        &self.norm_sq
    }

    /// Cached `|g_m|^4`, the curvature of the fit along one grid coordinate.
    pub fn norm_quad(&self) -> &[f64] {
        &self.norm_quad
    }
}

pub fn wavenumber(frequency: f64, sound_speed: f64) -> f64 {
    2.0 * PI * frequency / sound_speed
}

/// Free-field monopole response at distance `r` for wavenumber `k`.
pub fn monopole(r: f64, k: f64) -> Complex64 {
    Complex64::from_polar(1.0 / r, -k * r)
}

fn check_propagation(frequency: f64, sound_speed: f64) -> Result<()> {
    if !(frequency.is_finite() && frequency > 0.0) {
        return Err(Error::InvalidInput(format!("frequency must be positive, got {frequency}")));
    }
    if !(sound_speed.is_finite() && sound_speed > 0.0) {
        return Err(Error::InvalidInput(format!("sound speed must be positive, got {sound_speed}")));
    }
    Ok(())
}

fn fill_steering(sensors: &[Point3], p: &Point3, k: f64, out: &mut [Complex64]) -> Result<()> {
    for (o, s) in out.iter_mut().zip(sensors) {
        let r = (p - s).norm();
        if r <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "point ({}, {}, {}) coincides with a sensor",
                p.x, p.y, p.z
            )));
        }
        *o = monopole(r, k);
    }
    Ok(())
}

pub fn build_transfer_matrix(
    array: &ArrayGeometry,
    grid: &Grid,
    frequency: f64,
    sound_speed: f64,
) -> Result<TransferMatrix> {
    transfer_for_points(array, &grid.points(), frequency, sound_speed)
}

/// Transfer matrix whose columns are the steering vectors of arbitrary points.
pub fn transfer_for_points(
    array: &ArrayGeometry,
    points: &[Point3],
    frequency: f64,
    sound_speed: f64,
) -> Result<TransferMatrix> {
    check_propagation(frequency, sound_speed)?;
    let k = wavenumber(frequency, sound_speed);
    let rows = array.len();
    let mut data = vec![Complex64::new(0.0, 0.0); rows * points.len()];
    data.par_chunks_mut(rows)
        .zip(points.par_iter())
        .try_for_each(|(col, p)| fill_steering(array.sensors(), p, k, col))?;
    TransferMatrix::from_matrix(DMatrix::from_vec(rows, points.len(), data), frequency, sound_speed)
}

pub fn steering_for_point(
    array: &ArrayGeometry,
    p: &Point3,
    frequency: f64,
    sound_speed: f64,
) -> Result<DVector<Complex64>> {
    check_propagation(frequency, sound_speed)?;
    check_finite(p, "steering point")?;
    let mut out = vec![Complex64::new(0.0, 0.0); array.len()];
    fill_steering(array.sensors(), p, wavenumber(frequency, sound_speed), &mut out)?;
    Ok(DVector::from_vec(out))
}

// ---------------------------------------------------------------------------
// Scene description file
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArraySpec {
    Explicit {
        sensors: Vec<[f64; 3]>,
    },
    IrregularLines {
        count: usize,
        lines: usize,
        width: f64,
        height: f64,
        #[serde(default)]
        center: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub extents: [f64; 3],
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub position: [f64; 3],
    pub power: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub plane: Plane,
}

fn default_frequency() -> f64 {
    DEFAULT_FREQUENCY
}
fn default_sound_speed() -> f64 {
    DEFAULT_SOUND_SPEED
}
fn default_snapshots() -> usize {
    DEFAULT_SNAPSHOTS
}

/// On-disk scene description (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub array: ArraySpec,
    pub grid: GridSpec,
    pub sources: Vec<SourceSpec>,
    pub camera: CameraSpec,
    #[serde(default)]
    pub detections: DetectionSpec,
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    #[serde(default = "default_sound_speed")]
    pub sound_speed: f64,
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// A validated scene ready for simulation.
#[derive(Debug, Clone)]
pub struct Scene {
    pub array: ArrayGeometry,
    pub grid: Grid,
    pub sources: SourceSet,
    pub camera: CameraPose,
    pub detections: DetectionSpec,
    pub frequency: f64,
    pub sound_speed: f64,
    pub snapshots: usize,
}

impl Scene {
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        let array = match &spec.array {
            ArraySpec::Explicit { sensors } => ArrayGeometry::new(sensors.iter().map(|s| Point3::from(*s)).collect())?,
            ArraySpec::IrregularLines { count, lines, width, height, center, seed } => {
                ArrayGeometry::irregular_lines(*count, *lines, *width, *height, Point3::from(*center), *seed)?
            }
        };
        let grid = Grid::new(Point3::from(spec.grid.origin), spec.grid.extents, spec.grid.step)?;
        let sources = SourceSet::new(
            spec.sources.iter().map(|s| Point3::from(s.position)).collect(),
            spec.sources.iter().map(|s| s.power).collect(),
        )?;
        let camera = CameraPose::new(Point3::from(spec.camera.position), spec.camera.plane)?;
        check_propagation(spec.frequency, spec.sound_speed)?;
        if spec.snapshots == 0 {
            return Err(Error::InvalidInput("snapshot count must be at least 1".into()));
        }
        Ok(Self {
            array,
            grid,
            sources,
            camera,
            detections: spec.detections.clone(),
            frequency: spec.frequency,
            sound_speed: spec.sound_speed,
            snapshots: spec.snapshots,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_spec(&SceneSpec::load(path)?)
    }

    pub fn transfer_matrix(&self) -> Result<TransferMatrix> {
        build_transfer_matrix(&self.array, &self.grid, self.frequency, self.sound_speed)
    }

    /// Steering vectors of the true sources, one column per source.
    pub fn source_steering(&self) -> Result<DMatrix<Complex64>> {
        let cols = self
            .sources
            .positions()
            .iter()
            .map(|p| steering_for_point(&self.array, p, self.frequency, self.sound_speed))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_columns(&cols))
    }

    /// Moves everything except the array by `offset`.
    pub fn translated(&self, offset: &Point3) -> Self {
        let plane = Plane { point: (self.camera.plane.point() + offset).into(), normal: self.camera.plane.normal };
        Self {
            array: self.array.clone(),
            grid: self.grid.translated(offset),
            sources: self.sources.translated(offset),
            camera: CameraPose { position: self.camera.position + offset, plane },
            detections: self.detections.translated(offset),
            frequency: self.frequency,
            sound_speed: self.sound_speed,
            snapshots: self.snapshots,
        }
    }

    /// Mean distance from the array centroid to the sources.
    pub fn mean_source_distance(&self) -> f64 {
        let c = self.array.centroid();
        let p = self.sources.positions();
        p.iter().map(|s| (s - c).norm()).sum::<f64>() / p.len() as f64
    }

    /// Translates the scene along the array broadside (x) so that the mean
    /// source distance becomes `distance`.
    pub fn at_distance(&self, distance: f64) -> Result<Self> {
        let f = |dx: f64| self.translated(&Vector3::new(dx, 0.0, 0.0)).mean_source_distance();
        // Every source distance grows with the shift once all sources are in
        // front of the array plane, so bisect on that half-line.
        let nearest_x = self.sources.positions().iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let mut lo = self.array.centroid().x - nearest_x;
        let mut hi = lo + distance.abs() + self.grid.diagonal();
        if !distance.is_finite() || f(lo) > distance || f(hi) < distance {
            return Err(Error::InvalidInput(format!("cannot place sources at {distance} m")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < distance {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.translated(&Vector3::new(0.5 * (lo + hi), 0.0, 0.0)))
    }
}
