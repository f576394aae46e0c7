//! Camera detections as a transport prior.
//!
//! Detections arrive either as 3D anchor points or as pixels mapped onto a
//! reference plane through a homography fitted to known correspondences.
//! The transport cost between a grid point and an anchor is the angle
//! between their lines of sight from the camera, which ignores depth.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{CameraPose, Grid, Point3, Scene};
use crate::signalsim::stream_rng;

const JITTER_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub pixel: [f64; 2],
    pub point: [f64; 3],
}

/// How the detection prior is obtained, as written in the scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionSpec {
    /// 3D anchors given directly.
    Anchors { points: Vec<[f64; 3]> },
    /// Pixel detections plus at least four pixel/plane correspondences.
    Pixels { pixels: Vec<[f64; 2]>, correspondences: Vec<Correspondence> },
    /// Simulated detector: the camera ray through each true source, cut by
    /// the camera's reference plane, optionally perturbed by a random angle
    /// of up to `jitter_rad`.
    FromSources {
        #[serde(default)]
        jitter_rad: f64,
    },
}

impl Default for DetectionSpec {
    fn default() -> Self {
        DetectionSpec::FromSources { jitter_rad: 0.0 }
    }
}

impl DetectionSpec {
    pub fn translated(&self, offset: &Point3) -> Self {
        let shift = |p: &[f64; 3]| -> [f64; 3] { (Point3::from(*p) + offset).into() };
        match self {
            DetectionSpec::Anchors { points } => DetectionSpec::Anchors { points: points.iter().map(shift).collect() },
            DetectionSpec::Pixels { pixels, correspondences } => DetectionSpec::Pixels {
                pixels: pixels.clone(),
                correspondences: correspondences
                    .iter()
                    .map(|c| Correspondence { pixel: c.pixel, point: shift(&c.point) })
                    .collect(),
            },
            other => other.clone(),
        }
    }
}

/// Camera anchors with uniform weights `1/N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionPrior {
    anchors: Vec<Point3>,
    weights: Vec<f64>,
}

impl DetectionPrior {
    pub fn new(anchors: Vec<Point3>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::EmptyPrior);
        }
        if anchors.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("detection anchor is not finite".into()));
        }
        let n = anchors.len();
        Ok(Self { anchors, weights: vec![1.0 / n as f64; n] })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Point3] {
        &self.anchors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `M x N` matrix of line-of-sight angles, row-major (rows are grid points).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "cost data has {} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidInput("costs must be finite and nonnegative".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.data[m * self.cols + n]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.cols..(m + 1) * self.cols]
    }

    /// Smallest angle from grid point `m` to any detection ray.
    pub fn min_in_row(&self, m: usize) -> f64 {
        self.row(m).iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Angle between two directions, stable near 0 and pi.
pub fn line_of_sight_angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

pub fn angular_cost(grid: &Grid, prior: &DetectionPrior, camera: &Point3) -> Result<CostMatrix> {
    angular_cost_for_points(&grid.points(), prior, camera)
}

pub fn angular_cost_for_points(points: &[Point3], prior: &DetectionPrior, camera: &Point3) -> Result<CostMatrix> {
    let rays: Vec<Vector3<f64>> = prior.anchors().iter().map(|u| u - camera).collect();
    if rays.iter().any(|r| r.norm() == 0.0) {
        return Err(Error::DegenerateGeometry("detection anchor coincides with the camera".into()));
    }
    let n = rays.len();
    let mut data = Vec::with_capacity(points.len() * n);
    for p in points {
        let v = p - camera;
        if v.norm() == 0.0 {
            return Err(Error::DegenerateGeometry("grid point coincides with the camera".into()));
        }
        data.extend(rays.iter().map(|r| line_of_sight_angle(&v, r)));
    }
    CostMatrix::from_rows(points.len(), n, data)
}

/// Orthonormal in-plane frame fitted to coplanar 3D points.
struct PlaneFrame {
    origin: Point3,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

impl PlaneFrame {
    fn fit(points: &[Point3]) -> Result<Self> {
        let origin = points.iter().sum::<Point3>() / points.len() as f64;
        let centered = DMatrix::from_fn(points.len(), 3, |i, j| points[i][j] - origin[j]);
        let svd = centered.svd(false, true);
        let vt = svd.v_t.ok_or(Error::HomographyRankDeficient)?;
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let sv = |k: usize| svd.singular_values[order[k]];
        if sv(1) <= 1e-12 * sv(0).max(f64::MIN_POSITIVE) {
            return Err(Error::HomographyRankDeficient);
        }
        if sv(2) > 1e-6 * sv(0) {
            return Err(Error::InvalidInput("reference points are not coplanar".into()));
        }
        let row = |k: usize| Vector3::new(vt[(order[k], 0)], vt[(order[k], 1)], vt[(order[k], 2)]);
        Ok(Self { origin, e1: row(0), e2: row(1) })
    }

    fn to_plane(&self, p: &Point3) -> [f64; 2] {
        let d = p - self.origin;
        [d.dot(&self.e1), d.dot(&self.e2)]
    }

    fn to_world(&self, s: f64, t: f64) -> Point3 {
        self.origin + self.e1 * s + self.e2 * t
    }
}

/// Similarity that centers 2D points and scales their mean radius to sqrt 2.
fn normalizing_transform(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0] / n, y + p[1] / n));
    let mean_r = pts.iter().map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_r > 0.0 { std::f64::consts::SQRT_2 / mean_r } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let scale = ((b[0] - a[0]).hypot(b[1] - a[1])) * ((c[0] - a[0]).hypot(c[1] - a[1]));
    cross.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE)
}

/// Least-squares plane homography (normalized DLT) mapping pixels to in-plane
/// coordinates `src -> dst`.
fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Matrix3<f64>> {
    let n = src.len();
    if n < 4 {
        return Err(Error::HomographyRankDeficient);
    }
    if n == 4 {
        for i in 0..4 {
            for j in (i + 1)..4 {
                for k in (j + 1)..4 {
                    if collinear(src[i], src[j], src[k]) || collinear(dst[i], dst[j], dst[k]) {
                        return Err(Error::HomographyRankDeficient);
                    }
                }
            }
        }
    }
    let ts = normalizing_transform(src);
    let td = normalizing_transform(dst);
    let apply = |t: &Matrix3<f64>, p: [f64; 2]| {
        let v = t * Vector3::new(p[0], p[1], 1.0);
        [v[0] / v[2], v[1] / v[2]]
    };
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let [x, y] = apply(&ts, src[i]);
        let [u, v] = apply(&td, dst[i]);
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    // Pad to at least 9 rows so the SVD exposes the full right singular basis.
    if a.nrows() < 9 {
        a = a.resize_vertically(9, 0.0);
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(Error::HomographyRankDeficient)?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    if svd.singular_values[order[7]] <= 1e-10 * largest {
        return Err(Error::HomographyRankDeficient);
    }
    let h = vt.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().ok_or(Error::HomographyRankDeficient)?;
    Ok(td_inv * hn * ts)
}

/// Maps pixel detections onto the reference plane spanned by the
/// correspondences' 3D points.
pub fn project_pixels_to_plane(pixels: &[[f64; 2]], correspondences: &[Correspondence]) -> Result<Vec<Point3>> {
    if correspondences.len() < 4 {
        return Err(Error::HomographyRankDeficient);
    }
    let world: Vec<Point3> = correspondences.iter().map(|c| Point3::from(c.point)).collect();
    let frame = PlaneFrame::fit(&world)?;
    let src: Vec<[f64; 2]> = correspondences.iter().map(|c| c.pixel).collect();
    let dst: Vec<[f64; 2]> = world.iter().map(|p| frame.to_plane(p)).collect();
    let h = fit_homography(&src, &dst)?;
    pixels
        .iter()
        .map(|p| {
            let v = h * Vector3::new(p[0], p[1], 1.0);
            if v[2].abs() < 1e-300 {
                return Err(Error::DegenerateGeometry("pixel maps to the line at infinity".into()));
            }
            Ok(frame.to_world(v[0] / v[2], v[1] / v[2]))
        })
        .collect()
}

/// Rotates `dir` by `angle` about a random axis perpendicular to it.
fn perturb_direction<R: Rng>(rng: &mut R, dir: &Vector3<f64>, max_angle: f64) -> Vector3<f64> {
    let unit = dir.normalize();
    let helper = if unit.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = unit.cross(&helper).normalize();
    let e2 = unit.cross(&e1);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = rng.random_range(0.0..=max_angle);
    let axis = e1 * phi.cos() + e2 * phi.sin();
    (unit * angle.cos() + axis * angle.sin()) * dir.norm()
}

/// Builds the detection prior for a scene. `seed` only matters for simulated
/// detections with jitter.
pub fn build_prior(scene: &Scene, seed: u64) -> Result<DetectionPrior> {
    let anchors = match &scene.detections {
        DetectionSpec::Anchors { points } => points.iter().map(|p| Point3::from(*p)).collect(),
        DetectionSpec::Pixels { pixels, correspondences } => project_pixels_to_plane(pixels, correspondences)?,
        DetectionSpec::FromSources { jitter_rad } => {
            simulate_detections(&scene.camera, scene.sources.positions(), *jitter_rad, seed)?
        }
    };
    DetectionPrior::new(anchors)
}

pub fn simulate_detections(camera: &CameraPose, sources: &[Point3], jitter_rad: f64, seed: u64) -> Result<Vec<Point3>> {
    let mut rng = stream_rng(seed, JITTER_STREAM);
    sources
        .iter()
        .map(|s| {
            let mut dir = s - camera.position;
            if jitter_rad > 0.0 {
                dir = perturb_direction(&mut rng, &dir, jitter_rad);
            }
            camera.plane.intersect_ray(&camera.position, &dir)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Rotation3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn corr(pixel: [f64; 2], point: [f64; 3]) -> Correspondence {
        Correspondence { pixel, point }
    }

    #[test]
    fn identity_homography() {
        let z0 = 2.5;
        let cs = [
            corr([0.0, 0.0], [0.0, 0.0, z0]),
            corr([1.0, 0.0], [1.0, 0.0, z0]),
            corr([1.0, 1.0], [1.0, 1.0, z0]),
            corr([0.0, 1.0], [0.0, 1.0, z0]),
        ];
        let out = project_pixels_to_plane(&[[0.3, 0.7], [2.0, -1.0]], &cs).unwrap();
        assert!((out[0] - Point3::new(0.3, 0.7, z0)).norm() < 1e-12);
        assert!((out[1] - Point3::new(2.0, -1.0, z0)).norm() < 1e-12);
    }

    #[test]
    fn reference_pixels_map_to_their_points() {
        let cs = [
            corr([102.0, 55.0], [3.0, 0.1, 0.2]),
            corr([640.0, 80.0], [3.0, 1.4, 0.25]),
            corr([600.0, 420.0], [3.0, 1.3, -0.6]),
            corr([90.0, 400.0], [3.0, -0.1, -0.5]),
        ];
        let px: Vec<[f64; 2]> = cs.iter().map(|c| c.pixel).collect();
        let out = project_pixels_to_plane(&px, &cs).unwrap();
        for (o, c) in out.iter().zip(&cs) {
            assert!((o - Point3::from(c.point)).norm() < 1e-9);
        }
    }

    #[test]
    fn inverts_a_pinhole_render() {
        // Pinhole camera looking at the plane y = 2 from the origin, tilted.
        let rot = Rotation3::from_euler_angles(-FRAC_PI_2 + 0.1, 0.05, 0.2);
        let cam = Point3::new(0.3, -0.2, 0.1);
        let (f, cx, cy) = (800.0, 320.0, 240.0);
        let render = |p: &Point3| {
            let q = rot.inverse() * (p - cam);
            [f * q.x / q.z + cx, f * q.y / q.z + cy]
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plane_pt =
            |rng: &mut ChaCha8Rng| Point3::new(rng.random_range(-1.0..1.0), 2.0, rng.random_range(-0.8..0.8));
        let refs: Vec<Point3> = (0..6).map(|_| plane_pt(&mut rng)).collect();
        let cs: Vec<Correspondence> = refs.iter().map(|p| corr(render(p), (*p).into())).collect();
        let targets: Vec<Point3> = (0..10).map(|_| plane_pt(&mut rng)).collect();
        let px: Vec<[f64; 2]> = targets.iter().map(render).collect();
        let out = project_pixels_to_plane(&px, &cs).unwrap();
        for (o, t) in out.iter().zip(&targets) {
            assert!((o - t).norm() < 1e-6, "{o} vs {t}");
        }
    }

    #[test]
    fn collinear_references_are_rejected() {
        let cs = [
            corr([0.0, 0.0], [0.0, 0.0, 0.0]),
            corr([1.0, 1.0], [1.0, 1.0, 0.0]),
            corr([2.0, 2.0], [2.0, 2.0, 0.0]),
            corr([0.0, 1.0], [0.0, 1.0, 0.0]),
        ];
        assert!(matches!(project_pixels_to_plane(&[[0.5, 0.5]], &cs), Err(Error::HomographyRankDeficient)));
        assert!(matches!(project_pixels_to_plane(&[[0.5, 0.5]], &cs[..3]), Err(Error::HomographyRankDeficient)));
    }

    #[test]
    fn angle_cases() {
        let cam = Point3::zeros();
        let prior = DetectionPrior::new(vec![Point3::new(1.0, 1.0, 0.0)]).unwrap();
        let pts = [Point3::new(3.0, 3.0, 0.0), Point3::new(1.0, -1.0, 0.0), Point3::new(-2.0, -2.0, 0.0)];
        let c = angular_cost_for_points(&pts, &prior, &cam).unwrap();
        assert_eq!(c.get(0, 0), 0.0);
        assert_relative_eq!(c.get(1, 0), FRAC_PI_2, epsilon = 1e-15);
        assert_relative_eq!(c.get(2, 0), std::f64::consts::PI, epsilon = 1e-15);
        assert!(angular_cost_for_points(&[cam], &prior, &cam).is_err());
    }

    #[test]
    fn acos_oracle_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut v = || {
            Vector3::<f64>::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
        };
        for _ in 0..500 {
            let (a, b) = (v(), v());
            let cos = (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
            assert!((line_of_sight_angle(&a, &b) - cos.acos()).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_weights_are_uniform() {
        let prior = DetectionPrior::new(vec![Point3::zeros(); 3]).unwrap();
        assert_relative_eq!(prior.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(matches!(DetectionPrior::new(vec![]), Err(Error::EmptyPrior)));
    }

    #[test]
    fn simulated_detections_lie_on_source_rays() {
        let plane = crate::scene::Plane { point: [0.0, 0.0, 0.0], normal: [0.0, 1.0, 0.0] };
        let camera = CameraPose::new(Point3::new(3.0, -3.0, 0.0), plane).unwrap();
        let sources = [Point3::new(3.4, 0.5, 0.2), Point3::new(2.5, -0.4, -0.3)];
        let anchors = simulate_detections(&camera, &sources, 0.0, 1).unwrap();
        for (a, s) in anchors.iter().zip(&sources) {
            assert!(a.y.abs() < 1e-12);
            assert!(line_of_sight_angle(&(a - camera.position), &(s - camera.position)) < 1e-12);
        }
        let jittered = simulate_detections(&camera, &sources, 0.01, 1).unwrap();
        for (a, s) in jittered.iter().zip(&sources) {
            assert!(line_of_sight_angle(&(a - camera.position), &(s - camera.position)) <= 0.01 + 1e-12);
        }
    }
}
