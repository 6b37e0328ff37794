//! Synthetic scenes: analytic shapes, simulated touches, ground-truth renders,
//! sparse depth keypoints and a stand-in for a monocular depth estimator.
//!
//! Every generator is a pure function of its inputs and seed.

use std::f64::consts::PI;

use nalgebra::{Point3, Rotation3, Translation3, UnitQuaternion};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::align::{SparseDepth, SparseSource};
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::{tangent_frame, Pose, Vec3};
use crate::gpis::TouchReading;
use crate::image::{DepthVarImage, Grid, Image, RgbImage, MISS_VAR};
use crate::sdfrender::{render_field, BoundingSphere, MarchParams, SdfField};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Box { half_extents: Vec3 },
    /// Ring around the local z axis.
    Torus { major: f64, minor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticShape {
    pub kind: ShapeKind,
    /// World-from-shape transform.
    pub pose: Pose,
}

impl AnalyticShape {
    pub fn new(kind: ShapeKind, pose: Pose) -> Result<Self> {
        let ok = match kind {
            ShapeKind::Sphere { radius } => radius > 0.0,
            ShapeKind::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            ShapeKind::Torus { major, minor } => major > 0.0 && minor > 0.0,
        };
        if !ok {
            return Err(Error::invalid("shape size parameters must be positive"));
        }
        Ok(Self { kind, pose })
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        Self::new(ShapeKind::Sphere { radius }, Pose::identity())
    }

    pub fn cuboid(half_extents: Vec3) -> Result<Self> {
        Self::new(ShapeKind::Box { half_extents }, Pose::identity())
    }

    pub fn torus(major: f64, minor: f64) -> Result<Self> {
        Self::new(ShapeKind::Torus { major, minor }, Pose::identity())
    }

    pub fn translated(mut self, offset: Vec3) -> Self {
        self.pose = Pose::from_parts(Translation3::from(offset), UnitQuaternion::identity()) * self.pose;
        self
    }

    fn local_sdf(&self, q: &Point3<f64>) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => q.coords.norm() - radius,
            ShapeKind::Box { half_extents } => {
                let d = q.coords.abs() - half_extents;
                let outside = d.map(|v| v.max(0.0)).norm();
                outside + d.max().min(0.0)
            }
            ShapeKind::Torus { major, minor } => {
                let ring = (q.x * q.x + q.y * q.y).sqrt() - major;
                (ring * ring + q.z * q.z).sqrt() - minor
            }
        }
    }

    pub fn sdf(&self, p: &Point3<f64>) -> f64 {
        self.local_sdf(&self.pose.inverse_transform_point(p))
    }

    /// Radius of a sphere about the pose origin enclosing the shape.
    pub fn extent(&self) -> f64 {
        match self.kind {
            ShapeKind::Sphere { radius } => radius,
            ShapeKind::Box { half_extents } => half_extents.norm(),
            ShapeKind::Torus { major, minor } => major + minor,
        }
    }

    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.pose.translation.vector)
    }

    pub fn bounding_sphere(&self, margin_frac: f64) -> BoundingSphere {
        BoundingSphere {
            center: self.center(),
            radius: self.extent() * (1.0 + margin_frac),
        }
    }
}

impl SdfField for AnalyticShape {
    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.sdf(p)
    }
}

/// Exact signed distance from `point` to `shape` (negative inside).
pub fn analytic_sdf(shape: &AnalyticShape, point: &Point3<f64>) -> f64 {
    shape.sdf(point)
}

/// Central finite-difference gradient.
pub fn sdf_gradient<F: SdfField + ?Sized>(field: &F, p: &Point3<f64>, h: f64) -> Vec3 {
    let mut g = Vec3::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        g[k] = (field.distance(&(p + e)) - field.distance(&(p - e))) / (2.0 * h);
    }
    g
}

/// Newton projection onto the zero level set: `p ← p − f(p) ∇f / |∇f|²`.
pub fn project_to_surface<F: SdfField + ?Sized>(field: &F, p: &Point3<f64>) -> Point3<f64> {
    let mut q = *p;
    for _ in 0..32 {
        let f = field.distance(&q);
        if f.abs() < 1e-13 {
            break;
        }
        let g = sdf_gradient(field, &q, 1e-6);
        let g2 = g.norm_squared();
        if g2 < 1e-12 {
            break;
        }
        q -= g * (f / g2);
    }
    q
}

/// Union of shapes, each with a flat albedo for the RGB renders.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub objects: Vec<(AnalyticShape, [f64; 3])>,
    pub background: [f64; 3],
}

impl AnalyticScene {
    pub fn nearest(&self, p: &Point3<f64>) -> Option<(usize, f64)> {
        self.objects
            .iter()
            .enumerate()
            .map(|(i, (s, _))| (i, s.sdf(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn bounding_sphere(&self, margin_frac: f64) -> BoundingSphere {
        let n = self.objects.len().max(1) as f64;
        let center = Point3::from(
            self.objects
                .iter()
                .fold(Vec3::zeros(), |a, (s, _)| a + s.center().coords)
                / n,
        );
        let radius = self
            .objects
            .iter()
            .map(|(s, _)| (s.center() - center).norm() + s.extent())
            .fold(0.0, f64::max);
        BoundingSphere {
            center,
            radius: radius * (1.0 + margin_frac),
        }
    }
}

impl SdfField for AnalyticScene {
    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.nearest(p).map_or(f64::INFINITY, |(_, d)| d)
    }
}

/// Perturbation magnitudes for simulated measurements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Per-axis std of touch point positions (meters).
    pub point_sigma: f64,
    /// Std of normal tilt (radians).
    pub normal_sigma: f64,
    /// Sparse depth std is `sparse_a · depth²`.
    pub sparse_a: f64,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            point_sigma: 0.0,
            normal_sigma: 0.0,
            sparse_a: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_sigma >= 0.0 && self.normal_sigma >= 0.0 && self.sparse_a >= 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("noise magnitudes must be nonnegative"))
        }
    }
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            point_sigma: 1e-3,
            normal_sigma: 0.01,
            sparse_a: 0.005,
        }
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("nonnegative std")
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    Vec3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Rotation whose z axis is `z`.
fn frame_with_z(z: &Vec3) -> UnitQuaternion<f64> {
    let (x, y) = tangent_frame(z);
    let m = nalgebra::Matrix3::from_columns(&[x, y, *z]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

/// Simulates `n_touches` contact patches on `shape`.
///
/// Each touch picks a surface point, samples `points_per_touch` points on the
/// tangent disc of radius `patch_radius`, projects them onto the surface and
/// records the SDF-gradient normals, then applies `noise`. Touch `i` draws
/// from its own ChaCha stream so touches are independent of one another.
pub fn sample_touches(
    shape: &AnalyticShape,
    n_touches: usize,
    patch_radius: f64,
    points_per_touch: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<Vec<TouchReading>> {
    if n_touches == 0 {
        return Err(Error::invalid("need at least one touch"));
    }
    if !(patch_radius >= 0.0) {
        return Err(Error::invalid("patch radius must be nonnegative"));
    }
    noise.validate()?;
    let pos_noise = gaussian(noise.point_sigma);
    let tilt_noise = gaussian(noise.normal_sigma);
    let reach = 2.0 * shape.extent();
    (0..n_touches)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let start = shape.center() + random_direction(&mut rng) * reach;
            let center = project_to_surface(shape, &start);
            let normal = sdf_gradient(shape, &center, 1e-6).normalize();
            let (t1, t2) = tangent_frame(&normal);
            let mut points = Vec::with_capacity(points_per_touch);
            let mut normals = Vec::with_capacity(points_per_touch);
            for _ in 0..points_per_touch {
                let r = patch_radius * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                let q = center + (t1 * th.cos() + t2 * th.sin()) * r;
                let p = project_to_surface(shape, &q);
                let n = sdf_gradient(shape, &p, 1e-6).normalize();
                let (a, b) = tangent_frame(&n);
                let n_noisy =
                    (n + a * tilt_noise.sample(&mut rng) + b * tilt_noise.sample(&mut rng)).normalize();
                let p_noisy = p + Vec3::new(
                    pos_noise.sample(&mut rng),
                    pos_noise.sample(&mut rng),
                    pos_noise.sample(&mut rng),
                );
                points.push(p_noisy);
                normals.push(n_noisy);
            }
            let pose = Pose::from_parts(Translation3::from(center.coords), frame_with_z(&(-normal)));
            TouchReading::new(points, normals, pose)
        })
        .collect()
}

/// March settings tight enough to serve as ground truth.
pub fn ground_truth_march() -> MarchParams {
    MarchParams {
        alpha: 1.0,
        dt_min: 1e-8,
        hit_tol: 1e-7,
        max_steps: 20_000,
        t_max: f64::INFINITY,
        margin_frac: 0.01,
    }
}

/// Exact depth of an analytic field (variance 0 at hits, sentinels at misses).
pub fn render_gt_depth<F: SdfField + ?Sized>(
    field: &F,
    sphere: &BoundingSphere,
    camera: &CameraModel,
) -> Result<DepthVarImage> {
    render_field(field, sphere, camera, &ground_truth_march())
}

pub fn render_shape_depth(shape: &AnalyticShape, camera: &CameraModel) -> Result<DepthVarImage> {
    render_gt_depth(shape, &shape.bounding_sphere(0.01), camera)
}

pub fn render_scene_depth(scene: &AnalyticScene, camera: &CameraModel) -> Result<DepthVarImage> {
    render_gt_depth(scene, &scene.bounding_sphere(0.01), camera)
}

/// Flat-shaded RGB render: albedo · (ambient + diffuse) for a directional light.
pub fn render_rgb(scene: &AnalyticScene, camera: &CameraModel, light_dir: &Vec3) -> Result<RgbImage> {
    let depth = render_scene_depth(scene, camera)?;
    let l = light_dir.normalize();
    Ok(Grid::from_fn(camera.width, camera.height, |col, row| {
        let d = *depth.depth.get(col, row);
        if d <= 0.0 {
            return scene.background;
        }
        let p = camera.backproject(col as f64, row as f64, d);
        let (idx, _) = scene.nearest(&p).expect("nonempty scene");
        let n = sdf_gradient(&scene.objects[idx].0, &p, 1e-6).normalize();
        let shade = 0.35 + 0.65 * n.dot(&l).max(0.0);
        scene.objects[idx].1.map(|c| (c * shade).clamp(0.0, 1.0))
    }))
}

/// Pixels where `object` is the first visible surface of the scene.
pub fn object_mask(object_depth: &DepthVarImage, scene_depth: &DepthVarImage) -> Grid<bool> {
    Grid::from_fn(object_depth.depth.width(), object_depth.depth.height(), |c, r| {
        let o = *object_depth.depth.get(c, r);
        let s = *scene_depth.depth.get(c, r);
        o > 0.0 && s > 0.0 && (o - s).abs() <= 1e-6
    })
}

/// Samples `round(fraction · hits)` GT hit pixels and perturbs their depth by
/// a gaussian with std `sparse_a · depth²`.
pub fn make_sparse_depth(
    gt: &DepthVarImage,
    fraction: f64,
    noise: &NoiseModel,
    seed: u64,
) -> Result<SparseDepth> {
    if !(fraction > 0.0 && fraction <= 0.01) {
        return Err(Error::invalid("sparse fraction must lie in (0, 0.01]"));
    }
    noise.validate()?;
    let w = gt.depth.width();
    let hits: Vec<usize> = (0..gt.depth.len())
        .filter(|&i| gt.depth.as_slice()[i] > 0.0)
        .collect();
    if hits.is_empty() {
        return Err(Error::invalid("ground truth has no hit pixels"));
    }
    let count = (fraction * hits.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sample(&mut rng, hits.len(), count).into_iter().map(|k| hits[k]).collect();
    chosen.sort_unstable();
    let unit = gaussian(1.0);
    let samples = chosen
        .into_iter()
        .map(|i| {
            let d = gt.depth.as_slice()[i];
            let z = unit.sample(&mut rng);
            let noisy = d + noise.sparse_a * d * d * z;
            (i % w, i / w, noisy.max(1e-6))
        })
        .collect();
    Ok(SparseDepth {
        samples,
        source: SparseSource::Synthetic,
    })
}

/// Distortions applied by [`synth_monocular`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonocularModel {
    /// The output is `(d_distorted − offset) / scale`, so stage 1 should
    /// recover roughly this scale and offset.
    pub scale: f64,
    pub offset: f64,
    /// Relative amplitude of a smooth multiplicative depth bias.
    pub bias_amp: f64,
    /// Per-pixel gaussian depth noise (meters, before unscaling).
    pub pixel_sigma: f64,
}

impl Default for MonocularModel {
    fn default() -> Self {
        Self {
            scale: 2.5,
            offset: 0.3,
            bias_amp: 0.02,
            pixel_sigma: 0.05,
        }
    }
}

/// Fakes a relative monocular depth map from GT depth: smooth bias, pixel
/// noise, then an unknown affine transform. GT misses stay undefined (0).
pub fn synth_monocular(gt: &DepthVarImage, model: &MonocularModel, seed: u64) -> Result<Image> {
    if !(model.scale > 0.0) || !(model.pixel_sigma >= 0.0) {
        return Err(Error::invalid("monocular model needs scale > 0 and pixel_sigma >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fu, fv): (f64, f64) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (pu, pv): (f64, f64) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let noise = gaussian(model.pixel_sigma);
    let (w, h) = gt.depth.dims();
    let mut out = Grid::filled(w, h, 0.0);
    for row in 0..h {
        for col in 0..w {
            let d = *gt.depth.get(col, row);
            let z = noise.sample(&mut rng);
            if d <= 0.0 {
                continue;
            }
            let bias = model.bias_amp
                * (2.0 * PI * fu * col as f64 / w as f64 + pu).sin()
                * (2.0 * PI * fv * row as f64 / h as f64 + pv).cos();
            let distorted = (d * (1.0 + bias) + z).max(1e-3);
            *out.get_mut(col, row) = ((distorted - model.offset) / model.scale).max(1e-4);
        }
    }
    Ok(out)
}

/// Identifies GT miss pixels (for tests and metrics).
pub fn is_miss(img: &DepthVarImage, col: usize, row: usize) -> bool {
    *img.depth.get(col, row) == 0.0 && *img.variance.get(col, row) == MISS_VAR
}
