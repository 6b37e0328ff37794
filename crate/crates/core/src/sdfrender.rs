//! Sphere tracing of signed distance fields into depth/variance images.

use nalgebra::Point3;
use rayon::prelude::*;

use crate::camera::{CameraModel, Ray};
use crate::error::{Error, Result};
use crate::geom::{centroid, max_distance};
use crate::gpis::{ConditioningSet, GpisModel};
use crate::image::{DepthVarImage, Grid, MISS_VAR};

/// A field that can be sphere traced.
pub trait SdfField: Sync {
    fn distance(&self, p: &Point3<f64>) -> f64;

    /// Uncertainty reported at a hit point.
    fn variance(&self, _p: &Point3<f64>) -> f64 {
        0.0
    }

    /// Variance at many points; must equal mapping [`SdfField::variance`].
    fn variances(&self, points: &[Point3<f64>]) -> Vec<f64> {
        points.iter().map(|p| self.variance(p)).collect()
    }
}

impl SdfField for GpisModel {
    fn distance(&self, p: &Point3<f64>) -> f64 {
        self.mean(p)
    }

    fn variance(&self, p: &Point3<f64>) -> f64 {
        GpisModel::variance(self, p)
    }

    fn variances(&self, points: &[Point3<f64>]) -> Vec<f64> {
        GpisModel::variances(self, points)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchParams {
    /// Fraction of the SDF value taken per step, in (0, 1].
    pub alpha: f64,
    /// Minimum step length (meters).
    pub dt_min: f64,
    /// A point with SDF below this counts as a hit (meters).
    pub hit_tol: f64,
    pub max_steps: usize,
    /// Hard upper bound on the ray parameter; infinite means "exit of the bounding sphere".
    pub t_max: f64,
    /// Relative margin added to the bounding sphere radius.
    pub margin_frac: f64,
}

impl MarchParams {
    /// Defaults for an object of bounding radius `r_b`.
    pub fn for_radius(r_b: f64) -> Self {
        Self {
            alpha: 0.9,
            dt_min: 1e-3 * r_b,
            hit_tol: 1e-4 * r_b,
            max_steps: 200,
            t_max: f64::INFINITY,
            margin_frac: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("march alpha must lie in (0, 1]"));
        }
        if !(self.dt_min > 0.0) || !(self.hit_tol > 0.0) {
            return Err(Error::invalid("dt_min and hit_tol must be positive"));
        }
        if !(self.t_max > 0.0) {
            return Err(Error::invalid("t_max must be positive"));
        }
        if !(self.margin_frac >= 0.0) {
            return Err(Error::invalid("margin_frac must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingSphere {
    pub center: Point3<f64>,
    pub radius: f64,
}

impl BoundingSphere {
    /// Sphere about the centroid of `points` with radius
    /// `(1 + margin_frac) · max distance`, floored at `min_radius`.
    pub fn covering(points: &[Point3<f64>], margin_frac: f64, min_radius: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("bounding sphere of an empty point set"));
        }
        let center = centroid(points);
        let radius = ((1.0 + margin_frac) * max_distance(&center, points)).max(min_radius);
        Ok(Self { center, radius })
    }
}

/// Bounding sphere of the surface points of a conditioning set.
pub fn bounding_sphere(set: &ConditioningSet, margin_frac: f64, min_radius: f64) -> Result<BoundingSphere> {
    let surface = set.surface_points();
    if surface.is_empty() {
        // sets built by hand may carry no surface label
        return BoundingSphere::covering(&set.locations, margin_frac, min_radius);
    }
    BoundingSphere::covering(&surface, margin_frac, min_radius)
}

/// Parameter interval `[t_enter, t_exit]` (clipped to t ≥ 0) where the ray is
/// inside the sphere, or `None`.
pub fn sphere_prefilter(ray: &Ray, sphere: &BoundingSphere) -> Option<(f64, f64)> {
    // |o + t d - c|² = r² with |d| = 1: t² + 2 b t + c = 0
    let oc = ray.origin - sphere.center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - sphere.radius * sphere.radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // numerically stable root pair
    let q = if b > 0.0 { -b - s } else { -b + s };
    let (r1, r2) = if q == 0.0 { (0.0, 0.0) } else { (c / q, q) };
    let (t0, t1) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    if t1 < 0.0 {
        return None;
    }
    Some((t0.max(0.0), t1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarchHit {
    pub t: f64,
    pub variance: f64,
    pub steps: usize,
}

/// Marching loop; returns `(t_hit, steps)` on a hit.
fn march_core<F: SdfField + ?Sized>(
    field: &F,
    ray: &Ray,
    params: &MarchParams,
    window: (f64, f64),
    mut trace: Option<&mut Vec<(f64, f64)>>,
) -> Option<(f64, usize)> {
    let t_end = window.1.min(params.t_max);
    let mut t = window.0;
    let mut steps = 0;
    loop {
        let s = field.distance(&ray.at(t));
        if let Some(tr) = trace.as_deref_mut() {
            tr.push((t, s));
        }
        if s < params.hit_tol {
            return Some((t, steps));
        }
        if steps >= params.max_steps {
            return None;
        }
        t += (params.alpha * s).max(params.dt_min);
        steps += 1;
        if t > t_end || !t.is_finite() {
            return None;
        }
    }
}

fn march_distance<F: SdfField + ?Sized>(
    field: &F,
    ray: &Ray,
    params: &MarchParams,
    window: (f64, f64),
) -> Option<f64> {
    march_core(field, ray, params, window, None).map(|(t, _)| t)
}

fn march_impl<F: SdfField + ?Sized>(
    field: &F,
    ray: &Ray,
    params: &MarchParams,
    window: (f64, f64),
    trace: Option<&mut Vec<(f64, f64)>>,
) -> Option<MarchHit> {
    march_core(field, ray, params, window, trace).map(|(t, steps)| MarchHit {
        t,
        variance: field.variance(&ray.at(t)),
        steps,
    })
}

/// Sphere traces `field` along `ray` inside `window`.
///
/// Steps by `max(alpha · sdf, dt_min)` until the SDF drops below `hit_tol`
/// (hit), the window or `t_max` is exceeded, or `max_steps` steps are taken
/// (both misses).
pub fn march<F: SdfField + ?Sized>(
    field: &F,
    ray: &Ray,
    params: &MarchParams,
    window: (f64, f64),
) -> Option<MarchHit> {
    march_impl(field, ray, params, window, None)
}

/// Like [`march`] but also returns every visited `(t, sdf)` pair.
pub fn march_traced<F: SdfField + ?Sized>(
    field: &F,
    ray: &Ray,
    params: &MarchParams,
    window: (f64, f64),
) -> (Option<MarchHit>, Vec<(f64, f64)>) {
    let mut trace = Vec::new();
    let hit = march_impl(field, ray, params, window, Some(&mut trace));
    (hit, trace)
}

/// Renders z-depth and variance for every pixel of `camera`.
///
/// Rays are first clipped against `sphere`; rays that miss it are never
/// marched. Pixels are independent, so the parallel evaluation is
/// bit-identical to a sequential loop.
pub fn render_field<F: SdfField + ?Sized>(
    field: &F,
    sphere: &BoundingSphere,
    camera: &CameraModel,
    params: &MarchParams,
) -> Result<DepthVarImage> {
    params.validate()?;
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    // Pass 1: march every pixel against the SDF only.
    let hits: Vec<Option<(f64, Point3<f64>)>> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = ((idx % w) as f64, (idx / w) as f64);
            let ray = camera.ray_unchecked(u, v);
            let window = sphere_prefilter(&ray, sphere)?;
            let t = march_distance(field, &ray, params, window)?;
            // camera-frame direction has z = 1 / |(x, y, 1)|
            let depth = t / camera.pixel_ray_camera(u, v).norm();
            (depth > 0.0).then(|| (depth, ray.at(t)))
        })
        .collect();
    // Pass 2: variances at the hit points, batched.
    let points: Vec<Point3<f64>> = hits.iter().flatten().map(|(_, p)| *p).collect();
    let mut vars = field.variances(&points).into_iter();
    let mut depth = Vec::with_capacity(w * h);
    let mut variance = Vec::with_capacity(w * h);
    for hit in hits {
        match hit {
            Some((d, _)) => {
                depth.push(d);
                variance.push(vars.next().expect("one variance per hit"));
            }
            None => {
                depth.push(0.0);
                variance.push(MISS_VAR);
            }
        }
    }
    Ok(DepthVarImage {
        depth: Grid::from_vec(w, h, depth)?,
        variance: Grid::from_vec(w, h, variance)?,
        camera: camera.clone(),
    })
}

/// Renders a GPIS model, bounding rays by the sphere around its surface points.
pub fn render_depth_variance(
    model: &GpisModel,
    camera: &CameraModel,
    params: &MarchParams,
) -> Result<DepthVarImage> {
    params.validate()?;
    let sphere = bounding_sphere(model.conditioning(), params.margin_frac, params.dt_min)?;
    render_field(model, &sphere, camera, params)
}
