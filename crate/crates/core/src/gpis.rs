//! Gaussian Process Implicit Surfaces.
//!
//! Touch readings are expanded into a conditioning set of signed-distance
//! observations (surface points at 0, points offset along the normal at ±δ and
//! slice centroids at −ε), then an exact GP with a Matérn-3/2 kernel is fit to
//! it. The posterior mean is used as an SDF and the posterior variance as its
//! uncertainty.

use std::f64::consts::PI;

use nalgebra::Point3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{centroid, max_distance, voxel_downsample, Pose, Vec3};
use crate::linalg::{dot, Cholesky};

/// Maximum number of conditioning points accepted by [`fit`].
pub const DEFAULT_POINT_CAP: usize = 8_000;

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Contact points and outward normals from a single touch.
#[derive(Debug, Clone, PartialEq)]
pub struct TouchReading {
    pub points: Vec<Point3<f64>>,
    pub normals: Vec<Vec3>,
    /// World-from-sensor transform at contact.
    pub sensor_pose: Pose,
}

impl TouchReading {
    pub fn new(points: Vec<Point3<f64>>, normals: Vec<Vec3>, sensor_pose: Pose) -> Result<Self> {
        if points.len() != normals.len() {
            return Err(Error::invalid(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("touch point {i} is not finite")));
        }
        Ok(Self {
            points,
            normals,
            sensor_pose,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointClass {
    Surface,
    Inside,
    Outside,
    Interior,
}

impl PointClass {
    pub fn code(self) -> u8 {
        match self {
            PointClass::Surface => 0,
            PointClass::Inside => 1,
            PointClass::Outside => 2,
            PointClass::Interior => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => PointClass::Surface,
            1 => PointClass::Inside,
            2 => PointClass::Outside,
            3 => PointClass::Interior,
            _ => return None,
        })
    }
}

/// Locations with signed-distance targets to condition the GP on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditioningSet {
    pub locations: Vec<Point3<f64>>,
    pub targets: Vec<f64>,
    pub classes: Vec<PointClass>,
}

impl ConditioningSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn push(&mut self, location: Point3<f64>, target: f64, class: PointClass) {
        self.locations.push(location);
        self.targets.push(target);
        self.classes.push(class);
    }

    pub fn surface_points(&self) -> Vec<Point3<f64>> {
        self.locations
            .iter()
            .zip(&self.classes)
            .filter(|(_, c)| **c == PointClass::Surface)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn count(&self, class: PointClass) -> usize {
        self.classes.iter().filter(|c| **c == class).count()
    }
}

/// Parameters for [`build_conditioning_set`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditioningOptions {
    /// Offset along the normal for the inside/outside points (meters).
    pub delta: f64,
    /// Magnitude of the negative target at slice centroids (meters).
    pub epsilon: f64,
    pub n_slices: usize,
    /// Voxel pitch for downsampling the raw contact points; 0 disables it.
    pub voxel: f64,
}

impl ConditioningOptions {
    /// Defaults scaled by the bounding radius `r_b` of the touch data.
    pub fn for_radius(r_b: f64) -> Self {
        Self {
            delta: 0.02 * r_b,
            epsilon: 0.01 * r_b,
            n_slices: 8,
            voxel: r_b / 50.0,
        }
    }
}

/// Centroid and bounding radius (max distance from centroid) of all touch points.
pub fn touch_extent(touches: &[TouchReading]) -> Option<(Point3<f64>, f64)> {
    let pts: Vec<_> = touches.iter().flat_map(|t| t.points.iter().copied()).collect();
    if pts.is_empty() {
        return None;
    }
    let c = centroid(&pts);
    Some((c, max_distance(&c, &pts)))
}

pub fn build_conditioning_set(
    touches: &[TouchReading],
    opts: &ConditioningOptions,
) -> Result<ConditioningSet> {
    let points: Vec<Point3<f64>> = touches.iter().flat_map(|t| t.points.iter().copied()).collect();
    let normals: Vec<Vec3> = touches.iter().flat_map(|t| t.normals.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::NoTactileData);
    }
    if points.len() != normals.len() {
        return Err(Error::invalid("touch has mismatched point and normal counts"));
    }
    if !(opts.delta > 0.0) || !(opts.epsilon > 0.0) {
        return Err(Error::invalid("delta and epsilon must be positive"));
    }
    if opts.n_slices == 0 {
        return Err(Error::invalid("n_slices must be at least 1"));
    }
    if !(opts.voxel >= 0.0) {
        return Err(Error::invalid("voxel pitch must be nonnegative"));
    }
    for (index, n) in normals.iter().enumerate() {
        let norm = n.norm();
        if !((norm - 1.0).abs() <= 1e-6) {
            return Err(Error::NonUnitNormal { index, norm });
        }
    }
    if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid(format!("touch point {i} is not finite")));
    }

    let kept = voxel_downsample(&points, opts.voxel);
    let mut set = ConditioningSet::default();
    for &i in &kept {
        let (x, n) = (points[i], normals[i]);
        set.push(x, 0.0, PointClass::Surface);
        set.push(x - n * opts.delta, -opts.delta, PointClass::Inside);
        set.push(x + n * opts.delta, opts.delta, PointClass::Outside);
    }

    // Interior points: centroids of equal-height z-slices of the surface points.
    let (zmin, zmax) = kept
        .iter()
        .map(|&i| points[i].z)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
            (lo.min(z), hi.max(z))
        });
    let span = zmax - zmin;
    let mut sums = vec![(Vec3::zeros(), 0usize); opts.n_slices];
    for &i in &kept {
        let bin = if span > 0.0 {
            (((points[i].z - zmin) / span * opts.n_slices as f64) as usize).min(opts.n_slices - 1)
        } else {
            0
        };
        sums[bin].0 += points[i].coords;
        sums[bin].1 += 1;
    }
    for (sum, count) in sums {
        if count > 0 {
            set.push(
                Point3::from(sum / count as f64),
                -opts.epsilon,
                PointClass::Interior,
            );
        }
    }
    Ok(set)
}

/// Matérn-3/2 kernel hyperparameters plus observation noise and constant prior mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// Length scale ρ (meters).
    pub rho: f64,
    /// Output scale σ (meters).
    pub sigma: f64,
    /// Observation noise variance (meters²).
    pub noise: f64,
    /// Constant prior mean m(x) (meters).
    pub prior_mean: f64,
}

impl KernelParams {
    pub fn new(rho: f64, sigma: f64, noise: f64, prior_mean: f64) -> Result<Self> {
        let p = Self {
            rho,
            sigma,
            noise,
            prior_mean,
        };
        p.validate()?;
        Ok(p)
    }

    /// Defaults for an object of bounding radius `r_b`: prior mean +0.5·r_b
    /// reads untouched space as outside.
    pub fn for_radius(r_b: f64) -> Self {
        Self {
            rho: 0.5 * r_b,
            sigma: r_b,
            noise: 1e-6 * r_b * r_b,
            prior_mean: 0.5 * r_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::invalid("rho must be positive"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be nonnegative"));
        }
        if !self.prior_mean.is_finite() {
            return Err(Error::invalid("prior mean must be finite"));
        }
        Ok(())
    }

    #[inline]
    fn kernel(&self, d: f64) -> f64 {
        let r = SQRT3 * d / self.rho;
        self.sigma * self.sigma * (1.0 + r) * (-r).exp()
    }
}

/// σ²(1 + √3 d/ρ) exp(−√3 d/ρ).
pub fn matern32(d: f64, params: &KernelParams) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(Error::invalid(format!("negative or NaN distance {d}")));
    }
    Ok(params.kernel(d))
}

/// A GP conditioned on a [`ConditioningSet`]. Immutable once fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GpisModel {
    conditioning: ConditioningSet,
    params: KernelParams,
    jitter: f64,
    factor: Cholesky,
    alpha: Vec<f64>,
}

fn kernel_matrix(locations: &[Point3<f64>], params: &KernelParams, diag: f64) -> Vec<f64> {
    let n = locations.len();
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = locations[i];
        for (j, v) in row.iter_mut().enumerate().take(i + 1) {
            *v = params.kernel((locations[j] - xi).norm());
        }
        row[i] += diag;
    });
    k
}

/// Factors K + noise·I, escalating a diagonal jitter from 1e-6·σ² by ×10 up to
/// 1e-2·σ² when the plain matrix is not numerically positive definite.
fn factor_with_jitter(locations: &[Point3<f64>], params: &KernelParams) -> Result<(Cholesky, f64)> {
    let n = locations.len();
    let s2 = params.sigma * params.sigma;
    let mut jitter = 0.0;
    loop {
        let k = kernel_matrix(locations, params, params.noise + jitter);
        if let Some(c) = Cholesky::factor(k, n) {
            if jitter > 0.0 {
                log::debug!("kernel factorization needed jitter {jitter:e}");
            }
            return Ok((c, jitter));
        }
        jitter = if jitter == 0.0 { 1e-6 * s2 } else { jitter * 10.0 };
        if jitter > 1e-2 * s2 * (1.0 + 1e-9) {
            return Err(Error::NotPositiveDefinite);
        }
    }
}

pub fn fit(set: &ConditioningSet, params: &KernelParams) -> Result<GpisModel> {
    fit_with_cap(set, params, DEFAULT_POINT_CAP)
}

pub fn fit_with_cap(set: &ConditioningSet, params: &KernelParams, cap: usize) -> Result<GpisModel> {
    params.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("empty conditioning set"));
    }
    if set.targets.len() != set.len() || set.classes.len() != set.len() {
        return Err(Error::invalid("conditioning set arrays differ in length"));
    }
    if set.len() > cap {
        return Err(Error::OverCap {
            count: set.len(),
            cap,
        });
    }
    let (factor, jitter) = factor_with_jitter(&set.locations, params)?;
    Ok(GpisModel::assemble(set.clone(), *params, jitter, factor))
}

impl GpisModel {
    fn assemble(conditioning: ConditioningSet, params: KernelParams, jitter: f64, factor: Cholesky) -> Self {
        let mut alpha: Vec<f64> = conditioning
            .targets
            .iter()
            .map(|y| y - params.prior_mean)
            .collect();
        factor.solve(&mut alpha);
        Self {
            conditioning,
            params,
            jitter,
            factor,
            alpha,
        }
    }

    pub fn conditioning(&self) -> &ConditioningSet {
        &self.conditioning
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Diagonal jitter added during factorization (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    fn cross_cov(&self, p: &Point3<f64>) -> Vec<f64> {
        self.conditioning
            .locations
            .iter()
            .map(|x| self.params.kernel((x - p).norm()))
            .collect()
    }

    /// Posterior mean only; this is the SDF used while marching.
    pub fn mean(&self, p: &Point3<f64>) -> f64 {
        let mut s = 0.0;
        for (x, a) in self.conditioning.locations.iter().zip(&self.alpha) {
            s += self.params.kernel((x - p).norm()) * a;
        }
        self.params.prior_mean + s
    }

    /// Posterior (latent) variance, floored at 1e-12·σ².
    pub fn variance(&self, p: &Point3<f64>) -> f64 {
        let mut v = self.cross_cov(p);
        self.posterior_variance(&mut v)
    }

    fn posterior_variance(&self, k: &mut [f64]) -> f64 {
        let s2 = self.params.sigma * self.params.sigma;
        self.factor.solve_lower(k);
        (s2 - dot(k, k)).max(1e-12 * s2)
    }

    pub fn mean_and_variance(&self, p: &Point3<f64>) -> (f64, f64) {
        let mut k = self.cross_cov(p);
        (self.mean(p), self.posterior_variance(&mut k))
    }

    /// Posterior variances for many points at once; identical to calling
    /// [`Self::variance`] on each, but streams the factor once per batch.
    pub fn variances(&self, points: &[Point3<f64>]) -> Vec<f64> {
        const BATCH: usize = 64;
        let n = self.conditioning.len();
        let s2 = self.params.sigma * self.params.sigma;
        let mut out = Vec::with_capacity(points.len());
        let mut buf = Vec::with_capacity(BATCH * n);
        for chunk in points.chunks(BATCH) {
            buf.clear();
            for p in chunk {
                buf.extend(self.cross_cov(p));
            }
            self.factor.solve_lower_many(&mut buf, chunk.len());
            out.extend(buf.chunks_exact(n).map(|v| (s2 - dot(v, v)).max(1e-12 * s2)));
        }
        out
    }

    /// Posterior mean and variance at each point.
    pub fn query(&self, points: &[Point3<f64>]) -> Result<Vec<(f64, f64)>> {
        if let Some(i) = points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("query point {i} is not finite")));
        }
        let vars = self.variances(points);
        Ok(points.iter().zip(vars).map(|(p, v)| (self.mean(p), v)).collect())
    }

    /// log p(y | X, θ) of the centered targets.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.alpha.len() as f64;
        let fit: f64 = self
            .conditioning
            .targets
            .iter()
            .zip(&self.alpha)
            .map(|(y, a)| (y - self.params.prior_mean) * a)
            .sum();
        -0.5 * fit - 0.5 * self.factor.log_det() - 0.5 * n * (2.0 * PI).ln()
    }

    const MAGIC: &'static [u8; 4] = b"GPIS";
    const VERSION: u32 = 1;

    /// Binary layout (little-endian): magic `GPIS`, version u32, point count
    /// u64, locations (3n f64), targets (n f64), class codes (n u8), params
    /// `rho sigma noise prior_mean jitter` (5 f64), packed lower factor
    /// (n(n+1)/2 f64, row by row).
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.conditioning.len();
        let mut out = Vec::with_capacity(16 + n * 40 + n * (n + 1) * 4 + 40);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for p in &self.conditioning.locations {
            for c in p.coords.iter() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        for t in &self.conditioning.targets {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend(self.conditioning.classes.iter().map(|c| c.code()));
        let p = &self.params;
        for v in [p.rho, p.sigma, p.noise, p.prior_mean, self.jitter] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.factor.packed() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != Self::MAGIC {
            return Err("bad magic (expected GPIS)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(format!("unsupported model version {version}"));
        }
        let n = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
        if n == 0 || n > 1 << 20 {
            return Err(format!("implausible point count {n}"));
        }
        let mut set = ConditioningSet::default();
        let mut locs = Vec::with_capacity(n);
        for _ in 0..n {
            locs.push(Point3::new(r.f64()?, r.f64()?, r.f64()?));
        }
        let targets = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let classes = r
            .take(n)?
            .iter()
            .map(|&c| PointClass::from_code(c).ok_or_else(|| format!("bad class code {c}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        set.locations = locs;
        set.targets = targets;
        set.classes = classes;
        let params = KernelParams {
            rho: r.f64()?,
            sigma: r.f64()?,
            noise: r.f64()?,
            prior_mean: r.f64()?,
        };
        params.validate().map_err(|e| e.to_string())?;
        let jitter = r.f64()?;
        let packed = (0..n * (n + 1) / 2)
            .map(|_| r.f64())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err("trailing bytes after factor".into());
        }
        let factor = Cholesky::from_packed(&packed, n).ok_or("bad factor size")?;
        Ok(Self::assemble(set, params, jitter, factor))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err("unexpected end of file".into()),
        }
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Grid search over `(rho, sigma)` maximizing the log marginal likelihood.
///
/// `base` supplies the noise and prior mean. Candidates are visited in order
/// of increasing rho then sigma and only a strictly better score replaces the
/// incumbent, so ties resolve to the smallest rho, then smallest sigma.
pub fn optimize_hyperparameters(
    set: &ConditioningSet,
    base: &KernelParams,
    grid: &[(f64, f64)],
) -> Result<KernelParams> {
    if grid.is_empty() {
        return Err(Error::invalid("empty hyperparameter grid"));
    }
    let mut order: Vec<(f64, f64)> = grid.to_vec();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut best: Option<(f64, KernelParams)> = None;
    for (rho, sigma) in order {
        let params = KernelParams::new(rho, sigma, base.noise, base.prior_mean)?;
        let model = match fit(set, &params) {
            Ok(m) => m,
            Err(Error::NotPositiveDefinite) => continue,
            Err(e) => return Err(e),
        };
        let score = model.log_marginal_likelihood();
        log::debug!("rho={rho} sigma={sigma} lml={score}");
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, params));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::NotPositiveDefinite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn params(rho: f64, sigma: f64, noise: f64) -> KernelParams {
        KernelParams::new(rho, sigma, noise, 0.0).unwrap()
    }

    fn touch(points: Vec<Point3<f64>>, normals: Vec<Vec3>) -> TouchReading {
        TouchReading::new(points, normals, Pose::identity()).unwrap()
    }

    fn opts(delta: f64, n_slices: usize) -> ConditioningOptions {
        ConditioningOptions {
            delta,
            epsilon: 0.005,
            n_slices,
            voxel: 0.0,
        }
    }

    #[test]
    fn single_point_expansion() {
        let t = touch(vec![Point3::origin()], vec![Vec3::z()]);
        let set = build_conditioning_set(&[t], &opts(0.01, 1)).unwrap();
        let has = |p: Point3<f64>, y: f64| {
            set.locations
                .iter()
                .zip(&set.targets)
                .any(|(q, t)| (q - p).norm() < 1e-15 && *t == y)
        };
        assert!(has(Point3::origin(), 0.0));
        assert!(has(Point3::new(0.0, 0.0, -0.01), -0.01));
        assert!(has(Point3::new(0.0, 0.0, 0.01), 0.01));
        // plus one interior point
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn sphere_single_slice_centroid_at_origin() {
        let mut pts = Vec::new();
        let mut nrm = Vec::new();
        // Fibonacci sphere
        let n = 500;
        let golden = PI * (3.0 - 5f64.sqrt());
        for i in 0..n {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let th = golden * i as f64;
            let v = Vec3::new(r * th.cos(), r * th.sin(), z);
            pts.push(Point3::from(v));
            nrm.push(v);
        }
        let set = build_conditioning_set(&[touch(pts, nrm)], &opts(0.01, 1)).unwrap();
        let interior: Vec<_> = set
            .locations
            .iter()
            .zip(&set.classes)
            .filter(|(_, c)| **c == PointClass::Interior)
            .collect();
        assert_eq!(interior.len(), 1);
        assert!(interior[0].0.coords.norm() < 1e-2);
        assert_eq!(set.count(PointClass::Interior), 1);
        let i = set.classes.iter().position(|c| *c == PointClass::Interior).unwrap();
        assert_eq!(set.targets[i], -0.005);
    }

    #[test]
    fn empty_touches_rejected() {
        let err = build_conditioning_set(&[], &opts(0.01, 1)).unwrap_err();
        assert_eq!(err.to_string(), "no tactile data");
        let t = touch(vec![], vec![]);
        assert!(matches!(
            build_conditioning_set(&[t], &opts(0.01, 1)),
            Err(Error::NoTactileData)
        ));
    }

    #[test]
    fn non_unit_normal_reports_index() {
        let a = touch(vec![Point3::origin()], vec![Vec3::z()]);
        let b = touch(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)],
            vec![Vec3::x(), Vec3::new(0.0, 0.0, 1.1)],
        );
        match build_conditioning_set(&[a, b], &opts(0.01, 1)) {
            Err(Error::NonUnitNormal { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matern_values() {
        let p = params(0.7, 1.3, 0.0);
        assert_eq!(matern32(0.0, &p).unwrap(), 1.3 * 1.3);
        assert!(matern32(70.0, &p).unwrap() < 1e-30 * 1.69);
        let p1 = params(0.7, 1.0, 0.0);
        let v = matern32(0.7 / 3f64.sqrt(), &p1).unwrap();
        assert!((v - 0.735_758_882_342_884_6).abs() < 1e-15);
        assert!(matern32(-1e-9, &p).is_err());
        assert!(matern32(f64::NAN, &p).is_err());
    }

    #[test]
    fn matern_monotone() {
        let p = params(0.3, 2.0, 0.0);
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let v = matern32(i as f64 * 0.003, &p).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    /// Independent posterior via a dense LU solve.
    fn dense_posterior(set: &ConditioningSet, p: &KernelParams, diag: f64, q: &Point3<f64>) -> (f64, f64) {
        let n = set.len();
        let k = |a: &Point3<f64>, b: &Point3<f64>| {
            let d = (a - b).norm();
            p.sigma.powi(2) * (1.0 + 3f64.sqrt() * d / p.rho) * (-(3f64.sqrt()) * d / p.rho).exp()
        };
        let kmat = DMatrix::from_fn(n, n, |i, j| {
            k(&set.locations[i], &set.locations[j]) + if i == j { diag } else { 0.0 }
        });
        let y = DVector::from_iterator(n, set.targets.iter().map(|t| t - p.prior_mean));
        let ks = DVector::from_iterator(n, set.locations.iter().map(|x| k(x, q)));
        let lu = kmat.lu();
        let a = lu.solve(&y).unwrap();
        let v = lu.solve(&ks).unwrap();
        (p.prior_mean + ks.dot(&a), p.sigma.powi(2) - ks.dot(&v))
    }

    fn three_point_set() -> ConditioningSet {
        let mut s = ConditioningSet::default();
        s.push(Point3::new(0.0, 0.0, 0.0), 0.0, PointClass::Surface);
        s.push(Point3::new(0.3, 0.1, 0.0), 0.2, PointClass::Outside);
        s.push(Point3::new(-0.1, 0.4, 0.2), -0.1, PointClass::Inside);
        s
    }

    #[test]
    fn three_point_interpolation() {
        let set = three_point_set();
        let p = KernelParams::new(0.5, 1.0, 1e-6, 0.1).unwrap();
        let m = fit(&set, &p).unwrap();
        assert_eq!(m.jitter(), 0.0);
        for (x, y) in set.locations.iter().zip(&set.targets) {
            let (mean, _) = m.mean_and_variance(x);
            assert!((mean - y).abs() < 1e-5);
            let (om, _) = dense_posterior(&set, &p, 1e-6, x);
            assert!((mean - om).abs() < 1e-10);
        }
        let q = Point3::new(0.2, -0.3, 0.5);
        let (mean, var) = m.mean_and_variance(&q);
        let (om, ov) = dense_posterior(&set, &p, 1e-6, &q);
        assert!((mean - om).abs() < 1e-10 && (var - ov).abs() < 1e-10);
    }

    #[test]
    fn noiseless_interpolation_is_exact() {
        let set = three_point_set();
        let p = params(0.5, 1.0, 0.0);
        let m = fit(&set, &p).unwrap();
        for (x, y) in set.locations.iter().zip(&set.targets) {
            assert!((m.mean(x) - y).abs() < 1e-6);
            assert!(m.variance(x) > 0.0);
        }
    }

    #[test]
    fn duplicate_points_need_jitter() {
        let mut set = ConditioningSet::default();
        set.push(Point3::new(0.1, 0.2, 0.3), 0.05, PointClass::Surface);
        set.push(Point3::new(0.1, 0.2, 0.3), 0.05, PointClass::Surface);
        let m = fit(&set, &params(0.5, 1.0, 0.0)).unwrap();
        assert!(m.jitter() > 0.0);
    }

    #[test]
    fn cap_enforced() {
        let set = three_point_set();
        assert!(matches!(
            fit_with_cap(&set, &params(0.5, 1.0, 0.0), 2),
            Err(Error::OverCap { count: 3, cap: 2 })
        ));
    }

    #[test]
    fn prior_reversion_far_away() {
        let set = three_point_set();
        let p = KernelParams::new(0.2, 0.8, 1e-6, 0.37).unwrap();
        let m = fit(&set, &p).unwrap();
        let far = Point3::new(20.0 + 100.0 * 0.2, 0.0, 0.0);
        let (mean, var) = m.mean_and_variance(&far);
        assert!((mean - 0.37).abs() < 1e-6);
        assert!(var >= 0.999 * 0.64);
    }

    #[test]
    fn single_point_closed_form() {
        let mut set = ConditioningSet::default();
        let x = Point3::new(0.4, -0.2, 1.0);
        set.push(x, 0.3, PointClass::Surface);
        let (s2, noise, m0): (f64, f64, f64) = (0.49, 0.01, 0.2);
        let p = KernelParams::new(0.5, s2.sqrt(), noise, m0).unwrap();
        let m = fit(&set, &p).unwrap();
        let expected = 0.3 * s2 / (s2 + noise) + m0 * noise / (s2 + noise);
        assert!((m.mean(&x) - expected).abs() < 1e-12);
        let expected_var = s2 - s2 * s2 / (s2 + noise);
        assert!((m.variance(&x) - expected_var).abs() < 1e-12);
    }

    #[test]
    fn batch_equals_pointwise() {
        let set = three_point_set();
        let m = fit(&set, &params(0.5, 1.0, 1e-4)).unwrap();
        let qs: Vec<_> = (0..20)
            .map(|i| Point3::new(i as f64 * 0.1, (i as f64).sin(), -0.2))
            .collect();
        let batch = m.query(&qs).unwrap();
        for (q, b) in qs.iter().zip(&batch) {
            assert_eq!(*b, m.mean_and_variance(q));
        }
        assert!(m.query(&[Point3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn model_bytes_round_trip() {
        let set = three_point_set();
        let m = fit(&set, &KernelParams::new(0.5, 1.0, 1e-4, 0.2).unwrap()).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"GPIS");
        let back = GpisModel::from_bytes(&bytes).unwrap();
        assert_eq!(m, back);
        assert!(GpisModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn singleton_grid() {
        let set = three_point_set();
        let base = KernelParams::new(1.0, 1.0, 1e-6, 0.0).unwrap();
        let p = optimize_hyperparameters(&set, &base, &[(0.3, 0.7)]).unwrap();
        assert_eq!((p.rho, p.sigma), (0.3, 0.7));
        assert!(optimize_hyperparameters(&set, &base, &[]).is_err());
    }

    #[test]
    fn grid_choice_is_order_independent() {
        let mut set = ConditioningSet::default();
        for i in 0..6 {
            set.push(Point3::new(i as f64 * 0.2, 0.0, 0.0), 0.0, PointClass::Surface);
        }
        let base = KernelParams::new(1.0, 1.0, 1e-6, 0.0).unwrap();
        let grid = vec![(0.5, 1.0), (0.1, 1.0), (0.3, 0.5), (0.3, 2.0)];
        let mut rev = grid.clone();
        rev.reverse();
        let a = optimize_hyperparameters(&set, &base, &grid).unwrap();
        let b = optimize_hyperparameters(&set, &base, &rev).unwrap();
        assert_eq!(a, b);
    }
}
