//! Monocular depth alignment.
//!
//! Stage 1 fits a metric scale and offset from sparse trusted depth. Stage 2
//! shifts only the touched object onto the GPIS depth with the scale pinned to
//! one. A depth-proportional heuristic supplies the vision variance.

use crate::error::{Error, Result};
use crate::image::{check_dims, DepthVarImage, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SparseSource {
    Sensor,
    Synthetic,
}

/// Sparse metric depth samples `(col, row, depth)` for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    pub samples: Vec<(usize, usize, f64)>,
    pub source: SparseSource,
}

/// Vision depth after both alignment stages plus its variance.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedVision {
    pub depth: Image,
    pub variance: Image,
    pub s_star: f64,
    pub t_star: f64,
    pub t_gpis: f64,
    /// Pixels shifted by stage 2.
    pub object_pixels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignParams {
    /// Depth-proportional standard deviation factor.
    pub k: f64,
    /// Constant variance floor (meters²).
    pub c: f64,
    /// Largest |vision − GPIS| gap admitted into the object mask (meters).
    pub max_gap: f64,
}

impl Default for AlignParams {
    fn default() -> Self {
        Self {
            k: 0.1,
            c: 0.25,
            max_gap: 3.0,
        }
    }
}

/// A vision depth value is usable when it is finite and positive.
pub fn is_valid_depth(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Closed-form least squares for `sparse ≈ s · raw + t`.
///
/// Returns `(s*, t*, s* · raw + t*)`. Undefined raw pixels (nonpositive or
/// non-finite) stay at 0.
pub fn align_scale_offset(raw: &Image, sparse: &SparseDepth) -> Result<(f64, f64, Image)> {
    let mut xs = Vec::with_capacity(sparse.samples.len());
    let mut ys = Vec::with_capacity(sparse.samples.len());
    for &(col, row, d) in &sparse.samples {
        if col >= raw.width() || row >= raw.height() {
            return Err(Error::invalid(format!("sparse sample ({col}, {row}) out of bounds")));
        }
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::invalid(format!("sparse depth {d} at ({col}, {row}) not positive")));
        }
        let x = *raw.get(col, row);
        if is_valid_depth(x) {
            xs.push(x);
            ys.push(d);
        }
    }
    if xs.len() < 2 {
        return Err(Error::RankDeficient(format!(
            "{} usable sparse samples, need at least 2",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 0.0) {
        return Err(Error::RankDeficient(
            "all sparse samples share one raw depth".into(),
        ));
    }
    let s = sxy / sxx;
    let t = my - s * mx;
    let aligned = raw.map(|&x| if is_valid_depth(x) { s * x + t } else { 0.0 });
    Ok((s, t, aligned))
}

/// Stage 2: offset-only alignment of the object region to the GPIS depth.
///
/// The mask is the set of GPIS hit pixels with valid vision depth whose gap to
/// the GPIS depth is at most `max_gap`. Only masked pixels move. Returns
/// `(t_gpis, updated, mask_size)`; an empty mask leaves the image untouched.
pub fn align_object_offset(
    aligned: &Image,
    gpis: &DepthVarImage,
    max_gap: f64,
) -> Result<(f64, Image, usize)> {
    check_dims(aligned, &gpis.depth, "vision vs GPIS depth")?;
    let mask: Vec<usize> = (0..aligned.len())
        .filter(|&i| {
            let g = gpis.depth.as_slice()[i];
            let a = aligned.as_slice()[i];
            g > 0.0 && is_valid_depth(a) && (a - g).abs() <= max_gap
        })
        .collect();
    if mask.is_empty() {
        log::warn!("object mask is empty; skipping touch offset alignment");
        return Ok((0.0, aligned.clone(), 0));
    }
    let t_gpis = mask
        .iter()
        .map(|&i| gpis.depth.as_slice()[i] - aligned.as_slice()[i])
        .sum::<f64>()
        / mask.len() as f64;
    let mut out = aligned.clone();
    for &i in &mask {
        out.as_mut_slice()[i] += t_gpis;
    }
    Ok((t_gpis, out, mask.len()))
}

/// σ²(p) = (k · depth(p))² + c.
pub fn vision_uncertainty(aligned: &Image, k: f64, c: f64) -> Result<Image> {
    if !(k >= 0.0) || !(c > 0.0) {
        return Err(Error::invalid("vision uncertainty needs k >= 0 and c > 0"));
    }
    Ok(aligned.map(|&d| (k * d).powi(2) + c))
}

/// Runs both stages and attaches the variance map.
pub fn align_view(
    raw: &Image,
    sparse: &SparseDepth,
    gpis: &DepthVarImage,
    params: &AlignParams,
) -> Result<AlignedVision> {
    let (s_star, t_star, stage1) = align_scale_offset(raw, sparse)?;
    let (t_gpis, depth, object_pixels) = align_object_offset(&stage1, gpis, params.max_gap)?;
    let variance = vision_uncertainty(&depth, params.k, params.c)?;
    Ok(AlignedVision {
        depth,
        variance,
        s_star,
        t_star,
        t_gpis,
        object_pixels,
    })
}

impl AlignedVision {
    /// The aligned depth as a depth/variance pair with miss sentinels at
    /// undefined pixels.
    pub fn as_depth_var(&self, camera: &crate::camera::CameraModel) -> DepthVarImage {
        let depth = self.depth.map(|&d| if is_valid_depth(d) { d } else { 0.0 });
        let mut variance = self.variance.clone();
        for (v, d) in variance.as_mut_slice().iter_mut().zip(depth.as_slice()) {
            if *d == 0.0 {
                *v = crate::image::MISS_VAR;
            }
        }
        DepthVarImage {
            depth,
            variance,
            camera: camera.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::geom::Pose;
    use crate::image::{Grid, MISS_VAR};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn raw_image(w: usize, h: usize) -> Image {
        Grid::from_fn(w, h, |c, r| 1.0 + 0.05 * c as f64 + 0.03 * r as f64 + 0.01 * ((c * r) % 7) as f64)
    }

    fn sparse_from(raw: &Image, f: impl Fn(f64) -> f64, step: usize) -> SparseDepth {
        let mut samples = Vec::new();
        for r in (0..raw.height()).step_by(step) {
            for c in (0..raw.width()).step_by(step) {
                samples.push((c, r, f(*raw.get(c, r))));
            }
        }
        SparseDepth {
            samples,
            source: SparseSource::Synthetic,
        }
    }

    #[test]
    fn noiseless_recovery() {
        let raw = raw_image(20, 10);
        let sparse = sparse_from(&raw, |d| 2.5 * d + 0.3, 3);
        let (s, t, aligned) = align_scale_offset(&raw, &sparse).unwrap();
        assert!((s - 2.5).abs() < 1e-9 && (t - 0.3).abs() < 1e-9);
        assert!((aligned.get(4, 4) - (2.5 * raw.get(4, 4) + 0.3)).abs() < 1e-9);
    }

    #[test]
    fn identity_recovery() {
        let raw = raw_image(12, 12);
        let (s, t, _) = align_scale_offset(&raw, &sparse_from(&raw, |d| d, 2)).unwrap();
        assert!((s - 1.0).abs() < 1e-12 && t.abs() < 1e-12);
    }

    #[test]
    fn shared_raw_depth_is_rank_deficient() {
        let raw = Grid::filled(5, 5, 2.0);
        let sparse = sparse_from(&raw, |d| d + 1.0, 1);
        assert!(matches!(align_scale_offset(&raw, &sparse), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn noisy_recovery_monte_carlo() {
        let mut good = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw = Grid::from_fn(64, 64, |_, _| rng.random_range(0.5..4.0));
            let noise = Normal::new(0.0, 0.01).unwrap();
            let samples: Vec<_> = (0..500)
                .map(|_| {
                    let (c, r) = (rng.random_range(0..64), rng.random_range(0..64));
                    (c, r, 2.5 * raw.get(c, r) + 0.3 + noise.sample(&mut rng))
                })
                .collect();
            let sparse = SparseDepth {
                samples,
                source: SparseSource::Synthetic,
            };
            let (s, t, _) = align_scale_offset(&raw, &sparse).unwrap();
            if (s - 2.5).abs() < 0.01 && (t - 0.3).abs() < 0.02 {
                good += 1;
            }
        }
        assert!(good >= 9, "{good}/10");
    }

    #[test]
    fn least_squares_optimality() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let raw = Grid::from_fn(16, 16, |_, _| rng.random_range(0.5..4.0));
            let samples: Vec<_> = (0..40)
                .map(|_| {
                    let (c, r) = (rng.random_range(0..16), rng.random_range(0..16));
                    (c, r, rng.random_range(0.5..8.0))
                })
                .collect();
            let sparse = SparseDepth {
                samples: samples.clone(),
                source: SparseSource::Synthetic,
            };
            let (s, t, _) = align_scale_offset(&raw, &sparse).unwrap();
            let obj = |s: f64, t: f64| {
                samples
                    .iter()
                    .map(|&(c, r, d)| (d - (s * raw.get(c, r) + t)).powi(2))
                    .sum::<f64>()
            };
            let best = obj(s, t);
            for (ds, dt) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
                assert!(obj(s + ds, t + dt) >= best);
            }
        }
    }

    fn gpis_image(depth: Image) -> DepthVarImage {
        let (w, h) = depth.dims();
        let camera = CameraModel::centered(10.0, w, h, Pose::identity()).unwrap();
        let variance = depth.map(|&d| if d > 0.0 { 1e-4 } else { MISS_VAR });
        DepthVarImage {
            depth,
            variance,
            camera,
        }
    }

    #[test]
    fn constant_object_offset_recovered() {
        let gdepth = Grid::from_fn(8, 8, |c, r| if (2..6).contains(&c) && (2..6).contains(&r) { 2.0 + 0.01 * c as f64 } else { 0.0 });
        let aligned = Grid::from_fn(8, 8, |c, r| {
            let g = *gdepth.get(c, r);
            if g > 0.0 { g - 0.05 } else { 5.0 + r as f64 }
        });
        let gpis = gpis_image(gdepth.clone());
        let (t, out, n) = align_object_offset(&aligned, &gpis, 3.0).unwrap();
        assert_eq!(n, 16);
        assert!((t - 0.05).abs() < 1e-12);
        for i in 0..64 {
            let g = gdepth.as_slice()[i];
            if g > 0.0 {
                assert!((out.as_slice()[i] - g).abs() < 1e-12);
            } else {
                assert_eq!(out.as_slice()[i].to_bits(), aligned.as_slice()[i].to_bits());
            }
        }
    }

    #[test]
    fn no_hits_leaves_image_unchanged() {
        let aligned = raw_image(6, 6);
        let gpis = gpis_image(Grid::filled(6, 6, 0.0));
        let (t, out, n) = align_object_offset(&aligned, &gpis, 3.0).unwrap();
        assert_eq!((t, n), (0.0, 0));
        assert_eq!(out, aligned);
    }

    #[test]
    fn large_gap_excluded() {
        let mut g = Grid::filled(3, 3, 0.0);
        *g.get_mut(1, 1) = 2.0;
        let aligned = Grid::filled(3, 3, 7.0);
        let (t, out, n) = align_object_offset(&aligned, &gpis_image(g), 3.0).unwrap();
        assert_eq!((t, n), (0.0, 0));
        assert_eq!(out, aligned);
    }

    #[test]
    fn uncertainty_formula() {
        let zero = Grid::filled(4, 4, 0.0);
        assert!(vision_uncertainty(&zero, 0.1, 0.25).unwrap().as_slice().iter().all(|&v| v == 0.25));
        let two = Grid::filled(1, 1, 2.0);
        assert!((vision_uncertainty(&two, 0.1, 0.25).unwrap().as_slice()[0] - 0.29).abs() < 1e-15);
        let d = Grid::from_vec(2, 1, vec![1.5, 3.0]).unwrap();
        let v = vision_uncertainty(&d, 0.3, 0.1).unwrap();
        let r = (v.as_slice()[1] - 0.1) / (v.as_slice()[0] - 0.1);
        assert!((r - 4.0).abs() < 1e-12);
        assert!(vision_uncertainty(&d, -0.1, 0.1).is_err());
        assert!(vision_uncertainty(&d, 0.1, 0.0).is_err());
    }

    #[test]
    fn uncertainty_monotone_in_depth() {
        let d = Grid::from_fn(100, 1, |c, _| c as f64 * 0.1);
        let v = vision_uncertainty(&d, 0.2, 0.05).unwrap();
        assert!(v.as_slice().windows(2).all(|w| w[1] >= w[0]));
    }
}
