//! Pixelwise inverse-variance fusion of vision and touch depth.

use crate::error::{Error, Result};
use crate::image::{check_dims, DepthVarImage, Grid, Image, MISS_VAR};

/// Which sources contributed to a fused pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    None,
    VisionOnly,
    TouchOnly,
    Fused,
}

impl Provenance {
    /// Gray level used in provenance PGM files.
    pub fn gray(self) -> u8 {
        match self {
            Provenance::None => 0,
            Provenance::VisionOnly => 85,
            Provenance::TouchOnly => 170,
            Provenance::Fused => 255,
        }
    }

    pub fn from_gray(g: u8) -> Option<Self> {
        Some(match g {
            0 => Provenance::None,
            85 => Provenance::VisionOnly,
            170 => Provenance::TouchOnly,
            255 => Provenance::Fused,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedSupervision {
    pub depth: Image,
    pub variance: Image,
    pub provenance: Grid<Provenance>,
}

impl FusedSupervision {
    /// Supervision built from a single depth/variance source (e.g. vision
    /// only); every valid pixel is tagged `VisionOnly`.
    pub fn from_single(src: &DepthVarImage) -> Self {
        let provenance = Grid::from_fn(src.depth.width(), src.depth.height(), |c, r| {
            if is_valid(*src.depth.get(c, r), *src.variance.get(c, r)) {
                Provenance::VisionOnly
            } else {
                Provenance::None
            }
        });
        let depth = Grid::from_fn(src.depth.width(), src.depth.height(), |c, r| {
            if *provenance.get(c, r) == Provenance::None { 0.0 } else { *src.depth.get(c, r) }
        });
        let variance = Grid::from_fn(src.depth.width(), src.depth.height(), |c, r| {
            if *provenance.get(c, r) == Provenance::None { MISS_VAR } else { *src.variance.get(c, r) }
        });
        Self {
            depth,
            variance,
            provenance,
        }
    }

    pub fn supervised_pixels(&self) -> usize {
        self.provenance
            .as_slice()
            .iter()
            .filter(|p| **p != Provenance::None)
            .count()
    }
}

/// Precision-weighted combination of two Gaussian estimates.
pub fn fuse_pixel(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<(f64, f64)> {
    if !(var1 > 0.0) || !(var2 > 0.0) {
        return Err(Error::invalid(format!(
            "variances must be positive (got {var1}, {var2})"
        )));
    }
    let var = 1.0 / (1.0 / var1 + 1.0 / var2);
    let mu = var * (mu1 / var1 + mu2 / var2);
    Ok((mu, var))
}

fn is_valid(depth: f64, var: f64) -> bool {
    depth.is_finite() && depth > 0.0 && var > 0.0 && var < MISS_VAR
}

/// Fuses vision (`first`) with touch (`second`) at every pixel.
///
/// Both valid → [`fuse_pixel`]; one valid → that source copied; neither →
/// depth 0 / [`MISS_VAR`] / `None`. A pixel is valid when its depth is
/// positive and finite and its variance is positive and below the sentinel.
pub fn fuse_images(vision: &DepthVarImage, touch: &DepthVarImage) -> Result<FusedSupervision> {
    check_dims(&vision.depth, &touch.depth, "vision vs touch depth")?;
    check_dims(&vision.depth, &vision.variance, "vision depth vs variance")?;
    check_dims(&touch.depth, &touch.variance, "touch depth vs variance")?;
    let (w, h) = vision.depth.dims();
    let mut depth = Vec::with_capacity(w * h);
    let mut variance = Vec::with_capacity(w * h);
    let mut provenance = Vec::with_capacity(w * h);
    let pix = |img: &DepthVarImage, i: usize| (img.depth.as_slice()[i], img.variance.as_slice()[i]);
    for i in 0..w * h {
        let (m1, v1) = pix(vision, i);
        let (m2, v2) = pix(touch, i);
        let (mu, var, p) = match (is_valid(m1, v1), is_valid(m2, v2)) {
            (true, true) => {
                let (mu, var) = fuse_pixel(m1, v1, m2, v2)?;
                (mu, var, Provenance::Fused)
            }
            (true, false) => (m1, v1, Provenance::VisionOnly),
            (false, true) => (m2, v2, Provenance::TouchOnly),
            (false, false) => (0.0, MISS_VAR, Provenance::None),
        };
        depth.push(mu);
        variance.push(var);
        provenance.push(p);
    }
    Ok(FusedSupervision {
        depth: Grid::from_vec(w, h, depth)?,
        variance: Grid::from_vec(w, h, variance)?,
        provenance: Grid::from_vec(w, h, provenance)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraModel;
    use crate::geom::Pose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pixel_examples() {
        assert_eq!(fuse_pixel(2.0, 1.0, 1.0, 1.0).unwrap(), (1.5, 0.5));
        let (mu, var) = fuse_pixel(2.0, 1e10, 1.0, 0.01).unwrap();
        assert!((mu - 1.0).abs() < 1e-8 && (var - 0.01).abs() < 1e-8);
        let (mu, var) = fuse_pixel(3.0, 0.5, 1.0, 2.0).unwrap();
        assert!((var - 0.4).abs() < 1e-15 && (mu - 2.6).abs() < 1e-15);
        assert!(fuse_pixel(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(fuse_pixel(1.0, 1.0, 1.0, -2.0).is_err());
    }

    fn cam(w: usize, h: usize) -> CameraModel {
        CameraModel::centered(10.0, w, h, Pose::identity()).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthVarImage {
        DepthVarImage {
            depth: Grid::from_fn(w, h, |_, _| rng.random_range(0.1..5.0)),
            variance: Grid::from_fn(w, h, |_, _| rng.random_range(1e-4..2.0)),
            camera: cam(w, h),
        }
    }

    #[test]
    fn all_miss_touch_returns_vision() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_image(&mut rng, 8, 6);
        let t = DepthVarImage::all_miss(cam(8, 6));
        let f = fuse_images(&v, &t).unwrap();
        for i in 0..48 {
            let d = v.depth.as_slice()[i];
            assert!((f.depth.as_slice()[i] - d).abs() <= 1e-6 * d);
            assert_eq!(f.provenance.as_slice()[i], Provenance::VisionOnly);
        }
    }

    #[test]
    fn matches_scalar_loop_and_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let ab = fuse_images(&a, &b).unwrap();
        let ba = fuse_images(&b, &a).unwrap();
        for i in 0..256 {
            let (mu, var) = fuse_pixel(
                a.depth.as_slice()[i],
                a.variance.as_slice()[i],
                b.depth.as_slice()[i],
                b.variance.as_slice()[i],
            )
            .unwrap();
            assert_eq!(ab.depth.as_slice()[i].to_bits(), mu.to_bits());
            assert_eq!(ab.variance.as_slice()[i].to_bits(), var.to_bits());
            assert!((ab.depth.as_slice()[i] - ba.depth.as_slice()[i]).abs() <= 1e-12);
            assert!((ab.variance.as_slice()[i] - ba.variance.as_slice()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn neither_valid_gives_sentinel() {
        let a = DepthVarImage::all_miss(cam(3, 2));
        let f = fuse_images(&a, &a).unwrap();
        assert!(f.depth.as_slice().iter().all(|&d| d == 0.0));
        assert!(f.variance.as_slice().iter().all(|&v| v == MISS_VAR));
        assert_eq!(f.supervised_pixels(), 0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = DepthVarImage::all_miss(cam(3, 2));
        let b = DepthVarImage::all_miss(cam(2, 3));
        assert!(matches!(fuse_images(&a, &b), Err(Error::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn fusion_invariants(
            m1 in 0.01f64..10.0, v1 in 1e-6f64..1e3,
            m2 in 0.01f64..10.0, v2 in 1e-6f64..1e3,
        ) {
            let (mu, var) = fuse_pixel(m1, v1, m2, v2).unwrap();
            let rel = ((1.0 / var) - (1.0 / v1 + 1.0 / v2)).abs() / (1.0 / var);
            prop_assert!(rel <= 1e-10);
            prop_assert!(var <= v1.min(v2));
            prop_assert!(mu >= m1.min(m2) * (1.0 - 1e-15) && mu <= m1.max(m2) * (1.0 + 1e-15));
            let (mu_s, var_s) = fuse_pixel(m1, v1, m1, v1).unwrap();
            prop_assert!((mu_s - m1).abs() <= 1e-12 * m1);
            prop_assert!((var_s - v1 / 2.0).abs() <= 1e-15 * v1);
        }
    }
}
