//! In-memory stage kernels shared by the on-disk pipeline and experiments.

use nalgebra::Point3;

use crate::align::{align_view, AlignParams, AlignedVision, SparseDepth};
use crate::config::{GpisConfig, MarchConfig};
use crate::error::{Error, Result};
use crate::fuse::{fuse_images, FusedSupervision};
use crate::gpis::{build_conditioning_set, fit_with_cap, touch_extent, GpisModel, TouchReading};
use crate::image::{DepthVarImage, Grid, Image, RgbImage};
use crate::io::NamedCamera;
use crate::metrics::{align_clouds, apply, chamfer, depth_mse, hausdorff, psnr, EvalReport, ViewScores};
use crate::sdfrender::render_depth_variance;
use crate::splat::{backproject_samples, cloud_from_samples, render, InitOptions, SplatCloud};

/// Conditions and fits the GPIS; also returns the touch extent r_b.
pub fn fit_gpis(touches: &[TouchReading], cfg: &GpisConfig) -> Result<(GpisModel, f64)> {
    let (_, r_b) = touch_extent(touches).ok_or(Error::NoTactileData)?;
    let r_b = r_b.max(f64::EPSILON);
    let set = build_conditioning_set(touches, &cfg.conditioning(r_b))?;
    log::info!("conditioning set: {} points (r_b = {r_b:.4})", set.len());
    let model = fit_with_cap(&set, &cfg.kernel(r_b), cfg.cap())?;
    Ok((model, r_b))
}

pub fn render_gpis(model: &GpisModel, cams: &[NamedCamera], march: &MarchConfig, r_b: f64) -> Result<Vec<DepthVarImage>> {
    let params = march.params(r_b);
    cams.iter()
        .map(|c| render_depth_variance(model, &c.camera, &params))
        .collect()
}

pub fn align_views(
    mono: &[Image],
    sparse: &[SparseDepth],
    gpis: &[DepthVarImage],
    params: &AlignParams,
) -> Result<Vec<AlignedVision>> {
    if mono.len() != gpis.len() || sparse.len() != gpis.len() {
        return Err(Error::DimensionMismatch("view counts differ".into()));
    }
    mono.iter()
        .zip(sparse)
        .zip(gpis)
        .map(|((m, s), g)| align_view(m, s, g, params))
        .collect()
}

pub fn fuse_views(vision: &[DepthVarImage], gpis: &[DepthVarImage]) -> Result<Vec<FusedSupervision>> {
    if vision.len() != gpis.len() {
        return Err(Error::DimensionMismatch("view counts differ".into()));
    }
    vision.iter().zip(gpis).map(|(v, g)| fuse_images(v, g)).collect()
}

/// Touch-derived depth where the GPIS hits, aligned vision elsewhere.
pub fn gpis_first_depth(gpis: &DepthVarImage, vision: &DepthVarImage) -> DepthVarImage {
    let mut out = gpis.clone();
    for i in 0..out.depth.len() {
        if out.depth.as_slice()[i] <= 0.0 {
            out.depth.as_mut_slice()[i] = vision.depth.as_slice()[i];
            out.variance.as_mut_slice()[i] = vision.variance.as_slice()[i];
        }
    }
    out
}

/// Per-channel median of pixels no depth source covers; black if none.
pub fn estimate_background(rgbs: &[RgbImage], coverage: &[DepthVarImage]) -> [f64; 3] {
    let mut chans: [Vec<f64>; 3] = Default::default();
    for (rgb, cov) in rgbs.iter().zip(coverage) {
        for (px, &d) in rgb.as_slice().iter().zip(cov.depth.as_slice()) {
            if d <= 0.0 {
                for k in 0..3 {
                    chans[k].push(px[k]);
                }
            }
        }
    }
    chans.map(|mut v| {
        if v.is_empty() {
            return 0.0;
        }
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    })
}

/// Splat cloud from backprojected depth images, colored from `rgbs`.
pub fn init_cloud(depth: &[DepthVarImage], rgbs: &[RgbImage], opts: &InitOptions) -> SplatCloud {
    let samples = backproject_samples(depth);
    let background = estimate_background(rgbs, depth);
    cloud_from_samples(&samples, Some(rgbs), opts, background)
}

/// Ground truth needed to score one view.
#[derive(Debug, Clone)]
pub struct EvalView {
    pub name: String,
    pub rgb: RgbImage,
    pub gt_depth: DepthVarImage,
    pub object_mask: Grid<bool>,
}

/// Object surface points: ground-truth depth lifted at object-mask pixels.
pub fn object_points(views: &[EvalView]) -> Vec<Point3<f64>> {
    let mut out = Vec::new();
    for v in views {
        let cam = &v.gt_depth.camera;
        for row in 0..cam.height {
            for col in 0..cam.width {
                let d = *v.gt_depth.depth.get(col, row);
                if *v.object_mask.get(col, row) && d > 0.0 {
                    out.push(cam.backproject(col as f64, row as f64, d));
                }
            }
        }
    }
    out
}

/// Renders `cloud` into every view and scores it. The reconstruction
/// distances compare the GPIS surface (lifted from its renders) with the
/// ground-truth object surface after rigid Chamfer alignment.
pub fn evaluate(
    cloud: &SplatCloud,
    views: &[EvalView],
    gpis: &[DepthVarImage],
    icp_iters: usize,
) -> Result<(EvalReport, Vec<(RgbImage, Image)>)> {
    let mut scores = Vec::with_capacity(views.len());
    let mut renders = Vec::with_capacity(views.len());
    for v in views {
        let (rgb, depth) = render(cloud, &v.gt_depth.camera);
        scores.push(ViewScores {
            name: v.name.clone(),
            psnr: psnr(&rgb, &v.rgb)?,
            d_mse: depth_mse(&depth, &v.gt_depth, None)?,
            d_mse_o: depth_mse(&depth, &v.gt_depth, Some(&v.object_mask))?,
        });
        renders.push((rgb, depth));
    }
    let recon: Vec<Point3<f64>> = backproject_samples(gpis).into_iter().map(|s| s.position).collect();
    let truth = object_points(views);
    let (cd, hd) = if recon.is_empty() || truth.is_empty() {
        log::warn!("no surface points for reconstruction distances");
        (f64::NAN, f64::NAN)
    } else {
        let pose = align_clouds(&recon, &truth, icp_iters)?;
        let moved = apply(&pose, &recon);
        (chamfer(&moved, &truth)?, hausdorff(&moved, &truth)?)
    };
    Ok((EvalReport::from_views(scores, cd, hd), renders))
}
