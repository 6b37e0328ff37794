//! Fixed-footprint point-blend renderer with analytic gradients.
//!
//! Each splat is an isotropic disc of fixed world radius. Its projection
//! covers every pixel center within the projected radius; covered splats are
//! alpha-composited front to back by camera z. Depth is composited with the
//! same weights and excludes the residual transmittance, so uncovered pixels
//! render depth 0.
//!
//! Coverage is binary, so gradients flow to colors, opacities and (through
//! the composited depth) to positions along each camera's optical axis.

use nalgebra::Point3;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::fuse::{FusedSupervision, Provenance};
use crate::geom::{voxel_downsample, Vec3};
use crate::image::{check_dims, DepthVarImage, Grid, Image, RgbImage};

/// Opacities are clamped below one so transmittance never vanishes exactly.
pub const ALPHA_MAX: f64 = 1.0 - 1e-6;

/// Splats closer than this to the camera plane are not drawn.
const Z_NEAR: f64 = 1e-3;

/// Trainable parameters per splat: position (3), color (3), opacity logit.
pub const PARAMS_PER_SPLAT: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Splat {
    pub position: Point3<f64>,
    pub color: [f64; 3],
    pub opacity_logit: f64,
    pub radius: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(alpha: f64) -> f64 {
    let a = alpha.clamp(1e-12, ALPHA_MAX);
    (a / (1.0 - a)).ln()
}

impl Splat {
    /// Opacity and its derivative with respect to the logit.
    pub fn alpha_and_slope(&self) -> (f64, f64) {
        let a = sigmoid(self.opacity_logit);
        if a > ALPHA_MAX {
            (ALPHA_MAX, 0.0)
        } else {
            (a, a * (1.0 - a))
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_and_slope().0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatCloud {
    pub splats: Vec<Splat>,
    pub background: [f64; 3],
}

impl SplatCloud {
    pub fn new(splats: Vec<Splat>, background: [f64; 3]) -> Result<Self> {
        if let Some(i) = splats.iter().position(|s| !(s.radius > 0.0)) {
            return Err(Error::invalid(format!("splat {i} has nonpositive radius")));
        }
        Ok(Self { splats, background })
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.splats.iter().all(|s| {
            s.position.coords.iter().all(|v| v.is_finite())
                && s.color.iter().all(|v| v.is_finite())
                && s.opacity_logit.is_finite()
        })
    }

    /// Flat parameter vector `[x y z r g b logit]` per splat.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * PARAMS_PER_SPLAT);
        for s in &self.splats {
            out.extend_from_slice(&[
                s.position.x,
                s.position.y,
                s.position.z,
                s.color[0],
                s.color[1],
                s.color[2],
                s.opacity_logit,
            ]);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.len() * PARAMS_PER_SPLAT);
        for (s, v) in self.splats.iter_mut().zip(p.chunks_exact(PARAMS_PER_SPLAT)) {
            s.position = Point3::new(v[0], v[1], v[2]);
            s.color = [v[3], v[4], v[5]];
            s.opacity_logit = v[6];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Depth loss weight λ.
    pub lambda: f64,
    /// Uncertainty sharpness w.
    pub w: f64,
    /// Per-iteration decay of λ, in (0, 1].
    pub beta: f64,
    /// Normalizer of the per-pixel weight.
    pub alpha0: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            w: 1.0,
            beta: 1.0,
            alpha0: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.w >= 0.0) {
            return Err(Error::invalid("lambda and w must be nonnegative"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid("beta must lie in (0, 1]"));
        }
        if !(self.alpha0 > 0.0) {
            return Err(Error::invalid("alpha0 must be positive"));
        }
        Ok(())
    }
}

/// Result of compositing one ray (color before background).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayComposite {
    pub color: [f64; 3],
    pub depth: f64,
    /// Π(1 − αᵢ) left after the last entry.
    pub transmittance: f64,
}

/// Front-to-back compositing of `(alpha, color, depth)` entries ordered by
/// nondecreasing depth. Opacities are clamped into `[0, ALPHA_MAX]`.
pub fn composite_ray(entries: &[(f64, [f64; 3], f64)]) -> Result<RayComposite> {
    if entries.windows(2).any(|w| w[1].2 < w[0].2) {
        return Err(Error::invalid("ray entries are not ordered by depth"));
    }
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut t = 1.0;
    for &(alpha, c, d) in entries {
        let a = alpha.clamp(0.0, ALPHA_MAX);
        let w = a * t;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * d;
        t *= 1.0 - a;
    }
    Ok(RayComposite {
        color,
        depth,
        transmittance: t,
    })
}

/// Compositing weights αᵢ Πⱼ<ᵢ(1 − αⱼ) and the residual transmittance.
pub fn blend_weights(alphas: &[f64]) -> (Vec<f64>, f64) {
    let mut t = 1.0;
    let w = alphas
        .iter()
        .map(|&a| {
            let a = a.clamp(0.0, ALPHA_MAX);
            let w = a * t;
            t *= 1.0 - a;
            w
        })
        .collect();
    (w, t)
}

#[derive(Debug, Clone, Copy)]
struct Fragment {
    splat: usize,
    depth: f64,
}

/// Per-pixel fragment lists sorted front to back (ties by splat index).
fn rasterize(cloud: &SplatCloud, camera: &CameraModel) -> Vec<Vec<Fragment>> {
    let (w, h) = (camera.width, camera.height);
    let mut lists: Vec<Vec<Fragment>> = vec![Vec::new(); w * h];
    for (i, s) in cloud.splats.iter().enumerate() {
        let Some((u, v, z)) = camera.project(&s.position) else {
            continue;
        };
        if z < Z_NEAR {
            continue;
        }
        let r = camera.fx * s.radius / z;
        let r2 = r * r;
        let c0 = (u - r).ceil().max(0.0);
        let c1 = (u + r).floor().min(w as f64 - 1.0);
        let r0 = (v - r).ceil().max(0.0);
        let r1 = (v + r).floor().min(h as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for row in r0 as usize..=r1 as usize {
            for col in c0 as usize..=c1 as usize {
                let (du, dv) = (col as f64 - u, row as f64 - v);
                if du * du + dv * dv <= r2 {
                    lists[row * w + col].push(Fragment { splat: i, depth: z });
                }
            }
        }
    }
    for l in &mut lists {
        l.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.splat.cmp(&b.splat)));
    }
    lists
}

fn entries(cloud: &SplatCloud, frags: &[Fragment]) -> Vec<(f64, [f64; 3], f64)> {
    frags
        .iter()
        .map(|f| {
            let s = &cloud.splats[f.splat];
            (s.alpha(), s.color, f.depth)
        })
        .collect()
}

/// Renders RGB (with background) and composited z-depth.
pub fn render(cloud: &SplatCloud, camera: &CameraModel) -> (RgbImage, Image) {
    let lists = rasterize(cloud, camera);
    let (w, h) = (camera.width, camera.height);
    let mut rgb = Grid::filled(w, h, cloud.background);
    let mut depth = Grid::filled(w, h, 0.0);
    for (i, frags) in lists.iter().enumerate() {
        let c = composite_ray(&entries(cloud, frags)).expect("fragments are sorted");
        let bg = cloud.background;
        rgb.as_mut_slice()[i] = [
            c.color[0] + c.transmittance * bg[0],
            c.color[1] + c.transmittance * bg[1],
            c.color[2] + c.transmittance * bg[2],
        ];
        depth.as_mut_slice()[i] = c.depth;
    }
    (rgb, depth)
}

/// Σ over pixels of the squared RGB error.
pub fn color_loss(rendered: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims(rendered, gt, "rendered vs ground-truth RGB")?;
    Ok(rendered
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum())
}

/// Per-pixel depth weight alpha0 · exp(−w σ), σ the fused standard deviation.
fn depth_weight(cfg: &LossConfig, variance: f64) -> f64 {
    cfg.alpha0 * (-cfg.w * variance.max(0.0).sqrt()).exp()
}

/// Uncertainty-weighted depth loss over supervised pixels.
pub fn depth_loss(rendered: &Image, fused: &FusedSupervision, cfg: &LossConfig) -> Result<f64> {
    check_dims(rendered, &fused.depth, "rendered vs supervision depth")?;
    let mut sum = 0.0;
    for i in 0..rendered.len() {
        if fused.provenance.as_slice()[i] == Provenance::None {
            continue;
        }
        let r = rendered.as_slice()[i] - fused.depth.as_slice()[i];
        sum += depth_weight(cfg, fused.variance.as_slice()[i]) * r * r;
    }
    Ok(sum)
}

pub fn decay_weight(lambda: f64, beta: f64) -> f64 {
    beta * lambda
}

/// One training view: target RGB, depth supervision and camera.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub rgb: RgbImage,
    pub supervision: FusedSupervision,
    pub camera: CameraModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub color: f64,
    pub depth: f64,
}

impl LossParts {
    pub fn total(&self, lambda: f64) -> f64 {
        if lambda == 0.0 {
            self.color
        } else {
            self.color + lambda * self.depth
        }
    }
}

/// Loss (and optionally its gradient, accumulated into `grad`) for one view.
/// With `lambda == 0` the supervision is never read.
fn view_loss(
    cloud: &SplatCloud,
    view: &TrainView,
    cfg: &LossConfig,
    lambda: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<LossParts> {
    let cam = &view.camera;
    let (w, h) = (cam.width, cam.height);
    if view.rgb.dims() != (w, h) {
        return Err(Error::DimensionMismatch("view RGB vs camera".into()));
    }
    let use_depth = lambda != 0.0;
    if use_depth {
        check_dims(&view.rgb, &view.supervision.depth, "view RGB vs supervision")?;
    }
    let forward = cam.forward();
    let lists = rasterize(cloud, cam);
    let bg = cloud.background;
    let mut parts = LossParts::default();
    let mut alphas = Vec::new();
    let mut suffix_c = Vec::new();
    let mut suffix_d = Vec::new();
    for (i, frags) in lists.iter().enumerate() {
        alphas.clear();
        alphas.extend(frags.iter().map(|f| cloud.splats[f.splat].alpha_and_slope()));
        let mut color = [0.0; 3];
        let mut depth = 0.0;
        let mut t = 1.0;
        for (f, (a, _)) in frags.iter().zip(&alphas) {
            let s = &cloud.splats[f.splat];
            let wgt = a * t;
            for k in 0..3 {
                color[k] += wgt * s.color[k];
            }
            depth += wgt * f.depth;
            t *= 1.0 - a;
        }
        for k in 0..3 {
            color[k] += t * bg[k];
        }
        let target = view.rgb.as_slice()[i];
        let mut g_color = [0.0; 3];
        for k in 0..3 {
            let r = color[k] - target[k];
            parts.color += r * r;
            g_color[k] = 2.0 * r;
        }
        let mut g_depth = 0.0;
        if use_depth && view.supervision.provenance.as_slice()[i] != Provenance::None {
            let weight = depth_weight(cfg, view.supervision.variance.as_slice()[i]);
            let r = depth - view.supervision.depth.as_slice()[i];
            parts.depth += weight * r * r;
            g_depth = lambda * weight * 2.0 * r;
        }
        let Some(grad) = grad.as_deref_mut() else {
            continue;
        };
        if frags.is_empty() {
            continue;
        }
        // Suffix terms R_i: what lies behind fragment i, normalized by the
        // transmittance in front of fragment i + 1. R_last = background.
        let n = frags.len();
        suffix_c.clear();
        suffix_c.resize(n, [0.0; 3]);
        suffix_d.clear();
        suffix_d.resize(n, 0.0);
        suffix_c[n - 1] = bg;
        for j in (0..n - 1).rev() {
            let s = &cloud.splats[frags[j + 1].splat];
            let a = alphas[j + 1].0;
            for k in 0..3 {
                suffix_c[j][k] = a * s.color[k] + (1.0 - a) * suffix_c[j + 1][k];
            }
            suffix_d[j] = a * frags[j + 1].depth + (1.0 - a) * suffix_d[j + 1];
        }
        let mut t = 1.0;
        for (j, f) in frags.iter().enumerate() {
            let s = &cloud.splats[f.splat];
            let (a, slope) = alphas[j];
            let wgt = a * t;
            let base = f.splat * PARAMS_PER_SPLAT;
            for k in 0..3 {
                grad[base + 3 + k] += g_color[k] * wgt;
            }
            let mut d_alpha = 0.0;
            for k in 0..3 {
                d_alpha += g_color[k] * t * (s.color[k] - suffix_c[j][k]);
            }
            d_alpha += g_depth * t * (f.depth - suffix_d[j]);
            grad[base + 6] += d_alpha * slope;
            let d_depth = g_depth * wgt;
            for k in 0..3 {
                grad[base + k] += d_depth * forward[k];
            }
            t *= 1.0 - a;
        }
    }
    Ok(parts)
}

/// Summed loss parts over all views.
pub fn total_loss(cloud: &SplatCloud, views: &[TrainView], cfg: &LossConfig, lambda: f64) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for v in views {
        let p = view_loss(cloud, v, cfg, lambda, None)?;
        acc.color += p.color;
        acc.depth += p.depth;
    }
    Ok(acc)
}

/// Loss parts and the gradient of `color + lambda · depth` in
/// [`SplatCloud::params`] layout.
pub fn loss_and_grad(
    cloud: &SplatCloud,
    views: &[TrainView],
    cfg: &LossConfig,
    lambda: f64,
) -> Result<(LossParts, Vec<f64>)> {
    let mut grad = vec![0.0; cloud.len() * PARAMS_PER_SPLAT];
    let mut acc = LossParts::default();
    for v in views {
        let p = view_loss(cloud, v, cfg, lambda, Some(&mut grad))?;
        acc.color += p.color;
        acc.depth += p.depth;
    }
    Ok((acc, grad))
}

/// Central-difference gradient of the total loss with step `h`.
pub fn numeric_gradient(cloud: &SplatCloud, view: &TrainView, cfg: &LossConfig, h: f64) -> Result<Vec<f64>> {
    let base = cloud.params();
    let mut probe = cloud.clone();
    let mut out = Vec::with_capacity(base.len());
    let views = std::slice::from_ref(view);
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + h;
        probe.set_params(&p);
        let plus = total_loss(&probe, views, cfg, cfg.lambda)?.total(cfg.lambda);
        p[k] = base[k] - h;
        probe.set_params(&p);
        let minus = total_loss(&probe, views, cfg, cfg.lambda)?.total(cfg.lambda);
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest relative error between the analytic gradient and central
/// differences (h = 1e-5), with denominators floored at 1e-8.
pub fn grad_check(cloud: &SplatCloud, view: &TrainView, cfg: &LossConfig) -> Result<f64> {
    let (_, analytic) = loss_and_grad(cloud, std::slice::from_ref(view), cfg, cfg.lambda)?;
    let numeric = numeric_gradient(cloud, view, cfg, 1e-5)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    /// Base gradient-descent step.
    pub step: f64,
    pub position_scale: f64,
    pub color_scale: f64,
    pub opacity_scale: f64,
    /// Step halvings tried (with and then without position updates) before
    /// an iteration is declared converged.
    pub max_backtracks: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            step: 1e-2,
            position_scale: 1.0,
            color_scale: 1.0,
            opacity_scale: 1.0,
            max_backtracks: 20,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub color_loss: f64,
    pub depth_loss: f64,
    pub lambda: f64,
}

/// Gradient descent on positions, colors and opacity logits.
///
/// Every iteration is one full pass over `views`. A step that would raise
/// the loss (at the current λ) is halved until it does not, so the loss never
/// increases; λ is multiplied by β after each iteration. Colors are kept in
/// [0, 1].
pub fn optimize(
    cloud: &SplatCloud,
    views: &[TrainView],
    cfg: &LossConfig,
    iters: usize,
    opts: &OptimizeOptions,
) -> Result<(SplatCloud, Vec<LogRow>)> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::invalid("optimization needs at least one view"));
    }
    let mut current = cloud.clone();
    let mut log = Vec::new();
    if iters == 0 {
        return Ok((current, log));
    }
    let scales = [
        opts.position_scale,
        opts.position_scale,
        opts.position_scale,
        opts.color_scale,
        opts.color_scale,
        opts.color_scale,
        opts.opacity_scale,
    ];
    let mut lambda = cfg.lambda;
    let mut trial = current.clone();
    for iter in 0..iters {
        let (parts, grad) = loss_and_grad(&current, views, cfg, lambda)?;
        let loss = parts.total(lambda);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: iter });
        }
        log.push(LogRow {
            iter,
            color_loss: parts.color,
            depth_loss: parts.depth,
            lambda,
        });
        let params = current.params();
        // Coverage and depth order make the loss piecewise smooth in
        // positions; if no step on all parameters descends, retry with
        // positions held fixed before giving up.
        let mut accepted = false;
        for freeze_positions in [false, true] {
            let mut step = opts.step;
            for _ in 0..=opts.max_backtracks {
                let next: Vec<f64> = params
                    .iter()
                    .zip(&grad)
                    .enumerate()
                    .map(|(k, (p, g))| {
                        let slot = k % PARAMS_PER_SPLAT;
                        if freeze_positions && slot < 3 {
                            return *p;
                        }
                        let v = p - step * scales[slot] * g;
                        if (3..6).contains(&slot) {
                            v.clamp(0.0, 1.0)
                        } else {
                            v
                        }
                    })
                    .collect();
                trial.set_params(&next);
                let new_loss = total_loss(&trial, views, cfg, lambda)?.total(lambda);
                if !new_loss.is_finite() {
                    return Err(Error::Diverged { iteration: iter });
                }
                if new_loss <= loss {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            log::debug!("no descent step found at iteration {iter}; stopping");
            break;
        }
        std::mem::swap(&mut current, &mut trial);
        lambda = decay_weight(lambda, cfg.beta);
    }
    Ok((current, log))
}

/// Training log as CSV: `iter,color_loss,depth_loss,lambda`.
pub fn encode_train_log(rows: &[LogRow]) -> String {
    let mut s = String::from("iter,color_loss,depth_loss,lambda\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iter, r.color_loss, r.depth_loss, r.lambda));
    }
    s
}

/// A depth pixel lifted to the world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackprojectedPoint {
    pub position: Point3<f64>,
    pub view: usize,
    pub col: usize,
    pub row: usize,
    /// World size of one pixel at this depth (z / fx).
    pub pixel_size: f64,
}

/// Every hit pixel of every image lifted to the world frame, view by view in
/// row-major order.
pub fn backproject_samples(images: &[DepthVarImage]) -> Vec<BackprojectedPoint> {
    let mut out = Vec::new();
    for (view, img) in images.iter().enumerate() {
        let cam = &img.camera;
        for row in 0..img.depth.height() {
            for col in 0..img.depth.width() {
                let z = *img.depth.get(col, row);
                if z > 0.0 && z.is_finite() {
                    out.push(BackprojectedPoint {
                        position: cam.backproject(col as f64, row as f64, z),
                        view,
                        col,
                        row,
                        pixel_size: z / cam.fx,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        log::warn!("backprojection found no hit pixels; initial cloud is empty");
    }
    out
}

pub fn backproject_init(images: &[DepthVarImage]) -> Vec<Point3<f64>> {
    backproject_samples(images).into_iter().map(|s| s.position).collect()
}

/// Options for turning backprojected samples into a splat cloud.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    /// Voxel pitch for thinning the samples (0 keeps all).
    pub voxel: f64,
    /// Splat radius in pixels at the sample's own depth. Below one pixel a
    /// splat covers only its own pixel center in its source view, which keeps
    /// silhouettes from bleeding onto the background in other views.
    pub radius_px: f64,
    pub opacity: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            voxel: 0.0,
            radius_px: 0.75,
            opacity: 0.9,
        }
    }
}

/// Builds splats from samples, coloring each from the RGB image of its view
/// when available (gray otherwise).
pub fn cloud_from_samples(
    samples: &[BackprojectedPoint],
    rgbs: Option<&[RgbImage]>,
    opts: &InitOptions,
    background: [f64; 3],
) -> SplatCloud {
    let positions: Vec<Point3<f64>> = samples.iter().map(|s| s.position).collect();
    let keep = voxel_downsample(&positions, opts.voxel);
    let splats = keep
        .into_iter()
        .map(|i| {
            let s = &samples[i];
            let color = rgbs
                .and_then(|r| r.get(s.view))
                .map_or([0.5; 3], |img| *img.get(s.col, s.row));
            Splat {
                position: s.position,
                color,
                opacity_logit: logit(opts.opacity),
                radius: (opts.radius_px * s.pixel_size).max(1e-9),
            }
        })
        .collect();
    SplatCloud { splats, background }
}

/// Camera z-axis direction, exposed for tests of position gradients.
pub fn optical_axis(camera: &CameraModel) -> Vec3 {
    camera.forward()
}
