//! Evaluation metrics: depth MSE, PSNR, Chamfer/Hausdorff distances and a
//! Chamfer-refined rigid alignment.

use nalgebra::{Matrix3, Point3, Rotation3, Translation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geom::{centroid, Pose};
use crate::image::{check_dims, DepthVarImage, Grid, Image, RgbImage};

/// Mean squared depth error over GT hit pixels (restricted to `mask` when given).
pub fn depth_mse(pred: &Image, gt: &DepthVarImage, mask: Option<&Grid<bool>>) -> Result<f64> {
    check_dims(pred, &gt.depth, "prediction vs ground truth")?;
    if let Some(m) = mask {
        check_dims(pred, m, "prediction vs mask")?;
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        let g = gt.depth.as_slice()[i];
        if g <= 0.0 || mask.is_some_and(|m| !m.as_slice()[i]) {
            continue;
        }
        sum += (pred.as_slice()[i] - g).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("no valid pixels for depth MSE"));
    }
    Ok(sum / count as f64)
}

pub fn rgb_mse(img: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_dims(img, gt, "image vs ground truth")?;
    if img.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let sum: f64 = img
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (3 * img.len()) as f64)
}

/// 10·log10(1 / MSE) for images in [0, 1]; identical images give +∞.
pub fn psnr(img: &RgbImage, gt: &RgbImage) -> Result<f64> {
    let mse = rgb_mse(img, gt)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Exact nearest-neighbour index over a static point set.
pub struct KdTree<'a> {
    points: &'a [Point3<f64>],
    nodes: Vec<Node>,
    root: Option<usize>,
}

struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = Self {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let (lo, hi) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut hi[1..], depth + 1);
        self.nodes.push(Node {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    /// `(index, squared distance)` of the closest point.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(self.root, q, &mut best);
        self.root.map(|_| best)
    }

    fn search(&self, node: Option<usize>, q: &Point3<f64>, best: &mut (usize, f64)) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.point];
        let d2 = (p - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && node.point < best.0) {
            *best = (node.point, d2);
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, q, best);
        if diff * diff <= best.1 {
            self.search(far, q, best);
        }
    }
}

/// Nearest-neighbour distance from each point of `from` to `to`.
fn directed_distances(from: &[Point3<f64>], to: &[Point3<f64>]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.iter()
        .map(|p| tree.nearest(p).expect("nonempty target").1.sqrt())
        .collect()
}

fn check_clouds(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("point clouds must be nonempty"));
    }
    Ok(())
}

/// Symmetric Chamfer distance: mean of the two directed mean NN distances.
pub fn chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    check_clouds(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(directed_distances(a, b)) + mean(directed_distances(b, a))))
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(a: &[Point3<f64>], b: &[Point3<f64>]) -> Result<f64> {
    check_clouds(a, b)?;
    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(max(directed_distances(a, b)).max(max(directed_distances(b, a))))
}

fn transform_all(pose: &Pose, pts: &[Point3<f64>]) -> Vec<Point3<f64>> {
    pts.iter().map(|p| pose.transform_point(p)).collect()
}

/// Kabsch: rigid transform minimizing Σ |T(src_i) − dst_i|².
fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Pose {
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = cd.coords - rot * cs.coords;
    Pose::from_parts(Translation3::from(t), rot)
}

/// Rigid transform taking `a` onto `b`.
///
/// Starts from the centroid-matching translation and refines it with ICP
/// iterations, keeping an update only if it lowers the Chamfer distance, so
/// the result is never worse than the initialization.
pub fn align_clouds(a: &[Point3<f64>], b: &[Point3<f64>], iters: usize) -> Result<Pose> {
    check_clouds(a, b)?;
    let init = Pose::from_parts(
        Translation3::from(centroid(b) - centroid(a)),
        UnitQuaternion::identity(),
    );
    let mut best = init;
    let mut best_cd = chamfer(&transform_all(&best, a), b)?;
    let tree = KdTree::new(b);
    for _ in 0..iters {
        let moved = transform_all(&best, a);
        let matched: Vec<Point3<f64>> = moved
            .iter()
            .map(|p| b[tree.nearest(p).expect("nonempty").0])
            .collect();
        let step = kabsch(&moved, &matched);
        let candidate = step * best;
        let cd = chamfer(&transform_all(&candidate, a), b)?;
        if cd < best_cd {
            best = candidate;
            best_cd = cd;
        } else {
            break;
        }
    }
    Ok(best)
}

pub fn apply(pose: &Pose, pts: &[Point3<f64>]) -> Vec<Point3<f64>> {
    transform_all(pose, pts)
}

/// Per-view and aggregate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub psnr: f64,
    pub d_mse: f64,
    pub d_mse_o: f64,
    pub chamfer: f64,
    pub hausdorff: f64,
    pub views: Vec<ViewScores>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewScores {
    pub name: String,
    pub psnr: f64,
    pub d_mse: f64,
    pub d_mse_o: f64,
}

impl EvalReport {
    /// Aggregates per-view scores by their mean.
    pub fn from_views(views: Vec<ViewScores>, chamfer: f64, hausdorff: f64) -> Self {
        let n = views.len().max(1) as f64;
        let mean = |f: fn(&ViewScores) -> f64| views.iter().map(f).sum::<f64>() / n;
        Self {
            psnr: mean(|v| v.psnr),
            d_mse: mean(|v| v.d_mse),
            d_mse_o: mean(|v| v.d_mse_o),
            chamfer,
            hausdorff,
            views,
        }
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "psnr = {}\nd_mse = {}\nd_mse_o = {}\nchamfer = {}\nhausdorff = {}\n",
            self.psnr, self.d_mse, self.d_mse_o, self.chamfer, self.hausdorff
        );
        for v in &self.views {
            s.push_str(&format!(
                "\n[{}]\npsnr = {}\nd_mse = {}\nd_mse_o = {}\n",
                v.name, v.psnr, v.d_mse, v.d_mse_o
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,d_mse,d_mse_o,chamfer,hausdorff\n");
        for v in &self.views {
            s.push_str(&format!("{},{},{},{},,\n", v.name, v.psnr, v.d_mse, v.d_mse_o));
        }
        s.push_str(&format!(
            "mean,{},{},{},{},{}\n",
            self.psnr, self.d_mse, self.d_mse_o, self.chamfer, self.hausdorff
        ));
        s
    }
}
