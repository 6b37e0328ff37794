//! Small geometric helpers shared across modules.

use std::collections::HashMap;

use nalgebra::{Isometry3, Point3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Pose = Isometry3<f64>;

pub fn centroid(points: &[Point3<f64>]) -> Point3<f64> {
    let n = points.len().max(1) as f64;
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p.coords);
    Point3::from(sum / n)
}

/// Largest distance from `center` to any of `points` (0 for an empty slice).
pub fn max_distance(center: &Point3<f64>, points: &[Point3<f64>]) -> f64 {
    points
        .iter()
        .map(|p| (p - center).norm())
        .fold(0.0, f64::max)
}

fn voxel_key(p: &Point3<f64>, pitch: f64) -> (i64, i64, i64) {
    (
        (p.x / pitch).floor() as i64,
        (p.y / pitch).floor() as i64,
        (p.z / pitch).floor() as i64,
    )
}

/// Greedy voxel thinning.
///
/// Visits points in input order and keeps a point only if its voxel (pitch
/// `pitch`) holds no kept point yet and no kept point lies closer than
/// `pitch / 2`. Returns indices of kept points in input order. At most one
/// point survives per voxel and survivors are pairwise at least `pitch / 2`
/// apart.
pub fn voxel_downsample(points: &[Point3<f64>], pitch: f64) -> Vec<usize> {
    if !(pitch > 0.0) {
        return (0..points.len()).collect();
    }
    let min_sep2 = 0.25 * pitch * pitch;
    let mut grid: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = voxel_key(p, pitch);
        if grid.contains_key(&key) {
            continue;
        }
        let mut clear = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(&j) = grid.get(&(key.0 + dx, key.1 + dy, key.2 + dz)) {
                        if (points[j] - p).norm_squared() < min_sep2 {
                            clear = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if clear {
            grid.insert(key, i);
            kept.push(i);
        }
    }
    kept
}

/// Any unit vector orthogonal to `n` and a second completing the right-handed frame.
pub fn tangent_frame(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}
