//! Synthetic scene datasets: an analytic object (optionally resting on a
//! table) seen by a ring of cameras, with touches, sparse depth, monocular
//! depth, ground truth and RGB.
//!
//! Directory layout:
//!
//! ```text
//! scene.cfg            simulation parameters and seed
//! cameras.txt          one line per view
//! touches/NNNN.ply
//! sparse/<view>.txt
//! mono/<view>.pfm      relative (unaligned) monocular depth
//! gt_depth/<view>.pfm  scene z-depth, 0 = miss
//! mask/<view>.pgm      object mask (255 = object)
//! rgb/<view>.ppm
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::align::SparseDepth;
use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::gpis::TouchReading;
use crate::image::{DepthVarImage, Grid, Image, RgbImage};
use crate::io::{self, NamedCamera};
use crate::touchsim::{
    make_sparse_depth, object_mask, render_rgb, render_scene_depth, render_shape_depth, sample_touches,
    synth_monocular, AnalyticScene, AnalyticShape, MonocularModel, NoiseModel, ShapeKind,
};

const OBJECT_COLOR: [f64; 3] = [0.85, 0.35, 0.2];
const TABLE_COLOR: [f64; 3] = [0.55, 0.5, 0.45];
const BACKGROUND: [f64; 3] = [0.1, 0.12, 0.18];
const TABLE_THICKNESS: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateConfig {
    pub shape: ShapeKind,
    /// Adds a slab under the object whose top touches the object's extent.
    pub table: bool,
    pub touches: usize,
    pub patch_radius: f64,
    pub points_per_touch: usize,
    pub noise: NoiseModel,
    pub sparse_fraction: f64,
    pub mono: MonocularModel,
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub camera_distance: f64,
    /// Camera elevation above the object's horizontal plane, radians.
    pub camera_elevation: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            shape: ShapeKind::Sphere { radius: 1.0 },
            table: true,
            touches: 200,
            patch_radius: 0.15,
            points_per_touch: 64,
            noise: NoiseModel::default(),
            sparse_fraction: 0.01,
            mono: MonocularModel::default(),
            views: 5,
            width: 48,
            height: 48,
            focal: 48.0,
            camera_distance: 4.0,
            camera_elevation: 0.5,
        }
    }
}

impl SimulateConfig {
    pub fn object(&self) -> Result<AnalyticShape> {
        AnalyticShape::new(self.shape, crate::geom::Pose::identity())
    }

    pub fn scene(&self) -> Result<AnalyticScene> {
        let object = self.object()?;
        let mut objects = vec![(object, OBJECT_COLOR)];
        if self.table {
            let e = object.extent();
            let table = AnalyticShape::cuboid(Vec3::new(4.0 * e, 4.0 * e, TABLE_THICKNESS))?
                .translated(Vec3::new(0.0, 0.0, self.table_top() - TABLE_THICKNESS));
            objects.push((table, TABLE_COLOR));
        }
        Ok(AnalyticScene {
            objects,
            background: BACKGROUND,
        })
    }

    /// Height of the table's top face: the lowest point of the object.
    fn table_top(&self) -> f64 {
        match self.shape {
            ShapeKind::Sphere { radius } => -radius,
            ShapeKind::Box { half_extents } => -half_extents.z,
            ShapeKind::Torus { minor, .. } => -minor,
        }
    }

    pub fn cameras(&self) -> Result<Vec<NamedCamera>> {
        let (ce, se) = (self.camera_elevation.cos(), self.camera_elevation.sin());
        (0..self.views)
            .map(|i| {
                let th = 2.0 * PI * i as f64 / self.views as f64 + 0.25 * PI;
                let d = self.camera_distance;
                let eye = Point3::new(d * th.cos() * ce, d * th.sin() * ce, d * se);
                let camera =
                    CameraModel::look_at(self.focal, self.width, self.height, eye, Point3::origin(), Vec3::z())?;
                Ok(NamedCamera {
                    name: format!("view_{i:03}"),
                    camera,
                })
            })
            .collect()
    }

    pub fn to_text(&self, seed: u64) -> String {
        let mut s = String::new();
        let shape = match self.shape {
            ShapeKind::Sphere { radius } => format!("shape = sphere\nradius = {radius}\n"),
            ShapeKind::Box { half_extents: h } => format!("shape = box\nhalf_extents = {} {} {}\n", h.x, h.y, h.z),
            ShapeKind::Torus { major, minor } => format!("shape = torus\nmajor = {major}\nminor = {minor}\n"),
        };
        s.push_str(&shape);
        let n = &self.noise;
        let m = &self.mono;
        let _ = write!(
            s,
            "seed = {seed}\ntable = {}\ntouches = {}\npatch_radius = {}\npoints_per_touch = {}\n\
             point_sigma = {}\nnormal_sigma = {}\nsparse_a = {}\nsparse_fraction = {}\n\
             mono_scale = {}\nmono_offset = {}\nmono_bias = {}\nmono_sigma = {}\n\
             views = {}\nwidth = {}\nheight = {}\nfocal = {}\ncamera_distance = {}\ncamera_elevation = {}\n",
            self.table,
            self.touches,
            self.patch_radius,
            self.points_per_touch,
            n.point_sigma,
            n.normal_sigma,
            n.sparse_a,
            self.sparse_fraction,
            m.scale,
            m.offset,
            m.bias_amp,
            m.pixel_sigma,
            self.views,
            self.width,
            self.height,
            self.focal,
            self.camera_distance,
            self.camera_elevation,
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct ViewData {
    pub name: String,
    pub camera: CameraModel,
    pub rgb: RgbImage,
    /// Scene depth (zero variance on hits).
    pub gt_depth: DepthVarImage,
    pub object_mask: Grid<bool>,
    pub sparse: SparseDepth,
    pub mono: Image,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub touches: Vec<TouchReading>,
    pub views: Vec<ViewData>,
}

/// Derives an independent stream seed for one generator.
fn sub_seed(seed: u64, tag: u64, index: usize) -> u64 {
    seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn simulate(cfg: &SimulateConfig, seed: u64) -> Result<Dataset> {
    let object = cfg.object()?;
    let scene = cfg.scene()?;
    let touches = sample_touches(&object, cfg.touches, cfg.patch_radius, cfg.points_per_touch, &cfg.noise, seed)?;
    let light = Vec3::new(0.3, -0.4, 0.85);
    let views = cfg
        .cameras()?
        .into_iter()
        .enumerate()
        .map(|(i, nc)| {
            let gt = render_scene_depth(&scene, &nc.camera)?;
            let obj = render_shape_depth(&object, &nc.camera)?;
            let sparse = make_sparse_depth(&gt, cfg.sparse_fraction, &cfg.noise, sub_seed(seed, 1, i))?;
            let mono = synth_monocular(&gt, &cfg.mono, sub_seed(seed, 2, i))?;
            Ok(ViewData {
                rgb: render_rgb(&scene, &nc.camera, &light)?,
                object_mask: object_mask(&obj, &gt),
                name: nc.name,
                camera: nc.camera,
                gt_depth: gt,
                sparse,
                mono,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { touches, views })
}

impl Dataset {
    pub fn cameras(&self) -> Vec<NamedCamera> {
        self.views
            .iter()
            .map(|v| NamedCamera {
                name: v.name.clone(),
                camera: v.camera.clone(),
            })
            .collect()
    }

    /// Writes the dataset layout and returns the files written, in order.
    pub fn write(&self, dir: &Path, scene_cfg: &str) -> Result<Vec<PathBuf>> {
        let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
            (dir.join("scene.cfg"), scene_cfg.as_bytes().to_vec()),
            (dir.join("cameras.txt"), io::encode_cameras(&self.cameras()).into_bytes()),
        ];
        for (i, t) in self.touches.iter().enumerate() {
            files.push((dir.join(format!("touches/{i:04}.ply")), io::encode_touch_ply(t).into_bytes()));
        }
        for v in &self.views {
            let n = &v.name;
            let mask = v.object_mask.map(|&m| if m { 255u8 } else { 0 });
            files.push((view_file(dir, "sparse", n), io::encode_sparse(&v.sparse).into_bytes()));
            files.push((view_file(dir, "mono", n), io::encode_pfm(&v.mono)));
            files.push((view_file(dir, "gt_depth", n), io::encode_pfm(&v.gt_depth.depth)));
            files.push((view_file(dir, "mask", n), io::encode_pgm(&mask)));
            files.push((view_file(dir, "rgb", n), io::encode_ppm(&v.rgb)));
        }
        for (path, bytes) in &files {
            io::write_atomic(path, bytes)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

/// Paths of the per-view files a stage reads.
pub fn view_file(dir: &Path, kind: &str, name: &str) -> PathBuf {
    let ext = match kind {
        "sparse" => "txt",
        "mask" => "pgm",
        "rgb" => "ppm",
        _ => "pfm",
    };
    dir.join(kind).join(format!("{name}.{ext}"))
}

/// Ground-truth depth read back as a hit/miss image (zero variance on hits).
pub fn read_gt_depth(dir: &Path, view: &NamedCamera) -> Result<DepthVarImage> {
    let path = view_file(dir, "gt_depth", &view.name);
    let depth = io::read_pfm(&path)?;
    check_size(&path, &depth, &view.camera)?;
    let mut img = DepthVarImage::all_miss(view.camera.clone());
    for (i, &d) in depth.as_slice().iter().enumerate() {
        if d > 0.0 && d.is_finite() {
            img.depth.as_mut_slice()[i] = d;
            img.variance.as_mut_slice()[i] = 0.0;
        }
    }
    Ok(img)
}

pub fn read_mask(dir: &Path, view: &NamedCamera) -> Result<Grid<bool>> {
    let path = view_file(dir, "mask", &view.name);
    let g = io::decode_pgm(&path, &io::read_bytes(&path)?)?;
    check_size(&path, &g, &view.camera)?;
    Ok(g.map(|&v| v >= 128))
}

pub fn check_size<T>(path: &Path, img: &Grid<T>, cam: &CameraModel) -> Result<()> {
    if img.dims() != (cam.width, cam.height) {
        return Err(Error::format(
            path,
            format!("image is {}x{}, camera expects {}x{}", img.width(), img.height(), cam.width, cam.height),
        ));
    }
    Ok(())
}
