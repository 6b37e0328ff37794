//! Scene configuration: flat `key = value` lines grouped under `[section]`
//! headers, `#` comments. Unknown sections or keys, duplicates and
//! out-of-range values are rejected with the offending line number.
//!
//! Lengths left unset in `[gpis]` and `[march]` are derived from the touch
//! extent when the model is fit.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use crate::align::AlignParams;
use crate::dataset::SimulateConfig;
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::gpis::{ConditioningOptions, KernelParams, DEFAULT_POINT_CAP};
use crate::sdfrender::MarchParams;
use crate::splat::{InitOptions, LossConfig, OptimizeOptions};
use crate::touchsim::{MonocularModel, NoiseModel, ShapeKind};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GpisConfig {
    pub rho: Option<f64>,
    pub sigma: Option<f64>,
    pub noise: Option<f64>,
    pub prior_mean: Option<f64>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub n_slices: Option<usize>,
    pub voxel: Option<f64>,
    pub point_cap: Option<usize>,
}

impl GpisConfig {
    pub fn kernel(&self, r_b: f64) -> KernelParams {
        let d = KernelParams::for_radius(r_b);
        KernelParams {
            rho: self.rho.unwrap_or(d.rho),
            sigma: self.sigma.unwrap_or(d.sigma),
            noise: self.noise.unwrap_or(d.noise),
            prior_mean: self.prior_mean.unwrap_or(d.prior_mean),
        }
    }

    pub fn conditioning(&self, r_b: f64) -> ConditioningOptions {
        let d = ConditioningOptions::for_radius(r_b);
        ConditioningOptions {
            delta: self.delta.unwrap_or(d.delta),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            n_slices: self.n_slices.unwrap_or(d.n_slices),
            voxel: self.voxel.unwrap_or(d.voxel),
        }
    }

    pub fn cap(&self) -> usize {
        self.point_cap.unwrap_or(DEFAULT_POINT_CAP)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarchConfig {
    pub alpha: Option<f64>,
    pub dt_min: Option<f64>,
    pub hit_tol: Option<f64>,
    pub max_steps: Option<usize>,
    pub t_max: Option<f64>,
    pub margin_frac: Option<f64>,
}

impl MarchConfig {
    pub fn params(&self, r_b: f64) -> MarchParams {
        let d = MarchParams::for_radius(r_b);
        MarchParams {
            alpha: self.alpha.unwrap_or(d.alpha),
            dt_min: self.dt_min.unwrap_or(d.dt_min),
            hit_tol: self.hit_tol.unwrap_or(d.hit_tol),
            max_steps: self.max_steps.unwrap_or(d.max_steps),
            t_max: self.t_max.unwrap_or(d.t_max),
            margin_frac: self.margin_frac.unwrap_or(d.margin_frac),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iters: usize,
    pub optimizer: OptimizeOptions,
    pub init: InitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            optimizer: OptimizeOptions::default(),
            init: InitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// The configuration file itself.
    pub path: PathBuf,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub simulate: Option<SimulateConfig>,
    pub gpis: GpisConfig,
    pub march: MarchConfig,
    pub align: AlignParams,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub icp_iters: usize,
}

impl SceneConfig {
    /// Moves the output directory; a simulated dataset that lived in the
    /// old output directory moves along with it.
    pub fn set_out(&mut self, out: PathBuf) {
        if self.simulate.is_some() && self.dataset == self.out.join("dataset") {
            self.dataset = out.join("dataset");
        }
        self.out = out;
    }
}

struct Entry {
    value: String,
    line: usize,
    used: bool,
}

/// Parsed document with use tracking, so leftovers can be reported.
struct Doc {
    path: PathBuf,
    sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)>,
}

const SECTIONS: [&str; 8] = ["scene", "simulate", "gpis", "march", "align", "loss", "train", "eval"];

impl Doc {
    fn parse(path: &Path, text: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Config {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut sections: BTreeMap<String, (usize, BTreeMap<String, Entry>)> = BTreeMap::new();
        let mut current = "scene".to_string();
        sections.insert(current.clone(), (0, BTreeMap::new()));
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(line, format!("unknown section [{name}]")));
                }
                match sections.get_mut(name) {
                    Some((l, map)) if *l > 0 || !map.is_empty() => {
                        return Err(err(line, format!("duplicate section [{name}]")))
                    }
                    Some((l, _)) => *l = line,
                    None => {
                        sections.insert(name.to_string(), (line, BTreeMap::new()));
                    }
                }
                current = name.to_string();
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(line, format!("expected 'key = value', found '{content}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(err(line, "empty key or value".into()));
            }
            let map = &mut sections.get_mut(&current).expect("section exists").1;
            if let Some(prev) = map.get(key) {
                return Err(err(
                    line,
                    format!("duplicate key '{key}' in [{current}] (first set on line {})", prev.line),
                ));
            }
            map.insert(
                key.to_string(),
                Entry {
                    value: value.to_string(),
                    line,
                    used: false,
                },
            );
        }
        Ok(Self {
            path: path.to_path_buf(),
            sections,
        })
    }

    fn has(&self, section: &str) -> bool {
        self.sections.get(section).is_some_and(|(l, m)| *l > 0 || !m.is_empty())
    }

    fn err(&self, line: usize, message: String) -> Error {
        Error::Config {
            path: self.path.clone(),
            line,
            message,
        }
    }

    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        let e = self.sections.get_mut(section)?.1.get_mut(key)?;
        e.used = true;
        Some((e.value.clone(), e.line))
    }

    fn parsed<T: std::str::FromStr>(&mut self, section: &str, key: &str, what: &str) -> Result<Option<(T, usize)>> {
        let Some((v, line)) = self.take(section, key) else {
            return Ok(None);
        };
        v.parse::<T>()
            .map(|x| Some((x, line)))
            .map_err(|_| self.err(line, format!("{key}: '{v}' is not {what}")))
    }

    /// Optional float; when present it must lie in `range`, and if
    /// `exclusive_low` the lower bound itself is rejected.
    fn float(
        &mut self,
        section: &str,
        key: &str,
        range: RangeInclusive<f64>,
        exclusive_low: bool,
    ) -> Result<Option<f64>> {
        let Some((x, line)) = self.parsed::<f64>(section, key, "a number")? else {
            return Ok(None);
        };
        let low_ok = if exclusive_low { x > *range.start() } else { x >= *range.start() };
        if !(low_ok && x <= *range.end()) || x.is_nan() {
            let open = if exclusive_low { "(" } else { "[" };
            return Err(self.err(
                line,
                format!("{key} = {x} is out of range {open}{}, {}]", range.start(), range.end()),
            ));
        }
        Ok(Some(x))
    }

    fn positive(&mut self, section: &str, key: &str) -> Result<Option<f64>> {
        self.float(section, key, 0.0..=f64::INFINITY, true)
    }

    fn nonneg(&mut self, section: &str, key: &str) -> Result<Option<f64>> {
        self.float(section, key, 0.0..=f64::INFINITY, false)
    }

    fn count(&mut self, section: &str, key: &str, min: usize) -> Result<Option<usize>> {
        let Some((x, line)) = self.parsed::<usize>(section, key, "a nonnegative integer")? else {
            return Ok(None);
        };
        if x < min {
            return Err(self.err(line, format!("{key} = {x} must be at least {min}")));
        }
        Ok(Some(x))
    }

    fn boolean(&mut self, section: &str, key: &str) -> Result<Option<bool>> {
        Ok(self.parsed::<bool>(section, key, "true or false")?.map(|(b, _)| b))
    }

    fn finish(&self) -> Result<()> {
        for (name, (_, map)) in &self.sections {
            if let Some((key, e)) = map.iter().filter(|(_, e)| !e.used).min_by_key(|(_, e)| e.line) {
                return Err(self.err(e.line, format!("unknown key '{key}' in [{name}]")));
            }
        }
        Ok(())
    }
}

fn parse_simulate(doc: &mut Doc) -> Result<SimulateConfig> {
    const S: &str = "simulate";
    let d = SimulateConfig::default();
    let shape_name = doc.take(S, "shape");
    let shape = match shape_name.as_ref().map(|(s, l)| (s.as_str(), *l)) {
        None | Some(("sphere", _)) => ShapeKind::Sphere {
            radius: doc.positive(S, "radius")?.unwrap_or(1.0),
        },
        Some(("box", line)) => {
            let Some((v, l)) = doc.take(S, "half_extents") else {
                return Err(doc.err(line, "box shape needs half_extents = x y z".into()));
            };
            let h: Vec<f64> = v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if h.len() != 3 || h.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(doc.err(l, "half_extents needs three positive numbers".into()));
            }
            ShapeKind::Box {
                half_extents: Vec3::new(h[0], h[1], h[2]),
            }
        }
        Some(("torus", line)) => {
            let major = doc.positive(S, "major")?;
            let minor = doc.positive(S, "minor")?;
            match (major, minor) {
                (Some(major), Some(minor)) => ShapeKind::Torus { major, minor },
                _ => return Err(doc.err(line, "torus shape needs major and minor".into())),
            }
        }
        Some((other, line)) => return Err(doc.err(line, format!("unknown shape '{other}' (sphere, box, torus)"))),
    };
    let noise = NoiseModel {
        point_sigma: doc.nonneg(S, "point_sigma")?.unwrap_or(d.noise.point_sigma),
        normal_sigma: doc.nonneg(S, "normal_sigma")?.unwrap_or(d.noise.normal_sigma),
        sparse_a: doc.nonneg(S, "sparse_a")?.unwrap_or(d.noise.sparse_a),
    };
    let mono = MonocularModel {
        scale: doc.positive(S, "mono_scale")?.unwrap_or(d.mono.scale),
        offset: doc.float(S, "mono_offset", f64::MIN..=f64::MAX, false)?.unwrap_or(d.mono.offset),
        bias_amp: doc.float(S, "mono_bias", 0.0..=0.5, false)?.unwrap_or(d.mono.bias_amp),
        pixel_sigma: doc.nonneg(S, "mono_sigma")?.unwrap_or(d.mono.pixel_sigma),
    };
    Ok(SimulateConfig {
        shape,
        table: doc.boolean(S, "table")?.unwrap_or(d.table),
        touches: doc.count(S, "touches", 1)?.unwrap_or(d.touches),
        patch_radius: doc.nonneg(S, "patch_radius")?.unwrap_or(d.patch_radius),
        points_per_touch: doc.count(S, "points_per_touch", 1)?.unwrap_or(d.points_per_touch),
        noise,
        sparse_fraction: doc.float(S, "sparse_fraction", 0.0..=0.01, true)?.unwrap_or(d.sparse_fraction),
        mono,
        views: doc.count(S, "views", 1)?.unwrap_or(d.views),
        width: doc.count(S, "width", 1)?.unwrap_or(d.width),
        height: doc.count(S, "height", 1)?.unwrap_or(d.height),
        focal: doc.positive(S, "focal")?.unwrap_or(d.focal),
        camera_distance: doc.positive(S, "camera_distance")?.unwrap_or(d.camera_distance),
        camera_elevation: doc
            .float(S, "camera_elevation", -1.5..=1.5, false)?
            .unwrap_or(d.camera_elevation),
    })
}

/// Parses `text` as if read from `path`; relative paths in the file are
/// resolved against the file's directory.
pub fn parse_config(path: &Path, text: &str) -> Result<SceneConfig> {
    let mut doc = Doc::parse(path, text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: String| {
        let p = PathBuf::from(p);
        if p.is_absolute() { p } else { base.join(p) }
    };

    let seed = doc.parsed::<u64>("scene", "seed", "a nonnegative integer")?.map_or(0, |(s, _)| s);
    let out = resolve(doc.take("scene", "out").map_or_else(|| "out".to_string(), |(v, _)| v));
    let dataset_entry = doc.take("scene", "dataset");
    let simulate = if doc.has("simulate") { Some(parse_simulate(&mut doc)?) } else { None };
    let dataset = match dataset_entry {
        Some((v, line)) => {
            let p = resolve(v);
            if simulate.is_none() && !p.is_dir() {
                return Err(doc.err(line, format!("dataset directory {} does not exist", p.display())));
            }
            p
        }
        None if simulate.is_some() => out.join("dataset"),
        None => return Err(doc.err(1, "set dataset = <dir> or add a [simulate] section".into())),
    };

    let gpis = GpisConfig {
        rho: doc.positive("gpis", "rho")?,
        sigma: doc.positive("gpis", "sigma")?,
        noise: doc.positive("gpis", "noise")?,
        prior_mean: doc.positive("gpis", "prior_mean")?,
        delta: doc.positive("gpis", "delta")?,
        epsilon: doc.positive("gpis", "epsilon")?,
        n_slices: doc.count("gpis", "n_slices", 1)?,
        voxel: doc.nonneg("gpis", "voxel")?,
        point_cap: doc.count("gpis", "point_cap", 1)?,
    };
    let march = MarchConfig {
        alpha: doc.float("march", "alpha", 0.0..=1.0, true)?,
        dt_min: doc.positive("march", "dt_min")?,
        hit_tol: doc.positive("march", "hit_tol")?,
        max_steps: doc.count("march", "max_steps", 1)?,
        t_max: doc.positive("march", "t_max")?,
        margin_frac: doc.nonneg("march", "margin_frac")?,
    };
    let ad = AlignParams::default();
    let align = AlignParams {
        k: doc.nonneg("align", "k")?.unwrap_or(ad.k),
        c: doc.positive("align", "c")?.unwrap_or(ad.c),
        max_gap: doc.positive("align", "max_gap")?.unwrap_or(ad.max_gap),
    };
    let ld = LossConfig::default();
    let loss = LossConfig {
        lambda: doc.nonneg("loss", "lambda")?.unwrap_or(ld.lambda),
        w: doc.nonneg("loss", "w")?.unwrap_or(ld.w),
        beta: doc.float("loss", "beta", 0.0..=1.0, true)?.unwrap_or(ld.beta),
        alpha0: doc.positive("loss", "alpha0")?.unwrap_or(ld.alpha0),
    };
    let td = TrainConfig::default();
    let train = TrainConfig {
        iters: doc.count("train", "iters", 0)?.unwrap_or(td.iters),
        optimizer: OptimizeOptions {
            step: doc.positive("train", "step")?.unwrap_or(td.optimizer.step),
            position_scale: doc.nonneg("train", "position_scale")?.unwrap_or(td.optimizer.position_scale),
            color_scale: doc.nonneg("train", "color_scale")?.unwrap_or(td.optimizer.color_scale),
            opacity_scale: doc.nonneg("train", "opacity_scale")?.unwrap_or(td.optimizer.opacity_scale),
            max_backtracks: doc.count("train", "max_backtracks", 0)?.unwrap_or(td.optimizer.max_backtracks),
        },
        init: InitOptions {
            voxel: doc.nonneg("train", "init_voxel")?.unwrap_or(td.init.voxel),
            radius_px: doc.positive("train", "radius_px")?.unwrap_or(td.init.radius_px),
            opacity: doc.float("train", "init_opacity", 0.0..=0.999, true)?.unwrap_or(td.init.opacity),
        },
    };
    let icp_iters = doc.count("eval", "icp_iters", 0)?.unwrap_or(20);
    doc.finish()?;
    Ok(SceneConfig {
        path: path.to_path_buf(),
        dataset,
        out,
        seed,
        simulate,
        gpis,
        march,
        align,
        loss,
        train,
        icp_iters,
    })
}

pub fn validate_config(path: &Path) -> Result<SceneConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        line: 0,
        message: format!("cannot read config: {e}"),
    })?;
    parse_config(path, &text)
}
