//! On-disk stage orchestration.
//!
//! Each stage reads files, writes files, and records in `manifest.txt` a
//! SHA-256 over its inputs (paths, bytes and the parameters it uses) plus a
//! hash per output. A stage whose input hash and outputs are unchanged is
//! skipped. Paths in the manifest are relative to the output directory or
//! the dataset directory, so two runs in different places produce identical
//! bytes. A `.lock` file keeps concurrent runs out of the same directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::align::AlignedVision;
use crate::config::SceneConfig;
use crate::dataset::{self, check_size, read_gt_depth, read_mask, view_file};
use crate::error::{Error, Result};
use crate::gpis::GpisModel;
use crate::image::DepthVarImage;
use crate::io::{self, NamedCamera};
use crate::splat::{encode_train_log, optimize, TrainView};
use crate::workflow::{self, EvalView};

const VERSION: &str = env!("CARGO_PKG_VERSION");
const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    GpisFit,
    GpisRender,
    Align,
    Fuse,
    InitPoints,
    Train,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Simulate,
        Stage::GpisFit,
        Stage::GpisRender,
        Stage::Align,
        Stage::Fuse,
        Stage::InitPoints,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::GpisFit => "gpis-fit",
            Stage::GpisRender => "gpis-render",
            Stage::Align => "align",
            Stage::Fuse => "fuse",
            Stage::InitPoints => "init-points",
            Stage::Train => "train",
            Stage::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|st| st.name() == s.trim())
    }

    /// Parses a comma-separated list such as `gpis-fit,gpis-render`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| {
                Self::parse(t).ok_or_else(|| {
                    let names: Vec<_> = Self::ALL.iter().map(|s| s.name()).collect();
                    Error::invalid(format!("unknown stage '{}' (expected one of {})", t.trim(), names.join(", ")))
                })
            })
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PipelineRun {
    pub stages: Vec<(Stage, Outcome)>,
}

impl PipelineRun {
    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|(_, o)| *o == Outcome::Skipped)
    }
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct StageRecord {
    inputs: String,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Default)]
struct Manifest {
    stages: BTreeMap<Stage, StageRecord>,
}

impl Manifest {
    fn parse(text: &str) -> Self {
        let mut m = Manifest::default();
        let mut current: Option<Stage> = None;
        for line in text.lines().map(str::trim) {
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Stage::parse(name);
                if let Some(s) = current {
                    m.stages.insert(s, StageRecord::default());
                }
                continue;
            }
            let (Some(stage), Some((k, v))) = (current, line.split_once(" = ")) else {
                continue;
            };
            let rec = m.stages.get_mut(&stage).expect("inserted above");
            if k == "inputs" {
                rec.inputs = v.to_string();
            } else if let Some(path) = k.strip_prefix("output ") {
                rec.outputs.insert(path.to_string(), v.to_string());
            }
        }
        m
    }

    fn to_text(&self) -> String {
        let mut s = format!("# tactfuse pipeline manifest\nversion = {VERSION}\n");
        for (stage, rec) in &self.stages {
            s.push_str(&format!("\n[{stage}]\ninputs = {}\n", rec.inputs));
            for (p, h) in &rec.outputs {
                s.push_str(&format!("output {p} = {h}\n"));
            }
        }
        s
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(io::read_bytes(path)?)))
}

/// Shared state for one run.
struct Ctx<'a> {
    cfg: &'a SceneConfig,
    out: PathBuf,
    data: PathBuf,
}

/// One input file and the stage that produces it.
struct Input {
    path: PathBuf,
    producer: Stage,
}

impl Ctx<'_> {
    fn label(&self, path: &Path) -> String {
        // The dataset may live inside the output directory; prefer its root.
        if let Ok(rel) = path.strip_prefix(&self.data) {
            return format!("dataset/{}", rel.display());
        }
        if let Ok(rel) = path.strip_prefix(&self.out) {
            return format!("out/{}", rel.display());
        }
        path.display().to_string()
    }

    fn out_file(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, stage: Stage, path: &Path, producer: Stage) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::MissingUpstream {
                stage: stage.name().into(),
                upstream: producer.name().into(),
                artifact: path.to_path_buf(),
            })
        }
    }

    fn cameras(&self, stage: Stage) -> Result<Vec<NamedCamera>> {
        let path = self.data.join("cameras.txt");
        self.require(stage, &path, Stage::Simulate)?;
        io::read_cameras(&path)
    }

    fn touch_files(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let dir = self.data.join("touches");
        if !dir.is_dir() {
            return Err(Error::MissingUpstream {
                stage: stage.name().into(),
                upstream: Stage::Simulate.name().into(),
                artifact: dir,
            });
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ply"))
            .collect();
        files.sort();
        Ok(files)
    }

    fn pair(&self, dir: &str, view: &str) -> [PathBuf; 2] {
        [
            self.out_file(&format!("{dir}/{view}_depth.pfm")),
            self.out_file(&format!("{dir}/{view}_var.pfm")),
        ]
    }

    /// Files a stage reads, each tagged with its producer.
    fn inputs(&self, stage: Stage) -> Result<Vec<Input>> {
        let ds = |path: PathBuf| Input {
            path,
            producer: Stage::Simulate,
        };
        let from = |producer: Stage, paths: &[PathBuf]| -> Vec<Input> {
            paths.iter().map(|p| Input { path: p.clone(), producer }).collect()
        };
        let mut v = Vec::new();
        let views = || self.cameras(stage);
        match stage {
            Stage::Simulate => {}
            Stage::GpisFit => v.extend(self.touch_files(stage)?.into_iter().map(ds)),
            Stage::GpisRender => {
                v.push(ds(self.data.join("cameras.txt")));
                v.extend(from(Stage::GpisFit, &[self.out_file("gpis/model.bin"), self.out_file("gpis/fit.txt")]));
            }
            Stage::Align | Stage::Fuse | Stage::InitPoints | Stage::Train | Stage::Eval => {
                v.push(ds(self.data.join("cameras.txt")));
                for c in views()? {
                    let n = &c.name;
                    match stage {
                        Stage::Align => {
                            v.push(ds(view_file(&self.data, "mono", n)));
                            v.push(ds(view_file(&self.data, "sparse", n)));
                            v.extend(from(Stage::GpisRender, &self.pair("gpis", n)));
                        }
                        Stage::Fuse => {
                            v.extend(from(Stage::Align, &self.pair("aligned", n)));
                            v.extend(from(Stage::GpisRender, &self.pair("gpis", n)));
                        }
                        Stage::InitPoints => {
                            v.push(ds(view_file(&self.data, "rgb", n)));
                            v.extend(from(Stage::Align, &self.pair("aligned", n)));
                            v.extend(from(Stage::GpisRender, &self.pair("gpis", n)));
                        }
                        Stage::Train => {
                            v.push(ds(view_file(&self.data, "rgb", n)));
                            let mut f = self.pair("fused", n).to_vec();
                            f.push(self.out_file(&format!("fused/{n}_prov.pgm")));
                            v.extend(from(Stage::Fuse, &f));
                        }
                        _ => {
                            v.push(ds(view_file(&self.data, "rgb", n)));
                            v.push(ds(view_file(&self.data, "gt_depth", n)));
                            v.push(ds(view_file(&self.data, "mask", n)));
                            v.extend(from(Stage::GpisRender, &self.pair("gpis", n)));
                        }
                    }
                }
                match stage {
                    Stage::Train => v.push(Input {
                        path: self.out_file("init/points.ply"),
                        producer: Stage::InitPoints,
                    }),
                    Stage::Eval => v.push(Input {
                        path: self.out_file("train/splats.ply"),
                        producer: Stage::Train,
                    }),
                    _ => {}
                }
            }
        }
        Ok(v)
    }

    /// Parameters a stage depends on, as stable text.
    fn fingerprint(&self, stage: Stage) -> Result<String> {
        let c = self.cfg;
        Ok(match stage {
            Stage::Simulate => self.sim_config(stage)?.to_text(c.seed),
            Stage::GpisFit => format!("{:?}", c.gpis),
            Stage::GpisRender => format!("{:?}", c.march),
            Stage::Align => format!("{:?}", c.align),
            Stage::Fuse => String::new(),
            Stage::InitPoints => format!("{:?}", c.train.init),
            Stage::Train => format!("{:?} {} {:?}", c.loss, c.train.iters, c.train.optimizer),
            Stage::Eval => format!("icp_iters={}", c.icp_iters),
        })
    }

    fn sim_config(&self, stage: Stage) -> Result<&dataset::SimulateConfig> {
        self.cfg.simulate.as_ref().ok_or_else(|| Error::Config {
            path: self.cfg.path.clone(),
            line: 0,
            message: format!("stage `{stage}` needs a [simulate] section"),
        })
    }

    fn input_hash(&self, stage: Stage, inputs: &[Input]) -> Result<String> {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(stage.name().as_bytes());
        field(VERSION.as_bytes());
        field(self.fingerprint(stage)?.as_bytes());
        for inp in inputs {
            self.require(stage, &inp.path, inp.producer)?;
            field(self.label(&inp.path).as_bytes());
            field(&io::read_bytes(&inp.path)?);
        }
        Ok(hex(&h.finalize()))
    }

    fn outputs_intact(&self, rec: &StageRecord) -> bool {
        rec.outputs.iter().all(|(label, hash)| {
            let path = if let Some(rel) = label.strip_prefix("dataset/") {
                self.data.join(rel)
            } else if let Some(rel) = label.strip_prefix("out/") {
                self.out.join(rel)
            } else {
                PathBuf::from(label)
            };
            file_hash(&path).is_ok_and(|h| &h == hash)
        })
    }

    fn read_pair(&self, dir: &str, cam: &NamedCamera) -> Result<DepthVarImage> {
        let [dp, vp] = self.pair(dir, &cam.name);
        let depth = io::read_pfm(&dp)?;
        let variance = io::read_pfm(&vp)?;
        check_size(&dp, &depth, &cam.camera)?;
        check_size(&vp, &variance, &cam.camera)?;
        Ok(DepthVarImage {
            depth,
            variance,
            camera: cam.camera.clone(),
        })
    }

    fn write_pair(&self, dir: &str, name: &str, img: &DepthVarImage, written: &mut Vec<PathBuf>) -> Result<()> {
        let [dp, vp] = self.pair(dir, name);
        io::write_pfm(&dp, &img.depth)?;
        io::write_pfm(&vp, &img.variance)?;
        written.extend([dp, vp]);
        Ok(())
    }

    fn write_file(&self, rel: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
        let p = self.out_file(rel);
        io::write_atomic(&p, bytes)?;
        written.push(p);
        Ok(())
    }

    fn read_rgbs(&self, cams: &[NamedCamera]) -> Result<Vec<crate::image::RgbImage>> {
        cams.iter()
            .map(|c| {
                let p = view_file(&self.data, "rgb", &c.name);
                let img = io::read_ppm(&p)?;
                check_size(&p, &img, &c.camera)?;
                Ok(img)
            })
            .collect()
    }

    /// Runs one stage and returns the files it wrote.
    fn execute(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let mut w = Vec::new();
        match stage {
            Stage::Simulate => {
                let sim = self.sim_config(stage)?;
                let ds = dataset::simulate(sim, self.cfg.seed)?;
                w = ds.write(&self.data, &sim.to_text(self.cfg.seed))?;
            }
            Stage::GpisFit => {
                let touches: Vec<_> =
                    self.touch_files(stage)?.iter().map(|p| io::read_touch_ply(p)).collect::<Result<_>>()?;
                let (model, r_b) = workflow::fit_gpis(&touches, &self.cfg.gpis)?;
                self.write_file("gpis/model.bin", &model.to_bytes(), &mut w)?;
                let p = model.params();
                let info = format!(
                    "r_b = {r_b}\npoints = {}\nrho = {}\nsigma = {}\nnoise = {}\nprior_mean = {}\njitter = {}\nlog_marginal_likelihood = {}\n",
                    model.conditioning().len(),
                    p.rho,
                    p.sigma,
                    p.noise,
                    p.prior_mean,
                    model.jitter(),
                    model.log_marginal_likelihood()
                );
                self.write_file("gpis/fit.txt", info.as_bytes(), &mut w)?;
            }
            Stage::GpisRender => {
                let cams = self.cameras(stage)?;
                let model_path = self.out_file("gpis/model.bin");
                let model = GpisModel::from_bytes(&io::read_bytes(&model_path)?)
                    .map_err(|m| Error::format(&model_path, m))?;
                let r_b = self.read_r_b()?;
                let images = workflow::render_gpis(&model, &cams, &self.cfg.march, r_b)?;
                for (c, img) in cams.iter().zip(&images) {
                    self.write_pair("gpis", &c.name, img, &mut w)?;
                }
            }
            Stage::Align => {
                let cams = self.cameras(stage)?;
                let mut mono = Vec::new();
                let mut sparse = Vec::new();
                let mut gpis = Vec::new();
                for c in &cams {
                    let mp = view_file(&self.data, "mono", &c.name);
                    let m = io::read_pfm(&mp)?;
                    check_size(&mp, &m, &c.camera)?;
                    mono.push(m);
                    let sp = view_file(&self.data, "sparse", &c.name);
                    sparse.push(io::decode_sparse(&sp, &io::read_text(&sp)?)?);
                    gpis.push(self.read_pair("gpis", c)?);
                }
                let aligned = workflow::align_views(&mono, &sparse, &gpis, &self.cfg.align)?;
                let mut table = String::from("# view s t t_gpis object_pixels\n");
                for (c, a) in cams.iter().zip(&aligned) {
                    self.write_pair("aligned", &c.name, &a.as_depth_var(&c.camera), &mut w)?;
                    table.push_str(&scale_line(&c.name, a));
                }
                self.write_file("aligned/scales.txt", table.as_bytes(), &mut w)?;
            }
            Stage::Fuse => {
                let cams = self.cameras(stage)?;
                let vision: Vec<_> = cams.iter().map(|c| self.read_pair("aligned", c)).collect::<Result<_>>()?;
                let gpis: Vec<_> = cams.iter().map(|c| self.read_pair("gpis", c)).collect::<Result<_>>()?;
                let fused = workflow::fuse_views(&vision, &gpis)?;
                let dir = self.out_file("fused");
                for (c, f) in cams.iter().zip(&fused) {
                    io::write_fused(&dir, &c.name, f)?;
                    for suffix in ["depth.pfm", "var.pfm", "prov.pgm"] {
                        w.push(dir.join(format!("{}_{suffix}", c.name)));
                    }
                }
            }
            Stage::InitPoints => {
                let cams = self.cameras(stage)?;
                let rgbs = self.read_rgbs(&cams)?;
                let depth: Vec<_> = cams
                    .iter()
                    .map(|c| Ok(workflow::gpis_first_depth(&self.read_pair("gpis", c)?, &self.read_pair("aligned", c)?)))
                    .collect::<Result<_>>()?;
                let cloud = workflow::init_cloud(&depth, &rgbs, &self.cfg.train.init);
                log::info!("initial cloud: {} splats", cloud.len());
                self.write_file("init/points.ply", io::encode_splat_ply(&cloud).as_bytes(), &mut w)?;
            }
            Stage::Train => {
                let cams = self.cameras(stage)?;
                let rgbs = self.read_rgbs(&cams)?;
                let views: Vec<TrainView> = cams
                    .iter()
                    .zip(rgbs)
                    .map(|(c, rgb)| {
                        let supervision = io::read_fused(&self.out_file("fused"), &c.name)?;
                        check_size(&self.out_file("fused"), &supervision.depth, &c.camera)?;
                        Ok(TrainView {
                            rgb,
                            supervision,
                            camera: c.camera.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                let cloud = io::read_splat_ply(&self.out_file("init/points.ply"))?;
                let t = &self.cfg.train;
                let (trained, log_rows) = optimize(&cloud, &views, &self.cfg.loss, t.iters, &t.optimizer)?;
                self.write_file("train/splats.ply", io::encode_splat_ply(&trained).as_bytes(), &mut w)?;
                self.write_file("train/log.csv", encode_train_log(&log_rows).as_bytes(), &mut w)?;
            }
            Stage::Eval => {
                let cams = self.cameras(stage)?;
                let rgbs = self.read_rgbs(&cams)?;
                let mut views = Vec::new();
                let mut gpis = Vec::new();
                for (c, rgb) in cams.iter().zip(rgbs) {
                    views.push(EvalView {
                        name: c.name.clone(),
                        rgb,
                        gt_depth: read_gt_depth(&self.data, c)?,
                        object_mask: read_mask(&self.data, c)?,
                    });
                    gpis.push(self.read_pair("gpis", c)?);
                }
                let cloud = io::read_splat_ply(&self.out_file("train/splats.ply"))?;
                let (report, renders) = workflow::evaluate(&cloud, &views, &gpis, self.cfg.icp_iters)?;
                for (v, (rgb, depth)) in views.iter().zip(&renders) {
                    self.write_file(&format!("eval/{}_rgb.ppm", v.name), &io::encode_ppm(rgb), &mut w)?;
                    self.write_file(&format!("eval/{}_depth.pfm", v.name), &io::encode_pfm(depth), &mut w)?;
                }
                self.write_file("eval/report.txt", report.to_text().as_bytes(), &mut w)?;
                self.write_file("eval/report.csv", report.to_csv().as_bytes(), &mut w)?;
                log::info!(
                    "eval: psnr {:.3} dB, d_mse {:.5}, d_mse_o {:.5}, chamfer {:.5}",
                    report.psnr,
                    report.d_mse,
                    report.d_mse_o,
                    report.chamfer
                );
            }
        }
        Ok(w)
    }

    fn read_r_b(&self) -> Result<f64> {
        let path = self.out_file("gpis/fit.txt");
        let text = io::read_text(&path)?;
        text.lines()
            .find_map(|l| l.strip_prefix("r_b = "))
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|r| *r > 0.0)
            .ok_or_else(|| Error::format(&path, "missing r_b"))
    }
}

fn scale_line(name: &str, a: &AlignedVision) -> String {
    format!("{name} {} {} {} {}\n", a.s_star, a.t_star, a.t_gpis, a.object_pixels)
}

/// Runs `stages` (in dependency order) for `cfg`.
///
/// `simulate` is dropped from the full stage list when the configuration
/// has no `[simulate]` section, so pipelines over recorded datasets work
/// with the default stage set.
pub fn run_pipeline(cfg: &SceneConfig, stages: &[Stage]) -> Result<PipelineRun> {
    let mut todo: Vec<Stage> = stages.to_vec();
    todo.sort();
    todo.dedup();
    if cfg.simulate.is_none() && todo.len() == Stage::ALL.len() {
        todo.retain(|s| *s != Stage::Simulate);
    }
    let _lock = LockGuard::acquire(&cfg.out)?;
    let ctx = Ctx {
        cfg,
        out: cfg.out.clone(),
        data: cfg.dataset.clone(),
    };
    let manifest_path = ctx.out.join(MANIFEST);
    let mut manifest = match fs::read_to_string(&manifest_path) {
        Ok(t) => Manifest::parse(&t),
        Err(_) => Manifest::default(),
    };
    let mut run = PipelineRun::default();
    for stage in todo {
        let inputs = ctx.inputs(stage)?;
        let hash = ctx.input_hash(stage, &inputs)?;
        if let Some(rec) = manifest.stages.get(&stage) {
            if rec.inputs == hash && ctx.outputs_intact(rec) {
                log::info!("{stage}: up to date, skipped");
                run.stages.push((stage, Outcome::Skipped));
                continue;
            }
        }
        log::info!("{stage}: running");
        let written = ctx.execute(stage)?;
        let mut outputs = BTreeMap::new();
        for p in &written {
            outputs.insert(ctx.label(p), file_hash(p)?);
        }
        manifest.stages.insert(stage, StageRecord { inputs: hash, outputs });
        io::write_atomic(&manifest_path, manifest.to_text().as_bytes())?;
        run.stages.push((stage, Outcome::Ran));
    }
    Ok(run)
}
