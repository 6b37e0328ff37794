//! On-disk formats: PFM/PGM/PPM rasters, ASCII PLY clouds, camera and
//! sparse-depth text files. Every writer goes through [`write_atomic`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Point3};

use crate::align::{SparseDepth, SparseSource};
use crate::camera::{pose_from_matrix, CameraModel};
use crate::error::{Error, Result};
use crate::fuse::{FusedSupervision, Provenance};
use crate::geom::{Pose, Vec3};
use crate::gpis::TouchReading;
use crate::image::{Grid, Image, RgbImage};
use crate::splat::{logit, Splat, SplatCloud};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let mut tmp = path.to_path_buf();
    tmp.set_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Splits a binary netpbm-style header into `count` whitespace tokens and
/// returns them with the offset of the payload (after one whitespace byte).
fn header_tokens<'a>(path: &Path, bytes: &'a [u8], count: usize) -> Result<(Vec<&'a str>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::format(path, "non-ASCII header"))?;
        tokens.push(tok);
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "missing payload"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(path: &Path, tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad dimension '{tok}'"))),
    }
}

/// Grayscale PFM, little-endian, rows stored bottom-up.
pub fn encode_pfm(img: &Image) -> Vec<u8> {
    let (w, h) = img.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&(*img.get(col, row) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> Result<Image> {
    let (tok, off) = header_tokens(path, bytes, 4)?;
    if tok[0] != "Pf" {
        return Err(Error::format(path, "expected grayscale 'Pf' PFM"));
    }
    let (w, h) = (parse_dim(path, tok[1])?, parse_dim(path, tok[2])?);
    let scale: f64 = tok[3].parse().map_err(|_| Error::format(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "zero scale"));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h * 4 {
        return Err(Error::format(path, format!("expected {} data bytes, found {}", w * h * 4, payload.len())));
    }
    let mut img = Grid::filled(w, h, 0.0);
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (h - 1 - k / w, k % w);
        *img.get_mut(col, row) = v as f64;
    }
    Ok(img)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_atomic(path, &encode_pfm(img))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    decode_pfm(path, &read_bytes(path)?)
}

pub fn encode_pgm(img: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_slice());
    out
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Grid<u8>> {
    let (tok, off) = header_tokens(path, bytes, 4)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::format(path, "expected 8-bit binary PGM"));
    }
    let (w, h) = (parse_dim(path, tok[1])?, parse_dim(path, tok[2])?);
    Grid::from_vec(w, h, bytes[off..].to_vec()).map_err(|_| Error::format(path, "pixel count mismatch"))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM with channels in [0, 1] quantized to 8 bits.
pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    for px in img.as_slice() {
        out.extend(px.iter().map(|&c| quantize(c)));
    }
    out
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let (tok, off) = header_tokens(path, bytes, 4)?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(Error::format(path, "expected 8-bit binary PPM"));
    }
    let (w, h) = (parse_dim(path, tok[1])?, parse_dim(path, tok[2])?);
    let payload = &bytes[off..];
    if payload.len() != w * h * 3 {
        return Err(Error::format(path, "pixel count mismatch"));
    }
    let px = payload
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(w, h, px)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(path, &read_bytes(path)?)
}

pub fn write_provenance(path: &Path, prov: &Grid<Provenance>) -> Result<()> {
    write_atomic(path, &encode_pgm(&prov.map(|p| p.gray())))
}

pub fn read_provenance(path: &Path) -> Result<Grid<Provenance>> {
    let g = decode_pgm(path, &read_bytes(path)?)?;
    let mut out = Grid::filled(g.width(), g.height(), Provenance::None);
    for (o, &v) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *o = Provenance::from_gray(v).ok_or_else(|| Error::format(path, format!("bad provenance level {v}")))?;
    }
    Ok(out)
}

/// Writes `<dir>/<name>_depth.pfm`, `_var.pfm` and `_prov.pgm`.
pub fn write_fused(dir: &Path, name: &str, fused: &FusedSupervision) -> Result<()> {
    write_pfm(&dir.join(format!("{name}_depth.pfm")), &fused.depth)?;
    write_pfm(&dir.join(format!("{name}_var.pfm")), &fused.variance)?;
    write_provenance(&dir.join(format!("{name}_prov.pgm")), &fused.provenance)
}

pub fn read_fused(dir: &Path, name: &str) -> Result<FusedSupervision> {
    let depth = read_pfm(&dir.join(format!("{name}_depth.pfm")))?;
    let variance = read_pfm(&dir.join(format!("{name}_var.pfm")))?;
    let provenance = read_provenance(&dir.join(format!("{name}_prov.pgm")))?;
    if !depth.same_dims(&variance) || !depth.same_dims(&provenance) {
        return Err(Error::format(dir.join(name), "fused images disagree in size"));
    }
    Ok(FusedSupervision {
        depth,
        variance,
        provenance,
    })
}

/// Collects the data lines of an ASCII PLY after checking its header
/// declares exactly `props` (in order) on a single element.
fn ply_body<'a>(path: &Path, text: &'a str, props: &[&str]) -> Result<(usize, Vec<(usize, &'a str)>)> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(Error::format(path, "missing 'ply' magic"));
    }
    let mut count = None;
    let mut seen = Vec::new();
    for (_, line) in lines.by_ref() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(Error::format(path, "only ASCII PLY is supported")),
            ["comment", ..] | [] => {}
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::format(path, "bad vertex count"))?);
            }
            ["property", _, name] => seen.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(Error::format(path, format!("unsupported header line '{line}'"))),
        }
    }
    if seen != props {
        return Err(Error::format(path, format!("expected properties {props:?}, found {seen:?}")));
    }
    let count = count.ok_or_else(|| Error::format(path, "missing vertex element"))?;
    let body: Vec<(usize, &str)> = lines.filter(|(_, l)| !l.trim().is_empty()).take(count).collect();
    if body.len() != count {
        return Err(Error::format(path, format!("expected {count} vertices, found {}", body.len())));
    }
    Ok((count, body))
}

fn parse_row<const N: usize>(path: &Path, lineno: usize, line: &str) -> Result<[f64; N]> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("line {}: not a number", lineno + 1)))?;
    vals.try_into()
        .map_err(|_| Error::format(path, format!("line {}: expected {N} values", lineno + 1)))
}

fn ply_header(comments: &[String], count: usize, props: &[&str]) -> String {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        let _ = writeln!(s, "comment {c}");
    }
    let _ = writeln!(s, "element vertex {count}");
    for p in props {
        let _ = writeln!(s, "property double {p}");
    }
    s.push_str("end_header\n");
    s
}

const TOUCH_PROPS: [&str; 6] = ["x", "y", "z", "nx", "ny", "nz"];

/// A touch as PLY; the sensor pose rides along in a comment line.
pub fn encode_touch_ply(touch: &TouchReading) -> String {
    let m = touch.sensor_pose.to_homogeneous();
    let pose: Vec<String> = (0..4).flat_map(|r| (0..4).map(move |c| m[(r, c)].to_string())).collect();
    let mut s = ply_header(&[format!("sensor_pose {}", pose.join(" "))], touch.points.len(), &TOUCH_PROPS);
    for (p, n) in touch.points.iter().zip(&touch.normals) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x, p.y, p.z, n.x, n.y, n.z);
    }
    s
}

pub fn decode_touch_ply(path: &Path, text: &str) -> Result<TouchReading> {
    let (_, body) = ply_body(path, text, &TOUCH_PROPS)?;
    let mut pose = Pose::identity();
    for line in text.lines().take_while(|l| l.trim() != "end_header") {
        if let Some(rest) = line.trim().strip_prefix("comment sensor_pose") {
            let v: [f64; 16] = parse_row(path, 0, rest)?;
            pose = pose_from_matrix(&Matrix4::from_row_slice(&v))
                .map_err(|e| Error::format(path, format!("sensor pose: {e}")))?;
        }
    }
    let mut points = Vec::with_capacity(body.len());
    let mut normals = Vec::with_capacity(body.len());
    for (lineno, line) in body {
        let v: [f64; 6] = parse_row(path, lineno, line)?;
        points.push(Point3::new(v[0], v[1], v[2]));
        normals.push(Vec3::new(v[3], v[4], v[5]));
    }
    TouchReading::new(points, normals, pose).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_touch_ply(path: &Path, touch: &TouchReading) -> Result<()> {
    write_atomic(path, encode_touch_ply(touch).as_bytes())
}

pub fn read_touch_ply(path: &Path) -> Result<TouchReading> {
    decode_touch_ply(path, &read_text(path)?)
}

/// Reads every `*.ply` in `dir`, sorted by file name.
pub fn read_touch_dir(dir: &Path) -> Result<Vec<TouchReading>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_touch_ply(p)).collect()
}

const SPLAT_PROPS: [&str; 8] = ["x", "y", "z", "r", "g", "b", "opacity", "radius"];

/// Splat cloud as PLY; `opacity` is the mapped α, the background a comment.
pub fn encode_splat_ply(cloud: &SplatCloud) -> String {
    let bg = cloud.background;
    let mut s = ply_header(&[format!("background {} {} {}", bg[0], bg[1], bg[2])], cloud.len(), &SPLAT_PROPS);
    for sp in &cloud.splats {
        let p = sp.position;
        let c = sp.color;
        let _ = writeln!(s, "{} {} {} {} {} {} {} {}", p.x, p.y, p.z, c[0], c[1], c[2], sp.alpha(), sp.radius);
    }
    s
}

pub fn decode_splat_ply(path: &Path, text: &str) -> Result<SplatCloud> {
    let (_, body) = ply_body(path, text, &SPLAT_PROPS)?;
    let mut background = [0.0; 3];
    for line in text.lines().take_while(|l| l.trim() != "end_header") {
        if let Some(rest) = line.trim().strip_prefix("comment background") {
            background = parse_row(path, 0, rest)?;
        }
    }
    let mut splats = Vec::with_capacity(body.len());
    for (lineno, line) in body {
        let v: [f64; 8] = parse_row(path, lineno, line)?;
        if !(v[6] > 0.0 && v[6] < 1.0) {
            return Err(Error::format(path, format!("line {}: opacity outside (0, 1)", lineno + 1)));
        }
        splats.push(Splat {
            position: Point3::new(v[0], v[1], v[2]),
            color: [v[3], v[4], v[5]],
            opacity_logit: logit(v[6]),
            radius: v[7],
        });
    }
    SplatCloud::new(splats, background).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_splat_ply(path: &Path, cloud: &SplatCloud) -> Result<()> {
    write_atomic(path, encode_splat_ply(cloud).as_bytes())
}

pub fn read_splat_ply(path: &Path) -> Result<SplatCloud> {
    decode_splat_ply(path, &read_text(path)?)
}

/// Plain point cloud as PLY with x y z only.
pub fn encode_points_ply(points: &[Point3<f64>]) -> String {
    let mut s = ply_header(&[], points.len(), &["x", "y", "z"]);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn decode_points_ply(path: &Path, text: &str) -> Result<Vec<Point3<f64>>> {
    let (_, body) = ply_body(path, text, &["x", "y", "z"])?;
    body.into_iter()
        .map(|(n, l)| parse_row::<3>(path, n, l).map(|v| Point3::new(v[0], v[1], v[2])))
        .collect()
}

/// A named view: one `cameras.txt` line is
/// `name fx fy cx cy width height m00 m01 ... m33` (world-from-camera, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCamera {
    pub name: String,
    pub camera: CameraModel,
}

pub fn encode_cameras(cams: &[NamedCamera]) -> String {
    let mut s = String::from("# name fx fy cx cy width height world_from_camera[16, row-major]\n");
    for nc in cams {
        let c = &nc.camera;
        let m = c.pose.to_homogeneous();
        let _ = write!(s, "{} {} {} {} {} {} {}", nc.name, c.fx, c.fy, c.cx, c.cy, c.width, c.height);
        for r in 0..4 {
            for k in 0..4 {
                let _ = write!(s, " {}", m[(r, k)]);
            }
        }
        s.push('\n');
    }
    s
}

pub fn decode_cameras(path: &Path, text: &str) -> Result<Vec<NamedCamera>> {
    let mut out: Vec<NamedCamera> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 23 {
            return Err(bad(format!("expected 23 fields, found {}", tok.len())));
        }
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad(format!("'{t}' is not a number")));
        let dim = |t: &str| t.parse::<usize>().map_err(|_| bad(format!("'{t}' is not a size")));
        let m: Vec<f64> = tok[7..].iter().map(|t| num(t)).collect::<Result<_>>()?;
        let pose = pose_from_matrix(&Matrix4::from_row_slice(&m)).map_err(|e| bad(e.to_string()))?;
        let camera = CameraModel::new(num(tok[1])?, num(tok[2])?, num(tok[3])?, num(tok[4])?, dim(tok[5])?, dim(tok[6])?, pose)
            .map_err(|e| bad(e.to_string()))?;
        if out.iter().any(|c| c.name == tok[0]) {
            return Err(bad(format!("duplicate view name '{}'", tok[0])));
        }
        out.push(NamedCamera {
            name: tok[0].to_string(),
            camera,
        });
    }
    Ok(out)
}

pub fn read_cameras(path: &Path) -> Result<Vec<NamedCamera>> {
    decode_cameras(path, &read_text(path)?)
}

/// Sparse depth as `col row depth` lines; the source is a `# source` comment.
pub fn encode_sparse(sparse: &SparseDepth) -> String {
    let src = match sparse.source {
        SparseSource::Sensor => "sensor",
        SparseSource::Synthetic => "synthetic",
    };
    let mut s = format!("# source {src}\n# col row depth\n");
    for &(c, r, d) in &sparse.samples {
        let _ = writeln!(s, "{c} {r} {d}");
    }
    s
}

pub fn decode_sparse(path: &Path, text: &str) -> Result<SparseDepth> {
    let mut source = SparseSource::Synthetic;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(src) = line.strip_prefix("# source") {
            source = match src.trim() {
                "sensor" => SparseSource::Sensor,
                _ => SparseSource::Synthetic,
            };
            continue;
        }
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected 'col row depth'", lineno + 1));
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 3 {
            return Err(bad());
        }
        let c = tok[0].parse::<usize>().map_err(|_| bad())?;
        let r = tok[1].parse::<usize>().map_err(|_| bad())?;
        let d = tok[2].parse::<f64>().map_err(|_| bad())?;
        samples.push((c, r, d));
    }
    Ok(SparseDepth { samples, source })
}
