//! File formats: PFM rasters, binary PLY point sets, PNG previews, JSON
//! cameras/configs and regressor checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::camera::{Camera, CameraSpec, Quaternion};
use crate::error::{Error, Result};
use crate::gaussians::{Gaussian, GaussianCloud, Provenance, COLOR_DIM};
use crate::geom::{GeomImage, GridPointCloud, ImageKind, Vec3};
use crate::pipeline::SourceView;
use crate::regressors::{Mlp, RegressorBundle, SymDecoders};

// ---------------------------------------------------------------- PFM

/// Encodes a 1- or 3-channel image as little-endian PFM. NaNs are rejected.
pub fn encode_pfm(img: &GeomImage) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    if img.data().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("PFM writer rejects NaN values"));
    }
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let mut out = format!("{magic}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for v in &img.data()[y * w * c..(y + 1) * w * c] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes PFM bytes; `kind` tags the result.
pub fn decode_pfm(bytes: &[u8], kind: ImageKind) -> Result<GeomImage> {
    let bad = |m: &str| Error::format("pfm", m.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(bad(&format!("unknown magic {m:?}"))),
    };
    let w: usize = token()?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be finite and nonzero"));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| bad("dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() != n * 4 {
        return Err(bad(&format!("expected {} payload bytes, found {}", n * 4, payload.len())));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; n];
    for y in 0..h {
        let src_row = h - 1 - y;
        for i in 0..w * channels {
            let off = (src_row * w * channels + i) * 4;
            let b: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            data[y * w * channels + i] = v as f64;
        }
    }
    GeomImage::from_data(w, h, channels, kind, data)
}

pub fn write_pfm(path: &Path, img: &GeomImage) -> Result<()> {
    fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn read_pfm(path: &Path, kind: ImageKind) -> Result<GeomImage> {
    decode_pfm(&fs::read(path)?, kind)
}

// ---------------------------------------------------------------- PNG

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit preview of a 1- or 3-channel image, values clamped to [0, 1].
/// Normal maps are remapped from [-1, 1].
pub fn write_png(path: &Path, img: &GeomImage) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let map = |v: f64| {
        if img.kind() == ImageKind::Normal {
            to_u8(0.5 * (v + 1.0))
        } else {
            to_u8(v)
        }
    };
    let bytes: Vec<u8> = img.data().iter().map(|v| map(*v)).collect();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::invalid(format!("PNG preview needs 1 or 3 channels, not {c}"))),
    };
    image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)?;
    Ok(())
}

/// Reads a PNG as a 3-channel color image in [0, 1].
pub fn read_png(path: &Path) -> Result<GeomImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    GeomImage::from_data(w, h, 3, ImageKind::Color, data)
}

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct PlyTable {
    comments: Vec<String>,
    names: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl PlyTable {
    fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| Error::format("ply", format!("missing vertex property {name:?}")))
    }
}

fn read_ply_table(bytes: &[u8]) -> Result<PlyTable> {
    let bad = |m: String| Error::format("ply", m);
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<()> {
        line.clear();
        if reader.read_line(line).map_err(|e| bad(e.to_string()))? == 0 {
            return Err(bad("unexpected end of header".into()));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(bad("missing 'ply' magic".into()));
    }
    let mut comments = Vec::new();
    let mut names = Vec::new();
    let mut types = Vec::new();
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut header_len = line.len();
    loop {
        next_line(&mut line)?;
        header_len += line.len();
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, ver] => {
                if *fmt != "binary_little_endian" || *ver != "1.0" {
                    return Err(bad(format!("unsupported format {fmt} {ver}")));
                }
            }
            ["comment", rest @ ..] => comments.push(rest.join(" ")),
            ["obj_info", ..] => {}
            ["element", name, n] => {
                let n: usize = n.parse().map_err(|_| bad(format!("bad element count {n}")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n);
                } else if n != 0 {
                    return Err(bad(format!("unsupported element {name}")));
                }
            }
            ["property", "list", ..] if in_vertex => return Err(bad("list properties are not supported".into())),
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| bad(format!("unknown property type {ty}")))?;
                types.push(t);
                names.push(name.to_string());
            }
            ["property", ..] => {}
            ["end_header"] => break,
            [] => {}
            _ => return Err(bad(format!("unrecognized header line {:?}", line.trim_end()))),
        }
    }
    let n = count.ok_or_else(|| bad("no vertex element".into()))?;
    let stride: usize = types.iter().map(|t| t.size()).sum();
    let body = &bytes[header_len..];
    if body.len() != n * stride {
        return Err(bad(format!(
            "vertex count {n} needs {} payload bytes, found {}",
            n * stride,
            body.len()
        )));
    }
    let rows = body
        .chunks_exact(stride.max(1))
        .take(n)
        .map(|rec| {
            let mut off = 0;
            types
                .iter()
                .map(|t| {
                    let v = t.read(&rec[off..]);
                    off += t.size();
                    v
                })
                .collect()
        })
        .collect();
    Ok(PlyTable { comments, names, rows })
}

fn gaussian_property_names() -> Vec<String> {
    let mut n: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
    n.extend((0..3).map(|i| format!("scale_{i}")));
    n.extend((0..4).map(|i| format!("rot_{i}")));
    n.push("opacity".into());
    n.extend((0..3).map(|i| format!("f_dc_{i}")));
    n.extend((0..9).map(|i| format!("f_rest_{i}")));
    n
}

/// Binary little-endian PLY in the common splatting layout, plus
/// `provenance` (uchar) and `grid_index` (int, -1 when absent).
pub fn encode_gaussian_ply(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let names = gaussian_property_names();
    let mut out = String::from("ply\nformat binary_little_endian 1.0\ncomment splathead gaussians\n");
    out += &format!("element vertex {}\n", cloud.len());
    for n in &names {
        out += &format!("property float {n}\n");
    }
    out += "property uchar provenance\nproperty int grid_index\nend_header\n";
    let mut bytes = out.into_bytes();
    for i in 0..cloud.len() {
        let g = cloud.get(i);
        let mut vals = vec![g.position.x, g.position.y, g.position.z];
        vals.extend_from_slice(&g.log_scale);
        vals.extend_from_slice(&g.rotation.to_array());
        vals.push(g.opacity_logit);
        vals.extend((0..3).map(|ch| g.color[ch * 4]));
        for ch in 0..3 {
            vals.extend_from_slice(&g.color[ch * 4 + 1..ch * 4 + 4]);
        }
        for v in vals {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        bytes.push(cloud.provenance[i].to_u8());
        let gi = match cloud.grid_index[i] {
            Some(c) => i32::try_from(c).map_err(|_| Error::invalid("grid index exceeds i32"))?,
            None => -1,
        };
        bytes.extend_from_slice(&gi.to_le_bytes());
    }
    Ok(bytes)
}

/// Reads a Gaussian PLY. Property order and numeric types are free;
/// `provenance` and `grid_index` are optional.
pub fn decode_gaussian_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let t = read_ply_table(bytes)?;
    let cols: Vec<usize> = gaussian_property_names()
        .iter()
        .map(|n| t.require(n))
        .collect::<Result<_>>()?;
    let prov = t.column("provenance");
    let grid = t.column("grid_index");
    let mut cloud = GaussianCloud::with_capacity(t.rows.len());
    for (i, r) in t.rows.iter().enumerate() {
        let v = |k: usize| r[cols[k]];
        let mut color = [0.0; COLOR_DIM];
        for ch in 0..3 {
            color[ch * 4] = v(11 + ch);
            for k in 0..3 {
                color[ch * 4 + 1 + k] = v(14 + ch * 3 + k);
            }
        }
        let g = Gaussian {
            position: Vec3::new(v(0), v(1), v(2)),
            log_scale: [v(3), v(4), v(5)],
            rotation: Quaternion::new(v(6), v(7), v(8), v(9)),
            opacity_logit: v(10),
            color,
        };
        let p = match prov {
            Some(c) => Provenance::from_u8(r[c] as u8)
                .ok_or_else(|| Error::format("ply", format!("vertex {i}: bad provenance {}", r[c])))?,
            None => Provenance::Visible,
        };
        let gi = grid.map(|c| r[c]).filter(|v| *v >= 0.0).map(|v| v as usize);
        cloud.push(g, p, gi);
    }
    cloud
        .validate()
        .map_err(|e| Error::format("ply", e.to_string()))?;
    Ok(cloud)
}

pub fn write_gaussian_ply(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    fs::write(path, encode_gaussian_ply(cloud)?)?;
    Ok(())
}

pub fn read_gaussian_ply(path: &Path) -> Result<GaussianCloud> {
    decode_gaussian_ply(&fs::read(path)?)
}

/// Valid cells of a grid cloud as double-precision vertices with their cell
/// index; the grid size travels in header comments.
pub fn encode_grid_ply(cloud: &GridPointCloud) -> Vec<u8> {
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out += &format!("comment grid_width {}\ncomment grid_height {}\n", cloud.width(), cloud.height());
    out += &format!("element vertex {}\n", cloud.valid_count());
    out += "property double x\nproperty double y\nproperty double z\nproperty int cell\nend_header\n";
    let mut bytes = out.into_bytes();
    for (cell, p) in cloud.iter_valid() {
        for v in [p.x, p.y, p.z] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&(cell as i32).to_le_bytes());
    }
    bytes
}

pub fn decode_grid_ply(bytes: &[u8]) -> Result<GridPointCloud> {
    let t = read_ply_table(bytes)?;
    let dim = |key: &str| -> Result<usize> {
        t.comments
            .iter()
            .find_map(|c| c.strip_prefix(key).map(|v| v.trim().parse::<usize>()))
            .ok_or_else(|| Error::format("ply", format!("missing '{key}' comment")))?
            .map_err(|_| Error::format("ply", format!("bad '{key}' comment")))
    };
    let (w, h) = (dim("grid_width")?, dim("grid_height")?);
    let (x, y, z, c) = (t.require("x")?, t.require("y")?, t.require("z")?, t.require("cell")?);
    let mut cloud = GridPointCloud::empty(w, h);
    for r in &t.rows {
        let cell = r[c];
        if !(cell >= 0.0 && (cell as usize) < w * h) {
            return Err(Error::format("ply", format!("cell {cell} outside the {w}x{h} grid")));
        }
        let p = Vec3::new(r[x], r[y], r[z]);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::format("ply", "non-finite vertex"));
        }
        cloud.set(cell as usize, p);
    }
    Ok(cloud)
}

pub fn write_grid_ply(path: &Path, cloud: &GridPointCloud) -> Result<()> {
    fs::write(path, encode_grid_ply(cloud))?;
    Ok(())
}

pub fn read_grid_ply(path: &Path) -> Result<GridPointCloud> {
    decode_grid_ply(&fs::read(path)?)
}

// ---------------------------------------------------------------- JSON

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_camera(path: &Path) -> Result<Camera> {
    Camera::from_spec(&read_json::<CameraSpec>(path)?)
}

pub fn write_camera(path: &Path, camera: &Camera) -> Result<()> {
    write_json(path, &camera.to_spec())
}

// ---------------------------------------------------------------- checkpoints

const CHECKPOINT_MAGIC: &str = "splathead-checkpoint";

#[derive(Debug, Serialize, serde::Deserialize)]
struct NetHeader {
    name: String,
    widths: Vec<usize>,
    seed: u64,
}

#[derive(Debug, Serialize, serde::Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    nets: Vec<NetHeader>,
}

/// One JSON header line followed by every network's parameters as raw
/// little-endian f64, in header order.
pub fn encode_checkpoint(bundle: &RegressorBundle) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.into(),
        version: 1,
        nets: bundle
            .nets()
            .iter()
            .map(|(name, net)| NetHeader {
                name: name.to_string(),
                widths: net.widths().to_vec(),
                seed: net.seed(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, net) in bundle.nets() {
        for p in net.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RegressorBundle> {
    let bad = |m: String| Error::format("checkpoint", m);
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    if header.format != CHECKPOINT_MAGIC || header.version != 1 {
        return Err(bad(format!("unsupported checkpoint {} v{}", header.format, header.version)));
    }
    let expected = ["refine", "deform", "decode", "sym_scale", "sym_rotation", "sym_color", "sym_opacity"];
    if header.nets.len() != expected.len() || header.nets.iter().zip(expected).any(|(n, e)| n.name != e) {
        return Err(bad("unexpected network list".into()));
    }
    let mut body = &bytes[nl + 1..];
    let mut nets = Vec::new();
    for h in &header.nets {
        let count = Mlp::param_count_for(&h.widths);
        if body.len() < count * 8 {
            return Err(bad(format!("truncated parameters for {}", h.name)));
        }
        let params = body[..count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        body = &body[count * 8..];
        nets.push(Mlp::from_params(&h.widths, params, h.seed)?);
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    let mut it = nets.into_iter();
    let mut next = || it.next().unwrap();
    let bundle = RegressorBundle {
        refine: next(),
        deform: next(),
        decode: next(),
        sym: SymDecoders {
            scale: next(),
            rotation: next(),
            color: next(),
            opacity: next(),
        },
    };
    Ok(bundle)
}

pub fn write_checkpoint(path: &Path, bundle: &RegressorBundle) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&encode_checkpoint(bundle)?)?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<RegressorBundle> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

// ---------------------------------------------------------------- scene bundles

/// Grayscale preview of a depth map, near = white, over the masked pixels.
pub fn depth_preview(depth: &GeomImage, mask: &GeomImage) -> Result<GeomImage> {
    depth.check_same_shape(mask, "depth preview")?;
    let valid: Vec<f64> = depth
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m > 0.0)
        .map(|(d, _)| *d)
        .collect();
    let lo = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = depth
        .data()
        .iter()
        .zip(mask.data())
        .map(|(d, m)| if *m > 0.0 { 1.0 - 0.8 * (d - lo) / span } else { 0.0 })
        .collect();
    GeomImage::from_data(depth.width(), depth.height(), 1, ImageKind::Feature, data)
}

/// Writes `color`, `depth`, `normal` and `mask` as PFM plus PNG previews, and
/// `camera.json`, into `dir`.
pub fn write_scene(dir: &Path, view: &SourceView) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, img) in [("color", &view.color), ("depth", &view.depth), ("normal", &view.normal), ("mask", &view.mask)] {
        write_pfm(&dir.join(format!("{name}.pfm")), img)?;
    }
    write_png(&dir.join("color.png"), &view.color)?;
    write_png(&dir.join("depth.png"), &depth_preview(&view.depth, &view.mask)?)?;
    write_png(&dir.join("normal.png"), &view.normal)?;
    write_png(&dir.join("mask.png"), &view.mask)?;
    write_camera(&dir.join("camera.json"), &view.camera)
}

pub fn read_scene(dir: &Path) -> Result<SourceView> {
    let view = SourceView {
        camera: read_camera(&dir.join("camera.json"))?,
        color: read_pfm(&dir.join("color.pfm"), ImageKind::Color)?,
        depth: read_pfm(&dir.join("depth.pfm"), ImageKind::Depth)?,
        normal: read_pfm(&dir.join("normal.pfm"), ImageKind::Normal)?,
        mask: read_pfm(&dir.join("mask.pfm"), ImageKind::Mask)?,
    };
    let (w, h) = (view.camera.width, view.camera.height);
    for img in [&view.color, &view.depth, &view.normal, &view.mask] {
        if img.width() != w || img.height() != h {
            return Err(Error::invalid(format!("scene {} rasters do not match the camera size", dir.display())));
        }
    }
    Ok(view)
}

/// Reads a PFM or PNG image chosen by file extension.
pub fn read_image(path: &Path) -> Result<GeomImage> {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("png") => read_png(path),
        Some("pfm") => {
            let bytes = fs::read(path)?;
            let kind = if bytes.starts_with(b"PF") { ImageKind::Color } else { ImageKind::Feature };
            decode_pfm(&bytes, kind)
        }
        _ => Err(Error::invalid(format!("{}: expected a .pfm or .png image", path.display()))),
    }
}
