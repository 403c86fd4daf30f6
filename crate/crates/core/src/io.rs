//! On-disk formats: 16-bit PGM depth, 8-bit PGM masks, PPM color, binary PLY
//! clouds and meshes, and JSON helpers.
//!
//! The PGM/PPM encoders are also the frame payload encoding of the acquisition
//! protocol, so bytes on disk equal bytes on the wire.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{ColorImage, DepthImage, PointCloud, Vec3};
use crate::recon::TriangleMesh;
use crate::segmentation::BinaryMask;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("malformed {format} header: {reason}")]
    Header { format: &'static str, reason: String },
    #[error("{format} payload truncated: expected {expected} bytes, found {found}")]
    Truncated {
        format: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("mask contains non-binary value {value} at pixel {index}")]
    NonBinaryMask { value: u16, index: usize },
    #[error("PLY: {0}")]
    Ply(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Pnm<'a> {
    magic: [u8; 2],
    width: u32,
    height: u32,
    maxval: u32,
    body: &'a [u8],
}

fn parse_pnm<'a>(bytes: &'a [u8], format: &'static str) -> Result<Pnm<'a>, FormatError> {
    let header_err = |reason: &str| FormatError::Header {
        format,
        reason: reason.to_string(),
    };
    if bytes.len() < 2 {
        return Err(header_err("missing magic number"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(header_err("unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| header_err("non-ascii field"))?;
        *field = text.parse().map_err(|_| header_err("expected an integer"))?;
    }
    // exactly one whitespace byte separates the header from the samples
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(header_err("missing separator after maxval"));
    }
    pos += 1;
    Ok(Pnm {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        body: &bytes[pos..],
    })
}

fn take_body<'a>(pnm: &Pnm<'a>, expected: usize, format: &'static str) -> Result<&'a [u8], FormatError> {
    if pnm.body.len() < expected {
        return Err(FormatError::Truncated {
            format,
            expected,
            found: pnm.body.len(),
        });
    }
    Ok(&pnm.body[..expected])
}

/// `P5`, maxval 65535, big-endian samples.
pub fn encode_depth_pgm(depth: &DepthImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    out.reserve(depth.data.len() * 2);
    for &d in &depth.data {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out
}

pub fn decode_depth_pgm(bytes: &[u8]) -> Result<DepthImage, FormatError> {
    let pnm = parse_pnm(bytes, "PGM")?;
    if &pnm.magic != b"P5" {
        return Err(FormatError::Header {
            format: "PGM",
            reason: "expected P5".into(),
        });
    }
    let n = pnm.width as usize * pnm.height as usize;
    let data = if pnm.maxval > 255 {
        let body = take_body(&pnm, 2 * n, "PGM")?;
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        take_body(&pnm, n, "PGM")?.iter().map(|&b| b as u16).collect()
    };
    Ok(DepthImage {
        width: pnm.width,
        height: pnm.height,
        data,
    })
}

/// `P5`, maxval 255, samples restricted to {0, 255}.
pub fn encode_mask_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

pub fn decode_mask_pgm(bytes: &[u8]) -> Result<BinaryMask, FormatError> {
    let depth = decode_depth_pgm(bytes)?;
    if let Some((index, &value)) = depth.data.iter().enumerate().find(|(_, &v)| v != 0 && v != 255) {
        return Err(FormatError::NonBinaryMask { value, index });
    }
    Ok(BinaryMask {
        width: depth.width,
        height: depth.height,
        data: depth.data.iter().map(|&v| v as u8).collect(),
    })
}

/// `P6`, maxval 255.
pub fn encode_ppm(color: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", color.width, color.height).into_bytes();
    out.extend_from_slice(&color.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ColorImage, FormatError> {
    let pnm = parse_pnm(bytes, "PPM")?;
    if &pnm.magic != b"P6" || pnm.maxval != 255 {
        return Err(FormatError::Header {
            format: "PPM",
            reason: "expected P6 with maxval 255".into(),
        });
    }
    let n = 3 * pnm.width as usize * pnm.height as usize;
    Ok(ColorImage {
        width: pnm.width,
        height: pnm.height,
        data: take_body(&pnm, n, "PPM")?.to_vec(),
    })
}

/// Binary little-endian PLY: `x y z` float, optional `red green blue` uchar,
/// optional `nx ny nz` float.
pub fn encode_ply_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    );
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.normals.is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for i in 0..cloud.len() {
        push_vec3_f32(&mut out, &cloud.points[i]);
        if let Some(c) = &cloud.colors {
            for k in 0..3 {
                out.push((c[i][k].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        if let Some(n) = &cloud.normals {
            push_vec3_f32(&mut out, &n[i]);
        }
    }
    out
}

/// Binary little-endian PLY: vertex float32 positions, faces as
/// `list uchar uint vertex_indices`.
pub fn encode_ply_mesh(mesh: &TriangleMesh) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    let mut out = header.into_bytes();
    for v in &mesh.vertices {
        push_vec3_f32(&mut out, v);
    }
    for t in &mesh.triangles {
        out.push(3);
        for &i in t {
            out.extend_from_slice(&i.to_le_bytes());
        }
    }
    out
}

fn push_vec3_f32(out: &mut Vec<u8>, v: &Vec3) {
    for k in 0..3 {
        out.extend_from_slice(&(v[k] as f32).to_le_bytes());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct PlyData {
    /// per element: rows of scalar values (lists are flattened into `lists`)
    elements: Vec<(Element, Vec<Vec<f64>>, Vec<Vec<u32>>)>,
}

fn parse_ply(bytes: &[u8]) -> Result<PlyData, FormatError> {
    let end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| FormatError::Ply("missing end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| FormatError::Ply("non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(FormatError::Ply("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "binary_little_endian", _] => {}
            ["format", other, _] => return Err(FormatError::Ply(format!("unsupported format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| FormatError::Ply("bad element count".into()))?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| FormatError::Ply("property before element".into()))?;
                let (ct, it) = (Scalar::parse(ct), Scalar::parse(it));
                match (ct, it) {
                    (Some(c), Some(i)) => el.properties.push(Property::List(c, i)),
                    _ => return Err(FormatError::Ply(format!("unknown list type in `{line}`"))),
                }
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| FormatError::Ply("property before element".into()))?;
                let ty = Scalar::parse(ty).ok_or_else(|| FormatError::Ply(format!("unknown type in `{line}`")))?;
                el.properties.push(Property::Scalar(name.to_string(), ty));
            }
            _ => return Err(FormatError::Ply(format!("unrecognised header line `{line}`"))),
        }
    }
    let mut pos = end + 11;
    let truncated = || FormatError::Ply("truncated body".into());
    let mut out = Vec::new();
    for el in elements {
        let mut rows = Vec::with_capacity(el.count);
        let mut lists = Vec::new();
        for _ in 0..el.count {
            let mut row = Vec::with_capacity(el.properties.len());
            for p in &el.properties {
                match p {
                    Property::Scalar(_, ty) => {
                        let b = bytes.get(pos..pos + ty.size()).ok_or_else(truncated)?;
                        row.push(ty.read(b));
                        pos += ty.size();
                    }
                    Property::List(ct, it) => {
                        let b = bytes.get(pos..pos + ct.size()).ok_or_else(truncated)?;
                        let n = ct.read(b) as usize;
                        pos += ct.size();
                        let mut items = Vec::with_capacity(n);
                        for _ in 0..n {
                            let b = bytes.get(pos..pos + it.size()).ok_or_else(truncated)?;
                            items.push(it.read(b) as u32);
                            pos += it.size();
                        }
                        lists.push(items);
                        row.push(f64::NAN);
                    }
                }
            }
            rows.push(row);
        }
        out.push((el, rows, lists));
    }
    Ok(PlyData { elements: out })
}

fn scalar_index(el: &Element, name: &str) -> Option<usize> {
    el.properties
        .iter()
        .position(|p| matches!(p, Property::Scalar(n, _) if n == name))
}

fn vec3_column(el: &Element, rows: &[Vec<f64>], names: [&str; 3]) -> Option<Vec<Vec3>> {
    let idx = [scalar_index(el, names[0])?, scalar_index(el, names[1])?, scalar_index(el, names[2])?];
    Some(rows.iter().map(|r| Vec3::new(r[idx[0]], r[idx[1]], r[idx[2]])).collect())
}

pub fn decode_ply_cloud(bytes: &[u8]) -> Result<PointCloud, FormatError> {
    let ply = parse_ply(bytes)?;
    let (el, rows, _) = ply
        .elements
        .iter()
        .find(|(e, _, _)| e.name == "vertex")
        .ok_or_else(|| FormatError::Ply("no vertex element".into()))?;
    let points = vec3_column(el, rows, ["x", "y", "z"]).ok_or_else(|| FormatError::Ply("missing x/y/z".into()))?;
    let colors = vec3_column(el, rows, ["red", "green", "blue"]).map(|c| c.into_iter().map(|v| v / 255.0).collect());
    let normals = vec3_column(el, rows, ["nx", "ny", "nz"]);
    Ok(PointCloud {
        points,
        colors,
        normals,
        frame: Default::default(),
    })
}

pub fn decode_ply_mesh(bytes: &[u8]) -> Result<TriangleMesh, FormatError> {
    let ply = parse_ply(bytes)?;
    let mut vertices = None;
    let mut triangles = Vec::new();
    for (el, rows, lists) in &ply.elements {
        match el.name.as_str() {
            "vertex" => {
                vertices = Some(vec3_column(el, rows, ["x", "y", "z"]).ok_or_else(|| FormatError::Ply("missing x/y/z".into()))?)
            }
            "face" => {
                for l in lists {
                    if l.len() < 3 {
                        return Err(FormatError::Ply("face with fewer than 3 vertices".into()));
                    }
                    // fan-triangulate polygons
                    for k in 1..l.len() - 1 {
                        triangles.push([l[0], l[k], l[k + 1]]);
                    }
                }
            }
            _ => {}
        }
    }
    let vertices = vertices.ok_or_else(|| FormatError::Ply("no vertex element".into()))?;
    if let Some(bad) = triangles.iter().flatten().find(|&&i| i as usize >= vertices.len()) {
        return Err(FormatError::Ply(format!("face index {bad} out of range")));
    }
    Ok(TriangleMesh { vertices, triangles })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_cloud(path: &Path) -> Result<PointCloud, FormatError> {
    decode_ply_cloud(&fs::read(path)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<(), FormatError> {
    Ok(write_bytes(path, &encode_ply_cloud(cloud))?)
}

pub fn read_mesh(path: &Path) -> Result<TriangleMesh, FormatError> {
    decode_ply_mesh(&fs::read(path)?)
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<(), FormatError> {
    Ok(write_bytes(path, &encode_ply_mesh(mesh))?)
}

pub fn read_depth(path: &Path) -> Result<DepthImage, FormatError> {
    decode_depth_pgm(&fs::read(path)?)
}

pub fn read_color(path: &Path) -> Result<ColorImage, FormatError> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, FormatError> {
    decode_mask_pgm(&fs::read(path)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> crate::Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_bytes(path, text.as_bytes())?;
    Ok(())
}
