//! Point-cloud files: a PLY subset (ASCII and binary little-endian; `x y z`
//! plus optional 8-bit `red green blue`) and raw `.xyz` float32 triplets.

use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

struct Header {
    format: PlyFormat,
    count: usize,
    props: Vec<(String, Scalar)>,
    body_start: usize,
}

fn parse_err(path: &str, message: String) -> Error {
    Error::Parse {
        path: path.to_string(),
        message,
    }
}

fn parse_header(bytes: &[u8], path: &str) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let next_line = |pos: &mut usize, line_no: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..].iter().position(|b| *b == b'\n').map_or(bytes.len(), |e| *pos + e);
        let line = String::from_utf8_lossy(&bytes[*pos..end]).trim_end_matches('\r').to_string();
        *pos = (end + 1).min(bytes.len());
        *line_no += 1;
        Some((*line_no, line))
    };

    match next_line(&mut pos, &mut line_no) {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, "line 1: expected `ply` magic".into())),
    }
    let mut format = None;
    let mut count = None;
    let mut props = Vec::new();
    let mut in_vertex = false;
    loop {
        let Some((n, line)) = next_line(&mut pos, &mut line_no) else {
            return Err(parse_err(path, format!("line {}: header not terminated by end_header", line_no)));
        };
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, "1.0"] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(parse_err(path, format!("line {n}: unsupported format `{other}`"))),
                })
            }
            ["element", "vertex", c] => {
                if count.is_some() {
                    return Err(parse_err(path, format!("line {n}: duplicate vertex element")));
                }
                let c = c
                    .parse()
                    .map_err(|_| parse_err(path, format!("line {n}: bad vertex count `{c}`")))?;
                count = Some(c);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(parse_err(path, format!("line {n}: unsupported element `{name}`")));
            }
            ["property", "list", ..] => {
                return Err(parse_err(path, format!("line {n}: list properties are not supported")));
            }
            ["property", ty, name] => {
                if !in_vertex {
                    return Err(parse_err(path, format!("line {n}: property outside vertex element")));
                }
                let ty = Scalar::parse(ty).ok_or_else(|| parse_err(path, format!("line {n}: unknown type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(path, format!("line {n}: unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, "header: missing format line".into()))?;
    let count = count.ok_or_else(|| parse_err(path, "header: missing vertex element".into()))?;
    for req in ["x", "y", "z"] {
        if !props.iter().any(|(n, _)| n == req) {
            return Err(parse_err(path, format!("header: missing vertex property `{req}`")));
        }
    }
    Ok(Header {
        format,
        count,
        props,
        body_start: pos,
    })
}

pub fn parse_ply(bytes: &[u8], path: &str) -> Result<PointCloud> {
    let header = parse_header(bytes, path)?;
    let find = |n: &str| header.props.iter().position(|(p, _)| p == n);
    let (ix, iy, iz) = (find("x").unwrap(), find("y").unwrap(), find("z").unwrap());
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(header.count);
    let body = &bytes[header.body_start..];
    match header.format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| parse_err(path, "ascii body is not UTF-8".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for v in 0..header.count {
                let line = lines
                    .next()
                    .ok_or_else(|| parse_err(path, format!("vertex {v}: unexpected end of file")))?;
                let vals = line
                    .split_whitespace()
                    .zip(&header.props)
                    .map(|(t, (_, ty))| match ty {
                        Scalar::F32 => t.parse::<f32>().map(f64::from),
                        _ => t.parse::<f64>(),
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| parse_err(path, format!("vertex {v}: malformed number in `{line}`")))?;
                let found = line.split_whitespace().count();
                if found != header.props.len() {
                    return Err(parse_err(
                        path,
                        format!("vertex {v}: expected {} values, found {found}", header.props.len()),
                    ));
                }
                rows.push(vals);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = header.props.iter().map(|p| p.1.size()).sum();
            if body.len() < stride * header.count {
                return Err(parse_err(
                    path,
                    format!(
                        "byte {}: body holds {} bytes, {} vertices need {}",
                        header.body_start,
                        body.len(),
                        header.count,
                        stride * header.count
                    ),
                ));
            }
            for v in 0..header.count {
                let mut off = v * stride;
                let mut vals = Vec::with_capacity(header.props.len());
                for (_, ty) in &header.props {
                    vals.push(ty.read_le(&body[off..off + ty.size()]));
                    off += ty.size();
                }
                rows.push(vals);
            }
        }
    }
    let points: Vec<Point3> = rows.iter().map(|r| [r[ix], r[iy], r[iz]]).collect();
    let colors = rgb.map(|[r, g, b]| {
        rows.iter()
            .map(|row| [row[r] / 255.0, row[g] / 255.0, row[b] / 255.0])
            .collect()
    });
    PointCloud::new(points, colors).map_err(|e| parse_err(path, e.to_string()))
}

pub fn encode_ply(pc: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = String::from("ply\n");
    out.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    out.push_str(&format!("element vertex {}\n", pc.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if pc.colors().is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    match format {
        PlyFormat::Ascii => {
            for (i, p) in pc.points().iter().enumerate() {
                out.push_str(&format!("{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32));
                if let Some(c) = pc.colors() {
                    out.push_str(&format!(" {} {} {}", to_u8(c[i][0]), to_u8(c[i][1]), to_u8(c[i][2])));
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        PlyFormat::BinaryLittleEndian => {
            let mut bytes = out.into_bytes();
            for (i, p) in pc.points().iter().enumerate() {
                for v in p {
                    bytes.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                if let Some(c) = pc.colors() {
                    bytes.extend(c[i].iter().map(|v| to_u8(*v)));
                }
            }
            bytes
        }
    }
}

pub fn parse_xyz(bytes: &[u8], path: &str) -> Result<PointCloud> {
    if bytes.len() % 12 != 0 {
        return Err(parse_err(
            path,
            format!("byte {}: length is not a multiple of 12", bytes.len() - bytes.len() % 12),
        ));
    }
    let points = bytes
        .chunks_exact(12)
        .map(|c| [0, 4, 8].map(|o| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64))
        .collect();
    PointCloud::new(points, None).map_err(|e| parse_err(path, e.to_string()))
}

pub fn encode_xyz(pc: &PointCloud) -> Vec<u8> {
    pc.points()
        .iter()
        .flat_map(|p| p.iter().flat_map(|v| (*v as f32).to_le_bytes()))
        .collect()
}

/// Reads `.ply` or `.xyz` by extension.
pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => parse_xyz(&bytes, &name),
        _ => parse_ply(&bytes, &name),
    }
}

/// Writes `.xyz` for that extension and binary PLY otherwise.
pub fn write_cloud(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") => encode_xyz(pc),
        _ => encode_ply(pc, PlyFormat::BinaryLittleEndian),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
