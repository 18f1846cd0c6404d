//! Binary little-endian PLY reading and writing for splat scenes and point
//! clouds.
//!
//! Splat scenes store scale in log space and opacity as a pre-sigmoid logit;
//! loading converts both into the linear/probability space the rest of the
//! crate works in. SH coefficient properties (`f_dc_*`, `f_rest_*`) pass
//! through verbatim and are never interpreted.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::types::{CloudPoint, GaussianPrimitive};

use super::{LoadOptions, LoadSummary, ParseMode};

/// Scalar types a property may carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyType {
    Char,
    UChar,
    Short,
    UShort,
    Int,
    UInt,
    Float,
    Double,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::Char,
            "uchar" | "uint8" => PlyType::UChar,
            "short" | "int16" => PlyType::Short,
            "ushort" | "uint16" => PlyType::UShort,
            "int" | "int32" => PlyType::Int,
            "uint" | "uint32" => PlyType::UInt,
            "float" | "float32" => PlyType::Float,
            "double" | "float64" => PlyType::Double,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::Char | PlyType::UChar => 1,
            PlyType::Short | PlyType::UShort => 2,
            PlyType::Int | PlyType::UInt | PlyType::Float => 4,
            PlyType::Double => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PlyType::Char => "char",
            PlyType::UChar => "uchar",
            PlyType::Short => "short",
            PlyType::UShort => "ushort",
            PlyType::Int => "int",
            PlyType::UInt => "uint",
            PlyType::Float => "float",
            PlyType::Double => "double",
        }
    }

    fn read(self, bytes: &[u8]) -> f64 {
        match self {
            PlyType::Char => bytes[0] as i8 as f64,
            PlyType::UChar => bytes[0] as f64,
            PlyType::Short => LittleEndian::read_i16(bytes) as f64,
            PlyType::UShort => LittleEndian::read_u16(bytes) as f64,
            PlyType::Int => LittleEndian::read_i32(bytes) as f64,
            PlyType::UInt => LittleEndian::read_u32(bytes) as f64,
            PlyType::Float => LittleEndian::read_f32(bytes) as f64,
            PlyType::Double => LittleEndian::read_f64(bytes),
        }
    }
}

/// One vertex property: name, scalar type, and byte offset inside a record.
#[derive(Clone, Debug)]
pub struct PlyProperty {
    pub name: String,
    pub ty: PlyType,
    offset: usize,
}

/// Parsed header of a binary little-endian PLY vertex container.
#[derive(Clone, Debug)]
pub struct PlyHeader {
    pub count: usize,
    pub properties: Vec<PlyProperty>,
    record_size: usize,
}

impl PlyHeader {
    pub fn record_size(&self) -> usize {
        self.record_size
    }

    fn find(&self, name: &str) -> Option<&PlyProperty> {
        self.properties.iter().find(|p| p.name == name)
    }

    fn require(&self, names: &[&str], path: &Path) -> Result<Vec<PlyProperty>> {
        let missing: Vec<String> = names
            .iter()
            .filter(|n| self.find(n).is_none())
            .map(|n| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingProperties {
                path: path.to_path_buf(),
                missing,
            });
        }
        Ok(names.iter().map(|n| self.find(n).unwrap().clone()).collect())
    }
}

/// Parses the header and returns it with the byte offset of the first
/// record.
pub fn read_header(data: &[u8], path: &Path) -> Result<(PlyHeader, usize)> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<String> {
        let start = pos;
        while pos < data.len() && data[pos] != b'\n' {
            pos += 1;
        }
        if pos >= data.len() {
            return Err(Error::parse(path, "unterminated header"));
        }
        let line = std::str::from_utf8(&data[start..pos])
            .map_err(|_| Error::parse(path, "non-ascii header"))?
            .trim_end_matches('\r')
            .trim()
            .to_string();
        pos += 1;
        Ok(line)
    };

    if next_line()? != "ply" {
        return Err(Error::parse(path, "not a PLY file (missing `ply` magic)"));
    }
    let format = next_line()?;
    if format != "format binary_little_endian 1.0" {
        return Err(Error::parse(
            path,
            format!("unsupported format `{format}` (need binary_little_endian 1.0)"),
        ));
    }

    let mut count: Option<usize> = None;
    let mut properties: Vec<PlyProperty> = Vec::new();
    let mut offset = 0usize;
    loop {
        let line = next_line()?;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => continue,
            Some("element") => {
                let kind = words.next().unwrap_or("");
                if kind != "vertex" {
                    return Err(Error::parse(path, format!("unsupported element `{kind}`")));
                }
                if count.is_some() {
                    return Err(Error::parse(path, "duplicate vertex element"));
                }
                count = Some(
                    words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| Error::parse(path, "bad element count"))?,
                );
            }
            Some("property") => {
                if count.is_none() {
                    return Err(Error::parse(path, "property before element"));
                }
                let ty_word = words.next().unwrap_or("");
                if ty_word == "list" {
                    return Err(Error::parse(path, "list properties are not supported"));
                }
                let ty = PlyType::parse(ty_word)
                    .ok_or_else(|| Error::parse(path, format!("unknown type `{ty_word}`")))?;
                let name = words
                    .next()
                    .ok_or_else(|| Error::parse(path, "property without a name"))?
                    .to_string();
                properties.push(PlyProperty { name, ty, offset });
                offset += ty.size();
            }
            Some(other) => {
                return Err(Error::parse(path, format!("unexpected keyword `{other}`")));
            }
        }
    }
    let count = count.ok_or_else(|| Error::parse(path, "no vertex element"))?;
    Ok((
        PlyHeader {
            count,
            properties,
            record_size: offset,
        },
        pos,
    ))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn records<'a>(data: &'a [u8], header: &PlyHeader, start: usize, path: &Path) -> Result<Vec<&'a [u8]>> {
    let need = header.count * header.record_size;
    if data.len() < start + need {
        return Err(Error::parse(
            path,
            format!(
                "truncated payload: need {need} bytes for {} records, found {}",
                header.count,
                data.len().saturating_sub(start)
            ),
        ));
    }
    Ok((0..header.count)
        .map(|i| {
            let at = start + i * header.record_size;
            &data[at..at + header.record_size]
        })
        .collect())
}

fn field(record: &[u8], prop: &PlyProperty) -> f64 {
    prop.ty.read(&record[prop.offset..])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const SPLAT_REQUIRED: [&str; 10] = [
    "x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
];

/// Loads a splat scene. Stored log-scales become linear extents, logit
/// opacities become probabilities, quaternions (stored (w,x,y,z)) are
/// normalized, and any `f_dc_*`/`f_rest_*` properties ride along untouched.
pub fn load_splats(
    path: impl AsRef<Path>,
    options: &LoadOptions,
) -> Result<(Vec<GaussianPrimitive>, LoadSummary)> {
    let path = path.as_ref();
    let data = read_file(path)?;
    let (header, start) = read_header(&data, path)?;

    let mut required: Vec<&str> = SPLAT_REQUIRED.to_vec();
    required.push("rot_3");
    let props = header.require(&required, path)?;
    let sh_props: Vec<PlyProperty> = header
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_dc_") || p.name.starts_with("f_rest_"))
        .cloned()
        .collect();

    let mut gaussians = Vec::with_capacity(header.count);
    let mut summary = LoadSummary {
        records: header.count,
        ..LoadSummary::default()
    };
    for (index, record) in records(&data, &header, start, path)?.into_iter().enumerate() {
        let values: Vec<f64> = props.iter().map(|p| field(record, p)).collect();
        let build = || -> Result<GaussianPrimitive> {
            for (value, prop) in values.iter().zip(&props) {
                if !value.is_finite() {
                    return Err(Error::validation(&prop.name, "non-finite value"));
                }
            }
            let sh: Vec<f32> = sh_props.iter().map(|p| field(record, p) as f32).collect();
            GaussianPrimitive::new(
                Vector3::new(values[0], values[1], values[2]),
                Quaternion::new(values[7], values[8], values[9], values[10]),
                Vector3::new(values[4].exp(), values[5].exp(), values[6].exp()),
                sigmoid(values[3]),
                sh,
                options.epsilon_sigma,
            )
        };
        match build() {
            Ok(g) => {
                gaussians.push(g);
                summary.loaded += 1;
            }
            Err(e) => match options.mode {
                ParseMode::Strict => {
                    return Err(Error::BadRecord {
                        path: path.to_path_buf(),
                        index,
                        message: e.to_string(),
                    })
                }
                ParseMode::Lenient => summary.dropped.push(index),
            },
        }
    }
    Ok((gaussians, summary))
}

/// Loads a point cloud. Colors come back normalized to [0,1] (integer-typed
/// color properties are divided by 255), nonzero normals are renormalized to
/// unit length, absent normals become zero vectors and are counted in the
/// summary, and a `label` property populates the semantic label.
pub fn load_points(
    path: impl AsRef<Path>,
    options: &LoadOptions,
) -> Result<(Vec<CloudPoint>, LoadSummary)> {
    let path = path.as_ref();
    let data = read_file(path)?;
    let (header, start) = read_header(&data, path)?;
    let position = header.require(&["x", "y", "z"], path)?;

    let color: Option<Vec<PlyProperty>> =
        match (header.find("red"), header.find("green"), header.find("blue")) {
            (Some(r), Some(g), Some(b)) => Some(vec![r.clone(), g.clone(), b.clone()]),
            _ => None,
        };
    let normal: Option<Vec<PlyProperty>> =
        match (header.find("nx"), header.find("ny"), header.find("nz")) {
            (Some(x), Some(y), Some(z)) => Some(vec![x.clone(), y.clone(), z.clone()]),
            _ => None,
        };
    let label = header.find("label").cloned();

    let mut points = Vec::with_capacity(header.count);
    let mut summary = LoadSummary {
        records: header.count,
        ..LoadSummary::default()
    };
    for (index, record) in records(&data, &header, start, path)?.into_iter().enumerate() {
        let build = || -> Result<CloudPoint> {
            let pos = Vector3::new(
                field(record, &position[0]),
                field(record, &position[1]),
                field(record, &position[2]),
            );
            let rgb = match &color {
                Some(props) => {
                    let mut c = Vector3::new(
                        field(record, &props[0]),
                        field(record, &props[1]),
                        field(record, &props[2]),
                    );
                    if props.iter().any(|p| {
                        !matches!(p.ty, PlyType::Float | PlyType::Double)
                    }) {
                        c /= 255.0;
                    }
                    c
                }
                None => Vector3::zeros(),
            };
            let n = match &normal {
                Some(props) => {
                    let raw = Vector3::new(
                        field(record, &props[0]),
                        field(record, &props[1]),
                        field(record, &props[2]),
                    );
                    let len = raw.norm();
                    if len > 1e-12 {
                        raw / len
                    } else {
                        Vector3::zeros()
                    }
                }
                None => Vector3::zeros(),
            };
            let mut point = CloudPoint::new(pos, rgb, n);
            if let Some(prop) = &label {
                let raw = field(record, prop);
                if raw < 0.0 || raw > u16::MAX as f64 || raw.fract() != 0.0 {
                    return Err(Error::validation("label", format!("bad class id {raw}")));
                }
                point.label = Some(raw as u16);
            }
            point.validate()?;
            Ok(point)
        };
        match build() {
            Ok(p) => {
                points.push(p);
                summary.loaded += 1;
            }
            Err(e) => match options.mode {
                ParseMode::Strict => {
                    return Err(Error::BadRecord {
                        path: path.to_path_buf(),
                        index,
                        message: e.to_string(),
                    })
                }
                ParseMode::Lenient => summary.dropped.push(index),
            },
        }
    }
    if normal.is_none() {
        summary.missing_normals = summary.loaded;
    }
    if color.is_none() {
        summary.missing_colors = summary.loaded;
    }
    Ok((points, summary))
}

fn header_text(count: usize, properties: &[(&str, &str)]) -> String {
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out.push_str(&format!("element vertex {count}\n"));
    for (ty, name) in properties {
        out.push_str(&format!("property {ty} {name}\n"));
    }
    out.push_str("end_header\n");
    out
}

/// Writes a splat scene with the standard on-disk encodings (log scale,
/// logit opacity). All primitives must carry SH payloads of the same length.
pub fn save_splats(path: impl AsRef<Path>, gaussians: &[GaussianPrimitive]) -> Result<()> {
    let path = path.as_ref();
    let sh_len = gaussians.first().map(|g| g.sh().len()).unwrap_or(0);
    if gaussians.iter().any(|g| g.sh().len() != sh_len) {
        return Err(Error::validation(
            "sh",
            "all primitives must have equal SH payload length",
        ));
    }
    let sh_names: Vec<String> = (0..sh_len)
        .map(|i| {
            if i < 3 {
                format!("f_dc_{i}")
            } else {
                format!("f_rest_{}", i - 3)
            }
        })
        .collect();
    let mut properties: Vec<(&str, &str)> = vec![("float", "x"), ("float", "y"), ("float", "z")];
    for name in &sh_names {
        properties.push(("float", name));
    }
    properties.extend([
        ("float", "opacity"),
        ("float", "scale_0"),
        ("float", "scale_1"),
        ("float", "scale_2"),
        ("float", "rot_0"),
        ("float", "rot_1"),
        ("float", "rot_2"),
        ("float", "rot_3"),
    ]);

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(header_text(gaussians.len(), &properties).as_bytes())
        .map_err(io_err)?;
    for g in gaussians {
        for c in g.centroid().iter() {
            w.write_f32::<LittleEndian>(*c as f32).map_err(io_err)?;
        }
        for &v in g.sh() {
            w.write_f32::<LittleEndian>(v).map_err(io_err)?;
        }
        // inverse of the load-time sigmoid; clamp keeps the logit finite
        let alpha = g.opacity().clamp(1e-7, 1.0 - 1e-7);
        w.write_f32::<LittleEndian>((alpha / (1.0 - alpha)).ln() as f32)
            .map_err(io_err)?;
        for s in g.scale().iter() {
            w.write_f32::<LittleEndian>(s.ln() as f32).map_err(io_err)?;
        }
        let q = g.rotation();
        for v in [q.w, q.i, q.j, q.k] {
            w.write_f32::<LittleEndian>(v as f32).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Writes a point cloud with float colors, normals when any point has one,
/// and a ushort label property when every point is labeled.
pub fn save_points(path: impl AsRef<Path>, points: &[CloudPoint]) -> Result<()> {
    let path = path.as_ref();
    let with_normals = points.iter().any(|p| p.normal != Vector3::zeros());
    let with_labels = !points.is_empty() && points.iter().all(|p| p.label.is_some());

    let mut properties: Vec<(&str, &str)> = vec![
        ("float", "x"),
        ("float", "y"),
        ("float", "z"),
        ("float", "red"),
        ("float", "green"),
        ("float", "blue"),
    ];
    if with_normals {
        properties.extend([("float", "nx"), ("float", "ny"), ("float", "nz")]);
    }
    if with_labels {
        properties.push(("ushort", "label"));
    }

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(header_text(points.len(), &properties).as_bytes())
        .map_err(io_err)?;
    for p in points {
        for v in p.position.iter().chain(p.color.iter()) {
            w.write_f32::<LittleEndian>(*v as f32).map_err(io_err)?;
        }
        if with_normals {
            for v in p.normal.iter() {
                w.write_f32::<LittleEndian>(*v as f32).map_err(io_err)?;
            }
        }
        if with_labels {
            w.write_u16::<LittleEndian>(p.label.unwrap()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}
