//! PLY point cloud reader/writer.
//!
//! Writes `float x, y, z` plus optional `uchar label`, `uchar visibility`
//! and `float confidence`. Reads ASCII and binary little-endian files with
//! any scalar property types; unknown properties and elements are skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::cloud::{ChangeClass, Point, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("unknown PLY type `{other}`"))),
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

    fn decode(self, b: &[u8]) -> f64 {
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

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn write_ply<W: Write>(out: W, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    let mut w = BufWriter::new(out);
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", cloud.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    let labels = cloud.labels();
    let vis = cloud.visibility();
    let conf = cloud.confidences();
    if labels.is_some() {
        writeln!(w, "property uchar label")?;
    }
    if vis.is_some() {
        writeln!(w, "property uchar visibility")?;
    }
    if conf.is_some() {
        writeln!(w, "property float confidence")?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points().iter().enumerate() {
        let xyz = [p.x as f32, p.y as f32, p.z as f32];
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", xyz[0], xyz[1], xyz[2])?;
                if let Some(l) = labels {
                    write!(w, " {}", l[i].as_u8())?;
                }
                if let Some(v) = vis {
                    write!(w, " {}", v[i])?;
                }
                if let Some(c) = conf {
                    write!(w, " {}", c[i] as f32)?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for c in xyz {
                    w.write_all(&c.to_le_bytes())?;
                }
                if let Some(l) = labels {
                    w.write_all(&[l[i].as_u8()])?;
                }
                if let Some(v) = vis {
                    w.write_all(&[v[i]])?;
                }
                if let Some(c) = conf {
                    w.write_all(&(c[i] as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_header<R: BufRead>(r: &mut R) -> Result<(PlyFormat, Vec<Element>)> {
    let mut line = String::new();
    let next = |r: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(())
    };
    next(r, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Format("missing `ply` magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, ..] => return Err(Error::Format(format!("unsupported PLY format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| Error::Format(format!("bad element count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                el.props.push(Property::List { count: Scalar::parse(ct)?, item: Scalar::parse(it)? });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Format("property before element".into()))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            ["end_header"] => break,
            _ => return Err(Error::Format(format!("unrecognized header line `{}`", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| Error::Format("missing format line".into()))?;
    Ok((format, elements))
}

#[derive(Default)]
struct Columns {
    x: Option<usize>,
    y: Option<usize>,
    z: Option<usize>,
    label: Option<usize>,
    visibility: Option<usize>,
    confidence: Option<usize>,
}

fn vertex_columns(el: &Element) -> Result<Columns> {
    let mut c = Columns::default();
    for (i, p) in el.props.iter().enumerate() {
        match p {
            Property::Scalar { name, .. } => match name.as_str() {
                "x" => c.x = Some(i),
                "y" => c.y = Some(i),
                "z" => c.z = Some(i),
                "label" => c.label = Some(i),
                "visibility" => c.visibility = Some(i),
                "confidence" => c.confidence = Some(i),
                _ => {}
            },
            Property::List { .. } => {
                return Err(Error::Format("list properties on vertices are not supported".into()))
            }
        }
    }
    if c.x.is_none() || c.y.is_none() || c.z.is_none() {
        return Err(Error::Format("vertex element lacks x/y/z".into()));
    }
    Ok(c)
}

struct RawVertices {
    points: Vec<Point>,
    labels: Vec<u8>,
    visibility: Vec<u8>,
    confidence: Vec<f64>,
}

impl RawVertices {
    fn push(&mut self, row: &[f64], c: &Columns) -> Result<()> {
        self.points.push(Point::new(row[c.x.unwrap()], row[c.y.unwrap()], row[c.z.unwrap()]));
        if let Some(i) = c.label {
            let v = row[i];
            if !(0.0..=2.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Format(format!("invalid label value {v}")));
            }
            self.labels.push(v as u8);
        }
        if let Some(i) = c.visibility {
            self.visibility.push(row[i] as u8);
        }
        if let Some(i) = c.confidence {
            self.confidence.push(row[i]);
        }
        Ok(())
    }

    fn finish(self, c: &Columns) -> Result<PointCloud> {
        let mut cloud = PointCloud::new(self.points)?;
        if c.label.is_some() {
            cloud = cloud.with_labels(self.labels.into_iter().map(|l| ChangeClass::from_u8(l).unwrap()).collect())?;
        }
        if c.visibility.is_some() {
            cloud = cloud.with_visibility(self.visibility)?;
        }
        if c.confidence.is_some() {
            cloud = cloud.with_confidences(self.confidence)?;
        }
        Ok(cloud)
    }
}

fn parse_ascii(tok: &str, prop: &Property) -> Result<f64> {
    let bad = || Error::Format(format!("bad number `{tok}`"));
    match prop {
        // round through f32 so ASCII and binary files decode identically
        Property::Scalar { ty: Scalar::F32, .. } => tok.parse::<f32>().map(f64::from).map_err(|_| bad()),
        _ => tok.parse::<f64>().map_err(|_| bad()),
    }
}

pub fn read_ply<R: BufRead>(mut r: R) -> Result<PointCloud> {
    let (format, elements) = read_header(&mut r)?;
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Format("no vertex element".into()))?;
    let cols = vertex_columns(&elements[vertex_pos])?;
    let n = elements[vertex_pos].count;
    let mut raw = RawVertices {
        points: Vec::with_capacity(n),
        labels: Vec::new(),
        visibility: Vec::new(),
        confidence: Vec::new(),
    };
    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for el in &elements[..=vertex_pos] {
                for _ in 0..el.count {
                    line.clear();
                    if r.read_line(&mut line)? == 0 {
                        return Err(Error::Format("truncated PLY body".into()));
                    }
                    if el.name != "vertex" {
                        continue;
                    }
                    let toks: Vec<&str> = line.split_whitespace().collect();
                    if toks.len() != el.props.len() {
                        return Err(Error::Format("vertex row has the wrong number of values".into()));
                    }
                    let row: Vec<f64> = toks
                        .iter()
                        .zip(&el.props)
                        .map(|(t, p)| parse_ascii(t, p))
                        .collect::<Result<_>>()?;
                    raw.push(&row, &cols)?;
                }
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            let mut row = Vec::new();
            for el in &elements[..=vertex_pos] {
                for _ in 0..el.count {
                    row.clear();
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, .. } => {
                                r.read_exact(&mut buf[..ty.size()])?;
                                row.push(ty.decode(&buf));
                            }
                            Property::List { count, item } => {
                                r.read_exact(&mut buf[..count.size()])?;
                                let k = count.decode(&buf) as usize;
                                for _ in 0..k {
                                    r.read_exact(&mut buf[..item.size()])?;
                                }
                                row.push(0.0);
                            }
                        }
                    }
                    if el.name == "vertex" {
                        raw.push(&row, &cols)?;
                    }
                }
            }
        }
    }
    raw.finish(&cols)
}

pub fn save_ply(path: impl AsRef<Path>, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    write_ply(File::create(path)?, cloud, format)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply(BufReader::new(File::open(path)?))
}

/// Binary PLY encoding, used for content comparisons.
pub fn to_ply_bytes(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::new();
    write_ply(&mut out, cloud, PlyFormat::BinaryLittleEndian).expect("writing to memory");
    out
}
