//! PLY reading and writing for voxelized point clouds.
//!
//! Supported: `ascii` and `binary_little_endian` bodies, vertex coordinates
//! of any scalar type (integral values only), and colors given either as
//! `uchar red, green, blue` or `float Y, Cb, Cr`. Other vertex properties
//! and other elements are skipped.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{min_bit_depth, ColorMatrix, PointCloud};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Ascii,
    BinaryLittleEndian,
}

impl FromStr for Encoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascii" => Ok(Encoding::Ascii),
            "binary" | "binary_little_endian" => Ok(Encoding::BinaryLittleEndian),
            _ => Err(Error::Config(format!("unknown PLY encoding '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorMode {
    /// 8-bit RGB, converted from YCbCr with rounding and clamping.
    Rgb8,
    /// 32-bit float Y, Cb, Cr; lossless for the in-memory representation.
    YcbcrFloat,
}

impl FromStr for ColorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb8" => Ok(ColorMode::Rgb8),
            "ycbcr_float" | "ycbcr" => Ok(ColorMode::YcbcrFloat),
            _ => Err(Error::Config(format!("unknown color mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReadOptions {
    /// Average the attributes of repeated coordinates instead of failing.
    pub dedup: bool,
    pub matrix: ColorMatrix,
    /// Used when the file carries no `comment bit_depth N` line.
    /// `None` infers the smallest depth holding every coordinate.
    pub bit_depth: Option<u8>,
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

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]),
        }
    }
}

#[derive(Clone, Debug)]
enum PropKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Property {
    name: String,
    kind: PropKind,
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    encoding: Encoding,
    bit_depth: Option<u8>,
    elements: Vec<Element>,
    body_offset: usize,
}

fn header_err(msg: impl Into<String>) -> Error {
    Error::PlyHeader(msg.into())
}

fn body_err(msg: impl Into<String>) -> Error {
    Error::PlyBody(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    const END: &[u8] = b"end_header";
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| header_err("missing end_header"))?;
        let line = &rest[..nl];
        pos += nl + 1;
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line == END {
            break;
        }
        let text = std::str::from_utf8(line).map_err(|_| header_err("header is not valid UTF-8"))?;
        lines.push(text.trim().to_string());
    }

    let mut it = lines.iter();
    if it.next().map(String::as_str) != Some("ply") {
        return Err(header_err("missing 'ply' magic line"));
    }
    let mut encoding = None;
    let mut bit_depth = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in it {
        let mut words = line.split_whitespace();
        match words.next() {
            None => {}
            Some("format") => {
                let fmt = words.next().ok_or_else(|| header_err("format line without a format"))?;
                encoding = Some(match fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLittleEndian,
                    other => return Err(header_err(format!("unsupported format '{other}'"))),
                });
            }
            Some("comment") => {
                if words.next() == Some("bit_depth") {
                    let d: u8 = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| header_err("malformed 'comment bit_depth' line"))?;
                    bit_depth = Some(d);
                }
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = words.next().ok_or_else(|| header_err("element without a name"))?;
                let count = words
                    .next()
                    .and_then(|w| w.parse::<usize>().ok())
                    .ok_or_else(|| header_err(format!("element '{name}' has no valid count")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err("property declared before any element"))?;
                let ty = words.next().ok_or_else(|| header_err("property without a type"))?;
                let kind = if ty == "list" {
                    let count = words.next().and_then(Scalar::parse);
                    let item = words.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(c), Some(i)) if !c.is_float() => PropKind::List { count: c, item: i },
                        _ => return Err(header_err(format!("malformed list property: '{line}'"))),
                    }
                } else {
                    PropKind::Scalar(
                        Scalar::parse(ty).ok_or_else(|| header_err(format!("unsupported property type '{ty}'")))?,
                    )
                };
                let name = words.next().ok_or_else(|| header_err("property without a name"))?;
                el.props.push(Property { name: name.to_string(), kind });
            }
            Some(other) => return Err(header_err(format!("unexpected header keyword '{other}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| header_err("missing format line"))?;
    Ok(Header { encoding, bit_depth, elements, body_offset: pos })
}

enum ColorSource {
    Rgb([usize; 3]),
    Ycbcr([usize; 3]),
}

struct VertexLayout {
    xyz: [usize; 3],
    color: ColorSource,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |name: &str| el.props.iter().position(|p| p.name == name);
    let scalar_of = |i: usize| match el.props[i].kind {
        PropKind::Scalar(s) => Ok(s),
        PropKind::List { .. } => Err(header_err(format!("vertex property '{}' is a list", el.props[i].name))),
    };
    let mut xyz = [0; 3];
    for (slot, name) in xyz.iter_mut().zip(["x", "y", "z"]) {
        *slot = find(name).ok_or_else(|| header_err(format!("vertex element lacks property '{name}'")))?;
        scalar_of(*slot)?;
    }
    let ycc = (find("Y"), find("Cb"), find("Cr"));
    let rgb = (find("red"), find("green"), find("blue"));
    let color = if let (Some(y), Some(cb), Some(cr)) = ycc {
        for i in [y, cb, cr] {
            if !scalar_of(i)?.is_float() {
                return Err(header_err(format!(
                    "unsupported type for '{}': Y/Cb/Cr must be float or double",
                    el.props[i].name
                )));
            }
        }
        ColorSource::Ycbcr([y, cb, cr])
    } else if let (Some(r), Some(g), Some(b)) = rgb {
        for i in [r, g, b] {
            if scalar_of(i)? != Scalar::U8 {
                return Err(header_err(format!(
                    "unsupported type for '{}': red/green/blue must be uchar",
                    el.props[i].name
                )));
            }
        }
        ColorSource::Rgb([r, g, b])
    } else {
        return Err(header_err("vertex element has neither red/green/blue nor Y/Cb/Cr"));
    };
    let used: Vec<usize> = xyz
        .iter()
        .chain(match &color {
            ColorSource::Rgb(c) | ColorSource::Ycbcr(c) => c.iter(),
        })
        .copied()
        .collect();
    for (i, p) in el.props.iter().enumerate() {
        if !used.contains(&i) {
            log::warn!("skipping unknown vertex property '{}'", p.name);
        }
    }
    Ok(VertexLayout { xyz, color })
}

/// Token or byte source for element rows.
trait Body {
    fn scalar(&mut self, ty: Scalar) -> Result<f64>;
}

struct AsciiBody<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
}

impl Body for AsciiBody<'_> {
    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        let tok = self.tokens.next().ok_or_else(|| body_err("unexpected end of data"))?;
        let v: f64 = tok.parse().map_err(|_| body_err(format!("invalid number '{tok}'")))?;
        if !ty.is_float() && v.fract() != 0.0 {
            return Err(body_err(format!("non-integer '{tok}' for an integer property")));
        }
        Ok(v)
    }
}

struct BinaryBody<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Body for BinaryBody<'_> {
    fn scalar(&mut self, ty: Scalar) -> Result<f64> {
        let n = ty.size();
        let chunk = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| body_err("unexpected end of data"))?;
        self.pos += n;
        Ok(ty.decode_le(chunk))
    }
}

const MAX_LIST_LEN: f64 = 1_000_000.0;

fn read_row(body: &mut dyn Body, el: &Element, row: &mut Vec<f64>) -> Result<()> {
    row.clear();
    for p in &el.props {
        match p.kind {
            PropKind::Scalar(s) => row.push(body.scalar(s)?),
            PropKind::List { count, item } => {
                let len = body.scalar(count)?;
                if !(0.0..=MAX_LIST_LEN).contains(&len) {
                    return Err(body_err(format!("list length {len} out of range")));
                }
                for _ in 0..len as usize {
                    body.scalar(item)?;
                }
                row.push(f64::NAN);
            }
        }
    }
    Ok(())
}

fn coordinate(v: f64, point: usize) -> Result<u32> {
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX)) {
        return Err(body_err(format!(
            "coordinate {v} of point {point} is not a non-negative integer"
        )));
    }
    Ok(v as u32)
}

/// Parses a complete PLY file held in memory.
pub fn parse_ply(bytes: &[u8], opts: &ReadOptions) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_err("no vertex element"))?;
    let layout = vertex_layout(&header.elements[vertex_pos])?;

    let data = &bytes[header.body_offset..];
    let mut ascii;
    let mut binary;
    let body: &mut dyn Body = match header.encoding {
        Encoding::Ascii => {
            let text = std::str::from_utf8(data).map_err(|_| body_err("ascii body is not valid UTF-8"))?;
            ascii = AsciiBody { tokens: text.split_ascii_whitespace() };
            &mut ascii
        }
        Encoding::BinaryLittleEndian => {
            binary = BinaryBody { bytes: data, pos: 0 };
            &mut binary
        }
    };

    let vcount = header.elements[vertex_pos].count;
    // Each row occupies at least one byte; never reserve more than the input can hold.
    let reserve = vcount.min(data.len());
    let mut geometry = Vec::with_capacity(reserve);
    let mut attributes = Vec::with_capacity(reserve);
    let mut row = Vec::new();
    for el in &header.elements {
        if el.name != "vertex" {
            if el.props.is_empty() {
                continue;
            }
            for _ in 0..el.count {
                read_row(body, el, &mut row)?;
            }
            continue;
        }
        for i in 0..el.count {
            read_row(body, el, &mut row)?;
            let p = [
                coordinate(row[layout.xyz[0]], i)?,
                coordinate(row[layout.xyz[1]], i)?,
                coordinate(row[layout.xyz[2]], i)?,
            ];
            let a = match layout.color {
                ColorSource::Ycbcr([y, cb, cr]) => [row[y] as f32, row[cb] as f32, row[cr] as f32],
                ColorSource::Rgb([r, g, b]) => {
                    let (y, cb, cr) = opts.matrix.to_ycbcr(row[r], row[g], row[b]);
                    [y as f32, cb as f32, cr as f32]
                }
            };
            geometry.push(p);
            attributes.push(a);
        }
    }

    let depth = header
        .bit_depth
        .or(opts.bit_depth)
        .unwrap_or_else(|| min_bit_depth(&geometry));
    if opts.dedup {
        PointCloud::dedup(geometry, attributes, depth)
    } else {
        PointCloud::new(geometry, attributes, depth)
    }
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_ply_with(path, &ReadOptions::default())
}

pub fn read_ply_with(path: impl AsRef<Path>, opts: &ReadOptions) -> Result<PointCloud> {
    let bytes = std::fs::read(path.as_ref())?;
    parse_ply(&bytes, opts)
}

pub fn write_ply(pc: &PointCloud, path: impl AsRef<Path>, encoding: Encoding, color: ColorMode) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    write_ply_to(pc, &mut w, encoding, color, ColorMatrix::default())?;
    w.flush()?;
    Ok(())
}

pub fn write_ply_to<W: Write>(
    pc: &PointCloud,
    w: &mut W,
    encoding: Encoding,
    color: ColorMode,
    matrix: ColorMatrix,
) -> Result<()> {
    let format = match encoding {
        Encoding::Ascii => "ascii",
        Encoding::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {format} 1.0\ncomment bit_depth {}", pc.bit_depth())?;
    writeln!(w, "element vertex {}", pc.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z")?;
    match color {
        ColorMode::Rgb8 => writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue")?,
        ColorMode::YcbcrFloat => writeln!(w, "property float Y\nproperty float Cb\nproperty float Cr")?,
    }
    writeln!(w, "end_header")?;

    for (p, a) in pc.geometry().iter().zip(pc.attributes()) {
        let xyz = [p[0] as f32, p[1] as f32, p[2] as f32];
        match (encoding, color) {
            (Encoding::Ascii, ColorMode::YcbcrFloat) => {
                writeln!(w, "{} {} {} {} {} {}", xyz[0], xyz[1], xyz[2], a[0], a[1], a[2])?
            }
            (Encoding::Ascii, ColorMode::Rgb8) => {
                let c = to_rgb8(matrix, a);
                writeln!(w, "{} {} {} {} {} {}", xyz[0], xyz[1], xyz[2], c[0], c[1], c[2])?
            }
            (Encoding::BinaryLittleEndian, mode) => {
                for v in xyz {
                    w.write_all(&v.to_le_bytes())?;
                }
                match mode {
                    ColorMode::YcbcrFloat => {
                        for v in a {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                    ColorMode::Rgb8 => w.write_all(&to_rgb8(matrix, a))?,
                }
            }
        }
    }
    Ok(())
}

fn to_rgb8(matrix: ColorMatrix, a: &[f32; 3]) -> [u8; 3] {
    let (r, g, b) = matrix.to_rgb(f64::from(a[0]), f64::from(a[1]), f64::from(a[2]));
    [r, g, b].map(|v| v.round().clamp(0.0, 255.0) as u8)
}
