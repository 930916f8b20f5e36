//! ASCII PLY / PCD / XYZ readers and writers, and transform files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Point3, Vector3};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::transform::RigidTransform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    PcdAscii,
    Xyz,
}

impl CloudFormat {
    /// Guess from the file extension (`.ply`, `.pcd`, anything else is XYZ).
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => CloudFormat::PlyAscii,
            Some("pcd") => CloudFormat::PcdAscii,
            _ => CloudFormat::Xyz,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply" | "ply-ascii" => Ok(CloudFormat::PlyAscii),
            "pcd" | "pcd-ascii" => Ok(CloudFormat::PcdAscii),
            "xyz" => Ok(CloudFormat::Xyz),
            other => Err(Error::invalid("format", format!("unknown cloud format `{other}`"))),
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, format)
}

/// Loads a cloud, picking the format from the extension.
pub fn load_cloud_auto(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    load_cloud(path, CloudFormat::from_path(path))
}

pub fn parse_cloud(text: &str, format: CloudFormat) -> Result<PointCloud> {
    let rows = match format {
        CloudFormat::PlyAscii => parse_ply(text)?,
        CloudFormat::PcdAscii => parse_pcd(text)?,
        CloudFormat::Xyz => parse_xyz(text)?,
    };
    rows.into_cloud()
}

pub fn save_cloud(path: impl AsRef<Path>, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CloudFormat::PlyAscii => write_ply(cloud),
        CloudFormat::PcdAscii => write_pcd(cloud),
        CloudFormat::Xyz => write_xyz(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Rows {
    points: Vec<Point3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
}

impl Rows {
    fn into_cloud(self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        match self.normals {
            None => PointCloud::new(self.points),
            Some(raw) => {
                let mut valid = Vec::with_capacity(raw.len());
                let normals = raw
                    .into_iter()
                    .map(|n| match n.try_normalize(1e-12) {
                        Some(u) => {
                            valid.push(true);
                            u
                        }
                        None => {
                            valid.push(false);
                            Vector3::z()
                        }
                    })
                    .collect();
                PointCloud::with_flagged_normals(self.points, normals, valid)
            }
        }
    }
}

fn parse_number(token: &str, line: usize) -> Result<f64> {
    token.parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("`{token}` is not a number"),
    })
}

fn finite_row(values: &[f64], line: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Parse {
            line,
            message: "non-finite value".into(),
        })
    }
}

fn parse_xyz(text: &str) -> Result<Rows> {
    let mut rows = Rows::default();
    let mut columns: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let values = body
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() < 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected at least 3 columns, got {}", values.len()),
            });
        }
        finite_row(&values, line)?;
        let cols = *columns.get_or_insert(values.len());
        if cols != values.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {cols} columns, got {}", values.len()),
            });
        }
        rows.points.push(Point3::new(values[0], values[1], values[2]));
        if cols >= 6 {
            rows.normals
                .get_or_insert_with(Vec::new)
                .push(Vector3::new(values[3], values[4], values[5]));
        }
    }
    Ok(rows)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn header_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_ply(text: &str) -> Result<Rows> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    if !matches!(lines.next(), Some((_, "ply"))) {
        return Err(header_error(1, "missing `ply` magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    let mut end_line = 0;
    for (line, l) in lines.by_ref() {
        let mut tok = l.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(header_error(line, "only `format ascii` is supported"));
                }
                saw_format = true;
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| header_error(line, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| header_error(line, "element without a valid count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_error(line, "property before any element"))?;
                let name = tok.last().ok_or_else(|| header_error(line, "property without name"))?;
                el.properties.push(name.to_string());
            }
            Some("end_header") => {
                end_line = line;
                break;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(header_error(line, format!("unexpected header keyword `{other}`"))),
        }
    }
    if end_line == 0 {
        return Err(header_error(text.lines().count().max(1), "missing `end_header`"));
    }
    if !saw_format {
        return Err(header_error(end_line, "missing `format` line"));
    }

    let mut rows = Rows::default();
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                body.next()
                    .ok_or_else(|| header_error(end_line, format!("truncated `{}` element", el.name)))?;
            }
            continue;
        }
        let col = |name: &str| el.properties.iter().position(|p| p == name);
        let (x, y, z) = match (col("x"), col("y"), col("z")) {
            (Some(x), Some(y), Some(z)) => (x, y, z),
            _ => return Err(header_error(end_line, "vertex element lacks x/y/z properties")),
        };
        let normal_cols = match (col("nx"), col("ny"), col("nz")) {
            (Some(a), Some(b), Some(c)) => Some((a, b, c)),
            _ => None,
        };
        if normal_cols.is_some() {
            rows.normals = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            let (line, l) = body
                .next()
                .ok_or_else(|| header_error(end_line, format!("expected {} vertices", el.count)))?;
            let values = l
                .split_whitespace()
                .map(|t| parse_number(t, line))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != el.properties.len() {
                return Err(header_error(
                    line,
                    format!("expected {} values, got {}", el.properties.len(), values.len()),
                ));
            }
            finite_row(&values, line)?;
            rows.points.push(Point3::new(values[x], values[y], values[z]));
            if let (Some((a, b, c)), Some(n)) = (normal_cols, rows.normals.as_mut()) {
                n.push(Vector3::new(values[a], values[b], values[c]));
            }
        }
    }
    Ok(rows)
}

fn parse_pcd(text: &str) -> Result<Rows> {
    let mut fields: Vec<String> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut expected: Option<usize> = None;
    let mut data_line = 0;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    for (line, l) in lines.by_ref() {
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut tok = l.split_whitespace();
        let key = tok.next().unwrap_or_default().to_ascii_uppercase();
        match key.as_str() {
            "FIELDS" => fields = tok.map(str::to_string).collect(),
            "COUNT" => {
                counts = tok
                    .map(|t| t.parse().map_err(|_| header_error(line, format!("bad COUNT `{t}`"))))
                    .collect::<Result<_>>()?
            }
            "POINTS" => {
                expected = Some(
                    tok.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| header_error(line, "bad POINTS value"))?,
                )
            }
            "DATA" => {
                if tok.next() != Some("ascii") {
                    return Err(header_error(line, "only `DATA ascii` is supported"));
                }
                data_line = line;
                break;
            }
            "VERSION" | "SIZE" | "TYPE" | "WIDTH" | "HEIGHT" | "VIEWPOINT" => {}
            other => return Err(header_error(line, format!("unexpected header keyword `{other}`"))),
        }
    }
    if data_line == 0 {
        return Err(header_error(text.lines().count().max(1), "missing `DATA` line"));
    }
    if counts.is_empty() {
        counts = vec![1; fields.len()];
    }
    if counts.len() != fields.len() {
        return Err(header_error(data_line, "FIELDS and COUNT lengths differ"));
    }
    // column offset of each field after expanding COUNT
    let mut offsets = Vec::with_capacity(fields.len());
    let mut width = 0;
    for c in &counts {
        offsets.push(width);
        width += c;
    }
    let col = |name: &str| fields.iter().position(|f| f == name).map(|i| offsets[i]);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(header_error(data_line, "FIELDS lacks x/y/z")),
    };
    let normal_cols = match (col("normal_x"), col("normal_y"), col("normal_z")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    let mut rows = Rows::default();
    if normal_cols.is_some() {
        rows.normals = Some(Vec::new());
    }
    let mut seen = 0;
    for (line, l) in lines.filter(|(_, l)| !l.is_empty()) {
        let values = l
            .split_whitespace()
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != width {
            return Err(header_error(line, format!("expected {width} values, got {}", values.len())));
        }
        seen += 1;
        // organized clouds mark missing returns with NaN
        if !(values[x].is_finite() && values[y].is_finite() && values[z].is_finite()) {
            continue;
        }
        rows.points.push(Point3::new(values[x], values[y], values[z]));
        if let (Some((a, b, c)), Some(n)) = (normal_cols, rows.normals.as_mut()) {
            let v = Vector3::new(values[a], values[b], values[c]);
            n.push(if v.iter().all(|c| c.is_finite()) { v } else { Vector3::zeros() });
        }
    }
    if let Some(n) = expected {
        if n != seen {
            return Err(header_error(data_line, format!("POINTS says {n}, found {seen} rows")));
        }
    }
    Ok(rows)
}

fn write_ply(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48 + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.has_normals() {
        s.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    s.push_str("end_header\n");
    write_rows(&mut s, cloud);
    s
}

fn write_pcd(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48 + 256);
    s.push_str("# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\n");
    if cloud.has_normals() {
        s.push_str("FIELDS x y z normal_x normal_y normal_z\nSIZE 8 8 8 8 8 8\nTYPE F F F F F F\nCOUNT 1 1 1 1 1 1\n");
    } else {
        s.push_str("FIELDS x y z\nSIZE 8 8 8\nTYPE F F F\nCOUNT 1 1 1\n");
    }
    let _ = writeln!(s, "WIDTH {}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0", cloud.len());
    let _ = writeln!(s, "POINTS {}\nDATA ascii", cloud.len());
    write_rows(&mut s, cloud);
    s
}

fn write_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 48);
    write_rows(&mut s, cloud);
    s
}

fn write_rows(s: &mut String, cloud: &PointCloud) {
    for (i, p) in cloud.points().iter().enumerate() {
        let _ = write!(s, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = cloud.normals() {
            let n = if cloud.normal_is_valid(i) { n[i] } else { Vector3::zeros() };
            let _ = write!(s, " {} {} {}", n.x, n.y, n.z);
        }
        s.push('\n');
    }
}

/// Four lines of four whitespace-separated numbers (row-major).
pub fn transform_to_text(t: &RigidTransform) -> String {
    t.to_rows()
        .iter()
        .map(|r| format!("{} {} {} {}\n", r[0], r[1], r[2], r[3]))
        .collect()
}

pub fn transform_from_text(text: &str) -> Result<RigidTransform> {
    let mut rows = [[0.0; 4]; 4];
    let mut n = 0;
    for (idx, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        if n == 4 {
            return Err(Error::Parse {
                line: idx + 1,
                message: "more than 4 matrix rows".into(),
            });
        }
        let values = l
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| parse_number(t, idx + 1))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != 4 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 4 values, got {}", values.len()),
            });
        }
        rows[n].copy_from_slice(&values);
        n += 1;
    }
    if n != 4 {
        return Err(Error::Parse {
            line: text.lines().count().max(1),
            message: format!("expected 4 matrix rows, got {n}"),
        });
    }
    RigidTransform::from_rows(&rows)
}

pub fn load_transform(path: impl AsRef<Path>) -> Result<RigidTransform> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    } else {
        transform_from_text(&text)
    }
}
