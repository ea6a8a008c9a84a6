//! Point-cloud and transform file IO.
//!
//! XYZ: one point per line, three whitespace-separated decimal fields, `#`
//! starts a comment line. PLY: the `vertex` element's `x`, `y`, `z`
//! properties are read (ASCII or binary); everything else is ignored.
//! Clouds are always written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};
use thiserror::Error;

use crate::geometry::{GeometryError, Point3, PointCloud, RigidTransform};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Ply { path: PathBuf, message: String },
    #[error("{path}:{line}: non-finite coordinate")]
    NonFinite { path: PathBuf, line: usize },
    #[error("refusing to write cloud: {0}")]
    Invalid(#[from] GeometryError),
    #[error("{path}: invalid transform: {source}")]
    Transform {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
    #[error("cannot infer cloud format from {0:?}; expected .xyz or .ply")]
    UnknownFormat(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
}

impl CloudFormat {
    /// Guesses the format from the file extension (`.ply`, anything text-like
    /// as XYZ).
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(e) if e == "ply" => Ok(Self::Ply),
            Some(e) if e == "xyz" || e == "txt" || e == "pts" => Ok(Self::Xyz),
            _ => Err(IoError::UnknownFormat(path.to_path_buf())),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, IoError> {
    match format {
        CloudFormat::Xyz => load_xyz(path),
        CloudFormat::Ply => load_ply(path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<(), IoError> {
    // Clouds built through the public constructor are finite, but re-check so
    // a bad cloud never produces a half-written file.
    PointCloud::new(cloud.points().to_vec())?;
    let text = match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply(cloud),
    };
    fs::write(path, text).map_err(io_err(path))
}

/// Loads a cloud, inferring the format from the extension.
pub fn load_cloud_auto(path: &Path) -> Result<PointCloud, IoError> {
    load_cloud(path, CloudFormat::from_path(path)?)
}

pub fn save_cloud_auto(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    save_cloud(cloud, path, CloudFormat::from_path(path)?)
}

fn load_xyz(path: &Path) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_xyz(&text, path)
}

pub(crate) fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud, IoError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(IoError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let mut xyz = [0.0; 3];
        for (slot, field) in xyz.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| IoError::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("bad number {field:?}: {e}"),
            })?;
        }
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(IoError::NonFinite { path: path.to_path_buf(), line: line_no });
        }
        points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
    }
    Ok(PointCloud::from_trusted(points))
}

fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in cloud {
        writeln!(out, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z).unwrap();
    }
    out
}

fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(128 + cloud.len() * 72);
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

fn scalar(prop: &Property) -> Option<f64> {
    Some(match *prop {
        Property::Float(v) => v as f64,
        Property::Double(v) => v,
        Property::Char(v) => v as f64,
        Property::UChar(v) => v as f64,
        Property::Short(v) => v as f64,
        Property::UShort(v) => v as f64,
        Property::Int(v) => v as f64,
        Property::UInt(v) => v as f64,
        _ => return None,
    })
}

fn load_ply(path: &Path) -> Result<PointCloud, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut reader)
        .map_err(|e| IoError::Ply { path: path.to_path_buf(), message: e.to_string() })?;
    let Some(vertices) = ply.payload.get("vertex") else {
        return Ok(PointCloud::default());
    };
    let mut points = Vec::with_capacity(vertices.len());
    for (i, v) in vertices.iter().enumerate() {
        let coord = |name: &str| {
            v.get(name).and_then(scalar).ok_or_else(|| IoError::Ply {
                path: path.to_path_buf(),
                message: format!("vertex {i} lacks a scalar '{name}' property"),
            })
        };
        let p = Point3::new(coord("x")?, coord("y")?, coord("z")?);
        if !crate::geometry::is_finite(&p) {
            return Err(IoError::NonFinite { path: path.to_path_buf(), line: i + 1 });
        }
        points.push(p);
    }
    Ok(PointCloud::from_trusted(points))
}

/// Writes `[R | t]` as three rows of four numbers.
pub fn save_transform(t: &RigidTransform, path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    for row in t.to_rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", fields.join(" ")).unwrap();
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(out.as_bytes()).map_err(io_err(path))
}

pub fn load_transform(path: &Path) -> Result<RigidTransform, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rows = [[0.0; 4]; 3];
    let mut filled = 0;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let malformed = |message: String| IoError::Malformed { path: path.to_path_buf(), line: i + 1, message };
        if filled == 3 {
            return Err(malformed("more than 3 rows".into()));
        }
        let values: Vec<f64> = trimmed
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(format!("bad number: {e}")))?;
        if values.len() != 4 {
            return Err(malformed(format!("expected 4 fields, found {}", values.len())));
        }
        rows[filled].copy_from_slice(&values);
        filled += 1;
    }
    if filled != 3 {
        return Err(IoError::Malformed {
            path: path.to_path_buf(),
            line: text.lines().count(),
            message: format!("expected 3 rows, found {filled}"),
        });
    }
    RigidTransform::from_rows(&rows).map_err(|source| IoError::Transform { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reads_three_points() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.xyz");
        fs::write(&path, "# header\n0 0 0\n1 0 0\n\n0 1 0\n").unwrap();
        let cloud = load_cloud(&path, CloudFormat::Xyz).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.points()[1], Point3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.xyz");
        fs::write(&path, "").unwrap();
        assert!(load_cloud(&path, CloudFormat::Xyz).unwrap().is_empty());
    }

    #[test]
    fn short_line_reports_line_number() {
        let err = parse_xyz("0 0 0\n1 2\n", Path::new("x.xyz")).unwrap_err();
        match err {
            IoError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_is_non_finite(parse_xyz("0 0 nan\n", Path::new("x.xyz"))));
        assert!(err_is_non_finite(parse_xyz("inf 0 0\n", Path::new("x.xyz"))));
    }

    fn err_is_non_finite(r: Result<PointCloud, IoError>) -> bool {
        matches!(r, Err(IoError::NonFinite { line: 1, .. }))
    }

    #[test]
    fn missing_file() {
        let r = load_cloud(Path::new("/nonexistent/cloud.xyz"), CloudFormat::Xyz);
        assert!(matches!(r, Err(IoError::Io { .. })));
    }

    #[test]
    fn round_trip_both_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point3> = (0..1000)
            .map(|_| {
                Point3::new(
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-500.0..500.0),
                    rng.random_range(-500.0..500.0),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (name, format) in [("c.xyz", CloudFormat::Xyz), ("c.ply", CloudFormat::Ply)] {
            let path = dir.path().join(name);
            save_cloud(&cloud, &path, format).unwrap();
            let back = load_cloud(&path, format).unwrap();
            assert_eq!(back.len(), cloud.len());
            let max_err = cloud.iter().zip(back.iter()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            assert!(max_err < 1e-6, "{name}: {max_err}");
        }
    }

    #[test]
    fn empty_cloud_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.xyz");
        save_cloud(&PointCloud::default(), &path, CloudFormat::Xyz).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(load_cloud(&path, CloudFormat::Xyz).unwrap().is_empty());
    }

    #[test]
    fn nan_cloud_rejected_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.xyz");
        let bad = PointCloud::from_trusted_unchecked_for_test(vec![Point3::new(0.0, f64::NAN, 1.0)]);
        assert!(matches!(save_cloud(&bad, &path, CloudFormat::Xyz), Err(IoError::Invalid(_))));
        assert!(!path.exists());
    }

    #[test]
    fn binary_ply_is_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 2\n\
property float x\nproperty float y\nproperty float z\nproperty uchar red\n\
element face 0\nproperty list uchar int vertex_indices\nend_header\n"
            .to_vec();
        for (v, c) in [([1.0f32, 2.0, 3.0], 9u8), ([-0.5, 0.25, 8.0], 1)] {
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            bytes.push(c);
        }
        fs::write(&path, bytes).unwrap();
        let cloud = load_cloud(&path, CloudFormat::Ply).unwrap();
        assert_eq!(cloud.points(), &[Point3::new(1.0, 2.0, 3.0), Point3::new(-0.5, 0.25, 8.0)]);
    }

    #[test]
    fn transform_file_round_trip() {
        let t = crate::geometry::rotation_xy(0.3)
            .compose(&RigidTransform::from_translation(nalgebra::Vector3::new(1.0, -2.0, 1e-3)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        save_transform(&t, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        let back = load_transform(&path).unwrap();
        assert!(t.distance(&back) < 1e-14);
    }
}
