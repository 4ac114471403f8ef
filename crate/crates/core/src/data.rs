//! Point-cloud ingestion, synthetic shapes, sampling, normalization and
//! augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, Rng};
use crate::rotation::{sample_rotation, Protocol};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Class(usize),
    /// One part id per point.
    Parts(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    /// `N×3`.
    pub points: Tensor,
    pub label: Label,
    /// Object category index (segmentation only).
    pub category: Option<usize>,
}

impl LabeledCloud {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keeps the given points (and their part labels) in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let label = match &self.label {
            Label::Class(c) => Label::Class(*c),
            Label::Parts(p) => Label::Parts(indices.iter().map(|&i| p[i]).collect()),
        };
        Ok(Self {
            points: self.points.select_rows(indices)?,
            label,
            category: self.category,
        })
    }

    pub fn with_points(&self, points: Tensor) -> Self {
        Self {
            points,
            label: self.label.clone(),
            category: self.category,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Off,
    XyzCsv,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "off" => Some(CloudFormat::Off),
            "csv" | "xyz" => Some(CloudFormat::XyzCsv),
            _ => None,
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_xyz(path: &Path, line_no: usize, fields: &[&str]) -> Result<[f64; 3]> {
    if fields.len() < 3 {
        return Err(parse_err(
            path,
            line_no,
            format!("expected 3 coordinates, found {}", fields.len()),
        ));
    }
    let mut p = [0.0; 3];
    for (k, f) in fields[..3].iter().enumerate() {
        p[k] = f
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| parse_err(path, line_no, format!("bad coordinate {f:?}")))?;
    }
    Ok(p)
}

/// Vertex coordinates from an OFF mesh (faces ignored) or an `x,y,z` CSV.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_cloud(path, &text, format)
}

pub fn parse_cloud(path: &Path, text: &str, format: CloudFormat) -> Result<Tensor> {
    let mut data = Vec::new();
    match format {
        CloudFormat::XyzCsv => {
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                data.extend(parse_xyz(path, i + 1, &fields)?);
            }
        }
        CloudFormat::Off => {
            // Skip blanks and comments but keep physical line numbers.
            let mut lines = text
                .lines()
                .enumerate()
                .map(|(i, l)| (i + 1, l.trim()))
                .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
            let (n0, header) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
            // Some exporters glue the counts onto the header ("OFF8 6 0").
            let rest = header
                .strip_prefix("OFF")
                .ok_or_else(|| parse_err(path, n0, "missing OFF header"))?
                .trim();
            let (counts_line, counts) = if rest.is_empty() {
                lines
                    .next()
                    .ok_or_else(|| parse_err(path, n0 + 1, "missing counts line"))?
            } else {
                (n0, rest)
            };
            let counts: Vec<usize> = counts
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(path, counts_line, format!("bad counts line {counts:?}")))?;
            if counts.len() != 3 {
                return Err(parse_err(
                    path,
                    counts_line,
                    "counts line needs vertices, faces and edges",
                ));
            }
            for k in 0..counts[0] {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| parse_err(path, counts_line + k + 1, "file ends before all vertices"))?;
                let fields: Vec<&str> = line.split_whitespace().collect();
                data.extend(parse_xyz(path, n, &fields)?);
            }
        }
    }
    if data.is_empty() {
        return Err(parse_err(path, 1, "no points"));
    }
    Tensor::new(vec![data.len() / 3, 3], data)
}

/// Integer part label per line.
pub fn load_part_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("bad part label {:?}", l.trim())))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Cube,
    Cylinder,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Sphere, Shape::Cube, Shape::Cylinder];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Sphere => "sphere",
            Shape::Cube => "cube",
            Shape::Cylinder => "cylinder",
        }
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::ALL
            .into_iter()
            .find(|sh| sh.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown shape {s:?}")))
    }
}

/// Surface point and its part id within the shape.
fn surface_point(shape: Shape, rng: &mut Rng) -> ([f64; 3], usize) {
    match shape {
        // Unit sphere; parts are the two hemispheres.
        Shape::Sphere => loop {
            let g: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if n > 1e-9 {
                let p = g.map(|x| x / n);
                return (p, usize::from(p[2] < 0.0));
            }
        },
        // Side 1 centered at the origin; parts are the ±z faces and the rest.
        Shape::Cube => {
            let face = rng.random_range(0..6);
            let mut p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.5..=0.5));
            p[face / 2] = if face % 2 == 0 { 0.5 } else { -0.5 };
            (p, usize::from(face / 2 != 2))
        }
        // Radius 0.5, height 1 along z, closed. The lateral surface carries
        // 2/3 of the area.
        Shape::Cylinder => {
            if rng.random::<f64>() < 2.0 / 3.0 {
                let t = rng.random_range(0.0..2.0 * PI);
                ([0.5 * t.cos(), 0.5 * t.sin(), rng.random_range(-0.5..=0.5)], 0)
            } else {
                let t = rng.random_range(0.0..2.0 * PI);
                let r = 0.5 * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { 0.5 } else { -0.5 };
                ([r * t.cos(), r * t.sin(), z], 1)
            }
        }
    }
}

fn shape_points(shape: Shape, n: usize, noise: f64, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    if n < 8 {
        return Err(Error::Contract(format!(
            "synthetic clouds need at least 8 points, got {n}"
        )));
    }
    let mut data = Vec::with_capacity(3 * n);
    let mut parts = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, part) = surface_point(shape, rng);
        for x in p {
            let jitter: f64 = if noise > 0.0 {
                noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            data.push(x + jitter);
        }
        parts.push(part);
    }
    Ok((Tensor::new(vec![n, 3], data)?, parts))
}

/// Uniform surface samples with Gaussian jitter `noise`; label is the shape id.
pub fn generate_synthetic(shape: Shape, n: usize, noise: f64, rng: &mut Rng) -> Result<LabeledCloud> {
    let (points, _) = shape_points(shape, n, noise, rng)?;
    Ok(LabeledCloud {
        points,
        label: Label::Class(shape.id()),
        category: None,
    })
}

/// Part-labelled variant: the shape is the category and every shape owns
/// two parts, numbered `2·id` and `2·id + 1`.
pub fn generate_synthetic_parts(shape: Shape, n: usize, noise: f64, rng: &mut Rng) -> Result<LabeledCloud> {
    let (points, parts) = shape_points(shape, n, noise, rng)?;
    Ok(LabeledCloud {
        points,
        label: Label::Parts(parts.into_iter().map(|p| 2 * shape.id() + p).collect()),
        category: Some(shape.id()),
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy farthest-point subset of size `m` beginning at `start`. Ties go to
/// the lowest index.
pub fn farthest_point_sample(points: &Tensor, m: usize, start: usize) -> Result<Vec<usize>> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("farthest_point_sample", s, &[0, 3]));
    }
    let n = s[0];
    if m > n {
        return Err(Error::Contract(format!("cannot sample {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::Contract(format!(
            "start index {start} out of range for {n} points"
        )));
    }
    if m == 0 {
        return Ok(vec![]);
    }
    let rows: Vec<&[f64]> = points.data().chunks_exact(3).collect();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = start;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == m {
            return Ok(chosen);
        }
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if taken[i] {
                continue;
            }
            min_d[i] = min_d[i].min(sq_dist(rows[i], rows[cur]));
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        cur = best.1;
    }
}

/// Subtracts the centroid and divides by the largest point norm.
pub fn normalize(points: &Tensor) -> Result<Tensor> {
    let s = points.shape();
    if s.len() != 2 || s[1] != 3 {
        return Err(Error::shape("normalize", s, &[0, 3]));
    }
    let n = s[0] as f64;
    let mut c = [0.0; 3];
    for p in points.data().chunks_exact(3) {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let c = c.map(|x| x / n);
    let centered: Vec<f64> = points
        .data()
        .chunks_exact(3)
        .flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max = centered
        .chunks_exact(3)
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if max < 1e-12 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    Tensor::new(s.to_vec(), centered.into_iter().map(|x| x / max).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: [f64; 2],
    pub shift_range: [f64; 2],
    pub sample_n: usize,
    pub protocol: Protocol,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: [0.8, 1.25],
            shift_range: [-0.1, 0.1],
            sample_n: 1024,
            protocol: Protocol::None,
        }
    }
}

impl AugmentConfig {
    /// Rotation only, for evaluation-time protocols.
    pub fn rotation_only(protocol: Protocol, sample_n: usize) -> Self {
        Self {
            scale_range: [1.0, 1.0],
            shift_range: [0.0, 0.0],
            sample_n,
            protocol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad scale range {:?}", self.scale_range)));
        }
        if self.shift_range[0] > self.shift_range[1] {
            return Err(Error::Config(format!("bad shift range {:?}", self.shift_range)));
        }
        if self.sample_n == 0 {
            return Err(Error::Config("sample_n must be ≥ 1".into()));
        }
        Ok(())
    }
}

fn draw(range: [f64; 2], rng: &mut Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Uniform scale, then a per-axis shift, then a rotation drawn per protocol.
/// Points are never dropped.
pub fn augment(cloud: &LabeledCloud, cfg: &AugmentConfig, rng: &mut Rng) -> Result<LabeledCloud> {
    let scale = draw(cfg.scale_range, rng);
    let shift: [f64; 3] = std::array::from_fn(|_| draw(cfg.shift_range, rng));
    let moved: Vec<f64> = cloud
        .points
        .data()
        .chunks_exact(3)
        .flat_map(|p| std::array::from_fn::<f64, 3, _>(|k| scale * p[k] + shift[k]))
        .collect();
    let moved = Tensor::new(cloud.points.shape().to_vec(), moved)?;
    let points = match cfg.protocol {
        Protocol::None => moved,
        p => sample_rotation(p, rng).rotate(&moved)?,
    };
    Ok(cloud.with_points(points))
}

/// Rotation protocols for the two splits. Training rotations are redrawn
/// every epoch; test rotations depend only on `test_seed` and the sample
/// index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub train: Protocol,
    pub test: Protocol,
    pub test_seed: u64,
}

const TEST_STREAM: u64 = 0x7E57;

impl ProtocolSplit {
    pub fn test_rng(&self, sample: usize) -> Rng {
        derive(self.test_seed, &[TEST_STREAM, sample as u64])
    }
}

pub fn make_protocol_split(train: Protocol, test: Protocol, test_seed: u64) -> ProtocolSplit {
    ProtocolSplit { train, test, test_seed }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<LabeledCloud>,
    pub test: Vec<LabeledCloud>,
    /// Class names, or category names for segmentation.
    pub names: Vec<String>,
    /// Part count for segmentation, 0 otherwise.
    pub num_parts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    /// Points per generated source cloud.
    pub points: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 300,
            test: 60,
            points: 512,
            noise: 0.01,
            seed: 0,
        }
    }
}

/// Balanced sphere/cube/cylinder sets; sample `i` has shape `i mod 3`.
pub fn synthetic_dataset(spec: &SyntheticSpec, segmentation: bool) -> Result<Dataset> {
    let make = |split: u64, i: usize| {
        let shape = Shape::ALL[i % 3];
        let mut rng = derive(spec.seed, &[split, i as u64]);
        if segmentation {
            generate_synthetic_parts(shape, spec.points, spec.noise, &mut rng)
        } else {
            generate_synthetic(shape, spec.points, spec.noise, &mut rng)
        }
    };
    Ok(Dataset {
        train: (0..spec.train).map(|i| make(0, i)).collect::<Result<_>>()?,
        test: (0..spec.test).map(|i| make(1, i)).collect::<Result<_>>()?,
        names: Shape::ALL.iter().map(|s| s.name().to_string()).collect(),
        num_parts: if segmentation { 6 } else { 0 },
    })
}

/// Where a dataset came from; recorded with checkpoints so evaluation can
/// rebuild the same test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Directory(PathBuf),
}

impl DataSource {
    pub fn load(&self, segmentation: bool) -> Result<Dataset> {
        match self {
            DataSource::Synthetic(spec) => synthetic_dataset(spec, segmentation),
            DataSource::Directory(root) if segmentation => load_segmentation_dir(root),
            DataSource::Directory(root) => load_classification_dir(root),
        }
    }
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| data_err(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `root/<class>/<train|test>/<file>.off|csv`; classes in sorted order.
pub fn load_classification_dir(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for class_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = ds.names.len();
        ds.names.push(file_name(&class_dir));
        for (split, out) in [("train", &mut ds.train), ("test", &mut ds.test)] {
            let dir = class_dir.join(split);
            if !dir.is_dir() {
                continue;
            }
            for file in sorted_entries(&dir)? {
                if let Some(format) = CloudFormat::from_path(&file) {
                    out.push(LabeledCloud {
                        points: load_cloud(&file, format)?,
                        label: Label::Class(class),
                        category: None,
                    });
                }
            }
        }
    }
    if ds.train.is_empty() {
        return Err(data_err(root, "no training clouds found"));
    }
    Ok(ds)
}

/// `root/<category>/<file>.csv` with sidecar `<file>.seg`. Every fifth file
/// of a category (sorted by name) is held out for testing.
pub fn load_segmentation_dir(root: &Path) -> Result<Dataset> {
    let mut ds = Dataset::default();
    for cat_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let category = ds.names.len();
        ds.names.push(file_name(&cat_dir));
        let files = sorted_entries(&cat_dir)?
            .into_iter()
            .filter(|p| CloudFormat::from_path(p) == Some(CloudFormat::XyzCsv));
        for (i, file) in files.enumerate() {
            let points = load_cloud(&file, CloudFormat::XyzCsv)?;
            let seg = file.with_extension("seg");
            let parts = load_part_labels(&seg)?;
            if parts.len() != points.shape()[0] {
                return Err(data_err(
                    &seg,
                    format!("{} labels for {} points", parts.len(), points.shape()[0]),
                ));
            }
            ds.num_parts = ds.num_parts.max(parts.iter().max().map_or(0, |m| m + 1));
            let cloud = LabeledCloud {
                points,
                label: Label::Parts(parts),
                category: Some(category),
            };
            if i % 5 == 4 {
                ds.test.push(cloud);
            } else {
                ds.train.push(cloud);
            }
        }
    }
    if ds.train.is_empty() {
        return Err(data_err(root, "no training clouds found"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn minimal_off() {
        let t = parse_cloud(
            Path::new("m.off"),
            "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n",
            CloudFormat::Off,
        )
        .unwrap();
        assert_eq!(t.shape(), &[3, 3]);
        assert_eq!(t.get(&[1, 0]), 1.0);
    }

    #[test]
    fn off_with_counts_on_header_line() {
        let t = parse_cloud(Path::new("m.off"), "OFF2 0 0\n0 0 0\n1 1 1\n", CloudFormat::Off).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn csv_two_points() {
        let t = parse_cloud(Path::new("c.csv"), "0,0,0\n1,0,0", CloudFormat::XyzCsv).unwrap();
        assert_eq!(t.data(), &[0., 0., 0., 1., 0., 0.]);
    }

    #[test]
    fn malformed_counts_names_line_two() {
        let err = parse_cloud(Path::new("bad.off"), "OFF\n3 x 0\n0 0 0\n", CloudFormat::Off).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_cloud(Path::new("bad.csv"), "0,0,0\n1,zz,0\n", CloudFormat::XyzCsv).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_cloud(Path::new("bad.off"), "PLY\n", CloudFormat::Off).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn sphere_points_are_unit() {
        let c = generate_synthetic(Shape::Sphere, 500, 0.0, &mut seeded(1)).unwrap();
        for p in c.points.data().chunks(3) {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        assert_eq!(c.label, Label::Class(0));
    }

    #[test]
    fn sphere_is_centered() {
        let c = generate_synthetic(Shape::Sphere, 10_000, 0.0, &mut seeded(2)).unwrap();
        let mut m = [0.0; 3];
        for p in c.points.data().chunks(3) {
            for k in 0..3 {
                m[k] += p[k] / 10_000.0;
            }
        }
        assert!((m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt() <= 0.05);
    }

    #[test]
    fn cube_points_lie_on_faces() {
        let c = generate_synthetic(Shape::Cube, 500, 0.0, &mut seeded(3)).unwrap();
        for p in c.points.data().chunks(3) {
            assert!(p.iter().any(|x| x.abs() == 0.5));
            assert!(p.iter().all(|x| x.abs() <= 0.5));
        }
    }

    #[test]
    fn cylinder_points_lie_on_surface() {
        let c = generate_synthetic(Shape::Cylinder, 500, 0.0, &mut seeded(4)).unwrap();
        for p in c.points.data().chunks(3) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 0.5).abs() < 1e-12 || (p[2].abs() == 0.5 && r <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn synthetic_needs_eight_points() {
        assert!(generate_synthetic(Shape::Cube, 7, 0.0, &mut seeded(5)).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(Shape::Cylinder, 64, 0.02, &mut seeded(6)).unwrap();
        let b = generate_synthetic(Shape::Cylinder, 64, 0.02, &mut seeded(6)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fps_square_corners() {
        let sq = Tensor::new(vec![4, 3], vec![0., 0., 0., 1., 0., 0., 0., 1., 0., 1., 1., 0.]).unwrap();
        assert_eq!(farthest_point_sample(&sq, 2, 0).unwrap(), vec![0, 3]);
        // Corners 1 and 2 tie after the diagonal; the lower index wins.
        assert_eq!(farthest_point_sample(&sq, 3, 0).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_full_is_permutation_and_rejects_oversampling() {
        let c = generate_synthetic(Shape::Sphere, 20, 0.0, &mut seeded(7)).unwrap();
        let mut idx = farthest_point_sample(&c.points, 20, 5).unwrap();
        idx.sort();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert!(matches!(
            farthest_point_sample(&c.points, 21, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn normalize_hand_case() {
        let t = Tensor::new(vec![2, 3], vec![0., 0., 0., 2., 0., 0.]).unwrap();
        assert_eq!(normalize(&t).unwrap().data(), &[-1., 0., 0., 1., 0., 0.]);
        let same = Tensor::full(vec![3, 3], 0.7);
        assert!(matches!(normalize(&same), Err(Error::Degenerate(_))));
    }

    #[test]
    fn identity_augmentation() {
        let c = generate_synthetic(Shape::Cube, 30, 0.0, &mut seeded(8)).unwrap();
        let cfg = AugmentConfig::rotation_only(Protocol::None, 30);
        assert_eq!(augment(&c, &cfg, &mut seeded(9)).unwrap(), c);
    }

    #[test]
    fn z_protocol_keeps_heights() {
        let c = generate_synthetic(Shape::Cube, 30, 0.0, &mut seeded(10)).unwrap();
        let cfg = AugmentConfig::rotation_only(Protocol::Z, 30);
        let a = augment(&c, &cfg, &mut seeded(11)).unwrap();
        for (p, q) in c.points.data().chunks(3).zip(a.points.data().chunks(3)) {
            assert!((p[2] - q[2]).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_two_doubles_norm() {
        let c = generate_synthetic(Shape::Sphere, 30, 0.0, &mut seeded(12)).unwrap();
        let cfg = AugmentConfig {
            scale_range: [2.0, 2.0],
            ..AugmentConfig::rotation_only(Protocol::None, 30)
        };
        let a = augment(&c, &cfg, &mut seeded(13)).unwrap();
        let max = a
            .points
            .data()
            .chunks(3)
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max);
        assert!((max - 2.0).abs() < 1e-12);
    }

    #[test]
    fn protocol_split_binds_both_sides() {
        let s = make_protocol_split(Protocol::Z, Protocol::So3, 4);
        assert_eq!((s.train, s.test), (Protocol::Z, Protocol::So3));
        let a = sample_rotation(s.test, &mut s.test_rng(3));
        let b = sample_rotation(s.test, &mut s.test_rng(3));
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_dataset_is_balanced() {
        let spec = SyntheticSpec {
            train: 9,
            test: 3,
            points: 16,
            ..Default::default()
        };
        let ds = synthetic_dataset(&spec, false).unwrap();
        let count = |c| ds.train.iter().filter(|s| s.label == Label::Class(c)).count();
        assert_eq!((count(0), count(1), count(2)), (3, 3, 3));
        let seg = synthetic_dataset(&spec, true).unwrap();
        assert_eq!(seg.num_parts, 6);
        assert_eq!(seg.train[2].category, Some(2));
    }
}
