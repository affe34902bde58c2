//! Datasets, synthetic shapes, normalization and point-cloud file formats.
//!
//! Supported inputs are whitespace-separated `x y z` text files and ASCII
//! PLY files with a vertex element. All outputs use the xyz format, plus SVG
//! projections for quick inspection and a plain-text token dump.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, io_err, GpmError, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub cloud: PointCloud,
    pub label: Option<usize>,
}

/// An ordered collection of clouds with unique ids and optional labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(items: Vec<Item>, class_names: Option<Vec<String>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for item in &items {
            if !seen.insert(item.id.as_str()) {
                return Err(GpmError::Data(format!("duplicate cloud id `{}`", item.id)));
            }
            if let Some(label) = item.label {
                let classes = class_names.as_ref().map_or(0, Vec::len);
                if label >= classes {
                    return Err(GpmError::Data(format!(
                        "cloud `{}` has label {label} but only {classes} classes exist",
                        item.id
                    )));
                }
            }
        }
        Ok(Self { items, class_names })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.as_ref().map_or(0, Vec::len)
    }

    /// Item indices grouped by label; unlabeled items are skipped.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, item) in self.items.iter().enumerate() {
            if let Some(l) = item.label {
                out[l].push(i);
            }
        }
        out
    }

    /// A new dataset holding the given items, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let items = indices
            .iter()
            .map(|i| {
                self.items
                    .get(*i)
                    .cloned()
                    .ok_or_else(|| GpmError::Data(format!("item index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, self.class_names.clone())
    }

    /// Every item's cloud replaced by `f(cloud)`.
    pub fn map_clouds(&self, mut f: impl FnMut(&PointCloud) -> Result<PointCloud>) -> Result<Self> {
        let items = self
            .items
            .iter()
            .map(|it| {
                Ok(Item {
                    id: it.id.clone(),
                    cloud: f(&it.cloud)?,
                    label: it.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, self.class_names.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    Ellipsoid,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::Cone,
        ShapeFamily::Ellipsoid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
            ShapeFamily::Ellipsoid => "ellipsoid",
        }
    }
}

impl FromStr for ShapeFamily {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid(format!("unknown shape family `{s}`")))
    }
}

/// Recipe for one class of synthetic clouds.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShapeSpec {
    pub family: ShapeFamily,
    /// Per-axis scale factors are drawn uniformly from this range.
    pub scale_jitter: (f64, f64),
    /// Maximum rotation angle in radians about a uniformly random axis.
    pub rotation_jitter: f64,
    pub points: usize,
    /// Standard deviation of isotropic Gaussian coordinate noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticShapeSpec {
    pub fn new(family: ShapeFamily, points: usize, seed: u64) -> Self {
        Self {
            family,
            scale_jitter: (0.85, 1.15),
            rotation_jitter: PI,
            points,
            noise_sigma: 0.005,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_jitter;
        if self.points == 0 {
            return Err(invalid("synthetic shape needs at least one point"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid(format!(
                "noise sigma {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid(format!(
                "scale jitter range ({lo}, {hi}) is invalid"
            )));
        }
        if !(self.rotation_jitter >= 0.0 && self.rotation_jitter.is_finite()) {
            return Err(invalid("rotation jitter must be finite and >= 0"));
        }
        Ok(())
    }
}

fn uniform_sphere_point(rng: &mut impl Rng) -> Point {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi = rng.random_range(0.0..TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// `n` points on the canonical surface of `family`, before any jitter.
/// Spheres have radius 1; the other families fit inside the unit ball.
pub fn sample_surface(family: ShapeFamily, n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n).map(|_| surface_point(family, rng)).collect()
}

fn surface_point(family: ShapeFamily, rng: &mut impl Rng) -> Point {
    match family {
        ShapeFamily::Sphere => uniform_sphere_point(rng),
        ShapeFamily::Ellipsoid => {
            let p = uniform_sphere_point(rng);
            [p[0], 0.6 * p[1], 0.35 * p[2]]
        }
        ShapeFamily::Cube => {
            let h = 1.0 / 3f64.sqrt();
            let face = rng.random_range(0..6);
            let u = rng.random_range(-h..=h);
            let v = rng.random_range(-h..=h);
            let s = if face % 2 == 0 { h } else { -h };
            match face / 2 {
                0 => [s, u, v],
                1 => [u, s, v],
                _ => [u, v, s],
            }
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (0.6, 0.75);
            // side area 2*pi*r*2h vs two caps 2*pi*r^2
            let side = 2.0 * h / (2.0 * h + r);
            let phi = rng.random_range(0.0..TAU);
            if rng.random::<f64>() < side {
                [r * phi.cos(), r * phi.sin(), rng.random_range(-h..=h)]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { h } else { -h };
                [rr * phi.cos(), rr * phi.sin(), z]
            }
        }
        ShapeFamily::Torus => {
            let (big, small) = (0.7, 0.28);
            // rejection keeps the density uniform over the surface area
            loop {
                let u = rng.random_range(0.0..TAU);
                let v = rng.random_range(0.0..TAU);
                let w = (big + small * v.cos()) / (big + small);
                if rng.random::<f64>() <= w {
                    let ring = big + small * v.cos();
                    return [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            }
        }
        ShapeFamily::Cone => {
            let (r, h): (f64, f64) = (0.7, 1.2);
            let slant = (r * r + h * h).sqrt();
            let side = slant / (slant + r);
            let phi = rng.random_range(0.0..TAU);
            let base = -h / 2.0;
            if rng.random::<f64>() < side {
                // radius grows linearly from the apex, so t ~ sqrt(U)
                let t = rng.random::<f64>().sqrt();
                [t * r * phi.cos(), t * r * phi.sin(), h / 2.0 - t * h]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                [rr * phi.cos(), rr * phi.sin(), base]
            }
        }
    }
}

fn rotation_matrix(axis: Point, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let [x, y, z] = axis;
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

fn apply(r: &[[f64; 3]; 3], p: Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// The `index`-th cloud of a spec: surface sample, per-axis scale jitter,
/// random rotation, Gaussian noise, then unit-sphere normalization.
pub fn synth_cloud(spec: &SyntheticShapeSpec, index: u64) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let mut pts = sample_surface(spec.family, spec.points, &mut rng);
    let (lo, hi) = spec.scale_jitter;
    let scale: [f64; 3] = std::array::from_fn(|_| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    });
    let axis = uniform_sphere_point(&mut rng);
    let angle = if spec.rotation_jitter > 0.0 {
        rng.random_range(-spec.rotation_jitter..=spec.rotation_jitter)
    } else {
        0.0
    };
    let rot = rotation_matrix(axis, angle);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?;
    for p in &mut pts {
        let scaled = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
        let mut q = apply(&rot, scaled);
        if spec.noise_sigma > 0.0 {
            for c in &mut q {
                *c += noise.sample(&mut rng);
            }
        }
        *p = q;
    }
    Ok(normalize_unit_sphere(&PointCloud::new(pts)?))
}

/// The cloud turned by a random angle in `[-pi, pi]` about a uniformly
/// random axis through the origin.
pub fn rotate_randomly(cloud: &PointCloud, rng: &mut impl Rng) -> PointCloud {
    let axis = uniform_sphere_point(rng);
    let rot = rotation_matrix(axis, rng.random_range(-PI..=PI));
    let pts = cloud.points().iter().map(|p| apply(&rot, *p)).collect();
    PointCloud::new(pts).expect("rotation keeps a non-empty finite cloud")
}

/// `per_class` clouds for every spec, grouped by spec. Labels are spec
/// indices; class names are the family names, suffixed when repeated.
pub fn synth_dataset(specs: &[SyntheticShapeSpec], per_class: usize) -> Result<Dataset> {
    if specs.is_empty() {
        return Err(invalid("synthetic dataset needs at least one shape spec"));
    }
    let mut names: Vec<String> = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let base = spec.family.name().to_string();
        names.push(if names.contains(&base) {
            format!("{base}{i}")
        } else {
            base
        });
    }
    let mut items = Vec::with_capacity(specs.len() * per_class);
    for (label, spec) in specs.iter().enumerate() {
        for j in 0..per_class {
            items.push(Item {
                id: format!("{}_{j:04}", names[label]),
                cloud: synth_cloud(spec, j as u64)?,
                label: Some(label),
            });
        }
    }
    Dataset::new(items, Some(names))
}

/// Subtracts the centroid and divides by the largest resulting norm. A
/// cloud whose points all coincide becomes all zeros.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let pts = cloud.points();
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts {
        for d in 0..3 {
            c[d] += p[d];
        }
    }
    let c = c.map(|v| v / n);
    let centered: Vec<Point> = pts
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let max = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    let out = if max > 0.0 {
        centered.iter().map(|p| p.map(|v| v / max)).collect()
    } else {
        centered
    };
    PointCloud::new(out).expect("normalization keeps a non-empty finite cloud")
}

/// Source indices of an `n`-point resample: distinct when `n <= N`;
/// otherwise every point once followed by `n - N` draws with replacement.
pub fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if n <= len {
        index::sample(&mut rng, len, n).into_vec()
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    }
}

pub fn sample_n(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(invalid("cannot sample zero points"));
    }
    let pts = cloud.points();
    PointCloud::new(
        sample_indices(pts.len(), n, seed)
            .into_iter()
            .map(|i| pts[i])
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    /// Guesses the format from a file extension (`xyz`, `txt`, `ply`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("xyz" | "txt") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::PlyAscii),
            _ => Err(invalid(format!(
                "cannot infer point format of {}",
                path.display()
            ))),
        }
    }
}

impl FromStr for CloudFormat {
    type Err = GpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" | "ply_ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(invalid(format!("unknown point format `{other}`"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    match format {
        CloudFormat::Xyz => parse_xyz(&text, &name),
        CloudFormat::PlyAscii => parse_ply(&text, &name),
    }
}

fn parse_err(path: &str, line: usize, msg: impl Into<String>) -> GpmError {
    GpmError::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_coords(fields: &[&str], path: &str, line: usize) -> Result<Point> {
    let mut p = [0.0; 3];
    for (d, f) in fields.iter().enumerate() {
        let v: f64 = f
            .parse()
            .map_err(|_| parse_err(path, line, format!("`{f}` is not a number")))?;
        if !v.is_finite() {
            return Err(parse_err(
                path,
                line,
                format!("non-finite coordinate `{f}`"),
            ));
        }
        p[d] = v;
    }
    Ok(p)
}

/// One `x y z` triple per line. Blank lines and `#` comments are skipped;
/// further columns (normals, colors) are ignored.
pub fn parse_xyz(text: &str, path: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() < 3 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        pts.push(parse_coords(&fields[..3], path, i + 1)?);
    }
    if pts.is_empty() {
        return Err(parse_err(path, 0, "file contains no points"));
    }
    PointCloud::new(pts)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

pub fn parse_ply(text: &str, path: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    let mut body_start = None;
    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => ascii = true,
            ["format", other, ..] => {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("unsupported PLY format `{other}`"),
                ))
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| parse_err(path, i + 1, "bad element count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", ..] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before element"))?;
                el.properties.push(String::new());
            }
            ["property", _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                body_start = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let Some(mut line_no) = body_start else {
        return Err(parse_err(path, 0, "missing end_header"));
    };
    if !ascii {
        return Err(parse_err(path, 1, "missing `format ascii` line"));
    }
    let mut pts = Vec::new();
    for el in &elements {
        let cols = if el.name == "vertex" {
            let find = |n: &str| el.properties.iter().position(|p| p == n);
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => {
                    return Err(parse_err(
                        path,
                        line_no,
                        "vertex element lacks x/y/z properties",
                    ))
                }
            }
        } else {
            None
        };
        for _ in 0..el.count {
            let (i, raw) = lines.next().ok_or_else(|| {
                parse_err(
                    path,
                    line_no + 1,
                    format!("unexpected end of `{}` data", el.name),
                )
            })?;
            line_no = i + 1;
            if let Some(cols) = cols {
                let fields: Vec<&str> = raw.split_whitespace().collect();
                let need = cols.iter().max().copied().unwrap_or(0);
                if fields.len() <= need {
                    return Err(parse_err(path, line_no, "too few vertex fields"));
                }
                pts.push(parse_coords(&cols.map(|c| fields[c]), path, line_no)?);
            }
        }
    }
    if pts.is_empty() {
        return Err(parse_err(path, line_no, "PLY file has no vertices"));
    }
    PointCloud::new(pts)
}

pub fn format_xyz(points: &[Point]) -> String {
    let mut s = String::with_capacity(points.len() * 48);
    for p in points {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

/// Writes an xyz file. Coordinates use shortest round-trip formatting, so
/// reading the file back reproduces every value exactly.
pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud.points())).map_err(io_err(path))
}

/// Loads every `.xyz`/`.ply` file under `dir`. Sub-directories become
/// classes (sorted by name); files directly in `dir` are unlabeled.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<_>>()?;
    entries.sort();
    let classes: Vec<_> = entries.iter().filter(|p| p.is_dir()).cloned().collect();
    let mut items = Vec::new();
    let read =
        |file: &Path, label: Option<usize>, prefix: &str, items: &mut Vec<Item>| -> Result<()> {
            if let Ok(format) = CloudFormat::from_path(file) {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("cloud");
                items.push(Item {
                    id: format!("{prefix}{stem}"),
                    cloud: load_cloud(file, format)?,
                    label,
                });
            }
            Ok(())
        };
    for file in entries.iter().filter(|p| p.is_file()) {
        read(file, None, "", &mut items)?;
    }
    let mut names = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        let name = class_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("class")
            .to_string();
        let mut files: Vec<_> = fs::read_dir(class_dir)
            .map_err(io_err(class_dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(class_dir)))
            .collect::<Result<_>>()?;
        files.sort();
        for file in &files {
            read(file, Some(label), &format!("{name}/"), &mut items)?;
        }
        names.push(name);
    }
    if items.is_empty() {
        return Err(GpmError::Data(format!(
            "no point files found in {}",
            dir.display()
        )));
    }
    Dataset::new(items, if names.is_empty() { None } else { Some(names) })
}

const PANEL: f64 = 300.0;
const MARGIN: f64 = 30.0;
const SCALE: f64 = 130.0;

/// Canvas coordinates of the point `(a, b)` in panel `panel` (0 = XY,
/// 1 = XZ, 2 = YZ). The origin maps to the panel center.
pub fn project_to_panel(panel: usize, a: f64, b: f64) -> (f64, f64) {
    let cx = MARGIN + panel as f64 * (PANEL + MARGIN) + PANEL / 2.0;
    let cy = MARGIN + PANEL / 2.0;
    (cx + a * SCALE, cy - b * SCALE)
}

/// Three orthographic scatter panels (XY, XZ, YZ) on a fixed canvas.
pub fn render_svg(points: &[Point]) -> Result<String> {
    if points.is_empty() {
        return Err(invalid("cannot render an empty cloud"));
    }
    let width = 3.0 * PANEL + 4.0 * MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let axes = [("x", "y", 0, 1), ("x", "z", 0, 2), ("y", "z", 1, 2)];
    for (panel, (ha, va, i, j)) in axes.into_iter().enumerate() {
        let x0 = MARGIN + panel as f64 * (PANEL + MARGIN);
        let _ = writeln!(s, r#"<g id="panel-{ha}{va}">"#);
        let _ = writeln!(
            s,
            r#"<rect x="{x0}" y="{MARGIN}" width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{ha}</text>"#,
            x0 + PANEL / 2.0,
            MARGIN + PANEL + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{va}</text>"#,
            x0 - 10.0,
            MARGIN + PANEL / 2.0
        );
        for p in points {
            let (cx, cy) = project_to_panel(panel, p[i], p[j]);
            let _ = writeln!(
                s,
                r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="1.5" fill="steelblue"/>"#
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn write_svg_projections(points: &[Point], path: &Path) -> Result<()> {
    fs::write(path, render_svg(points)?).map_err(io_err(path))
}

/// One token-dump line: cloud id, token count, then the tokens.
pub fn format_token_line(id: &str, tokens: &[usize]) -> String {
    let mut s = format!("{id} {}", tokens.len());
    for t in tokens {
        let _ = write!(s, " {t}");
    }
    s
}

pub fn parse_token_dump(text: &str, path: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 2 {
            return Err(parse_err(path, i + 1, "expected `id m tokens...`"));
        }
        let m: usize = fields[1]
            .parse()
            .map_err(|_| parse_err(path, i + 1, "bad token count"))?;
        if fields.len() != m + 2 {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {m} tokens, found {}", fields.len() - 2),
            ));
        }
        let tokens = fields[2..]
            .iter()
            .map(|t| {
                t.parse()
                    .map_err(|_| parse_err(path, i + 1, format!("bad token `{t}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push((fields[0].to_string(), tokens));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_skips_other_elements_and_extra_properties() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float nx\nproperty float x\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n3 0 1 1\n";
        let c = parse_ply(text, "t.ply").unwrap();
        assert_eq!(c.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn xyz_reports_line_numbers() {
        match parse_xyz("0 0 0\n\n1 x 2\n", "f.xyz") {
            Err(GpmError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in ShapeFamily::ALL {
            assert_eq!(f.name().parse::<ShapeFamily>().unwrap(), f);
        }
    }

    #[test]
    fn token_lines_round_trip() {
        let line = format_token_line("cube_0001", &[3, 0, 255]);
        assert_eq!(line, "cube_0001 3 3 0 255");
        assert_eq!(
            parse_token_dump(&line, "d").unwrap(),
            vec![("cube_0001".to_string(), vec![3, 0, 255])]
        );
    }
}
