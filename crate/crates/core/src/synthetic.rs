//! Procedural sketch-and-extrude parts with matching descriptions, for
//! smoke training, demo galleries and tests.
//!
//! Each part is one closed outer profile (plus optional circular holes)
//! extruded to a height. The token sequence lists quantized profile vertices,
//! each loop closed by repeating its first vertex, followed by one extrude
//! token holding the quantized height. Point clouds are sampled on the side
//! walls and caps of the extruded solid.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    normalize_points, quantize_coord, sample_points, write_points_file, CadSequence, Corpus, CorpusRecord,
    ManifestEntry, Split,
};
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::seed;
use crate::text::TextEmbeddingProvider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cylindrical,
    Rectangular,
    Triangular,
    Hexagonal,
    LShaped,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Cylindrical,
        Family::Rectangular,
        Family::Triangular,
        Family::Hexagonal,
        Family::LShaped,
    ];

    pub fn adjective(self) -> &'static str {
        match self {
            Family::Cylindrical => "cylindrical",
            Family::Rectangular => "rectangular",
            Family::Triangular => "triangular",
            Family::Hexagonal => "hexagonal",
            Family::LShaped => "l-shaped",
        }
    }

    /// Outer profile in the unit square, counter-clockwise.
    fn profile(self, half: f64) -> Vec<[f64; 2]> {
        let c = 0.5;
        let ring = |n: usize, phase: f64| -> Vec<[f64; 2]> {
            (0..n)
                .map(|i| {
                    let a = phase + 2.0 * PI * i as f64 / n as f64;
                    [c + half * a.cos(), c + half * a.sin()]
                })
                .collect()
        };
        match self {
            Family::Cylindrical => ring(16, 0.0),
            Family::Triangular => ring(3, PI / 2.0),
            Family::Hexagonal => ring(6, 0.0),
            Family::Rectangular => {
                let h2 = half * 0.6;
                vec![[c - half, c - h2], [c + half, c - h2], [c + half, c + h2], [c - half, c + h2]]
            }
            Family::LShaped => {
                let (x0, y0, x1, y1) = (c - half, c - half, c + half, c + half);
                let (xm, ym) = (c, c);
                vec![[x0, y0], [x1, y0], [x1, ym], [xm, ym], [xm, y1], [x0, y1]]
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    fn half_extent(self) -> f64 {
        match self {
            Size::Small => 0.2,
            Size::Medium => 0.32,
            Size::Large => 0.45,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }
}

const HOLE_WORDS: [&str; 4] = ["no", "one", "two", "three"];

/// One procedural part.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub family: Family,
    pub size: Size,
    pub tall: bool,
    pub holes: usize,
}

impl Shape {
    pub fn new(family: Family, size: Size, tall: bool, holes: usize) -> Self {
        Shape {
            family,
            size,
            tall,
            holes: holes.min(3),
        }
    }

    /// Every distinct attribute combination (120 in total).
    pub fn catalog() -> Vec<Shape> {
        let mut out = Vec::new();
        for family in Family::ALL {
            for size in Size::ALL {
                for tall in [false, true] {
                    for holes in 0..4 {
                        out.push(Shape::new(family, size, tall, holes));
                    }
                }
            }
        }
        out
    }

    pub fn describe(&self) -> String {
        let body = if self.tall { "tall block" } else { "flat plate" };
        let holes = match self.holes {
            0 => "without holes".to_string(),
            1 => "with one hole".to_string(),
            n => format!("with {} holes", HOLE_WORDS[n]),
        };
        format!(
            "a {} {} {body} {holes}",
            self.size.word(),
            self.family.adjective()
        )
    }

    fn height(&self) -> f64 {
        let h = self.size.half_extent();
        if self.tall {
            (1.6 * h).min(0.95)
        } else {
            0.25 * h
        }
    }

    fn hole_centers(&self) -> Vec<[f64; 2]> {
        let h = self.size.half_extent();
        let r = 0.35 * h;
        (0..self.holes)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / self.holes as f64 + 0.3;
                [0.5 + r * a.cos() * 0.5, 0.5 + r * a.sin() * 0.5]
            })
            .collect()
    }

    fn hole_radius(&self) -> f64 {
        0.08 * self.size.half_extent()
    }

    /// Quantized construction tokens.
    pub fn tokens(&self) -> Result<Vec<[u8; 2]>> {
        let q = |p: [f64; 2]| -> Result<[u8; 2]> { Ok([quantize_coord(p[0])?, quantize_coord(p[1])?]) };
        let mut out = Vec::new();
        let outer = self.family.profile(self.size.half_extent());
        for &p in outer.iter().chain(std::iter::once(&outer[0])) {
            out.push(q(p)?);
        }
        let hr = self.hole_radius();
        for c in self.hole_centers() {
            let ring: Vec<[f64; 2]> = (0..8)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / 8.0;
                    [c[0] + hr * a.cos(), c[1] + hr * a.sin()]
                })
                .collect();
            for &p in ring.iter().chain(std::iter::once(&ring[0])) {
                out.push(q(p)?);
            }
        }
        let hb = quantize_coord(self.height())?;
        out.push([hb, hb]);
        Ok(out)
    }

    fn inside(&self, outer: &[[f64; 2]], p: [f64; 2]) -> bool {
        let hr = self.hole_radius();
        point_in_polygon(outer, p)
            && self
                .hole_centers()
                .iter()
                .all(|c| (p[0] - c[0]).hypot(p[1] - c[1]) > hr)
    }

    /// `n` surface samples of the extruded solid, in model units.
    pub fn surface_points(&self, n: usize, rng: &mut ChaCha8Rng) -> Mat {
        let outer = self.family.profile(self.size.half_extent());
        let h = self.height();
        let edges: Vec<([f64; 2], [f64; 2], f64)> = (0..outer.len())
            .map(|i| {
                let (a, b) = (outer[i], outer[(i + 1) % outer.len()]);
                (a, b, (b[0] - a[0]).hypot(b[1] - a[1]))
            })
            .collect();
        let perimeter: f64 = edges.iter().map(|e| e.2).sum();
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (1.0f64, 0.0f64, 1.0f64, 0.0f64);
        for p in &outer {
            xmin = xmin.min(p[0]);
            xmax = xmax.max(p[0]);
            ymin = ymin.min(p[1]);
            ymax = ymax.max(p[1]);
        }
        let mut out = Mat::zeros((n, 3));
        for i in 0..n {
            let side = rng.random::<f64>() < 0.5;
            let p = if side {
                let mut t = rng.random::<f64>() * perimeter;
                let mut pt = outer[0];
                for &(a, b, len) in &edges {
                    if t <= len {
                        let u = if len > 0.0 { t / len } else { 0.0 };
                        pt = [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1])];
                        break;
                    }
                    t -= len;
                }
                [pt[0], pt[1], rng.random::<f64>() * h]
            } else {
                let z = if rng.random::<bool>() { h } else { 0.0 };
                let mut pt = [0.5, 0.5];
                for _ in 0..64 {
                    let cand = [rng.random_range(xmin..=xmax), rng.random_range(ymin..=ymax)];
                    if self.inside(&outer, cand) {
                        pt = cand;
                        break;
                    }
                }
                [pt[0], pt[1], z]
            };
            out.row_mut(i).assign(&ndarray::arr1(&p));
        }
        out
    }

    pub fn record(
        &self,
        id: impl Into<String>,
        split: Split,
        provider: &dyn TextEmbeddingProvider,
        points_per_model: usize,
        max_seq_len: usize,
        seed_value: u64,
    ) -> Result<CorpusRecord> {
        let id = id.into();
        let mut rng = seed::rng(seed_value, &[seed::fnv1a(id.as_bytes())]);
        let source = self.surface_points(points_per_model, &mut rng);
        let pc = sample_points(&source, points_per_model, seed::derive(seed_value, &[1]))?;
        Ok(CorpusRecord {
            sequence: CadSequence::new(self.tokens()?, max_seq_len)?,
            points: normalize_points(&pc),
            text: provider.tokenize(&self.describe()),
            split,
            id,
            points_path: None,
        })
    }
}

/// Even-odd rule.
fn point_in_polygon(poly: &[[f64; 2]], p: [f64; 2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub points_per_model: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// The shapes used for a spec, in id order. Attribute combinations are drawn
/// without repetition while the catalog lasts.
pub fn shapes(spec: &SyntheticSpec) -> Vec<Shape> {
    let catalog = Shape::catalog();
    let mut rng = seed::rng(spec.seed, &[0x5379_6e74]);
    let mut out = Vec::with_capacity(spec.total());
    while out.len() < spec.total() {
        let mut round = catalog.clone();
        round.shuffle(&mut rng);
        out.extend(round.into_iter().take(spec.total() - out.len()));
    }
    out
}

fn split_of(spec: &SyntheticSpec, i: usize) -> Split {
    if i < spec.train {
        Split::Train
    } else if i < spec.train + spec.val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn synthetic_corpus(spec: &SyntheticSpec, provider: &dyn TextEmbeddingProvider) -> Result<Corpus> {
    let records = shapes(spec)
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.record(
                format!("syn{i:05}"),
                split_of(spec, i),
                provider,
                spec.points_per_model,
                spec.max_seq_len,
                seed::derive(spec.seed, &[i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Corpus::from_records(records)
}

/// Writes a manifest plus raw point files (`2 x points_per_model` surface
/// samples each) so the ingestion path can be exercised end to end.
pub fn write_manifest(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let points_dir = dir.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut file = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for (i, s) in shapes(spec).iter().enumerate() {
        let id = format!("syn{i:05}");
        let mut rng = seed::rng(seed::derive(spec.seed, &[i as u64]), &[seed::fnv1a(id.as_bytes())]);
        let rel = format!("points/{id}.f32");
        write_points_file(&dir.join(&rel), &s.surface_points(2 * spec.points_per_model, &mut rng))?;
        let entry = ManifestEntry {
            id,
            split: split_of(spec, i).to_string(),
            text: s.describe(),
            tokens: s.tokens()?.iter().map(|t| [t[0] as i64, t[1] as i64]).collect(),
            points: rel,
            level: None,
        };
        serde_json::to_writer(&mut file, &entry)?;
        file.write_all(b"\n").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}
