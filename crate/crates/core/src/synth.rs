//! Procedural image-caption corpus: colored shapes on noisy backgrounds.
//!
//! Single-object scenes are labeled by shape with classes balanced
//! round-robin, and shapes are area-matched so that the pixel count alone
//! says nothing about the class. Relation scenes hold two differently colored objects, one
//! per image half, and the caption states which is left of which.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::{format_record, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Ex,
    Bar,
    Hexagon,
    Semicircle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Ex,
        ShapeKind::Bar,
        ShapeKind::Hexagon,
        ShapeKind::Semicircle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Ex => "x",
            ShapeKind::Bar => "bar",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Semicircle => "semicircle",
        }
    }

    /// Area at radius 1, by midpoint integration.
    pub fn unit_area(self) -> f64 {
        const N: usize = 400;
        let step = 2.0 / N as f64;
        let mut hits = 0usize;
        for i in 0..N {
            for j in 0..N {
                let x = -1.0 + (i as f64 + 0.5) * step;
                let y = -1.0 + (j as f64 + 0.5) * step;
                hits += self.contains(x, y, 1.0) as usize;
            }
        }
        hits as f64 * step * step
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => ax <= 0.85 * r && ay <= 0.85 * r,
            ShapeKind::Triangle => dy >= -r && dy <= r && ax <= (dy + r) / 2.0,
            ShapeKind::Cross => (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r),
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= 0.3 * r * r
            }
            ShapeKind::Ex => (ax - ay).abs() <= r / 3.0 && ax.max(ay) <= 0.9 * r,
            ShapeKind::Bar => ax <= r && ay <= 0.4 * r,
            ShapeKind::Hexagon => ay <= 0.866 * r && 0.866 * ax + 0.5 * ay <= 0.866 * r,
            ShapeKind::Semicircle => dx * dx + dy * dy <= r * r && dy <= 0.0,
        }
    }
}

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.1]),
    ("purple", [0.6, 0.2, 0.8]),
    ("orange", [1.0, 0.55, 0.0]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("white", [0.95, 0.95, 0.95]),
];

fn palette(name: &str) -> Option<[f32; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// Corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub shapes: Vec<ShapeKind>,
    pub colors: Vec<String>,
    /// Square image side; ignored when `size_range` is set.
    pub image_size: usize,
    /// Inclusive range for independently drawn heights and widths.
    pub size_range: Option<(usize, usize)>,
    pub count: usize,
    /// Single objects are area-matched: this bounds the radius of the disc
    /// with the same area, as fractions of the shorter image side.
    pub radius: (f64, f64),
    /// Single-object caption; `{color}` and `{shape}` are substituted.
    pub template: String,
    pub relation: bool,
    /// Lines of pure text written next to the manifest.
    pub text_lines: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            shapes: ShapeKind::ALL[..4].to_vec(),
            colors: PALETTE[..6].iter().map(|(n, _)| n.to_string()).collect(),
            image_size: 32,
            size_range: None,
            count: 256,
            radius: (0.27, 0.36),
            template: "a {color} {shape}".into(),
            relation: false,
            text_lines: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::config("need at least one shape and one color"));
        }
        if let Some(bad) = self.colors.iter().find(|c| palette(c).is_none()) {
            return Err(Error::config(format!("unknown color `{bad}`")));
        }
        if self.relation && self.colors.len() < 2 {
            return Err(Error::config("relation scenes need two distinct colors"));
        }
        let min_side = match self.size_range {
            Some((lo, hi)) if lo > hi => {
                return Err(Error::config("size_range lower bound exceeds upper bound"))
            }
            Some((lo, _)) => lo,
            None => self.image_size,
        };
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo < hi && hi < 0.45) {
            return Err(Error::config("radius range must satisfy 0 < lo < hi < 0.45"));
        }
        if min_side < 12 {
            return Err(Error::config("images must be at least 12 pixels on a side"));
        }
        Ok(())
    }
}

/// One rendered scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: Image,
    pub caption: String,
    pub label: Option<usize>,
}

struct Object {
    shape: ShapeKind,
    color: [f32; 3],
    cx: f64,
    cy: f64,
    r: f64,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(h: usize, w: usize, objects: &[Object], rng: &mut ChaCha8Rng) -> Image {
    let bg: f32 = rng.random_range(0.0..0.2);
    let mut img = Image::filled(h, w, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = objects
                .iter()
                .rev()
                .find(|o| o.shape.contains(px - o.cx, py - o.cy, o.r));
            let p = img.pixel_mut(y, x);
            match hit {
                Some(o) => p.copy_from_slice(&o.color.map(quantize)),
                None => {
                    for c in p.iter_mut() {
                        *c = quantize(bg + rng.random_range(-0.04f32..0.04));
                    }
                }
            }
        }
    }
    img
}

fn jittered(name: &str, rng: &mut ChaCha8Rng) -> [f32; 3] {
    palette(name).expect("validated color").map(|c| c + rng.random_range(-0.05f32..0.05))
}

fn draw_size(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (usize, usize) {
    match spec.size_range {
        Some((lo, hi)) => (rng.random_range(lo..=hi), rng.random_range(lo..=hi)),
        None => (spec.image_size, spec.image_size),
    }
}

fn single(spec: &SyntheticSpec, index: usize, scale: &[f64], rng: &mut ChaCha8Rng) -> SyntheticSample {
    let label = index % spec.shapes.len();
    let shape = spec.shapes[label];
    let color = &spec.colors[rng.random_range(0..spec.colors.len())];
    let (h, w) = draw_size(spec, rng);
    let side = h.min(w) as f64;
    // equal-area disc radius, converted to this shape's radius
    let r_eq = rng.random_range(spec.radius.0 * side..spec.radius.1 * side);
    let r = (r_eq * scale[label]).min(0.45 * side);
    let cx = rng.random_range(r + 0.5..w as f64 - r - 0.5);
    let cy = rng.random_range(r + 0.5..h as f64 - r - 0.5);
    let obj = Object {
        shape,
        color: jittered(color, rng),
        cx,
        cy,
        r,
    };
    let caption = spec.template.replace("{color}", color).replace("{shape}", shape.name());
    SyntheticSample {
        image: render(h, w, &[obj], rng),
        caption,
        label: Some(label),
    }
}

fn relation(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticSample {
    let (h, w) = draw_size(spec, rng);
    let side = h.min(w) as f64;
    let half = w as f64 / 2.0;
    let ci = rng.random_range(0..spec.colors.len());
    let cj = (ci + rng.random_range(1..spec.colors.len())) % spec.colors.len();
    let mut objs = Vec::with_capacity(2);
    let mut names = Vec::with_capacity(2);
    for (k, c) in [ci, cj].into_iter().enumerate() {
        let r = rng.random_range(0.12 * side..0.2 * side);
        let (lo, hi) = if k == 0 { (0.0, half) } else { (half, w as f64) };
        let cx = rng.random_range(lo + r + 0.5..hi - r - 0.5);
        let cy = rng.random_range(r + 0.5..h as f64 - r - 0.5);
        let shape = spec.shapes[rng.random_range(0..spec.shapes.len())];
        names.push(format!("{} {}", spec.colors[c], shape.name()));
        objs.push(Object {
            shape,
            color: jittered(&spec.colors[c], rng),
            cx,
            cy,
            r,
        });
    }
    let caption = if rng.random_bool(0.5) {
        format!("a {} left of a {}", names[0], names[1])
    } else {
        format!("a {} right of a {}", names[1], names[0])
    };
    SyntheticSample {
        image: render(h, w, &objs, rng),
        caption,
        label: None,
    }
}

/// Render the corpus in memory.
pub fn generate_samples(spec: &SyntheticSpec, seed: u64) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale: Vec<f64> = spec
        .shapes
        .iter()
        .map(|s| (std::f64::consts::PI / s.unit_area()).sqrt())
        .collect();
    Ok((0..spec.count)
        .map(|i| {
            if spec.relation {
                relation(spec, &mut rng)
            } else {
                single(spec, i, &scale, &mut rng)
            }
        })
        .collect())
}

/// Short descriptive sentences over the same vocabulary.
pub fn generate_text(spec: &SyntheticSpec, lines: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
    let relations = ["left of", "right of", "above", "below", "next to"];
    (0..lines)
        .map(|_| {
            let pick = |rng: &mut ChaCha8Rng| {
                let c = &spec.colors[rng.random_range(0..spec.colors.len())];
                let s = spec.shapes[rng.random_range(0..spec.shapes.len())].name();
                format!("{c} {s}")
            };
            let a = pick(&mut rng);
            let b = pick(&mut rng);
            let rel = relations[rng.random_range(0..relations.len())];
            format!("the {a} is {rel} the {b}.")
        })
        .collect()
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenDataset {
    pub manifest: PathBuf,
    pub text: Option<PathBuf>,
    pub records: Vec<ManifestRecord>,
}

/// Write `images/NNNNN.ppm`, `manifest.jsonl` and optionally `text.txt`
/// under `dir`.
pub fn write_dataset(spec: &SyntheticSpec, seed: u64, dir: &Path) -> Result<WrittenDataset> {
    let samples = generate_samples(spec, seed)?;
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::new();
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.ppm");
        s.image.save(&dir.join(&rel))?;
        let rec = ManifestRecord {
            image: rel,
            caption: s.caption.clone(),
            label: s.label,
        };
        manifest.push_str(&format_record(&rec));
        manifest.push('\n');
        records.push(rec);
    }
    let manifest_path = dir.join("manifest.jsonl");
    fs::write(&manifest_path, manifest)?;
    let text = if spec.text_lines > 0 {
        let path = dir.join("text.txt");
        let mut body = generate_text(spec, spec.text_lines, seed).join("\n");
        body.push('\n');
        fs::write(&path, body)?;
        Some(path)
    } else {
        None
    };
    Ok(WrittenDataset {
        manifest: manifest_path,
        text,
        records,
    })
}
