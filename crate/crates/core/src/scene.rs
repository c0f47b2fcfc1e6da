//! Synthetic two-domain scenes: coloured shapes on a styled background.
//!
//! The class of an object is its shape; colour is drawn independently, so
//! the only reliable cue is geometry. Domains differ in background palette,
//! object palette, sensor noise and background texture. Pixel values are
//! quantised to `k / 255` so images survive a PNG round trip bit for bit.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FgrrError, Result};
use crate::geometry::{iou, BBox};
use crate::pixel_correspondence::Domain;
use crate::tensor::Matrix;

/// Shapes rendered for classes `1..=4`.
pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];

pub const MAX_OBJECTS: usize = 5;

/// RGB image stored pixel-major: row `y * width + x` holds `[r, g, b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Matrix,
}

impl Image {
    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt()
    }

    /// Mean absolute per-channel difference to another image of equal size.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.pixels.shape() != other.pixels.shape() {
            return Err(FgrrError::Shape("images of different sizes".into()));
        }
        let total: f64 = self.pixels.data().iter().zip(other.pixels.data()).map(|(a, b)| (a - b).abs()).sum();
        Ok(total / self.pixels.len() as f64)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let row = self.pixels.row(i);
            *px = image::Rgb([quantise(row[0]), quantise(row[1]), quantise(row[2])]);
        }
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let buf = image::open(path)?.to_rgb8();
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let data = buf.pixels().flat_map(|p| p.0.map(|v| f64::from(v) / 255.0)).collect();
        Ok(Self {
            height: h,
            width: w,
            pixels: Matrix::from_vec(h * w, 3, data)?,
        })
    }
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Appearance of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub background: [f64; 3],
    /// Per-image uniform jitter added to the background colour.
    pub background_jitter: f64,
    /// Object colours; each object picks one uniformly.
    pub object_palette: Vec<[f64; 3]>,
    /// Standard deviation of per-pixel Gaussian-ish noise.
    pub noise: f64,
    /// Amplitude of diagonal background stripes, 0 for none.
    pub texture: f64,
}

/// Severity of the source-to-target appearance change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shift {
    Mild,
    Moderate,
    Severe,
}

impl std::str::FromStr for Shift {
    type Err = FgrrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(FgrrError::Config(format!("unknown shift `{other}`"))),
        }
    }
}

impl DomainStyle {
    /// Dark background, saturated objects, clean sensor.
    pub fn source() -> Self {
        Self {
            background: [0.12, 0.12, 0.16],
            background_jitter: 0.04,
            object_palette: vec![[0.9, 0.2, 0.2], [0.2, 0.85, 0.3], [0.25, 0.4, 0.95], [0.95, 0.85, 0.2]],
            noise: 0.02,
            texture: 0.0,
        }
    }

    pub fn target(shift: Shift) -> Self {
        match shift {
            Shift::Mild => Self {
                background: [0.22, 0.2, 0.18],
                background_jitter: 0.05,
                object_palette: vec![[0.8, 0.3, 0.3], [0.3, 0.75, 0.35], [0.3, 0.45, 0.85], [0.85, 0.75, 0.3]],
                noise: 0.04,
                texture: 0.0,
            },
            Shift::Moderate => Self {
                background: [0.36, 0.33, 0.27],
                background_jitter: 0.06,
                object_palette: vec![[0.85, 0.55, 0.2], [0.15, 0.5, 0.55], [0.6, 0.25, 0.7], [0.95, 0.95, 0.85]],
                noise: 0.07,
                texture: 0.06,
            },
            Shift::Severe => Self {
                background: [0.75, 0.75, 0.7],
                background_jitter: 0.08,
                object_palette: vec![[0.45, 0.35, 0.25], [0.3, 0.3, 0.45], [0.55, 0.2, 0.2], [0.2, 0.4, 0.25]],
                noise: 0.12,
                texture: 0.12,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: usize,
    pub min_object: usize,
    pub max_object: usize,
    pub style: DomainStyle,
    pub domain: Domain,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(domain: Domain, style: DomainStyle, seed: u64) -> Self {
        Self {
            image_size: 64,
            classes: SHAPE_NAMES.len(),
            min_object: 12,
            max_object: 22,
            style,
            domain,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            return Err(FgrrError::Config(format!("classes must be in 1..={}", SHAPE_NAMES.len())));
        }
        if self.min_object < 4 || self.min_object > self.max_object || self.max_object + 2 > self.image_size {
            return Err(FgrrError::Config("object sizes must fit inside the image".into()));
        }
        if self.style.object_palette.is_empty() {
            return Err(FgrrError::Config("object palette is empty".into()));
        }
        Ok(())
    }
}

/// A rendered image with its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

/// Whether the point `(px, py)` lies on a shape of class `label` drawn in `b`.
fn covers(label: usize, b: &BBox, px: f64, py: f64) -> bool {
    let (u, v) = ((px - b.x1) / b.width(), (py - b.y1) / b.height());
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return false;
    }
    match label {
        1 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        2 => true,
        // apex at the top centre, base along the bottom edge
        3 => (u - 0.5).abs() <= 0.5 * v,
        _ => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
    }
}

/// Rough standard normal from the sum of four uniforms.
fn noise_sample(rng: &mut impl Rng) -> f64 {
    let s: f64 = (0..4).map(|_| rng.gen::<f64>()).sum();
    (s - 2.0) * 3f64.sqrt()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut boxes: Vec<BBox> = Vec::new();
    let mut labels = Vec::new();
    let mut colours = Vec::new();
    for _ in 0..64 {
        if boxes.len() == count {
            break;
        }
        let w = rng.gen_range(spec.min_object..=spec.max_object) as f64;
        let h = (w * rng.gen_range(0.85..1.15)).round().clamp(spec.min_object as f64, spec.max_object as f64);
        let x = rng.gen_range(1..=n - 1 - w as usize) as f64;
        let y = rng.gen_range(1..=n - 1 - h as usize) as f64;
        let candidate = BBox::new(x, y, x + w, y + h)?;
        let label = rng.gen_range(1..=spec.classes);
        let colour = spec.style.object_palette[rng.gen_range(0..spec.style.object_palette.len())];
        if boxes.iter().any(|b| iou(b, &candidate) > 0.0) {
            continue;
        }
        boxes.push(candidate);
        labels.push(label);
        colours.push(colour);
    }

    let jitter: Vec<f64> = (0..3)
        .map(|_| rng.gen_range(-spec.style.background_jitter..=spec.style.background_jitter))
        .collect();
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pixels = Matrix::zeros(n * n, 3);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = spec.style.texture * ((px + py) * 0.8 + phase).sin();
            let mut rgb: [f64; 3] = std::array::from_fn(|c| spec.style.background[c] + jitter[c] + stripe);
            for (i, b) in boxes.iter().enumerate() {
                if covers(labels[i], b, px, py) {
                    rgb = colours[i];
                }
            }
            let row = pixels.row_mut(y * n + x);
            for c in 0..3 {
                let v = rgb[c] + spec.style.noise * noise_sample(&mut rng);
                row[c] = f64::from(quantise(v)) / 255.0;
            }
        }
    }
    Ok(Scene {
        image: Image {
            height: n,
            width: n,
            pixels,
        },
        boxes,
        labels,
        domain: spec.domain,
        seed: spec.seed,
    })
}

/// Per-image annotation file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

impl Scene {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            boxes: self.boxes.iter().map(BBox::as_array).collect(),
            labels: self.labels.clone(),
            domain: self.domain,
            seed: self.seed,
        }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        self.image.save_png(&dir.join(format!("{stem}.png")))?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.annotation())?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let image = Image::load_png(&dir.join(format!("{stem}.png")))?;
        let ann: Annotation = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if ann.boxes.len() != ann.labels.len() {
            return Err(FgrrError::Precondition(format!("{stem}: boxes and labels differ in length")));
        }
        let boxes = ann.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect::<Result<_>>()?;
        Ok(Self {
            image,
            boxes,
            labels: ann.labels,
            domain: ann.domain,
            seed: ann.seed,
        })
    }
}

/// How a dataset is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub shift: Shift,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            shift: Shift::Moderate,
            source_train: 128,
            target_train: 128,
            target_test: 128,
        }
    }
}

/// Labelled source images, unlabelled target images for adaptation and
/// held-out labelled target images for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub source_train: Vec<Scene>,
    pub target_train: Vec<Scene>,
    pub target_test: Vec<Scene>,
}

const SPLITS: [&str; 3] = ["source_train", "target_train", "target_test"];

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        // disjoint seed ranges per split
        let split = |domain: Domain, style: &DomainStyle, offset: u64, count: usize| -> Result<Vec<Scene>> {
            (0..count as u64)
                .map(|i| {
                    let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(offset * 100_000 + i);
                    generate_scene(&SceneSpec::new(domain, style.clone(), seed))
                })
                .collect()
        };
        let target = DomainStyle::target(spec.shift);
        Ok(Self {
            spec: spec.clone(),
            source_train: split(Domain::Source, &DomainStyle::source(), 0, spec.source_train)?,
            target_train: split(Domain::Target, &target, 1, spec.target_train)?,
            target_test: split(Domain::Target, &target, 2, spec.target_test)?,
        })
    }

    fn splits(&self) -> [&Vec<Scene>; 3] {
        [&self.source_train, &self.target_train, &self.target_test]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.spec)?)?;
        for (name, scenes) in SPLITS.iter().zip(self.splits()) {
            let sub = dir.join(name);
            fs::create_dir_all(&sub)?;
            for (i, s) in scenes.iter().enumerate() {
                s.save(&sub, &format!("{i:04}"))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec: DatasetSpec = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
        let load_split = |name: &str, count: usize| -> Result<Vec<Scene>> {
            (0..count).map(|i| Scene::load(&dir.join(name), &format!("{i:04}"))).collect()
        };
        Ok(Self {
            source_train: load_split(SPLITS[0], spec.source_train)?,
            target_train: load_split(SPLITS[1], spec.target_train)?,
            target_test: load_split(SPLITS[2], spec.target_test)?,
            spec,
        })
    }
}
