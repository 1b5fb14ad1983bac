//! Seeded generator for a small corpus of noisy geometric shapes, one shape
//! per class. Used for end-to-end checks where no real scans are at hand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Cross,
    Square,
    Triangle,
}

impl Shape {
    /// In directory (and therefore class-index) order.
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Cross, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Cross => "cross",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Membership test in shape-local coordinates scaled to the radius.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Circle => u * u + v * v <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.33) || (u.abs() <= 0.33 && v.abs() <= 1.0)
            }
            Shape::Triangle => {
                // Apex up (image rows grow downwards), vertices on the unit circle.
                let s3 = 3f64.sqrt();
                v >= -1.0 && v <= 0.5 && s3 * u.abs() <= v + 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub size: usize,
    /// Images per class, in [`Shape::ALL`] order.
    pub counts: [usize; 4],
    /// Standard deviation of additive Gaussian noise, 0–255 scale.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            size: 64,
            counts: [100; 4],
            noise: 20.0,
            seed: 7,
        }
    }
}

/// Renders one image on the 0–255 scale, quantized to integers.
pub fn render(shape: Shape, size: usize, noise: f64, rng: &mut Stream) -> Image {
    const SUPERSAMPLE: usize = 4;
    let s = size as f64;
    let radius = rng.uniform(0.26, 0.32) * s;
    let cy = rng.uniform(0.46, 0.54) * s;
    let cx = rng.uniform(0.46, 0.54) * s;
    let angle = rng.uniform(-0.15, 0.15);
    let background = rng.uniform(20.0, 60.0);
    let foreground = rng.uniform(170.0, 230.0);
    let (sin, cos) = angle.sin_cos();
    let mut img = Image::from_fn(size, size, |y, x| {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - cy;
                let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - cx;
                let u = (cos * px + sin * py) / radius;
                let v = (-sin * px + cos * py) / radius;
                hits += usize::from(shape.contains(u, v));
            }
        }
        let cover = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        background + cover * (foreground - background)
    });
    for v in img.data_mut() {
        *v = (*v + noise * rng.normal()).round().clamp(0.0, 255.0);
    }
    img
}

/// All images of the corpus with their class indices. Image `i` of class
/// `c` draws from `Stream::new(seed).split(c).split(i)`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<(usize, Image)>> {
    if spec.size < 8 {
        return Err(Error::invalid(format!("corpus images must be at least 8px, got {}", spec.size)));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise must be finite and non-negative"));
    }
    let root = Stream::new(spec.seed);
    let mut out = Vec::with_capacity(spec.counts.iter().sum());
    for (c, (&shape, &count)) in Shape::ALL.iter().zip(&spec.counts).enumerate() {
        let class_rng = root.split(c as u64);
        for i in 0..count {
            let mut rng = class_rng.split(i as u64);
            out.push((c, render(shape, spec.size, spec.noise, &mut rng)));
        }
    }
    Ok(out)
}

/// Writes the corpus as `<dir>/<shape>/<shape>_<index>.png`.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<()> {
    for shape in Shape::ALL {
        let d = dir.join(shape.name());
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = [0usize; 4];
    for (c, img) in generate(spec)? {
        let shape = Shape::ALL[c];
        let path = dir.join(shape.name()).join(format!("{}_{:04}.png", shape.name(), index[c]));
        index[c] += 1;
        img.map(|v| v / 255.0).save_debug_png(&path)?;
    }
    Ok(())
}
