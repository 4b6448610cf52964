//! Procedural shapes dataset: anti-aliased ellipses, regular polygons and
//! crosses on flat backgrounds.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Supersampling grid per pixel axis.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Primitive {
    Ellipse,
    Polygon(usize),
    Cross,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Primitive::Ellipse => write!(f, "ellipse"),
            Primitive::Polygon(k) => write!(f, "polygon-{k}"),
            Primitive::Cross => write!(f, "cross"),
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ellipse" => Ok(Primitive::Ellipse),
            "cross" => Ok(Primitive::Cross),
            other => {
                let k = other
                    .strip_prefix("polygon-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown primitive {other:?}")))?;
                if k < 3 {
                    return Err(Error::Config(format!("polygon needs at least 3 sides, got {k}")));
                }
                Ok(Primitive::Polygon(k))
            }
        }
    }
}

impl TryFrom<String> for Primitive {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Primitive> for String {
    fn from(p: Primitive) -> String {
        p.to_string()
    }
}

/// Parse a comma-separated class list such as `ellipse,polygon-3,cross`.
pub fn parse_classes(list: &str) -> Result<Vec<Primitive>> {
    let classes: Vec<Primitive> = list.split(',').map(str::parse).collect::<Result<_>>()?;
    if classes.is_empty() {
        return Err(Error::Config("empty class list".into()));
    }
    Ok(classes)
}

/// One rendered shape. Coordinates are in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub class_id: usize,
    pub primitive: Primitive,
    pub center: (f64, f64),
    pub rotation: f64,
    /// Bounding radius.
    pub scale: f64,
    /// Minor-to-major axis ratio (ellipses only).
    pub aspect: f64,
    pub fill: f64,
    pub background: f64,
}

impl ShapeSpec {
    fn random<R: Rng>(rng: &mut R, class_id: usize, primitive: Primitive, size: usize) -> Self {
        let s = size as f64;
        let scale = rng.random_range(0.22..0.38) * s;
        let margin = scale + 1.0;
        ShapeSpec {
            class_id,
            primitive,
            center: (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin)),
            rotation: rng.random_range(0.0..2.0 * PI),
            scale,
            aspect: rng.random_range(0.55..1.0),
            fill: rng.random_range(0.65..1.0),
            background: rng.random_range(0.0..0.3),
        }
    }

    /// Whether the point lies inside the shape.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let u = (c * dx + s * dy) / self.scale;
        let v = (-s * dx + c * dy) / self.scale;
        match self.primitive {
            Primitive::Ellipse => u * u + (v / self.aspect).powi(2) <= 1.0,
            Primitive::Polygon(k) => {
                let step = 2.0 * PI / k as f64;
                (0..k).all(|i| {
                    let (a0, a1) = (i as f64 * step, (i + 1) as f64 * step);
                    let (x0, y0, x1, y1) = (a0.cos(), a0.sin(), a1.cos(), a1.sin());
                    (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0) >= 0.0
                })
            }
            Primitive::Cross => {
                let (arm, half) = (0.9, 0.27);
                (u.abs() <= arm && v.abs() <= half) || (u.abs() <= half && v.abs() <= arm)
            }
        }
    }

    /// Coverage-weighted intensity image in `[0, 1]`, `size × size`.
    pub fn render(&self, size: usize) -> Vec<f64> {
        let sub = 1.0 / SUPERSAMPLE as f64;
        let mut out = Vec::with_capacity(size * size);
        for py in 0..size {
            for px in 0..size {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) * sub;
                        let y = py as f64 + (sy as f64 + 0.5) * sub;
                        hits += self.contains(x, y) as usize;
                    }
                }
                let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                out.push(self.background + cov * (self.fill - self.background));
            }
        }
        out
    }
}

/// Render `count` random shapes per class at `size × size`, `channels` deep,
/// mapped to `[-1, 1]`. Colour images tint each channel independently.
pub fn gen_dataset<S: Scalar>(
    classes: &[Primitive],
    count: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<(Dataset<S>, Vec<ShapeSpec>)> {
    if size != 32 && size != 64 {
        return Err(Error::Invalid(format!("image size {size} must be 32 or 64")));
    }
    if count == 0 || classes.is_empty() {
        return Err(Error::Invalid("need at least one class and one image per class".into()));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::Invalid(format!("channels {channels} must be 1 or 3")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(classes.len() * count);
    let mut labels = Vec::with_capacity(classes.len() * count);
    let mut specs = Vec::with_capacity(classes.len() * count);
    for (class_id, &primitive) in classes.iter().enumerate() {
        for _ in 0..count {
            let spec = ShapeSpec::random(&mut rng, class_id, primitive, size);
            let plane = spec.render(size);
            let tints: Vec<f64> = if channels == 1 {
                vec![1.0]
            } else {
                (0..channels).map(|_| rng.random_range(0.5..1.0)).collect()
            };
            let mut data = Vec::with_capacity(channels * size * size);
            for tint in &tints {
                data.extend(plane.iter().map(|v| S::of(v * tint * 2.0 - 1.0)));
            }
            images.push(Tensor::new(&[channels, size, size], data)?);
            labels.push(class_id);
            specs.push(spec);
        }
    }
    Ok((Dataset { images, labels }, specs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> Vec<Primitive> {
        parse_classes("ellipse,polygon-3,cross").unwrap()
    }

    #[test]
    fn parse_round_trip() {
        let c = classes();
        assert_eq!(c, vec![Primitive::Ellipse, Primitive::Polygon(3), Primitive::Cross]);
        assert_eq!(c[1].to_string(), "polygon-3");
        assert!(parse_classes("circle").is_err());
        assert!(parse_classes("polygon-2").is_err());
    }

    #[test]
    fn counts_labels_and_range() {
        let (d, specs) = gen_dataset::<f32>(&classes(), 10, 32, 1, 5).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(specs.len(), 30);
        for (i, &l) in d.labels.iter().enumerate() {
            assert_eq!(l, i / 10);
        }
        assert!(d.images.iter().all(|im| im.shape() == [1, 32, 32]));
        assert!(d.images.iter().flat_map(|im| im.data()).all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn deterministic_given_seed() {
        let (a, _) = gen_dataset::<f32>(&classes(), 3, 64, 3, 9).unwrap();
        let (b, _) = gen_dataset::<f32>(&classes(), 3, 64, 3, 9).unwrap();
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.bit_eq(y)));
        let (c, _) = gen_dataset::<f32>(&classes(), 3, 64, 3, 10).unwrap();
        assert!(!a.images[0].bit_eq(&c.images[0]));
    }

    #[test]
    fn shapes_stay_inside_the_canvas() {
        let (d, specs) = gen_dataset::<f64>(&classes(), 20, 32, 1, 1).unwrap();
        for (im, spec) in d.images.iter().zip(&specs) {
            let bg = spec.background * 2.0 - 1.0;
            let border = (0..32).flat_map(|i| [i, 31 * 32 + i, i * 32, i * 32 + 31]);
            for idx in border {
                assert!((im.data()[idx] - bg).abs() < 1e-12, "{spec:?}");
            }
            assert!(im.data().iter().any(|&v| (v - bg).abs() > 0.1));
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_dataset::<f32>(&classes(), 1, 48, 1, 0).is_err());
        assert!(gen_dataset::<f32>(&classes(), 0, 32, 1, 0).is_err());
    }
}
