//! Grayscale digit sources: the MNIST IDX format and a procedural renderer
//! used when no MNIST files are available.

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DIGIT_SIDE: usize = 28;

/// One 28×28 grayscale digit in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayDigit {
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// Train and test pools of source digits.
#[derive(Clone, Debug, Default)]
pub struct DigitSource {
    pub train: Vec<GrayDigit>,
    pub test: Vec<GrayDigit>,
}

impl DigitSource {
    /// Reads the four uncompressed MNIST IDX files from `dir`.
    pub fn from_mnist_dir(dir: &Path) -> Result<Self> {
        let train = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
        let test = load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
        Ok(Self { train, test })
    }

    /// Renders `train_per_class` and `test_per_class` digits of each class.
    pub fn procedural(train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n: usize| {
            let mut out = Vec::with_capacity(n * 10);
            for i in 0..n * 10 {
                let label = i % 10;
                out.push(GrayDigit { pixels: render_digit(label, &mut rng), label });
            }
            out
        };
        let train = make(train_per_class);
        let test = make(test_per_class);
        Self { train, test }
    }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX image file (magic 2051) and its label file (magic 2049).
pub fn load_idx(images: &Path, labels: &Path) -> Result<Vec<GrayDigit>> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let bad = |what: &str| Error::InvalidArgument(format!("{}: {what}", images.display()));
    if read_be_u32(&img, 0) != Some(2051) || read_be_u32(&lab, 0) != Some(2049) {
        return Err(bad("not an IDX image/label pair"));
    }
    let n = read_be_u32(&img, 4).ok_or_else(|| bad("truncated header"))? as usize;
    let rows = read_be_u32(&img, 8).ok_or_else(|| bad("truncated header"))? as usize;
    let cols = read_be_u32(&img, 12).ok_or_else(|| bad("truncated header"))? as usize;
    let nl = read_be_u32(&lab, 4).ok_or_else(|| bad("truncated label header"))? as usize;
    if rows != DIGIT_SIDE || cols != DIGIT_SIDE || nl != n {
        return Err(bad("unexpected dimensions"));
    }
    if img.len() < 16 + n * rows * cols || lab.len() < 8 + n {
        return Err(bad("truncated payload"));
    }
    Ok((0..n)
        .map(|i| {
            let px = &img[16 + i * rows * cols..16 + (i + 1) * rows * cols];
            GrayDigit { pixels: px.iter().map(|&b| b as f32 / 255.0).collect(), label: lab[8 + i] as usize }
        })
        .collect())
}

type Stroke = Vec<(f32, f32)>;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, from_deg: f32, to_deg: f32, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = (from_deg + (to_deg - from_deg) * i as f32 / n as f32) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke skeletons in a unit box, y pointing down.
fn skeleton(label: usize) -> Vec<Stroke> {
    match label {
        0 => vec![arc(0.5, 0.5, 0.28, 0.4, 0.0, 360.0, 20)],
        1 => vec![vec![(0.5, 0.1), (0.5, 0.9)], vec![(0.34, 0.26), (0.5, 0.1)]],
        2 => {
            let mut s = arc(0.5, 0.32, 0.25, 0.22, 180.0, 400.0, 12);
            s.extend([(0.22, 0.9), (0.8, 0.9)]);
            vec![s]
        }
        3 => vec![arc(0.48, 0.3, 0.24, 0.2, 200.0, 450.0, 12), arc(0.48, 0.7, 0.27, 0.2, 270.0, 520.0, 12)],
        4 => vec![vec![(0.62, 0.9), (0.62, 0.1), (0.2, 0.65), (0.82, 0.65)]],
        5 => {
            let mut s = vec![(0.75, 0.1), (0.3, 0.1), (0.28, 0.46)];
            s.extend(arc(0.48, 0.66, 0.27, 0.24, 225.0, 520.0, 12));
            vec![s]
        }
        6 => vec![vec![(0.68, 0.1), (0.3, 0.6)], arc(0.5, 0.67, 0.23, 0.22, 0.0, 360.0, 16)],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.4, 0.9)]],
        8 => vec![arc(0.5, 0.3, 0.2, 0.19, 0.0, 360.0, 14), arc(0.5, 0.7, 0.25, 0.21, 0.0, 360.0, 16)],
        9 => vec![arc(0.5, 0.33, 0.22, 0.22, 0.0, 360.0, 16), vec![(0.72, 0.35), (0.62, 0.9)]],
        _ => unreachable!("digit labels are 0..10"),
    }
}

fn seg_dist(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Renders a handwritten-looking digit: jittered skeleton, random affine
/// (rotation, shear, anisotropic scale, shift), random stroke width,
/// anti-aliased edges.
pub fn render_digit<R: Rng + ?Sized>(label: usize, rng: &mut R) -> Vec<f32> {
    let rot = rng.random_range(-15.0f32..15.0) * PI / 180.0;
    let shear = rng.random_range(-0.2f32..0.2);
    let (sx, sy) = (rng.random_range(0.85f32..1.1), rng.random_range(0.85f32..1.1));
    let (tx, ty) = (rng.random_range(-0.06f32..0.06), rng.random_range(-0.06f32..0.06));
    let half_width = rng.random_range(0.7f32..1.5);
    let (cr, sr) = (rot.cos(), rot.sin());
    let box_px = 20.0;
    let origin = (DIGIT_SIDE as f32 - box_px) / 2.0;
    let strokes: Vec<Stroke> = skeleton(label)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(|(x, y)| {
                    let x = x + rng.random_range(-0.03f32..0.03) - 0.5;
                    let y = y + rng.random_range(-0.03f32..0.03) - 0.5;
                    let (x, y) = (sx * (x + shear * y), sy * y);
                    let (x, y) = (cr * x - sr * y + 0.5 + tx, sr * x + cr * y + 0.5 + ty);
                    (origin + x * box_px, origin + y * box_px)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0f32; DIGIT_SIDE * DIGIT_SIDE];
    for r in 0..DIGIT_SIDE {
        for c in 0..DIGIT_SIDE {
            let (px, py) = (c as f32 + 0.5, r as f32 + 0.5);
            let mut d = f32::INFINITY;
            for s in &strokes {
                for w in s.windows(2) {
                    d = d.min(seg_dist(px, py, w[0], w[1]));
                }
            }
            out[r * DIGIT_SIDE + c] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_digits_are_deterministic_and_in_range() {
        let a = DigitSource::procedural(3, 1, 9);
        let b = DigitSource::procedural(3, 1, 9);
        assert_eq!(a.train, b.train);
        assert_eq!(a.train.len(), 30);
        assert_eq!(a.test.len(), 10);
        for d in &a.train {
            assert!(d.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            let ink: f32 = d.pixels.iter().sum();
            assert!(ink > 20.0, "digit {} nearly empty", d.label);
        }
    }

    #[test]
    fn idx_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        img.extend((0..2 * 784).map(|i| (i % 256) as u8));
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        fs::write(dir.path().join("i"), &img).unwrap();
        fs::write(dir.path().join("l"), &lab).unwrap();
        let d = load_idx(&dir.path().join("i"), &dir.path().join("l")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].label, 3);
        assert_eq!(d[0].pixels[255], 1.0);
    }

    #[test]
    fn idx_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("i"), [0u8; 16]).unwrap();
        fs::write(dir.path().join("l"), [0u8; 8]).unwrap();
        assert!(load_idx(&dir.path().join("i"), &dir.path().join("l")).is_err());
    }
}
