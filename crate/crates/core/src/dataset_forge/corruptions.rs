//! Texture corruptions for Corrupted CIFAR-10.
//!
//! Each corruption is a pure function of (image, severity, seed). Brightness,
//! contrast, saturate and pixelate follow the usual ImageNet-C parameter
//! tables. The remaining six are lightweight procedural approximations built
//! from seeded noise rather than the original image assets and ImageMagick
//! filters.

use std::io::Cursor;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::{Error, Result};

pub const DEFAULT_SEVERITY: u8 = 4;
pub const SEVERITY_RANGE: RangeInclusive<u8> = 1..=5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Spatter,
    Elastic,
    Jpeg,
    Pixelate,
    Saturate,
}

impl Corruption {
    pub const ALL: [Corruption; 10] = [
        Corruption::Snow,
        Corruption::Frost,
        Corruption::Fog,
        Corruption::Brightness,
        Corruption::Contrast,
        Corruption::Spatter,
        Corruption::Elastic,
        Corruption::Jpeg,
        Corruption::Pixelate,
        Corruption::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Snow => "snow",
            Self::Frost => "frost",
            Self::Fog => "fog",
            Self::Brightness => "brightness",
            Self::Contrast => "contrast",
            Self::Spatter => "spatter",
            Self::Elastic => "elastic",
            Self::Jpeg => "jpeg",
            Self::Pixelate => "pixelate",
            Self::Saturate => "saturate",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown corruption {name:?}")))
    }

    pub fn apply(self, image: &Image, severity: u8, seed: u64) -> Result<Image> {
        if !SEVERITY_RANGE.contains(&severity) {
            return Err(Error::InvalidSpec(format!("severity {severity} outside 1..=5")));
        }
        if image.channels != 3 {
            return Err(Error::InvalidArgument("corruptions expect RGB images".into()));
        }
        let s = (severity - 1) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = match self {
            Self::Brightness => brightness(image, [0.1, 0.2, 0.3, 0.4, 0.5][s]),
            Self::Contrast => contrast(image, [0.4, 0.3, 0.2, 0.1, 0.05][s]),
            Self::Saturate => saturate(image, [(0.3, 0.0), (0.1, 0.0), (2.0, 0.0), (5.0, 0.1), (20.0, 0.2)][s]),
            Self::Pixelate => pixelate(image, [0.95, 0.9, 0.85, 0.75, 0.65][s]),
            Self::Jpeg => jpeg(image, [80, 65, 58, 50, 40][s])?,
            Self::Fog => fog(image, [(0.2, 3.0), (0.5, 3.0), (0.75, 2.5), (1.0, 2.0), (1.5, 1.75)][s], &mut rng),
            Self::Snow => snow(image, [0.1, 0.15, 0.2, 0.25, 0.3][s], &mut rng),
            Self::Frost => frost(image, [(1.0, 0.2), (0.9, 0.3), (0.8, 0.4), (0.75, 0.45), (0.7, 0.5)][s], &mut rng),
            Self::Spatter => spatter(image, [0.65, 0.6, 0.55, 0.5, 0.45][s], &mut rng),
            Self::Elastic => elastic(image, [(1.0, 2.0), (1.5, 2.0), (2.0, 2.0), (2.5, 1.5), (3.0, 1.5)][s], &mut rng),
        };
        Ok(out)
    }
}

fn map_pixels(image: &Image, f: impl Fn([f32; 3]) -> [f32; 3]) -> Image {
    let mut data = Vec::with_capacity(image.data.len());
    for px in image.data.chunks(3) {
        data.extend(f([px[0], px[1], px[2]]).map(|v| v.clamp(0.0, 1.0)));
    }
    Image::new(image.height, image.width, 3, data)
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn brightness(image: &Image, c: f32) -> Image {
    map_pixels(image, |px| {
        let [h, s, v] = rgb_to_hsv(px);
        hsv_to_rgb([h, s, (v + c).clamp(0.0, 1.0)])
    })
}

fn contrast(image: &Image, c: f32) -> Image {
    let n = (image.height * image.width) as f32;
    let mut means = [0.0f32; 3];
    for px in image.data.chunks(3) {
        for ch in 0..3 {
            means[ch] += px[ch] / n;
        }
    }
    map_pixels(image, |px| [0, 1, 2].map(|ch| (px[ch] - means[ch]) * c + means[ch]))
}

fn saturate(image: &Image, (mul, add): (f32, f32)) -> Image {
    map_pixels(image, |px| {
        let [h, s, v] = rgb_to_hsv(px);
        hsv_to_rgb([h, (s * mul + add).clamp(0.0, 1.0), v])
    })
}

/// Box downsampling to `factor` of the side, nearest upsampling back.
fn pixelate(image: &Image, factor: f32) -> Image {
    let (h, w) = (image.height, image.width);
    let sh = ((h as f32 * factor) as usize).max(1);
    let sw = ((w as f32 * factor) as usize).max(1);
    let mut small = vec![0.0f32; sh * sw * 3];
    let mut counts = vec![0.0f32; sh * sw];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r * sh / h, c * sw / w);
            counts[sr * sw + sc] += 1.0;
            for ch in 0..3 {
                small[(sr * sw + sc) * 3 + ch] += image.at(r, c, ch);
            }
        }
    }
    for (i, n) in counts.iter().enumerate() {
        for ch in 0..3 {
            small[i * 3 + ch] /= n.max(1.0);
        }
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r * sh / h, c * sw / w);
            data.extend_from_slice(&small[(sr * sw + sc) * 3..(sr * sw + sc) * 3 + 3]);
        }
    }
    Image::new(h, w, 3, data)
}

fn to_u8(image: &Image) -> Vec<u8> {
    image.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn jpeg(image: &Image, quality: u8) -> Result<Image> {
    let mut buf = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
    image::ImageEncoder::write_image(
        enc,
        &to_u8(image),
        image.width as u32,
        image.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    let decoded = image::ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg).decode()?.to_rgb8();
    let data = decoded.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Image::new(image.height, image.width, 3, data))
}

/// Diamond-square plasma on a `(2^k + 1)` grid, normalised to `[0, 1]`.
fn plasma(size: usize, decay: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = size.next_power_of_two() + 1;
    let mut g = vec![0.0f32; n * n];
    let mut step = n - 1;
    let mut scale = 1.0f32;
    while step > 1 {
        let half = step / 2;
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (g[(r - half) * n + c - half]
                    + g[(r - half) * n + c + half]
                    + g[(r + half) * n + c - half]
                    + g[(r + half) * n + c + half])
                    / 4.0;
                g[r * n + c] = avg + scale * rng.random_range(-1.0f32..1.0);
            }
        }
        for r in (0..n).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..n).step_by(step) {
                let mut sum = 0.0;
                let mut k = 0.0;
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let (rr, cc) = (r as isize + dr * half as isize, c as isize + dc * half as isize);
                    if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                        sum += g[rr as usize * n + cc as usize];
                        k += 1.0;
                    }
                }
                g[r * n + c] = sum / k + scale * rng.random_range(-1.0f32..1.0);
            }
        }
        step = half;
        scale /= decay;
    }
    let (lo, hi) = g.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-6);
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push((g[r * n + c] - lo) / span);
        }
    }
    out
}

fn box_blur(field: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let (mut s, mut k) = (0.0, 0.0);
            for rr in r.saturating_sub(radius)..(r + radius + 1).min(h) {
                for cc in c.saturating_sub(radius)..(c + radius + 1).min(w) {
                    s += field[rr * w + cc];
                    k += 1.0;
                }
            }
            out[r * w + c] = s / k;
        }
    }
    out
}

fn fog(image: &Image, (strength, decay): (f32, f32), rng: &mut ChaCha8Rng) -> Image {
    let side = image.height.max(image.width);
    let layer = plasma(side, decay, rng);
    let peak = image.data.iter().copied().fold(0.0f32, f32::max);
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..image.height {
        for c in 0..image.width {
            let f = strength * layer[r * side + c];
            for ch in 0..3 {
                data.push(((image.at(r, c, ch) + f) * peak / (peak + strength)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(image.height, image.width, 3, data)
}

fn snow(image: &Image, density: f32, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (image.height, image.width);
    let mut flakes = vec![0.0f32; h * w];
    for v in flakes.iter_mut() {
        if rng.random::<f32>() < density {
            *v = rng.random_range(0.6f32..1.0);
        }
    }
    // streak each flake diagonally to mimic motion blur
    let mut streak = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for t in 0..3 {
                if r >= t && c >= t {
                    acc = acc.max(flakes[(r - t) * w + c - t] * (1.0 - 0.25 * t as f32));
                }
            }
            streak[r * w + c] = acc;
        }
    }
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let px = [image.at(r, c, 0), image.at(r, c, 1), image.at(r, c, 2)];
            let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            let s = streak[r * w + c];
            for v in px {
                let base = 0.7 * v + 0.3 * v.max(gray * 1.5 + 0.5);
                data.push((base + s).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, 3, data)
}

fn frost(image: &Image, (keep, ice): (f32, f32), rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (image.height, image.width);
    let mut layer = vec![0.0f32; h * w];
    // random crystalline needles
    for _ in 0..(h * w / 12) {
        let (mut r, mut c) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let a = rng.random_range(0.0f32..std::f32::consts::TAU);
        let len = rng.random_range(2.0f32..6.0);
        for _ in 0..len as usize {
            if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
                layer[r as usize * w + c as usize] += 0.5;
            }
            r += a.sin();
            c += a.cos();
        }
    }
    let layer = box_blur(&layer, h, w, 1);
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let f = layer[r * w + c].min(1.0);
            for (ch, tint) in [0.85f32, 0.9, 1.0].into_iter().enumerate() {
                data.push((keep * image.at(r, c, ch) + ice * f * tint + 0.1 * ice).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, 3, data)
}

fn spatter(image: &Image, threshold: f32, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (image.height, image.width);
    let noise: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
    let liquid = box_blur(&noise, h, w, 1);
    let mud = [0.25f32, 0.18, 0.1];
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let l = liquid[r * w + c];
            let m = ((l - threshold) * 8.0).clamp(0.0, 1.0);
            for ch in 0..3 {
                data.push((image.at(r, c, ch) * (1.0 - m) + mud[ch] * m).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, 3, data)
}

fn elastic(image: &Image, (alpha, radius): (f32, f32), rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (image.height, image.width);
    let rad = radius.round() as usize;
    let dx: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let dy: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let (dx, dy) = (box_blur(&dx, h, w, rad), box_blur(&dy, h, w, rad));
    let gain = alpha * 3.0;
    let sample = |r: f32, c: f32, ch: usize| -> f32 {
        let r = r.clamp(0.0, (h - 1) as f32);
        let c = c.clamp(0.0, (w - 1) as f32);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f32, c - c0 as f32);
        let top = image.at(r0, c0, ch) * (1.0 - fc) + image.at(r0, c1, ch) * fc;
        let bot = image.at(r1, c0, ch) * (1.0 - fc) + image.at(r1, c1, ch) * fc;
        top * (1.0 - fr) + bot * fr
    };
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r as f32 + gain * dy[r * w + c], c as f32 + gain * dx[r * w + c]);
            for ch in 0..3 {
                data.push(sample(sr, sc, ch).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(32, 32, 3, (0..32 * 32 * 3).map(|_| rng.random_range(0.05f32..0.8)).collect())
    }

    fn mean(img: &Image) -> f32 {
        img.data.iter().sum::<f32>() / img.data.len() as f32
    }

    #[test]
    fn every_corruption_is_deterministic_and_bounded() {
        let img = test_image(1);
        for c in Corruption::ALL {
            for sev in SEVERITY_RANGE {
                let a = c.apply(&img, sev, 42).unwrap();
                let b = c.apply(&img, sev, 42).unwrap();
                assert_eq!(a, b, "{} severity {sev}", c.name());
                assert!(a.in_unit_range(), "{} out of range", c.name());
                assert_eq!(a.shape(), img.shape());
            }
        }
    }

    #[test]
    fn pixelate_twice_same_seed_identical() {
        let img = test_image(2);
        for sev in SEVERITY_RANGE {
            assert_eq!(
                Corruption::Pixelate.apply(&img, sev, 7).unwrap(),
                Corruption::Pixelate.apply(&img, sev, 7).unwrap()
            );
        }
    }

    #[test]
    fn brightness_raises_mean() {
        let img = test_image(3);
        for sev in SEVERITY_RANGE {
            let out = Corruption::Brightness.apply(&img, sev, 0).unwrap();
            assert!(mean(&out) > mean(&img));
        }
    }

    #[test]
    fn contrast_shrinks_spread() {
        let img = test_image(4);
        let out = Corruption::Contrast.apply(&img, 4, 0).unwrap();
        let spread = |i: &Image| {
            let m = mean(i);
            i.data.iter().map(|v| (v - m).powi(2)).sum::<f32>()
        };
        assert!(spread(&out) < spread(&img));
    }

    #[test]
    fn hsv_roundtrip() {
        let img = test_image(5);
        for px in img.data.chunks(3) {
            let back = hsv_to_rgb(rgb_to_hsv([px[0], px[1], px[2]]));
            for ch in 0..3 {
                assert!((back[ch] - px[ch]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!(Corruption::parse("saturate").unwrap(), Corruption::Saturate);
        assert!(Corruption::parse("motion_blur").is_err());
        assert!(Corruption::Brightness.apply(&test_image(0), 0, 0).is_err());
        assert!(Corruption::Brightness.apply(&test_image(0), 6, 0).is_err());
    }
}
