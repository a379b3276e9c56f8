//! Class activation maps from the biased classifier and the patch sampling
//! distributions derived from them.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::Classifier;
use crate::dataset_forge::{batch_tensor, Image};
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const DEFAULT_REFERENCE_CROPS: usize = 4;

/// `I_c(x, y)` on the classifier's feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub height: usize,
    pub width: usize,
    /// Row-major.
    pub values: Vec<f64>,
    pub class_index: usize,
    pub source_example_id: String,
}

impl ImportanceMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Weighted sum of the final feature maps by the head weights of class `c`.
pub fn compute_cam(classifier: &Classifier, image: &Image, class: usize, example_id: &str) -> Result<ImportanceMap> {
    Ok(compute_cams(classifier, &[(image, class, example_id)])?.remove(0))
}

/// Batched form of [`compute_cam`].
pub fn compute_cams(classifier: &Classifier, items: &[(&Image, usize, &str)]) -> Result<Vec<ImportanceMap>> {
    let k = classifier.spec.num_classes;
    if let Some((_, c, _)) = items.iter().find(|(_, c, _)| *c >= k) {
        return Err(Error::InvalidArgument(format!("class {c} >= K = {k}")));
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(256) {
        let t = batch_tensor(chunk.iter().map(|(img, _, _)| *img));
        let fm = classifier.feature_maps(&t)?;
        let (_, ch, h, w) = fm.maps.dims4();
        let hw = h * w;
        for (n, (_, class, id)) in chunk.iter().enumerate() {
            let wc = &fm.weights.data[class * ch..(class + 1) * ch];
            let mut values = vec![0.0f64; hw];
            for (kk, wk) in wc.iter().enumerate() {
                let plane = &fm.maps.data[(n * ch + kk) * hw..(n * ch + kk + 1) * hw];
                for (v, f) in values.iter_mut().zip(plane) {
                    *v += *wk as f64 * *f as f64;
                }
            }
            out.push(ImportanceMap {
                height: h,
                width: w,
                values,
                class_index: *class,
                source_example_id: id.to_string(),
            });
        }
    }
    Ok(out)
}

/// `P(x, y)` over the feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDistribution {
    pub height: usize,
    pub width: usize,
    pub probabilities: Vec<f64>,
    pub temperature: f64,
}

impl PatchDistribution {
    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self { height, width, probabilities: vec![1.0 / n as f64; n], temperature: f64::INFINITY }
    }

    pub fn entropy(&self) -> f64 {
        -self.probabilities.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Inverse-CDF draw of a grid cell index.
    pub fn sample_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left a sliver above the last cumulative value
        self.probabilities.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// `softmax(I / τ)` with max subtraction.
pub fn to_sampling_distribution(map: &ImportanceMap, temperature: f64) -> Result<PatchDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if map.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite CAM for {}", map.source_example_id)));
    }
    let m = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = map.values.iter().map(|v| ((v - m) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(PatchDistribution {
        height: map.height,
        width: map.width,
        probabilities: e.into_iter().map(|v| v / s).collect(),
        temperature,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Uniform,
    BiasTailored,
}

impl CropMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::BiasTailored => "bias_tailored",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Image,
    /// Pixel-space centre `(row, col)` before clamping.
    pub center: (usize, usize),
    pub cell: usize,
    pub top: usize,
    pub left: usize,
}

/// Pixel centre for a grid cell: the cell's stride block plus a uniform offset inside it.
pub fn cell_to_pixel<R: Rng + ?Sized>(cell: usize, grid_width: usize, stride: usize, rng: &mut R) -> (usize, usize) {
    let (gr, gc) = (cell / grid_width, cell % grid_width);
    (gr * stride + rng.random_range(0..stride), gc * stride + rng.random_range(0..stride))
}

/// Top-left corner of a `size` crop centred at `center`, clamped into the image.
pub fn crop_origin(center: (usize, usize), size: usize, height: usize, width: usize) -> (usize, usize) {
    let half = size / 2;
    let top = center.0.saturating_sub(half).min(height - size);
    let left = center.1.saturating_sub(half).min(width - size);
    (top, left)
}

/// Where a crop lands, without the pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPlacement {
    pub cell: usize,
    pub center: (usize, usize),
    pub top: usize,
    pub left: usize,
}

/// Draws `n` crop placements on a `height × width` image. In uniform mode
/// `distribution` only supplies the grid shape and every cell is equally likely.
#[allow(clippy::too_many_arguments)]
pub fn sample_placements<R: Rng + ?Sized>(
    distribution: &PatchDistribution,
    mode: CropMode,
    stride: usize,
    patch_size: usize,
    n: usize,
    (height, width): (usize, usize),
    rng: &mut R,
) -> Result<Vec<CropPlacement>> {
    if patch_size == 0 || patch_size > height || patch_size > width {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch_size} does not fit a {height}x{width} image"
        )));
    }
    if stride == 0
        || distribution.height * stride > height + stride - 1
        || distribution.width * stride > width + stride - 1
    {
        return Err(Error::InvalidArgument("sampling grid does not match the image".into()));
    }
    let cells = distribution.height * distribution.width;
    Ok((0..n)
        .map(|_| {
            let cell = match mode {
                CropMode::Uniform => rng.random_range(0..cells),
                CropMode::BiasTailored => distribution.sample_cell(rng),
            };
            let (r, c) = cell_to_pixel(cell, distribution.width, stride, rng);
            let center = (r.min(height - 1), c.min(width - 1));
            let (top, left) = crop_origin(center, patch_size, height, width);
            CropPlacement { cell, center, top, left }
        })
        .collect())
}

/// Draws `n` crops from `image`.
pub fn sample_patches<R: Rng + ?Sized>(
    image: &Image,
    distribution: &PatchDistribution,
    mode: CropMode,
    stride: usize,
    patch_size: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let placements =
        sample_placements(distribution, mode, stride, patch_size, n, (image.height, image.width), rng)?;
    Ok(placements
        .into_iter()
        .map(|p| Patch {
            image: image.crop(p.top, p.left, patch_size),
            center: p.center,
            cell: p.cell,
            top: p.top,
            left: p.left,
        })
        .collect())
}

/// Default patch side: a quarter of the image side.
pub fn default_patch_size(image_side: usize) -> usize {
    (image_side / 4).max(1)
}

/// Writes the map as little-endian f32 with a small text header, plus a PNG heatmap.
pub fn dump_cam(map: &ImportanceMap, dir: &Path, upscale: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let stem = sanitize(&map.source_example_id);
    let mut raw = format!("CAMF32 {} {} {}\n", map.height, map.width, map.class_index).into_bytes();
    for v in &map.values {
        raw.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(dir.join(format!("{stem}.cam")), raw)?;
    heatmap(map, upscale.max(1)).save(dir.join(format!("{stem}.png")))?;
    Ok(())
}

pub fn read_cam_dump(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::InvalidArgument(format!("{}: malformed CAM dump", path.display()));
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(bad)?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad())?;
    let f: Vec<&str> = header.split(' ').collect();
    if f.len() != 4 || f[0] != "CAMF32" {
        return Err(bad());
    }
    let h: usize = f[1].parse().map_err(|_| bad())?;
    let w: usize = f[2].parse().map_err(|_| bad())?;
    let c: usize = f[3].parse().map_err(|_| bad())?;
    let body = &bytes[nl + 1..];
    if body.len() != h * w * 4 {
        return Err(bad());
    }
    Ok((h, w, c, body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Min-max normalised map through a blue → red ramp.
pub fn heatmap(map: &ImportanceMap, upscale: usize) -> image::RgbImage {
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    image::RgbImage::from_fn((map.width * upscale) as u32, (map.height * upscale) as u32, |x, y| {
        let t = (map.at(y as usize / upscale, x as usize / upscale) - lo) / span;
        let r = (255.0 * t.clamp(0.0, 1.0)) as u8;
        let g = (255.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8;
        image::Rgb([r, g, 255 - r])
    })
}
