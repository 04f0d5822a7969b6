//! Generators for synthetic test corpora: textured backgrounds and
//! copy-move forgeries under similarity transforms, recompression and noise.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image_io::Raster;
use crate::scale_space::gaussian_blur;

const TEXTURE_SCALES: [(f64, f64); 4] = [(1.5, 0.35), (3.0, 0.6), (6.0, 0.8), (12.0, 1.0)];

fn band(width: usize, height: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let noise = Raster::from_fn(width, height, 1, |_, _, _| normal.sample(rng));
    let blurred = gaussian_blur(&noise, sigma).expect("positive sigma").into_samples();
    let n = blurred.len() as f64;
    let mean = blurred.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = blurred.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    blurred.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect()
}

/// Multi-scale filtered-noise texture, quantized to 8-bit levels.
///
/// Color textures share a luminance component and add weaker per-channel
/// chroma, so channels are correlated the way natural images are.
pub fn texture(width: usize, height: usize, channels: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = |rng: &mut ChaCha8Rng| {
        let mut acc = vec![0f32; width * height];
        for &(sigma, amp) in &TEXTURE_SCALES {
            for (a, b) in acc.iter_mut().zip(band(width, height, sigma, rng)) {
                *a += amp as f32 * b;
            }
        }
        acc
    };
    let luma = field(&mut rng);
    let planes: Vec<Vec<f32>> = (0..channels)
        .map(|_| {
            let chroma = if channels > 1 { field(&mut rng) } else { vec![0.0; width * height] };
            luma.iter()
                .zip(&chroma)
                .map(|(&l, &c)| quantize(0.5 + 0.09 * l + 0.04 * c))
                .collect()
        })
        .collect();
    Raster::new(width, height, channels, planes.concat()).expect("finite texture")
}

#[inline]
fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Rounds every sample to the nearest 8-bit level.
pub fn quantize_8bit(image: &Raster) -> Raster {
    image.map(quantize)
}

fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Bicubic (Keys, a = -0.5) interpolation with clamped borders.
pub fn bicubic(image: &Raster, x: f64, y: f64, c: usize) -> f32 {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    if fx == 0.0 && fy == 0.0 && (0..w).contains(&x0) && (0..h).contains(&y0) {
        return image.get(x0 as usize, y0 as usize, c);
    }
    let mut acc = 0.0;
    for j in -1..=2 {
        let wy = keys(fy - j as f64);
        let yy = (y0 + j).clamp(0, h - 1) as usize;
        for i in -1..=2 {
            let wx = keys(fx - i as f64);
            let xx = (x0 + i).clamp(0, w - 1) as usize;
            acc += wx * wy * image.get(xx, yy, c) as f64;
        }
    }
    acc as f32
}

/// Rotation by `angle` radians about `center`, resampled bicubically.
pub fn rotate(image: &Raster, center: (f64, f64), angle: f64) -> Raster {
    let (s, c) = angle.sin_cos();
    Raster::from_fn(image.width(), image.height(), image.channels(), |x, y, ch| {
        let (dx, dy) = (x as f64 - center.0, y as f64 - center.1);
        // inverse rotation
        let sx = center.0 + c * dx + s * dy;
        let sy = center.1 - s * dx + c * dy;
        bicubic(image, sx, sy, ch)
    })
}

/// Similarity applied to a copied region: mirror (optional, about the
/// vertical axis), then scale, then rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionTransform {
    pub angle: f64,
    pub scale: f64,
    pub mirror: bool,
}

impl Default for RegionTransform {
    fn default() -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            mirror: false,
        }
    }
}

/// A square region pasted from `source` (center) to `target` (center).
#[derive(Clone, Copy, Debug)]
pub struct CopyMove {
    pub source: (f64, f64),
    pub target: (f64, f64),
    pub side: usize,
    pub transform: RegionTransform,
}

impl CopyMove {
    fn source_of(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.target.0, y - self.target.1);
        let (s, c) = self.transform.angle.sin_cos();
        let (rx, ry) = (c * dx + s * dy, -s * dx + c * dy);
        let (mut ux, uy) = (rx / self.transform.scale, ry / self.transform.scale);
        if self.transform.mirror {
            ux = -ux;
        }
        (self.source.0 + ux, self.source.1 + uy)
    }

    /// Target pixel rectangle `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub fn target_rect(&self) -> (usize, usize, usize, usize) {
        let half = self.side as f64 / 2.0;
        let x0 = (self.target.0 - half).round().max(0.0) as usize;
        let y0 = (self.target.1 - half).round().max(0.0) as usize;
        (x0, y0, x0 + self.side, y0 + self.side)
    }

    /// Pastes the transformed region. With an identity transform and
    /// integer centers the copy is pixel-exact.
    pub fn apply(&self, image: &Raster) -> Raster {
        let mut out = image.clone();
        let (x0, y0, x1, y1) = self.target_rect();
        for y in y0..y1.min(image.height()) {
            for x in x0..x1.min(image.width()) {
                let (sx, sy) = self.source_of(x as f64, y as f64);
                for c in 0..image.channels() {
                    out.set(x, y, c, quantize(bicubic(image, sx, sy, c)));
                }
            }
        }
        out
    }
}

/// Encodes as baseline JPEG at `quality` and decodes again.
pub fn jpeg_recompress(image: &Raster, quality: u8) -> Result<Raster> {
    let mut bytes = Vec::new();
    let encoder = JpegEncoder::new_with_quality(Cursor::new(&mut bytes), quality);
    let dynamic = if image.channels() == 1 {
        DynamicImage::ImageLuma8(DynamicImage::ImageRgb8(image.to_rgb8()).to_luma8())
    } else {
        DynamicImage::ImageRgb8(image.to_rgb8())
    };
    dynamic.write_with_encoder(encoder).map_err(|source| Error::Encode {
        path: "<memory>".into(),
        source,
    })?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg).map_err(
        |source| Error::Format {
            path: "<memory>".into(),
            source,
        },
    )?;
    Ok(Raster::from_dynamic(&decoded))
}

/// Adds i.i.d. Gaussian noise of standard deviation `std` (on the `[0, 1]`
/// scale), then clamps and quantizes to 8 bits.
pub fn add_noise(image: &Raster, std: f64, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    image.map(|v| quantize(v + normal.sample(&mut rng) as f32))
}

/// Kinds of synthetic forgery used by the test corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForgeryKind {
    Verbatim,
    Rotated,
    Scaled,
    Mirrored,
    Jpeg,
    Noisy,
}

impl ForgeryKind {
    pub const ALL: [ForgeryKind; 6] = [
        ForgeryKind::Verbatim,
        ForgeryKind::Rotated,
        ForgeryKind::Scaled,
        ForgeryKind::Mirrored,
        ForgeryKind::Jpeg,
        ForgeryKind::Noisy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForgeryKind::Verbatim => "verbatim",
            ForgeryKind::Rotated => "rotated30",
            ForgeryKind::Scaled => "scaled0.9",
            ForgeryKind::Mirrored => "mirrored",
            ForgeryKind::Jpeg => "jpeg80",
            ForgeryKind::Noisy => "noise2",
        }
    }
}

/// A textured image with one copy-moved region of side `side`. Source and
/// target are placed at random, at least `side + 32` pixels apart along x.
pub fn forgery(
    width: usize,
    height: usize,
    side: usize,
    kind: ForgeryKind,
    seed: u64,
) -> Result<(Raster, CopyMove)> {
    let background = texture(width, height, 3, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let transform = match kind {
        ForgeryKind::Rotated => RegionTransform {
            angle: 30f64.to_radians(),
            ..RegionTransform::default()
        },
        ForgeryKind::Scaled => RegionTransform {
            scale: 0.9,
            ..RegionTransform::default()
        },
        ForgeryKind::Mirrored => RegionTransform {
            mirror: true,
            ..RegionTransform::default()
        },
        _ => RegionTransform::default(),
    };
    // Source footprint of a rotated square is up to √2 times wider.
    let reach = (side as f64 * 0.75).ceil() as usize + 4;
    let gap = side + 32;
    if width < 2 * reach + gap || height < 2 * reach {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} is too small for a {side}px forgery"
        )));
    }
    let sy = rng.random_range(reach..height - reach) as f64;
    let ty = rng.random_range(reach..height - reach) as f64;
    let left = rng.random_range(reach..width - reach - gap) as f64;
    let right = rng.random_range(left as usize + gap..width - reach) as f64;
    let (source, target) = if rng.random_bool(0.5) {
        ((left, sy), (right, ty))
    } else {
        ((right, sy), (left, ty))
    };
    let cm = CopyMove {
        source,
        target,
        side,
        transform,
    };
    let forged = cm.apply(&background);
    let forged = match kind {
        ForgeryKind::Jpeg => jpeg_recompress(&forged, 80)?,
        ForgeryKind::Noisy => add_noise(&forged, 2.0 / 255.0, seed.wrapping_add(1)),
        _ => forged,
    };
    Ok((forged, cm))
}
