//! Raster type, image decoding and match overlays.

use std::path::Path;

use image::{DynamicImage, ImageReader, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::matcher::MatchPair;

/// A planar floating-point image.
///
/// Samples are stored channel by channel, each plane row-major. Decoded
/// images are scaled to `[0, 1]`; intermediate rasters (blurred levels,
/// differences of Gaussians) may hold any finite value.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("raster needs at least one channel".into()));
        }
        if samples.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples for {width}x{height}x{channels}, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        Self {
            width,
            height,
            channels,
            samples: vec![value; width * height * channels],
        }
    }

    /// Builds a raster by evaluating `f(x, y, c)` at every sample.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(width > 0 && height > 0 && channels > 0);
        let mut samples = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    samples.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            samples,
        }
    }

    pub(crate) fn from_planes(width: usize, height: usize, planes: Vec<Vec<f32>>) -> Self {
        let channels = planes.len();
        let samples: Vec<f32> = planes.into_iter().flatten().collect();
        debug_assert_eq!(samples.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            samples,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Row-major samples of one channel.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.samples[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.samples[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.samples[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.samples[(c * self.height + y) * self.width + x] = v;
    }

    /// Luma conversion with weights 0.299, 0.587, 0.114. A one-channel
    /// raster is returned unchanged.
    pub fn to_grayscale(&self) -> Raster {
        match self.channels {
            1 => self.clone(),
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                let samples = r
                    .iter()
                    .zip(g)
                    .zip(b)
                    .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
                    .collect();
                Raster {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    samples,
                }
            }
            _ => {
                // Unusual channel counts: plain average.
                let n = self.width * self.height;
                let k = self.channels as f32;
                let samples = (0..n)
                    .map(|i| (0..self.channels).map(|c| self.samples[c * n + i]).sum::<f32>() / k)
                    .collect();
                Raster {
                    width: self.width,
                    height: self.height,
                    channels: 1,
                    samples,
                }
            }
        }
    }

    /// Keeps the first `channels` planes.
    pub fn take_channels(&self, channels: usize) -> Raster {
        assert!(channels >= 1 && channels <= self.channels);
        let n = self.width * self.height;
        Raster {
            width: self.width,
            height: self.height,
            channels,
            samples: self.samples[..channels * n].to_vec(),
        }
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            samples: self.samples.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts to 8-bit RGB, replicating a single channel to gray.
    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            if self.channels >= 3 {
                Rgb([q(self.get(x, y, 0)), q(self.get(x, y, 1)), q(self.get(x, y, 2))])
            } else {
                let v = q(self.get(x, y, 0));
                Rgb([v, v, v])
            }
        })
    }

    /// Converts an already decoded image. 8-bit samples map to `v / 255`,
    /// 16-bit samples to `v / 65535`; alpha is dropped.
    pub fn from_dynamic(img: &DynamicImage) -> Raster {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img,
            DynamicImage::ImageLuma8(_)
                | DynamicImage::ImageLumaA8(_)
                | DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
        );
        let sixteen = matches!(
            img,
            DynamicImage::ImageLuma16(_)
                | DynamicImage::ImageLumaA16(_)
                | DynamicImage::ImageRgb16(_)
                | DynamicImage::ImageRgba16(_)
        );
        let float = matches!(
            img,
            DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_)
        );
        let planes: Vec<Vec<f32>> = if gray {
            let plane = if sixteen {
                img.to_luma16().pixels().map(|p| p.0[0] as f32 / 65535.0).collect()
            } else {
                img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0).collect()
            };
            vec![plane]
        } else if float {
            let buf = img.to_rgb32f();
            (0..3)
                .map(|c| {
                    buf.pixels()
                        .map(|p| if p.0[c].is_finite() { p.0[c] } else { 0.0 })
                        .collect()
                })
                .collect()
        } else if sixteen {
            let buf = img.to_rgb16();
            (0..3)
                .map(|c| buf.pixels().map(|p| p.0[c] as f32 / 65535.0).collect())
                .collect()
        } else {
            let buf = img.to_rgb8();
            (0..3)
                .map(|c| buf.pixels().map(|p| p.0[c] as f32 / 255.0).collect())
                .collect()
        };
        Raster::from_planes(w, h, planes)
    }
}

/// Decodes a PNG, JPEG or TIFF file. Color sources give three channels,
/// grayscale sources one. EXIF orientation is not applied.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Format {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(Raster::from_dynamic(&img))
}

/// Writes a raster as an 8-bit PNG (gray or RGB), rounding `v * 255`.
pub fn save_png(image: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let dynamic = if image.channels() == 1 {
        DynamicImage::ImageLuma8(image::GrayImage::from_fn(
            image.width() as u32,
            image.height() as u32,
            |x, y| image::Luma([q(image.get(x as usize, y as usize, 0))]),
        ))
    } else {
        DynamicImage::ImageRgb8(image.to_rgb8())
    };
    write_dynamic(&dynamic, path, image::ImageFormat::Png)
}

fn write_dynamic(img: &DynamicImage, path: &Path, format: image::ImageFormat) -> Result<()> {
    img.save_with_format(path, format).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::io(path, source),
        source => Error::Encode {
            path: path.to_path_buf(),
            source,
        },
    })
}

const DIRECT_COLOR: Rgb<u8> = Rgb([255, 0, 0]);
const FLIPPED_COLOR: Rgb<u8> = Rgb([255, 0, 255]);
const DISC_RADIUS: i64 = 3;

/// Draws every match as a segment between its keypoints with a disc at
/// each end. Flipped matches use a different color.
pub fn draw_overlay(image: &Raster, matches: &[MatchPair]) -> Result<RgbImage> {
    let mut canvas = image.to_rgb8();
    let (w, h) = (image.width() as f64, image.height() as f64);
    for m in matches {
        for kp in [&m.a, &m.b] {
            if !(kp.x >= 0.0 && kp.x < w && kp.y >= 0.0 && kp.y < h) {
                return Err(Error::InvalidArgument(format!(
                    "match endpoint ({:.2}, {:.2}) outside {}x{} image",
                    kp.x,
                    kp.y,
                    image.width(),
                    image.height()
                )));
            }
        }
        let color = if m.flipped { FLIPPED_COLOR } else { DIRECT_COLOR };
        let p0 = (m.a.x.round() as i64, m.a.y.round() as i64);
        let p1 = (m.b.x.round() as i64, m.b.y.round() as i64);
        draw_segment(&mut canvas, p0, p1, color);
        draw_disc(&mut canvas, p0, DISC_RADIUS, color);
        draw_disc(&mut canvas, p1, DISC_RADIUS, color);
    }
    Ok(canvas)
}

/// Renders [`draw_overlay`] to a PNG file.
pub fn render_overlay(image: &Raster, matches: &[MatchPair], path: impl AsRef<Path>) -> Result<()> {
    let canvas = draw_overlay(image, matches)?;
    write_dynamic(
        &DynamicImage::ImageRgb8(canvas),
        path.as_ref(),
        image::ImageFormat::Png,
    )
}

fn put(canvas: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width() && (y as u32) < canvas.height() {
        canvas.put_pixel(x as u32, y as u32, color);
    }
}

// Bresenham.
fn draw_segment(canvas: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(canvas, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_disc(canvas: &mut RgbImage, (cx, cy): (i64, i64), r: i64, color: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(canvas, cx + dx, cy + dy, color);
            }
        }
    }
}
