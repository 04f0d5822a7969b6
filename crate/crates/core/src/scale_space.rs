//! Gaussian and difference-of-Gaussians scale space, extremum detection and
//! orientation assignment.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Raster;

/// Parameters of the scale-space keypoint detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSpaceConfig {
    pub scales_per_octave: usize,
    /// Blur of the first pyramid level, in input pixels.
    pub sigma_min: f64,
    /// Blur assumed to be already present in the input.
    pub sigma_in: f64,
    /// Minimum |DoG| on the `[0, 1]` intensity scale.
    pub contrast_threshold: f64,
    /// Maximum ratio of principal curvatures.
    pub edge_threshold: f64,
    /// Adds a first octave at twice the input resolution.
    pub upsample: bool,
}

impl Default for ScaleSpaceConfig {
    fn default() -> Self {
        Self {
            scales_per_octave: 3,
            sigma_min: 0.8,
            sigma_in: 0.5,
            contrast_threshold: 0.015,
            edge_threshold: 10.0,
            upsample: false,
        }
    }
}

impl ScaleSpaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales_per_octave == 0 {
            return Err(Error::Config("scale_space.scales_per_octave must be >= 1".into()));
        }
        if !(self.sigma_in >= 0.0) {
            return Err(Error::Config("scale_space.sigma_in must be >= 0".into()));
        }
        if !(self.sigma_min > 0.0) || self.sigma_min < self.sigma_in {
            return Err(Error::Config(
                "scale_space.sigma_min must be positive and not below sigma_in".into(),
            ));
        }
        if !(self.contrast_threshold >= 0.0) {
            return Err(Error::Config("scale_space.contrast_threshold must be >= 0".into()));
        }
        if !(self.edge_threshold > 0.0) {
            return Err(Error::Config("scale_space.edge_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Input pixels per sample in the first octave.
    pub fn min_pixel_size(&self) -> f64 {
        if self.upsample {
            0.5
        } else {
            1.0
        }
    }
}

/// Where a keypoint lives inside the pyramid.
///
/// The position is kept as an integer anchor plus a subpixel offset so that
/// content translated by whole octave pixels produces bit-identical samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PyramidLocation {
    /// Index into [`Pyramid::octaves`].
    pub octave_index: usize,
    /// Refined scale coordinate inside the octave, in level units.
    pub level: f64,
    /// Input pixels per octave pixel.
    pub pixel_size: f64,
    pub anchor: (i64, i64),
    pub offset: (f64, f64),
}

/// A scale-space keypoint in input image coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection scale in input pixels.
    pub sigma: f64,
    /// Principal orientation in `[0, 2π)`.
    pub theta: f64,
    /// Octave number; `-1` is the upsampled octave.
    pub octave: i32,
    /// Interpolated DoG value at the extremum.
    pub response: f64,
    #[serde(skip)]
    pub location: PyramidLocation,
}

impl Keypoint {
    /// Canonical ordering: octave, then row, column and orientation.
    pub fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.octave
            .cmp(&other.octave)
            .then(self.y.total_cmp(&other.y))
            .then(self.x.total_cmp(&other.x))
            .then(self.theta.total_cmp(&other.theta))
            .then(self.sigma.total_cmp(&other.sigma))
    }
}

#[derive(Clone, Debug)]
pub struct Octave {
    /// Input pixels per sample.
    pub pixel_size: f64,
    /// `scales_per_octave + 3` blurred images.
    pub gaussians: Vec<Raster>,
    /// Adjacent-level differences; empty for a Gaussian-only pyramid.
    pub dogs: Vec<Raster>,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub octaves: Vec<Octave>,
    pub scales_per_octave: usize,
    pub sigma_min: f64,
    /// Size of the input image the pyramid was built from.
    pub input_size: (usize, usize),
    pub upsampled: bool,
}

impl Pyramid {
    /// Blur of level `s` of octave `o`, in input pixels.
    pub fn level_sigma(&self, octave_index: usize, s: f64) -> f64 {
        let min_pixel = if self.upsampled { 0.5 } else { 1.0 };
        self.octaves[octave_index].pixel_size * self.sigma_min / min_pixel
            * 2f64.powf(s / self.scales_per_octave as f64)
    }

    pub fn octave_number(&self, octave_index: usize) -> i32 {
        octave_index as i32 - i32::from(self.upsampled)
    }
}

/// Number of octaves for an image whose shorter side is `min_side`.
pub fn octave_count(min_side: usize, upsample: bool) -> usize {
    let n = (min_side as f64 / 12.0).log2().floor().max(0.0) as usize;
    n + usize::from(upsample)
}

/// Separable Gaussian convolution with kernel radius `ceil(4σ)` and
/// half-sample symmetric boundaries. Every channel is blurred.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be a finite non-negative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (w, h) = (image.width(), image.height());
    let planes = (0..image.channels())
        .map(|c| blur_plane(image.plane(c), w, h, &kernel))
        .collect();
    Ok(Raster::from_planes(w, h, planes))
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Maps any index onto `0..n` by half-sample symmetric extension.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_plane(src: &[f32], w: usize, h: usize, kernel: &[f32]) -> Vec<f32> {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0f32; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let line = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let mut acc = 0f32;
            for (k, &wk) in kernel.iter().enumerate() {
                acc += wk * line[reflect(x as i64 + k as i64 - radius, w)];
            }
            *out = acc;
        }
    });
    let mut dst = vec![0f32; w * h];
    dst.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (k, &wk) in kernel.iter().enumerate() {
            let yy = reflect(y as i64 + k as i64 - radius, h);
            let line = &tmp[yy * w..(yy + 1) * w];
            for (out, &v) in row.iter_mut().zip(line) {
                *out += wk * v;
            }
        }
    });
    dst
}

/// Keeps every other sample, starting at index 0.
fn subsample(image: &Raster) -> Raster {
    let (w, h) = (image.width(), image.height());
    let (nw, nh) = (w.div_ceil(2), h.div_ceil(2));
    Raster::from_fn(nw, nh, image.channels(), |x, y, c| image.get(2 * x, 2 * y, c))
}

/// Bilinear 2x upsampling; output sample `(x, y)` sits at input `(x/2, y/2)`.
fn upsample(image: &Raster) -> Raster {
    let (w, h) = (image.width(), image.height());
    Raster::from_fn(2 * w, 2 * h, image.channels(), |x, y, c| {
        let x0 = (x / 2).min(w - 1);
        let y0 = (y / 2).min(h - 1);
        let x1 = (x0 + (x & 1)).min(w - 1);
        let y1 = (y0 + (y & 1)).min(h - 1);
        0.25 * (image.get(x0, y0, c) + image.get(x1, y0, c) + image.get(x0, y1, c) + image.get(x1, y1, c))
    })
}

fn difference(a: &Raster, b: &Raster) -> Raster {
    let samples = a.samples().iter().zip(b.samples()).map(|(&hi, &lo)| hi - lo).collect();
    Raster::new(a.width(), a.height(), a.channels(), samples).expect("same geometry")
}

/// Builds the Gaussian levels only. Works for any channel count; used for
/// sampling color descriptors.
pub fn build_gaussian_pyramid(image: &Raster, config: &ScaleSpaceConfig) -> Result<Pyramid> {
    config.validate()?;
    let (w, h) = (image.width(), image.height());
    if w.min(h) < 32 {
        return Err(Error::InvalidArgument(format!(
            "image is {w}x{h}; scale-space analysis needs at least 32 pixels per side"
        )));
    }
    let n_octaves = octave_count(w.min(h), config.upsample);
    let spo = config.scales_per_octave;
    let min_pixel = config.min_pixel_size();
    // Blur of level s in octave pixels, identical for every octave.
    let level_sigma = |s: usize| config.sigma_min / min_pixel * 2f64.powf(s as f64 / spo as f64);

    let mut base = if config.upsample { upsample(image) } else { image.clone() };
    let initial = (config.sigma_min.powi(2) - config.sigma_in.powi(2)).max(0.0).sqrt() / min_pixel;
    base = gaussian_blur(&base, initial)?;

    let mut octaves = Vec::with_capacity(n_octaves);
    for o in 0..n_octaves {
        if o > 0 {
            let prev: &Octave = &octaves[o - 1];
            base = subsample(&prev.gaussians[spo]);
        }
        let mut gaussians = Vec::with_capacity(spo + 3);
        gaussians.push(base.clone());
        for s in 1..spo + 3 {
            let inc = (level_sigma(s).powi(2) - level_sigma(s - 1).powi(2)).sqrt();
            let next = gaussian_blur(&gaussians[s - 1], inc)?;
            gaussians.push(next);
        }
        octaves.push(Octave {
            pixel_size: min_pixel * 2f64.powi(o as i32),
            gaussians,
            dogs: Vec::new(),
        });
    }
    Ok(Pyramid {
        octaves,
        scales_per_octave: spo,
        sigma_min: config.sigma_min,
        input_size: (w, h),
        upsampled: config.upsample,
    })
}

/// Gaussian pyramid of a grayscale image plus its difference-of-Gaussians
/// stacks (`scales_per_octave + 2` per octave).
pub fn build_pyramid(image: &Raster, config: &ScaleSpaceConfig) -> Result<Pyramid> {
    if image.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "scale space expects a grayscale raster, got {} channels",
            image.channels()
        )));
    }
    let mut pyr = build_gaussian_pyramid(image, config)?;
    for octave in &mut pyr.octaves {
        octave.dogs = octave
            .gaussians
            .windows(2)
            .map(|pair| difference(&pair[1], &pair[0]))
            .collect();
    }
    Ok(pyr)
}

const MAX_OFFSET: f64 = 0.6;
const ORI_BINS: usize = 36;
const ORI_WINDOW_FACTOR: f64 = 1.5;
const ORI_RADIUS_FACTOR: f64 = 3.0;
const ORI_SMOOTHING_PASSES: usize = 6;
const ORI_PEAK_RATIO: f64 = 0.8;

/// Finds 3x3x3 DoG extrema, refines them with one quadratic step, filters
/// by contrast and edge response, and assigns one keypoint per dominant
/// orientation. The output is sorted canonically.
pub fn detect_keypoints(pyr: &Pyramid, config: &ScaleSpaceConfig) -> Vec<Keypoint> {
    let spo = pyr.scales_per_octave;
    let jobs: Vec<(usize, usize)> = (0..pyr.octaves.len())
        .flat_map(|o| (1..=spo).map(move |s| (o, s)))
        .filter(|&(o, _)| pyr.octaves[o].dogs.len() == spo + 2)
        .collect();
    let mut keypoints: Vec<Keypoint> = jobs
        .par_iter()
        .flat_map_iter(|&(o, s)| detect_in_level(pyr, config, o, s))
        .collect();
    keypoints.sort_by(Keypoint::canonical_cmp);
    keypoints
}

struct Dog<'a> {
    levels: &'a [Raster],
    w: usize,
}

impl Dog<'_> {
    #[inline]
    fn at(&self, s: usize, x: usize, y: usize) -> f64 {
        self.levels[s].samples()[y * self.w + x] as f64
    }
}

fn detect_in_level(pyr: &Pyramid, config: &ScaleSpaceConfig, o: usize, s: usize) -> Vec<Keypoint> {
    let octave = &pyr.octaves[o];
    let (w, h) = (octave.dogs[s].width(), octave.dogs[s].height());
    let dog = Dog {
        levels: &octave.dogs,
        w,
    };
    let thr = config.contrast_threshold;
    let r = config.edge_threshold;
    let edge_limit = (r + 1.0) * (r + 1.0) / r;
    let (in_w, in_h) = pyr.input_size;
    let mut out = Vec::new();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = dog.at(s, x, y);
            if v.abs() < 0.8 * thr || !is_extremum(&dog, s, x, y, v) {
                continue;
            }
            let g = [
                0.5 * (dog.at(s, x + 1, y) - dog.at(s, x - 1, y)),
                0.5 * (dog.at(s, x, y + 1) - dog.at(s, x, y - 1)),
                0.5 * (dog.at(s + 1, x, y) - dog.at(s - 1, x, y)),
            ];
            let dxx = dog.at(s, x + 1, y) + dog.at(s, x - 1, y) - 2.0 * v;
            let dyy = dog.at(s, x, y + 1) + dog.at(s, x, y - 1) - 2.0 * v;
            let dss = dog.at(s + 1, x, y) + dog.at(s - 1, x, y) - 2.0 * v;
            let dxy = 0.25
                * (dog.at(s, x + 1, y + 1) - dog.at(s, x + 1, y - 1) - dog.at(s, x - 1, y + 1)
                    + dog.at(s, x - 1, y - 1));
            let dxs = 0.25
                * (dog.at(s + 1, x + 1, y) - dog.at(s + 1, x - 1, y) - dog.at(s - 1, x + 1, y)
                    + dog.at(s - 1, x - 1, y));
            let dys = 0.25
                * (dog.at(s + 1, x, y + 1) - dog.at(s + 1, x, y - 1) - dog.at(s - 1, x, y + 1)
                    + dog.at(s - 1, x, y - 1));
            let hess = [[dxx, dxy, dxs], [dxy, dyy, dys], [dxs, dys, dss]];
            let Some(step) = solve3(hess, [-g[0], -g[1], -g[2]]) else {
                continue;
            };
            if step.iter().any(|d| d.abs() >= MAX_OFFSET) {
                continue;
            }
            let response = v + 0.5 * (g[0] * step[0] + g[1] * step[1] + g[2] * step[2]);
            if response.abs() < thr {
                continue;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            if det <= 0.0 || tr * tr / det >= edge_limit {
                continue;
            }
            let pixel = octave.pixel_size;
            let (px, py) = (pixel * (x as f64 + step[0]), pixel * (y as f64 + step[1]));
            if !(px >= 0.0 && py >= 0.0 && px < in_w as f64 && py < in_h as f64) {
                continue;
            }
            let level = s as f64 + step[2];
            let location = PyramidLocation {
                octave_index: o,
                level,
                pixel_size: pixel,
                anchor: (x as i64, y as i64),
                offset: (step[0], step[1]),
            };
            let sigma = pyr.level_sigma(o, level);
            for theta in orientations(pyr, &location, sigma) {
                out.push(Keypoint {
                    x: px,
                    y: py,
                    sigma,
                    theta,
                    octave: pyr.octave_number(o),
                    response,
                    location,
                });
            }
        }
    }
    out
}

fn is_extremum(dog: &Dog, s: usize, x: usize, y: usize, v: f64) -> bool {
    let (mut is_max, mut is_min) = (true, true);
    for ds in 0..3 {
        for dy in 0..3 {
            for dx in 0..3 {
                if ds == 1 && dy == 1 && dx == 1 {
                    continue;
                }
                let n = dog.at(s + ds - 1, x + dx - 1, y + dy - 1);
                is_max &= v > n;
                is_min &= v < n;
                if !is_max && !is_min {
                    return false;
                }
            }
        }
    }
    is_max || is_min
}

/// Solves a 3x3 linear system by Cramer's rule.
fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let det3 = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det3(a);
    if d.abs() < 1e-300 || !d.is_finite() {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, xi) in x.iter_mut().enumerate() {
        let mut m = a;
        for row in 0..3 {
            m[row][col] = b[row];
        }
        *xi = det3(m) / d;
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Gaussian level of the keypoint's octave whose blur is nearest its scale.
pub fn nearest_level(pyr: &Pyramid, location: &PyramidLocation) -> usize {
    let top = pyr.octaves[location.octave_index].gaussians.len() - 1;
    (location.level.round().max(0.0) as usize).min(top)
}

fn orientations(pyr: &Pyramid, loc: &PyramidLocation, sigma: f64) -> Vec<f64> {
    let image = &pyr.octaves[loc.octave_index].gaussians[nearest_level(pyr, loc)];
    let (w, h) = (image.width() as i64, image.height() as i64);
    let plane = image.plane(0);
    let at = |x: i64, y: i64| plane[(y * w + x) as usize] as f64;

    let window = ORI_WINDOW_FACTOR * sigma / loc.pixel_size;
    let radius = ORI_RADIUS_FACTOR * window;
    let reach = radius.ceil() as i64 + 1;
    let (ax, ay) = loc.anchor;
    let mut hist = [0f64; ORI_BINS];
    for dy in -reach..=reach {
        let y = ay + dy;
        if y < 1 || y > h - 2 {
            continue;
        }
        let ry = dy as f64 - loc.offset.1;
        for dx in -reach..=reach {
            let x = ax + dx;
            if x < 1 || x > w - 2 {
                continue;
            }
            let rx = dx as f64 - loc.offset.0;
            let r2 = rx * rx + ry * ry;
            if r2 > radius * radius {
                continue;
            }
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
            let bin = ((angle * ORI_BINS as f64 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += mag * (-r2 / (2.0 * window * window)).exp();
        }
    }
    for _ in 0..ORI_SMOOTHING_PASSES {
        let prev = hist;
        for k in 0..ORI_BINS {
            hist[k] = (prev[(k + ORI_BINS - 1) % ORI_BINS] + prev[k] + prev[(k + 1) % ORI_BINS]) / 3.0;
        }
    }
    let max = hist.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut thetas = Vec::new();
    for k in 0..ORI_BINS {
        let (l, c, r) = (hist[(k + ORI_BINS - 1) % ORI_BINS], hist[k], hist[(k + 1) % ORI_BINS]);
        if c > l && c > r && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (l - r) / (l - 2.0 * c + r);
            let theta = (2.0 * PI * (k as f64 + shift) / ORI_BINS as f64).rem_euclid(2.0 * PI);
            // rem_euclid can round up to exactly 2π
            thetas.push(if theta >= 2.0 * PI { 0.0 } else { theta });
        }
    }
    thetas
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn max_abs_diff(a: &Raster, b: &Raster) -> f32 {
        a.samples()
            .iter()
            .zip(b.samples())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Raster::filled(40, 30, 2, 0.37);
        for sigma in [0.3, 1.0, 2.5, 9.0] {
            let out = gaussian_blur(&img, sigma).unwrap();
            assert!(out.samples().iter().all(|v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_sigma_is_identity_and_negative_is_rejected() {
        let img = synthetic::texture(48, 48, 1, 3);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        assert!(matches!(gaussian_blur(&img, -0.1), Err(Error::InvalidArgument(_))));
        assert!(gaussian_blur(&img, f64::NAN).is_err());
    }

    #[test]
    fn impulse_response_matches_dense_kernel() {
        let n = 41;
        let c = n / 2;
        let sigma = 1.5;
        let img = Raster::from_fn(n, n, 1, |x, y, _| if x == c && y == c { 1.0 } else { 0.0 });
        let out = gaussian_blur(&img, sigma).unwrap();
        // Dense, non-separable 2-D kernel normalized over its full support.
        let r = (4.0 * sigma).ceil() as i64;
        let mut total = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                total += (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        for x in 0..n {
            let dx = x as i64 - c as i64;
            let expected = if dx.abs() <= r {
                (-((dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / total
            } else {
                0.0
            };
            let got = out.get(x, c, 0) as f64;
            assert!((got - expected).abs() < 1e-4, "x={x}: {got} vs {expected}");
        }
    }

    #[test]
    fn blur_semigroup() {
        let img = synthetic::texture(96, 96, 1, 11);
        let (s1, s2) = (1.2, 1.9);
        let twice = gaussian_blur(&gaussian_blur(&img, s1).unwrap(), s2).unwrap();
        let once = gaussian_blur(&img, (s1 * s1 + s2 * s2).sqrt()).unwrap();
        assert!(max_abs_diff(&twice, &once) < 1e-3);
    }

    #[test]
    fn octave_count_rule() {
        assert_eq!(octave_count(512, false), 5);
        assert_eq!(octave_count(32, false), 1);
        assert_eq!(octave_count(1000, false), 6);
        assert_eq!(octave_count(512, true), 6);
    }

    #[test]
    fn pyramid_shape() {
        let img = Raster::filled(512, 512, 1, 0.5);
        let pyr = build_pyramid(&img, &ScaleSpaceConfig::default()).unwrap();
        assert_eq!(pyr.octaves.len(), 5);
        let mut side = 512;
        for (o, octave) in pyr.octaves.iter().enumerate() {
            assert_eq!(octave.gaussians.len(), 6);
            assert_eq!(octave.dogs.len(), 5);
            assert_eq!(octave.gaussians[0].width(), side);
            assert_eq!(octave.pixel_size, 2f64.powi(o as i32));
            side = side.div_ceil(2);
        }
        assert!((pyr.level_sigma(0, 0.0) - 0.8).abs() < 1e-12);
        assert!((pyr.level_sigma(2, 3.0) - 0.8 * 8.0).abs() < 1e-12);
    }

    #[test]
    fn pyramid_rejects_small_or_color_input() {
        let cfg = ScaleSpaceConfig::default();
        assert!(build_pyramid(&Raster::filled(31, 64, 1, 0.0), &cfg).is_err());
        assert!(build_pyramid(&Raster::filled(64, 64, 3, 0.0), &cfg).is_err());
        assert!(build_gaussian_pyramid(&Raster::filled(64, 64, 3, 0.0), &cfg).is_ok());
    }

    #[test]
    fn constant_image_has_flat_dog_and_no_keypoints() {
        let img = Raster::filled(128, 96, 1, 0.42);
        let cfg = ScaleSpaceConfig::default();
        let pyr = build_pyramid(&img, &cfg).unwrap();
        for octave in &pyr.octaves {
            for dog in &octave.dogs {
                assert!(dog.samples().iter().all(|v| v.abs() < 1e-6));
            }
        }
        assert!(detect_keypoints(&pyr, &cfg).is_empty());
    }

    #[test]
    fn dog_matches_direct_full_resolution_blurs() {
        let img = synthetic::texture(128, 128, 1, 5);
        let cfg = ScaleSpaceConfig::default();
        let pyr = build_pyramid(&img, &cfg).unwrap();
        for (o, octave) in pyr.octaves.iter().enumerate().take(3) {
            let step = 1usize << o;
            for s in 0..octave.dogs.len() {
                let direct = |level: usize| {
                    let total = pyr.level_sigma(o, level as f64);
                    let extra = (total * total - cfg.sigma_in * cfg.sigma_in).sqrt();
                    gaussian_blur(&img, extra).unwrap()
                };
                let (hi, lo) = (direct(s + 1), direct(s));
                let dog = &octave.dogs[s];
                let mut worst = 0f32;
                for y in 0..dog.height() {
                    for x in 0..dog.width() {
                        let d = hi.get(x * step, y * step, 0) - lo.get(x * step, y * step, 0);
                        worst = worst.max((d - dog.get(x, y, 0)).abs());
                    }
                }
                assert!(worst < 1e-2, "octave {o} level {s}: {worst}");
            }
        }
    }

    #[test]
    fn upsampled_octave_is_numbered_minus_one() {
        // Sharp dots, fine enough to respond below the input sampling scale.
        let img = Raster::from_fn(64, 64, 1, |x, y, _| {
            let (dx, dy) = ((x % 16) as f64 - 8.0, (y % 16) as f64 - 8.0);
            (0.2 + 0.6 * (-(dx * dx + dy * dy) / 4.0).exp()) as f32
        });
        let cfg = ScaleSpaceConfig {
            upsample: true,
            ..ScaleSpaceConfig::default()
        };
        let pyr = build_pyramid(&img, &cfg).unwrap();
        assert_eq!(pyr.octaves[0].gaussians[0].width(), 128);
        assert_eq!(pyr.octaves[0].pixel_size, 0.5);
        assert_eq!(pyr.octave_number(0), -1);
        assert!((pyr.level_sigma(0, 0.0) - 0.8).abs() < 1e-12);
        let kps = detect_keypoints(&pyr, &cfg);
        assert!(kps.iter().any(|k| k.octave == -1));
    }

    #[test]
    fn gaussian_blob_gives_one_cluster_at_its_scale() {
        let (n, s) = (129usize, 4.0f64);
        let c = (n / 2) as f64;
        let img = Raster::from_fn(n, n, 1, |x, y, _| {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            (0.2 + 0.6 * (-r2 / (2.0 * s * s)).exp()) as f32
        });
        let cfg = ScaleSpaceConfig::default();
        let kps = detect_keypoints(&build_pyramid(&img, &cfg).unwrap(), &cfg);
        assert!(!kps.is_empty());

        // Oracle: scale-normalized Laplacian of the blob at its center,
        // evaluated in closed form over a dense scale grid.
        let best = (1..400)
            .map(|i| i as f64 * 0.025)
            .max_by(|a, b| {
                let nl = |t: f64| t * t / (s * s + t * t).powi(2);
                nl(*a).total_cmp(&nl(*b))
            })
            .unwrap();
        assert!((best - s).abs() < 0.05);

        for kp in &kps {
            assert!((kp.x - c).abs() < 1.0 && (kp.y - c).abs() < 1.0, "{kp:?}");
            assert!((kp.sigma - best).abs() <= 0.25 * best, "sigma {}", kp.sigma);
        }
    }

    #[test]
    fn keypoint_invariants_hold() {
        let img = synthetic::texture(160, 144, 1, 21);
        let cfg = ScaleSpaceConfig::default();
        let pyr = build_pyramid(&img, &cfg).unwrap();
        let kps = detect_keypoints(&pyr, &cfg);
        assert!(kps.len() > 20);
        for kp in &kps {
            assert!(kp.x >= 0.0 && kp.x < 160.0 && kp.y >= 0.0 && kp.y < 144.0);
            assert!(kp.sigma > 0.0);
            assert!(kp.theta >= 0.0 && kp.theta < 2.0 * PI);
            assert!(kp.response.abs() >= cfg.contrast_threshold);
            assert!(kp.location.offset.0.abs() < 1.0 && kp.location.offset.1.abs() < 1.0);
        }
        assert!(kps.windows(2).all(|w| w[0].canonical_cmp(&w[1]).is_le()));
    }

    #[test]
    fn quarter_turn_rotates_keypoints() {
        // Odd sides keep the subsampling grid aligned under rotation.
        let n = 257;
        let img = synthetic::texture(n, n, 1, 8);
        let rotated = Raster::from_fn(n, n, 1, |x, y, _| img.get(y, n - 1 - x, 0));
        let cfg = ScaleSpaceConfig::default();
        let a = detect_keypoints(&build_pyramid(&img, &cfg).unwrap(), &cfg);
        let b = detect_keypoints(&build_pyramid(&rotated, &cfg).unwrap(), &cfg);
        let margin = 24.0;
        let interior: Vec<_> = a
            .iter()
            .filter(|k| k.x > margin && k.y > margin && k.x < n as f64 - margin && k.y < n as f64 - margin)
            .collect();
        assert!(interior.len() > 30);
        let mut found = 0;
        for k in &interior {
            let (ex, ey) = ((n - 1) as f64 - k.y, k.x);
            let et = (k.theta + PI / 2.0).rem_euclid(2.0 * PI);
            let hit = b.iter().any(|q| {
                let dt = (q.theta - et).rem_euclid(2.0 * PI);
                (q.x - ex).abs() < 1e-2
                    && (q.y - ey).abs() < 1e-2
                    && (q.sigma - k.sigma).abs() < 1e-3 * k.sigma
                    && dt.min(2.0 * PI - dt) < 0.1
            });
            found += usize::from(hit);
        }
        assert!(found as f64 >= 0.95 * interior.len() as f64, "{found}/{}", interior.len());
    }

    #[test]
    fn additive_offset_does_not_move_keypoints() {
        let img = synthetic::texture(128, 128, 1, 4);
        let shifted = img.map(|v| v + 0.25);
        let cfg = ScaleSpaceConfig::default();
        let a = detect_keypoints(&build_pyramid(&img, &cfg).unwrap(), &cfg);
        let b = detect_keypoints(&build_pyramid(&shifted, &cfg).unwrap(), &cfg);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            // Only f32 rounding of the shifted samples differs.
            assert!((p.x - q.x).abs() < 1e-3 && (p.y - q.y).abs() < 1e-3);
            assert!((p.sigma - q.sigma).abs() < 1e-3 && (p.theta - q.theta).abs() < 1e-3);
        }
    }
}
