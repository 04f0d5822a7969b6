//! Oriented gradient-patch descriptors.
//!
//! A descriptor is the raw `N×N` grid of per-channel gradient 2-vectors
//! computed from an `(N+2)×(N+2)` patch sampled on a grid rotated by the
//! keypoint orientation with spacing proportional to its scale. Gradients
//! are not pooled into histograms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Raster;
use crate::scale_space::{nearest_level, Keypoint, Pyramid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    /// Spatial side `N` of the gradient grid.
    pub n: usize,
    /// Color channels kept (1 or 3).
    pub channels: usize,
    /// Sample spacing in units of the keypoint scale.
    pub spacing: f64,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            n: 4,
            channels: 3,
            spacing: 1.0,
        }
    }
}

impl DescriptorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("descriptor.n must be >= 2, got {}", self.n)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "descriptor.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return Err(Error::Config("descriptor.spacing must be positive".into()));
        }
        Ok(())
    }

    /// Side of the sampled pixel patch.
    pub fn patch_side(&self) -> usize {
        self.n + 2
    }
}

/// Intensities sampled on a `side × side` grid, channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub side: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn at(&self, row: usize, col: usize, c: usize) -> f32 {
        self.values[(row * self.side + col) * self.channels + c]
    }

    /// Rows reversed.
    pub fn mirrored(&self) -> Patch {
        let mut values = Vec::with_capacity(self.values.len());
        for row in (0..self.side).rev() {
            let start = row * self.side * self.channels;
            values.extend_from_slice(&self.values[start..start + self.side * self.channels]);
        }
        Patch {
            values,
            ..self.clone()
        }
    }
}

/// `N×N×C` grid of gradient 2-vectors. Cell `(k, l, c)` is stored at
/// `(k * n + l) * channels + c`; `k` indexes rows of the oriented patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientDescriptor {
    pub keypoint: Keypoint,
    pub n: usize,
    pub channels: usize,
    pub gx: Vec<f32>,
    pub gy: Vec<f32>,
}

impl GradientDescriptor {
    /// Number of `(k, l, c)` cells.
    pub fn cell_count(&self) -> usize {
        self.n * self.n * self.channels
    }

    #[inline]
    pub fn index(&self, k: usize, l: usize, c: usize) -> usize {
        (k * self.n + l) * self.channels + c
    }
}

/// Bilinear sampling of an oriented grid. Sample positions are formed as
/// `anchor + (offset + rotated grid offset)` so that integer translations
/// of the content give identical interpolation weights.
fn sample_grid(
    image: &Raster,
    channels: usize,
    anchor: (i64, i64),
    offset: (f64, f64),
    theta: f64,
    step: f64,
    side: usize,
) -> Option<Patch> {
    let (w, h) = (image.width() as i64, image.height() as i64);
    let (sin, cos) = theta.sin_cos();
    let half = (side as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(side * side * channels);
    for i in 0..side {
        let v = (i as f64 - half) * step;
        for j in 0..side {
            let u = (j as f64 - half) * step;
            let rx = offset.0 + (cos * u - sin * v);
            let ry = offset.1 + (sin * u + cos * v);
            let (fx0, fy0) = (rx.floor(), ry.floor());
            let (fx, fy) = (rx - fx0, ry - fy0);
            let x0 = anchor.0 + fx0 as i64;
            let y0 = anchor.1 + fy0 as i64;
            if x0 < 0 || y0 < 0 || x0 >= w || y0 >= h {
                return None;
            }
            let x1 = if fx > 0.0 { x0 + 1 } else { x0 };
            let y1 = if fy > 0.0 { y0 + 1 } else { y0 };
            if x1 >= w || y1 >= h {
                return None;
            }
            let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
            for c in 0..channels {
                let v = (1.0 - fx) * (1.0 - fy) * image.get(x0, y0, c) as f64
                    + fx * (1.0 - fy) * image.get(x1, y0, c) as f64
                    + (1.0 - fx) * fy * image.get(x0, y1, c) as f64
                    + fx * fy * image.get(x1, y1, c) as f64;
                values.push(v as f32);
            }
        }
    }
    Some(Patch {
        side,
        channels,
        values,
    })
}

/// Samples an `(n+2)×(n+2)` patch of `image` (input pixel coordinates)
/// centered on the keypoint, rotated by its orientation, with spacing
/// `spacing_factor * kp.sigma`. Returns `None` when any sample falls
/// outside the image.
///
/// All channels of `image` are kept.
pub fn sample_patch(image: &Raster, kp: &Keypoint, n: usize, spacing_factor: f64) -> Option<Patch> {
    assert!(n >= 2, "descriptor side must be at least 2");
    let (ax, ay) = (kp.x.floor(), kp.y.floor());
    sample_grid(
        image,
        image.channels(),
        (ax as i64, ay as i64),
        (kp.x - ax, kp.y - ay),
        kp.theta,
        spacing_factor * kp.sigma,
        n + 2,
    )
}

/// Samples the patch from the level of `pyr` nearest the keypoint scale,
/// inside the keypoint's octave. `pyr` may be a color Gaussian pyramid
/// built with the same configuration as the detection pyramid.
pub fn sample_patch_from_pyramid(
    pyr: &Pyramid,
    kp: &Keypoint,
    config: &DescriptorConfig,
) -> Option<Patch> {
    let loc = &kp.location;
    let level = &pyr.octaves.get(loc.octave_index)?.gaussians[nearest_level(pyr, loc)];
    if config.channels > level.channels() {
        return None;
    }
    sample_grid(
        level,
        config.channels,
        loc.anchor,
        loc.offset,
        kp.theta,
        config.spacing * kp.sigma / loc.pixel_size,
        config.patch_side(),
    )
}

/// Central differences over the patch interior, consuming its one-sample
/// border.
pub fn compute_descriptor(patch: &Patch, keypoint: Keypoint) -> GradientDescriptor {
    assert!(patch.side >= 3);
    let n = patch.side - 2;
    let ch = patch.channels;
    let mut gx = Vec::with_capacity(n * n * ch);
    let mut gy = Vec::with_capacity(n * n * ch);
    for k in 1..=n {
        for l in 1..=n {
            for c in 0..ch {
                gx.push((patch.at(k, l + 1, c) - patch.at(k, l - 1, c)) / 2.0);
                gy.push((patch.at(k + 1, l, c) - patch.at(k - 1, l, c)) / 2.0);
            }
        }
    }
    GradientDescriptor {
        keypoint,
        n,
        channels: ch,
        gx,
        gy,
    }
}

/// Mirror across the patch's horizontal axis: row `k` becomes row
/// `N-1-k` and the y-gradient changes sign. An involution.
pub fn flip_descriptor(d: &GradientDescriptor) -> GradientDescriptor {
    let mut gx = Vec::with_capacity(d.gx.len());
    let mut gy = Vec::with_capacity(d.gy.len());
    for k in 0..d.n {
        let src = d.n - 1 - k;
        for l in 0..d.n {
            for c in 0..d.channels {
                let i = d.index(src, l, c);
                gx.push(d.gx[i]);
                gy.push(-d.gy[i]);
            }
        }
    }
    GradientDescriptor {
        gx,
        gy,
        ..d.clone()
    }
}

/// Descriptors for every keypoint whose patch fits inside the image, in
/// keypoint order, plus the number of keypoints dropped at the border.
pub fn extract_descriptors(
    pyr: &Pyramid,
    keypoints: &[Keypoint],
    config: &DescriptorConfig,
) -> (Vec<GradientDescriptor>, usize) {
    let descriptors: Vec<GradientDescriptor> = keypoints
        .par_iter()
        .filter_map(|kp| sample_patch_from_pyramid(pyr, kp, config).map(|p| compute_descriptor(&p, *kp)))
        .collect();
    let rejected = keypoints.len() - descriptors.len();
    (descriptors, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn kp_at(x: f64, y: f64, sigma: f64, theta: f64) -> Keypoint {
        Keypoint {
            x,
            y,
            sigma,
            theta,
            ..Keypoint::default()
        }
    }

    fn patch_from(side: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Patch {
        let mut values = Vec::new();
        for r in 0..side {
            for c in 0..side {
                for ch in 0..channels {
                    values.push(f(r, c, ch));
                }
            }
        }
        Patch {
            side,
            channels,
            values,
        }
    }

    fn descriptor_from(n: usize, channels: usize, gx: Vec<f32>, gy: Vec<f32>) -> GradientDescriptor {
        GradientDescriptor {
            keypoint: Keypoint::default(),
            n,
            channels,
            gx,
            gy,
        }
    }

    #[test]
    fn identity_sampling_reproduces_pixels() {
        let img = synthetic::texture(32, 32, 3, 9);
        // With an even patch side the grid is centered between pixels.
        let kp = kp_at(10.5, 12.5, 1.0, 0.0);
        let patch = sample_patch(&img, &kp, 4, 1.0).unwrap();
        assert_eq!(patch.side, 6);
        for r in 0..6 {
            for c in 0..6 {
                for ch in 0..3 {
                    assert_eq!(patch.at(r, c, ch), img.get(8 + c, 10 + r, ch));
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_patch_and_zero_descriptor() {
        let img = Raster::filled(40, 40, 3, 0.3);
        let patch = sample_patch(&img, &kp_at(20.2, 19.7, 2.3, 1.1), 4, 1.0).unwrap();
        assert!(patch.values.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let d = compute_descriptor(&patch, Keypoint::default());
        assert!(d.gx.iter().chain(&d.gy).all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn out_of_bounds_patch_is_rejected() {
        let img = Raster::filled(40, 40, 1, 0.3);
        assert!(sample_patch(&img, &kp_at(2.0, 20.0, 1.0, 0.0), 4, 1.0).is_none());
        assert!(sample_patch(&img, &kp_at(20.0, 20.0, 10.0, 0.0), 4, 1.0).is_none());
        // Samples landing exactly on the last pixel are allowed.
        assert!(sample_patch(&img, &kp_at(36.5, 36.5, 1.0, 0.0), 4, 1.0).is_some());
    }

    #[test]
    fn horizontal_ramp_has_unit_x_gradient() {
        let patch = patch_from(6, 1, |_, c, _| c as f32);
        let d = compute_descriptor(&patch, Keypoint::default());
        assert_eq!(d.n, 4);
        assert!(d.gx.iter().all(|&v| v == 1.0));
        assert!(d.gy.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn descriptor_matches_direct_difference_loop() {
        let patch = patch_from(8, 3, |r, c, ch| ((r * 31 + c * 17 + ch * 7) % 23) as f32 / 23.0);
        let d = compute_descriptor(&patch, Keypoint::default());
        let n = 6;
        for k in 0..n {
            for l in 0..n {
                for ch in 0..3 {
                    let idx = (k * n + l) * 3 + ch;
                    let ex = (patch.values[((k + 1) * 8 + l + 2) * 3 + ch] - patch.values[((k + 1) * 8 + l) * 3 + ch]) / 2.0;
                    let ey = (patch.values[((k + 2) * 8 + l + 1) * 3 + ch] - patch.values[(k * 8 + l + 1) * 3 + ch]) / 2.0;
                    assert_eq!(d.gx[idx], ex);
                    assert_eq!(d.gy[idx], ey);
                }
            }
        }
    }

    #[test]
    fn flip_rules() {
        // gy = 0 and rows identical: fixed point.
        let sym = descriptor_from(3, 1, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0], vec![0.0; 9]);
        assert_eq!(flip_descriptor(&sym), sym);
        // vertical ramp
        let ramp = descriptor_from(4, 3, vec![0.0; 48], vec![1.0; 48]);
        let f = flip_descriptor(&ramp);
        assert!(f.gy.iter().all(|&v| v == -1.0));
        assert!(f.gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mirrored_patch_gives_flipped_descriptor() {
        let patch = patch_from(6, 3, |r, c, ch| ((r * 13 + c * 29 + ch * 5) % 19) as f32 / 19.0);
        let d = compute_descriptor(&patch, Keypoint::default());
        let m = compute_descriptor(&patch.mirrored(), Keypoint::default());
        assert_eq!(flip_descriptor(&d), m);
    }

    #[test]
    fn rotated_image_gives_rotated_patch() {
        // Smooth content keeps bicubic reference rotation accurate.
        let img = gaussian_smooth(&synthetic::texture(128, 128, 3, 12), 1.5);
        let center = (64.0, 64.0);
        let phi = 0.7;
        let rotated = synthetic::rotate(&img, center, phi);
        let kp = kp_at(58.3, 70.6, 2.2, 0.4);
        let (s, c) = phi.sin_cos();
        let (dx, dy) = (kp.x - center.0, kp.y - center.1);
        let moved = kp_at(
            center.0 + c * dx - s * dy,
            center.1 + s * dx + c * dy,
            kp.sigma,
            (kp.theta + phi).rem_euclid(2.0 * PI),
        );
        let a = sample_patch(&img, &kp, 4, 1.0).unwrap();
        let b = sample_patch(&rotated, &moved, 4, 1.0).unwrap();
        let worst = a.values.iter().zip(&b.values).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(worst < 2e-2, "{worst}");
    }

    fn gaussian_smooth(img: &Raster, sigma: f64) -> Raster {
        crate::scale_space::gaussian_blur(img, sigma).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(DescriptorConfig::default().validate().is_ok());
        let bad = [
            DescriptorConfig { n: 1, ..DescriptorConfig::default() },
            DescriptorConfig { channels: 2, ..DescriptorConfig::default() },
            DescriptorConfig { spacing: 0.0, ..DescriptorConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    fn arb_descriptor() -> impl Strategy<Value = GradientDescriptor> {
        (2usize..6, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, ch)| {
            let len = n * n * ch;
            (
                prop::collection::vec(-1.0f32..1.0, len),
                prop::collection::vec(-1.0f32..1.0, len),
            )
                .prop_map(move |(gx, gy)| descriptor_from(n, ch, gx, gy))
        })
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(d in arb_descriptor()) {
            prop_assert_eq!(flip_descriptor(&flip_descriptor(&d)), d);
        }

        #[test]
        fn additive_offset_leaves_descriptor_unchanged(
            levels in prop::collection::vec(0u16..256, 36 * 3),
            offset in 0u16..256,
        ) {
            // Dyadic values make the sums exact in f32.
            let base = patch_from(6, 3, |r, c, ch| levels[(r * 6 + c) * 3 + ch] as f32 / 256.0);
            let c = offset as f32 / 256.0;
            let shifted = Patch { values: base.values.iter().map(|v| v + c).collect(), ..base.clone() };
            prop_assert_eq!(
                compute_descriptor(&base, Keypoint::default()),
                compute_descriptor(&shifted, Keypoint::default())
            );
        }
    }
}
