//! Detector configuration and its flat `key = value` text form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acontrario::ThresholdMode;
use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::matcher::Exclusion;
use crate::scale_space::ScaleSpaceConfig;

/// Above this shorter side, automatic descriptor sizing uses `n = 8`.
pub const LARGE_IMAGE_SIDE: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSettings {
    /// `None` selects the side from the image size.
    pub n: Option<usize>,
    pub channels: usize,
    pub spacing: f64,
}

impl Default for DescriptorSettings {
    fn default() -> Self {
        Self {
            n: None,
            channels: 3,
            spacing: 1.0,
        }
    }
}

impl DescriptorSettings {
    /// Resolved descriptor geometry for an image of the given size and
    /// channel count.
    pub fn resolve(&self, width: usize, height: usize, image_channels: usize) -> DescriptorConfig {
        let n = self
            .n
            .unwrap_or(if width.min(height) > LARGE_IMAGE_SIDE { 8 } else { 4 });
        DescriptorConfig {
            n,
            channels: self.channels.min(image_channels),
            spacing: self.spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AContrarioSettings {
    /// Noise standard deviation in gray levels (0–255 scale).
    pub sigma: f64,
    pub epsilon: f64,
    /// Number of images the false-alarm budget is shared across.
    pub images_budget: f64,
    pub mode: ThresholdMode,
    /// Count direct and flipped tests separately in `n_tests`.
    pub count_flip_tests: bool,
}

impl Default for AContrarioSettings {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            epsilon: 1.0,
            images_budget: 100.0,
            mode: ThresholdMode::PerCell,
            count_flip_tests: true,
        }
    }
}

impl AContrarioSettings {
    /// σ on the `[0, 1]` intensity scale.
    pub fn unit_sigma(&self) -> f64 {
        self.sigma / 255.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExclusionMode {
    Footprint,
    Fixed,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherSettings {
    pub exclusion_radius_mode: ExclusionMode,
    /// Radius in pixels for the `fixed` mode.
    pub exclusion_radius: f64,
    pub enable_flip: bool,
}

impl Default for MatcherSettings {
    fn default() -> Self {
        Self {
            exclusion_radius_mode: ExclusionMode::Footprint,
            exclusion_radius: 16.0,
            enable_flip: true,
        }
    }
}

impl MatcherSettings {
    pub fn exclusion(&self, descriptor: &DescriptorConfig) -> Exclusion {
        match self.exclusion_radius_mode {
            ExclusionMode::Footprint => Exclusion::Footprint {
                factor: descriptor.patch_side() as f64 * descriptor.spacing,
            },
            ExclusionMode::Fixed => Exclusion::Fixed {
                radius: self.exclusion_radius,
            },
            ExclusionMode::None => Exclusion::None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub scale_space: ScaleSpaceConfig,
    pub descriptor: DescriptorSettings,
    pub acontrario: AContrarioSettings,
    pub matcher: MatcherSettings,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

impl Config {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// ignored; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Config> {
        let mut config = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value'", lineno + 1)));
            };
            config
                .set(key.trim(), value.trim())
                .map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("line {}: {msg}", lineno + 1)),
                    other => other,
                })?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets one key; the value is validated for type only.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let ss = &mut self.scale_space;
        match key {
            "scale_space.scales_per_octave" => ss.scales_per_octave = parse_num(key, value)?,
            "scale_space.sigma_min" => ss.sigma_min = parse_num(key, value)?,
            "scale_space.sigma_in" => ss.sigma_in = parse_num(key, value)?,
            "scale_space.contrast_threshold" => ss.contrast_threshold = parse_num(key, value)?,
            "scale_space.edge_threshold" => ss.edge_threshold = parse_num(key, value)?,
            "scale_space.upsample" => ss.upsample = parse_bool(key, value)?,
            "descriptor.n" => {
                self.descriptor.n = if value == "auto" { None } else { Some(parse_num(key, value)?) }
            }
            "descriptor.channels" => self.descriptor.channels = parse_num(key, value)?,
            "descriptor.spacing" => self.descriptor.spacing = parse_num(key, value)?,
            "acontrario.sigma" => self.acontrario.sigma = parse_num(key, value)?,
            "acontrario.epsilon" => self.acontrario.epsilon = parse_num(key, value)?,
            "acontrario.images_budget" => self.acontrario.images_budget = parse_num(key, value)?,
            "acontrario.mode" => self.acontrario.mode = value.parse()?,
            "acontrario.count_flip_tests" => self.acontrario.count_flip_tests = parse_bool(key, value)?,
            "matcher.exclusion_radius_mode" => {
                self.matcher.exclusion_radius_mode = match value {
                    "footprint" => ExclusionMode::Footprint,
                    "fixed" => ExclusionMode::Fixed,
                    "none" => ExclusionMode::None,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected footprint, fixed or none, got '{value}'"
                        )))
                    }
                }
            }
            "matcher.exclusion_radius" => self.matcher.exclusion_radius = parse_num(key, value)?,
            "matcher.enable_flip" => self.matcher.enable_flip = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.scale_space.validate()?;
        DescriptorConfig {
            n: self.descriptor.n.unwrap_or(4),
            channels: self.descriptor.channels,
            spacing: self.descriptor.spacing,
        }
        .validate()?;
        let ac = &self.acontrario;
        if !(ac.sigma > 0.0) || !ac.sigma.is_finite() {
            return Err(Error::Config("acontrario.sigma must be positive".into()));
        }
        if !(ac.epsilon > 0.0) || !ac.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(ac.images_budget >= 1.0) || !ac.images_budget.is_finite() {
            return Err(Error::Config("acontrario.images_budget must be at least 1".into()));
        }
        if self.matcher.exclusion_radius_mode == ExclusionMode::Fixed && !(self.matcher.exclusion_radius >= 0.0) {
            return Err(Error::Config("matcher.exclusion_radius must be >= 0".into()));
        }
        Ok(())
    }

    /// Flat text form accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        let ss = &self.scale_space;
        let ac = &self.acontrario;
        let m = &self.matcher;
        let mode = match m.exclusion_radius_mode {
            ExclusionMode::Footprint => "footprint",
            ExclusionMode::Fixed => "fixed",
            ExclusionMode::None => "none",
        };
        format!(
            "scale_space.scales_per_octave = {}\n\
             scale_space.sigma_min = {}\n\
             scale_space.sigma_in = {}\n\
             scale_space.contrast_threshold = {}\n\
             scale_space.edge_threshold = {}\n\
             scale_space.upsample = {}\n\
             descriptor.n = {}\n\
             descriptor.channels = {}\n\
             descriptor.spacing = {}\n\
             acontrario.sigma = {}\n\
             acontrario.epsilon = {}\n\
             acontrario.images_budget = {}\n\
             acontrario.mode = {}\n\
             acontrario.count_flip_tests = {}\n\
             matcher.exclusion_radius_mode = {}\n\
             matcher.exclusion_radius = {}\n\
             matcher.enable_flip = {}\n",
            ss.scales_per_octave,
            ss.sigma_min,
            ss.sigma_in,
            ss.contrast_threshold,
            ss.edge_threshold,
            ss.upsample,
            self.descriptor.n.map_or("auto".to_string(), |n| n.to_string()),
            self.descriptor.channels,
            self.descriptor.spacing,
            ac.sigma,
            ac.epsilon,
            ac.images_budget,
            ac.mode,
            ac.count_flip_tests,
            mode,
            m.exclusion_radius,
            m.enable_flip,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let text = "# detector settings\n\
                    acontrario.sigma = 2.5   # gray levels\n\
                    \n\
                    descriptor.n = 8\n\
                    acontrario.mode = scalar\n\
                    matcher.exclusion_radius_mode = fixed\n\
                    matcher.exclusion_radius = 12\n\
                    scale_space.upsample = yes\n";
        let c = Config::parse(text).unwrap();
        assert_eq!(c.acontrario.sigma, 2.5);
        assert_eq!(c.descriptor.n, Some(8));
        assert_eq!(c.acontrario.mode, ThresholdMode::PerScalar);
        assert_eq!(c.matcher.exclusion_radius_mode, ExclusionMode::Fixed);
        assert!(c.scale_space.upsample);
        assert!((c.acontrario.unit_sigma() - 2.5 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_input_with_line_numbers() {
        let err = Config::parse("descriptor.n = 4\nbogus.key = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus.key"), "{err}");
        assert!(Config::parse("acontrario.sigma = abc").is_err());
        assert!(Config::parse("just words").is_err());
        let err = Config::parse("acontrario.epsilon = 0").unwrap_err().to_string();
        assert!(err.contains("epsilon must be positive"), "{err}");
        assert!(Config::parse("descriptor.channels = 2").is_err());
    }

    #[test]
    fn auto_descriptor_size_follows_image_size() {
        let s = DescriptorSettings::default();
        assert_eq!(s.resolve(800, 600, 3).n, 4);
        assert_eq!(s.resolve(3000, 2000, 3).n, 8);
        assert_eq!(s.resolve(3000, 2000, 1).channels, 1);
        let fixed = DescriptorSettings { n: Some(6), ..s };
        assert_eq!(fixed.resolve(3000, 2000, 3).n, 6);
    }

    #[test]
    fn exclusion_from_settings() {
        let d = DescriptorConfig::default();
        let m = MatcherSettings::default();
        assert_eq!(m.exclusion(&d), Exclusion::Footprint { factor: 6.0 });
        let none = MatcherSettings { exclusion_radius_mode: ExclusionMode::None, ..m };
        assert_eq!(none.exclusion(&d), Exclusion::None);
    }
}
