//! End-to-end detection, dataset evaluation and threshold reporting.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acontrario::{compute_threshold, predicted_false_match_probability, AContrarioParams, ThresholdMode};
use crate::config::Config;
use crate::descriptor::extract_descriptors;
use crate::error::{Error, Result};
use crate::image_io::{load_image, Raster};
use crate::matcher::{match_all, MatchPair};
use crate::scale_space::{build_gaussian_pyramid, build_pyramid, detect_keypoints};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Forged,
    Pristine,
}

/// Threshold parameters as used for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsEcho {
    /// σ on the 0–255 scale.
    pub sigma: f64,
    pub epsilon: f64,
    pub n_tests: f64,
    pub exponent: u64,
    pub mode: ThresholdMode,
    pub images_budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema: u32,
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub verdict: Verdict,
    pub descriptor_n: usize,
    pub descriptor_channels: usize,
    pub keypoints_detected: usize,
    pub keypoints_rejected_at_border: usize,
    /// Descriptors taking part in matching.
    pub keypoint_count: usize,
    /// Threshold on squared differences of `[0, 1]`-scaled gradients.
    pub tau: f64,
    /// The same threshold on the 0–255 scale.
    pub tau_255: f64,
    pub params: ParamsEcho,
    pub pairs_enumerated: u64,
    pub pairs_excluded: u64,
    pub distance_evaluations: u64,
    pub total_comparisons: u64,
    /// Mean values examined per direct or flipped test.
    pub mean_comparisons_per_pair: f64,
    pub matches: Vec<MatchPair>,
    pub elapsed_ms: f64,
}

impl DetectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn with_path(path: &str, err: Error) -> Error {
    match err {
        Error::InvalidArgument(msg) => Error::InvalidArgument(format!("{path}: {msg}")),
        Error::Config(msg) => Error::Config(format!("{path}: {msg}")),
        other => other,
    }
}

/// Runs the detector on an image file.
pub fn detect(image_path: impl AsRef<Path>, config: &Config) -> Result<DetectionReport> {
    let path = image_path.as_ref();
    let image = load_image(path)?;
    let label = path.display().to_string();
    detect_raster(&image, &label, config).map_err(|e| with_path(&label, e))
}

/// Runs the detector on a decoded image; `label` is echoed as the path.
pub fn detect_raster(image: &Raster, label: &str, config: &Config) -> Result<DetectionReport> {
    let start = Instant::now();
    config.validate()?;
    let dcfg = config
        .descriptor
        .resolve(image.width(), image.height(), image.channels());
    dcfg.validate()?;

    let gray = image.to_grayscale();
    let pyr = build_pyramid(&gray, &config.scale_space)?;
    let keypoints = detect_keypoints(&pyr, &config.scale_space);
    let (descriptors, rejected) = if dcfg.channels == 1 {
        extract_descriptors(&pyr, &keypoints, &dcfg)
    } else {
        let color = build_gaussian_pyramid(&image.take_channels(dcfg.channels), &config.scale_space)?;
        extract_descriptors(&color, &keypoints, &dcfg)
    };

    let k = descriptors.len() as f64;
    let pairs = (k * (k - 1.0) / 2.0).max(1.0);
    let ac = &config.acontrario;
    let flip_factor = if config.matcher.enable_flip && ac.count_flip_tests { 2.0 } else { 1.0 };
    let params = AContrarioParams::for_descriptor(
        ac.unit_sigma(),
        ac.epsilon,
        ac.images_budget * pairs * flip_factor,
        dcfg.n,
        dcfg.channels,
        ac.mode,
    );
    let threshold = compute_threshold(&params)?;
    let outcome = match_all(
        &descriptors,
        &threshold,
        config.matcher.exclusion(&dcfg),
        config.matcher.enable_flip,
    )?;

    let verdict = if outcome.matches.is_empty() {
        Verdict::Pristine
    } else {
        Verdict::Forged
    };
    Ok(DetectionReport {
        schema: SCHEMA_VERSION,
        image_path: label.to_string(),
        width: image.width(),
        height: image.height(),
        verdict,
        descriptor_n: dcfg.n,
        descriptor_channels: dcfg.channels,
        keypoints_detected: keypoints.len(),
        keypoints_rejected_at_border: rejected,
        keypoint_count: descriptors.len(),
        tau: threshold.tau,
        tau_255: threshold.tau * 255.0 * 255.0,
        params: ParamsEcho {
            sigma: ac.sigma,
            epsilon: ac.epsilon,
            n_tests: params.n_tests,
            exponent: params.exponent,
            mode: params.mode,
            images_budget: ac.images_budget,
        },
        pairs_enumerated: outcome.stats.pairs_enumerated,
        pairs_excluded: outcome.stats.pairs_excluded,
        distance_evaluations: outcome.stats.distance_evaluations,
        total_comparisons: outcome.stats.total_comparisons,
        mean_comparisons_per_pair: outcome.stats.mean_comparisons(),
        matches: outcome.matches,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Forged,
    Pristine,
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forged" | "tampered" | "fake" | "1" => Ok(Label::Forged),
            "pristine" | "original" | "authentic" | "0" => Ok(Label::Pristine),
            other => Err(Error::Config(format!("unknown label '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub path: PathBuf,
    pub label: Label,
}

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

fn list_images(dir: &Path, label: Label) -> Result<Vec<DatasetEntry>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            out.push(DatasetEntry { path, label });
        }
    }
    Ok(out)
}

/// Reads a dataset: either a directory with `forged/` and `pristine/`
/// subdirectories, or a CSV manifest of `path,label` rows (paths relative
/// to the manifest; a header row is allowed). Entries are sorted by path.
pub fn load_dataset(source: &Path) -> Result<Vec<DatasetEntry>> {
    let mut entries = if source.is_dir() {
        let mut v = list_images(&source.join("forged"), Label::Forged)?;
        v.extend(list_images(&source.join("pristine"), Label::Pristine)?);
        v
    } else {
        let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
        let base = source.parent().unwrap_or(Path::new("."));
        let mut v = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((path, label)) = line.rsplit_once(',') else {
                return Err(Error::Config(format!(
                    "{}: line {}: expected 'path,label'",
                    source.display(),
                    i + 1
                )));
            };
            let label = match label.parse::<Label>() {
                Ok(l) => l,
                Err(_) if i == 0 => continue, // header
                Err(e) => return Err(with_path(&format!("{} line {}", source.display(), i + 1), e)),
            };
            let path = Path::new(path.trim().trim_matches('"'));
            let path = if path.is_absolute() { path.to_path_buf() } else { base.join(path) };
            v.push(DatasetEntry { path, label });
        }
        v
    };
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    if entries.is_empty() {
        return Err(Error::Config(format!("{}: dataset contains no images", source.display())));
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub label: Label,
    pub report: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub schema: u32,
    pub dataset_name: String,
    pub forged_images: usize,
    pub pristine_images: usize,
    pub forged_flagged: usize,
    pub pristine_flagged: usize,
    /// Fraction of forged images flagged; `None` without forged images.
    pub true_detection_rate: Option<f64>,
    /// Fraction of pristine images flagged; `None` without pristine images.
    pub false_detection_rate: Option<f64>,
    pub mean_comparisons_per_pair: f64,
    pub per_image: Vec<ImageResult>,
}

impl DatasetSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Human-readable table of the aggregate rates.
    pub fn table(&self) -> String {
        let pct = |r: Option<f64>| r.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>10} {:>10}", "dataset", "images", "true det.", "false det.");
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>10} {:>10}",
            self.dataset_name,
            self.forged_images + self.pristine_images,
            pct(self.true_detection_rate),
            pct(self.false_detection_rate)
        );
        let _ = writeln!(
            s,
            "forged flagged {}/{}, pristine flagged {}/{}, mean comparisons per test {:.2}",
            self.forged_flagged, self.forged_images, self.pristine_flagged, self.pristine_images,
            self.mean_comparisons_per_pair
        );
        s
    }
}

/// Detects on every image of a dataset. The false-alarm budget is shared
/// across the dataset: `images_budget` is set to its image count.
pub fn evaluate(source: &Path, config: &Config) -> Result<DatasetSummary> {
    let entries = load_dataset(source)?;
    let mut config = config.clone();
    config.acontrario.images_budget = entries.len() as f64;
    let reports: Vec<DetectionReport> = entries
        .par_iter()
        .map(|e| detect(&e.path, &config))
        .collect::<Result<_>>()?;

    let per_image: Vec<ImageResult> = entries
        .iter()
        .zip(reports)
        .map(|(e, report)| ImageResult { label: e.label, report })
        .collect();
    let count = |label: Label, flagged: bool| {
        per_image
            .iter()
            .filter(|r| r.label == label && (!flagged || r.report.verdict == Verdict::Forged))
            .count()
    };
    let (forged, pristine) = (count(Label::Forged, false), count(Label::Pristine, false));
    let (forged_flagged, pristine_flagged) = (count(Label::Forged, true), count(Label::Pristine, true));
    let rate = |hits: usize, total: usize| (total > 0).then(|| hits as f64 / total as f64);
    let (evals, comps) = per_image.iter().fold((0u64, 0u64), |(e, c), r| {
        (e + r.report.distance_evaluations, c + r.report.total_comparisons)
    });
    let dataset_name = source
        .file_stem()
        .or_else(|| source.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source.display().to_string());
    Ok(DatasetSummary {
        schema: SCHEMA_VERSION,
        dataset_name,
        forged_images: forged,
        pristine_images: pristine,
        forged_flagged,
        pristine_flagged,
        true_detection_rate: rate(forged_flagged, forged),
        false_detection_rate: rate(pristine_flagged, pristine),
        mean_comparisons_per_pair: if evals == 0 { 0.0 } else { comps as f64 / evals as f64 },
        per_image,
    })
}

/// Writes one JSON report per image into `dir`, named after the image.
pub fn write_image_reports(summary: &DatasetSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, r) in summary.per_image.iter().enumerate() {
        let stem = Path::new(&r.report.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("image{i}"));
        let path = dir.join(format!("{i:04}_{stem}.json"));
        std::fs::write(&path, r.report.to_json()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Inputs of the standalone threshold computation.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRequest {
    /// Noise σ on the 0–255 scale.
    pub sigma: f64,
    pub epsilon: f64,
    pub images: f64,
    pub avg_keypoints: f64,
    /// Overrides the exponent implied by the descriptor geometry.
    pub exponent: Option<u64>,
    pub mode: ThresholdMode,
    pub n: usize,
    pub channels: usize,
    pub count_flip_tests: bool,
}

impl Default for ThresholdRequest {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            epsilon: 1.0,
            images: 100.0,
            avg_keypoints: 50.0,
            exponent: None,
            mode: ThresholdMode::PerCell,
            n: 4,
            channels: 3,
            count_flip_tests: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// Threshold on the 0–255 scale.
    pub tau: f64,
    /// Threshold on the `[0, 1]` scale.
    pub tau_unit: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub exponent: u64,
    pub n_tests: f64,
    pub mode: ThresholdMode,
    pub target_rate: f64,
    pub predicted_false_match_probability: f64,
}

impl ThresholdReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("threshold report serializes")
    }

    pub fn to_text(&self) -> String {
        format!(
            "tau = {:.6} (0-255 scale), {:.6e} ([0,1] scale)\n\
             E = {}\nn_tests = {}\nmode = {}\n\
             per-test false match probability = {:.6e} (target {:.6e})\n",
            self.tau,
            self.tau_unit,
            self.exponent,
            self.n_tests,
            self.mode,
            self.predicted_false_match_probability,
            self.target_rate
        )
    }
}

/// Threshold for a dataset of `images` images with `avg_keypoints`
/// keypoints each: `n_tests = images · K(K-1)/2`, doubled when flipped
/// tests are counted.
pub fn threshold_report(req: &ThresholdRequest) -> Result<ThresholdReport> {
    if !(req.sigma > 0.0) {
        return Err(Error::Config(format!("sigma must be positive, got {}", req.sigma)));
    }
    if !(req.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    if !(req.images >= 1.0) {
        return Err(Error::Config("images must be at least 1".into()));
    }
    if !(req.avg_keypoints >= 2.0) {
        return Err(Error::Config("avg-keypoints must be at least 2".into()));
    }
    let k = req.avg_keypoints;
    let n_tests = req.images * k * (k - 1.0) / 2.0 * if req.count_flip_tests { 2.0 } else { 1.0 };
    let params = AContrarioParams {
        sigma: req.sigma / 255.0,
        epsilon: req.epsilon,
        n_tests,
        exponent: req.exponent.unwrap_or_else(|| req.mode.exponent(req.n, req.channels)),
        mode: req.mode,
    };
    let th = compute_threshold(&params)?;
    Ok(ThresholdReport {
        tau: th.tau * 255.0 * 255.0,
        tau_unit: th.tau,
        sigma: req.sigma,
        epsilon: req.epsilon,
        exponent: params.exponent,
        n_tests,
        mode: req.mode,
        target_rate: params.target_rate(),
        predicted_false_match_probability: predicted_false_match_probability(&th),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn flat_image_is_pristine_without_keypoints() {
        let img = Raster::filled(256, 256, 3, 0.5);
        let r = detect_raster(&img, "flat", &Config::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Pristine);
        assert_eq!(r.keypoints_detected, 0);
        assert!(r.matches.is_empty());
    }

    #[test]
    fn verbatim_copy_is_detected_with_near_zero_distance() {
        let base = synthetic::texture(320, 256, 3, 31);
        let cm = synthetic::CopyMove {
            source: (70.0, 128.0),
            target: (234.0, 128.0),
            side: 64,
            transform: synthetic::RegionTransform::default(),
        };
        let forged = cm.apply(&base);
        let r = detect_raster(&forged, "forged", &Config::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Forged);
        assert!(r.matches.iter().any(|m| m.distance < 1e-3 && (m.b.x - m.a.x).abs() > 150.0));
        assert_eq!(r.pairs_enumerated, (r.keypoint_count * (r.keypoint_count - 1) / 2) as u64);
    }

    #[test]
    fn reports_are_deterministic() {
        let img = synthetic::texture(200, 160, 3, 5);
        let strip = |r: DetectionReport| DetectionReport { elapsed_ms: 0.0, ..r };
        let a = strip(detect_raster(&img, "x", &Config::default()).unwrap());
        let b = strip(detect_raster(&img, "x", &Config::default()).unwrap());
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn grayscale_images_use_one_channel() {
        let img = synthetic::texture(160, 160, 1, 6);
        let r = detect_raster(&img, "gray", &Config::default()).unwrap();
        assert_eq!(r.descriptor_channels, 1);
        assert_eq!(r.params.exponent, 16);
    }

    #[test]
    fn small_images_are_rejected_with_context() {
        let err = detect_raster(&Raster::filled(20, 20, 3, 0.0), "tiny.png", &Config::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn threshold_report_reference_setting() {
        let r = threshold_report(&ThresholdRequest::default()).unwrap();
        assert_eq!(r.exponent, 48);
        assert_eq!(r.n_tests, 122_500.0);
        assert!((2.7..=3.2).contains(&r.tau));
        let doubled = threshold_report(&ThresholdRequest { sigma: 2.0, ..ThresholdRequest::default() }).unwrap();
        assert!((doubled.tau / r.tau - 4.0).abs() < 1e-12);
        let err = threshold_report(&ThresholdRequest { epsilon: 0.0, ..ThresholdRequest::default() }).unwrap_err();
        assert!(err.to_string().contains("epsilon must be positive"));
        let text = r.to_text();
        assert!(text.contains("E = 48") && text.contains("mode = cell"));
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["mode"], "per-cell");
    }

    #[test]
    fn manifest_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("list.csv");
        std::fs::write(&manifest, "path,label\nb.png,pristine\na.png,forged\n").unwrap();
        let entries = load_dataset(&manifest).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].path, dir.path().join("a.png"));
        assert_eq!(entries[0].label, Label::Forged);
        std::fs::write(&manifest, "path,label\n").unwrap();
        assert!(matches!(load_dataset(&manifest), Err(Error::Config(_))));
        std::fs::write(&manifest, "a.png,forged\nb.png,maybe\n").unwrap();
        assert!(load_dataset(&manifest).is_err());
    }

    #[test]
    fn empty_directory_is_a_configuration_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("forged")).unwrap();
        assert!(matches!(evaluate(dir.path(), &Config::default()), Err(Error::Config(_))));
    }
}
