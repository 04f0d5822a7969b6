use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use copymove::image_io::{load_image, render_overlay};
use copymove::pipeline::{self, ThresholdRequest};
use copymove::{Config, Error, ThresholdMode, Verdict};

/// Copy-move forgery detection.
#[derive(Parser, Debug)]
#[command(name = "copymove", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Detect duplicated regions in one image.
    Detect {
        image: PathBuf,
        /// Key-value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Noise level on the 0-255 scale.
        #[arg(long)]
        sigma: Option<f64>,
        /// Expected number of false matches.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Descriptor side (cells per row); `auto` picks by image size.
        #[arg(long)]
        descriptor_n: Option<String>,
        /// Write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write a PNG with the matches drawn over the image.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Run the detector over a dataset and report detection rates.
    Evaluate {
        /// Directory with forged/ and pristine/, or a CSV manifest of path,label.
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the summary JSON here.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Directory for one JSON report per image.
        #[arg(long)]
        reports: Option<PathBuf>,
    },
    /// Print the match threshold for a test budget.
    Threshold {
        /// Noise level on the 0-255 scale.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// Number of images the false-alarm budget is spread over.
        #[arg(long, default_value_t = 100.0)]
        images: f64,
        /// Average number of keypoints per image.
        #[arg(long, default_value_t = 50.0)]
        avg_keypoints: f64,
        /// Number of independent tests per comparison (default: from n and channels).
        #[arg(long)]
        exponent: Option<u64>,
        #[arg(long, default_value = "cell")]
        mode: ThresholdMode,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Count flipped comparisons in the test budget.
        #[arg(long)]
        count_flip_tests: bool,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(path: Option<&Path>) -> copymove::Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn write_file(path: &Path, text: &str) -> copymove::Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> copymove::Result<()> {
    match cli.command {
        Command::Detect {
            image,
            config,
            sigma,
            epsilon,
            descriptor_n,
            json,
            overlay,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = sigma {
                cfg.set("acontrario.sigma", &s.to_string())?;
            }
            if let Some(e) = epsilon {
                cfg.set("acontrario.epsilon", &e.to_string())?;
            }
            if let Some(n) = descriptor_n {
                cfg.set("descriptor.n", &n)?;
            }
            cfg.validate()?;
            let report = pipeline::detect(&image, &cfg)?;
            let verdict = match report.verdict {
                Verdict::Forged => "forged",
                Verdict::Pristine => "pristine",
            };
            println!(
                "{}: {verdict} ({} matches, {} keypoints, tau = {:.4})",
                report.image_path,
                report.matches.len(),
                report.keypoint_count,
                report.tau_255
            );
            if let Some(path) = json {
                write_file(&path, &report.to_json())?;
            }
            if let Some(path) = overlay {
                render_overlay(&load_image(&image)?, &report.matches, &path)?;
            }
        }
        Command::Evaluate {
            dataset,
            config,
            summary,
            reports,
        } => {
            let cfg = load_config(config.as_deref())?;
            let result = pipeline::evaluate(&dataset, &cfg)?;
            print!("{}", result.table());
            if let Some(dir) = reports {
                pipeline::write_image_reports(&result, &dir)?;
            }
            if let Some(path) = summary {
                write_file(&path, &result.to_json())?;
            }
        }
        Command::Threshold {
            sigma,
            epsilon,
            images,
            avg_keypoints,
            exponent,
            mode,
            n,
            channels,
            count_flip_tests,
            json,
        } => {
            let report = pipeline::threshold_report(&ThresholdRequest {
                sigma,
                epsilon,
                images,
                avg_keypoints,
                exponent,
                mode,
                n,
                channels,
                count_flip_tests,
            })?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 3 } else { 2 })
        }
    }
}
