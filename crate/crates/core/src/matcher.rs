//! Exhaustive pairwise matching with the max-norm test and early exit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acontrario::{Threshold, ThresholdMode};
use crate::descriptor::GradientDescriptor;
use crate::error::{Error, Result};
use crate::scale_space::Keypoint;

/// Two keypoints whose descriptors agree within the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: Keypoint,
    pub b: Keypoint,
    /// Largest squared difference over all compared values.
    pub distance: f64,
    /// Matched against the mirrored descriptor.
    pub flipped: bool,
    pub comparisons_used: usize,
}

/// Outcome of one descriptor comparison.
///
/// For a match `distance` is the exact maximum. For a rejection it is the
/// first value found above the threshold, which is a lower bound of the
/// maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTest {
    pub matched: bool,
    pub distance: f64,
    /// Values examined before accepting or stopping.
    pub comparisons: usize,
}

fn check_geometry(d1: &GradientDescriptor, d2: &GradientDescriptor) -> Result<()> {
    if d1.n != d2.n || d1.channels != d2.channels {
        return Err(Error::InvalidArgument(format!(
            "descriptor geometry mismatch: {}x{}x{} vs {}x{}x{}",
            d1.n, d1.n, d1.channels, d2.n, d2.n, d2.channels
        )));
    }
    Ok(())
}

/// Walks cells in row-major `(k, l)` order with channels innermost.
/// `source(i)` gives the cell of `d2` compared with cell `i` of `d1` and
/// the sign applied to its y-gradient.
#[inline]
fn scan(
    d1: &GradientDescriptor,
    d2: &GradientDescriptor,
    tau: f64,
    mode: ThresholdMode,
    source: impl Fn(usize) -> (usize, f32),
) -> PairTest {
    let mut max = 0.0f64;
    let mut comparisons = 0;
    for i in 0..d1.gx.len() {
        let (j, sign) = source(i);
        let dx = d1.gx[i] as f64 - d2.gx[j] as f64;
        let dy = d1.gy[i] as f64 - (sign * d2.gy[j]) as f64;
        match mode {
            ThresholdMode::PerCell => {
                comparisons += 1;
                let v = dx * dx + dy * dy;
                if v > tau {
                    return PairTest {
                        matched: false,
                        distance: v,
                        comparisons,
                    };
                }
                max = max.max(v);
            }
            ThresholdMode::PerScalar => {
                for v in [dx * dx, dy * dy] {
                    comparisons += 1;
                    if v > tau {
                        return PairTest {
                            matched: false,
                            distance: v,
                            comparisons,
                        };
                    }
                    max = max.max(v);
                }
            }
        }
    }
    PairTest {
        matched: true,
        distance: max,
        comparisons,
    }
}

/// Max-norm test between two descriptors, stopping at the first value
/// above `τ`.
pub fn d_max(d1: &GradientDescriptor, d2: &GradientDescriptor, threshold: &Threshold) -> Result<PairTest> {
    check_geometry(d1, d2)?;
    Ok(scan(d1, d2, threshold.tau, threshold.params.mode, |i| (i, 1.0)))
}

/// Same as `d_max(d1, flip_descriptor(d2))`, with the row reversal and the
/// y-gradient sign change done by index remapping.
pub fn d_flip(d1: &GradientDescriptor, d2: &GradientDescriptor, threshold: &Threshold) -> Result<PairTest> {
    check_geometry(d1, d2)?;
    let (n, ch) = (d2.n, d2.channels);
    let row = n * ch;
    Ok(scan(d1, d2, threshold.tau, threshold.params.mode, |i| {
        let (k, rest) = (i / row, i % row);
        ((n - 1 - k) * row + rest, -1.0)
    }))
}

/// Minimum distance between the keypoints of a reported pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    /// `factor · max(σ_a, σ_b)`; with `factor = (n+2)·spacing` this is one
    /// descriptor footprint.
    Footprint { factor: f64 },
    Fixed { radius: f64 },
    /// Only a keypoint against itself is skipped.
    None,
}

impl Exclusion {
    pub fn radius(&self, a: &Keypoint, b: &Keypoint) -> f64 {
        match *self {
            Exclusion::Footprint { factor } => factor * a.sigma.max(b.sigma),
            Exclusion::Fixed { radius } => radius,
            Exclusion::None => 0.0,
        }
    }

    fn excludes(&self, a: &Keypoint, b: &Keypoint) -> bool {
        let d = (a.x - b.x).hypot(a.y - b.y);
        d < self.radius(a, b)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    /// Unordered descriptor pairs, `K(K-1)/2`.
    pub pairs_enumerated: u64,
    /// Pairs skipped because their keypoints are too close.
    pub pairs_excluded: u64,
    /// Calls of the direct and flipped tests.
    pub distance_evaluations: u64,
    pub total_comparisons: u64,
    /// Comparisons spent on tests that rejected.
    pub rejected_comparisons: u64,
    pub rejected_evaluations: u64,
}

impl MatchStats {
    fn merge(self, o: MatchStats) -> MatchStats {
        MatchStats {
            pairs_enumerated: self.pairs_enumerated + o.pairs_enumerated,
            pairs_excluded: self.pairs_excluded + o.pairs_excluded,
            distance_evaluations: self.distance_evaluations + o.distance_evaluations,
            total_comparisons: self.total_comparisons + o.total_comparisons,
            rejected_comparisons: self.rejected_comparisons + o.rejected_comparisons,
            rejected_evaluations: self.rejected_evaluations + o.rejected_evaluations,
        }
    }

    /// Mean values examined per test evaluation.
    pub fn mean_comparisons(&self) -> f64 {
        if self.distance_evaluations == 0 {
            0.0
        } else {
            self.total_comparisons as f64 / self.distance_evaluations as f64
        }
    }

    pub fn mean_rejected_comparisons(&self) -> f64 {
        if self.rejected_evaluations == 0 {
            0.0
        } else {
            self.rejected_comparisons as f64 / self.rejected_evaluations as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchOutcome {
    pub matches: Vec<MatchPair>,
    pub stats: MatchStats,
}

/// Tests every unordered pair once directly and, if `enable_flip`, once
/// against the mirrored descriptor. A pair matching both ways is reported
/// once, with the smaller distance (direct on ties).
///
/// Pairs are formed in canonical keypoint order, so the result does not
/// depend on the order of `descriptors`.
pub fn match_all(
    descriptors: &[GradientDescriptor],
    threshold: &Threshold,
    exclusion: Exclusion,
    enable_flip: bool,
) -> Result<MatchOutcome> {
    if let Some(first) = descriptors.first() {
        if let Some(bad) = descriptors.iter().find(|d| d.n != first.n || d.channels != first.channels) {
            check_geometry(first, bad)?;
        }
    }
    let mut order: Vec<&GradientDescriptor> = descriptors.iter().collect();
    order.sort_by(|a, b| a.keypoint.canonical_cmp(&b.keypoint));

    let tau = threshold.tau;
    let mode = threshold.params.mode;
    let per_row: Vec<(Vec<MatchPair>, MatchStats)> = (0..order.len())
        .into_par_iter()
        .map(|i| {
            let a = order[i];
            let mut found = Vec::new();
            let mut stats = MatchStats::default();
            for b in &order[i + 1..] {
                stats.pairs_enumerated += 1;
                if exclusion.excludes(&a.keypoint, &b.keypoint) {
                    stats.pairs_excluded += 1;
                    continue;
                }
                let mut record = |t: &PairTest| {
                    stats.distance_evaluations += 1;
                    stats.total_comparisons += t.comparisons as u64;
                    if !t.matched {
                        stats.rejected_evaluations += 1;
                        stats.rejected_comparisons += t.comparisons as u64;
                    }
                };
                let direct = scan(a, b, tau, mode, |i| (i, 1.0));
                record(&direct);
                let flipped = if enable_flip {
                    let (n, ch) = (b.n, b.channels);
                    let row = n * ch;
                    let t = scan(a, b, tau, mode, |i| ((n - 1 - i / row) * row + i % row, -1.0));
                    record(&t);
                    Some(t)
                } else {
                    None
                };
                let best = match (direct.matched, flipped) {
                    (true, Some(f)) if f.matched && f.distance < direct.distance => Some((f, true)),
                    (true, _) => Some((direct, false)),
                    (false, Some(f)) if f.matched => Some((f, true)),
                    _ => None,
                };
                if let Some((t, is_flip)) = best {
                    found.push(MatchPair {
                        a: a.keypoint,
                        b: b.keypoint,
                        distance: t.distance,
                        flipped: is_flip,
                        comparisons_used: t.comparisons,
                    });
                }
            }
            (found, stats)
        })
        .collect();

    let mut outcome = MatchOutcome::default();
    for (found, stats) in per_row {
        outcome.matches.extend(found);
        outcome.stats = outcome.stats.merge(stats);
    }
    Ok(outcome)
}
