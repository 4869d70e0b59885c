//! Multi-image estimation of focal length and principal point, summary
//! statistics, and the combination sweep used to study how uncertainty
//! shrinks with the number of images.
//!
//! The stacked systems `[1; 1; ...; 1] f = [μx d_x1; μy d_y1; ...]` and
//! `[I; ...; I] (u0, v0) = [J_1; ...; J_N]` have closed-form least-squares
//! solutions: the means of their right-hand sides.

use std::io::Write;

use nalgebra::Vector2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{check_pitch, pair_mean};
use crate::error::{Error, Result};

/// What one image contributes to the multi-image systems.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageTerms {
    /// `f/μx` estimate, pixels.
    pub d_x: f64,
    /// `f/μy` estimate, pixels.
    pub d_y: f64,
    /// Principal point estimate, pixels.
    pub j: Vector2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    pub images: Vec<ImageTerms>,
    pub mu_x_mm: f64,
    pub mu_y_mm: f64,
}

impl BatchInput {
    pub fn new(images: Vec<ImageTerms>, mu_x_mm: f64, mu_y_mm: f64) -> Result<Self> {
        check_pitch(mu_x_mm, mu_y_mm)?;
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(i) = images.iter().position(|t| {
            !(t.d_x.is_finite() && t.d_y.is_finite() && t.j.x.is_finite() && t.j.y.is_finite())
        }) {
            return Err(Error::InvalidConfig(format!(
                "image {i} has non-finite terms"
            )));
        }
        Ok(Self {
            images,
            mu_x_mm,
            mu_y_mm,
        })
    }
}

/// Running mean; exact when every value is identical.
fn running_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut mean = 0.0;
    let mut n = 0usize;
    for v in values {
        n += 1;
        mean += (v - mean) / n as f64;
    }
    (n > 0).then_some(mean)
}

fn focal_of(images: &[ImageTerms], mu_x: f64, mu_y: f64) -> Option<f64> {
    // Mean of the 2N stacked entries, taken as the mean of per-image pair means.
    running_mean(images.iter().map(|t| pair_mean(mu_x * t.d_x, mu_y * t.d_y)))
}

fn principal_of<'a>(
    images: impl IntoIterator<Item = &'a ImageTerms> + Clone,
) -> Option<Vector2<f64>> {
    let u = running_mean(images.clone().into_iter().map(|t| t.j.x))?;
    let v = running_mean(images.into_iter().map(|t| t.j.y))?;
    Some(Vector2::new(u, v))
}

/// Multi-image focal length, mm.
pub fn batch_focal(input: &BatchInput) -> Result<f64> {
    focal_of(&input.images, input.mu_x_mm, input.mu_y_mm).ok_or(Error::EmptyBatch)
}

/// Multi-image principal point `(u0, v0)`, pixels.
pub fn batch_principal(input: &BatchInput) -> Result<Vector2<f64>> {
    principal_of(&input.images).ok_or(Error::EmptyBatch)
}

/// Central tendency and spread of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation (n - 1 denominator; zero for one sample).
    pub sigma: f64,
    /// Median absolute deviation, unscaled.
    pub mad: f64,
}

impl SummaryStats {
    pub fn of(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = samples.len();
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let median = median_sorted(&sorted);
        let sigma = if n > 1 {
            (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut dev: Vec<f64> = sorted.iter().map(|x| (x - median).abs()).collect();
        dev.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            median,
            sigma,
            mad: median_sorted(&dev),
        })
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Statistics plus signed errors against a reference value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(flatten)]
    pub stats: SummaryStats,
    pub reference: f64,
    pub mean_error: f64,
    pub median_error: f64,
}

pub fn summarize(samples: &[f64], reference: f64) -> Result<Summary> {
    let stats = SummaryStats::of(samples)?;
    Ok(Summary {
        stats,
        reference,
        mean_error: stats.mean - reference,
        median_error: stats.median - reference,
    })
}

/// How images are drawn for each sweep sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Distinct images within a draw (a combination of the pool).
    #[default]
    WithoutReplacement,
    /// Images may repeat within a draw (bootstrap).
    WithReplacement,
}

/// Spread of the batch estimates at one subset size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepLevel {
    pub q: usize,
    pub f_mm: SummaryStats,
    pub u0_px: SummaryStats,
    pub v0_px: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub q_values: Vec<usize>,
    pub draws: usize,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

fn draw_rng(seed: u64, q: usize, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (q as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(draw as u64);
    rng
}

fn draw_subset(rng: &mut ChaCha8Rng, n: usize, q: usize, sampling: Sampling) -> Vec<usize> {
    let mut idx = match sampling {
        Sampling::WithoutReplacement => index::sample(rng, n, q).into_vec(),
        Sampling::WithReplacement => {
            use rand::Rng;
            (0..q).map(|_| rng.random_range(0..n)).collect()
        }
    };
    idx.sort_unstable();
    idx
}

/// Subsets for one level. Draw `d` uses its own substream `(seed, q, d)`; a
/// draw equal to the previous one is redrawn from the same substream when
/// more than one subset exists.
fn level_subsets(
    n: usize,
    q: usize,
    draws: usize,
    seed: u64,
    sampling: Sampling,
) -> Vec<Vec<usize>> {
    let mut first: Vec<(ChaCha8Rng, Vec<usize>)> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = draw_rng(seed, q, d);
            let subset = draw_subset(&mut rng, n, q, sampling);
            (rng, subset)
        })
        .collect();
    let unique_possible = match sampling {
        Sampling::WithoutReplacement => q < n,
        Sampling::WithReplacement => n > 1,
    };
    if unique_possible {
        for d in 1..first.len() {
            let (head, tail) = first.split_at_mut(d);
            let prev = &head[d - 1].1;
            let (rng, subset) = &mut tail[0];
            while subset == prev {
                *subset = draw_subset(rng, n, q, sampling);
            }
        }
    }
    first.into_iter().map(|(_, s)| s).collect()
}

/// Samples `draws` subsets of size `q` from the pool and summarizes the
/// spread of the resulting batch estimates.
pub fn combination_sweep(
    pool: &[ImageTerms],
    mu_x_mm: f64,
    mu_y_mm: f64,
    q: usize,
    draws: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<SweepLevel> {
    check_pitch(mu_x_mm, mu_y_mm)?;
    let n = pool.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if q == 0 || (q > n && sampling == Sampling::WithoutReplacement) {
        return Err(Error::InvalidSweep(format!(
            "subset size {q} not in 1..={n}"
        )));
    }
    if draws == 0 {
        return Err(Error::InvalidSweep("draws must be at least 1".into()));
    }
    let subsets = level_subsets(n, q, draws, seed, sampling);
    let estimates: Vec<(f64, Vector2<f64>)> = subsets
        .par_iter()
        .map(|s| {
            let chosen: Vec<ImageTerms> = s.iter().map(|&i| pool[i]).collect();
            let f = focal_of(&chosen, mu_x_mm, mu_y_mm).expect("non-empty subset");
            let pp = principal_of(&chosen).expect("non-empty subset");
            (f, pp)
        })
        .collect();
    let f: Vec<f64> = estimates.iter().map(|e| e.0).collect();
    let u: Vec<f64> = estimates.iter().map(|e| e.1.x).collect();
    let v: Vec<f64> = estimates.iter().map(|e| e.1.y).collect();
    Ok(SweepLevel {
        q,
        f_mm: SummaryStats::of(&f)?,
        u0_px: SummaryStats::of(&u)?,
        v0_px: SummaryStats::of(&v)?,
    })
}

/// Runs [`combination_sweep`] for every configured subset size.
pub fn sweep(
    pool: &[ImageTerms],
    mu_x_mm: f64,
    mu_y_mm: f64,
    config: &SweepConfig,
) -> Result<Vec<SweepLevel>> {
    config
        .q_values
        .iter()
        .map(|&q| {
            combination_sweep(
                pool,
                mu_x_mm,
                mu_y_mm,
                q,
                config.draws,
                config.seed,
                config.sampling,
            )
        })
        .collect()
}

/// Writes `q,stat,target,value` rows (stat in sigma/mad, target in
/// f_mm/u0_px/v0_px).
pub fn write_sweep_csv<W: Write>(writer: W, levels: &[SweepLevel]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["q", "stat", "target", "value"])?;
    for level in levels {
        for (stat, pick) in [
            (
                "sigma",
                (|s: &SummaryStats| s.sigma) as fn(&SummaryStats) -> f64,
            ),
            ("mad", |s: &SummaryStats| s.mad),
        ] {
            for (target, stats) in [
                ("f_mm", &level.f_mm),
                ("u0_px", &level.u0_px),
                ("v0_px", &level.v0_px),
            ] {
                w.write_record([
                    level.q.to_string(),
                    stat.into(),
                    target.into(),
                    format!("{:.16e}", pick(stats)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Ordinary least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "linear fit needs two or more paired samples, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidConfig(
            "linear fit with constant abscissa".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Slope of `log σ` against `log q` and the fit of `σ` against `1/√q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub log_log: LinearFit,
    pub inv_sqrt: LinearFit,
}

pub fn scaling_fit(q: &[usize], spread: &[f64]) -> Result<ScalingFit> {
    if spread.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidSweep(
            "spread must be positive for a log-log fit".into(),
        ));
    }
    let log_q: Vec<f64> = q.iter().map(|&q| (q as f64).ln()).collect();
    let log_s: Vec<f64> = spread.iter().map(|s| s.ln()).collect();
    let inv_sqrt: Vec<f64> = q.iter().map(|&q| 1.0 / (q as f64).sqrt()).collect();
    Ok(ScalingFit {
        log_log: linear_fit(&log_q, &log_s)?,
        inv_sqrt: linear_fit(&inv_sqrt, spread)?,
    })
}
