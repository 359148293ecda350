use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::LoadGenError;

const MIN_SAMPLES: usize = 30;
const WIDTH_TOLERANCE: f64 = 0.01;
const MAX_BISECTIONS: usize = 50;

/// Gaussian-kernel density over a fixed set of centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kde {
    pub centers: Vec<f64>,
    pub bandwidth: f64,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

impl Kde {
    pub fn pdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.centers.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .centers
            .iter()
            .map(|c| (-0.5 * ((x - c) / h).powi(2)).exp())
            .sum::<f64>()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        self.centers
            .iter()
            .map(|c| std_normal_cdf((x - c) / h))
            .sum::<f64>()
            / self.centers.len() as f64
    }

    /// Inverse CDF by bisection between the extreme centers ± 10 bandwidths.
    pub fn quantile(&self, p: f64) -> f64 {
        let (min, max) = min_max(&self.centers);
        let (mut lo, mut hi) = (min - 10.0 * self.bandwidth, max + 10.0 * self.bandwidth);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn central_interval(&self, confidence: f64) -> (f64, f64) {
        let tail = 0.5 * (1.0 - confidence);
        (self.quantile(tail), self.quantile(1.0 - tail))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let c = self.centers[rng.random_range(0..self.centers.len())];
        let z: f64 = rng.sample(StandardNormal);
        c + self.bandwidth * z
    }

    /// Grid range covering essentially all mass.
    pub fn support(&self) -> (f64, f64) {
        let (min, max) = min_max(&self.centers);
        (min - 6.0 * self.bandwidth, max + 6.0 * self.bandwidth)
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        })
}

/// Linear-interpolated empirical percentile of sorted data (`q` in [0, 1]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (pos - i as f64) * (sorted[j] - sorted[i])
}

pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = percentile(&sorted, 0.75) - percentile(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Fit a Gaussian KDE whose central `confidence` interval matches the
/// empirical one.
///
/// Starts from Silverman's bandwidth. If the interval width is off by more
/// than 1%, the bandwidth scale is bisected in log space for the largest
/// change from Silverman that still meets the tolerance, so the fit stays as
/// smooth as the data allow. If no bracket exists the Silverman bandwidth is
/// kept.
pub fn fit_kde(samples: &[f64], confidence: f64) -> Result<Kde, LoadGenError> {
    if samples.len() < MIN_SAMPLES {
        return Err(LoadGenError::TooFewSamples {
            got: samples.len(),
            need: MIN_SAMPLES,
        });
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(LoadGenError::InvalidParameter(format!(
            "confidence {confidence} not in (0, 1)"
        )));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(LoadGenError::InvalidParameter("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(LoadGenError::Degenerate);
    }
    let h0 = silverman_bandwidth(samples);
    if !(h0 > 0.0) {
        return Err(LoadGenError::Degenerate);
    }
    let tail = 0.5 * (1.0 - confidence);
    let target = percentile(&sorted, 1.0 - tail) - percentile(&sorted, tail);
    let kde_at = |scale: f64| Kde {
        centers: samples.to_vec(),
        bandwidth: h0 * scale,
    };
    // Relative error of the fitted interval width.
    let err = |scale: f64| {
        let (a, b) = kde_at(scale).central_interval(confidence);
        (b - a) / target - 1.0
    };

    let e0 = err(1.0);
    if e0.abs() <= WIDTH_TOLERANCE {
        return Ok(kde_at(1.0));
    }
    // Bisect between a scale that meets the tolerance and the Silverman
    // scale, keeping the passing end, so the result is the widest passing
    // bandwidth along the bracket.
    let mut good = if e0 > 0.0 {
        (1e-3f64).ln()
    } else {
        (1e3f64).ln()
    };
    let mut bad = 0.0f64;
    if err(good.exp()).abs() > WIDTH_TOLERANCE {
        log::warn!("KDE bandwidth bisection failed to bracket; keeping Silverman bandwidth {h0}");
        return Ok(kde_at(1.0));
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (good + bad);
        if err(mid.exp()).abs() <= WIDTH_TOLERANCE {
            good = mid;
        } else {
            bad = mid;
        }
        if (good - bad).abs() < 1e-4 {
            break;
        }
    }
    Ok(kde_at(good.exp()))
}
