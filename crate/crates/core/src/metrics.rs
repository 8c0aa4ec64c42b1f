//! Accuracy metrics over a restored missing segment: pointwise errors,
//! peak/valley/energy errors, and a spectral error computed from the
//! magnitude spectrum of the real-input Fourier transform.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("truth has {truth} points but restored has {restored}")]
    LengthMismatch { truth: usize, restored: usize },
    #[error("empty segment")]
    Empty,
    #[error("segment needs at least 2 points for a spectrum, got {0}")]
    TooShortForSpectrum(usize),
    #[error("truth must be strictly positive, found {value} at index {index}")]
    NonPositiveTruth { value: f64, index: usize },
    #[error("every spectral bin of the truth is below eps={0}")]
    SpectrumBelowFloor(f64),
    #[error("no masked positions to score")]
    NoMaskedPositions,
    #[error("mixed segment lengths in report: {0} vs {1}")]
    MixedLengths(usize, usize),
}

/// (mpe, rmse, pke, vle, egye)
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMetrics {
    pub mpe: f64,
    pub rmse: f64,
    pub pke: f64,
    pub vle: f64,
    pub egye: f64,
}

fn check_pair(truth: &[f64], restored: &[f64]) -> Result<(), MetricsError> {
    if truth.len() != restored.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            restored: restored.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    for (i, &v) in truth.iter().enumerate() {
        if v <= 0.0 {
            return Err(MetricsError::NonPositiveTruth { value: v, index: i });
        }
    }
    Ok(())
}

/// MPE: mean of |x̂−x|/x per point. RMSE: root mean square of x̂−x in the
/// units of the inputs. PKE/VLE: relative error at the segment max/min.
/// EGYE: relative error of the segment energy.
pub fn compute_pointwise(truth: &[f64], restored: &[f64]) -> Result<PointwiseMetrics, MetricsError> {
    check_pair(truth, restored)?;
    let k = truth.len() as f64;
    let mpe = truth
        .iter()
        .zip(restored)
        .map(|(x, xh)| (xh - x).abs() / x)
        .sum::<f64>()
        / k;
    let rmse = (truth
        .iter()
        .zip(restored)
        .map(|(x, xh)| (xh - x) * (xh - x))
        .sum::<f64>()
        / k)
        .sqrt();
    let max = |xs: &[f64]| xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = |xs: &[f64]| xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let pke = (max(restored) - max(truth)).abs() / max(truth);
    let vle = (min(restored) - min(truth)).abs() / min(truth);
    let sum_t: f64 = truth.iter().sum();
    let sum_r: f64 = restored.iter().sum();
    let egye = (sum_r - sum_t).abs() / sum_t;
    Ok(PointwiseMetrics {
        mpe,
        rmse,
        pke,
        vle,
        egye,
    })
}

/// Discrete Fourier transform of a real sequence. Radix-2 in-place when the
/// length is a power of two, direct O(K²) evaluation otherwise. Returns
/// (re, im) pairs for all K bins.
pub fn dft_real(xs: &[f64]) -> Vec<(f64, f64)> {
    let k = xs.len();
    if k.is_power_of_two() && k > 1 {
        let mut re: Vec<f64> = xs.to_vec();
        let mut im = vec![0.0; k];
        // bit-reversal permutation
        let bits = k.trailing_zeros();
        for i in 0..k {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= k {
            let ang = -2.0 * std::f64::consts::PI / len as f64;
            let (wr, wi) = (ang.cos(), ang.sin());
            for start in (0..k).step_by(len) {
                let (mut cr, mut ci) = (1.0, 0.0);
                for off in 0..len / 2 {
                    let a = start + off;
                    let b = a + len / 2;
                    let tr = re[b] * cr - im[b] * ci;
                    let ti = re[b] * ci + im[b] * cr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                    let ncr = cr * wr - ci * wi;
                    ci = cr * wi + ci * wr;
                    cr = ncr;
                }
            }
            len *= 2;
        }
        re.into_iter().zip(im).collect()
    } else {
        (0..k)
            .map(|bin| {
                let mut acc = (0.0, 0.0);
                for (t, &x) in xs.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * bin as f64 * t as f64 / k as f64;
                    acc.0 += x * ang.cos();
                    acc.1 += x * ang.sin();
                }
                acc
            })
            .collect()
    }
}

/// Relative magnitude-spectrum error averaged over bins 0..⌊K/2⌋ whose
/// truth magnitude is at least `eps`; quieter bins are skipped.
pub fn compute_fce(truth: &[f64], restored: &[f64], eps: f64) -> Result<f64, MetricsError> {
    if truth.len() != restored.len() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            restored: restored.len(),
        });
    }
    if truth.len() < 2 {
        return Err(MetricsError::TooShortForSpectrum(truth.len()));
    }
    let ft = dft_real(truth);
    let fr = dft_real(restored);
    let half = truth.len() / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for bin in 0..=half {
        let mt = (ft[bin].0 * ft[bin].0 + ft[bin].1 * ft[bin].1).sqrt();
        if mt < eps {
            continue;
        }
        let mr = (fr[bin].0 * fr[bin].0 + fr[bin].1 * fr[bin].1).sqrt();
        sum += (mr - mt).abs() / mt;
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::SpectrumBelowFloor(eps));
    }
    Ok(sum / count as f64)
}

pub const FCE_EPS: f64 = 1e-8;

/// One restored missing segment to score.
#[derive(Debug, Clone)]
pub struct SegmentEval {
    pub window_id: usize,
    pub mds_index: usize,
    pub truth: Vec<f64>,
    pub restored: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub window_id: usize,
    pub mds_index: usize,
    pub mpe: f64,
    pub rmse: f64,
    pub pke: f64,
    pub vle: f64,
    pub egye: f64,
    pub fce: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub mpe: f64,
    pub rmse: f64,
    pub pke: f64,
    pub vle: f64,
    pub egye: f64,
    pub fce: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_window: Vec<SegmentMetrics>,
    pub aggregate: AggregateMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pocp: Option<f64>,
    pub config_digest: String,
}

/// Scores every segment and averages unweighted across segments.
pub fn assemble_report(
    segments: &[SegmentEval],
    pocp: Option<f64>,
    config_digest: &str,
) -> Result<MetricsReport, MetricsError> {
    if segments.is_empty() {
        return Err(MetricsError::Empty);
    }
    let len0 = segments[0].truth.len();
    let mut per_window = Vec::with_capacity(segments.len());
    for seg in segments {
        if seg.truth.len() != len0 {
            return Err(MetricsError::MixedLengths(len0, seg.truth.len()));
        }
        let p = compute_pointwise(&seg.truth, &seg.restored)?;
        let fce = compute_fce(&seg.truth, &seg.restored, FCE_EPS)?;
        per_window.push(SegmentMetrics {
            window_id: seg.window_id,
            mds_index: seg.mds_index,
            mpe: p.mpe,
            rmse: p.rmse,
            pke: p.pke,
            vle: p.vle,
            egye: p.egye,
            fce,
        });
    }
    let n = per_window.len() as f64;
    let mean = |f: fn(&SegmentMetrics) -> f64| per_window.iter().map(f).sum::<f64>() / n;
    let aggregate = AggregateMetrics {
        mpe: mean(|m| m.mpe),
        rmse: mean(|m| m.rmse),
        pke: mean(|m| m.pke),
        vle: mean(|m| m.vle),
        egye: mean(|m| m.egye),
        fce: mean(|m| m.fce),
    };
    Ok(MetricsReport {
        per_window,
        aggregate,
        pocp,
        config_digest: config_digest.to_string(),
    })
}
