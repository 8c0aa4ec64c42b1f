//! Candidate restorations from a distribution matrix: top-1 decoding,
//! direct top-2, fork-point-based iterative top-2 with shifted re-inference,
//! the combine utility, and the percentage-of-closer-points score.

use crate::data::{quantize, DataError, MaskedWindow, TokenSequence};
use crate::model::{decode_top1, forward, DistributionMatrix, ModelConfig, ModelError, ModelParams};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("top-2 selection needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("mask of {mask} entries for {n} positions")]
    MaskLengthMismatch { mask: usize, n: usize },
    #[error("margins of {left}/{right} points; iterative selection needs {required} per side")]
    InsufficientMargin {
        left: usize,
        right: usize,
        required: usize,
    },
    #[error("no masked positions")]
    NoMaskedPositions,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Top1,
    DirectTop2,
    IterativeTop2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// fork threshold on the top1−top2 probability gap
    pub e: f64,
    pub method: SelectionMethod,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            e: 0.1,
            method: SelectionMethod::IterativeTop2,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<(), SelectError> {
        if !(0.0..=1.0).contains(&self.e) {
            return Err(SelectError::BadConfig(format!("e {} outside [0, 1]", self.e)));
        }
        Ok(())
    }
}

/// Both candidate class sequences plus per-segment fork bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub top1_classes: Vec<usize>,
    pub top2_classes: Vec<usize>,
    /// masked segments as inclusive (start, end) pairs
    pub segments: Vec<(usize, usize)>,
    /// (fork_left, fork_right) per segment, in `segments` order
    pub forks: Vec<(Option<usize>, Option<usize>)>,
}

/// Second-highest class at every masked position, top-1 elsewhere.
pub fn direct_top2(d: &DistributionMatrix, mask: &[u8]) -> Result<CandidateSet, SelectError> {
    if d.classes() < 2 {
        return Err(SelectError::TooFewClasses(d.classes()));
    }
    if mask.len() != d.len() {
        return Err(SelectError::MaskLengthMismatch {
            mask: mask.len(),
            n: d.len(),
        });
    }
    let top1 = decode_top1(d);
    let top2 = (0..d.len())
        .map(|t| if mask[t] == 0 { d.top2(t).1 } else { top1[t] })
        .collect();
    Ok(CandidateSet {
        top1_classes: top1,
        top2_classes: top2,
        segments: segments_of(mask),
        forks: Vec::new(),
    })
}

fn segments_of(mask: &[u8]) -> Vec<(usize, usize)> {
    let mut segs = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m, start) {
            (0, None) => start = Some(i),
            (1, Some(s)) => {
                segs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segs.push((s, mask.len() - 1));
    }
    segs
}

fn gap(d: &DistributionMatrix, t: usize) -> f64 {
    let (a, b) = d.top2(t);
    d.row(t)[a] - d.row(t)[b]
}

/// Scans at most l = ⌊(t_end−t_start)/2⌋ positions inward from each edge of
/// one masked segment for the first position with a top1−top2 gap < e.
pub fn find_fork_points(
    d: &DistributionMatrix,
    segment: (usize, usize),
    e: f64,
) -> (Option<usize>, Option<usize>) {
    let (s, t_end) = segment;
    let l = (t_end - s) / 2;
    let fork_left = (s..=s + l).find(|&t| gap(d, t) < e);
    let fork_right = (t_end - l..=t_end).rev().find(|&t| gap(d, t) < e);
    (fork_left, fork_right)
}

/// Inference abstraction so selection can run against the real model or a
/// fixed-output stub.
pub trait Predictor {
    fn predict(&self, tokens: &TokenSequence) -> Result<DistributionMatrix, SelectError>;
    fn classes(&self) -> usize;
}

pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, tokens: &TokenSequence) -> Result<DistributionMatrix, SelectError> {
        Ok(forward(tokens, self.params, self.config)?)
    }

    fn classes(&self) -> usize {
        self.config.classes
    }
}

/// Token channels for the window shifted so that original position
/// `shift + j` appears at coordinate j; margins supply off-window data and
/// `fixed` carries classes already committed inside masked segments.
fn shifted_tokens(
    window: &MaskedWindow,
    tokens: &TokenSequence,
    shift: isize,
    fixed: &HashMap<usize, usize>,
    classes: usize,
) -> Result<TokenSequence, SelectError> {
    let n = window.window_len();
    let mut load_classes = Vec::with_capacity(n);
    let mut temp_classes = Vec::with_capacity(n);
    for j in 0..n {
        let p = j as isize + shift;
        if (0..n as isize).contains(&p) {
            let p = p as usize;
            if window.mask[p] == 0 {
                load_classes.push(*fixed.get(&p).unwrap_or(&0));
            } else {
                load_classes.push(tokens.load_classes[p]);
            }
            temp_classes.push(tokens.temp_classes[p]);
        } else {
            load_classes.push(quantize(window.load_at(p), classes)?);
            temp_classes.push(quantize(window.temp_at(p), classes)?);
        }
    }
    Ok(TokenSequence {
        load_classes,
        temp_classes,
    })
}

/// Fork-point top-2: decode top-1 inward from each segment edge until the
/// gap drops below e, substitute the top-2 class there, then refill each
/// deeper position by shifting the window so that position sits at the
/// original segment edge and taking the top-1 of a fresh forward pass.
/// Sides without a fork keep plain top-1 values.
pub fn iterative_top2(
    window: &MaskedWindow,
    predictor: &dyn Predictor,
    sel: &SelectionConfig,
) -> Result<CandidateSet, SelectError> {
    sel.validate()?;
    let classes = predictor.classes();
    if classes < 2 {
        return Err(SelectError::TooFewClasses(classes));
    }
    let tokens = TokenSequence::from_window(window, classes)?;
    let d = predictor.predict(&tokens)?;
    let top1 = decode_top1(&d);
    let mut top2 = top1.clone();
    let segments = window.segments();
    let mut forks = Vec::with_capacity(segments.len());

    for &(s, t_end) in &segments {
        let l = (t_end - s) / 2;
        if window.left_margin_load.len() < l || window.right_margin_load.len() < l {
            return Err(SelectError::InsufficientMargin {
                left: window.left_margin_load.len(),
                right: window.right_margin_load.len(),
                required: l,
            });
        }
        let (fork_left, fork_right) = find_fork_points(&d, (s, t_end), sel.e);
        forks.push((fork_left, fork_right));
        // classes committed so far inside this segment, keyed by position
        let mut fixed: HashMap<usize, usize> = HashMap::new();

        if let Some(fl) = fork_left {
            for p in s..fl {
                fixed.insert(p, top1[p]);
            }
            top2[fl] = d.top2(fl).1;
            fixed.insert(fl, top2[fl]);
            // deeper positions: one shifted forward pass each
            for p in fl + 1..=s + l {
                let k = (p - s) as isize;
                let shifted = shifted_tokens(window, &tokens, k, &fixed, classes)?;
                let ds = predictor.predict(&shifted)?;
                let class = ds.top2(s).0;
                top2[p] = class;
                fixed.insert(p, class);
            }
        }

        if let Some(fr) = fork_right {
            for p in fr + 1..=t_end {
                fixed.insert(p, top1[p]);
            }
            top2[fr] = d.top2(fr).1;
            fixed.insert(fr, top2[fr]);
            // left-side refill owns positions up to s+l; right side fills the rest
            let lower = (t_end - l).max(s + l + 1);
            let mut p = fr;
            while p > lower {
                p -= 1;
                let k = (t_end - p) as isize;
                let shifted = shifted_tokens(window, &tokens, -k, &fixed, classes)?;
                let ds = predictor.predict(&shifted)?;
                let class = ds.top2(t_end).0;
                top2[p] = class;
                fixed.insert(p, class);
            }
        }
    }

    Ok(CandidateSet {
        top1_classes: top1,
        top2_classes: top2,
        segments,
        forks,
    })
}

/// Baseline: straight line across each masked segment between the nearest
/// known neighbors (margins supply out-of-window anchors).
pub fn linear_interp(window: &MaskedWindow) -> Vec<f64> {
    let mut out = window.load.clone();
    for (s, t_end) in window.segments() {
        let left = window.load_at(s as isize - 1);
        let right = window.load_at(t_end as isize + 1);
        let span = (t_end + 2 - s) as f64;
        for (i, o) in out.iter_mut().enumerate().take(t_end + 1).skip(s) {
            let frac = (i + 1 - s) as f64 / span;
            *o = left + frac * (right - left);
        }
    }
    out
}

/// Baseline: masked positions copy the value one day (96 points) earlier,
/// read through the margins with edge replication.
pub fn copy_prev_day(window: &MaskedWindow) -> Vec<f64> {
    window
        .load
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            if window.mask[t] == 0 {
                window.load_at(t as isize - crate::data::POINTS_PER_DAY as isize)
            } else {
                v
            }
        })
        .collect()
}

/// Per position, whichever candidate is closer to truth; top-1 wins ties.
/// Evaluation-only: requires ground truth.
pub fn combine_candidates(
    top1_vals: &[f64],
    top2_vals: &[f64],
    truth: &[f64],
) -> Result<Vec<f64>, SelectError> {
    if top1_vals.len() != top2_vals.len() {
        return Err(SelectError::LengthMismatch(top1_vals.len(), top2_vals.len()));
    }
    if top1_vals.len() != truth.len() {
        return Err(SelectError::LengthMismatch(top1_vals.len(), truth.len()));
    }
    Ok(top1_vals
        .iter()
        .zip(top2_vals)
        .zip(truth)
        .map(|((&a, &b), &x)| if (b - x).abs() < (a - x).abs() { b } else { a })
        .collect())
}

/// 100 × (masked positions where top-2 is strictly closer to truth) / K.
pub fn pocp(
    top1_vals: &[f64],
    top2_vals: &[f64],
    truth: &[f64],
    mask: &[u8],
) -> Result<f64, SelectError> {
    let n = truth.len();
    if top1_vals.len() != n || top2_vals.len() != n || mask.len() != n {
        return Err(SelectError::LengthMismatch(top1_vals.len(), n));
    }
    let mut k = 0usize;
    let mut closer = 0usize;
    for t in 0..n {
        if mask[t] == 0 {
            k += 1;
            if (top2_vals[t] - truth[t]).abs() < (top1_vals[t] - truth[t]).abs() {
                closer += 1;
            }
        }
    }
    if k == 0 {
        return Err(SelectError::NoMaskedPositions);
    }
    Ok(100.0 * closer as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Stub returning the same distribution matrix regardless of input.
    struct ConstPredictor {
        probs: Vec<f64>,
        n: usize,
        c: usize,
    }

    impl Predictor for ConstPredictor {
        fn predict(&self, tokens: &TokenSequence) -> Result<DistributionMatrix, SelectError> {
            let n = tokens.load_classes.len();
            assert_eq!(n, self.n);
            Ok(DistributionMatrix::new(self.probs.clone(), n, self.c).unwrap())
        }

        fn classes(&self) -> usize {
            self.c
        }
    }

    fn random_d(rng: &mut ChaCha8Rng, n: usize, c: usize) -> DistributionMatrix {
        let mut probs = vec![0.0; n * c];
        for row in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for j in 0..c {
                probs[row * c + j] = raw[j] / s;
            }
        }
        DistributionMatrix::new(probs, n, c).unwrap()
    }

    fn window_with_mask(n: usize, masked: &[usize], margin: usize, seed: u64) -> MaskedWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep loads clear of class 0 for small class counts
        let mut val = || rng.gen_range(0.3..0.9);
        let load: Vec<f64> = (0..n).map(|_| val()).collect();
        let temp: Vec<f64> = (0..n).map(|_| val()).collect();
        let mut mask = vec![1u8; n];
        for &i in masked {
            mask[i] = 0;
        }
        let masked_load = load
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m as f64)
            .collect();
        MaskedWindow {
            load,
            temp,
            mask,
            masked_load,
            left_margin_load: (0..margin).map(|_| val()).collect(),
            right_margin_load: (0..margin).map(|_| val()).collect(),
            left_margin_temp: (0..margin).map(|_| val()).collect(),
            right_margin_temp: (0..margin).map(|_| val()).collect(),
        }
    }

    #[test]
    fn direct_top2_examples() {
        let d = DistributionMatrix::new(vec![0.5, 0.3, 0.2, 0.2, 0.3, 0.5], 2, 3).unwrap();
        let cs = direct_top2(&d, &[0, 1]).unwrap();
        assert_eq!(cs.top1_classes, vec![0, 2]);
        assert_eq!(cs.top2_classes, vec![1, 2]); // unmasked keeps top-1

        // tie: both top slots break toward the lower class index
        let tie = DistributionMatrix::new(vec![0.4, 0.4, 0.2], 1, 3).unwrap();
        let cs = direct_top2(&tie, &[0]).unwrap();
        assert_eq!((cs.top1_classes[0], cs.top2_classes[0]), (0, 1));

        let one_class = DistributionMatrix::new(vec![1.0, 1.0], 2, 1).unwrap();
        assert!(matches!(
            direct_top2(&one_class, &[0, 0]),
            Err(SelectError::TooFewClasses(1))
        ));
    }

    #[test]
    fn fork_point_examples() {
        // rows engineered so the top1-top2 gap per position is exactly
        // [0.75, 0.25, 0.25, 0.75] across a 4-point segment
        let row = |g: f64| vec![(1.0 + g) / 2.0, (1.0 - g) / 2.0, 0.0];
        let probs: Vec<f64> = [0.75, 0.25, 0.25, 0.75].iter().flat_map(|&g| row(g)).collect();
        let d = DistributionMatrix::new(probs, 4, 3).unwrap();
        assert_eq!(find_fork_points(&d, (0, 3), 0.5), (Some(1), Some(2)));
        // all gaps at or above e: no forks (strict <)
        assert_eq!(find_fork_points(&d, (0, 3), 0.25), (None, None));
        // fork right at the segment edge
        let probs2: Vec<f64> = [0.125, 0.75, 0.75, 0.75].iter().flat_map(|&g| row(g)).collect();
        let d2 = DistributionMatrix::new(probs2, 4, 3).unwrap();
        assert_eq!(find_fork_points(&d2, (0, 3), 0.5), (Some(0), None));
    }

    #[test]
    fn fork_points_match_exhaustive_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.gen_range(4..20);
            let d = random_d(&mut rng, n, 5);
            let s = rng.gen_range(0..n / 2);
            let t_end = rng.gen_range(s + 1..n);
            let e = rng.gen_range(0.0..0.6);
            let l = (t_end - s) / 2;
            let mut oracle_left = None;
            for t in s..=s + l {
                if gap(&d, t) < e {
                    oracle_left = Some(t);
                    break;
                }
            }
            let mut oracle_right = None;
            for t in (t_end - l..=t_end).rev() {
                if gap(&d, t) < e {
                    oracle_right = Some(t);
                    break;
                }
            }
            assert_eq!(find_fork_points(&d, (s, t_end), e), (oracle_left, oracle_right));
        }
    }

    #[test]
    fn left_fork_is_monotone_in_e() {
        // shrinking e can only push the fork deeper into the segment
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let d = random_d(&mut rng, 16, 6);
            let (big, _) = find_fork_points(&d, (0, 15), 0.5);
            let (small, _) = find_fork_points(&d, (0, 15), 0.02);
            if let (Some(b), Some(s)) = (big, small) {
                assert!(s >= b);
            }
            if big.is_none() {
                assert!(small.is_none());
            }
        }
    }

    #[test]
    fn iterative_with_e_zero_is_top1() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for trial in 0..50 {
            let window = window_with_mask(12, &[4, 5, 6, 7], 4, trial);
            // random matrix: strictly positive gaps almost surely
            let d = random_d(&mut rng, 12, 6);
            let pred = ConstPredictor {
                probs: (0..12).flat_map(|t| d.row(t).to_vec()).collect(),
                n: 12,
                c: 6,
            };
            let sel = SelectionConfig {
                e: 0.0,
                method: SelectionMethod::IterativeTop2,
            };
            let cs = iterative_top2(&window, &pred, &sel).unwrap();
            assert_eq!(cs.top2_classes, cs.top1_classes);
            assert_eq!(cs.forks, vec![(None, None)]);
        }
    }

    #[test]
    fn iterative_with_constant_stub_refills_edge_top1() {
        // constant D: fork at the segment start on both sides (uniform-ish
        // gap below e), every refilled point takes the constant top-1 at the
        // mask edge coordinate
        let n = 12;
        let c = 5;
        // gap 0.1 at every position; top1 = 2, top2 = 4
        let mut row = vec![0.1; c];
        row[2] = 0.4;
        row[4] = 0.3;
        let probs: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
        let pred = ConstPredictor { probs, n, c };
        let window = window_with_mask(n, &[4, 5, 6, 7], 4, 3);
        let sel = SelectionConfig {
            e: 0.2,
            method: SelectionMethod::IterativeTop2,
        };
        let cs = iterative_top2(&window, &pred, &sel).unwrap();
        assert_eq!(cs.forks, vec![(Some(4), Some(7))]);
        assert_eq!(cs.top1_classes, vec![2; n]);
        // forks carry top-2 (class 4); refilled interior points take the
        // constant matrix's top-1 at the edge coordinate (class 2)
        assert_eq!(cs.top2_classes[4], 4);
        assert_eq!(cs.top2_classes[7], 4);
        assert_eq!(cs.top2_classes[5], 2);
        assert_eq!(cs.top2_classes[6], 2);
        // outside the segment: untouched top-1
        assert_eq!(&cs.top2_classes[..4], &[2, 2, 2, 2]);
    }

    #[test]
    fn iterative_rejects_insufficient_margin() {
        let n = 20;
        let c = 4;
        let probs: Vec<f64> = (0..n).flat_map(|_| vec![0.4, 0.3, 0.2, 0.1]).collect();
        let pred = ConstPredictor { probs, n, c };
        // 10-point segment → l = 4, margins of 2 are too small
        let window = window_with_mask(n, &(5..15).collect::<Vec<_>>(), 2, 9);
        let err = iterative_top2(&window, &pred, &SelectionConfig::default()).unwrap_err();
        match err {
            SelectError::InsufficientMargin { required, .. } => assert_eq!(required, 4),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn candidates_differ_only_inside_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for trial in 0..30 {
            let d = random_d(&mut rng, 16, 6);
            let pred = ConstPredictor {
                probs: (0..16).flat_map(|t| d.row(t).to_vec()).collect(),
                n: 16,
                c: 6,
            };
            let window = window_with_mask(16, &[6, 7, 8, 9], 6, 100 + trial);
            let sel = SelectionConfig {
                e: rng.gen_range(0.0..0.8),
                method: SelectionMethod::IterativeTop2,
            };
            let cs = iterative_top2(&window, &pred, &sel).unwrap();
            for t in 0..16 {
                if window.mask[t] == 1 {
                    assert_eq!(cs.top1_classes[t], cs.top2_classes[t], "position {t}");
                }
            }
            if let Some((Some(fl), Some(fr))) = cs.forks.first() {
                assert!(fl <= fr);
            }
        }
    }

    #[test]
    fn linear_interp_is_exact_on_a_line() {
        let n = 12;
        let mut window = window_with_mask(n, &[4, 5, 6, 7], 2, 51);
        window.load = (0..n).map(|i| 0.1 + 0.05 * i as f64).collect();
        window.masked_load = window
            .load
            .iter()
            .zip(&window.mask)
            .map(|(&v, &m)| v * m as f64)
            .collect();
        let restored = linear_interp(&window);
        for t in 0..n {
            assert!((restored[t] - window.load[t]).abs() < 1e-12, "position {t}");
        }
    }

    #[test]
    fn copy_prev_day_reads_margins() {
        let n = 96;
        let masked: Vec<usize> = (40..56).collect();
        let window = window_with_mask(n, &masked, 96, 77);
        let restored = copy_prev_day(&window);
        for t in 0..n {
            if window.mask[t] == 1 {
                assert_eq!(restored[t], window.load[t]);
            } else {
                // one day back from a daily window lands in the left margin
                assert_eq!(restored[t], window.left_margin_load[t]);
            }
        }
    }

    #[test]
    fn combine_examples() {
        // second candidate equal to truth: combined is truth
        let truth = vec![1.0, 2.0, 3.0];
        let c = combine_candidates(&[1.5, 2.5, 3.5], &truth, &truth).unwrap();
        assert_eq!(c, truth);
        // identical candidates: identity
        let t1 = vec![4.0, 5.0];
        assert_eq!(combine_candidates(&t1, &t1, &[0.0, 9.0]).unwrap(), t1);
        // pointwise distance comparison, top-1 wins ties
        let c = combine_candidates(&[9.0, 12.0], &[11.5, 10.5], &[10.0, 10.0]).unwrap();
        assert_eq!(c, vec![9.0, 10.5]);
        assert!(combine_candidates(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn pocp_examples() {
        let truth = vec![1.0, 2.0, 3.0, 4.0];
        let top1 = vec![1.1, 2.1, 3.1, 4.1];
        let mask = vec![1, 0, 0, 0];
        assert_eq!(pocp(&top1, &top1, &truth, &mask).unwrap(), 0.0);
        assert_eq!(pocp(&top1, &truth, &truth, &mask).unwrap(), 100.0);
        // closer at one of three masked positions
        let top2 = vec![1.1, 2.0, 3.5, 4.5];
        let p = pocp(&top1, &top2, &truth, &mask).unwrap();
        assert!((p - 100.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            pocp(&top1, &top2, &truth, &[1, 1, 1, 1]),
            Err(SelectError::NoMaskedPositions)
        ));
    }
}
