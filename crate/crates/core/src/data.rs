//! Load/temperature data preparation: CSV ingestion, synthetic fleet
//! generation, aggregation and normalization, windowing, masking, and
//! quantization to integer classes.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds between samples; everything runs at 15-minute resolution.
pub const STEP_SECONDS: i64 = 900;
/// Samples per day.
pub const POINTS_PER_DAY: usize = 96;
/// Number of quantization classes; class 0 doubles as the mask token.
pub const NUM_CLASSES: usize = 200;
/// Default missing-data-segment length: 4 hours of 15-minute points.
pub const DEFAULT_SEGMENT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("timebase mismatch: series starts {0} vs {1} or lengths differ")]
    TimebaseMismatch(i64, i64),
    #[error("empty user pool")]
    EmptyPool,
    #[error("draw of {k} users exceeds pool of {pool}")]
    DrawTooLarge { k: usize, pool: usize },
    #[error("profile of {len} points is shorter than one window of {window} (+ margins {margin})")]
    ProfileTooShort {
        len: usize,
        window: usize,
        margin: usize,
    },
    #[error("invalid generator parameters: {0}")]
    BadGeneratorParams(String),
    #[error("infeasible mask spec: {0}")]
    InfeasibleMask(String),
    #[error("value {0} outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("unmasked value quantized to class 0 at position {0}; load floor violated")]
    MaskTokenCollision(usize),
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("sidecar error: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

/// A raw series at fixed 15-minute spacing, stored as a start instant
/// (unix seconds) plus values. kW for load, °C for temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub start_epoch: i64,
    pub values: Vec<f64>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_timebase(&self, other: &RawSeries) -> bool {
        self.start_epoch == other.start_epoch && self.values.len() == other.values.len()
    }
}

/// Normalized, time-aligned load and temperature with the constants needed
/// to map back to physical units.
#[derive(Debug, Clone)]
pub struct AlignedProfile {
    pub load_norm: Vec<f64>,
    pub temp_norm: Vec<f64>,
    pub p_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub start_epoch: i64,
}

/// Sums `k` randomly drawn user series (without replacement) and normalizes
/// by the horizon-wide peak. Temperature is normalized by its extremes.
pub fn aggregate_fleet(
    users: &[RawSeries],
    temperature: &RawSeries,
    k: usize,
    seed: u64,
) -> Result<AlignedProfile, DataError> {
    if users.is_empty() {
        return Err(DataError::EmptyPool);
    }
    if k > users.len() {
        return Err(DataError::DrawTooLarge {
            k,
            pool: users.len(),
        });
    }
    let first = &users[0];
    for u in users {
        if !u.same_timebase(first) {
            return Err(DataError::TimebaseMismatch(u.start_epoch, first.start_epoch));
        }
    }
    if !temperature.same_timebase(first) {
        return Err(DataError::TimebaseMismatch(
            temperature.start_epoch,
            first.start_epoch,
        ));
    }

    let mut idx: Vec<usize> = (0..users.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(k);

    let n = first.len();
    let mut agg = vec![0.0; n];
    for &i in &idx {
        for (a, v) in agg.iter_mut().zip(&users[i].values) {
            *a += v;
        }
    }
    let p_max = agg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if p_max.is_nan() || p_max <= 0.0 {
        return Err(DataError::Invalid("aggregate peak is not positive".into()));
    }
    let load_norm: Vec<f64> = agg.iter().map(|v| v / p_max).collect();

    let t_min = temperature.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let t_max = temperature
        .values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if t_max > t_min { t_max - t_min } else { 1.0 };
    let temp_norm: Vec<f64> = temperature.values.iter().map(|v| (v - t_min) / span).collect();

    Ok(AlignedProfile {
        load_norm,
        temp_norm,
        p_max,
        t_min,
        t_max,
        start_epoch: first.start_epoch,
    })
}

/// Knobs of the synthetic fleet generator. Defaults are calibrated so that a
/// 2000-user aggregate stays within the 210..1751 kW band with daily
/// peak-to-trough ratios between 1.5 and 4.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorParams {
    pub base_kw_min: f64,
    pub base_kw_max: f64,
    pub diurnal_kw_min: f64,
    pub diurnal_kw_max: f64,
    pub cooling_kw_per_deg: f64,
    pub heating_kw_per_deg: f64,
    pub cooling_threshold_c: f64,
    pub heating_threshold_c: f64,
    pub weekend_factor_max: f64,
    pub noise_kw: f64,
    pub load_floor_kw: f64,
    pub temp_mean_c: f64,
    pub temp_seasonal_amp_c: f64,
    pub temp_diurnal_amp_c: f64,
    pub temp_noise_c: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            base_kw_min: 0.10,
            base_kw_max: 0.26,
            diurnal_kw_min: 0.15,
            diurnal_kw_max: 0.45,
            cooling_kw_per_deg: 0.022,
            heating_kw_per_deg: 0.012,
            cooling_threshold_c: 22.0,
            heating_threshold_c: 16.0,
            weekend_factor_max: 1.15,
            noise_kw: 0.05,
            load_floor_kw: 0.06,
            temp_mean_c: 14.0,
            temp_seasonal_amp_c: 10.0,
            temp_diurnal_amp_c: 4.0,
            temp_noise_c: 1.2,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.base_kw_min <= 0.0 || self.base_kw_max < self.base_kw_min {
            return Err(DataError::BadGeneratorParams(
                "base_kw range must be positive and ordered".into(),
            ));
        }
        if self.diurnal_kw_min < 0.0 || self.diurnal_kw_max < self.diurnal_kw_min {
            return Err(DataError::BadGeneratorParams(
                "diurnal_kw range must be non-negative and ordered".into(),
            ));
        }
        if self.cooling_kw_per_deg < 0.0 || self.heating_kw_per_deg < 0.0 {
            return Err(DataError::BadGeneratorParams(
                "thermal coefficients must be non-negative".into(),
            ));
        }
        if self.load_floor_kw <= 0.0 || self.load_floor_kw >= self.base_kw_min {
            return Err(DataError::BadGeneratorParams(
                "load_floor_kw must be positive and below base_kw_min".into(),
            ));
        }
        if self.noise_kw < 0.0 || self.noise_kw > self.base_kw_min {
            return Err(DataError::BadGeneratorParams(
                "noise_kw must be in [0, base_kw_min]; larger values can drive loads negative"
                    .into(),
            ));
        }
        if self.weekend_factor_max < 1.0 {
            return Err(DataError::BadGeneratorParams(
                "weekend_factor_max must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

// Two-bump diurnal shape, peaking in the evening; in [0, 1].
fn diurnal_shape(hour: f64) -> f64 {
    let morning = 0.55 * (-((hour - 7.5) * (hour - 7.5)) / (2.0 * 1.8 * 1.8)).exp();
    let evening = (-((hour - 19.0) * (hour - 19.0)) / (2.0 * 2.5 * 2.5)).exp();
    morning + evening
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream layout simple
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Synthetic temperature plus per-user load series, deterministic under the
/// seed. Stands in for the proprietary smart-meter pool.
pub fn generate_synthetic_fleet(
    n_users: usize,
    n_days: usize,
    params: &GeneratorParams,
    seed: u64,
) -> Result<(Vec<RawSeries>, RawSeries), DataError> {
    if n_users == 0 || n_days == 0 {
        return Err(DataError::BadGeneratorParams(
            "n_users and n_days must be >= 1".into(),
        ));
    }
    params.validate()?;
    let n = n_days * POINTS_PER_DAY;
    let start_epoch = 1_546_300_800; // 2019-01-01T00:00:00Z, a Tuesday

    // shared temperature: seasonal + diurnal sinusoids + AR(1) noise
    let mut trng = ChaCha8Rng::seed_from_u64(seed);
    let mut temp = Vec::with_capacity(n);
    let phi_t: f64 = 0.97;
    let mut ar_t = 0.0;
    for t in 0..n {
        let day = (t / POINTS_PER_DAY) as f64;
        let hour = (t % POINTS_PER_DAY) as f64 / 4.0;
        let seasonal = params.temp_seasonal_amp_c
            * (2.0 * std::f64::consts::PI * (day - 200.0) / 365.25).cos();
        let diurnal = params.temp_diurnal_amp_c
            * (2.0 * std::f64::consts::PI * (hour - 15.5) / 24.0).cos();
        ar_t = phi_t * ar_t + (1.0 - phi_t * phi_t).sqrt() * params.temp_noise_c * gauss(&mut trng);
        temp.push(params.temp_mean_c + seasonal + diurnal + ar_t);
    }
    let temperature = RawSeries {
        start_epoch,
        values: temp,
    };

    let mut users = Vec::with_capacity(n_users);
    for u in 0..n_users {
        let user_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u as u64 + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
        let base = rng.gen_range(params.base_kw_min..=params.base_kw_max);
        let amp = rng.gen_range(params.diurnal_kw_min..=params.diurnal_kw_max);
        let cool = params.cooling_kw_per_deg * rng.gen_range(0.5..1.5);
        let heat = params.heating_kw_per_deg * rng.gen_range(0.5..1.5);
        let weekend = if params.weekend_factor_max > 1.0 {
            rng.gen_range(1.0..=params.weekend_factor_max)
        } else {
            1.0
        };
        let phi: f64 = 0.9;
        let mut ar = 0.0;
        let mut values = Vec::with_capacity(n);
        for t in 0..n {
            let day = t / POINTS_PER_DAY;
            let hour = (t % POINTS_PER_DAY) as f64 / 4.0;
            // start epoch is a Tuesday: weekday index 1
            let dow = (day + 1) % 7;
            let wf = if dow >= 5 { weekend } else { 1.0 };
            let tc = temperature.values[t];
            let thermal = cool * (tc - params.cooling_threshold_c).max(0.0)
                + heat * (params.heating_threshold_c - tc).max(0.0);
            ar = phi * ar + (1.0 - phi * phi).sqrt() * params.noise_kw * gauss(&mut rng);
            let v = (base + amp * diurnal_shape(hour) + thermal) * wf + ar;
            values.push(v.max(params.load_floor_kw));
        }
        users.push(RawSeries {
            start_epoch,
            values,
        });
    }
    Ok((users, temperature))
}

/// An unmasked window plus the margin context retained for shifted
/// re-inference; produced by `window_profiles`, consumed by `apply_mask`.
#[derive(Debug, Clone)]
pub struct WindowSlice {
    pub load: Vec<f64>,
    pub temp: Vec<f64>,
    pub left_margin_load: Vec<f64>,
    pub right_margin_load: Vec<f64>,
    pub left_margin_temp: Vec<f64>,
    pub right_margin_temp: Vec<f64>,
    pub start_index: usize,
}

/// Fixed-length masked window: the model's input unit.
#[derive(Debug, Clone)]
pub struct MaskedWindow {
    pub load: Vec<f64>,
    pub temp: Vec<f64>,
    /// 0 = missing, 1 = present
    pub mask: Vec<u8>,
    /// load ⊙ mask
    pub masked_load: Vec<f64>,
    pub left_margin_load: Vec<f64>,
    pub right_margin_load: Vec<f64>,
    pub left_margin_temp: Vec<f64>,
    pub right_margin_temp: Vec<f64>,
}

impl MaskedWindow {
    pub fn window_len(&self) -> usize {
        self.load.len()
    }

    /// Contiguous masked segments as (start, end) inclusive index pairs.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        let mut segs = Vec::new();
        let mut start = None;
        for (i, &m) in self.mask.iter().enumerate() {
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
            segs.push((s, self.mask.len() - 1));
        }
        segs
    }

    /// Load value at an extended position: negatives read the left margin,
    /// positions past the window read the right margin. Edge replication
    /// when the margins run out.
    pub fn load_at(&self, pos: isize) -> f64 {
        extended_at(&self.load, &self.left_margin_load, &self.right_margin_load, pos)
    }

    pub fn temp_at(&self, pos: isize) -> f64 {
        extended_at(&self.temp, &self.left_margin_temp, &self.right_margin_temp, pos)
    }
}

fn extended_at(body: &[f64], left: &[f64], right: &[f64], pos: isize) -> f64 {
    let n = body.len() as isize;
    if pos < 0 {
        let k = (-pos) as usize; // k steps left of the window
        if k <= left.len() {
            left[left.len() - k]
        } else if left.is_empty() {
            body[0]
        } else {
            left[0]
        }
    } else if pos >= n {
        let k = (pos - n) as usize;
        if k < right.len() {
            right[k]
        } else if right.is_empty() {
            body[body.len() - 1]
        } else {
            right[right.len() - 1]
        }
    } else {
        body[pos as usize]
    }
}

/// Tiles the profile into non-overlapping day-aligned windows, each keeping
/// `margin` context points on both sides; windows lacking a full margin are
/// dropped.
pub fn window_profiles(
    profile: &AlignedProfile,
    window_len: usize,
    margin: usize,
) -> Result<Vec<WindowSlice>, DataError> {
    let n = profile.load_norm.len();
    if n < window_len + 2 * margin {
        return Err(DataError::ProfileTooShort {
            len: n,
            window: window_len,
            margin,
        });
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + window_len <= n {
        if s >= margin && s + window_len + margin <= n {
            out.push(WindowSlice {
                load: profile.load_norm[s..s + window_len].to_vec(),
                temp: profile.temp_norm[s..s + window_len].to_vec(),
                left_margin_load: profile.load_norm[s - margin..s].to_vec(),
                right_margin_load: profile.load_norm[s + window_len..s + window_len + margin]
                    .to_vec(),
                left_margin_temp: profile.temp_norm[s - margin..s].to_vec(),
                right_margin_temp: profile.temp_norm[s + window_len..s + window_len + margin]
                    .to_vec(),
                start_index: s,
            });
        }
        s += window_len;
    }
    Ok(out)
}

/// Where and how to place missing-data segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MaskStrategy {
    Central,
    Peak,
    MultiPeak,
    Explicit(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    pub segment_len: usize,
    /// number of MDSs (days carrying a mask for multi-peak)
    pub count: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strategy: MaskStrategy::Central,
            segment_len: DEFAULT_SEGMENT_LEN,
            count: 1,
            seed: 0,
        }
    }
}

/// Max-sum contiguous `len`-point interval of `xs`; earliest start wins ties.
pub fn peak_interval(xs: &[f64], len: usize) -> usize {
    let mut sum: f64 = xs[..len].iter().sum();
    let mut best = sum;
    let mut best_start = 0;
    for s in 1..=xs.len() - len {
        sum += xs[s + len - 1] - xs[s - 1];
        if sum > best {
            best = sum;
            best_start = s;
        }
    }
    best_start
}

/// Applies the mask strategy to a window slice (Eq. 4-5 style: masked
/// positions are zeroed in the load channel).
pub fn apply_mask(window: &WindowSlice, spec: &MaskSpec) -> Result<MaskedWindow, DataError> {
    let n = window.load.len();
    let len = spec.segment_len;
    if len == 0 || len > n {
        return Err(DataError::InfeasibleMask(format!(
            "segment_len {len} does not fit window of {n}"
        )));
    }
    let mut segments: Vec<(usize, usize)> = Vec::new();
    match &spec.strategy {
        MaskStrategy::Central => {
            if spec.count != 1 {
                return Err(DataError::InfeasibleMask(
                    "central masking places exactly one segment".into(),
                ));
            }
            let s = (n - len) / 2;
            segments.push((s, s + len - 1));
        }
        MaskStrategy::Peak => {
            if spec.count != 1 {
                return Err(DataError::InfeasibleMask(
                    "peak masking places one segment; use multi_peak for several".into(),
                ));
            }
            let s = peak_interval(&window.load, len);
            segments.push((s, s + len - 1));
        }
        MaskStrategy::MultiPeak => {
            let days = n / POINTS_PER_DAY;
            if days == 0 || len > POINTS_PER_DAY {
                return Err(DataError::InfeasibleMask(
                    "multi_peak needs day-sized windows and segments within a day".into(),
                ));
            }
            if spec.count == 0 || spec.count > days {
                return Err(DataError::InfeasibleMask(format!(
                    "count {} must be in 1..={days}",
                    spec.count
                )));
            }
            let mut day_idx: Vec<usize> = (0..days).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            day_idx.shuffle(&mut rng);
            day_idx.truncate(spec.count);
            day_idx.sort_unstable();
            for d in day_idx {
                let day = &window.load[d * POINTS_PER_DAY..(d + 1) * POINTS_PER_DAY];
                let s = d * POINTS_PER_DAY + peak_interval(day, len);
                segments.push((s, s + len - 1));
            }
        }
        MaskStrategy::Explicit(intervals) => {
            if intervals.is_empty() {
                return Err(DataError::InfeasibleMask("no explicit intervals".into()));
            }
            let mut sorted = intervals.clone();
            sorted.sort_unstable();
            let mut prev_end: Option<usize> = None;
            for &(s, l) in &sorted {
                if l == 0 || s + l > n {
                    return Err(DataError::InfeasibleMask(format!(
                        "interval ({s}, {l}) outside window of {n}"
                    )));
                }
                if let Some(pe) = prev_end {
                    if s <= pe {
                        return Err(DataError::InfeasibleMask("intervals overlap".into()));
                    }
                }
                prev_end = Some(s + l - 1);
                segments.push((s, s + l - 1));
            }
        }
    }

    let mut mask = vec![1u8; n];
    for &(s, e) in &segments {
        for m in &mut mask[s..=e] {
            *m = 0;
        }
    }
    let masked_load: Vec<f64> = window
        .load
        .iter()
        .zip(&mask)
        .map(|(v, &m)| v * m as f64)
        .collect();

    Ok(MaskedWindow {
        load: window.load.clone(),
        temp: window.temp.clone(),
        mask,
        masked_load,
        left_margin_load: window.left_margin_load.clone(),
        right_margin_load: window.right_margin_load.clone(),
        left_margin_temp: window.left_margin_temp.clone(),
        right_margin_temp: window.right_margin_temp.clone(),
    })
}

/// class = min(⌊v·C⌋, C−1)
pub fn quantize(v: f64, classes: usize) -> Result<usize, DataError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(DataError::ValueOutOfRange(v));
    }
    Ok(((v * classes as f64) as usize).min(classes - 1))
}

/// Bin midpoint: v = (class + 0.5)/C.
pub fn dequantize(class: usize, classes: usize) -> Result<f64, DataError> {
    if class >= classes {
        return Err(DataError::ClassOutOfRange { class, classes });
    }
    Ok((class as f64 + 0.5) / classes as f64)
}

/// Integer token channels fed to the model.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub load_classes: Vec<usize>,
    pub temp_classes: Vec<usize>,
}

impl TokenSequence {
    /// Quantizes a masked window. Masked positions carry class 0; an
    /// unmasked load landing in class 0 is a floor violation and rejected.
    pub fn from_window(window: &MaskedWindow, classes: usize) -> Result<Self, DataError> {
        let mut load_classes = Vec::with_capacity(window.window_len());
        for (i, (&v, &m)) in window.masked_load.iter().zip(&window.mask).enumerate() {
            let c = quantize(v, classes)?;
            if m == 1 && c == 0 {
                return Err(DataError::MaskTokenCollision(i));
            }
            load_classes.push(c);
        }
        let temp_classes = window
            .temp
            .iter()
            .map(|&v| quantize(v, classes))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            load_classes,
            temp_classes,
        })
    }
}

/// Seeded shuffle then split; `ratio` is the training fraction.
pub fn split_dataset<T: Clone>(windows: &[T], ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = (windows.len() as f64 * ratio).floor() as usize;
    let train = idx[..n_train].iter().map(|&i| windows[i].clone()).collect();
    let test = idx[n_train..].iter().map(|&i| windows[i].clone()).collect();
    (train, test)
}

/// JSON sidecar written next to a prepared dataset CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub p_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub window_len: usize,
    pub margin: usize,
    pub seed: u64,
    pub generator: Option<GeneratorParams>,
    pub config_digest: Option<String>,
}

fn fmt_f64(v: f64) -> String {
    // shortest round-trip representation keeps files byte-reproducible
    format!("{v}")
}

/// Writes the prepared dataset CSV (`window_id,pos,load_norm,temp_norm,mask`)
/// plus its JSON sidecar. Margin rows use positions outside [0, window_len).
pub fn write_dataset(
    path: &std::path::Path,
    windows: &[MaskedWindow],
    sidecar: &DatasetSidecar,
) -> Result<(), DataError> {
    use std::io::Write;
    let mut out = String::from("window_id,pos,load_norm,temp_norm,mask\n");
    for (wid, w) in windows.iter().enumerate() {
        let n = w.window_len() as isize;
        let margin = w.left_margin_load.len() as isize;
        for pos in -margin..n + w.right_margin_load.len() as isize {
            let (load, temp, mask) = if pos < 0 || pos >= n {
                (w.load_at(pos), w.temp_at(pos), 1u8)
            } else {
                let i = pos as usize;
                (w.load[i], w.temp[i], w.mask[i])
            };
            out.push_str(&format!(
                "{wid},{pos},{},{},{mask}\n",
                fmt_f64(load),
                fmt_f64(temp)
            ));
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    let sidecar_path = path.with_extension("json");
    let mut sf = std::fs::File::create(sidecar_path)?;
    sf.write_all(serde_json::to_string_pretty(sidecar)?.as_bytes())?;
    Ok(())
}

pub fn read_dataset(
    path: &std::path::Path,
) -> Result<(Vec<MaskedWindow>, DatasetSidecar), DataError> {
    let sidecar: DatasetSidecar =
        serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(usize, isize, f64, f64, u8)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::Csv {
                line: lineno + 1,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, DataError> {
            s.parse().map_err(|e| DataError::Csv {
                line: lineno + 1,
                msg: format!("{e}"),
            })
        };
        rows.push((
            parse(fields[0])? as usize,
            parse(fields[1])? as isize,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])? as u8,
        ));
    }
    let n_windows = rows.iter().map(|r| r.0).max().map_or(0, |m| m + 1);
    let mut windows = Vec::with_capacity(n_windows);
    for wid in 0..n_windows {
        let mut wrows: Vec<_> = rows.iter().filter(|r| r.0 == wid).collect();
        wrows.sort_by_key(|r| r.1);
        let mut w = MaskedWindow {
            load: Vec::new(),
            temp: Vec::new(),
            mask: Vec::new(),
            masked_load: Vec::new(),
            left_margin_load: Vec::new(),
            right_margin_load: Vec::new(),
            left_margin_temp: Vec::new(),
            right_margin_temp: Vec::new(),
        };
        for r in wrows {
            if r.1 < 0 {
                w.left_margin_load.push(r.2);
                w.left_margin_temp.push(r.3);
            } else if (r.1 as usize) < sidecar.window_len {
                w.load.push(r.2);
                w.temp.push(r.3);
                w.mask.push(r.4);
            } else {
                w.right_margin_load.push(r.2);
                w.right_margin_temp.push(r.3);
            }
        }
        w.masked_load = w
            .load
            .iter()
            .zip(&w.mask)
            .map(|(v, &m)| v * m as f64)
            .collect();
        if w.load.len() != sidecar.window_len {
            return Err(DataError::Invalid(format!(
                "window {wid} has {} points, sidecar says {}",
                w.load.len(),
                sidecar.window_len
            )));
        }
        windows.push(w);
    }
    Ok((windows, sidecar))
}

/// Parses `timestamp,load_kw` (or `timestamp,temp_c`) CSVs with ISO-8601 UTC
/// timestamps into a RawSeries, enforcing strict 15-minute spacing.
/// When `interpolate_gaps` is set (temperature), missing rows are filled by
/// linear interpolation; otherwise a gap is an error.
pub fn parse_series_csv(text: &str, interpolate_gaps: bool) -> Result<RawSeries, DataError> {
    let mut points: Vec<(i64, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(DataError::Csv {
                line: lineno + 1,
                msg: "expected timestamp,value".into(),
            });
        }
        let ts = parse_iso8601_utc(fields[0]).ok_or_else(|| DataError::Csv {
            line: lineno + 1,
            msg: format!("bad timestamp {}", fields[0]),
        })?;
        let v: f64 = fields[1].parse().map_err(|e| DataError::Csv {
            line: lineno + 1,
            msg: format!("{e}"),
        })?;
        points.push((ts, v));
    }
    if points.is_empty() {
        return Err(DataError::Invalid("empty series".into()));
    }
    points.sort_by_key(|p| p.0);
    let start = points[0].0;
    let end = points[points.len() - 1].0;
    let n = ((end - start) / STEP_SECONDS + 1) as usize;
    let mut values = vec![f64::NAN; n];
    for (ts, v) in &points {
        if (ts - start) % STEP_SECONDS != 0 {
            return Err(DataError::Invalid(format!(
                "timestamp {ts} is off the 15-minute grid"
            )));
        }
        values[((ts - start) / STEP_SECONDS) as usize] = *v;
    }
    let gaps = values.iter().any(|v| v.is_nan());
    if gaps {
        if !interpolate_gaps {
            return Err(DataError::Invalid(
                "load series has gaps; only temperature gaps are interpolated".into(),
            ));
        }
        interpolate_nans(&mut values);
    }
    Ok(RawSeries {
        start_epoch: start,
        values,
    })
}

fn interpolate_nans(values: &mut [f64]) {
    let n = values.len();
    let mut i = 0;
    while i < n {
        if values[i].is_nan() {
            let lo = i.checked_sub(1);
            let mut j = i;
            while j < n && values[j].is_nan() {
                j += 1;
            }
            let hi = if j < n { Some(j) } else { None };
            match (lo, hi) {
                (Some(l), Some(h)) => {
                    let span = (h - l) as f64;
                    for k in i..j {
                        let t = (k - l) as f64 / span;
                        values[k] = values[l] * (1.0 - t) + values[h] * t;
                    }
                }
                (Some(l), None) => {
                    for k in i..j {
                        values[k] = values[l];
                    }
                }
                (None, Some(h)) => {
                    for k in i..j {
                        values[k] = values[h];
                    }
                }
                (None, None) => {}
            }
            i = j;
        } else {
            i += 1;
        }
    }
}

/// Minimal ISO-8601 UTC parser: `YYYY-MM-DDTHH:MM:SS` with optional `Z`.
pub fn parse_iso8601_utc(s: &str) -> Option<i64> {
    let s = s.trim().trim_end_matches('Z');
    let (date, time) = s.split_once('T').or_else(|| s.split_once(' '))?;
    let mut dp = date.split('-');
    let year: i64 = dp.next()?.parse().ok()?;
    let month: i64 = dp.next()?.parse().ok()?;
    let day: i64 = dp.next()?.parse().ok()?;
    let mut tp = time.split(':');
    let hour: i64 = tp.next()?.parse().ok()?;
    let min: i64 = tp.next()?.parse().ok()?;
    let sec: i64 = tp.next().map_or(Some(0), |v| v.parse().ok())?;
    if !(1..=12).contains(&month) || !(1..=31).contains(&day) {
        return None;
    }
    // days since 1970-01-01 (civil-to-days, Howard Hinnant's algorithm)
    let y = if month <= 2 { year - 1 } else { year };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = (month + 9) % 12;
    let doy = (153 * mp + 2) / 5 + day - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    let days = era * 146_097 + doe - 719_468;
    Some(days * 86_400 + hour * 3_600 + min * 60 + sec)
}
