//! Raw spectrum preprocessing: variance stabilization, smoothing, baseline
//! removal, noise thresholding, trimming, binning and max normalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Peak list as acquired: strictly increasing m/z with non-negative counts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSpectrum {
    pub(crate) mz: Vec<f64>,
    pub(crate) intensity: Vec<f64>,
}

impl RawSpectrum {
    pub fn new(mz: Vec<f64>, intensity: Vec<f64>) -> Result<Self> {
        if mz.len() != intensity.len() {
            return Err(invalid!(
                "{} m/z values but {} intensities",
                mz.len(),
                intensity.len()
            ));
        }
        if let Some(i) = mz.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(invalid!("m/z not strictly increasing at index {}", i + 1));
        }
        if let Some(i) = intensity.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid!("intensity {} at index {i} is negative or not finite", intensity[i]));
        }
        if mz.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("non-finite m/z value"));
        }
        Ok(RawSpectrum { mz, intensity })
    }

    pub fn mz(&self) -> &[f64] {
        &self.mz
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn len(&self) -> usize {
        self.mz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mz.is_empty()
    }

    fn with_intensity(&self, intensity: Vec<f64>) -> RawSpectrum {
        RawSpectrum {
            mz: self.mz.clone(),
            intensity,
        }
    }

    /// Parses whitespace-separated `mz intensity` lines; `#` lines and blank
    /// lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut mz = Vec::new();
        let mut intensity = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let mut it = line.split_whitespace();
            let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                return Err(parse_err(format!("expected two columns, got `{line}`")));
            };
            let m: f64 = a.parse().map_err(|_| parse_err(format!("bad m/z `{a}`")))?;
            let v: f64 = b.parse().map_err(|_| parse_err(format!("bad intensity `{b}`")))?;
            if let Some(prev) = mz.last() {
                if m <= *prev {
                    return Err(parse_err(format!("m/z {m} not above previous {prev}")));
                }
            }
            if !(v >= 0.0) {
                return Err(parse_err(format!("negative intensity {v}")));
            }
            mz.push(m);
            intensity.push(v);
        }
        RawSpectrum::new(mz, intensity).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

fn default_half_window() -> usize {
    10
}
fn default_polyorder() -> usize {
    3
}
fn default_snip() -> usize {
    20
}
fn default_noise_k() -> f64 {
    2.0
}
fn default_mz_min() -> f64 {
    2000.0
}
fn default_mz_max() -> f64 {
    20000.0
}
fn default_bin_width() -> f64 {
    3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    #[serde(default = "default_half_window")]
    pub half_window: usize,
    #[serde(default = "default_polyorder")]
    pub sg_polyorder: usize,
    #[serde(default = "default_snip")]
    pub snip_iterations: usize,
    #[serde(default = "default_noise_k")]
    pub noise_k: f64,
    #[serde(default = "default_mz_min")]
    pub mz_min: f64,
    #[serde(default = "default_mz_max")]
    pub mz_max: f64,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            half_window: default_half_window(),
            sg_polyorder: default_polyorder(),
            snip_iterations: default_snip(),
            noise_k: default_noise_k(),
            mz_min: default_mz_min(),
            mz_max: default_mz_max(),
            bin_width: default_bin_width(),
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.half_window < self.sg_polyorder / 2 + 1 {
            return Err(invalid!(
                "half_window {} too small for polyorder {}",
                self.half_window,
                self.sg_polyorder
            ));
        }
        if self.snip_iterations == 0 {
            return Err(invalid!("snip_iterations must be at least 1"));
        }
        if !(self.bin_width > 0.0) {
            return Err(invalid!("bin_width must be positive"));
        }
        if !(self.mz_min < self.mz_max) {
            return Err(invalid!("mz_min must be below mz_max"));
        }
        if !(self.noise_k >= 0.0) {
            return Err(invalid!("noise_k must be non-negative"));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        num_bins(self.mz_min, self.mz_max, self.bin_width)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PreprocessConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fixed-length binned spectrum with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedSpectrum {
    pub bins: Vec<f64>,
    pub mz_min: f64,
    pub mz_max: f64,
    pub bin_width: f64,
    /// Set when the spectrum had no signal and could not be normalized.
    pub all_zero: bool,
}

/// `floor((mz_max - mz_min) / bin_width)`, tolerant to representation error.
pub fn num_bins(mz_min: f64, mz_max: f64, bin_width: f64) -> usize {
    let ratio = (mz_max - mz_min) / bin_width;
    (ratio + ratio.abs() * 1e-12).floor().max(0.0) as usize
}

pub fn sqrt_stabilize(raw: &RawSpectrum) -> Result<RawSpectrum> {
    if let Some(v) = raw.intensity.iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid!("negative intensity {v}"));
    }
    Ok(raw.with_intensity(raw.intensity.iter().map(|v| v.sqrt()).collect()))
}

/// Solves the small dense system `a x = b` by Gaussian elimination with
/// partial pivoting. `a` is row-major `n × n`.
fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x
}

/// Weights that evaluate the least-squares polynomial of `order` at the
/// centre of a symmetric window of half-width `half`.
pub(crate) fn savgol_center_weights(half: usize, order: usize) -> Vec<f64> {
    let order = order.min(2 * half);
    let width = 2 * half + 1;
    let p = order + 1;
    let scale = half.max(1) as f64;
    // Vandermonde rows on abscissae scaled to [-1, 1].
    let design: Vec<Vec<f64>> = (0..width)
        .map(|j| {
            let u = (j as f64 - half as f64) / scale;
            (0..p).map(|k| u.powi(k as i32)).collect()
        })
        .collect();
    let mut gram = vec![0.0; p * p];
    for row in &design {
        for r in 0..p {
            for c in 0..p {
                gram[r * p + c] += row[r] * row[c];
            }
        }
    }
    let mut e0 = vec![0.0; p];
    e0[0] = 1.0;
    let u = solve_dense(gram, e0, p);
    design
        .iter()
        .map(|row| row.iter().zip(&u).map(|(a, b)| a * b).sum())
        .collect()
}

/// Savitzky-Golay smoothing with symmetric window shrinkage at the edges.
/// Negative ringing in the output is clipped to zero.
pub fn savitzky_golay(raw: &RawSpectrum, half_window: usize, polyorder: usize) -> Result<RawSpectrum> {
    let n = raw.len();
    if n < 2 * half_window + 1 {
        return Err(invalid!(
            "spectrum of {n} points is shorter than the smoothing window {}",
            2 * half_window + 1
        ));
    }
    let weights: Vec<Vec<f64>> = (0..=half_window)
        .map(|h| savgol_center_weights(h, polyorder))
        .collect();
    let y = &raw.intensity;
    let out = (0..n)
        .map(|i| {
            let h = half_window.min(i).min(n - 1 - i);
            let w = &weights[h];
            let v: f64 = w.iter().zip(&y[i - h..=i + h]).map(|(a, b)| a * b).sum();
            v.max(0.0)
        })
        .collect();
    Ok(raw.with_intensity(out))
}

/// SNIP baseline: for `i = 1..=iterations`, every point is clipped to the
/// mean of its neighbours `i` positions away (indices clamped at the ends).
/// Returns `(corrected, baseline)` with `corrected = max(raw - baseline, 0)`.
pub fn snip_baseline(raw: &RawSpectrum, iterations: usize) -> Result<(RawSpectrum, RawSpectrum)> {
    if iterations == 0 {
        return Err(invalid!("SNIP needs at least one iteration"));
    }
    let n = raw.len();
    let mut b = raw.intensity.clone();
    let mut next = b.clone();
    for i in 1..=iterations {
        for k in 0..n {
            let lo = b[k.saturating_sub(i)];
            let hi = b[(k + i).min(n.saturating_sub(1))];
            next[k] = b[k].min(0.5 * (lo + hi));
        }
        std::mem::swap(&mut b, &mut next);
    }
    let corrected = raw
        .intensity
        .iter()
        .zip(&b)
        .map(|(r, base)| (r - base).max(0.0))
        .collect();
    Ok((raw.with_intensity(corrected), raw.with_intensity(b)))
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median absolute deviation from the median.
pub fn mad(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - m).abs()).collect();
    median(&mut dev)
}

/// Zeroes every value below `noise_k · MAD / 0.6745`.
pub fn noise_threshold(raw: &RawSpectrum, noise_k: f64) -> RawSpectrum {
    let tau = noise_k * mad(&raw.intensity) / 0.6745;
    raw.with_intensity(
        raw.intensity
            .iter()
            .map(|v| if *v < tau { 0.0 } else { *v })
            .collect(),
    )
}

/// Keeps points with `mz_min <= mz < mz_max`.
pub fn trim(raw: &RawSpectrum, mz_min: f64, mz_max: f64) -> RawSpectrum {
    let (mz, intensity) = raw
        .mz
        .iter()
        .zip(&raw.intensity)
        .filter(|(m, _)| **m >= mz_min && **m < mz_max)
        .map(|(m, v)| (*m, *v))
        .unzip();
    RawSpectrum { mz, intensity }
}

/// Sums intensities into half-open bins `[mz_min + j·w, mz_min + (j+1)·w)`.
/// The result is not yet normalized.
pub fn bin_spectrum(raw: &RawSpectrum, mz_min: f64, mz_max: f64, bin_width: f64) -> ProcessedSpectrum {
    let d = num_bins(mz_min, mz_max, bin_width);
    let mut bins = vec![0.0; d];
    for (m, v) in raw.mz.iter().zip(&raw.intensity) {
        if *m < mz_min {
            continue;
        }
        let j = ((m - mz_min) / bin_width).floor() as usize;
        if j < d {
            bins[j] += v;
        }
    }
    ProcessedSpectrum {
        bins,
        mz_min,
        mz_max,
        bin_width,
        all_zero: false,
    }
}

/// Divides by the maximum bin; an all-zero spectrum is flagged and returned
/// unchanged.
pub fn normalize_max(mut binned: ProcessedSpectrum) -> ProcessedSpectrum {
    let max = binned.bins.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut binned.bins {
            *v /= max;
        }
        binned.all_zero = false;
    } else {
        log::warn!("spectrum has no signal after preprocessing; left all-zero");
        binned.all_zero = true;
    }
    binned
}

/// Full pipeline in acquisition order: sqrt, smoothing, baseline removal,
/// thresholding, trimming, binning, normalization.
pub fn preprocess(raw: &RawSpectrum, cfg: &PreprocessConfig) -> Result<ProcessedSpectrum> {
    cfg.validate()?;
    let s = sqrt_stabilize(raw)?;
    let s = savitzky_golay(&s, cfg.half_window, cfg.sg_polyorder)?;
    let (s, _) = snip_baseline(&s, cfg.snip_iterations)?;
    let s = noise_threshold(&s, cfg.noise_k);
    let s = trim(&s, cfg.mz_min, cfg.mz_max);
    Ok(normalize_max(bin_spectrum(&s, cfg.mz_min, cfg.mz_max, cfg.bin_width)))
}
