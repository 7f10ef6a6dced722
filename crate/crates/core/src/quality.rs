//! Latent quality metrics and the noise-pair filter.
//!
//! LPIPS needs a pretrained network, so the default perceptual score is the
//! distance-like proxy `(1 - SSIM) / 2`. Scores computed elsewhere can be
//! supplied through a delimited score file instead.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, max_value: f64) -> Result<f64> {
    if !(max_value > 0.0) {
        return Err(Error::Argument(format!("psnr max_value must be positive, got {max_value}")));
    }
    let mse = pred.mse(gt)?.as_f64();
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * max_value.log10() - 10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable "valid" Gaussian filtering of one `h x w` plane.
fn filter_plane(x: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| win[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| win[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM over all channels and valid window positions. The last two axes
/// are spatial; every leading axis is treated as a channel.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, dynamic_range: f64) -> Result<f64> {
    pred.ensure_same_shape(gt, "ssim")?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::Argument(format!("ssim needs at least two axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let win = gaussian_window();
    let plane = h * w;
    let channels = pred.len() / plane;
    let (mut total, mut count) = (0.0, 0usize);
    for ch in 0..channels {
        let a: Vec<f64> = pred.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let b: Vec<f64> = gt.data()[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_plane(&a, h, w, &win);
        let mu_b = filter_plane(&b, h, w, &win);
        let aa = filter_plane(&prod(&a, &a), h, w, &win);
        let bb = filter_plane(&prod(&b, &b), h, w, &win);
        let ab = filter_plane(&prod(&a, &b), h, w, &win);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Per-view perceptual distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Metric {
    /// `(1 - SSIM) / 2` at the given dynamic range.
    SsimProxy { dynamic_range: f64 },
}

impl Metric {
    pub fn distance<T: Scalar>(&self, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
        match *self {
            Metric::SsimProxy { dynamic_range } => Ok((1.0 - ssim(pred, gt, dynamic_range)?) / 2.0),
        }
    }
}

/// Mean per-view distance between generated and ground-truth views.
pub fn perceptual_score<T: Scalar>(pred_views: &[Tensor<T>], gt_views: &[Tensor<T>], metric: Metric) -> Result<f64> {
    if pred_views.is_empty() {
        return Err(Error::Argument("perceptual score needs at least one view".into()));
    }
    if pred_views.len() != gt_views.len() {
        return Err(Error::Argument(format!(
            "{} generated views but {} ground-truth views",
            pred_views.len(),
            gt_views.len()
        )));
    }
    let mut total = 0.0;
    for (p, g) in pred_views.iter().zip(gt_views) {
        total += metric.distance(p, g)?;
    }
    Ok(total / pred_views.len() as f64)
}

/// Scores of the same seed generated from random and from high-quality noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePair {
    pub s_rd: f64,
    pub s_hq: f64,
    pub views: usize,
}

/// Keep a pair only if its high-quality noise beats the random noise by
/// more than `m`.
pub fn filter_pair(s_rd: f64, s_hq: f64, m: f64) -> bool {
    s_rd > s_hq + m
}

/// Retained share of a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterRate {
    pub retained: usize,
    pub total: usize,
}

impl FilterRate {
    pub fn percent(&self) -> f64 {
        100.0 * self.retained as f64 / self.total as f64
    }
}

impl fmt::Display for FilterRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{} retained ({:.2}%)", self.retained, self.total, self.percent())
    }
}

pub fn filtering_rate(retained: usize, total: usize) -> Result<FilterRate> {
    if total == 0 {
        return Err(Error::Argument("filtering rate of an empty dataset".into()));
    }
    if retained > total {
        return Err(Error::Argument(format!("{retained} retained out of only {total}")));
    }
    Ok(FilterRate { retained, total })
}

pub fn format_percent(p: f64) -> String {
    format!("{p:.2}")
}

/// Parses `seed,s_rd,s_hq` records. Blank lines, `#` comments and a header
/// line starting with `seed` are skipped; commas, tabs or spaces delimit.
pub fn parse_score_file(text: &str) -> Result<BTreeMap<u64, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.to_ascii_lowercase().starts_with("seed") {
            continue;
        }
        let fields: Vec<&str> = line
            .split([',', '\t', ' '])
            .filter(|s| !s.is_empty())
            .collect();
        let bad = || Error::Format(format!("score file line {}: expected seed,s_rd,s_hq", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let seed = fields[0].parse::<u64>().map_err(|_| bad())?;
        let s_rd = fields[1].parse::<f64>().map_err(|_| bad())?;
        let s_hq = fields[2].parse::<f64>().map_err(|_| bad())?;
        out.insert(seed, (s_rd, s_hq));
    }
    Ok(out)
}
