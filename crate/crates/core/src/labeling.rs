//! Pseudo-AOD labeling: converts an RGB patch into a heuristic aerosol
//! optical depth in [0, 3], a 3-class severity label, and the spectral
//! proxy channel used as the fourth network input.
//!
//! Labels derive from the same RGB content the model consumes, so the
//! pipeline is circular by construction; the synthetic generator's oracle
//! mode (labels from plume optical depth) is the non-circular alternative.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::NnError;

/// Planar RGB image with per-pixel values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPatch {
    pub width: usize,
    pub height: usize,
    /// 3 x H x W planar: R plane, then G, then B.
    pub data: Vec<f64>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if width == 0 || height == 0 {
            return Err(NnError::Shape(format!("degenerate patch dimensions {width}x{height}")));
        }
        if data.len() != 3 * width * height {
            return Err(NnError::Shape(format!(
                "RGB patch {width}x{height} needs {} values, got {}",
                3 * width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(NnError::Domain("RGB values must lie in [0, 1]".into()));
        }
        Ok(RgbPatch { width, height, data })
    }

    pub fn uniform(width: usize, height: usize, r: f64, g: f64, b: f64) -> Self {
        let n = width * height;
        let mut data = Vec::with_capacity(3 * n);
        for (c, v) in [r, g, b].into_iter().enumerate() {
            let _ = c;
            data.extend(core::iter::repeat(v).take(n));
        }
        RgbPatch { width, height, data }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn r(&self) -> &[f64] {
        &self.data[..self.pixels()]
    }

    pub fn g(&self) -> &[f64] {
        &self.data[self.pixels()..2 * self.pixels()]
    }

    pub fn b(&self) -> &[f64] {
        &self.data[2 * self.pixels()..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Light,
    Moderate,
    Heavy,
}

impl Severity {
    pub fn index(self) -> usize {
        match self {
            Severity::Light => 0,
            Severity::Moderate => 1,
            Severity::Heavy => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Severity> {
        match i {
            0 => Some(Severity::Light),
            1 => Some(Severity::Moderate),
            2 => Some(Severity::Heavy),
            _ => None,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut y = [0.0; 3];
        y[self.index()] = 1.0;
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityLabel {
    pub pseudo_aod: f64,
    pub class: Severity,
}

/// All heuristic knobs; the blend names three components and fixes
/// none of these values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub weight_haze: f64,
    pub weight_dark: f64,
    pub weight_smoke: f64,
    /// Fraction of darkest pixels averaged for the dark-channel estimate.
    pub dark_quantile: f64,
    /// Dark-channel value mapped to full-scale AOD.
    pub dark_normalizer: f64,
    /// Blue/red ratio at which the haze component starts rising.
    pub haze_onset: f64,
    /// Ratio span over which the haze component saturates.
    pub haze_span: f64,
    pub smoke_luminance_lo: f64,
    pub smoke_luminance_hi: f64,
    pub smoke_max_spread: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            weight_haze: 0.4,
            weight_dark: 0.3,
            weight_smoke: 0.3,
            dark_quantile: 0.1,
            dark_normalizer: 0.6,
            haze_onset: 0.9,
            haze_span: 1.1,
            smoke_luminance_lo: 0.4,
            smoke_luminance_hi: 0.9,
            smoke_max_spread: 0.15,
        }
    }
}

/// Severity class thresholds on the AOD axis.
pub const THRESHOLD_LIGHT_MODERATE: f64 = 0.5;
pub const THRESHOLD_MODERATE_HEAVY: f64 = 1.5;

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// mean(B) / (mean(R) + eps)
pub fn haze_index(p: &RgbPatch) -> f64 {
    let n = p.pixels() as f64;
    let mean_r: f64 = p.r().iter().sum::<f64>() / n;
    let mean_b: f64 = p.b().iter().sum::<f64>() / n;
    mean_b / (mean_r + 1e-6)
}

/// Mean min-channel value over the darkest 10% of pixels, mapped onto
/// [0, 3]; aerosol scattering lifts otherwise-dark pixels.
pub fn dark_channel_aod(p: &RgbPatch) -> f64 {
    dark_channel_aod_with(p, &LabelingConfig::default())
}

pub fn dark_channel_aod_with(p: &RgbPatch, cfg: &LabelingConfig) -> f64 {
    let n = p.pixels();
    let mut mins: Vec<f64> = (0..n)
        .map(|i| p.r()[i].min(p.g()[i]).min(p.b()[i]))
        .collect();
    mins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let count = (libm::ceil(n as f64 * cfg.dark_quantile) as usize).max(1);
    let d: f64 = mins[..count].iter().sum::<f64>() / count as f64;
    3.0 * clamp01(d / cfg.dark_normalizer)
}

/// Fraction of pixels with a bluish-gray smoke signature: mid luminance,
/// low channel spread, blue at least red.
pub fn smoke_color_score(p: &RgbPatch) -> f64 {
    smoke_color_score_with(p, &LabelingConfig::default())
}

pub fn smoke_color_score_with(p: &RgbPatch, cfg: &LabelingConfig) -> f64 {
    let n = p.pixels();
    let mut hits = 0usize;
    for i in 0..n {
        let (r, g, b) = (p.r()[i], p.g()[i], p.b()[i]);
        let lum = (r + g + b) / 3.0;
        let spread = r.max(g).max(b) - r.min(g).min(b);
        if lum >= cfg.smoke_luminance_lo
            && lum <= cfg.smoke_luminance_hi
            && spread < cfg.smoke_max_spread
            && b >= r
        {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Map a blue/red ratio onto [0, 3]: zero below the onset, saturating one
/// span above it.
fn haze_component(h: f64, cfg: &LabelingConfig) -> f64 {
    3.0 * clamp01(h - cfg.haze_onset) / cfg.haze_span
}

pub fn pseudo_aod(p: &RgbPatch) -> f64 {
    pseudo_aod_with(p, &LabelingConfig::default())
}

pub fn pseudo_aod_with(p: &RgbPatch, cfg: &LabelingConfig) -> f64 {
    let blend = cfg.weight_haze * haze_component(haze_index(p), cfg)
        + cfg.weight_dark * dark_channel_aod_with(p, cfg)
        + cfg.weight_smoke * 3.0 * smoke_color_score_with(p, cfg);
    blend.clamp(0.0, 3.0)
}

pub fn classify_severity(aod: f64) -> Result<Severity, NnError> {
    if !(aod >= 0.0) {
        return Err(NnError::Domain(format!("AOD must be nonnegative, got {aod}")));
    }
    Ok(if aod < THRESHOLD_LIGHT_MODERATE {
        Severity::Light
    } else if aod < THRESHOLD_MODERATE_HEAVY {
        Severity::Moderate
    } else {
        Severity::Heavy
    })
}

pub fn label_patch(p: &RgbPatch, cfg: &LabelingConfig) -> SeverityLabel {
    let aod = pseudo_aod_with(p, cfg);
    SeverityLabel { pseudo_aod: aod, class: classify_severity(aod).expect("aod clamped >= 0") }
}

/// Per-pixel clamp(0.5 R + 0.3 G - 0.2 B, 0, 1).
pub fn spectral_proxy_channel(p: &RgbPatch) -> Vec<f64> {
    (0..p.pixels())
        .map(|i| clamp01(0.5 * p.r()[i] + 0.3 * p.g()[i] - 0.2 * p.b()[i]))
        .collect()
}
