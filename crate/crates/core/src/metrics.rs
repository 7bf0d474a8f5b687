//! Evaluation suite: confusion and per-class metrics, expected calibration
//! error, Spearman rank correlation, selective prediction, bootstrap
//! confidence intervals, degradation tables, and sliding-window uncertainty
//! maps.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::evidential::DirichletOutput;
use crate::labeling::Severity;
use crate::model::{self, ModelParams, NUM_CLASSES};
use crate::rng::Rng;
use crate::special::normal_cdf;
use crate::synth::{all_degradations, degrade_patch, Example, Patch};
use crate::tensor::NnError;

/// One scored example; the row unit behind every table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub true_class: usize,
    pub predicted_class: usize,
    /// Max predictive probability alpha_k / S.
    pub confidence: f64,
    pub vacuity: f64,
    pub dissonance: f64,
    pub aod_pred: f64,
    pub correct: bool,
}

impl EvalRecord {
    pub fn new(true_class: Severity, output: &DirichletOutput) -> EvalRecord {
        let predicted = output.predicted_class();
        EvalRecord {
            true_class: true_class.index(),
            predicted_class: predicted,
            confidence: output.confidence(),
            vacuity: output.vacuity,
            dissonance: output.dissonance,
            aod_pred: output.aod_pred,
            correct: predicted == true_class.index(),
        }
    }

    /// Operational triage tier from vacuity.
    pub fn tier(&self) -> &'static str {
        tier_for_vacuity(self.vacuity)
    }
}

/// Tiers: automatic below 0.03, analyst review up to 0.10, expert above.
pub fn tier_for_vacuity(vacuity: f64) -> &'static str {
    if vacuity < 0.03 {
        "automatic"
    } else if vacuity <= 0.10 {
        "review"
    } else {
        "expert"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub mean_vacuity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationSummary {
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<PerClassMetrics>,
    pub accuracy_unweighted: f64,
    /// Recall averaged with inverse-frequency class weights (weights
    /// normalized to sum n over samples), i.e. macro-average recall over
    /// present classes.
    pub accuracy_weighted: f64,
}

pub fn confusion_and_per_class(records: &[EvalRecord]) -> Result<ClassificationSummary, NnError> {
    if records.is_empty() {
        return Err(NnError::Domain("empty record set".into()));
    }
    let k = NUM_CLASSES;
    let mut confusion = vec![vec![0usize; k]; k];
    let mut vac_sum = vec![0.0; k];
    for r in records {
        confusion[r.true_class][r.predicted_class] += 1;
        vac_sum[r.true_class] += r.vacuity;
    }
    let mut per_class = Vec::with_capacity(k);
    let mut recall_sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let support: usize = confusion[c].iter().sum();
        let tp = confusion[c][c];
        let fp: usize = (0..k).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fna = support - tp;
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / (tp + fna) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            recall_sum += recall;
            present += 1;
        }
        per_class.push(PerClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
            mean_vacuity: if support > 0 { vac_sum[c] / support as f64 } else { 0.0 },
        });
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(ClassificationSummary {
        confusion,
        per_class,
        accuracy_unweighted: correct as f64 / records.len() as f64,
        accuracy_weighted: recall_sum / present.max(1) as f64,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EceBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Equal-width bins over [0, 1]; confidence 1.0 lands in the top bin.
/// ECE = sum_b (n_b / n) |acc_b - conf_b|; empty bins contribute zero.
pub fn expected_calibration_error(
    records: &[EvalRecord],
    n_bins: usize,
) -> Result<(f64, Vec<EceBin>), NnError> {
    if n_bins == 0 {
        return Err(NnError::Domain("n_bins must be >= 1".into()));
    }
    let mut counts = vec![0usize; n_bins];
    let mut acc = vec![0.0; n_bins];
    let mut conf = vec![0.0; n_bins];
    for r in records {
        let b = ((r.confidence * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
        acc[b] += if r.correct { 1.0 } else { 0.0 };
        conf[b] += r.confidence;
    }
    let n = records.len() as f64;
    let mut ece = 0.0;
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let (a, c) = if counts[b] > 0 {
            (acc[b] / counts[b] as f64, conf[b] / counts[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if counts[b] > 0 {
            ece += counts[b] as f64 / n * (a - c).abs();
        }
        bins.push(EceBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            count: counts[b],
            accuracy: a,
            confidence: c,
        });
    }
    Ok((ece, bins))
}

/// Accuracy binned by vacuity, reusing the same bin machinery (the
/// accuracy-vs-uncertainty panel as plot data).
pub fn vacuity_binned_accuracy(records: &[EvalRecord], n_bins: usize) -> Vec<EceBin> {
    let mut counts = vec![0usize; n_bins];
    let mut acc = vec![0.0; n_bins];
    let mut vac = vec![0.0; n_bins];
    for r in records {
        let b = ((r.vacuity * n_bins as f64) as usize).min(n_bins - 1);
        counts[b] += 1;
        acc[b] += if r.correct { 1.0 } else { 0.0 };
        vac[b] += r.vacuity;
    }
    (0..n_bins)
        .map(|b| {
            let (a, v) = if counts[b] > 0 {
                (acc[b] / counts[b] as f64, vac[b] / counts[b] as f64)
            } else {
                (0.0, 0.0)
            };
            EceBin {
                lo: b as f64 / n_bins as f64,
                hi: (b + 1) as f64 / n_bins as f64,
                count: counts[b],
                accuracy: a,
                confidence: v,
            }
        })
        .collect()
}

/// Average ranks, ties shared.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpearmanResult {
    pub rho: f64,
    /// Two-sided p from the large-n normal approximation z = rho sqrt(n-1).
    pub p_value: f64,
    pub n: usize,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<SpearmanResult, NnError> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(NnError::Domain(format!(
            "spearman needs equal-length inputs with n >= 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(NnError::Domain("spearman undefined for a constant input vector".into()));
    }
    let rho = cov / libm::sqrt(vx * vy);
    let z = rho * libm::sqrt(n - 1.0);
    let p_value = 2.0 * (1.0 - normal_cdf(z.abs()));
    Ok(SpearmanResult { rho, p_value, n: x.len() })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectivePoint {
    pub fraction: f64,
    pub accuracy: f64,
    pub mean_vacuity: f64,
}

/// Sorts ascending by vacuity (stable, so input order breaks ties) and
/// keeps the first ceil(f * n) records for each fraction.
pub fn selective_prediction_curve(
    records: &[EvalRecord],
    retain_fractions: &[f64],
) -> Result<Vec<SelectivePoint>, NnError> {
    if records.is_empty() {
        return Err(NnError::Domain("empty record set".into()));
    }
    for &f in retain_fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(NnError::Domain(format!("retain fraction {f} outside (0, 1]")));
        }
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].vacuity.partial_cmp(&records[b].vacuity).unwrap());
    let n = records.len();
    let mut out = Vec::with_capacity(retain_fractions.len());
    for &f in retain_fractions {
        let keep = (libm::ceil(f * n as f64) as usize).clamp(1, n);
        let kept = &order[..keep];
        let correct = kept.iter().filter(|&&i| records[i].correct).count();
        let vac: f64 = kept.iter().map(|&i| records[i].vacuity).sum();
        out.push(SelectivePoint {
            fraction: f,
            accuracy: correct as f64 / keep as f64,
            mean_vacuity: vac / keep as f64,
        });
    }
    Ok(out)
}

/// Percentile bootstrap over records; resamples where the metric is
/// undefined are skipped and counted, more than 50% skips is an error.
pub fn bootstrap_ci(
    records: &[EvalRecord],
    metric: &dyn Fn(&[EvalRecord]) -> Option<f64>,
    iterations: usize,
    confidence: f64,
    seed: u64,
) -> Result<(f64, f64), NnError> {
    if iterations < 100 {
        return Err(NnError::Domain(format!("need >= 100 iterations, got {iterations}")));
    }
    if !(0.0..1.0).contains(&confidence) {
        return Err(NnError::Domain(format!("confidence {confidence} outside (0, 1)")));
    }
    if records.is_empty() {
        return Err(NnError::Domain("empty record set".into()));
    }
    let mut rng = Rng::new(seed);
    let n = records.len();
    let mut samples = Vec::with_capacity(iterations);
    let mut skipped = 0usize;
    let mut resample = Vec::with_capacity(n);
    for _ in 0..iterations {
        resample.clear();
        for _ in 0..n {
            resample.push(records[rng.index(n)].clone());
        }
        match metric(&resample) {
            Some(v) => samples.push(v),
            None => skipped += 1,
        }
    }
    if skipped * 2 > iterations {
        return Err(NnError::Domain(format!(
            "metric undefined on {skipped}/{iterations} resamples"
        )));
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let percentile = |q: f64| -> f64 {
        let pos = q * (samples.len() - 1) as f64;
        let lo = pos as usize;
        let hi = (lo + 1).min(samples.len() - 1);
        let t = pos - lo as f64;
        samples[lo] * (1.0 - t) + samples[hi] * t
    };
    let tail = (1.0 - confidence) / 2.0;
    Ok((percentile(tail), percentile(1.0 - tail)))
}

/// Accuracy metric for bootstrap_ci.
pub fn accuracy_metric(records: &[EvalRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Per-class recall metric for bootstrap_ci; undefined when the class is
/// absent from the resample.
pub fn recall_metric(class: usize) -> impl Fn(&[EvalRecord]) -> Option<f64> {
    move |records| {
        let support = records.iter().filter(|r| r.true_class == class).count();
        if support == 0 {
            return None;
        }
        let tp = records
            .iter()
            .filter(|r| r.true_class == class && r.correct)
            .count();
        Some(tp as f64 / support as f64)
    }
}

/// Window start offsets: multiples of the stride, plus a final offset
/// flush with the far edge when not already covered.
pub fn window_offsets(side: usize, window: usize, stride: usize) -> Result<Vec<usize>, NnError> {
    if window > side {
        return Err(NnError::Domain(format!("window {window} exceeds image side {side}")));
    }
    if stride == 0 {
        return Err(NnError::Domain("stride must be >= 1".into()));
    }
    let mut offsets = Vec::new();
    let mut o = 0;
    while o + window <= side {
        offsets.push(o);
        o += stride;
    }
    let last = *offsets.last().expect("at least offset 0");
    if last + window < side {
        offsets.push(side - window);
    }
    Ok(offsets)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyCell {
    pub row: usize,
    pub col: usize,
    pub offset_y: usize,
    pub offset_x: usize,
    pub vacuity: f64,
    pub dissonance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyMap {
    pub offsets: Vec<usize>,
    pub cells: Vec<UncertaintyCell>,
}

/// Sliding-window uncertainty map: each window is resized (nearest
/// neighbor) to the model input size and scored.
pub fn uncertainty_map(
    image: &Patch,
    model: &ModelParams,
    window: usize,
    stride: usize,
) -> Result<UncertaintyMap, NnError> {
    let offsets = window_offsets(image.size, window, stride)?;
    let mut cells = Vec::with_capacity(offsets.len() * offsets.len());
    for (row, &oy) in offsets.iter().enumerate() {
        for (col, &ox) in offsets.iter().enumerate() {
            let crop = image.crop(ox, oy, window)?;
            let resized = crop.resize_nearest(model.config.patch_size);
            let out = model::forward(&resized, model)?;
            cells.push(UncertaintyCell {
                row,
                col,
                offset_y: oy,
                offset_x: ox,
                vacuity: out.vacuity,
                dissonance: out.dissonance,
            });
        }
    }
    Ok(UncertaintyMap { offsets, cells })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationRow {
    pub condition: String,
    pub accuracy: f64,
    pub mean_vacuity: f64,
}

/// Clean baseline plus all six (kind, level) degradation conditions.
pub fn degradation_report(
    test: &[Example],
    model: &ModelParams,
    seed: u64,
) -> Result<Vec<DegradationRow>, NnError> {
    if test.is_empty() {
        return Err(NnError::Domain("empty test set".into()));
    }
    let score = |patches: &[Patch]| -> Result<(f64, f64), NnError> {
        let outs = model::predict_batch(patches, model)?;
        let mut correct = 0usize;
        let mut vac = 0.0;
        for (o, e) in outs.iter().zip(test) {
            if o.predicted_class() == e.label.class.index() {
                correct += 1;
            }
            vac += o.vacuity;
        }
        Ok((correct as f64 / test.len() as f64, vac / test.len() as f64))
    };
    let clean: Vec<Patch> = test.iter().map(|e| e.patch.clone()).collect();
    let (acc, vac) = score(&clean)?;
    let mut rows = vec![DegradationRow { condition: "clean".into(), accuracy: acc, mean_vacuity: vac }];
    for (kind, level) in all_degradations() {
        let degraded: Vec<Patch> = test
            .iter()
            .enumerate()
            .map(|(i, e)| degrade_patch(&e.patch, kind, level, seed ^ (i as u64)))
            .collect();
        let (acc, vac) = score(&degraded)?;
        rows.push(DegradationRow {
            condition: format!("{}-{}", kind.name(), level.name()),
            accuracy: acc,
            mean_vacuity: vac,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub metric: String,
    pub low: f64,
    pub high: f64,
    pub iterations: usize,
    pub confidence: f64,
}

/// Everything an eval run emits, serializable to JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_records: usize,
    pub summary: ClassificationSummary,
    pub ece: f64,
    pub ece_bins: Vec<EceBin>,
    pub vacuity_bins: Vec<EceBin>,
    pub spearman_vacuity_error: Option<SpearmanResult>,
    pub spearman_dissonance_error: Option<SpearmanResult>,
    pub selective: Option<Vec<SelectivePoint>>,
    pub bootstrap: Vec<BootstrapInterval>,
    pub degradation: Option<Vec<DegradationRow>>,
    pub tier_counts: BTreeMap<String, usize>,
    /// Forward passes consumed scoring the main record set; equals
    /// n_records (single-pass guarantee).
    pub forward_passes: u64,
    /// Full run configuration, echoed for reproducibility.
    pub config_echo: BTreeMap<String, String>,
}

/// Error vector (1 = misclassified) for rank correlations.
pub fn error_indicator(records: &[EvalRecord]) -> Vec<f64> {
    records.iter().map(|r| if r.correct { 0.0 } else { 1.0 }).collect()
}
