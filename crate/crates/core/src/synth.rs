//! Synthetic smoke scenes, degradation transforms, scene-level splits, and
//! class-balanced sampling.
//!
//! A scene is value-noise terrain (greens and browns) with a Gaussian-falloff
//! gray plume whose opacity is 1 - e^(-tau); tau in [0, 3] doubles as the
//! oracle AOD. Clouds intentionally share the plume's gray-white palette so
//! the cloud/smoke confusability survives at desk scale.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::labeling::{
    self, classify_severity, LabelingConfig, RgbPatch, Severity, SeverityLabel,
};
use crate::rng::Rng;
use crate::tensor::{NnError, Tensor};

/// 4-channel (R, G, B, spectral proxy) square patch, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    /// 4 x size x size planar.
    pub data: Vec<f64>,
}

impl Patch {
    /// Appends the spectral proxy channel computed from the RGB content.
    pub fn from_rgb(rgb: &RgbPatch) -> Result<Patch, NnError> {
        if rgb.width != rgb.height {
            return Err(NnError::Shape(format!(
                "patches must be square, got {}x{}",
                rgb.width, rgb.height
            )));
        }
        let mut data = rgb.data.clone();
        data.extend(labeling::spectral_proxy_channel(rgb));
        Ok(Patch { size: rgb.width, data })
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// The RGB planes without the proxy channel.
    pub fn rgb(&self) -> RgbPatch {
        RgbPatch {
            width: self.size,
            height: self.size,
            data: self.data[..3 * self.pixels()].to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![4, self.size, self.size], self.data.clone()).expect("consistent shape")
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn flip_horizontal(&self) -> Patch {
        let s = self.size;
        let mut data = vec![0.0; self.data.len()];
        for c in 0..4 {
            for y in 0..s {
                for x in 0..s {
                    data[(c * s + y) * s + x] = self.data[(c * s + y) * s + (s - 1 - x)];
                }
            }
        }
        Patch { size: s, data }
    }

    pub fn flip_vertical(&self) -> Patch {
        let s = self.size;
        let mut data = vec![0.0; self.data.len()];
        for c in 0..4 {
            for y in 0..s {
                for x in 0..s {
                    data[(c * s + y) * s + x] = self.data[(c * s + (s - 1 - y)) * s + x];
                }
            }
        }
        Patch { size: s, data }
    }

    /// Nearest-neighbor resize to a new square size.
    pub fn resize_nearest(&self, new_size: usize) -> Patch {
        let s = self.size;
        let mut data = vec![0.0; 4 * new_size * new_size];
        for c in 0..4 {
            for y in 0..new_size {
                let sy = (y * s) / new_size;
                for x in 0..new_size {
                    let sx = (x * s) / new_size;
                    data[(c * new_size + y) * new_size + x] = self.data[(c * s + sy) * s + sx];
                }
            }
        }
        Patch { size: new_size, data }
    }

    /// Square crop with top-left corner (x0, y0).
    pub fn crop(&self, x0: usize, y0: usize, side: usize) -> Result<Patch, NnError> {
        if x0 + side > self.size || y0 + side > self.size {
            return Err(NnError::Domain(format!(
                "crop ({x0}, {y0}) side {side} exceeds patch size {}",
                self.size
            )));
        }
        let s = self.size;
        let mut data = vec![0.0; 4 * side * side];
        for c in 0..4 {
            for y in 0..side {
                for x in 0..side {
                    data[(c * side + y) * side + x] =
                        self.data[(c * s + y0 + y) * s + x0 + x];
                }
            }
        }
        Ok(Patch { size: side, data })
    }
}

/// One synthetic scene: terrain style plus plume geometry and optical depth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: String,
    pub terrain_seed: u64,
    /// Smoke optical depth in [0, 3]; determines the oracle label.
    pub tau: f64,
    /// Plume center as a fraction of the patch extent.
    pub plume_center: (f64, f64),
    /// Plume radius as a fraction of the patch extent.
    pub plume_radius: f64,
    /// Ratio of the plume's major to minor axis.
    pub plume_anisotropy: f64,
}

pub const SMOKE_GRAY: (f64, f64, f64) = (0.62, 0.63, 0.68);
const TERRAIN_GREEN: (f64, f64, f64) = (0.18, 0.42, 0.16);
const TERRAIN_BROWN: (f64, f64, f64) = (0.48, 0.38, 0.22);

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise in [0, 1] from a seeded lattice.
fn value_noise(seed: u64, size: usize, cells: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let g = cells + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.uniform()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / size as f64 * cells as f64;
        let cy = fy as usize;
        let ty = smoothstep(fy - cy as f64);
        for x in 0..size {
            let fx = x as f64 / size as f64 * cells as f64;
            let cx = fx as usize;
            let tx = smoothstep(fx - cx as f64);
            let v00 = lattice[cy * g + cx];
            let v01 = lattice[cy * g + cx + 1];
            let v10 = lattice[(cy + 1) * g + cx];
            let v11 = lattice[(cy + 1) * g + cx + 1];
            let top = v00 + (v01 - v00) * tx;
            let bot = v10 + (v11 - v10) * tx;
            out[y * size + x] = top + (bot - top) * ty;
        }
    }
    out
}

/// How the label of a generated patch is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelMode {
    /// From the plume optical depth tau (non-circular ground truth).
    Oracle,
    /// From the pseudo-AOD heuristic on the rendered pixels.
    Pipeline,
}

/// Renders a patch for the scene; deterministic in (spec, size, rng_seed).
pub fn generate_patch(
    spec: &SceneSpec,
    size: usize,
    rng_seed: u64,
    mode: LabelMode,
) -> Result<(Patch, SeverityLabel), NnError> {
    if !(0.0..=3.0).contains(&spec.tau) {
        return Err(NnError::Domain(format!("tau {} outside [0, 3]", spec.tau)));
    }
    let mix = value_noise(spec.terrain_seed, size, 4);
    let detail = value_noise(spec.terrain_seed ^ 0x5bd1_e995, size, 8);
    let mut jitter = Rng::new(rng_seed);
    let opacity = 1.0 - libm::exp(-spec.tau);
    let (cx, cy) = spec.plume_center;
    let rx = spec.plume_radius * spec.plume_anisotropy.max(0.2);
    let ry = spec.plume_radius / spec.plume_anisotropy.max(0.2);

    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let m = mix[i];
            let brightness = 0.8 + 0.4 * detail[i] + 0.02 * jitter.normal();
            let base = (
                TERRAIN_GREEN.0 + (TERRAIN_BROWN.0 - TERRAIN_GREEN.0) * m,
                TERRAIN_GREEN.1 + (TERRAIN_BROWN.1 - TERRAIN_GREEN.1) * m,
                TERRAIN_GREEN.2 + (TERRAIN_BROWN.2 - TERRAIN_GREEN.2) * m,
            );
            let fx = x as f64 / size as f64;
            let fy = y as f64 / size as f64;
            let (dx, dy) = ((fx - cx) / rx, (fy - cy) / ry);
            let d2 = dx * dx + dy * dy;
            let a = opacity * libm::exp(-0.5 * d2);
            let blend = |t: f64, s: f64| ((1.0 - a) * t * brightness + a * s).clamp(0.0, 1.0);
            data[i] = blend(base.0, SMOKE_GRAY.0);
            data[n + i] = blend(base.1, SMOKE_GRAY.1);
            data[2 * n + i] = blend(base.2, SMOKE_GRAY.2);
        }
    }
    let rgb = RgbPatch::new(size, size, data)?;
    let patch = Patch::from_rgb(&rgb)?;
    let label = match mode {
        LabelMode::Oracle => SeverityLabel { pseudo_aod: spec.tau, class: classify_severity(spec.tau)? },
        LabelMode::Pipeline => labeling::label_patch(&rgb, &LabelingConfig::default()),
    };
    Ok((patch, label))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegradeKind {
    Cloud,
    Blur,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegradeLevel {
    Mild,
    Strong,
}

impl DegradeKind {
    pub fn name(self) -> &'static str {
        match self {
            DegradeKind::Cloud => "cloud",
            DegradeKind::Blur => "blur",
            DegradeKind::Noise => "noise",
        }
    }
}

impl DegradeLevel {
    pub fn name(self) -> &'static str {
        match self {
            DegradeLevel::Mild => "mild",
            DegradeLevel::Strong => "strong",
        }
    }
}

/// All six degradation conditions in report order.
pub fn all_degradations() -> [(DegradeKind, DegradeLevel); 6] {
    [
        (DegradeKind::Cloud, DegradeLevel::Mild),
        (DegradeKind::Cloud, DegradeLevel::Strong),
        (DegradeKind::Blur, DegradeLevel::Mild),
        (DegradeKind::Blur, DegradeLevel::Strong),
        (DegradeKind::Noise, DegradeLevel::Mild),
        (DegradeKind::Noise, DegradeLevel::Strong),
    ]
}

fn gaussian_blur_channel(src: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let radius = libm::ceil(3.0 * sigma) as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|d| libm::exp(-0.5 * (d as f64 / sigma) * (d as f64 / sigma)))
        .collect();
    // separable; per-pixel renormalization over in-bounds taps keeps
    // constants exactly constant
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (wi, w) in weights.iter().enumerate() {
                    let d = wi as isize - radius;
                    let (sx, sy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if sx < 0 || sy < 0 || sx >= size as isize || sy >= size as isize {
                        continue;
                    }
                    acc += w * input[sy as usize * size + sx as usize];
                    wsum += w;
                }
                out[y * size + x] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

/// Applies one degradation and recomputes the proxy channel from the
/// degraded RGB. Output stays in [0, 1] and keeps the input shape.
pub fn degrade_patch(
    p: &Patch,
    kind: DegradeKind,
    level: DegradeLevel,
    seed: u64,
) -> Patch {
    let size = p.size;
    let n = p.pixels();
    let mut rgb = p.rgb();
    let mut rng = Rng::new(seed ^ 0xdecade);
    match kind {
        DegradeKind::Cloud => {
            let (blobs, opacity, radius) = match level {
                DegradeLevel::Mild => (3usize, 0.5, 0.18),
                DegradeLevel::Strong => (6usize, 0.8, 0.24),
            };
            let mut alpha = vec![0.0f64; n];
            for _ in 0..blobs {
                let cx = rng.uniform();
                let cy = rng.uniform();
                let rx = radius * (0.7 + 0.6 * rng.uniform());
                let ry = radius * (0.7 + 0.6 * rng.uniform());
                for y in 0..size {
                    for x in 0..size {
                        let fx = (x as f64 + 0.5) / size as f64;
                        let fy = (y as f64 + 0.5) / size as f64;
                        let (dx, dy) = ((fx - cx) / rx, (fy - cy) / ry);
                        let d2 = dx * dx + dy * dy;
                        let a = opacity * libm::exp(-0.5 * d2);
                        let i = y * size + x;
                        alpha[i] = 1.0 - (1.0 - alpha[i]) * (1.0 - a);
                    }
                }
            }
            let cloud = (0.95, 0.96, 1.0);
            for i in 0..n {
                let a = alpha[i];
                rgb.data[i] = ((1.0 - a) * rgb.data[i] + a * cloud.0).clamp(0.0, 1.0);
                rgb.data[n + i] = ((1.0 - a) * rgb.data[n + i] + a * cloud.1).clamp(0.0, 1.0);
                rgb.data[2 * n + i] = ((1.0 - a) * rgb.data[2 * n + i] + a * cloud.2).clamp(0.0, 1.0);
            }
        }
        DegradeKind::Blur => {
            let sigma = match level {
                DegradeLevel::Mild => 1.0,
                DegradeLevel::Strong => 2.5,
            };
            for c in 0..3 {
                let plane = gaussian_blur_channel(&rgb.data[c * n..(c + 1) * n], size, sigma);
                rgb.data[c * n..(c + 1) * n].copy_from_slice(&plane);
            }
        }
        DegradeKind::Noise => {
            let sigma = match level {
                DegradeLevel::Mild => 0.05,
                DegradeLevel::Strong => 0.15,
            };
            for v in rgb.data.iter_mut() {
                *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
            }
        }
    }
    Patch::from_rgb(&rgb).expect("degraded patch keeps shape and range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Scene-to-split map plus non-fatal warnings (e.g. an empty split).
#[derive(Debug, Clone)]
pub struct SplitAssignment {
    pub by_scene: BTreeMap<String, Split>,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, scene_id: &str) -> Option<Split> {
        self.by_scene.get(scene_id).copied()
    }
}

/// Shuffles scenes by seed, then fills train, then val, then test until each
/// reaches its patch-count target; a scene never straddles splits.
pub fn scene_split(
    manifest: &[(String, String)],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment, NnError> {
    let (ftr, fva, fte) = fractions;
    if (ftr + fva + fte - 1.0).abs() > 1e-9 {
        return Err(NnError::Domain(format!(
            "split fractions sum to {}, expected 1",
            ftr + fva + fte
        )));
    }
    if manifest.is_empty() {
        return Err(NnError::Domain("empty manifest".into()));
    }
    // unique scenes in first-appearance order, with patch counts
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for (_, scene) in manifest {
        if !counts.contains_key(scene) {
            order.push(scene.clone());
        }
        *counts.entry(scene.clone()).or_insert(0) += 1;
    }
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut order);

    let total = manifest.len() as f64;
    let t_train = libm::round(ftr * total) as usize;
    let t_val = libm::round(fva * total) as usize;

    let mut by_scene = BTreeMap::new();
    let mut n_train = 0usize;
    let mut n_val = 0usize;
    for scene in order {
        let c = counts[&scene];
        let split = if n_train < t_train {
            n_train += c;
            Split::Train
        } else if n_val < t_val {
            n_val += c;
            Split::Val
        } else {
            Split::Test
        };
        by_scene.insert(scene, split);
    }

    let mut warnings = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        if !by_scene.values().any(|&s| s == split) {
            warnings.push(format!("split {} received zero scenes", split.name()));
        }
    }
    Ok(SplitAssignment { by_scene, warnings })
}

/// Infinite class-balanced index stream: each sample is drawn with weight
/// 1 / count(its class), so expected per-class draw frequency is uniform
/// over the classes present.
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    rng: Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[Severity], seed: u64) -> Result<Self, NnError> {
        if labels.is_empty() {
            return Err(NnError::Domain("weighted sampler needs at least one label".into()));
        }
        let mut counts = [0usize; 3];
        for l in labels {
            counts[l.index()] += 1;
        }
        let mut cumulative = Vec::with_capacity(labels.len());
        let mut acc = 0.0;
        for l in labels {
            acc += 1.0 / counts[l.index()] as f64;
            cumulative.push(acc);
        }
        Ok(WeightedSampler { cumulative, rng: Rng::new(seed) })
    }

    pub fn next_index(&mut self) -> usize {
        let total = *self.cumulative.last().expect("nonempty");
        let u = self.rng.uniform() * total;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) => (i + 1).min(self.cumulative.len() - 1),
            Err(i) => i,
        }
    }
}

/// Spec for a whole synthetic dataset with controlled class proportions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_patches: usize,
    /// Desired (Light, Moderate, Heavy) proportions; normalized internally.
    pub proportions: [f64; 3],
    /// Distance kept between sampled tau values and the class thresholds;
    /// smaller margins make the task harder.
    pub tau_margin: f64,
    pub patch_size: usize,
    pub patches_per_scene: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_patches: 600,
            proportions: [1.0 / 3.0; 3],
            tau_margin: 0.15,
            patch_size: 64,
            patches_per_scene: 3,
            label_mode: LabelMode::Oracle,
            seed: 7,
        }
    }
}

/// Tau sampling range for a class, honoring the margin around thresholds.
fn tau_range(class: Severity, margin: f64) -> (f64, f64) {
    match class {
        Severity::Light => (0.0, (0.5 - margin).max(0.01)),
        Severity::Moderate => (0.5 + margin, 1.5 - margin),
        Severity::Heavy => (1.5 + margin, 3.0),
    }
}

/// One generated example: the patch, its label, and its scene id.
#[derive(Debug, Clone)]
pub struct Example {
    pub patch: Patch,
    pub label: SeverityLabel,
    pub scene_id: String,
}

/// Generates the dataset scene by scene; every patch of a scene shares
/// terrain style, class, and plume geometry (with per-patch tau jitter
/// inside the class range).
pub fn synthesize_dataset(spec: &DatasetSpec) -> Result<Vec<Example>, NnError> {
    let psum: f64 = spec.proportions.iter().sum();
    if psum <= 0.0 {
        return Err(NnError::Domain("class proportions must be positive".into()));
    }
    let mut rng = Rng::new(spec.seed);
    let mut examples: Vec<Example> = Vec::with_capacity(spec.n_patches);
    let mut scene_idx = 0usize;
    while examples.len() < spec.n_patches {
        // pick the class furthest below its target proportion
        let mut counts = [0usize; 3];
        for e in &examples {
            counts[e.label.class.index()] += 1;
        }
        let total = examples.len().max(1) as f64;
        let mut class = Severity::Light;
        let mut worst = f64::INFINITY;
        for k in 0..3 {
            let target = spec.proportions[k] / psum;
            if target <= 0.0 {
                continue;
            }
            let deficit = counts[k] as f64 / total - target;
            if deficit < worst {
                worst = deficit;
                class = Severity::from_index(k).unwrap();
            }
        }
        let (lo, hi) = tau_range(class, spec.tau_margin);
        let scene_id = format!("scene{scene_idx:05}");
        let terrain_seed = rng.next_u64();
        let center = (rng.uniform_in(0.25, 0.75), rng.uniform_in(0.25, 0.75));
        let radius = rng.uniform_in(0.3, 0.5);
        let anisotropy = rng.uniform_in(0.7, 1.4);
        for _ in 0..spec.patches_per_scene {
            if examples.len() >= spec.n_patches {
                break;
            }
            let scene = SceneSpec {
                scene_id: scene_id.clone(),
                terrain_seed,
                tau: rng.uniform_in(lo, hi),
                plume_center: center,
                plume_radius: radius,
                plume_anisotropy: anisotropy,
            };
            let (patch, label) = generate_patch(&scene, spec.patch_size, rng.next_u64(), spec.label_mode)?;
            examples.push(Example { patch, label, scene_id: scene_id.clone() });
        }
        scene_idx += 1;
    }
    Ok(examples)
}
