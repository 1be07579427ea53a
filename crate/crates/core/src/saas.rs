//! Self-adaptive attention scaling.
//!
//! Pipeline, recomputed fresh at every step inside the scaling window:
//! average the vital-layer cross-attention per condition token, Gaussian-
//! smooth, aggregate per sub-instruction and for the input image, min-max
//! normalize, threshold into masks, and take the in-mask image/instruction
//! activation ratio as each sub-instruction's scaling factor. The plan built
//! at step `t` multiplies that sub-instruction's attention inside its mask at
//! step `t+1`, after which rows are renormalized.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::Serialize;

use crate::backbone::{AttentionRecord, SamplingController};
use crate::error::{Error, Result};
use crate::layout::{slice_cross_attention, AttentionPolicy, Span, TokenLayout};
use crate::mat::Mat;
use crate::spatial::{InstructionMask, MapSubject, SpatialActivationMap};

/// Default mask threshold for instruction-based editing.
pub const TAU_EDITING: f64 = 0.4;
/// Default mask threshold for visual-conditional generation.
pub const TAU_VISUAL_CONDITIONAL: f64 = 0.2;
/// Default cap on the scaling factor.
pub const DEFAULT_ALPHA_CAP: f64 = 20.0;
/// Default histogram resolution for automatic thresholding.
pub const OTSU_DEFAULT_BINS: usize = 256;

/// How the mask threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    /// Use the configured `tau`.
    Fixed,
    /// Pick `tau` per instruction by between-class variance maximization.
    Otsu,
}

/// Per-step coefficient applied on top of the scaling factor.
#[derive(Debug, Clone, PartialEq)]
pub enum XiSchedule {
    Constant(f64),
    /// Indexed by the step the plan was computed at.
    Table(Vec<f64>),
}

impl XiSchedule {
    pub fn at(&self, step: usize) -> Result<f64> {
        match self {
            XiSchedule::Constant(v) => Ok(*v),
            XiSchedule::Table(t) => t.get(step).copied().ok_or_else(|| {
                Error::InvalidConfig(format!("xi table has no entry for step {step}"))
            }),
        }
    }
}

/// What happens to instruction attention outside the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutsideMaskMode {
    /// Zero it (the literal reading of the scaling rule).
    Zero,
    /// Leave it unchanged.
    Keep,
}

/// Settings for the scaling pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SaasConfig {
    pub tau: f64,
    pub threshold_mode: ThresholdMode,
    pub xi: XiSchedule,
    pub vital_layers: BTreeSet<usize>,
    /// Steps (execution order) during which scaling is active.
    pub saas_window: Range<usize>,
    pub alpha_cap: f64,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub outside_mask_mode: OutsideMaskMode,
}

impl SaasConfig {
    /// Defaults for a run: `tau` 0.4, deepest half of the layers vital,
    /// scaling over the first 40% of steps (20 of 50), factor cap 20,
    /// 3×3 kernel with sigma 1.
    pub fn defaults_for(num_layers: usize, num_steps: usize) -> Self {
        Self {
            tau: TAU_EDITING,
            threshold_mode: ThresholdMode::Fixed,
            xi: XiSchedule::Constant(1.0),
            vital_layers: (num_layers / 2..num_layers).collect(),
            saas_window: 0..num_steps * 2 / 5,
            alpha_cap: DEFAULT_ALPHA_CAP,
            kernel_size: 3,
            kernel_sigma: 1.0,
            outside_mask_mode: OutsideMaskMode::Zero,
        }
    }

    pub fn validate(&self, num_layers: usize, num_steps: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must be in [0, 1], got {}",
                self.tau
            )));
        }
        if self.alpha_cap.is_nan() || self.alpha_cap <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha_cap must be > 0, got {}",
                self.alpha_cap
            )));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if self.kernel_sigma.is_nan() || self.kernel_sigma <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_sigma must be > 0, got {}",
                self.kernel_sigma
            )));
        }
        if self.vital_layers.is_empty() {
            return Err(Error::InvalidConfig("vital_layers must be nonempty".into()));
        }
        if let Some(&max) = self.vital_layers.iter().next_back() {
            if max >= num_layers {
                return Err(Error::InvalidConfig(format!(
                    "vital layer {max} out of range (backbone has {num_layers} layers)"
                )));
            }
        }
        if self.saas_window.end > num_steps {
            return Err(Error::InvalidConfig(format!(
                "saas_window end {} exceeds num_steps {num_steps}",
                self.saas_window.end
            )));
        }
        match &self.xi {
            XiSchedule::Constant(v) => {
                if !v.is_finite() {
                    return Err(Error::InvalidConfig("xi must be finite".into()));
                }
            }
            XiSchedule::Table(t) => {
                if t.len() < num_steps {
                    return Err(Error::InvalidConfig(format!(
                        "xi table has {} entries for {num_steps} steps",
                        t.len()
                    )));
                }
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidConfig("xi table must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Layer-and-head-averaged spatial map per condition key token, in slice
/// column order.
#[derive(Debug, Clone)]
pub struct ConditionTokenMaps {
    maps: Vec<SpatialActivationMap>,
    grid_side: usize,
}

impl ConditionTokenMaps {
    pub fn maps(&self) -> &[SpatialActivationMap] {
        &self.maps
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    /// Apply the Gaussian filter to every per-token map.
    pub fn smoothed(&self, kernel_size: usize, sigma: f64) -> Result<ConditionTokenMaps> {
        let maps = self
            .maps
            .iter()
            .map(|m| gaussian_smooth(m, kernel_size, sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(ConditionTokenMaps {
            maps,
            grid_side: self.grid_side,
        })
    }
}

/// Mean cross-attention map per condition token over the vital layers and
/// all heads at one step.
pub fn average_vital_cross_attention(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    vital_layers: &BTreeSet<usize>,
) -> Result<ConditionTokenMaps> {
    if vital_layers.is_empty() {
        return Err(Error::InvalidConfig("vital_layers must be nonempty".into()));
    }
    let used: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| vital_layers.contains(&r.layer))
        .collect();
    if let Some(first) = used.first() {
        if used.iter().any(|r| r.step != first.step) {
            return Err(Error::MissingRecords(
                "records span multiple steps; pass a single step's records".into(),
            ));
        }
    }
    for &layer in vital_layers {
        if !used.iter().any(|r| r.layer == layer) {
            return Err(Error::MissingRecords(format!(
                "no record for vital layer {layer}"
            )));
        }
    }

    let g = layout.grid_side();
    let cols = layout.condition_len();
    let rows = layout.noise_len();
    let mut acc = vec![0.0f64; rows * cols];
    for record in &used {
        let slice = slice_cross_attention(&record.matrix, layout)?;
        for r in 0..rows {
            for c in 0..cols {
                acc[r * cols + c] += slice.get(r, c);
            }
        }
    }
    let count = used.len() as f64;
    let maps = (0..cols)
        .map(|c| {
            let key = layout.key_of_slice_col(c)?;
            let column: Vec<f64> = (0..rows).map(|r| acc[r * cols + c] / count).collect();
            SpatialActivationMap::from_values(g, column, MapSubject::KeyToken(key))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionTokenMaps { maps, grid_side: g })
}

/// Normalized 2-D Gaussian kernel, row-major `size`×`size`. Weights sum to 1.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Result<Vec<f64>> {
    if kernel_size == 0 || kernel_size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "kernel_size must be odd and >= 1, got {kernel_size}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sigma must be > 0, got {sigma}"
        )));
    }
    let half = (kernel_size / 2) as isize;
    let mut kernel = Vec::with_capacity(kernel_size * kernel_size);
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            sum += w;
        }
    }
    for w in &mut kernel {
        *w /= sum;
    }
    Ok(kernel)
}

/// Mirror index without repeating the edge sample: `-1 -> 1`, `n -> n-2`.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// 2-D convolution with a normalized Gaussian kernel under reflect padding.
/// Output values never leave `[min(map), max(map)]`.
pub fn gaussian_smooth(
    map: &SpatialActivationMap,
    kernel_size: usize,
    sigma: f64,
) -> Result<SpatialActivationMap> {
    let kernel = gaussian_kernel(kernel_size, sigma)?;
    let g = map.grid_side();
    let half = (kernel_size / 2) as isize;
    let mut out = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            let mut v = 0.0;
            for dy in -half..=half {
                for dx in -half..=half {
                    let kr = (dy + half) as usize;
                    let kc = (dx + half) as usize;
                    let sr = reflect_index(row as isize + dy, g);
                    let sc = reflect_index(col as isize + dx, g);
                    v += kernel[kr * kernel_size + kc] * map.get(sr, sc);
                }
            }
            out.push(v);
        }
    }
    SpatialActivationMap::from_values(g, out, map.subject())
}

fn sum_maps_over_columns(
    maps: &ConditionTokenMaps,
    cols: impl Iterator<Item = usize>,
    subject: MapSubject,
) -> Result<SpatialActivationMap> {
    let g = maps.grid_side();
    let mut acc = vec![0.0f64; g * g];
    let mut any = false;
    for col in cols {
        let map = maps
            .maps
            .get(col)
            .ok_or_else(|| Error::IndexOutOfRange(format!("slice column {col} out of range")))?;
        for (a, &v) in acc.iter_mut().zip(map.values()) {
            *a += v;
        }
        any = true;
    }
    if !any {
        return Err(Error::EmptySpan("aggregation over an empty span".into()));
    }
    SpatialActivationMap::from_values(g, acc, subject)
}

/// Elementwise sum of the (smoothed) per-token maps over one sub-instruction.
pub fn aggregate_instruction_map(
    maps: &ConditionTokenMaps,
    layout: &TokenLayout,
    instruction: usize,
) -> Result<SpatialActivationMap> {
    let span = layout
        .sub_instructions()
        .get(instruction)
        .cloned()
        .ok_or_else(|| {
            Error::IndexOutOfRange(format!(
                "instruction {instruction} out of range ({} spans)",
                layout.num_sub_instructions()
            ))
        })?;
    let cols: Vec<usize> = span
        .map(|key| {
            layout
                .slice_col(key)
                .ok_or_else(|| Error::IndexOutOfRange(format!("key {key} has no slice column")))
        })
        .collect::<Result<Vec<_>>>()?;
    sum_maps_over_columns(maps, cols.into_iter(), MapSubject::Instruction(instruction))
}

/// Elementwise sum of the (smoothed) per-token maps over the input image.
pub fn aggregate_image_map(
    maps: &ConditionTokenMaps,
    layout: &TokenLayout,
) -> Result<SpatialActivationMap> {
    if !layout.has_image() {
        return Err(Error::EmptySpan("layout has no input-image segment".into()));
    }
    let cols: Vec<usize> = layout
        .image_span()
        .map(|key| {
            layout
                .slice_col(key)
                .ok_or_else(|| Error::IndexOutOfRange(format!("key {key} has no slice column")))
        })
        .collect::<Result<Vec<_>>>()?;
    sum_maps_over_columns(maps, cols.into_iter(), MapSubject::InputImage)
}

/// A map scaled into `[0, 1]`, or all zeros when the input was constant.
#[derive(Debug, Clone)]
pub struct NormalizedMap {
    pub map: SpatialActivationMap,
    /// True when the input had no spread; the map is then all zeros.
    pub degenerate: bool,
}

/// Min-max normalization: `(x - min) / (max - min)`.
pub fn minmax_normalize(map: &SpatialActivationMap) -> NormalizedMap {
    let min = map.min();
    let max = map.max();
    if max > min {
        // Division keeps the endpoints exact: min -> 0, max -> 1.
        let spread = max - min;
        let values = map.values().iter().map(|&v| (v - min) / spread).collect();
        NormalizedMap {
            map: SpatialActivationMap::from_values(map.grid_side(), values, map.subject())
                .expect("same length as input"),
            degenerate: false,
        }
    } else {
        NormalizedMap {
            map: SpatialActivationMap::constant(map.grid_side(), 0.0, map.subject()),
            degenerate: true,
        }
    }
}

/// Threshold a normalized map into a binary mask: `cell = (value >= tau)`.
pub fn extract_mask(
    map: &SpatialActivationMap,
    tau: f64,
    instruction: usize,
    source_step: usize,
) -> InstructionMask {
    let cells = map.values().iter().map(|&v| v >= tau).collect();
    InstructionMask::from_cells(map.grid_side(), cells, instruction, source_step)
        .expect("same length as input")
}

/// Automatic threshold selection result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    /// Bin-boundary threshold in `[0, 1]`.
    pub tau: f64,
    /// True when the histogram admits no two-class split.
    pub degenerate: bool,
}

/// Between-class-variance-maximizing split of a histogram.
///
/// Candidate thresholds are the bin boundaries `k / bins` for `k` in
/// `1..bins`; ties break toward the smaller threshold. A histogram with all
/// mass in one bin is degenerate and yields `tau = 0`.
pub fn otsu_from_histogram(hist: &[u64]) -> OtsuResult {
    let bins = hist.len();
    let total: f64 = hist.iter().map(|&h| h as f64).sum();
    if bins < 2 || total == 0.0 {
        return OtsuResult {
            tau: 0.0,
            degenerate: true,
        };
    }
    let weighted_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &h)| i as f64 * h as f64)
        .sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for k in 1..bins {
        w0 += hist[k - 1] as f64;
        sum0 += (k - 1) as f64 * hist[k - 1] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.is_none_or(|(_, bv)| var > bv) {
            best = Some((k, var));
        }
    }
    match best {
        Some((k, _)) => OtsuResult {
            tau: k as f64 / bins as f64,
            degenerate: false,
        },
        None => OtsuResult {
            tau: 0.0,
            degenerate: true,
        },
    }
}

/// Automatic threshold for a normalized map via [`otsu_from_histogram`].
pub fn otsu_threshold(map: &SpatialActivationMap, bins: usize) -> Result<OtsuResult> {
    if map.values().is_empty() {
        return Err(Error::EmptySpan("otsu needs a nonempty map".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "otsu needs at least 2 bins, got {bins}"
        )));
    }
    let mut hist = vec![0u64; bins];
    for &v in map.values() {
        let bin = ((v * bins as f64) as usize).min(bins - 1);
        hist[bin] += 1;
    }
    Ok(otsu_from_histogram(&hist))
}

/// The in-mask activation ratio and its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleFactor {
    pub alpha: f64,
    /// True when the ratio was undefined (empty mask or vanishing
    /// activation) and `alpha` fell back to 1.
    pub skipped: bool,
}

/// Ratio of in-mask image activation to in-mask instruction activation,
/// clamped to `(0, alpha_cap]`.
pub fn compute_scaling_factor(
    image_map: &SpatialActivationMap,
    instruction_map: &SpatialActivationMap,
    mask: &InstructionMask,
    alpha_cap: f64,
) -> Result<ScaleFactor> {
    let g = mask.grid_side();
    if image_map.grid_side() != g || instruction_map.grid_side() != g {
        return Err(Error::DimensionMismatch(
            "maps and mask have differing grid sides".into(),
        ));
    }
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (i, &set) in mask.cells().iter().enumerate() {
        if set {
            numerator += image_map.values()[i];
            denominator += instruction_map.values()[i];
        }
    }
    if mask.is_empty() || denominator == 0.0 || numerator == 0.0 {
        return Ok(ScaleFactor {
            alpha: 1.0,
            skipped: true,
        });
    }
    Ok(ScaleFactor {
        alpha: (numerator / denominator).min(alpha_cap),
        skipped: false,
    })
}

/// One sub-instruction's share of a plan.
#[derive(Debug, Clone)]
pub struct PlanEntry {
    pub instruction: usize,
    pub mask: InstructionMask,
    pub alpha: f64,
    /// Threshold the mask was cut at.
    pub tau: f64,
    /// Skipped entries are not applied at all.
    pub skipped: bool,
    /// True when the normalized map had no spread.
    pub degenerate: bool,
}

/// Masks and scaling factors computed at `source_step`, applied at the next
/// step.
#[derive(Debug, Clone)]
pub struct SaasPlan {
    pub entries: Vec<PlanEntry>,
    pub source_step: usize,
}

impl SaasPlan {
    /// All-ones masks with factor 1 for every sub-instruction.
    pub fn identity(layout: &TokenLayout, source_step: usize) -> Self {
        let entries = (0..layout.num_sub_instructions())
            .map(|i| PlanEntry {
                instruction: i,
                mask: InstructionMask::all_ones(layout.grid_side(), i, source_step),
                alpha: 1.0,
                tau: 0.0,
                skipped: false,
                degenerate: false,
            })
            .collect();
        Self {
            entries,
            source_step,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Run the full mask-and-factor pipeline on one step's records.
pub fn build_plan(
    records: &[AttentionRecord],
    step: usize,
    layout: &TokenLayout,
    config: &SaasConfig,
) -> Result<SaasPlan> {
    let k = layout.num_sub_instructions();
    if k == 0 {
        return Ok(SaasPlan {
            entries: Vec::new(),
            source_step: step,
        });
    }
    let token_maps = average_vital_cross_attention(records, layout, &config.vital_layers)?;
    let smoothed = token_maps.smoothed(config.kernel_size, config.kernel_sigma)?;
    let image_map = if layout.has_image() {
        Some(aggregate_image_map(&smoothed, layout)?)
    } else {
        None
    };

    let mut entries = Vec::with_capacity(k);
    for instruction in 0..k {
        let instruction_map = aggregate_instruction_map(&smoothed, layout, instruction)?;
        let normalized = minmax_normalize(&instruction_map);
        if normalized.degenerate {
            // A featureless map carries no localization signal; scaling
            // globally off an all-ones mask would be wrong, so skip.
            entries.push(PlanEntry {
                instruction,
                mask: InstructionMask::all_zeros(layout.grid_side(), instruction, step),
                alpha: 1.0,
                tau: config.tau,
                skipped: true,
                degenerate: true,
            });
            continue;
        }
        let tau = match config.threshold_mode {
            ThresholdMode::Fixed => config.tau,
            ThresholdMode::Otsu => otsu_threshold(&normalized.map, OTSU_DEFAULT_BINS)?.tau,
        };
        let mask = extract_mask(&normalized.map, tau, instruction, step);
        let factor = match &image_map {
            Some(image) => {
                compute_scaling_factor(image, &instruction_map, &mask, config.alpha_cap)?
            }
            None => ScaleFactor {
                alpha: 1.0,
                skipped: true,
            },
        };
        entries.push(PlanEntry {
            instruction,
            mask,
            alpha: factor.alpha,
            tau,
            skipped: factor.skipped,
            degenerate: false,
        });
    }
    Ok(SaasPlan {
        entries,
        source_step: step,
    })
}

/// Result of applying a plan to one attention matrix.
#[derive(Debug, Clone)]
pub struct AppliedPlan {
    pub matrix: Mat,
    /// False when every touched value kept its bits (factor exactly 1 and
    /// nothing zeroed); renormalization is then unnecessary.
    pub modified: bool,
}

/// Scale each sub-instruction's attention inside its mask by `xi * alpha`;
/// outside the mask either zero it (`Zero`) or leave it (`Keep`). Does not
/// renormalize; pair with [`renormalize_attention`].
pub fn apply_plan(
    attention: &Mat,
    layout: &TokenLayout,
    plan: &SaasPlan,
    xi: f64,
    outside_mask_mode: OutsideMaskMode,
) -> Result<AppliedPlan> {
    if attention.rows() != layout.total_len() || attention.cols() != layout.total_len() {
        return Err(Error::DimensionMismatch(format!(
            "attention is {}x{}, layout expects {}",
            attention.rows(),
            attention.cols(),
            layout.total_len()
        )));
    }
    if plan.entries.len() != layout.num_sub_instructions() {
        return Err(Error::InvalidLayout(format!(
            "plan has {} entries for {} sub-instructions",
            plan.entries.len(),
            layout.num_sub_instructions()
        )));
    }
    let noise = layout.noise_span();
    let mut out = attention.clone();
    let mut modified = false;
    for entry in &plan.entries {
        if entry.skipped {
            continue;
        }
        if entry.mask.grid_side() != layout.grid_side() {
            return Err(Error::InvalidLayout(format!(
                "mask grid {} does not match layout grid {}",
                entry.mask.grid_side(),
                layout.grid_side()
            )));
        }
        let span = layout
            .sub_instructions()
            .get(entry.instruction)
            .cloned()
            .ok_or_else(|| {
                Error::InvalidLayout(format!(
                    "plan entry references instruction {}",
                    entry.instruction
                ))
            })?;
        let factor = xi * entry.alpha;
        for q in noise.clone() {
            let cell = q - noise.start;
            let inside = entry.mask.is_set_flat(cell);
            let row = out.row_mut(q);
            for key in span.clone() {
                if inside {
                    if factor != 1.0 && row[key] != 0.0 {
                        modified = true;
                    }
                    row[key] *= factor;
                } else if outside_mask_mode == OutsideMaskMode::Zero && row[key] != 0.0 {
                    row[key] = 0.0;
                    modified = true;
                }
            }
        }
    }
    Ok(AppliedPlan {
        matrix: out,
        modified,
    })
}

/// Divide every query row with positive visible mass by its sum. A row whose
/// mass reached zero is an error.
pub fn renormalize_attention(attention: &Mat, policy: &AttentionPolicy) -> Result<Mat> {
    if attention.rows() != policy.total_len() || attention.cols() != policy.total_len() {
        return Err(Error::DimensionMismatch(format!(
            "attention is {}x{}, policy expects {}",
            attention.rows(),
            attention.cols(),
            policy.total_len()
        )));
    }
    let mut out = attention.clone();
    for q in 0..out.rows() {
        let allow = policy.row(q);
        let mut sum = 0.0;
        let mut visible = 0usize;
        for (k, &a) in allow.iter().enumerate() {
            if a {
                sum += out.get(q, k);
                visible += 1;
            }
        }
        if visible == 0 {
            continue;
        }
        if sum <= 0.0 {
            return Err(Error::ZeroMassRow { row: q });
        }
        let inv = 1.0 / sum;
        for v in out.row_mut(q) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Ablation baseline: multiply all noise-to-instruction attention by a
/// constant factor, no mask, then renormalize. Factor 1 is bit-neutral.
pub fn fixed_scale_baseline(
    attention: &Mat,
    layout: &TokenLayout,
    policy: &AttentionPolicy,
    spans: &[Span],
    factor: f64,
) -> Result<Mat> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "fixed scaling factor must be positive and finite, got {factor}"
        )));
    }
    let mut out = attention.clone();
    let mut modified = false;
    for q in layout.noise_span() {
        let row = out.row_mut(q);
        for span in spans {
            for key in span.clone() {
                if factor != 1.0 && row[key] != 0.0 {
                    modified = true;
                }
                row[key] *= factor;
            }
        }
    }
    if modified {
        renormalize_attention(&out, policy)
    } else {
        Ok(out)
    }
}

/// One step's plan summary, kept for run manifests.
#[derive(Debug, Clone, Serialize)]
pub struct PlanLogEntry {
    pub step: usize,
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
    pub skipped: Vec<bool>,
}

/// Sampling controller implementing the adjacent-step contract: observe the
/// step's trace, build a plan, apply it during the next step's vital layers.
#[derive(Debug)]
pub struct SaasController {
    config: SaasConfig,
    force_alpha: Option<f64>,
    force_masks_all: bool,
    pending: Option<SaasPlan>,
    plan_log: Vec<PlanLogEntry>,
}

impl SaasController {
    pub fn new(config: SaasConfig) -> Self {
        Self {
            config,
            force_alpha: None,
            force_masks_all: false,
            pending: None,
            plan_log: Vec::new(),
        }
    }

    /// Override every computed factor (diagnostic knob).
    pub fn with_forced_alpha(mut self, alpha: f64) -> Self {
        self.force_alpha = Some(alpha);
        self
    }

    /// Replace every computed mask with an all-ones mask (diagnostic knob).
    pub fn with_all_ones_masks(mut self) -> Self {
        self.force_masks_all = true;
        self
    }

    pub fn config(&self) -> &SaasConfig {
        &self.config
    }

    pub fn plan_log(&self) -> &[PlanLogEntry] {
        &self.plan_log
    }
}

impl SamplingController for SaasController {
    fn intervene(
        &self,
        step: usize,
        layer: usize,
        head: usize,
        attention: Mat,
        layout: &TokenLayout,
        policy: &AttentionPolicy,
    ) -> Result<Mat> {
        let _ = head; // masks come from layer-and-head-averaged maps; all heads scale alike
        if !self.config.saas_window.contains(&step) || !self.config.vital_layers.contains(&layer) {
            return Ok(attention);
        }
        let Some(plan) = &self.pending else {
            // Bootstrap: the window's first step has no prior plan.
            return Ok(attention);
        };
        if plan.source_step + 1 != step {
            return Ok(attention);
        }
        let xi = self.config.xi.at(plan.source_step)?;
        let applied = apply_plan(&attention, layout, plan, xi, self.config.outside_mask_mode)?;
        if applied.modified {
            renormalize_attention(&applied.matrix, policy)
        } else {
            Ok(applied.matrix)
        }
    }

    fn observe_step(
        &mut self,
        step: usize,
        records: &[AttentionRecord],
        layout: &TokenLayout,
    ) -> Result<()> {
        if !self.config.saas_window.contains(&step) {
            return Ok(());
        }
        let mut plan = build_plan(records, step, layout, &self.config)?;
        if self.force_masks_all {
            for entry in &mut plan.entries {
                entry.mask = InstructionMask::all_ones(layout.grid_side(), entry.instruction, step);
                entry.skipped = false;
            }
        }
        if let Some(alpha) = self.force_alpha {
            for entry in &mut plan.entries {
                entry.alpha = alpha;
                entry.skipped = false;
            }
        }
        self.plan_log.push(PlanLogEntry {
            step,
            alphas: plan.entries.iter().map(|e| e.alpha).collect(),
            taus: plan.entries.iter().map(|e| e.tau).collect(),
            skipped: plan.entries.iter().map(|e| e.skipped).collect(),
        });
        self.pending = Some(plan);
        Ok(())
    }
}

/// Controller for the fixed-factor ablation baseline: same injection points
/// as the adaptive controller, constant factor, no masks, no plan.
#[derive(Debug)]
pub struct FixedScaleController {
    factor: f64,
    vital_layers: BTreeSet<usize>,
    window: Range<usize>,
}

impl FixedScaleController {
    pub fn new(factor: f64, vital_layers: BTreeSet<usize>, window: Range<usize>) -> Self {
        Self {
            factor,
            vital_layers,
            window,
        }
    }
}

impl SamplingController for FixedScaleController {
    fn intervene(
        &self,
        step: usize,
        layer: usize,
        _head: usize,
        attention: Mat,
        layout: &TokenLayout,
        policy: &AttentionPolicy,
    ) -> Result<Mat> {
        if !self.window.contains(&step) || !self.vital_layers.contains(&layer) {
            return Ok(attention);
        }
        fixed_scale_baseline(
            &attention,
            layout,
            policy,
            layout.sub_instructions(),
            self.factor,
        )
    }

    fn observe_step(
        &mut self,
        _step: usize,
        _records: &[AttentionRecord],
        _layout: &TokenLayout,
    ) -> Result<()> {
        Ok(())
    }
}
