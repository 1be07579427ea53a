//! Deterministic toy transformer denoiser with flow-matching sampling and
//! per-layer attention capture.
//!
//! The backbone is the test vehicle for attention scaling: a small
//! pre-norm transformer over the joint `[image, text, noise]` sequence whose
//! every forward pass is a pure function of (weights seed, sampler seed,
//! config, layout). Attention matrices can be scripted exactly (`rigged`
//! mode), intercepted per (layer, head), and captured per step.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{build_attention_policy, AttentionPolicy, TokenLayout};
use crate::mat::Mat;
use crate::rng::{derive_seed, normal_vec, seeded_rng, standard_normal};

/// Shape of the toy backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            num_heads: 4,
            model_dim: 64,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.num_heads == 0 {
            return Err(Error::InvalidConfig("num_heads must be >= 1".into()));
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Condition segment kind, used to derive input embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Image,
    Text,
}

/// Per-layer scripted attention logits: `(layer, query, key) -> logit`.
pub type LogitScript = Arc<dyn Fn(usize, usize, usize) -> f64 + Send + Sync>;

enum AttentionSource {
    /// Logits from Q·Kᵀ/√d of the seeded projections.
    Seeded,
    /// Logits read from the script; projections still drive values/output.
    Rigged(LogitScript),
}

impl fmt::Debug for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionSource::Seeded => f.write_str("Seeded"),
            AttentionSource::Rigged(_) => f.write_str("Rigged(<script>)"),
        }
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    w1: Mat,
    w2: Mat,
}

// Stream tags for seed derivation; one role per weight family.
const ROLE_WQ: u64 = 1;
const ROLE_WK: u64 = 2;
const ROLE_WV: u64 = 3;
const ROLE_WO: u64 = 4;
const ROLE_W1: u64 = 5;
const ROLE_W2: u64 = 6;
const ROLE_OUT: u64 = 7;
const ROLE_IMAGE_EMBED: u64 = 8;
const ROLE_TEXT_EMBED: u64 = 9;

fn stream(role: u64, index: usize) -> u64 {
    (role << 32) | index as u64
}

/// Transformer weights, reproducible bit-exactly from (seed, config).
#[derive(Debug)]
pub struct BackboneWeights {
    config: BackboneConfig,
    layers: Vec<LayerWeights>,
    out_proj: Mat,
    attention: AttentionSource,
}

fn seeded_mat(seed: u64, rows: usize, cols: usize, sigma: f64) -> Mat {
    let mut rng = seeded_rng(seed);
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| standard_normal(&mut rng) * sigma)
            .collect(),
    )
}

fn build_weights(config: BackboneConfig, attention: AttentionSource) -> BackboneWeights {
    let dim = config.model_dim;
    let ffn = 2 * dim;
    let proj_sigma = 1.0 / (dim as f64).sqrt();
    let ffn_sigma = 1.0 / (ffn as f64).sqrt();
    let layers = (0..config.num_layers)
        .map(|l| LayerWeights {
            wq: seeded_mat(
                derive_seed(config.seed, stream(ROLE_WQ, l)),
                dim,
                dim,
                proj_sigma,
            ),
            wk: seeded_mat(
                derive_seed(config.seed, stream(ROLE_WK, l)),
                dim,
                dim,
                proj_sigma,
            ),
            wv: seeded_mat(
                derive_seed(config.seed, stream(ROLE_WV, l)),
                dim,
                dim,
                proj_sigma,
            ),
            wo: seeded_mat(
                derive_seed(config.seed, stream(ROLE_WO, l)),
                dim,
                dim,
                proj_sigma,
            ),
            w1: seeded_mat(
                derive_seed(config.seed, stream(ROLE_W1, l)),
                dim,
                ffn,
                proj_sigma,
            ),
            w2: seeded_mat(
                derive_seed(config.seed, stream(ROLE_W2, l)),
                ffn,
                dim,
                ffn_sigma,
            ),
        })
        .collect();
    let out_proj = seeded_mat(
        derive_seed(config.seed, stream(ROLE_OUT, 0)),
        dim,
        dim,
        proj_sigma,
    );
    BackboneWeights {
        config,
        layers,
        out_proj,
        attention,
    }
}

/// Deterministically initialize seeded weights.
pub fn init_backbone(config: BackboneConfig) -> Result<BackboneWeights> {
    config.validate()?;
    Ok(build_weights(config, AttentionSource::Seeded))
}

/// Build weights whose attention logits come from `script` (default config).
///
/// Forward passes then produce attention equal to the softmax of the scripted
/// logits under the visibility policy; values, projections, and embeddings
/// stay seeded so sampling still runs end to end.
pub fn rig_backbone(script: LogitScript) -> BackboneWeights {
    build_weights(BackboneConfig::default(), AttentionSource::Rigged(script))
}

/// [`rig_backbone`] with an explicit config.
pub fn rig_backbone_with(config: BackboneConfig, script: LogitScript) -> Result<BackboneWeights> {
    config.validate()?;
    Ok(build_weights(config, AttentionSource::Rigged(script)))
}

impl BackboneWeights {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn is_rigged(&self) -> bool {
        matches!(self.attention, AttentionSource::Rigged(_))
    }

    /// Seeded input embedding for one condition token.
    pub fn condition_embedding(&self, segment: Segment, offset: usize) -> Vec<f64> {
        let role = match segment {
            Segment::Image => ROLE_IMAGE_EMBED,
            Segment::Text => ROLE_TEXT_EMBED,
        };
        let mut rng = seeded_rng(derive_seed(self.config.seed, stream(role, offset)));
        normal_vec(&mut rng, self.config.model_dim)
    }

    /// State of a maximal-intensity ("pure white") image token: all ones.
    pub fn blank_image_embedding(&self) -> Vec<f64> {
        vec![1.0; self.config.model_dim]
    }

    /// Designated padding embedding for blank text: all zeros.
    pub fn padding_embedding(&self) -> Vec<f64> {
        vec![0.0; self.config.model_dim]
    }

    /// True when every weight matrix has identical bits.
    pub fn bits_eq(&self, other: &BackboneWeights) -> bool {
        self.config == other.config
            && self.out_proj.bits_eq(&other.out_proj)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.wq.bits_eq(&b.wq)
                    && a.wk.bits_eq(&b.wk)
                    && a.wv.bits_eq(&b.wv)
                    && a.wo.bits_eq(&b.wo)
                    && a.w1.bits_eq(&b.w1)
                    && a.w2.bits_eq(&b.w2)
            })
    }

    pub fn all_finite(&self) -> bool {
        self.out_proj.is_finite()
            && self.layers.iter().all(|l| {
                l.wq.is_finite()
                    && l.wk.is_finite()
                    && l.wv.is_finite()
                    && l.wo.is_finite()
                    && l.w1.is_finite()
                    && l.w2.is_finite()
            })
    }
}

/// Input-image and text token states fed to the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionStates {
    image: Mat,
    text: Mat,
}

impl ConditionStates {
    pub fn new(image: Mat, text: Mat) -> Self {
        Self { image, text }
    }

    /// Seeded "real input" embeddings for the layout's condition tokens.
    pub fn real(layout: &TokenLayout, weights: &BackboneWeights) -> Self {
        let dim = weights.config().model_dim;
        let mut image = Mat::zeros(layout.image_len(), dim);
        for i in 0..layout.image_len() {
            image
                .row_mut(i)
                .copy_from_slice(&weights.condition_embedding(Segment::Image, i));
        }
        let mut text = Mat::zeros(layout.text_len(), dim);
        for i in 0..layout.text_len() {
            text.row_mut(i)
                .copy_from_slice(&weights.condition_embedding(Segment::Text, i));
        }
        Self { image, text }
    }

    /// Blank input: white-image states and padding text states.
    pub fn blank_input(layout: &TokenLayout, weights: &BackboneWeights) -> Self {
        let dim = weights.config().model_dim;
        let white = weights.blank_image_embedding();
        let pad = weights.padding_embedding();
        let mut image = Mat::zeros(layout.image_len(), dim);
        for i in 0..layout.image_len() {
            image.row_mut(i).copy_from_slice(&white);
        }
        let mut text = Mat::zeros(layout.text_len(), dim);
        for i in 0..layout.text_len() {
            text.row_mut(i).copy_from_slice(&pad);
        }
        Self { image, text }
    }

    pub fn image(&self) -> &Mat {
        &self.image
    }

    pub fn text(&self) -> &Mat {
        &self.text
    }

    pub fn bits_eq(&self, other: &ConditionStates) -> bool {
        self.image.bits_eq(&other.image) && self.text.bits_eq(&other.text)
    }
}

/// Flow-matching sampler settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub image_guidance: f64,
    pub text_guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            num_steps: 50,
            image_guidance: 1.6,
            text_guidance: 2.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        if !self.image_guidance.is_finite() {
            return Err(Error::InvalidConfig("image_guidance must be finite".into()));
        }
        if !self.text_guidance.is_finite() {
            return Err(Error::InvalidConfig("text_guidance must be finite".into()));
        }
        Ok(())
    }
}

/// Noise-latent token states along the trajectory. `t` counts remaining
/// steps: `num_steps` at the Gaussian start, 0 at the final state.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    t: usize,
    values: Mat,
}

impl LatentState {
    pub fn new(t: usize, values: Mat) -> Self {
        Self { t, values }
    }

    /// Gaussian start for the layout's noise grid, seeded by the sampler.
    pub fn gaussian(layout: &TokenLayout, model_dim: usize, sampler: &SamplerConfig) -> Self {
        let mut rng: ChaCha8Rng = seeded_rng(sampler.seed);
        let values = Mat::from_vec(
            layout.noise_len(),
            model_dim,
            normal_vec(&mut rng, layout.noise_len() * model_dim),
        );
        Self {
            t: sampler.num_steps,
            values,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn bits_eq(&self, other: &LatentState) -> bool {
        self.t == other.t && self.values.bits_eq(&other.values)
    }
}

/// One captured attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub matrix: Mat,
}

impl AttentionRecord {
    /// Check the record invariants: visible rows sum to 1 within `tol`,
    /// forbidden entries are exactly zero.
    pub fn validate(&self, policy: &AttentionPolicy, tol: f64) -> Result<()> {
        for q in 0..self.matrix.rows() {
            let mut sum = 0.0;
            let mut visible = 0usize;
            for k in 0..self.matrix.cols() {
                let v = self.matrix.get(q, k);
                if policy.allows(q, k) {
                    sum += v;
                    visible += 1;
                } else if v != 0.0 {
                    return Err(Error::InterventionContract {
                        layer: self.layer,
                        context: format!("nonzero at forbidden ({q},{k})"),
                    });
                }
            }
            if visible > 0 && (sum - 1.0).abs() > tol {
                return Err(Error::InterventionContract {
                    layer: self.layer,
                    context: format!("row {q} sums to {sum}"),
                });
            }
        }
        Ok(())
    }
}

/// Full attention trace of a run, indexed by (step, layer, head).
#[derive(Debug, Default)]
pub struct AttentionTrace {
    records: Vec<AttentionRecord>,
    index: std::collections::BTreeMap<(usize, usize, usize), usize>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: AttentionRecord) {
        self.index
            .insert((record.step, record.layer, record.head), self.records.len());
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[AttentionRecord] {
        &self.records
    }

    pub fn get(&self, step: usize, layer: usize, head: usize) -> Option<&AttentionRecord> {
        self.index
            .get(&(step, layer, head))
            .map(|&i| &self.records[i])
    }

    pub fn records_for_step(&self, step: usize) -> Vec<&AttentionRecord> {
        self.records.iter().filter(|r| r.step == step).collect()
    }
}

/// Which (layer) matrices to keep in the trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaptureMode {
    All,
    /// Keep only the listed layers (decimated capture for benchmarks).
    Layers(BTreeSet<usize>),
    Off,
}

impl CaptureMode {
    fn wants(&self, layer: usize) -> bool {
        match self {
            CaptureMode::All => true,
            CaptureMode::Layers(set) => set.contains(&layer),
            CaptureMode::Off => false,
        }
    }
}

/// Condition-stream substitution applied at the entry of selected layers.
#[derive(Debug, Clone, Copy)]
pub struct LayerBlanks<'a> {
    pub states: &'a ConditionStates,
    pub layers: &'a BTreeSet<usize>,
}

/// Hooks threaded through one forward pass.
#[derive(Default)]
pub struct ForwardHooks<'a> {
    /// Post-softmax transform per (layer, head); output must stay
    /// row-stochastic with policy zeros intact.
    pub intervention: Option<&'a dyn Fn(usize, usize, Mat) -> Result<Mat>>,
    /// Attention-capture callback, invoked after any intervention.
    pub sink: Option<&'a mut dyn FnMut(AttentionRecord)>,
    /// Per-layer blank substitution of the condition token states.
    pub blank_layers: Option<LayerBlanks<'a>>,
}

/// Immutable context shared by the forward passes of one run.
#[derive(Clone, Copy)]
pub struct ForwardContext<'a> {
    pub layout: &'a TokenLayout,
    pub weights: &'a BackboneWeights,
    pub policy: &'a AttentionPolicy,
}

fn rms_norm(x: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + 1e-12).sqrt();
        let out_row = out.row_mut(r);
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v * inv;
        }
    }
    out
}

fn assemble_states(
    layout: &TokenLayout,
    latent: &LatentState,
    conditions: &ConditionStates,
) -> Mat {
    let dim = latent.values().cols();
    let mut x = Mat::zeros(layout.total_len(), dim);
    for (i, tok) in layout.image_span().enumerate() {
        x.row_mut(tok).copy_from_slice(conditions.image().row(i));
    }
    for (i, tok) in layout.text_span().enumerate() {
        x.row_mut(tok).copy_from_slice(conditions.text().row(i));
    }
    for (i, tok) in layout.noise_span().enumerate() {
        x.row_mut(tok).copy_from_slice(latent.values().row(i));
    }
    x
}

fn overwrite_conditions(x: &mut Mat, layout: &TokenLayout, states: &ConditionStates) {
    for (i, tok) in layout.image_span().enumerate() {
        x.row_mut(tok).copy_from_slice(states.image().row(i));
    }
    for (i, tok) in layout.text_span().enumerate() {
        x.row_mut(tok).copy_from_slice(states.text().row(i));
    }
}

/// Softmax of `logits` over the visible keys of `allow`; forbidden entries
/// stay exactly zero.
fn masked_softmax_row(logits: &[f64], allow: &[bool], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (j, &a) in allow.iter().enumerate() {
        if a && logits[j] > max {
            max = logits[j];
        }
    }
    if max == f64::NEG_INFINITY {
        out.fill(0.0);
        return;
    }
    let mut denom = 0.0;
    for (j, &a) in allow.iter().enumerate() {
        if a {
            let e = (logits[j] - max).exp();
            out[j] = e;
            denom += e;
        } else {
            out[j] = 0.0;
        }
    }
    for (j, &a) in allow.iter().enumerate() {
        if a {
            out[j] /= denom;
        }
    }
}

fn attention_matrix(
    ctx: &ForwardContext<'_>,
    layer: usize,
    head: usize,
    q: &Mat,
    k: &Mat,
) -> Result<Mat> {
    let n = ctx.layout.total_len();
    let hd = ctx.weights.config().head_dim();
    let offset = head * hd;
    let mut attn = Mat::zeros(n, n);
    let mut logits = vec![0.0; n];
    for qi in 0..n {
        let allow = ctx.policy.row(qi);
        match &ctx.weights.attention {
            AttentionSource::Seeded => {
                let scale = 1.0 / (hd as f64).sqrt();
                let q_row = &q.row(qi)[offset..offset + hd];
                for ki in 0..n {
                    if allow[ki] {
                        let k_row = &k.row(ki)[offset..offset + hd];
                        let mut dot = 0.0;
                        for d in 0..hd {
                            dot += q_row[d] * k_row[d];
                        }
                        logits[ki] = dot * scale;
                    }
                }
            }
            AttentionSource::Rigged(script) => {
                for ki in 0..n {
                    if allow[ki] {
                        let l = script(layer, qi, ki);
                        if !l.is_finite() {
                            return Err(Error::NonFinite {
                                layer,
                                context: format!("scripted logit at ({qi},{ki})"),
                            });
                        }
                        logits[ki] = l;
                    }
                }
            }
        }
        masked_softmax_row(&logits, allow, attn.row_mut(qi));
    }
    Ok(attn)
}

/// Reject intervention outputs that broke row-stochasticity or wrote into
/// policy-forbidden entries.
fn validate_intervened(attn: &Mat, policy: &AttentionPolicy, layer: usize) -> Result<()> {
    for q in 0..attn.rows() {
        let allow = policy.row(q);
        let mut sum = 0.0;
        let mut visible = 0usize;
        for (kk, (&v, &a)) in attn.row(q).iter().zip(allow).enumerate() {
            if a {
                if v < 0.0 {
                    return Err(Error::InterventionContract {
                        layer,
                        context: format!("negative weight at ({q},{kk})"),
                    });
                }
                sum += v;
                visible += 1;
            } else if v != 0.0 {
                return Err(Error::InterventionContract {
                    layer,
                    context: format!("nonzero at forbidden ({q},{kk})"),
                });
            }
        }
        if visible > 0 && (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InterventionContract {
                layer,
                context: format!("row {q} sums to {sum}"),
            });
        }
    }
    Ok(())
}

/// One denoiser evaluation: joint sequence in, noise-token velocity out.
///
/// Captured records are emitted after any intervention, so the trace holds
/// the attention the model actually used.
pub fn forward(
    ctx: &ForwardContext<'_>,
    step: usize,
    latent: &LatentState,
    conditions: &ConditionStates,
    hooks: &mut ForwardHooks<'_>,
) -> Result<Mat> {
    let layout = ctx.layout;
    let config = ctx.weights.config();
    let dim = config.model_dim;
    if latent.values().rows() != layout.noise_len() || latent.values().cols() != dim {
        return Err(Error::DimensionMismatch(format!(
            "latent is {}x{}, expected {}x{}",
            latent.values().rows(),
            latent.values().cols(),
            layout.noise_len(),
            dim
        )));
    }
    if conditions.image().rows() != layout.image_len()
        || conditions.text().rows() != layout.text_len()
    {
        return Err(Error::DimensionMismatch(
            "condition states do not match the layout".into(),
        ));
    }

    let n = layout.total_len();
    let heads = config.num_heads;
    let hd = config.head_dim();
    let mut x = assemble_states(layout, latent, conditions);

    for (layer, lw) in ctx.weights.layers.iter().enumerate() {
        if let Some(lb) = &hooks.blank_layers {
            if lb.layers.contains(&layer) {
                overwrite_conditions(&mut x, layout, lb.states);
            }
        }

        let xn = rms_norm(&x);
        let q = xn.matmul(&lw.wq);
        let k = xn.matmul(&lw.wk);
        let v = xn.matmul(&lw.wv);

        let mut context = Mat::zeros(n, dim);
        for head in 0..heads {
            let mut attn = attention_matrix(ctx, layer, head, &q, &k)?;
            if let Some(hook) = hooks.intervention {
                attn = hook(layer, head, attn)?;
                validate_intervened(&attn, ctx.policy, layer)?;
            }
            if let Some(sink) = hooks.sink.as_deref_mut() {
                sink(AttentionRecord {
                    step,
                    layer,
                    head,
                    matrix: attn.clone(),
                });
            }
            let offset = head * hd;
            for i in 0..n {
                for ki in 0..n {
                    let a = attn.get(i, ki);
                    if a != 0.0 {
                        let v_row = &v.row(ki)[offset..offset + hd];
                        let c_row = &mut context.row_mut(i)[offset..offset + hd];
                        for d in 0..hd {
                            c_row[d] += a * v_row[d];
                        }
                    }
                }
            }
        }
        let attn_out = context.matmul(&lw.wo);
        x.add_assign(&attn_out);

        let xf = rms_norm(&x);
        let hidden = xf.matmul(&lw.w1).map(f64::tanh);
        let ffn_out = hidden.matmul(&lw.w2);
        x.add_assign(&ffn_out);

        if !x.is_finite() {
            return Err(Error::NonFinite {
                layer,
                context: "residual stream".into(),
            });
        }
    }

    let mut noise_states = Mat::zeros(layout.noise_len(), dim);
    for (i, tok) in layout.noise_span().enumerate() {
        noise_states.row_mut(i).copy_from_slice(x.row(tok));
    }
    let velocity = noise_states.matmul(&ctx.weights.out_proj);
    if !velocity.is_finite() {
        return Err(Error::NonFinite {
            layer: config.num_layers - 1,
            context: "output projection".into(),
        });
    }
    Ok(velocity)
}

/// Two-condition classifier-free guidance combination:
/// `v_uncond + S_I (v_img − v_uncond) + S_T (v_full − v_img)`.
pub fn guided_velocity(
    v_uncond: &Mat,
    v_img: &Mat,
    v_full: &Mat,
    image_guidance: f64,
    text_guidance: f64,
) -> Result<Mat> {
    if v_uncond.rows() != v_img.rows()
        || v_uncond.cols() != v_img.cols()
        || v_uncond.rows() != v_full.rows()
        || v_uncond.cols() != v_full.cols()
    {
        return Err(Error::DimensionMismatch(
            "guidance velocities have differing shapes".into(),
        ));
    }
    let mut out = Mat::zeros(v_uncond.rows(), v_uncond.cols());
    for r in 0..out.rows() {
        let u = v_uncond.row(r);
        let i = v_img.row(r);
        let f = v_full.row(r);
        let o = out.row_mut(r);
        for c in 0..o.len() {
            o[c] = u[c] + image_guidance * (i[c] - u[c]) + text_guidance * (f[c] - i[c]);
        }
    }
    Ok(out)
}

/// Euler step of the flow-matching ODE: `values += dt·velocity`, `t -= 1`.
pub fn flow_step(latent: &LatentState, velocity: &Mat, dt: f64) -> LatentState {
    assert!(dt > 0.0, "dt must be positive");
    assert!(latent.t > 0, "trajectory already finished");
    assert_eq!(
        (latent.values.rows(), latent.values.cols()),
        (velocity.rows(), velocity.cols()),
        "velocity shape must match the latent"
    );
    let mut values = latent.values.clone();
    for r in 0..values.rows() {
        let v = velocity.row(r);
        let row = values.row_mut(r);
        for c in 0..row.len() {
            row[c] += dt * v[c];
        }
    }
    LatentState {
        t: latent.t - 1,
        values,
    }
}

/// Step-wise controller: transforms attention during a step and receives the
/// step's captured records afterwards (the adjacent-timestep contract).
pub trait SamplingController {
    fn intervene(
        &self,
        step: usize,
        layer: usize,
        head: usize,
        attention: Mat,
        layout: &TokenLayout,
        policy: &AttentionPolicy,
    ) -> Result<Mat>;

    fn observe_step(
        &mut self,
        step: usize,
        records: &[AttentionRecord],
        layout: &TokenLayout,
    ) -> Result<()>;
}

/// Which condition states feed each step's conditioned pass.
#[derive(Debug, Clone, Copy)]
pub enum ConditionSchedule<'a> {
    /// Real input throughout.
    Real,
    /// Blank input from this step onward (sustained perturbation).
    BlankFrom(usize),
    /// Blank input at exactly this step (momentary perturbation).
    BlankAt(usize),
    /// Caller-supplied states throughout.
    Fixed(&'a ConditionStates),
}

/// Options for [`sample`].
pub struct SampleOptions<'a> {
    pub controller: Option<&'a mut dyn SamplingController>,
    /// Capture must cover every layer the controller reads.
    pub capture: CaptureMode,
    pub schedule: ConditionSchedule<'a>,
    /// Layers whose condition streams are blanked at entry, every step.
    pub blank_layers: Option<&'a BTreeSet<usize>>,
}

impl Default for SampleOptions<'_> {
    fn default() -> Self {
        Self {
            controller: None,
            capture: CaptureMode::All,
            schedule: ConditionSchedule::Real,
            blank_layers: None,
        }
    }
}

/// Run the flow-matching sampler.
///
/// Each step takes three forward passes (unconditioned, image-only, full);
/// the trace and any intervention attach to the full pass. The controller is
/// consulted once per step with that step's captured records, so a plan built
/// at step `t` can act at step `t+1`.
pub fn sample(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    mut options: SampleOptions<'_>,
) -> Result<(LatentState, AttentionTrace)> {
    sampler.validate()?;
    weights.config().validate()?;
    let policy = build_attention_policy(layout);
    let policy_ref = &policy;
    let ctx = ForwardContext {
        layout,
        weights,
        policy: policy_ref,
    };
    let real = ConditionStates::real(layout, weights);
    let blank = ConditionStates::blank_input(layout, weights);
    let dim = weights.config().model_dim;
    let mut latent = LatentState::gaussian(layout, dim, sampler);
    let mut trace = AttentionTrace::new();
    let dt = 1.0 / sampler.num_steps as f64;

    for step in 0..sampler.num_steps {
        let raw = match options.schedule {
            ConditionSchedule::Real => &real,
            ConditionSchedule::BlankFrom(s) => {
                if step >= s {
                    &blank
                } else {
                    &real
                }
            }
            ConditionSchedule::BlankAt(s) => {
                if step == s {
                    &blank
                } else {
                    &real
                }
            }
            ConditionSchedule::Fixed(c) => c,
        };
        let image_only = ConditionStates::new(raw.image().clone(), blank.text().clone());
        let layer_blanks = options.blank_layers.map(|layers| LayerBlanks {
            states: &blank,
            layers,
        });

        let mut step_records: Vec<AttentionRecord> = Vec::new();
        let v_full = {
            let controller = options.controller.as_deref();
            let intervention = controller.map(|c| {
                move |layer: usize, head: usize, attn: Mat| {
                    c.intervene(step, layer, head, attn, layout, policy_ref)
                }
            });
            let capture = &options.capture;
            let mut sink = |record: AttentionRecord| {
                if capture.wants(record.layer) {
                    step_records.push(record);
                }
            };
            let mut hooks = ForwardHooks {
                intervention: intervention
                    .as_ref()
                    .map(|f| f as &dyn Fn(usize, usize, Mat) -> Result<Mat>),
                sink: if matches!(options.capture, CaptureMode::Off) && options.controller.is_none()
                {
                    None
                } else {
                    Some(&mut sink)
                },
                blank_layers: layer_blanks,
            };
            forward(&ctx, step, &latent, raw, &mut hooks)?
        };
        let mut plain = ForwardHooks {
            intervention: None,
            sink: None,
            blank_layers: layer_blanks,
        };
        let v_img = forward(&ctx, step, &latent, &image_only, &mut plain)?;
        let v_uncond = forward(&ctx, step, &latent, &blank, &mut plain)?;

        let velocity = guided_velocity(
            &v_uncond,
            &v_img,
            &v_full,
            sampler.image_guidance,
            sampler.text_guidance,
        )?;
        latent = flow_step(&latent, &velocity, dt);

        if let Some(controller) = options.controller.as_deref_mut() {
            controller.observe_step(step, &step_records, layout)?;
        }
        for record in step_records {
            trace.push(record);
        }
    }

    Ok((latent, trace))
}
