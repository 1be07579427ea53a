//! Input-perturbation diagnostics: step-wise and layer-wise replacement of
//! the raw input with a blank one, plus latent-trajectory similarity.

use std::collections::BTreeSet;

use crate::backbone::{
    sample, BackboneWeights, CaptureMode, ConditionSchedule, ConditionStates, LatentState,
    SampleOptions, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::layout::TokenLayout;

/// Blank condition states: a pure-white input image and padding-token text.
pub fn make_blank_input(layout: &TokenLayout, weights: &BackboneWeights) -> ConditionStates {
    ConditionStates::blank_input(layout, weights)
}

/// Cosine similarity of two flattened latents, clamped into `[-1, 1]`.
/// Bitwise-equal latents compare as exactly 1.
pub fn latent_similarity(a: &LatentState, b: &LatentState) -> Result<f64> {
    let av = a.values();
    let bv = b.values();
    if av.rows() != bv.rows() || av.cols() != bv.cols() {
        return Err(Error::DimensionMismatch(
            "latents have differing shapes".into(),
        ));
    }
    if av.bits_eq(bv) {
        return Ok(1.0);
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in av.data().iter().zip(bv.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity undefined".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Which end of the stack a layer-wise perturbation grows from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Perturb the deepest `n` layers first.
    TopDown,
    /// Perturb the shallowest `n` layers first.
    BottomUp,
}

impl Direction {
    /// The perturbed layer set for `n` layers of an `num_layers` stack.
    pub fn layer_set(self, n: usize, num_layers: usize) -> BTreeSet<usize> {
        match self {
            Direction::BottomUp => (0..n.min(num_layers)).collect(),
            Direction::TopDown => (num_layers.saturating_sub(n)..num_layers).collect(),
        }
    }
}

/// One point of a similarity curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityPoint {
    /// Sweep parameter: the perturbation-start step or the perturbed layer
    /// count, depending on the protocol.
    pub parameter: usize,
    pub similarity: f64,
}

/// A full sweep against one baseline run.
#[derive(Debug, Clone)]
pub struct SimilarityReport {
    pub points: Vec<SimilarityPoint>,
    pub baseline_id: String,
}

fn plain_options<'a>() -> SampleOptions<'a> {
    SampleOptions {
        capture: CaptureMode::Off,
        ..SampleOptions::default()
    }
}

/// Unperturbed reference run (attention capture off).
pub fn baseline_latent(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
) -> Result<LatentState> {
    let (latent, _) = sample(layout, weights, sampler, plain_options())?;
    Ok(latent)
}

/// Run with blank input from `from_step` onward (sustained perturbation).
pub fn perturbed_steps_latent(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    from_step: usize,
) -> Result<LatentState> {
    if from_step > sampler.num_steps {
        return Err(Error::InvalidConfig(format!(
            "perturbation start {from_step} exceeds num_steps {}",
            sampler.num_steps
        )));
    }
    let options = SampleOptions {
        schedule: ConditionSchedule::BlankFrom(from_step),
        ..plain_options()
    };
    let (latent, _) = sample(layout, weights, sampler, options)?;
    Ok(latent)
}

/// Run with blank input at exactly `at_step` (momentary perturbation).
pub fn perturbed_single_step_latent(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    at_step: usize,
) -> Result<LatentState> {
    let options = SampleOptions {
        schedule: ConditionSchedule::BlankAt(at_step),
        ..plain_options()
    };
    let (latent, _) = sample(layout, weights, sampler, options)?;
    Ok(latent)
}

/// Run with blank condition states substituted at the entry of `n_layers`
/// layers (per `direction`) during every step.
pub fn perturbed_layers_latent(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    direction: Direction,
    n_layers: usize,
) -> Result<LatentState> {
    let num_layers = weights.config().num_layers;
    if n_layers > num_layers {
        return Err(Error::InvalidConfig(format!(
            "cannot perturb {n_layers} of {num_layers} layers"
        )));
    }
    let layers = direction.layer_set(n_layers, num_layers);
    let options = SampleOptions {
        blank_layers: Some(&layers),
        ..plain_options()
    };
    let (latent, _) = sample(layout, weights, sampler, options)?;
    Ok(latent)
}

/// One step-wise sweep entry: similarity of the `from_step` perturbation
/// against the supplied baseline.
pub fn perturb_steps(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    baseline: &LatentState,
    from_step: usize,
) -> Result<SimilarityPoint> {
    let latent = perturbed_steps_latent(layout, weights, sampler, from_step)?;
    Ok(SimilarityPoint {
        parameter: from_step,
        similarity: latent_similarity(baseline, &latent)?,
    })
}

/// One layer-wise sweep entry.
pub fn perturb_layers(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    baseline: &LatentState,
    direction: Direction,
    n_layers: usize,
) -> Result<SimilarityPoint> {
    let latent = perturbed_layers_latent(layout, weights, sampler, direction, n_layers)?;
    Ok(SimilarityPoint {
        parameter: n_layers,
        similarity: latent_similarity(baseline, &latent)?,
    })
}

/// Step-wise curve over `from..=to` with the given stride.
pub fn sweep_steps(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    from: usize,
    to: usize,
    stride: usize,
    baseline_id: &str,
) -> Result<SimilarityReport> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    if to > sampler.num_steps || from > to {
        return Err(Error::InvalidConfig(format!(
            "sweep {from}..={to} invalid for {} steps",
            sampler.num_steps
        )));
    }
    let baseline = baseline_latent(layout, weights, sampler)?;
    let mut points = Vec::new();
    let mut s = from;
    while s <= to {
        points.push(perturb_steps(layout, weights, sampler, &baseline, s)?);
        s += stride;
    }
    Ok(SimilarityReport {
        points,
        baseline_id: baseline_id.to_string(),
    })
}

/// Layer-wise curve over `n = 0..=num_layers` for one direction.
pub fn sweep_layers(
    layout: &TokenLayout,
    weights: &BackboneWeights,
    sampler: &SamplerConfig,
    direction: Direction,
    baseline_id: &str,
) -> Result<SimilarityReport> {
    let baseline = baseline_latent(layout, weights, sampler)?;
    let mut points = Vec::new();
    for n in 0..=weights.config().num_layers {
        points.push(perturb_layers(
            layout, weights, sampler, &baseline, direction, n,
        )?);
    }
    Ok(SimilarityReport {
        points,
        baseline_id: baseline_id.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{init_backbone, BackboneConfig};
    use crate::layout::build_layout;
    use crate::mat::Mat;

    fn fixture() -> (TokenLayout, BackboneWeights, SamplerConfig) {
        let layout = build_layout(2, Some(1), 3, &[0..1, 1..3]).unwrap();
        let weights = init_backbone(BackboneConfig {
            num_layers: 3,
            num_heads: 2,
            model_dim: 16,
            seed: 5,
        })
        .unwrap();
        let sampler = SamplerConfig {
            num_steps: 6,
            seed: 8,
            ..SamplerConfig::default()
        };
        (layout, weights, sampler)
    }

    #[test]
    fn blank_input_repeats_bit_exactly() {
        let (layout, weights, _) = fixture();
        let a = make_blank_input(&layout, &weights);
        let b = make_blank_input(&layout, &weights);
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn blank_without_image_only_replaces_text() {
        let layout = build_layout(2, None, 3, &[0..3]).unwrap();
        let weights = init_backbone(BackboneConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            seed: 5,
        })
        .unwrap();
        let blank = make_blank_input(&layout, &weights);
        assert_eq!(blank.image().rows(), 0);
        assert!(blank.text().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blank_run_differs_from_real_run() {
        let (layout, weights, sampler) = fixture();
        let real = baseline_latent(&layout, &weights, &sampler).unwrap();
        let blank = perturbed_steps_latent(&layout, &weights, &sampler, 0).unwrap();
        assert!(!real.bits_eq(&blank));
    }

    #[test]
    fn similarity_examples() {
        let x = LatentState::new(0, Mat::from_vec(1, 2, vec![1.0, 0.0]));
        assert_eq!(latent_similarity(&x, &x).unwrap(), 1.0);
        let neg = LatentState::new(0, Mat::from_vec(1, 2, vec![-1.0, 0.0]));
        assert!((latent_similarity(&x, &neg).unwrap() + 1.0).abs() <= 1e-12);
        let y = LatentState::new(0, Mat::from_vec(1, 2, vec![1.0, 1.0]));
        let expected = 1.0 / 2f64.sqrt();
        assert!((latent_similarity(&x, &y).unwrap() - expected).abs() <= 1e-12);
        let zero = LatentState::new(0, Mat::from_vec(1, 2, vec![0.0, 0.0]));
        assert!(latent_similarity(&x, &zero).is_err());
    }

    #[test]
    fn similarity_is_symmetric_and_scale_invariant() {
        let a = LatentState::new(0, Mat::from_vec(1, 3, vec![0.3, -0.7, 0.2]));
        let b = LatentState::new(0, Mat::from_vec(1, 3, vec![1.1, 0.4, -0.9]));
        let ab = latent_similarity(&a, &b).unwrap();
        let ba = latent_similarity(&b, &a).unwrap();
        assert_eq!(ab, ba);
        let scaled = LatentState::new(
            0,
            Mat::from_vec(1, 3, vec![3.0 * 0.3, 3.0 * -0.7, 3.0 * 0.2]),
        );
        assert!((latent_similarity(&scaled, &b).unwrap() - ab).abs() <= 1e-12);
        assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn unperturbed_endpoints_are_bitwise_baseline() {
        let (layout, weights, sampler) = fixture();
        let baseline = baseline_latent(&layout, &weights, &sampler).unwrap();
        let steps_end =
            perturbed_steps_latent(&layout, &weights, &sampler, sampler.num_steps).unwrap();
        assert!(baseline.bits_eq(&steps_end));
        let layers_zero =
            perturbed_layers_latent(&layout, &weights, &sampler, Direction::TopDown, 0).unwrap();
        assert!(baseline.bits_eq(&layers_zero));
    }

    #[test]
    fn full_layer_perturbation_is_direction_independent() {
        let (layout, weights, sampler) = fixture();
        let l = weights.config().num_layers;
        let top =
            perturbed_layers_latent(&layout, &weights, &sampler, Direction::TopDown, l).unwrap();
        let bottom =
            perturbed_layers_latent(&layout, &weights, &sampler, Direction::BottomUp, l).unwrap();
        assert!(top.bits_eq(&bottom));
    }

    #[test]
    fn sweeps_emit_expected_grids() {
        let (layout, weights, sampler) = fixture();
        let report = sweep_steps(&layout, &weights, &sampler, 0, 6, 2, "base").unwrap();
        assert_eq!(
            report
                .points
                .iter()
                .map(|p| p.parameter)
                .collect::<Vec<_>>(),
            vec![0, 2, 4, 6]
        );
        assert_eq!(report.points.last().unwrap().similarity, 1.0);

        let report =
            sweep_layers(&layout, &weights, &sampler, Direction::BottomUp, "base").unwrap();
        assert_eq!(report.points.len(), weights.config().num_layers + 1);
        assert_eq!(report.points[0].similarity, 1.0);
    }
}
