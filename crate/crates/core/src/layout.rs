//! Joint token sequence: segment partition, visibility policy, and the
//! cross-attention slice.
//!
//! The sequence is ordered `[image, text, noise]` so every condition token
//! precedes the noise-latent grid. Cross-attention is the block of the joint
//! attention matrix with noise queries and condition keys.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::spatial::{MapSubject, SpatialActivationMap};

/// Half-open token index range.
pub type Span = Range<usize>;

/// Partition of the joint sequence into input-image, text, and noise-latent
/// segments, with the text segment's sub-instruction spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    total_len: usize,
    noise_span: Span,
    image_span: Span,
    text_span: Span,
    sub_instructions: Vec<Span>,
    grid_side: usize,
}

impl TokenLayout {
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn noise_span(&self) -> Span {
        self.noise_span.clone()
    }

    pub fn image_span(&self) -> Span {
        self.image_span.clone()
    }

    pub fn text_span(&self) -> Span {
        self.text_span.clone()
    }

    /// Sub-instruction spans in absolute sequence indices.
    pub fn sub_instructions(&self) -> &[Span] {
        &self.sub_instructions
    }

    pub fn num_sub_instructions(&self) -> usize {
        self.sub_instructions.len()
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn noise_len(&self) -> usize {
        self.noise_span.len()
    }

    pub fn image_len(&self) -> usize {
        self.image_span.len()
    }

    pub fn text_len(&self) -> usize {
        self.text_span.len()
    }

    /// Number of condition keys (image + text) seen by the slice.
    pub fn condition_len(&self) -> usize {
        self.image_len() + self.text_len()
    }

    pub fn has_image(&self) -> bool {
        !self.image_span.is_empty()
    }

    /// Slice column of an absolute condition-key index.
    pub fn slice_col(&self, key: usize) -> Option<usize> {
        if self.image_span.contains(&key) {
            Some(key - self.image_span.start)
        } else if self.text_span.contains(&key) {
            Some(self.image_len() + (key - self.text_span.start))
        } else {
            None
        }
    }

    /// Absolute condition-key index of a slice column.
    pub fn key_of_slice_col(&self, col: usize) -> Result<usize> {
        if col < self.image_len() {
            Ok(self.image_span.start + col)
        } else if col < self.condition_len() {
            Ok(self.text_span.start + (col - self.image_len()))
        } else {
            Err(Error::IndexOutOfRange(format!(
                "slice column {col} >= {}",
                self.condition_len()
            )))
        }
    }

    /// Row-major grid cell of a noise query's absolute index.
    pub fn grid_cell_of_query(&self, query: usize) -> Option<usize> {
        self.noise_span
            .contains(&query)
            .then(|| query - self.noise_span.start)
    }

    /// Serializable description that rebuilds this layout.
    pub fn to_spec(&self) -> LayoutSpec {
        let image_grid_side = if self.image_span.is_empty() {
            None
        } else {
            Some((self.image_len() as f64).sqrt().round() as usize)
        };
        LayoutSpec {
            grid_side: self.grid_side,
            image_grid_side,
            text_len: self.text_len(),
            spans: self
                .sub_instructions
                .iter()
                .map(|s| [s.start - self.text_span.start, s.end - self.text_span.start])
                .collect(),
        }
    }
}

/// JSON-facing layout description, used in run manifests.
///
/// `spans` are half-open `[lo, hi)` pairs relative to the text segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub grid_side: usize,
    pub image_grid_side: Option<usize>,
    pub text_len: usize,
    pub spans: Vec<[usize; 2]>,
}

impl LayoutSpec {
    pub fn build(&self) -> Result<TokenLayout> {
        let spans: Vec<Span> = self.spans.iter().map(|s| s[0]..s[1]).collect();
        build_layout(self.grid_side, self.image_grid_side, self.text_len, &spans)
    }
}

/// Construct a layout ordered `[image, text, noise]`.
///
/// `sub_instruction_spans` are half-open ranges relative to the text segment.
pub fn build_layout(
    noise_grid_side: usize,
    image_grid_side: Option<usize>,
    text_len: usize,
    sub_instruction_spans: &[Span],
) -> Result<TokenLayout> {
    if noise_grid_side == 0 {
        return Err(Error::InvalidLayout("noise grid side must be >= 1".into()));
    }
    if image_grid_side == Some(0) {
        return Err(Error::InvalidLayout(
            "image grid side must be >= 1 when present".into(),
        ));
    }
    if text_len == 0 {
        return Err(Error::InvalidLayout("text segment must be nonempty".into()));
    }
    for span in sub_instruction_spans {
        if span.start >= span.end {
            return Err(Error::InvalidLayout(format!(
                "sub-instruction span {}..{} is empty or reversed",
                span.start, span.end
            )));
        }
        if span.end > text_len {
            return Err(Error::InvalidLayout(format!(
                "sub-instruction span {}..{} exceeds text length {text_len}",
                span.start, span.end
            )));
        }
    }
    let mut sorted: Vec<&Span> = sub_instruction_spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::InvalidLayout(format!(
                "sub-instruction spans {}..{} and {}..{} overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }

    let image_len = image_grid_side.map_or(0, |g| g * g);
    let noise_len = noise_grid_side * noise_grid_side;
    let image_span = 0..image_len;
    let text_span = image_len..image_len + text_len;
    let noise_span = text_span.end..text_span.end + noise_len;
    let total_len = noise_span.end;

    let sub_instructions = sub_instruction_spans
        .iter()
        .map(|s| text_span.start + s.start..text_span.start + s.end)
        .collect();

    Ok(TokenLayout {
        total_len,
        noise_span,
        image_span,
        text_span,
        sub_instructions,
        grid_side: noise_grid_side,
    })
}

/// Boolean query-by-key visibility matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionPolicy {
    total_len: usize,
    allow: Vec<bool>,
}

impl AttentionPolicy {
    pub fn total_len(&self) -> usize {
        self.total_len
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allow[query * self.total_len + key]
    }

    #[inline]
    pub fn row(&self, query: usize) -> &[bool] {
        &self.allow[query * self.total_len..(query + 1) * self.total_len]
    }

    pub fn visible_count(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&a| a).count()
    }
}

/// Visibility rules: bidirectional inside the image and noise blocks, causal
/// inside the text block, causal by position across segments. Every token
/// sees itself.
pub fn build_attention_policy(layout: &TokenLayout) -> AttentionPolicy {
    let n = layout.total_len();
    let image = layout.image_span();
    let noise = layout.noise_span();
    let mut allow = vec![false; n * n];
    for q in 0..n {
        for k in 0..n {
            let same_image = image.contains(&q) && image.contains(&k);
            let same_noise = noise.contains(&q) && noise.contains(&k);
            // Bidirectional inside the image-like blocks; causal by sequence
            // position within text and across segments.
            allow[q * n + k] = same_image || same_noise || k <= q;
        }
    }
    AttentionPolicy {
        total_len: n,
        allow,
    }
}

/// The block of the joint attention matrix with noise queries and
/// condition (image + text) keys, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionSlice {
    values: Mat,
}

impl CrossAttentionSlice {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn cols(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn get(&self, noise_row: usize, key_col: usize) -> f64 {
        self.values.get(noise_row, key_col)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    /// One condition key's column over all noise queries.
    pub fn column(&self, key_col: usize) -> Result<Vec<f64>> {
        if key_col >= self.cols() {
            return Err(Error::IndexOutOfRange(format!(
                "slice column {key_col} >= {}",
                self.cols()
            )));
        }
        Ok((0..self.rows())
            .map(|r| self.values.get(r, key_col))
            .collect())
    }
}

/// Extract the cross-attention block from a joint attention matrix.
pub fn slice_cross_attention(attention: &Mat, layout: &TokenLayout) -> Result<CrossAttentionSlice> {
    if attention.rows() != layout.total_len() || attention.cols() != layout.total_len() {
        return Err(Error::DimensionMismatch(format!(
            "attention is {}x{}, layout expects {}x{}",
            attention.rows(),
            attention.cols(),
            layout.total_len(),
            layout.total_len()
        )));
    }
    let noise = layout.noise_span();
    let rows = layout.noise_len();
    let cols = layout.condition_len();
    let mut values = Mat::zeros(rows, cols);
    for (out_r, q) in noise.enumerate() {
        for out_c in 0..cols {
            let key = layout.key_of_slice_col(out_c)?;
            values.set(out_r, out_c, attention.get(q, key));
        }
    }
    Ok(CrossAttentionSlice { values })
}

/// Reshape one key's attention column onto the g×g noise grid, row-major.
pub fn reshape_to_spatial(
    slice: &CrossAttentionSlice,
    layout: &TokenLayout,
    key_col: usize,
) -> Result<SpatialActivationMap> {
    let column = slice.column(key_col)?;
    let g = layout.grid_side();
    let key = layout.key_of_slice_col(key_col)?;
    SpatialActivationMap::from_values(g, column, MapSubject::KeyToken(key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, seeded_rng};

    fn layout_paper_scale() -> TokenLayout {
        // 512x512 generation: 32x32 noise grid, 32x32 input image, 24 text
        // tokens holding two sub-instructions.
        build_layout(32, Some(32), 24, &[0..12, 12..24]).unwrap()
    }

    #[test]
    fn build_layout_paper_scale_lengths() {
        let l = layout_paper_scale();
        assert_eq!(l.noise_len(), 1024);
        assert_eq!(l.total_len(), 1024 + 1024 + 24);
    }

    #[test]
    fn build_layout_minimal() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        assert_eq!(l.total_len(), 5);
        assert!(l.image_span().is_empty());
        assert_eq!(l.noise_span(), 1..5);
    }

    #[test]
    fn build_layout_index_arithmetic() {
        // Oracle: direct index arithmetic for g=4, image side 2, text 6.
        let l = build_layout(4, Some(2), 6, &[0..3, 3..6]).unwrap();
        assert_eq!(l.num_sub_instructions(), 2);
        assert_eq!(l.image_len(), 4);
        assert_eq!(l.image_span(), 0..4);
        assert_eq!(l.text_span(), 4..10);
        assert_eq!(l.noise_span(), 10..26);
        assert_eq!(l.sub_instructions()[0], 4..7);
        assert_eq!(l.sub_instructions()[1], 7..10);
    }

    #[test]
    fn build_layout_rejects_bad_spans() {
        assert!(build_layout(2, None, 4, &[0..2, 1..3]).is_err()); // overlap
        assert!(build_layout(2, None, 4, &[2..5]).is_err()); // out of bounds
        assert!(build_layout(0, None, 4, &[0..1]).is_err()); // zero grid
        assert!(build_layout(2, Some(0), 4, &[0..1]).is_err());
        assert!(build_layout(2, None, 4, &[2..2]).is_err()); // empty span
    }

    #[test]
    fn policy_minimal_layout() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        let p = build_attention_policy(&l);
        // Text token at index 0 sees only itself.
        assert!(p.allows(0, 0));
        for k in 1..5 {
            assert!(!p.allows(0, k));
        }
        // Noise block is fully bidirectional.
        for q in 1..5 {
            for k in 1..5 {
                assert!(p.allows(q, k));
            }
        }
    }

    #[test]
    fn policy_matches_brute_force_causal_mask() {
        let l = build_layout(3, Some(2), 5, &[0..2, 2..5]).unwrap();
        let p = build_attention_policy(&l);
        let image = l.image_span();
        let text = l.text_span();
        let noise = l.noise_span();
        for q in 0..l.total_len() {
            for k in 0..l.total_len() {
                let expected = (image.contains(&q) && image.contains(&k))
                    || (noise.contains(&q) && noise.contains(&k))
                    || k <= q;
                assert_eq!(p.allows(q, k), expected, "q={q} k={k}");
            }
        }
        // Text sees image, image does not see text.
        assert!(p.allows(text.start, image.start));
        assert!(!p.allows(image.start, text.start));
    }

    #[test]
    fn policy_diagonal_and_condition_visibility() {
        let l = build_layout(4, Some(2), 6, &[0..3]).unwrap();
        let p = build_attention_policy(&l);
        for q in 0..l.total_len() {
            assert!(p.allows(q, q));
        }
        for q in l.noise_span() {
            for k in 0..l.noise_span().start {
                assert!(p.allows(q, k), "noise must see every condition token");
            }
        }
    }

    fn row_stochastic_under_policy(layout: &TokenLayout, seed: u64) -> Mat {
        let policy = build_attention_policy(layout);
        let n = layout.total_len();
        let mut rng = seeded_rng(seed);
        let raw = normal_vec(&mut rng, n * n);
        let mut m = Mat::zeros(n, n);
        for q in 0..n {
            let mut sum = 0.0;
            for k in 0..n {
                if policy.allows(q, k) {
                    let v = raw[q * n + k].exp();
                    m.set(q, k, v);
                    sum += v;
                }
            }
            for k in 0..n {
                m.set(q, k, m.get(q, k) / sum);
            }
        }
        m
    }

    #[test]
    fn slice_uniform_attention() {
        // 4 noise queries, 2 image keys, 2 text keys; every noise row has 8
        // visible keys (4 conditions + 4 noise) at uniform weight 1/8.
        let l = build_layout(2, Some(1), 3, &[0..3]).unwrap();
        assert_eq!(l.image_len() + l.text_len(), 4);
        let n = l.total_len();
        let mut m = Mat::zeros(n, n);
        for q in l.noise_span() {
            for k in 0..n {
                m.set(q, k, 1.0 / 8.0);
            }
        }
        let slice = slice_cross_attention(&m, &l).unwrap();
        assert_eq!((slice.rows(), slice.cols()), (4, 4));
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(slice.get(r, c), 1.0 / 8.0);
            }
        }
    }

    #[test]
    fn slice_matches_naive_double_loop() {
        let l = build_layout(3, Some(2), 4, &[0..2, 2..4]).unwrap();
        let m = row_stochastic_under_policy(&l, 11);
        let slice = slice_cross_attention(&m, &l).unwrap();
        // Oracle: naive element selection by index sets.
        let keys: Vec<usize> = l.image_span().chain(l.text_span()).collect();
        for (r, q) in l.noise_span().enumerate() {
            for (c, &k) in keys.iter().enumerate() {
                assert_eq!(slice.get(r, c), m.get(q, k));
            }
        }
    }

    #[test]
    fn slice_rejects_dimension_mismatch() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        let m = Mat::zeros(4, 4);
        assert!(slice_cross_attention(&m, &l).is_err());
    }

    #[test]
    fn slice_has_1024_rows_at_paper_scale() {
        let l = layout_paper_scale();
        let m = row_stochastic_under_policy(&l, 3);
        let slice = slice_cross_attention(&m, &l).unwrap();
        assert_eq!(slice.rows(), 1024);
    }

    #[test]
    fn reshape_row_major() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        let n = l.total_len();
        let mut m = Mat::zeros(n, n);
        let column = [0.1, 0.2, 0.3, 0.4];
        for (i, q) in l.noise_span().enumerate() {
            m.set(q, 0, column[i]); // text key is index 0
        }
        let slice = slice_cross_attention(&m, &l).unwrap();
        let map = reshape_to_spatial(&slice, &l, 0).unwrap();
        assert_eq!(map.get(0, 0), 0.1);
        assert_eq!(map.get(0, 1), 0.2);
        assert_eq!(map.get(1, 0), 0.3);
        assert_eq!(map.get(1, 1), 0.4);
    }

    #[test]
    fn reshape_constant_column() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        let n = l.total_len();
        let mut m = Mat::zeros(n, n);
        for q in l.noise_span() {
            m.set(q, 0, 0.25);
        }
        let slice = slice_cross_attention(&m, &l).unwrap();
        let map = reshape_to_spatial(&slice, &l, 0).unwrap();
        assert!(map.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn reshape_matches_index_oracle() {
        let g = 5;
        let l = build_layout(g, Some(2), 3, &[0..3]).unwrap();
        let m = row_stochastic_under_policy(&l, 23);
        let slice = slice_cross_attention(&m, &l).unwrap();
        let col = 2;
        let map = reshape_to_spatial(&slice, &l, col).unwrap();
        let column = slice.column(col).unwrap();
        // Oracle: r = i div g, c = i mod g.
        for (i, &v) in column.iter().enumerate() {
            assert_eq!(map.get(i / g, i % g), v);
        }
    }

    #[test]
    fn reshape_rejects_out_of_range_column() {
        let l = build_layout(2, None, 1, &[0..1]).unwrap();
        let m = row_stochastic_under_policy(&l, 5);
        let slice = slice_cross_attention(&m, &l).unwrap();
        assert!(reshape_to_spatial(&slice, &l, 1).is_err());
    }

    #[test]
    fn layout_spec_round_trip() {
        let l = build_layout(4, Some(2), 6, &[0..3, 3..6]).unwrap();
        let spec = l.to_spec();
        let json = serde_json::to_string(&spec).unwrap();
        let back: LayoutSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.build().unwrap(), l);
    }
}
