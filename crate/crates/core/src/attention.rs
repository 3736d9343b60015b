//! Multi-layer, multi-head causal attention with the speaker-aware additive
//! bias injected into selected heads.
//!
//! For an utterance token `u_i` of speaker `s` whose timestamp maps to frame
//! `t`, every visual token of the region `V_{s,t}` receives the additive
//! pre-softmax term `alpha * M_i`, where `M_i` is the largest scaled score of
//! `u_i` over all speaker-region tokens. Only heads marked active by a
//! [`HeadSelector`] are biased, and activity is judged on the unbiased
//! attention of the same forward pass.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    head_activity_score, threshold_serde, HeadId, HeadSelection, HeadSelector, HeadStatus, LayerRange,
};
use crate::error::{contract, Error, Result};
use crate::numerics::{matmul, row_softmax, scaled_scores, softmax_row_into, Mask, Matrix};
use crate::scene::{SpeakerRegionIndex, TokenSequence};

/// Query and key projections of one head (`d × d_head` each).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    w_q: Matrix,
    w_k: Matrix,
}

impl HeadWeights {
    pub fn new(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::DimensionMismatch(format!(
                "W_Q {:?} vs W_K {:?}",
                w_q.shape(),
                w_k.shape()
            )));
        }
        if w_q.cols() == 0 || w_q.rows() == 0 {
            return Err(contract("head projections need d >= 1 and d_head >= 1"));
        }
        Ok(Self { w_q, w_k })
    }

    pub fn w_q(&self) -> &Matrix {
        &self.w_q
    }

    pub fn w_k(&self) -> &Matrix {
        &self.w_k
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<Vec<HeadWeights>>,
    model_dim: usize,
}

impl LayerStack {
    pub fn new(layers: Vec<Vec<HeadWeights>>) -> Result<Self> {
        let first = layers
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| contract("layer stack has no heads"))?;
        let (d, d_head) = (first.model_dim(), first.head_dim());
        if layers
            .iter()
            .flatten()
            .any(|h| h.model_dim() != d || h.head_dim() != d_head)
        {
            return Err(Error::DimensionMismatch(
                "all heads in a stack must share d and d_head".into(),
            ));
        }
        Ok(Self { layers, model_dim: d })
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer: usize) -> &[HeadWeights] {
        &self.layers[layer]
    }

    pub fn total_heads(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, heads)| (0..heads.len()).map(move |h| HeadId::new(l, h)))
    }
}

/// What `M_i` is taken over when sizing the bias.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasReference {
    /// Pre-softmax scaled scores.
    #[default]
    ScaledScore,
    /// Post-softmax attention weights of the causal row.
    AttentionWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    /// Bias scale.
    pub alpha: f64,
    /// Head activity threshold; `+inf` disables every head.
    #[serde(with = "threshold_serde")]
    pub lambda: f64,
    pub layer_range: LayerRange,
    /// Clamp each bias value at zero (amplification only).
    #[serde(default)]
    pub clamp_nonnegative: bool,
    /// Bias the speaker's regions in frames `t ± frame_window`.
    #[serde(default)]
    pub frame_window: usize,
    #[serde(default)]
    pub reference: BiasReference,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda: 5e-5,
            layer_range: LayerRange::inclusive(10, 19),
            clamp_nonnegative: false,
            frame_window: 0,
            reference: BiasReference::ScaledScore,
        }
    }
}

impl BiasConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(contract(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(contract(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if let Some((_, last)) = self.layer_range.bounds() {
            if last >= n_layers {
                return Err(contract(format!(
                    "layer range {} exceeds a stack of {n_layers} layers",
                    self.layer_range
                )));
            }
        }
        Ok(())
    }

    pub fn selector(&self) -> crate::alignment::ThresholdSelector {
        crate::alignment::ThresholdSelector {
            lambda: self.lambda,
            layer_range: self.layer_range,
        }
    }
}

/// Bias for one query row: the same `value` on every target key.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanRow {
    /// `M_i`
    pub reference_max: f64,
    pub value: f64,
    pub targets: Vec<usize>,
}

/// Sparse additive bias, keyed by query row.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BiasPlan {
    rows: BTreeMap<usize, PlanRow>,
}

impl BiasPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_row(&mut self, row: usize, entry: PlanRow) {
        self.rows.insert(row, entry);
    }

    pub fn row(&self, row: usize) -> Option<&PlanRow> {
        self.rows.get(&row)
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &PlanRow)> {
        self.rows.iter().map(|(&i, r)| (i, r))
    }

    /// Every `(row, col, value)` entry.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .flat_map(|(&i, r)| r.targets.iter().map(move |&j| (i, j, r.value)))
    }

    pub fn entry_count(&self) -> usize {
        self.rows.values().map(|r| r.targets.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entry_count() == 0
    }
}

/// Full pre-softmax score matrix of one head: `(X W_Q)(X W_K)ᵀ / sqrt(d_head)`.
pub fn head_scores(embeddings: &Matrix, head: &HeadWeights) -> Result<Matrix> {
    if embeddings.cols() != head.model_dim() {
        return Err(Error::DimensionMismatch(format!(
            "embeddings have width {}, head expects {}",
            embeddings.cols(),
            head.model_dim()
        )));
    }
    let q = matmul(embeddings, &head.w_q)?;
    let k = matmul(embeddings, &head.w_k)?;
    scaled_scores(&q, &k, head.head_dim())
}

pub fn baseline_attention(scores: &Matrix, mask: &Mask) -> Result<Matrix> {
    if scores.rows() != scores.cols() {
        return Err(Error::DimensionMismatch(format!(
            "attention scores must be square, got {:?}",
            scores.shape()
        )));
    }
    row_softmax(scores, Some(mask))
}

/// Rows = utterance tokens in order, columns = visual tokens in grid order.
pub fn cross_modal_block(attn: &Matrix, seq: &TokenSequence) -> Matrix {
    let vis = seq.visual().range();
    let utts = seq.utterances();
    let mut data = Vec::with_capacity(utts.len() * vis.len());
    for u in utts {
        data.extend_from_slice(&attn.row(u.sequence_index)[vis.clone()]);
    }
    Matrix::new(utts.len(), vis.len(), data).expect("sub-matrix of a finite matrix")
}

/// Places a cross-modal block back at its sequence positions in a zero matrix.
pub fn embed_cross_modal(block: &Matrix, seq: &TokenSequence) -> Result<Matrix> {
    let vis = seq.visual().range();
    if block.shape() != (seq.utterances().len(), vis.len()) {
        return Err(Error::DimensionMismatch(format!(
            "block {:?} does not match {} utterances x {} visual tokens",
            block.shape(),
            seq.utterances().len(),
            vis.len()
        )));
    }
    let n = seq.total_len();
    let mut out = Matrix::zeros(n, n);
    for (k, u) in seq.utterances().iter().enumerate() {
        out.row_mut(u.sequence_index)[vis.clone()].copy_from_slice(block.row(k));
    }
    Ok(out)
}

/// `M_i` for query row `i`.
fn reference_max(scores: &Matrix, i: usize, v_all: &[usize], reference: BiasReference) -> f64 {
    let row = scores.row(i);
    match reference {
        BiasReference::ScaledScore => v_all.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max),
        BiasReference::AttentionWeight => {
            let visible = &row[..=i];
            let mut probs = vec![0.0; visible.len()];
            softmax_row_into(visible, None, &mut probs).expect("row has at least one visible key");
            v_all.iter().map(|&j| probs[j]).fold(f64::NEG_INFINITY, f64::max)
        }
    }
}

/// Builds the sparse bias for every utterance token whose speaker has a
/// region at the token's frame (widened by `frame_window`).
pub fn compute_bias_plan(
    scores: &Matrix,
    seq: &TokenSequence,
    regions: &SpeakerRegionIndex,
    cfg: &BiasConfig,
) -> Result<BiasPlan> {
    let n = seq.total_len();
    if scores.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "scores {:?} for a sequence of {n} tokens",
            scores.shape()
        )));
    }
    if !cfg.alpha.is_finite() {
        return Err(contract("alpha must be finite"));
    }
    let mut plan = BiasPlan::new();
    let v_all = regions.v_all();
    if v_all.is_empty() {
        return Ok(plan);
    }
    if let Some(&bad) = v_all.iter().find(|&&j| !seq.visual().contains(j)) {
        return Err(contract(format!("region index {bad} is not a visual token")));
    }
    for tok in seq.utterances() {
        let frame = seq.utterance_frame(tok);
        let targets = regions.speaker_window(&tok.speaker, frame, cfg.frame_window);
        if targets.is_empty() {
            continue;
        }
        let m = reference_max(scores, tok.sequence_index, v_all, cfg.reference);
        let mut value = cfg.alpha * m;
        if cfg.clamp_nonnegative {
            value = value.max(0.0);
        }
        plan.insert_row(
            tok.sequence_index,
            PlanRow {
                reference_max: m,
                value,
                targets,
            },
        );
    }
    Ok(plan)
}

/// Recomputes only the rows that own plan entries, starting from the
/// unbiased attention.
///
/// Adding the same `b` to every target logit moves the row's mass on the
/// targets in the direction of `b`. With `S_R` the exponentiated mass on the
/// targets and `S_C` the visible rest, the mass goes from
/// `S_R / (S_R + S_C)` to `e^b S_R / (e^b S_R + S_C)`, and the difference is
/// `(e^b - 1) S_R S_C / ((S_R + S_C)(e^b S_R + S_C))`. Both sums are positive
/// whenever the target set and its visible complement are nonempty, so the
/// sign of the change is the sign of `b`.
pub fn rebias_rows(mut attn: Matrix, scores: &Matrix, plan: &BiasPlan, mask: &Mask) -> Result<Matrix> {
    let n = scores.rows();
    let mut logits = vec![0.0; scores.cols()];
    for (i, row) in plan.rows() {
        if i >= n {
            return Err(contract(format!("plan row {i} outside a {n}x{n} score matrix")));
        }
        logits.copy_from_slice(scores.row(i));
        for &j in &row.targets {
            if j >= scores.cols() {
                return Err(contract(format!("plan entry ({i}, {j}) outside the score matrix")));
            }
            if !mask.is_visible(i, j) {
                return Err(contract(format!("plan entry ({i}, {j}) targets a masked position")));
            }
            logits[j] += row.value;
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        softmax_row_into(&logits, Some(mask.row(i)), attn.row_mut(i)).map_err(|()| Error::FullyMaskedRow(i))?;
    }
    Ok(attn)
}

/// `softmax_j(scores + W_b)` row by row.
pub fn biased_attention(scores: &Matrix, plan: &BiasPlan, mask: &Mask) -> Result<Matrix> {
    let baseline = baseline_attention(scores, mask)?;
    rebias_rows(baseline, scores, plan, mask)
}

/// Attention of one head with and without the bias.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub head: HeadId,
    pub activity: Option<f64>,
    pub active: bool,
    pub baseline: Matrix,
    /// `None` when the head is not biased (identical to `baseline`).
    pub biased: Option<Matrix>,
    pub plan: Option<BiasPlan>,
}

impl HeadTrace {
    pub fn biased(&self) -> &Matrix {
        self.biased.as_ref().unwrap_or(&self.baseline)
    }

    pub fn status(&self) -> HeadStatus {
        HeadStatus {
            activity: self.activity,
            active: self.active,
        }
    }
}

/// Everything a forward pass reads.
#[derive(Clone, Copy)]
pub struct ForwardInputs<'a> {
    pub embeddings: &'a Matrix,
    pub stack: &'a LayerStack,
    pub sequence: &'a TokenSequence,
    pub regions: &'a SpeakerRegionIndex,
    pub config: &'a BiasConfig,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub heads: Vec<HeadTrace>,
    pub selection: HeadSelection,
}

/// Classifies one head from its pre-softmax scores and applies the bias if active.
pub fn analyze_head_scores(
    head: HeadId,
    scores: &Matrix,
    mask: &Mask,
    seq: &TokenSequence,
    regions: &SpeakerRegionIndex,
    cfg: &BiasConfig,
    selector: &dyn HeadSelector,
) -> Result<HeadTrace> {
    let baseline = baseline_attention(scores, mask)?;
    let activity = head_activity(&baseline, seq, regions)?;
    let active = cfg.layer_range.contains(head.layer) && selector.is_active(head, activity);
    let (biased, plan) = if active {
        let plan = compute_bias_plan(scores, seq, regions, cfg)?;
        let biased = rebias_rows(baseline.clone(), scores, &plan, mask)?;
        (Some(biased), Some(plan))
    } else {
        (None, None)
    };
    Ok(HeadTrace {
        head,
        activity,
        active,
        baseline,
        biased,
        plan,
    })
}

/// Head activity on unbiased attention; `None` when `U` or `V_all` is empty.
pub fn head_activity(attn: &Matrix, seq: &TokenSequence, regions: &SpeakerRegionIndex) -> Result<Option<f64>> {
    let us = seq.utterance_indices();
    if us.is_empty() || regions.v_all().is_empty() {
        return Ok(None);
    }
    head_activity_score(attn, &us, regions.v_all()).map(Some)
}

fn check_inputs(inputs: &ForwardInputs<'_>) -> Result<()> {
    inputs.config.validate(inputs.stack.n_layers())?;
    let n = inputs.sequence.total_len();
    if inputs.embeddings.shape() != (n, inputs.stack.model_dim()) {
        return Err(Error::DimensionMismatch(format!(
            "embeddings {:?}, expected {n}x{}",
            inputs.embeddings.shape(),
            inputs.stack.model_dim()
        )));
    }
    Ok(())
}

/// Streams every head of the layers in `layers` through `visit`, in
/// (layer, head) order.
pub fn forward_visit(
    inputs: &ForwardInputs<'_>,
    selector: &dyn HeadSelector,
    layers: LayerRange,
    mut visit: impl FnMut(HeadTrace) -> Result<()>,
) -> Result<()> {
    check_inputs(inputs)?;
    let mask = Mask::causal(inputs.sequence.total_len());
    for (l, heads) in inputs.stack.layers.iter().enumerate() {
        if !layers.contains(l) {
            continue;
        }
        for (h, weights) in heads.iter().enumerate() {
            let scores = head_scores(inputs.embeddings, weights)?;
            let trace = analyze_head_scores(
                HeadId::new(l, h),
                &scores,
                &mask,
                inputs.sequence,
                inputs.regions,
                inputs.config,
                selector,
            )?;
            visit(trace)?;
        }
    }
    Ok(())
}

/// Baseline and biased attention for every head of the stack.
pub fn forward_pass(inputs: &ForwardInputs<'_>, selector: &dyn HeadSelector) -> Result<ForwardOutput> {
    let mut heads = Vec::with_capacity(inputs.stack.total_heads());
    forward_visit(inputs, selector, LayerRange::all(inputs.stack.n_layers()), |t| {
        heads.push(t);
        Ok(())
    })?;
    let selection = HeadSelection {
        heads: heads.iter().map(|t| (t.head, t.status())).collect(),
    };
    Ok(ForwardOutput { heads, selection })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::ThresholdSelector;
    use crate::scene::{build_region_index, BoxCoords, SpeakerBox, SpeakerId};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// 1 frame of 1x4 patches, 2 other-text tokens, utterances from A, B, A.
    fn small_scene() -> (TokenSequence, SpeakerRegionIndex) {
        let seq = TokenSequence::with_standard_layout(
            1,
            1,
            4,
            vec![0.0],
            2,
            [("hi", "A"), ("yo", "B"), ("ok", "A")]
                .iter()
                .map(|(t, s)| (t.to_string(), SpeakerId::from(*s), 0.0)),
        )
        .unwrap();
        let boxes = vec![
            SpeakerBox {
                speaker: "A".into(),
                frame: 0,
                bbox: BoxCoords::new(0.0, 0.0, 0.5, 1.0).unwrap(),
            },
            SpeakerBox {
                speaker: "B".into(),
                frame: 0,
                bbox: BoxCoords::new(0.5, 0.0, 0.75, 1.0).unwrap(),
            },
        ];
        let regions = build_region_index(&boxes, seq.visual()).unwrap();
        (seq, regions)
    }

    #[test]
    fn head_scores_examples() {
        let x = Matrix::identity(3);
        let head = HeadWeights::new(Matrix::identity(3), Matrix::identity(3)).unwrap();
        let s = head_scores(&x, &head).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 / 3f64.sqrt() } else { 0.0 };
                assert!((s.get(i, j) - expect).abs() < 1e-15);
            }
        }

        let s = head_scores(&Matrix::zeros(4, 3), &head).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));

        let single = m(&[&[3.0, 4.0]]);
        let head = HeadWeights::new(Matrix::identity(2), Matrix::identity(2)).unwrap();
        assert!((head_scores(&single, &head).unwrap().get(0, 0) - 25.0 / 2f64.sqrt()).abs() < 1e-12);

        assert!(head_scores(&Matrix::zeros(2, 5), &head).is_err());
        assert!(HeadWeights::new(Matrix::zeros(2, 2), Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn baseline_examples() {
        let zeros = Matrix::zeros(2, 2);
        assert_eq!(
            baseline_attention(&zeros, &Mask::full(2, 2)).unwrap(),
            m(&[&[0.5, 0.5], &[0.5, 0.5]])
        );
        assert_eq!(
            baseline_attention(&zeros, &Mask::causal(2)).unwrap(),
            m(&[&[1.0, 0.0], &[0.5, 0.5]])
        );
        let a = baseline_attention(&m(&[&[2f64.ln(), 0.0], &[0.0, 0.0]]), &Mask::full(2, 2)).unwrap();
        assert!((a.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!(baseline_attention(&Matrix::zeros(2, 3), &Mask::full(2, 3)).is_err());
    }

    #[test]
    fn cross_modal_block_examples() {
        let (seq, _) = small_scene();
        let n = seq.total_len();
        let uniform = Matrix::from_fn(n, n, |_, _| 1.0 / n as f64).unwrap();
        let block = cross_modal_block(&uniform, &seq);
        assert_eq!(block.shape(), (3, 4));
        assert!(block.data().iter().all(|&v| v == 1.0 / n as f64));

        let attn = Matrix::from_fn(n, n, |i, j| (i * n + j) as f64).unwrap();
        let block = cross_modal_block(&attn, &seq);
        let back = embed_cross_modal(&block, &seq).unwrap();
        for i in 0..n {
            for j in 0..n {
                let inside = seq.utterance_indices().contains(&i) && seq.visual().contains(j);
                let expect = if inside { attn.get(i, j) } else { 0.0 };
                assert_eq!(back.get(i, j), expect);
            }
        }

        let empty = TokenSequence::with_standard_layout(1, 1, 2, vec![0.0], 0, Vec::new()).unwrap();
        assert_eq!(cross_modal_block(&Matrix::zeros(2, 2), &empty).rows(), 0);
    }

    #[test]
    fn bias_plan_uses_row_max_over_v_all() {
        let (seq, regions) = small_scene();
        // v_all = {0, 1, 2}; token 6 (A) has scores [0.2, -0.1, 0.5] there.
        let n = seq.total_len();
        let scores = Matrix::from_fn(n, n, |i, j| match (i, j) {
            (6, 0) => 0.2,
            (6, 1) => -0.1,
            (6, 2) => 0.5,
            (6, 3) => 9.0,
            _ => 0.0,
        })
        .unwrap();
        let cfg = BiasConfig {
            alpha: 1.0,
            ..BiasConfig::default()
        };
        let plan = compute_bias_plan(&scores, &seq, &regions, &cfg).unwrap();
        let row = plan.row(6).unwrap();
        assert_eq!(row.reference_max, 0.5);
        assert_eq!(row.value, 0.5);
        assert_eq!(row.targets, vec![0, 1]);
        assert_eq!(plan.row(7).unwrap().targets, vec![2]);

        let half = compute_bias_plan(&scores, &seq, &regions, &BiasConfig { alpha: 0.5, ..cfg }).unwrap();
        assert_eq!(half.row(6).unwrap().value, 0.25);

        let zero = compute_bias_plan(&scores, &seq, &regions, &BiasConfig { alpha: 0.0, ..cfg }).unwrap();
        assert!(zero.entries().all(|(_, _, v)| v == 0.0));
        assert_eq!(zero.entry_count(), plan.entry_count());
    }

    #[test]
    fn bias_plan_clamp_and_absent_regions() {
        let (seq, regions) = small_scene();
        let n = seq.total_len();
        let scores = Matrix::from_fn(n, n, |_, _| -2.0).unwrap();
        let cfg = BiasConfig::default();
        let plan = compute_bias_plan(&scores, &seq, &regions, &cfg).unwrap();
        assert!(plan.entries().all(|(_, _, v)| v == -2.0));
        let clamped = compute_bias_plan(
            &scores,
            &seq,
            &regions,
            &BiasConfig {
                clamp_nonnegative: true,
                ..cfg
            },
        )
        .unwrap();
        assert!(clamped.entries().all(|(_, _, v)| v == 0.0));

        let no_regions = SpeakerRegionIndex::default();
        assert!(compute_bias_plan(&scores, &seq, &no_regions, &cfg).unwrap().is_empty());
        assert!(compute_bias_plan(&Matrix::zeros(3, 3), &seq, &regions, &cfg).is_err());
    }

    #[test]
    fn bias_plan_post_softmax_reference() {
        let (seq, regions) = small_scene();
        let n = seq.total_len();
        let scores = Matrix::from_fn(n, n, |i, j| if i == 6 && j == 1 { 2.0 } else { 0.0 }).unwrap();
        let cfg = BiasConfig {
            reference: BiasReference::AttentionWeight,
            ..BiasConfig::default()
        };
        let plan = compute_bias_plan(&scores, &seq, &regions, &cfg).unwrap();
        // row 6 sees keys 0..=6: six zeros and one 2.0
        let e2 = 2f64.exp();
        let expect = e2 / (e2 + 6.0);
        assert!((plan.row(6).unwrap().reference_max - expect).abs() < 1e-15);
    }

    #[test]
    fn biased_attention_examples() {
        let scores = Matrix::zeros(4, 4);
        let full = Mask::full(4, 4);
        assert_eq!(
            biased_attention(&scores, &BiasPlan::new(), &full).unwrap(),
            baseline_attention(&scores, &full).unwrap()
        );

        let mut plan = BiasPlan::new();
        plan.insert_row(
            0,
            PlanRow {
                reference_max: 3f64.ln(),
                value: 3f64.ln(),
                targets: vec![0, 1],
            },
        );
        let b = biased_attention(&scores, &plan, &full).unwrap();
        for (got, want) in b.row(0).iter().zip([3.0 / 8.0, 3.0 / 8.0, 1.0 / 8.0, 1.0 / 8.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(b.row(1), &[0.25; 4]);

        // masked target
        assert!(biased_attention(&scores, &plan, &Mask::causal(4)).is_err());
    }

    #[test]
    fn negative_bias_lowers_subset_mass() {
        let scores = m(&[&[0.3, -1.0, 0.7, 0.1]]);
        let mask = Mask::full(1, 4);
        let mut plan = BiasPlan::new();
        plan.insert_row(
            0,
            PlanRow {
                reference_max: -0.5,
                value: -0.5,
                targets: vec![1, 2],
            },
        );
        let base = baseline_attention(&Matrix::from_fn(1, 1, |_, _| 0.0).unwrap(), &Mask::full(1, 1)).unwrap();
        assert_eq!(base.get(0, 0), 1.0);
        let plain = row_softmax(&scores, Some(&mask)).unwrap();
        let biased = rebias_rows(plain.clone(), &scores, &plan, &mask).unwrap();
        let mass = |a: &Matrix| a.get(0, 1) + a.get(0, 2);
        assert!(mass(&biased) < mass(&plain));
    }

    fn tiny_stack(layers: usize, heads: usize, d: usize, d_head: usize) -> LayerStack {
        let mut k = 0u64;
        let mut next = || {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((k >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 2.0
        };
        let layers = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        let q = Matrix::from_fn(d, d_head, |_, _| next()).unwrap();
                        let kk = Matrix::from_fn(d, d_head, |_, _| next()).unwrap();
                        HeadWeights::new(q, kk).unwrap()
                    })
                    .collect()
            })
            .collect();
        LayerStack::new(layers).unwrap()
    }

    #[test]
    fn forward_pass_respects_lambda_and_range() {
        let (seq, regions) = small_scene();
        let stack = tiny_stack(3, 2, 6, 3);
        let n = seq.total_len();
        let x = Matrix::from_fn(n, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0).unwrap();

        let run = |cfg: &BiasConfig| {
            let inputs = ForwardInputs {
                embeddings: &x,
                stack: &stack,
                sequence: &seq,
                regions: &regions,
                config: cfg,
            };
            forward_pass(&inputs, &cfg.selector()).unwrap()
        };

        let cfg = BiasConfig {
            lambda: f64::INFINITY,
            layer_range: LayerRange::all(3),
            ..BiasConfig::default()
        };
        let out = run(&cfg);
        assert_eq!(out.heads.len(), 6);
        assert!(out.heads.iter().all(|t| !t.active && t.biased.is_none()));
        assert_eq!(out.selection.active_ratio(), 0.0);

        let cfg = BiasConfig {
            lambda: 0.0,
            layer_range: LayerRange::inclusive(1, 1),
            ..cfg
        };
        let out = run(&cfg);
        for t in &out.heads {
            assert_eq!(t.active, t.head.layer == 1);
            if t.active {
                let biased = t.biased();
                let plan_rows: Vec<usize> = t.plan.as_ref().unwrap().rows().map(|(i, _)| i).collect();
                assert_eq!(plan_rows, seq.utterance_indices());
                for i in 0..n {
                    let same = biased.row(i) == t.baseline.row(i);
                    assert_eq!(same, !plan_rows.contains(&i), "row {i}");
                }
            }
        }

        let out = run(&BiasConfig {
            layer_range: LayerRange::empty(),
            ..cfg
        });
        assert!(out.heads.iter().all(|t| t.biased.is_none()));
    }

    #[test]
    fn forward_pass_validates() {
        let (seq, regions) = small_scene();
        let stack = tiny_stack(2, 1, 4, 2);
        let x = Matrix::zeros(seq.total_len(), 5);
        let cfg = BiasConfig {
            layer_range: LayerRange::all(2),
            ..BiasConfig::default()
        };
        let inputs = ForwardInputs {
            embeddings: &x,
            stack: &stack,
            sequence: &seq,
            regions: &regions,
            config: &cfg,
        };
        assert!(forward_pass(&inputs, &cfg.selector()).is_err());

        let x = Matrix::zeros(seq.total_len(), 4);
        let bad = BiasConfig::default(); // 10-19 on a 2-layer stack
        let inputs = ForwardInputs {
            embeddings: &x,
            config: &bad,
            ..inputs
        };
        assert!(forward_pass(&inputs, &bad.selector()).is_err());

        let sel = ThresholdSelector {
            lambda: 0.0,
            layer_range: LayerRange::all(2),
        };
        assert!(!sel.is_active(HeadId::new(0, 0), None));
    }
}
