//! Brute-force reference implementations.
//!
//! Nothing here calls into the fast paths in `numerics`, `attention` or
//! `alignment`: softmax, projections and means are re-derived with plain
//! loops so that equivalence checks compare two independent routes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::alignment::{HeadId, LayerRange};
use crate::attention::{
    biased_attention, compute_bias_plan, forward_visit, BiasConfig, BiasPlan, BiasReference, ForwardInputs, LayerStack,
};
use crate::error::{contract, Result};
use crate::numerics::{Mask, Matrix};
use crate::scene::{build_region_index, BoxCoords, SpeakerBox, SpeakerId, SpeakerRegionIndex, TokenSequence};
use crate::synth::{generate_scene, generate_stack, SynthSpec};

fn naive_softmax(logits: &[f64], visible: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut hi = f64::NEG_INFINITY;
    for (j, &v) in logits.iter().enumerate() {
        if visible(j) && v > hi {
            hi = v;
        }
    }
    let mut out = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (j, &v) in logits.iter().enumerate() {
        if visible(j) {
            out[j] = (v - hi).exp();
            total += out[j];
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Materializes the full dense bias matrix, adds it to the scores and softmaxes.
pub fn dense_biased_attention(scores: &Matrix, plan: &BiasPlan, mask: &Mask) -> Result<Matrix> {
    let (n, m) = scores.shape();
    if mask.shape() != (n, m) {
        return Err(contract("mask shape differs from scores"));
    }
    let mut dense = vec![vec![0.0f64; m]; n];
    for (i, j, v) in plan.entries() {
        if i >= n || j >= m {
            return Err(contract(format!("plan entry ({i}, {j}) out of bounds")));
        }
        if !mask.is_visible(i, j) {
            return Err(contract(format!("plan entry ({i}, {j}) is masked")));
        }
        dense[i][j] += v;
    }
    let mut rows = Vec::with_capacity(n);
    for (i, bias_row) in dense.iter().enumerate() {
        if !(0..m).any(|j| mask.is_visible(i, j)) {
            return Err(crate::error::Error::FullyMaskedRow(i));
        }
        let logits: Vec<f64> = (0..m).map(|j| scores.get(i, j) + bias_row[j]).collect();
        rows.push(naive_softmax(&logits, |j| mask.is_visible(i, j)));
    }
    Matrix::from_rows(&rows)
}

/// Recomputes every head's activity score with nested loops over the causal
/// attention of the utterance rows.
pub fn exhaustive_head_scan(
    stack: &LayerStack,
    embeddings: &Matrix,
    seq: &TokenSequence,
    regions: &SpeakerRegionIndex,
) -> Result<BTreeMap<HeadId, f64>> {
    let us = seq.utterance_indices();
    let v_all = regions.v_all();
    if us.is_empty() || v_all.is_empty() {
        return Err(contract("scan needs utterances and speaker regions"));
    }
    let n = seq.total_len();
    let d = stack.model_dim();
    let mut out = BTreeMap::new();
    for l in 0..stack.n_layers() {
        for (h, w) in stack.layer(l).iter().enumerate() {
            let dh = w.head_dim();
            let project = |p: &Matrix, i: usize| -> Vec<f64> {
                (0..dh)
                    .map(|c| {
                        let mut acc = 0.0;
                        for k in 0..d {
                            acc += embeddings.get(i, k) * p.get(k, c);
                        }
                        acc
                    })
                    .collect()
            };
            let keys: Vec<Vec<f64>> = (0..n).map(|j| project(w.w_k(), j)).collect();
            let mut total = 0.0;
            for &i in &us {
                let q = project(w.w_q(), i);
                let logits: Vec<f64> = (0..=i)
                    .map(|j| {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += q[c] * keys[j][c];
                        }
                        acc / (dh as f64).sqrt()
                    })
                    .collect();
                let probs = naive_softmax(&logits, |_| true);
                for &j in v_all {
                    total += probs[j];
                }
            }
            out.insert(HeadId::new(l, h), total / (us.len() * v_all.len()) as f64);
        }
    }
    Ok(out)
}

/// A small random sequence, region index, score matrix and bias config.
#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub sequence: TokenSequence,
    pub regions: SpeakerRegionIndex,
    pub scores: Matrix,
    pub config: BiasConfig,
}

impl RandomInstance {
    pub fn generate(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let n_spk = rng.random_range(1..=3usize);
        let speakers: Vec<SpeakerId> = (0..n_spk).map(|k| SpeakerId::new(format!("s{k}"))).collect();
        let mut boxes = Vec::new();
        for t in 0..frames {
            for s in &speakers {
                if rng.random::<f64>() < 0.2 {
                    continue;
                }
                let x0 = rng.random_range(0.0..0.8);
                let y0 = rng.random_range(0.0..0.8);
                let x1 = rng.random_range(x0 + 0.05..=1.0);
                let y1 = rng.random_range(y0 + 0.05..=1.0);
                boxes.push(SpeakerBox {
                    speaker: s.clone(),
                    frame: t,
                    bbox: BoxCoords::new(x0, y0, x1, y1)?,
                });
            }
        }
        let frame_times: Vec<f64> = (0..frames).map(|t| t as f64).collect();
        let n_tokens = rng.random_range(0..=6);
        let tokens: Vec<(String, SpeakerId, f64)> = (0..n_tokens)
            .map(|k| {
                let s = speakers[rng.random_range(0..n_spk)].clone();
                (format!("w{k}"), s, rng.random_range(0.0..frames as f64))
            })
            .collect();
        let other = rng.random_range(0..=3);
        let sequence = TokenSequence::with_standard_layout(frames, h, w, frame_times, other, tokens)?;
        let regions = build_region_index(&boxes, sequence.visual())?;
        let n = sequence.total_len();
        let spread = rng.random_range(0.1..4.0);
        let scores = Matrix::from_fn(n, n, |_, _| spread * rng.sample::<f64, _>(StandardNormal))?;
        let config = BiasConfig {
            alpha: rng.random_range(0.0..3.0),
            lambda: 0.0,
            layer_range: LayerRange::inclusive(0, 0),
            clamp_nonnegative: rng.random::<f64>() < 0.2,
            frame_window: rng.random_range(0..=1),
            reference: if rng.random::<f64>() < 0.2 {
                BiasReference::AttentionWeight
            } else {
                BiasReference::ScaledScore
            },
        };
        Ok(Self {
            sequence,
            regions,
            scores,
            config,
        })
    }
}

/// Worst-case discrepancies between fast paths and oracles.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub max_attention_diff: f64,
    pub scenes: usize,
    pub max_activity_diff: f64,
}

/// Sparse vs dense biased attention on `instances` random instances, and
/// fast vs exhaustive head activity on `scenes` synthetic scenes built from
/// `scene_spec` (seeds offset from `seed`).
pub fn check_equivalence(
    seed: u64,
    instances: usize,
    scenes: usize,
    scene_spec: &SynthSpec,
) -> Result<EquivalenceReport> {
    let mut report = EquivalenceReport {
        instances,
        scenes,
        ..Default::default()
    };
    for k in 0..instances as u64 {
        let inst = RandomInstance::generate(seed.wrapping_add(k))?;
        let plan = compute_bias_plan(&inst.scores, &inst.sequence, &inst.regions, &inst.config)?;
        let mask = Mask::causal(inst.sequence.total_len());
        let fast = biased_attention(&inst.scores, &plan, &mask)?;
        let slow = dense_biased_attention(&inst.scores, &plan, &mask)?;
        report.max_attention_diff = report.max_attention_diff.max(fast.max_abs_diff(&slow)?);
    }
    for k in 0..scenes as u64 {
        let spec = SynthSpec {
            seed: seed.wrapping_add(k),
            ..scene_spec.clone()
        };
        let scene = generate_scene(&spec)?;
        let stack = generate_stack(&spec)?;
        let cfg = BiasConfig {
            lambda: f64::INFINITY,
            layer_range: LayerRange::all(stack.n_layers()),
            ..BiasConfig::default()
        };
        let inputs = ForwardInputs {
            embeddings: &scene.embeddings,
            stack: &stack,
            sequence: &scene.scene.sequence,
            regions: &scene.scene.regions,
            config: &cfg,
        };
        let slow = exhaustive_head_scan(&stack, &scene.embeddings, &scene.scene.sequence, &scene.scene.regions)?;
        forward_visit(&inputs, &cfg.selector(), LayerRange::all(stack.n_layers()), |t| {
            let fast = t.activity.ok_or_else(|| contract("synthetic scene without activity"))?;
            report.max_activity_diff = report.max_activity_diff.max((fast - slow[&t.head]).abs());
            Ok(())
        })?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PlanRow;

    #[test]
    fn dense_single_entry() {
        let scores = Matrix::zeros(3, 3);
        let mut plan = BiasPlan::new();
        plan.insert_row(
            1,
            PlanRow {
                reference_max: 2f64.ln(),
                value: 2f64.ln(),
                targets: vec![0],
            },
        );
        let out = dense_biased_attention(&scores, &plan, &Mask::full(3, 3)).unwrap();
        for (g, w) in out.row(1).iter().zip([0.5, 0.25, 0.25]) {
            assert!((g - w).abs() < 1e-15);
        }
        let empty = dense_biased_attention(&scores, &BiasPlan::new(), &Mask::causal(3)).unwrap();
        assert_eq!(empty.row(2), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn dense_rejects_masked_entries() {
        let mut plan = BiasPlan::new();
        plan.insert_row(
            0,
            PlanRow {
                reference_max: 1.0,
                value: 1.0,
                targets: vec![2],
            },
        );
        assert!(dense_biased_attention(&Matrix::zeros(3, 3), &plan, &Mask::causal(3)).is_err());
    }

    #[test]
    fn uniform_construction_scores_one_over_n() {
        // zero embeddings give zero scores, so each causal row is uniform over 0..=i
        let spec = SynthSpec {
            n_layers: 1,
            n_heads: 2,
            model_dim: 4,
            ..SynthSpec::with_seed(5)
        };
        let scene = generate_scene(&spec).unwrap();
        let stack = generate_stack(&spec).unwrap();
        let seq = &scene.scene.sequence;
        let zeros = Matrix::zeros(seq.total_len(), 4);
        let scan = exhaustive_head_scan(&stack, &zeros, seq, &scene.scene.regions).unwrap();
        let us = seq.utterance_indices();
        let expect = us.iter().map(|&i| 1.0 / (i + 1) as f64).sum::<f64>() / us.len() as f64;
        for v in scan.values() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn random_instances_are_deterministic() {
        let a = RandomInstance::generate(11).unwrap();
        let b = RandomInstance::generate(11).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.regions, b.regions);
    }

    #[test]
    fn quick_equivalence() {
        let spec = SynthSpec {
            n_layers: 2,
            n_heads: 4,
            model_dim: 16,
            ..SynthSpec::default()
        };
        let r = check_equivalence(100, 30, 3, &spec).unwrap();
        assert!(r.max_attention_diff <= 1e-9, "{r:?}");
        assert!(r.max_activity_diff <= 1e-12, "{r:?}");
    }
}
