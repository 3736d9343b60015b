//! Cross-modal alignment scores, attention-head classification and
//! aggregate reporting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{contract, Result};
use crate::numerics::Matrix;
use crate::scene::{SpeakerId, SpeakerRegionIndex, TokenSequence};

/// Display scale for mean AttnMax values (reported in units of 10⁻²).
pub const ATTN_MAX_SCALE: f64 = 1e2;
/// Display scale for mean AttnMean values (reported in units of 10⁻⁴).
pub const ATTN_MEAN_SCALE: f64 = 1e4;

/// Position of an attention head in the stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

impl Serialize for HeadId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Inclusive interval of layer indices, possibly empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LayerRange(Option<(usize, usize)>);

impl LayerRange {
    /// `first..=last`; an inverted pair yields the empty range.
    pub fn inclusive(first: usize, last: usize) -> Self {
        if first <= last {
            Self(Some((first, last)))
        } else {
            Self(None)
        }
    }

    pub fn empty() -> Self {
        Self(None)
    }

    /// Every layer of an `n_layers` stack.
    pub fn all(n_layers: usize) -> Self {
        if n_layers == 0 {
            Self(None)
        } else {
            Self(Some((0, n_layers - 1)))
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.is_some_and(|(a, b)| a <= layer && layer <= b)
    }

    pub fn bounds(&self) -> Option<(usize, usize)> {
        self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn len(&self) -> usize {
        self.0.map_or(0, |(a, b)| b - a + 1)
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some((a, b)) => write!(f, "{a}-{b}"),
            None => f.write_str("none"),
        }
    }
}

impl FromStr for LayerRange {
    type Err = String;

    /// Accepts `"10-19"`, a single layer `"16"`, or `"none"`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(Self::empty());
        }
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("invalid layer range {s:?}"))
        };
        match s.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (parse(a)?, parse(b)?);
                if a > b {
                    return Err(format!("layer range {s:?} is inverted"));
                }
                Ok(Self::inclusive(a, b))
            }
            None => {
                let a = parse(s)?;
                Ok(Self::inclusive(a, a))
            }
        }
    }
}

impl Serialize for LayerRange {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serde helper for thresholds that may be `+inf` (written as the string `"inf"`).
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_threshold(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a nonnegative threshold, accepting `inf`.
pub fn parse_threshold(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("+inf") {
        f64::INFINITY
    } else {
        s.parse::<f64>().map_err(|_| format!("invalid threshold {s:?}"))?
    };
    if v.is_nan() || v < 0.0 {
        return Err(format!("threshold must be nonnegative, got {s:?}"));
    }
    Ok(v)
}

/// Which speaker region a token is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionMode {
    /// The token's speaker at the frame its timestamp maps to.
    #[default]
    OwnFrame,
    /// The token's speaker over every frame.
    AllFrames,
}

impl FromStr for RegionMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "own_frame" | "own-frame" => Ok(Self::OwnFrame),
            "all_frames" | "all-frames" => Ok(Self::AllFrames),
            other => Err(format!("unknown region mode {other:?}")),
        }
    }
}

/// AttnMax / AttnMean of one utterance token against one region.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentScore {
    pub token_index: usize,
    pub speaker: SpeakerId,
    /// `None` when the region spans all frames.
    pub frame: Option<usize>,
    pub attn_max: f64,
    pub attn_mean: f64,
}

fn check_region(row: &[f64], region: &[usize]) -> Result<()> {
    if region.is_empty() {
        return Err(contract("alignment region is empty"));
    }
    if let Some(&bad) = region.iter().find(|&&j| j >= row.len()) {
        return Err(contract(format!(
            "region index {bad} outside attention row of length {}",
            row.len()
        )));
    }
    Ok(())
}

/// Largest attention weight the row places on any region token.
pub fn attn_max(row: &[f64], region: &[usize]) -> Result<f64> {
    check_region(row, region)?;
    Ok(region.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max))
}

/// Mean attention weight the row places on the region's tokens.
pub fn attn_mean(row: &[f64], region: &[usize]) -> Result<f64> {
    check_region(row, region)?;
    let mean = region.iter().map(|&j| row[j]).sum::<f64>() / region.len() as f64;
    // summation rounding can push the mean a few ulps past the max
    Ok(mean.min(region.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max)))
}

/// Scores every utterance token that has a region; tokens without one are skipped.
pub fn score_tokens(
    attn: &Matrix,
    seq: &TokenSequence,
    regions: &SpeakerRegionIndex,
    mode: RegionMode,
) -> Result<Vec<AlignmentScore>> {
    let mut out = Vec::new();
    for tok in seq.utterances() {
        let (region, frame) = match mode {
            RegionMode::OwnFrame => {
                let t = seq.utterance_frame(tok);
                match regions.get(&tok.speaker, t) {
                    Some(r) => (r.to_vec(), Some(t)),
                    None => continue,
                }
            }
            RegionMode::AllFrames => (regions.speaker_all_frames(&tok.speaker), None),
        };
        if region.is_empty() {
            continue;
        }
        let row = attn.row(tok.sequence_index);
        out.push(AlignmentScore {
            token_index: tok.sequence_index,
            speaker: tok.speaker.clone(),
            frame,
            attn_max: attn_max(row, &region)?,
            attn_mean: attn_mean(row, &region)?,
        });
    }
    Ok(out)
}

/// Mean attention from utterance tokens to all speaker-region tokens.
pub fn head_activity_score(attn: &Matrix, utterance_indices: &[usize], v_all: &[usize]) -> Result<f64> {
    if utterance_indices.is_empty() || v_all.is_empty() {
        return Err(contract("head activity needs nonempty utterance and region sets"));
    }
    let (rows, cols) = attn.shape();
    if utterance_indices.iter().any(|&i| i >= rows) || v_all.iter().any(|&j| j >= cols) {
        return Err(contract("head activity index outside the attention matrix"));
    }
    let total: f64 = utterance_indices
        .iter()
        .map(|&i| {
            let row = attn.row(i);
            v_all.iter().map(|&j| row[j]).sum::<f64>()
        })
        .sum();
    Ok(total / (utterance_indices.len() * v_all.len()) as f64)
}

/// Decides which heads receive the bias.
pub trait HeadSelector {
    /// `activity` is `None` when the scene has no utterances or no speaker regions.
    fn is_active(&self, head: HeadId, activity: Option<f64>) -> bool;
}

/// Active iff the head's layer is in range and its activity strictly exceeds `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSelector {
    pub lambda: f64,
    pub layer_range: LayerRange,
}

impl HeadSelector for ThresholdSelector {
    fn is_active(&self, head: HeadId, activity: Option<f64>) -> bool {
        self.layer_range.contains(head.layer) && activity.is_some_and(|a| a > self.lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeadStatus {
    pub activity: Option<f64>,
    pub active: bool,
}

/// Activity and active flag for every head of one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct HeadSelection {
    pub heads: BTreeMap<HeadId, HeadStatus>,
}

impl HeadSelection {
    pub fn active_count(&self) -> usize {
        self.heads.values().filter(|s| s.active).count()
    }

    pub fn total(&self) -> usize {
        self.heads.len()
    }

    /// Active heads over all heads; 0 for an empty selection.
    pub fn active_ratio(&self) -> f64 {
        if self.heads.is_empty() {
            0.0
        } else {
            self.active_count() as f64 / self.total() as f64
        }
    }

    pub fn active_set(&self) -> Vec<HeadId> {
        self.heads.iter().filter(|(_, s)| s.active).map(|(h, _)| *h).collect()
    }
}

/// Thresholds per-head activity scores. Heads outside `layer_range` are inactive.
pub fn classify_heads(scores: &BTreeMap<HeadId, f64>, lambda: f64, layer_range: LayerRange) -> HeadSelection {
    let selector = ThresholdSelector { lambda, layer_range };
    HeadSelection {
        heads: scores
            .iter()
            .map(|(&h, &a)| {
                (
                    h,
                    HeadStatus {
                        activity: Some(a),
                        active: selector.is_active(h, Some(a)),
                    },
                )
            })
            .collect(),
    }
}

/// Token scores measured on one head of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSample {
    pub head: HeadId,
    pub scores: Vec<AlignmentScore>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScaledMetric {
    pub raw: f64,
    /// `raw × scale`
    pub scaled: f64,
    pub scale: f64,
}

impl ScaledMetric {
    fn new(raw: f64, scale: f64) -> Self {
        Self {
            raw,
            scaled: raw * scale,
            scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadBreakdown {
    pub tokens: usize,
    pub attn_max: f64,
    pub attn_mean: f64,
    pub mean_activity: Option<f64>,
    pub active_fraction: f64,
}

/// Aggregate alignment statistics over tokens, heads and samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub tokens: usize,
    pub attn_max: ScaledMetric,
    pub attn_mean: ScaledMetric,
    pub active_heads: usize,
    pub total_heads: usize,
    pub active_head_ratio: f64,
    pub per_head: BTreeMap<HeadId, HeadBreakdown>,
}

/// Order-independent mean: values are sorted before summation so any
/// permutation of the input gives a bit-identical result.
fn sorted_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    mean.clamp(values[0], values[values.len() - 1])
}

/// Averages per-token scores (each token counts once) and merges head selections.
pub fn aggregate_report(samples: &[HeadSample], selections: &[HeadSelection]) -> Result<AlignmentReport> {
    let tokens: usize = samples.iter().map(|s| s.scores.len()).sum();
    if tokens == 0 {
        return Err(contract("aggregate report needs at least one scored token"));
    }
    let all =
        |f: fn(&AlignmentScore) -> f64| -> Vec<f64> { samples.iter().flat_map(|s| s.scores.iter().map(f)).collect() };
    let mean_max = sorted_mean(all(|s| s.attn_max));
    let mean_mean = sorted_mean(all(|s| s.attn_mean));

    let mut by_head: BTreeMap<HeadId, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let entry = by_head.entry(s.head).or_default();
        entry.0.extend(s.scores.iter().map(|x| x.attn_max));
        entry.1.extend(s.scores.iter().map(|x| x.attn_mean));
    }
    let mut status_by_head: BTreeMap<HeadId, (Vec<f64>, usize, usize)> = BTreeMap::new();
    for sel in selections {
        for (h, st) in &sel.heads {
            let e = status_by_head.entry(*h).or_default();
            e.0.extend(st.activity);
            e.1 += usize::from(st.active);
            e.2 += 1;
        }
    }
    let per_head = by_head
        .into_iter()
        .filter(|(_, (maxes, _))| !maxes.is_empty())
        .map(|(h, (maxes, means))| {
            let (mean_activity, active_fraction) = match status_by_head.remove(&h) {
                Some((acts, active, seen)) => (
                    (!acts.is_empty()).then(|| sorted_mean(acts)),
                    active as f64 / seen as f64,
                ),
                None => (None, 0.0),
            };
            let breakdown = HeadBreakdown {
                tokens: maxes.len(),
                attn_max: sorted_mean(maxes),
                attn_mean: sorted_mean(means),
                mean_activity,
                active_fraction,
            };
            (h, breakdown)
        })
        .collect();

    let active_heads: usize = selections.iter().map(HeadSelection::active_count).sum();
    let total_heads: usize = selections.iter().map(HeadSelection::total).sum();
    Ok(AlignmentReport {
        tokens,
        attn_max: ScaledMetric::new(mean_max, ATTN_MAX_SCALE),
        attn_mean: ScaledMetric::new(mean_mean, ATTN_MEAN_SCALE),
        active_heads,
        total_heads,
        active_head_ratio: if total_heads == 0 {
            0.0
        } else {
            active_heads as f64 / total_heads as f64
        },
        per_head,
    })
}
