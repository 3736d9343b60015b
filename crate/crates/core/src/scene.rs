//! Multimodal input model: the visual patch lattice, speaker-labelled
//! utterance tokens, speaker boxes, and the per-(speaker, frame) sets of
//! visual token indices derived from those boxes.
//!
//! Sequence layout used by scene files is `[visual | other text | utterances]`,
//! so a causal mask still lets every utterance token see every visual token.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{contract, Error, Result};

/// Speaker label. Scene files may spell labels as strings or integers;
/// both normalize to the string form.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct SpeakerId(String);

impl SpeakerId {
    pub fn new(label: impl Into<String>) -> Self {
        Self(label.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SpeakerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for SpeakerId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl<'de> Deserialize<'de> for SpeakerId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(i64),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::Text(s) => Self(s),
            Raw::Int(i) => Self(i.to_string()),
        })
    }
}

/// The `T × H × W` lattice of visual tokens, placed contiguously in the
/// sequence starting at `base_offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub base_offset: usize,
}

impl PatchGrid {
    pub fn new(frames: usize, height: usize, width: usize, base_offset: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(contract(format!(
                "patch grid dimensions must be positive, got {frames}x{height}x{width}"
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            base_offset,
        })
    }

    pub fn patches_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.frames * self.patches_per_frame()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_index(&self, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(t < self.frames && h < self.height && w < self.width);
        self.base_offset + (t * self.height + h) * self.width + w
    }

    /// Inverse of [`token_index`](Self::token_index).
    pub fn coords(&self, index: usize) -> Option<(usize, usize, usize)> {
        if !self.contains(index) {
            return None;
        }
        let local = index - self.base_offset;
        let w = local % self.width;
        let h = (local / self.width) % self.height;
        let t = local / self.patches_per_frame();
        Some((t, h, w))
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.base_offset..self.base_offset + self.len()
    }

    pub fn frame_range(&self, t: usize) -> std::ops::Range<usize> {
        let start = self.base_offset + t * self.patches_per_frame();
        start..start + self.patches_per_frame()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.range().contains(&index)
    }
}

/// Normalized box in unit-square coordinates, `x0 < x1`, `y0 < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxCoords {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCoords {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 < x1
            && x1 <= 1.0
            && 0.0 <= y0
            && y0 < y1
            && y1 <= 1.0;
        if !ok {
            return Err(Error::Scene(format!(
                "box [{x0}, {y0}, {x1}, {y1}] is not an ordered box inside the unit square"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn intersection_area(&self, other: &BoxCoords) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

impl TryFrom<[f64; 4]> for BoxCoords {
    type Error = Error;
    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxCoords> for [f64; 4] {
    fn from(b: BoxCoords) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Location of one speaker in one sampled frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerBox {
    pub speaker: SpeakerId,
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
}

/// One transcript token with its speaker label and timestamp (seconds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceToken {
    pub sequence_index: usize,
    pub text: String,
    pub speaker: SpeakerId,
    pub timestamp: f64,
}

/// The concatenated token sequence: visual lattice, utterance tokens `U`
/// and any other text (system prompt, instructions) that is not part of `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    total_len: usize,
    visual: PatchGrid,
    utterances: Vec<UtteranceToken>,
    other_text: Vec<usize>,
    frame_times: Vec<f64>,
}

impl TokenSequence {
    /// Validates an arbitrary placement of the three token groups.
    pub fn new(
        total_len: usize,
        visual: PatchGrid,
        utterances: Vec<UtteranceToken>,
        other_text: Vec<usize>,
        frame_times: Vec<f64>,
    ) -> Result<Self> {
        if visual.range().end > total_len {
            return Err(contract(format!(
                "visual tokens {:?} exceed sequence length {total_len}",
                visual.range()
            )));
        }
        validate_frame_times(&frame_times, visual.frames)?;
        let mut seen = BTreeSet::new();
        for &i in &other_text {
            if i >= total_len || visual.contains(i) || !seen.insert(i) {
                return Err(contract(format!("other-text index {i} is out of range or overlaps")));
            }
        }
        let last_visual = visual.range().end - 1;
        for tok in &utterances {
            let i = tok.sequence_index;
            if i >= total_len || visual.contains(i) || !seen.insert(i) {
                return Err(contract(format!("utterance index {i} is out of range or overlaps")));
            }
            if i <= last_visual {
                return Err(contract(format!(
                    "utterance index {i} precedes the last visual token {last_visual}"
                )));
            }
            if !tok.timestamp.is_finite() {
                return Err(contract(format!("utterance {i} has a non-finite timestamp")));
            }
        }
        Ok(Self {
            total_len,
            visual,
            utterances,
            other_text,
            frame_times,
        })
    }

    /// Lays tokens out as `[visual | other text | utterances]`.
    pub fn with_standard_layout(
        frames: usize,
        height: usize,
        width: usize,
        frame_times: Vec<f64>,
        other_text_len: usize,
        tokens: impl IntoIterator<Item = (String, SpeakerId, f64)>,
    ) -> Result<Self> {
        let visual = PatchGrid::new(frames, height, width, 0)?;
        let text_start = visual.len();
        let other_text: Vec<usize> = (text_start..text_start + other_text_len).collect();
        let utt_start = text_start + other_text_len;
        let utterances: Vec<UtteranceToken> = tokens
            .into_iter()
            .enumerate()
            .map(|(k, (text, speaker, timestamp))| UtteranceToken {
                sequence_index: utt_start + k,
                text,
                speaker,
                timestamp,
            })
            .collect();
        let total_len = utt_start + utterances.len();
        Self::new(total_len, visual, utterances, other_text, frame_times)
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn visual(&self) -> &PatchGrid {
        &self.visual
    }

    pub fn utterances(&self) -> &[UtteranceToken] {
        &self.utterances
    }

    pub fn other_text(&self) -> &[usize] {
        &self.other_text
    }

    pub fn frame_times(&self) -> &[f64] {
        &self.frame_times
    }

    pub fn utterance_indices(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.sequence_index).collect()
    }

    /// Sampled frame each utterance token maps to.
    pub fn utterance_frame(&self, token: &UtteranceToken) -> usize {
        map_timestamp_to_frame(token.timestamp, &self.frame_times)
    }

    /// Returns a copy with the utterance labels replaced (indices must match).
    pub fn with_utterances(&self, utterances: Vec<UtteranceToken>) -> Result<Self> {
        let same_slots = utterances.len() == self.utterances.len()
            && utterances
                .iter()
                .zip(&self.utterances)
                .all(|(a, b)| a.sequence_index == b.sequence_index);
        if !same_slots {
            return Err(contract("replacement utterances must keep the same sequence indices"));
        }
        Ok(Self {
            utterances,
            ..self.clone()
        })
    }
}

fn validate_frame_times(frame_times: &[f64], frames: usize) -> Result<()> {
    if frame_times.len() != frames {
        return Err(contract(format!(
            "{} frame times for {frames} frames",
            frame_times.len()
        )));
    }
    if frame_times.iter().any(|t| !t.is_finite()) || frame_times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(contract("frame times must be finite and strictly increasing"));
    }
    Ok(())
}

/// Key of one speaker region.
pub type RegionKey = (SpeakerId, usize);

/// Map `(speaker, frame) → sorted visual indices`, plus their union.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpeakerRegionIndex {
    regions: BTreeMap<RegionKey, Vec<usize>>,
    v_all: Vec<usize>,
}

impl SpeakerRegionIndex {
    pub fn get(&self, speaker: &SpeakerId, frame: usize) -> Option<&[usize]> {
        self.regions.get(&(speaker.clone(), frame)).map(Vec::as_slice)
    }

    /// Union of a speaker's regions over all frames (sorted, possibly empty).
    pub fn speaker_all_frames(&self, speaker: &SpeakerId) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .regions
            .range((speaker.clone(), 0)..=(speaker.clone(), usize::MAX))
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    /// Union of the speaker's regions over frames `[frame - window, frame + window]`.
    pub fn speaker_window(&self, speaker: &SpeakerId, frame: usize, window: usize) -> Vec<usize> {
        let lo = frame.saturating_sub(window);
        let hi = frame.saturating_add(window);
        let set: BTreeSet<usize> = self
            .regions
            .range((speaker.clone(), lo)..=(speaker.clone(), hi))
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn v_all(&self) -> &[usize] {
        &self.v_all
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RegionKey, &[usize])> {
        self.regions.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Indices of the frame's patches whose centers fall inside the box.
///
/// Containment is half-open (`x0 <= cx < x1`, same for y) so boxes that tile
/// the frame produce disjoint sets. When no center is inside, the single patch
/// whose center is nearest the box center is returned.
pub fn rasterize_box(bbox: &SpeakerBox, grid: &PatchGrid) -> Result<Vec<usize>> {
    if bbox.frame >= grid.frames {
        return Err(contract(format!(
            "box for speaker {} in frame {} but the grid has {} frames",
            bbox.speaker, bbox.frame, grid.frames
        )));
    }
    let b = &bbox.bbox;
    let (w_n, h_n) = (grid.width as f64, grid.height as f64);
    let mut out = Vec::new();
    for h in 0..grid.height {
        let cy = (h as f64 + 0.5) / h_n;
        if !(b.y0 <= cy && cy < b.y1) {
            continue;
        }
        for w in 0..grid.width {
            let cx = (w as f64 + 0.5) / w_n;
            if b.x0 <= cx && cx < b.x1 {
                out.push(grid.token_index(bbox.frame, h, w));
            }
        }
    }
    if out.is_empty() {
        let (bx, by) = b.center();
        let mut best = (f64::INFINITY, 0, 0);
        for h in 0..grid.height {
            for w in 0..grid.width {
                let dx = (w as f64 + 0.5) / w_n - bx;
                let dy = (h as f64 + 0.5) / h_n - by;
                let d = dx * dx + dy * dy;
                if d < best.0 {
                    best = (d, h, w);
                }
            }
        }
        out.push(grid.token_index(bbox.frame, best.1, best.2));
    }
    Ok(out)
}

/// Rasterizes every box and groups the results by `(speaker, frame)`.
pub fn build_region_index(boxes: &[SpeakerBox], grid: &PatchGrid) -> Result<SpeakerRegionIndex> {
    let mut regions: BTreeMap<RegionKey, BTreeSet<usize>> = BTreeMap::new();
    let mut all = BTreeSet::new();
    for b in boxes {
        let cells = rasterize_box(b, grid)?;
        all.extend(cells.iter().copied());
        regions.entry((b.speaker.clone(), b.frame)).or_default().extend(cells);
    }
    Ok(SpeakerRegionIndex {
        regions: regions.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect(),
        v_all: all.into_iter().collect(),
    })
}

/// Relabels tokens that name a speaker with that speaker's label.
///
/// Matching is exact on the whole token, case-insensitive. Multi-word names
/// match only if each word appears in the table on its own.
pub fn assign_speaker_labels(
    tokens: &[UtteranceToken],
    alias_table: &BTreeMap<String, SpeakerId>,
) -> Vec<UtteranceToken> {
    let lookup: BTreeMap<String, &SpeakerId> = alias_table.iter().map(|(k, v)| (k.to_lowercase(), v)).collect();
    tokens
        .iter()
        .map(|tok| match lookup.get(&tok.text.to_lowercase()) {
            Some(&speaker) => UtteranceToken {
                speaker: speaker.clone(),
                ..tok.clone()
            },
            None => tok.clone(),
        })
        .collect()
}

/// Index of the sampled frame nearest to `timestamp`; ties go to the earlier frame.
pub fn map_timestamp_to_frame(timestamp: f64, frame_times: &[f64]) -> usize {
    assert!(!frame_times.is_empty(), "frame_times must be nonempty");
    let after = frame_times.partition_point(|&t| t < timestamp);
    if after == 0 {
        return 0;
    }
    if after == frame_times.len() {
        return frame_times.len() - 1;
    }
    let before = after - 1;
    if timestamp - frame_times[before] <= frame_times[after] - timestamp {
        before
    } else {
        after
    }
}

/// Token entry of a scene file; the utterance index is implied by the layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneToken {
    pub text: String,
    pub speaker: SpeakerId,
    pub timestamp: f64,
}

/// On-disk scene description (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default = "scene_version")]
    pub version: u32,
    pub frames: usize,
    /// `[H, W]`
    pub grid: [usize; 2],
    pub frame_times: Vec<f64>,
    pub speakers: Vec<SpeakerId>,
    pub boxes: Vec<SpeakerBox>,
    pub tokens: Vec<SceneToken>,
    #[serde(default)]
    pub aliases: BTreeMap<String, SpeakerId>,
    #[serde(default)]
    pub other_text_len: usize,
}

fn scene_version() -> u32 {
    1
}

/// A validated scene: sequence with final speaker labels, boxes and regions.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sequence: TokenSequence,
    pub boxes: Vec<SpeakerBox>,
    pub regions: SpeakerRegionIndex,
    pub aliases: BTreeMap<String, SpeakerId>,
    pub speakers: Vec<SpeakerId>,
}

impl SceneFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Validates the file and derives the token sequence and region index.
    pub fn build(&self) -> Result<Scene> {
        if self.version != 1 {
            return Err(Error::Scene(format!("unsupported scene version {}", self.version)));
        }
        let roster: BTreeSet<&SpeakerId> = self.speakers.iter().collect();
        if roster.len() != self.speakers.len() {
            return Err(Error::Scene("duplicate speaker label in roster".into()));
        }
        let grid =
            PatchGrid::new(self.frames, self.grid[0], self.grid[1], 0).map_err(|e| Error::Scene(e.to_string()))?;
        validate_frame_times(&self.frame_times, self.frames).map_err(|e| Error::Scene(e.to_string()))?;
        for b in &self.boxes {
            if !roster.contains(&b.speaker) {
                return Err(Error::Scene(format!("box speaker {} is not in the roster", b.speaker)));
            }
            if b.frame >= self.frames {
                return Err(Error::Scene(format!(
                    "box frame {} outside 0..{}",
                    b.frame, self.frames
                )));
            }
        }
        for (k, tok) in self.tokens.iter().enumerate() {
            if !roster.contains(&tok.speaker) {
                return Err(Error::Scene(format!(
                    "token {k} ({:?}) has speaker {} outside the roster",
                    tok.text, tok.speaker
                )));
            }
            if !(tok.timestamp.is_finite() && tok.timestamp >= 0.0) {
                return Err(Error::Scene(format!(
                    "token {k} has invalid timestamp {}",
                    tok.timestamp
                )));
            }
        }
        for (name, speaker) in &self.aliases {
            if name.is_empty() {
                return Err(Error::Scene("empty alias name".into()));
            }
            if !roster.contains(speaker) {
                return Err(Error::Scene(format!(
                    "alias {name:?} points at unknown speaker {speaker}"
                )));
            }
        }

        let raw = TokenSequence::with_standard_layout(
            self.frames,
            self.grid[0],
            self.grid[1],
            self.frame_times.clone(),
            self.other_text_len,
            self.tokens
                .iter()
                .map(|t| (t.text.clone(), t.speaker.clone(), t.timestamp)),
        )
        .map_err(|e| Error::Scene(e.to_string()))?;
        let labelled = assign_speaker_labels(raw.utterances(), &self.aliases);
        let sequence = raw.with_utterances(labelled)?;
        let regions = build_region_index(&self.boxes, &grid)?;
        Ok(Scene {
            sequence,
            boxes: self.boxes.clone(),
            regions,
            aliases: self.aliases.clone(),
            speakers: self.speakers.clone(),
        })
    }
}
