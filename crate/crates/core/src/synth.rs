//! Seeded generator of multi-speaker scenes and toy projection weights.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(spec.seed)`. Scenes draw from stream 0 and stacks from
//! stream 1, in this order:
//!
//! 1. scenes: speaker-to-cell permutation, speaker directions (`n_speakers × d`
//!    standard normals), turn order, transcript words, then per-token noise in
//!    sequence order (visual, other text, utterances);
//! 2. stacks: for each layer and head, `W_Q` then the independent part of `W_K`
//!    (`d × d_head` standard normals each, row-major).
//!
//! A speaker-region patch embedding is `(s·Σ dir + noise) / sqrt(1 + s²·m)` where
//! `s` is the signal strength and `m` the number of speakers covering the
//! patch; an utterance token uses its (alias-resolved) speaker's direction the
//! same way. Other tokens are pure noise. Every entry therefore has unit
//! variance regardless of `s`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadWeights, LayerStack};
use crate::error::{contract, Error, Result};
use crate::numerics::Matrix;
use crate::scene::{BoxCoords, Scene, SceneFile, SceneToken, SpeakerBox, SpeakerId};

/// Magic header of the embedding sidecar file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"SATNEMB1";

const NAMES: [&str; 12] = [
    "Alice", "Bruno", "Chen", "Dana", "Emeka", "Farah", "Goran", "Hana", "Ivan", "Jun", "Kofi", "Lena",
];

const FILLERS: [&str; 20] = [
    "yeah", "i", "think", "we", "should", "vote", "for", "the", "wolf", "is", "not", "me", "you", "maybe", "okay",
    "then", "so", "no", "wait", "right",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLayout {
    /// Speakers tile the frame on a grid of cells.
    #[default]
    Disjoint,
    /// Tiled cells grown by 10% of the cell size on each side.
    Overlapping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub frames: usize,
    /// `[H, W]`
    pub grid: [usize; 2],
    pub n_speakers: usize,
    pub tokens_per_speaker: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub signal_strength: f64,
    pub box_layout: BoxLayout,
    pub distractor_text_len: usize,
    /// Correlation between `W_Q` and `W_K` entries; without it a random
    /// bilinear form carries no expected preference for similar tokens.
    pub qk_coupling: f64,
    /// Probability that a transcript word is the name of another speaker.
    pub mention_rate: f64,
    /// Seconds between sampled frames.
    pub frame_interval: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 8,
            grid: [4, 4],
            n_speakers: 4,
            tokens_per_speaker: 6,
            model_dim: 112,
            n_layers: 28,
            n_heads: 28,
            signal_strength: 2.0,
            box_layout: BoxLayout::Disjoint,
            distractor_text_len: 8,
            qk_coupling: 0.5,
            mention_rate: 0.1,
            frame_interval: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(contract(m));
        if self.n_speakers == 0 {
            return fail("n_speakers must be at least 1".into());
        }
        if self.frames == 0 || self.grid[0] == 0 || self.grid[1] == 0 {
            return fail("frames and grid dimensions must be positive".into());
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return fail("n_layers and n_heads must be positive".into());
        }
        if self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "model_dim {} is not a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            ));
        }
        if !(self.signal_strength.is_finite() && self.signal_strength >= 0.0) {
            return fail("signal_strength must be finite and nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.qk_coupling) || !(0.0..=1.0).contains(&self.mention_rate) {
            return fail("qk_coupling and mention_rate must lie in [0, 1]".into());
        }
        if !(self.frame_interval.is_finite() && self.frame_interval > 0.0) {
            return fail("frame_interval must be positive".into());
        }
        let (rows, cols) = tiling(self.n_speakers);
        if rows > self.grid[0] || cols > self.grid[1] {
            return fail(format!(
                "{} speakers need a {rows}x{cols} tiling, the {}x{} grid is too small",
                self.n_speakers, self.grid[0], self.grid[1]
            ));
        }
        Ok(())
    }
}

fn tiling(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    (rows, cols)
}

fn speaker_name(k: usize) -> String {
    NAMES.get(k).map_or_else(|| format!("P{k}"), |s| s.to_string())
}

/// A generated scene with its embeddings.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// Serializable description (utterer labels, aliases unresolved).
    pub file: SceneFile,
    /// Built scene with alias-resolved labels and region index.
    pub scene: Scene,
    /// `N × d` token embeddings.
    pub embeddings: Matrix,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn generate_scene(spec: &SynthSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.model_dim;
    let n_spk = spec.n_speakers;

    let (rows, cols) = tiling(n_spk);
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(&mut rng);
    let speakers: Vec<SpeakerId> = (0..n_spk).map(|k| SpeakerId::new(speaker_name(k))).collect();
    let grow = match spec.box_layout {
        BoxLayout::Disjoint => 0.0,
        BoxLayout::Overlapping => 0.1,
    };
    let cell_boxes: Vec<BoxCoords> = (0..n_spk)
        .map(|k| {
            let (r, c) = (cells[k] / cols, cells[k] % cols);
            let (cw, ch) = (1.0 / cols as f64, 1.0 / rows as f64);
            BoxCoords::new(
                (c as f64 * cw - grow * cw).max(0.0),
                (r as f64 * ch - grow * ch).max(0.0),
                ((c + 1) as f64 * cw + grow * cw).min(1.0),
                ((r + 1) as f64 * ch + grow * ch).min(1.0),
            )
        })
        .collect::<Result<_>>()?;
    let boxes: Vec<SpeakerBox> = (0..spec.frames)
        .flat_map(|t| {
            speakers.iter().zip(&cell_boxes).map(move |(s, b)| SpeakerBox {
                speaker: s.clone(),
                frame: t,
                bbox: *b,
            })
        })
        .collect();

    let directions: Vec<Vec<f64>> = (0..n_spk).map(|_| normal_vec(&mut rng, d)).collect();

    let mut order: Vec<usize> = (0..n_spk).collect();
    order.shuffle(&mut rng);
    // (word, utterer, denoted speaker)
    let mut words: Vec<(String, usize, usize)> = Vec::new();
    for &spk in &order {
        for _ in 0..spec.tokens_per_speaker {
            let mention = n_spk > 1 && rng.random::<f64>() < spec.mention_rate;
            if mention {
                let mut other = rng.random_range(0..n_spk - 1);
                if other >= spk {
                    other += 1;
                }
                words.push((speaker_name(other), spk, other));
            } else {
                let w = FILLERS[rng.random_range(0..FILLERS.len())];
                words.push((w.to_string(), spk, spk));
            }
        }
    }
    let span = spec.frame_interval * (spec.frames - 1) as f64;
    let k_total = words.len().max(1) as f64;
    let tokens: Vec<SceneToken> = words
        .iter()
        .enumerate()
        .map(|(k, (w, utterer, _))| SceneToken {
            text: w.clone(),
            speaker: speakers[*utterer].clone(),
            timestamp: span * (k as f64 + 0.5) / k_total,
        })
        .collect();
    let aliases: BTreeMap<String, SpeakerId> = speakers
        .iter()
        .map(|s| (s.as_str().to_lowercase(), s.clone()))
        .collect();

    let file = SceneFile {
        version: 1,
        frames: spec.frames,
        grid: spec.grid,
        frame_times: (0..spec.frames).map(|t| t as f64 * spec.frame_interval).collect(),
        speakers: speakers.clone(),
        boxes,
        tokens,
        aliases,
        other_text_len: spec.distractor_text_len,
    };
    let scene = file.build()?;

    let s = spec.signal_strength;
    let seq = &scene.sequence;
    let mut data = Vec::with_capacity(seq.total_len() * d);
    let mut push = |rng: &mut ChaCha8Rng, owners: &[usize]| {
        let noise = normal_vec(rng, d);
        let norm = (1.0 + s * s * owners.len() as f64).sqrt();
        for (c, z) in noise.into_iter().enumerate() {
            let signal: f64 = owners.iter().map(|&o| directions[o][c]).sum();
            data.push((s * signal + z) / norm);
        }
    };
    // Which speakers cover each visual token.
    let mut covering: Vec<Vec<usize>> = vec![Vec::new(); seq.visual().len()];
    for ((speaker, _), cells) in scene.regions.iter() {
        let k = speakers.iter().position(|x| x == speaker).expect("roster speaker");
        for &j in cells {
            let owners = &mut covering[j - seq.visual().base_offset];
            if !owners.contains(&k) {
                owners.push(k);
            }
        }
    }
    for owners in &mut covering {
        owners.sort_unstable();
    }
    for owners in &covering {
        push(&mut rng, owners);
    }
    for _ in 0..spec.distractor_text_len {
        push(&mut rng, &[]);
    }
    for (_, _, denoted) in &words {
        push(&mut rng, &[*denoted]);
    }
    let embeddings = Matrix::new(seq.total_len(), d, data)?;
    Ok(SyntheticScene {
        file,
        scene,
        embeddings,
    })
}

pub fn generate_stack(spec: &SynthSpec) -> Result<LayerStack> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let d = spec.model_dim;
    let dh = spec.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let rho = spec.qk_coupling;
    let indep = (1.0 - rho * rho).sqrt();
    let mut layers = Vec::with_capacity(spec.n_layers);
    for _ in 0..spec.n_layers {
        let mut heads = Vec::with_capacity(spec.n_heads);
        for _ in 0..spec.n_heads {
            let q = normal_vec(&mut rng, d * dh);
            let g = normal_vec(&mut rng, d * dh);
            let k: Vec<f64> = q.iter().zip(&g).map(|(a, b)| (rho * a + indep * b) * scale).collect();
            let q: Vec<f64> = q.into_iter().map(|a| a * scale).collect();
            heads.push(HeadWeights::new(Matrix::new(d, dh, q)?, Matrix::new(d, dh, k)?)?);
        }
        layers.push(heads);
    }
    LayerStack::new(layers)
}

/// Writes the embedding sidecar: magic, rows, cols (u64 LE), then f64 LE row-major.
pub fn write_embeddings(mut w: impl Write, m: &Matrix) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_embeddings(mut r: impl Read) -> Result<Matrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(Error::Embedding("missing SATNEMB1 header".into()));
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8), word(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(24))
        .ok_or_else(|| Error::Embedding(format!("implausible shape {rows}x{cols}")))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Embedding(format!(
            "{rows}x{cols} payload needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn save_embeddings(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_embeddings(&mut f, m)?;
    f.flush()?;
    Ok(())
}

pub fn load_embeddings(path: &Path) -> Result<Matrix> {
    read_embeddings(std::fs::File::open(path)?)
}
