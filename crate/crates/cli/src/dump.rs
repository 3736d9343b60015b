//! Attention dumps: a JSON manifest plus one little-endian `f32` payload per
//! (layer, head), row-major `seq_len × seq_len`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use speaker_align::{
    assign_speaker_labels, build_region_index, HeadId, Matrix, PatchGrid, Scene, SpeakerBox, SpeakerId, TokenSequence,
    UtteranceToken,
};

use crate::error::{CliError, Result};

pub const DUMP_VERSION: u64 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";
/// Row-sum tolerance for post-softmax payloads.
pub const WEIGHT_ROW_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Pre-softmax scaled scores; the bias can be replayed.
    Scores,
    /// Post-softmax weights; analysis only.
    Weights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualLayout {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Sequence index of the first visual token.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpUtterance {
    pub index: usize,
    pub text: String,
    pub speaker: SpeakerId,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpSequence {
    pub visual: VisualLayout,
    pub frame_times: Vec<f64>,
    #[serde(default)]
    pub other_text: Vec<usize>,
    pub utterances: Vec<DumpUtterance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadEntry {
    pub layer: usize,
    pub head: usize,
    /// Payload path relative to the manifest.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpManifest {
    pub version: u64,
    pub model: String,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub payload: PayloadKind,
    pub sequence: DumpSequence,
    pub speakers: Vec<SpeakerId>,
    pub boxes: Vec<SpeakerBox>,
    #[serde(default)]
    pub aliases: BTreeMap<String, SpeakerId>,
    pub heads: Vec<HeadEntry>,
}

pub fn payload_file_name(head: HeadId) -> String {
    format!("l{:03}_h{:03}.f32", head.layer, head.head)
}

impl DumpManifest {
    /// Manifest describing every head of an `n_layers × n_heads` model on `scene`.
    pub fn for_scene(model: &str, scene: &Scene, n_layers: usize, n_heads: usize, payload: PayloadKind) -> Self {
        let seq = &scene.sequence;
        let grid = seq.visual();
        let heads = (0..n_layers)
            .flat_map(|l| (0..n_heads).map(move |h| HeadId::new(l, h)))
            .map(|id| HeadEntry {
                layer: id.layer,
                head: id.head,
                file: payload_file_name(id),
            })
            .collect();
        Self {
            version: DUMP_VERSION,
            model: model.to_string(),
            n_layers,
            n_heads,
            seq_len: seq.total_len(),
            payload,
            sequence: DumpSequence {
                visual: VisualLayout {
                    frames: grid.frames,
                    height: grid.height,
                    width: grid.width,
                    offset: grid.base_offset,
                },
                frame_times: seq.frame_times().to_vec(),
                other_text: seq.other_text().to_vec(),
                utterances: seq
                    .utterances()
                    .iter()
                    .map(|u| DumpUtterance {
                        index: u.sequence_index,
                        text: u.text.clone(),
                        speaker: u.speaker.clone(),
                        timestamp: u.timestamp,
                    })
                    .collect(),
            },
            speakers: scene.speakers.clone(),
            boxes: scene.boxes.clone(),
            aliases: scene.aliases.clone(),
            heads,
        }
    }

    /// Checks the version before the strict parse so that a newer manifest
    /// with extra fields still reports its version.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CliError::DumpManifest(e.to_string()))?;
        match value.get("version").and_then(serde_json::Value::as_u64) {
            Some(DUMP_VERSION) => {}
            Some(v) => return Err(CliError::DumpVersion(v)),
            None => return Err(CliError::DumpManifest("missing integer field `version`".into())),
        }
        serde_json::from_value(value).map_err(|e| CliError::DumpManifest(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.seq_len as u64).pow(2) * 4
    }

    fn build_scene(&self) -> Result<Scene> {
        let bad = |m: String| CliError::DumpManifest(m);
        let roster: BTreeSet<&SpeakerId> = self.speakers.iter().collect();
        if roster.len() != self.speakers.len() {
            return Err(bad("duplicate speaker label in roster".into()));
        }
        let v = &self.sequence.visual;
        for b in &self.boxes {
            if !roster.contains(&b.speaker) {
                return Err(bad(format!("box speaker {} is not in the roster", b.speaker)));
            }
            if b.frame >= v.frames {
                return Err(bad(format!("box frame {} outside 0..{}", b.frame, v.frames)));
            }
        }
        for u in &self.sequence.utterances {
            if !roster.contains(&u.speaker) {
                return Err(bad(format!(
                    "utterance {} has speaker {} outside the roster",
                    u.index, u.speaker
                )));
            }
        }
        for (name, speaker) in &self.aliases {
            if name.is_empty() || !roster.contains(speaker) {
                return Err(bad(format!("alias {name:?} -> {speaker} is invalid")));
            }
        }
        let grid = PatchGrid::new(v.frames, v.height, v.width, v.offset).map_err(|e| bad(e.to_string()))?;
        let tokens: Vec<UtteranceToken> = self
            .sequence
            .utterances
            .iter()
            .map(|u| UtteranceToken {
                sequence_index: u.index,
                text: u.text.clone(),
                speaker: u.speaker.clone(),
                timestamp: u.timestamp,
            })
            .collect();
        let labelled = assign_speaker_labels(&tokens, &self.aliases);
        let sequence = TokenSequence::new(
            self.seq_len,
            grid,
            labelled,
            self.sequence.other_text.clone(),
            self.sequence.frame_times.clone(),
        )
        .map_err(|e| CliError::DumpShape(e.to_string()))?;
        let regions = build_region_index(&self.boxes, &grid).map_err(|e| bad(e.to_string()))?;
        Ok(Scene {
            sequence,
            boxes: self.boxes.clone(),
            regions,
            aliases: self.aliases.clone(),
            speakers: self.speakers.clone(),
        })
    }
}

/// An opened, size-checked dump. Payloads are read on demand.
#[derive(Clone, Debug)]
pub struct AttentionDump {
    root: PathBuf,
    manifest: DumpManifest,
    scene: Scene,
    heads: BTreeMap<HeadId, PathBuf>,
}

impl AttentionDump {
    /// `path` is the dump directory or its manifest file.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
        let manifest = DumpManifest::from_json(&text)?;
        if manifest.n_layers == 0 || manifest.n_heads == 0 || manifest.seq_len == 0 {
            return Err(CliError::DumpShape(
                "n_layers, n_heads and seq_len must be positive".into(),
            ));
        }
        let scene = manifest.build_scene()?;

        let expected = manifest.payload_bytes();
        let mut heads = BTreeMap::new();
        for e in &manifest.heads {
            if e.layer >= manifest.n_layers || e.head >= manifest.n_heads {
                return Err(CliError::DumpShape(format!(
                    "head L{}H{} outside a {}x{} model",
                    e.layer, e.head, manifest.n_layers, manifest.n_heads
                )));
            }
            let file = root.join(&e.file);
            let got = fs::metadata(&file).map_err(|err| CliError::io(&file, err))?.len();
            if got < expected {
                return Err(CliError::DumpTruncated {
                    layer: e.layer,
                    head: e.head,
                    got,
                    expected,
                });
            }
            if got > expected {
                return Err(CliError::DumpShape(format!(
                    "payload for layer {} head {} has {got} bytes, {}x{} f32 needs {expected}",
                    e.layer, e.head, manifest.seq_len, manifest.seq_len
                )));
            }
            if heads.insert(HeadId::new(e.layer, e.head), file).is_some() {
                return Err(CliError::DumpManifest(format!(
                    "head L{}H{} listed twice",
                    e.layer, e.head
                )));
            }
        }
        Ok(Self {
            root,
            manifest,
            scene,
            heads,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DumpManifest {
        &self.manifest
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn payload(&self) -> PayloadKind {
        self.manifest.payload
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.heads.keys().copied()
    }

    /// Reads and upcasts one payload. Non-finite score entries above the
    /// diagonal are causally masked and read as zero.
    pub fn load_head(&self, head: HeadId) -> Result<Matrix> {
        let path = self
            .heads
            .get(&head)
            .ok_or_else(|| CliError::DumpManifest(format!("head {head} is not in the dump")))?;
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        let n = self.manifest.seq_len;
        let expected = self.manifest.payload_bytes();
        if (bytes.len() as u64) < expected {
            return Err(CliError::DumpTruncated {
                layer: head.layer,
                head: head.head,
                got: bytes.len() as u64,
                expected,
            });
        }
        if bytes.len() as u64 != expected {
            return Err(CliError::DumpShape(format!(
                "payload for {head} changed size while reading"
            )));
        }
        let mut data = Vec::with_capacity(n * n);
        for (k, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            let (row, col) = (k / n, k % n);
            if v.is_finite() {
                data.push(v);
            } else if self.manifest.payload == PayloadKind::Scores && col > row {
                data.push(0.0);
            } else {
                return Err(CliError::DumpValue {
                    layer: head.layer,
                    head: head.head,
                    row,
                    col,
                });
            }
        }
        Ok(Matrix::new(n, n, data)?)
    }
}

/// Rows of a weight matrix whose sum is off by more than `tol`, as `(row, sum)`.
pub fn inconsistent_rows(weights: &Matrix, tol: f64) -> Vec<(usize, f64)> {
    (0..weights.rows())
        .filter_map(|i| {
            let s: f64 = weights.row(i).iter().sum();
            ((s - 1.0).abs() > tol).then_some((i, s))
        })
        .collect()
}

/// Writes `manifest.json` and one payload per manifest head; `payloads` is
/// parallel to `manifest.heads`.
pub fn write_dump(dir: &Path, manifest: &DumpManifest, payloads: &[Matrix]) -> Result<()> {
    if payloads.len() != manifest.heads.len() {
        return Err(CliError::DumpShape(format!(
            "{} payloads for {} manifest heads",
            payloads.len(),
            manifest.heads.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (entry, m) in manifest.heads.iter().zip(payloads) {
        if m.shape() != (manifest.seq_len, manifest.seq_len) {
            return Err(CliError::DumpShape(format!(
                "payload for layer {} head {} is {:?}, manifest says {}",
                entry.layer,
                entry.head,
                m.shape(),
                manifest.seq_len
            )));
        }
        let path = dir.join(&entry.file);
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for &v in m.data() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| CliError::io(&path, e))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_json()?).map_err(|e| CliError::io(&path, e))
}
