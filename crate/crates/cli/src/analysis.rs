//! Scene sources, the `run` report and the `sweep` grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use speaker_align::alignment::{threshold_serde, HeadStatus};
use speaker_align::synth::{generate_scene, generate_stack, load_embeddings, SynthSpec};
use speaker_align::{
    aggregate_report, baseline_attention, compute_bias_plan, head_activity, head_scores, rebias_rows, score_tokens,
    AlignmentReport, AlignmentScore, BiasConfig, HeadId, HeadSample, HeadSelection, HeadSelector, LayerRange,
    LayerStack, Mask, Matrix, RegionMode, Scene, SceneFile,
};

use crate::dump::{inconsistent_rows, AttentionDump, PayloadKind, WEIGHT_ROW_TOL};
use crate::error::{CliError, Result};

pub const REPORT_VERSION: u32 = 1;

/// Where the scenes and attention come from.
#[derive(Clone, Debug)]
pub enum SceneSource {
    /// `scenes` generated scenes with seeds `spec.seed, spec.seed + 1, ...`.
    Synthetic {
        spec: SynthSpec,
        scenes: usize,
    },
    /// A scene file and its embeddings, run through a generated stack.
    SceneFile {
        scene: PathBuf,
        embeddings: PathBuf,
        stack: SynthSpec,
    },
    Dump(PathBuf),
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSummary {
    Synthetic {
        spec: SynthSpec,
        scenes: usize,
    },
    SceneFile {
        scene: String,
        embeddings: String,
        stack: SynthSpec,
    },
    Dump {
        path: String,
        model: String,
        payload: PayloadKind,
    },
}

/// One scene with access to its per-head matrices.
pub struct Sample {
    pub scene: Scene,
    pub n_layers: usize,
    pub n_heads: usize,
    pub payload: PayloadKind,
    inner: SampleInner,
}

enum SampleInner {
    Model { embeddings: Matrix, stack: LayerStack },
    Dump(Box<AttentionDump>),
}

impl Sample {
    fn from_model(scene: Scene, embeddings: Matrix, stack: LayerStack) -> Self {
        let n_layers = stack.n_layers();
        let n_heads = (0..n_layers).map(|l| stack.layer(l).len()).max().unwrap_or(0);
        Self {
            scene,
            n_layers,
            n_heads,
            payload: PayloadKind::Scores,
            inner: SampleInner::Model { embeddings, stack },
        }
    }

    fn from_dump(dump: AttentionDump) -> Self {
        let m = dump.manifest();
        Self {
            scene: dump.scene().clone(),
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            payload: m.payload,
            inner: SampleInner::Dump(Box::new(dump)),
        }
    }

    /// Every head of the model, analysed or not.
    pub fn all_heads(&self) -> Vec<HeadId> {
        match &self.inner {
            SampleInner::Model { stack, .. } => stack.head_ids().collect(),
            SampleInner::Dump(_) => (0..self.n_layers)
                .flat_map(|l| (0..self.n_heads).map(move |h| HeadId::new(l, h)))
                .collect(),
        }
    }

    /// Heads whose matrices are available.
    pub fn available_heads(&self) -> Vec<HeadId> {
        match &self.inner {
            SampleInner::Model { stack, .. } => stack.head_ids().collect(),
            SampleInner::Dump(d) => d.head_ids().collect(),
        }
    }

    /// Pre-softmax scores, or post-softmax weights for a weights dump.
    pub fn head_matrix(&self, head: HeadId) -> Result<Matrix> {
        match &self.inner {
            SampleInner::Model { embeddings, stack } => {
                let w = stack
                    .layer(head.layer)
                    .get(head.head)
                    .ok_or_else(|| CliError::Usage(format!("head {head} is not in the stack")))?;
                Ok(head_scores(embeddings, w)?)
            }
            SampleInner::Dump(d) => d.load_head(head),
        }
    }
}

impl SceneSource {
    pub fn sample_count(&self) -> usize {
        match self {
            Self::Synthetic { scenes, .. } => *scenes,
            _ => 1,
        }
    }

    pub fn load(&self, k: usize) -> Result<Sample> {
        match self {
            Self::Synthetic { spec, .. } => {
                let spec = SynthSpec {
                    seed: spec.seed.wrapping_add(k as u64),
                    ..spec.clone()
                };
                let synth = generate_scene(&spec)?;
                Ok(Sample::from_model(
                    synth.scene,
                    synth.embeddings,
                    generate_stack(&spec)?,
                ))
            }
            Self::SceneFile {
                scene,
                embeddings,
                stack,
            } => {
                let file = SceneFile::load(scene).map_err(|e| with_path(e, scene))?;
                let built = file.build()?;
                let x = load_embeddings(embeddings).map_err(|e| with_path(e, embeddings))?;
                Ok(Sample::from_model(built, x, generate_stack(stack)?))
            }
            Self::Dump(path) => Ok(Sample::from_dump(AttentionDump::open(path)?)),
        }
    }

    pub fn summary(&self) -> Result<SourceSummary> {
        Ok(match self {
            Self::Synthetic { spec, scenes } => SourceSummary::Synthetic {
                spec: spec.clone(),
                scenes: *scenes,
            },
            Self::SceneFile {
                scene,
                embeddings,
                stack,
            } => SourceSummary::SceneFile {
                scene: scene.display().to_string(),
                embeddings: embeddings.display().to_string(),
                stack: stack.clone(),
            },
            Self::Dump(path) => {
                let d = AttentionDump::open(path)?;
                SourceSummary::Dump {
                    path: path.display().to_string(),
                    model: d.manifest().model.clone(),
                    payload: d.payload(),
                }
            }
        })
    }
}

fn with_path(e: speaker_align::Error, path: &Path) -> CliError {
    match e {
        speaker_align::Error::Io(source) => CliError::io(path, source),
        other => CliError::Core(other),
    }
}

/// Layers whose heads enter the alignment metrics: the bias layer range, or
/// every layer when that range is empty.
pub fn default_scope(range: LayerRange, n_layers: usize) -> LayerRange {
    if range.is_empty() {
        LayerRange::all(n_layers)
    } else {
        range
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisMode {
    /// Baseline and biased attention.
    Full,
    /// Post-softmax payloads: metrics and head selection only, no bias.
    AnalysisOnly,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub version: u32,
    pub source: SourceSummary,
    pub mode: AnalysisMode,
    pub config: BiasConfig,
    pub report_layers: LayerRange,
    pub samples: usize,
    pub baseline: AlignmentReport,
    pub biased: AlignmentReport,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Per-head state shared by every bias setting: the head's matrix, its
/// unbiased attention and scores.
struct HeadBase {
    head: HeadId,
    matrix: Matrix,
    baseline: Matrix,
    activity: Option<f64>,
    scores: Vec<AlignmentScore>,
}

fn head_base(sample: &Sample, head: HeadId, mask: &Mask, warnings: &mut Vec<String>) -> Result<HeadBase> {
    let matrix = sample.head_matrix(head)?;
    let baseline = match sample.payload {
        PayloadKind::Scores => baseline_attention(&matrix, mask)?,
        PayloadKind::Weights => {
            let bad = inconsistent_rows(&matrix, WEIGHT_ROW_TOL);
            if let Some(&(row, sum)) = bad.first() {
                warnings.push(format!(
                    "inconsistent weights: head {head} has {} rows off by more than {WEIGHT_ROW_TOL} (row {row} sums to {sum})",
                    bad.len()
                ));
            }
            matrix.clone()
        }
    };
    let seq = &sample.scene.sequence;
    let activity = head_activity(&baseline, seq, &sample.scene.regions)?;
    let scores = score_tokens(&baseline, seq, &sample.scene.regions, RegionMode::OwnFrame)?;
    Ok(HeadBase {
        head,
        matrix,
        baseline,
        activity,
        scores,
    })
}

/// Token scores under the bias of `cfg` if the head is active and the
/// payload allows it; otherwise the baseline scores.
fn biased_scores(
    sample: &Sample,
    base: &HeadBase,
    cfg: &BiasConfig,
    active: bool,
    mask: &Mask,
) -> Result<Vec<AlignmentScore>> {
    if !active || sample.payload == PayloadKind::Weights {
        return Ok(base.scores.clone());
    }
    let seq = &sample.scene.sequence;
    let plan = compute_bias_plan(&base.matrix, seq, &sample.scene.regions, cfg)?;
    let biased = rebias_rows(base.baseline.clone(), &base.matrix, &plan, mask)?;
    Ok(score_tokens(&biased, seq, &sample.scene.regions, RegionMode::OwnFrame)?)
}

/// A bias setting together with the layers it is measured on.
#[derive(Clone, Copy, Debug)]
struct Cell {
    cfg: BiasConfig,
    scope: Option<LayerRange>,
}

#[derive(Default)]
struct CellAccumulator {
    baseline: Vec<HeadSample>,
    biased: Vec<HeadSample>,
    selections: Vec<HeadSelection>,
}

impl CellAccumulator {
    fn reports(&self) -> Result<(AlignmentReport, AlignmentReport)> {
        let no_tokens = || {
            CliError::Core(speaker_align::Error::Contract(
                "no utterance token has a speaker region in the analysed heads".into(),
            ))
        };
        let base = aggregate_report(&self.baseline, &self.selections).map_err(|_| no_tokens())?;
        let biased = aggregate_report(&self.biased, &self.selections).map_err(|_| no_tokens())?;
        Ok((base, biased))
    }
}

/// Runs every cell over every sample, sharing per-head work across cells.
fn evaluate(source: &SceneSource, cells: &[Cell], warnings: &mut Vec<String>) -> Result<Vec<CellAccumulator>> {
    let mut acc: Vec<CellAccumulator> = cells.iter().map(|_| CellAccumulator::default()).collect();
    for k in 0..source.sample_count() {
        let sample = source.load(k)?;
        let scopes: Vec<LayerRange> = cells
            .iter()
            .map(|c| {
                c.scope
                    .unwrap_or_else(|| default_scope(c.cfg.layer_range, sample.n_layers))
            })
            .collect();
        for c in cells {
            c.cfg.validate(sample.n_layers)?;
        }
        let mask = Mask::causal(sample.scene.sequence.total_len());
        let available: Vec<HeadId> = sample.available_heads();
        let needed = |h: &HeadId| {
            cells
                .iter()
                .zip(&scopes)
                .any(|(c, s)| s.contains(h.layer) || c.cfg.layer_range.contains(h.layer))
        };
        let mut statuses: Vec<BTreeMap<HeadId, HeadStatus>> = cells
            .iter()
            .map(|_| {
                sample
                    .all_heads()
                    .into_iter()
                    .map(|h| {
                        (
                            h,
                            HeadStatus {
                                activity: None,
                                active: false,
                            },
                        )
                    })
                    .collect()
            })
            .collect();
        for head in available.into_iter().filter(needed) {
            let base = head_base(&sample, head, &mask, warnings)?;
            for (ci, cell) in cells.iter().enumerate() {
                let active = cell.cfg.selector().is_active(head, base.activity);
                statuses[ci].insert(
                    head,
                    HeadStatus {
                        activity: base.activity,
                        active,
                    },
                );
                if !scopes[ci].contains(head.layer) {
                    continue;
                }
                let biased = biased_scores(&sample, &base, &cell.cfg, active, &mask)?;
                acc[ci].baseline.push(HeadSample {
                    head: base.head,
                    scores: base.scores.clone(),
                });
                acc[ci].biased.push(HeadSample { head, scores: biased });
            }
        }
        for (ci, heads) in statuses.into_iter().enumerate() {
            acc[ci].selections.push(HeadSelection { heads });
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub source: SceneSource,
    pub bias: BiasConfig,
    /// Overrides the default metric scope (see [`default_scope`]).
    pub report_layers: Option<LayerRange>,
}

pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let mut warnings = Vec::new();
    let cell = Cell {
        cfg: cfg.bias,
        scope: cfg.report_layers,
    };
    let acc = evaluate(&cfg.source, &[cell], &mut warnings)?;
    let (baseline, biased) = acc[0].reports()?;
    let first = cfg.source.load(0)?;
    let mode = match first.payload {
        PayloadKind::Scores => AnalysisMode::Full,
        PayloadKind::Weights => {
            warnings.push("weights payload: bias replay needs pre-softmax scores, running analysis only".into());
            AnalysisMode::AnalysisOnly
        }
    };
    Ok(RunReport {
        version: REPORT_VERSION,
        source: cfg.source.summary()?,
        mode,
        config: cfg.bias,
        report_layers: cfg
            .report_layers
            .unwrap_or_else(|| default_scope(cfg.bias.layer_range, first.n_layers)),
        samples: cfg.source.sample_count(),
        baseline,
        biased,
        warnings,
    })
}

/// `lambda × alpha × layer_range`, iterated in that nesting order.
#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub layer_ranges: Vec<LayerRange>,
}

impl SweepGrid {
    pub fn cells(&self, base: &BiasConfig) -> Vec<BiasConfig> {
        let mut out = Vec::new();
        for &lambda in &self.lambdas {
            for &alpha in &self.alphas {
                for &layer_range in &self.layer_ranges {
                    out.push(BiasConfig {
                        lambda,
                        alpha,
                        layer_range,
                        ..*base
                    });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    #[serde(with = "threshold_serde")]
    pub lambda: f64,
    pub alpha: f64,
    pub layer_range: LayerRange,
    pub active_ratio: f64,
    pub attn_max: f64,
    pub attn_mean: f64,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

/// Each cell is measured on its own layer range (all layers when empty).
pub fn sweep(source: &SceneSource, base: &BiasConfig, grid: &SweepGrid) -> Result<SweepOutput> {
    let cfgs = grid.cells(base);
    if cfgs.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let cells: Vec<Cell> = cfgs.iter().map(|&cfg| Cell { cfg, scope: None }).collect();
    let mut warnings = Vec::new();
    let acc = evaluate(source, &cells, &mut warnings)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (cfg, a) in cfgs.iter().zip(&acc) {
        let (_, biased) = a.reports()?;
        rows.push(SweepRow {
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            layer_range: cfg.layer_range,
            active_ratio: biased.active_head_ratio,
            attn_max: biased.attn_max.raw,
            attn_mean: biased.attn_mean.raw,
        });
    }
    warnings.dedup();
    Ok(SweepOutput { rows, warnings })
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "lambda",
        "alpha",
        "layer_range",
        "active_ratio",
        "attn_max",
        "attn_mean",
    ])?;
    for r in rows {
        let lambda = if r.lambda == f64::INFINITY {
            "inf".to_string()
        } else {
            r.lambda.to_string()
        };
        w.write_record([
            lambda,
            r.alpha.to_string(),
            r.layer_range.to_string(),
            r.active_ratio.to_string(),
            r.attn_max.to_string(),
            r.attn_mean.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            n_layers: 4,
            n_heads: 3,
            model_dim: 24,
            ..SynthSpec::with_seed(seed)
        }
    }

    fn source(scenes: usize) -> SceneSource {
        SceneSource::Synthetic {
            spec: small_spec(7),
            scenes,
        }
    }

    #[test]
    fn zero_alpha_report_matches_baseline() {
        let cfg = RunConfig {
            source: source(2),
            bias: BiasConfig {
                alpha: 0.0,
                lambda: 0.0,
                layer_range: LayerRange::inclusive(1, 2),
                ..BiasConfig::default()
            },
            report_layers: None,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.baseline, r.biased);
        assert_eq!(r.biased.active_heads, 12);
        assert_eq!(r.biased.total_heads, 24);
        assert_eq!(r.report_layers, LayerRange::inclusive(1, 2));
        assert_eq!(r.mode, AnalysisMode::Full);
    }

    #[test]
    fn infinite_lambda_has_no_active_heads() {
        let cfg = RunConfig {
            source: source(1),
            bias: BiasConfig {
                lambda: f64::INFINITY,
                layer_range: LayerRange::all(4),
                ..BiasConfig::default()
            },
            report_layers: None,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.biased.active_head_ratio, 0.0);
        assert_eq!(r.baseline, r.biased);
        let json = r.to_json().unwrap();
        assert!(json.contains("\"lambda\": \"inf\""), "{json}");
    }

    #[test]
    fn singleton_sweep_equals_run() {
        let bias = BiasConfig {
            lambda: 0.0,
            layer_range: LayerRange::inclusive(2, 3),
            ..BiasConfig::default()
        };
        let r = run(&RunConfig {
            source: source(2),
            bias,
            report_layers: None,
        })
        .unwrap();
        let grid = SweepGrid {
            lambdas: vec![0.0],
            alphas: vec![1.0],
            layer_ranges: vec![LayerRange::inclusive(2, 3)],
        };
        let s = sweep(&source(2), &bias, &grid).unwrap();
        assert_eq!(s.rows.len(), 1);
        let row = &s.rows[0];
        assert_eq!(row.active_ratio, r.biased.active_head_ratio);
        assert_eq!(row.attn_max, r.biased.attn_max.raw);
        assert_eq!(row.attn_mean, r.biased.attn_mean.raw);
    }

    #[test]
    fn sweep_orders_cells_and_decreases_in_lambda() {
        let grid = SweepGrid {
            lambdas: vec![0.0, 5e-5, 2e-4, 8e-4, 6.5e-3, f64::INFINITY],
            alphas: vec![0.5, 1.0, 2.0],
            layer_ranges: vec![LayerRange::all(4)],
        };
        let s = sweep(&source(2), &BiasConfig::default(), &grid).unwrap();
        assert_eq!(s.rows.len(), 18);
        assert_eq!((s.rows[1].lambda, s.rows[1].alpha), (0.0, 1.0));
        assert_eq!((s.rows[3].lambda, s.rows[3].alpha), (5e-5, 0.5));
        for a in 0..3 {
            let col: Vec<f64> = s.rows.iter().skip(a).step_by(3).map(|r| r.active_ratio).collect();
            assert!(col.windows(2).all(|w| w[0] >= w[1]), "{col:?}");
            assert_eq!(col[col.len() - 1], 0.0);
        }
        // attention toward the own region grows with alpha at lambda = 0
        assert!(s.rows[0].attn_mean <= s.rows[1].attn_mean && s.rows[1].attn_mean <= s.rows[2].attn_mean);
        let csv = String::from_utf8(sweep_csv(&s.rows).unwrap()).unwrap();
        assert!(csv.starts_with("lambda,alpha,layer_range,active_ratio,attn_max,attn_mean\n0,0.5,0-3,"));
        assert!(csv.lines().last().unwrap().starts_with("inf,2,0-3,0,"));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let grid = SweepGrid {
            lambdas: vec![],
            alphas: vec![1.0],
            layer_ranges: vec![LayerRange::all(4)],
        };
        assert_eq!(
            sweep(&source(1), &BiasConfig::default(), &grid).err().unwrap().code(),
            "E_USAGE"
        );
    }
}
