use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use speaker_align::alignment::parse_threshold;
use speaker_align::oracle::{check_equivalence, EquivalenceReport};
use speaker_align::synth::{generate_scene, generate_stack, save_embeddings, BoxLayout, SynthSpec};
use speaker_align::{
    analyze_head_scores, head_scores, BiasConfig, BiasReference, HeadId, HeadSelector, LayerRange, Mask, Matrix,
};

use crate::analysis::{run, sweep, sweep_csv, RunConfig, SceneSource, SweepGrid};
use crate::dump::{inconsistent_rows, write_dump, AttentionDump, DumpManifest, PayloadKind, WEIGHT_ROW_TOL};
use crate::error::{CliError, Result};
use crate::heatmap;

/// Worst sparse-vs-dense attention difference `verify` accepts.
pub const VERIFY_ATTENTION_TOL: f64 = 1e-9;
/// Worst fast-vs-exhaustive head activity difference `verify` accepts.
pub const VERIFY_ACTIVITY_TOL: f64 = 1e-12;

#[derive(Parser, Debug)]
#[command(
    name = "speaker-align",
    version,
    about = "Speaker-aware cross-modal attention experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Baseline vs biased alignment report (report.json).
    Run {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        bias: BiasArgs,
        /// Layers whose heads enter the metrics; defaults to --layer-range.
        #[arg(long, value_parser = parse_range)]
        report_layers: Option<LayerRange>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics over a lambda × alpha × layer-range grid (sweep.csv).
    Sweep {
        #[command(flatten)]
        source: SourceArgs,
        #[arg(long, value_delimiter = ',', value_parser = parse_threshold, default_value = "0,5e-5,2e-4,8e-4,inf")]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        alpha: Vec<f64>,
        #[arg(long = "layer-range", value_delimiter = ',', value_parser = parse_range, default_value = "10-19")]
        layer_range: Vec<LayerRange>,
        #[command(flatten)]
        shape: BiasShapeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an attention dump and summarize it (ingest.json).
    Ingest {
        dump: PathBuf,
        #[command(flatten)]
        bias: BiasArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame PGM maps and a CSV of one token's attention on one head.
    Heatmap {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        bias: BiasArgs,
        #[arg(long, default_value_t = 16)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        /// Sequence index of the query token; defaults to the first
        /// utterance token whose speaker has a region in its frame.
        #[arg(long)]
        token: Option<usize>,
        /// Which synthetic scene (offset from --seed).
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic scene (scene.json, embeddings.bin) and optionally a dump.
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        /// Also write a dump of the generated stack with this payload.
        #[arg(long, value_enum)]
        dump_payload: Option<PayloadArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fast paths against brute-force oracles.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        #[arg(long, default_value_t = 2)]
        n_layers: usize,
        #[arg(long, default_value_t = 4)]
        n_heads: usize,
        #[arg(long, default_value_t = 16)]
        model_dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    /// Patch grid as `HxW`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 2]>,
    #[arg(long)]
    n_speakers: Option<usize>,
    #[arg(long)]
    tokens_per_speaker: Option<usize>,
    #[arg(long)]
    model_dim: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long, value_enum)]
    box_layout: Option<LayoutArg>,
    #[arg(long)]
    distractor_text_len: Option<usize>,
    #[arg(long)]
    qk_coupling: Option<f64>,
    #[arg(long)]
    mention_rate: Option<f64>,
    #[arg(long)]
    frame_interval: Option<f64>,
}

impl SynthArgs {
    fn spec(&self) -> Result<SynthSpec> {
        let d = SynthSpec::with_seed(self.seed);
        let spec = SynthSpec {
            seed: self.seed,
            frames: self.frames.unwrap_or(d.frames),
            grid: self.grid.unwrap_or(d.grid),
            n_speakers: self.n_speakers.unwrap_or(d.n_speakers),
            tokens_per_speaker: self.tokens_per_speaker.unwrap_or(d.tokens_per_speaker),
            model_dim: self.model_dim.unwrap_or(d.model_dim),
            n_layers: self.n_layers.unwrap_or(d.n_layers),
            n_heads: self.n_heads.unwrap_or(d.n_heads),
            signal_strength: self.signal_strength.unwrap_or(d.signal_strength),
            box_layout: self.box_layout.map_or(d.box_layout, LayoutArg::into),
            distractor_text_len: self.distractor_text_len.unwrap_or(d.distractor_text_len),
            qk_coupling: self.qk_coupling.unwrap_or(d.qk_coupling),
            mention_rate: self.mention_rate.unwrap_or(d.mention_rate),
            frame_interval: self.frame_interval.unwrap_or(d.frame_interval),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Args, Debug, Clone)]
struct SourceArgs {
    /// Scene JSON; requires --embeddings. The stack comes from the synth flags.
    #[arg(long, requires = "embeddings", conflicts_with = "dump")]
    scene: Option<PathBuf>,
    #[arg(long, requires = "scene")]
    embeddings: Option<PathBuf>,
    /// Attention dump directory or manifest.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Number of synthetic scenes.
    #[arg(long, default_value_t = 1, conflicts_with_all = ["scene", "dump"])]
    scenes: usize,
    #[command(flatten)]
    synth: SynthArgs,
}

impl SourceArgs {
    fn source(&self) -> Result<SceneSource> {
        Ok(match (&self.scene, &self.embeddings, &self.dump) {
            (Some(scene), Some(embeddings), None) => SceneSource::SceneFile {
                scene: scene.clone(),
                embeddings: embeddings.clone(),
                stack: self.synth.spec()?,
            },
            (None, None, Some(dump)) => SceneSource::Dump(dump.clone()),
            (None, None, None) => {
                if self.scenes == 0 {
                    return Err(CliError::Usage("--scenes must be at least 1".into()));
                }
                SceneSource::Synthetic {
                    spec: self.synth.spec()?,
                    scenes: self.scenes,
                }
            }
            _ => {
                return Err(CliError::Usage(
                    "give exactly one of --scene/--embeddings or --dump".into(),
                ))
            }
        })
    }
}

/// Bias fields that are not swept.
#[derive(Args, Debug, Clone)]
struct BiasShapeArgs {
    #[arg(long)]
    clamp_nonnegative: bool,
    #[arg(long, default_value_t = 0)]
    frame_window: usize,
    #[arg(long, value_enum, default_value_t = ReferenceArg::Score)]
    reference: ReferenceArg,
}

#[derive(Args, Debug, Clone)]
struct BiasArgs {
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Head threshold; `inf` disables every head.
    #[arg(long, value_parser = parse_threshold, default_value = "5e-5")]
    lambda: f64,
    #[arg(long, value_parser = parse_range, default_value = "10-19")]
    layer_range: LayerRange,
    #[command(flatten)]
    shape: BiasShapeArgs,
}

impl BiasArgs {
    fn config(&self) -> BiasConfig {
        BiasConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            layer_range: self.layer_range,
            ..self.shape.base()
        }
    }
}

impl BiasShapeArgs {
    fn base(&self) -> BiasConfig {
        BiasConfig {
            clamp_nonnegative: self.clamp_nonnegative,
            frame_window: self.frame_window,
            reference: self.reference.into(),
            ..BiasConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReferenceArg {
    Score,
    Weight,
}

impl From<ReferenceArg> for BiasReference {
    fn from(r: ReferenceArg) -> Self {
        match r {
            ReferenceArg::Score => BiasReference::ScaledScore,
            ReferenceArg::Weight => BiasReference::AttentionWeight,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LayoutArg {
    Disjoint,
    Overlapping,
}

impl From<LayoutArg> for BoxLayout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Disjoint => BoxLayout::Disjoint,
            LayoutArg::Overlapping => BoxLayout::Overlapping,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PayloadArg {
    Scores,
    Weights,
}

fn parse_range(s: &str) -> std::result::Result<LayerRange, String> {
    s.parse()
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([num(h)?, num(w)?])
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn pretty_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print one `error[CODE]: message` line on stderr.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(format!("{msg} (see --help)")).diagnostic());
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.diagnostic());
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            source,
            bias,
            report_layers,
            out,
        } => {
            let report = run(&RunConfig {
                source: source.source()?,
                bias: bias.config(),
                report_layers,
            })?;
            warn_all(&report.warnings);
            let path = out.join("report.json");
            write_file(&path, report.to_json()?)?;
            println!(
                "{}: active heads {}/{}, AttnMean {:.4} -> {:.4} (x1e-4)",
                path.display(),
                report.biased.active_heads,
                report.biased.total_heads,
                report.baseline.attn_mean.scaled,
                report.biased.attn_mean.scaled
            );
            Ok(())
        }
        Command::Sweep {
            source,
            lambda,
            alpha,
            layer_range,
            shape,
            out,
        } => {
            let grid = SweepGrid {
                lambdas: lambda,
                alphas: alpha,
                layer_ranges: layer_range,
            };
            let result = sweep(&source.source()?, &shape.base(), &grid)?;
            warn_all(&result.warnings);
            let path = out.join("sweep.csv");
            write_file(&path, sweep_csv(&result.rows)?)?;
            println!("{}: {} cells", path.display(), result.rows.len());
            Ok(())
        }
        Command::Ingest { dump, bias, out } => ingest(&dump, &bias.config(), out.as_deref()),
        Command::Heatmap {
            source,
            bias,
            layer,
            head,
            token,
            sample,
            out,
        } => {
            let files = export_heatmap(
                &source.source()?,
                &bias.config(),
                HeadId::new(layer, head),
                token,
                sample,
                &out,
            )?;
            print!("{}", heatmap::listing(&files));
            Ok(())
        }
        Command::Synth {
            synth,
            dump_payload,
            out,
        } => write_synthetic(&synth.spec()?, dump_payload, &out),
        Command::Verify {
            seed,
            instances,
            scenes,
            n_layers,
            n_heads,
            model_dim,
            out,
        } => {
            let spec = SynthSpec {
                n_layers,
                n_heads,
                model_dim,
                ..SynthSpec::with_seed(seed)
            };
            spec.validate()?;
            let report = check_equivalence(seed, instances, scenes, &spec)?;
            let text = pretty_json(&VerifyReport::new(&report))?;
            match out {
                Some(path) => write_file(&path, &text)?,
                None => print!("{text}"),
            }
            let r = report;
            if !(r.max_attention_diff <= VERIFY_ATTENTION_TOL && r.max_activity_diff <= VERIFY_ACTIVITY_TOL) {
                return Err(CliError::Verify(format!(
                    "oracle mismatch: attention {:e} (tol {VERIFY_ATTENTION_TOL:e}), activity {:e} (tol {VERIFY_ACTIVITY_TOL:e})",
                    r.max_attention_diff, r.max_activity_diff
                )));
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct VerifyReport {
    version: u32,
    instances: usize,
    max_attention_diff: f64,
    attention_tolerance: f64,
    scenes: usize,
    max_activity_diff: f64,
    activity_tolerance: f64,
}

impl VerifyReport {
    fn new(r: &EquivalenceReport) -> Self {
        Self {
            version: 1,
            instances: r.instances,
            max_attention_diff: r.max_attention_diff,
            attention_tolerance: VERIFY_ATTENTION_TOL,
            scenes: r.scenes,
            max_activity_diff: r.max_activity_diff,
            activity_tolerance: VERIFY_ACTIVITY_TOL,
        }
    }
}

#[derive(Serialize)]
struct IngestSummary {
    version: u32,
    model: String,
    payload: PayloadKind,
    mode: crate::analysis::AnalysisMode,
    n_layers: usize,
    n_heads: usize,
    seq_len: usize,
    heads_present: usize,
    utterances: usize,
    speaker_regions: usize,
    active_heads: usize,
    consistent: bool,
    inconsistent_heads: Vec<HeadId>,
}

fn ingest(path: &Path, cfg: &BiasConfig, out: Option<&Path>) -> Result<()> {
    let dump = AttentionDump::open(path)?;
    let m = dump.manifest();
    cfg.validate(m.n_layers)?;
    let scene = dump.scene();
    let mask = Mask::causal(m.seq_len);
    let selector = cfg.selector();
    let mut inconsistent = Vec::new();
    let mut active = 0;
    for head in dump.head_ids() {
        let matrix = dump.load_head(head)?;
        let is_active = match m.payload {
            PayloadKind::Scores => {
                let trace = analyze_head_scores(head, &matrix, &mask, &scene.sequence, &scene.regions, cfg, &selector)?;
                trace.active
            }
            PayloadKind::Weights => {
                if !inconsistent_rows(&matrix, WEIGHT_ROW_TOL).is_empty() {
                    inconsistent.push(head);
                }
                let activity = speaker_align::head_activity(&matrix, &scene.sequence, &scene.regions)?;
                selector.is_active(head, activity)
            }
        };
        active += usize::from(is_active);
    }
    let mode = match m.payload {
        PayloadKind::Scores => crate::analysis::AnalysisMode::Full,
        PayloadKind::Weights => {
            eprintln!("warning: weights payload, analysis-only mode (bias replay needs pre-softmax scores)");
            crate::analysis::AnalysisMode::AnalysisOnly
        }
    };
    if !inconsistent.is_empty() {
        eprintln!(
            "warning: inconsistent dump: {} heads have weight rows not summing to 1 within {WEIGHT_ROW_TOL}",
            inconsistent.len()
        );
    }
    let summary = IngestSummary {
        version: 1,
        model: m.model.clone(),
        payload: m.payload,
        mode,
        n_layers: m.n_layers,
        n_heads: m.n_heads,
        seq_len: m.seq_len,
        heads_present: m.heads.len(),
        utterances: scene.sequence.utterances().len(),
        speaker_regions: scene.regions.len(),
        active_heads: active,
        consistent: inconsistent.is_empty(),
        inconsistent_heads: inconsistent,
    };
    let text = pretty_json(&summary)?;
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn export_heatmap(
    source: &SceneSource,
    cfg: &BiasConfig,
    head: HeadId,
    token: Option<usize>,
    sample: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if sample >= source.sample_count() {
        return Err(CliError::Usage(format!(
            "sample {sample} out of range (source has {})",
            source.sample_count()
        )));
    }
    let s = source.load(sample)?;
    if head.layer >= s.n_layers || head.head >= s.n_heads {
        return Err(CliError::Usage(format!(
            "head {head} outside a {}x{} model",
            s.n_layers, s.n_heads
        )));
    }
    cfg.validate(s.n_layers)?;
    let seq = &s.scene.sequence;
    let n = seq.total_len();
    let token = match token {
        Some(t) if t < n => t,
        Some(t) => return Err(CliError::Usage(format!("token {t} outside a sequence of {n}"))),
        None => seq
            .utterances()
            .iter()
            .find(|u| s.scene.regions.get(&u.speaker, seq.utterance_frame(u)).is_some())
            .map(|u| u.sequence_index)
            .ok_or_else(|| CliError::Usage("no utterance token has a speaker region; pass --token".into()))?,
    };
    let matrix = s.head_matrix(head)?;
    let mask = Mask::causal(n);
    let (baseline, biased): (Matrix, Matrix) = match s.payload {
        PayloadKind::Scores => {
            let t = analyze_head_scores(head, &matrix, &mask, seq, &s.scene.regions, cfg, &cfg.selector())?;
            let biased = t.biased().clone();
            (t.baseline, biased)
        }
        PayloadKind::Weights => {
            eprintln!("warning: weights payload, biased map equals baseline");
            (matrix.clone(), matrix)
        }
    };
    let stem = format!("token{token}_L{}H{}", head.layer, head.head);
    heatmap::export(
        out,
        &stem,
        seq.visual(),
        &[("baseline", baseline.row(token)), ("biased", biased.row(token))],
    )
}

fn write_synthetic(spec: &SynthSpec, dump_payload: Option<PayloadArg>, out: &Path) -> Result<()> {
    let synth = generate_scene(spec)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_file(&out.join("scene.json"), synth.file.to_json()?)?;
    save_embeddings(&out.join("embeddings.bin"), &synth.embeddings)?;
    write_file(&out.join("synth.json"), pretty_json(spec)?)?;
    if let Some(kind) = dump_payload {
        let stack = generate_stack(spec)?;
        let payload = match kind {
            PayloadArg::Scores => PayloadKind::Scores,
            PayloadArg::Weights => PayloadKind::Weights,
        };
        let manifest = DumpManifest::for_scene("synthetic", &synth.scene, spec.n_layers, spec.n_heads, payload);
        let mask = Mask::causal(synth.scene.sequence.total_len());
        let mut payloads = Vec::with_capacity(manifest.heads.len());
        for e in &manifest.heads {
            let w = &stack.layer(e.layer)[e.head];
            let scores = head_scores(&synth.embeddings, w)?;
            payloads.push(match payload {
                PayloadKind::Scores => scores,
                PayloadKind::Weights => speaker_align::baseline_attention(&scores, &mask)?,
            });
        }
        write_dump(&out.join("dump"), &manifest, &payloads)?;
    }
    println!("{}", out.display());
    Ok(())
}
