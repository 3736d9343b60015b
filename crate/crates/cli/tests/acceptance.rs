//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Tolerances and case counts are pinned below.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use speaker_align::oracle::{check_equivalence, RandomInstance};
use speaker_align::synth::{generate_scene, generate_stack, SynthSpec};
use speaker_align::{
    attn_max, attn_mean, baseline_attention, biased_attention, classify_heads, compute_bias_plan, forward_pass,
    forward_visit, BiasConfig, ForwardInputs, HeadId, LayerRange, Mask, Matrix,
};
use speaker_align_cli::analysis::{run, RunConfig, SceneSource};

const ZERO_BIAS_TOL: f64 = 1e-12;
const ZERO_BIAS_SCENES: u64 = 200;
const ZERO_BIAS_BUDGET: Duration = Duration::from_secs(10);

const PAPER_ACTIVE_AT_ZERO: f64 = 0.357;
const ACTIVE_RATIO_TOL: f64 = 0.0005;

const LAMBDA_GRID: [f64; 5] = [0.0, 5e-5, 2e-4, 8e-4, f64::INFINITY];
const NESTING_SCENES: u64 = 50;
/// Extra thresholds per scene, evenly spaced across the observed activity
/// range, so nesting is also checked where the active set actually changes.
const NESTING_SPREAD_POINTS: usize = 16;

const MASS_CASES: usize = 1000;

const ARGMAX_CASES: usize = 500;
const ARGMAX_ALPHA: f64 = 100.0;

const DENSE_TOL: f64 = 1e-9;
const DENSE_INSTANCES: usize = 200;
const SCAN_TOL: f64 = 1e-12;
const SCAN_SCENES: usize = 50;

const UPLIFT_SCENES: usize = 100;
const UPLIFT_MIN_RATIO: f64 = 2.0;
/// The default threshold 5e-5 scaled by the context-length ratio between a
/// real video prompt (about 1.4k tokens at 8 frames) and the 160-token toy
/// scene: head activity is a mean attention weight, so it scales like 1/N.
const UPLIFT_LAMBDA: f64 = 5e-4;
const UPLIFT_BUDGET: Duration = Duration::from_secs(60);

const INVARIANT_CASES: usize = 1000;
const ROW_SUM_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

/// Small stack on full-size scenes.
fn small_stack_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_layers: 4,
        n_heads: 4,
        model_dim: 16,
        ..SynthSpec::with_seed(seed)
    }
}

fn ac1_zero_bias_identity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut biased_heads = 0;
    for seed in 0..ZERO_BIAS_SCENES {
        let spec = small_stack_spec(seed);
        let synth = generate_scene(&spec).map_err(|e| e.to_string())?;
        let stack = generate_stack(&spec).map_err(|e| e.to_string())?;
        let cfg = BiasConfig {
            alpha: 0.0,
            lambda: 0.0,
            layer_range: LayerRange::all(spec.n_layers),
            ..BiasConfig::default()
        };
        let inputs = ForwardInputs {
            embeddings: &synth.embeddings,
            stack: &stack,
            sequence: &synth.scene.sequence,
            regions: &synth.scene.regions,
            config: &cfg,
        };
        forward_visit(&inputs, &cfg.selector(), LayerRange::all(spec.n_layers), |t| {
            if let Some(b) = &t.biased {
                biased_heads += 1;
                worst = worst.max(b.max_abs_diff(&t.baseline)?);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    let took = start.elapsed();
    let detail = format!("max |d| = {worst:e} over {ZERO_BIAS_SCENES} scenes, {biased_heads} biased heads, {took:.2?}");
    if worst <= ZERO_BIAS_TOL && took < ZERO_BIAS_BUDGET && biased_heads > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac2_lambda_endpoints() -> Outcome {
    let spec = SynthSpec::with_seed(0);
    let synth = generate_scene(&spec).map_err(|e| e.to_string())?;
    let stack = generate_stack(&spec).map_err(|e| e.to_string())?;
    let pass = |cfg: &BiasConfig| {
        let inputs = ForwardInputs {
            embeddings: &synth.embeddings,
            stack: &stack,
            sequence: &synth.scene.sequence,
            regions: &synth.scene.regions,
            config: cfg,
        };
        forward_pass(&inputs, &cfg.selector()).map_err(|e| e.to_string())
    };

    let off = pass(&BiasConfig {
        lambda: f64::INFINITY,
        layer_range: LayerRange::all(28),
        ..BiasConfig::default()
    })?;
    let off_ratio = off.selection.active_ratio();
    let unchanged = off.heads.iter().all(|t| t.biased() == &t.baseline);

    let on = pass(&BiasConfig {
        lambda: 0.0,
        layer_range: LayerRange::inclusive(10, 19),
        ..BiasConfig::default()
    })?;
    let on_ratio = on.selection.active_ratio();
    let detail = format!(
        "lambda=inf: ratio {off_ratio}, output unchanged {unchanged}; lambda=0, 10-19: {}/{} = {:.4}%",
        on.selection.active_count(),
        on.selection.total(),
        100.0 * on_ratio
    );
    if off_ratio == 0.0 && unchanged && (on_ratio - PAPER_ACTIVE_AT_ZERO).abs() <= ACTIVE_RATIO_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac3_nested_selection() -> Outcome {
    let range = LayerRange::inclusive(10, 19);
    let mut violations = 0;
    let mut sizes = vec![0usize; LAMBDA_GRID.len()];
    let mut distinct_sets = 0;
    for seed in 0..NESTING_SCENES {
        let spec = SynthSpec::with_seed(seed);
        let synth = generate_scene(&spec).map_err(|e| e.to_string())?;
        let stack = generate_stack(&spec).map_err(|e| e.to_string())?;
        let cfg = BiasConfig {
            lambda: f64::INFINITY,
            ..BiasConfig::default()
        };
        let inputs = ForwardInputs {
            embeddings: &synth.embeddings,
            stack: &stack,
            sequence: &synth.scene.sequence,
            regions: &synth.scene.regions,
            config: &cfg,
        };
        let mut activity = std::collections::BTreeMap::new();
        forward_visit(&inputs, &cfg.selector(), range, |t| {
            activity.insert(t.head, t.activity.unwrap_or(0.0));
            Ok(())
        })
        .map_err(|e| e.to_string())?;
        let sets_for = |grid: &[f64]| -> Vec<BTreeSet<HeadId>> {
            grid.iter()
                .map(|&l| classify_heads(&activity, l, range).active_set().into_iter().collect())
                .collect()
        };
        let sets = sets_for(&LAMBDA_GRID);
        for (k, s) in sets.iter().enumerate() {
            sizes[k] += s.len();
        }
        violations += sets.windows(2).filter(|w| !w[1].is_subset(&w[0])).count();

        let in_range: Vec<f64> = activity
            .iter()
            .filter(|(h, _)| range.contains(h.layer))
            .map(|(_, &a)| a)
            .collect();
        let lo = in_range.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = in_range.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let spread: Vec<f64> = (0..NESTING_SPREAD_POINTS)
            .map(|k| lo + (hi - lo) * k as f64 / (NESTING_SPREAD_POINTS - 1) as f64)
            .collect();
        let sets = sets_for(&spread);
        violations += sets.windows(2).filter(|w| !w[1].is_subset(&w[0])).count();
        distinct_sets += sets.windows(2).filter(|w| w[0] != w[1]).count();
    }
    let detail = format!(
        "{violations} violations over {NESTING_SCENES} scenes; active heads per grid lambda {sizes:?}; \
         {distinct_sets} strict shrinks on the activity-spanning grid"
    );
    if violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac4_subset_mass_sign() -> Outcome {
    let (mut cases, mut violations, mut seed) = (0usize, 0usize, 0u64);
    let mut signs = [0usize; 3];
    while cases < MASS_CASES {
        let inst = RandomInstance::generate(seed).map_err(|e| e.to_string())?;
        seed += 1;
        let mask = Mask::causal(inst.sequence.total_len());
        let plan =
            compute_bias_plan(&inst.scores, &inst.sequence, &inst.regions, &inst.config).map_err(|e| e.to_string())?;
        let base = baseline_attention(&inst.scores, &mask).map_err(|e| e.to_string())?;
        let biased = biased_attention(&inst.scores, &plan, &mask).map_err(|e| e.to_string())?;
        for (i, row) in plan.rows() {
            if cases == MASS_CASES {
                break;
            }
            // the query token itself is always a visible non-target
            if row.targets.is_empty() || row.targets.len() > i {
                continue;
            }
            let mass = |m: &Matrix| row.targets.iter().map(|&j| m.get(i, j)).sum::<f64>();
            let delta = mass(&biased) - mass(&base);
            let want = sign(row.value);
            signs[(want + 1) as usize] += 1;
            if sign(delta) != want {
                violations += 1;
            }
            cases += 1;
        }
    }
    let detail =
        format!("{violations} violations over {cases} cases (bias <0/=0/>0: {signs:?}); proof in `rebias_rows` docs");
    if violations == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sign(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn ac5_argmax_relocation() -> Outcome {
    let (mut cases, mut hits, mut seed) = (0usize, 0usize, 0u64);
    let mut misses = Vec::new();
    while cases < ARGMAX_CASES {
        let spec = SynthSpec::with_seed(seed);
        seed += 1;
        let synth = generate_scene(&spec).map_err(|e| e.to_string())?;
        let stack = generate_stack(&spec).map_err(|e| e.to_string())?;
        let cfg = BiasConfig {
            alpha: ARGMAX_ALPHA,
            lambda: 0.0,
            layer_range: LayerRange::inclusive(16, 16),
            ..BiasConfig::default()
        };
        let inputs = ForwardInputs {
            embeddings: &synth.embeddings,
            stack: &stack,
            sequence: &synth.scene.sequence,
            regions: &synth.scene.regions,
            config: &cfg,
        };
        let vis = synth.scene.sequence.visual().range();
        forward_visit(&inputs, &cfg.selector(), cfg.layer_range, |t| {
            let (Some(plan), Some(biased)) = (&t.plan, &t.biased) else {
                return Ok(());
            };
            for (i, row) in plan.rows() {
                if cases == ARGMAX_CASES || row.reference_max <= 0.0 {
                    continue;
                }
                let r = &biased.row(i)[vis.clone()];
                let arg = vis.start
                    + (0..r.len())
                        .max_by(|&a, &b| r[a].total_cmp(&r[b]).then(b.cmp(&a)))
                        .expect("visual tokens");
                cases += 1;
                if row.targets.contains(&arg) {
                    hits += 1;
                } else if misses.len() < 3 {
                    misses.push(format!("seed {} {} row {i}", seed - 1, t.head));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    }
    let mut detail = format!("{hits}/{cases} argmaxes inside the speaker region at alpha={ARGMAX_ALPHA}");
    if !misses.is_empty() {
        detail.push_str(&format!(", misses {misses:?}"));
    }
    if hits == cases {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac6_oracle_equivalence() -> Outcome {
    let spec = SynthSpec {
        n_layers: 2,
        n_heads: 4,
        model_dim: 16,
        ..SynthSpec::default()
    };
    let r = check_equivalence(0, DENSE_INSTANCES, SCAN_SCENES, &spec).map_err(|e| e.to_string())?;
    let detail = format!(
        "dense vs sparse {:e} over {} instances; fast vs exhaustive activity {:e} over {} scenes",
        r.max_attention_diff, r.instances, r.max_activity_diff, r.scenes
    );
    if r.max_attention_diff <= DENSE_TOL && r.max_activity_diff <= SCAN_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac7_alignment_uplift() -> Outcome {
    let start = Instant::now();
    let report = run(&RunConfig {
        source: SceneSource::Synthetic {
            spec: SynthSpec::default(),
            scenes: UPLIFT_SCENES,
        },
        bias: BiasConfig {
            alpha: 1.0,
            lambda: UPLIFT_LAMBDA,
            ..BiasConfig::default()
        },
        report_layers: None,
    })
    .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let (b, a) = (report.baseline.attn_mean.raw, report.biased.attn_mean.raw);
    let ratio = a / b;
    let detail = format!(
        "AttnMean x1e-4 {:.3} -> {:.3} (x{ratio:.2}), {} token-head samples, active {:.1}%, {took:.2?}",
        report.baseline.attn_mean.scaled,
        report.biased.attn_mean.scaled,
        report.biased.tokens,
        100.0 * report.biased.active_head_ratio
    );
    if ratio >= UPLIFT_MIN_RATIO && took < UPLIFT_BUDGET {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ac8_metric_invariants() -> Outcome {
    let (mut region_cases, mut row_cases) = (0usize, 0usize);
    let (mut region_violations, mut worst_row) = (0usize, 0.0f64);
    let mut seed = 10_000u64;
    while region_cases < INVARIANT_CASES || row_cases < INVARIANT_CASES {
        let inst = RandomInstance::generate(seed).map_err(|e| e.to_string())?;
        seed += 1;
        let mask = Mask::causal(inst.sequence.total_len());
        let plan =
            compute_bias_plan(&inst.scores, &inst.sequence, &inst.regions, &inst.config).map_err(|e| e.to_string())?;
        for attn in [
            baseline_attention(&inst.scores, &mask).map_err(|e| e.to_string())?,
            biased_attention(&inst.scores, &plan, &mask).map_err(|e| e.to_string())?,
        ] {
            for i in 0..attn.rows() {
                let s: f64 = attn.row(i).iter().sum();
                worst_row = worst_row.max((s - 1.0).abs());
                row_cases += 1;
            }
            for tok in inst.sequence.utterances() {
                let row = attn.row(tok.sequence_index);
                for (_, region) in inst.regions.iter() {
                    let mx = attn_max(row, region).map_err(|e| e.to_string())?;
                    let mn = attn_mean(row, region).map_err(|e| e.to_string())?;
                    region_cases += 1;
                    if mx < mn {
                        region_violations += 1;
                    }
                }
            }
        }
    }
    let detail = format!(
        "max<mean in {region_violations}/{region_cases} regions; worst |row sum - 1| = {worst_row:e} over {row_cases} rows"
    );
    if region_violations == 0 && worst_row <= ROW_SUM_TOL {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn invoke(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_speaker-align"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).trim().to_string())
    }
}

fn ac9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = |name: &str| tmp.path().join(name).display().to_string();
    let read = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let mut compared = Vec::new();
    for (cmd, file, extra) in [
        ("run", "report.json", vec!["--scenes", "2", "--seed", "7"]),
        (
            "sweep",
            "sweep.csv",
            vec!["--scenes", "2", "--seed", "7", "--alpha", "0.5,1,2"],
        ),
    ] {
        for tag in ["a", "b"] {
            let out = dir(&format!("{cmd}_{tag}"));
            let mut args = vec![cmd, "--out", out.as_str()];
            args.extend(&extra);
            invoke(&args)?;
        }
        let a = read(&tmp.path().join(format!("{cmd}_a")).join(file))?;
        let b = read(&tmp.path().join(format!("{cmd}_b")).join(file))?;
        if a != b {
            return Err(format!("{cmd}: {file} differs between invocations"));
        }
        compared.push(format!("{file} ({} bytes)", a.len()));
    }
    Ok(format!("identical: {}", compared.join(", ")))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1 zero-bias identity", ac1_zero_bias_identity),
        ("AC2 lambda endpoints", ac2_lambda_endpoints),
        ("AC3 nested head selection", ac3_nested_selection),
        ("AC4 subset-mass sign", ac4_subset_mass_sign),
        ("AC5 argmax relocation", ac5_argmax_relocation),
        ("AC6 oracle equivalence", ac6_oracle_equivalence),
        ("AC7 alignment uplift", ac7_alignment_uplift),
        ("AC8 metric invariants", ac8_metric_invariants),
        ("AC9 determinism", ac9_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
