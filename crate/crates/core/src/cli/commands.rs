use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};

use crate::batch::{parse_workload, serve as serve_workload, Request, ServeConfig};
use crate::model::ToyModel;
use crate::perf::{
    expected_tbt_uniform, fit_accuracy_curve, select_width, AccuracyCurve, AccuracySample,
    CostModel,
};
use crate::pipeline::{run, Mode, RunOutput, StopReason};
use crate::source::{
    BeamConfig, DraftProvider, RecordingDraft, ReplayDraft, SourceError, SyntheticDraft,
};
use crate::tree::TokenId;

use super::{
    CommonArgs, DecodeArgs, Failure, OutputArgs, ReplayArgs, RunConfig, ServeArgs, SweepArgs,
    ValidateArgs,
};

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::usage)
}

/// Config file, then flags, then seed resolution and validation.
fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    if let Some(m) = common.mode {
        cfg.mode = m;
    }
    if let Some(p) = &common.cost_model {
        let cost: CostModel = read_json(p)?;
        cost.validate().map_err(Failure::usage)?;
        cfg.cost = cost;
    }
    if let Some(s) = common.stages {
        cfg.pipeline.stages = s;
    }
    if let Some(w) = common.width {
        cfg.beam.w = w;
    }
    if let Some(k) = common.k {
        cfg.beam.k = k;
    }
    if let Some(n) = common.max_tokens {
        cfg.max_tokens = n;
    }
    if let Some(p) = common.miss_prob {
        cfg.draft.miss_prob = p;
    }
    cfg.pipeline.workers |= common.workers;
    cfg.pipeline.overlap |= common.overlap;
    cfg.resolve().map_err(Failure::usage)
}

fn apply_outputs(cfg: &mut RunConfig, out: &OutputArgs) {
    if let Some(p) = &out.trace_out {
        cfg.output.trace = Some(p.clone());
    }
    if let Some(p) = &out.metrics_out {
        cfg.output.metrics = Some(p.clone());
    }
    if let Some(p) = &out.tokens_out {
        cfg.output.tokens = Some(p.clone());
    }
}

fn build_model(cfg: &RunConfig) -> Result<Arc<ToyModel>, Failure> {
    ToyModel::init(cfg.model_config())
        .map(Arc::new)
        .map_err(Failure::usage)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::usage)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::usage(anyhow!(e)))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::usage)
}

fn ids(tokens: &[TokenId]) -> Vec<u32> {
    tokens.iter().map(|t| t.0).collect()
}

/// Sequential greedy continuation used both as the draft reference and as
/// the losslessness oracle.
fn oracle(model: &ToyModel, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>, Failure> {
    model
        .sequential_decode(prompt, n)
        .map_err(Failure::invariant)
}

/// The output must be a prefix of the oracle, and all of it unless the draft
/// source ran dry.
fn is_lossless(out: &RunOutput, expected: &[TokenId]) -> bool {
    expected.starts_with(&out.tokens)
        && (out.stop == StopReason::SourceExhausted || out.tokens.len() == expected.len())
}

fn write_artifacts(
    cfg: &RunConfig,
    prompt: &[TokenId],
    out: &RunOutput,
    lossless: bool,
) -> Result<(), Failure> {
    let config: Value = serde_json::to_value(cfg).expect("config serializes");
    if let Some(p) = &cfg.output.trace {
        let mut w = create(p)?;
        out.trace
            .write_csv(Some(&cfg.to_json()), &mut w)
            .and_then(|_| w.flush())
            .with_context(|| format!("writing {}", p.display()))
            .map_err(Failure::usage)?;
    }
    if let Some(p) = &cfg.output.metrics {
        let mut metrics = serde_json::to_value(&out.metrics).expect("metrics serialize");
        let obj = metrics.as_object_mut().expect("metrics are an object");
        obj.insert("mode".into(), json!(cfg.mode));
        obj.insert("stop".into(), json!(out.stop));
        obj.insert("lossless".into(), json!(lossless));
        obj.insert("config".into(), config.clone());
        write_json(p, &metrics)?;
    }
    if let Some(p) = &cfg.output.tokens {
        write_json(
            p,
            &json!({
                "config": config,
                "prompt": ids(prompt),
                "tokens": ids(&out.tokens),
            }),
        )?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn summary(cfg: &RunConfig, out: &RunOutput, lossless: bool) {
    let m = &out.metrics;
    println!(
        "mode={} tokens={} steps={} steps_per_token={} tbt_mean_ms={} tbt_p99_ms={} \
         hit_rate={} flushes={} stop={} lossless={}",
        cfg.mode,
        m.tokens,
        m.steps,
        fmt_opt(m.steps_per_token),
        fmt_opt(m.tbt_mean_ms),
        fmt_opt(m.tbt_p99),
        fmt_opt(m.hit_rate),
        m.flush_count,
        serde_json::to_value(out.stop)
            .expect("serializes")
            .as_str()
            .unwrap_or("?"),
        lossless,
    );
}

fn finish(
    cfg: &RunConfig,
    prompt: &[TokenId],
    out: &RunOutput,
    expected: &[TokenId],
) -> Result<(), Failure> {
    let lossless = is_lossless(out, expected);
    write_artifacts(cfg, prompt, out, lossless)?;
    summary(cfg, out, lossless);
    if lossless {
        Ok(())
    } else {
        Err(Failure::invariant(anyhow!(
            "output diverged from sequential decoding"
        )))
    }
}

pub fn decode(args: DecodeArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_outputs(&mut cfg, &args.output);
    let model = build_model(&cfg)?;
    let prompt = cfg.prompt_tokens().map_err(Failure::usage)?;
    let expected = oracle(&model, &prompt, cfg.max_tokens)?;
    let reference = [prompt.clone(), expected.clone()].concat();
    let synthetic = SyntheticDraft::new(cfg.draft_config(), cfg.model.vocab, reference);
    let pipeline = cfg.pipeline_config();
    let out = match &args.record_draft {
        Some(path) => {
            let mut draft = RecordingDraft::new(synthetic);
            let out = run(model, &pipeline, &mut draft, &prompt, cfg.max_tokens)?;
            let mut w = create(path)?;
            draft
                .write_jsonl(&mut w)
                .and_then(|_| w.flush())
                .with_context(|| format!("writing {}", path.display()))
                .map_err(Failure::usage)?;
            out
        }
        None => {
            let mut draft = synthetic;
            run(model, &pipeline, &mut draft, &prompt, cfg.max_tokens)?
        }
    };
    finish(&cfg, &prompt, &out, &expected)
}

pub fn replay(args: ReplayArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    apply_outputs(&mut cfg, &args.output);
    let model = build_model(&cfg)?;
    let prompt = cfg.prompt_tokens().map_err(Failure::usage)?;
    let expected = oracle(&model, &prompt, cfg.max_tokens)?;
    let mut draft = ReplayDraft::from_path(&args.trace).map_err(Failure::usage)?;
    let out = run(
        model,
        &cfg.pipeline_config(),
        &mut draft,
        &prompt,
        cfg.max_tokens,
    )?;
    if out.stop == StopReason::SourceExhausted {
        eprintln!(
            "note: trace ended after {} of {} tokens",
            out.tokens.len(),
            cfg.max_tokens
        );
    }
    finish(&cfg, &prompt, &out, &expected)
}

#[derive(Debug, Clone, Serialize)]
struct SweepRow {
    w: usize,
    k: usize,
    tokens: usize,
    steps_per_token: Option<f64>,
    tbt_mean_ms: Option<f64>,
    hits: u64,
    verifications: u64,
    hit_rate: Option<f64>,
    fitted_accuracy: f64,
    expected_tbt_ms: f64,
}

pub fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(w) = &args.widths {
        cfg.sweep.widths = w.clone();
    }
    if let Some(k) = &args.ks {
        cfg.sweep.ks = k.clone();
    }
    if let Some(n) = args.sweep_tokens {
        cfg.sweep.tokens = n;
    }
    if cfg.sweep.widths.is_empty() || cfg.sweep.ks.is_empty() {
        return Err(Failure::usage(anyhow!("sweep grids must be non-empty")));
    }
    for &k in &cfg.sweep.ks {
        BeamConfig { w: 1, k }
            .validate()
            .map_err(|e| Failure::usage(anyhow!(e)))?;
        if k as u64 >= cfg.model.vocab as u64 {
            return Err(Failure::usage(anyhow!(
                "k = {k} needs a vocabulary larger than {}",
                cfg.model.vocab
            )));
        }
    }
    if cfg.sweep.widths.contains(&0) {
        return Err(Failure::usage(anyhow!("widths must be at least 1")));
    }
    let external: Option<AccuracyCurve> = match &args.accuracy_curve {
        Some(p) => Some(read_json(p)?),
        None => None,
    };
    let model = build_model(&cfg)?;
    let prompt = cfg.prompt_tokens().map_err(Failure::usage)?;
    let n = cfg.sweep.tokens;
    let expected = oracle(&model, &prompt, n)?;
    let reference = [prompt.clone(), expected.clone()].concat();
    let m = cfg.pipeline.stages;

    let mut rows = Vec::new();
    let mut recommendations = Vec::new();
    for &k in &cfg.sweep.ks {
        let mut samples = Vec::new();
        let mut raw = Vec::new();
        for &w in &cfg.sweep.widths {
            let mut pipeline = cfg.pipeline_config();
            pipeline.beam = BeamConfig { w, k };
            let mut draft =
                SyntheticDraft::new(cfg.draft_config(), cfg.model.vocab, reference.clone());
            let out = run(Arc::clone(&model), &pipeline, &mut draft, &prompt, n)?;
            if !is_lossless(&out, &expected) {
                return Err(Failure::invariant(anyhow!(
                    "w = {w}, k = {k}: output diverged from sequential decoding"
                )));
            }
            samples.push(AccuracySample {
                width: w,
                hits: out.metrics.hits,
                trials: out.metrics.verifications,
            });
            raw.push((w, out.metrics));
        }
        let fitted = fit_accuracy_curve(&samples).map_err(Failure::invariant)?;
        let curve = external.as_ref().unwrap_or(&fitted);
        let best = select_width(&cfg.cost, curve, m, &cfg.sweep.widths).map_err(Failure::usage)?;
        let p = curve.at(best).expect("selected width is on the curve");
        let best_tbt =
            expected_tbt_uniform(cfg.cost.step_cost(best).map_err(Failure::usage)?, p, m);
        recommendations.push((k, best, best_tbt));
        for (w, metrics) in raw {
            let acc = curve.at(w).ok_or_else(|| {
                Failure::usage(anyhow!("width {w} not covered by the accuracy curve"))
            })?;
            rows.push(SweepRow {
                w,
                k,
                tokens: metrics.tokens,
                steps_per_token: metrics.steps_per_token,
                tbt_mean_ms: metrics.tbt_mean_ms,
                hits: metrics.hits,
                verifications: metrics.verifications,
                hit_rate: metrics.hit_rate,
                fitted_accuracy: acc,
                expected_tbt_ms: expected_tbt_uniform(
                    cfg.cost.step_cost(w).map_err(Failure::usage)?,
                    acc,
                    m,
                ),
            });
        }
    }

    let mut csv = format!("# config={}\n", cfg.to_json());
    csv.push_str(
        "w,k,tokens,steps_per_token,tbt_mean_ms,hits,verifications,hit_rate,fitted_accuracy,expected_tbt_ms\n",
    );
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6}\n",
            r.w,
            r.k,
            r.tokens,
            opt(r.steps_per_token),
            opt(r.tbt_mean_ms),
            r.hits,
            r.verifications,
            opt(r.hit_rate),
            r.fitted_accuracy,
            r.expected_tbt_ms
        ));
    }
    match &args.out {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(csv.as_bytes())
                .and_then(|_| w.flush())
                .with_context(|| format!("writing {}", p.display()))
                .map_err(Failure::usage)?;
        }
        None => print!("{csv}"),
    }
    for (k, w, tbt) in &recommendations {
        println!("k={k} recommended_w={w} expected_tbt_ms={tbt:.4}");
    }
    let (k, w, tbt) = recommendations
        .iter()
        .copied()
        .min_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)))
        .expect("at least one k");
    println!("recommendation: w={w} k={k} expected_tbt_ms={tbt:.4}");
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(b) = &args.batch_sizes {
        cfg.serve.batch_sizes = b.clone();
    }
    if let Some(w) = args.w_total {
        cfg.serve.w_total = Some(w);
    }
    if let Some(n) = args.max_nodes {
        cfg.serve.max_nodes = Some(n);
    }
    if cfg.serve.batch_sizes.is_empty() {
        return Err(Failure::usage(anyhow!("no batch sizes given")));
    }
    let file = File::open(&args.workload)
        .with_context(|| format!("opening {}", args.workload.display()))
        .map_err(Failure::usage)?;
    let entries = parse_workload(BufReader::new(file))?;
    let seed = cfg.seed.expect("resolved");
    let requests: Vec<Request> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| e.resolve(i as u64, cfg.model.vocab, seed))
        .collect::<Result<_, _>>()?;
    let model = build_model(&cfg)?;

    let mut reports = Vec::new();
    for &b in &cfg.serve.batch_sizes {
        let serve_cfg = ServeConfig {
            batch_size: b,
            w_total: cfg.serve.w_total.unwrap_or(cfg.beam.w),
            max_nodes: cfg.serve.max_nodes,
            draft: cfg.draft_config(),
            pipeline: cfg.pipeline_config(),
        };
        let report = serve_workload(Arc::clone(&model), &serve_cfg, &requests)?;
        if let (Some(p50), Some(p99)) = (report.tbt_p50, report.tbt_p99) {
            if p99 < p50 {
                return Err(Failure::invariant(anyhow!(
                    "B = {b}: p99 {p99} below p50 {p50}"
                )));
            }
        }
        println!(
            "B={} requests={} tokens={} throughput_tps={:.3} tbt_mean_ms={} tbt_p50_ms={} tbt_p99_ms={} lossless={}",
            b,
            report.requests,
            report.tokens,
            report.throughput_tps,
            fmt_opt(report.tbt_mean_ms),
            fmt_opt(report.tbt_p50),
            fmt_opt(report.tbt_p99),
            report.lossless
        );
        reports.push(report);
    }
    if let Some(p) = &args.report_out {
        write_json(p, &json!({ "config": cfg, "reports": reports }))?;
    }
    if reports.iter().all(|r| r.lossless) {
        Ok(())
    } else {
        Err(Failure::invariant(anyhow!(
            "a request's output diverged from sequential decoding"
        )))
    }
}

/// Draft settings the oracle corpus cycles through.
const CORPUS_MISS: [f64; 4] = [0.0, 0.05, 0.5, 1.0];

pub fn validate(args: ValidateArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    if let Some(p) = &args.accuracy_curve {
        let _: AccuracyCurve = read_json(p)?;
    }
    build_model(&cfg)?;
    println!("config ok: {}", cfg.to_json());
    if !args.check_oracle {
        return Ok(());
    }
    let base = cfg.seed.expect("resolved");
    let mut failed = 0;
    for i in 0..args.runs {
        let mut c = cfg.clone();
        let seed = base.wrapping_add(i as u64);
        c.seed = Some(seed);
        c.model.seed = Some(seed);
        c.draft.seed = Some(seed.rotate_left(17) ^ 0xa5a5);
        c.draft.miss_prob = CORPUS_MISS[i % CORPUS_MISS.len()];
        c.draft.top1_hit = c.draft.top1_hit.min(1.0 - c.draft.miss_prob);
        c.draft.stall_prob = if i % 3 == 2 { 0.1 } else { 0.0 };
        c.prompt = crate::batch::PromptSpec::Length(1 + i % 9);
        c.pipeline.workers = i % 2 == 1;
        c.mode = if i % 7 == 6 {
            Mode::VanillaPp
        } else {
            cfg.mode
        };
        let c = c.resolve().map_err(Failure::usage)?;
        let model = build_model(&c)?;
        let prompt = c.prompt_tokens().map_err(Failure::usage)?;
        let expected = oracle(&model, &prompt, c.max_tokens)?;
        let reference = [prompt.clone(), expected.clone()].concat();
        let mut draft: Box<dyn DraftProvider> = Box::new(SyntheticDraft::new(
            c.draft_config(),
            c.model.vocab,
            reference,
        ));
        let ok = match run(
            model,
            &c.pipeline_config(),
            &mut draft,
            &prompt,
            c.max_tokens,
        ) {
            Ok(out) => is_lossless(&out, &expected),
            Err(crate::pipeline::PipelineError::Source(SourceError::Exhausted)) => false,
            Err(e) => {
                eprintln!("seed={seed}: {e}");
                false
            }
        };
        failed += usize::from(!ok);
        println!(
            "{} seed={} miss_prob={} stall_prob={} prompt_len={} workers={} mode={}",
            if ok { "PASS" } else { "FAIL" },
            seed,
            c.draft.miss_prob,
            c.draft.stall_prob,
            prompt.len(),
            c.pipeline.workers,
            c.mode
        );
    }
    if failed == 0 {
        println!("oracle corpus: {} runs lossless", args.runs);
        Ok(())
    } else {
        Err(Failure::invariant(anyhow!(
            "{failed} of {} corpus runs diverged",
            args.runs
        )))
    }
}
