use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;

use filab::analysis::{
    base8_error_table, capture_head_vectors, classify_heads, fv_heatmap, logit_lens, mean_signatures,
    standard_addition_bank, write_lens_jsonl, write_signatures_csv, TableAblation, Thresholds,
};
use filab::circuits::{
    eval_completeness, eval_faithfulness, eval_minimality, parse_heads, Circuit, CompletenessStrategy, Head,
    HeadGroup, KnockoutPolicy,
};
use filab::interventions::{path_patch_runs, sweep, AblationMode, HeadEffectMap, MeanBank, MlpMode, PairRuns};
use filab::model::{forward_cached, load_model, save_model, Model, NodeRef};
use filab::tasks::{load_mcqa, oracle, sample_mcqa_task, sample_pairs, Constraint, PromptPair, TaskKind, TaskSpec};
use filab::trainer::{
    eval_accuracy_with, eval_items, in_distribution_accuracy, save_curve, train, DecodeAblation, EvalReport,
    ModelPredictor, TrainConfig, TrainHooks,
};
use filab::Vocab;

use crate::manifest::{sha256_file, Artifacts};
use crate::{usage, Command, Failure, TaskArgs};

type Res<T = ()> = Result<T, Failure>;

/// Seed offset for mean-ablation reference prompts, kept apart from the
/// evaluation stream.
const BANK_SEED: u64 = 0xba4c;

pub(crate) fn dispatch(cmd: &Command, art: &mut Artifacts) -> Res {
    match cmd {
        Command::Train(a) => cmd_train(a, art),
        Command::GenTasks(a) => cmd_gen_tasks(a, art),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Eval(a) => cmd_eval(a, art),
        Command::PatchSweep(a) => cmd_patch_sweep(a, art),
        Command::PathPatch(a) => cmd_path_patch(a, art),
        Command::Ablate(a) => cmd_ablate(a, art),
        Command::CircuitEval(a) => cmd_circuit_eval(a, art),
        Command::LogitLens(a) => cmd_logit_lens(a, art),
        Command::FvHeatmap(a) => cmd_fv_heatmap(a, art),
        Command::Base8Table(a) => cmd_base8_table(a, art),
    }
}

fn require_seed(seed: Option<u64>, art: &mut Artifacts) -> Res<u64> {
    let s = seed.ok_or_else(|| usage("this command is randomized; pass --seed"))?;
    art.seed("seed", s);
    Ok(s)
}

fn load(path: &Path, art: &mut Artifacts) -> Res<Model> {
    art.model_sha256 = Some(sha256_file(path)?);
    Ok(load_model(path).with_context(|| format!("loading {}", path.display()))?)
}

impl TaskArgs {
    fn spec(&self) -> Res<TaskSpec> {
        let mut spec: TaskSpec = self.task.parse().map_err(|e| usage(format!("--task: {e}")))?;
        if let Some(k) = self.k {
            spec.k = k;
        }
        spec.n_shots = self.shots;
        if let Some(c) = &self.constraint {
            spec.constraint = match c.as_str() {
                "disjoint" | "answer-disjoint" => Constraint::AnswerDisjoint,
                "none" => Constraint::None,
                "overlap" | "answer-overlap" => Constraint::AnswerOverlap,
                _ => return Err(usage(format!("--constraint: unknown value {c:?}"))),
            };
        }
        spec.validate().map_err(|e| usage(e.to_string()))?;
        Ok(spec)
    }

    fn pairs(&self, n: usize, seed: u64) -> Res<Vec<PromptPair>> {
        if n == 0 {
            return Err(usage("at least one pair is required"));
        }
        let spec = self.spec()?.with_seed(seed);
        let vocab = Vocab::new();
        if spec.kind == TaskKind::ShiftedMcqa {
            let path = self.mcqa.as_ref().ok_or_else(|| usage("mcqa tasks need --mcqa <csv>"))?;
            let records = load_mcqa(path)?;
            let mut rng = filab::rng(seed);
            return (0..n)
                .map(|_| sample_mcqa_task(&spec, &records, &vocab, &mut rng).map_err(Failure::from))
                .collect();
        }
        Ok(sample_pairs(&spec, &vocab, n)?)
    }
}

/// Head selection: a circuit file (optionally one group) or an explicit list.
#[derive(Debug, Clone, Args, Serialize)]
pub struct HeadSelect {
    /// Circuit JSON file.
    #[arg(long)]
    pub circuit: Option<PathBuf>,
    /// Group of the circuit to use (function-induction, consolidation, previous-token, all).
    #[arg(long, default_value = "function-induction")]
    pub group: String,
    /// Explicit heads, e.g. `L3.H1,L2.H0`.
    #[arg(long)]
    pub heads: Option<String>,
}

impl HeadSelect {
    fn resolve(&self) -> Res<Option<Vec<Head>>> {
        match (&self.heads, &self.circuit) {
            (Some(_), Some(_)) => Err(usage("pass either --heads or --circuit, not both")),
            (Some(h), None) => Ok(Some(parse_heads(h).map_err(|e| usage(e.to_string()))?)),
            (None, Some(path)) => {
                let c = Circuit::load(path)?;
                if self.group == "all" {
                    return Ok(Some(c.heads));
                }
                let g: HeadGroup = serde_json::from_value(serde_json::Value::String(self.group.clone()))
                    .map_err(|_| usage(format!("--group: unknown group {:?}", self.group)))?;
                Ok(Some(c.group(g).to_vec()))
            }
            (None, None) => Ok(None),
        }
    }

    fn required(&self) -> Res<Vec<Head>> {
        self.resolve()?.ok_or_else(|| usage("pass --heads or --circuit"))
    }
}

fn parse_mode(s: &str) -> Res<AblationMode> {
    s.parse().map_err(|e: filab::Error| usage(e.to_string()))
}

fn parse_mlp(s: &str) -> Res<MlpMode> {
    match s {
        "strict" => Ok(MlpMode::Strict),
        "relaxed" => Ok(MlpMode::Relaxed),
        _ => Err(usage(format!("--mlp: expected strict or relaxed, got {s:?}"))),
    }
}

/// `L3.H1` is shorthand for `head-output[L3.H1]`.
fn parse_node(s: &str) -> Res<NodeRef> {
    let s = s.trim();
    if s.starts_with('L') {
        let (l, h) = filab::circuits::parse_head(s).map_err(|e| usage(e.to_string()))?;
        return Ok(NodeRef::head_output(l, h));
    }
    s.parse().map_err(|e: filab::Error| usage(e.to_string()))
}

fn bank_for(mode: AblationMode, model: &Model, n: usize, shots: usize, seed: u64) -> Res<Option<MeanBank>> {
    Ok(match mode {
        AblationMode::Mean => Some(standard_addition_bank(model, n, shots, seed ^ BANK_SEED)?),
        _ => None,
    })
}

fn report_line(label: &str, r: &EvalReport) {
    println!(
        "{label}: contrast {:.3} base {:.3} other {:.3} (n={}, shots={})",
        r.contrast_acc, r.base_acc, r.other_frac, r.n, r.shots
    );
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Starting configuration: `desk` (single-core schedule) or `default`.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Full configuration as JSON; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trained model (FILAB1).
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

fn cmd_train(a: &TrainArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let mut cfg = match (&a.config, a.preset.as_str()) {
        (Some(p), _) => serde_json::from_slice(&std::fs::read(p).with_context(|| p.display().to_string())?)?,
        (None, "desk") => TrainConfig::desk(),
        (None, "default") => TrainConfig::default(),
        (None, other) => return Err(usage(format!("--preset: unknown preset {other:?}"))),
    };
    cfg.seed = seed;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = a.log_every {
        cfg.log_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let mut log = |p: &filab::trainer::CurvePoint| eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", p.step, p.loss, p.lr);
    let hooks = TrainHooks {
        checkpoint_dir: a.checkpoint_dir.clone(),
        on_log: Some(&mut log),
    };
    let outcome = train(&cfg, hooks)?;
    save_model(&outcome.model, &a.out)?;
    art.outputs.push(a.out.clone());
    art.model_sha256 = Some(sha256_file(&a.out)?);
    if let Some(c) = &a.curve {
        save_curve(&outcome.curve, c)?;
        art.outputs.push(c.clone());
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenTasksArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL output, one pair per line.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_gen_tasks(a: &GenTasksArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let pairs = a.task.pairs(a.n, seed)?;
    let vocab = Vocab::new();
    let mut buf = Vec::new();
    for p in &pairs {
        serde_json::to_writer(&mut buf, &p.record(&vocab)?)?;
        buf.push(b'\n');
    }
    art.write(&a.out, &buf)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long, allow_hyphen_values = true)]
    pub k: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    pub input: String,
}

fn cmd_oracle(a: &OracleArgs) -> Res {
    let mut spec: TaskSpec = a.task.parse().map_err(|e| usage(format!("--task: {e}")))?;
    if let Some(k) = a.k {
        spec.k = k;
    }
    println!("{}", oracle(spec.kind, spec.k, &a.input)?);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also score exact-match accuracy on the training mixture.
    #[arg(long)]
    pub in_distribution: bool,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalOutput {
    task: String,
    report: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_distribution: Option<f64>,
}

fn cmd_eval(a: &EvalArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let model = load(&a.model, art)?;
    let spec = a.task.spec()?.with_seed(seed);
    let items = eval_items(&spec, a.n, a.task.shots, &Vocab::new())?;
    let report = eval_accuracy_with(&ModelPredictor { model: &model, ablation: None }, &items, a.task.shots)?;
    report_line(&spec.name(), &report);
    let in_distribution = if a.in_distribution {
        let acc = in_distribution_accuracy(&model, &filab::trainer::Mixture::k_varied(), a.n, seed)?;
        println!("in-distribution: {acc:.3}");
        Some(acc)
    } else {
        None
    };
    let out = EvalOutput {
        task: spec.name(),
        report,
        in_distribution,
    };
    art.write(&a.out, &serde_json::to_vec_pretty(&out)?)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PatchSweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Receiver node, e.g. `logits` or `head-value[L3.H1]`.
    #[arg(long, default_value = "logits")]
    pub receiver: String,
    /// strict freezes MLP outputs in the sender pass; relaxed lets them adapt.
    #[arg(long, default_value = "strict")]
    pub mlp: String,
    /// CSV with columns layer,head,r,n.
    #[arg(long)]
    pub out: PathBuf,
    /// Same map as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Write a grouped circuit (heads with |r| above --strong) here.
    #[arg(long)]
    pub classify: Option<PathBuf>,
    /// Attention signatures CSV (computed with --classify).
    #[arg(long)]
    pub signatures: Option<PathBuf>,
    /// Earlier value-receiver sweeps (JSON) used to label previous-token heads.
    #[arg(long, value_delimiter = ',')]
    pub value_sweeps: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    pub strong: f64,
    #[arg(long, default_value_t = 0.01)]
    pub weak: f64,
}

fn cmd_patch_sweep(a: &PatchSweepArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let receiver = parse_node(&a.receiver)?;
    let mode = parse_mlp(&a.mlp)?;
    let model = load(&a.model, art)?;
    let pairs = a.task.pairs(a.pairs, seed)?;
    let map = sweep(&model, &pairs, &receiver, mode)?;
    let mut csv = Vec::new();
    map.write_csv(&mut csv)?;
    art.write(&a.out, &csv)?;
    if let Some(j) = &a.json {
        art.write(j, &serde_json::to_vec_pretty(&map)?)?;
    }
    for e in map.ranked().iter().take(5) {
        println!("L{}.H{}  r = {:+.4}", e.layer, e.head, e.r);
    }
    if let Some(path) = &a.classify {
        let prompts: Vec<_> = pairs.iter().map(|p| (p.x_cont.clone(), p.positions.clone())).collect();
        let sigs = mean_signatures(&model, &prompts)?;
        let value_maps = a
            .value_sweeps
            .iter()
            .map(|p| -> Res<HeadEffectMap> { Ok(serde_json::from_slice(&std::fs::read(p)?)?) })
            .collect::<Res<Vec<_>>>()?;
        let thresholds = Thresholds {
            strong: a.strong,
            weak: a.weak,
        };
        let mut c = classify_heads(&map, &sigs, thresholds, &value_maps)?;
        c.circuit.n_layers = Some(model.config.n_layers);
        c.circuit.n_heads = Some(model.config.n_heads);
        art.write(path, &serde_json::to_vec_pretty(&c.circuit)?)?;
        for e in &c.weak {
            println!("weak: L{}.H{}  r = {:+.4}", e.layer, e.head, e.r);
        }
        if let Some(sp) = &a.signatures {
            let mut buf = Vec::new();
            write_signatures_csv(&sigs, &mut buf)?;
            art.write(sp, &buf)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PathPatchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated sender nodes (`L3.H1` means that head's output).
    #[arg(long)]
    pub senders: String,
    #[arg(long, default_value = "logits")]
    pub receiver: String,
    #[arg(long, default_value = "strict")]
    pub mlp: String,
    /// CSV with columns pair,r,f_patched.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_path_patch(a: &PathPatchArgs, art: &mut Artifacts) -> Res {
    use rayon::prelude::*;
    let seed = require_seed(a.seed, art)?;
    let senders = a.senders.split(',').filter(|s| !s.trim().is_empty()).map(parse_node).collect::<Res<Vec<_>>>()?;
    if senders.is_empty() {
        return Err(usage("--senders is empty"));
    }
    let receiver = parse_node(&a.receiver)?;
    let mode = parse_mlp(&a.mlp)?;
    let model = load(&a.model, art)?;
    let pairs = a.task.pairs(a.pairs, seed)?;
    let rows: Vec<Option<(f64, f64)>> = pairs
        .par_iter()
        .map(|p| -> filab::Result<Option<(f64, f64)>> {
            let runs = PairRuns::new(&model, p)?;
            if runs.is_degenerate() {
                return Ok(None);
            }
            let o = path_patch_runs(&model, p, &runs, &senders, &receiver, mode)?;
            Ok(Some((o.r, o.f_patched)))
        })
        .collect::<filab::Result<_>>()?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["pair", "r", "f_patched"])?;
    let mut sum = 0.0;
    let mut n = 0;
    for (i, row) in rows.iter().enumerate() {
        if let Some((r, f)) = row {
            wtr.write_record([i.to_string(), format!("{r:.9}"), format!("{f:.9}")])?;
            sum += r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(filab::Error::DegeneratePair(0.0).into());
    }
    art.write(&a.out, &wtr.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    println!("mean r = {:+.4} over {n} pairs ({} skipped)", sum / n as f64, rows.len() - n);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub select: HeadSelect,
    /// instance, zero or mean.
    #[arg(long, default_value = "instance")]
    pub mode: String,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Reference prompts for mean ablation.
    #[arg(long, default_value_t = 100)]
    pub bank_n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct AblateOutput {
    heads: Vec<Head>,
    mode: AblationMode,
    full: EvalReport,
    ablated: EvalReport,
}

fn cmd_ablate(a: &AblateArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let mode = parse_mode(&a.mode)?;
    let heads = a.select.required()?;
    let model = load(&a.model, art)?;
    let spec = a.task.spec()?.with_seed(seed);
    let items = eval_items(&spec, a.n, a.task.shots, &Vocab::new())?;
    let bank = bank_for(mode, &model, a.bank_n, a.task.shots, seed)?;
    let full = eval_accuracy_with(&ModelPredictor { model: &model, ablation: None }, &items, a.task.shots)?;
    let pred = ModelPredictor {
        model: &model,
        ablation: Some(DecodeAblation {
            heads: &heads,
            mode,
            bank: bank.as_ref(),
        }),
    };
    let ablated = eval_accuracy_with(&pred, &items, a.task.shots)?;
    report_line("full", &full);
    report_line("ablated", &ablated);
    let out = AblateOutput { heads, mode, full, ablated };
    art.write(&a.out, &serde_json::to_vec_pretty(&out)?)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CircuitEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Circuit JSON file.
    #[arg(long)]
    pub circuit: PathBuf,
    /// Knockout of heads outside the circuit: instance, zero or mean.
    #[arg(long, default_value = "instance")]
    pub policy: String,
    #[arg(long, default_value_t = 100)]
    pub pairs: usize,
    #[arg(long, default_value_t = 100)]
    pub bank_n: usize,
    /// random, greedy or group.
    #[arg(long, default_value = "group")]
    pub completeness: String,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Candidate sets per head in the minimality search (0 skips it).
    #[arg(long, default_value_t = 20)]
    pub minimality_budget: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
    /// Completeness points as CSV (label,f_circuit,f_model).
    #[arg(long)]
    pub completeness_csv: Option<PathBuf>,
}

#[derive(Serialize)]
struct CircuitEvalOutput {
    faithfulness: filab::circuits::Faithfulness,
    completeness: Vec<filab::circuits::CompletenessPoint>,
    minimality: Vec<filab::circuits::Minimality>,
}

fn cmd_circuit_eval(a: &CircuitEvalArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let strategy: CompletenessStrategy = a.completeness.parse().map_err(|e: filab::Error| usage(e.to_string()))?;
    let mode = parse_mode(&a.policy)?;
    let model = load(&a.model, art)?;
    let circuit = Circuit::load(&a.circuit)?;
    let pairs = a.task.pairs(a.pairs, seed)?;
    let policy = match mode {
        AblationMode::Instance => KnockoutPolicy::Instance,
        AblationMode::Zero => KnockoutPolicy::Zero,
        AblationMode::Mean => KnockoutPolicy::Mean(
            bank_for(mode, &model, a.bank_n, a.task.shots, seed)?.expect("mean bank"),
        ),
    };
    let faithfulness = eval_faithfulness(&model, &circuit, &pairs, &policy)?;
    println!("faithfulness {:.2}% over {} pairs", faithfulness.percent, faithfulness.n);
    let mut rng = filab::rng(seed);
    let completeness = if circuit.heads.is_empty() {
        Vec::new()
    } else {
        eval_completeness(&model, &circuit, &pairs, strategy, a.trials, &policy, &mut rng)?
    };
    let minimality = if a.minimality_budget == 0 {
        Vec::new()
    } else {
        circuit
            .heads
            .iter()
            .map(|&v| eval_minimality(&model, &circuit, &pairs, v, a.minimality_budget, &policy))
            .collect::<filab::Result<_>>()?
    };
    if let Some(p) = &a.completeness_csv {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["label", "f_circuit", "f_model"])?;
        for c in &completeness {
            wtr.write_record([c.label.clone(), format!("{:.9}", c.f_circuit), format!("{:.9}", c.f_model)])?;
        }
        art.write(p, &wtr.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?;
    }
    let out = CircuitEvalOutput {
        faithfulness,
        completeness,
        minimality,
    };
    art.write(&a.out, &serde_json::to_vec_pretty(&out)?)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LogitLensArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompt text; `\n` separates examples. Without it a contrast prompt is sampled from --task.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Candidate tokens as characters, comma-separated (default: the ten digits).
    #[arg(long)]
    pub candidates: Option<String>,
    /// Read-out position (default: last token).
    #[arg(long)]
    pub position: Option<usize>,
    /// JSONL with fields layer,token,logit.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_logit_lens(a: &LogitLensArgs, art: &mut Artifacts) -> Res {
    let vocab = Vocab::new();
    let tokens = match (&a.prompt, &a.task) {
        (Some(p), None) => vocab.encode(&p.replace("\\n", "\n"))?,
        (None, Some(t)) => {
            let seed = require_seed(a.seed, art)?;
            let task = TaskArgs {
                task: t.clone(),
                k: None,
                shots: a.shots,
                constraint: None,
                mcqa: None,
            };
            task.pairs(1, seed)?.remove(0).x_cont
        }
        _ => return Err(usage("pass exactly one of --prompt or --task")),
    };
    let candidates: Vec<filab::TokenId> = match &a.candidates {
        None => (0..10).map(|d| vocab.digit(d)).collect(),
        Some(s) => s
            .split(',')
            .map(|c| {
                let mut it = c.chars();
                match (it.next(), it.next()) {
                    (Some(ch), None) => vocab.id(ch).ok_or_else(|| usage(format!("--candidates: {ch:?} is not in the vocabulary"))),
                    _ => Err(usage(format!("--candidates: {c:?} is not one character"))),
                }
            })
            .collect::<Res<_>>()?,
    };
    let model = load(&a.model, art)?;
    let (_, cache) = forward_cached(&model, &tokens)?;
    let pos = a.position.unwrap_or(tokens.len() - 1);
    let lens = logit_lens(&model, &cache, &candidates, pos)?;
    let mut buf = Vec::new();
    write_lens_jsonl(&lens, &candidates, &vocab, &mut buf)?;
    art.write(&a.out, &buf)?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FvHeatmapArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Donor task; each donor contributes head outputs at its graded position.
    #[command(flatten)]
    pub task: TaskArgs,
    #[command(flatten)]
    pub select: HeadSelect,
    #[arg(long, default_value_t = 50)]
    pub donors: usize,
    /// One grid per head instead of a single combined injection.
    #[arg(long)]
    pub per_head: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV grid (per-head grids get `-L<l>.H<h>` inserted before the extension).
    #[arg(long)]
    pub out: PathBuf,
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn cmd_fv_heatmap(a: &FvHeatmapArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let heads = a.select.required()?;
    if heads.is_empty() {
        return Err(usage("the selected head set is empty"));
    }
    let model = load(&a.model, art)?;
    let pairs = a.task.pairs(a.donors, seed)?;
    let donors: Vec<_> = pairs.iter().map(|p| (p.x_cont.clone(), p.answer_pos())).collect();
    let vectors = capture_head_vectors(&model, &heads, &donors)?;
    let vocab = Vocab::new();
    let grids: Vec<(PathBuf, filab::analysis::FvGrid)> = if a.per_head {
        heads
            .iter()
            .zip(&vectors)
            .map(|(&(l, h), v)| {
                fv_heatmap(&model, &[(l, h)], std::slice::from_ref(v), &vocab)
                    .map(|g| (suffixed(&a.out, &format!("-L{l}.H{h}")), g))
            })
            .collect::<filab::Result<_>>()?
    } else {
        vec![(a.out.clone(), fv_heatmap(&model, &heads, &vectors, &vocab)?)]
    };
    for (path, g) in grids {
        let mut buf = Vec::new();
        g.write_csv(&mut buf)?;
        art.write(&path, &buf)?;
        let argmax: Vec<String> = (0..10).map(|x| g.row_argmax(x).to_string()).collect();
        println!("{}: row argmax {}", path.display(), argmax.join(" "));
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Base8TableArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Prompts per case.
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub shots: usize,
    /// Heads for the ablated column.
    #[command(flatten)]
    pub select: HeadSelect,
    #[arg(long, default_value = "instance")]
    pub mode: String,
    #[arg(long, default_value_t = 100)]
    pub bank_n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV table.
    #[arg(long)]
    pub out: PathBuf,
}

fn cmd_base8_table(a: &Base8TableArgs, art: &mut Artifacts) -> Res {
    let seed = require_seed(a.seed, art)?;
    let mode = parse_mode(&a.mode)?;
    let heads = a.select.resolve()?;
    let model = load(&a.model, art)?;
    let bank = bank_for(mode, &model, a.bank_n, a.shots, seed)?;
    let ablation = heads.as_deref().map(|h| TableAblation {
        heads: h,
        mode,
        bank: bank.as_ref(),
    });
    let table = base8_error_table(&model, a.n, a.shots, seed, ablation)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    art.write(&a.out, &buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
