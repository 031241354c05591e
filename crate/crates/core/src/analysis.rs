//! Read-outs: logit lens, attention-pattern signatures and head grouping,
//! function-vector heatmaps and the base-8 adjustment table.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuits::{Circuit, Head, HeadGroup};
use crate::error::{Error, Result};
use crate::interventions::{AblationMode, HeadEffect, HeadEffectMap, MeanBank};
use crate::model::{forward_cached, forward_intervened, unembed_rows, ActivationCache, InterventionPlan, Model, NodeRef, PatchSources, Positions};
use crate::tasks::{base8_adjusted, base8_domain, sample_instance, Base8Case, Item, TaskInstance, TaskSpec};
use crate::tokenizer::{encode_prompt, PositionMap, TokenId, TokenSeq, Vocab, BOS};
use crate::trainer::{greedy_decode, DecodeAblation, EvalItem, ModelPredictor};

/// Per-layer logits over `candidates` at `position`, decoded from each
/// layer's `resid-post` through the final norm and unembedding.
pub fn logit_lens(model: &Model, cache: &ActivationCache, candidates: &[TokenId], position: usize) -> Result<Vec<Vec<f32>>> {
    let v = model.config.vocab_size;
    if let Some(&t) = candidates.iter().find(|&&t| t as usize >= v) {
        return Err(Error::TokenOutOfRange { id: t, vocab_size: v });
    }
    if position >= cache.len() {
        return Err(Error::PositionOutOfRange {
            position,
            len: cache.len(),
        });
    }
    Ok(cache
        .resid_post
        .iter()
        .map(|r| {
            let row = r.slice(ndarray::s![position..position + 1, ..]);
            let logits = unembed_rows(model, row);
            candidates.iter().map(|&t| logits[[0, t as usize]]).collect()
        })
        .collect())
}

/// One JSON object per `(layer, token, logit)`.
pub fn write_lens_jsonl<W: Write>(lens: &[Vec<f32>], candidates: &[TokenId], vocab: &Vocab, mut w: W) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        layer: usize,
        token: &'a str,
        logit: f32,
    }
    for (layer, row) in lens.iter().enumerate() {
        for (&t, &logit) in candidates.iter().zip(row) {
            let name = vocab.name(t);
            serde_json::to_writer(&mut w, &Row { layer, token: &name, logit })?;
            w.write_all(b"\n").map_err(Error::IoBare)?;
        }
    }
    Ok(())
}

/// Attention-mass summaries of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSignature {
    pub layer: usize,
    pub head: usize,
    /// Mean attention from each answer's first token to its own `=`.
    pub prev_token_score: f64,
    /// Attention mass from the final `=` onto all answer first tokens.
    pub fi_score: f64,
    /// Mean attention of every position to itself and `<bos>`.
    pub consolidation_score: f64,
}

/// Signatures of every head for one cached prompt.
pub fn head_pattern_scores(cache: &ActivationCache, positions: &PositionMap) -> Result<Vec<HeadSignature>> {
    let len = cache.len();
    if positions.n_answered() == 0 {
        return Err(Error::InvalidArgument("signatures need at least one answered example".into()));
    }
    let starts = positions.answer_starts();
    let eqs: Vec<usize> = positions.examples.iter().map(|e| e.eq).collect();
    if positions.final_eq >= len || starts.iter().any(|&s| s >= len) {
        return Err(Error::PositionOutOfRange {
            position: positions.final_eq.max(*starts.iter().max().unwrap_or(&0)),
            len,
        });
    }
    let mut out = Vec::new();
    for (l, heads) in cache.pattern.iter().enumerate() {
        for (h, p) in heads.iter().enumerate() {
            let prev = starts.iter().zip(&eqs).map(|(&s, &e)| p[[s, e]] as f64).sum::<f64>() / starts.len() as f64;
            let fi = starts.iter().map(|&s| p[[positions.final_eq, s]] as f64).sum::<f64>();
            let cons = (0..len)
                .map(|t| if t == 0 { p[[0, 0]] as f64 } else { (p[[t, t]] + p[[t, 0]]) as f64 })
                .sum::<f64>()
                / len as f64;
            out.push(HeadSignature {
                layer: l,
                head: h,
                prev_token_score: prev.clamp(0.0, 1.0),
                fi_score: fi.clamp(0.0, 1.0),
                consolidation_score: cons.clamp(0.0, 1.0),
            });
        }
    }
    Ok(out)
}

/// Signatures averaged over prompts (fixed-order reduction).
pub fn mean_signatures(model: &Model, prompts: &[(TokenSeq, PositionMap)]) -> Result<Vec<HeadSignature>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("signatures need at least one prompt".into()));
    }
    let per: Vec<Vec<HeadSignature>> = prompts
        .par_iter()
        .map(|(t, p)| {
            let (_, cache) = forward_cached(model, t)?;
            head_pattern_scores(&cache, p)
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mut acc = per[0].clone();
    for s in &mut acc {
        s.prev_token_score = 0.0;
        s.fi_score = 0.0;
        s.consolidation_score = 0.0;
    }
    for sigs in &per {
        for (a, s) in acc.iter_mut().zip(sigs) {
            a.prev_token_score += s.prev_token_score;
            a.fi_score += s.fi_score;
            a.consolidation_score += s.consolidation_score;
        }
    }
    for a in &mut acc {
        a.prev_token_score /= n;
        a.fi_score /= n;
        a.consolidation_score /= n;
    }
    Ok(acc)
}

pub fn write_signatures_csv<W: Write>(sigs: &[HeadSignature], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["layer", "head", "prev_token_score", "fi_score", "consolidation_score"])?;
    for s in sigs {
        wtr.write_record([
            s.layer.to_string(),
            s.head.to_string(),
            format!("{:.9}", s.prev_token_score),
            format!("{:.9}", s.fi_score),
            format!("{:.9}", s.consolidation_score),
        ])?;
    }
    wtr.flush().map_err(Error::IoBare)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// `|r|` above which a head joins the circuit.
    pub strong: f64,
    /// Lower edge of the reported weak band.
    pub weak: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { strong: 0.02, weak: 0.01 }
    }
}

/// Circuit with group labels plus heads in the weak band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub circuit: Circuit,
    pub weak: Vec<HeadEffect>,
}

/// Groups heads by effect size and attention signature.
///
/// Heads with `|r| > strong` on `effects` are labeled function-induction or
/// consolidation by the larger signature (ties within 1e-9 go to
/// function-induction). Heads with `|r| > strong` in any of `value_sweeps`
/// whose largest signature is `prev_token_score` are labeled previous-token.
pub fn classify_heads(
    effects: &HeadEffectMap,
    signatures: &[HeadSignature],
    thresholds: Thresholds,
    value_sweeps: &[HeadEffectMap],
) -> Result<Classification> {
    if !(thresholds.strong > 0.0 && thresholds.weak > 0.0) {
        return Err(Error::InvalidArgument("thresholds must be positive".into()));
    }
    let sig = |l: usize, h: usize| signatures.iter().find(|s| s.layer == l && s.head == h);
    let mut fi = Vec::new();
    let mut cons = Vec::new();
    let mut weak = Vec::new();
    for e in &effects.effects {
        let a = e.r.abs();
        if a > thresholds.strong {
            let s = sig(e.layer, e.head)
                .ok_or_else(|| Error::InvalidArgument(format!("no signature for L{}.H{}", e.layer, e.head)))?;
            if s.fi_score >= s.consolidation_score - 1e-9 {
                fi.push((e.layer, e.head));
            } else {
                cons.push((e.layer, e.head));
            }
        } else if a > thresholds.weak {
            weak.push(e.clone());
        }
    }
    let mut pt: Vec<Head> = Vec::new();
    for map in value_sweeps {
        for e in map.effects.iter().filter(|e| e.r.abs() > thresholds.strong) {
            let head = (e.layer, e.head);
            if fi.contains(&head) || cons.contains(&head) || pt.contains(&head) {
                continue;
            }
            if let Some(s) = sig(e.layer, e.head) {
                if s.prev_token_score >= s.fi_score && s.prev_token_score >= s.consolidation_score {
                    pt.push(head);
                }
            }
        }
    }
    let mut circuit = Circuit::new(fi.iter().chain(&cons).chain(&pt).copied());
    for (g, hs) in [
        (HeadGroup::FunctionInduction, fi),
        (HeadGroup::Consolidation, cons),
        (HeadGroup::PreviousToken, pt),
    ] {
        if !hs.is_empty() {
            circuit = circuit.with_group(g, hs);
        }
    }
    Ok(Classification { circuit, weak })
}

/// 10x10 logit changes: row = input digit `x`, column = output digit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvGrid {
    pub cells: Vec<Vec<f64>>,
}

impl FvGrid {
    /// Output digit with the largest change in row `x`.
    pub fn row_argmax(&self, x: usize) -> usize {
        let row = &self.cells[x];
        (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string()];
        header.extend((0..10).map(|d| format!("y{d}")));
        wtr.write_record(&header)?;
        for (x, row) in self.cells.iter().enumerate() {
            let mut rec = vec![x.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:.9}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(Error::IoBare)?;
        Ok(())
    }
}

/// `{x-1}={x-1}\n{x}=`
pub fn naive_prompt(x: i64) -> String {
    format!("{}={}\n{}=", x - 1, x - 1, x)
}

/// Mean output of each head at the graded position of each donor prompt.
pub fn capture_head_vectors(model: &Model, heads: &[Head], donors: &[(TokenSeq, usize)]) -> Result<Vec<Vec<f32>>> {
    if donors.is_empty() {
        return Err(Error::InvalidArgument("at least one donor prompt is required".into()));
    }
    let c = &model.config;
    if let Some((l, h)) = heads.iter().find(|&&(l, h)| l >= c.n_layers || h >= c.n_heads) {
        return Err(Error::InvalidIntervention(format!("head L{l}.H{h} outside model")));
    }
    let caches: Vec<ActivationCache> = donors
        .par_iter()
        .map(|(t, _)| forward_cached(model, t).map(|x| x.1))
        .collect::<Result<_>>()?;
    Ok(heads
        .iter()
        .map(|&(l, h)| {
            let mut v = vec![0f64; c.d_model];
            for (cache, (_, pos)) in caches.iter().zip(donors) {
                for (a, x) in v.iter_mut().zip(cache.head_out[l][h].row(*pos)) {
                    *a += *x as f64;
                }
            }
            v.into_iter().map(|a| (a / donors.len() as f64) as f32).collect()
        })
        .collect())
}

/// Heatmap of digit-logit changes when `vectors[i]` is added to head
/// `heads[i]`'s output at the final position of each naive prompt. All
/// listed heads are injected within the same run.
pub fn fv_heatmap(model: &Model, heads: &[Head], vectors: &[Vec<f32>], vocab: &Vocab) -> Result<FvGrid> {
    if heads.len() != vectors.len() || heads.is_empty() {
        return Err(Error::InvalidArgument("one vector per head is required".into()));
    }
    let digits: Vec<usize> = (0..10).map(|d| vocab.digit(d) as usize).collect();
    let cells = (0..10i64)
        .into_par_iter()
        .map(|x| {
            let tokens = vocab.encode(&naive_prompt(x))?;
            let last = tokens.len() - 1;
            let mut plan = InterventionPlan::new();
            for (&(l, h), v) in heads.iter().zip(vectors) {
                plan = plan.add(NodeRef::head_output(l, h).at(Positions::one(last)), v.clone());
            }
            let (before, _) = forward_cached(model, &tokens)?;
            let (after, _) = forward_intervened(model, &tokens, &plan, PatchSources::none())?;
            Ok(digits
                .iter()
                .map(|&d| after[[last, d]] as f64 - before[[last, d]] as f64)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(FvGrid { cells })
}

/// Expected argmax column for row `x` under a `+k` function: the first digit of `x + k`.
pub fn fv_target(x: i64, k: i64) -> Option<usize> {
    let s = (x + k).to_string();
    s.chars().next().and_then(|c| c.to_digit(10)).map(|d| d as usize)
}

/// How a model's base-8 answer differs from the base-10 sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjustment {
    Neither,
    UnitOnly,
    TensOnly,
    Both,
    /// Output was not a two-digit number.
    Spill,
}

pub fn classify_adjustment(output: &str, base10: u32) -> Adjustment {
    let digits: Vec<u32> = output.chars().filter_map(|c| c.to_digit(10)).collect();
    if digits.len() != 2 || output.chars().count() != 2 {
        return Adjustment::Spill;
    }
    match (digits[1] != base10 % 10, digits[0] != base10 / 10) {
        (false, false) => Adjustment::Neither,
        (true, false) => Adjustment::UnitOnly,
        (false, true) => Adjustment::TensOnly,
        (true, true) => Adjustment::Both,
    }
}

/// Counts per adjustment class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjustmentCounts {
    pub neither: usize,
    pub unit_only: usize,
    pub tens_only: usize,
    pub both: usize,
    pub spill: usize,
}

impl AdjustmentCounts {
    fn add(&mut self, a: Adjustment) {
        match a {
            Adjustment::Neither => self.neither += 1,
            Adjustment::UnitOnly => self.unit_only += 1,
            Adjustment::TensOnly => self.tens_only += 1,
            Adjustment::Both => self.both += 1,
            Adjustment::Spill => self.spill += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.neither + self.unit_only + self.tens_only + self.both + self.spill
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Base8Row {
    pub case: Base8Case,
    pub full: AdjustmentCounts,
    pub ablated: Option<AdjustmentCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Base8Table {
    pub rows: Vec<Base8Row>,
    pub n: usize,
}

impl Base8Table {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "case", "neither", "c0_only", "c1_only", "both", "spill", "ablated_neither", "ablated_spill",
        ])?;
        for r in &self.rows {
            let f = r.full;
            let (an, asp) = r.ablated.map_or((String::new(), String::new()), |a| (a.neither.to_string(), a.spill.to_string()));
            wtr.write_record([
                r.case.index().to_string(),
                f.neither.to_string(),
                f.unit_only.to_string(),
                f.tens_only.to_string(),
                f.both.to_string(),
                f.spill.to_string(),
                an,
                asp,
            ])?;
        }
        wtr.flush().map_err(Error::IoBare)?;
        Ok(())
    }
}

/// Heads ablated for the table's extra column.
#[derive(Debug, Clone, Copy)]
pub struct TableAblation<'a> {
    pub heads: &'a [Head],
    pub mode: AblationMode,
    pub bank: Option<&'a MeanBank>,
}

/// Case-stratified base-8 prompts: `n` per case, `shots` base-8 examples each.
pub fn base8_items<R: Rng + ?Sized>(n: usize, shots: usize, vocab: &Vocab, rng: &mut R) -> Result<Vec<(Base8Case, EvalItem)>> {
    let domain = base8_domain();
    let spec = TaskSpec::base_k(8, shots).with_constraint(crate::tasks::Constraint::None);
    let mut out = Vec::with_capacity(3 * n);
    for case in Base8Case::ALL {
        let pool: Vec<(u32, u32)> = domain
            .iter()
            .copied()
            .filter(|&(a, b)| matches!(base8_adjusted(a, b), Ok((_, c)) if c == case))
            .collect();
        for _ in 0..n {
            let (a, b) = pool[rng.gen_range(0..pool.len())];
            let (ans, _) = base8_adjusted(a, b)?;
            let inst = sample_instance(&spec, rng, true)?;
            let inst = TaskInstance {
                shots: inst.shots,
                query: Item {
                    input: format!("{a}+{b}"),
                    base: (a + b).to_string(),
                    contrast: ans.to_string(),
                },
            };
            let style = spec.kind.style();
            let (bt, mut bp) = inst.render(style, false)?;
            let (ct, mut cp) = inst.render(style, true)?;
            out.push((
                case,
                EvalItem {
                    base: encode_prompt(vocab, &bt, &mut bp, style, "")?,
                    cont: encode_prompt(vocab, &ct, &mut cp, style, "")?,
                    base_answer: inst.query.base,
                    cont_answer: inst.query.contrast,
                },
            ));
        }
    }
    Ok(out)
}

/// Adjustment counts per Listing case, with an optional ablated column.
pub fn base8_error_table(
    model: &Model,
    n: usize,
    shots: usize,
    seed: u64,
    ablation: Option<TableAblation<'_>>,
) -> Result<Base8Table> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let vocab = Vocab::new();
    let mut rng = crate::rng(seed);
    let items = base8_items(n, shots, &vocab, &mut rng)?;
    let run = |ab: Option<DecodeAblation<'_>>| -> Result<Vec<Adjustment>> {
        let pred = ModelPredictor { model, ablation: ab };
        items
            .par_iter()
            .map(|(_, it)| {
                let out = greedy_decode(&pred, it, 3, &vocab)?;
                let base10: u32 = it.base_answer.parse().expect("numeric base answer");
                Ok(classify_adjustment(&out, base10))
            })
            .collect()
    };
    let full = run(None)?;
    let ablated = match ablation {
        Some(a) => Some(run(Some(DecodeAblation {
            heads: a.heads,
            mode: a.mode,
            bank: a.bank,
        }))?),
        None => None,
    };
    let rows = Base8Case::ALL
        .iter()
        .map(|&case| {
            let mut f = AdjustmentCounts::default();
            let mut ab = ablated.as_ref().map(|_| AdjustmentCounts::default());
            for (i, (c, _)) in items.iter().enumerate() {
                if *c == case {
                    f.add(full[i]);
                    if let (Some(acc), Some(v)) = (ab.as_mut(), ablated.as_ref()) {
                        acc.add(v[i]);
                    }
                }
            }
            Base8Row { case, full: f, ablated: ab }
        })
        .collect();
    Ok(Base8Table { rows, n })
}

/// Bank of head outputs over `n` standard-addition prompts at their final `=`.
pub fn standard_addition_bank(model: &Model, n: usize, shots: usize, seed: u64) -> Result<MeanBank> {
    let vocab = Vocab::new();
    let spec = TaskSpec::off_by_k(0, shots)
        .with_constraint(crate::tasks::Constraint::None)
        .with_seed(seed);
    let items = crate::trainer::eval_items(&spec, n, shots, &vocab)?;
    let prompts: Vec<(TokenSeq, usize)> = items.into_iter().map(|it| {
        let p = it.base.len() - 1;
        (it.base, p)
    }).collect();
    MeanBank::build(model, &prompts)
}

/// `<bos>` followed by `tokens`, for hand-built inputs.
pub fn with_bos(tokens: &[TokenId]) -> TokenSeq {
    let mut t = vec![BOS];
    t.extend_from_slice(tokens);
    t
}
