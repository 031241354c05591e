//! Greedy-decoding accuracy harness with base / contrast / other buckets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_dataset, Mixture};
use crate::error::{Error, Result};
use crate::interventions::{Ablation, AblationMode, MeanBank, Reference};
use crate::model::{forward, forward_cached, Model};
use crate::tasks::{sample_instance, TaskKind, TaskSpec};
use crate::tokenizer::{encode_prompt, TokenId, TokenSeq, Vocab};

/// One graded prompt: the contrast prompt, its base twin, and both answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub cont: TokenSeq,
    pub base: TokenSeq,
    pub base_answer: String,
    pub cont_answer: String,
}

/// Produces the next token of `item.cont ++ generated`.
pub trait Predictor: Sync {
    fn next_token(&self, item: &EvalItem, generated: &[TokenId]) -> Result<TokenId>;
}

/// Heads ablated during decoding.
#[derive(Debug, Clone, Copy)]
pub struct DecodeAblation<'a> {
    pub heads: &'a [(usize, usize)],
    pub mode: AblationMode,
    /// Required for mean mode.
    pub bank: Option<&'a MeanBank>,
}

/// Greedy next-token prediction, optionally with heads ablated.
///
/// Instance ablation takes head outputs from the base prompt extended by the
/// same generated tokens; mean ablation writes at the graded position and
/// every generated position.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub ablation: Option<DecodeAblation<'a>>,
}

fn argmax(row: ndarray::ArrayView1<f32>) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

impl Predictor for ModelPredictor<'_> {
    fn next_token(&self, item: &EvalItem, generated: &[TokenId]) -> Result<TokenId> {
        let mut tokens = item.cont.clone();
        tokens.extend_from_slice(generated);
        let last = tokens.len() - 1;
        let logits = match self.ablation {
            None => forward(self.model, &tokens)?,
            Some(ab) => {
                let mean_positions: Vec<usize> = (item.cont.len() - 1..tokens.len()).collect();
                match ab.mode {
                    AblationMode::Instance => {
                        let mut donor_tokens = item.base.clone();
                        donor_tokens.extend_from_slice(generated);
                        let (_, donor) = forward_cached(self.model, &donor_tokens)?;
                        Ablation::new(ab.heads, ab.mode, Reference::Donor(&donor))
                            .run_at(self.model, &tokens, &mean_positions)?
                            .0
                    }
                    AblationMode::Zero => Ablation::new(ab.heads, ab.mode, Reference::None)
                        .run_at(self.model, &tokens, &mean_positions)?
                        .0,
                    AblationMode::Mean => {
                        let bank = ab
                            .bank
                            .ok_or_else(|| Error::InvalidArgument("mean ablation needs a bank".into()))?;
                        Ablation::new(ab.heads, ab.mode, Reference::Bank(bank))
                            .run_at(self.model, &tokens, &mean_positions)?
                            .0
                    }
                }
            }
        };
        Ok(argmax(logits.row(last)))
    }
}

fn is_answer_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '-'
}

/// Decodes up to `max_new` answer characters, stopping at the first token
/// that cannot be part of an answer.
pub fn greedy_decode(pred: &dyn Predictor, item: &EvalItem, max_new: usize, vocab: &Vocab) -> Result<String> {
    let mut generated = Vec::new();
    let mut out = String::new();
    for _ in 0..max_new {
        let t = pred.next_token(item, &generated)?;
        match vocab.symbol(t) {
            Some(c) if is_answer_char(c) => {
                out.push(c);
                generated.push(t);
            }
            _ => break,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    Base,
    Contrast,
    Other,
}

/// Accuracy on contrast prompts, bucketed by which oracle the output matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_acc: f64,
    pub contrast_acc: f64,
    pub other_frac: f64,
    pub n: usize,
    pub shots: usize,
}

/// Matches each answer against the output's prefix of the same length; the
/// loss never trains a terminator, so trailing characters are ignored.
pub fn bucket(output: &str, item: &EvalItem) -> Bucket {
    let matches = |a: &str| output.get(..a.len()) == Some(a);
    if matches(&item.cont_answer) {
        Bucket::Contrast
    } else if matches(&item.base_answer) {
        Bucket::Base
    } else {
        Bucket::Other
    }
}

/// Contrast prompts (and their base twins) sampled from `spec` with `shots` shots.
pub fn eval_items(spec: &TaskSpec, n: usize, shots: usize, vocab: &Vocab) -> Result<Vec<EvalItem>> {
    if spec.kind == TaskKind::ShiftedMcqa {
        return Err(Error::InvalidTask("shifted-mcqa evaluation needs question records".into()));
    }
    let mut spec = spec.clone();
    spec.n_shots = shots;
    let mut rng = crate::rng(spec.rng_seed);
    let style = spec.kind.style();
    (0..n)
        .map(|_| {
            let inst = sample_instance(&spec, &mut rng, true)?;
            let (bt, mut bp) = inst.render(style, false)?;
            let (ct, mut cp) = inst.render(style, true)?;
            Ok(EvalItem {
                base: encode_prompt(vocab, &bt, &mut bp, style, "")?,
                cont: encode_prompt(vocab, &ct, &mut cp, style, "")?,
                base_answer: inst.query.base,
                cont_answer: inst.query.contrast,
            })
        })
        .collect()
}

/// Buckets the predictor's greedy outputs over `items`.
pub fn eval_accuracy_with(pred: &dyn Predictor, items: &[EvalItem], shots: usize) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one item".into()));
    }
    let vocab = Vocab::new();
    let buckets: Vec<Bucket> = items
        .par_iter()
        .map(|it| {
            let max_new = it.base_answer.len().max(it.cont_answer.len());
            greedy_decode(pred, it, max_new, &vocab).map(|out| bucket(&out, it))
        })
        .collect::<Result<_>>()?;
    let n = items.len();
    let count = |b: Bucket| buckets.iter().filter(|&&x| x == b).count();
    let (nb, nc) = (count(Bucket::Base), count(Bucket::Contrast));
    Ok(EvalReport {
        base_acc: nb as f64 / n as f64,
        contrast_acc: nc as f64 / n as f64,
        other_frac: (n - nb - nc) as f64 / n as f64,
        n,
        shots,
    })
}

/// Greedy accuracy of the plain model on `n` contrast prompts from `spec`.
pub fn eval_accuracy(model: &Model, spec: &TaskSpec, n: usize, shots: usize) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let items = eval_items(spec, n, shots, &Vocab::new())?;
    eval_accuracy_with(&ModelPredictor { model, ablation: None }, &items, shots)
}

/// Exact-match accuracy of the final answer on training-distribution sequences.
pub fn in_distribution_accuracy(model: &Model, mixture: &Mixture, n: usize, seed: u64) -> Result<f64> {
    let seqs = build_dataset(mixture, n, seed, model.config.max_seq)?;
    let items: Vec<EvalItem> = seqs
        .iter()
        .map(|s| EvalItem {
            cont: s.tokens[..s.prompt_len].to_vec(),
            base: s.tokens[..s.prompt_len].to_vec(),
            base_answer: s.answer.clone(),
            cont_answer: s.answer.clone(),
        })
        .collect();
    Ok(eval_accuracy_with(&ModelPredictor { model, ablation: None }, &items, 0)?.contrast_acc)
}
