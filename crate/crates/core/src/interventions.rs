//! Causal interventions on counterfactual pairs: activation patching, path
//! patching, head ablation, vector injection and per-head sweeps.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{
    forward_cached, forward_intervened, ActivationCache, InterventionPlan, Model, NodeKind, NodeRef,
    PatchSources, Positions,
};
use crate::tasks::PromptPair;
use crate::tokenizer::{TokenId, TokenSeq};

/// Denominators smaller than this make a pair degenerate.
pub const DEGENERATE_EPS: f64 = 1e-6;

/// `logit[y_base] - logit[y_cont]`.
pub fn logit_diff(logits: ndarray::ArrayView1<f32>, y_base: TokenId, y_cont: TokenId) -> Result<f64> {
    if y_base == y_cont {
        return Err(Error::InvalidArgument("y_base equals y_cont".into()));
    }
    let n = logits.len();
    for y in [y_base, y_cont] {
        if y as usize >= n {
            return Err(Error::TokenOutOfRange {
                id: y,
                vocab_size: n,
            });
        }
    }
    Ok(logits[y_base as usize] as f64 - logits[y_cont as usize] as f64)
}

/// Relative change `(f_patched - f_cont) / (f_cont - f_base)`.
pub fn relative_logit_diff(f_patched: f64, f_cont: f64, f_base: f64) -> Result<f64> {
    let denom = f_cont - f_base;
    if denom.abs() < DEGENERATE_EPS {
        return Err(Error::DegeneratePair(denom.abs()));
    }
    Ok((f_patched - f_cont) / denom)
}

/// Clean runs of both sides of a pair.
#[derive(Debug, Clone)]
pub struct PairRuns {
    pub base: ActivationCache,
    pub cont: ActivationCache,
    /// `F(M, x_base)`
    pub f_base: f64,
    /// `F(M, x_cont)`
    pub f_cont: f64,
}

impl PairRuns {
    pub fn new(model: &Model, pair: &PromptPair) -> Result<Self> {
        if pair.x_base.len() != pair.x_cont.len() {
            return Err(Error::DonorLengthMismatch {
                donor: pair.x_base.len(),
                len: pair.x_cont.len(),
            });
        }
        let (_, base) = forward_cached(model, &pair.x_base)?;
        let (_, cont) = forward_cached(model, &pair.x_cont)?;
        let pos = pair.answer_pos();
        let f_base = logit_diff(base.logits_at(pos), pair.y_base, pair.y_cont)?;
        let f_cont = logit_diff(cont.logits_at(pos), pair.y_base, pair.y_cont)?;
        Ok(Self {
            base,
            cont,
            f_base,
            f_cont,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        (self.f_cont - self.f_base).abs() < DEGENERATE_EPS
    }

    fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::DegeneratePair((self.f_cont - self.f_base).abs()));
        }
        Ok(())
    }
}

/// Runs `x_cont` with `site` copied from `donor` and returns
/// `r' = (F(M', x_cont) - F(M, x_base)) / (F(M, x_cont) - F(M, x_base))`.
pub fn activation_patch_from(
    model: &Model,
    pair: &PromptPair,
    runs: &PairRuns,
    site: &NodeRef,
    donor: &ActivationCache,
) -> Result<f64> {
    runs.check()?;
    let plan = InterventionPlan::new().replace_from_donor(site.clone());
    let (logits, _) = forward_intervened(model, &pair.x_cont, &plan, PatchSources::donor(donor))?;
    let f = logit_diff(logits.row(pair.answer_pos()), pair.y_base, pair.y_cont)?;
    Ok((f - runs.f_base) / (runs.f_cont - runs.f_base))
}

/// Activation patching with the `x_base` run as donor. Returns `r' = 1 + r`.
pub fn activation_patch(model: &Model, pair: &PromptPair, site: &NodeRef) -> Result<f64> {
    let runs = PairRuns::new(model, pair)?;
    activation_patch_from(model, pair, &runs, site, &runs.base)
}

/// `r'` for `resid-pre` at every `(layer, position)`.
pub fn resid_patch_grid(model: &Model, pair: &PromptPair) -> Result<Vec<Vec<f64>>> {
    let runs = PairRuns::new(model, pair)?;
    runs.check()?;
    (0..model.config.n_layers)
        .map(|l| {
            (0..pair.len())
                .map(|p| {
                    let site = NodeRef::resid_pre(l).at(Positions::one(p));
                    activation_patch_from(model, pair, &runs, &site, &runs.base)
                })
                .collect()
        })
        .collect()
}

/// How pass C treats MLP outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MlpMode {
    /// MLP outputs frozen to the clean contrast run.
    #[default]
    Strict,
    /// MLP outputs recomputed.
    Relaxed,
}

/// Result of one path-patching query.
#[derive(Debug, Clone)]
pub struct PathPatchOutcome {
    pub r: f64,
    /// `F(M', x_cont)` after pass D.
    pub f_patched: f64,
    /// Receiver activation recorded in pass C (selected positions only).
    pub receiver_value: Array2<f32>,
}

/// The receiver's default positions: the answer position for logits and
/// position-local sites, every position for keys and values.
pub fn receiver_positions(receiver: &NodeRef, pair: &PromptPair) -> NodeRef {
    let mut r = receiver.clone();
    if r.positions == Positions::All
        && !matches!(r.kind, NodeKind::HeadKey | NodeKind::HeadValue | NodeKind::AttnPattern)
    {
        r.positions = Positions::one(pair.answer_pos());
    }
    r
}

/// Freeze list for pass C: every head output and (strict) every MLP output,
/// minus the sender positions.
fn freeze_sites(model: &Model, senders: &[NodeRef], len: usize, mode: MlpMode) -> Vec<NodeRef> {
    let c = &model.config;
    let mut nodes = Vec::new();
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            nodes.push(NodeRef::head_output(l, h));
        }
        if mode == MlpMode::Strict {
            nodes.push(NodeRef::mlp_out(l));
        }
    }
    let mut out = Vec::new();
    for node in nodes {
        let hits: Vec<&NodeRef> = senders
            .iter()
            .filter(|s| s.kind == node.kind && s.layer == node.layer && s.head == node.head)
            .collect();
        if hits.is_empty() {
            out.push(node);
            continue;
        }
        let mut covered = vec![false; len];
        for s in hits {
            for p in s.positions.resolve(len) {
                covered[p] = true;
            }
        }
        let rest: Vec<usize> = (0..len).filter(|&p| !covered[p]).collect();
        if !rest.is_empty() {
            out.push(node.at(Positions::Set(rest)));
        }
    }
    out
}

/// Path patching with precomputed clean runs.
///
/// Pass C reruns `x_cont` with the senders taken from the `x_base` run while
/// every other head output (and, in strict mode, every MLP output) is frozen
/// to its `x_cont` value; the receiver is recorded. Pass D reruns `x_cont`
/// with only the receiver replaced by that recording.
pub fn path_patch_runs(
    model: &Model,
    pair: &PromptPair,
    runs: &PairRuns,
    senders: &[NodeRef],
    receiver: &NodeRef,
    mode: MlpMode,
) -> Result<PathPatchOutcome> {
    runs.check()?;
    let n_layers = model.config.n_layers;
    let len = pair.len();
    let receiver = receiver_positions(receiver, pair);
    receiver.validate(model, len)?;
    for s in senders {
        s.validate(model, len)?;
        if !receiver.is_downstream_of(s, n_layers) {
            return Err(Error::InvalidIntervention(format!(
                "receiver {receiver} is not downstream of sender {s}"
            )));
        }
    }

    let mut plan_c = InterventionPlan::new().freeze(freeze_sites(model, senders, len, mode));
    for s in senders {
        plan_c = plan_c.replace_from_donor(s.clone());
    }
    let sources = PatchSources::donor(&runs.base).with_clean(&runs.cont);
    let (logits_c, cache_c) = forward_intervened(model, &pair.x_cont, &plan_c, sources)?;

    let rows = receiver.positions.resolve(len);
    let full = cache_c.node(&receiver);
    let receiver_value = full.select(ndarray::Axis(0), &rows);
    let pos = pair.answer_pos();

    let f_patched = if receiver.kind == NodeKind::Logits {
        if rows.contains(&pos) {
            logit_diff(logits_c.row(pos), pair.y_base, pair.y_cont)?
        } else {
            runs.f_cont
        }
    } else {
        let tensor: Vec<Vec<f32>> = receiver_value.rows().into_iter().map(|r| r.to_vec()).collect();
        let plan_d = InterventionPlan::new().replace_with(receiver.clone(), tensor);
        let (logits_d, _) = forward_intervened(model, &pair.x_cont, &plan_d, PatchSources::none())?;
        logit_diff(logits_d.row(pos), pair.y_base, pair.y_cont)?
    };
    Ok(PathPatchOutcome {
        r: relative_logit_diff(f_patched, runs.f_cont, runs.f_base)?,
        f_patched,
        receiver_value,
    })
}

/// `r` for the given senders and receiver (strict MLP handling).
pub fn path_patch(model: &Model, pair: &PromptPair, senders: &[NodeRef], receiver: &NodeRef) -> Result<f64> {
    let runs = PairRuns::new(model, pair)?;
    Ok(path_patch_runs(model, pair, &runs, senders, receiver, MlpMode::Strict)?.r)
}

/// Every node that writes into the residual stream: the embedding, every
/// head output and every MLP output.
pub fn all_writers(model: &Model) -> Vec<NodeRef> {
    let c = &model.config;
    let mut out = vec![NodeRef::resid_pre(0)];
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            out.push(NodeRef::head_output(l, h));
        }
        out.push(NodeRef::mlp_out(l));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Head output copied from a donor run at every position.
    Instance,
    Zero,
    /// Head output replaced by a reference average at the graded position.
    Mean,
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Self::Instance),
            "zero" => Ok(Self::Zero),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::InvalidArgument(format!("unknown ablation mode {s:?}"))),
        }
    }
}

/// Per-head mean outputs over reference prompts, taken at each prompt's
/// graded position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanBank {
    /// `[layer][head]` → `d_model` vector
    pub means: Vec<Vec<Vec<f32>>>,
    pub n: usize,
}

impl MeanBank {
    /// Averages head outputs at `pos` over `(tokens, pos)` prompts, in order.
    pub fn build(model: &Model, prompts: &[(TokenSeq, usize)]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("mean bank needs at least one prompt".into()));
        }
        let c = &model.config;
        let caches = prompts
            .par_iter()
            .map(|(t, p)| {
                if *p >= t.len() {
                    return Err(Error::PositionOutOfRange {
                        position: *p,
                        len: t.len(),
                    });
                }
                forward_cached(model, t).map(|(_, cache)| cache)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acc = vec![vec![vec![0f64; c.d_model]; c.n_heads]; c.n_layers];
        for (cache, (_, p)) in caches.iter().zip(prompts) {
            for (l, layer) in acc.iter_mut().enumerate() {
                for (h, sum) in layer.iter_mut().enumerate() {
                    for (s, &v) in sum.iter_mut().zip(cache.head_out[l][h].row(*p)) {
                        *s += v as f64;
                    }
                }
            }
        }
        let n = prompts.len() as f64;
        let means = acc
            .into_iter()
            .map(|layer| {
                layer
                    .into_iter()
                    .map(|v| v.into_iter().map(|s| (s / n) as f32).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            means,
            n: prompts.len(),
        })
    }
}

/// What an ablation reads its replacement values from.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    None,
    Donor(&'a ActivationCache),
    Bank(&'a MeanBank),
}

/// Head ablation specification.
#[derive(Debug, Clone, Copy)]
pub struct Ablation<'a> {
    pub heads: &'a [(usize, usize)],
    pub mode: AblationMode,
    pub reference: Reference<'a>,
}

impl<'a> Ablation<'a> {
    pub fn new(heads: &'a [(usize, usize)], mode: AblationMode, reference: Reference<'a>) -> Self {
        Self {
            heads,
            mode,
            reference,
        }
    }

    /// Plan for a sequence of length `len`; mean mode writes at `mean_positions`.
    pub fn plan(&self, model: &Model, len: usize, mean_positions: &[usize]) -> Result<InterventionPlan> {
        let c = &model.config;
        for &(l, h) in self.heads {
            if l >= c.n_layers || h >= c.n_heads {
                return Err(Error::InvalidIntervention(format!("head L{l}.H{h} outside model")));
            }
        }
        let mut plan = InterventionPlan::new();
        match (self.mode, self.reference) {
            (AblationMode::Instance, Reference::Donor(d)) => {
                if d.len() != len {
                    return Err(Error::DonorLengthMismatch {
                        donor: d.len(),
                        len,
                    });
                }
                for &(l, h) in self.heads {
                    plan = plan.replace_from_donor(NodeRef::head_output(l, h));
                }
            }
            (AblationMode::Zero, _) => {
                for &(l, h) in self.heads {
                    plan = plan.zero(NodeRef::head_output(l, h));
                }
            }
            (AblationMode::Mean, Reference::Bank(bank)) => {
                if bank.means.len() != c.n_layers || bank.means.iter().any(|l| l.len() != c.n_heads) {
                    return Err(Error::InvalidArgument("mean bank built for another model".into()));
                }
                for &(l, h) in self.heads {
                    let site = NodeRef::head_output(l, h).at(Positions::Set(mean_positions.to_vec()));
                    let rows = vec![bank.means[l][h].clone(); mean_positions.len()];
                    plan = plan.replace_with(site, rows);
                }
            }
            (mode, _) => {
                return Err(Error::InvalidArgument(format!(
                    "{mode:?} ablation is missing its reference"
                )))
            }
        }
        Ok(plan)
    }

    fn sources(&self) -> PatchSources<'a> {
        match self.reference {
            Reference::Donor(d) if self.mode == AblationMode::Instance => PatchSources::donor(d),
            _ => PatchSources::none(),
        }
    }

    /// Runs `tokens` with the heads ablated; mean mode writes at `mean_positions`.
    pub fn run_at(
        &self,
        model: &Model,
        tokens: &[TokenId],
        mean_positions: &[usize],
    ) -> Result<(Array2<f32>, ActivationCache)> {
        model.check_tokens(tokens)?;
        let plan = self.plan(model, tokens.len(), mean_positions)?;
        forward_intervened(model, tokens, &plan, self.sources())
    }

    /// Runs `tokens` with mean ablation at the last position.
    pub fn run(&self, model: &Model, tokens: &[TokenId]) -> Result<(Array2<f32>, ActivationCache)> {
        let last = tokens.len().saturating_sub(1);
        self.run_at(model, tokens, &[last])
    }
}

/// Logits of `tokens` with `heads` ablated. Mean mode writes at the final position.
pub fn ablate_heads(
    model: &Model,
    tokens: &[TokenId],
    heads: &[(usize, usize)],
    mode: AblationMode,
    reference: Reference<'_>,
) -> Result<Array2<f32>> {
    Ok(Ablation::new(heads, mode, reference).run(model, tokens)?.0)
}

/// Logits after adding `vector` to the residual stream entering `layer` at `position`.
pub fn inject_vector(
    model: &Model,
    tokens: &[TokenId],
    layer: usize,
    position: usize,
    vector: &[f32],
) -> Result<Array2<f32>> {
    if vector.len() != model.config.d_model {
        return Err(Error::InvalidIntervention(format!(
            "vector has length {}, expected d_model {}",
            vector.len(),
            model.config.d_model
        )));
    }
    let site = NodeRef::resid_pre(layer).at(Positions::one(position));
    let plan = InterventionPlan::new().add(site, vector.to_vec());
    Ok(forward_intervened(model, tokens, &plan, PatchSources::none())?.0)
}

/// Mean `r` of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEffect {
    pub layer: usize,
    pub head: usize,
    pub r: f64,
    pub n: usize,
}

/// Per-head mean relative logit difference from a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEffectMap {
    pub receiver: String,
    pub effects: Vec<HeadEffect>,
    /// Degenerate pairs skipped.
    pub skipped: usize,
}

impl HeadEffectMap {
    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadEffect> {
        self.effects.iter().find(|e| e.layer == layer && e.head == head)
    }

    /// Heads sorted by decreasing `|r|`.
    pub fn ranked(&self) -> Vec<&HeadEffect> {
        let mut v: Vec<&HeadEffect> = self.effects.iter().collect();
        v.sort_by(|a, b| b.r.abs().total_cmp(&a.r.abs()).then((a.layer, a.head).cmp(&(b.layer, b.head))));
        v
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["layer", "head", "r", "n"])?;
        for e in &self.effects {
            wtr.write_record([e.layer.to_string(), e.head.to_string(), format!("{:.9}", e.r), e.n.to_string()])?;
        }
        wtr.flush().map_err(Error::IoBare)?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        self.write_csv(f)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(io_err(path))
    }
}

/// Path-patches every head output upstream of `receiver` as a single sender,
/// averaging `r` over non-degenerate pairs. Results are independent of the
/// thread schedule: per-pair values are reduced in input order.
pub fn sweep(model: &Model, pairs: &[PromptPair], receiver: &NodeRef, mode: MlpMode) -> Result<HeadEffectMap> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one pair".into()));
    }
    let c = &model.config;
    let n_layers = c.n_layers;
    let heads: Vec<(usize, usize)> = (0..n_layers)
        .flat_map(|l| (0..c.n_heads).map(move |h| (l, h)))
        .filter(|&(l, h)| receiver.is_downstream_of(&NodeRef::head_output(l, h), n_layers))
        .collect();
    if heads.is_empty() {
        return Err(Error::InvalidIntervention(format!("no head lies upstream of {receiver}")));
    }
    let runs: Vec<Option<PairRuns>> = pairs
        .par_iter()
        .map(|p| PairRuns::new(model, p).map(|r| (!r.is_degenerate()).then_some(r)))
        .collect::<Result<_>>()?;
    let live: Vec<(usize, &PairRuns)> = runs
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
        .collect();
    let skipped = pairs.len() - live.len();
    if live.is_empty() {
        return Err(Error::DegeneratePair(0.0));
    }
    let jobs: Vec<(usize, usize)> = (0..live.len())
        .flat_map(|p| (0..heads.len()).map(move |h| (p, h)))
        .collect();
    let rs: Vec<f64> = jobs
        .par_iter()
        .map(|&(p, h)| {
            let (i, runs) = live[p];
            let (l, hh) = heads[h];
            path_patch_runs(model, &pairs[i], runs, &[NodeRef::head_output(l, hh)], receiver, mode).map(|o| o.r)
        })
        .collect::<Result<_>>()?;
    let n = live.len();
    let effects = heads
        .iter()
        .enumerate()
        .map(|(hi, &(layer, head))| {
            let sum: f64 = (0..n).map(|p| rs[p * heads.len() + hi]).sum();
            HeadEffect {
                layer,
                head,
                r: sum / n as f64,
                n,
            }
        })
        .collect();
    Ok(HeadEffectMap {
        receiver: receiver.to_string(),
        effects,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_difference_on_reference_constants() {
        let r = relative_logit_diff(0.56, -1.26, 7.17).unwrap();
        assert!((r * 100.0 - -21.59).abs() < 0.01, "{r}");
        assert!(matches!(relative_logit_diff(1.0, 2.0, 2.0), Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn logit_diff_definition() {
        let l = ndarray::array![0.0f32, 5.0, 3.0];
        assert_eq!(logit_diff(l.view(), 1, 2).unwrap(), 2.0);
        assert!(logit_diff(l.view(), 1, 1).is_err());
        assert!(logit_diff(l.view(), 1, 7).is_err());
    }

    #[test]
    fn freeze_list_excludes_sender_positions() {
        let m = Model::zeros(crate::model::ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 4,
            d_head: 2,
            d_mlp: 4,
            vocab_size: 73,
            max_seq: 8,
            norm_kind: crate::model::NormKind::Rms,
            pos_kind: crate::model::PosKind::LearnedAbsolute,
            mlp_free: Vec::new(),
        })
        .unwrap();
        let senders = [NodeRef::head_output(0, 1).at(Positions::Set(vec![0, 2]))];
        let f = freeze_sites(&m, &senders, 3, MlpMode::Strict);
        assert_eq!(f.len(), 3);
        assert_eq!(f[1], NodeRef::head_output(0, 1).at(Positions::Set(vec![1])));
        let f = freeze_sites(&m, &[NodeRef::head_output(0, 0)], 3, MlpMode::Relaxed);
        assert_eq!(f, vec![NodeRef::head_output(0, 1)]);
    }

    #[test]
    fn mean_requires_bank() {
        let m = Model::init(crate::model::ModelConfig::toy(73), 0).unwrap();
        let toks = [0u32, 2, 12, 3, 13];
        assert!(ablate_heads(&m, &toks, &[(0, 0)], AblationMode::Mean, Reference::None).is_err());
        assert!(ablate_heads(&m, &toks, &[(0, 0)], AblationMode::Instance, Reference::None).is_err());
        assert!(ablate_heads(&m, &toks, &[(9, 0)], AblationMode::Zero, Reference::None).is_err());
    }
}
