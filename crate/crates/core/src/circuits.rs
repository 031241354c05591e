//! Head circuits and their evaluation: knockout, faithfulness,
//! completeness and minimality.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::interventions::{logit_diff, Ablation, AblationMode, MeanBank, PairRuns, Reference, DEGENERATE_EPS};
use crate::model::Model;
use crate::tasks::PromptPair;

pub type Head = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadGroup {
    Consolidation,
    FunctionInduction,
    PreviousToken,
    Unlabeled,
}

/// Parses `L3.H1`.
pub fn parse_head(s: &str) -> Result<Head> {
    let bad = || Error::InvalidArgument(format!("malformed head {s:?}, expected L<layer>.H<head>"));
    let (l, h) = s.trim().split_once('.').ok_or_else(bad)?;
    let l = l.strip_prefix('L').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
    let h = h.strip_prefix('H').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
    Ok((l, h))
}

/// Parses a comma-separated head list such as `L3.H1,L2.H0`.
pub fn parse_heads(s: &str) -> Result<Vec<Head>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(parse_head).collect()
}

/// A set of attention heads with optional group labels.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Circuit {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    pub heads: Vec<Head>,
    #[serde(default)]
    pub groups: BTreeMap<HeadGroup, Vec<Head>>,
}

impl Circuit {
    pub fn new(heads: impl IntoIterator<Item = Head>) -> Self {
        let set: BTreeSet<Head> = heads.into_iter().collect();
        Self {
            heads: set.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Every head of `model`.
    pub fn all_heads(model: &Model) -> Self {
        let c = &model.config;
        Self::new((0..c.n_layers).flat_map(|l| (0..c.n_heads).map(move |h| (l, h))))
    }

    pub fn with_group(mut self, group: HeadGroup, heads: Vec<Head>) -> Self {
        for h in &heads {
            if !self.heads.contains(h) {
                self.heads.push(*h);
            }
        }
        self.heads.sort_unstable();
        self.groups.insert(group, heads);
        self
    }

    pub fn contains(&self, head: Head) -> bool {
        self.heads.contains(&head)
    }

    pub fn group(&self, g: HeadGroup) -> &[Head] {
        self.groups.get(&g).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Structural checks: no duplicate heads; every labeled head is a member
    /// and carries one label.
    pub fn check(&self) -> Result<()> {
        let set: BTreeSet<Head> = self.heads.iter().copied().collect();
        if set.len() != self.heads.len() {
            return Err(Error::InvalidCircuit("duplicate head".into()));
        }
        let mut seen = BTreeSet::new();
        for (g, hs) in &self.groups {
            for h in hs {
                if !set.contains(h) {
                    return Err(Error::InvalidCircuit(format!("{g:?} head L{}.H{} is not a member", h.0, h.1)));
                }
                if !seen.insert(*h) {
                    return Err(Error::InvalidCircuit(format!("head L{}.H{} has two labels", h.0, h.1)));
                }
            }
        }
        if let (Some(l), Some(n)) = (self.n_layers, self.n_heads) {
            self.check_bounds(l, n)?;
        }
        Ok(())
    }

    fn check_bounds(&self, n_layers: usize, n_heads: usize) -> Result<()> {
        match self.heads.iter().find(|&&(l, h)| l >= n_layers || h >= n_heads) {
            Some((l, h)) => Err(Error::InvalidCircuit(format!(
                "head L{l}.H{h} outside a {n_layers}x{n_heads} model"
            ))),
            None => Ok(()),
        }
    }

    /// Structural checks plus bounds against `model`.
    pub fn validate(&self, model: &Model) -> Result<()> {
        self.check()?;
        self.check_bounds(model.config.n_layers, model.config.n_heads)
    }

    /// Heads of `model` outside the circuit.
    pub fn complement(&self, model: &Model) -> Vec<Head> {
        let c = &model.config;
        (0..c.n_layers)
            .flat_map(|l| (0..c.n_heads).map(move |h| (l, h)))
            .filter(|h| !self.contains(*h))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_json(&bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let c: Circuit = serde_json::from_slice(bytes)?;
        c.check()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(io_err(path))
    }
}

/// How heads outside a circuit are knocked out.
#[derive(Debug, Clone, PartialEq)]
pub enum KnockoutPolicy {
    /// Head outputs copied from the pair's `x_base` run.
    Instance,
    Zero,
    Mean(MeanBank),
}

impl Default for KnockoutPolicy {
    fn default() -> Self {
        Self::Instance
    }
}

impl KnockoutPolicy {
    pub fn mode(&self) -> AblationMode {
        match self {
            Self::Instance => AblationMode::Instance,
            Self::Zero => AblationMode::Zero,
            Self::Mean(_) => AblationMode::Mean,
        }
    }
}

/// Which prompt of a pair is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Base,
    Contrast,
}

/// `F` on one side of a pair with `knocked` heads ablated under `policy`.
pub fn f_with_knockout(
    model: &Model,
    pair: &PromptPair,
    runs: &PairRuns,
    side: Side,
    knocked: &[Head],
    policy: &KnockoutPolicy,
) -> Result<f64> {
    let tokens = match side {
        Side::Base => &pair.x_base,
        Side::Contrast => &pair.x_cont,
    };
    if knocked.is_empty() {
        let cache = match side {
            Side::Base => &runs.base,
            Side::Contrast => &runs.cont,
        };
        return logit_diff(cache.logits_at(pair.answer_pos()), pair.y_base, pair.y_cont);
    }
    let reference = match policy {
        KnockoutPolicy::Instance => Reference::Donor(&runs.base),
        KnockoutPolicy::Zero => Reference::None,
        KnockoutPolicy::Mean(bank) => Reference::Bank(bank),
    };
    let ab = Ablation::new(knocked, policy.mode(), reference);
    let (logits, _) = ab.run_at(model, tokens, &[pair.answer_pos()])?;
    logit_diff(logits.row(pair.answer_pos()), pair.y_base, pair.y_cont)
}

/// `F(C, x)`: every head outside the circuit knocked out.
pub fn eval_f(
    model: &Model,
    circuit: &Circuit,
    pair: &PromptPair,
    side: Side,
    policy: &KnockoutPolicy,
) -> Result<f64> {
    circuit.validate(model)?;
    let runs = PairRuns::new(model, pair)?;
    f_with_knockout(model, pair, &runs, side, &circuit.complement(model), policy)
}

/// `(F(M,x_base) - F(C,x_cont)) / (F(M,x_base) - F(M,x_cont)) * 100`.
pub fn faithfulness_from(f_base: f64, f_cont: f64, f_circuit: f64) -> Result<f64> {
    let denom = f_base - f_cont;
    if denom.abs() < DEGENERATE_EPS {
        return Err(Error::DegeneratePair(denom.abs()));
    }
    Ok((f_base - f_circuit) / denom * 100.0)
}

/// Mean faithfulness over non-degenerate pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub percent: f64,
    pub n: usize,
    pub skipped: usize,
}

/// Clean runs for every non-degenerate pair, in input order.
pub struct PairSet<'a> {
    pub pairs: Vec<(&'a PromptPair, PairRuns)>,
    pub skipped: usize,
}

impl<'a> PairSet<'a> {
    pub fn new(model: &Model, pairs: &'a [PromptPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("at least one pair is required".into()));
        }
        let runs: Vec<PairRuns> = pairs.par_iter().map(|p| PairRuns::new(model, p)).collect::<Result<_>>()?;
        let live: Vec<(&PromptPair, PairRuns)> =
            pairs.iter().zip(runs).filter(|(_, r)| !r.is_degenerate()).collect();
        let skipped = pairs.len() - live.len();
        if live.is_empty() {
            return Err(Error::DegeneratePair(0.0));
        }
        Ok(Self { pairs: live, skipped })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Per-pair `F` with `knocked` heads ablated.
    pub fn f_values(&self, model: &Model, side: Side, knocked: &[Head], policy: &KnockoutPolicy) -> Result<Vec<f64>> {
        self.pairs
            .par_iter()
            .map(|(p, r)| f_with_knockout(model, p, r, side, knocked, policy))
            .collect()
    }

    /// Mean `F` (fixed-order sum).
    pub fn mean_f(&self, model: &Model, side: Side, knocked: &[Head], policy: &KnockoutPolicy) -> Result<f64> {
        let v = self.f_values(model, side, knocked, policy)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Mean of `F(M,x_cont) - F(M,x_base)`.
    pub fn mean_gap(&self) -> f64 {
        self.pairs.iter().map(|(_, r)| r.f_cont - r.f_base).sum::<f64>() / self.len() as f64
    }
}

pub fn eval_faithfulness(
    model: &Model,
    circuit: &Circuit,
    pairs: &[PromptPair],
    policy: &KnockoutPolicy,
) -> Result<Faithfulness> {
    circuit.validate(model)?;
    let set = PairSet::new(model, pairs)?;
    let knocked = circuit.complement(model);
    let fc = set.f_values(model, Side::Contrast, &knocked, policy)?;
    let mut sum = 0.0;
    for ((_, r), f) in set.pairs.iter().zip(&fc) {
        sum += faithfulness_from(r.f_base, r.f_cont, *f)?;
    }
    Ok(Faithfulness {
        percent: sum / set.len() as f64,
        n: set.len(),
        skipped: set.skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletenessStrategy {
    Random,
    Greedy,
    Group,
}

impl std::str::FromStr for CompletenessStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "greedy" => Ok(Self::Greedy),
            "group" => Ok(Self::Group),
            _ => Err(Error::InvalidArgument(format!("unknown completeness strategy {s:?}"))),
        }
    }
}

/// One completeness point: mean `F(C\K, x_cont)` and `F(M\K, x_cont)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletenessPoint {
    pub label: String,
    pub k: Vec<Head>,
    pub f_circuit: f64,
    pub f_model: f64,
}

fn completeness_point(
    model: &Model,
    set: &PairSet<'_>,
    circuit: &Circuit,
    k: Vec<Head>,
    label: String,
    policy: &KnockoutPolicy,
) -> Result<CompletenessPoint> {
    let mut knocked_c = circuit.complement(model);
    knocked_c.extend(k.iter().copied());
    knocked_c.sort_unstable();
    knocked_c.dedup();
    Ok(CompletenessPoint {
        f_circuit: set.mean_f(model, Side::Contrast, &knocked_c, policy)?,
        f_model: set.mean_f(model, Side::Contrast, &k, policy)?,
        label,
        k,
    })
}

fn label_of(k: &[Head]) -> String {
    if k.is_empty() {
        return "empty".into();
    }
    k.iter().map(|(l, h)| format!("L{l}.H{h}")).collect::<Vec<_>>().join("+")
}

/// Completeness points. The first point is always `K = ∅`.
///
/// `random` draws `trials` subsets (size uniform in `1..=|C|`); `greedy`
/// grows `K` by the head that maximises `|F(C\K) - F(M\K)|` for up to
/// `trials` steps; `group` emits one point per labeled group.
pub fn eval_completeness<R: Rng + ?Sized>(
    model: &Model,
    circuit: &Circuit,
    pairs: &[PromptPair],
    strategy: CompletenessStrategy,
    trials: usize,
    policy: &KnockoutPolicy,
    rng: &mut R,
) -> Result<Vec<CompletenessPoint>> {
    circuit.validate(model)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if circuit.heads.is_empty() {
        return Err(Error::InvalidCircuit("completeness needs a nonempty circuit".into()));
    }
    let set = PairSet::new(model, pairs)?;
    let mut out = vec![completeness_point(model, &set, circuit, Vec::new(), "empty".into(), policy)?];
    match strategy {
        CompletenessStrategy::Random => {
            for _ in 0..trials {
                let size = rng.gen_range(1..=circuit.heads.len());
                let mut k: Vec<Head> = circuit.heads.choose_multiple(rng, size).copied().collect();
                k.sort_unstable();
                let label = label_of(&k);
                out.push(completeness_point(model, &set, circuit, k, label, policy)?);
            }
        }
        CompletenessStrategy::Greedy => {
            let mut k: Vec<Head> = Vec::new();
            for _ in 0..trials.min(circuit.heads.len()) {
                let mut best: Option<CompletenessPoint> = None;
                for &cand in circuit.heads.iter().filter(|h| !k.contains(h)) {
                    let mut kk = k.clone();
                    kk.push(cand);
                    kk.sort_unstable();
                    let label = label_of(&kk);
                    let p = completeness_point(model, &set, circuit, kk, label, policy)?;
                    let gap = (p.f_circuit - p.f_model).abs();
                    if best.as_ref().map_or(true, |b| gap > (b.f_circuit - b.f_model).abs()) {
                        best = Some(p);
                    }
                }
                let Some(b) = best else { break };
                k = b.k.clone();
                out.push(b);
            }
        }
        CompletenessStrategy::Group => {
            for (g, hs) in &circuit.groups {
                let mut k = hs.clone();
                k.sort_unstable();
                let label = serde_json::to_value(g)?.as_str().unwrap_or("group").to_string();
                out.push(completeness_point(model, &set, circuit, k, label, policy)?);
            }
        }
    }
    Ok(out)
}

/// Largest knockout effect of one head found by the minimality search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimality {
    pub head: Head,
    pub k: Vec<Head>,
    /// `|F(C\(K∪{v})) - F(C\K)|`
    pub score: f64,
    /// `score` as a percentage of `|F(M,x_cont) - F(M,x_base)|`.
    pub percent: f64,
    /// Candidate sets evaluated.
    pub evaluated: usize,
}

/// Cap on `|K|` in the minimality search.
pub const MINIMALITY_MAX_K: usize = 4;

/// Greedy search for the `K ⊆ C\{v}` that maximises the knockout effect of `v`.
pub fn eval_minimality(
    model: &Model,
    circuit: &Circuit,
    pairs: &[PromptPair],
    v: Head,
    budget: usize,
    policy: &KnockoutPolicy,
) -> Result<Minimality> {
    circuit.validate(model)?;
    if !circuit.contains(v) {
        return Err(Error::InvalidCircuit(format!("head L{}.H{} is not in the circuit", v.0, v.1)));
    }
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let set = PairSet::new(model, pairs)?;
    let outside = circuit.complement(model);
    let f_circuit_minus = |k: &[Head]| -> Result<f64> {
        let mut knocked = outside.clone();
        knocked.extend_from_slice(k);
        knocked.sort_unstable();
        set.mean_f(model, Side::Contrast, &knocked, policy)
    };
    let score = |k: &[Head]| -> Result<f64> {
        let mut kv = k.to_vec();
        kv.push(v);
        Ok((f_circuit_minus(&kv)? - f_circuit_minus(k)?).abs())
    };
    let mut k: Vec<Head> = Vec::new();
    let mut best = (Vec::new(), score(&k)?);
    let mut evaluated = 1;
    let others: Vec<Head> = circuit.heads.iter().copied().filter(|&h| h != v).collect();
    'grow: while k.len() < MINIMALITY_MAX_K {
        let mut step: Option<(Head, f64)> = None;
        for &u in others.iter().filter(|u| !k.contains(u)) {
            if evaluated >= budget {
                break 'grow;
            }
            let mut kk = k.clone();
            kk.push(u);
            let s = score(&kk)?;
            evaluated += 1;
            if step.map_or(true, |(_, b)| s > b) {
                step = Some((u, s));
            }
        }
        let Some((u, s)) = step else { break };
        k.push(u);
        if s > best.1 {
            let mut sorted = k.clone();
            sorted.sort_unstable();
            best = (sorted, s);
        }
    }
    let gap = set.mean_gap().abs();
    Ok(Minimality {
        head: v,
        percent: if gap < DEGENERATE_EPS { f64::NAN } else { best.1 / gap * 100.0 },
        k: best.0,
        score: best.1,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn faithfulness_on_reference_constants() {
        let f = faithfulness_from(7.17, -1.26, 0.56).unwrap();
        assert!((f - 78.4).abs() < 0.05, "{f}");
        assert_eq!(faithfulness_from(7.17, -1.26, -1.26).unwrap(), 100.0);
        assert_eq!(faithfulness_from(7.17, -1.26, 7.17).unwrap(), 0.0);
        assert!(faithfulness_from(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn circuit_json_and_checks() {
        let c = Circuit::new([(1, 2), (0, 3)]).with_group(HeadGroup::FunctionInduction, vec![(1, 2)]);
        let json = serde_json::to_vec(&c).unwrap();
        assert_eq!(Circuit::from_json(&json).unwrap(), c);
        let s = std::str::from_utf8(&json).unwrap();
        assert!(s.contains("\"heads\":[[0,3],[1,2]]"), "{s}");
        assert!(s.contains("\"function-induction\""));
        let bad = br#"{"heads": [[0, 1]], "groups": {"previous-token": [[0, 2]]}}"#;
        assert!(Circuit::from_json(bad).is_err());
        let twice = br#"{"heads": [[0, 1]], "groups": {"previous-token": [[0, 1]], "consolidation": [[0, 1]]}}"#;
        assert!(Circuit::from_json(twice).is_err());
    }

    #[test]
    fn head_lists_parse() {
        assert_eq!(parse_heads("L3.H1, L0.H2").unwrap(), vec![(3, 1), (0, 2)]);
        assert!(parse_head("3.1").is_err());
        assert!(parse_head("L3H1").is_err());
    }

    #[test]
    fn reference_fixtures_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/circuits");
        for (name, fi) in [("gemma-2-9b", 6), ("llama-3-8b", 3), ("mistral-v0.1-7b", 7)] {
            let c = Circuit::load(dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(c.group(HeadGroup::FunctionInduction).len(), fi, "{name}");
        }
    }
}
