//! Forward pass with full activation capture and intervention plans.
//!
//! Every pass goes through [`forward_intervened`]; the plain and cached
//! variants run it with an empty plan, so all three agree bit-for-bit.
//!
//! Within a layer the sites are visited in computation order:
//! `resid-pre`, per head `head-query`/`head-key`/`head-value`, `attn-pattern`,
//! `head-output`, then `mlp-out` and `resid-post`; `logits` come last. At each
//! site the matching directives run in the order Freeze, Replace, Zero, Add.

use std::fmt;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ops::{causal_pattern, gelu, norm_rows};
use super::Model;
use crate::error::{Error, Result};
use crate::tokenizer::TokenId;

/// Activation site kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    ResidPre,
    ResidPost,
    HeadOutput,
    HeadQuery,
    HeadKey,
    HeadValue,
    AttnPattern,
    MlpOut,
    Logits,
}

impl NodeKind {
    pub fn is_head(self) -> bool {
        matches!(
            self,
            NodeKind::HeadOutput
                | NodeKind::HeadQuery
                | NodeKind::HeadKey
                | NodeKind::HeadValue
                | NodeKind::AttnPattern
        )
    }

    /// Order of the site inside its layer; logits sort after every layer.
    fn stage(self) -> usize {
        match self {
            NodeKind::ResidPre => 0,
            NodeKind::HeadQuery | NodeKind::HeadKey | NodeKind::HeadValue => 1,
            NodeKind::AttnPattern => 2,
            NodeKind::HeadOutput => 3,
            NodeKind::MlpOut => 4,
            NodeKind::ResidPost => 5,
            NodeKind::Logits => 6,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeKind::ResidPre => "resid-pre",
            NodeKind::ResidPost => "resid-post",
            NodeKind::HeadOutput => "head-output",
            NodeKind::HeadQuery => "head-query",
            NodeKind::HeadKey => "head-key",
            NodeKind::HeadValue => "head-value",
            NodeKind::AttnPattern => "attn-pattern",
            NodeKind::MlpOut => "mlp-out",
            NodeKind::Logits => "logits",
        };
        f.write_str(s)
    }
}

/// Which sequence positions a directive touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Positions {
    #[default]
    All,
    Set(Vec<usize>),
}

impl Positions {
    pub fn one(p: usize) -> Self {
        Positions::Set(vec![p])
    }

    /// Concrete positions for a sequence of length `len`.
    pub fn resolve(&self, len: usize) -> Vec<usize> {
        match self {
            Positions::All => (0..len).collect(),
            Positions::Set(v) => v.clone(),
        }
    }

    fn overlaps(&self, other: &Positions) -> bool {
        match (self, other) {
            (Positions::Set(a), Positions::Set(b)) => a.iter().any(|p| b.contains(p)),
            (Positions::Set(a), Positions::All) | (Positions::All, Positions::Set(a)) => !a.is_empty(),
            (Positions::All, Positions::All) => true,
        }
    }
}

/// Address of one activation tensor, optionally restricted to positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRef {
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(default)]
    pub positions: Positions,
}

impl NodeRef {
    fn layer_node(kind: NodeKind, layer: usize) -> Self {
        Self {
            kind,
            layer: Some(layer),
            head: None,
            positions: Positions::All,
        }
    }

    fn head_node(kind: NodeKind, layer: usize, head: usize) -> Self {
        Self {
            kind,
            layer: Some(layer),
            head: Some(head),
            positions: Positions::All,
        }
    }

    pub fn resid_pre(layer: usize) -> Self {
        Self::layer_node(NodeKind::ResidPre, layer)
    }

    pub fn resid_post(layer: usize) -> Self {
        Self::layer_node(NodeKind::ResidPost, layer)
    }

    pub fn mlp_out(layer: usize) -> Self {
        Self::layer_node(NodeKind::MlpOut, layer)
    }

    pub fn head_output(layer: usize, head: usize) -> Self {
        Self::head_node(NodeKind::HeadOutput, layer, head)
    }

    pub fn head_query(layer: usize, head: usize) -> Self {
        Self::head_node(NodeKind::HeadQuery, layer, head)
    }

    pub fn head_key(layer: usize, head: usize) -> Self {
        Self::head_node(NodeKind::HeadKey, layer, head)
    }

    pub fn head_value(layer: usize, head: usize) -> Self {
        Self::head_node(NodeKind::HeadValue, layer, head)
    }

    pub fn attn_pattern(layer: usize, head: usize) -> Self {
        Self::head_node(NodeKind::AttnPattern, layer, head)
    }

    pub fn logits() -> Self {
        Self {
            kind: NodeKind::Logits,
            layer: None,
            head: None,
            positions: Positions::All,
        }
    }

    pub fn at(mut self, positions: Positions) -> Self {
        self.positions = positions;
        self
    }

    /// `(stage-ordered layer, stage)`; logits sort after every layer.
    pub fn order_key(&self, n_layers: usize) -> (usize, usize) {
        (self.layer.unwrap_or(n_layers), self.kind.stage())
    }

    /// True when `self` is computed strictly after `other` in the forward pass.
    pub fn is_downstream_of(&self, other: &NodeRef, n_layers: usize) -> bool {
        self.order_key(n_layers) > other.order_key(n_layers)
    }

    fn same_site(&self, other: &NodeRef) -> bool {
        self.kind == other.kind && self.layer == other.layer && self.head == other.head
    }

    fn matches(&self, kind: NodeKind, layer: Option<usize>, head: Option<usize>) -> bool {
        self.kind == kind && self.layer == layer && self.head == head
    }

    /// Checks indices against `model` and positions against `len`.
    pub fn validate(&self, model: &Model, len: usize) -> Result<()> {
        let c = &model.config;
        let bad = |msg: String| Err(Error::InvalidIntervention(msg));
        match (self.kind, self.layer) {
            (NodeKind::Logits, Some(_)) => return bad("logits take no layer index".into()),
            (NodeKind::Logits, None) => {}
            (_, None) => return bad(format!("{} needs a layer index", self.kind)),
            (_, Some(l)) if l >= c.n_layers => {
                return bad(format!("layer {l} out of range (n_layers {})", c.n_layers))
            }
            _ => {}
        }
        match (self.kind.is_head(), self.head) {
            (true, None) => return bad(format!("{} needs a head index", self.kind)),
            (false, Some(_)) => return bad(format!("{} takes no head index", self.kind)),
            (true, Some(h)) if h >= c.n_heads => {
                return bad(format!("head {h} out of range (n_heads {})", c.n_heads))
            }
            _ => {}
        }
        if let Positions::Set(ps) = &self.positions {
            if let Some(&p) = ps.iter().find(|&&p| p >= len) {
                return Err(Error::PositionOutOfRange { position: p, len });
            }
        }
        Ok(())
    }

    /// Row width of the addressed tensor.
    pub fn width(&self, model: &Model, len: usize) -> usize {
        let c = &model.config;
        match self.kind {
            NodeKind::ResidPre | NodeKind::ResidPost | NodeKind::HeadOutput | NodeKind::MlpOut => {
                c.d_model
            }
            NodeKind::HeadQuery | NodeKind::HeadKey | NodeKind::HeadValue => c.d_head,
            NodeKind::AttnPattern => len,
            NodeKind::Logits => c.vocab_size,
        }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.head) {
            (Some(l), Some(h)) => write!(f, "{}[L{l}.H{h}]", self.kind),
            (Some(l), None) => write!(f, "{}[L{l}]", self.kind),
            _ => write!(f, "{}", self.kind),
        }
    }
}

impl std::str::FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "resid-pre" => NodeKind::ResidPre,
            "resid-post" => NodeKind::ResidPost,
            "head-output" => NodeKind::HeadOutput,
            "head-query" => NodeKind::HeadQuery,
            "head-key" => NodeKind::HeadKey,
            "head-value" => NodeKind::HeadValue,
            "attn-pattern" => NodeKind::AttnPattern,
            "mlp-out" => NodeKind::MlpOut,
            "logits" => NodeKind::Logits,
            _ => return Err(Error::InvalidIntervention(format!("unknown node kind {s:?}"))),
        })
    }
}

/// Parses the `Display` form: `logits`, `mlp-out[L2]`, `head-value[L3.H1]`.
impl std::str::FromStr for NodeRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidIntervention(format!("malformed node {s:?}"));
        let (kind, rest) = match s.split_once('[') {
            Some((k, r)) => (k.parse::<NodeKind>()?, Some(r.strip_suffix(']').ok_or_else(bad)?)),
            None => (s.parse::<NodeKind>()?, None),
        };
        let node = match (kind, rest) {
            (NodeKind::Logits, None) => NodeRef::logits(),
            (k, Some(r)) if k.is_head() => {
                let (l, h) = crate::circuits::parse_head(r)?;
                NodeRef::head_node(k, l, h)
            }
            (k, Some(r)) if k != NodeKind::Logits => {
                let l = r.strip_prefix('L').and_then(|x| x.parse().ok()).ok_or_else(bad)?;
                NodeRef::layer_node(k, l)
            }
            _ => return Err(bad()),
        };
        Ok(node)
    }
}

/// Where a Replace directive takes its values from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// The same site of the donor cache.
    Donor,
    /// Explicit rows, one per selected position.
    Tensor(Vec<Vec<f32>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "op")]
pub enum Directive {
    Replace { site: NodeRef, source: Source },
    Add { site: NodeRef, vector: Vec<f32> },
    Zero { site: NodeRef },
    /// Pins every site to its value in the clean reference run.
    Freeze { sites: Vec<NodeRef> },
}

impl Directive {
    fn rank(&self) -> usize {
        match self {
            Directive::Freeze { .. } => 0,
            Directive::Replace { .. } => 1,
            Directive::Zero { .. } => 2,
            Directive::Add { .. } => 3,
        }
    }
}

/// Ordered list of directives. Within a site, Freeze runs first, then
/// Replace, Zero and Add; directives of equal rank keep their list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InterventionPlan {
    pub directives: Vec<Directive>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn replace_from_donor(mut self, site: NodeRef) -> Self {
        self.directives.push(Directive::Replace {
            site,
            source: Source::Donor,
        });
        self
    }

    pub fn replace_with(mut self, site: NodeRef, rows: Vec<Vec<f32>>) -> Self {
        self.directives.push(Directive::Replace {
            site,
            source: Source::Tensor(rows),
        });
        self
    }

    pub fn add(mut self, site: NodeRef, vector: Vec<f32>) -> Self {
        self.directives.push(Directive::Add { site, vector });
        self
    }

    pub fn zero(mut self, site: NodeRef) -> Self {
        self.directives.push(Directive::Zero { site });
        self
    }

    pub fn freeze(mut self, sites: Vec<NodeRef>) -> Self {
        self.directives.push(Directive::Freeze { sites });
        self
    }

    pub fn push(&mut self, d: Directive) {
        self.directives.push(d);
    }

    fn needs_donor(&self) -> bool {
        self.directives.iter().any(|d| {
            matches!(
                d,
                Directive::Replace {
                    source: Source::Donor,
                    ..
                }
            )
        })
    }

    fn needs_clean(&self) -> bool {
        self.directives
            .iter()
            .any(|d| matches!(d, Directive::Freeze { .. }))
    }

    /// Validates the plan against a model, sequence length and sources.
    pub fn validate(&self, model: &Model, len: usize, sources: PatchSources<'_>) -> Result<()> {
        let mut frozen: Vec<&NodeRef> = Vec::new();
        let mut replaced: Vec<&NodeRef> = Vec::new();
        for d in &self.directives {
            match d {
                Directive::Replace { site, source } => {
                    site.validate(model, len)?;
                    if let Source::Tensor(rows) = source {
                        let n = site.positions.resolve(len).len();
                        let w = site.width(model, len);
                        if rows.len() != n || rows.iter().any(|r| r.len() != w) {
                            return Err(Error::InvalidIntervention(format!(
                                "replacement tensor for {site} must be {n} x {w}"
                            )));
                        }
                    }
                    replaced.push(site);
                }
                Directive::Add { site, vector } => {
                    site.validate(model, len)?;
                    let w = site.width(model, len);
                    if vector.len() != w {
                        return Err(Error::InvalidIntervention(format!(
                            "vector for {site} has length {}, expected {w}",
                            vector.len()
                        )));
                    }
                }
                Directive::Zero { site } => site.validate(model, len)?,
                Directive::Freeze { sites } => {
                    for site in sites {
                        site.validate(model, len)?;
                        frozen.push(site);
                    }
                }
            }
        }
        if let Some(site) = frozen
            .iter()
            .find(|f| {
                replaced
                    .iter()
                    .any(|r| r.same_site(f) && r.positions.overlaps(&f.positions))
            })
        {
            return Err(Error::InvalidIntervention(format!(
                "{site} is both frozen and replaced"
            )));
        }
        for (needed, cache, what) in [
            (self.needs_donor(), sources.donor, "donor"),
            (self.needs_clean(), sources.clean, "clean reference"),
        ] {
            if !needed {
                continue;
            }
            let cache = cache.ok_or_else(|| {
                Error::InvalidIntervention(format!("plan requires a {what} cache"))
            })?;
            if cache.len() != len {
                return Err(Error::DonorLengthMismatch {
                    donor: cache.len(),
                    len,
                });
            }
        }
        Ok(())
    }
}

/// Caches that directives may read from.
#[derive(Debug, Clone, Copy, Default)]
pub struct PatchSources<'a> {
    /// Source for `Replace { source: Donor }`.
    pub donor: Option<&'a ActivationCache>,
    /// Reference values for `Freeze`.
    pub clean: Option<&'a ActivationCache>,
}

impl<'a> PatchSources<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn donor(donor: &'a ActivationCache) -> Self {
        Self {
            donor: Some(donor),
            clean: None,
        }
    }

    pub fn with_clean(mut self, clean: &'a ActivationCache) -> Self {
        self.clean = Some(clean);
        self
    }
}

/// Every activation of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub tokens: Vec<TokenId>,
    /// `[layer]` → `[T, d_model]`
    pub resid_pre: Vec<Array2<f32>>,
    pub resid_post: Vec<Array2<f32>>,
    /// `[layer][head]` → `[T, d_model]`, already projected through the head's
    /// slice of the output matrix.
    pub head_out: Vec<Vec<Array2<f32>>>,
    /// `[layer][head]` → `[T, d_head]`
    pub q: Vec<Vec<Array2<f32>>>,
    pub k: Vec<Vec<Array2<f32>>>,
    pub v: Vec<Vec<Array2<f32>>>,
    /// `[layer][head]` → `[query, key]`
    pub pattern: Vec<Vec<Array2<f32>>>,
    pub mlp_out: Vec<Array2<f32>>,
    /// `[T, vocab]`
    pub logits: Array2<f32>,
}

impl ActivationCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.resid_pre.len()
    }

    /// The full tensor at `(kind, layer, head)`.
    pub fn get(&self, kind: NodeKind, layer: Option<usize>, head: Option<usize>) -> ArrayView2<'_, f32> {
        let l = layer.unwrap_or(0);
        let h = head.unwrap_or(0);
        match kind {
            NodeKind::ResidPre => self.resid_pre[l].view(),
            NodeKind::ResidPost => self.resid_post[l].view(),
            NodeKind::HeadOutput => self.head_out[l][h].view(),
            NodeKind::HeadQuery => self.q[l][h].view(),
            NodeKind::HeadKey => self.k[l][h].view(),
            NodeKind::HeadValue => self.v[l][h].view(),
            NodeKind::AttnPattern => self.pattern[l][h].view(),
            NodeKind::MlpOut => self.mlp_out[l].view(),
            NodeKind::Logits => self.logits.view(),
        }
    }

    pub fn node(&self, node: &NodeRef) -> ArrayView2<'_, f32> {
        self.get(node.kind, node.layer, node.head)
    }

    /// Logits at one position.
    pub fn logits_at(&self, pos: usize) -> ndarray::ArrayView1<'_, f32> {
        self.logits.row(pos)
    }

    /// Largest absolute value of `resid_post - (resid_pre + Σ heads + mlp)`.
    pub fn max_decomposition_error(&self) -> f32 {
        let mut worst = 0f32;
        for l in 0..self.n_layers() {
            let mut sum = self.resid_pre[l].clone();
            for h in &self.head_out[l] {
                sum += h;
            }
            sum += &self.mlp_out[l];
            for (a, b) in sum.iter().zip(self.resid_post[l].iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Every cached tensor, in a fixed order, with its site.
    pub fn tensors(&self) -> Vec<(NodeRef, ArrayView2<'_, f32>)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            out.push((NodeRef::resid_pre(l), self.resid_pre[l].view()));
            for h in 0..self.head_out[l].len() {
                out.push((NodeRef::head_query(l, h), self.q[l][h].view()));
                out.push((NodeRef::head_key(l, h), self.k[l][h].view()));
                out.push((NodeRef::head_value(l, h), self.v[l][h].view()));
                out.push((NodeRef::attn_pattern(l, h), self.pattern[l][h].view()));
                out.push((NodeRef::head_output(l, h), self.head_out[l][h].view()));
            }
            out.push((NodeRef::mlp_out(l), self.mlp_out[l].view()));
            out.push((NodeRef::resid_post(l), self.resid_post[l].view()));
        }
        out.push((NodeRef::logits(), self.logits.view()));
        out
    }
}

/// Next-token logits `[T, vocab]`.
pub fn forward(model: &Model, tokens: &[TokenId]) -> Result<Array2<f32>> {
    Ok(forward_cached(model, tokens)?.0)
}

/// Logits plus every activation.
pub fn forward_cached(model: &Model, tokens: &[TokenId]) -> Result<(Array2<f32>, ActivationCache)> {
    forward_intervened(model, tokens, &InterventionPlan::new(), PatchSources::none())
}

struct Executor<'p, 'c> {
    plan: Vec<&'p Directive>,
    sources: PatchSources<'c>,
}

impl Executor<'_, '_> {
    fn apply(
        &self,
        kind: NodeKind,
        layer: Option<usize>,
        head: Option<usize>,
        t: &mut Array2<f32>,
    ) {
        let len = t.nrows();
        for d in &self.plan {
            match d {
                Directive::Freeze { sites } => {
                    for site in sites.iter().filter(|s| s.matches(kind, layer, head)) {
                        let clean = self.sources.clean.expect("validated").get(kind, layer, head);
                        for p in site.positions.resolve(len) {
                            t.row_mut(p).assign(&clean.row(p));
                        }
                    }
                }
                Directive::Replace { site, source } if site.matches(kind, layer, head) => {
                    let ps = site.positions.resolve(len);
                    match source {
                        Source::Donor => {
                            let donor =
                                self.sources.donor.expect("validated").get(kind, layer, head);
                            for p in ps {
                                t.row_mut(p).assign(&donor.row(p));
                            }
                        }
                        Source::Tensor(rows) => {
                            for (p, row) in ps.into_iter().zip(rows) {
                                t.row_mut(p)
                                    .iter_mut()
                                    .zip(row)
                                    .for_each(|(x, &v)| *x = v);
                            }
                        }
                    }
                }
                Directive::Zero { site } if site.matches(kind, layer, head) => {
                    for p in site.positions.resolve(len) {
                        t.row_mut(p).fill(0.0);
                    }
                }
                Directive::Add { site, vector } if site.matches(kind, layer, head) => {
                    for p in site.positions.resolve(len) {
                        t.row_mut(p)
                            .iter_mut()
                            .zip(vector)
                            .for_each(|(x, &v)| *x += v);
                    }
                }
                _ => {}
            }
        }
    }
}

/// Runs the model under `plan`. With an empty plan this is the plain forward pass.
pub fn forward_intervened(
    model: &Model,
    tokens: &[TokenId],
    plan: &InterventionPlan,
    sources: PatchSources<'_>,
) -> Result<(Array2<f32>, ActivationCache)> {
    model.check_tokens(tokens)?;
    let t_len = tokens.len();
    plan.validate(model, t_len, sources)?;
    let mut ordered: Vec<&Directive> = plan.directives.iter().collect();
    ordered.sort_by_key(|d| d.rank());
    let exec = Executor {
        plan: ordered,
        sources,
    };

    let c = &model.config;
    let dh = c.d_head;
    let mut x = Array2::<f32>::zeros((t_len, c.d_model));
    for (i, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&model.embed.row(tok as usize));
        row += &model.pos.row(i);
    }

    let mut cache = ActivationCache {
        tokens: tokens.to_vec(),
        resid_pre: Vec::with_capacity(c.n_layers),
        resid_post: Vec::with_capacity(c.n_layers),
        head_out: Vec::with_capacity(c.n_layers),
        q: Vec::with_capacity(c.n_layers),
        k: Vec::with_capacity(c.n_layers),
        v: Vec::with_capacity(c.n_layers),
        pattern: Vec::with_capacity(c.n_layers),
        mlp_out: Vec::with_capacity(c.n_layers),
        logits: Array2::zeros((0, 0)),
    };

    for (l, lw) in model.layers.iter().enumerate() {
        let layer = Some(l);
        exec.apply(NodeKind::ResidPre, layer, None, &mut x);
        let (h1, _) = norm_rows(x.view(), lw.norm1.view(), c.norm_kind);
        let q_all = h1.dot(&lw.wq);
        let k_all = h1.dot(&lw.wk);
        let v_all = h1.dot(&lw.wv);

        let mut qs = Vec::with_capacity(c.n_heads);
        let mut ks = Vec::with_capacity(c.n_heads);
        let mut vs = Vec::with_capacity(c.n_heads);
        let mut pats = Vec::with_capacity(c.n_heads);
        let mut outs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let head = Some(h);
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut q = q_all.slice(cols).to_owned();
            let mut k = k_all.slice(cols).to_owned();
            let mut v = v_all.slice(cols).to_owned();
            exec.apply(NodeKind::HeadQuery, layer, head, &mut q);
            exec.apply(NodeKind::HeadKey, layer, head, &mut k);
            exec.apply(NodeKind::HeadValue, layer, head, &mut v);
            let mut pat = causal_pattern(q.view(), k.view());
            exec.apply(NodeKind::AttnPattern, layer, head, &mut pat);
            let z = pat.dot(&v);
            let mut out = z.dot(&lw.wo.slice(s![h * dh..(h + 1) * dh, ..]));
            exec.apply(NodeKind::HeadOutput, layer, head, &mut out);
            qs.push(q);
            ks.push(k);
            vs.push(v);
            pats.push(pat);
            outs.push(out);
        }

        let resid_pre = x.clone();
        for out in &outs {
            x += out;
        }
        let (h2, _) = norm_rows(x.view(), lw.norm2.view(), c.norm_kind);
        let mut act = h2.dot(&lw.w_in);
        act.mapv_inplace(gelu);
        let mut mlp = act.dot(&lw.w_out);
        exec.apply(NodeKind::MlpOut, layer, None, &mut mlp);
        x += &mlp;
        exec.apply(NodeKind::ResidPost, layer, None, &mut x);

        cache.resid_pre.push(resid_pre);
        cache.q.push(qs);
        cache.k.push(ks);
        cache.v.push(vs);
        cache.pattern.push(pats);
        cache.head_out.push(outs);
        cache.mlp_out.push(mlp);
        cache.resid_post.push(x.clone());
    }

    let (hf, _) = norm_rows(x.view(), model.final_norm.view(), c.norm_kind);
    let mut logits = hf.dot(&model.unembed);
    exec.apply(NodeKind::Logits, None, None, &mut logits);
    cache.logits = logits.clone();
    Ok((logits, cache))
}

/// Final-norm + unembed of arbitrary residual rows (logit lens).
pub fn unembed_rows(model: &Model, resid: ArrayView2<f32>) -> Array2<f32> {
    let (hf, _) = norm_rows(resid, model.final_norm.view(), model.config.norm_kind);
    hf.dot(&model.unembed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NormKind, PosKind};
    use crate::tokenizer::BOS;

    #[test]
    fn node_names_round_trip() {
        for n in [
            NodeRef::logits(),
            NodeRef::mlp_out(2),
            NodeRef::resid_pre(0),
            NodeRef::head_value(3, 1),
            NodeRef::attn_pattern(0, 0),
        ] {
            assert_eq!(n.to_string().parse::<NodeRef>().unwrap(), n);
        }
        for bad in ["logits[L1]", "mlp-out", "head-key[L1]", "mlp-out[2]", "nope"] {
            assert!(bad.parse::<NodeRef>().is_err(), "{bad}");
        }
    }

    fn tiny() -> Model {
        let c = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 16,
            vocab_size: 12,
            max_seq: 16,
            norm_kind: NormKind::Rms,
            pos_kind: PosKind::LearnedAbsolute,
            mlp_free: Vec::new(),
        };
        let mut m = Model::init(c, 3).unwrap();
        // larger weights so interventions have visible effects
        for l in &mut m.layers {
            l.wq.mapv_inplace(|v| v * 20.0);
            l.wk.mapv_inplace(|v| v * 20.0);
            l.wv.mapv_inplace(|v| v * 20.0);
            l.wo.mapv_inplace(|v| v * 20.0);
            l.w_in.mapv_inplace(|v| v * 20.0);
            l.w_out.mapv_inplace(|v| v * 20.0);
        }
        m
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let m = Model::zeros(tiny().config).unwrap();
        let logits = forward(&m, &[BOS, 3, 4, 5]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_contract() {
        let m = tiny();
        assert!(matches!(forward(&m, &[BOS, 99]), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(forward(&m, &[3, 4]), Err(Error::MissingBos)));
        assert!(matches!(forward(&m, &[BOS; 17]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(forward(&m, &[]), Err(Error::EmptySequence)));
    }

    #[test]
    fn cache_invariants() {
        let m = tiny();
        let toks = [BOS, 3, 4, 5, 6, 2];
        let (logits, cache) = forward_cached(&m, &toks).unwrap();
        assert_eq!(logits, forward(&m, &toks).unwrap());
        assert!(cache.max_decomposition_error() < 1e-5);
        for l in 0..2 {
            for h in 0..2 {
                let p = &cache.pattern[l][h];
                for i in 0..toks.len() {
                    assert!((p.row(i).sum() - 1.0).abs() < 1e-6);
                    for j in i + 1..toks.len() {
                        assert_eq!(p[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn donor_replacement_of_last_resid_reproduces_donor_logits() {
        let m = tiny();
        let a = [BOS, 3, 4, 5];
        let b = [BOS, 6, 7, 8];
        let (_, base) = forward_cached(&m, &a).unwrap();
        let plan = InterventionPlan::new()
            .replace_from_donor(NodeRef::resid_post(1).at(Positions::one(3)));
        let (logits, _) = forward_intervened(&m, &b, &plan, PatchSources::donor(&base)).unwrap();
        for (x, y) in logits.row(3).iter().zip(base.logits.row(3)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn add_zero_vector_is_identity() {
        let m = tiny();
        let toks = [BOS, 3, 4, 5];
        let plan = InterventionPlan::new().add(NodeRef::resid_pre(1), vec![0.0; 8]);
        let (a, _) = forward_intervened(&m, &toks, &plan, PatchSources::none()).unwrap();
        assert_eq!(a, forward(&m, &toks).unwrap());
    }

    #[test]
    fn freeze_pins_site_to_clean_value() {
        let m = tiny();
        let a = [BOS, 3, 4, 5];
        let b = [BOS, 6, 7, 8];
        let (_, base) = forward_cached(&m, &a).unwrap();
        let (_, clean) = forward_cached(&m, &b).unwrap();
        let plan = InterventionPlan::new()
            .replace_from_donor(NodeRef::head_output(0, 0))
            .freeze(vec![NodeRef::head_output(1, 1)]);
        let (_, got) =
            forward_intervened(&m, &b, &plan, PatchSources::donor(&base).with_clean(&clean))
                .unwrap();
        assert_eq!(got.head_out[1][1], clean.head_out[1][1]);
        assert_eq!(got.head_out[0][0], base.head_out[0][0]);
        assert_ne!(got.head_out[1][0], clean.head_out[1][0]);
    }

    #[test]
    fn plan_validation() {
        let m = tiny();
        let toks = [BOS, 3, 4];
        let (_, c) = forward_cached(&m, &toks).unwrap();
        let (_, other) = forward_cached(&m, &[BOS, 3]).unwrap();
        let cases = vec![
            InterventionPlan::new().zero(NodeRef::head_output(2, 0)),
            InterventionPlan::new().zero(NodeRef::head_output(0, 5)),
            InterventionPlan::new().zero(NodeRef::mlp_out(0).at(Positions::one(3))),
            InterventionPlan::new().add(NodeRef::resid_pre(0), vec![1.0; 3]),
            InterventionPlan::new()
                .replace_from_donor(NodeRef::head_output(0, 0))
                .freeze(vec![NodeRef::head_output(0, 0)]),
        ];
        for plan in cases {
            assert!(forward_intervened(&m, &toks, &plan, PatchSources::donor(&c).with_clean(&c)).is_err());
        }
        let needs_donor = InterventionPlan::new().replace_from_donor(NodeRef::mlp_out(0));
        assert!(forward_intervened(&m, &toks, &needs_donor, PatchSources::none()).is_err());
        assert!(matches!(
            forward_intervened(&m, &toks, &needs_donor, PatchSources::donor(&other)),
            Err(Error::DonorLengthMismatch { .. })
        ));
    }

    #[test]
    fn plan_round_trips_through_json() {
        let plan = InterventionPlan::new()
            .replace_from_donor(NodeRef::head_output(1, 0).at(Positions::Set(vec![2, 3])))
            .add(NodeRef::resid_pre(0), vec![0.5; 8])
            .freeze(vec![NodeRef::mlp_out(0), NodeRef::logits()]);
        let s = serde_json::to_string(&plan).unwrap();
        let back: InterventionPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, plan);
    }
}
