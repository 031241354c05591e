//! Counterfactual task pairs: off-by-k addition, Caesar cipher, base-k
//! addition and shifted multiple-choice QA.
//!
//! Every pair has a *base* side (the standard task) and a *contrast* side
//! (the same prompt with answers transformed by the task's twist). Oracles
//! are exact; sampling is deterministic given the seed.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::tokenizer::{encode_prompt, render_prompt, Example, PositionMap, PromptStyle, TokenId, TokenSeq, Vocab};

/// Cap on rejection-sampling attempts per instance.
pub const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    OffByK,
    CaesarRotK,
    BaseKAdd,
    ShiftedMcqa,
}

impl TaskKind {
    pub fn style(self) -> PromptStyle {
        match self {
            TaskKind::OffByK | TaskKind::BaseKAdd => PromptStyle::Addition,
            TaskKind::CaesarRotK => PromptStyle::Cipher,
            TaskKind::ShiftedMcqa => PromptStyle::Mcqa,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::OffByK => "off-by-k",
            TaskKind::CaesarRotK => "caesar-rot-k",
            TaskKind::BaseKAdd => "base-k-add",
            TaskKind::ShiftedMcqa => "shifted-mcqa",
        })
    }
}

/// Relation between the test answer and the in-context answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    /// No in-context answer equals the test answer.
    AnswerDisjoint,
    None,
    /// At least one in-context answer equals the test answer.
    AnswerOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Offset (off-by-k, caesar, mcqa shift) or radix (base-k).
    pub k: i32,
    /// Inclusive operand range (off-by-k only).
    pub operand_range: (i64, i64),
    pub n_shots: usize,
    pub constraint: Constraint,
    pub rng_seed: u64,
    /// Single-operand prompts (`x=x+k`), the naive-prompt format.
    #[serde(default)]
    pub unary: bool,
}

impl TaskSpec {
    pub fn off_by_k(k: i32, n_shots: usize) -> Self {
        Self {
            kind: TaskKind::OffByK,
            k,
            operand_range: (0, 9),
            n_shots,
            constraint: Constraint::AnswerDisjoint,
            rng_seed: 0,
            unary: false,
        }
    }

    pub fn caesar(k: i32, n_shots: usize) -> Self {
        Self {
            kind: TaskKind::CaesarRotK,
            ..Self::off_by_k(k, n_shots)
        }
    }

    pub fn base_k(base: i32, n_shots: usize) -> Self {
        Self {
            kind: TaskKind::BaseKAdd,
            operand_range: (10, 99),
            ..Self::off_by_k(base, n_shots)
        }
    }

    pub fn shifted_mcqa(k: i32, n_shots: usize) -> Self {
        Self {
            kind: TaskKind::ShiftedMcqa,
            constraint: Constraint::None,
            ..Self::off_by_k(k, n_shots)
        }
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraint = c;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn with_range(mut self, lo: i64, hi: i64) -> Self {
        self.operand_range = (lo, hi);
        self
    }

    pub fn with_unary(mut self, unary: bool) -> Self {
        self.unary = unary;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTask(m));
        if self.unary && self.kind != TaskKind::OffByK {
            return bad("unary prompts exist only for off-by-k".into());
        }
        match self.kind {
            TaskKind::OffByK => {
                let (lo, hi) = self.operand_range;
                if lo < 0 || lo > hi {
                    return bad(format!("operand range [{lo}, {hi}] must satisfy 0 <= lo <= hi"));
                }
                if hi > 1_000_000 {
                    return bad(format!("operand upper bound {hi} too large"));
                }
            }
            TaskKind::BaseKAdd => {
                if !(6..=9).contains(&self.k) {
                    return bad(format!("base {} not in {{6, 7, 8, 9}}", self.k));
                }
            }
            TaskKind::CaesarRotK => {
                if !(-25..=25).contains(&self.k) {
                    return bad(format!("caesar offset {} not in [-25, 25]", self.k));
                }
            }
            TaskKind::ShiftedMcqa => {
                if !(-3..=3).contains(&self.k) {
                    return bad(format!("mcqa shift {} not in [-3, 3]", self.k));
                }
            }
        }
        Ok(())
    }

    /// True when the contrast task equals the base task.
    pub fn is_identity(&self) -> bool {
        match self.kind {
            TaskKind::OffByK | TaskKind::ShiftedMcqa => self.k == 0,
            TaskKind::CaesarRotK => self.k.rem_euclid(26) == 0,
            TaskKind::BaseKAdd => self.k == 10,
        }
    }

    /// Short name such as `off-by-2`, `caesar-2`, `base-8`, `mcqa-1`.
    pub fn name(&self) -> String {
        match self.kind {
            TaskKind::OffByK if self.unary => format!("unary-off-by-{}", self.k),
            TaskKind::OffByK => format!("off-by-{}", self.k),
            TaskKind::CaesarRotK => format!("caesar-{}", self.k),
            TaskKind::BaseKAdd => format!("base-{}", self.k),
            TaskKind::ShiftedMcqa => format!("mcqa-{}", self.k),
        }
    }
}

/// Parses task names: `off-by-K`, `unary-off-by-K`, `caesar[-K]`, `base-K`,
/// `mcqa[-K]`. A missing `K` defaults to 1 (8 for base).
impl FromStr for TaskSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |t: &str| {
            t.parse::<i32>()
                .map_err(|_| Error::InvalidTask(format!("bad offset in task name {s:?}")))
        };
        let spec = if let Some(rest) = s.strip_prefix("unary-off-by-") {
            TaskSpec::off_by_k(num(rest)?, 4).with_unary(true)
        } else if let Some(rest) = s.strip_prefix("off-by-") {
            TaskSpec::off_by_k(num(rest)?, 4)
        } else if s == "caesar" || s == "caesar-rot-k" {
            TaskSpec::caesar(1, 4)
        } else if let Some(rest) = s.strip_prefix("caesar-") {
            TaskSpec::caesar(num(rest)?, 4)
        } else if let Some(rest) = s.strip_prefix("base-") {
            TaskSpec::base_k(num(rest)?, 4)
        } else if s == "mcqa" || s == "shifted-mcqa" {
            TaskSpec::shifted_mcqa(1, 4)
        } else if let Some(rest) = s.strip_prefix("mcqa-") {
            TaskSpec::shifted_mcqa(num(rest)?, 4)
        } else {
            return Err(Error::InvalidTask(format!("unknown task {s:?}")));
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn outside(input: &str, reason: impl Into<String>) -> Error {
    Error::OutsideDomain {
        input: input.to_string(),
        reason: reason.into(),
    }
}

fn parse_int(input: &str, part: &str) -> Result<i64> {
    part.trim()
        .parse::<i64>()
        .map_err(|_| outside(input, format!("{part:?} is not an integer")))
}

/// Shifts a letter cyclically within its case.
pub fn caesar_shift(c: char, k: i32) -> Option<char> {
    let base = if c.is_ascii_lowercase() {
        b'a'
    } else if c.is_ascii_uppercase() {
        b'A'
    } else {
        return None;
    };
    let idx = (c as u8 - base) as i32;
    Some((base + (idx + k).rem_euclid(26) as u8) as char)
}

/// Digits of a non-negative numeral read in `radix`, least significant first.
fn radix_digits(input: &str, numeral: &str, radix: u32) -> Result<Vec<u32>> {
    let numeral = numeral.trim();
    if numeral.is_empty() {
        return Err(outside(input, "empty operand"));
    }
    numeral
        .chars()
        .rev()
        .map(|c| {
            c.to_digit(10)
                .filter(|&d| d < radix)
                .ok_or_else(|| outside(input, format!("digit {c:?} invalid in base {radix}")))
        })
        .collect()
}

fn value_in_radix(digits: &[u32], radix: u32) -> u64 {
    digits
        .iter()
        .rev()
        .fold(0u64, |acc, &d| acc * radix as u64 + d as u64)
}

/// Renders `value` in `radix` (most significant digit first).
pub fn to_radix(mut value: u64, radix: u32) -> String {
    if value == 0 {
        return "0".into();
    }
    let mut out = Vec::new();
    while value > 0 {
        out.push(char::from_digit((value % radix as u64) as u32, 10).expect("radix <= 10"));
        value /= radix as u64;
    }
    out.iter().rev().collect()
}

/// Ground-truth answer of task `kind` with parameter `k` on `input`.
///
/// Inputs: `"a+b"` (or `"a"`) for off-by-k; `"a+b"` numerals for base-k;
/// a single letter for caesar; `"B"` or `"B/4"` (letter / choice count) for mcqa.
pub fn oracle(kind: TaskKind, k: i32, input: &str) -> Result<String> {
    match kind {
        TaskKind::OffByK => {
            let sum = input
                .split('+')
                .map(|p| parse_int(input, p))
                .sum::<Result<i64>>()?;
            Ok((sum + k as i64).to_string())
        }
        TaskKind::CaesarRotK => {
            let mut chars = input.trim().chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => caesar_shift(c, k)
                    .map(String::from)
                    .ok_or_else(|| outside(input, "not an ASCII letter")),
                _ => Err(outside(input, "expected a single letter")),
            }
        }
        TaskKind::BaseKAdd => {
            if !(2..=10).contains(&k) {
                return Err(outside(input, format!("radix {k} not in [2, 10]")));
            }
            let radix = k as u32;
            let parts: Vec<&str> = input.split('+').collect();
            if parts.len() != 2 {
                return Err(outside(input, "expected a+b"));
            }
            let a = value_in_radix(&radix_digits(input, parts[0], radix)?, radix);
            let b = value_in_radix(&radix_digits(input, parts[1], radix)?, radix);
            Ok(to_radix(a + b, radix))
        }
        TaskKind::ShiftedMcqa => {
            let (letter, n) = match input.split_once('/') {
                Some((l, n)) => (
                    l.trim(),
                    n.trim()
                        .parse::<u32>()
                        .map_err(|_| outside(input, "bad choice count"))?,
                ),
                None => (input.trim(), 4),
            };
            if !(1..=26).contains(&n) {
                return Err(outside(input, "choice count must be in [1, 26]"));
            }
            let mut chars = letter.chars();
            let c = match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => c,
                _ => return Err(outside(input, "expected one uppercase choice letter")),
            };
            let idx = (c as u8 - b'A') as u32;
            if idx >= n {
                return Err(outside(input, format!("choice {c} outside {n} choices")));
            }
            let shifted = (idx as i64 + k as i64).rem_euclid(n as i64) as u8;
            Ok(((b'A' + shifted) as char).to_string())
        }
    }
}

/// Which digits Listing-style base-8 addition adjusts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base8Case {
    /// Unit digits sum below 8: the base-10 sum is already correct.
    NoCarry = 1,
    /// Unit digits sum in `[8, 10)`: unit `+2`, eights `+1`.
    CarryBoth = 2,
    /// Unit digits sum of at least 10: unit `+2` only.
    CarryUnit = 3,
}

impl Base8Case {
    pub fn index(self) -> usize {
        self as usize
    }

    pub const ALL: [Base8Case; 3] = [Base8Case::NoCarry, Base8Case::CarryBoth, Base8Case::CarryUnit];
}

/// Two-digit base-8 addition performed as base-10 addition followed by
/// digit adjustments. `a` and `b` are numerals written in decimal notation
/// (`25` means digits 2 and 5). Returns the answer numeral and its case.
pub fn base8_adjusted(a: u32, b: u32) -> Result<(u32, Base8Case)> {
    let input = format!("{a}+{b}");
    for n in [a, b] {
        if !(10..=99).contains(&n) {
            return Err(outside(&input, format!("{n} is not a two-digit numeral")));
        }
        if n % 10 >= 8 || n / 10 >= 8 {
            return Err(outside(&input, format!("{n} has a digit >= 8")));
        }
    }
    let (a0, b0) = (a % 10, b % 10);
    let base8_value = (a / 10 * 8 + a0) + (b / 10 * 8 + b0);
    if a + b > 99 || base8_value >= 64 {
        return Err(outside(&input, "sum is not two digits in both bases"));
    }
    // (1) base-10 addition
    let c = a + b;
    let (mut c0, mut c1) = (c % 10, c / 10);
    // (2) adjustments
    let unit = a0 + b0;
    let case = if unit < 8 {
        Base8Case::NoCarry
    } else if unit < 10 {
        c0 = (c0 + 2) % 10;
        c1 += 1;
        Base8Case::CarryBoth
    } else {
        c0 += 2;
        Base8Case::CarryUnit
    };
    Ok((c1 * 10 + c0, case))
}

/// Every two-digit base-8 pair accepted by [`base8_adjusted`].
pub fn base8_domain() -> Vec<(u32, u32)> {
    let numerals: Vec<u32> = (1..8).flat_map(|t| (0..8).map(move |u| t * 10 + u)).collect();
    let mut out = Vec::new();
    for &a in &numerals {
        for &b in &numerals {
            if base8_adjusted(a, b).is_ok() {
                out.push((a, b));
            }
        }
    }
    out
}

/// One example with both answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub input: String,
    pub base: String,
    pub contrast: String,
}

/// A sampled prompt instance: in-context shots plus the test example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub shots: Vec<Item>,
    pub query: Item,
}

impl TaskInstance {
    fn examples(&self, contrast: bool) -> Vec<Example> {
        let mut ex: Vec<Example> = self
            .shots
            .iter()
            .map(|s| Example::new(s.input.clone(), if contrast { &s.contrast } else { &s.base }))
            .collect();
        ex.push(Example::query(self.query.input.clone()));
        ex
    }

    /// Renders the base or contrast prompt text.
    pub fn render(&self, style: PromptStyle, contrast: bool) -> Result<(String, PositionMap)> {
        render_prompt(&self.examples(contrast), style)
    }
}

/// Checks `constraint` on contrast-side answers.
pub fn satisfies(constraint: Constraint, shots: &[Item], query: &Item) -> bool {
    let hit = shots.iter().any(|s| s.contrast == query.contrast);
    match constraint {
        Constraint::AnswerDisjoint => !hit,
        Constraint::None => true,
        Constraint::AnswerOverlap => hit,
    }
}

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ";

fn sample_item<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<Item> {
    match spec.kind {
        TaskKind::OffByK => {
            let (lo, hi) = spec.operand_range;
            let input = if spec.unary {
                rng.gen_range(lo..=hi).to_string()
            } else {
                format!("{}+{}", rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))
            };
            Ok(Item {
                base: oracle(TaskKind::OffByK, 0, &input)?,
                contrast: oracle(TaskKind::OffByK, spec.k, &input)?,
                input,
            })
        }
        TaskKind::CaesarRotK => {
            let c = LETTERS.as_bytes()[rng.gen_range(0..LETTERS.len())] as char;
            let input = c.to_string();
            Ok(Item {
                base: input.clone(),
                contrast: oracle(TaskKind::CaesarRotK, spec.k, &input)?,
                input,
            })
        }
        TaskKind::BaseKAdd => {
            let radix = spec.k as u32;
            for _ in 0..MAX_ATTEMPTS {
                let numeral = |rng: &mut R| rng.gen_range(1..radix) * 10 + rng.gen_range(0..radix);
                let (a, b) = (numeral(rng), numeral(rng));
                let input = format!("{a}+{b}");
                let base = (a + b).to_string();
                let contrast = oracle(TaskKind::BaseKAdd, spec.k, &input)?;
                if base.len() == 2 && contrast.len() == 2 {
                    return Ok(Item {
                        input,
                        base,
                        contrast,
                    });
                }
            }
            Err(Error::ConstraintUnsatisfiable {
                attempts: MAX_ATTEMPTS,
                reason: "no two-digit base-k sum found".into(),
            })
        }
        TaskKind::ShiftedMcqa => Err(Error::InvalidTask(
            "shifted-mcqa needs question records; use sample_mcqa_task".into(),
        )),
    }
}

/// Samples shots and a test example satisfying `spec.constraint`.
///
/// With `aligned`, every shot's base and contrast answers have equal length
/// so the two prompts stay position-aligned. The test example is drawn
/// first; each shot is then rejection-sampled against it. Attempts across
/// the whole instance are capped at [`MAX_ATTEMPTS`].
pub fn sample_instance<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R, aligned: bool) -> Result<TaskInstance> {
    spec.validate()?;
    let mut attempts = 0usize;
    // an overlapping aligned shot can only match an aligned test answer
    let query = loop {
        let q = sample_item(spec, rng)?;
        attempts += 1;
        let needs_aligned = aligned && spec.constraint == Constraint::AnswerOverlap;
        if !needs_aligned || q.base.len() == q.contrast.len() {
            break q;
        }
        if attempts >= MAX_ATTEMPTS {
            return Err(Error::ConstraintUnsatisfiable {
                attempts: MAX_ATTEMPTS,
                reason: "no aligned test example".into(),
            });
        }
    };
    let mut draw = |rng: &mut R, accept: &dyn Fn(&Item) -> bool| -> Result<Item> {
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::ConstraintUnsatisfiable {
                    attempts: MAX_ATTEMPTS,
                    reason: format!("{:?} for {}", spec.constraint, spec.name()),
                });
            }
            let item = sample_item(spec, rng)?;
            if (!aligned || item.base.len() == item.contrast.len()) && accept(&item) {
                return Ok(item);
            }
        }
    };
    let mut shots = Vec::with_capacity(spec.n_shots);
    match spec.constraint {
        Constraint::AnswerDisjoint => {
            for _ in 0..spec.n_shots {
                shots.push(draw(rng, &|it: &Item| it.contrast != query.contrast)?);
            }
        }
        Constraint::None => {
            for _ in 0..spec.n_shots {
                shots.push(draw(rng, &|_: &Item| true)?);
            }
        }
        Constraint::AnswerOverlap => {
            if spec.n_shots == 0 {
                return Err(Error::ConstraintUnsatisfiable {
                    attempts: 0,
                    reason: "answer-overlap needs at least one shot".into(),
                });
            }
            let forced = rng.gen_range(0..spec.n_shots);
            for i in 0..spec.n_shots {
                if i == forced {
                    shots.push(draw(rng, &|it: &Item| it.contrast == query.contrast)?);
                } else {
                    shots.push(draw(rng, &|_: &Item| true)?);
                }
            }
        }
    }
    Ok(TaskInstance { shots, query })
}

/// Everything needed to reproduce and grade a pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub spec: TaskSpec,
    pub instance: TaskInstance,
    /// Shared prefix of the two test answers, appended to both inputs.
    pub answer_prefix: String,
}

/// Base and contrast prompts that differ only inside in-context answers.
///
/// `y_base`/`y_cont` are the first tokens at which the two test answers
/// differ; any shared answer prefix is already part of both inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub x_base: TokenSeq,
    pub x_cont: TokenSeq,
    pub y_base: TokenId,
    pub y_cont: TokenId,
    pub positions: PositionMap,
    pub meta: PairMeta,
}

impl PromptPair {
    /// Builds a pair from an instance whose shots are aligned.
    pub fn from_instance(vocab: &Vocab, spec: &TaskSpec, instance: TaskInstance) -> Result<Self> {
        let style = spec.kind.style();
        let (base_text, mut positions) = instance.render(style, false)?;
        let (cont_text, mut cont_positions) = instance.render(style, true)?;
        if positions != cont_positions {
            return Err(Error::InvalidTask(
                "base and contrast prompts are not position-aligned".into(),
            ));
        }
        let q = &instance.query;
        let prefix_len = q
            .base
            .chars()
            .zip(q.contrast.chars())
            .take_while(|(a, b)| a == b)
            .count();
        let answer_prefix: String = q.base.chars().take(prefix_len).collect();
        let next = |s: &str| s.chars().nth(prefix_len);
        let (yb, yc) = match (next(&q.base), next(&q.contrast)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidTask(format!(
                    "degenerate pair: answers {:?} and {:?} do not diverge",
                    q.base, q.contrast
                )))
            }
        };
        let x_base = encode_prompt(vocab, &base_text, &mut positions, style, &answer_prefix)?;
        let x_cont = encode_prompt(vocab, &cont_text, &mut cont_positions, style, &answer_prefix)?;
        let tok = |c: char| vocab.id(c).ok_or(Error::UnknownCharacter { ch: c, offset: 0 });
        Ok(Self {
            x_base,
            x_cont,
            y_base: tok(yb)?,
            y_cont: tok(yc)?,
            positions,
            meta: PairMeta {
                spec: spec.clone(),
                instance,
                answer_prefix,
            },
        })
    }

    /// Exchanges the base and contrast sides.
    pub fn swapped(&self) -> Self {
        let mut meta = self.meta.clone();
        for it in meta.instance.shots.iter_mut().chain(std::iter::once(&mut meta.instance.query)) {
            std::mem::swap(&mut it.base, &mut it.contrast);
        }
        Self {
            x_base: self.x_cont.clone(),
            x_cont: self.x_base.clone(),
            y_base: self.y_cont,
            y_cont: self.y_base,
            positions: self.positions.clone(),
            meta,
        }
    }

    /// Position whose next-token logits are graded.
    pub fn answer_pos(&self) -> usize {
        self.positions.answer_pos
    }

    pub fn len(&self) -> usize {
        self.x_base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_base.is_empty()
    }
}

/// Samples one counterfactual pair. Rejects identity tasks (k = 0) and test
/// examples whose two answers coincide.
pub fn sample_task<R: Rng + ?Sized>(spec: &TaskSpec, vocab: &Vocab, rng: &mut R) -> Result<PromptPair> {
    spec.validate()?;
    if spec.is_identity() {
        return Err(Error::InvalidTask(format!(
            "{} makes base and contrast answers identical",
            spec.name()
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let inst = sample_instance(spec, rng, true)?;
        if inst.query.base != inst.query.contrast {
            return PromptPair::from_instance(vocab, spec, inst);
        }
    }
    Err(Error::ConstraintUnsatisfiable {
        attempts: MAX_ATTEMPTS,
        reason: "every test example had identical base and contrast answers".into(),
    })
}

/// Samples `n` pairs from a seeded stream.
pub fn sample_pairs(spec: &TaskSpec, vocab: &Vocab, n: usize) -> Result<Vec<PromptPair>> {
    let mut rng = crate::rng(spec.rng_seed);
    (0..n).map(|_| sample_task(spec, vocab, &mut rng)).collect()
}

/// One multiple-choice question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqaRecord {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: char,
}

impl McqaRecord {
    /// `question\n(A) ...\n(B) ...`
    pub fn render_input(&self) -> String {
        let mut s = self.question.clone();
        for (i, c) in self.choices.iter().enumerate() {
            s.push_str(&format!("\n({}) {}", (b'A' + i as u8) as char, c));
        }
        s
    }
}

/// Reads `question,A,B,C,D,answer` rows (no header, RFC 4180 quoting).
pub fn load_mcqa_reader<R: Read>(reader: R) -> Result<Vec<McqaRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::McqaRow {
            row,
            reason: e.to_string(),
        })?;
        if rec.len() != 6 {
            return Err(Error::McqaRow {
                row,
                reason: format!("expected 6 columns, found {}", rec.len()),
            });
        }
        let choices: Vec<String> = (1..5).map(|j| rec[j].to_string()).collect();
        let letter = rec[5].trim();
        let answer = match letter.chars().collect::<Vec<_>>().as_slice() {
            [c] if ('A'..='D').contains(c) => *c,
            _ => {
                return Err(Error::McqaRow {
                    row,
                    reason: format!("answer {letter:?} outside choices A-D"),
                })
            }
        };
        out.push(McqaRecord {
            question: rec[0].to_string(),
            choices,
            answer,
        });
    }
    Ok(out)
}

pub fn load_mcqa(path: impl AsRef<Path>) -> Result<Vec<McqaRecord>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    load_mcqa_reader(f)
}

/// Samples a shifted-MCQA pair from question records.
pub fn sample_mcqa_task<R: Rng + ?Sized>(
    spec: &TaskSpec,
    records: &[McqaRecord],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<PromptPair> {
    spec.validate()?;
    if spec.kind != TaskKind::ShiftedMcqa {
        return Err(Error::InvalidTask("sample_mcqa_task needs a shifted-mcqa spec".into()));
    }
    if spec.is_identity() {
        return Err(Error::InvalidTask("mcqa shift 0 is degenerate".into()));
    }
    if records.len() < spec.n_shots + 1 {
        return Err(Error::InvalidTask(format!(
            "need {} records, have {}",
            spec.n_shots + 1,
            records.len()
        )));
    }
    let item = |r: &McqaRecord| -> Result<Item> {
        let n = r.choices.len();
        Ok(Item {
            input: r.render_input(),
            base: r.answer.to_string(),
            contrast: oracle(TaskKind::ShiftedMcqa, spec.k, &format!("{}/{n}", r.answer))?,
        })
    };
    for _ in 0..MAX_ATTEMPTS {
        let chosen: Vec<&McqaRecord> = records.choose_multiple(rng, spec.n_shots + 1).collect();
        let (query, shots) = chosen.split_last().expect("at least one record");
        let query = item(query)?;
        let shots = shots.iter().map(|r| item(r)).collect::<Result<Vec<_>>>()?;
        if satisfies(spec.constraint, &shots, &query) {
            return PromptPair::from_instance(vocab, spec, TaskInstance { shots, query });
        }
    }
    Err(Error::ConstraintUnsatisfiable {
        attempts: MAX_ATTEMPTS,
        reason: format!("{:?} over {} records", spec.constraint, records.len()),
    })
}

/// JSONL export row.
#[derive(Debug, Serialize)]
pub struct PairRecord<'a> {
    pub x_base: String,
    pub x_cont: String,
    pub y_base: String,
    pub y_cont: String,
    pub meta: &'a PairMeta,
}

impl PromptPair {
    pub fn record<'a>(&'a self, vocab: &Vocab) -> Result<PairRecord<'a>> {
        Ok(PairRecord {
            x_base: vocab.decode(&self.x_base)?,
            x_cont: vocab.decode(&self.x_cont)?,
            y_base: vocab.name(self.y_base),
            y_cont: vocab.name(self.y_cont),
            meta: &self.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        assert_eq!(oracle(TaskKind::OffByK, 2, "4+3").unwrap(), "9");
        assert_eq!(oracle(TaskKind::CaesarRotK, 2, "c").unwrap(), "e");
        assert_eq!(oracle(TaskKind::CaesarRotK, 0, "q").unwrap(), "q");
        assert_eq!(oracle(TaskKind::CaesarRotK, 2, "z").unwrap(), "b");
        assert_eq!(oracle(TaskKind::CaesarRotK, 2, "Z").unwrap(), "B");
        assert_eq!(oracle(TaskKind::BaseKAdd, 8, "25+16").unwrap(), "43");
        assert_eq!(oracle(TaskKind::BaseKAdd, 8, "13+35").unwrap(), "50");
        assert_eq!(oracle(TaskKind::ShiftedMcqa, 1, "B").unwrap(), "C");
        assert_eq!(oracle(TaskKind::ShiftedMcqa, 1, "D/4").unwrap(), "A");
    }

    #[test]
    fn oracle_domain_errors() {
        assert!(matches!(oracle(TaskKind::BaseKAdd, 8, "28+16"), Err(Error::OutsideDomain { .. })));
        assert!(oracle(TaskKind::CaesarRotK, 1, "ab").is_err());
        assert!(oracle(TaskKind::CaesarRotK, 1, "3").is_err());
        assert!(oracle(TaskKind::ShiftedMcqa, 1, "E/4").is_err());
        assert!(oracle(TaskKind::OffByK, 1, "x+1").is_err());
    }

    #[test]
    fn base8_listing_examples() {
        assert_eq!(base8_adjusted(60, 16).unwrap(), (76, Base8Case::NoCarry));
        assert_eq!(base8_adjusted(13, 35).unwrap(), (50, Base8Case::CarryBoth));
        assert_eq!(base8_adjusted(25, 16).unwrap(), (43, Base8Case::CarryUnit));
        assert!(base8_adjusted(18, 10).is_err());
        assert!(base8_adjusted(7, 10).is_err());
        assert!(base8_adjusted(77, 11).is_err());
    }

    #[test]
    fn off_by_zero_pair_rejected() {
        let v = Vocab::new();
        let mut rng = crate::rng(1);
        assert!(sample_task(&TaskSpec::off_by_k(0, 4), &v, &mut rng).is_err());
    }

    #[test]
    fn sampled_pair_is_disjoint_and_aligned() {
        let v = Vocab::new();
        let mut rng = crate::rng(5);
        for _ in 0..50 {
            let p = sample_task(&TaskSpec::off_by_k(1, 4), &v, &mut rng).unwrap();
            let inst = &p.meta.instance;
            assert!(inst.shots.iter().all(|s| s.contrast != inst.query.contrast));
            assert_eq!(p.x_base.len(), p.x_cont.len());
            assert_ne!(p.y_base, p.y_cont);
            assert_eq!(p.answer_pos(), p.x_base.len() - 1);
        }
    }

    #[test]
    fn shared_answer_prefix_is_appended() {
        let v = Vocab::new();
        let spec = TaskSpec::off_by_k(1, 1);
        let inst = TaskInstance {
            shots: vec![Item { input: "1+1".into(), base: "2".into(), contrast: "3".into() }],
            query: Item { input: "6+6".into(), base: "12".into(), contrast: "13".into() },
        };
        let p = PromptPair::from_instance(&v, &spec, inst).unwrap();
        assert_eq!(v.decode(&p.x_cont).unwrap(), "1+1=3\n6+6=1");
        assert_eq!(v.decode(&p.x_base).unwrap(), "1+1=2\n6+6=1");
        assert_eq!((p.y_base, p.y_cont), (v.digit(2), v.digit(3)));
        assert_eq!(p.positions.final_eq, p.x_base.len() - 2);
    }

    #[test]
    fn mcqa_loader() {
        let good = "what is one,one,two,three,four,A\n\"q, with comma\",w,x,y,z,D\n";
        assert_eq!(load_mcqa_reader(good.as_bytes()).unwrap().len(), 2);
        let bad = "q,a,b,c,d,E\n";
        match load_mcqa_reader(bad.as_bytes()) {
            Err(Error::McqaRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        let short = "q,a,b,A\n";
        assert!(matches!(load_mcqa_reader(short.as_bytes()), Err(Error::McqaRow { .. })));
    }

    #[test]
    fn task_names_parse() {
        let s: TaskSpec = "off-by-2".parse().unwrap();
        assert_eq!((s.kind, s.k), (TaskKind::OffByK, 2));
        let s: TaskSpec = "base-8".parse().unwrap();
        assert_eq!((s.kind, s.k), (TaskKind::BaseKAdd, 8));
        assert!("base-11".parse::<TaskSpec>().is_err());
        assert!("nonsense".parse::<TaskSpec>().is_err());
    }
}
