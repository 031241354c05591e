//! Fixed character-level vocabulary, prompt rendering and position bookkeeping.
//!
//! Every character of a rendered prompt is one token, so numbers are always
//! split into digits. Token index `i` in an encoded sequence corresponds to
//! character offset `i - 1` of the text (index 0 is `<bos>`).

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

pub const BOS: TokenId = 0;
pub const PAD: TokenId = 1;
/// Id of the digit `0`; digits `0..=9` occupy `DIGIT_ZERO..DIGIT_ZERO + 10`.
pub const DIGIT_ZERO: TokenId = 2;

const PUNCT: &[char] = &['+', '=', '\n', ' ', '-', '>', '(', ')', ':'];

/// Symbol table. Ids are fixed: `<bos>`, `<pad>`, digits, punctuation,
/// lowercase then uppercase letters.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut symbols = Vec::new();
        symbols.extend('0'..='9');
        symbols.extend_from_slice(PUNCT);
        symbols.extend('a'..='z');
        symbols.extend('A'..='Z');
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as TokenId + DIGIT_ZERO))
            .collect();
        Self { symbols, index }
    }

    /// Number of ids, including the two special tokens.
    pub fn len(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> Option<TokenId> {
        self.index.get(&c).copied()
    }

    /// Character for a non-special id.
    pub fn symbol(&self, id: TokenId) -> Option<char> {
        id.checked_sub(DIGIT_ZERO)
            .and_then(|i| self.symbols.get(i as usize))
            .copied()
    }

    pub fn digit(&self, d: u32) -> TokenId {
        assert!(d < 10, "digit {d} out of range");
        DIGIT_ZERO + d
    }

    /// Inverse of [`Vocab::digit`].
    pub fn digit_value(&self, id: TokenId) -> Option<u32> {
        (DIGIT_ZERO..DIGIT_ZERO + 10)
            .contains(&id)
            .then(|| id - DIGIT_ZERO)
    }

    /// Human-readable name of any id, special tokens included.
    pub fn name(&self, id: TokenId) -> String {
        match id {
            BOS => "<bos>".into(),
            PAD => "<pad>".into(),
            _ => match self.symbol(id) {
                Some('\n') => "\\n".into(),
                Some(c) => c.to_string(),
                None => format!("<unk:{id}>"),
            },
        }
    }

    /// Encodes `text`, prepending exactly one `<bos>`.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut out = Vec::with_capacity(text.chars().count() + 1);
        out.push(BOS);
        out.extend(self.encode_raw(text)?);
        Ok(out)
    }

    /// Encodes without the leading `<bos>`.
    pub fn encode_raw(&self, text: &str) -> Result<TokenSeq> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| self.id(ch).ok_or(Error::UnknownCharacter { ch, offset }))
            .collect()
    }

    /// Decodes ids to text. Special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut s = String::with_capacity(ids.len());
        for &id in ids {
            match id {
                BOS | PAD => {}
                _ => s.push(self.symbol(id).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab_size: self.len(),
                })?),
            }
        }
        Ok(s)
    }

    /// `(id, name)` rows for documentation dumps.
    pub fn table(&self) -> Vec<(TokenId, String)> {
        (0..self.len() as TokenId).map(|i| (i, self.name(i))).collect()
    }
}

/// Half-open token span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Token positions of one rendered example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePositions {
    /// Operand spans (`a`, `b` for addition; the letter for cipher; empty for mcqa).
    pub operands: Vec<Span>,
    /// The answer-eliciting token (`=`, the `>` of `->`, the `:` of `Answer:`).
    pub eq: usize,
    /// Graded answer tokens, lead-in excluded. `None` for the query.
    pub answer: Option<Span>,
}

/// Where every operand, `=` and answer token sits in an encoded prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    /// Answered in-context examples, in order.
    pub examples: Vec<ExamplePositions>,
    /// The unanswered test example.
    pub query: ExamplePositions,
    /// Position of the final answer-eliciting token.
    pub final_eq: usize,
    /// Last position of the model input; its next-token logits are graded.
    pub answer_pos: usize,
}

impl PositionMap {
    pub fn n_answered(&self) -> usize {
        self.examples.len()
    }

    /// First graded token of every answered example.
    pub fn answer_starts(&self) -> Vec<usize> {
        self.examples
            .iter()
            .filter_map(|e| e.answer.map(|s| s.start))
            .collect()
    }
}

/// How examples are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStyle {
    /// `4+3=7\n...\n1+0=`
    Addition,
    /// ` c -> e\n...\n q ->`
    Cipher,
    /// `question\n(A) ...\nAnswer: (B)\n...\nAnswer:`
    Mcqa,
}

impl PromptStyle {
    /// Text between the answer-eliciting token and the graded answer token.
    pub fn lead_in(self) -> &'static str {
        match self {
            PromptStyle::Addition => "",
            PromptStyle::Cipher => " ",
            PromptStyle::Mcqa => " (",
        }
    }

    fn trailer(self) -> &'static str {
        match self {
            PromptStyle::Mcqa => ")",
            _ => "",
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PromptStyle::Addition => "addition",
            PromptStyle::Cipher => "cipher",
            PromptStyle::Mcqa => "mcqa",
        };
        f.write_str(s)
    }
}

/// One `(input, answer)` example. The last example's answer is never rendered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: String,
    pub answer: Option<String>,
}

impl Example {
    pub fn new(input: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            answer: Some(answer.into()),
        }
    }

    pub fn query(input: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            answer: None,
        }
    }
}

/// Renders `examples` in `style`. The text ends at the final answer-eliciting
/// token; append [`PromptStyle::lead_in`] before grading the next token.
pub fn render_prompt(examples: &[Example], style: PromptStyle) -> Result<(String, PositionMap)> {
    let (last, shots) = examples
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("render_prompt needs at least one example".into()))?;

    let mut text = String::new();
    // token position of the next character (bos occupies 0)
    let pos = |text: &String| text.chars().count() + 1;
    let mut answered = Vec::with_capacity(shots.len());

    let render_stem = |text: &mut String, input: &str| -> ExamplePositions {
        match style {
            PromptStyle::Addition => {
                let mut operands = Vec::new();
                let mut start = pos(text);
                for part in input.split('+') {
                    let len = part.chars().count();
                    operands.push(Span {
                        start,
                        end: start + len,
                    });
                    start += len + 1;
                }
                text.push_str(input);
                let eq = pos(text);
                text.push('=');
                ExamplePositions {
                    operands,
                    eq,
                    answer: None,
                }
            }
            PromptStyle::Cipher => {
                text.push(' ');
                let start = pos(text);
                text.push_str(input);
                let operands = vec![Span {
                    start,
                    end: start + input.chars().count(),
                }];
                text.push_str(" -");
                let eq = pos(text);
                text.push('>');
                ExamplePositions {
                    operands,
                    eq,
                    answer: None,
                }
            }
            PromptStyle::Mcqa => {
                text.push_str(input);
                text.push_str("\nAnswer");
                let eq = pos(text);
                text.push(':');
                ExamplePositions {
                    operands: Vec::new(),
                    eq,
                    answer: None,
                }
            }
        }
    };

    for (i, ex) in shots.iter().enumerate() {
        let answer = ex.answer.as_deref().ok_or_else(|| {
            Error::InvalidArgument(format!("example {i} is not the last one and has no answer"))
        })?;
        let mut p = render_stem(&mut text, &ex.input);
        text.push_str(style.lead_in());
        let start = pos(&text);
        text.push_str(answer);
        p.answer = Some(Span {
            start,
            end: start + answer.chars().count(),
        });
        text.push_str(style.trailer());
        text.push('\n');
        answered.push(p);
    }
    let query = render_stem(&mut text, &last.input);
    let final_eq = query.eq;
    Ok((
        text,
        PositionMap {
            examples: answered,
            query,
            final_eq,
            answer_pos: final_eq,
        },
    ))
}

/// Encodes a rendered prompt plus the style's lead-in and an optional shared
/// answer prefix, updating `answer_pos` to the last input token.
pub fn encode_prompt(
    vocab: &Vocab,
    text: &str,
    positions: &mut PositionMap,
    style: PromptStyle,
    answer_prefix: &str,
) -> Result<TokenSeq> {
    let mut full = String::with_capacity(text.len() + 4);
    full.push_str(text);
    full.push_str(style.lead_in());
    full.push_str(answer_prefix);
    let tokens = vocab.encode(&full)?;
    positions.answer_pos = positions.final_eq
        + style.lead_in().chars().count()
        + answer_prefix.chars().count();
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_example() {
        let v = Vocab::new();
        let ids = v.encode("1+1=3").unwrap();
        let expected: Vec<TokenId> = vec![
            BOS,
            v.digit(1),
            v.id('+').unwrap(),
            v.digit(1),
            v.id('=').unwrap(),
            v.digit(3),
        ];
        assert_eq!(ids, expected);
        assert_eq!(v.decode(&ids).unwrap(), "1+1=3");
    }

    #[test]
    fn numbers_split_into_digits() {
        let v = Vocab::new();
        assert_eq!(v.encode("12").unwrap(), vec![BOS, v.digit(1), v.digit(2)]);
    }

    #[test]
    fn unknown_character_reports_offset() {
        let v = Vocab::new();
        match v.encode("1÷1") {
            Err(Error::UnknownCharacter { ch, offset }) => {
                assert_eq!(ch, '÷');
                assert_eq!(offset, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new();
        assert_eq!(v.len(), 2 + 10 + 9 + 52);
        for d in 0..10 {
            assert_eq!(v.digit(d), DIGIT_ZERO + d);
            assert_eq!(v.symbol(v.digit(d)), char::from_digit(d, 10));
        }
        let mut seen = std::collections::HashSet::new();
        for (id, name) in v.table() {
            assert!(seen.insert(name), "duplicate symbol for {id}");
        }
    }

    #[test]
    fn render_addition() {
        let ex = [Example::new("4+3", "7"), Example::query("1+0")];
        let (text, pm) = render_prompt(&ex, PromptStyle::Addition).unwrap();
        assert_eq!(text, "4+3=7\n1+0=");
        let v = Vocab::new();
        let ids = v.encode(&text).unwrap();
        assert_eq!(ids[pm.final_eq], v.id('=').unwrap());
        assert_eq!(pm.final_eq, ids.len() - 1);
        let c = pm.examples[0].answer.unwrap();
        assert_eq!(ids[c.start], v.digit(7));
        assert_eq!(ids[c.end], v.id('\n').unwrap());
        assert_eq!(pm.examples[0].operands[0], Span { start: 1, end: 2 });
        assert_eq!(pm.examples[0].operands[1], Span { start: 3, end: 4 });
        assert_eq!(pm.query.operands[1], Span { start: 9, end: 10 });
    }

    #[test]
    fn render_cipher() {
        let ex = [Example::new("c", "e"), Example::query("q")];
        let (text, pm) = render_prompt(&ex, PromptStyle::Cipher).unwrap();
        assert_eq!(text, " c -> e\n q ->");
        let v = Vocab::new();
        let ids = v.encode(&text).unwrap();
        assert_eq!(ids[pm.final_eq], v.id('>').unwrap());
        assert_eq!(ids[pm.examples[0].answer.unwrap().start], v.id('e').unwrap());
    }

    #[test]
    fn render_mcqa() {
        let ex = [
            Example::new("pick b\n(A) x\n(B) y", "B"),
            Example::query("pick a\n(A) x\n(B) y"),
        ];
        let (text, mut pm) = render_prompt(&ex, PromptStyle::Mcqa).unwrap();
        assert_eq!(text, "pick b\n(A) x\n(B) y\nAnswer: (B)\npick a\n(A) x\n(B) y\nAnswer:");
        let v = Vocab::new();
        let ids = encode_prompt(&v, &text, &mut pm, PromptStyle::Mcqa, "").unwrap();
        assert_eq!(ids[pm.answer_pos], v.id('(').unwrap());
        assert_eq!(pm.answer_pos, ids.len() - 1);
        assert_eq!(ids[pm.examples[0].answer.unwrap().start], v.id('B').unwrap());
    }

    #[test]
    fn single_query_has_no_answered_examples() {
        let (text, pm) = render_prompt(&[Example::query("2+2")], PromptStyle::Addition).unwrap();
        assert_eq!(text, "2+2=");
        assert_eq!(pm.n_answered(), 0);
    }

    #[test]
    fn empty_examples_rejected() {
        assert!(render_prompt(&[], PromptStyle::Addition).is_err());
    }
}
