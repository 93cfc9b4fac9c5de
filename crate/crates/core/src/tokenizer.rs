//! Lowercasing WordPiece tokenizer with character-exact alignment back to the
//! original text, plus `[CLS] a [SEP] b [SEP]` pair encoding.
//!
//! Every piece records the span of ORIGINAL characters it came from
//! (Unicode scalar indices, end exclusive), so offsets from the data files can
//! be mapped to token spans and predicted token spans back to text.

use std::collections::HashMap;
use std::ops::Range;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::error::TokenizerError;

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const MASK: &str = "[MASK]";

const CONTINUATION: &str = "##";
const MAX_WORD_CHARS: usize = 100;

/// Default encoded length, including the three delimiter tokens.
pub const DEFAULT_MAX_SEQ_LEN: usize = 300;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    cls: u32,
    sep: u32,
    pad: u32,
    unk: u32,
    mask: u32,
}

impl Vocab {
    /// Load a vocabulary with one token per line; ids are line numbers.
    pub fn load(bytes: &[u8]) -> Result<Vocab, TokenizerError> {
        let text = std::str::from_utf8(bytes).map_err(|_| TokenizerError::Utf8)?;
        let body = text.strip_suffix('\n').unwrap_or(text);
        if body.is_empty() {
            return Vocab::from_tokens(Vec::new());
        }
        let tokens = body.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect();
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab, TokenizerError> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if ids.insert(tok.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken { token: tok.clone(), line: i + 1 });
            }
        }
        let special = |name: &'static str| ids.get(name).copied().ok_or(TokenizerError::MissingSpecialToken(name));
        let (cls, sep, pad, unk, mask) = (special(CLS)?, special(SEP)?, special(PAD)?, special(UNK)?, special(MASK)?);
        Ok(Vocab { tokens, ids, cls, sep, pad, unk, mask })
    }

    /// Serialize back to the one-token-per-line format.
    pub fn to_text(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn cls_id(&self) -> u32 {
        self.cls
    }
    pub fn sep_id(&self) -> u32 {
        self.sep
    }
    pub fn pad_id(&self) -> u32 {
        self.pad
    }
    pub fn unk_id(&self) -> u32 {
        self.unk
    }
    pub fn mask_id(&self) -> u32 {
        self.mask
    }
}

/// Half-open span of original-text characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

/// Inclusive span of token positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> TokenSpan {
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn shifted(self, by: usize) -> TokenSpan {
        TokenSpan { start: self.start + by, end: self.end + by }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    /// Vocabulary string, `##`-prefixed for continuations, or `[UNK]`.
    pub text: String,
    pub id: u32,
    pub span: CharSpan,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub pieces: Vec<Piece>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }
}

/// A normalized character together with the original character it came from.
#[derive(Clone, Copy)]
struct NormChar {
    ch: char,
    orig: usize,
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    matches!(c,
        '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}'
        | '\u{037E}' | '\u{0387}'
        | '\u{2010}'..='\u{2027}'
        | '\u{2030}'..='\u{205E}'
        | '\u{2E00}'..='\u{2E4F}'
        | '\u{3001}'..='\u{3003}'
        | '\u{3008}'..='\u{3011}'
        | '\u{3014}'..='\u{301F}'
        | '\u{FE10}'..='\u{FE19}'
        | '\u{FE30}'..='\u{FE4F}'
        | '\u{FF01}'..='\u{FF0F}'
        | '\u{FF1A}'..='\u{FF20}'
        | '\u{FF3B}'..='\u{FF40}'
        | '\u{FF5B}'..='\u{FF65}')
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{4E00}'..='\u{9FFF}'
        | '\u{3400}'..='\u{4DBF}'
        | '\u{20000}'..='\u{2A6DF}'
        | '\u{2A700}'..='\u{2B81F}'
        | '\u{F900}'..='\u{FAFF}'
        | '\u{2F800}'..='\u{2FA1F}')
}

fn is_dropped(c: char) -> bool {
    c == '\0' || c == '\u{FFFD}' || (c.is_control() && !c.is_whitespace())
}

/// Lowercase, strip accents, split on whitespace and isolate punctuation and
/// CJK characters. Each word keeps the original index of every character.
fn basic_words(text: &str) -> Vec<Vec<NormChar>> {
    let mut words = Vec::new();
    let mut current: Vec<NormChar> = Vec::new();
    for (orig, c) in text.chars().enumerate() {
        if is_dropped(c) {
            continue;
        }
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        for lc in c.to_lowercase() {
            for ch in std::iter::once(lc).nfd().filter(|ch| !is_combining_mark(*ch)) {
                let nc = NormChar { ch, orig };
                if is_punctuation(ch) || is_cjk(ch) {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(vec![nc]);
                } else {
                    current.push(nc);
                }
            }
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match-first WordPiece segmentation of `text`.
pub fn wordpiece_tokenize(text: &str, vocab: &Vocab) -> TokenizedText {
    let mut pieces = Vec::new();
    let mut candidate = String::new();
    for word in basic_words(text) {
        let whole = CharSpan { start: word[0].orig, end: word[word.len() - 1].orig + 1 };
        let unk = Piece { text: UNK.to_string(), id: vocab.unk_id(), span: whole };
        if word.len() > MAX_WORD_CHARS {
            pieces.push(unk);
            continue;
        }
        let mut word_pieces = Vec::new();
        let mut start = 0;
        let mut failed = false;
        while start < word.len() {
            let mut end = word.len();
            let mut found = None;
            while end > start {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(word[start..end].iter().map(|nc| nc.ch));
                if let Some(id) = vocab.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    word_pieces.push(Piece {
                        text: candidate.clone(),
                        id,
                        span: CharSpan { start: word[start].orig, end: word[end - 1].orig + 1 },
                    });
                    start = end;
                }
                None => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            pieces.push(unk);
        } else {
            pieces.extend(word_pieces);
        }
    }
    TokenizedText { pieces }
}

/// Smallest inclusive token interval covering every piece that overlaps the
/// character interval `[char_start, char_start + char_len)`.
pub fn align_char_span(t: &TokenizedText, char_start: usize, char_len: usize) -> Result<TokenSpan, TokenizerError> {
    let char_end = char_start + char_len;
    let no_overlap = TokenizerError::NoOverlap { start: char_start, end: char_end };
    if char_len == 0 {
        return Err(no_overlap);
    }
    // Piece starts and ends are both non-decreasing, so the overlapping
    // pieces form a contiguous run found by two binary searches.
    let first = t.pieces.partition_point(|p| p.span.end <= char_start);
    let past_last = t.pieces.partition_point(|p| p.span.start < char_end);
    if first >= past_last {
        return Err(no_overlap);
    }
    Ok(TokenSpan::new(first, past_last - 1))
}

/// Model input for one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub mask: Vec<u8>,
    /// Token positions of the passage region (the second segment for pairs,
    /// the only segment for single-sequence encodings).
    pub passage_range: Range<usize>,
    /// Original character span per position; `None` for special tokens.
    pub alignment: Vec<Option<CharSpan>>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Append `[PAD]` positions (mask 0) up to `len`.
    pub fn padded(&self, len: usize, vocab: &Vocab) -> EncodedInput {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(vocab.pad_id());
            out.segment_ids.push(0);
            out.mask.push(0);
            out.alignment.push(None);
        }
        out
    }

    /// Map a token span of the passage region to a span within that region
    /// (offset 0 at the first passage token).
    pub fn passage_token(&self, tok: usize) -> Option<usize> {
        self.passage_range.contains(&tok).then(|| tok - self.passage_range.start)
    }
}

/// Encode `[CLS] first [SEP] second [SEP]`, truncating `second` from the right
/// when the pair exceeds `max_seq_len`.
pub fn encode_pair(
    first: &TokenizedText,
    second: &TokenizedText,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<EncodedInput, TokenizerError> {
    if first.is_empty() {
        return Err(TokenizerError::EmptyFirstSegment);
    }
    let budget = max_seq_len.saturating_sub(3);
    if first.len() > budget {
        return Err(TokenizerError::FirstSegmentTooLong { len: first.len(), budget });
    }
    let kept = second.len().min(budget - first.len());
    let total = first.len() + kept + 3;

    let mut ids = Vec::with_capacity(total);
    let mut segment_ids = Vec::with_capacity(total);
    let mut alignment = Vec::with_capacity(total);

    ids.push(vocab.cls_id());
    alignment.push(None);
    for p in &first.pieces {
        ids.push(p.id);
        alignment.push(Some(p.span));
    }
    ids.push(vocab.sep_id());
    alignment.push(None);
    segment_ids.resize(ids.len(), 0);

    let passage_start = ids.len();
    for p in &second.pieces[..kept] {
        ids.push(p.id);
        alignment.push(Some(p.span));
    }
    let passage_end = ids.len();
    ids.push(vocab.sep_id());
    alignment.push(None);
    segment_ids.resize(ids.len(), 1);

    Ok(EncodedInput {
        mask: vec![1; ids.len()],
        ids,
        segment_ids,
        passage_range: passage_start..passage_end,
        alignment,
    })
}

/// Encode `[CLS] text [SEP]` as a single segment, truncating from the right.
pub fn encode_single(text: &TokenizedText, vocab: &Vocab, max_seq_len: usize) -> EncodedInput {
    let kept = text.len().min(max_seq_len.saturating_sub(2));
    let mut ids = vec![vocab.cls_id()];
    let mut alignment = vec![None];
    for p in &text.pieces[..kept] {
        ids.push(p.id);
        alignment.push(Some(p.span));
    }
    ids.push(vocab.sep_id());
    alignment.push(None);
    EncodedInput {
        segment_ids: vec![0; ids.len()],
        mask: vec![1; ids.len()],
        passage_range: 1..1 + kept,
        ids,
        alignment,
    }
}
