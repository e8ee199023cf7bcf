//! Character-level question preprocessing: vocabulary, tokenization,
//! padding masks, and sinusoidal positional encodings.
//!
//! A question is lowercased, stripped of ASCII punctuation, and split on
//! whitespace; the token stream is `<sos>`, then per word `<sow>`, its
//! characters, `<eow>`, then `<eos>`, right-padded with `<pad>` (id 0).

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("character {0:?} is not in the vocabulary")]
    UnknownCharacter(char),
    #[error("tokenized length {len} exceeds maximum sequence length {l_max}")]
    Overflow { len: usize, l_max: usize },
    #[error("malformed token sequence: {0}")]
    Structure(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("position {pos} out of range for maximum length {max_len}")]
    PositionOutOfRange { pos: usize, max_len: usize },
    #[error("vocabulary file line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// Special token ids. `<pad>` is 0 so that padding with zeros pads with
/// `<pad>` tokens.
pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SOW: u32 = 3;
pub const EOW: u32 = 4;

const SPECIAL_NAMES: [(&str, u32); 5] =
    [("<pad>", PAD), ("<sos>", SOS), ("<eos>", EOS), ("<sow>", SOW), ("<eow>", EOW)];

fn special_name(id: u32) -> Option<&'static str> {
    SPECIAL_NAMES.iter().find(|(_, i)| *i == id).map(|(n, _)| *n)
}

/// Character-to-id map plus the five special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    char_to_id: BTreeMap<char, u32>,
    id_to_char: BTreeMap<u32, char>,
}

impl Vocabulary {
    /// Vocabulary over lowercase a-z, digits, and space. Space never occurs
    /// in token streams (word boundaries are `<sow>`/`<eow>`) but is kept as
    /// a base character.
    pub fn default_charset() -> Self {
        let mut chars: Vec<char> = ('a'..='z').collect();
        chars.extend('0'..='9');
        chars.push(' ');
        Self::from_chars(&chars)
    }

    /// Build from a character set; ids are assigned after the specials in
    /// the given order.
    pub fn from_chars(chars: &[char]) -> Self {
        let mut char_to_id = BTreeMap::new();
        let mut id_to_char = BTreeMap::new();
        let mut next = SPECIAL_NAMES.len() as u32;
        for &c in chars {
            if char_to_id.contains_key(&c) {
                continue;
            }
            char_to_id.insert(c, next);
            id_to_char.insert(next, c);
            next += 1;
        }
        Vocabulary { char_to_id, id_to_char }
    }

    /// Total number of ids, specials included. Usable as embedding-table
    /// row count.
    pub fn size(&self) -> usize {
        SPECIAL_NAMES.len() + self.char_to_id.len()
    }

    pub fn id_of(&self, c: char) -> Option<u32> {
        self.char_to_id.get(&c).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.id_to_char.get(&id).copied()
    }

    pub fn is_special(id: u32) -> bool {
        id < SPECIAL_NAMES.len() as u32
    }

    /// Serialize as one `token<TAB>id` line per entry, specials spelled
    /// `<pad>`/`<sos>`/`<eos>`/`<sow>`/`<eow>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, id) in SPECIAL_NAMES {
            out.push_str(&format!("{name}\t{id}\n"));
        }
        let mut entries: Vec<(u32, char)> = self.id_to_char.iter().map(|(&i, &c)| (i, c)).collect();
        entries.sort_unstable();
        for (id, c) in entries {
            out.push_str(&format!("{c}\t{id}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TextError> {
        let mut char_to_id = BTreeMap::new();
        let mut id_to_char = BTreeMap::new();
        let mut seen_ids = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id_str) = line.split_once('\t').ok_or(TextError::Parse {
                line: lineno + 1,
                detail: "expected token<TAB>id".to_string(),
            })?;
            let id: u32 = id_str.parse().map_err(|_| TextError::Parse {
                line: lineno + 1,
                detail: format!("bad id {id_str:?}"),
            })?;
            if !seen_ids.insert(id) {
                return Err(TextError::Parse {
                    line: lineno + 1,
                    detail: format!("duplicate id {id}"),
                });
            }
            if let Some((_, expected)) = SPECIAL_NAMES.iter().find(|(n, _)| *n == tok) {
                if *expected != id {
                    return Err(TextError::Parse {
                        line: lineno + 1,
                        detail: format!("special {tok} must have id {expected}, got {id}"),
                    });
                }
                continue;
            }
            let mut chars = tok.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(TextError::Parse {
                    line: lineno + 1,
                    detail: format!("expected a single character, got {tok:?}"),
                });
            };
            if Vocabulary::is_special(id) {
                return Err(TextError::Parse {
                    line: lineno + 1,
                    detail: format!("id {id} is reserved for specials"),
                });
            }
            if char_to_id.insert(c, id).is_some() {
                return Err(TextError::Parse {
                    line: lineno + 1,
                    detail: format!("duplicate character {c:?}"),
                });
            }
            id_to_char.insert(id, c);
        }
        Ok(Vocabulary { char_to_id, id_to_char })
    }
}

/// Fixed-length token sequence: ids beyond `true_length` are `<pad>`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    true_length: usize,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn l_max(&self) -> usize {
        self.ids.len()
    }

    /// Build directly from raw ids (used by tests exercising malformed
    /// sequences); `tokenize` is the normal constructor.
    pub fn from_raw(ids: Vec<u32>, true_length: usize) -> Self {
        assert!(true_length <= ids.len());
        TokenSequence { ids, true_length }
    }
}

/// Lowercase, strip ASCII punctuation, normalize whitespace. This is the
/// normal form that `tokenize` encodes and `detokenize` recovers.
pub fn normalize_question(question: &str) -> String {
    let cleaned: String = question
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokenize(
    question: &str,
    vocab: &Vocabulary,
    l_max: usize,
) -> Result<TokenSequence, TextError> {
    let normalized = normalize_question(question);
    let mut ids = vec![SOS];
    for word in normalized.split_whitespace() {
        ids.push(SOW);
        for c in word.chars() {
            ids.push(vocab.id_of(c).ok_or(TextError::UnknownCharacter(c))?);
        }
        ids.push(EOW);
    }
    ids.push(EOS);
    let true_length = ids.len();
    if true_length > l_max {
        return Err(TextError::Overflow { len: true_length, l_max });
    }
    ids.resize(l_max, PAD);
    Ok(TokenSequence { ids, true_length })
}

/// Inverse of `tokenize` up to lowercasing, punctuation removal, and
/// whitespace normalization. Rejects structurally invalid sequences.
pub fn detokenize(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TextError> {
    let ids = &seq.ids[..seq.true_length];
    let mut iter = ids.iter().copied().peekable();
    if iter.next() != Some(SOS) {
        return Err(TextError::Structure("sequence must begin with <sos>".to_string()));
    }
    let mut words: Vec<String> = Vec::new();
    loop {
        match iter.next() {
            Some(EOS) => break,
            Some(SOW) => {
                let mut word = String::new();
                loop {
                    match iter.next() {
                        Some(EOW) => break,
                        Some(id) if !Vocabulary::is_special(id) => {
                            word.push(vocab.char_of(id).ok_or(TextError::UnknownId(id))?);
                        }
                        Some(id) => {
                            return Err(TextError::Structure(format!(
                                "unexpected {} inside a word",
                                special_name(id).unwrap_or("token")
                            )));
                        }
                        None => {
                            return Err(TextError::Structure(
                                "sequence ended inside a word".to_string(),
                            ));
                        }
                    }
                }
                words.push(word);
            }
            Some(id) => {
                return Err(TextError::Structure(format!(
                    "expected <sow> or <eos>, got {}",
                    special_name(id).map(str::to_string).unwrap_or_else(|| format!("id {id}"))
                )));
            }
            None => {
                return Err(TextError::Structure("sequence ended before <eos>".to_string()));
            }
        }
    }
    if iter.any(|id| id != PAD) {
        return Err(TextError::Structure("non-pad token after <eos>".to_string()));
    }
    Ok(words.join(" "))
}

/// 1 at real-token positions, 0 at pad positions.
pub fn padding_mask(seq: &TokenSequence) -> Vec<u8> {
    (0..seq.l_max()).map(|i| u8::from(i < seq.true_length)).collect()
}

/// Non-trainable sinusoidal positional encodings: even dims
/// sin(pos / 10000^(2i/d_emb)), odd dims cos with the same frequency.
#[derive(Clone, Debug)]
pub struct PositionalEncoder {
    pub d_emb: usize,
    pub max_len: usize,
}

impl PositionalEncoder {
    pub fn new(d_emb: usize, max_len: usize) -> Self {
        PositionalEncoder { d_emb, max_len }
    }

    pub fn encode(&self, pos: usize) -> Result<Vec<f64>, TextError> {
        if pos >= self.max_len {
            return Err(TextError::PositionOutOfRange { pos, max_len: self.max_len });
        }
        let mut row = vec![0.0; self.d_emb];
        for (dim, v) in row.iter_mut().enumerate() {
            let i = dim / 2;
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / self.d_emb as f64);
            *v = if dim % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        Ok(row)
    }

    /// Full [max_len, d_emb] table, row-major.
    pub fn table(&self) -> Vec<f64> {
        (0..self.max_len)
            .flat_map(|pos| self.encode(pos).expect("pos < max_len"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::default_charset()
    }

    #[test]
    fn table2_example_sequence() {
        let v = vocab();
        let seq = tokenize("How many objects in total?", &v, 70).unwrap();
        let mut expected = vec![SOS];
        for word in ["how", "many", "objects", "in", "total"] {
            expected.push(SOW);
            for c in word.chars() {
                expected.push(v.id_of(c).unwrap());
            }
            expected.push(EOW);
        }
        expected.push(EOS);
        assert_eq!(&seq.ids()[..seq.true_length()], &expected[..]);
        assert!(seq.ids()[seq.true_length()..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn empty_question_is_sos_eos() {
        let seq = tokenize("", &vocab(), 5).unwrap();
        assert_eq!(seq.true_length(), 2);
        assert_eq!(seq.ids(), &[SOS, EOS, PAD, PAD, PAD]);
    }

    #[test]
    fn two_single_letter_words() {
        let v = vocab();
        let seq = tokenize("a b", &v, 10).unwrap();
        let a = v.id_of('a').unwrap();
        let b = v.id_of('b').unwrap();
        assert_eq!(
            &seq.ids()[..seq.true_length()],
            &[SOS, SOW, a, EOW, SOW, b, EOW, EOS]
        );
    }

    #[test]
    fn unknown_character_and_overflow_errors() {
        let v = vocab();
        assert_eq!(tokenize("caffé", &v, 70).unwrap_err(), TextError::UnknownCharacter('é'));
        assert!(matches!(
            tokenize("hello", &v, 4).unwrap_err(),
            TextError::Overflow { len: 9, l_max: 4 }
        ));
    }

    #[test]
    fn round_trip_matches_normal_form() {
        let v = vocab();
        for q in ["How many objects in total?", "Is the road flooded?", "a b", ""] {
            let seq = tokenize(q, &v, 70).unwrap();
            assert_eq!(detokenize(&seq, &v).unwrap(), normalize_question(q));
        }
    }

    #[test]
    fn structure_error_on_leading_eow() {
        let seq = TokenSequence::from_raw(vec![EOW, EOS, PAD], 2);
        assert!(matches!(detokenize(&seq, &vocab()), Err(TextError::Structure(_))));
        let seq = TokenSequence::from_raw(vec![SOS, EOW, EOS], 3);
        assert!(matches!(detokenize(&seq, &vocab()), Err(TextError::Structure(_))));
    }

    #[test]
    fn token_count_identity() {
        let v = vocab();
        for q in ["how many pools", "is any building flooded", "x", "one 2 three"] {
            let seq = tokenize(q, &v, 70).unwrap();
            let norm = normalize_question(q);
            let expected: usize =
                2 + norm.split_whitespace().map(|w| w.chars().count() + 2).sum::<usize>();
            assert_eq!(seq.true_length(), expected);
        }
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = vocab();
        let text = v.to_text();
        let parsed = Vocabulary::from_text(&text).unwrap();
        assert_eq!(v, parsed);
        assert!(text.starts_with("<pad>\t0\n"));
    }

    #[test]
    fn vocab_rejects_bad_special_id() {
        assert!(Vocabulary::from_text("<pad>\t3\n").is_err());
        assert!(Vocabulary::from_text("a\t2\n").is_err());
    }

    #[test]
    fn positional_encoding_pos_zero() {
        let enc = PositionalEncoder::new(8, 70);
        let row = enc.encode(0).unwrap();
        for (dim, v) in row.iter().enumerate() {
            if dim % 2 == 0 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
    }

    #[test]
    fn positional_encoding_bounded() {
        let enc = PositionalEncoder::new(8, 70);
        let row = enc.encode(69).unwrap();
        assert!(row.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn positional_encoding_first_dim_is_sin_pos() {
        let enc = PositionalEncoder::new(8, 70);
        let row = enc.encode(1).unwrap();
        assert!((row[0] - 1f64.sin()).abs() < 1e-12);
        assert!((row[0] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn positional_encoding_out_of_range() {
        let enc = PositionalEncoder::new(8, 70);
        assert!(matches!(enc.encode(70), Err(TextError::PositionOutOfRange { .. })));
    }

    #[test]
    fn padding_mask_shapes() {
        let seq = tokenize("", &vocab(), 5).unwrap();
        assert_eq!(padding_mask(&seq), vec![1, 1, 0, 0, 0]);
        let full = TokenSequence::from_raw(vec![SOS, SOW, EOW, EOS], 4);
        assert_eq!(padding_mask(&full), vec![1, 1, 1, 1]);
    }
}
