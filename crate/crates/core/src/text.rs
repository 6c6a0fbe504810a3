//! Character vocabulary, filler padding to the frame length, and ratio-based
//! duration estimation.

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

pub const FILLER_ID: usize = 0;
pub const FILLER_SYMBOL: &str = "<F>";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("character {ch:?} at byte offset {offset} is not in the vocabulary")]
    UnknownChar { ch: char, offset: usize },
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(usize),
    #[error("text of {chars} characters does not fit in {frames} frames")]
    TooLong { chars: usize, frames: usize },
    #[error("reference character count must be positive")]
    ZeroReferenceChars,
    #[error("reference frame count must be positive")]
    ZeroReferenceFrames,
    #[error("vocabulary line {line}: {reason}")]
    BadVocabulary { line: usize, reason: String },
    #[error("vocabulary io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered character set. ID 0 is the filler token; symbol `i` has ID `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn new(symbols: impl IntoIterator<Item = char>) -> Result<Self, TextError> {
        let mut out = Vocabulary {
            symbols: Vec::new(),
            index: HashMap::new(),
        };
        for (i, ch) in symbols.into_iter().enumerate() {
            if out.index.insert(ch, out.symbols.len() + 1).is_some() {
                return Err(TextError::BadVocabulary {
                    line: i + 2,
                    reason: format!("duplicate symbol {ch:?}"),
                });
            }
            out.symbols.push(ch);
        }
        Ok(out)
    }

    /// Number of IDs including the filler.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(1).and_then(|i| self.symbols.get(i).copied())
    }

    /// One symbol per line; the first line is the filler slot.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from(FILLER_SYMBOL);
        s.push('\n');
        for ch in &self.symbols {
            s.push(*ch);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, TextError> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(first) if first.trim_end_matches('\r') == FILLER_SYMBOL => {}
            _ => {
                return Err(TextError::BadVocabulary {
                    line: 1,
                    reason: format!("first line must be the filler symbol {FILLER_SYMBOL}"),
                })
            }
        }
        let mut symbols = Vec::new();
        let rest: Vec<&str> = lines.collect();
        for (i, line) in rest.iter().enumerate() {
            // a single trailing newline ends the file
            if i + 1 == rest.len() && line.is_empty() {
                break;
            }
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(ch), None) => symbols.push(ch),
                _ => {
                    return Err(TextError::BadVocabulary {
                        line: i + 2,
                        reason: format!("expected exactly one character, got {line:?}"),
                    })
                }
            }
        }
        Vocabulary::new(symbols)
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>, TextError> {
    text.char_indices()
        .map(|(offset, ch)| vocab.id(ch).ok_or(TextError::UnknownChar { ch, offset }))
        .collect()
}

pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> Result<String, TextError> {
    ids.iter()
        .map(|&id| vocab.symbol(id).ok_or(TextError::UnknownId(id)))
        .collect()
}

/// Character IDs padded with filler tokens up to the frame count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtendedSequence {
    ids: Vec<usize>,
    effective_len: usize,
}

impl ExtendedSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Count of leading non-filler tokens.
    pub fn effective_len(&self) -> usize {
        self.effective_len
    }

    pub fn all_filler(len: usize) -> Self {
        ExtendedSequence {
            ids: vec![FILLER_ID; len],
            effective_len: 0,
        }
    }

    /// Strips the filler tail.
    pub fn text_ids(&self) -> &[usize] {
        &self.ids[..self.effective_len]
    }
}

pub fn pad_to_length(ids: &[usize], frames: usize) -> Result<ExtendedSequence, TextError> {
    if ids.len() > frames {
        return Err(TextError::TooLong {
            chars: ids.len(),
            frames,
        });
    }
    let mut out = ids.to_vec();
    out.resize(frames, FILLER_ID);
    Ok(ExtendedSequence {
        ids: out,
        effective_len: ids.len(),
    })
}

/// Total frames for prompt + generation: `ref_frames + ceil(ref_frames * gen / ref)`.
pub fn estimate_duration(ref_frames: usize, ref_chars: usize, gen_chars: usize) -> Result<usize, TextError> {
    if ref_chars == 0 {
        return Err(TextError::ZeroReferenceChars);
    }
    if ref_frames == 0 {
        return Err(TextError::ZeroReferenceFrames);
    }
    let generated = (ref_frames * gen_chars).div_ceil(ref_chars);
    Ok(ref_frames + generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new("abct ".chars()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert_eq!(tokenize("", &v).unwrap(), Vec::<usize>::new());
        assert_eq!(
            tokenize("cat", &v).unwrap(),
            vec![v.id('c').unwrap(), v.id('a').unwrap(), v.id('t').unwrap()]
        );
        let err = tokenize("caf?", &v).unwrap_err();
        assert!(matches!(err, TextError::UnknownChar { ch: 'f', offset: 2 }));
        let v2 = Vocabulary::new("caf".chars()).unwrap();
        let err = tokenize("caf?", &v2).unwrap_err();
        assert!(matches!(err, TextError::UnknownChar { ch: '?', offset: 3 }));
        assert!(err.to_string().contains("'?'"));
    }

    #[test]
    fn filler_is_reserved() {
        let v = vocab();
        assert!(v.symbols().iter().all(|&c| v.id(c) != Some(FILLER_ID)));
        assert_eq!(v.symbol(FILLER_ID), None);
        assert!(Vocabulary::new("aa".chars()).is_err());
    }

    #[test]
    fn padding_examples() {
        let v = vocab();
        let ids = tokenize("cat", &v).unwrap();
        let z = pad_to_length(&ids, 5).unwrap();
        assert_eq!(&z.ids()[..3], &ids[..]);
        assert_eq!(&z.ids()[3..], &[FILLER_ID, FILLER_ID]);
        assert_eq!(z.effective_len(), 3);
        assert_eq!(pad_to_length(&[], 3).unwrap().ids(), &[FILLER_ID; 3]);
        assert_eq!(pad_to_length(&ids, 3).unwrap().ids(), &ids[..]);
        assert!(matches!(pad_to_length(&ids, 2), Err(TextError::TooLong { chars: 3, frames: 2 })));
    }

    #[test]
    fn duration_examples() {
        assert_eq!(estimate_duration(100, 10, 20).unwrap(), 300);
        assert_eq!(estimate_duration(100, 7, 7).unwrap(), 200);
        assert_eq!(estimate_duration(100, 3, 1).unwrap(), 134);
        assert!(matches!(estimate_duration(100, 0, 1), Err(TextError::ZeroReferenceChars)));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = vocab();
        let text = v.to_file_string();
        assert!(text.starts_with("<F>\n"));
        assert_eq!(text.lines().nth(1), Some("a"));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
        assert!(Vocabulary::parse("<F>\nab\n").is_err());
    }

    proptest! {
        #[test]
        fn pad_then_strip_recovers_ids(s in "[abct ]{0,12}", extra in 0usize..8) {
            let v = vocab();
            let ids = tokenize(&s, &v).unwrap();
            let z = pad_to_length(&ids, ids.len() + extra).unwrap();
            prop_assert_eq!(z.text_ids(), &ids[..]);
            prop_assert_eq!(detokenize(z.text_ids(), &v).unwrap(), s);
        }

        #[test]
        fn duration_is_monotone(r in 1usize..500, rc in 1usize..50, g in 0usize..50) {
            let base = estimate_duration(r, rc, g).unwrap();
            prop_assert!(estimate_duration(r, rc, g + 1).unwrap() >= base);
            prop_assert!(estimate_duration(r + 1, rc, g).unwrap() >= base);
        }
    }
}
