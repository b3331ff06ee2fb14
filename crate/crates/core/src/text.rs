//! Word-level tokenizer and vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const CLS_NAME: &str = "<cls>";

/// Splits on whitespace and isolates every ASCII punctuation character.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            } else {
                word.push(ch);
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Token ids `y_1..y_T` of one text, without BOS/EOS/CLS.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher-forcing pair: input `[BOS, y_1..y_T]`, target `[y_1..y_T, EOS]`.
    pub fn teacher_forcing(&self) -> (Vec<usize>, Vec<usize>) {
        let mut input = Vec::with_capacity(self.ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&self.ids);
        let mut target = self.ids.clone();
        target.push(EOS);
        (input, target)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials, then every distinct corpus word in sorted order, then CLS.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(split_words).collect();
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .filter(|w| !SPECIAL_NAMES.contains(&w.as_str()) && w != CLS_NAME),
        );
        tokens.push(CLS_NAME.to_string());
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn cls(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence {
            ids: split_words(text)
                .iter()
                .map(|w| match self.index.get(w.as_str()) {
                    Some(&id) if id != self.cls() && id > UNK => id,
                    _ => UNK,
                })
                .collect(),
        }
    }

    /// Joins word tokens with single spaces, attaching punctuation to the
    /// preceding word. Special ids other than UNK are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || id == self.cls() {
                continue;
            }
            let tok = self.token(id).unwrap_or(SPECIAL_NAMES[UNK]);
            let is_punct =
                tok.chars().count() == 1 && tok.chars().all(|c| c.is_ascii_punctuation());
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// Header block of special-id declarations, a `---` line, then one token
    /// per line with id = line index.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (i, name) in SPECIAL_NAMES.iter().enumerate() {
            s.push_str(&format!("special {name} {i}\n"));
        }
        s.push_str(&format!("special {CLS_NAME} {}\n---\n", self.cls()));
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let (header, body) = text
            .split_once("---\n")
            .ok_or_else(|| Error::format(path, "missing `---` separator after header"))?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format(path, "duplicate tokens"));
        }
        let mut seen = 0;
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [kw, name, id] = parts.as_slice() else {
                return Err(Error::format(path, format!("bad header line `{line}`")));
            };
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(path, format!("bad id in `{line}`")))?;
            let expected = match *name {
                CLS_NAME => vocab.cls(),
                n => SPECIAL_NAMES
                    .iter()
                    .position(|s| *s == n)
                    .ok_or_else(|| Error::format(path, format!("unknown special `{n}`")))?,
            };
            if *kw != "special" || id != expected || vocab.token(id) != Some(*name) {
                return Err(Error::format(
                    path,
                    format!("special `{name}` must be at id {expected}"),
                ));
            }
            seen += 1;
        }
        if seen != SPECIAL_NAMES.len() + 1 {
            return Err(Error::format(
                path,
                "header must declare all five special tokens",
            ));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["benign breast tissue.", "invasive carcinoma, grade 2"])
    }

    #[test]
    fn round_trip() {
        let v = vocab();
        let seq = v.tokenize("benign breast tissue");
        assert_eq!(seq.len(), 3);
        assert_eq!(v.detokenize(&seq.ids), "benign breast tissue");
        let seq = v.tokenize("invasive   carcinoma,grade 2");
        assert_eq!(v.detokenize(&seq.ids), "invasive carcinoma, grade 2");
    }

    #[test]
    fn unknown_and_empty() {
        let v = vocab();
        assert_eq!(v.tokenize("lymphoma").ids, vec![UNK]);
        assert!(v.tokenize("").is_empty());
        assert_eq!(v.tokenize("<cls>").ids, vec![UNK, UNK, UNK]);
    }

    #[test]
    fn specials_distinct_and_cls_last() {
        let v = vocab();
        let ids = [PAD, BOS, EOS, UNK, v.cls()];
        let set: BTreeSet<usize> = ids.iter().copied().collect();
        assert_eq!(set.len(), 5);
        assert_eq!(v.cls(), v.len() - 1);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let back = Vocabulary::parse(&v.to_file_string(), Path::new("v")).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse("special <pad> 0\nfoo\n", Path::new("v")).is_err());
    }

    #[test]
    fn teacher_forcing_alignment() {
        let seq = TokenSequence { ids: vec![7, 8] };
        assert_eq!(seq.teacher_forcing(), (vec![BOS, 7, 8], vec![7, 8, EOS]));
    }
}
