use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token <-> id map. Ids 0..4 are the reserved tokens; the rest are sorted
/// by descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>]) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("well-formed by construction")
    }

    /// Vocabulary from an id-ordered token list that starts with the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::VocabMismatch(
                "vocabulary must start with <pad> <bos> <eos> <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::VocabMismatch(format!("invalid token `{t}`")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map_or(RESERVED[UNK as usize], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<TokenId> {
        sentence.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let t = line.trim();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::parse(path.display().to_string(), i + 1, "expected one token"));
            }
            tokens.push(t.to_string());
        }
        Self::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn reserved_ids() {
        let v = Vocab::build(&[toks("a b")]);
        assert_eq!(v.id("<pad>"), 0);
        assert_eq!(v.id("<bos>"), 1);
        assert_eq!(v.id("<eos>"), 2);
        assert_eq!(v.id("<unk>"), 3);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn frequency_then_lexicographic() {
        let corpus = vec![toks("b a c c"), toks("d b c"), toks("e a")];
        let v = Vocab::build(&corpus);
        // independent ordering: count, then name
        let mut want: Vec<(usize, &str)> = vec![(2, "a"), (2, "b"), (3, "c"), (1, "d"), (1, "e")];
        want.sort_by(|x, y| y.0.cmp(&x.0).then(x.1.cmp(y.1)));
        let got: Vec<&str> = v.tokens()[4..].iter().map(String::as_str).collect();
        assert_eq!(got, want.iter().map(|w| w.1).collect::<Vec<_>>());
        assert_eq!(v, Vocab::build(&corpus));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = Vocab::build(&[toks("x y y z")]);
        v.write(&p).unwrap();
        assert_eq!(Vocab::read(&p).unwrap(), v);
        std::fs::write(&p, "<pad>\n<bos>\n<eos>\n<unk>\nfoo bar\n").unwrap();
        match Vocab::read(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }
}
