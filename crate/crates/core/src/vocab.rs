//! Vocabulary, special tokens and greedy longest-prefix tokenization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{config_err, PetError, Result};

pub type TokenId = u32;

pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
/// Prefix carried by every non-initial subword piece, e.g. `terri` `·ble`.
pub const CONTINUATION: char = '·';

pub const DEFAULT_SPECIALS: [&str; 3] = [MASK_TOKEN, PAD_TOKEN, UNK_TOKEN];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask_id: TokenId,
    pad_id: TokenId,
    unk_id: TokenId,
    longest_piece: usize,
}

/// A token-id sequence together with the positions of its mask tokens.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    mask_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, mask_id: TokenId) -> Self {
        let mask_positions = ids
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == mask_id)
            .map(|(i, _)| i)
            .collect();
        Self {
            ids,
            mask_positions,
        }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn mask_positions(&self) -> &[usize] {
        &self.mask_positions
    }

    pub fn num_masks(&self) -> usize {
        self.mask_positions.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Replaces the mask at slot `slot` (index into `mask_positions`) with `token`.
    pub fn fill_slot(&self, slot: usize, token: TokenId) -> Self {
        let mut ids = self.ids.clone();
        let pos = self.mask_positions[slot];
        ids[pos] = token;
        let mut mask_positions = self.mask_positions.clone();
        mask_positions.remove(slot);
        Self {
            ids,
            mask_positions,
        }
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }
}

/// Lowercases and splits on whitespace; alphanumeric runs form words and
/// every other character is a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit token list. `MASK`, `PAD` and
    /// `UNK` must be present and every token must be unique.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(config_err(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(config_err(format!("duplicate token {t:?}")));
            }
        }
        let find = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| config_err(format!("vocabulary lacks special token {s}")))
        };
        let mask_id = find(MASK_TOKEN)?;
        let pad_id = find(PAD_TOKEN)?;
        let unk_id = find(UNK_TOKEN)?;
        let longest_piece = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
        Ok(Self {
            tokens,
            index,
            mask_id,
            pad_id,
            unk_id,
            longest_piece,
        })
    }

    /// Specials first (in the given order), then corpus words by descending
    /// frequency with lexicographic tie-breaks, up to `max_size` entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize, specials: &[&str]) -> Result<Self> {
        if max_size < specials.len() + 1 {
            return Err(config_err(format!(
                "max_size {max_size} must exceed the {} special tokens",
                specials.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !specials.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = specials
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .take(max_size);
        Self::from_tokens(tokens)
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

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn unk_id(&self) -> TokenId {
        self.unk_id
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        TokenSequence::new(self.encode(text), self.mask_id)
    }

    /// Token ids for surface text. Each word is split greedily into the
    /// longest known pieces; each unmatched character run becomes one `UNK`.
    /// Never yields `MASK` or `PAD`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in split_words(text) {
            self.segment_word(&word, &mut out);
        }
        out
    }

    fn segment_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pos = 0;
        let mut in_unk = false;
        let mut piece = String::new();
        while pos < chars.len() {
            let max_len = self.longest_piece.min(chars.len() - pos);
            let mut matched = None;
            for len in (1..=max_len).rev() {
                piece.clear();
                if pos > 0 {
                    piece.push(CONTINUATION);
                }
                piece.extend(&chars[pos..pos + len]);
                if let Some(&id) = self.index.get(piece.as_str()) {
                    if id != self.mask_id && id != self.pad_id {
                        matched = Some((id, len));
                        break;
                    }
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                    in_unk = false;
                }
                None => {
                    if !in_unk {
                        out.push(self.unk_id);
                        in_unk = true;
                    }
                    pos += 1;
                }
            }
        }
    }

    /// Joins tokens with spaces, gluing continuation pieces to their
    /// predecessor.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            let tok = self.token(id);
            if let Some(rest) = tok.strip_prefix(CONTINUATION).filter(|r| !r.is_empty()) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    /// Parses the vocabulary file format; the first three lines must be
    /// `[MASK]`, `[PAD]`, `[UNK]`.
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        if tokens.len() < 3 || tokens[..3] != DEFAULT_SPECIALS {
            return Err(PetError::Parse {
                location: "vocabulary".into(),
                message: "first lines must be [MASK], [PAD], [UNK]".into(),
            });
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn specials() -> Vec<&'static str> {
        DEFAULT_SPECIALS.to_vec()
    }

    fn words(v: &Vocabulary, text: &str) -> Vec<String> {
        v.encode(text)
            .iter()
            .map(|&i| v.token(i).to_string())
            .collect()
    }

    #[test]
    fn build_orders_by_frequency() {
        let v = Vocabulary::build(&["a b a"], 5, &specials()).unwrap();
        assert_eq!(v.tokens(), &[MASK_TOKEN, PAD_TOKEN, UNK_TOKEN, "a", "b"]);
    }

    #[test]
    fn build_empty_corpus_yields_specials() {
        let v = Vocabulary::build::<&str>(&[], 10, &specials()).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn build_truncates_to_max_size() {
        // counts: z=3, y=2, x=1
        let v = Vocabulary::build(&["x y", "y z", "z z"], 5, &specials()).unwrap();
        assert_eq!(&v.tokens()[3..], &["z", "y"]);
    }

    #[test]
    fn build_rejects_tiny_max_size() {
        assert!(Vocabulary::build(&["a"], 3, &specials()).is_err());
    }

    #[test]
    fn subword_split() {
        let v = Vocabulary::from_tokens(specials().into_iter().chain(["terri", "·ble"])).unwrap();
        assert_eq!(words(&v, "terrible"), ["terri", "·ble"]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn lowercases_and_splits_punctuation() {
        let v = Vocabulary::from_tokens(specials().into_iter().chain(["great", "!"])).unwrap();
        assert_eq!(words(&v, "Great!"), ["great", "!"]);
    }

    #[test]
    fn one_unk_per_unmatched_run() {
        let v = Vocabulary::from_tokens(specials().into_iter().chain(["ab", "·cd"])).unwrap();
        assert_eq!(words(&v, "abxxcd"), ["ab", UNK_TOKEN, "·cd"]);
        assert_eq!(words(&v, "xyab"), [UNK_TOKEN]);
        assert_eq!(words(&v, "zz ab"), [UNK_TOKEN, "ab"]);
    }

    #[test]
    fn specials_never_emitted() {
        let v = Vocabulary::from_tokens(specials()).unwrap();
        let ids = v.encode("[MASK] [PAD] mask pad");
        assert!(ids.iter().all(|&i| i == v.unk_id()));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::from_tokens(specials().into_iter().chain(["x", "·y"])).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\nc\n").is_err());
    }

    #[test]
    fn fill_slot_updates_positions() {
        let seq = TokenSequence::new(vec![5, 0, 0, 6], 0);
        assert_eq!(seq.mask_positions(), &[1, 2]);
        let filled = seq.fill_slot(0, 9);
        assert_eq!(filled.ids(), &[5, 9, 0, 6]);
        assert_eq!(filled.mask_positions(), &[2]);
    }

    fn sample_vocab() -> Vocabulary {
        Vocabulary::from_tokens(specials().into_iter().chain([
            "a", "ab", "abc", "b", "·b", "·bc", "·c", "c", "·a", ".", "!",
        ]))
        .unwrap()
    }

    proptest! {
        #[test]
        fn greedy_pieces_are_longest(text in "[abc .!]{0,24}") {
            let v = sample_vocab();
            for word in split_words(&text) {
                let mut ids = Vec::new();
                v.segment_word(&word, &mut ids);
                let chars: Vec<char> = word.chars().collect();
                let mut pos = 0;
                for id in ids {
                    prop_assert_ne!(id, v.unk_id());
                    let piece = v.token(id).trim_start_matches(CONTINUATION);
                    let n = piece.chars().count();
                    // no strictly longer prefix is in the vocabulary
                    for longer in n + 1..=chars.len() - pos {
                        let mut cand = String::new();
                        if pos > 0 { cand.push(CONTINUATION); }
                        cand.extend(&chars[pos..pos + longer]);
                        prop_assert!(v.id(&cand).is_none());
                    }
                    pos += n;
                }
                prop_assert_eq!(pos, chars.len());
            }
        }

        #[test]
        fn detokenize_round_trip(text in "[abcABC .!]{0,24}") {
            let v = sample_vocab();
            let back = v.detokenize(&v.encode(&text));
            let strip = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
            prop_assert_eq!(strip(&back), strip(&text.to_lowercase()));
        }
    }
}
