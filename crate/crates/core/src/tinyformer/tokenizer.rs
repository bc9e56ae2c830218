use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::tokens::TokenCounter;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
pub const UNK: u32 = 4;
const SPECIALS: usize = 5;

/// Character-level tokenizer whose alphabet is fitted on a corpus.
///
/// Ids 0..5 are reserved for `PAD`, `BOS`, `SEP`, `EOS` and `UNK`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct CharTokenizer {
    alphabet: Vec<char>,
    index: HashMap<char, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    alphabet: String,
}

impl From<TokenizerRepr> for CharTokenizer {
    fn from(r: TokenizerRepr) -> Self {
        CharTokenizer::from_alphabet(r.alphabet.chars())
    }
}

impl From<CharTokenizer> for TokenizerRepr {
    fn from(t: CharTokenizer) -> Self {
        TokenizerRepr {
            alphabet: t.alphabet.iter().collect(),
        }
    }
}

impl CharTokenizer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let chars: BTreeSet<char> = texts.into_iter().flat_map(str::chars).collect();
        Self::from_alphabet(chars)
    }

    fn from_alphabet(chars: impl IntoIterator<Item = char>) -> Self {
        let mut alphabet = Vec::new();
        let mut index = HashMap::new();
        for c in chars {
            if !index.contains_key(&c) {
                index.insert(c, (SPECIALS + alphabet.len()) as u32);
                alphabet.push(c);
            }
        }
        Self { alphabet, index }
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.alphabet.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.chars()
            .map(|c| *self.index.get(&c).unwrap_or(&UNK))
            .collect()
    }

    /// Decodes ordinary tokens; special tokens are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                (id as usize)
                    .checked_sub(SPECIALS)
                    .and_then(|i| self.alphabet.get(i))
            })
            .collect()
    }

    /// `BOS instruction SEP`: the generation prefix.
    pub fn encode_prompt(&self, instruction: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(instruction));
        ids.push(SEP);
        ids
    }
}

impl TokenCounter for CharTokenizer {
    fn name(&self) -> &str {
        "char"
    }

    fn count(&self, text: &str) -> usize {
        text.chars().count()
    }
}
