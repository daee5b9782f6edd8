//! Byte-fallback subword codec.
//!
//! Ids `0..256` are the single bytes, so every byte string is encodable and
//! there is no unknown token. Learned multi-byte tokens follow in merge
//! order. Encoding is greedy longest match over the whole vocabulary.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{AcnError, Result};

pub const BYTE_TOKENS: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
    max_len: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::bytes_only()
    }
}

impl Vocab {
    pub fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        Self::from_tokens(tokens).expect("byte tokens are distinct")
    }

    /// Builds a vocabulary from an ordered token list whose first 256 entries
    /// must be the single bytes in order.
    pub fn from_tokens(tokens: Vec<Vec<u8>>) -> Result<Self> {
        if tokens.len() < BYTE_TOKENS
            || tokens[..BYTE_TOKENS]
                .iter()
                .enumerate()
                .any(|(i, t)| t.as_slice() != [i as u8])
        {
            return Err(AcnError::Vocab(
                "the first 256 tokens must be the single bytes in order".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(AcnError::Vocab(format!("token {id} is empty")));
            }
            if index.insert(t.clone(), id).is_some() {
                return Err(AcnError::Vocab(format!("token {id} is a duplicate")));
            }
        }
        let max_len = tokens.iter().map(Vec::len).max().unwrap_or(1);
        Ok(Self {
            tokens,
            index,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&[u8]> {
        self.tokens.get(id).map(Vec::as_slice)
    }

    pub fn id(&self, token: &[u8]) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Greedy longest-match segmentation.
    pub fn encode(&self, text: impl AsRef<[u8]>) -> Vec<usize> {
        let bytes = text.as_ref();
        let mut out = Vec::with_capacity(bytes.len() / 2 + 1);
        let mut i = 0;
        while i < bytes.len() {
            let longest = self.max_len.min(bytes.len() - i);
            let (id, len) = (1..=longest)
                .rev()
                .find_map(|l| self.index.get(&bytes[i..i + l]).map(|&id| (id, l)))
                .expect("single bytes are always present");
            out.push(id);
            i += len;
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let t = self.token(id).ok_or_else(|| AcnError::TokenOutOfRange {
                id,
                vocab_size: self.len(),
            })?;
            out.extend_from_slice(t);
        }
        Ok(out)
    }

    /// [`Vocab::decode`] with lossy UTF-8 conversion.
    pub fn decode_string(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode(ids)?).into_owned())
    }

    /// One token per line, every token hex-encoded; line number = id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            for b in t {
                s.push_str(&format!("{b:02x}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let tokens = text
            .lines()
            .enumerate()
            .map(|(n, line)| decode_hex(line.trim_end_matches('\r')).ok_or_else(|| {
                AcnError::Vocab(format!("line {}: invalid hex token {line:?}", n + 1))
            }))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }

    /// SHA-256 of the file representation, hex-encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_file_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| AcnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| AcnError::io(path, e))?;
        Self::from_file_string(&text)
    }
}

fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Learns merges by repeatedly fusing the most frequent adjacent pair until
/// the vocabulary reaches `target_size` or no pair occurs twice. Ties go to
/// the lexicographically smallest `(left bytes, right bytes)` pair.
pub fn train_vocab<I, S>(corpus: I, target_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    if target_size < BYTE_TOKENS {
        return Err(AcnError::Vocab(format!(
            "target size {target_size} is below the {BYTE_TOKENS} byte tokens"
        )));
    }
    let mut tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut index: HashMap<Vec<u8>, usize> =
        tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    let mut seqs: Vec<Vec<usize>> = corpus
        .into_iter()
        .map(|s| s.as_ref().iter().map(|&b| b as usize).collect())
        .filter(|s: &Vec<usize>| s.len() >= 2)
        .collect();

    while tokens.len() < target_size {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1;
            }
        }
        let best = counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&tokens[pa.0], &tokens[pa.1]);
                    let kb = (&tokens[pb.0], &tokens[pb.1]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((l, r)) = best else { break };
        let merged = [tokens[l].as_slice(), tokens[r].as_slice()].concat();
        let id = match index.get(&merged) {
            Some(&id) => id,
            None => {
                tokens.push(merged.clone());
                index.insert(merged, tokens.len() - 1);
                tokens.len() - 1
            }
        };
        for s in &mut seqs {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                    out.push(id);
                    i += 2;
                } else {
                    out.push(s[i]);
                    i += 1;
                }
            }
            *s = out;
        }
    }
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_target_gives_byte_vocab() {
        let v = train_vocab(["hello hello"], 256).unwrap();
        assert_eq!(v, Vocab::bytes_only());
    }

    #[test]
    fn learns_most_frequent_pair() {
        let v = train_vocab(["aaaa"], 257).unwrap();
        assert_eq!(v.len(), 257);
        assert_eq!(v.token(256), Some(&b"aa"[..]));
    }

    #[test]
    fn ties_go_to_smallest_pair() {
        // "ab" and "cd" both occur twice.
        let v = train_vocab(["cdab", "abcd"], 257).unwrap();
        assert_eq!(v.token(256), Some(&b"ab"[..]));
    }

    #[test]
    fn stops_when_nothing_repeats() {
        let v = train_vocab(["abcdef"], 400).unwrap();
        assert_eq!(v.len(), 256);
    }

    #[test]
    fn deterministic() {
        let corpus = ["the cat sat on the mat", "the hat"];
        assert_eq!(train_vocab(corpus, 270).unwrap(), train_vocab(corpus, 270).unwrap());
    }

    #[test]
    fn too_small_target_is_an_error() {
        assert!(train_vocab(["x"], 255).is_err());
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(Vocab::bytes_only().encode("").is_empty());
    }

    #[test]
    fn unseen_entity_round_trips() {
        let v = train_vocab(["the golden curry is in the centre"; 4], 300).unwrap();
        let s = "zxqv bolaro kitchen";
        assert_eq!(v.decode(&v.encode(s)).unwrap(), s.as_bytes());
    }

    #[test]
    fn unknown_id_is_an_error() {
        assert!(Vocab::bytes_only().decode(&[256]).is_err());
    }

    #[test]
    fn file_round_trip_and_hash() {
        let v = train_vocab(["banana bandana", "ban\nana"], 270).unwrap();
        let text = v.to_file_string();
        let back = Vocab::from_file_string(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert_eq!(text.lines().nth(10), Some("0a"));
        assert!(Vocab::from_file_string("zz\n").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_bytes(s in proptest::collection::vec(any::<u8>(), 0..200)) {
            let v = train_vocab(["abcabcabc xyzxyz", "ab ab ab"], 280).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s)).unwrap(), s);
        }
    }
}
