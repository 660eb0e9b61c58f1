//! Word-level vocabulary: four reserved tokens followed by the lexicon words
//! in their lexicon order.

use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const N_SPECIALS: u32 = 4;

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: &[String]) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), N_SPECIALS + i as u32))
            .collect();
        Vocab { words: words.to_vec(), index }
    }

    /// Total size including the reserved tokens.
    pub fn size(&self) -> usize {
        self.words.len() + N_SPECIALS as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        if id < N_SPECIALS {
            None
        } else {
            self.words.get((id - N_SPECIALS) as usize).map(|s| s.as_str())
        }
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Words only; reserved tokens are dropped and unknown ids render as a
    /// placeholder so a bad id is visible rather than silent.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= N_SPECIALS)
            .map(|&id| self.word(id).unwrap_or("<bad-id>").to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vocab {
        Vocab::new(&["red".into(), "green".into(), "blue".into()])
    }

    #[test]
    fn ids_start_after_reserved_tokens() {
        let v = toy();
        assert_eq!(v.size(), 7);
        assert_eq!(v.id("red"), 4);
        assert_eq!(v.id("blue"), 6);
        assert_eq!(v.word(5), Some("green"));
        assert_eq!(v.word(PAD), None);
    }

    #[test]
    fn unknown_maps_to_unk() {
        assert_eq!(toy().id("mauve"), UNK);
    }

    #[test]
    fn encode_decode_roundtrip_skips_specials() {
        let v = toy();
        let ids = v.encode(&["blue".into(), "red".into()]);
        assert_eq!(ids, vec![6, 4]);
        let mut framed = vec![SOS];
        framed.extend(&ids);
        framed.push(EOS);
        assert_eq!(v.decode(&framed), vec!["blue".to_string(), "red".to_string()]);
    }
}
