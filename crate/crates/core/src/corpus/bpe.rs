//! Shared byte-pair-encoding vocabulary.
//!
//! Words are split on whitespace into characters followed by the end-of-word
//! symbol `</w>`; the most frequent adjacent pair is merged repeatedly, ties
//! going to the lexicographically smallest `(left, right)` pair.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::CorpusError;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const END_OF_WORD: &str = "</w>";

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];
const FILE_MAGIC: &str = "#hiernmt-bpe v1";

pub fn lang_tag(lang: &str) -> String {
    format!("<2{lang}>")
}

#[derive(Debug)]
pub struct BpeVocab {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    cache: Mutex<HashMap<String, Vec<TokenId>>>,
}

impl Clone for BpeVocab {
    fn clone(&self) -> Self {
        BpeVocab::from_parts(self.merges.clone(), self.tokens.clone())
            .expect("a valid vocabulary clones to a valid vocabulary")
    }
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.merges == other.merges && self.tokens == other.tokens
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(String::from).collect();
    s.push(END_OF_WORD.to_string());
    s
}

/// Learns `num_merges` merges over every whitespace-separated word of `texts`.
/// `tag_langs` reserves one `<2xx>` token per listed language.
pub fn learn_bpe<S: AsRef<str>>(texts: &[S], num_merges: usize, tag_langs: &[String]) -> BpeVocab {
    let mut word_freq: HashMap<&str, u64> = HashMap::new();
    for t in texts {
        for w in t.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(&str, u64)> = word_freq.into_iter().collect();
    words.sort_unstable();

    let chars: BTreeSet<String> = words.iter().flat_map(|(w, _)| w.chars().map(String::from)).collect();

    // Symbols are interned; pair statistics are kept incrementally.
    let mut sym_names: Vec<String> = Vec::new();
    let mut sym_ids: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: &str, names: &mut Vec<String>| -> u32 {
        if let Some(&i) = sym_ids.get(s) {
            return i;
        }
        let i = names.len() as u32;
        names.push(s.to_string());
        sym_ids.insert(s.to_string(), i);
        i
    };
    let mut seqs: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| word_symbols(w).iter().map(|s| intern(s, &mut sym_names)).collect())
        .collect();
    let freqs: Vec<u64> = words.iter().map(|(_, f)| *f).collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, seq) in seqs.iter().enumerate() {
        for p in seq.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += freqs[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    for _ in 0..num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&sym_names[pa.0 as usize], &sym_names[pa.1 as usize]);
                    let kb = (&sym_names[pb.0 as usize], &sym_names[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((a, b)) = best else { break };
        let merged_name = format!("{}{}", sym_names[a as usize], sym_names[b as usize]);
        let m = intern(&merged_name, &mut sym_names);
        merges.push((sym_names[a as usize].clone(), sym_names[b as usize].clone()));

        let mut affected: Vec<usize> = where_.remove(&(a, b)).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let f = freqs[wi];
            let seq = &mut seqs[wi];
            for p in seq.windows(2) {
                if let Some(c) = pair_counts.get_mut(&(p[0], p[1])) {
                    *c -= f;
                }
            }
            let mut out = Vec::with_capacity(seq.len());
            let mut i = 0;
            while i < seq.len() {
                if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
                    out.push(m);
                    i += 2;
                } else {
                    out.push(seq[i]);
                    i += 1;
                }
            }
            *seq = out;
            for p in seq.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += f;
                where_.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    let mut seen: HashSet<String> = tokens.iter().cloned().collect();
    let mut add = |t: String, tokens: &mut Vec<String>| {
        if seen.insert(t.clone()) {
            tokens.push(t);
        }
    };
    for l in tag_langs {
        add(lang_tag(l), &mut tokens);
    }
    for c in chars {
        add(c, &mut tokens);
    }
    add(END_OF_WORD.to_string(), &mut tokens);
    for (a, b) in &merges {
        add(format!("{a}{b}"), &mut tokens);
    }
    BpeVocab::from_parts(merges, tokens).expect("learned vocabulary is consistent")
}

impl BpeVocab {
    pub fn from_parts(merges: Vec<(String, String)>, tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS {
            return Err(CorpusError::Vocab(
                "token table must start with the special tokens".into(),
            ));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as TokenId).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(BpeVocab {
            merges,
            ranks,
            tokens,
            ids,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn tag_id(&self, lang: &str) -> Option<TokenId> {
        self.id(&lang_tag(lang))
    }

    fn is_tag(&self, id: TokenId) -> bool {
        self.token(id)
            .is_some_and(|t| t.starts_with("<2") && t.ends_with('>') && t.len() > 3)
    }

    /// Subword symbols of one word after applying merges in learned order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && &syms[i] == a && &syms[i + 1] == b {
                    out.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    out.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            syms = out;
        }
        syms
    }

    fn encode_word(&self, word: &str) -> Vec<TokenId> {
        if let Some(ids) = self.cache.lock().unwrap().get(word) {
            return ids.clone();
        }
        let ids: Vec<TokenId> = self
            .segment_word(word)
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect();
        self.cache.lock().unwrap().insert(word.to_string(), ids.clone());
        ids
    }

    /// Subword ids without BOS/EOS.
    pub fn encode_plain(&self, sentence: &str) -> Vec<TokenId> {
        sentence.split_whitespace().flat_map(|w| self.encode_word(w)).collect()
    }

    /// `[BOS, ids..., EOS]`.
    pub fn encode(&self, sentence: &str) -> Vec<TokenId> {
        let mut out = vec![BOS];
        out.extend(self.encode_plain(sentence));
        out.push(EOS);
        out
    }

    /// Joins subwords, turning end-of-word markers into spaces. Specials and
    /// language tags are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || self.is_tag(id) {
                continue;
            }
            match self.token(id) {
                Some(t) => s.push_str(t),
                None => s.push_str(SPECIALS[UNK as usize]),
            }
        }
        let s = s.replace(END_OF_WORD, " ");
        s.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("{FILE_MAGIC}\nmerges {}\n", self.merges.len());
        for (a, b) in &self.merges {
            s.push_str(&format!("{a} {b}\n"));
        }
        s.push_str(&format!("tokens {}\n", self.tokens.len()));
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self, CorpusError> {
        let bad = |m: &str| CorpusError::Vocab(m.to_string());
        let mut lines = text.lines();
        if lines.next() != Some(FILE_MAGIC) {
            return Err(bad("missing vocabulary header"));
        }
        let count = |line: Option<&str>, key: &str| -> Result<usize, CorpusError> {
            line.and_then(|l| l.strip_prefix(key))
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| bad(&format!("expected `{key}<count>`")))
        };
        let n = count(lines.next(), "merges ")?;
        let mut merges = Vec::with_capacity(n);
        for _ in 0..n {
            let l = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (a, b) = l.split_once(' ').ok_or_else(|| bad("malformed merge line"))?;
            merges.push((a.to_string(), b.to_string()));
        }
        let n = count(lines.next(), "tokens ")?;
        let tokens: Vec<String> = lines.by_ref().take(n).map(String::from).collect();
        if tokens.len() != n {
            return Err(bad("truncated token table"));
        }
        BpeVocab::from_parts(merges, tokens)
    }

    /// SHA-256 of the file form, hex encoded.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_file_string().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_traced_merges() {
        let v = learn_bpe(&["ab ab ab ac"], 3, &[]);
        assert_eq!(
            v.merges(),
            &[
                ("a".to_string(), "b".to_string()),
                ("ab".to_string(), "</w>".to_string()),
                ("a".to_string(), "c".to_string()),
            ]
        );
        assert_eq!(v.segment_word("ab"), vec!["ab</w>"]);
        assert_eq!(v.segment_word("ac"), vec!["ac", "</w>"]);
    }

    #[test]
    fn zero_merges_gives_characters_and_specials() {
        let v = learn_bpe(&["ba ab"], 0, &["de".to_string()]);
        let toks: Vec<_> = (0..v.len() as u32).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["<pad>", "<s>", "</s>", "<unk>", "<2de>", "a", "b", "</w>"]);
    }

    #[test]
    fn encode_examples() {
        let v = learn_bpe(&["ab ab ab ac"], 2, &[]);
        assert_eq!(v.encode(""), vec![BOS, EOS]);
        let ab = v.id("ab</w>").unwrap();
        assert_eq!(v.encode("ab"), vec![BOS, ab, EOS]);
        let enc = v.encode("az");
        assert_eq!(enc[2], UNK);
        assert_eq!(v.decode(&v.encode("ab ac ab")), "ab ac ab");
    }

    #[test]
    fn file_round_trip() {
        let v = learn_bpe(&["the cat sat on the mat", "der hund"], 20, &["de".into(), "en".into()]);
        let back = BpeVocab::from_file_string(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(BpeVocab::from_file_string("junk").is_err());
        assert_eq!(v.tag_id("de"), Some(4));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-e]{1,6}", 0..12), merges in 0usize..40) {
            let training = "abc bad cede ace dab ebb";
            let v = learn_bpe(&[training], merges, &[]);
            let s = words.join(" ");
            prop_assert_eq!(v.decode(&v.encode(&s)), s);
        }
    }
}
