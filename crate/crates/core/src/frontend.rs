//! Lexicon-driven text front-end for the toy languages.
//!
//! Each language owns a phoneme inventory whose local ids start at 1 (0 is
//! padding). The model sees global ids: every language is shifted into its
//! own range, so inventories can never collide.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::atomic_write;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeInventory {
    pub language_id: u32,
    pub symbols: Vec<String>,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new(language_id: u32, symbols: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("bad phoneme symbol {s:?}")));
            }
            if ids.insert(s.clone(), i + 1).is_some() {
                return Err(Error::Config(format!("duplicate phoneme symbol {s:?}")));
            }
        }
        Ok(Self {
            language_id,
            symbols,
            ids,
        })
    }

    /// One symbol per line; id = line index + 1.
    pub fn load(language_id: u32, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let symbols = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(language_id, symbols)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.symbols.join("\n");
        text.push('\n');
        atomic_write(path.as_ref(), text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.symbols.get(i)).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| {
                self.id(s.as_ref()).ok_or_else(|| {
                    Error::Encoding(format!(
                        "symbol {:?} not in inventory of language {}",
                        s.as_ref(),
                        self.language_id
                    ))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.symbol(i)
                    .map(String::from)
                    .ok_or_else(|| Error::Encoding(format!("id {i} not valid for language {}", self.language_id)))
            })
            .collect()
    }

    fn rebuild_index(&mut self) {
        self.ids = self
            .symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i + 1))
            .collect();
    }
}

/// Word to phoneme-symbol list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    /// `word<TAB>space separated phonemes` per line.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, phones) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{}:{}: expected word<TAB>phonemes", path.display(), i + 1)))?;
            entries.insert(word.to_string(), phones.split_whitespace().map(String::from).collect());
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text: String = self
            .entries
            .iter()
            .map(|(w, p)| format!("{w}\t{}\n", p.join(" ")))
            .collect();
        atomic_write(path.as_ref(), text.as_bytes())
    }

    /// Greedy longest-prefix segmentation of one token into lexicon words.
    fn segment(&self, token: &str) -> Option<Vec<&[String]>> {
        if let Some(p) = self.entries.get(token) {
            return Some(vec![p.as_slice()]);
        }
        let mut out = Vec::new();
        let mut rest = token;
        while !rest.is_empty() {
            let cut = rest
                .char_indices()
                .map(|(i, c)| i + c.len_utf8())
                .rev()
                .find(|&end| self.entries.contains_key(&rest[..end]))?;
            out.push(self.entries[&rest[..cut]].as_slice());
            rest = &rest[cut..];
        }
        Some(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    pub language_id: u32,
}

/// Per-language inventories and lexicons.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frontend {
    inventories: Vec<PhonemeInventory>,
    lexicons: Vec<Lexicon>,
}

impl Frontend {
    /// Language `i` is `inventories[i]` / `lexicons[i]`.
    pub fn new(inventories: Vec<PhonemeInventory>, lexicons: Vec<Lexicon>) -> Result<Self> {
        if inventories.len() != lexicons.len() {
            return Err(Error::Config("one lexicon per inventory required".into()));
        }
        for (i, inv) in inventories.iter().enumerate() {
            if inv.language_id as usize != i {
                return Err(Error::Config(format!(
                    "inventory {i} declares language {}",
                    inv.language_id
                )));
            }
        }
        for (i, a) in inventories.iter().enumerate() {
            for b in &inventories[i + 1..] {
                if let Some(s) = a.symbols.iter().find(|s| b.id(s).is_some()) {
                    return Err(Error::Config(format!(
                        "symbol {s:?} shared by languages {} and {}",
                        a.language_id, b.language_id
                    )));
                }
            }
        }
        for (lex, inv) in lexicons.iter().zip(&inventories) {
            for (word, phones) in &lex.entries {
                inv.encode(phones)
                    .map_err(|e| Error::Config(format!("lexicon word {word:?}: {e}")))?;
            }
        }
        Ok(Self { inventories, lexicons })
    }

    /// Loads `inventory_<id>.txt` and `lexicon_<id>.tsv` for `0..n_languages`.
    pub fn load_dir(dir: impl AsRef<Path>, n_languages: u32) -> Result<Self> {
        let dir = dir.as_ref();
        let mut inventories = Vec::new();
        let mut lexicons = Vec::new();
        for l in 0..n_languages {
            inventories.push(PhonemeInventory::load(l, dir.join(format!("inventory_{l}.txt")))?);
            lexicons.push(Lexicon::load(dir.join(format!("lexicon_{l}.tsv")))?);
        }
        Self::new(inventories, lexicons)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (l, (inv, lex)) in self.inventories.iter().zip(&self.lexicons).enumerate() {
            inv.save(dir.join(format!("inventory_{l}.txt")))?;
            lex.save(dir.join(format!("lexicon_{l}.tsv")))?;
        }
        Ok(())
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(&mut self) {
        self.inventories.iter_mut().for_each(PhonemeInventory::rebuild_index);
    }

    pub fn n_languages(&self) -> usize {
        self.inventories.len()
    }

    pub fn inventory(&self, language_id: u32) -> Result<&PhonemeInventory> {
        self.inventories
            .get(language_id as usize)
            .ok_or_else(|| Error::Registry(format!("no inventory for language {language_id}")))
    }

    pub fn lexicon(&self, language_id: u32) -> Result<&Lexicon> {
        self.lexicons
            .get(language_id as usize)
            .ok_or_else(|| Error::Registry(format!("no lexicon for language {language_id}")))
    }

    /// Size of the joint embedding table, including the padding row.
    pub fn vocab_size(&self) -> usize {
        1 + self.inventories.iter().map(PhonemeInventory::len).sum::<usize>()
    }

    fn offset(&self, language_id: u32) -> usize {
        self.inventories[..language_id as usize]
            .iter()
            .map(PhonemeInventory::len)
            .sum()
    }

    /// Maps local ids into the language's slot of the joint table.
    pub fn global_ids(&self, seq: &PhonemeSequence) -> Result<Vec<usize>> {
        let inv = self.inventory(seq.language_id)?;
        let offset = self.offset(seq.language_id);
        seq.ids
            .iter()
            .map(|&i| {
                if i == 0 || i > inv.len() {
                    Err(Error::Encoding(format!(
                        "id {i} not valid for language {}",
                        seq.language_id
                    )))
                } else {
                    Ok(offset + i)
                }
            })
            .collect()
    }

    pub fn grapheme_to_phoneme(&self, text: &str, language_id: u32) -> Result<PhonemeSequence> {
        let lex = self.lexicon(language_id)?;
        let inv = self.inventory(language_id)?;
        let mut ids = Vec::new();
        for token in text.split_whitespace() {
            let pieces = lex.segment(token).ok_or_else(|| Error::UnknownWord {
                token: token.to_string(),
                language_id,
            })?;
            for phones in pieces {
                ids.extend(inv.encode(phones)?);
            }
        }
        Ok(PhonemeSequence { ids, language_id })
    }

    pub fn encode_symbols<S: AsRef<str>>(&self, symbols: &[S], language_id: u32) -> Result<PhonemeSequence> {
        Ok(PhonemeSequence {
            ids: self.inventory(language_id)?.encode(symbols)?,
            language_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn syms(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn toy() -> Frontend {
        let inv0 = PhonemeInventory::new(0, syms(&["b", "a", "k"])).unwrap();
        let inv1 = PhonemeInventory::new(1, syms(&["th", "aa_T1"])).unwrap();
        let mut lex0 = Lexicon::default();
        lex0.entries.insert("ba".into(), syms(&["b", "a"]));
        lex0.entries.insert("k".into(), syms(&["k"]));
        let mut lex1 = Lexicon::default();
        lex1.entries.insert("thaa".into(), syms(&["th", "aa_T1"]));
        Frontend::new(vec![inv0, inv1], vec![lex0, lex1]).unwrap()
    }

    #[test]
    fn lexicon_concatenation() {
        let fe = toy();
        let seq = fe.grapheme_to_phoneme("ba ba", 0).unwrap();
        let inv = fe.inventory(0).unwrap();
        assert_eq!(inv.decode(&seq.ids).unwrap(), syms(&["b", "a", "b", "a"]));
    }

    #[test]
    fn longest_match_inside_a_token() {
        let fe = toy();
        let seq = fe.grapheme_to_phoneme("bakba", 0).unwrap();
        assert_eq!(
            fe.inventory(0).unwrap().decode(&seq.ids).unwrap(),
            syms(&["b", "a", "k", "b", "a"])
        );
    }

    #[test]
    fn empty_text_is_empty_sequence() {
        assert!(toy().grapheme_to_phoneme("   ", 1).unwrap().ids.is_empty());
    }

    #[test]
    fn unknown_word_names_the_token() {
        let err = toy().grapheme_to_phoneme("ba zz", 0).unwrap_err();
        assert!(matches!(&err, Error::UnknownWord { token, .. } if token == "zz"));
        assert!(err.to_string().contains("zz"));
    }

    #[test]
    fn encode_uses_line_index_plus_one() {
        let inv = PhonemeInventory::new(0, syms(&["s0", "s1"])).unwrap();
        assert_eq!(inv.encode(&["s0", "s1"]).unwrap(), vec![1, 2]);
    }

    #[test]
    fn other_language_symbol_fails_to_encode() {
        let fe = toy();
        assert!(matches!(fe.encode_symbols(&["th"], 0), Err(Error::Encoding(_))));
    }

    #[test]
    fn global_ranges_are_disjoint() {
        let fe = toy();
        assert_eq!(fe.vocab_size(), 6);
        let a = fe.global_ids(&fe.encode_symbols(&["b", "a", "k"], 0).unwrap()).unwrap();
        let b = fe.global_ids(&fe.encode_symbols(&["th", "aa_T1"], 1).unwrap()).unwrap();
        assert_eq!(a, vec![1, 2, 3]);
        assert_eq!(b, vec![4, 5]);
    }

    #[test]
    fn overlapping_inventories_are_rejected() {
        let inv0 = PhonemeInventory::new(0, syms(&["a"])).unwrap();
        let inv1 = PhonemeInventory::new(1, syms(&["a"])).unwrap();
        assert!(Frontend::new(vec![inv0, inv1], vec![Lexicon::default(), Lexicon::default()]).is_err());
    }

    #[test]
    fn files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let fe = toy();
        fe.save_dir(dir.path()).unwrap();
        assert_eq!(Frontend::load_dir(dir.path(), 2).unwrap(), fe);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(idx in prop::collection::vec(0usize..3, 0..30)) {
            let inv = PhonemeInventory::new(0, syms(&["b", "a", "k"])).unwrap();
            let symbols: Vec<String> = idx.iter().map(|&i| inv.symbols[i].clone()).collect();
            let ids = inv.encode(&symbols).unwrap();
            prop_assert_eq!(inv.decode(&ids).unwrap(), symbols);
        }
    }
}
