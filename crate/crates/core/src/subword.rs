//! Frequency-merge subword vocabularies and multi-level target hierarchies.
//!
//! Each word is split into characters with the first one carrying the
//! word-start marker `▁`. Training repeatedly fuses the most frequent adjacent
//! pair (ties go to the lexicographically smallest fused string) until the
//! inventory reaches the requested size or no pair occurs twice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORD_START: char = '▁';
pub const BLANK_TOKEN: &str = "<blank>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BLANK_ID: usize = 0;
pub const UNK_ID: usize = 1;
const MERGES_SENTINEL: &str = "#MERGES";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordVocab {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    id_of: HashMap<String, usize>,
    merge_rank: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut chars = word.chars();
    let mut out = Vec::with_capacity(word.len());
    if let Some(first) = chars.next() {
        out.push(format!("{WORD_START}{first}"));
    }
    out.extend(chars.map(String::from));
    out
}

/// Replaces every non-overlapping occurrence of `(left, right)`, scanning left to right.
fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let fused = format!("{left}{right}");
            symbols[i] = fused;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl SubwordVocab {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let merge_rank = merges.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        SubwordVocab {
            tokens,
            merges,
            id_of,
            merge_rank,
        }
    }

    /// Trains a vocabulary of at most `target_size` tokens, specials included.
    pub fn train(corpus: &[String], target_size: usize) -> Result<Self> {
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                *words.entry(word_symbols(w)).or_default() += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::Config("cannot train a vocabulary on an empty corpus".into()));
        }
        let base: BTreeSet<String> = words.keys().flatten().cloned().collect();
        let minimum = base.len() + 2;
        if target_size < minimum {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} is below the base inventory; minimum feasible size is {minimum}"
            )));
        }

        let mut tokens = vec![BLANK_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(base);
        let mut known: BTreeSet<String> = tokens.iter().cloned().collect();
        let mut merges = Vec::new();
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();

        while tokens.len() < target_size {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (symbols, n) in &words {
                for pair in symbols.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += n;
                }
            }
            let best = counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb)
                    .then_with(|| {
                        let fa = format!("{}{}", pa.0, pa.1);
                        let fb = format!("{}{}", pb.0, pb.1);
                        fb.cmp(&fa)
                    })
                    .then_with(|| pb.0.cmp(pa.0))
            });
            let Some(((left, right), count)) = best else { break };
            if count < 2 {
                break;
            }
            let (left, right) = (left.to_string(), right.to_string());
            let fused = format!("{left}{right}");
            for (symbols, _) in &mut words {
                apply_merge(symbols, &left, &right);
            }
            if known.insert(fused.clone()) {
                tokens.push(fused);
            }
            merges.push((left, right));
        }
        Ok(Self::from_parts(tokens, merges))
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

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    fn segment_word(&self, word: &str, out: &mut Vec<usize>) {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut symbols, l, r);
        }
        out.extend(symbols.iter().map(|s| self.id(s).unwrap_or(UNK_ID)));
    }

    /// Token ids for `text`; symbols missing from the inventory become unk.
    pub fn segment(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            self.segment_word(w, &mut out);
        }
        out
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == BLANK_ID {
                return Err(Error::Contract("blank id in a label sequence".into()));
            }
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Lookup(format!("token id {id} outside a {}-token vocabulary", self.len())))?;
            if id == UNK_ID {
                out.push_str(UNK_TOKEN);
            } else {
                out.extend(tok.chars().map(|c| if c == WORD_START { ' ' } else { c }));
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    /// `<id>\t<token>` lines, then `#MERGES`, then `<left>\t<right>` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{i}\t{t}").unwrap();
        }
        writeln!(s, "{MERGES_SENTINEL}").unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l}\t{r}").unwrap();
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|reason| Error::format("vocabulary", path, reason))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let mut tokens = Vec::new();
        let mut saw_sentinel = false;
        for (n, line) in lines.by_ref() {
            if line == MERGES_SENTINEL {
                saw_sentinel = true;
                break;
            }
            let (id, tok) = line
                .split_once('\t')
                .ok_or(format!("line {}: expected <id>\\t<token>", n + 1))?;
            let id: usize = id.parse().map_err(|_| format!("line {}: bad id {id:?}", n + 1))?;
            if id != tokens.len() {
                return Err(format!("line {}: id {id} out of order", n + 1));
            }
            tokens.push(tok.to_string());
        }
        if !saw_sentinel {
            return Err(format!("missing {MERGES_SENTINEL} line"));
        }
        if tokens.len() < 2 || tokens[BLANK_ID] != BLANK_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err("ids 0 and 1 must be <blank> and <unk>".into());
        }
        let mut merges = Vec::new();
        for (n, line) in lines {
            let (l, r) = line
                .split_once('\t')
                .ok_or(format!("line {}: expected <left>\\t<right>", n + 1))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let unique: BTreeSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err("duplicate tokens".into());
        }
        Ok(Self::from_parts(tokens, merges))
    }
}

/// Target id sequences for one transcript, finest level first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierTargets {
    pub levels: Vec<Vec<usize>>,
}

impl HierTargets {
    pub fn level(&self, k: usize) -> &[usize] {
        &self.levels[k]
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }
}

/// Independently trained vocabularies over one corpus, one per level.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub vocabs: Vec<SubwordVocab>,
}

impl Hierarchy {
    /// `sizes` must be nondecreasing.
    pub fn build(corpus: &[String], sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("at least one vocabulary size is required".into()));
        }
        if sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "vocabulary sizes {sizes:?} must be nondecreasing"
            )));
        }
        let vocabs = sizes
            .iter()
            .map(|&n| SubwordVocab::train(corpus, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Hierarchy { vocabs })
    }

    pub fn levels(&self) -> usize {
        self.vocabs.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.vocabs.iter().map(SubwordVocab::len).collect()
    }

    pub fn segment(&self, text: &str) -> HierTargets {
        HierTargets {
            levels: self.vocabs.iter().map(|v| v.segment(text)).collect(),
        }
    }

    /// Mean segmented length per level over `corpus`.
    pub fn mean_lengths(&self, corpus: &[String]) -> Vec<f64> {
        self.vocabs
            .iter()
            .map(|v| corpus.iter().map(|l| v.segment(l).len()).sum::<usize>() as f64 / corpus.len().max(1) as f64)
            .collect()
    }

    /// Lines whose per-level lengths are not nonincreasing.
    pub fn length_violations(&self, corpus: &[String]) -> Vec<usize> {
        corpus
            .iter()
            .enumerate()
            .filter(|(_, l)| self.segment(l).lengths().windows(2).any(|w| w[0] < w[1]))
            .map(|(i, _)| i)
            .collect()
    }
}
