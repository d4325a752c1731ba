//! Text ingestion: vocabulary, WordPiece-style tokenization and model input
//! sequences.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

const CONTINUATION: &str = "##";

/// Lowercases and collapses whitespace, dropping it at both ends.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Token inventory with the special tokens pinned to indices 0..5.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list. The first five
    /// entries must be the special tokens in their fixed order.
    pub fn from_entries(entries: Vec<String>) -> Result<Self> {
        if entries.len() < NUM_SPECIAL || entries.iter().zip(SPECIAL_TOKENS).any(|(e, s)| e.as_str() != s) {
            return Err(Error::Vocab("special tokens must occupy indices 0-4".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() || e.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("invalid token at index {i}: {e:?}")));
            }
            if index.insert(e.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token {e:?}")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    /// One token per line; the line number is the index.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let token = line.trim_end_matches('\r');
            if token.is_empty() {
                continue;
            }
            entries.push(token.to_string());
        }
        Self::from_entries(entries)
    }
}

/// Builds a vocabulary of frequency-ranked whole words and characters.
///
/// Candidates are whole words and single characters counted over the
/// normalized corpus, ranked by descending frequency with lexicographic
/// tie-breaking. Every character of the corpus is kept even when the word
/// budget is exhausted, and its `##` continuation form is appended after the
/// ranked entries, so greedy matching always finds a segmentation.
pub fn build_vocab<I, S>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size <= NUM_SPECIAL {
        return Err(Error::Config(format!("max_size must be at least {}, got {max_size}", NUM_SPECIAL + 1)));
    }
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    let mut chars: BTreeMap<String, usize> = BTreeMap::new();
    for text in corpus {
        for word in normalize(text.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            for c in word.chars() {
                *chars.entry(c.to_string()).or_default() += 1;
            }
            if word.chars().count() > 1 {
                *words.entry(word.to_string()).or_default() += 1;
            }
        }
    }
    if chars.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let rank = |m: &BTreeMap<String, usize>| {
        let mut v: Vec<(String, usize)> = m.iter().map(|(k, c)| (k.clone(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    };

    let budget = max_size - NUM_SPECIAL;
    let word_budget = budget.saturating_sub(chars.len());
    let mut chosen: Vec<(String, usize)> = rank(&chars);
    chosen.extend(rank(&words).into_iter().take(word_budget));
    chosen.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut entries: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    entries.extend(chosen.into_iter().map(|(t, _)| t));
    for (c, _) in rank(&chars) {
        entries.push(format!("{CONTINUATION}{c}"));
    }
    Vocab::from_entries(entries)
}

/// Greedy longest-prefix WordPiece segmentation.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    let mut out = Vec::new();
    for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
        match segment_word(word, vocab) {
            Some(pieces) => out.extend(pieces),
            None => out.push(UNK),
        }
    }
    out
}

fn segment_word(word: &str, vocab: &Vocab) -> Option<Vec<usize>> {
    let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain(std::iter::once(word.len())).collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut piece = String::new();
    while start + 1 < bounds.len() {
        let mut found = None;
        for end in (start + 1..bounds.len()).rev() {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION);
            }
            piece.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        let (id, end) = found?;
        pieces.push(id);
        start = end;
    }
    Some(pieces)
}

/// Token ids with a parallel attention mask (1 = real token, 0 = padding).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    fn padded(mut ids: Vec<usize>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mut attention_mask = vec![1u8; real];
        attention_mask.resize(max_len, 0);
        Self { ids, attention_mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

/// `[CLS] + tokens`, truncated and padded to exactly `max_len`.
pub fn encode_single(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(tokenize(text, vocab));
    TokenSequence::padded(ids, max_len)
}

/// `[CLS] + query + [SEP] + ad`, truncated and padded to exactly `max_len`.
///
/// Over-long pairs lose tokens from the tails of the two sides in
/// alternation, starting with the longer side (the query on ties). A side
/// that runs empty is skipped.
pub fn encode_pair(query: &str, ad: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    let mut q = tokenize(query, vocab);
    let mut a = tokenize(ad, vocab);
    let budget = max_len.saturating_sub(2);
    let mut trim_query = q.len() >= a.len();
    while q.len() + a.len() > budget {
        if (trim_query && !q.is_empty()) || a.is_empty() {
            q.pop();
        } else {
            a.pop();
        }
        trim_query = !trim_query;
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(q);
    ids.push(SEP);
    ids.extend(a);
    TokenSequence::padded(ids, max_len)
}

/// A `(query, ad, label)` supervision record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledTriple {
    pub query: String,
    pub ad: String,
    pub label: u8,
}

impl LabeledTriple {
    pub fn new(query: &str, ad: &str, label: u8) -> Result<Self> {
        let query = normalize(query);
        let ad = normalize(ad);
        if query.is_empty() || ad.is_empty() {
            return Err(Error::Config("query and ad must be non-empty".into()));
        }
        if label > 1 {
            return Err(Error::Config(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self { query, ad, label })
    }
}

/// Parses `query<TAB>ad<TAB>label` lines. Blank lines are skipped.
pub fn load_labeled_triples(reader: impl BufRead) -> Result<Vec<LabeledTriple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", fields.len())));
        }
        let label: u8 = match fields[2].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(err(format!("label must be 0 or 1, got {other:?}"))),
        };
        let triple = LabeledTriple::new(fields[0], fields[1], label).map_err(|e| err(e.to_string()))?;
        out.push(triple);
    }
    Ok(out)
}

pub fn triples_to_tsv(triples: &[LabeledTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(&format!("{}\t{}\t{}\n", t.query, t.ad, t.label));
    }
    out
}
