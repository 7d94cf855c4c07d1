use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
/// Separator inserted between context turns.
pub const EOT: u32 = 3;
pub const EOT_TOKEN: &str = "__eot__";

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", EOT_TOKEN];

/// Dense token ↔ id map with reserved ids 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Vocabulary holding only the reserved entries.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.push(t);
        }
        v
    }

    fn push(&mut self, token: &str) -> u32 {
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Adds every whitespace token of `texts` (lowercased), in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        let words: BTreeSet<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .collect();
        for w in words {
            if !v.index.contains_key(&w) {
                v.push(&w);
            }
        }
        v
    }

    /// Builds from explicit `(token, id)` pairs; ids must be dense and the
    /// reserved ids, when present, must keep their reserved tokens.
    pub fn from_entries(entries: impl IntoIterator<Item = (String, u32)>) -> Result<Self> {
        let mut slots: Vec<Option<String>> = Vec::new();
        for (tok, id) in entries {
            let i = id as usize;
            if slots.len() <= i {
                slots.resize(i + 1, None);
            }
            if slots[i].is_some() {
                return Err(Error::Format(format!("vocabulary id {id} assigned twice")));
            }
            slots[i] = Some(tok);
        }
        for (i, r) in RESERVED.iter().enumerate() {
            match slots.get(i) {
                Some(Some(t)) if t != r => {
                    return Err(Error::Format(format!("reserved id {i} must be {r}, found {t}")))
                }
                Some(Some(_)) => {}
                _ => {
                    if slots.len() <= i {
                        slots.resize(i + 1, None);
                    }
                    slots[i] = Some(r.to_string());
                }
            }
        }
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for (i, s) in slots.into_iter().enumerate() {
            let tok = s.ok_or_else(|| Error::Format(format!("vocabulary ids not dense: {i} missing")))?;
            if v.index.contains_key(&tok) {
                return Err(Error::Format(format!("token {tok:?} listed twice")));
            }
            v.push(&tok);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Lowercased whitespace split, UNK fallback, BOS first, truncated to
    /// `max_seq_len` ids in total.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Vec<u32> {
        std::iter::once(BOS)
            .chain(
                text.split_whitespace()
                    .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK)),
            )
            .take(max_seq_len.max(1))
            .collect()
    }

    /// Writes `token<TAB>id` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(w, "{tok}\t{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Data {
                path: path.to_path_buf(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad("expected token<TAB>id"))?;
            let id: u32 = id.parse().map_err(|_| bad("id is not an integer"))?;
            entries.push((tok.to_string(), id));
        }
        Self::from_entries(entries)
    }
}
