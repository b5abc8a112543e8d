use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIL: &str = "SIL";
pub const SP: &str = "SP";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Phone {
    pub symbol: String,
    pub is_special: bool,
}

impl Phone {
    pub fn new(symbol: impl Into<String>) -> Self {
        let symbol = symbol.into();
        let is_special = symbol == SIL || symbol == SP;
        Self { symbol, is_special }
    }

    pub fn silence() -> Self {
        Self::new(SIL)
    }

    pub fn short_pause() -> Self {
        Self::new(SP)
    }

    pub fn is_short_pause(&self) -> bool {
        self.symbol == SP
    }
}

impl fmt::Display for Phone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbol)
    }
}

/// Closed phone set. Ids 0 and 1 are always SIL and SP; the rest follow in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct PhoneInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhoneInventory {
    pub fn new<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let rest: BTreeSet<String> = symbols
            .into_iter()
            .map(Into::into)
            .filter(|s| s != SIL && s != SP)
            .collect();
        let symbols: Vec<String> = [SIL.to_string(), SP.to_string()]
            .into_iter()
            .chain(rest)
            .collect();
        Self::from(symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::UnknownPhone(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn ids(&self, phones: &PhoneSequence) -> Result<Vec<usize>> {
        phones.iter().map(|p| self.id(&p.symbol)).collect()
    }
}

impl From<Vec<String>> for PhoneInventory {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }
}

impl From<PhoneInventory> for Vec<String> {
    fn from(inv: PhoneInventory) -> Self {
        inv.symbols
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhoneSequence {
    pub phones: Vec<Phone>,
}

impl PhoneSequence {
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            phones: symbols.into_iter().map(Phone::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Phone> {
        self.phones.iter()
    }

    pub fn symbols(&self) -> Vec<&str> {
        self.phones.iter().map(|p| p.symbol.as_str()).collect()
    }

    /// Appends a phone, dropping an SP that would follow another SP.
    fn push(&mut self, phone: Phone) {
        if phone.is_short_pause() && self.phones.last().is_some_and(Phone::is_short_pause) {
            return;
        }
        self.phones.push(phone);
    }
}

impl fmt::Display for PhoneSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.symbols().join(" "))
    }
}

/// Grapheme-to-phone table. Graphemes whose only phone is `SP` are punctuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
    punctuation: BTreeSet<String>,
    inventory: PhoneInventory,
    longest: usize,
}

impl Lexicon {
    pub fn new(
        entries: BTreeMap<String, Vec<String>>,
        punctuation: BTreeSet<String>,
    ) -> Result<Self> {
        for (g, phones) in &entries {
            if g.is_empty() || g.chars().any(char::is_whitespace) {
                return Err(Error::InvalidLexicon {
                    line: 0,
                    reason: format!("bad grapheme {g:?}"),
                });
            }
            if phones.is_empty() {
                return Err(Error::InvalidLexicon {
                    line: 0,
                    reason: format!("grapheme {g:?} has no phones"),
                });
            }
        }
        let inventory = PhoneInventory::new(entries.values().flatten().cloned());
        let longest = entries
            .keys()
            .chain(&punctuation)
            .map(|g| g.chars().count())
            .max()
            .unwrap_or(1);
        Ok(Self {
            entries,
            punctuation,
            inventory,
            longest,
        })
    }

    /// Parses `grapheme<TAB>phone phone ...` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut punctuation = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |reason: &str| Error::InvalidLexicon {
                line: n + 1,
                reason: reason.to_string(),
            };
            let (grapheme, phones) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let grapheme = grapheme.trim();
            let phones: Vec<String> = phones.split_whitespace().map(str::to_string).collect();
            if grapheme.is_empty() {
                return Err(bad("empty grapheme"));
            }
            if phones.is_empty() {
                return Err(bad("no phones"));
            }
            if phones.len() == 1 && phones[0] == SP {
                punctuation.insert(grapheme.to_string());
            } else if phones.iter().any(|p| p == SP) {
                return Err(bad("SP may only appear alone"));
            } else if entries.insert(grapheme.to_string(), phones).is_some() {
                return Err(bad("duplicate grapheme"));
            }
        }
        Self::new(entries, punctuation)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (g, phones) in &self.entries {
            out.push_str(&format!("{g}\t{}\n", phones.join(" ")));
        }
        for p in &self.punctuation {
            out.push_str(&format!("{p}\t{SP}\n"));
        }
        out
    }

    pub fn inventory(&self) -> &PhoneInventory {
        &self.inventory
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<String>> {
        &self.entries
    }

    pub fn punctuation(&self) -> &BTreeSet<String> {
        &self.punctuation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct G2pOptions {
    /// Wrap the sequence in SIL, replacing any SP at either end.
    pub boundary_silence: bool,
}

impl Default for G2pOptions {
    fn default() -> Self {
        Self {
            boundary_silence: true,
        }
    }
}

/// Maps text to phones by greedy longest match against the lexicon.
///
/// Whitespace separates nothing by itself; positions in errors are character indices.
pub fn text_to_phones(text: &str, lexicon: &Lexicon, opts: G2pOptions) -> Result<PhoneSequence> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let chars: Vec<char> = text.chars().collect();
    let mut seq = PhoneSequence::default();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let max_len = lexicon.longest.min(chars.len() - i);
        let matched = (1..=max_len).rev().find_map(|len| {
            let token: String = chars[i..i + len].iter().collect();
            if let Some(phones) = lexicon.entries.get(&token) {
                Some((len, Some(phones)))
            } else if lexicon.punctuation.contains(&token) {
                Some((len, None))
            } else {
                None
            }
        });
        match matched {
            Some((len, Some(phones))) => {
                for p in phones {
                    seq.push(Phone::new(p.as_str()));
                }
                i += len;
            }
            Some((len, None)) => {
                seq.push(Phone::short_pause());
                i += len;
            }
            None => {
                return Err(Error::UnknownGrapheme {
                    token: chars[i].to_string(),
                    position: i,
                })
            }
        }
    }
    if opts.boundary_silence {
        while seq.phones.first().is_some_and(Phone::is_short_pause) {
            seq.phones.remove(0);
        }
        while seq.phones.last().is_some_and(Phone::is_short_pause) {
            seq.phones.pop();
        }
        seq.phones.insert(0, Phone::silence());
        if seq.phones.len() > 1 {
            seq.phones.push(Phone::silence());
        }
    }
    Ok(seq)
}
