use std::path::Path;

use super::RESERVED;
use crate::error::{Error, Result};

/// Class id to character mapping. The text form has one character per line;
/// the first line is id [`RESERVED`], since ids below it are the start, end
/// and pad symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    chars: Vec<char>,
}

impl SymbolTable {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) {
                return Err(Error::config(format!("symbol '{c}' listed twice")));
            }
        }
        Ok(Self { chars })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let chars = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(n, l)| {
                let mut it = l.chars();
                match (it.next(), it.next()) {
                    (Some(c), None) => Ok(c),
                    _ => Err(Error::config(format!(
                        "symbol table line {}: expected one character",
                        n + 1
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Class count including the reserved ids.
    pub fn classes(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(RESERVED)
            .and_then(|i| self.chars.get(i))
            .copied()
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| i + RESERVED)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.char_of(i).unwrap_or('?'))
            .collect()
    }
}
