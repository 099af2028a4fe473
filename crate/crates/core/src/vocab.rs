use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const UNK: &str = "[UNK]";

/// Dense token ↔ id map; ids 0, 1, 2 are PAD, BOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in [PAD, BOS, UNK] {
            v.insert(t);
        }
        v
    }

    /// Returns the id of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Lowercases and splits on whitespace, mapping unknown words to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(|w| self.id_or_unk(&w.to_lowercase()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// JSON object `{token: id}`.
    pub fn to_json(&self) -> Result<String> {
        let map: std::collections::BTreeMap<&str, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as u32))
            .collect();
        Ok(serde_json::to_string_pretty(&map)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: HashMap<String, u32> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, &id) in &map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::InvalidConfig(format!("vocab ids not dense: {t} -> {id}")))?;
            *slot = t.clone();
        }
        if tokens.iter().any(String::is_empty) {
            return Err(Error::InvalidConfig("vocab ids not dense".into()));
        }
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != BOS || tokens[2] != UNK {
            return Err(Error::InvalidConfig("vocab lacks reserved tokens 0..=2".into()));
        }
        let ids = map;
        Ok(Self { tokens, ids })
    }
}
