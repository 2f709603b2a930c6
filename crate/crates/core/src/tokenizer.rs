//! Byte-level tokenization with prepended language tokens.
//!
//! Ids 0..=255 are the raw byte values, PAD=256, EOS=257, and language
//! tokens are assigned from 258 upward in sorted order of language code.

use crate::error::{Error, Result};

pub const PAD_ID: usize = 256;
pub const EOS_ID: usize = 257;
pub const LANG_BASE: usize = 258;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    languages: Vec<String>, // sorted, unique
}

impl Vocab {
    pub fn size(&self) -> usize {
        LANG_BASE + self.languages.len()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn lang_id(&self, code: &str) -> Result<usize> {
        self.languages
            .binary_search_by(|l| l.as_str().cmp(code))
            .map(|i| LANG_BASE + i)
            .map_err(|_| Error::UnknownLanguage(code.to_string()))
    }

    pub fn lang_code(&self, id: usize) -> Option<&str> {
        self.languages.get(id.checked_sub(LANG_BASE)?).map(|s| s.as_str())
    }

    pub fn is_lang(&self, id: usize) -> bool {
        id >= LANG_BASE && id < self.size()
    }
}

/// A token sequence: `[lang] bytes... [EOS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub lang: String,
}

pub fn build_vocab<S: AsRef<str>>(language_codes: &[S]) -> Result<Vocab> {
    let mut langs: Vec<String> = language_codes
        .iter()
        .map(|s| s.as_ref().trim().to_string())
        .collect();
    if langs.is_empty() || langs.iter().all(|l| l.is_empty()) {
        return Err(Error::EmptyLanguages);
    }
    langs.retain(|l| !l.is_empty());
    langs.sort();
    for pair in langs.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::DuplicateLanguage(pair[0].clone()));
        }
    }
    Ok(Vocab { languages: langs })
}

pub fn encode(text: &str, lang: &str, vocab: &Vocab) -> Result<TokenSeq> {
    let lang_id = vocab.lang_id(lang)?;
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(lang_id);
    ids.extend(text.bytes().map(|b| b as usize));
    ids.push(EOS_ID);
    Ok(TokenSeq {
        ids,
        lang: lang.to_string(),
    })
}

/// Total on arbitrary id lists: strips specials, decodes the remaining bytes
/// as UTF-8 with U+FFFD replacement for ill-formed sequences.
pub fn decode(ids: &[usize], vocab: &Vocab) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256 && !vocab.is_lang(id))
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}
