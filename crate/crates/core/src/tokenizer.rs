//! Whitespace-and-punctuation tokenizer with a growable token dictionary.
//!
//! Rules:
//! - input is lowercased;
//! - whitespace separates tokens;
//! - the characters `. , ! ? ; ( ) [ ] { } "` are single-character tokens;
//! - every other non-whitespace character is part of a word, so things like
//!   `t=2997`, `answer:` and `</s>` stay atomic.
//!
//! Detokenization joins tokens with single spaces, attaching closing
//! punctuation to the previous token and opening brackets to the next one.
//! `detokenize(tokenize(text))` is the normal form of `text`; re-tokenizing
//! the normal form yields the same token strings.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conventional end-of-sequence marker used by the built-in solver.
pub const EOS_TEXT: &str = "</s>";

const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', '(', ')', '[', ']', '{', '}', '"'];
const NO_SPACE_BEFORE: &[char] = &['.', ',', '!', '?', ';', ')', ']', '}'];
const NO_SPACE_AFTER: &[char] = &['(', '[', '{'];

fn is_split_punct(c: char) -> bool {
    SPLIT_PUNCT.contains(&c)
}

/// Split text into lowercase token strings.
pub fn tokenize_str(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
        } else if is_split_punct(c) {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            tokens.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Join token strings back into the normal surface form.
pub fn detokenize_str<T: AsRef<str>>(tokens: &[T]) -> String {
    let mut out = String::new();
    let mut suppress_space = false;
    for tok in tokens {
        let tok = tok.as_ref();
        let is_closing = tok.len() == 1 && tok.chars().all(|c| NO_SPACE_BEFORE.contains(&c));
        if !out.is_empty() && !suppress_space && !is_closing {
            out.push(' ');
        }
        out.push_str(tok);
        suppress_space = tok.len() == 1 && tok.chars().all(|c| NO_SPACE_AFTER.contains(&c));
    }
    out
}

/// Lowercased, punctuation-normalized form of a string.
pub fn normalize(text: &str) -> String {
    detokenize_str(&tokenize_str(text))
}

/// Bidirectional token ⇄ id dictionary, grown on first sight.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token string, assigning a fresh id on first sight.
    pub fn intern(&mut self, token: &str) -> u32 {
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

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Tokenize text and intern every token.
    pub fn encode(&mut self, text: &str) -> Vec<u32> {
        tokenize_str(text).iter().map(|t| self.intern(t)).collect()
    }

    /// Render token ids back to the normal surface form.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut toks = Vec::with_capacity(ids.len());
        for (position, &id) in ids.iter().enumerate() {
            let tok = self.token(id).ok_or(Error::OutOfVocabulary {
                id,
                position,
                vocab_size: self.len(),
            })?;
            toks.push(tok);
        }
        Ok(detokenize_str(&toks))
    }

    /// Persist as `token<TAB>id` lines, ordered by id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for (id, tok) in self.tokens.iter().enumerate() {
            writeln!(f, "{tok}\t{id}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut vocab = Vocab::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                message: "expected token<TAB>id".into(),
            })?;
            let id: u32 = id.parse().map_err(|_| Error::Parse {
                file: path.display().to_string(),
                line: lineno + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id as usize != vocab.len() {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("ids must be contiguous, got {id} at row {}", vocab.len()),
                });
            }
            vocab.intern(tok);
        }
        Ok(vocab)
    }
}

/// A tokenized piece of text: ids plus the surface string they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn new(text: &str, vocab: &mut Vocab) -> Self {
        TokenSequence {
            tokens: vocab.encode(text),
            text: text.to_string(),
        }
    }

    /// Build from ids; the surface text is the normal form.
    pub fn from_tokens(tokens: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        let text = vocab.decode(&tokens)?;
        Ok(TokenSequence { tokens, text })
    }

    pub fn empty() -> Self {
        TokenSequence::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenation: token ids are chained, surface texts joined by a space.
    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        if self.is_empty() {
            return other.clone();
        }
        if other.is_empty() {
            return self.clone();
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        TokenSequence {
            tokens,
            text: format!("{} {}", self.text, other.text),
        }
    }

    /// First `n` tokens, with the surface text re-rendered from them.
    pub fn truncated(&self, n: usize, vocab: &Vocab) -> Result<TokenSequence> {
        if self.len() <= n {
            return Ok(self.clone());
        }
        TokenSequence::from_tokens(self.tokens[..n].to_vec(), vocab)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Concatenate many sequences left to right.
pub fn concat_all(parts: &[&TokenSequence]) -> TokenSequence {
    let mut out = TokenSequence::empty();
    for p in parts {
        out = out.concat(p);
    }
    out
}
