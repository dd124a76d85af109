//! Reversible word-level tokenizer with character fallback.
//!
//! Ids `0..6` are the reserved specials, followed by a lone space, the
//! character alphabet, and the word tokens (each word appears bare and with
//! one leading space). Text is split into runs of non-space characters; a run
//! and its preceding space map to one token when the word is known and to
//! character tokens otherwise, so `decode(encode(s)) == s` whenever every
//! character of `s` is in the alphabet.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<BOS>";
pub const EOS: &str = "<EOS>";
pub const EOC: &str = "<EOC>";
pub const IMAGE: &str = "<image>";
pub const UNK: &str = "<unk>";

/// Characters of the synthetic corpus.
pub const DEFAULT_ALPHABET: &str =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,:;?!'-";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub eoc: usize,
    pub image: usize,
    pub unk: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    specials: Specials,
    space: usize,
}

impl Vocab {
    /// Builds a vocabulary from an alphabet and a word list. Duplicate words
    /// and words containing spaces are ignored.
    pub fn new(alphabet: &str, words: &[&str]) -> Vocab {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, EOC, IMAGE, UNK, " "]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut chars: Vec<char> = alphabet.chars().filter(|c| *c != ' ').collect();
        chars.sort_unstable();
        chars.dedup();
        tokens.extend(chars.iter().map(|c| c.to_string()));
        let mut ws: Vec<&str> = words
            .iter()
            .copied()
            .filter(|w| w.chars().count() > 1 && !w.contains(char::is_whitespace))
            .collect();
        ws.sort_unstable();
        ws.dedup();
        for w in ws {
            tokens.push(w.to_string());
            tokens.push(format!(" {w}"));
        }
        Vocab::from_tokens(tokens).expect("constructed vocabulary is a bijection")
    }

    /// Vocabulary covering [`DEFAULT_ALPHABET`] and the synthetic grammar words.
    pub fn synthetic() -> Vocab {
        Vocab::new(DEFAULT_ALPHABET, crate::datapipe::GRAMMAR_WORDS)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let find = |t: &str| {
            token_to_id
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks {t:?}")))
        };
        let specials = Specials {
            pad: find(PAD)?,
            bos: find(BOS)?,
            eos: find(EOS)?,
            eoc: find(EOC)?,
            image: find(IMAGE)?,
            unk: find(UNK)?,
        };
        let space = find(" ")?;
        Ok(Vocab {
            id_to_token: tokens,
            token_to_id,
            specials,
            space,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, vocab: self.len() })
    }

    pub fn is_special(&self, id: usize) -> bool {
        let s = self.specials;
        [s.pad, s.bos, s.eos, s.eoc, s.image, s.unk].contains(&id)
    }

    /// Only `<EOC>` gets a freshly learnt embedding row.
    pub fn is_trainable_embedding(&self, id: usize) -> bool {
        id == self.specials.eoc
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = [(IMAGE, self.specials.image), (EOC, self.specials.eoc)]
                .iter()
                .filter_map(|(tag, id)| rest.find(tag).map(|p| (p, *tag, *id)))
                .min_by_key(|(p, _, _)| *p);
            match next {
                Some((p, tag, id)) => {
                    self.encode_plain(&rest[..p], &mut out);
                    out.push(id);
                    rest = &rest[p + tag.len()..];
                }
                None => {
                    self.encode_plain(rest, &mut out);
                    rest = "";
                }
            }
        }
        out
    }

    fn encode_plain(&self, text: &str, out: &mut Vec<usize>) {
        let mut rest = text;
        while !rest.is_empty() {
            let spaces = rest.len() - rest.trim_start_matches(' ').len();
            let after = &rest[spaces..];
            let word_len = after.find(' ').unwrap_or(after.len());
            let word = &after[..word_len];
            if word.is_empty() {
                out.extend(std::iter::repeat(self.space).take(spaces));
                break;
            }
            if spaces > 0 {
                out.extend(std::iter::repeat(self.space).take(spaces - 1));
                match self.token_to_id.get(&rest[spaces - 1..spaces + word_len]) {
                    Some(&id) => out.push(id),
                    None => {
                        out.push(self.space);
                        self.encode_word(word, out);
                    }
                }
            } else {
                self.encode_word(word, out);
            }
            rest = &after[word_len..];
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        if let Some(&id) = self.token_to_id.get(word) {
            if !self.is_special(id) {
                out.push(id);
                return;
            }
        }
        let mut buf = [0u8; 4];
        for c in word.chars() {
            let id = self
                .token_to_id
                .get(&*c.encode_utf8(&mut buf))
                .copied()
                .unwrap_or(self.specials.unk);
            out.push(id);
        }
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            s.push_str(self.token(id)?);
        }
        Ok(s)
    }

    /// Newline-delimited token list under a header naming the specials.
    pub fn to_file_string(&self) -> String {
        let mut s = String::from("#!vocab v1\n");
        for (role, id) in [
            ("pad", self.specials.pad),
            ("bos", self.specials.bos),
            ("eos", self.specials.eos),
            ("eoc", self.specials.eoc),
            ("image", self.specials.image),
            ("unk", self.specials.unk),
        ] {
            let _ = writeln!(s, "#!special {role} {}", escape(&self.id_to_token[id]));
        }
        s.push_str("#!end\n");
        for t in &self.id_to_token {
            s.push_str(&escape(t));
            s.push('\n');
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Vocab> {
        let mut lines = text.split('\n');
        let parse_err = |line: usize, message: String| Error::Parse {
            path: "<vocab>".into(),
            line,
            message,
        };
        if lines.next() != Some("#!vocab v1") {
            return Err(parse_err(1, "missing vocab header".into()));
        }
        let mut lineno = 1;
        let mut declared = Vec::new();
        loop {
            lineno += 1;
            let Some(line) = lines.next() else {
                return Err(parse_err(lineno, "unterminated header".into()));
            };
            if line == "#!end" {
                break;
            }
            let Some(rest) = line.strip_prefix("#!special ") else {
                return Err(parse_err(lineno, format!("unexpected header line {line:?}")));
            };
            let (role, tok) = rest
                .split_once(' ')
                .ok_or_else(|| parse_err(lineno, "malformed special".into()))?;
            declared.push((lineno, role.to_string(), unescape(tok)));
        }
        let mut tokens: Vec<String> = lines.map(unescape).collect();
        if tokens.last().is_some_and(String::is_empty) {
            tokens.pop();
        }
        let vocab = Vocab::from_tokens(tokens)?;
        for (line, role, tok) in declared {
            let expected = match role.as_str() {
                "pad" => PAD,
                "bos" => BOS,
                "eos" => EOS,
                "eoc" => EOC,
                "image" => IMAGE,
                "unk" => UNK,
                _ => return Err(parse_err(line, format!("unknown special role {role}"))),
            };
            if tok != expected {
                return Err(parse_err(line, format!("special {role} must be {expected}")));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::checkpoint::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::from_file_string(&std::fs::read_to_string(path)?)
    }
}

fn escape(t: &str) -> String {
    t.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}
