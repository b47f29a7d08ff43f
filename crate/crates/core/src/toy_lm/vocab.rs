use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub type TokenId = usize;

pub const MIN_VOCAB: usize = 16;
pub const MAX_VOCAB: usize = 256;

/// Number of distinct observation tokens; one per answer option.
pub const OBSERVATION_KINDS: usize = 4;

/// One of the four answer options.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Letter {
    A,
    B,
    C,
    D,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::A, Letter::B, Letter::C, Letter::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Letter> {
        Letter::ALL.get(i).copied()
    }
}

impl fmt::Display for Letter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Letter::A => "A",
            Letter::B => "B",
            Letter::C => "C",
            Letter::D => "D",
        };
        f.write_str(s)
    }
}

/// What a token id means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Letter(Letter),
    Eos,
    ClassMarker(usize),
    Observation(usize),
    Evidence { letter: Letter, index: usize },
    Filler(usize),
}

impl TokenKind {
    pub fn is_tag(self) -> bool {
        matches!(
            self,
            TokenKind::ThinkOpen | TokenKind::ThinkClose | TokenKind::AnswerOpen | TokenKind::AnswerClose
        )
    }
}

/// Sizes of the variable regions of the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub classes: usize,
    pub evidence_per_letter: usize,
    pub fillers: usize,
}

impl Default for VocabLayout {
    fn default() -> Self {
        Self {
            classes: 8,
            evidence_per_letter: 2,
            fillers: 4,
        }
    }
}

/// Dense token alphabet with stable ids.
///
/// Layout: `<think> </think> <answer> </answer> A B C D <eos>`, then the class
/// markers, the observation tokens, `4 * evidence_per_letter` evidence tokens
/// (grouped by letter) and finally the filler tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    layout: VocabLayout,
}

impl Vocab {
    pub const THINK_OPEN: TokenId = 0;
    pub const THINK_CLOSE: TokenId = 1;
    pub const ANSWER_OPEN: TokenId = 2;
    pub const ANSWER_CLOSE: TokenId = 3;
    const LETTER_BASE: TokenId = 4;
    pub const EOS: TokenId = 8;
    const FIXED: usize = 9;

    pub fn new(layout: VocabLayout) -> Result<Self> {
        if layout.evidence_per_letter == 0 {
            return Err(Error::config("evidence_per_letter must be at least 1"));
        }
        if layout.fillers == 0 {
            return Err(Error::config("fillers must be at least 1"));
        }
        let size = Self::size_of(&layout);
        if size > MAX_VOCAB {
            return Err(Error::config(format!(
                "vocabulary of {size} tokens exceeds capacity {MAX_VOCAB} ({} classes requested)",
                layout.classes
            )));
        }
        if size < MIN_VOCAB {
            return Err(Error::config(format!(
                "vocabulary of {size} tokens is below the minimum {MIN_VOCAB}"
            )));
        }
        Ok(Self { layout })
    }

    /// Largest class count that still fits in [`MAX_VOCAB`] for the given
    /// evidence and filler sizes.
    pub fn class_capacity(evidence_per_letter: usize, fillers: usize) -> usize {
        MAX_VOCAB.saturating_sub(Self::FIXED + OBSERVATION_KINDS + 4 * evidence_per_letter + fillers)
    }

    fn size_of(layout: &VocabLayout) -> usize {
        Self::FIXED + layout.classes + OBSERVATION_KINDS + 4 * layout.evidence_per_letter + layout.fillers
    }

    pub fn layout(&self) -> VocabLayout {
        self.layout
    }

    pub fn size(&self) -> usize {
        Self::size_of(&self.layout)
    }

    pub fn letter(l: Letter) -> TokenId {
        Self::LETTER_BASE + l.index()
    }

    fn class_base(&self) -> TokenId {
        Self::FIXED
    }

    fn observation_base(&self) -> TokenId {
        self.class_base() + self.layout.classes
    }

    fn evidence_base(&self) -> TokenId {
        self.observation_base() + OBSERVATION_KINDS
    }

    fn filler_base(&self) -> TokenId {
        self.evidence_base() + 4 * self.layout.evidence_per_letter
    }

    pub fn class_marker(&self, class: usize) -> TokenId {
        assert!(class < self.layout.classes, "class {class} out of range");
        self.class_base() + class
    }

    pub fn observation(&self, kind: usize) -> TokenId {
        assert!(kind < OBSERVATION_KINDS);
        self.observation_base() + kind
    }

    pub fn evidence(&self, letter: Letter, index: usize) -> TokenId {
        assert!(index < self.layout.evidence_per_letter);
        self.evidence_base() + letter.index() * self.layout.evidence_per_letter + index
    }

    pub fn filler(&self, index: usize) -> TokenId {
        assert!(index < self.layout.fillers);
        self.filler_base() + index
    }

    pub fn kind(&self, token: TokenId) -> Option<TokenKind> {
        let kind = match token {
            Self::THINK_OPEN => TokenKind::ThinkOpen,
            Self::THINK_CLOSE => TokenKind::ThinkClose,
            Self::ANSWER_OPEN => TokenKind::AnswerOpen,
            Self::ANSWER_CLOSE => TokenKind::AnswerClose,
            4..=7 => TokenKind::Letter(Letter::ALL[token - Self::LETTER_BASE]),
            Self::EOS => TokenKind::Eos,
            t if t < self.observation_base() => TokenKind::ClassMarker(t - self.class_base()),
            t if t < self.evidence_base() => TokenKind::Observation(t - self.observation_base()),
            t if t < self.filler_base() => {
                let offset = t - self.evidence_base();
                TokenKind::Evidence {
                    letter: Letter::ALL[offset / self.layout.evidence_per_letter],
                    index: offset % self.layout.evidence_per_letter,
                }
            }
            t if t < self.size() => TokenKind::Filler(t - self.filler_base()),
            _ => return None,
        };
        Some(kind)
    }

    pub fn as_letter(token: TokenId) -> Option<Letter> {
        if (Self::LETTER_BASE..Self::LETTER_BASE + 4).contains(&token) {
            Letter::from_index(token - Self::LETTER_BASE)
        } else {
            None
        }
    }

    pub fn is_tag(token: TokenId) -> bool {
        token <= Self::ANSWER_CLOSE
    }

    pub fn name(&self, token: TokenId) -> String {
        match self.kind(token) {
            Some(TokenKind::ThinkOpen) => "<think>".into(),
            Some(TokenKind::ThinkClose) => "</think>".into(),
            Some(TokenKind::AnswerOpen) => "<answer>".into(),
            Some(TokenKind::AnswerClose) => "</answer>".into(),
            Some(TokenKind::Letter(l)) => l.to_string(),
            Some(TokenKind::Eos) => "<eos>".into(),
            Some(TokenKind::ClassMarker(c)) => format!("<q{c}>"),
            Some(TokenKind::Observation(o)) => format!("<obs{o}>"),
            Some(TokenKind::Evidence { letter, index }) => format!("e{letter}{index}"),
            Some(TokenKind::Filler(i)) => format!("f{i}"),
            None => format!("<unk{token}>"),
        }
    }

    /// Tokens a policy may emit in a response: tags, letters, end of
    /// sequence, evidence and fillers. Prompt-only tokens are excluded.
    pub fn response_tokens(&self) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = (0..Self::FIXED).collect();
        out.extend(self.evidence_base()..self.size());
        out
    }

    /// Tokens that may appear inside a think block.
    pub fn think_alphabet(&self) -> Vec<TokenId> {
        let mut out: Vec<TokenId> = (Self::LETTER_BASE..Self::LETTER_BASE + 4).collect();
        out.extend(self.evidence_base()..self.size());
        out
    }

    pub fn content_tokens(&self) -> Vec<TokenId> {
        (self.evidence_base()..self.size()).collect()
    }

    /// Stable fingerprint of the token table, embedded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for t in 0..self.size() {
            hasher.update(self.name(t).as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}
