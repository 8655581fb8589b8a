//! Byte-level tokenizer: token ids are the UTF-8 bytes of the text.

use std::fmt;

use crate::error::{Error, Result};

pub const BYTE_VOCAB_SIZE: usize = 256;

/// Generation with an empty prompt starts from this single byte (newline).
/// It is context only: never a training target and never part of metrics.
pub const START_TOKEN: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabKind {
    Byte,
    /// Labels checkpoints imported from an external tokenizer's vocabulary.
    External,
}

impl VocabKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VocabKind::Byte => "byte",
            VocabKind::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(VocabKind::Byte),
            "external" => Ok(VocabKind::External),
            other => Err(Error::Format(format!("unknown vocab kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub kind: VocabKind,
}

impl Vocab {
    pub const BYTES: Vocab = Vocab {
        size: BYTE_VOCAB_SIZE,
        kind: VocabKind::Byte,
    };
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }

    /// Checks every id against `vocab_size`.
    pub fn checked(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad as usize,
                size: vocab_size,
            });
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }
}

pub fn encode(text: &str) -> TokenSequence {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> TokenSequence {
    TokenSequence(bytes.iter().map(|&b| b as u32).collect())
}

/// Exact inverse of [`encode_bytes`].
pub fn decode_bytes(seq: &TokenSequence) -> Result<Vec<u8>> {
    seq.ids()
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index {
                what: "byte vocabulary",
                index: id as usize,
                size: BYTE_VOCAB_SIZE,
            })
        })
        .collect()
}

/// Decodes for display. Byte runs that are not valid UTF-8 become U+FFFD;
/// use [`decode_bytes`] wherever the ids themselves matter.
pub fn decode(seq: &TokenSequence) -> Result<String> {
    Ok(String::from_utf8_lossy(&decode_bytes(seq)?).into_owned())
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match decode(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "{:?}", self.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text() {
        assert!(encode("").is_empty());
    }

    #[test]
    fn accented_round_trip() {
        assert_eq!(decode(&encode("héllo")).unwrap(), "héllo");
    }

    #[test]
    fn dash_newline_bytes() {
        assert_eq!(encode("-\n").ids(), &[45, 10]);
    }

    #[test]
    fn out_of_range_id_is_an_index_error() {
        let seq = TokenSequence::new(vec![65, 256]);
        assert!(matches!(decode(&seq), Err(Error::Index { index: 256, .. })));
        assert!(TokenSequence::checked(vec![300], 256).is_err());
    }

    #[test]
    fn invalid_utf8_is_replaced_only_for_display() {
        let seq = encode_bytes(&[0xff, b'a']);
        assert_eq!(decode_bytes(&seq).unwrap(), vec![0xff, b'a']);
        assert_eq!(decode(&seq).unwrap(), "\u{fffd}a");
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            prop_assert_eq!(decode_bytes(&encode_bytes(&bytes)).unwrap(), bytes);
        }
    }
}
