//! Byte-level vocabulary with the special tokens used to frame images.

use serde::{Deserialize, Serialize};

/// Number of byte ids.
pub const BYTE_VOCAB: usize = 256;
/// Full vocabulary: 256 bytes plus 6 specials.
pub const VOCAB_SIZE: usize = 262;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Pad,
    Bos,
    Eos,
    /// `<vision>`
    VisionStart,
    /// `</vision>`
    VisionEnd,
    /// `<vision_sep>`, only emitted by the row-separator ablation.
    VisionSep,
}

impl Special {
    pub const ALL: [Special; 6] = [
        Special::Pad,
        Special::Bos,
        Special::Eos,
        Special::VisionStart,
        Special::VisionEnd,
        Special::VisionSep,
    ];

    pub fn id(self) -> u32 {
        256 + match self {
            Special::Pad => 0,
            Special::Bos => 1,
            Special::Eos => 2,
            Special::VisionStart => 3,
            Special::VisionEnd => 4,
            Special::VisionSep => 5,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::VisionStart => "<vision>",
            Special::VisionEnd => "</vision>",
            Special::VisionSep => "<vision_sep>",
        }
    }
}

/// One id per byte.
pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. Special ids are dropped.
pub fn decode(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

/// Lossy UTF-8 rendering that spells out special tokens.
pub fn render(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
            continue;
        }
        out.push_str(&String::from_utf8_lossy(&bytes));
        bytes.clear();
        match Special::from_id(id) {
            Some(s) => out.push_str(s.name()),
            None => out.push_str(&format!("<unk:{id}>")),
        }
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_are_distinct_and_above_bytes() {
        let mut ids: Vec<u32> = Special::ALL.iter().map(|s| s.id()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(ids.iter().all(|&i| i >= 256 && (i as usize) < VOCAB_SIZE));
        for s in Special::ALL {
            assert_eq!(Special::from_id(s.id()), Some(s));
        }
    }

    #[test]
    fn byte_ids() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"Hi"), vec![72, 105]);
        assert_eq!(
            render(&[Special::Bos.id(), 72, 105, Special::Eos.id()]),
            "<s>Hi</s>"
        );
    }

    proptest! {
        #[test]
        fn round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..1024)) {
            prop_assert_eq!(decode(&tokenize(&bytes)), bytes);
        }
    }
}
