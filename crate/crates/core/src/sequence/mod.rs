//! Multimodal token streams: assembly, attention masks and packing.

mod mask;
mod pack;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mrope::{assign_position_ids, PositionMode, PositionTable};
use crate::patch::PatchGrid;
use crate::tensor::AttentionBias;
use crate::tokenizer::Special;

pub use mask::{build_attention_mask, AttentionMode};
pub use pack::{next_token_targets, pack_sequences, PackedBatch, PackedSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Text(u32),
    Special(Special),
    /// Patch `(row, col)` of `images[image]`.
    Patch { image: u32, row: u32, col: u32 },
}

impl Token {
    /// Vocabulary id, `None` for patches.
    pub fn id(&self) -> Option<u32> {
        match *self {
            Token::Text(id) => Some(id),
            Token::Special(s) => Some(s.id()),
            Token::Patch { .. } => None,
        }
    }

    pub fn is_patch(&self) -> bool {
        matches!(self, Token::Patch { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanKind {
    Text,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
    /// `(rows, cols)` of the patch grid for image spans.
    pub grid: Option<(usize, usize)>,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Masking, positional and layout switches that must agree between
/// training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub attention: AttentionMode,
    pub positions: PositionMode,
    /// Insert `<vision_sep>` after every patch row but the last.
    pub vision_sep: bool,
    /// Put `<vision>`/`</vision>` inside the bidirectional image block.
    pub boundary_in_block: bool,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        Self {
            attention: AttentionMode::Mixed,
            positions: PositionMode::Mrope,
            vision_sep: false,
            boundary_in_block: false,
        }
    }
}

impl LayoutConfig {
    /// Causal attention, 1D positions and row separators.
    pub fn causal_with_row_separators() -> Self {
        Self {
            attention: AttentionMode::CausalOnly,
            positions: PositionMode::Linear,
            vision_sep: true,
            boundary_in_block: false,
        }
    }
}

/// An ordered token stream with modality spans, supervision flags and
/// per-token sample ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultimodalSequence {
    pub tokens: Vec<Token>,
    pub spans: Vec<Span>,
    pub supervised: Vec<bool>,
    pub sample_id: Vec<u32>,
    pub images: Vec<PatchGrid>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn push_text_token(&mut self, tok: Token, supervised: bool) {
        let i = self.tokens.len();
        self.tokens.push(tok);
        self.supervised.push(supervised);
        self.sample_id.push(0);
        match self.spans.last_mut() {
            Some(s) if s.kind == SpanKind::Text && s.end() == i => s.len += 1,
            _ => self.spans.push(Span {
                kind: SpanKind::Text,
                start: i,
                len: 1,
                grid: None,
            }),
        }
    }

    /// Append a byte or special token to the trailing text span.
    pub fn push_text(&mut self, id: u32, supervised: bool) {
        let tok = match Special::from_id(id) {
            Some(s) => Token::Special(s),
            None => Token::Text(id),
        };
        self.push_text_token(tok, supervised);
    }

    pub fn push_special(&mut self, s: Special, supervised: bool) {
        self.push_text_token(Token::Special(s), supervised);
    }

    /// Append `<vision> patches </vision>` (with row separators if asked).
    pub fn push_image(&mut self, grid: PatchGrid, vision_sep: bool) {
        let start = self.tokens.len();
        let image = self.images.len() as u32;
        let (rows, cols) = (grid.rows, grid.cols);
        self.tokens.push(Token::Special(Special::VisionStart));
        for r in 0..rows {
            if vision_sep && r > 0 {
                self.tokens.push(Token::Special(Special::VisionSep));
            }
            for c in 0..cols {
                self.tokens.push(Token::Patch {
                    image,
                    row: r as u32,
                    col: c as u32,
                });
            }
        }
        self.tokens.push(Token::Special(Special::VisionEnd));
        let len = self.tokens.len() - start;
        self.supervised.extend(std::iter::repeat(false).take(len));
        self.sample_id.extend(std::iter::repeat(0).take(len));
        self.spans.push(Span {
            kind: SpanKind::Image,
            start,
            len,
            grid: Some((rows, cols)),
        });
        self.images.push(grid);
    }

    /// Vocabulary ids, with `None` at patch positions.
    pub fn ids(&self) -> Vec<Option<u32>> {
        self.tokens.iter().map(Token::id).collect()
    }

    /// For each position, the image span it belongs to as a patch.
    pub fn patch_span_index(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (s, span) in self.spans.iter().enumerate() {
            if span.kind == SpanKind::Image {
                for (i, slot) in out.iter_mut().enumerate().skip(span.start).take(span.len) {
                    if self.tokens[i].is_patch() {
                        *slot = Some(s);
                    }
                }
            }
        }
        out
    }

    /// Positions holding image patches.
    pub fn is_image_token(&self) -> Vec<bool> {
        self.tokens.iter().map(Token::is_patch).collect()
    }

    /// Append another sequence, relabelling its sample ids to `sample`.
    pub(crate) fn append(&mut self, other: &MultimodalSequence, sample: u32) {
        let offset = self.tokens.len();
        let image_offset = self.images.len() as u32;
        self.tokens.extend(other.tokens.iter().map(|t| match *t {
            Token::Patch { image, row, col } => Token::Patch {
                image: image + image_offset,
                row,
                col,
            },
            t => t,
        }));
        self.spans.extend(other.spans.iter().map(|s| Span {
            start: s.start + offset,
            ..*s
        }));
        self.supervised.extend_from_slice(&other.supervised);
        self.sample_id.extend(std::iter::repeat(sample).take(other.len()));
        self.images.extend(other.images.iter().cloned());
    }

    /// Check the structural invariants of the stream.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.supervised.len() != n || self.sample_id.len() != n {
            return Err(Error::Assembly("per-token arrays have different lengths".into()));
        }
        let mut cursor = 0;
        for span in &self.spans {
            if span.start != cursor || span.len == 0 {
                return Err(Error::Assembly(format!("span at {} leaves a gap or overlap", span.start)));
            }
            cursor = span.end();
            let toks = &self.tokens[span.start..span.end()];
            match span.kind {
                SpanKind::Text => {
                    if toks.iter().any(Token::is_patch) {
                        return Err(Error::Assembly("patch inside text span".into()));
                    }
                }
                SpanKind::Image => {
                    let (rows, cols) = span
                        .grid
                        .ok_or_else(|| Error::Assembly("image span without grid".into()))?;
                    let patches = toks.iter().filter(|t| t.is_patch()).count();
                    let seps = toks
                        .iter()
                        .filter(|t| **t == Token::Special(Special::VisionSep))
                        .count();
                    if toks.first() != Some(&Token::Special(Special::VisionStart))
                        || toks.last() != Some(&Token::Special(Special::VisionEnd))
                        || patches != rows * cols
                        || span.len != patches + seps + 2
                    {
                        return Err(Error::Assembly(format!(
                            "image span at {} is not <vision> + {rows}x{cols} patches + </vision>",
                            span.start
                        )));
                    }
                }
            }
        }
        if cursor != n {
            return Err(Error::Assembly("spans do not cover the sequence".into()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if self.supervised[i] && !matches!(t, Token::Text(_) | Token::Special(Special::Eos)) {
                return Err(Error::Assembly(format!("non-text token {i} is supervised")));
            }
        }
        Ok(())
    }
}

/// Image/text pair layout:
/// `<s> <vision> patches </vision> ... caption </s>`, supervising caption
/// bytes and the closing `</s>`. With no grids this is a text-only sample.
pub fn assemble_sequence(
    grids: &[PatchGrid],
    caption: &[u32],
    vision_sep: bool,
) -> Result<MultimodalSequence> {
    if caption.is_empty() {
        return Err(Error::Assembly("training sample has an empty caption".into()));
    }
    let mut seq = assemble_prompt(grids, vision_sep);
    for &id in caption {
        if id >= 256 {
            return Err(Error::Assembly(format!("caption contains non-byte id {id}")));
        }
        seq.push_text(id, true);
    }
    seq.push_special(Special::Eos, true);
    Ok(seq)
}

/// `<s>` followed by the image spans: the conditioning prefix used for
/// generation and caption scoring.
pub fn assemble_prompt(grids: &[PatchGrid], vision_sep: bool) -> MultimodalSequence {
    let mut seq = MultimodalSequence::default();
    seq.push_special(Special::Bos, false);
    for g in grids {
        seq.push_image(g.clone(), vision_sep);
    }
    seq
}

/// The joint product of the mask builder and the position assigner.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub bias: Arc<AttentionBias>,
    pub positions: PositionTable,
}

impl AttentionLayout {
    pub fn build(seq: &MultimodalSequence, cfg: &LayoutConfig) -> Self {
        Self {
            bias: Arc::new(build_attention_mask(seq, cfg.attention, cfg.boundary_in_block)),
            positions: assign_position_ids(seq, cfg.positions),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> PatchGrid {
        PatchGrid::from_vectors(rows, cols, 1, 1, vec![0.5; rows * cols]).unwrap()
    }

    #[test]
    fn text_only_sample() {
        let seq = assemble_sequence(&[], &[72, 105], false).unwrap();
        assert_eq!(
            seq.ids(),
            vec![Some(Special::Bos.id()), Some(72), Some(105), Some(Special::Eos.id())]
        );
        assert_eq!(seq.supervised, vec![false, true, true, true]);
        seq.validate().unwrap();
    }

    #[test]
    fn image_sample_length_and_supervision() {
        let seq = assemble_sequence(&[grid(2, 2)], &[1, 2, 3], false).unwrap();
        assert_eq!(seq.len(), 1 + (1 + 4 + 1) + 3 + 1);
        assert!(seq.supervised[..7].iter().all(|&s| !s));
        assert!(seq.supervised[7..].iter().all(|&s| s));
        assert_eq!(seq.spans.len(), 3);
        assert_eq!(seq.spans[1].len, 6);
        seq.validate().unwrap();
    }

    #[test]
    fn row_separator_layout() {
        let seq = assemble_sequence(&[grid(2, 2)], &[65], true).unwrap();
        let p = |row, col| Token::Patch { image: 0, row, col };
        assert_eq!(
            &seq.tokens[..8],
            &[
                Token::Special(Special::Bos),
                Token::Special(Special::VisionStart),
                p(0, 0),
                p(0, 1),
                Token::Special(Special::VisionSep),
                p(1, 0),
                p(1, 1),
                Token::Special(Special::VisionEnd),
            ]
        );
        seq.validate().unwrap();
    }

    #[test]
    fn empty_caption_is_rejected() {
        assert!(matches!(
            assemble_sequence(&[grid(1, 1)], &[], false),
            Err(Error::Assembly(_))
        ));
    }

    #[test]
    fn validate_catches_supervised_patch() {
        let mut seq = assemble_sequence(&[grid(1, 1)], &[65], false).unwrap();
        seq.supervised[2] = true;
        assert!(seq.validate().is_err());
    }
}
