use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{MultimodalSequence, SpanKind, Token};
use crate::tensor::AttentionBias;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Causal text, bidirectional among patches of the same image.
    Mixed,
    /// Causal everywhere.
    CausalOnly,
}

/// Allowed-attention relation for `seq`.
///
/// Query `i` may attend key `j` iff both carry the same sample id and either
/// `j <= i`, or (mixed mode) both belong to the bidirectional block of the
/// same image span. The block holds the patch tokens; with
/// `boundary_in_block` it also holds the span's `<vision>`, `</vision>` and
/// row separators.
pub fn build_attention_mask(
    seq: &MultimodalSequence,
    mode: AttentionMode,
    boundary_in_block: bool,
) -> AttentionBias {
    let n = seq.len();
    let mut block: Vec<Option<usize>> = vec![None; n];
    if mode == AttentionMode::Mixed {
        for (s, span) in seq.spans.iter().enumerate() {
            if span.kind != SpanKind::Image {
                continue;
            }
            for i in span.start..span.end() {
                if boundary_in_block || matches!(seq.tokens[i], Token::Patch { .. }) {
                    block[i] = Some(s);
                }
            }
        }
    }
    let mut members: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, &sid) in seq.sample_id.iter().enumerate() {
        members.entry(sid).or_default().push(i as u32);
    }
    let block = &block;
    let rows = (0..n).map(|i| {
        let same = &members[&seq.sample_id[i]];
        let bi = block[i];
        same.iter()
            .copied()
            .filter(move |&j| {
                let j = j as usize;
                j <= i || (bi.is_some() && bi == block[j])
            })
            .collect::<Vec<u32>>()
    });
    AttentionBias::from_rows(n, n, rows).expect("diagonal is always allowed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::PatchGrid;
    use crate::sequence::assemble_sequence;
    use crate::tokenizer::Special;

    fn grid(rows: usize, cols: usize) -> PatchGrid {
        PatchGrid::from_vectors(rows, cols, 1, 1, vec![0.0; rows * cols]).unwrap()
    }

    #[test]
    fn pure_text_is_lower_triangular() {
        let seq = assemble_sequence(&[], &[1, 2], false).unwrap();
        let bias = build_attention_mask(&seq, AttentionMode::Mixed, false);
        assert_eq!(bias, AttentionBias::causal(4));
    }

    #[test]
    fn patches_see_each_other_but_not_later_text() {
        // <vision> p1..p4 </vision> t1
        let mut seq = MultimodalSequence::default();
        seq.push_image(grid(2, 2), false);
        seq.push_text(65, true);
        let bias = build_attention_mask(&seq, AttentionMode::Mixed, false);
        let (p1, p4, end, t1) = (1, 4, 5, 6);
        assert!(bias.is_allowed(p1, p4));
        assert!(!bias.is_allowed(p1, t1));
        assert!((0..=t1).all(|j| bias.is_allowed(t1, j)));
        // boundary tokens stay causal by default
        assert!(!bias.is_allowed(0, p1));
        assert!(!bias.is_allowed(p4, end));
        let inclusive = build_attention_mask(&seq, AttentionMode::Mixed, true);
        assert!(inclusive.is_allowed(0, end));
        assert!(!inclusive.is_allowed(0, t1));
        assert_eq!(seq.tokens[end], Token::Special(Special::VisionEnd));
    }

    #[test]
    fn causal_only_is_mixed_intersect_lower_triangle() {
        let seq = assemble_sequence(&[grid(2, 3), grid(1, 2)], &[7, 8], false).unwrap();
        let mixed = build_attention_mask(&seq, AttentionMode::Mixed, false);
        let causal = build_attention_mask(&seq, AttentionMode::CausalOnly, false);
        let n = seq.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(causal.is_allowed(i, j), mixed.is_allowed(i, j) && j <= i);
            }
        }
    }
}
