use super::{AttentionLayout, LayoutConfig, MultimodalSequence, Span, SpanKind, Token};
use crate::error::{Error, Result};
use crate::tokenizer::Special;

/// Where one input sequence landed inside a pack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PackedSample {
    /// Index into the slice handed to [`pack_sequences`].
    pub source: usize,
    pub start: usize,
    pub len: usize,
}

/// Fixed-length concatenation of samples with a block-diagonal mask.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub seq: MultimodalSequence,
    pub layout: AttentionLayout,
    pub samples: Vec<PackedSample>,
}

impl PackedBatch {
    /// Pack `members` (indices into `seqs`) into one sequence of length
    /// `pack_len`, padding the tail.
    pub fn build(
        seqs: &[MultimodalSequence],
        members: &[usize],
        pack_len: usize,
        cfg: &LayoutConfig,
    ) -> Result<Self> {
        let mut seq = MultimodalSequence::default();
        let mut samples = Vec::with_capacity(members.len());
        for (k, &m) in members.iter().enumerate() {
            let s = &seqs[m];
            if s.len() > pack_len.saturating_sub(seq.len()) {
                return Err(Error::Pack {
                    index: m,
                    len: s.len(),
                    pack_len,
                });
            }
            samples.push(PackedSample {
                source: m,
                start: seq.len(),
                len: s.len(),
            });
            seq.append(s, k as u32);
        }
        let pad_start = seq.len();
        let pads = pack_len - pad_start;
        if pads > 0 {
            for p in 0..pads {
                seq.tokens.push(Token::Special(Special::Pad));
                seq.supervised.push(false);
                // every pad is its own sample so it only attends to itself
                seq.sample_id.push((members.len() + p) as u32);
            }
            seq.spans.push(Span {
                kind: SpanKind::Text,
                start: pad_start,
                len: pads,
                grid: None,
            });
        }
        let layout = AttentionLayout::build(&seq, cfg);
        Ok(Self {
            seq,
            layout,
            samples,
        })
    }

    /// A single sequence with no padding.
    pub fn single(seq: &MultimodalSequence, cfg: &LayoutConfig) -> Self {
        Self::build(std::slice::from_ref(seq), &[0], seq.len(), cfg).expect("exact fit")
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Next-token targets and loss mask per logits row. Row `i` predicts
    /// token `i + 1` when that token is supervised and in the same sample.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        next_token_targets(&self.seq)
    }

    /// Loss mask restricted to one packed sample.
    pub fn sample_mask(&self, sample: usize) -> Vec<bool> {
        let (_, mask) = self.targets();
        let s = self.samples[sample];
        mask.iter()
            .enumerate()
            .map(|(i, &m)| m && i >= s.start && i < s.start + s.len)
            .collect()
    }
}

/// Shifted targets for next-token prediction over `seq`.
pub fn next_token_targets(seq: &MultimodalSequence) -> (Vec<usize>, Vec<bool>) {
    let n = seq.len();
    let mut targets = vec![0usize; n];
    let mut mask = vec![false; n];
    for i in 0..n.saturating_sub(1) {
        if seq.supervised[i + 1] && seq.sample_id[i + 1] == seq.sample_id[i] {
            if let Some(id) = seq.tokens[i + 1].id() {
                targets[i] = id as usize;
                mask[i] = true;
            }
        }
    }
    (targets, mask)
}

/// Greedy first-fit packing in input order: each sequence goes into the
/// earliest pack with room, else opens a new one.
pub fn pack_sequences(
    seqs: &[MultimodalSequence],
    pack_len: usize,
    cfg: &LayoutConfig,
) -> Result<Vec<PackedBatch>> {
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        if s.len() > pack_len {
            return Err(Error::Pack {
                index: i,
                len: s.len(),
                pack_len,
            });
        }
        match bins.iter_mut().find(|(used, _)| used + s.len() <= pack_len) {
            Some((used, members)) => {
                *used += s.len();
                members.push(i);
            }
            None => bins.push((s.len(), vec![i])),
        }
    }
    bins.iter()
        .map(|(_, members)| PackedBatch::build(seqs, members, pack_len, cfg))
        .collect()
}
