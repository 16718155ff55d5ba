use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::manifest::load_manifest;
use crate::patch::{patchify, ResizePolicy};
use crate::sequence::{assemble_sequence, pack_sequences, LayoutConfig, MultimodalSequence, PackedBatch};
use crate::tokenizer::tokenize;

/// One decoded image with its tokenized caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub image: Image,
    pub caption: Vec<u32>,
}

/// Training material for one stage, held in memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageData {
    pub pairs: Vec<Pair>,
    /// Tokenized pure-text documents.
    pub text: Vec<Vec<u32>>,
}

impl StageData {
    pub fn load(manifest: Option<&Path>, text: Option<&Path>) -> Result<Self> {
        let mut data = StageData::default();
        if let Some(path) = manifest {
            for s in load_manifest(path)? {
                data.pairs.push(Pair {
                    image: s.load_image()?,
                    caption: tokenize(s.caption.as_bytes()),
                });
            }
        }
        if let Some(path) = text {
            let body = std::fs::read_to_string(path)?;
            data.text = body
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| tokenize(l.as_bytes()))
                .collect();
        }
        Ok(data)
    }

    /// Image-caption training sequences, in data order.
    pub fn multimodal_sequences(
        &self,
        resize: ResizePolicy,
        patch_size: usize,
        layout: &LayoutConfig,
    ) -> Result<Vec<MultimodalSequence>> {
        self.pairs
            .iter()
            .map(|p| {
                let grid = patchify(&p.image, patch_size, resize)?;
                assemble_sequence(&[grid], &p.caption, layout.vision_sep)
            })
            .collect()
    }

    /// Text-only sequences; documents longer than a pack are split.
    pub fn text_sequences(&self, pack_len: usize) -> Result<Vec<MultimodalSequence>> {
        let room = pack_len.saturating_sub(2);
        if room == 0 {
            return Err(Error::config(format!("pack_len {pack_len} leaves no room for text")));
        }
        let mut out = Vec::new();
        for doc in &self.text {
            for chunk in doc.chunks(room) {
                out.push(assemble_sequence(&[], chunk, false)?);
            }
        }
        Ok(out)
    }
}

/// Shuffle `seqs` with `seed` and pack them.
pub fn shuffled_packs(
    seqs: &[MultimodalSequence],
    seed: u64,
    pack_len: usize,
    layout: &LayoutConfig,
) -> Result<Vec<PackedBatch>> {
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let shuffled: Vec<MultimodalSequence> = order.iter().map(|&i| seqs[i].clone()).collect();
    pack_sequences(&shuffled, pack_len, layout)
}
