use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Multimodal,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Next<B> {
    Batch(StreamKind, B),
    /// The stream whose turn it was ran dry.
    EpochBoundary,
}

/// Strict 1:1 alternation of multimodal and text batches, starting with
/// multimodal. Without text mixing only the multimodal stream is used.
#[derive(Debug, Clone)]
pub struct RoundRobin<B> {
    mm: VecDeque<B>,
    text: VecDeque<B>,
    text_mix: bool,
    text_turn: bool,
}

impl<B> RoundRobin<B> {
    pub fn new(mm: Vec<B>, text: Vec<B>, text_mix: bool) -> Self {
        Self {
            mm: mm.into(),
            text: text.into(),
            text_mix,
            text_turn: false,
        }
    }

    pub fn next_batch(&mut self) -> Next<B> {
        let kind = if self.text_mix && self.text_turn {
            StreamKind::Text
        } else {
            StreamKind::Multimodal
        };
        let queue = match kind {
            StreamKind::Multimodal => &mut self.mm,
            StreamKind::Text => &mut self.text,
        };
        match queue.pop_front() {
            Some(b) => {
                self.text_turn = !self.text_turn;
                Next::Batch(kind, b)
            }
            None => Next::EpochBoundary,
        }
    }
}
