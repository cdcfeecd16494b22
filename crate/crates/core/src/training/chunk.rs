//! Streaming batches for truncated backpropagation.
//!
//! Each batch slot walks one sequence in chunks of at most `chunk_size`
//! positions. Model state is carried from one chunk of a sequence to the
//! next, gradients are not. When a sequence ends, its slot takes the next
//! sequence from the queue at the following chunk, marked `fresh` so the
//! caller resets that slot's state.

use std::collections::VecDeque;

use crate::vocab::TokenSeq;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSlot {
    /// Index of the sequence in the caller's data.
    pub seq: usize,
    pub start: usize,
    pub end: usize,
    /// First chunk of this sequence: the slot's state must be reset.
    pub fresh: bool,
}

impl ChunkSlot {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkBatch {
    /// One entry per batch slot; `None` when the slot is idle.
    pub slots: Vec<Option<ChunkSlot>>,
}

impl ChunkBatch {
    /// Longest chunk in the batch.
    pub fn steps(&self) -> usize {
        self.slots.iter().flatten().map(ChunkSlot::len).max().unwrap_or(0)
    }

    pub fn active(&self) -> usize {
        self.slots.iter().flatten().count()
    }
}

#[derive(Debug, Clone)]
pub struct ChunkStream {
    chunk_size: usize,
    lengths: Vec<usize>,
    queue: VecDeque<usize>,
    cursor: Vec<Option<(usize, usize)>>,
}

impl ChunkStream {
    /// `lengths[i]` is the number of positions of sequence `i`.
    pub fn new(lengths: Vec<usize>, batch_size: usize, chunk_size: usize) -> Self {
        assert!(chunk_size >= 1, "chunk size must be at least 1");
        assert!(batch_size >= 1, "batch size must be at least 1");
        ChunkStream { chunk_size, lengths, queue: VecDeque::new(), cursor: vec![None; batch_size] }
    }

    pub fn enqueue(&mut self, seqs: impl IntoIterator<Item = usize>) {
        self.queue.extend(seqs);
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    /// Next batch, or `None` once the queue is empty and every slot is idle.
    pub fn next_batch(&mut self) -> Option<ChunkBatch> {
        let mut slots = Vec::with_capacity(self.cursor.len());
        for cur in &mut self.cursor {
            let mut fresh = false;
            if cur.is_none_or(|(s, pos)| pos >= self.lengths[s]) {
                *cur = None;
                while let Some(s) = self.queue.pop_front() {
                    if self.lengths[s] > 0 {
                        *cur = Some((s, 0));
                        fresh = true;
                        break;
                    }
                }
            }
            slots.push(cur.as_mut().map(|(s, pos)| {
                let start = *pos;
                let end = (start + self.chunk_size).min(self.lengths[*s]);
                *pos = end;
                ChunkSlot { seq: *s, start, end, fresh }
            }));
        }
        if slots.iter().all(Option::is_none) {
            None
        } else {
            Some(ChunkBatch { slots })
        }
    }
}

/// All chunk batches for one pass over `seqs` in order.
pub fn chunk_sequences(seqs: &[TokenSeq], batch_size: usize, chunk_size: usize) -> Vec<ChunkBatch> {
    let mut stream = ChunkStream::new(seqs.iter().map(TokenSeq::len).collect(), batch_size, chunk_size);
    stream.enqueue(0..seqs.len());
    std::iter::from_fn(|| stream.next_batch()).collect()
}
