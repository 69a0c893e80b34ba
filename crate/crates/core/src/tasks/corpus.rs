//! Byte-level ingestion of plain text files.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::TaskBatch;
use super::Partition;
use crate::error::{invalid, Result};

/// A file cut into non-overlapping blocks of `seq_len + 1` bytes. Each block
/// is assigned to the held-out split when the first eight bytes of its
/// SHA-256 digest, read as a little-endian integer, fall below
/// `heldout_permille / 1000` of the range. Tokens are raw byte values, so the
/// model vocabulary must be at least 256.
#[derive(Clone, Debug)]
pub struct ByteCorpus {
    seq_len: usize,
    train: Vec<Vec<u8>>,
    heldout: Vec<Vec<u8>>,
}

impl ByteCorpus {
    pub fn from_bytes(bytes: &[u8], seq_len: usize, heldout_permille: u32) -> Result<Self> {
        if seq_len == 0 || heldout_permille > 1000 {
            return Err(invalid("seq_len must be positive and heldout_permille at most 1000"));
        }
        let (mut train, mut heldout) = (Vec::new(), Vec::new());
        for block in bytes.chunks_exact(seq_len + 1) {
            let digest = Sha256::digest(block);
            let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            if (h % 1000) < heldout_permille as u64 {
                heldout.push(block.to_vec());
            } else {
                train.push(block.to_vec());
            }
        }
        if train.is_empty() && heldout.is_empty() {
            return Err(invalid(format!("text shorter than one block of {} bytes", seq_len + 1)));
        }
        Ok(ByteCorpus { seq_len, train, heldout })
    }

    pub fn from_path(path: impl AsRef<Path>, seq_len: usize, heldout_permille: u32) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, seq_len, heldout_permille)
    }

    pub fn len(&self, partition: Partition) -> usize {
        self.blocks(partition).len()
    }

    pub fn is_empty(&self, partition: Partition) -> bool {
        self.len(partition) == 0
    }

    fn blocks(&self, partition: Partition) -> &[Vec<u8>] {
        match partition {
            Partition::Train => &self.train,
            Partition::Heldout => &self.heldout,
        }
    }

    /// Batch `index` of a partition, cycling through its blocks.
    pub fn batch(&self, partition: Partition, batch_size: usize, index: u64) -> Result<TaskBatch> {
        let blocks = self.blocks(partition);
        if blocks.is_empty() || batch_size == 0 {
            return Err(invalid("empty partition or zero batch size"));
        }
        let mut tokens = Vec::with_capacity(batch_size * self.seq_len);
        let mut targets = Vec::with_capacity(batch_size * self.seq_len);
        for i in 0..batch_size {
            let b = &blocks[(index as usize * batch_size + i) % blocks.len()];
            tokens.extend(b[..self.seq_len].iter().map(|&x| x as usize));
            targets.extend(b[1..].iter().map(|&x| x as i64));
        }
        Ok(TaskBatch {
            batch: batch_size,
            seq_len: self.seq_len,
            query_mask: vec![true; tokens.len()],
            tokens,
            targets,
        })
    }
}
