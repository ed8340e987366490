//! Run-length encoding for binary masks.
//!
//! Runs are taken over the row-major flattening of the grid and always start
//! with a (possibly empty) run of zeros, so `counts` alternates
//! zeros, ones, zeros, ...

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::layout::InstanceMask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(height: usize, width: usize, bits: &[u8]) -> Rle {
        debug_assert_eq!(bits.len(), height * width);
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0u32;
        for &b in bits {
            let b = (b != 0) as u8;
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            height,
            width,
            counts,
        }
    }

    pub fn from_mask(mask: &InstanceMask, threshold: f32) -> Rle {
        Rle::encode(mask.height, mask.width, &mask.binarize(threshold))
    }

    pub fn decode(&self) -> Result<Vec<u8>> {
        let n = self.height * self.width;
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if total != n as u64 {
            return Err(CoreError::Rle(format!(
                "runs sum to {total}, grid has {n} cells"
            )));
        }
        let mut out = Vec::with_capacity(n);
        for (i, &c) in self.counts.iter().enumerate() {
            let v = (i % 2) as u8;
            out.extend(std::iter::repeat_n(v, c as usize));
        }
        Ok(out)
    }

    pub fn to_mask(&self) -> Result<InstanceMask> {
        Ok(InstanceMask::from_binary(
            self.height,
            self.width,
            &self.decode()?,
        ))
    }
}
