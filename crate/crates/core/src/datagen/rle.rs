use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Mask;

/// Uncompressed COCO-style run-length encoding.
///
/// Runs are taken in column-major order and alternate zeros/ones, starting
/// with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub counts: Vec<u64>,
    /// `[height, width]`
    pub size: [usize; 2],
}

pub fn encode_rle(mask: &Mask) -> Rle {
    let (h, w) = mask.shape();
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        counts,
        size: [h, w],
    }
}

pub fn decode_rle(rle: &Rle) -> Result<Mask> {
    let [h, w] = rle.size;
    let total: u64 = rle.counts.iter().sum();
    if total != (h * w) as u64 {
        return Err(Error::format(
            "rle",
            format!("counts sum to {total}, expected {h}x{w} = {}", h * w),
        ));
    }
    let mut mask = Mask::zeros(h, w);
    let mut idx = 0usize;
    for (i, &run) in rle.counts.iter().enumerate() {
        let value = i % 2 == 1;
        for k in idx..idx + run as usize {
            if value {
                mask.set(k % h, k / h, true);
            }
        }
        idx += run as usize;
    }
    Ok(mask)
}
