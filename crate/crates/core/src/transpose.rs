//! Transpose unit: regular (one element per word) versus transposed (one
//! bit position per row) layouts.

use serde::{Deserialize, Serialize};

use crate::geometry::GeometryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Regular,
    Transposed,
}

/// A block of unsigned elements in either layout.
///
/// Regular blocks keep one element per `data` word. Transposed blocks keep
/// `width_bits` rows of `lanes.div_ceil(64)` words; bit `j % 64` of word
/// `k * words + j / 64` is bit `k` of element `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitBlock {
    pub width_bits: usize,
    pub lanes: usize,
    pub layout: Layout,
    data: Vec<u64>,
}

impl BitBlock {
    /// Panics if `width_bits > 64` or an element does not fit.
    pub fn regular(elements: Vec<u64>, width_bits: usize) -> Self {
        assert!(width_bits <= 64, "element width {width_bits} exceeds 64 bits");
        if width_bits < 64 {
            let limit = 1u64 << width_bits;
            assert!(
                elements.iter().all(|&e| e < limit),
                "element does not fit in {width_bits} bits"
            );
        }
        BitBlock {
            width_bits,
            lanes: elements.len(),
            layout: Layout::Regular,
            data: elements,
        }
    }

    pub fn words_per_row(&self) -> usize {
        self.lanes.div_ceil(64)
    }

    /// Elements of a regular block.
    pub fn elements(&self) -> Option<&[u64]> {
        (self.layout == Layout::Regular).then_some(&self.data[..])
    }

    /// Bit row `k` of a transposed block.
    pub fn plane(&self, k: usize) -> Option<&[u64]> {
        let w = self.words_per_row();
        (self.layout == Layout::Transposed && k < self.width_bits).then(|| &self.data[k * w..(k + 1) * w])
    }

    pub fn bit(&self, k: usize, j: usize) -> bool {
        match self.layout {
            Layout::Regular => self.data[j] >> k & 1 == 1,
            Layout::Transposed => self.data[k * self.words_per_row() + j / 64] >> (j % 64) & 1 == 1,
        }
    }

    pub fn popcount(&self) -> u64 {
        self.data.iter().map(|w| w.count_ones() as u64).sum()
    }
}

pub fn to_transposed(block: &BitBlock) -> BitBlock {
    if block.layout == Layout::Transposed {
        return block.clone();
    }
    let words = block.words_per_row();
    let mut data = vec![0u64; block.width_bits * words];
    for (j, &e) in block.data.iter().enumerate() {
        let mut v = e;
        while v != 0 {
            let k = v.trailing_zeros() as usize;
            data[k * words + j / 64] |= 1 << (j % 64);
            v &= v - 1;
        }
    }
    BitBlock {
        width_bits: block.width_bits,
        lanes: block.lanes,
        layout: Layout::Transposed,
        data,
    }
}

pub fn from_transposed(block: &BitBlock) -> BitBlock {
    if block.layout == Layout::Regular {
        return block.clone();
    }
    let words = block.words_per_row();
    let mut data = vec![0u64; block.lanes];
    for k in 0..block.width_bits {
        for w in 0..words {
            let mut bits = block.data[k * words + w];
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                data[w * 64 + b] |= 1 << k;
                bits &= bits - 1;
            }
        }
    }
    BitBlock {
        width_bits: block.width_bits,
        lanes: block.lanes,
        layout: Layout::Regular,
        data,
    }
}

/// Transposed bytes as stored on disk: `width_bits` planes of
/// `lanes.div_ceil(8)` bytes, element `j` at bit `j % 8` of byte `j / 8`.
pub fn to_plane_bytes(block: &BitBlock) -> Vec<u8> {
    let t = to_transposed(block);
    let stride = t.lanes.div_ceil(8);
    let mut out = vec![0u8; t.width_bits * stride];
    for k in 0..t.width_bits {
        let plane = t.plane(k).expect("transposed");
        for (i, byte) in out[k * stride..(k + 1) * stride].iter_mut().enumerate() {
            *byte = (plane[i / 8] >> (8 * (i % 8))) as u8;
        }
    }
    out
}

/// Inverse of `to_plane_bytes`; `None` if the byte count does not match.
pub fn from_plane_bytes(bytes: &[u8], width_bits: usize, lanes: usize) -> Option<BitBlock> {
    let stride = lanes.div_ceil(8);
    if bytes.len() != width_bits * stride {
        return None;
    }
    let words = lanes.div_ceil(64);
    let mut data = vec![0u64; width_bits * words];
    for k in 0..width_bits {
        for (i, &b) in bytes[k * stride..(k + 1) * stride].iter().enumerate() {
            data[k * words + i / 8] |= (b as u64) << (8 * (i % 8));
        }
        if lanes % 64 != 0 {
            data[k * words + words - 1] &= (1u64 << (lanes % 64)) - 1;
        }
    }
    Some(BitBlock {
        width_bits,
        lanes,
        layout: Layout::Transposed,
        data,
    })
}

/// Access cycles for the transpose units of every slice to convert `bytes`
/// of regular data, one 64-bit column per unit per cycle.
pub fn tmu_cycles(bytes: usize, cfg: &GeometryConfig) -> u64 {
    let columns = (bytes * 8).div_ceil(64);
    columns.div_ceil(cfg.tmus_per_slice * cfg.num_slices) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two() {
        let t = to_transposed(&BitBlock::regular(vec![0b01, 0b10], 2));
        assert_eq!(t.plane(0).unwrap(), &[0b01]);
        assert_eq!(t.plane(1).unwrap(), &[0b10]);
        assert!(t.bit(0, 0) && !t.bit(0, 1) && !t.bit(1, 0) && t.bit(1, 1));
        assert_eq!(from_transposed(&t).elements().unwrap(), &[0b01, 0b10]);
    }

    #[test]
    fn zeros_stay_zero() {
        let t = to_transposed(&BitBlock::regular(vec![0; 300], 8));
        assert_eq!(t.popcount(), 0);
        assert_eq!(from_transposed(&t), BitBlock::regular(vec![0; 300], 8));
    }

    #[test]
    fn random_256_by_8_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let elements: Vec<u64> = (0..256).map(|_| rng.gen_range(0..256)).collect();
        let block = BitBlock::regular(elements, 8);
        let t = to_transposed(&block);
        assert_eq!(t.layout, Layout::Transposed);
        assert_eq!(from_transposed(&t), block);
    }

    #[test]
    fn single_element() {
        let block = BitBlock::regular(vec![0b1011_0110], 8);
        let t = to_transposed(&block);
        for k in 0..8 {
            assert_eq!(t.bit(k, 0), block.bit(k, 0));
        }
        assert_eq!(from_transposed(&t), block);
    }

    #[test]
    fn plane_bytes_layout() {
        let block = BitBlock::regular(vec![1, 2, 3, 0, 0, 0, 0, 0, 255], 8);
        let bytes = to_plane_bytes(&block);
        assert_eq!(bytes.len(), 16);
        assert_eq!(bytes[0], 0b101);
        assert_eq!(bytes[1], 1);
        assert_eq!(bytes[2], 0b110);
        let back = from_plane_bytes(&bytes, 8, 9).unwrap();
        assert_eq!(from_transposed(&back), block);
        assert!(from_plane_bytes(&bytes, 8, 20).is_none());
    }

    #[test]
    fn tmu_throughput() {
        let cfg = GeometryConfig::default();
        // 28 units move 28 columns of 8 bytes per cycle.
        assert_eq!(tmu_cycles(28 * 8, &cfg), 1);
        assert_eq!(tmu_cycles(28 * 8 + 1, &cfg), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn round_trip_and_popcount(
            (width, elements) in (1usize..=16).prop_flat_map(|w| (Just(w), prop::collection::vec(0u64..(1 << w), 1..140)))
        ) {
            let block = BitBlock::regular(elements, width);
            let t = to_transposed(&block);
            prop_assert_eq!(t.popcount(), block.popcount());
            prop_assert_eq!(from_transposed(&t), block);
        }
    }
}
