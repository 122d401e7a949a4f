//! Core domain types shared by the tracker, the peer protocol and the engine:
//! peer identity and class, link bandwidth, file partitioning and possession
//! bitfields.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// Default piece size in bytes.
pub const DEFAULT_PIECE_SIZE: u64 = 262_144;
/// Default block size in bytes.
pub const DEFAULT_BLOCK_SIZE: u64 = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PeerId(pub u32);

impl PeerId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PeerClass {
    Mobile,
    Static,
}

impl PeerClass {
    pub fn is_mobile(self) -> bool {
        matches!(self, PeerClass::Mobile)
    }
}

impl fmt::Display for PeerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeerClass::Mobile => "mobile",
            PeerClass::Static => "static",
        })
    }
}

/// Link capacity in bytes per second. Both directions are strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bandwidth {
    up_rate: u64,
    down_rate: u64,
}

impl Bandwidth {
    pub fn new(up_rate: u64, down_rate: u64) -> Result<Self, ConfigError> {
        let mut violations = Vec::new();
        if up_rate == 0 {
            violations.push("up_rate must be > 0".to_string());
        }
        if down_rate == 0 {
            violations.push("down_rate must be > 0".to_string());
        }
        if violations.is_empty() {
            Ok(Self { up_rate, down_rate })
        } else {
            Err(ConfigError { violations })
        }
    }

    pub fn up_rate(&self) -> u64 {
        self.up_rate
    }

    pub fn down_rate(&self) -> u64 {
        self.down_rate
    }
}

/// Mobile iff the downlink does not exceed `mobile_down_threshold`.
pub fn classify_peer(bw: Bandwidth, mobile_down_threshold: u64) -> PeerClass {
    if bw.down_rate() <= mobile_down_threshold {
        PeerClass::Mobile
    } else {
        PeerClass::Static
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub piece: u32,
    pub block: u32,
}

impl BlockId {
    pub fn new(piece: u32, block: u32) -> Self {
        Self { piece, block }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.piece, self.block)
    }
}

/// Partitioning of the shared file into pieces and blocks.
///
/// Every piece except possibly the last holds `piece_size` bytes and every
/// block except possibly the last block of the last piece holds `block_size`
/// bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileMap {
    file_size: u64,
    piece_size: u64,
    block_size: u64,
    num_pieces: u32,
}

/// Splits a file into pieces and blocks.
pub fn partition_file(
    file_size: u64,
    piece_size: u64,
    block_size: u64,
) -> Result<FileMap, ConfigError> {
    let mut violations = Vec::new();
    if file_size == 0 {
        violations.push("file_size must be > 0".to_string());
    }
    if piece_size == 0 {
        violations.push("piece_size must be > 0".to_string());
    }
    if block_size == 0 {
        violations.push("block_size must be > 0".to_string());
    }
    if piece_size > 0 && block_size > 0 && !piece_size.is_multiple_of(block_size) {
        violations.push(format!(
            "piece_size ({piece_size}) must be a multiple of block_size ({block_size})"
        ));
    }
    if !violations.is_empty() {
        return Err(ConfigError { violations });
    }
    // A piece larger than the file collapses to a single piece.
    let piece_size = piece_size.min(file_size.div_ceil(block_size) * block_size);
    let num_pieces = file_size.div_ceil(piece_size);
    let num_pieces = u32::try_from(num_pieces)
        .map_err(|_| ConfigError::single("file has more than u32::MAX pieces"))?;
    Ok(FileMap {
        file_size,
        piece_size,
        block_size,
        num_pieces,
    })
}

impl FileMap {
    pub fn file_size(&self) -> u64 {
        self.file_size
    }

    pub fn piece_size(&self) -> u64 {
        self.piece_size
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn num_pieces(&self) -> u32 {
        self.num_pieces
    }

    fn full_blocks_per_piece(&self) -> u32 {
        (self.piece_size / self.block_size) as u32
    }

    pub fn piece_len(&self, piece: u32) -> u64 {
        assert!(piece < self.num_pieces, "piece {piece} out of range");
        if piece + 1 < self.num_pieces {
            self.piece_size
        } else {
            self.file_size - self.piece_size * u64::from(self.num_pieces - 1)
        }
    }

    pub fn blocks_per_piece(&self, piece: u32) -> u32 {
        self.piece_len(piece).div_ceil(self.block_size) as u32
    }

    pub fn size_of_block(&self, piece: u32, block: u32) -> u64 {
        let len = self.piece_len(piece);
        let start = u64::from(block) * self.block_size;
        assert!(start < len, "block {block} out of range for piece {piece}");
        (len - start).min(self.block_size)
    }

    pub fn block_bytes(&self, id: BlockId) -> u64 {
        self.size_of_block(id.piece, id.block)
    }

    pub fn total_blocks(&self) -> u32 {
        self.full_blocks_per_piece() * (self.num_pieces - 1) + self.blocks_per_piece(self.num_pieces - 1)
    }

    /// Dense index of a block across the whole file.
    pub fn block_index(&self, id: BlockId) -> usize {
        (id.piece * self.full_blocks_per_piece() + id.block) as usize
    }

    pub fn blocks_of(&self, piece: u32) -> impl Iterator<Item = BlockId> {
        (0..self.blocks_per_piece(piece)).map(move |b| BlockId::new(piece, b))
    }
}

/// Per-peer possession state: completed pieces plus individual blocks of
/// partially held pieces. Bits are only ever set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitfield {
    pieces: Vec<bool>,
    blocks: Vec<bool>,
    held_blocks: u32,
    held_pieces: u32,
}

impl Bitfield {
    pub fn empty(map: &FileMap) -> Self {
        Self {
            pieces: vec![false; map.num_pieces() as usize],
            blocks: vec![false; map.total_blocks() as usize],
            held_blocks: 0,
            held_pieces: 0,
        }
    }

    pub fn full(map: &FileMap) -> Self {
        Self {
            pieces: vec![true; map.num_pieces() as usize],
            blocks: vec![true; map.total_blocks() as usize],
            held_blocks: map.total_blocks(),
            held_pieces: map.num_pieces(),
        }
    }

    pub fn num_pieces(&self) -> u32 {
        self.pieces.len() as u32
    }

    pub fn has_piece(&self, piece: u32) -> bool {
        self.pieces[piece as usize]
    }

    pub fn has_block(&self, map: &FileMap, id: BlockId) -> bool {
        self.blocks[map.block_index(id)]
    }

    pub fn held_blocks(&self) -> u32 {
        self.held_blocks
    }

    pub fn held_pieces(&self) -> u32 {
        self.held_pieces
    }

    pub fn is_empty(&self) -> bool {
        self.held_pieces == 0
    }

    pub fn is_complete(&self) -> bool {
        self.held_pieces as usize == self.pieces.len()
    }

    pub fn missing_pieces(&self) -> impl Iterator<Item = u32> + '_ {
        self.pieces
            .iter()
            .enumerate()
            .filter(|(_, &h)| !h)
            .map(|(i, _)| i as u32)
    }

    /// True when `other` holds at least one piece this bitfield lacks.
    pub fn lacks_any_of(&self, other: &Bitfield) -> bool {
        self.pieces
            .iter()
            .zip(&other.pieces)
            .any(|(&mine, &theirs)| theirs && !mine)
    }

    /// Sets a block bit. Returns `Some(true)` if this completed its piece,
    /// `Some(false)` otherwise and `None` if the block was already held.
    pub fn set_block(&mut self, map: &FileMap, id: BlockId) -> Option<bool> {
        let idx = map.block_index(id);
        if self.blocks[idx] {
            return None;
        }
        self.blocks[idx] = true;
        self.held_blocks += 1;
        let complete = map.blocks_of(id.piece).all(|b| self.blocks[map.block_index(b)]);
        if complete {
            self.pieces[id.piece as usize] = true;
            self.held_pieces += 1;
        }
        Some(complete)
    }
}

/// Orders missing pieces from rarest to most common given per-piece replica
/// counts among neighbors. Ties are broken by a seeded uniform shuffle.
pub fn rarest_order_by_counts<R: Rng + ?Sized>(counts: &[u32], own: &Bitfield, rng: &mut R) -> Vec<u32> {
    let mut missing: Vec<u32> = own.missing_pieces().collect();
    missing.shuffle(rng);
    missing.sort_by_key(|&p| counts[p as usize]);
    missing
}

/// Replica count of each piece across the given bitfields.
pub fn replica_counts(num_pieces: u32, neighbors: &[&Bitfield]) -> Vec<u32> {
    let mut counts = vec![0u32; num_pieces as usize];
    for bf in neighbors {
        for (c, &held) in counts.iter_mut().zip(&bf.pieces) {
            *c += u32::from(held);
        }
    }
    counts
}

/// Pieces `own` lacks, rarest first among `neighbor_bitfields`.
pub fn rarest_order<R: Rng + ?Sized>(neighbor_bitfields: &[&Bitfield], own: &Bitfield, rng: &mut R) -> Vec<u32> {
    let counts = replica_counts(own.num_pieces(), neighbor_bitfields);
    rarest_order_by_counts(&counts, own, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bitfield_with(map: &FileMap, pieces: &[u32]) -> Bitfield {
        let mut bf = Bitfield::empty(map);
        for &p in pieces {
            for b in map.blocks_of(p) {
                bf.set_block(map, b);
            }
        }
        bf
    }

    #[test]
    fn partition_exact_division() {
        let map = partition_file(1_048_576, 262_144, 16_384).unwrap();
        assert_eq!(map.num_pieces(), 4);
        for p in 0..4 {
            assert_eq!(map.blocks_per_piece(p), 16);
        }
        assert_eq!(map.total_blocks(), 64);
    }

    #[test]
    fn partition_identity() {
        let map = partition_file(100, 100, 100).unwrap();
        assert_eq!(map.num_pieces(), 1);
        assert_eq!(map.blocks_per_piece(0), 1);
        assert_eq!(map.size_of_block(0, 0), 100);
    }

    #[test]
    fn partition_ragged_tail() {
        let map = partition_file(1_000_000, 262_144, 16_384).unwrap();
        assert_eq!(map.num_pieces(), 4);
        assert_eq!(map.piece_len(3), 213_568);
        assert_eq!(map.blocks_per_piece(3), 14);
        for b in 0..13 {
            assert_eq!(map.size_of_block(3, b), 16_384);
        }
        assert_eq!(map.size_of_block(3, 13), 576);
        // summation oracle
        let total: u64 = (0..map.num_pieces())
            .flat_map(|p| (0..map.blocks_per_piece(p)).map(move |b| (p, b)))
            .map(|(p, b)| map.size_of_block(p, b))
            .sum();
        assert_eq!(total, 1_000_000);
    }

    #[test]
    fn partition_rejects_bad_sizes() {
        let err = partition_file(0, 0, 0).unwrap_err();
        assert_eq!(err.violations.len(), 3);
        let err = partition_file(1000, 300, 200).unwrap_err();
        assert!(err.violations[0].contains("multiple"));
    }

    #[test]
    fn piece_larger_than_file_is_one_piece() {
        let map = partition_file(40_000, 262_144, 16_384).unwrap();
        assert_eq!(map.num_pieces(), 1);
        assert_eq!(map.blocks_per_piece(0), 3);
        assert_eq!(map.size_of_block(0, 2), 40_000 - 2 * 16_384);
    }

    #[test]
    fn classify_examples() {
        let threshold = 64 * 1024;
        let phone = Bandwidth::new(10 * 1024, 40 * 1024).unwrap();
        assert_eq!(classify_peer(phone, threshold), PeerClass::Mobile);
        let desktop = Bandwidth::new(100 * 1024, 1000 * 1024).unwrap();
        assert_eq!(classify_peer(desktop, threshold), PeerClass::Static);
        // A phone on Wi-Fi has a fast downlink and is not treated as mobile.
        let wifi_phone = Bandwidth::new(2 * 1024 * 1024, 20 * 1024 * 1024).unwrap();
        assert_eq!(classify_peer(wifi_phone, threshold), PeerClass::Static);
    }

    #[test]
    fn bandwidth_rejects_zero() {
        assert_eq!(Bandwidth::new(0, 0).unwrap_err().violations.len(), 2);
    }

    #[test]
    fn bitfield_piece_bit_follows_blocks() {
        let map = partition_file(3 * 16_384, 2 * 16_384, 16_384).unwrap();
        let mut bf = Bitfield::empty(&map);
        assert_eq!(bf.set_block(&map, BlockId::new(0, 1)), Some(false));
        assert!(!bf.has_piece(0));
        assert_eq!(bf.set_block(&map, BlockId::new(0, 0)), Some(true));
        assert!(bf.has_piece(0));
        assert_eq!(bf.set_block(&map, BlockId::new(0, 0)), None);
        assert_eq!(bf.set_block(&map, BlockId::new(1, 0)), Some(true));
        assert!(bf.is_complete());
        assert_eq!(bf.held_blocks(), 3);
    }

    #[test]
    fn rarest_nothing_missing() {
        let map = partition_file(4 * 16_384, 16_384, 16_384).unwrap();
        let own = Bitfield::full(&map);
        let n = Bitfield::full(&map);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(rarest_order(&[&n], &own, &mut rng).is_empty());
    }

    #[test]
    fn rarest_three_neighbors() {
        let map = partition_file(3 * 16_384, 16_384, 16_384).unwrap();
        let a = bitfield_with(&map, &[0, 1, 2]);
        let b = bitfield_with(&map, &[0, 2]);
        let c = bitfield_with(&map, &[0]);
        // brute-force replica counts
        let counts: Vec<u32> = (0..3)
            .map(|p| [&a, &b, &c].iter().filter(|bf| bf.has_piece(p)).count() as u32)
            .collect();
        assert_eq!(counts, vec![3, 1, 2]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let own = Bitfield::empty(&map);
            assert_eq!(rarest_order(&[&a, &b, &c], &own, &mut rng), vec![1, 2, 0]);
        }
    }

    #[test]
    fn rarest_tie_break_is_uniform() {
        let map = partition_file(2 * 16_384, 16_384, 16_384).unwrap();
        let n = bitfield_with(&map, &[0, 1]);
        let own = Bitfield::empty(&map);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 1000;
        let first_p0 = (0..draws)
            .filter(|_| rarest_order(&[&n], &own, &mut rng)[0] == 0)
            .count() as f64;
        // chi-square, 1 dof, critical value 6.635 at p = 0.01
        let expected = draws as f64 / 2.0;
        let chi2 = (first_p0 - expected).powi(2) / expected
            + ((draws as f64 - first_p0) - expected).powi(2) / expected;
        assert!(chi2 < 6.635, "chi2 = {chi2}, p0 first {first_p0} times");
    }

    #[test]
    fn rarest_with_no_neighbors_lists_missing() {
        let map = partition_file(5 * 16_384, 16_384, 16_384).unwrap();
        let own = bitfield_with(&map, &[1, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut order = rarest_order(&[], &own, &mut rng);
        order.sort_unstable();
        assert_eq!(order, vec![0, 2, 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn block_sizes_sum_to_file_size(
            file_size in 1u64..2_000_000,
            block_size in 1u64..40_000,
            mult in 1u64..20,
        ) {
            let map = partition_file(file_size, block_size * mult, block_size).unwrap();
            let mut total = 0u64;
            for p in 0..map.num_pieces() {
                let bpp = map.blocks_per_piece(p);
                for b in 0..bpp {
                    let sz = map.size_of_block(p, b);
                    let last = p + 1 == map.num_pieces() && b + 1 == bpp;
                    if !last {
                        prop_assert_eq!(sz, map.block_size());
                    }
                    total += sz;
                }
                if p + 1 < map.num_pieces() {
                    prop_assert_eq!(map.piece_len(p), map.piece_size());
                }
            }
            prop_assert_eq!(total, file_size);
            prop_assert_eq!(u64::from(map.num_pieces()), file_size.div_ceil(map.piece_size()));
        }

        #[test]
        fn classify_is_monotone_in_down_rate(
            up in 1u64..1_000_000,
            d1 in 1u64..1_000_000,
            d2 in 1u64..1_000_000,
            threshold in 1u64..1_000_000,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let c_lo = classify_peer(Bandwidth::new(up, lo).unwrap(), threshold);
            let c_hi = classify_peer(Bandwidth::new(up, hi).unwrap(), threshold);
            // Static at a lower downlink implies Static at a higher one.
            prop_assert!(!(c_lo == PeerClass::Static && c_hi == PeerClass::Mobile));
        }

        #[test]
        fn rarest_is_sorted_permutation_of_missing(
            held in proptest::collection::vec(any::<bool>(), 1..24),
            neighbors in proptest::collection::vec(proptest::collection::vec(any::<bool>(), 24), 0..6),
            seed in any::<u64>(),
        ) {
            let n = held.len() as u64;
            let map = partition_file(n * 16_384, 16_384, 16_384).unwrap();
            let pick = |bits: &[bool]| {
                let pieces: Vec<u32> = (0..n as u32).filter(|&p| bits[p as usize]).collect();
                bitfield_with(&map, &pieces)
            };
            let own = pick(&held);
            let nbfs: Vec<Bitfield> = neighbors.iter().map(|b| pick(b)).collect();
            let refs: Vec<&Bitfield> = nbfs.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let order = rarest_order(&refs, &own, &mut rng);
            let counts = replica_counts(map.num_pieces(), &refs);
            let mut sorted = order.clone();
            sorted.sort_unstable();
            let missing: Vec<u32> = own.missing_pieces().collect();
            prop_assert_eq!(sorted, missing);
            for w in order.windows(2) {
                prop_assert!(counts[w[0] as usize] <= counts[w[1] as usize]);
            }
        }
    }
}
