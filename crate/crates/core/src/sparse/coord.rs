//! Voxel coordinates and the exact coordinate-to-row index.

use crate::error::{Error, Result};

pub const BATCH_BITS: u32 = 11;
pub const TIME_BITS: u32 = 11;
pub const SPACE_BITS: u32 = 14;

/// Exclusive upper bounds; the all-ones pattern is reserved as the empty key.
pub const MAX_BATCH: u32 = (1 << BATCH_BITS) - 1;
pub const MAX_TIME: u32 = (1 << TIME_BITS) - 1;
pub const MAX_SPACE: u32 = (1 << SPACE_BITS) - 1;

/// A spatio-temporal voxel site `(batch, t, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coord4 {
    pub batch: u32,
    pub t: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Coord4 {
    pub const fn new(batch: u32, t: u32, x: u32, y: u32, z: u32) -> Self {
        Self { batch, t, x, y, z }
    }

    pub fn check(&self) -> Result<()> {
        if self.batch >= MAX_BATCH
            || self.t >= MAX_TIME
            || self.x >= MAX_SPACE
            || self.y >= MAX_SPACE
            || self.z >= MAX_SPACE
        {
            return Err(Error::Config(format!("coordinate {self:?} exceeds packing limits")));
        }
        Ok(())
    }

    /// Packs into 64 bits; integer order of keys equals lexicographic
    /// order of `(batch, t, x, y, z)`.
    #[inline]
    pub fn pack(&self) -> u64 {
        ((self.batch as u64) << (TIME_BITS + 3 * SPACE_BITS))
            | ((self.t as u64) << (3 * SPACE_BITS))
            | ((self.x as u64) << (2 * SPACE_BITS))
            | ((self.y as u64) << SPACE_BITS)
            | self.z as u64
    }

    #[inline]
    pub fn unpack(key: u64) -> Self {
        let m = (1u64 << SPACE_BITS) - 1;
        Self {
            batch: (key >> (TIME_BITS + 3 * SPACE_BITS)) as u32,
            t: ((key >> (3 * SPACE_BITS)) & ((1 << TIME_BITS) - 1)) as u32,
            x: ((key >> (2 * SPACE_BITS)) & m) as u32,
            y: ((key >> SPACE_BITS) & m) as u32,
            z: (key & m) as u32,
        }
    }

    /// `[t, x, y, z]`.
    pub fn spatial(&self) -> [u32; 4] {
        [self.t, self.x, self.y, self.z]
    }

    pub fn with_spatial(batch: u32, s: [u32; 4]) -> Self {
        Self::new(batch, s[0], s[1], s[2], s[3])
    }
}

const EMPTY: u64 = u64::MAX;

/// Open-addressing (linear probing) map from packed coordinates to rows.
#[derive(Clone, Debug)]
pub struct CoordIndex {
    keys: Vec<u64>,
    rows: Vec<u32>,
    mask: usize,
    len: usize,
}

impl CoordIndex {
    pub fn with_capacity(n: usize) -> Self {
        let cap = (n.max(4) * 2).next_power_of_two();
        Self {
            keys: vec![EMPTY; cap],
            rows: vec![0; cap],
            mask: cap - 1,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn slot(&self, key: u64) -> usize {
        // Fibonacci hashing; the top bits are the best mixed.
        (key.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(32) as usize) & self.mask
    }

    /// Inserts `key -> row`; returns the existing row if already present.
    pub fn insert(&mut self, key: u64, row: u32) -> Option<u32> {
        debug_assert_ne!(key, EMPTY);
        if (self.len + 1) * 2 > self.keys.len() {
            self.grow();
        }
        let mut i = self.slot(key);
        loop {
            match self.keys[i] {
                EMPTY => {
                    self.keys[i] = key;
                    self.rows[i] = row;
                    self.len += 1;
                    return None;
                }
                k if k == key => return Some(self.rows[i]),
                _ => i = (i + 1) & self.mask,
            }
        }
    }

    #[inline]
    pub fn get(&self, key: u64) -> Option<u32> {
        let mut i = self.slot(key);
        loop {
            match self.keys[i] {
                EMPTY => return None,
                k if k == key => return Some(self.rows[i]),
                _ => i = (i + 1) & self.mask,
            }
        }
    }

    fn grow(&mut self) {
        let old_keys = std::mem::take(&mut self.keys);
        let old_rows = std::mem::take(&mut self.rows);
        let cap = old_keys.len() * 2;
        self.keys = vec![EMPTY; cap];
        self.rows = vec![0; cap];
        self.mask = cap - 1;
        self.len = 0;
        for (k, r) in old_keys.into_iter().zip(old_rows) {
            if k != EMPTY {
                self.insert(k, r);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pack_round_trips_and_orders(
            a in (0u32..MAX_BATCH, 0u32..MAX_TIME, 0u32..MAX_SPACE, 0u32..MAX_SPACE, 0u32..MAX_SPACE),
            b in (0u32..MAX_BATCH, 0u32..MAX_TIME, 0u32..MAX_SPACE, 0u32..MAX_SPACE, 0u32..MAX_SPACE),
        ) {
            let ca = Coord4::new(a.0, a.1, a.2, a.3, a.4);
            let cb = Coord4::new(b.0, b.1, b.2, b.3, b.4);
            prop_assert_eq!(Coord4::unpack(ca.pack()), ca);
            prop_assert_eq!(ca.pack().cmp(&cb.pack()), ca.cmp(&cb));
        }

        #[test]
        fn index_agrees_with_std_map(keys in proptest::collection::vec(0u64..5000, 0..400)) {
            let mut idx = CoordIndex::with_capacity(1);
            let mut reference = std::collections::HashMap::new();
            for (row, &k) in keys.iter().enumerate() {
                let prev = idx.insert(k, row as u32);
                let want = reference.get(&k).copied();
                prop_assert_eq!(prev, want);
                reference.entry(k).or_insert(row as u32);
            }
            prop_assert_eq!(idx.len(), reference.len());
            for k in 0..5000u64 {
                prop_assert_eq!(idx.get(k), reference.get(&k).copied());
            }
        }
    }

    #[test]
    fn limits_are_enforced() {
        assert!(Coord4::new(0, 0, MAX_SPACE, 0, 0).check().is_err());
        assert!(Coord4::new(0, 0, MAX_SPACE - 1, 0, 0).check().is_ok());
    }
}
