//! TAG → accumulator mapping policies.
//!
//! Every policy is consistent: a given `(tag, row_block)` pair always lands on
//! the same target, which is what lets partial products for one output meet
//! in a single HashPad.

use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::rng::{splitmix64, XorShift64Star};

/// Modulus of the prime-modular baseline (2^31 - 1).
pub const MAPPING_PRIME: u32 = 2_147_483_647;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MappingKind {
    Ring,
    PrimeModular,
    RandomTable,
    DrhmLower,
    DrhmUpper,
}

impl MappingKind {
    pub const ALL: [MappingKind; 5] = [
        MappingKind::Ring,
        MappingKind::PrimeModular,
        MappingKind::RandomTable,
        MappingKind::DrhmLower,
        MappingKind::DrhmUpper,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MappingKind::Ring => "ring",
            MappingKind::PrimeModular => "prime-modular",
            MappingKind::RandomTable => "random-table",
            MappingKind::DrhmLower => "drhm-lower",
            MappingKind::DrhmUpper => "drhm-upper",
        }
    }

    pub fn is_drhm(self) -> bool {
        matches!(self, MappingKind::DrhmLower | MappingKind::DrhmUpper)
    }
}

impl fmt::Display for MappingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MappingKind {
    type Err = MappingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        MappingKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| MappingError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MappingError {
    #[error("unknown mapping policy '{0}' (expected ring, prime-modular, random-table, drhm-lower or drhm-upper)")]
    UnknownKind(String),
    #[error("target count must be at least 1")]
    NoTargets,
    #[error("shift amount {0} must be below 32")]
    BadShift(u32),
    #[error("reseed for row block {requested} out of order; next expected block is {expected}")]
    OutOfOrderReseed { requested: usize, expected: usize },
    #[error("no seed recorded for row block {row_block} ({seeds} seeds available)")]
    MissingSeed { row_block: usize, seeds: usize },
}

/// State of one mapping policy.
#[derive(Debug, Clone)]
pub struct MappingPolicy {
    kind: MappingKind,
    n_targets: u32,
    k_bits: u32,
    rng_seed: u64,
    rng: XorShift64Star,
    seed_table: Vec<u32>,
    random_table: HashMap<u32, u32>,
}

impl MappingPolicy {
    pub fn new(kind: MappingKind, n_targets: u32, k_bits: u32, rng_seed: u64) -> Result<Self, MappingError> {
        if n_targets == 0 {
            return Err(MappingError::NoTargets);
        }
        if k_bits >= 32 {
            return Err(MappingError::BadShift(k_bits));
        }
        Ok(Self {
            kind,
            n_targets,
            k_bits,
            rng_seed,
            rng: XorShift64Star::new(rng_seed),
            seed_table: Vec::new(),
            random_table: HashMap::new(),
        })
    }

    pub fn kind(&self) -> MappingKind {
        self.kind
    }

    pub fn n_targets(&self) -> u32 {
        self.n_targets
    }

    pub fn k_bits(&self) -> u32 {
        self.k_bits
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// γ values, one per row block seen so far.
    pub fn seed_table(&self) -> &[u32] {
        &self.seed_table
    }

    /// Entries memoized by the random-table policy.
    pub fn random_table_len(&self) -> usize {
        self.random_table.len()
    }

    /// Appends the γ for `row_block`, which must be the next unseeded block.
    pub fn reseed(&mut self, row_block: usize) -> Result<u32, MappingError> {
        if row_block != self.seed_table.len() {
            return Err(MappingError::OutOfOrderReseed {
                requested: row_block,
                expected: self.seed_table.len(),
            });
        }
        let gamma = self.rng.next_u32() | 1;
        self.seed_table.push(gamma);
        Ok(gamma)
    }

    /// Reseeds until every block below `n_blocks` has a γ.
    pub fn ensure_seeds(&mut self, n_blocks: usize) {
        while self.seed_table.len() < n_blocks {
            let next = self.seed_table.len();
            self.reseed(next).expect("appending in order");
        }
    }

    /// Target in `[0, n_targets)` for `tag` issued from `row_block`.
    ///
    /// Random-table lookups memoize the tag; everything else is read-only.
    pub fn map_tag(&mut self, tag: u32, row_block: usize) -> Result<u32, MappingError> {
        if self.kind == MappingKind::RandomTable {
            let target = self.random_draw(tag);
            self.random_table.insert(tag, target);
            return Ok(target);
        }
        self.lookup(tag, row_block)
    }

    /// Side-effect free form of [`map_tag`](Self::map_tag).
    pub fn lookup(&self, tag: u32, row_block: usize) -> Result<u32, MappingError> {
        let n = self.n_targets;
        Ok(match self.kind {
            // Output rows are dealt to targets in a ring, one row block at a time.
            MappingKind::Ring => (row_block as u64 % n as u64) as u32,
            MappingKind::PrimeModular => (tag % MAPPING_PRIME) % n,
            MappingKind::RandomTable => match self.random_table.get(&tag) {
                Some(&t) => t,
                None => self.random_draw(tag),
            },
            MappingKind::DrhmLower | MappingKind::DrhmUpper => {
                let gamma = *self.seed_table.get(row_block).ok_or(MappingError::MissingSeed {
                    row_block,
                    seeds: self.seed_table.len(),
                })?;
                if self.kind == MappingKind::DrhmLower {
                    drhm_lower(tag, gamma, self.k_bits, n)
                } else {
                    drhm_upper(tag, gamma, self.k_bits, n)
                }
            }
        })
    }

    fn random_draw(&self, tag: u32) -> u32 {
        let draw = splitmix64(self.rng_seed ^ ((tag as u64) << 16) ^ 0x5EED);
        ((draw as u128 * self.n_targets as u128) >> 64) as u32
    }

    /// Per-target counts of `(tag, row_block)` pairs. Missing DRHM seeds are
    /// drawn on demand, in block order.
    pub fn heatmap<I>(&mut self, tags: I) -> Result<Vec<u64>, MappingError>
    where
        I: IntoIterator<Item = (u32, usize)>,
    {
        let mut counts = vec![0u64; self.n_targets as usize];
        for (tag, row_block) in tags {
            if self.kind.is_drhm() {
                self.ensure_seeds(row_block + 1);
            }
            counts[self.map_tag(tag, row_block)? as usize] += 1;
        }
        Ok(counts)
    }
}

/// Lower-bit hash: keep the low `32 - k` bits of the TAG, scale by γ, reduce.
pub fn drhm_lower(tag: u32, gamma: u32, k: u32, n: u32) -> u32 {
    let kept = (tag << k) >> k;
    reduce(kept.wrapping_mul(gamma), n)
}

/// Upper-bit hash: clear the low `k` bits of the TAG, scale by γ, reduce.
pub fn drhm_upper(tag: u32, gamma: u32, k: u32, n: u32) -> u32 {
    let kept = (tag >> k) << k;
    reduce(kept.wrapping_mul(gamma), n)
}

/// Reduces a wrapped 32-bit product into `[0, n)`.
///
/// The top `ceil(log2 n)` bits are folded onto the low bits first. For a
/// power-of-two `n`, `(x * γ) mod n` with odd γ only permutes the residues of
/// `x`, so without the fold a stride-`n` TAG stream would hit one target for
/// every seed. Products below `2^(32 - ceil(log2 n))` reduce unchanged.
fn reduce(product: u32, n: u32) -> u32 {
    if n <= 1 {
        return 0;
    }
    let bits = 32 - (n - 1).leading_zeros();
    let folded = product ^ (product >> (32 - bits));
    folded % n
}

/// Writes per-target counts as `target,count` CSV rows.
pub fn write_heatmap_csv<W: Write>(counts: &[u64], mut out: W) -> io::Result<()> {
    writeln!(out, "target,count")?;
    for (t, c) in counts.iter().enumerate() {
        writeln!(out, "{t},{c}")?;
    }
    Ok(())
}
