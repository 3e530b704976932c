//! Sets of fixed-width unsigned words, stored as canonical lists of
//! inclusive intervals.
//!
//! Every address set the certifier touches is an [`IntervalSet`]. The bit
//! width is carried at runtime so the same code serves 32-bit IPv4 and the
//! tiny widths used for exhaustive testing.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WordsetError {
    #[error("invalid bit width {0} (expected 1..=32)")]
    InvalidWidth(u8),
    #[error("value {value} does not fit in {width} bits")]
    OutOfRange { value: u64, width: u8 },
    #[error("width mismatch: {0} bits vs {1} bits")]
    WidthMismatch(u8, u8),
    #[error("interval bounds reversed: {lo} > {hi}")]
    Reversed { lo: u32, hi: u32 },
    #[error("prefix length {prefix_len} exceeds width {width}")]
    PrefixTooLong { prefix_len: u8, width: u8 },
    #[error("`{0}` has host bits set")]
    HostBits(String),
    #[error("cannot parse address `{0}`")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, WordsetError>;

/// Bit width of a word universe, 1..=32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Width(u8);

impl Width {
    pub const IPV4: Width = Width(32);

    pub fn new(bits: u8) -> Result<Self> {
        if (1..=32).contains(&bits) {
            Ok(Width(bits))
        } else {
            Err(WordsetError::InvalidWidth(bits))
        }
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    /// Largest representable value.
    pub fn max(self) -> u32 {
        if self.0 == 32 {
            u32::MAX
        } else {
            (1u32 << self.0) - 1
        }
    }

    /// Number of values in the universe.
    pub fn size(self) -> u64 {
        1u64 << self.0
    }

    fn check(self, value: u64) -> Result<u32> {
        if value <= self.max() as u64 {
            Ok(value as u32)
        } else {
            Err(WordsetError::OutOfRange {
                value,
                width: self.0,
            })
        }
    }
}

impl fmt::Display for Width {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A value together with the width it lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Word {
    value: u32,
    width: Width,
}

impl Word {
    pub fn new(value: u64, width: Width) -> Result<Self> {
        Ok(Word {
            value: width.check(value)?,
            width,
        })
    }

    pub fn value(self) -> u32 {
        self.value
    }

    pub fn width(self) -> Width {
        self.width
    }

    /// Parses a dotted quad (width 32 only) or a plain decimal integer.
    pub fn parse(s: &str, width: Width) -> Result<Self> {
        if s.contains('.') {
            if width != Width::IPV4 {
                return Err(WordsetError::Parse(s.to_string()));
            }
            let addr: Ipv4Addr = s.parse().map_err(|_| WordsetError::Parse(s.to_string()))?;
            return Ok(Word {
                value: u32::from(addr),
                width,
            });
        }
        let value: u64 = s.parse().map_err(|_| WordsetError::Parse(s.to_string()))?;
        Word::new(value, width)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_value(f, self.value, self.width)
    }
}

fn fmt_value(f: &mut fmt::Formatter<'_>, value: u32, width: Width) -> fmt::Result {
    if width == Width::IPV4 {
        write!(f, "{}", Ipv4Addr::from(value))
    } else {
        write!(f, "{value}")
    }
}

/// Inclusive interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interval {
    lo: u32,
    hi: u32,
}

impl Interval {
    pub fn new(lo: u32, hi: u32) -> Result<Self> {
        if lo > hi {
            return Err(WordsetError::Reversed { lo, hi });
        }
        Ok(Interval { lo, hi })
    }

    pub fn lo(self) -> u32 {
        self.lo
    }

    pub fn hi(self) -> u32 {
        self.hi
    }

    pub fn count(self) -> u64 {
        self.hi as u64 - self.lo as u64 + 1
    }
}

/// An address block `base/prefix_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cidr {
    base: u32,
    prefix_len: u8,
    width: Width,
}

impl Cidr {
    pub fn new(base: u32, prefix_len: u8, width: Width) -> Result<Self> {
        if prefix_len > width.bits() {
            return Err(WordsetError::PrefixTooLong {
                prefix_len,
                width: width.bits(),
            });
        }
        width.check(base as u64)?;
        let cidr = Cidr {
            base,
            prefix_len,
            width,
        };
        if base as u64 & (cidr.block_size() - 1) != 0 {
            return Err(WordsetError::HostBits(cidr.to_string()));
        }
        Ok(cidr)
    }

    /// Parses `addr/len` or a bare address (full-length prefix).
    pub fn parse(s: &str, width: Width) -> Result<Self> {
        let (addr, len) = match s.split_once('/') {
            Some((addr, len)) => {
                let len: u8 = len.parse().map_err(|_| WordsetError::Parse(s.to_string()))?;
                (addr, len)
            }
            None => (s, width.bits()),
        };
        let word = Word::parse(addr, width)?;
        Cidr::new(word.value, len, width)
    }

    pub fn base(self) -> u32 {
        self.base
    }

    pub fn prefix_len(self) -> u8 {
        self.prefix_len
    }

    pub fn width(self) -> Width {
        self.width
    }

    fn block_size(self) -> u64 {
        1u64 << (self.width.bits() - self.prefix_len)
    }

    pub fn last(self) -> u32 {
        (self.base as u64 + self.block_size() - 1) as u32
    }

    pub fn to_set(self) -> IntervalSet {
        IntervalSet::from_cidr(self)
    }
}

impl fmt::Display for Cidr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_value(f, self.base, self.width)?;
        write!(f, "/{}", self.prefix_len)
    }
}

/// Canonical set of words: sorted, pairwise disjoint, non-adjacent
/// intervals. Structural equality is set equality.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IntervalSet {
    width: Width,
    ivs: Vec<Interval>,
}

impl IntervalSet {
    pub fn empty(width: Width) -> Self {
        IntervalSet {
            width,
            ivs: Vec::new(),
        }
    }

    pub fn universe(width: Width) -> Self {
        IntervalSet {
            width,
            ivs: vec![Interval {
                lo: 0,
                hi: width.max(),
            }],
        }
    }

    pub fn from_cidr(cidr: Cidr) -> Self {
        IntervalSet {
            width: cidr.width,
            ivs: vec![Interval {
                lo: cidr.base,
                hi: cidr.last(),
            }],
        }
    }

    pub fn singleton(word: Word) -> Self {
        IntervalSet {
            width: word.width,
            ivs: vec![Interval {
                lo: word.value,
                hi: word.value,
            }],
        }
    }

    /// Builds a canonical set from arbitrary (possibly overlapping,
    /// unsorted) inclusive ranges.
    pub fn from_ranges<I>(width: Width, ranges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        let mut ivs = Vec::new();
        for (lo, hi) in ranges {
            width.check(hi as u64)?;
            ivs.push(Interval::new(lo, hi)?);
        }
        ivs.sort_unstable();
        let mut set = IntervalSet::empty(width);
        for iv in ivs {
            match set.ivs.last_mut() {
                Some(last) if iv.lo as u64 <= last.hi as u64 + 1 => {
                    last.hi = last.hi.max(iv.hi);
                }
                _ => set.ivs.push(iv),
            }
        }
        Ok(set)
    }

    pub fn width(&self) -> Width {
        self.width
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.ivs
    }

    pub fn is_empty(&self) -> bool {
        self.ivs.is_empty()
    }

    pub fn is_universe(&self) -> bool {
        self.ivs.len() == 1 && self.ivs[0].lo == 0 && self.ivs[0].hi == self.width.max()
    }

    /// Number of words in the set.
    pub fn count(&self) -> u64 {
        self.ivs.iter().map(|iv| iv.count()).sum()
    }

    pub fn contains(&self, value: u32) -> bool {
        let idx = self.ivs.partition_point(|iv| iv.hi < value);
        self.ivs.get(idx).is_some_and(|iv| iv.lo <= value)
    }

    pub fn member(&self, word: Word) -> Result<bool> {
        self.same_width_as(word.width)?;
        Ok(self.contains(word.value))
    }

    fn same_width_as(&self, width: Width) -> Result<()> {
        if self.width == width {
            Ok(())
        } else {
            Err(WordsetError::WidthMismatch(self.width.0, width.0))
        }
    }

    fn same_width(&self, other: &IntervalSet) -> Result<()> {
        self.same_width_as(other.width)
    }

    /// Adds `[lo, hi]`, merging with overlapping or adjacent neighbours.
    fn insert(&mut self, lo: u32, hi: u32) {
        let start = self.ivs.partition_point(|iv| (iv.hi as u64) + 1 < lo as u64);
        let end = self.ivs.partition_point(|iv| iv.lo as u64 <= hi as u64 + 1);
        if start == end {
            self.ivs.insert(start, Interval { lo, hi });
            return;
        }
        let merged = Interval {
            lo: lo.min(self.ivs[start].lo),
            hi: hi.max(self.ivs[end - 1].hi),
        };
        self.ivs.splice(start..end, std::iter::once(merged));
    }

    /// In-place union.
    pub fn union_with(&mut self, other: &IntervalSet) -> Result<()> {
        self.same_width(other)?;
        if other.ivs.len() > self.ivs.len() {
            let mut merged = other.clone();
            for iv in &self.ivs {
                merged.insert(iv.lo, iv.hi);
            }
            *self = merged;
        } else {
            for iv in &other.ivs {
                self.insert(iv.lo, iv.hi);
            }
        }
        Ok(())
    }

    pub fn union(&self, other: &IntervalSet) -> Result<IntervalSet> {
        let mut out = self.clone();
        out.union_with(other)?;
        Ok(out)
    }

    pub fn intersect(&self, other: &IntervalSet) -> Result<IntervalSet> {
        self.same_width(other)?;
        let (small, large) = if self.ivs.len() <= other.ivs.len() {
            (self, other)
        } else {
            (other, self)
        };
        let mut out = IntervalSet::empty(self.width);
        for iv in &small.ivs {
            let first = large.ivs.partition_point(|b| b.hi < iv.lo);
            for b in &large.ivs[first..] {
                if b.lo > iv.hi {
                    break;
                }
                // Pieces from disjoint non-adjacent inputs stay non-adjacent.
                out.ivs.push(Interval {
                    lo: iv.lo.max(b.lo),
                    hi: iv.hi.min(b.hi),
                });
            }
        }
        Ok(out)
    }

    pub fn difference(&self, other: &IntervalSet) -> Result<IntervalSet> {
        self.same_width(other)?;
        let mut out = IntervalSet::empty(self.width);
        for iv in &self.ivs {
            let mut cursor = iv.lo as u64;
            let first = other.ivs.partition_point(|b| b.hi < iv.lo);
            for b in &other.ivs[first..] {
                if b.lo > iv.hi {
                    break;
                }
                if (b.lo as u64) > cursor {
                    out.ivs.push(Interval {
                        lo: cursor as u32,
                        hi: b.lo - 1,
                    });
                }
                cursor = b.hi as u64 + 1;
            }
            if cursor <= iv.hi as u64 {
                out.ivs.push(Interval {
                    lo: cursor as u32,
                    hi: iv.hi,
                });
            }
        }
        Ok(out)
    }

    /// Complement relative to the width universe.
    pub fn complement(&self) -> IntervalSet {
        let mut out = IntervalSet::empty(self.width);
        let mut cursor = 0u64;
        for iv in &self.ivs {
            if (iv.lo as u64) > cursor {
                out.ivs.push(Interval {
                    lo: cursor as u32,
                    hi: iv.lo - 1,
                });
            }
            cursor = iv.hi as u64 + 1;
        }
        if cursor <= self.width.max() as u64 {
            out.ivs.push(Interval {
                lo: cursor as u32,
                hi: self.width.max(),
            });
        }
        out
    }

    pub fn is_subset(&self, other: &IntervalSet) -> Result<bool> {
        self.same_width(other)?;
        // A canonical interval fits inside the union only if it fits inside
        // a single interval of `other`.
        Ok(self.ivs.iter().all(|iv| {
            let idx = other.ivs.partition_point(|b| b.hi < iv.lo);
            other
                .ivs
                .get(idx)
                .is_some_and(|b| b.lo <= iv.lo && iv.hi <= b.hi)
        }))
    }

    /// Minimal sorted CIDR cover, by greedy largest-aligned-block
    /// decomposition of each interval.
    pub fn to_cidr_list(&self) -> Vec<Cidr> {
        let bits = self.width.bits();
        let mut out = Vec::new();
        for iv in &self.ivs {
            let mut start = iv.lo as u64;
            let end = iv.hi as u64;
            while start <= end {
                let align = if start == 0 {
                    bits as u32
                } else {
                    start.trailing_zeros().min(bits as u32)
                };
                let span = 64 - (end - start + 1).leading_zeros() - 1;
                let host_bits = align.min(span);
                out.push(Cidr {
                    base: start as u32,
                    prefix_len: bits - host_bits as u8,
                    width: self.width,
                });
                start += 1u64 << host_bits;
            }
        }
        out
    }
}

impl fmt::Display for IntervalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return write!(f, "{{}}");
        }
        for (i, c) in self.to_cidr_list().iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}
