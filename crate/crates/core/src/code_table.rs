//! The structured sparse ternary (N,K) code.
//!
//! A codeword is a length-`n` vector over {-1, 0, +1} with at most `k`
//! non-zero entries. Codewords are ordered lexicographically, left to right,
//! with digit order `0 < +1 < -1`. For (4,1) that gives
//!
//! ```text
//! 0: ( 0, 0, 0, 0)   3: ( 0, 0,+1, 0)   6: ( 0,-1, 0, 0)
//! 1: ( 0, 0, 0,+1)   4: ( 0, 0,-1, 0)   7: (+1, 0, 0, 0)
//! 2: ( 0, 0, 0,-1)   5: ( 0,+1, 0, 0)   8: (-1, 0, 0, 0)
//! ```
//!
//! Ranking and unranking are combinatorial ([`CodeRanker`]), so encoding a
//! weight matrix never needs the materialized [`CodeTable`]. The table is a
//! decode accelerator: each entry is stored with 2 bits per trit and its
//! non-zero (position, sign) pairs are pre-extracted for the kernels.

use std::fmt;

use crate::error::{Error, Result};

/// Largest supported sub-vector length.
pub const MAX_N: usize = 24;

/// Default cap on materialized table entries.
pub const DEFAULT_ENTRY_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeParams {
    n: u8,
    k: u8,
}

impl CodeParams {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams {
                n,
                k,
                reason: "n must be at least 1",
            });
        }
        if n > MAX_N {
            return Err(Error::InvalidParams {
                n,
                k,
                reason: "n must be at most 24",
            });
        }
        if k > n {
            return Err(Error::InvalidParams {
                n,
                k,
                reason: "k must not exceed n",
            });
        }
        Ok(Self {
            n: n as u8,
            k: k as u8,
        })
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn k(&self) -> usize {
        self.k as usize
    }
}

impl fmt::Display for CodeParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.n, self.k)
    }
}

/// The six codes evaluated in the reference experiments, largest table first.
pub fn reference_codes() -> [CodeParams; 6] {
    [(16, 4), (16, 3), (16, 2), (8, 2), (8, 1), (4, 1)].map(|(n, k)| CodeParams { n, k })
}

/// A ternary digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(i8)]
pub enum Trit {
    Zero = 0,
    Pos = 1,
    Neg = -1,
}

impl Trit {
    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            0 => Some(Trit::Zero),
            1 => Some(Trit::Pos),
            -1 => Some(Trit::Neg),
            _ => None,
        }
    }

    pub fn value(self) -> i8 {
        self as i8
    }

    /// 2-bit code; its numeric order is the canonical digit order.
    pub fn code(self) -> u8 {
        match self {
            Trit::Zero => 0,
            Trit::Pos => 1,
            Trit::Neg => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Trit::Zero),
            1 => Some(Trit::Pos),
            2 => Some(Trit::Neg),
            _ => None,
        }
    }

    pub fn is_zero(self) -> bool {
        self == Trit::Zero
    }
}

/// A length-n ternary vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TernarySubvector(Vec<Trit>);

impl TernarySubvector {
    pub fn new(trits: Vec<Trit>) -> Self {
        Self(trits)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![Trit::Zero; n])
    }

    /// Builds from integer values; `None` if any value is outside {-1, 0, 1}.
    pub fn from_values(values: &[i8]) -> Option<Self> {
        values
            .iter()
            .map(|&v| Trit::from_i8(v))
            .collect::<Option<Vec<_>>>()
            .map(Self)
    }

    pub fn trits(&self) -> &[Trit] {
        &self.0
    }

    pub fn values(&self) -> Vec<i8> {
        self.0.iter().map(|t| t.value()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.0.iter().filter(|t| !t.is_zero()).count()
    }

    /// Checks length and non-zero budget against `params`.
    pub fn validate(&self, params: CodeParams) -> Result<()> {
        if self.len() != params.n() {
            return Err(Error::LengthMismatch {
                expected: params.n(),
                got: self.len(),
            });
        }
        let nonzeros = self.nonzeros();
        if nonzeros > params.k() {
            return Err(Error::TooManyNonZeros { params, nonzeros });
        }
        Ok(())
    }

    /// 2 bits per trit, first trit in the most significant pair.
    pub fn pack(&self) -> u64 {
        self.0
            .iter()
            .fold(0u64, |acc, t| (acc << 2) | t.code() as u64)
    }

    pub fn unpack(packed: u64, n: usize) -> Self {
        let trits = (0..n)
            .map(|i| {
                let code = ((packed >> (2 * (n - 1 - i))) & 0b11) as u8;
                Trit::from_code(code).unwrap_or(Trit::Zero)
            })
            .collect();
        Self(trits)
    }
}

impl fmt::Display for TernarySubvector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match t {
                Trit::Zero => write!(f, "0")?,
                Trit::Pos => write!(f, "+1")?,
                Trit::Neg => write!(f, "-1")?,
            }
        }
        write!(f, ")")
    }
}

/// Rank of a codeword in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubvectorIndex(pub u64);

fn binomial(n: u64, r: u64) -> Option<u64> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u64 = 1;
    for i in 0..r {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = acc.checked_mul(n - i)? / (i + 1);
    }
    Some(acc)
}

fn count_checked(n: usize, k: usize) -> Option<u64> {
    let mut total: u64 = 0;
    for i in 0..=k.min(n) {
        let term = binomial(n as u64, i as u64)?.checked_mul(1u64.checked_shl(i as u32)?)?;
        total = total.checked_add(term)?;
    }
    Some(total)
}

/// Number of codewords, `T = sum_{i=0..=k} C(n,i) * 2^i`.
pub fn count_entries(params: CodeParams) -> Result<u64> {
    count_checked(params.n(), params.k()).ok_or(Error::CountOverflow {
        n: params.n(),
        k: params.k(),
    })
}

/// Index width in bits, `ceil(log2 T)`.
pub fn address_bits(params: CodeParams) -> Result<u32> {
    let t = count_entries(params)?;
    Ok(ceil_log2(t))
}

pub(crate) fn ceil_log2(t: u64) -> u32 {
    if t <= 1 {
        0
    } else {
        64 - (t - 1).leading_zeros()
    }
}

/// Table storage in bits, `2 * n * T`.
pub fn table_storage_bits(params: CodeParams) -> Result<u64> {
    let t = count_entries(params)?;
    t.checked_mul(2 * params.n() as u64)
        .ok_or(Error::CountOverflow {
            n: params.n(),
            k: params.k(),
        })
}

/// Decimal kilobytes (1 KB = 1000 bytes).
pub fn bits_to_kb(bits: u64) -> f64 {
    bits as f64 / 8.0 / 1000.0
}

/// Combinatorial ranking over the canonical order.
///
/// `suffix[m][r]` is the number of length-`m` tails with at most `r` non-zeros.
#[derive(Debug, Clone)]
pub struct CodeRanker {
    params: CodeParams,
    entries: u64,
    suffix: Vec<Vec<u64>>,
}

impl CodeRanker {
    pub fn new(params: CodeParams) -> Result<Self> {
        let entries = count_entries(params)?;
        let (n, k) = (params.n(), params.k());
        let mut suffix = vec![vec![0u64; k + 1]; n + 1];
        for (m, row) in suffix.iter_mut().enumerate() {
            for (r, slot) in row.iter_mut().enumerate() {
                // bounded by `entries`, which did not overflow
                *slot = count_checked(m, r).ok_or(Error::CountOverflow { n, k })?;
            }
        }
        Ok(Self {
            params,
            entries,
            suffix,
        })
    }

    pub fn params(&self) -> CodeParams {
        self.params
    }

    pub fn entry_count(&self) -> u64 {
        self.entries
    }

    pub fn rank(&self, v: &TernarySubvector) -> Result<SubvectorIndex> {
        v.validate(self.params)?;
        let n = self.params.n();
        let mut budget = self.params.k();
        let mut rank = 0u64;
        for (p, t) in v.trits().iter().enumerate() {
            let tail = n - p - 1;
            match t {
                Trit::Zero => {}
                Trit::Pos => {
                    rank += self.suffix[tail][budget];
                    budget -= 1;
                }
                Trit::Neg => {
                    rank += self.suffix[tail][budget] + self.suffix[tail][budget - 1];
                    budget -= 1;
                }
            }
        }
        Ok(SubvectorIndex(rank))
    }

    pub fn unrank(&self, index: SubvectorIndex) -> Result<TernarySubvector> {
        let mut rest = index.0;
        if rest >= self.entries {
            return Err(Error::IndexOutOfRange {
                index: rest,
                entries: self.entries,
            });
        }
        let n = self.params.n();
        let mut budget = self.params.k();
        let mut trits = Vec::with_capacity(n);
        for p in 0..n {
            let tail = n - p - 1;
            let zero_block = self.suffix[tail][budget];
            if rest < zero_block {
                trits.push(Trit::Zero);
                continue;
            }
            rest -= zero_block;
            let signed_block = self.suffix[tail][budget - 1];
            if rest < signed_block {
                trits.push(Trit::Pos);
            } else {
                rest -= signed_block;
                trits.push(Trit::Neg);
            }
            budget -= 1;
        }
        Ok(TernarySubvector(trits))
    }
}

/// Position and sign of one non-zero trit inside a codeword.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NonZero {
    pub position: u8,
    pub negative: bool,
}

/// The materialized code: every codeword in canonical order.
#[derive(Debug, Clone)]
pub struct CodeTable {
    ranker: CodeRanker,
    address_bits: u32,
    /// One entry per codeword, 2 bits per trit.
    packed: Vec<u64>,
    nz_offsets: Vec<u32>,
    nz: Vec<NonZero>,
}

impl CodeTable {
    pub fn build(params: CodeParams) -> Result<Self> {
        Self::build_with_cap(params, DEFAULT_ENTRY_CAP)
    }

    pub fn build_with_cap(params: CodeParams, cap: u64) -> Result<Self> {
        let ranker = CodeRanker::new(params)?;
        let entries = ranker.entry_count();
        if entries > cap {
            return Err(Error::TableCapExceeded {
                params,
                entries,
                cap,
            });
        }
        let mut packed = Vec::with_capacity(entries as usize);
        enumerate(params.n(), params.k(), 0, &mut packed);
        debug_assert_eq!(packed.len() as u64, entries);

        let n = params.n();
        let mut nz_offsets = Vec::with_capacity(packed.len() + 1);
        let mut nz = Vec::new();
        nz_offsets.push(0);
        for &code in &packed {
            for pos in 0..n {
                match (code >> (2 * (n - 1 - pos))) & 0b11 {
                    1 => nz.push(NonZero {
                        position: pos as u8,
                        negative: false,
                    }),
                    2 => nz.push(NonZero {
                        position: pos as u8,
                        negative: true,
                    }),
                    _ => {}
                }
            }
            nz_offsets.push(nz.len() as u32);
        }

        Ok(Self {
            address_bits: ceil_log2(entries),
            ranker,
            packed,
            nz_offsets,
            nz,
        })
    }

    pub fn params(&self) -> CodeParams {
        self.ranker.params
    }

    pub fn ranker(&self) -> &CodeRanker {
        &self.ranker
    }

    pub fn entry_count(&self) -> u64 {
        self.packed.len() as u64
    }

    pub fn address_bits(&self) -> u32 {
        self.address_bits
    }

    /// Storage of the packed table, `2 * n * T` bits.
    pub fn storage_bits(&self) -> u64 {
        2 * self.params().n() as u64 * self.entry_count()
    }

    pub fn packed_entries(&self) -> &[u64] {
        &self.packed
    }

    pub fn entries(&self) -> impl Iterator<Item = TernarySubvector> + '_ {
        let n = self.params().n();
        self.packed
            .iter()
            .map(move |&p| TernarySubvector::unpack(p, n))
    }

    pub fn encode(&self, v: &TernarySubvector) -> Result<SubvectorIndex> {
        self.ranker.rank(v)
    }

    pub fn decode(&self, index: SubvectorIndex) -> Result<TernarySubvector> {
        let packed = self.packed_entry(index)?;
        Ok(TernarySubvector::unpack(packed, self.params().n()))
    }

    pub fn packed_entry(&self, index: SubvectorIndex) -> Result<u64> {
        self.packed
            .get(index.0 as usize)
            .copied()
            .ok_or(Error::IndexOutOfRange {
                index: index.0,
                entries: self.entry_count(),
            })
    }

    /// Pre-extracted non-zeros of entry `index`. The caller guarantees range.
    #[inline]
    pub fn nonzeros(&self, index: usize) -> &[NonZero] {
        let lo = self.nz_offsets[index] as usize;
        let hi = self.nz_offsets[index + 1] as usize;
        &self.nz[lo..hi]
    }

    /// Writes entry `index` as integer values into `out` (length n).
    pub fn decode_into(&self, index: SubvectorIndex, out: &mut [i8]) -> Result<()> {
        if index.0 >= self.entry_count() {
            return Err(Error::IndexOutOfRange {
                index: index.0,
                entries: self.entry_count(),
            });
        }
        out.fill(0);
        for nz in self.nonzeros(index.0 as usize) {
            out[nz.position as usize] = if nz.negative { -1 } else { 1 };
        }
        Ok(())
    }
}

// Depth-first in canonical digit order, so output is already sorted.
fn enumerate(remaining: usize, budget: usize, prefix: u64, out: &mut Vec<u64>) {
    if remaining == 0 {
        out.push(prefix);
        return;
    }
    enumerate(remaining - 1, budget, prefix << 2, out);
    if budget > 0 {
        enumerate(remaining - 1, budget - 1, (prefix << 2) | 1, out);
        enumerate(remaining - 1, budget - 1, (prefix << 2) | 2, out);
    }
}

pub fn build_table(params: CodeParams) -> Result<CodeTable> {
    CodeTable::build(params)
}

pub fn encode_subvector(v: &TernarySubvector, table: &CodeTable) -> Result<SubvectorIndex> {
    table.encode(v)
}

pub fn decode_index(index: SubvectorIndex, table: &CodeTable) -> Result<TernarySubvector> {
    table.decode(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(n: usize, k: usize) -> CodeParams {
        CodeParams::new(n, k).unwrap()
    }

    fn sv(values: &[i8]) -> TernarySubvector {
        TernarySubvector::from_values(values).unwrap()
    }

    #[test]
    fn counts_match_known_values() {
        assert_eq!(count_entries(p(16, 4)).unwrap(), 34113);
        assert_eq!(count_entries(p(4, 1)).unwrap(), 9);
        assert_eq!(count_entries(p(8, 2)).unwrap(), 129);
        for n in 1..=MAX_N {
            assert_eq!(count_entries(p(n, 0)).unwrap(), 1);
        }
    }

    #[test]
    fn address_bits_and_storage() {
        assert_eq!(address_bits(p(16, 4)).unwrap(), 16);
        assert_eq!(address_bits(p(8, 1)).unwrap(), 5);
        assert_eq!(address_bits(p(7, 0)).unwrap(), 0);
        assert_eq!(address_bits(p(1, 1)).unwrap(), 2);

        assert_eq!(table_storage_bits(p(8, 1)).unwrap(), 272);
        assert_eq!(table_storage_bits(p(16, 4)).unwrap(), 1_091_616);
        assert_eq!(bits_to_kb(table_storage_bits(p(16, 4)).unwrap()), 136.452);
        assert_eq!(bits_to_kb(table_storage_bits(p(16, 2)).unwrap()), 2.052);
        assert_eq!(bits_to_kb(table_storage_bits(p(8, 1)).unwrap()), 0.034);
    }

    #[test]
    fn params_validation() {
        assert!(CodeParams::new(0, 0).is_err());
        assert!(CodeParams::new(25, 1).is_err());
        assert!(CodeParams::new(4, 5).is_err());
        assert!(CodeParams::new(24, 24).is_ok());
    }

    #[test]
    fn four_one_listing() {
        let table = build_table(p(4, 1)).unwrap();
        let got: Vec<Vec<i8>> = table.entries().map(|e| e.values()).collect();
        let want: Vec<Vec<i8>> = vec![
            vec![0, 0, 0, 0],
            vec![0, 0, 0, 1],
            vec![0, 0, 0, -1],
            vec![0, 0, 1, 0],
            vec![0, 0, -1, 0],
            vec![0, 1, 0, 0],
            vec![0, -1, 0, 0],
            vec![1, 0, 0, 0],
            vec![-1, 0, 0, 0],
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn small_tables() {
        let t = build_table(p(1, 1)).unwrap();
        let got: Vec<Vec<i8>> = t.entries().map(|e| e.values()).collect();
        assert_eq!(got, vec![vec![0], vec![1], vec![-1]]);

        let t = build_table(p(2, 2)).unwrap();
        assert_eq!(t.entry_count(), 9);
        assert_eq!(t.decode(SubvectorIndex(0)).unwrap().values(), vec![0, 0]);
        assert_eq!(t.decode(SubvectorIndex(8)).unwrap().values(), vec![-1, -1]);
    }

    #[test]
    fn encode_examples() {
        let t = build_table(p(4, 1)).unwrap();
        assert_eq!(t.encode(&sv(&[0, 0, -1, 0])).unwrap(), SubvectorIndex(4));
        assert_eq!(t.encode(&sv(&[-1, 0, 0, 0])).unwrap(), SubvectorIndex(8));
        assert_eq!(t.decode(SubvectorIndex(8)).unwrap(), sv(&[-1, 0, 0, 0]));
        for (n, k) in [(8, 2), (16, 4), (3, 0)] {
            let t = build_table(p(n, k)).unwrap();
            assert_eq!(
                t.encode(&TernarySubvector::zeros(n)).unwrap(),
                SubvectorIndex(0)
            );
        }
        assert_eq!(
            build_table(p(8, 2))
                .unwrap()
                .decode(SubvectorIndex(0))
                .unwrap(),
            TernarySubvector::zeros(8)
        );
    }

    #[test]
    fn encode_rejects_budget_violation() {
        let t = build_table(p(4, 1)).unwrap();
        let err = t.encode(&sv(&[1, 0, -1, 0])).unwrap_err();
        assert!(matches!(err, Error::TooManyNonZeros { nonzeros: 2, .. }));
        assert!(matches!(
            t.encode(&sv(&[1, 0])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn decode_rejects_out_of_range() {
        let t = build_table(p(4, 1)).unwrap();
        assert!(matches!(
            t.decode(SubvectorIndex(9)),
            Err(Error::IndexOutOfRange {
                index: 9,
                entries: 9
            })
        ));
        assert!(t.ranker().unrank(SubvectorIndex(9)).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let err = build_table(p(16, 16)).unwrap_err();
        match err {
            Error::TableCapExceeded { entries, cap, .. } => {
                assert_eq!(entries, 43_046_721);
                assert_eq!(cap, DEFAULT_ENTRY_CAP);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(CodeTable::build_with_cap(p(4, 1), 8).is_err());
        assert!(CodeTable::build_with_cap(p(4, 1), 9).is_ok());
    }

    #[test]
    fn table_is_strictly_increasing() {
        for params in reference_codes() {
            let t = build_table(params).unwrap();
            assert!(
                t.packed_entries().windows(2).all(|w| w[0] < w[1]),
                "{params}"
            );
            assert_eq!(t.storage_bits(), table_storage_bits(params).unwrap());
        }
    }

    #[test]
    fn nonzero_cache_matches_entries() {
        let t = build_table(p(8, 2)).unwrap();
        for (i, e) in t.entries().enumerate() {
            let nz = t.nonzeros(i);
            assert_eq!(nz.len(), e.nonzeros());
            for z in nz {
                let want = if z.negative { Trit::Neg } else { Trit::Pos };
                assert_eq!(e.trits()[z.position as usize], want);
            }
        }
    }

    #[test]
    fn display() {
        assert_eq!(p(16, 4).to_string(), "(16,4)");
        assert_eq!(sv(&[0, 1, -1]).to_string(), "(0,+1,-1)");
    }
}
