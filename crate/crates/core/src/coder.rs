//! Entropy-coder boundary and the exact reference coder.
//!
//! Coded symbols travel as flat arrays: `symbols: &[i32]` and per-symbol
//! `indexes: &[u32]` into a [`CdfTables`] blob. A fast native coder can plug
//! in behind [`EntropyCoder`]; when none is linked the codec falls back to
//! [`ReferenceCoder`], an arbitrary-precision arithmetic coder that is slow
//! but exact and doubles as the oracle for any native implementation.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use thiserror::Error;

/// Every table's cumulative frequencies end here.
pub const CDF_TOTAL: u32 = 1 << 16;
pub const CDF_PRECISION: u32 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoderError {
    #[error("table {0}: cumulative frequencies must start at 0, end at 65536 and increase strictly")]
    MalformedTable(usize),
    #[error("table index {index} out of range ({tables} tables)")]
    BadIndex { index: u32, tables: usize },
    #[error("symbol {symbol} outside table {table} support [{lo}, {hi}]")]
    SymbolOutOfRange { symbol: i32, table: u32, lo: i32, hi: i32 },
    #[error("{symbols} symbols but {indexes} table indexes")]
    LengthMismatch { symbols: usize, indexes: usize },
    #[error("payload does not decode under the given tables")]
    Corrupt,
    #[error("no native entropy coder is built into this binary")]
    NotBuilt,
}

impl CoderError {
    /// Status code used across the native boundary (`include/lmfc_coder.h`).
    pub fn code(&self) -> i32 {
        match self {
            CoderError::MalformedTable(_) => 1,
            CoderError::BadIndex { .. } => 2,
            CoderError::SymbolOutOfRange { .. } => 3,
            CoderError::LengthMismatch { .. } => 4,
            CoderError::Corrupt => 5,
            CoderError::NotBuilt => 6,
        }
    }
}

/// Concatenated integer CDFs. Table `t` covers symbols
/// `offsets[t] .. offsets[t] + lengths[t]`; its cumulative frequencies are
/// `cdf[starts[t] ..= starts[t] + lengths[t]]`, starting at 0 and ending at
/// [`CDF_TOTAL`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CdfTables {
    pub offsets: Vec<i32>,
    pub starts: Vec<u32>,
    pub lengths: Vec<u32>,
    pub cdf: Vec<u32>,
}

impl CdfTables {
    pub fn new() -> Self {
        CdfTables::default()
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Appends a table from per-symbol frequencies.
    pub fn push_frequencies(&mut self, offset: i32, freqs: &[u32]) {
        self.offsets.push(offset);
        self.starts.push(self.cdf.len() as u32);
        self.lengths.push(freqs.len() as u32);
        let mut acc = 0;
        self.cdf.push(0);
        for f in freqs {
            acc += f;
            self.cdf.push(acc);
        }
    }

    /// `(first symbol, cumulative frequencies)` of table `t`.
    pub fn table(&self, t: usize) -> (i32, &[u32]) {
        let s = self.starts[t] as usize;
        (self.offsets[t], &self.cdf[s..=s + self.lengths[t] as usize])
    }

    /// Support `[lo, hi]` of table `t`.
    pub fn support(&self, t: usize) -> (i32, i32) {
        (self.offsets[t], self.offsets[t] + self.lengths[t] as i32 - 1)
    }

    pub fn validate(&self) -> Result<(), CoderError> {
        if self.starts.len() != self.len() || self.lengths.len() != self.len() {
            return Err(CoderError::MalformedTable(0));
        }
        for t in 0..self.len() {
            let s = self.starts[t] as usize;
            let l = self.lengths[t] as usize;
            if l == 0 || s + l >= self.cdf.len() {
                return Err(CoderError::MalformedTable(t));
            }
            let cdf = &self.cdf[s..=s + l];
            if cdf[0] != 0 || cdf[l] != CDF_TOTAL || cdf.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CoderError::MalformedTable(t));
            }
        }
        Ok(())
    }

    /// `-log2 p` of `symbol` under table `t`.
    pub fn cost_bits(&self, t: usize, symbol: i32) -> f64 {
        let (offset, cdf) = self.table(t);
        let i = (symbol - offset) as usize;
        let f = cdf[i + 1] - cdf[i];
        CDF_PRECISION as f64 - (f as f64).log2()
    }

    /// Checkpoint serialization: table count u32, then per table offset
    /// i32, length u16, and the cumulative frequencies after the leading
    /// zero as u16. The terminal 65536 does not fit in 16 bits and is
    /// written as its low half, 0.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for t in 0..self.len() {
            let (offset, cdf) = self.table(t);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(self.lengths[t] as u16).to_le_bytes());
            for &c in &cdf[1..] {
                out.extend_from_slice(&((c & 0xffff) as u16).to_le_bytes());
            }
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes); returns the tables and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Option<(CdfTables, usize)> {
        let mut pos = 0;
        let mut take = |n: usize| -> Option<&[u8]> {
            let s = bytes.get(pos..pos + n)?;
            pos += n;
            Some(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().ok()?);
        let mut tables = CdfTables::new();
        for _ in 0..count {
            let offset = i32::from_le_bytes(take(4)?.try_into().ok()?);
            let len = u16::from_le_bytes(take(2)?.try_into().ok()?) as usize;
            let mut prev = 0u32;
            let mut freqs = Vec::with_capacity(len);
            for i in 0..len {
                let raw = u16::from_le_bytes(take(2)?.try_into().ok()?) as u32;
                let c = if i + 1 == len && raw == 0 { CDF_TOTAL } else { raw };
                freqs.push(c.checked_sub(prev)?);
                prev = c;
            }
            tables.push_frequencies(offset, &freqs);
        }
        tables.validate().ok()?;
        Some((tables, pos))
    }
}

/// Incremental decoder: the table for symbol `t` may depend on symbols
/// `< t`.
pub trait SymbolDecoder {
    fn next_symbol(&mut self, table: u32) -> Result<i32, CoderError>;
}

pub trait EntropyCoder {
    fn name(&self) -> &'static str;

    fn encode(&self, symbols: &[i32], indexes: &[u32], tables: &CdfTables) -> Result<Vec<u8>, CoderError>;

    fn stream_decoder<'a>(
        &self,
        bytes: &'a [u8],
        tables: &'a CdfTables,
    ) -> Result<Box<dyn SymbolDecoder + 'a>, CoderError>;

    fn decode(&self, bytes: &[u8], indexes: &[u32], tables: &CdfTables) -> Result<Vec<i32>, CoderError> {
        let mut dec = self.stream_decoder(bytes, tables)?;
        indexes.iter().map(|&t| dec.next_symbol(t)).collect()
    }
}

/// The native coder linked into this build, if any.
pub fn native_coder() -> Result<&'static dyn EntropyCoder, CoderError> {
    Err(CoderError::NotBuilt)
}

/// Native coder when available, reference coder otherwise.
pub fn default_coder() -> &'static dyn EntropyCoder {
    native_coder().unwrap_or(&ReferenceCoder)
}

/// Human-readable availability line for the native coder.
pub fn native_status() -> String {
    match native_coder() {
        Ok(c) => format!("native coder: {}", c.name()),
        Err(_) => "native coder not built; using the reference coder".to_string(),
    }
}

fn lookup(tables: &CdfTables, table: u32) -> Result<(i32, &[u32]), CoderError> {
    if table as usize >= tables.len() {
        return Err(CoderError::BadIndex {
            index: table,
            tables: tables.len(),
        });
    }
    Ok(tables.table(table as usize))
}

/// Exact arithmetic coder over big integers.
///
/// After `k` symbols the interval is `[L, L + W) / 2^(16k)`; a symbol with
/// cumulative `c` and frequency `f` maps it to `L·2^16 + c·W` and `f·W`.
/// The payload is the shortest binary fraction inside the final interval,
/// padded to whole bytes, so its length is within two bits plus byte
/// padding of `Σ -log2 p`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReferenceCoder;

impl EntropyCoder for ReferenceCoder {
    fn name(&self) -> &'static str {
        "reference"
    }

    fn encode(&self, symbols: &[i32], indexes: &[u32], tables: &CdfTables) -> Result<Vec<u8>, CoderError> {
        if symbols.len() != indexes.len() {
            return Err(CoderError::LengthMismatch {
                symbols: symbols.len(),
                indexes: indexes.len(),
            });
        }
        tables.validate()?;
        let mut low = BigUint::zero();
        let mut width = BigUint::one();
        for (&s, &t) in symbols.iter().zip(indexes) {
            let (offset, cdf) = lookup(tables, t)?;
            let i = s as i64 - offset as i64;
            if i < 0 || i >= (cdf.len() - 1) as i64 {
                return Err(CoderError::SymbolOutOfRange {
                    symbol: s,
                    table: t,
                    lo: offset,
                    hi: offset + cdf.len() as i32 - 2,
                });
            }
            let (c, f) = (cdf[i as usize], cdf[i as usize + 1] - cdf[i as usize]);
            low = (low << CDF_PRECISION) + &width * c;
            width *= f;
        }
        let denom_bits = CDF_PRECISION as u64 * symbols.len() as u64;
        let high = &low + &width;
        // V / 2^b lies in [low, high) / 2^denom_bits for V = ceil(low·2^b / 2^denom_bits).
        let fits = |b: u64| -> Option<BigUint> {
            let v = ceil_shift(&low, b, denom_bits);
            let lhs = if b >= denom_bits {
                v.clone()
            } else {
                &v << (denom_bits - b)
            };
            let rhs = if b >= denom_bits {
                &high << (b - denom_bits)
            } else {
                high.clone()
            };
            (lhs < rhs).then_some(v)
        };
        let (mut lo, mut hi) = (0u64, denom_bits + 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if fits(mid).is_some() {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let bits = lo;
        let v = fits(bits).expect("interval always holds a fraction with denom_bits + 1 bits");
        let nbytes = bits.div_ceil(8) as usize;
        let v = v << (nbytes as u64 * 8 - bits);
        let mut out = v.to_bytes_be();
        if v.is_zero() {
            out.clear();
        }
        let mut padded = vec![0u8; nbytes - out.len()];
        padded.extend_from_slice(&out);
        Ok(padded)
    }

    fn stream_decoder<'a>(
        &self,
        bytes: &'a [u8],
        tables: &'a CdfTables,
    ) -> Result<Box<dyn SymbolDecoder + 'a>, CoderError> {
        tables.validate()?;
        Ok(Box::new(ReferenceDecoder {
            tables,
            num: BigUint::from_bytes_be(bytes),
            den: BigUint::one() << (bytes.len() * 8),
        }))
    }
}

/// `ceil(x · 2^b / 2^d)`.
fn ceil_shift(x: &BigUint, b: u64, d: u64) -> BigUint {
    if b >= d {
        x << (b - d)
    } else {
        let shift = d - b;
        let q = x >> shift;
        if (&q << shift) == *x {
            q
        } else {
            q + 1u32
        }
    }
}

/// Tracks the position of the coded value inside the current interval as
/// the exact fraction `num / den` in `[0, 1)`.
struct ReferenceDecoder<'a> {
    tables: &'a CdfTables,
    num: BigUint,
    den: BigUint,
}

impl SymbolDecoder for ReferenceDecoder<'_> {
    fn next_symbol(&mut self, table: u32) -> Result<i32, CoderError> {
        let (offset, cdf) = lookup(self.tables, table)?;
        let scaled = &self.num << CDF_PRECISION;
        let target = (&scaled / &self.den).to_u32().ok_or(CoderError::Corrupt)?;
        if target >= CDF_TOTAL {
            return Err(CoderError::Corrupt);
        }
        let i = cdf.partition_point(|&c| c <= target) - 1;
        let (c, f) = (cdf[i], cdf[i + 1] - cdf[i]);
        self.num = scaled - &self.den * c;
        self.den *= f;
        Ok(offset + i as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: u32) -> CdfTables {
        let mut t = CdfTables::new();
        let mut f = vec![CDF_TOTAL / n; n as usize];
        f[0] += CDF_TOTAL - f.iter().sum::<u32>();
        t.push_frequencies(0, &f);
        t
    }

    fn random_tables(rng: &mut ChaCha8Rng, count: usize) -> CdfTables {
        let mut t = CdfTables::new();
        for _ in 0..count {
            let n = rng.gen_range(1..40usize);
            let mut w: Vec<u32> = (0..n).map(|_| rng.gen_range(1..1000)).collect();
            let total: u32 = w.iter().sum();
            let mut f: Vec<u32> = w.iter_mut().map(|v| 1 + *v * (CDF_TOTAL - n as u32) / total).collect();
            let s: u32 = f.iter().sum();
            f[0] += CDF_TOTAL - s;
            t.push_frequencies(rng.gen_range(-20..20), &f);
        }
        t
    }

    #[test]
    fn empty_stream() {
        let t = uniform(2);
        let bytes = ReferenceCoder.encode(&[], &[], &t).unwrap();
        assert!(bytes.len() <= 8);
        assert!(ReferenceCoder.decode(&bytes, &[], &t).unwrap().is_empty());
    }

    #[test]
    fn single_binary_symbol() {
        let t = uniform(2);
        for s in [0, 1] {
            let bytes = ReferenceCoder.encode(&[s], &[0], &t).unwrap();
            assert!(bytes.len() <= 9);
            assert_eq!(ReferenceCoder.decode(&bytes, &[0], &t).unwrap(), vec![s]);
        }
    }

    #[test]
    fn fair_bits_cost_one_bit_each() {
        let t = uniform(2);
        let symbols: Vec<i32> = (0..64).map(|i| (i * 7 % 3 == 0) as i32).collect();
        let bytes = ReferenceCoder.encode(&symbols, &vec![0; 64], &t).unwrap();
        assert!(bytes.len() <= 9, "{}", bytes.len());
        assert_eq!(ReferenceCoder.decode(&bytes, &vec![0; 64], &t).unwrap(), symbols);
    }

    #[test]
    fn random_round_trips_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let tables = random_tables(&mut rng, 5);
            let n = rng.gen_range(0..300);
            let indexes: Vec<u32> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            let symbols: Vec<i32> = indexes
                .iter()
                .map(|&t| {
                    let (lo, hi) = tables.support(t as usize);
                    rng.gen_range(lo..=hi)
                })
                .collect();
            let bytes = ReferenceCoder.encode(&symbols, &indexes, &tables).unwrap();
            assert_eq!(ReferenceCoder.decode(&bytes, &indexes, &tables).unwrap(), symbols);
            let ideal: f64 = symbols.iter().zip(&indexes).map(|(&s, &t)| tables.cost_bits(t as usize, s)).sum();
            assert!((bytes.len() * 8) as f64 <= ideal + 2.0 + 8.0, "{} vs {ideal}", bytes.len() * 8);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let t = uniform(4);
        assert!(matches!(
            ReferenceCoder.encode(&[4], &[0], &t),
            Err(CoderError::SymbolOutOfRange { .. })
        ));
        assert!(matches!(ReferenceCoder.encode(&[0], &[1], &t), Err(CoderError::BadIndex { .. })));
        assert!(matches!(ReferenceCoder.encode(&[0], &[], &t), Err(CoderError::LengthMismatch { .. })));
        let mut bad = t.clone();
        bad.cdf[2] = bad.cdf[1];
        assert_eq!(ReferenceCoder.encode(&[0], &[0], &bad), Err(CoderError::MalformedTable(0)));
    }

    #[test]
    fn serialization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tables(&mut rng, 7);
        let bytes = t.to_bytes();
        let (back, used) = CdfTables::from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn native_status_is_reported() {
        assert_eq!(native_coder().err(), Some(CoderError::NotBuilt));
        assert_eq!(default_coder().name(), "reference");
        assert!(native_status().contains("not built"));
    }
}
