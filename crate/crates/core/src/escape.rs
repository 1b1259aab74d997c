//! Escape coding for symbols outside a table's regular range.
//!
//! Every model table ends in an escape bin. A symbol outside the regular
//! range `[lo, hi]` is coded as the escape bin followed by its distance from
//! the range, written in 4-bit groups through a uniform 16-symbol table
//! appended to the blob: first the group count (as a run of 15s plus a
//! remainder), then the groups, least significant first. The distance maps
//! below-range symbols to odd values and above-range ones to even values.

use crate::coder::{CdfTables, CoderError, SymbolDecoder, CDF_TOTAL};

const GROUP_BITS: u32 = 4;
const GROUP_MAX: u64 = (1 << GROUP_BITS) - 1;

/// Regular (non-escape) range of table `t`.
pub fn regular_range(tables: &CdfTables, t: usize) -> (i32, i32) {
    let (lo, last) = tables.support(t);
    (lo, last - 1)
}

/// `tables` plus the uniform group table at index `tables.len()`.
pub fn with_group_table(tables: &CdfTables) -> CdfTables {
    let mut out = tables.clone();
    out.push_frequencies(0, &[CDF_TOTAL >> GROUP_BITS; 1 << GROUP_BITS]);
    out
}

fn distance(s: i64, lo: i64, hi: i64) -> u64 {
    if s < lo {
        (2 * (lo - s) - 1) as u64
    } else {
        (2 * (s - hi - 1)) as u64
    }
}

fn undistance(d: u64, lo: i64, hi: i64) -> i64 {
    if d % 2 == 1 {
        lo - (d as i64 + 1) / 2
    } else {
        hi + 1 + d as i64 / 2
    }
}

/// Appends the coder symbols for `s` under table `t`. `group` is the index
/// of the group table in the blob passed to the coder.
pub fn push_symbol(symbols: &mut Vec<i32>, indexes: &mut Vec<u32>, tables: &CdfTables, t: u32, s: i32, group: u32) {
    let (lo, hi) = regular_range(tables, t as usize);
    if (lo..=hi).contains(&s) {
        symbols.push(s);
        indexes.push(t);
        return;
    }
    symbols.push(hi + 1);
    indexes.push(t);
    let d = distance(s as i64, lo as i64, hi as i64);
    let mut groups = 0;
    while groups < 64 / GROUP_BITS && d >> (groups * GROUP_BITS) != 0 {
        groups += 1;
    }
    let mut count = groups as u64;
    while count >= GROUP_MAX {
        symbols.push(GROUP_MAX as i32);
        indexes.push(group);
        count -= GROUP_MAX;
    }
    symbols.push(count as i32);
    indexes.push(group);
    for g in 0..groups {
        symbols.push(((d >> (g * GROUP_BITS)) & GROUP_MAX) as i32);
        indexes.push(group);
    }
}

/// Coder input for a list of model symbols, to be coded against
/// [`with_group_table`]`(tables)`.
pub fn expand(symbols: &[i32], indexes: &[u32], tables: &CdfTables) -> (Vec<i32>, Vec<u32>) {
    let group = tables.len() as u32;
    let (mut s_out, mut i_out) = (Vec::with_capacity(symbols.len()), Vec::with_capacity(symbols.len()));
    for (&s, &t) in symbols.iter().zip(indexes) {
        push_symbol(&mut s_out, &mut i_out, tables, t, s, group);
    }
    (s_out, i_out)
}

/// Reads one model symbol of table `t` from a decoder over
/// [`with_group_table`]`(tables)`.
pub fn read_symbol(dec: &mut dyn SymbolDecoder, tables: &CdfTables, t: u32) -> Result<i32, CoderError> {
    if t as usize >= tables.len() {
        return Err(CoderError::BadIndex {
            index: t,
            tables: tables.len(),
        });
    }
    let (lo, hi) = regular_range(tables, t as usize);
    let s = dec.next_symbol(t)?;
    if s <= hi {
        return Ok(s);
    }
    let group = tables.len() as u32;
    let mut groups = 0u64;
    loop {
        let g = dec.next_symbol(group)? as u64;
        groups += g;
        if g < GROUP_MAX {
            break;
        }
        if groups > 64 / GROUP_BITS as u64 {
            return Err(CoderError::Corrupt);
        }
    }
    if groups > 64 / GROUP_BITS as u64 {
        return Err(CoderError::Corrupt);
    }
    let mut d = 0u64;
    for g in 0..groups {
        d |= (dec.next_symbol(group)? as u64) << (g as u32 * GROUP_BITS);
    }
    let s = undistance(d, lo as i64, hi as i64);
    i32::try_from(s).map_err(|_| CoderError::Corrupt)
}
