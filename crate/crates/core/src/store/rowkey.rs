//! Salted, reversed row keys.
//!
//! `key(id) = hex2(id mod 256) + "#" + reverse(zero-pad-20(id))`. The salt
//! spreads sequential ids across 256 prefixes; reversing the digits keeps
//! the low-order (fast-changing) digits first inside a prefix.

use std::fmt;

use thiserror::Error;

pub const SALT_BUCKETS: u64 = 256;
pub const ID_DIGITS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RowKeyError {
    #[error("note id must be non-negative, got {0}")]
    Negative(i64),
    #[error("malformed row key {0:?}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey(String);

impl RowKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn prefix(&self) -> &str {
        &self.0[..2]
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn make_row_key(note_id: i64) -> Result<RowKey, RowKeyError> {
    if note_id < 0 {
        return Err(RowKeyError::Negative(note_id));
    }
    Ok(row_key_unsigned(note_id as u64))
}

pub(crate) fn row_key_unsigned(id: u64) -> RowKey {
    let digits: String = format!("{id:0width$}", width = ID_DIGITS).chars().rev().collect();
    RowKey(format!("{:02x}#{digits}", id % SALT_BUCKETS))
}

pub fn decode_row_key(key: &str) -> Result<u64, RowKeyError> {
    let malformed = || RowKeyError::Malformed(key.to_string());
    let (salt, digits) = key.split_once('#').ok_or_else(malformed)?;
    if salt.len() != 2 || digits.len() != ID_DIGITS || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed());
    }
    let salt = u64::from_str_radix(salt, 16).map_err(|_| malformed())?;
    let id: u64 = digits.chars().rev().collect::<String>().parse().map_err(|_| malformed())?;
    // only the canonical lowercase rendering is accepted
    if row_key_unsigned(id).as_str() != key || id % SALT_BUCKETS != salt {
        return Err(malformed());
    }
    Ok(id)
}
