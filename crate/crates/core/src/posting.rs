//! Delta + LEB128 varint posting lists.

use crate::error::{Error, Result};

pub fn encode_varint(mut value: u64, out: &mut Vec<u8>) {
    while value >= 0x80 {
        out.push((value as u8 & 0x7F) | 0x80);
        value >>= 7;
    }
    out.push(value as u8);
}

/// Decodes one varint starting at `*pos`, advancing `*pos` past it.
pub fn decode_varint(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let mut value = 0u64;
    let mut shift = 0u32;
    loop {
        let byte = *bytes
            .get(*pos)
            .ok_or_else(|| Error::format("truncated varint"))?;
        *pos += 1;
        if shift == 63 && byte > 1 {
            return Err(Error::format("varint overflows u64"));
        }
        value |= u64::from(byte & 0x7F) << shift;
        if byte & 0x80 == 0 {
            return Ok(value);
        }
        shift += 7;
        if shift > 63 {
            return Err(Error::format("varint overflows u64"));
        }
    }
}

/// Strictly increasing token positions, stored as varint deltas. The first
/// delta is taken from zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PostingList {
    bytes: Vec<u8>,
    count: u64,
    last: Option<u64>,
}

impl PostingList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends `position`; returns the previous last position if `position`
    /// does not follow it.
    pub fn push(&mut self, position: u64) -> std::result::Result<(), u64> {
        let delta = match self.last {
            Some(last) if position <= last => return Err(last),
            Some(last) => position - last,
            None => position,
        };
        encode_varint(delta, &mut self.bytes);
        self.last = Some(position);
        self.count += 1;
        Ok(())
    }

    /// Rebuilds a list from its encoded payload, validating monotonicity.
    pub fn from_encoded(bytes: Vec<u8>) -> Result<Self> {
        let mut pos = 0;
        let mut count = 0u64;
        let mut last: Option<u64> = None;
        while pos < bytes.len() {
            let delta = decode_varint(&bytes, &mut pos)?;
            let next = match last {
                None => delta,
                Some(_) if delta == 0 => {
                    return Err(Error::format("posting list is not strictly increasing"))
                }
                Some(prev) => prev
                    .checked_add(delta)
                    .ok_or_else(|| Error::format("posting position overflows u64"))?,
            };
            last = Some(next);
            count += 1;
        }
        Ok(PostingList { bytes, count, last })
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn last(&self) -> Option<u64> {
        self.last
    }

    pub fn encoded(&self) -> &[u8] {
        &self.bytes
    }

    pub fn iter(&self) -> PostingIter<'_> {
        PostingIter {
            bytes: &self.bytes,
            pos: 0,
            current: 0,
        }
    }

    pub fn to_vec(&self) -> Vec<u64> {
        self.iter().collect()
    }
}

pub struct PostingIter<'a> {
    bytes: &'a [u8],
    pos: usize,
    current: u64,
}

impl Iterator for PostingIter<'_> {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        if self.pos >= self.bytes.len() {
            return None;
        }
        // Payloads are validated on construction.
        let delta = decode_varint(self.bytes, &mut self.pos).ok()?;
        self.current += delta;
        Some(self.current)
    }
}
