//! MSB-first bit packing of fixed-width indices.

use crate::code_table::SubvectorIndex;
use crate::error::{Error, Result};

/// A packed bit sequence. Bits past `bit_len` in the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitStream {
    pub fn from_parts(bytes: Vec<u8>, bit_len: u64) -> Result<Self> {
        let needed = bit_len.div_ceil(8);
        if (bytes.len() as u64) < needed {
            return Err(Error::ShortStream {
                needed: bit_len,
                available: bytes.len() as u64 * 8,
            });
        }
        if bytes.len() as u64 != needed {
            return Err(Error::Format(format!(
                "payload of {} bits must occupy {needed} bytes, found {}",
                bit_len,
                bytes.len()
            )));
        }
        Ok(Self { bytes, bit_len })
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bit_len(&self) -> u64 {
        self.bit_len
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Reads `width` bits starting at bit offset `pos`.
    #[inline]
    pub fn read(&self, pos: u64, width: u32) -> u64 {
        let mut value = 0u64;
        let mut pos = pos;
        let mut left = width;
        while left > 0 {
            let byte = self.bytes[(pos / 8) as usize];
            let used = (pos % 8) as u32;
            let avail = 8 - used;
            let take = avail.min(left);
            let shifted = (byte as u32) >> (avail - take);
            let chunk = shifted & ((1u32 << take) - 1);
            value = (value << take) | chunk as u64;
            pos += take as u64;
            left -= take;
        }
        value
    }

    /// Flips one bit; used to inject corruption in tests and `verify`.
    pub fn flip_bit(&mut self, pos: u64) {
        if pos < self.bit_len {
            self.bytes[(pos / 8) as usize] ^= 0x80 >> (pos % 8);
        }
    }
}

/// Appends values of a fixed width, MSB first.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bit_len: u64,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_bits(bits: u64) -> Self {
        Self {
            bytes: Vec::with_capacity(bits.div_ceil(8) as usize),
            bit_len: 0,
        }
    }

    /// `value` must fit in `width` bits; callers check.
    pub fn push(&mut self, value: u64, width: u32) {
        let mut left = width;
        while left > 0 {
            let used = (self.bit_len % 8) as u32;
            if used == 0 {
                self.bytes.push(0);
            }
            let free = 8 - used;
            let take = free.min(left);
            let chunk = ((value >> (left - take)) & ((1u64 << take) - 1)) as u8;
            let last = self.bytes.last_mut().expect("byte pushed above");
            *last |= chunk << (free - take);
            self.bit_len += take as u64;
            left -= take;
        }
    }

    pub fn finish(self) -> BitStream {
        BitStream {
            bytes: self.bytes,
            bit_len: self.bit_len,
        }
    }
}

fn check_width(bits: u32) -> Result<()> {
    if bits > 64 {
        return Err(Error::Format(format!("index width {bits} exceeds 64 bits")));
    }
    Ok(())
}

/// Packs indices MSB-first with no padding between them.
pub fn pack_indices(indices: &[SubvectorIndex], bits_per_index: u32) -> Result<BitStream> {
    check_width(bits_per_index)?;
    let mut writer = BitWriter::with_capacity_bits(indices.len() as u64 * bits_per_index as u64);
    for (position, idx) in indices.iter().enumerate() {
        if bits_per_index < 64 && idx.0 >> bits_per_index != 0 {
            return Err(Error::PackOverflow {
                position,
                value: idx.0,
                bits: bits_per_index,
            });
        }
        writer.push(idx.0, bits_per_index);
    }
    Ok(writer.finish())
}

pub fn unpack_indices(
    stream: &BitStream,
    bits_per_index: u32,
    count: usize,
) -> Result<Vec<SubvectorIndex>> {
    check_width(bits_per_index)?;
    let needed = count as u64 * bits_per_index as u64;
    let available = stream.bytes.len() as u64 * 8;
    if needed > available {
        return Err(Error::ShortStream { needed, available });
    }
    Ok((0..count as u64)
        .map(|i| SubvectorIndex(stream.read(i * bits_per_index as u64, bits_per_index)))
        .collect())
}
