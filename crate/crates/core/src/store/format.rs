//! Fixed 32-byte little-endian file header shared by store and checkpoint
//! files.
//!
//! | offset | size | field        |
//! |--------|------|--------------|
//! | 0      | 4    | magic `DECS` |
//! | 4      | 4    | version (1)  |
//! | 8      | 8    | record count |
//! | 16     | 4    | key dim      |
//! | 20     | 4    | value rows   |
//! | 24     | 4    | value cols   |
//! | 28     | 1    | dtype (1 = f32 LE) |
//! | 29     | 3    | reserved, zero |

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DECS";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoreHeader {
    pub record_count: u64,
    pub key_dim: u32,
    pub value_rows: u32,
    pub value_cols: u32,
}

impl StoreHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..16].copy_from_slice(&self.record_count.to_le_bytes());
        b[16..20].copy_from_slice(&self.key_dim.to_le_bytes());
        b[20..24].copy_from_slice(&self.value_rows.to_le_bytes());
        b[24..28].copy_from_slice(&self.value_cols.to_le_bytes());
        b[28] = DTYPE_F32;
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_SIZE]) -> Result<Self> {
        if b[0..4] != MAGIC {
            return Err(Error::CorruptStore(format!("magic: expected DECS, found {:?}", &b[0..4])));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CorruptStore(format!("version: expected {VERSION}, found {version}")));
        }
        if b[28] != DTYPE_F32 {
            return Err(Error::CorruptStore(format!("dtype: expected {DTYPE_F32}, found {}", b[28])));
        }
        if b[29..32] != [0, 0, 0] {
            return Err(Error::CorruptStore("reserved: bytes must be zero".into()));
        }
        Ok(StoreHeader {
            record_count: u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")),
            key_dim: u32::from_le_bytes(b[16..20].try_into().expect("4 bytes")),
            value_rows: u32::from_le_bytes(b[20..24].try_into().expect("4 bytes")),
            value_cols: u32::from_le_bytes(b[24..28].try_into().expect("4 bytes")),
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut b = [0u8; HEADER_SIZE];
        r.read_exact(&mut b)
            .map_err(|_| Error::CorruptStore("header: file shorter than 32 bytes".into()))?;
        Self::from_bytes(&b)
    }

    /// Bytes per record in the key file.
    pub fn key_record_size(&self) -> u64 {
        self.key_dim as u64 * 4
    }

    /// Bytes per record in the value file: id (8) + content length (4) + payload.
    pub fn value_record_size(&self) -> u64 {
        12 + self.value_payload_size()
    }

    pub fn value_payload_size(&self) -> u64 {
        self.value_rows as u64 * self.value_cols as u64 * 4
    }
}
