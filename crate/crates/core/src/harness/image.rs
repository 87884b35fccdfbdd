//! Enclave image file: code blob plus the memory and channel sizes the
//! enclave needs.
//!
//! ```text
//! off  size  field (little-endian)
//!   0     4  magic "BEIM"
//!   4     2  version (1)
//!   6     4  mem_size_pages
//!  10     4  channel_size_pages
//!  14     4  entry_cmd_table_len
//!  18     4  code_blob_len
//!  22     n  code_blob
//! ```

use std::path::Path;

use thiserror::Error;

use crate::hypervisor::ImageMeta;
use crate::machine::PAGE_SIZE;

pub const IMAGE_MAGIC: [u8; 4] = *b"BEIM";
pub const IMAGE_VERSION: u16 = 1;
pub const IMAGE_HEADER_LEN: usize = 22;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image shorter than its header")]
    Truncated,
    #[error("bad image magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u16),
    #[error("mem_size_pages and channel_size_pages must both be at least 1")]
    ZeroSize,
    #[error("file is {actual} bytes, header says {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("code blob of {code} bytes does not fit in {pages} memory pages")]
    CodeTooLarge { code: usize, pages: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnclaveImage {
    pub mem_size_pages: u32,
    pub channel_size_pages: u32,
    /// Number of commands in the TA's entry table.
    pub entry_cmd_table_len: u32,
    pub code: Vec<u8>,
}

impl EnclaveImage {
    pub fn new(mem_size_pages: u32, channel_size_pages: u32, entry_cmd_table_len: u32, code: Vec<u8>) -> Result<Self, ImageError> {
        let image = Self { mem_size_pages, channel_size_pages, entry_cmd_table_len, code };
        image.validate()?;
        Ok(image)
    }

    fn validate(&self) -> Result<(), ImageError> {
        if self.mem_size_pages == 0 || self.channel_size_pages == 0 {
            return Err(ImageError::ZeroSize);
        }
        if self.code.len() > self.mem_size_pages as usize * PAGE_SIZE {
            return Err(ImageError::CodeTooLarge { code: self.code.len(), pages: self.mem_size_pages });
        }
        Ok(())
    }

    pub fn meta(&self) -> ImageMeta {
        ImageMeta { mem_pages: self.mem_size_pages, channel_pages: self.channel_size_pages }
    }

    pub fn total_pages(&self) -> usize {
        self.meta().total_pages()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.code.len());
        out.extend_from_slice(&IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.mem_size_pages.to_le_bytes());
        out.extend_from_slice(&self.channel_size_pages.to_le_bytes());
        out.extend_from_slice(&self.entry_cmd_table_len.to_le_bytes());
        out.extend_from_slice(&(self.code.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.code);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ImageError> {
        if bytes.len() < IMAGE_HEADER_LEN {
            return Err(ImageError::Truncated);
        }
        if bytes[0..4] != IMAGE_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != IMAGE_VERSION {
            return Err(ImageError::BadVersion(version));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let code_len = word(18) as usize;
        let expected = IMAGE_HEADER_LEN + code_len;
        if bytes.len() != expected {
            return Err(ImageError::LengthMismatch { expected, actual: bytes.len() });
        }
        let image = Self {
            mem_size_pages: word(6),
            channel_size_pages: word(10),
            entry_cmd_table_len: word(14),
            code: bytes[IMAGE_HEADER_LEN..].to_vec(),
        };
        image.validate()?;
        Ok(image)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::parse(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}
