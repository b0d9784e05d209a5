//! `CTXB` binary image format.
//!
//! All integers little-endian:
//!
//! ```text
//! magic "CTXB" | version u16 | section count u16
//! per section: name length u8 | name | vaddr u64 | flags u8 | length u32 | bytes
//! ```
//!
//! A `.meta` section (never mapped) carries four u64 fields: entry point,
//! second-task entry point (0 if none), non-transient stack size and
//! unprotected stack size.

use serde::{Deserialize, Serialize};

use crate::error::ImageError;
use crate::memory::PAGE_SIZE;

pub const MAGIC: &[u8; 4] = b"CTXB";
pub const VERSION: u16 = 1;

pub const FLAG_NT: u8 = 1 << 0;
pub const FLAG_EXEC: u8 = 1 << 1;
pub const FLAG_WRITE: u8 = 1 << 2;

pub const META: &str = ".meta";
pub const DEFAULT_STACK: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub vaddr: u64,
    pub flags: u8,
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn non_transient(&self) -> bool {
        self.flags & FLAG_NT != 0
    }

    pub fn exec(&self) -> bool {
        self.flags & FLAG_EXEC != 0
    }

    pub fn write(&self) -> bool {
        self.flags & FLAG_WRITE != 0
    }

    pub fn end(&self) -> u64 {
        self.vaddr + self.bytes.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub entry: u64,
    pub entry2: Option<u64>,
    pub stack_size: u64,
    pub ustack_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryImage {
    pub version: u16,
    pub sections: Vec<Section>,
}

impl BinaryImage {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sections that get mapped into the address space.
    pub fn loadable(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.name != META)
    }

    pub fn meta(&self) -> Result<Meta, ImageError> {
        let s = self
            .section(META)
            .ok_or_else(|| ImageError::Section(META.into(), "missing".into()))?;
        if s.bytes.len() != 32 {
            return Err(ImageError::Section(META.into(), "expected 32 bytes".into()));
        }
        let f = |i: usize| u64::from_le_bytes(s.bytes[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(Meta {
            entry: f(0),
            entry2: Some(f(1)).filter(|&e| e != 0),
            stack_size: f(2),
            ustack_size: f(3),
        })
    }

    pub fn meta_section(meta: &Meta) -> Section {
        let mut bytes = Vec::with_capacity(32);
        for v in [
            meta.entry,
            meta.entry2.unwrap_or(0),
            meta.stack_size,
            meta.ustack_size,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Section {
            name: META.into(),
            vaddr: 0,
            flags: 0,
            bytes,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.version != VERSION {
            return Err(ImageError::Version(self.version));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.sections {
            if !names.insert(s.name.as_str()) {
                return Err(ImageError::Section(s.name.clone(), "duplicate name".into()));
            }
            if s.vaddr % PAGE_SIZE != 0 {
                return Err(ImageError::Section(
                    s.name.clone(),
                    "vaddr not page-aligned".into(),
                ));
            }
            if s.name == ".secret" && !s.non_transient() {
                return Err(ImageError::Section(
                    s.name.clone(),
                    "must be non-transient".into(),
                ));
            }
            if s.vaddr
                .checked_add(s.bytes.len() as u64)
                .is_none_or(|e| e > 1 << 31)
            {
                return Err(ImageError::Section(
                    s.name.clone(),
                    "outside the address space".into(),
                ));
            }
        }
        self.meta()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        for s in &self.sections {
            out.push(s.name.len() as u8);
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&s.vaddr.to_le_bytes());
            out.push(s.flags);
            out.extend_from_slice(&(s.bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.bytes);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<BinaryImage, ImageError> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(ImageError::Version(version));
        }
        let count = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.take(1)?[0] as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| ImageError::Section("?".into(), "name is not UTF-8".into()))?;
            let vaddr = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let flags = r.take(1)?[0];
            let len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let bytes = r.take(len)?.to_vec();
            sections.push(Section {
                name,
                vaddr,
                flags,
                bytes,
            });
        }
        if r.pos != data.len() {
            return Err(ImageError::Section("?".into(), "trailing bytes".into()));
        }
        let img = BinaryImage { version, sections };
        img.validate()?;
        Ok(img)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or(ImageError::Truncated)?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> BinaryImage {
        let meta = Meta {
            entry: 0x40_0000,
            entry2: None,
            stack_size: DEFAULT_STACK,
            ustack_size: DEFAULT_STACK,
        };
        BinaryImage {
            version: VERSION,
            sections: vec![
                Section {
                    name: ".text".into(),
                    vaddr: 0x40_0000,
                    flags: FLAG_EXEC,
                    bytes: vec![1, 2, 3],
                },
                Section {
                    name: ".secret".into(),
                    vaddr: 0x200_0000,
                    flags: FLAG_NT | FLAG_WRITE,
                    bytes: vec![9; 16],
                },
                BinaryImage::meta_section(&meta),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let img = image();
        let bytes = img.to_bytes();
        assert_eq!(&bytes[..4], b"CTXB");
        assert_eq!(BinaryImage::from_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn rejects_malformed() {
        let bytes = image().to_bytes();
        assert_eq!(
            BinaryImage::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ImageError::Truncated)
        );
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(BinaryImage::from_bytes(&bad), Err(ImageError::BadMagic));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert_eq!(BinaryImage::from_bytes(&bad), Err(ImageError::Version(9)));
        let mut img = image();
        img.sections[1].flags = FLAG_WRITE;
        assert!(img.validate().is_err());
        let mut img = image();
        img.sections[0].vaddr += 1;
        assert!(img.validate().is_err());
    }
}
