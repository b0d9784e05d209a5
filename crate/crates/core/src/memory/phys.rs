use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::pte::{PAGE_SHIFT, PAGE_SIZE};
use crate::error::SimError;

/// Sparse physical memory. Pages that were never written read as zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysMem {
    size: u64,
    pages: BTreeMap<u64, Vec<u8>>,
}

impl PhysMem {
    pub fn new(size: u64) -> PhysMem {
        PhysMem {
            size,
            pages: BTreeMap::new(),
        }
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn check_range(&self, paddr: u64, len: u64) -> Result<(), SimError> {
        match paddr.checked_add(len) {
            Some(end) if end <= self.size => Ok(()),
            _ => Err(SimError::PhysOutOfRange(paddr)),
        }
    }

    pub fn read_bytes(&self, paddr: u64, buf: &mut [u8]) -> Result<(), SimError> {
        self.check_range(paddr, buf.len() as u64)?;
        let mut done = 0;
        while done < buf.len() {
            let a = paddr + done as u64;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            match self.pages.get(&(a >> PAGE_SHIFT)) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn write_bytes(&mut self, paddr: u64, data: &[u8]) -> Result<(), SimError> {
        self.check_range(paddr, data.len() as u64)?;
        let mut done = 0;
        while done < data.len() {
            let a = paddr + done as u64;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let chunk = &data[done..done + n];
            let vpn = a >> PAGE_SHIFT;
            // zeros written to an untouched page change nothing
            if self.pages.contains_key(&vpn) || chunk.iter().any(|&b| b != 0) {
                let page = self
                    .pages
                    .entry(vpn)
                    .or_insert_with(|| vec![0; PAGE_SIZE as usize]);
                page[off..off + n].copy_from_slice(chunk);
            }
            done += n;
        }
        Ok(())
    }

    /// Little-endian read of `width` bytes.
    pub fn read(&self, paddr: u64, width: u64) -> Result<u64, SimError> {
        let mut buf = [0u8; 8];
        self.read_bytes(paddr, &mut buf[..width as usize])?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn write(&mut self, paddr: u64, width: u64, value: u64) -> Result<(), SimError> {
        self.write_bytes(paddr, &value.to_le_bytes()[..width as usize])
    }
}
