use std::collections::HashMap;

const PAGE: u64 = 4096;

/// Page-backed DRAM bank. Untouched pages read as zero and cost nothing.
#[derive(Debug, Clone, Default)]
pub struct Mram {
    capacity: u64,
    pages: HashMap<u64, Box<[u8]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutOfBounds;

impl Mram {
    pub fn new(capacity: u64) -> Self {
        Mram { capacity, pages: HashMap::new() }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    fn check(&self, offset: u64, len: u64) -> Result<(), OutOfBounds> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(OutOfBounds),
        }
    }

    pub fn write(&mut self, offset: u64, bytes: &[u8]) -> Result<(), OutOfBounds> {
        self.check(offset, bytes.len() as u64)?;
        let mut done = 0usize;
        while done < bytes.len() {
            let at = offset + done as u64;
            let (page, within) = (at / PAGE, (at % PAGE) as usize);
            let n = (PAGE as usize - within).min(bytes.len() - done);
            let buf = self.pages.entry(page).or_insert_with(|| vec![0; PAGE as usize].into_boxed_slice());
            buf[within..within + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn read_into(&self, offset: u64, out: &mut [u8]) -> Result<(), OutOfBounds> {
        self.check(offset, out.len() as u64)?;
        let mut done = 0usize;
        while done < out.len() {
            let at = offset + done as u64;
            let (page, within) = (at / PAGE, (at % PAGE) as usize);
            let n = (PAGE as usize - within).min(out.len() - done);
            match self.pages.get(&page) {
                Some(buf) => out[done..done + n].copy_from_slice(&buf[within..within + n]),
                None => out[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>, OutOfBounds> {
        self.check(offset, len)?;
        let mut out = vec![0; len as usize];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    /// Bytes of host memory backing this bank.
    pub fn resident_bytes(&self) -> u64 {
        self.pages.len() as u64 * PAGE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_reads_and_writes() {
        let mut m = Mram::new(64 << 20);
        assert_eq!(m.read(1 << 20, 4).unwrap(), vec![0; 4]);
        m.write(PAGE - 3, &[1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(m.read(PAGE - 3, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(m.resident_bytes(), 2 * PAGE);
        assert_eq!(m.write((64 << 20) - 2, &[0; 3]), Err(OutOfBounds));
        assert_eq!(m.read(u64::MAX, 2), Err(OutOfBounds));
    }
}
