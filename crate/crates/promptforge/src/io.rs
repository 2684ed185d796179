//! Binary tensor records and a small stable hasher.
//!
//! A record is: name length (u32), name bytes, rank (u32), each dimension
//! (u64), then the values as little-endian f64.

use std::io::{self, Read, Write};

use crate::tensor::Tensor;

pub struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

pub fn write_tensor_record(out: &mut impl Write, name: &str, t: &Tensor) -> io::Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for d in t.shape() {
        out.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn read_tensor_record(r: &mut impl Read) -> io::Result<(String, Tensor)> {
    let n = read_u32(r)? as usize;
    if n > 4096 {
        return Err(invalid("tensor name too long"));
    }
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not utf-8"))?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(invalid("tensor rank too large"));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<io::Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    if count > 1 << 28 {
        return Err(invalid("tensor too large"));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(f64::from_bits(read_u64(r)?));
    }
    let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
    Ok((name, t))
}
