//! Small shared helpers: sign conventions, seed derivation, and the
//! little-endian read/write primitives used by the binary file formats.

use std::io::{self, Read, Write};

/// Sign with `sign0(0.0) == 0.0`.
///
/// `f64::signum` maps `+0.0` to `1.0`, which is the wrong convention here:
/// a zero gradient (or a zero patch entry) must contribute no perturbation.
#[inline]
pub(crate) fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a per-stage seed from one global seed, so stages (train, whitebox
/// harvest, attack) can be re-run independently with stable streams.
pub(crate) fn derive_seed(global: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in stage.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(global ^ h)
}

/// Binary parse failure: either a real I/O error or malformed content.
/// Truncation (unexpected EOF) is treated as malformed content, since a
/// cut-off file is a format defect, not an I/O fault.
#[derive(Debug)]
pub(crate) enum ParseError {
    Io(io::Error),
    Malformed(String),
}

impl From<io::Error> for ParseError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ParseError::Malformed("file is truncated".to_string())
        } else {
            ParseError::Io(e)
        }
    }
}

pub(crate) fn malformed(msg: impl Into<String>) -> ParseError {
    ParseError::Malformed(msg.into())
}

pub(crate) fn read_u32_le<R: Read>(r: &mut R) -> Result<u32, ParseError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8, ParseError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn read_f64_le<R: Read>(r: &mut R) -> Result<f64, ParseError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64_vec_le<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, ParseError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(read_f64_le(r)?);
    }
    Ok(out)
}

pub(crate) fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(), ParseError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(malformed(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&b),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Succeeds only if the reader is exactly at EOF.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<(), ParseError> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(malformed("trailing bytes after end of payload")),
    }
}

pub(crate) fn write_u32_le<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u8<W: Write>(w: &mut W, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}

pub(crate) fn write_f64_le<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}
