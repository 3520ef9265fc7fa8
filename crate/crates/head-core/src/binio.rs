//! Little-endian binary IO helpers shared by the model/feature/detector file
//! formats. Every multi-byte value in those formats is little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_magic<W: Write>(w: &mut W, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

/// Reads and checks an 8-byte magic; mismatch is a format error naming both
/// the expected and observed tags.
pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != magic {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&buf)
        )));
    }
    Ok(())
}

pub fn write_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut buf = [0u8; 1];
    r.read_exact(&mut buf)?;
    Ok(buf[0])
}

pub fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Reads a u32 and converts to usize, with a sanity cap so corrupt headers
/// fail cleanly instead of attempting enormous allocations.
pub fn read_len<R: Read>(r: &mut R, what: &str, cap: usize) -> Result<usize> {
    let v = read_u32(r)? as usize;
    if v > cap {
        return Err(Error::Format(format!(
            "{what} of {v} exceeds sanity cap {cap}"
        )));
    }
    Ok(v)
}

pub fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn write_f64_slice<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let mut out = Vec::with_capacity(n);
    for chunk in buf.chunks_exact(8) {
        out.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(out)
}

/// Errors if any bytes remain in the reader; round-trip formats are exact.
pub fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut buf = [0u8; 1];
    match r.read(&mut buf)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn scalar_round_trips() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"HEADTST1").unwrap();
        write_u8(&mut buf, 7).unwrap();
        write_u16(&mut buf, 65535).unwrap();
        write_u32(&mut buf, 123_456).unwrap();
        write_f64(&mut buf, -0.125).unwrap();
        write_f64_slice(&mut buf, &[1.0, f64::MIN_POSITIVE, -3.5e300]).unwrap();

        let mut r = Cursor::new(buf);
        expect_magic(&mut r, b"HEADTST1").unwrap();
        assert_eq!(read_u8(&mut r).unwrap(), 7);
        assert_eq!(read_u16(&mut r).unwrap(), 65535);
        assert_eq!(read_u32(&mut r).unwrap(), 123_456);
        assert_eq!(read_f64(&mut r).unwrap(), -0.125);
        assert_eq!(
            read_f64_vec(&mut r, 3).unwrap(),
            vec![1.0, f64::MIN_POSITIVE, -3.5e300]
        );
        expect_eof(&mut r).unwrap();
    }

    #[test]
    fn magic_mismatch_is_a_format_error() {
        let mut r = Cursor::new(b"WRONGMAG".to_vec());
        let err = expect_magic(&mut r, b"HEADTST1").unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn u32_is_little_endian_on_disk() {
        let mut buf = Vec::new();
        write_u32(&mut buf, 0x0102_0304).unwrap();
        assert_eq!(buf, vec![0x04, 0x03, 0x02, 0x01]);
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut r = Cursor::new(vec![0u8]);
        assert!(expect_eof(&mut r).is_err());
    }
}
