//! The VEMB binary container.
//!
//! Matrix file (little-endian):
//!
//! ```text
//! 0   4  magic "VEMB" (56 45 4D 42)
//! 4   2  u16 version = 1
//! 6   2  u16 flags = 0
//! 8   1  u8 dtype (0 = f32, 1 = f64)
//! 9   1  u8 rank (1 or 2)
//! 10  4r u32 extents
//! ..     row-major payload
//! ..  4  u32 CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! Bundle file (flags = 1), used for head parameters:
//!
//! ```text
//! magic, version, u16 flags = 1
//! u32 header length, UTF-8 JSON header, u32 CRC-32 of the header bytes
//! u32 section count
//! per section: u16 name length, UTF-8 name, u8 dtype, u8 rank (1..=3),
//!              u32 extents, payload, u32 CRC-32 of the payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_shape, Real, Tensor};

pub const MAGIC: [u8; 4] = *b"VEMB";
pub const VERSION: u16 = 1;
pub const FLAG_BUNDLE: u16 = 1;

/// Element types that can be stored in a VEMB payload.
pub trait VembElement: Real {
    const DTYPE: u8;
    fn put(self, out: &mut Vec<u8>);
    fn get(bytes: &[u8]) -> Self;
}

impl VembElement for f32 {
    const DTYPE: u8 = 0;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl VembElement for f64 {
    const DTYPE: u8 = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A decoded tensor in whichever precision it was stored.
#[derive(Clone, Debug, PartialEq)]
pub enum VembTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl VembTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            Self::F32(t) => t,
            Self::F64(t) => t.cast(),
        }
    }

    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t,
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        if end > self.buf.len() {
            return Err(Error::TruncatedFile);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_preamble(r: &mut Reader<'_>) -> Result<u16> {
    let avail = r.buf.len().min(4);
    if r.buf[..avail] != MAGIC[..avail] {
        return Err(Error::BadMagic);
    }
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    r.u16()
}

fn put_tensor<R: VembElement>(out: &mut Vec<u8>, t: &Tensor<R>) {
    out.push(R::DTYPE);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    let start = out.len();
    for &v in t.data() {
        v.put(out);
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn decode_payload<R: VembElement>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<R>> {
    let data = payload.chunks_exact(R::BYTES).map(R::get).collect();
    Tensor::new(shape, data).map_err(|e| Error::Malformed(e.to_string()))
}

fn get_tensor(r: &mut Reader<'_>, max_rank: usize) -> Result<VembTensor> {
    let dtype = r.u8()?;
    let rank = r.u8()? as usize;
    let elem = match dtype {
        0 => 4,
        1 => 8,
        d => return Err(Error::Malformed(format!("unknown dtype {d}"))),
    };
    if rank == 0 || rank > max_rank {
        return Err(Error::Malformed(format!("rank {rank} not in 1..={max_rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
    let n = n.ok_or_else(|| Error::Malformed("extent overflow".into()))?;
    check_shape(&shape, n).map_err(|e| Error::Malformed(e.to_string()))?;
    let bytes = n.checked_mul(elem).ok_or_else(|| Error::Malformed("payload overflow".into()))?;
    let payload = r.take(bytes)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(match dtype {
        0 => VembTensor::F32(decode_payload(shape, payload)?),
        _ => VembTensor::F64(decode_payload(shape, payload)?),
    })
}

/// Serializes a rank-1 or rank-2 tensor as a VEMB matrix file.
pub fn encode<R: VembElement>(t: &Tensor<R>) -> Result<Vec<u8>> {
    if t.rank() > 2 {
        return Err(Error::ShapeMismatch(format!("VEMB matrix files hold rank 1 or 2, got {:?}", t.shape())));
    }
    let mut out = Vec::with_capacity(18 + t.len() * R::BYTES);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    put_tensor(&mut out, t);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<VembTensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let flags = read_preamble(&mut r)?;
    if flags != 0 {
        return Err(Error::Malformed(format!("expected a matrix file, flags = {flags:#06x}")));
    }
    let t = get_tensor(&mut r, 2)?;
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(t)
}

/// Writes via a temporary sibling file and a rename, so readers never see
/// a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::ConfigInvalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_embeddings<R: VembElement>(path: &Path, t: &Tensor<R>) -> Result<()> {
    write_atomic(path, &encode(t)?)
}

pub fn read_embeddings(path: &Path) -> Result<VembTensor> {
    decode(&fs::read(path)?)
}

/// A named-tensor bundle with a JSON header.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub header: serde_json::Value,
    pub sections: Vec<(String, VembTensor)>,
}

pub fn encode_bundle<R: VembElement>(
    header: &serde_json::Value,
    sections: &[(String, Tensor<R>)],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&FLAG_BUNDLE.to_le_bytes());
    let hdr = serde_json::to_vec(header)?;
    out.extend_from_slice(&(hdr.len() as u32).to_le_bytes());
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&crc32fast::hash(&hdr).to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, t) in sections {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::ConfigInvalid(format!("section name too long: {name}")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        put_tensor(&mut out, t);
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Bundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let flags = read_preamble(&mut r)?;
    if flags != FLAG_BUNDLE {
        return Err(Error::Malformed(format!("expected a bundle file, flags = {flags:#06x}")));
    }
    let hlen = r.u32()? as usize;
    let hdr = r.take(hlen)?;
    let stored = r.u32()?;
    let computed = crc32fast::hash(hdr);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let header: serde_json::Value = serde_json::from_slice(hdr)?;
    let count = r.u32()? as usize;
    let mut sections = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Malformed(e.to_string()))?
            .to_string();
        sections.push((name, get_tensor(&mut r, 3)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Bundle { header, sections })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Tensor<f32> {
        Tensor::matrix(3, 4, (0..12).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn layout_matches_the_documented_header() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], &[0x56, 0x45, 0x4D, 0x42]);
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 2);
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 18 + 12 * 4 + 4);
        let crc = crc32fast::hash(&bytes[18..18 + 48]);
        assert_eq!(&bytes[66..70], &crc.to_le_bytes());
    }

    #[test]
    fn crc_is_ieee() {
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = sample();
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), VembTensor::F32(t));
        let v = Tensor::vector(vec![1.0f64 / 3.0, -0.0, 5e-300]).unwrap();
        match decode(&encode(&v).unwrap()).unwrap() {
            VembTensor::F64(back) => {
                let a: Vec<u64> = v.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
            other => panic!("wrong dtype {other:?}"),
        }
    }

    #[test]
    fn corrupt_inputs() {
        let good = encode(&sample()).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::BadMagic)));
        assert!(matches!(decode(b"PK\x03\x04"), Err(Error::BadMagic)));

        let mut flipped = good.clone();
        flipped[30] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::ChecksumMismatch { .. })));

        for cut in [0, 2, 9, 17, 40, good.len() - 1] {
            assert!(matches!(decode(&good[..cut]), Err(Error::TruncatedFile)), "cut at {cut}");
        }

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(Error::UnsupportedVersion(2))));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(decode(&trailing), Err(Error::Malformed(_))));
    }

    #[test]
    fn bundle_round_trip_and_corruption() {
        let header = serde_json::json!({"kind": "lstm", "d_in": 4});
        let secs = vec![
            ("w".to_string(), Tensor::matrix(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![0.5f32]).unwrap()),
            ("cube".to_string(), Tensor::new(vec![1, 2, 1], vec![7.0f32, 8.0]).unwrap()),
        ];
        let bytes = encode_bundle(&header, &secs).unwrap();
        let b = decode_bundle(&bytes).unwrap();
        assert_eq!(b.header, header);
        assert_eq!(b.sections.len(), 3);
        assert_eq!(b.sections[2].1, VembTensor::F32(secs[2].1.clone()));
        // A bundle is not a matrix file and vice versa.
        assert!(matches!(decode(&bytes), Err(Error::Malformed(_))));
        assert!(decode_bundle(&encode(&sample()).unwrap()).is_err());
        let mut bad = bytes.clone();
        let last = bad.len() - 6;
        bad[last] ^= 1;
        assert!(matches!(decode_bundle(&bad), Err(Error::ChecksumMismatch { .. })));
    }

    proptest! {
        #[test]
        fn any_finite_matrix_round_trips(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64)) >> 11) as f64 * 1e-10 - 3.0)
                .collect();
            let t64 = Tensor::matrix(rows, cols, data).unwrap();
            let t32: Tensor<f32> = t64.cast();
            prop_assert_eq!(decode(&encode(&t64).unwrap()).unwrap(), VembTensor::F64(t64));
            prop_assert_eq!(decode(&encode(&t32).unwrap()).unwrap(), VembTensor::F32(t32));
        }
    }
}
