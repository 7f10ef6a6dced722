//! Binary dataset and latent files. All integers and reals are little
//! endian; latents are stored as `f32`.
//!
//! Noise-pair file:
//!
//! ```text
//! "EDNP" u16 version u64 count
//! u8 rank, u32 dims..          sample shape (z_T and z~_T)
//! u8 rank, u32 dims..          reference shape
//! u32 n, u8 gamma1 mode, f64 gamma1 front, f64 gamma1 back, f64 gamma2
//! count x { u64 seed, f32 z_T.., f32 z~_T.., f32 I.., u8 flags, [f64 s_rd], [f64 s_hq] }
//! ```
//!
//! `flags` bit 0 marks a stored `s_rd`, bit 1 a stored `s_hq`.

use std::io::{Read, Write};
use std::path::Path;

use crate::collector::NoisePair;
use crate::error::{Error, Result};
use crate::guidance::{CfgMode, CfgSchedule};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PAIR_MAGIC: &[u8; 4] = b"EDNP";
pub const PAIR_VERSION: u16 = 1;
pub const LATENT_MAGIC: &[u8; 4] = b"EDNL";
pub const LATENT_VERSION: u16 = 1;

const HAS_RD: u8 = 1;
const HAS_HQ: u8 = 2;

pub(crate) struct ByteWriter<W: Write> {
    inner: W,
}

impl<W: Write> ByteWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub(crate) fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub(crate) fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub(crate) fn f32_array<T: Scalar>(&mut self, data: &[T]) -> Result<()> {
        let mut buf = Vec::with_capacity(4 * data.len());
        for &x in data {
            buf.extend_from_slice(&x.as_f32().to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub(crate) fn shape(&mut self, shape: &[usize]) -> Result<()> {
        self.u8(u8::try_from(shape.len()).map_err(|_| Error::Format("rank exceeds 255".into()))?)?;
        for &d in shape {
            self.u32(u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?)?;
        }
        Ok(())
    }

    pub(crate) fn into_inner(self) -> W {
        self.inner
    }
}

pub(crate) struct ByteReader<R: Read> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(truncated)?;
        Ok(b)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f32_array<T: Scalar>(&mut self, len: usize) -> Result<Vec<T>> {
        let mut buf = vec![0u8; 4 * len];
        self.inner.read_exact(&mut buf).map_err(truncated)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    }

    pub(crate) fn tensor<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let data = self.f32_array(shape.iter().product())?;
        Tensor::new(shape.to_vec(), data)
    }

    pub(crate) fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after the last record".into())),
        }
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

/// Settings shared by every record of a noise-pair file.
#[derive(Clone, Debug, PartialEq)]
pub struct PairHeader {
    pub sample_shape: Vec<usize>,
    pub reference_shape: Vec<usize>,
    pub n: usize,
    pub gamma1: CfgSchedule,
    pub gamma2: f64,
}

impl PairHeader {
    pub fn of<T: Scalar>(pair: &NoisePair<T>) -> Self {
        Self {
            sample_shape: pair.z_t.shape().to_vec(),
            reference_shape: pair.reference.shape().to_vec(),
            n: pair.n,
            gamma1: pair.gamma1,
            gamma2: pair.gamma2,
        }
    }

    fn check<T: Scalar>(&self, pair: &NoisePair<T>) -> Result<()> {
        let same = pair.z_t.shape() == self.sample_shape.as_slice()
            && pair.z_tilde_t.shape() == self.sample_shape.as_slice()
            && pair.reference.shape() == self.reference_shape.as_slice()
            && pair.n == self.n
            && pair.gamma1 == self.gamma1
            && pair.gamma2 == self.gamma2;
        if same {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "record for seed {} does not match the file's shape or collection settings",
                pair.seed
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisePairFile<T: Scalar> {
    pub header: PairHeader,
    pub pairs: Vec<NoisePair<T>>,
}

impl<T: Scalar> NoisePairFile<T> {
    pub fn new(header: PairHeader, pairs: Vec<NoisePair<T>>) -> Result<Self> {
        for p in &pairs {
            header.check(p)?;
        }
        Ok(Self { header, pairs })
    }

    /// Builds the header from the first pair.
    pub fn from_pairs(pairs: Vec<NoisePair<T>>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Argument("cannot infer a file header from zero pairs".into()))?;
        Self::new(PairHeader::of(first), pairs)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<W> {
        let h = &self.header;
        let mut w = ByteWriter::new(w);
        w.bytes(PAIR_MAGIC)?;
        w.u16(PAIR_VERSION)?;
        w.u64(self.pairs.len() as u64)?;
        w.shape(&h.sample_shape)?;
        w.shape(&h.reference_shape)?;
        w.u32(u32::try_from(h.n).map_err(|_| Error::Format("n exceeds u32".into()))?)?;
        w.u8(match h.gamma1.mode {
            CfgMode::Constant => 0,
            CfgMode::Triangular => 1,
        })?;
        w.f64(h.gamma1.gamma_front)?;
        w.f64(h.gamma1.gamma_back)?;
        w.f64(h.gamma2)?;
        for p in &self.pairs {
            h.check(p)?;
            w.u64(p.seed)?;
            w.f32_array(p.z_t.data())?;
            w.f32_array(p.z_tilde_t.data())?;
            w.f32_array(p.reference.data())?;
            let flags = if p.s_rd.is_some() { HAS_RD } else { 0 } | if p.s_hq.is_some() { HAS_HQ } else { 0 };
            w.u8(flags)?;
            for s in [p.s_rd, p.s_hq].into_iter().flatten() {
                w.f64(s.as_f64())?;
            }
        }
        Ok(w.into_inner())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.write(Vec::new())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = ByteReader::new(r);
        r.magic(PAIR_MAGIC)?;
        let version = r.u16()?;
        if version != PAIR_VERSION {
            return Err(Error::Format(format!("unsupported noise-pair file version {version}")));
        }
        let count = r.u64()?;
        let sample_shape = r.shape()?;
        let reference_shape = r.shape()?;
        let n = r.u32()? as usize;
        let mode = match r.u8()? {
            0 => CfgMode::Constant,
            1 => CfgMode::Triangular,
            m => return Err(Error::Format(format!("unknown guidance mode {m}"))),
        };
        let gamma1 = CfgSchedule {
            mode,
            gamma_front: r.f64()?,
            gamma_back: r.f64()?,
        };
        let gamma2 = r.f64()?;
        let header = PairHeader {
            sample_shape,
            reference_shape,
            n,
            gamma1,
            gamma2,
        };
        let mut pairs = Vec::new();
        for _ in 0..count {
            let seed = r.u64()?;
            let z_t = r.tensor(&header.sample_shape)?;
            let z_tilde_t = r.tensor(&header.sample_shape)?;
            let reference = r.tensor(&header.reference_shape)?;
            let flags = r.u8()?;
            if flags & !(HAS_RD | HAS_HQ) != 0 {
                return Err(Error::Format(format!("unknown score flags {flags:#x} for seed {seed}")));
            }
            let s_rd = if flags & HAS_RD != 0 { Some(T::lit(r.f64()?)) } else { None };
            let s_hq = if flags & HAS_HQ != 0 { Some(T::lit(r.f64()?)) } else { None };
            pairs.push(NoisePair {
                z_t,
                z_tilde_t,
                reference,
                seed,
                n,
                gamma1,
                gamma2,
                s_rd,
                s_hq,
            });
        }
        r.expect_end()?;
        Ok(Self { header, pairs })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes generated latents as `"EDNL" u16 version u32 count` followed by
/// `u64 seed, u8 rank, u32 dims.., f32 data..` per entry.
pub fn write_latents<T: Scalar, W: Write>(w: W, latents: &[(u64, Tensor<T>)]) -> Result<W> {
    let mut w = ByteWriter::new(w);
    w.bytes(LATENT_MAGIC)?;
    w.u16(LATENT_VERSION)?;
    w.u32(u32::try_from(latents.len()).map_err(|_| Error::Format("too many latents".into()))?)?;
    for (seed, t) in latents {
        w.u64(*seed)?;
        w.shape(t.shape())?;
        w.f32_array(t.data())?;
    }
    Ok(w.into_inner())
}

pub fn read_latents<T: Scalar, R: Read>(r: R) -> Result<Vec<(u64, Tensor<T>)>> {
    let mut r = ByteReader::new(r);
    r.magic(LATENT_MAGIC)?;
    let version = r.u16()?;
    if version != LATENT_VERSION {
        return Err(Error::Format(format!("unsupported latent file version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let seed = r.u64()?;
        let shape = r.shape()?;
        out.push((seed, r.tensor(&shape)?));
    }
    r.expect_end()?;
    Ok(out)
}
