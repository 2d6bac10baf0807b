//! Binary containers, little-endian throughout.
//!
//! Tensor container (`ARBT`):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `ARBT` |
//! | 2 | version (1) |
//! | 1 | dtype (0 = f32) |
//! | 1 | rank (2 or 3) |
//! | 8 × rank | dims |
//! | 4 × ∏dims | row-major payload |
//!
//! Quantized-layer container (`ARBQ`): a fixed header, a payload and the
//! CRC32 of the payload.
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `ARBQ` |
//! | 2 | version (1) |
//! | 1 | method tag (0 baseline, 1 arb, 2 arb-x, 3 arb-rc) |
//! | 1 | flags: bit 0 CGB, bit 1 second-order salient, bit 2 row means, bit 3 column scales |
//! | 8 × 4 | rows, cols, block size, salient column count |
//! | 8 × 4 | budget echo: plane, bitmap and scale bits, total bytes |
//! | 8 | payload length |
//! | payload | salient-column bitmap (1 row), group bitmap, plane 1, plane 2, block scales |
//! | 4 | CRC32 of the payload |
//!
//! Bit matrices are packed row by row, least-significant bit first, each
//! row padded to a whole byte with zero bits. Block scales are f32, per
//! block and per zone in layout order; each zone lists, per plane, the row
//! scales (`rows`) followed by the column scales (block width) when
//! present, then the row means (`rows`) when present.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::partition::{PartitionMaps, Zone};
use crate::pipeline::{BlockParams, Method, QuantizedLayer, ZoneParams};
use crate::tensor::{row_bytes, BitMask, Matrix, SignPlane};

pub const TENSOR_MAGIC: [u8; 4] = *b"ARBT";
pub const QUANT_MAGIC: [u8; 4] = *b"ARBQ";
pub const TENSOR_VERSION: u16 = 1;
pub const QUANT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

const FLAG_CGB: u8 = 1;
const FLAG_SECOND_ORDER: u8 = 2;
const FLAG_MEANS: u8 = 4;
const FLAG_COL_SCALES: u8 = 8;
const QUANT_HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 * 4 + 8 * 4 + 8;

/// Contents of a tensor container.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(Matrix),
    /// Rank-3 data as a sequence of row-major matrices.
    Batches(Vec<Matrix>),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).ok_or(Error::Truncated {
            needed: usize::MAX,
            available: self.bytes.len(),
        })?;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Malformed("dimension overflows usize".into()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let len = count.checked_mul(4).ok_or(Error::Malformed("array length overflow".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ── Tensor container ────────────────────────────────────────────────────────

fn tensor_header(dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * dims.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

fn put_matrix_f32(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Encodes a matrix; values are stored as f32.
pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = tensor_header(&[m.rows(), m.cols()]);
    put_matrix_f32(&mut out, m);
    out
}

/// Encodes equally shaped matrices as one rank-3 tensor.
pub fn encode_batches(batches: &[Matrix]) -> Result<Vec<u8>> {
    let (l, m) = batches.first().map_or((0, 0), Matrix::shape);
    if let Some(b) = batches.iter().find(|b| b.shape() != (l, m)) {
        return Err(Error::shape("encode_batches", format!("{l}x{m}"), format!("{:?}", b.shape())));
    }
    let mut out = tensor_header(&[batches.len(), l, m]);
    for b in batches {
        put_matrix_f32(&mut out, b);
    }
    Ok(out)
}

/// Header fields of a tensor container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u16,
    pub dtype: u8,
    pub dims: Vec<usize>,
}

fn decode_tensor_header(cur: &mut Cursor<'_>) -> Result<TensorHeader> {
    cur.magic(TENSOR_MAGIC)?;
    let version = cur.u16()?;
    if version != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = cur.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::UnknownDtype(dtype));
    }
    let rank = cur.u8()?;
    if !matches!(rank, 2 | 3) {
        return Err(Error::BadRank(rank));
    }
    let dims = (0..rank).map(|_| cur.usize()).collect::<Result<Vec<_>>>()?;
    Ok(TensorHeader { version, dtype, dims })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor::new(bytes);
    let header = decode_tensor_header(&mut cur)?;
    let count = header
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(Error::Malformed("tensor size overflow".into()))?;
    let values = cur.f32s(count)?;
    if cur.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", cur.remaining())));
    }
    let to_matrix = |rows: usize, cols: usize, vals: &[f32]| {
        Matrix::new(rows, cols, vals.iter().map(|&v| v as f64).collect())
    };
    match header.dims[..] {
        [r, c] => Ok(Tensor::Matrix(to_matrix(r, c, &values)?)),
        [b, l, m] => (0..b)
            .map(|i| to_matrix(l, m, &values[i * l * m..(i + 1) * l * m]))
            .collect::<Result<Vec<_>>>()
            .map(Tensor::Batches),
        _ => unreachable!("rank checked"),
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?)
}

/// Reads a rank-2 container.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    match read_tensor(path)? {
        Tensor::Matrix(m) => Ok(m),
        Tensor::Batches(_) => Err(Error::BadRank(3)),
    }
}

/// Reads activation batches; a rank-2 container is a single batch.
pub fn read_batches(path: &Path) -> Result<Vec<Matrix>> {
    match read_tensor(path)? {
        Tensor::Matrix(m) => Ok(vec![m]),
        Tensor::Batches(b) => Ok(b),
    }
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_file(path, &encode_matrix(m))
}

pub fn write_batches(path: &Path, batches: &[Matrix]) -> Result<()> {
    write_file(path, &encode_batches(batches)?)
}

// ── Quantized-layer container ───────────────────────────────────────────────

/// Header fields of a quantized-layer container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantHeader {
    pub version: u16,
    pub method: Method,
    pub cgb: bool,
    pub second_order: bool,
    pub has_means: bool,
    pub has_col_scales: bool,
    pub rows: usize,
    pub cols: usize,
    pub block_size: usize,
    pub salient: usize,
    pub plane_bits: u64,
    pub bitmap_bits: u64,
    pub scale_bits: u64,
    pub total_bytes: u64,
    pub payload_len: usize,
}

pub fn encode_quant(layer: &QuantizedLayer) -> Result<Vec<u8>> {
    layer.validate()?;
    let style_means = layer.method.style() == crate::partition::ScaleStyle::MeanScale;
    let mut payload = Vec::new();
    payload.extend_from_slice(layer.maps.salient_cols.as_bytes());
    payload.extend_from_slice(layer.maps.group.as_bytes());
    payload.extend_from_slice(layer.plane1.as_bytes());
    payload.extend_from_slice(layer.plane2.as_bytes());
    for block in &layer.blocks {
        for zone in &block.zones {
            for (p, alpha) in zone.alpha.iter().enumerate() {
                put_f32s(&mut payload, alpha);
                if let Some(ac) = zone.alpha_c.get(p) {
                    put_f32s(&mut payload, ac);
                }
            }
            if let Some(mu) = &zone.mu {
                put_f32s(&mut payload, mu);
            }
        }
    }
    let budget = layer.budget();
    let mut flags = 0u8;
    if layer.cgb {
        flags |= FLAG_CGB;
    }
    if layer.salient_order == 2 {
        flags |= FLAG_SECOND_ORDER;
    }
    flags |= if style_means { FLAG_MEANS } else { FLAG_COL_SCALES };
    let mut out = Vec::with_capacity(QUANT_HEADER_LEN + payload.len() + 4);
    out.extend_from_slice(&QUANT_MAGIC);
    out.extend_from_slice(&QUANT_VERSION.to_le_bytes());
    out.push(layer.method.tag());
    out.push(flags);
    for v in [layer.rows, layer.cols, layer.block_size, layer.salient_count()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in [budget.plane_bits, budget.bitmap_bits, budget.scale_bits, budget.total_bytes] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn decode_quant_header(cur: &mut Cursor<'_>) -> Result<QuantHeader> {
    cur.magic(QUANT_MAGIC)?;
    let version = cur.u16()?;
    if version != QUANT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag = cur.u8()?;
    let method = Method::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown method tag {tag}")))?;
    let flags = cur.u8()?;
    if flags & !(FLAG_CGB | FLAG_SECOND_ORDER | FLAG_MEANS | FLAG_COL_SCALES) != 0 {
        return Err(Error::Malformed(format!("unknown flag bits {flags:#04x}")));
    }
    Ok(QuantHeader {
        version,
        method,
        cgb: flags & FLAG_CGB != 0,
        second_order: flags & FLAG_SECOND_ORDER != 0,
        has_means: flags & FLAG_MEANS != 0,
        has_col_scales: flags & FLAG_COL_SCALES != 0,
        rows: cur.usize()?,
        cols: cur.usize()?,
        block_size: cur.usize()?,
        salient: cur.usize()?,
        plane_bits: cur.u64()?,
        bitmap_bits: cur.u64()?,
        scale_bits: cur.u64()?,
        total_bytes: cur.u64()?,
        payload_len: cur.usize()?,
    })
}

pub fn decode_quant(bytes: &[u8]) -> Result<QuantizedLayer> {
    let mut cur = Cursor::new(bytes);
    let h = decode_quant_header(&mut cur)?;
    let payload = cur.take(h.payload_len)?;
    let stored = cur.u32()?;
    if cur.remaining() != 0 {
        return Err(Error::Malformed(format!("{} trailing bytes", cur.remaining())));
    }
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let style_means = h.method.style() == crate::partition::ScaleStyle::MeanScale;
    if h.has_means != style_means || h.has_col_scales == style_means {
        return Err(Error::Malformed("scale layout flags disagree with method".into()));
    }
    let (n, m) = (h.rows, h.cols);
    if n == 0 || m == 0 || h.block_size == 0 || h.block_size > m || h.salient > m {
        return Err(Error::Malformed("bad shape fields".into()));
    }
    let mut p = Cursor::new(payload);
    let stride = row_bytes(m);
    let salient_cols = BitMask::from_bytes(1, m, p.take(stride)?.to_vec())?;
    let group = BitMask::from_bytes(n, m, p.take(n * stride)?.to_vec())?;
    let plane1 = SignPlane::from_bytes(n, m, p.take(n * stride)?.to_vec())?;
    let s2 = if h.second_order { h.salient } else { 0 };
    let plane2 = SignPlane::from_bytes(n, s2, p.take(n * row_bytes(s2))?.to_vec())?;
    if salient_cols.count() != h.salient {
        return Err(Error::Malformed("salient count disagrees with bitmap".into()));
    }
    let layout = Zone::layout(h.cgb);
    let k = h.block_size;
    let mut blocks = Vec::with_capacity(m.div_ceil(k));
    for b in 0..m.div_ceil(k) {
        let width = k.min(m - b * k);
        let mut zones = Vec::with_capacity(layout.len());
        for &zone in layout {
            let planes = if zone.is_salient() && h.second_order { 2 } else { 1 };
            let mut alpha = Vec::with_capacity(planes);
            let mut alpha_c = Vec::new();
            for _ in 0..planes {
                alpha.push(p.f32s(n)?);
                if h.has_col_scales {
                    alpha_c.push(p.f32s(width)?);
                }
            }
            let mu = if h.has_means { Some(p.f32s(n)?) } else { None };
            zones.push(ZoneParams { alpha, alpha_c, mu });
        }
        blocks.push(BlockParams { zones });
    }
    if p.remaining() != 0 {
        return Err(Error::Malformed(format!("{} unread payload bytes", p.remaining())));
    }
    let layer = QuantizedLayer {
        method: h.method,
        rows: n,
        cols: m,
        block_size: k,
        salient_order: if h.second_order { 2 } else { 1 },
        cgb: h.cgb,
        maps: PartitionMaps::new(salient_cols, group)?,
        plane1,
        plane2,
        blocks,
    };
    layer.validate()?;
    let budget = layer.budget();
    if (budget.plane_bits, budget.bitmap_bits, budget.scale_bits, budget.total_bytes)
        != (h.plane_bits, h.bitmap_bits, h.scale_bits, h.total_bytes)
    {
        return Err(Error::Malformed("budget echo disagrees with contents".into()));
    }
    Ok(layer)
}

pub fn write_quant(path: &Path, layer: &QuantizedLayer) -> Result<()> {
    write_file(path, &encode_quant(layer)?)
}

pub fn read_quant(path: &Path) -> Result<QuantizedLayer> {
    decode_quant(&read_file(path)?)
}

/// Header of either container kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContainerHeader {
    Tensor(TensorHeader),
    Quant(QuantHeader),
}

/// Parses only the header, dispatching on the magic.
pub fn read_header(bytes: &[u8]) -> Result<ContainerHeader> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = Cursor::new(bytes).take(4)?.try_into().expect("4 bytes");
    match magic {
        TENSOR_MAGIC => Ok(ContainerHeader::Tensor(decode_tensor_header(&mut cur)?)),
        QUANT_MAGIC => Ok(ContainerHeader::Quant(decode_quant_header(&mut cur)?)),
        found => Err(Error::BadMagic {
            expected: TENSOR_MAGIC,
            found,
        }),
    }
}

/// Human-readable header summary.
pub fn describe_header(header: &ContainerHeader) -> String {
    match header {
        ContainerHeader::Tensor(t) => {
            let dims: Vec<String> = t.dims.iter().map(usize::to_string).collect();
            format!(
                "magic: ARBT\nversion: {}\ndtype: f32 (tag {})\nrank: {}\ndims: {}\n",
                t.version,
                t.dtype,
                t.dims.len(),
                dims.join("x")
            )
        }
        ContainerHeader::Quant(q) => format!(
            "magic: ARBQ\nversion: {}\nmethod: {}\ncgb: {}\nsalient order: {}\nshape: {}x{}\nblock size: {}\n\
             salient columns: {}\nplane bits: {}\nbitmap bits: {}\nscale bits: {}\ntotal bytes: {}\npayload bytes: {}\n",
            q.version,
            q.method,
            q.cgb,
            if q.second_order { 2 } else { 1 },
            q.rows,
            q.cols,
            q.block_size,
            q.salient,
            q.plane_bits,
            q.bitmap_bits,
            q.scale_bits,
            q.total_bytes,
            q.payload_len
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_file() -> Vec<u8> {
        let mut b = b"ARBT".to_vec();
        b.extend_from_slice(&[1, 0, 0, 2]);
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn hand_assembled_identity() {
        assert_eq!(decode_tensor(&identity_file()).unwrap(), Tensor::Matrix(Matrix::identity(2)));
        assert_eq!(encode_matrix(&Matrix::identity(2)), identity_file());
        let text = describe_header(&read_header(&identity_file()).unwrap());
        assert!(text.contains("ARBT") && text.contains("dims: 2x2") && text.contains("f32"));
    }

    #[test]
    fn tensor_errors_are_distinct() {
        let good = identity_file();
        assert!(matches!(decode_tensor(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[6] = 7;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnknownDtype(7))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedVersion(2))));
        let mut bad = good.clone();
        bad[7] = 1;
        assert!(matches!(decode_tensor(&bad), Err(Error::BadRank(1))));
        let mut long = good;
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn batches_roundtrip() {
        let batches: Vec<Matrix> = (0..3)
            .map(|b| Matrix::from_fn(2, 5, |r, c| (b * 10 + r * 5 + c) as f64 * 0.25))
            .collect();
        let bytes = encode_batches(&batches).unwrap();
        assert_eq!(decode_tensor(&bytes).unwrap(), Tensor::Batches(batches));
    }
}
