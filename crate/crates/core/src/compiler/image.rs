//! Simulated memory image: the operand segments an instruction stream reads.

use std::fmt;
use std::io::{self, Read, Write};

use thiserror::Error;

/// Every segment starts on a line boundary.
pub const SEGMENT_ALIGN: u32 = 64;

pub const IMAGE_MAGIC: [u8; 4] = *b"NCIM";
pub const IMAGE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentRole {
    AData,
    ARowIds,
    BColInd,
    BData,
    Counters,
}

impl SegmentRole {
    pub const ALL: [SegmentRole; 5] = [
        SegmentRole::AData,
        SegmentRole::ARowIds,
        SegmentRole::BColInd,
        SegmentRole::BData,
        SegmentRole::Counters,
    ];

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentRole::AData => "A_DATA",
            SegmentRole::ARowIds => "A_ROW_IDS",
            SegmentRole::BColInd => "B_COL_IND",
            SegmentRole::BData => "B_DATA",
            SegmentRole::Counters => "COUNTERS",
        }
    }
}

impl fmt::Display for SegmentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("memory image exceeds the 32-bit address space ({0} bytes)")]
    Overflow(u64),
    #[error("access of {len} bytes at 0x{addr:08x} falls outside every segment")]
    OutOfBounds { addr: u32, len: u32 },
    #[error("segments overlap or are out of order at {0}")]
    Overlap(SegmentRole),
    #[error("bad image file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for ImageError {
    fn from(e: io::Error) -> Self {
        ImageError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub role: SegmentRole,
    pub base: u32,
    pub bytes: Vec<u8>,
}

impl Segment {
    pub fn len(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn end(&self) -> u64 {
        self.base as u64 + self.bytes.len() as u64
    }

    pub fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && addr as u64 + len as u64 <= self.end()
    }
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(SEGMENT_ALIGN as u64) * SEGMENT_ALIGN as u64
}

/// Segments laid out in ascending addresses from `base`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryImage {
    base: u32,
    segments: Vec<Segment>,
    total_size: u32,
}

impl MemoryImage {
    /// Places the payloads back to back from `base`, each on a 64-byte
    /// boundary. `total_size` is the sum of the aligned segment sizes.
    pub fn layout(base: u32, payloads: Vec<(SegmentRole, Vec<u8>)>) -> Result<Self, ImageError> {
        if base % SEGMENT_ALIGN != 0 {
            return Err(ImageError::Format(format!("base 0x{base:x} is not 64-byte aligned")));
        }
        let mut cursor = base as u64;
        let mut segments = Vec::with_capacity(payloads.len());
        for (role, bytes) in payloads {
            let end = cursor + bytes.len() as u64;
            if end > u32::MAX as u64 {
                return Err(ImageError::Overflow(end));
            }
            segments.push(Segment {
                role,
                base: cursor as u32,
                bytes,
            });
            cursor = align_up(end);
        }
        let total = cursor - base as u64;
        if cursor > u32::MAX as u64 + 1 || total > u32::MAX as u64 {
            return Err(ImageError::Overflow(cursor));
        }
        Ok(Self {
            base,
            segments,
            total_size: total as u32,
        })
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    pub fn total_size(&self) -> u32 {
        self.total_size
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, role: SegmentRole) -> Option<&Segment> {
        self.segments.iter().find(|s| s.role == role)
    }

    /// Base address of the segment with `role`; zero if absent.
    pub fn segment_base(&self, role: SegmentRole) -> u32 {
        self.segment(role).map_or(0, |s| s.base)
    }

    /// True if `[addr, addr + len)` lies inside the image footprint.
    pub fn in_footprint(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && addr as u64 + len as u64 <= self.base as u64 + self.total_size as u64
    }

    /// Segment holding `[addr, addr + len)`, if any.
    pub fn segment_at(&self, addr: u32, len: u32) -> Option<&Segment> {
        // Segments are sorted by base.
        let idx = self.segments.partition_point(|s| s.base <= addr);
        self.segments[..idx]
            .iter()
            .rev()
            .find(|s| s.contains(addr, len) && (len > 0 || !s.is_empty()))
    }

    pub fn read(&self, addr: u32, len: u32) -> Result<&[u8], ImageError> {
        let seg = self.segment_at(addr, len).ok_or(ImageError::OutOfBounds { addr, len })?;
        let at = (addr - seg.base) as usize;
        Ok(&seg.bytes[at..at + len as usize])
    }

    pub fn read_u16(&self, addr: u32) -> Result<u16, ImageError> {
        Ok(u16::from_le_bytes(self.read(addr, 2)?.try_into().expect("2 bytes")))
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, ImageError> {
        Ok(u32::from_le_bytes(self.read(addr, 4)?.try_into().expect("4 bytes")))
    }

    pub fn read_f64(&self, addr: u32) -> Result<f64, ImageError> {
        Ok(f64::from_le_bytes(self.read(addr, 8)?.try_into().expect("8 bytes")))
    }

    fn validate(&self) -> Result<(), ImageError> {
        let mut cursor = self.base as u64;
        for s in &self.segments {
            if (s.base as u64) < cursor || s.base % SEGMENT_ALIGN != 0 {
                return Err(ImageError::Overlap(s.role));
            }
            cursor = align_up(s.end());
        }
        if cursor - self.base as u64 != self.total_size as u64 {
            return Err(ImageError::Format("total size disagrees with segment table".into()));
        }
        Ok(())
    }
}

/// Output-shape metadata stored alongside an image on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageHeader {
    pub out_rows: u32,
    pub out_cols: u32,
    pub width: u8,
}

/// Writes an image file: magic `NCIM`, version u16, segment count u16, base
/// u32, total size u32, output rows u32, output columns u32, MMH width u8,
/// three pad bytes, then per segment `role u8 | pad 3 | base u32 | len u32`,
/// then the raw segment bytes in table order.
pub fn write_image<W: Write>(image: &MemoryImage, header: ImageHeader, mut out: W) -> Result<(), ImageError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.segments.len() as u16).to_le_bytes());
    buf.extend_from_slice(&image.base.to_le_bytes());
    buf.extend_from_slice(&image.total_size.to_le_bytes());
    buf.extend_from_slice(&header.out_rows.to_le_bytes());
    buf.extend_from_slice(&header.out_cols.to_le_bytes());
    buf.extend_from_slice(&[header.width, 0, 0, 0]);
    for s in &image.segments {
        buf.extend_from_slice(&[s.role.code(), 0, 0, 0]);
        buf.extend_from_slice(&s.base.to_le_bytes());
        buf.extend_from_slice(&s.len().to_le_bytes());
    }
    for s in &image.segments {
        buf.extend_from_slice(&s.bytes);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_image<R: Read>(mut input: R) -> Result<(MemoryImage, ImageHeader), ImageError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let fmt_err = |m: &str| ImageError::Format(m.to_string());
    if bytes.len() < 28 {
        return Err(fmt_err("file shorter than header"));
    }
    if bytes[0..4] != IMAGE_MAGIC {
        return Err(fmt_err("wrong magic"));
    }
    let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]);
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if u16_at(4) != IMAGE_VERSION {
        return Err(ImageError::Format(format!("unsupported version {}", u16_at(4))));
    }
    let n_seg = u16_at(6) as usize;
    let base = u32_at(8);
    let total_size = u32_at(12);
    let header = ImageHeader {
        out_rows: u32_at(16),
        out_cols: u32_at(20),
        width: bytes[24],
    };
    let table_end = 28 + 12 * n_seg;
    if bytes.len() < table_end {
        return Err(fmt_err("truncated segment table"));
    }
    let mut at = table_end;
    let mut segments = Vec::with_capacity(n_seg);
    for s in 0..n_seg {
        let row = 28 + 12 * s;
        let role = SegmentRole::from_code(bytes[row]).ok_or_else(|| fmt_err("unknown segment role"))?;
        let seg_base = u32_at(row + 4);
        let len = u32_at(row + 8) as usize;
        let payload = bytes.get(at..at + len).ok_or_else(|| fmt_err("truncated segment payload"))?;
        segments.push(Segment {
            role,
            base: seg_base,
            bytes: payload.to_vec(),
        });
        at += len;
    }
    if at != bytes.len() {
        return Err(fmt_err("trailing bytes after last segment"));
    }
    let image = MemoryImage {
        base,
        segments,
        total_size,
    };
    image.validate()?;
    Ok((image, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_empty() -> Vec<(SegmentRole, Vec<u8>)> {
        SegmentRole::ALL.iter().map(|&r| (r, Vec::new())).collect()
    }

    #[test]
    fn empty_segments_are_aligned_and_zero_length() {
        let img = MemoryImage::layout(0, five_empty()).unwrap();
        assert_eq!(img.segments().len(), 5);
        assert!(img.segments().iter().all(|s| s.is_empty() && s.base % 64 == 0));
        assert_eq!(img.total_size(), 0);
    }

    #[test]
    fn segments_are_aligned_and_ascending() {
        let img = MemoryImage::layout(
            0x100,
            vec![(SegmentRole::AData, vec![1; 70]), (SegmentRole::ARowIds, vec![2; 4])],
        )
        .unwrap();
        assert_eq!(img.segments()[0].base, 0x100);
        assert_eq!(img.segments()[1].base, 0x100 + 128);
        assert_eq!(img.total_size(), 192);
        assert_eq!(img.read(0x100 + 69, 1).unwrap(), &[1]);
        assert!(img.read(0x100 + 69, 2).is_err());
        assert_eq!(img.read_u32(0x180).unwrap(), 0x0202_0202);
    }

    #[test]
    fn overflow_is_rejected() {
        let err = MemoryImage::layout(0xFFFF_FFC0, vec![(SegmentRole::AData, vec![0; 128])]).unwrap_err();
        assert!(matches!(err, ImageError::Overflow(_)));
    }

    #[test]
    fn file_roundtrip() {
        let img = MemoryImage::layout(
            0,
            vec![
                (SegmentRole::AData, 1.5f64.to_le_bytes().to_vec()),
                (SegmentRole::ARowIds, vec![]),
                (SegmentRole::Counters, vec![7, 0]),
            ],
        )
        .unwrap();
        let header = ImageHeader {
            out_rows: 3,
            out_cols: 5,
            width: 4,
        };
        let mut buf = Vec::new();
        write_image(&img, header, &mut buf).unwrap();
        let (back, h) = read_image(buf.as_slice()).unwrap();
        assert_eq!(back, img);
        assert_eq!(h, header);
        assert_eq!(back.read_f64(0).unwrap(), 1.5);

        buf.push(0);
        assert!(read_image(buf.as_slice()).is_err());
    }
}
