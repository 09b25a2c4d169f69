//! The two-instruction ISA: `MMH` (multiply, emit partial products) and
//! `HACC` (hash-accumulate one partial product).
//!
//! Records are fixed-width little-endian:
//!
//! ```text
//! HACC  (15 B): opcode u8 | tag u32 | data f64 | counter u16
//! MMH1/2/4 (41 B): opcode u8 | base u32 | a_data u32 | b_col_ind u32 | b_data u32
//!                  | roll_counter u32 | row_id u32 x4 | mask_b<<4 | mask_a u8 | 3 reserved
//! MMH8  (55 B): opcode u8 | base u32 | 4 x offset u32 | row_id u32 x8 | mask_a u8 | mask_b u8
//! END   (1 B):  0xFF
//! ```
//!
//! Instruction-stream files start with a 16-byte header: magic `NCIS`,
//! version u16, reserved u16, instruction count u64; the records follow and
//! the stream ends with one `END` byte.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use thiserror::Error;

pub const OP_MMH1: u8 = 0x11;
pub const OP_MMH2: u8 = 0x12;
pub const OP_MMH4: u8 = 0x14;
pub const OP_MMH8: u8 = 0x18;
pub const OP_HACC: u8 = 0x20;
pub const OP_END: u8 = 0xFF;

pub const HACC_BYTES: usize = 15;
pub const MMH_NARROW_BYTES: usize = 41;
pub const MMH8_BYTES: usize = 55;

pub const STREAM_MAGIC: [u8; 4] = *b"NCIS";
pub const STREAM_VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IsaError {
    #[error("unknown opcode 0x{0:02x}")]
    UnknownOpcode(u8),
    #[error("buffer of {found} bytes is too short for opcode 0x{opcode:02x} ({needed} bytes)")]
    ShortBuffer { opcode: u8, needed: usize, found: usize },
    #[error("record for opcode 0x{opcode:02x} is {needed} bytes but {found} were given")]
    TrailingBytes { opcode: u8, needed: usize, found: usize },
    #[error("empty buffer")]
    Empty,
    #[error("invalid lane masks a=0b{mask_a:b} b=0b{mask_b:b} for width {width}")]
    BadMask { width: u8, mask_a: u8, mask_b: u8 },
    #[error("reserved bytes must be zero")]
    ReservedNonZero,
    #[error("unsupported MMH width {0} (expected 1, 2, 4 or 8)")]
    BadWidth(u32),
    #[error("bad stream header: {0}")]
    BadHeader(String),
    #[error("stream declares {declared} instructions but holds {found}")]
    CountMismatch { declared: u64, found: u64 },
    #[error("stream is not terminated by an END marker")]
    MissingTerminator,
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for IsaError {
    fn from(e: io::Error) -> Self {
        IsaError::Io(e.to_string())
    }
}

/// Tile width of an `MMH` instruction: lanes per operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum MmhWidth {
    W1,
    W2,
    #[default]
    W4,
    W8,
}

impl MmhWidth {
    pub const ALL: [MmhWidth; 4] = [MmhWidth::W1, MmhWidth::W2, MmhWidth::W4, MmhWidth::W8];

    pub fn lanes(self) -> usize {
        match self {
            MmhWidth::W1 => 1,
            MmhWidth::W2 => 2,
            MmhWidth::W4 => 4,
            MmhWidth::W8 => 8,
        }
    }

    pub fn opcode(self) -> u8 {
        match self {
            MmhWidth::W1 => OP_MMH1,
            MmhWidth::W2 => OP_MMH2,
            MmhWidth::W4 => OP_MMH4,
            MmhWidth::W8 => OP_MMH8,
        }
    }

    pub fn from_opcode(op: u8) -> Option<Self> {
        Some(match op {
            OP_MMH1 => MmhWidth::W1,
            OP_MMH2 => MmhWidth::W2,
            OP_MMH4 => MmhWidth::W4,
            OP_MMH8 => MmhWidth::W8,
            _ => return None,
        })
    }

    pub fn from_lanes(n: u32) -> Result<Self, IsaError> {
        Ok(match n {
            1 => MmhWidth::W1,
            2 => MmhWidth::W2,
            4 => MmhWidth::W4,
            8 => MmhWidth::W8,
            other => return Err(IsaError::BadWidth(other)),
        })
    }

    /// Encoded record size.
    pub fn record_bytes(self) -> usize {
        if self == MmhWidth::W8 {
            MMH8_BYTES
        } else {
            MMH_NARROW_BYTES
        }
    }

    /// Mask with one bit per lane.
    pub fn full_mask(self) -> u8 {
        ((1u16 << self.lanes()) - 1) as u8
    }
}

impl fmt::Display for MmhWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.lanes())
    }
}

impl FromStr for MmhWidth {
    type Err = IsaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: u32 = s.trim().parse().map_err(|_| IsaError::BadWidth(0))?;
        MmhWidth::from_lanes(n)
    }
}

/// One multiply instruction covering a `width x width` block of partial
/// products.
///
/// Lane `i` of A is `Mem[base + a_data_addr + 8i]` (f64) and produces output
/// row `a_row_ids[i]`; lane `j` of B has column index
/// `Mem[base + b_col_ind_addr + 4j]` (u32) and value
/// `Mem[base + b_data_addr + 8j]`; the rolling counter of lane pair `(i, j)`
/// is `Mem[base + roll_counter_addr + 2(i*width + j)]` (u16). Active lanes are
/// the set bits of the masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MmhInstruction {
    pub width: MmhWidth,
    pub base_addr: u32,
    pub a_data_addr: u32,
    pub b_col_ind_addr: u32,
    pub b_data_addr: u32,
    pub roll_counter_addr: u32,
    pub a_row_ids: [u32; 8],
    pub lane_mask_a: u8,
    pub lane_mask_b: u8,
}

/// The common 4-lane form.
pub type Mmh4Instruction = MmhInstruction;

impl MmhInstruction {
    pub fn validate(&self) -> Result<(), IsaError> {
        let full = self.width.full_mask();
        let bad = |m: u8| m == 0 || m & !full != 0;
        if bad(self.lane_mask_a) || bad(self.lane_mask_b) {
            return Err(IsaError::BadMask {
                width: self.width.lanes() as u8,
                mask_a: self.lane_mask_a,
                mask_b: self.lane_mask_b,
            });
        }
        Ok(())
    }

    pub fn active_a(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width.lanes()).filter(move |i| self.lane_mask_a >> i & 1 == 1)
    }

    pub fn active_b(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width.lanes()).filter(move |j| self.lane_mask_b >> j & 1 == 1)
    }

    /// Number of `HACC`s this instruction emits.
    pub fn hacc_count(&self) -> usize {
        (self.lane_mask_a.count_ones() * self.lane_mask_b.count_ones()) as usize
    }

    pub fn a_lane_addr(&self, i: usize) -> u32 {
        self.base_addr + self.a_data_addr + 8 * i as u32
    }

    pub fn b_col_lane_addr(&self, j: usize) -> u32 {
        self.base_addr + self.b_col_ind_addr + 4 * j as u32
    }

    pub fn b_data_lane_addr(&self, j: usize) -> u32 {
        self.base_addr + self.b_data_addr + 8 * j as u32
    }

    pub fn counter_addr(&self, i: usize, j: usize) -> u32 {
        self.base_addr + self.roll_counter_addr + 2 * (i * self.width.lanes() + j) as u32
    }

    /// Byte ranges `(start, len)` the instruction reads: A data, B column
    /// indices, B data and the counter block, over active lanes.
    pub fn operand_ranges(&self) -> [(u32, u32); 4] {
        let na = self.active_a().last().map_or(0, |i| i + 1) as u32;
        let nb = self.active_b().last().map_or(0, |j| j + 1) as u32;
        let w = self.width.lanes() as u32;
        let ctr_len = if na == 0 { 0 } else { 2 * ((na - 1) * w + nb) };
        [
            (self.base_addr + self.a_data_addr, 8 * na),
            (self.base_addr + self.b_col_ind_addr, 4 * nb),
            (self.base_addr + self.b_data_addr, 8 * nb),
            (self.base_addr + self.roll_counter_addr, ctr_len),
        ]
    }
}

/// One partial product on its way to a HashPad.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaccInstruction {
    /// Output element identifier: `row * n_cols(C) + col`.
    pub tag: u32,
    pub data: f64,
    /// Contributions still expected after this one on first insertion.
    pub counter: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Instruction {
    Mmh(MmhInstruction),
    Hacc(HaccInstruction),
}

impl From<MmhInstruction> for Instruction {
    fn from(i: MmhInstruction) -> Self {
        Instruction::Mmh(i)
    }
}

impl From<HaccInstruction> for Instruction {
    fn from(i: HaccInstruction) -> Self {
        Instruction::Hacc(i)
    }
}

impl Instruction {
    pub fn record_bytes(&self) -> usize {
        match self {
            Instruction::Mmh(m) => m.width.record_bytes(),
            Instruction::Hacc(_) => HACC_BYTES,
        }
    }
}

/// Appends the encoding of `instr` to `out`.
pub fn encode_into(instr: &Instruction, out: &mut Vec<u8>) {
    match instr {
        Instruction::Hacc(h) => {
            out.push(OP_HACC);
            out.extend_from_slice(&h.tag.to_le_bytes());
            out.extend_from_slice(&h.data.to_bits().to_le_bytes());
            out.extend_from_slice(&h.counter.to_le_bytes());
        }
        Instruction::Mmh(m) => {
            out.push(m.width.opcode());
            for field in [m.base_addr, m.a_data_addr, m.b_col_ind_addr, m.b_data_addr, m.roll_counter_addr] {
                out.extend_from_slice(&field.to_le_bytes());
            }
            if m.width == MmhWidth::W8 {
                for id in m.a_row_ids {
                    out.extend_from_slice(&id.to_le_bytes());
                }
                out.push(m.lane_mask_a);
                out.push(m.lane_mask_b);
            } else {
                for id in &m.a_row_ids[..4] {
                    out.extend_from_slice(&id.to_le_bytes());
                }
                out.push((m.lane_mask_b << 4) | (m.lane_mask_a & 0x0F));
                out.extend_from_slice(&[0, 0, 0]);
            }
        }
    }
}

pub fn encode(instr: &Instruction) -> Vec<u8> {
    let mut out = Vec::with_capacity(instr.record_bytes());
    encode_into(instr, &mut out);
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes the record at the start of `bytes`, returning it with its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Instruction, usize), IsaError> {
    let &opcode = bytes.first().ok_or(IsaError::Empty)?;
    let needed = match opcode {
        OP_HACC => HACC_BYTES,
        op => MmhWidth::from_opcode(op).ok_or(IsaError::UnknownOpcode(op))?.record_bytes(),
    };
    if bytes.len() < needed {
        return Err(IsaError::ShortBuffer {
            opcode,
            needed,
            found: bytes.len(),
        });
    }
    let b = &bytes[..needed];
    let instr = if opcode == OP_HACC {
        Instruction::Hacc(HaccInstruction {
            tag: u32_at(b, 1),
            data: f64::from_bits(u64::from_le_bytes(b[5..13].try_into().expect("8 bytes"))),
            counter: u16::from_le_bytes([b[13], b[14]]),
        })
    } else {
        let width = MmhWidth::from_opcode(opcode).expect("checked above");
        let mut a_row_ids = [0u32; 8];
        let (mask_a, mask_b) = if width == MmhWidth::W8 {
            for (i, id) in a_row_ids.iter_mut().enumerate() {
                *id = u32_at(b, 21 + 4 * i);
            }
            (b[53], b[54])
        } else {
            for (i, id) in a_row_ids.iter_mut().take(4).enumerate() {
                *id = u32_at(b, 21 + 4 * i);
            }
            if b[38..41] != [0, 0, 0] {
                return Err(IsaError::ReservedNonZero);
            }
            (b[37] & 0x0F, b[37] >> 4)
        };
        let m = MmhInstruction {
            width,
            base_addr: u32_at(b, 1),
            a_data_addr: u32_at(b, 5),
            b_col_ind_addr: u32_at(b, 9),
            b_data_addr: u32_at(b, 13),
            roll_counter_addr: u32_at(b, 17),
            a_row_ids,
            lane_mask_a: mask_a,
            lane_mask_b: mask_b,
        };
        m.validate()?;
        Instruction::Mmh(m)
    };
    Ok((instr, needed))
}

/// Decodes exactly one record; the buffer length must match the opcode.
pub fn decode(bytes: &[u8]) -> Result<Instruction, IsaError> {
    let (instr, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(IsaError::TrailingBytes {
            opcode: bytes[0],
            needed: used,
            found: bytes.len(),
        });
    }
    Ok(instr)
}

/// Writes a complete instruction-stream file.
pub fn write_instruction_stream<W: Write>(instrs: &[Instruction], mut out: W) -> Result<(), IsaError> {
    let mut buf = Vec::with_capacity(16 + instrs.len() * MMH_NARROW_BYTES + 1);
    buf.extend_from_slice(&STREAM_MAGIC);
    buf.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(instrs.len() as u64).to_le_bytes());
    for i in instrs {
        encode_into(i, &mut buf);
    }
    buf.push(OP_END);
    out.write_all(&buf)?;
    Ok(())
}

/// Reads an instruction-stream file written by [`write_instruction_stream`].
pub fn read_instruction_stream<R: Read>(mut input: R) -> Result<Vec<Instruction>, IsaError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(IsaError::BadHeader("file shorter than header".into()));
    }
    if bytes[0..4] != STREAM_MAGIC {
        return Err(IsaError::BadHeader("wrong magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != STREAM_VERSION {
        return Err(IsaError::BadHeader(format!("unsupported version {version}")));
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let mut at = 16;
    let mut out = Vec::new();
    loop {
        match bytes.get(at) {
            None => return Err(IsaError::MissingTerminator),
            Some(&OP_END) => {
                at += 1;
                break;
            }
            Some(_) => {
                let (instr, used) = decode_prefix(&bytes[at..])?;
                out.push(instr);
                at += used;
            }
        }
    }
    if out.len() as u64 != declared {
        return Err(IsaError::CountMismatch {
            declared,
            found: out.len() as u64,
        });
    }
    if at != bytes.len() {
        return Err(IsaError::BadHeader("bytes after END marker".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mmh4(base: u32) -> MmhInstruction {
        MmhInstruction {
            width: MmhWidth::W4,
            base_addr: base,
            a_data_addr: 0x40,
            b_col_ind_addr: 0x80,
            b_data_addr: 0xC0,
            roll_counter_addr: 0x100,
            a_row_ids: [1, 2, 3, 4, 0, 0, 0, 0],
            lane_mask_a: 0b1111,
            lane_mask_b: 0b0011,
        }
    }

    #[test]
    fn zero_hacc_is_fifteen_bytes_of_zero_payload() {
        let bytes = encode(&Instruction::Hacc(HaccInstruction {
            tag: 0,
            data: 0.0,
            counter: 0,
        }));
        assert_eq!(bytes.len(), 15);
        assert_eq!(bytes[0], OP_HACC);
        assert!(bytes[1..].iter().all(|&b| b == 0));
        assert_eq!(
            decode(&bytes).unwrap(),
            Instruction::Hacc(HaccInstruction {
                tag: 0,
                data: 0.0,
                counter: 0
            })
        );
    }

    #[test]
    fn base_address_is_little_endian_after_opcode() {
        let bytes = encode(&mmh4(0x10).into());
        assert_eq!(bytes.len(), 41);
        assert_eq!(bytes[0], OP_MMH4);
        assert_eq!(&bytes[1..5], &[0x10, 0, 0, 0]);
        assert_eq!(decode(&bytes).unwrap(), Instruction::Mmh(mmh4(0x10)));
    }

    #[test]
    fn mmh8_uses_the_wide_record() {
        let m = MmhInstruction {
            width: MmhWidth::W8,
            a_row_ids: [9, 8, 7, 6, 5, 4, 3, 2],
            lane_mask_a: 0xFF,
            lane_mask_b: 0x7F,
            ..mmh4(0)
        };
        let bytes = encode(&m.into());
        assert_eq!(bytes.len(), MMH8_BYTES);
        assert_eq!(decode(&bytes).unwrap(), Instruction::Mmh(m));
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode(&[]).unwrap_err(), IsaError::Empty);
        assert_eq!(decode(&[0x33, 0, 0]).unwrap_err(), IsaError::UnknownOpcode(0x33));
        assert!(matches!(decode(&[OP_HACC, 1, 2]).unwrap_err(), IsaError::ShortBuffer { needed: 15, .. }));
        let mut bytes = encode(&mmh4(0).into());
        bytes.push(0);
        assert!(matches!(decode(&bytes).unwrap_err(), IsaError::TrailingBytes { .. }));
        let mut bytes = encode(&mmh4(0).into());
        bytes[37] = 0x0F;
        assert!(matches!(decode(&bytes).unwrap_err(), IsaError::BadMask { .. }));
        let mut bytes = encode(&mmh4(0).into());
        bytes[40] = 1;
        assert_eq!(decode(&bytes).unwrap_err(), IsaError::ReservedNonZero);
    }

    #[test]
    fn hacc_count_is_mask_popcount_product() {
        let m = mmh4(0);
        assert_eq!(m.hacc_count(), 8);
        assert_eq!(m.active_a().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(m.active_b().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn operand_ranges_cover_active_lanes() {
        let m = mmh4(0x1000);
        let r = m.operand_ranges();
        assert_eq!(r[0], (0x1040, 32));
        assert_eq!(r[1], (0x1080, 8));
        assert_eq!(r[2], (0x10C0, 16));
        // Last active counter is (3, 1): byte offset 2 * (3 * 4 + 1) = 26.
        assert_eq!(r[3], (0x1100, 28));
        assert_eq!(m.counter_addr(3, 1), 0x1100 + 26);
    }

    #[test]
    fn stream_roundtrip_and_errors() {
        let instrs: Vec<Instruction> = vec![
            mmh4(0).into(),
            HaccInstruction {
                tag: 7,
                data: -2.5,
                counter: 3,
            }
            .into(),
        ];
        let mut buf = Vec::new();
        write_instruction_stream(&instrs, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 41 + 15 + 1);
        assert_eq!(read_instruction_stream(buf.as_slice()).unwrap(), instrs);

        let mut truncated = buf.clone();
        truncated.pop();
        assert_eq!(read_instruction_stream(truncated.as_slice()).unwrap_err(), IsaError::MissingTerminator);
        let mut wrong_count = buf.clone();
        wrong_count[8] = 5;
        assert!(matches!(
            read_instruction_stream(wrong_count.as_slice()).unwrap_err(),
            IsaError::CountMismatch { declared: 5, found: 2 }
        ));
        let mut bad_magic = buf;
        bad_magic[0] = b'X';
        assert!(matches!(read_instruction_stream(bad_magic.as_slice()).unwrap_err(), IsaError::BadHeader(_)));
    }
}
