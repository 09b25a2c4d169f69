//! Messages carried by the interconnect.

use neurachip_core::isa::HaccInstruction;

/// A network-attached component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Endpoint {
    Core(u32),
    Mem(u32),
    /// Memory controller of one tile.
    Mc(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PacketKind {
    MemReadReq,
    MemReadResp,
    MemWrite,
    Hacc,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payload {
    /// Read of one memory line on behalf of pipeline `pipe` working on
    /// dispatch sequence number `seq`.
    ReadReq { line_addr: u64, pipe: u8, seq: u32 },
    ReadResp { line_addr: u64, pipe: u8, seq: u32 },
    /// Write-back of one evicted output.
    Write { addr: u64, tag: u32, value: f64 },
    Hacc {
        hacc: HaccInstruction,
        row_block: u32,
        /// Cycle the core emitted it.
        created: u64,
        /// Emitting core, for the work heat map.
        core: u32,
    },
}

impl Payload {
    pub fn kind(&self) -> PacketKind {
        match self {
            Payload::ReadReq { .. } => PacketKind::MemReadReq,
            Payload::ReadResp { .. } => PacketKind::MemReadResp,
            Payload::Write { .. } => PacketKind::MemWrite,
            Payload::Hacc { .. } => PacketKind::Hacc,
        }
    }
}

/// Direction of travel between neighbouring routers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dir {
    East,
    West,
    North,
    South,
}

impl Dir {
    pub const ALL: [Dir; 4] = [Dir::East, Dir::West, Dir::North, Dir::South];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_x(self) -> bool {
        matches!(self, Dir::East | Dir::West)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub src: Endpoint,
    pub dst: Endpoint,
    pub dst_router: u32,
    pub payload: Payload,
    /// First cycle the packet could leave its source router.
    pub inject_cycle: u64,
    /// Cycle from which the packet may move again.
    pub ready: u64,
    pub hops: u16,
    pub min_hops: u16,
    /// Direction of the last hop; `None` until the packet leaves its source.
    pub last_dir: Option<Dir>,
}

impl Packet {
    pub fn kind(&self) -> PacketKind {
        self.payload.kind()
    }
}
