//! Per-tile memory controller over a parametric HBM channel.
//!
//! Requests wait in bounded read and write buffers. Each issue slot scans
//! the first `coalesce_window` entries of one buffer, picks a line (the one
//! adjacent to the previously issued line if present, the oldest otherwise)
//! and merges every request to that line into a single transaction. The
//! channel moves one line per `ceil(line / bandwidth)` cycles and answers
//! after a further `base_latency`.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::config::TileConfig;
use crate::packet::Endpoint;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("memory controller {tile}: {kind} at address {addr:#x} is outside the memory footprint")]
    Fault { tile: u32, kind: &'static str, addr: u64 },
    #[error("memory controller {tile}: address {addr:#x} belongs to controller {owner}")]
    WrongOwner { tile: u32, owner: u32, addr: u64 },
}

/// Addresses a run may touch: the input image and the output region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Footprint {
    pub image_base: u64,
    pub image_end: u64,
    pub out_base: u64,
    pub out_end: u64,
}

impl Footprint {
    pub fn readable(&self, addr: u64) -> bool {
        addr >= self.image_base && addr < self.image_end
    }

    pub fn writable(&self, addr: u64) -> bool {
        addr >= self.out_base && addr < self.out_end
    }
}

/// Controller that owns `addr` when lines are interleaved across tiles.
pub fn owner_of(addr: u64, line_bytes: u32, tiles: u32) -> u32 {
    ((addr / line_bytes as u64) % tiles as u64) as u32
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReadRequest {
    pub from: Endpoint,
    pub line_addr: u64,
    pub pipe: u8,
    pub seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriteRequest {
    pub addr: u64,
    pub tag: u32,
    pub value: f64,
}

/// What finished this cycle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct McOutput {
    pub responses: Vec<ReadRequest>,
    pub writes: Vec<WriteRequest>,
}

#[derive(Debug, Clone)]
enum Txn {
    Read(Vec<ReadRequest>),
    Write(Vec<WriteRequest>),
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct McStats {
    pub reads: u64,
    pub writes: u64,
    pub read_transactions: u64,
    pub write_transactions: u64,
    pub bytes: u64,
    pub peak_inflight: u32,
    /// Cycles with at least one transaction in flight.
    pub active_cycles: u64,
    pub rejected: u64,
    /// The bus is transferring a line.
    pub busy_cycles: u64,
    /// Work is queued or in flight but the bus is free.
    pub stall_cycles: u64,
    pub idle_cycles: u64,
}

#[derive(Debug, Clone)]
pub struct MemoryController {
    tile: u32,
    tiles: u32,
    line_bytes: u64,
    read_cap: usize,
    write_cap: usize,
    window: usize,
    base_latency: u64,
    service: u64,
    max_inflight: usize,
    footprint: Footprint,
    reads: VecDeque<ReadRequest>,
    writes: VecDeque<WriteRequest>,
    /// `(completion cycle, transaction)` in issue order; completions are
    /// monotone because service time is constant.
    inflight: VecDeque<(u64, Txn)>,
    bus_free_at: u64,
    last_line: Option<u64>,
    stats: McStats,
}

impl MemoryController {
    pub fn new(tile: u32, cfg: &TileConfig, footprint: Footprint) -> Self {
        let ch = cfg.channel;
        Self {
            tile,
            tiles: cfg.tiles,
            line_bytes: cfg.line_bytes as u64,
            read_cap: cfg.mc_read_buffer as usize,
            write_cap: cfg.mc_write_buffer as usize,
            window: cfg.coalesce_window as usize,
            base_latency: ch.base_latency as u64,
            service: (cfg.line_bytes as u64).div_ceil(ch.bandwidth_bytes_per_cycle as u64),
            max_inflight: ch.max_inflight as usize,
            footprint,
            reads: VecDeque::new(),
            writes: VecDeque::new(),
            inflight: VecDeque::new(),
            bus_free_at: 0,
            last_line: None,
            stats: McStats::default(),
        }
    }

    /// Channel occupancy of one line transfer.
    pub fn service_cycles(&self) -> u64 {
        self.service
    }

    pub fn read_free(&self) -> usize {
        self.read_cap - self.reads.len()
    }

    pub fn write_free(&self) -> usize {
        self.write_cap - self.writes.len()
    }

    fn check_owner(&self, addr: u64) -> Result<(), McError> {
        let owner = owner_of(addr, self.line_bytes as u32, self.tiles);
        if owner != self.tile {
            return Err(McError::WrongOwner {
                tile: self.tile,
                owner,
                addr,
            });
        }
        Ok(())
    }

    /// Queues a line read; `Ok(false)` when the read buffer is full.
    pub fn submit_read(&mut self, req: ReadRequest) -> Result<bool, McError> {
        if !self.footprint.readable(req.line_addr) {
            return Err(McError::Fault {
                tile: self.tile,
                kind: "read",
                addr: req.line_addr,
            });
        }
        self.check_owner(req.line_addr)?;
        if self.reads.len() >= self.read_cap {
            self.stats.rejected += 1;
            return Ok(false);
        }
        self.reads.push_back(req);
        self.stats.reads += 1;
        Ok(true)
    }

    /// Queues an output write; `Ok(false)` when the write buffer is full.
    pub fn submit_write(&mut self, req: WriteRequest) -> Result<bool, McError> {
        if !self.footprint.writable(req.addr) {
            return Err(McError::Fault {
                tile: self.tile,
                kind: "write",
                addr: req.addr,
            });
        }
        self.check_owner(req.addr)?;
        if self.writes.len() >= self.write_cap {
            self.stats.rejected += 1;
            return Ok(false);
        }
        self.writes.push_back(req);
        self.stats.writes += 1;
        Ok(true)
    }

    fn line(&self, addr: u64) -> u64 {
        addr / self.line_bytes
    }

    /// Index within the scan window of the line to issue next.
    fn pick<T>(&self, queue: &VecDeque<T>, addr: impl Fn(&T) -> u64) -> usize {
        let scan = queue.len().min(self.window);
        if let Some(last) = self.last_line {
            let adjacent = (0..scan).find(|&i| {
                let l = self.line(addr(&queue[i]));
                l == last + 1 || l + 1 == last
            });
            if let Some(i) = adjacent {
                return i;
            }
        }
        0
    }

    /// Removes every windowed entry on `line`, keeping the rest in order.
    fn take_line<T: Copy>(window: usize, queue: &mut VecDeque<T>, line: u64, line_of: impl Fn(&T) -> u64) -> Vec<T> {
        let scan = queue.len().min(window);
        let mut taken = Vec::new();
        let mut kept = VecDeque::with_capacity(queue.len());
        for (i, item) in queue.drain(..).enumerate() {
            if i < scan && line_of(&item) == line {
                taken.push(item);
            } else {
                kept.push_back(item);
            }
        }
        *queue = kept;
        taken
    }

    /// Retires finished transactions, then issues at most one new one.
    pub fn tick(&mut self, now: u64) -> McOutput {
        let mut out = McOutput::default();
        while self.inflight.front().is_some_and(|(done, _)| *done <= now) {
            match self.inflight.pop_front().unwrap().1 {
                Txn::Read(reqs) => out.responses.extend(reqs),
                Txn::Write(ws) => out.writes.extend(ws),
            }
        }

        let can_issue = self.bus_free_at <= now && self.inflight.len() < self.max_inflight;
        if can_issue && !(self.reads.is_empty() && self.writes.is_empty()) {
            let lb = self.line_bytes;
            let prefer_writes = self.reads.is_empty() || self.writes.len() * 2 >= self.write_cap;
            let (line, txn) = if prefer_writes && !self.writes.is_empty() {
                let i = self.pick(&self.writes, |w| w.addr);
                let line = self.writes[i].addr / lb;
                let ws = Self::take_line(self.window, &mut self.writes, line, |w| w.addr / lb);
                self.stats.write_transactions += 1;
                (line, Txn::Write(ws))
            } else {
                let i = self.pick(&self.reads, |r| r.line_addr);
                let line = self.reads[i].line_addr / lb;
                let rs = Self::take_line(self.window, &mut self.reads, line, |r| r.line_addr / lb);
                self.stats.read_transactions += 1;
                (line, Txn::Read(rs))
            };
            self.last_line = Some(line);
            self.bus_free_at = now + self.service;
            self.stats.bytes += self.line_bytes;
            self.inflight.push_back((now + self.base_latency + self.service, txn));
            self.stats.peak_inflight = self.stats.peak_inflight.max(self.inflight.len() as u32);
        }
        if !self.inflight.is_empty() {
            self.stats.active_cycles += 1;
        }
        if self.bus_free_at > now {
            self.stats.busy_cycles += 1;
        } else if self.is_idle() {
            self.stats.idle_cycles += 1;
        } else {
            self.stats.stall_cycles += 1;
        }
        out
    }

    pub fn inflight(&self) -> usize {
        self.inflight.len()
    }

    pub fn is_idle(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty() && self.inflight.is_empty()
    }

    pub fn stats(&self) -> &McStats {
        &self.stats
    }
}
