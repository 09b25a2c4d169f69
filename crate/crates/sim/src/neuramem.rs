//! Accumulation engine: a HashPad of TAG/DATA/COUNTER lines served by
//! banked hash engines.
//!
//! A line's home slot is a multiplicative hash of its tag; the low index bits
//! pick the bank and therefore the engine. Live tags are found in one cycle
//! through the comparators. A new tag probes free slots linearly inside its
//! bank, `comparators` slots per cycle, and keeps its engine busy until a
//! slot turns up.

use std::collections::{BTreeMap, HashMap, VecDeque};

use neurachip_core::isa::HaccInstruction;
use serde::Serialize;

use crate::config::{EvictionMode, TileConfig};

const HASH_MUL: u32 = 0x9E37_79B1;

/// Home slot of `tag` in a pad of `2^log2_lines` lines.
pub fn internal_hash(tag: u32, log2_lines: u32) -> u32 {
    if log2_lines == 0 {
        return 0;
    }
    tag.wrapping_mul(HASH_MUL) >> (32 - log2_lines)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HaccOutcome {
    Inserted,
    Accumulated,
    Evicted(u32, f64),
    /// Completed but held until the next barrier.
    Completed,
    Stalled,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
enum LineState {
    #[default]
    Empty,
    Occupied,
    /// Counter reached zero in barrier mode.
    Complete,
}

#[derive(Debug, Clone, Copy, Default)]
struct Line {
    tag: u32,
    data: f64,
    counter: u16,
    state: LineState,
}

/// The line array and its tag directory, without timing.
#[derive(Debug, Clone)]
pub struct HashPad {
    lines: Vec<Line>,
    log2_lines: u32,
    banks: u32,
    live: HashMap<u32, u32>,
    /// Completed lines awaiting a barrier, tag to slot.
    held: HashMap<u32, u32>,
    mode: EvictionMode,
    occupancy: u32,
    peak: u32,
}

impl HashPad {
    pub fn new(n_lines: u32, banks: u32, mode: EvictionMode) -> Self {
        assert!(n_lines.is_power_of_two() && banks.is_power_of_two() && banks <= n_lines);
        Self {
            lines: vec![Line::default(); n_lines as usize],
            log2_lines: n_lines.trailing_zeros(),
            banks,
            live: HashMap::new(),
            held: HashMap::new(),
            mode,
            occupancy: 0,
            peak: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy == 0
    }

    pub fn home(&self, tag: u32) -> u32 {
        internal_hash(tag, self.log2_lines)
    }

    pub fn bank_of(&self, tag: u32) -> u32 {
        self.home(tag) & (self.banks - 1)
    }

    /// Slots per bank.
    pub fn bank_len(&self) -> u32 {
        self.lines.len() as u32 / self.banks
    }

    /// Slot `k` of the probe sequence starting at `home`, staying in its bank.
    pub fn probe_slot(&self, home: u32, k: u32) -> u32 {
        home.wrapping_add(k.wrapping_mul(self.banks)) & (self.lines.len() as u32 - 1)
    }

    pub fn slot_of(&self, tag: u32) -> Option<u32> {
        self.live.get(&tag).copied()
    }

    pub fn occupancy(&self) -> u32 {
        self.occupancy
    }

    pub fn peak_occupancy(&self) -> u32 {
        self.peak
    }

    /// Lines whose counter has not reached zero.
    pub fn incomplete(&self) -> usize {
        self.lines.iter().filter(|l| l.state == LineState::Occupied).count()
    }

    /// Adds to a live line, if there is one.
    pub fn accumulate(&mut self, h: &HaccInstruction) -> Option<HaccOutcome> {
        let slot = *self.live.get(&h.tag)?;
        let line = &mut self.lines[slot as usize];
        debug_assert_eq!(line.state, LineState::Occupied, "HACC for completed tag {}", h.tag);
        line.data += h.data;
        line.counter = line.counter.saturating_sub(1);
        if line.counter > 0 {
            return Some(HaccOutcome::Accumulated);
        }
        Some(self.complete(slot))
    }

    fn complete(&mut self, slot: u32) -> HaccOutcome {
        let line = &mut self.lines[slot as usize];
        match self.mode {
            EvictionMode::Rolling => {
                let (tag, data) = (line.tag, line.data);
                *line = Line::default();
                self.live.remove(&tag);
                self.occupancy -= 1;
                HaccOutcome::Evicted(tag, data)
            }
            EvictionMode::Barrier => {
                line.state = LineState::Complete;
                self.live.remove(&line.tag);
                self.held.insert(line.tag, slot);
                HaccOutcome::Completed
            }
        }
    }

    /// Writes a new tag into `slot`, which must be empty.
    pub fn insert_at(&mut self, slot: u32, h: &HaccInstruction) -> HaccOutcome {
        debug_assert!(!self.live.contains_key(&h.tag));
        if h.counter == 0 && self.mode == EvictionMode::Rolling {
            // A single contribution never needs a line.
            return HaccOutcome::Evicted(h.tag, h.data);
        }
        let line = &mut self.lines[slot as usize];
        debug_assert_eq!(line.state, LineState::Empty);
        *line = Line {
            tag: h.tag,
            data: h.data,
            counter: h.counter,
            state: LineState::Occupied,
        };
        self.occupancy += 1;
        self.peak = self.peak.max(self.occupancy);
        if h.counter == 0 {
            return self.complete(slot);
        }
        self.live.insert(h.tag, slot);
        HaccOutcome::Inserted
    }

    pub fn is_free(&self, slot: u32) -> bool {
        self.lines[slot as usize].state == LineState::Empty
    }

    /// Executes `h` probing at most `probes` slots from its home.
    pub fn execute_hacc(&mut self, h: &HaccInstruction, probes: u32) -> HaccOutcome {
        if let Some(outcome) = self.accumulate(h) {
            return outcome;
        }
        let home = self.home(h.tag);
        for k in 0..probes.min(self.bank_len()) {
            let slot = self.probe_slot(home, k);
            if self.is_free(slot) {
                return self.insert_at(slot, h);
            }
        }
        HaccOutcome::Stalled
    }

    /// Evicts every completed line, in slot order.
    pub fn barrier_flush(&mut self) -> Vec<(u32, f64)> {
        let mut out = Vec::new();
        for line in self.lines.iter_mut() {
            if line.state == LineState::Complete {
                out.push((line.tag, line.data));
                *line = Line::default();
                self.occupancy -= 1;
            }
        }
        self.held.clear();
        out
    }

    /// Evicts the completed line of `tag`, if it is held.
    pub fn flush_tag(&mut self, tag: u32) -> Option<f64> {
        let slot = self.held.remove(&tag)?;
        let line = &mut self.lines[slot as usize];
        let value = line.data;
        *line = Line::default();
        self.occupancy -= 1;
        Some(value)
    }
}

/// HACC waiting in an ingress port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingHacc {
    pub hacc: HaccInstruction,
    pub row_block: u32,
    pub created: u64,
    pub arrived: u64,
    pub core: u32,
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    h: PendingHacc,
    next: u32,
}

/// One processed HACC, reported to the engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HaccEvent {
    pub row_block: u32,
    pub created: u64,
    pub core: u32,
    /// The HACC that completed a line in barrier mode is timed at the flush.
    pub deferred: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eviction {
    pub tag: u32,
    pub value: f64,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct MemStats {
    pub received: u64,
    pub inserted: u64,
    pub accumulated: u64,
    pub evicted: u64,
    pub probe_stall_cycles: u64,
    pub busy_cycles: u64,
    pub stall_cycles: u64,
    pub idle_cycles: u64,
}

/// Cycle model of one NeuraMem.
#[derive(Debug, Clone)]
pub struct NeuraMem {
    pub id: u32,
    pad: HashPad,
    ingress: Vec<VecDeque<PendingHacc>>,
    port_cap: usize,
    comparators: u32,
    probes: Vec<Option<Probe>>,
    writeback: VecDeque<Eviction>,
    /// HACCs that completed a line, held for their row block's barrier.
    held: BTreeMap<(u32, u32), HaccEvent>,
    stats: MemStats,
    last: MemTick,
}

/// Results of one tick.
#[derive(Debug, Clone, Default)]
pub struct MemTick {
    pub done: Vec<HaccEvent>,
    pub progressed: bool,
}

impl NeuraMem {
    pub fn new(id: u32, cfg: &TileConfig) -> Self {
        Self {
            id,
            pad: HashPad::new(cfg.hashlines, cfg.engines, cfg.eviction),
            ingress: vec![VecDeque::new(); cfg.ports as usize],
            port_cap: cfg.port_buffer as usize,
            comparators: cfg.comparators,
            probes: vec![None; cfg.engines as usize],
            writeback: VecDeque::new(),
            held: BTreeMap::new(),
            stats: MemStats::default(),
            last: MemTick::default(),
        }
    }

    pub fn pad(&self) -> &HashPad {
        &self.pad
    }

    pub fn ingress_free(&self) -> u32 {
        self.ingress.iter().map(|q| self.port_cap - q.len()).sum::<usize>() as u32
    }

    /// Accepts an ejected HACC into the least occupied ingress port.
    pub fn receive(&mut self, h: PendingHacc) {
        let q = self
            .ingress
            .iter_mut()
            .min_by_key(|q| q.len())
            .expect("at least one port");
        debug_assert!(q.len() < self.port_cap, "ingress overflow");
        q.push_back(h);
        self.stats.received += 1;
    }

    fn record(&mut self, outcome: HaccOutcome, h: &PendingHacc, done: &mut Vec<HaccEvent>) {
        let ev = HaccEvent {
            row_block: h.row_block,
            created: h.created,
            core: h.core,
            deferred: false,
        };
        match outcome {
            HaccOutcome::Inserted => {
                self.stats.inserted += 1;
                done.push(ev);
            }
            HaccOutcome::Accumulated => {
                self.stats.accumulated += 1;
                done.push(ev);
            }
            HaccOutcome::Evicted(tag, value) => {
                self.stats.evicted += 1;
                self.writeback.push_back(Eviction { tag, value });
                done.push(ev);
            }
            HaccOutcome::Completed => {
                self.stats.accumulated += 1;
                self.held.insert((h.row_block, h.hacc.tag), ev);
                done.push(HaccEvent { deferred: true, ..ev });
            }
            HaccOutcome::Stalled => unreachable!(),
        }
    }

    /// Oldest waiting HACC for `bank`, as `(port, index)`.
    fn oldest_for(&self, bank: u32) -> Option<(usize, usize)> {
        let mut best: Option<(u64, usize, usize)> = None;
        for (p, q) in self.ingress.iter().enumerate() {
            if let Some(i) = q.iter().position(|h| self.pad.bank_of(h.hacc.tag) == bank) {
                let key = q[i].arrived;
                if best.is_none_or(|(k, bp, _)| key < k || (key == k && p < bp)) {
                    best = Some((key, p, i));
                }
            }
        }
        best.map(|(_, p, i)| (p, i))
    }

    fn probe(&mut self, probe: Probe) -> Result<HaccOutcome, Probe> {
        let home = self.pad.home(probe.h.hacc.tag);
        let bank_len = self.pad.bank_len();
        for k in probe.next..probe.next + self.comparators {
            let slot = self.pad.probe_slot(home, k % bank_len);
            if self.pad.is_free(slot) {
                return Ok(self.pad.insert_at(slot, &probe.h.hacc));
            }
        }
        Err(Probe {
            next: (probe.next + self.comparators) % bank_len,
            ..probe
        })
    }

    /// Outputs of the most recent [`tick`](Self::tick).
    pub fn last_tick(&self) -> &MemTick {
        &self.last
    }

    /// One cycle: each engine takes one HACC (or continues a probe).
    pub fn tick(&mut self) -> &MemTick {
        let mut out = std::mem::take(&mut self.last);
        out.done.clear();
        out.progressed = false;
        if self.probes.iter().all(Option::is_none) && self.ingress.iter().all(VecDeque::is_empty) {
            self.stats.idle_cycles += 1;
            self.last = out;
            return &self.last;
        }
        let mut waiting = false;
        for e in 0..self.probes.len() {
            if let Some(p) = self.probes[e].take() {
                match self.probe(p) {
                    Ok(outcome) => {
                        self.record(outcome, &p.h, &mut out.done);
                        out.progressed = true;
                    }
                    Err(p) => {
                        self.stats.probe_stall_cycles += 1;
                        self.probes[e] = Some(p);
                        waiting = true;
                    }
                }
                continue;
            }
            let Some((port, idx)) = self.oldest_for(e as u32) else { continue };
            let h = self.ingress[port].remove(idx).unwrap();
            out.progressed = true;
            if let Some(outcome) = self.pad.accumulate(&h.hacc) {
                self.record(outcome, &h, &mut out.done);
                continue;
            }
            match self.probe(Probe { h, next: 0 }) {
                Ok(outcome) => self.record(outcome, &h, &mut out.done),
                Err(p) => self.probes[e] = Some(p),
            }
        }
        if out.progressed {
            self.stats.busy_cycles += 1;
        } else if waiting || self.ingress.iter().any(|q| !q.is_empty()) {
            self.stats.stall_cycles += 1;
        } else {
            self.stats.idle_cycles += 1;
        }
        self.last = out;
        &self.last
    }

    /// Barrier for one drained row block: its completed lines go to
    /// write-back in tag order. Returns the HACCs that completed them, which
    /// were reported as deferred when executed and are timed now.
    pub fn flush(&mut self, row_block: u32) -> Vec<HaccEvent> {
        let keys: Vec<(u32, u32)> = self.held.range((row_block, 0)..=(row_block, u32::MAX)).map(|(k, _)| *k).collect();
        let mut events = Vec::with_capacity(keys.len());
        for key in keys {
            let ev = self.held.remove(&key).expect("listed key");
            let value = self.pad.flush_tag(key.1).expect("held HACC has a completed line");
            self.stats.evicted += 1;
            self.writeback.push_back(Eviction { tag: key.1, value });
            events.push(ev);
        }
        events
    }

    pub fn writeback_len(&self) -> usize {
        self.writeback.len()
    }

    pub fn peek_writeback(&self) -> Option<&Eviction> {
        self.writeback.front()
    }

    pub fn pop_writeback(&mut self) -> Option<Eviction> {
        self.writeback.pop_front()
    }

    pub fn is_quiet(&self) -> bool {
        self.ingress.iter().all(VecDeque::is_empty) && self.probes.iter().all(Option::is_none) && self.writeback.is_empty()
    }

    pub fn stats(&self) -> &MemStats {
        &self.stats
    }
}
