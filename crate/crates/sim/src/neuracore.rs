//! Cycle model of the in-order multiply engine.
//!
//! An accepted `MMH` waits in the instruction buffer until a pipeline and
//! enough registers are free. It then decodes, has its operand lines fetched
//! by the shared address generators, multiplies on the shared multipliers and
//! finally emits its `HACC`s, one per port per cycle. Each pipeline moves at
//! most one stage per cycle.

use std::collections::VecDeque;

use neurachip_core::compiler::{expand_mmh, CompiledWorkload};
use neurachip_core::isa::HaccInstruction;
use neurachip_core::mapping::MappingPolicy;
use serde::Serialize;

use crate::config::{registers_needed, TileConfig};
use crate::memsys::owner_of;
use crate::noc::Noc;
use crate::packet::{Endpoint, Payload};

/// An instruction handed to a core by the dispatcher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dispatched {
    pub index: u32,
    /// Output row block, as seen by the mapping policy.
    pub row_block: u32,
    pub dispatched: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    Decode,
    FetchWait,
    Execute,
    Emit,
}

#[derive(Debug, Clone)]
struct Context {
    d: Dispatched,
    seq: u32,
    stage: Stage,
    /// Decode finishes at this cycle.
    ready_at: u64,
    lines: Vec<u64>,
    next_line: usize,
    outstanding: u32,
    products_left: u32,
    haccs: Vec<HaccInstruction>,
    emitted: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineState {
    occupant: Option<Context>,
}

impl PipelineState {
    pub fn stage(&self, cycle: u64) -> Option<Stage> {
        self.occupant.as_ref().map(|c| {
            if c.stage == Stage::FetchWait && cycle < c.ready_at {
                Stage::Decode
            } else {
                c.stage
            }
        })
    }
}

/// Shared read-only state a core needs for one tick.
pub struct CoreCtx<'a> {
    pub cycle: u64,
    pub workload: &'a CompiledWorkload,
    pub policy: &'a MappingPolicy,
    pub noc: &'a Noc,
}

/// A packet the core wants injected on `port`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outgoing {
    pub port: u32,
    pub dst: Endpoint,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default)]
pub struct CoreTick {
    pub out: Vec<Outgoing>,
    /// CPI of instructions that emitted their last HACC this cycle.
    pub mmh_cpi: Vec<u64>,
    pub progressed: bool,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct CoreStats {
    pub accepted: u64,
    pub completed: u64,
    pub products: u64,
    pub haccs: u64,
    pub read_requests: u64,
    pub register_stalls: u64,
    pub busy_cycles: u64,
    pub stall_cycles: u64,
    pub idle_cycles: u64,
}

#[derive(Debug, Clone)]
pub struct NeuraCore {
    pub id: u32,
    instr_buffer: VecDeque<Dispatched>,
    buffer_cap: usize,
    pipelines: Vec<PipelineState>,
    rr_cursor: usize,
    ag_cursor: usize,
    occupied: usize,
    regs_free: u32,
    regs_per_instr: u32,
    multipliers: u32,
    addr_generators: u32,
    ports: u32,
    decode_latency: u64,
    line_bytes: u64,
    tiles: u32,
    next_seq: u32,
    /// HACCs sent to each NeuraMem.
    heat: Vec<u64>,
    stats: CoreStats,
    last: CoreTick,
}

impl NeuraCore {
    pub fn new(id: u32, cfg: &TileConfig) -> Self {
        Self {
            id,
            instr_buffer: VecDeque::with_capacity(cfg.instr_buffer as usize),
            buffer_cap: cfg.instr_buffer as usize,
            pipelines: vec![PipelineState::default(); cfg.pipelines as usize],
            rr_cursor: 0,
            ag_cursor: 0,
            occupied: 0,
            regs_free: cfg.register_pool(),
            regs_per_instr: registers_needed(cfg.mmh_width),
            multipliers: cfg.multipliers,
            addr_generators: cfg.addr_generators,
            ports: cfg.ports,
            decode_latency: cfg.decode_latency as u64,
            line_bytes: cfg.line_bytes as u64,
            tiles: cfg.tiles,
            next_seq: 0,
            heat: vec![0; cfg.total_mems() as usize],
            stats: CoreStats::default(),
            last: CoreTick::default(),
        }
    }

    /// Queues an instruction; `false` when the buffer is full.
    pub fn accept(&mut self, d: Dispatched) -> bool {
        if self.instr_buffer.len() >= self.buffer_cap {
            return false;
        }
        self.instr_buffer.push_back(d);
        self.stats.accepted += 1;
        true
    }

    pub fn buffer_len(&self) -> usize {
        self.instr_buffer.len()
    }

    pub fn buffer_full(&self) -> bool {
        self.instr_buffer.len() >= self.buffer_cap
    }

    pub fn occupied_pipelines(&self) -> usize {
        self.occupied
    }

    pub fn pipelines(&self) -> &[PipelineState] {
        &self.pipelines
    }

    pub fn is_idle(&self) -> bool {
        self.instr_buffer.is_empty() && self.occupied_pipelines() == 0
    }

    pub fn heat(&self) -> &[u64] {
        &self.heat
    }

    pub fn stats(&self) -> &CoreStats {
        &self.stats
    }

    /// Delivers one operand line to the pipeline that asked for it.
    pub fn deliver(&mut self, pipe: u8, seq: u32, line_addr: u64) -> Result<(), String> {
        let ctx = self
            .pipelines
            .get_mut(pipe as usize)
            .and_then(|p| p.occupant.as_mut())
            .filter(|c| c.seq == seq && c.stage == Stage::FetchWait && c.outstanding > 0)
            .ok_or_else(|| format!("core {}: unexpected response for line {line_addr:#x} (pipe {pipe}, seq {seq})", self.id))?;
        ctx.outstanding -= 1;
        Ok(())
    }

    /// Distinct lines touched by the instruction's four operand ranges.
    fn operand_lines(&self, ranges: [(u32, u32); 4]) -> Vec<u64> {
        let mut lines: Vec<u64> = ranges
            .iter()
            .filter(|(_, len)| *len > 0)
            .flat_map(|&(addr, len)| {
                let first = addr as u64 / self.line_bytes;
                let last = (addr as u64 + len as u64 - 1) / self.line_bytes;
                (first..=last).map(|l| l * self.line_bytes)
            })
            .collect();
        lines.sort_unstable();
        lines.dedup();
        lines
    }

    /// Outputs of the most recent [`tick`](Self::tick).
    pub fn last_tick(&self) -> &CoreTick {
        &self.last
    }

    /// Advances one cycle; the outputs are left in [`last_tick`](Self::last_tick).
    pub fn tick(&mut self, ctx: &CoreCtx<'_>) -> Result<(), String> {
        let mut out = std::mem::take(&mut self.last);
        out.out.clear();
        out.mmh_cpi.clear();
        out.progressed = false;
        if self.is_idle() {
            self.stats.idle_cycles += 1;
            self.last = out;
            return Ok(());
        }
        let r = self.tick_into(ctx, &mut out);
        self.last = out;
        r
    }

    fn tick_into(&mut self, ctx: &CoreCtx<'_>, out: &mut CoreTick) -> Result<(), String> {
        let cycle = ctx.cycle;
        let me = Endpoint::Core(self.id);
        // One new packet per port per cycle, if the egress queue has room.
        let mut port_load = [None::<u32>; 8];
        for (p, slot) in port_load.iter_mut().enumerate().take(self.ports as usize) {
            if ctx.noc.egress_free(me, p as u32) > 0 {
                *slot = Some(ctx.noc.egress_len(me, p as u32));
            }
        }
        let mut take_port = || -> Option<u32> {
            let (p, _) = port_load
                .iter()
                .enumerate()
                .filter_map(|(p, l)| l.map(|l| (p, l)))
                .min_by_key(|&(p, l)| (l, p))?;
            port_load[p] = None;
            Some(p as u32)
        };
        let n = self.pipelines.len();
        let start = (cycle % n as u64) as usize;
        let rotate = |from: usize| (from..n).chain(0..from);

        // Emit, oldest stage first so finished work drains.
        for i in rotate(start) {
            let Some(c) = self.pipelines[i].occupant.as_mut() else { continue };
            if c.stage != Stage::Emit {
                continue;
            }
            while c.emitted < c.haccs.len() {
                let Some(port) = take_port() else { break };
                let h = c.haccs[c.emitted];
                let target = ctx.policy.lookup(h.tag, c.d.row_block as usize).map_err(|e| e.to_string())?;
                out.out.push(Outgoing {
                    port,
                    dst: Endpoint::Mem(target),
                    payload: Payload::Hacc {
                        hacc: h,
                        row_block: c.d.row_block,
                        created: cycle,
                        core: self.id,
                    },
                });
                self.heat[target as usize] += 1;
                c.emitted += 1;
                out.progressed = true;
            }
            if c.emitted == c.haccs.len() {
                out.mmh_cpi.push(cycle - c.d.dispatched);
                self.stats.haccs += c.haccs.len() as u64;
                self.stats.completed += 1;
                self.pipelines[i].occupant = None;
                self.occupied -= 1;
                self.regs_free += self.regs_per_instr;
            }
        }

        // Execute on the shared multipliers.
        let mut mults = self.multipliers;
        for i in rotate(start) {
            let Some(c) = self.pipelines[i].occupant.as_mut() else { continue };
            if c.stage != Stage::Execute || mults == 0 {
                continue;
            }
            let used = c.products_left.min(mults);
            mults -= used;
            c.products_left -= used;
            self.stats.products += used as u64;
            out.progressed = true;
            if c.products_left == 0 {
                c.stage = Stage::Emit;
            }
        }

        // Fetch: wait for operands, otherwise generate line requests.
        for i in rotate(start) {
            let Some(c) = self.pipelines[i].occupant.as_mut() else { continue };
            if c.stage == Stage::FetchWait
                && cycle >= c.ready_at
                && c.next_line == c.lines.len()
                && c.outstanding == 0
            {
                c.stage = Stage::Execute;
                out.progressed = true;
            }
        }
        let mut gens = self.addr_generators;
        for i in rotate(self.ag_cursor) {
            if gens == 0 {
                break;
            }
            let Some(c) = self.pipelines[i].occupant.as_mut() else { continue };
            if c.stage != Stage::FetchWait || cycle < c.ready_at || c.next_line == c.lines.len() {
                continue;
            }
            let Some(port) = take_port() else { break };
            let line_addr = c.lines[c.next_line];
            out.out.push(Outgoing {
                port,
                dst: Endpoint::Mc(owner_of(line_addr, self.line_bytes as u32, self.tiles)),
                payload: Payload::ReadReq {
                    line_addr,
                    pipe: i as u8,
                    seq: c.seq,
                },
            });
            c.next_line += 1;
            c.outstanding += 1;
            self.stats.read_requests += 1;
            gens -= 1;
            self.ag_cursor = if i + 1 == n { 0 } else { i + 1 };
            out.progressed = true;
        }

        // Allocate the buffer head to the next free pipeline, round-robin.
        if let Some(&d) = self.instr_buffer.front() {
            let free = if self.occupied == n {
                None
            } else {
                rotate(self.rr_cursor).find(|&i| self.pipelines[i].occupant.is_none())
            };
            match free {
                Some(i) if self.regs_free >= self.regs_per_instr => {
                    self.instr_buffer.pop_front();
                    self.regs_free -= self.regs_per_instr;
                    let m = &ctx.workload.instructions[d.index as usize];
                    let haccs = expand_mmh(&ctx.workload.image, m, ctx.workload.out_cols as u32)
                        .map_err(|e| format!("core {}: instruction {}: {e}", self.id, d.index))?;
                    let seq = self.next_seq;
                    self.next_seq = self.next_seq.wrapping_add(1);
                    self.pipelines[i].occupant = Some(Context {
                        d,
                        seq,
                        stage: Stage::FetchWait,
                        ready_at: cycle + self.decode_latency,
                        lines: self.operand_lines(m.operand_ranges()),
                        next_line: 0,
                        outstanding: 0,
                        products_left: haccs.len() as u32,
                        haccs,
                        emitted: 0,
                    });
                    self.rr_cursor = if i + 1 == n { 0 } else { i + 1 };
                    self.occupied += 1;
                    out.progressed = true;
                }
                Some(_) => self.stats.register_stalls += 1,
                None => {}
            }
        }

        if out.progressed {
            self.stats.busy_cycles += 1;
        } else {
            self.stats.stall_cycles += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurachip_core::mapping::MappingKind;
    use neurachip_core::sparse::{Layout, SparseMatrix};
    use neurachip_core::compiler::compile_spgemm;

    struct Rig {
        cfg: TileConfig,
        noc: Noc,
        policy: MappingPolicy,
        w: CompiledWorkload,
    }

    fn rig(a: &[Vec<f64>], b: &[Vec<f64>]) -> Rig {
        let cfg = TileConfig::tile16();
        let a = SparseMatrix::from_dense(a, Layout::Csc);
        let b = SparseMatrix::from_dense(b, Layout::Csr);
        let w = compile_spgemm(&a, &b).unwrap();
        let policy = MappingPolicy::new(MappingKind::Ring, cfg.total_mems(), 16, 1).unwrap();
        Rig {
            noc: Noc::new(&cfg),
            cfg,
            policy,
            w,
        }
    }

    /// Ticks the core alone, answering every read `latency` cycles later.
    fn drive(r: &Rig, core: &mut NeuraCore, latency: u64, cycles: u64) -> Vec<(u64, CoreTick)> {
        let mut pending: Vec<(u64, u8, u32, u64)> = Vec::new();
        let mut log = Vec::new();
        for cycle in 0..cycles {
            for &(due, pipe, seq, line) in pending.iter().filter(|p| p.0 == cycle) {
                let _ = due;
                core.deliver(pipe, seq, line).unwrap();
            }
            let ctx = CoreCtx {
                cycle,
                workload: &r.w,
                policy: &r.policy,
                noc: &r.noc,
            };
            core.tick(&ctx).unwrap();
            let t = core.last_tick().clone();
            for o in &t.out {
                if let Payload::ReadReq { line_addr, pipe, seq } = o.payload {
                    pending.push((cycle + latency, pipe, seq, line_addr));
                }
            }
            log.push((cycle, t));
        }
        log
    }

    fn dense(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| (i * n + j + 1) as f64).collect()).collect()
    }

    #[test]
    fn buffer_accepts_until_full() {
        let cfg = TileConfig::tile16();
        let mut c = NeuraCore::new(0, &cfg);
        let d = Dispatched {
            index: 0,
            row_block: 0,
            dispatched: 0,
        };
        for _ in 0..cfg.instr_buffer {
            assert!(c.accept(d));
        }
        assert!(!c.accept(d));
        assert_eq!(c.buffer_len(), 4);
    }

    #[test]
    fn pipelines_assigned_round_robin() {
        let r = rig(&dense(8), &dense(8));
        let mut c = NeuraCore::new(0, &r.cfg);
        for index in 0..2 {
            c.accept(Dispatched {
                index,
                row_block: 0,
                dispatched: 0,
            });
        }
        drive(&r, &mut c, 10, 2);
        assert_eq!(c.pipelines()[0].occupant.as_ref().unwrap().d.index, 0);
        assert_eq!(c.pipelines()[1].occupant.as_ref().unwrap().d.index, 1);
    }

    #[test]
    fn full_instruction_emits_over_four_cycles() {
        let r = rig(&dense(4), &dense(4));
        let mut c = NeuraCore::new(0, &r.cfg);
        c.accept(Dispatched {
            index: 0,
            row_block: 0,
            dispatched: 0,
        });
        let log = drive(&r, &mut c, 5, 60);
        let emits: Vec<(u64, usize)> = log
            .iter()
            .map(|(cy, t)| (*cy, t.out.iter().filter(|o| matches!(o.payload, Payload::Hacc { .. })).count()))
            .filter(|&(_, k)| k > 0)
            .collect();
        assert_eq!(emits.len(), 4);
        assert!(emits.iter().all(|&(_, k)| k == 4));
        assert_eq!(emits[3].0 - emits[0].0, 3);
        assert_eq!(c.stats().haccs, 16);
    }

    #[test]
    fn single_lane_instruction() {
        let r = rig(&[vec![3.0]], &[vec![5.0]]);
        let mut c = NeuraCore::new(0, &r.cfg);
        c.accept(Dispatched {
            index: 0,
            row_block: 0,
            dispatched: 0,
        });
        let log = drive(&r, &mut c, 5, 40);
        let haccs: Vec<HaccInstruction> = log
            .iter()
            .flat_map(|(_, t)| t.out.iter())
            .filter_map(|o| match o.payload {
                Payload::Hacc { hacc, .. } => Some(hacc),
                _ => None,
            })
            .collect();
        assert_eq!(haccs.len(), 1);
        assert_eq!(haccs[0].data, 15.0);
        assert_eq!(haccs[0].counter, 0);
    }

    #[test]
    fn first_hacc_waits_for_decode_memory_and_execute() {
        for latency in [1, 7, 30] {
            let r = rig(&dense(4), &dense(4));
            let mut c = NeuraCore::new(0, &r.cfg);
            c.accept(Dispatched {
                index: 0,
                row_block: 0,
                dispatched: 0,
            });
            let log = drive(&r, &mut c, latency, 200);
            let first = log
                .iter()
                .find(|(_, t)| t.out.iter().any(|o| matches!(o.payload, Payload::Hacc { .. })))
                .unwrap()
                .0;
            assert!(first >= 1 + latency + 1, "latency {latency}: first HACC at {first}");
            let cpi = log.iter().flat_map(|(_, t)| t.mmh_cpi.iter()).copied().next().unwrap();
            assert_eq!(cpi, first + 3);
        }
    }

    #[test]
    fn cycle_accounting_adds_up() {
        let r = rig(&dense(8), &dense(8));
        let mut c = NeuraCore::new(0, &r.cfg);
        for index in 0..4 {
            c.accept(Dispatched {
                index,
                row_block: 0,
                dispatched: 0,
            });
        }
        drive(&r, &mut c, 12, 300);
        let s = c.stats();
        assert_eq!(s.busy_cycles + s.stall_cycles + s.idle_cycles, 300);
        assert_eq!(s.completed, 4);
        assert!(c.is_idle());
    }

    #[test]
    fn stray_response_is_rejected() {
        let cfg = TileConfig::tile16();
        let mut c = NeuraCore::new(0, &cfg);
        assert!(c.deliver(0, 0, 0).is_err());
    }
}
