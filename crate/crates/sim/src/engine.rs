//! Top-level cycle loop.
//!
//! Every cycle has two phases. In the first, routers plan their moves and
//! cores, mems and controllers tick, all from cycle-start state and each
//! touching only its own state, so they may run on several threads. In the
//! second, packet deliveries, injections and dispatch are committed
//! serially in (component, port) order. Results therefore do not depend on
//! the thread count.

use std::collections::{BTreeMap, VecDeque};

use neurachip_core::compiler::CompiledWorkload;
use neurachip_core::mapping::{MappingError, MappingPolicy};
use neurachip_core::sparse::{Layout, SparseError, SparseMatrix};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, EvictionMode, TileConfig};
use crate::dispatch::{pick_core, Dispatcher};
use crate::memsys::{owner_of, Footprint, McError, MemoryController, ReadRequest, WriteRequest};
use crate::metrics::{Histogram, MetricsReport, TraceSample};
use crate::neuracore::{CoreCtx, Dispatched, NeuraCore};
use crate::neuramem::{NeuraMem, PendingHacc};
use crate::noc::{EjectCap, Noc};
use crate::packet::{Endpoint, Payload};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Memory(#[from] McError),
    #[error("no progress for {idle} cycles at cycle {cycle} (deadlock); {state}")]
    Watchdog { cycle: u64, idle: u64, state: String },
    #[error("integrity violation: {0}")]
    Integrity(String),
    #[error("could not start worker threads: {0}")]
    Threads(String),
}

impl From<SparseError> for SimError {
    fn from(e: SparseError) -> Self {
        SimError::Integrity(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Seeds the mapping policy; nothing else is random.
    pub seed: u64,
    /// Worker threads for phase one; 1 runs everything on the caller.
    pub threads: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed: 1, threads: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub output: SparseMatrix<f64>,
    pub metrics: MetricsReport,
    pub trace: Vec<TraceSample>,
}

/// Output-region base: first 64-byte boundary past the image.
pub fn output_base(w: &CompiledWorkload) -> u64 {
    let end = w.image.base() as u64 + w.image.total_size() as u64;
    end.div_ceil(64) * 64
}

struct Chip<'a> {
    cfg: &'a TileConfig,
    w: &'a CompiledWorkload,
    noc: Noc,
    cores: Vec<NeuraCore>,
    mems: Vec<NeuraMem>,
    mcs: Vec<MemoryController>,
    /// Read responses waiting for an egress port, per controller.
    mc_out: Vec<VecDeque<ReadRequest>>,
    policy: MappingPolicy,
    dispatcher: Dispatcher,
    out_base: u64,
    output: BTreeMap<u32, f64>,
    mmh_cpi: Histogram,
    hacc_cpi: Histogram,
    haccs_emitted: u64,
    haccs_executed: u64,
    sum_hacc_data: f64,
    occupancy_sum: u128,
    inflight_sum: u128,
    peak_total: u64,
    trace: Vec<TraceSample>,
}

impl<'a> Chip<'a> {
    fn new(w: &'a CompiledWorkload, cfg: &'a TileConfig, seed: u64) -> Result<Self, SimError> {
        let out_base = output_base(w);
        let footprint = Footprint {
            image_base: w.image.base() as u64,
            image_end: w.image.base() as u64 + w.image.total_size() as u64,
            out_base,
            out_end: out_base + 8 * (w.out_rows as u64 * w.out_cols as u64),
        };
        let mut per_block = vec![0u64; w.row_blocks.len()];
        for (pos, b) in w.row_blocks.iter().enumerate() {
            per_block[pos] = w.instructions[b.start..b.end].iter().map(|m| m.hacc_count() as u64).sum();
        }
        Ok(Self {
            cfg,
            w,
            noc: Noc::new(cfg),
            cores: (0..cfg.total_cores()).map(|i| NeuraCore::new(i, cfg)).collect(),
            mems: (0..cfg.total_mems()).map(|i| NeuraMem::new(i, cfg)).collect(),
            mcs: (0..cfg.tiles).map(|t| MemoryController::new(t, cfg, footprint)).collect(),
            mc_out: vec![VecDeque::new(); cfg.tiles as usize],
            policy: MappingPolicy::new(cfg.mapping, cfg.total_mems(), cfg.drhm_k, seed)?,
            dispatcher: Dispatcher::new(&w.row_blocks, per_block, w.n_row_blocks(), cfg.max_open_row_blocks),
            out_base,
            output: BTreeMap::new(),
            mmh_cpi: Histogram::default(),
            hacc_cpi: Histogram::default(),
            haccs_emitted: 0,
            haccs_executed: 0,
            sum_hacc_data: 0.0,
            occupancy_sum: 0,
            inflight_sum: 0,
            peak_total: 0,
            trace: Vec::new(),
        })
    }

    fn eject_caps(&self) -> Vec<EjectCap> {
        let ports = self.cfg.ports;
        let mut caps = Vec::with_capacity(self.noc.n_endpoints());
        caps.extend(self.cores.iter().map(|_| EjectCap {
            total: ports,
            data: ports,
            writes: 0,
        }));
        caps.extend(self.mems.iter().map(|m| EjectCap {
            total: ports,
            data: m.ingress_free().min(ports),
            writes: 0,
        }));
        caps.extend(self.mcs.iter().map(|mc| EjectCap {
            total: ports,
            data: (mc.read_free() as u32).min(ports),
            writes: (mc.write_free() as u32).min(ports),
        }));
        caps
    }

    fn commit_deliveries(&mut self, cycle: u64, delivered: Vec<crate::packet::Packet>) -> Result<(), SimError> {
        for p in delivered {
            match (p.dst, p.payload) {
                (Endpoint::Core(c), Payload::ReadResp { line_addr, pipe, seq }) => {
                    self.cores[c as usize].deliver(pipe, seq, line_addr).map_err(SimError::Integrity)?;
                }
                (Endpoint::Mem(m), Payload::Hacc {
                    hacc,
                    row_block,
                    created,
                    core,
                }) => self.mems[m as usize].receive(PendingHacc {
                    hacc,
                    row_block,
                    created,
                    arrived: cycle,
                    core,
                }),
                (Endpoint::Mc(t), Payload::ReadReq { line_addr, pipe, seq }) => {
                    let req = ReadRequest {
                        from: p.src,
                        line_addr,
                        pipe,
                        seq,
                    };
                    if !self.mcs[t as usize].submit_read(req)? {
                        return Err(SimError::Integrity(format!("controller {t} read buffer overflow")));
                    }
                }
                (Endpoint::Mc(t), Payload::Write { addr, tag, value }) => {
                    if !self.mcs[t as usize].submit_write(WriteRequest { addr, tag, value })? {
                        return Err(SimError::Integrity(format!("controller {t} write buffer overflow")));
                    }
                }
                (dst, payload) => {
                    return Err(SimError::Integrity(format!("{:?} packet delivered to {dst:?}", payload.kind())));
                }
            }
        }
        Ok(())
    }

    fn land_write(&mut self, wr: WriteRequest) -> Result<(), SimError> {
        let expected = self.out_base + 8 * wr.tag as u64;
        if wr.addr != expected {
            return Err(SimError::Integrity(format!("tag {} written at {:#x}, expected {expected:#x}", wr.tag, wr.addr)));
        }
        if self.output.insert(wr.tag, wr.value).is_some() {
            let (r, c) = self.w.coords(wr.tag);
            return Err(SimError::Integrity(format!("duplicate write of output ({r}, {c})")));
        }
        Ok(())
    }

    fn inject_outputs(&mut self, cycle: u64) -> Result<(), SimError> {
        for (c, core) in self.cores.iter().enumerate() {
            let t = core.last_tick();
            for &cpi in &t.mmh_cpi {
                self.mmh_cpi.record(cpi);
            }
            for &o in &t.out {
                if let Payload::Hacc { hacc, .. } = o.payload {
                    self.haccs_emitted += 1;
                    self.sum_hacc_data += hacc.data;
                }
                let p = self.noc.packet(Endpoint::Core(c as u32), o.dst, o.payload, cycle);
                self.noc
                    .inject(o.port, p)
                    .map_err(|_| SimError::Integrity(format!("core {c} egress port {} overflow", o.port)))?;
            }
        }
        let (line, tiles) = (self.cfg.line_bytes, self.cfg.tiles);
        for m in 0..self.mems.len() {
            let src = Endpoint::Mem(m as u32);
            for port in 0..self.cfg.ports {
                if self.noc.egress_free(src, port) == 0 {
                    continue;
                }
                let Some(ev) = self.mems[m].pop_writeback() else { break };
                let addr = self.out_base + 8 * ev.tag as u64;
                let payload = Payload::Write {
                    addr,
                    tag: ev.tag,
                    value: ev.value,
                };
                let p = self.noc.packet(src, Endpoint::Mc(owner_of(addr, line, tiles)), payload, cycle);
                self.noc.inject(port, p).expect("checked free slot");
            }
        }
        for t in 0..self.mcs.len() {
            let src = Endpoint::Mc(t as u32);
            for port in 0..self.cfg.ports {
                if self.noc.egress_free(src, port) == 0 {
                    continue;
                }
                let Some(r) = self.mc_out[t].pop_front() else { break };
                let payload = Payload::ReadResp {
                    line_addr: r.line_addr,
                    pipe: r.pipe,
                    seq: r.seq,
                };
                let p = self.noc.packet(src, r.from, payload, cycle);
                self.noc.inject(port, p).expect("checked free slot");
            }
        }
        Ok(())
    }

    /// Barrier for a drained row block across every pad.
    fn flush_block(&mut self, row_block: u32, cycle: u64) {
        for m in self.mems.iter_mut() {
            for ev in m.flush(row_block) {
                self.hacc_cpi.record(cycle - ev.created);
            }
        }
    }

    fn dispatch(&mut self, cycle: u64) -> bool {
        let mut progressed = false;
        if self.dispatcher.retire() > 0 {
            progressed = true;
        }
        for _ in 0..self.cfg.dispatch_width {
            let Some((index, block_id)) = self.dispatcher.peek() else { break };
            let Some(core) = pick_core(&self.cores) else { break };
            if self.cfg.mapping.is_drhm() {
                // Seeds are drawn block by block as the first instruction of
                // each block issues.
                self.policy.ensure_seeds(block_id + 1);
            }
            let accepted = self.cores[core].accept(Dispatched {
                index: index as u32,
                row_block: block_id as u32,
                dispatched: cycle,
            });
            debug_assert!(accepted);
            self.dispatcher.advance();
            progressed = true;
        }
        progressed
    }

    /// Where work is stuck, for watchdog reports.
    fn describe(&self) -> String {
        let cores = self.cores.iter().filter(|c| !c.is_idle()).count();
        let mems = self.mems.iter().filter(|m| !m.is_quiet()).count();
        let mcs = self.mcs.iter().filter(|m| !m.is_idle()).count();
        format!(
            "{} packets in the network ({}), {cores} cores busy, {mems} mems busy, {mcs} controllers busy, oldest open row block {}",
            self.noc.in_flight(),
            self.noc.describe(8),
            self.dispatcher.oldest_open()
        )
    }

    fn quiescent(&self) -> bool {
        self.dispatcher.finished()
            && self.noc.is_empty()
            && self.cores.iter().all(NeuraCore::is_idle)
            && self.mems.iter().all(NeuraMem::is_quiet)
            && self.mcs.iter().all(MemoryController::is_idle)
            && self.mc_out.iter().all(VecDeque::is_empty)
    }

    fn step(&mut self, cycle: u64, parallel: bool) -> Result<bool, SimError> {
        // Phase one.
        let caps = self.eject_caps();
        let moves = self.noc.plan(cycle, &caps, parallel);
        let ctx = CoreCtx {
            cycle,
            workload: self.w,
            policy: &self.policy,
            noc: &self.noc,
        };
        if parallel {
            self.cores.par_iter_mut().try_for_each(|c| c.tick(&ctx))
        } else {
            self.cores.iter_mut().try_for_each(|c| c.tick(&ctx))
        }
        .map_err(SimError::Integrity)?;
        if parallel {
            self.mems.par_iter_mut().for_each(|m| {
                m.tick();
            });
        } else {
            for m in self.mems.iter_mut() {
                m.tick();
            }
        }
        let mc_outs: Vec<_> = self.mcs.iter_mut().map(|mc| mc.tick(cycle)).collect();

        // Phase two.
        let mut progressed = !moves.is_empty();
        let delivered = self.noc.apply(&moves, cycle);
        self.commit_deliveries(cycle, delivered)?;
        let mut drained = Vec::new();
        for m in &self.mems {
            let t = m.last_tick();
            progressed |= t.progressed;
            for &ev in &t.done {
                self.haccs_executed += 1;
                if self.dispatcher.hacc_done(ev.row_block).map_err(SimError::Integrity)? {
                    drained.push(ev.row_block);
                }
                if !ev.deferred {
                    self.hacc_cpi.record(cycle - ev.created);
                }
            }
        }
        if self.cfg.eviction == EvictionMode::Barrier {
            for b in drained {
                self.flush_block(b, cycle);
            }
        }
        for (t, out) in mc_outs.into_iter().enumerate() {
            progressed |= !out.responses.is_empty() || !out.writes.is_empty();
            self.mc_out[t].extend(out.responses);
            for wr in out.writes {
                self.land_write(wr)?;
            }
        }
        progressed |= self.cores.iter().any(|c| c.last_tick().progressed);
        self.inject_outputs(cycle)?;
        progressed |= self.dispatch(cycle);

        let occupancy: u64 = self.mems.iter().map(|m| m.pad().occupancy() as u64).sum();
        let inflight: u64 = self.mcs.iter().map(|mc| mc.inflight() as u64).sum();
        self.occupancy_sum += occupancy as u128;
        self.inflight_sum += inflight as u128;
        self.peak_total = self.peak_total.max(occupancy);
        if cycle % self.cfg.trace_interval == 0 {
            self.trace.push(TraceSample {
                cycle,
                hashpad_occupancy: occupancy,
                mc_inflight: inflight,
                noc_in_flight: self.noc.in_flight(),
            });
        }
        if self.noc.stats().injected != self.noc.stats().delivered + self.noc.in_flight() {
            return Err(SimError::Integrity("network lost a packet".into()));
        }
        Ok(progressed)
    }

    fn finish(self, total_cycles: u64, seed: u64) -> Result<RunResult, SimError> {
        let w = self.w;
        let cfg = self.cfg;
        for m in &self.mems {
            let left = m.pad().occupancy();
            if left > 0 {
                return Err(SimError::Integrity(format!(
                    "mem {} ended with {left} lines never evicted ({} incomplete)",
                    m.id,
                    m.pad().incomplete()
                )));
            }
        }
        let received: u64 = self.mems.iter().map(|m| m.stats().received).sum();
        let evictions: u64 = self.mems.iter().map(|m| m.stats().evicted).sum();
        if self.haccs_emitted != w.expected_pp_count || received != self.haccs_emitted {
            return Err(SimError::Integrity(format!(
                "HACC conservation: expected {}, emitted {}, received {received}",
                w.expected_pp_count, self.haccs_emitted
            )));
        }
        if evictions != w.expected_output_nnz || self.output.len() as u64 != evictions {
            return Err(SimError::Integrity(format!(
                "eviction count: expected {}, evicted {evictions}, written {}",
                w.expected_output_nnz,
                self.output.len()
            )));
        }
        let sum_evicted: f64 = self.output.values().sum();
        let triplets = self.output.iter().map(|(&tag, &v)| {
            let (r, c) = w.coords(tag);
            (r, c, v)
        });
        let output = SparseMatrix::from_triplets(w.out_rows, w.out_cols, Layout::Csr, triplets)?;

        let heatmap: Vec<Vec<u64>> = self.cores.iter().map(|c| c.heat().to_vec()).collect();
        let cycles_f = total_cycles.max(1) as f64;
        let metrics = MetricsReport {
            preset: cfg.name.clone(),
            mmh_width: w.width.lanes() as u32,
            eviction: cfg.eviction.to_string(),
            mapping: cfg.mapping.to_string(),
            seed,
            total_cycles,
            frequency_ghz: cfg.frequency_ghz,
            gops: 2.0 * w.expected_pp_count as f64 * cfg.frequency_ghz / cycles_f,
            expected_pp_count: w.expected_pp_count,
            expected_output_nnz: w.expected_output_nnz,
            mmh_dispatched: self.dispatcher.issued,
            haccs_emitted: self.haccs_emitted,
            haccs_received: received,
            haccs_executed: self.haccs_executed,
            evictions,
            writes_landed: self.output.len() as u64,
            sum_hacc_data: self.sum_hacc_data,
            sum_evicted,
            mmh_cpi: self.mmh_cpi,
            hacc_cpi: self.hacc_cpi,
            peak_occupancy: self.mems.iter().map(|m| m.pad().peak_occupancy() as u64).max().unwrap_or(0),
            peak_total_occupancy: self.peak_total,
            mean_occupancy: self.occupancy_sum as f64 / cycles_f,
            mean_mc_inflight: self.inflight_sum as f64 / cycles_f,
            cores: self.cores.iter().map(|c| c.stats().clone()).collect(),
            mems: self.mems.iter().map(|m| m.stats().clone()).collect(),
            controllers: self.mcs.iter().map(|mc| mc.stats().clone()).collect(),
            noc: self.noc.stats().clone(),
            router_forwarded: self.noc.forwarded(),
            heatmap,
        };
        Ok(RunResult {
            output,
            metrics,
            trace: self.trace,
        })
    }
}

fn run_inner(w: &CompiledWorkload, cfg: &TileConfig, opts: &RunOptions) -> Result<RunResult, SimError> {
    if w.width != cfg.mmh_width {
        return Err(SimError::Config(ConfigError::Invalid {
            field: "mmh_width".into(),
            message: format!("workload compiled for MMH{} but config says MMH{}", w.width, cfg.mmh_width),
        }));
    }
    let parallel = opts.threads > 1;
    let mut chip = Chip::new(w, cfg, opts.seed)?;
    let mut cycle = 0u64;
    let mut last_progress = 0u64;
    while !chip.quiescent() {
        if chip.step(cycle, parallel)? {
            last_progress = cycle;
        } else if cycle - last_progress >= cfg.watchdog_cycles {
            return Err(SimError::Watchdog {
                cycle,
                idle: cycle - last_progress,
                state: chip.describe(),
            });
        }
        cycle += 1;
    }
    chip.finish(cycle, opts.seed)
}

/// Simulates `w` on `cfg` until every output has been written back.
pub fn run(w: &CompiledWorkload, cfg: &TileConfig, opts: &RunOptions) -> Result<RunResult, SimError> {
    cfg.validate()?;
    if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.threads)
            .build()
            .map_err(|e| SimError::Threads(e.to_string()))?;
        pool.install(|| run_inner(w, cfg, opts))
    } else {
        run_inner(w, cfg, opts)
    }
}
