//! 2D-torus interconnect with minimal adaptive routing.
//!
//! Each router has one bounded input buffer per direction of travel plus the
//! egress port queues of the components attached to it. A hop that enters a
//! ring (injection or a turn) needs two free downstream slots, a hop that
//! keeps going straight needs one; the spare slot is the bubble that keeps
//! each ring from filling up and deadlocking. Routing decisions read only
//! cycle-start occupancy, so routers can be planned in any order or in
//! parallel and then committed.
//!
//! Without virtual channels, packets turning between X and Y rings can wait
//! on each other in a cycle. A packet that has waited [`ESCAPE_AFTER`]
//! cycles for a turn may therefore keep going round its current ring. Every
//! ring keeps at least one free slot, so ring traffic always moves and the
//! wait cycle breaks.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::TileConfig;
use crate::packet::{Dir, Endpoint, Packet, PacketKind, Payload};

/// Cycles a packet may wait at the head of a ring buffer for a turn before
/// it is allowed to continue straight, off its minimal path.
pub const ESCAPE_AFTER: u64 = 16;

/// Attached components handled without allocating while planning.
const MAX_ATTACHED: usize = 8;

/// Splits `n` into `(wide, tall)` with `tall` the largest divisor not above
/// `sqrt(n)`.
pub fn grid_dims(n: u32) -> (u32, u32) {
    let mut tall = 1;
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            tall = d;
        }
        d += 1;
    }
    (n / tall, tall)
}

/// Per-cycle ejection allowance of one endpoint.
#[derive(Debug, Clone, Copy, Default)]
pub struct EjectCap {
    /// Total packets the endpoint takes this cycle (one per port).
    pub total: u32,
    /// Reads, read responses and HACCs.
    pub data: u32,
    /// Output writes.
    pub writes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveTo {
    Hop(Dir),
    Eject,
}

/// One planned packet movement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Move {
    pub router: u32,
    /// `0..4` direction buffers, then local queues.
    pub input: u16,
    pub to: MoveTo,
    /// Non-minimal hop taken to escape a blocked turn.
    pub escape: bool,
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct NocStats {
    pub injected: u64,
    pub delivered: u64,
    pub hops: u64,
    pub latency_sum: u64,
    pub latency_max: u64,
    /// Deliveries faster than the minimal hop count allows. Always zero in
    /// a sound network.
    pub latency_violations: u64,
    /// Hops that did not reduce the distance to the destination.
    pub misroutes: u64,
}

#[derive(Debug, Clone)]
struct Router {
    inputs: [VecDeque<Packet>; 4],
    /// Egress queues of attached components, `ports` per component.
    locals: Vec<VecDeque<Packet>>,
    attached: Vec<Endpoint>,
    occupancy: u32,
    forwarded: u64,
}

#[derive(Debug, Clone)]
pub struct Noc {
    width: u32,
    height: u32,
    ports: u32,
    buffer_cap: u32,
    port_cap: u32,
    hop_latency: u32,
    n_cores: u32,
    n_mems: u32,
    routers: Vec<Router>,
    /// `(router, first local queue)` per flat endpoint index.
    slots: Vec<(u32, u32)>,
    stats: NocStats,
    in_flight: u64,
    /// Neighbor of each router in `Dir::ALL` order.
    nbr: Vec<[u32; 4]>,
    /// Minimal X step from column a to column b at `a * width + b`.
    step_x: Vec<Option<Dir>>,
    step_y: Vec<Option<Dir>>,
    /// `(x, y)` of each router.
    xy: Vec<(u32, u32)>,
    /// Largest local queue count on any router.
    max_local: usize,
}

impl Noc {
    pub fn new(cfg: &TileConfig) -> Self {
        let (tiles_x, tiles_y) = grid_dims(cfg.tiles);
        let (tw, th) = grid_dims(cfg.routers_per_tile);
        let width = tiles_x * tw;
        let height = tiles_y * th;
        let mut routers: Vec<Router> = (0..width * height)
            .map(|_| Router {
                inputs: Default::default(),
                locals: Vec::new(),
                attached: Vec::new(),
                occupancy: 0,
                forwarded: 0,
            })
            .collect();
        let n_cores = cfg.total_cores();
        let n_mems = cfg.total_mems();
        let mut slots = vec![(0, 0); (n_cores + n_mems + cfg.tiles) as usize];
        let mut noc_attach = |routers: &mut Vec<Router>, ep: Endpoint, flat: u32, router: u32| {
            let r = &mut routers[router as usize];
            slots[flat as usize] = (router, r.locals.len() as u32);
            r.attached.push(ep);
            for _ in 0..cfg.ports {
                r.locals.push(VecDeque::new());
            }
        };

        for tile in 0..cfg.tiles {
            let (ox, oy) = ((tile % tiles_x) * tw, (tile / tiles_x) * th);
            let local: Vec<u32> = (0..th)
                .flat_map(|ly| (0..tw).map(move |lx| (lx, ly)))
                .map(|(lx, ly)| (oy + ly) * width + ox + lx)
                .collect();
            // Checkerboard: cores on even-parity routers, mems on odd.
            let parity = |r: &u32| (r % width + r / width) % 2;
            let even: Vec<u32> = local.iter().copied().filter(|r| parity(r) == 0).collect();
            let odd: Vec<u32> = local.iter().copied().filter(|r| parity(r) == 1).collect();
            let odd = if odd.is_empty() { even.clone() } else { odd };
            for i in 0..cfg.cores_per_tile {
                let c = tile * cfg.cores_per_tile + i;
                noc_attach(&mut routers, Endpoint::Core(c), c, even[(i as usize) % even.len()]);
            }
            for j in 0..cfg.mems_per_tile {
                let m = tile * cfg.mems_per_tile + j;
                noc_attach(&mut routers, Endpoint::Mem(m), n_cores + m, odd[(j as usize) % odd.len()]);
            }
            noc_attach(&mut routers, Endpoint::Mc(tile), n_cores + n_mems + tile, local[0]);
        }

        let step = |n: u32, fwd: Dir, back: Dir| -> Vec<Option<Dir>> {
            (0..n * n)
                .map(|i| {
                    let (d, f) = Self::ring_dist(i / n, i % n, n);
                    (d > 0).then_some(if f { fwd } else { back })
                })
                .collect()
        };
        let step_x = step(width, Dir::East, Dir::West);
        let step_y = step(height, Dir::North, Dir::South);
        let nbr = (0..width * height)
            .map(|r| {
                let (x, y) = (r % width, r / width);
                [
                    y * width + (x + 1) % width,
                    y * width + (x + width - 1) % width,
                    (y + 1) % height * width + x,
                    (y + height - 1) % height * width + x,
                ]
            })
            .collect();
        let xy = (0..width * height).map(|r| (r % width, r / width)).collect();
        let max_local = routers.iter().map(|r| r.locals.len()).max().unwrap_or(0);
        Self {
            xy,
            max_local,
            nbr,
            step_x,
            step_y,
            width,
            height,
            ports: cfg.ports,
            buffer_cap: cfg.router_buffer,
            port_cap: cfg.port_buffer,
            hop_latency: cfg.hop_latency,
            n_cores,
            n_mems,
            routers,
            slots,
            stats: NocStats::default(),
            in_flight: 0,
        }
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn n_routers(&self) -> usize {
        self.routers.len()
    }

    pub fn flat(&self, ep: Endpoint) -> usize {
        match ep {
            Endpoint::Core(c) => c as usize,
            Endpoint::Mem(m) => (self.n_cores + m) as usize,
            Endpoint::Mc(t) => (self.n_cores + self.n_mems + t) as usize,
        }
    }

    pub fn n_endpoints(&self) -> usize {
        self.slots.len()
    }

    pub fn router_of(&self, ep: Endpoint) -> u32 {
        self.slots[self.flat(ep)].0
    }

    pub fn coords(&self, router: u32) -> (u32, u32) {
        self.xy[router as usize]
    }

    fn ring_dist(a: u32, b: u32, n: u32) -> (u32, bool) {
        // (distance, forward is minimal); ties go forward.
        let fwd = (b + n - a) % n;
        let back = (n - fwd) % n;
        if fwd <= back {
            (fwd, true)
        } else {
            (back, false)
        }
    }

    pub fn min_hops(&self, from: u32, to: u32) -> u32 {
        let (ax, ay) = self.coords(from);
        let (bx, by) = self.coords(to);
        Self::ring_dist(ax, bx, self.width).0 + Self::ring_dist(ay, by, self.height).0
    }

    /// Minimal next hops from `from` toward `to`, X first.
    pub fn productive(&self, from: u32, to: u32) -> ([Option<Dir>; 2], u32) {
        let (ax, ay) = self.coords(from);
        let (bx, by) = self.coords(to);
        let x = self.step_x[(ax * self.width + bx) as usize];
        let y = self.step_y[(ay * self.height + by) as usize];
        match (x, y) {
            (Some(_), _) => ([x, y], 1 + y.is_some() as u32),
            (None, Some(_)) => ([y, None], 1),
            _ => ([None, None], 0),
        }
    }

    pub fn neighbor(&self, router: u32, d: Dir) -> u32 {
        self.nbr[router as usize][d.index()]
    }

    /// Builds a packet addressed to `dst`, eligible to move from `cycle + 1`.
    pub fn packet(&self, src: Endpoint, dst: Endpoint, payload: Payload, cycle: u64) -> Packet {
        let (from, to) = (self.router_of(src), self.router_of(dst));
        Packet {
            src,
            dst,
            dst_router: to,
            payload,
            inject_cycle: cycle + 1,
            ready: cycle + 1,
            hops: 0,
            min_hops: self.min_hops(from, to) as u16,
            last_dir: None,
        }
    }

    pub fn egress_len(&self, ep: Endpoint, port: u32) -> u32 {
        let (r, base) = self.slots[self.flat(ep)];
        self.routers[r as usize].locals[(base + port) as usize].len() as u32
    }

    pub fn egress_free(&self, ep: Endpoint, port: u32) -> u32 {
        self.port_cap.saturating_sub(self.egress_len(ep, port))
    }

    /// Queues `p` on `port` of its source; hands it back if the queue is full.
    pub fn inject(&mut self, port: u32, p: Packet) -> Result<(), Packet> {
        let (r, base) = self.slots[self.flat(p.src)];
        let router = &mut self.routers[r as usize];
        let q = &mut router.locals[(base + port) as usize];
        if q.len() as u32 >= self.port_cap {
            return Err(p);
        }
        q.push_back(p);
        router.occupancy += 1;
        self.stats.injected += 1;
        self.in_flight += 1;
        Ok(())
    }

    fn input_len(&self, router: u32, d: Dir) -> u32 {
        self.routers[router as usize].inputs[d.index()].len() as u32
    }

    /// `rots[n]` is `cycle % n`, the local-queue rotation for `n` queues.
    fn plan_router(&self, r: u32, cycle: u64, rots: &[usize], caps: &[EjectCap], moves: &mut Vec<Move>) {
        let router = &self.routers[r as usize];
        let mut claimed = [false; 4];
        let mut inline = [EjectCap::default(); MAX_ATTACHED];
        let mut spilled = Vec::new();
        let budgets: &mut [EjectCap] = if router.attached.len() <= MAX_ATTACHED {
            &mut inline[..router.attached.len()]
        } else {
            spilled.resize(router.attached.len(), EjectCap::default());
            &mut spilled
        };
        for (b, &ep) in budgets.iter_mut().zip(&router.attached) {
            *b = caps[self.flat(ep)];
        }
        let n_local = router.locals.len();
        let rot4 = (cycle % 4) as usize;
        let rotl = rots[n_local];
        let order = (rot4..4)
            .chain(0..rot4)
            .chain((4 + rotl..4 + n_local).chain(4..4 + rotl));
        for input in order {
            let head = if input < 4 {
                router.inputs[input].front()
            } else {
                router.locals[input - 4].front()
            };
            let Some(p) = head else { continue };
            if p.ready > cycle {
                continue;
            }
            if p.dst_router == r {
                let slot = router
                    .attached
                    .iter()
                    .position(|&ep| ep == p.dst)
                    .expect("destination attached to its router");
                let b = &mut budgets[slot];
                let class = if p.kind() == PacketKind::MemWrite {
                    &mut b.writes
                } else {
                    &mut b.data
                };
                if b.total > 0 && *class > 0 {
                    b.total -= 1;
                    *class -= 1;
                    moves.push(Move {
                        router: r,
                        input: input as u16,
                        to: MoveTo::Eject,
                        escape: false,
                    });
                }
                continue;
            }
            let (cands, n) = self.productive(r, p.dst_router);
            let mut best: Option<(Dir, u32)> = None;
            let mut escape = false;
            for d in cands.iter().take(n as usize).flatten() {
                if claimed[d.index()] {
                    continue;
                }
                let free = self.buffer_cap - self.input_len(self.neighbor(r, *d), *d);
                let need = if p.last_dir == Some(*d) { 1 } else { 2 };
                if free >= need && best.is_none_or(|(_, f)| free > f) {
                    best = Some((*d, free));
                }
            }
            if best.is_none() && input < 4 && cycle - p.ready >= ESCAPE_AFTER {
                // Stuck at a turn: keep circling the current ring instead.
                let d = Dir::ALL[input];
                if !claimed[input] && self.input_len(self.neighbor(r, d), d) < self.buffer_cap {
                    best = Some((d, 0));
                    escape = true;
                }
            }
            if let Some((d, _)) = best {
                claimed[d.index()] = true;
                moves.push(Move {
                    router: r,
                    input: input as u16,
                    to: MoveTo::Hop(d),
                    escape,
                });
            }
        }
    }

    /// Plans every router's moves from cycle-start state.
    pub fn plan(&self, cycle: u64, caps: &[EjectCap], parallel: bool) -> Vec<Move> {
        let busy = |r: &u32| self.routers[*r as usize].occupancy > 0;
        let rots: Vec<usize> = (0..=self.max_local)
            .map(|n| if n == 0 { 0 } else { (cycle % n as u64) as usize })
            .collect();
        let rots = &rots[..];
        if parallel {
            (0..self.routers.len() as u32)
                .into_par_iter()
                .filter(busy)
                .flat_map_iter(|r| {
                    let mut moves = Vec::new();
                    self.plan_router(r, cycle, rots, caps, &mut moves);
                    moves
                })
                .collect()
        } else {
            let mut moves = Vec::new();
            for r in (0..self.routers.len() as u32).filter(busy) {
                self.plan_router(r, cycle, rots, caps, &mut moves);
            }
            moves
        }
    }

    /// Commits planned moves; returns ejected packets in move order.
    pub fn apply(&mut self, moves: &[Move], cycle: u64) -> Vec<Packet> {
        let mut delivered = Vec::new();
        for m in moves {
            let router = &mut self.routers[m.router as usize];
            let input = m.input as usize;
            let mut p = if input < 4 {
                router.inputs[input].pop_front()
            } else {
                router.locals[input - 4].pop_front()
            }
            .expect("planned move from a non-empty buffer");
            router.occupancy -= 1;
            match m.to {
                MoveTo::Hop(d) => {
                    router.forwarded += 1;
                    self.stats.misroutes += m.escape as u64;
                    p.hops += 1;
                    p.last_dir = Some(d);
                    p.ready = cycle + self.hop_latency as u64;
                    let next = self.neighbor(m.router, d);
                    let nr = &mut self.routers[next as usize];
                    nr.inputs[d.index()].push_back(p);
                    nr.occupancy += 1;
                    self.stats.hops += 1;
                }
                MoveTo::Eject => {
                    let latency = p.ready.saturating_sub(p.inject_cycle);
                    self.stats.delivered += 1;
                    self.stats.latency_sum += latency;
                    self.stats.latency_max = self.stats.latency_max.max(latency);
                    if latency < p.min_hops as u64 * self.hop_latency as u64 || p.hops < p.min_hops {
                        self.stats.latency_violations += 1;
                    }
                    self.in_flight -= 1;
                    delivered.push(p);
                }
            }
        }
        delivered
    }

    /// Packets injected but not yet delivered.
    pub fn in_flight(&self) -> u64 {
        self.in_flight
    }

    /// Recounts buffered packets; equals [`in_flight`](Self::in_flight) when
    /// nothing has been lost.
    pub fn buffered(&self) -> u64 {
        self.routers
            .iter()
            .map(|r| {
                r.inputs.iter().map(VecDeque::len).sum::<usize>() as u64
                    + r.locals.iter().map(VecDeque::len).sum::<usize>() as u64
            })
            .sum()
    }

    /// Head packets of the first `limit` non-empty routers.
    pub fn describe(&self, limit: usize) -> String {
        let mut parts = Vec::new();
        for (r, router) in self.routers.iter().enumerate().filter(|(_, r)| r.occupancy > 0).take(limit) {
            let heads: Vec<String> = router
                .inputs
                .iter()
                .chain(router.locals.iter())
                .filter_map(|q| q.front().map(|p| format!("{:?}->{}x{}", p.kind(), p.dst_router, q.len())))
                .collect();
            parts.push(format!("r{r}[{}]", heads.join(" ")));
        }
        parts.join(", ")
    }

    pub fn stats(&self) -> &NocStats {
        &self.stats
    }

    pub fn forwarded(&self) -> Vec<u64> {
        self.routers.iter().map(|r| r.forwarded).collect()
    }

    pub fn ports(&self) -> u32 {
        self.ports
    }

    pub fn is_empty(&self) -> bool {
        self.in_flight == 0
    }

    #[cfg(test)]
    fn fill_input(&mut self, router: u32, d: Dir, n: usize, template: &Packet) {
        let r = &mut self.routers[router as usize];
        for _ in 0..n {
            let mut p = template.clone();
            p.ready = u64::MAX;
            r.inputs[d.index()].push_back(p);
            r.occupancy += 1;
        }
    }
}
