//! Global instruction dispatcher with row-block gating.

use neurachip_core::compiler::RowBlock;

use crate::neuracore::NeuraCore;

/// Core that should receive the next instruction: the emptiest buffer, then
/// the fewest busy pipelines, then the lowest index. `None` if every buffer
/// is full.
pub fn pick_core(cores: &[NeuraCore]) -> Option<usize> {
    cores
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.buffer_full())
        .min_by_key(|(i, c)| (c.buffer_len(), c.occupied_pipelines(), *i))
        .map(|(i, _)| i)
}

/// Tracks which row blocks may issue and when they have fully drained.
/// Up to `max_open` blocks, counted from the oldest undrained one, issue at
/// once.
#[derive(Debug, Clone)]
pub struct Dispatcher {
    blocks: Vec<RowBlock>,
    /// HACCs of each block not yet executed by a NeuraMem.
    remaining: Vec<u64>,
    next_instr: usize,
    /// Block of `next_instr`.
    next_block: usize,
    /// First block with HACCs still outstanding.
    oldest_open: usize,
    max_open: usize,
    /// Position of a row block id in `blocks`.
    block_pos: Vec<u32>,
    pub issued: u64,
}

impl Dispatcher {
    pub fn new(blocks: &[RowBlock], haccs_per_block: Vec<u64>, n_row_blocks: usize, max_open: u32) -> Self {
        let mut block_pos = vec![u32::MAX; n_row_blocks.max(blocks.last().map_or(0, |b| b.id + 1))];
        for (pos, b) in blocks.iter().enumerate() {
            block_pos[b.id] = pos as u32;
        }
        Self {
            blocks: blocks.to_vec(),
            remaining: haccs_per_block,
            next_instr: blocks.first().map_or(0, |b| b.start),
            next_block: 0,
            oldest_open: 0,
            max_open: max_open.max(1) as usize,
            block_pos,
            issued: 0,
        }
    }

    /// Next instruction and its row block id, if gating allows it.
    pub fn peek(&self) -> Option<(usize, usize)> {
        let b = self.blocks.get(self.next_block)?;
        (self.next_block < self.oldest_open + self.max_open).then_some((self.next_instr, b.id))
    }

    /// Marks the peeked instruction issued.
    pub fn advance(&mut self) {
        self.issued += 1;
        self.next_instr += 1;
        if self.next_instr == self.blocks[self.next_block].end {
            self.next_block += 1;
            if let Some(b) = self.blocks.get(self.next_block) {
                self.next_instr = b.start;
            }
        }
    }

    /// Records an executed HACC of row block `id`; `true` once the block has
    /// executed all of them.
    pub fn hacc_done(&mut self, id: u32) -> Result<bool, String> {
        let pos = *self.block_pos.get(id as usize).filter(|&&p| p != u32::MAX).ok_or_else(|| format!("HACC from unknown row block {id}"))?;
        let r = &mut self.remaining[pos as usize];
        *r = r.checked_sub(1).ok_or_else(|| format!("row block {id} executed more HACCs than it issued"))?;
        Ok(*r == 0)
    }

    /// Retires fully drained blocks in order; returns how many retired.
    pub fn retire(&mut self) -> usize {
        let mut n = 0;
        while self.oldest_open < self.blocks.len()
            && self.oldest_open < self.next_block
            && self.remaining[self.oldest_open] == 0
        {
            self.oldest_open += 1;
            n += 1;
        }
        n
    }

    pub fn all_issued(&self) -> bool {
        self.next_block >= self.blocks.len()
    }

    pub fn finished(&self) -> bool {
        self.oldest_open >= self.blocks.len()
    }

    pub fn oldest_open(&self) -> usize {
        self.oldest_open
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TileConfig;
    use crate::neuracore::Dispatched;

    fn d() -> Dispatched {
        Dispatched {
            index: 0,
            row_block: 0,
            dispatched: 0,
        }
    }

    #[test]
    fn ties_go_to_core_zero() {
        let cfg = TileConfig::tile4();
        let cores: Vec<NeuraCore> = (0..4).map(|i| NeuraCore::new(i, &cfg)).collect();
        assert_eq!(pick_core(&cores), Some(0));
    }

    #[test]
    fn emptiest_core_wins() {
        let cfg = TileConfig::tile4();
        let mut cores: Vec<NeuraCore> = (0..4).map(|i| NeuraCore::new(i, &cfg)).collect();
        for (i, load) in [2, 3, 1, 2].into_iter().enumerate() {
            for _ in 0..load {
                cores[i].accept(d());
            }
        }
        assert_eq!(pick_core(&cores), Some(2));
        for c in cores.iter_mut() {
            while c.accept(d()) {}
        }
        assert_eq!(pick_core(&cores), None);
    }

    fn blocks() -> Vec<RowBlock> {
        vec![
            RowBlock { id: 0, start: 0, end: 2 },
            RowBlock { id: 2, start: 2, end: 3 },
        ]
    }

    #[test]
    fn window_of_one_gates_on_previous_block() {
        let mut dp = Dispatcher::new(&blocks(), vec![3, 1], 3, 1);
        assert_eq!(dp.peek(), Some((0, 0)));
        dp.advance();
        dp.advance();
        assert_eq!(dp.peek(), None);
        assert_eq!(dp.hacc_done(0), Ok(false));
        assert_eq!(dp.hacc_done(0), Ok(false));
        assert_eq!(dp.hacc_done(0), Ok(true));
        assert_eq!(dp.retire(), 1);
        assert_eq!(dp.peek(), Some((2, 2)));
        dp.advance();
        assert!(dp.all_issued());
        assert_eq!(dp.hacc_done(2), Ok(true));
        assert!(dp.hacc_done(2).is_err());
        assert_eq!(dp.retire(), 1);
        assert!(dp.finished());
    }

    #[test]
    fn wider_window_overlaps_blocks() {
        let mut dp = Dispatcher::new(&blocks(), vec![3, 1], 3, 4);
        dp.advance();
        dp.advance();
        assert_eq!(dp.peek(), Some((2, 2)));
        assert!(dp.hacc_done(1).is_err());
    }

    #[test]
    fn later_block_may_drain_first() {
        let mut dp = Dispatcher::new(&blocks(), vec![3, 1], 3, 4);
        for _ in 0..3 {
            dp.advance();
        }
        assert_eq!(dp.hacc_done(2), Ok(true));
        assert_eq!(dp.retire(), 0);
        for _ in 0..3 {
            dp.hacc_done(0).unwrap();
        }
        assert_eq!(dp.retire(), 2);
        assert!(dp.finished());
    }
}
