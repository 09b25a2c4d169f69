//! Lowers SpGEMM and GCN layers into a memory image plus an `MMH` stream.
//!
//! Schedule: output rows are grouped into row blocks of `width` consecutive
//! rows. Inside a block, every column `k` of A with nonzeros in the block
//! forms one A-tile (its nonzeros in those rows, at most `width`), and row
//! `k` of B is walked in tiles of `width` columns. One `MMH` is emitted per
//! (A-tile, B-tile) pair. Blocks are emitted in ascending order so each
//! block is a contiguous instruction range and a reseed point for mapping.

mod image;
mod interp;

use std::collections::HashMap;

use thiserror::Error;

use crate::isa::{MmhInstruction, MmhWidth};
use crate::sparse::{oracle_spgemm, SparseError, SparseMatrix};

pub use image::{read_image, write_image, ImageError, ImageHeader, MemoryImage, Segment, SegmentRole, SEGMENT_ALIGN};
pub use interp::{expand_mmh, interpret, InterpretResult};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompileError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("output index space {rows} x {cols} does not fit in 32-bit tags")]
    TagSpace { rows: usize, cols: usize },
    #[error("output ({row}, {col}) receives {multiplicity} contributions; counters hold at most 65536")]
    CounterOverflow { row: usize, col: usize, multiplicity: u64 },
    #[error("workload inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompileOptions {
    pub width: MmhWidth,
    /// Base address of the image; must be 64-byte aligned.
    pub base_addr: u32,
}

impl Default for CompileOptions {
    fn default() -> Self {
        Self {
            width: MmhWidth::W4,
            base_addr: 0,
        }
    }
}

/// Contiguous instruction range of one row block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowBlock {
    /// Block index: output rows `id * width .. (id + 1) * width`.
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

impl RowBlock {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledWorkload {
    pub image: MemoryImage,
    pub instructions: Vec<MmhInstruction>,
    /// Instruction indices where a new row block begins.
    pub row_block_boundaries: Vec<usize>,
    pub row_blocks: Vec<RowBlock>,
    pub expected_pp_count: u64,
    pub expected_output_nnz: u64,
    pub out_rows: usize,
    pub out_cols: usize,
    pub width: MmhWidth,
}

impl CompiledWorkload {
    /// Tag of output element `(row, col)`.
    pub fn tag(&self, row: usize, col: usize) -> u32 {
        (row * self.out_cols + col) as u32
    }

    /// Inverse of [`tag`](Self::tag).
    pub fn coords(&self, tag: u32) -> (usize, usize) {
        let cols = self.out_cols.max(1);
        (tag as usize / cols, tag as usize % cols)
    }

    /// Number of row blocks in the output, including blocks without work.
    pub fn n_row_blocks(&self) -> usize {
        self.out_rows.div_ceil(self.width.lanes())
    }

    pub fn image_header(&self) -> ImageHeader {
        ImageHeader {
            out_rows: self.out_rows as u32,
            out_cols: self.out_cols as u32,
            width: self.width.lanes() as u8,
        }
    }

    /// Rebuilds a workload from its two on-disk artifacts, recomputing the
    /// derived fields from the stream and checking it against the image.
    pub fn from_parts(
        image: MemoryImage,
        instructions: Vec<MmhInstruction>,
        header: ImageHeader,
    ) -> Result<Self, CompileError> {
        let width = MmhWidth::from_lanes(header.width as u32)
            .map_err(|e| CompileError::Inconsistent(e.to_string()))?;
        let w = width.lanes();
        let mut row_blocks: Vec<RowBlock> = Vec::new();
        let mut pp = 0u64;
        let mut tags = std::collections::HashSet::new();
        for (idx, m) in instructions.iter().enumerate() {
            if m.width != width {
                return Err(CompileError::Inconsistent(format!("instruction {idx} has width {}", m.width)));
            }
            m.validate().map_err(|e| CompileError::Inconsistent(e.to_string()))?;
            let block = m.a_row_ids[0] as usize / w;
            match row_blocks.last_mut() {
                Some(rb) if rb.id == block => rb.end = idx + 1,
                Some(rb) if rb.id > block => {
                    return Err(CompileError::Inconsistent(format!("row blocks out of order at instruction {idx}")))
                }
                _ => row_blocks.push(RowBlock {
                    id: block,
                    start: idx,
                    end: idx + 1,
                }),
            }
            pp += m.hacc_count() as u64;
            for h in expand_mmh(&image, m, header.out_cols).map_err(CompileError::Image)? {
                tags.insert(h.tag);
            }
        }
        Ok(Self {
            image,
            row_block_boundaries: row_blocks.iter().map(|b| b.start).collect(),
            row_blocks,
            instructions,
            expected_pp_count: pp,
            expected_output_nnz: tags.len() as u64,
            out_rows: header.out_rows as usize,
            out_cols: header.out_cols as usize,
            width,
        })
    }
}

/// Number of contributions to every output element, keyed by tag.
fn multiplicities(a_csr: &SparseMatrix<f64>, b_csr: &SparseMatrix<f64>) -> HashMap<u32, u32> {
    let n_cols = b_csr.n_cols();
    let mut counts: HashMap<u32, u32> = HashMap::new();
    for r in 0..a_csr.n_rows() {
        for &k in a_csr.slice(r).0 {
            for &c in b_csr.slice(k).0 {
                *counts.entry((r * n_cols + c) as u32).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Compiles `a x b` with 4-wide tiles at address 0.
pub fn compile_spgemm(a: &SparseMatrix<f64>, b: &SparseMatrix<f64>) -> Result<CompiledWorkload, CompileError> {
    compile_spgemm_with(a, b, CompileOptions::default())
}

pub fn compile_spgemm_with(
    a: &SparseMatrix<f64>,
    b: &SparseMatrix<f64>,
    opts: CompileOptions,
) -> Result<CompiledWorkload, CompileError> {
    if a.n_cols() != b.n_rows() {
        return Err(SparseError::DimensionMismatch {
            left_cols: a.n_cols(),
            right_rows: b.n_rows(),
        }
        .into());
    }
    let (rows, cols) = (a.n_rows(), b.n_cols());
    if rows as u128 * cols as u128 >= 1u128 << 32 {
        return Err(CompileError::TagSpace { rows, cols });
    }
    let w = opts.width.lanes();
    let a_csr = a.to_csr();
    let b_csr = b.to_csr();
    let mult = multiplicities(&a_csr, &b_csr);
    if let Some((&tag, &m)) = mult.iter().filter(|(_, &m)| m > 65536).min_by_key(|(&t, _)| t) {
        return Err(CompileError::CounterOverflow {
            row: tag as usize / cols,
            col: tag as usize % cols,
            multiplicity: m as u64,
        });
    }

    // A reordered block-major: (row block, column, row). Each A-tile is a
    // contiguous run of this order.
    struct ATile {
        block: usize,
        k: usize,
        start: usize,
        rows: Vec<u32>,
    }
    let mut a_vals: Vec<f64> = Vec::with_capacity(a.nnz());
    let mut a_rows: Vec<u32> = Vec::with_capacity(a.nnz());
    let mut tiles: Vec<ATile> = Vec::new();
    for block in 0..rows.div_ceil(w) {
        let lo = block * w;
        let hi = (lo + w).min(rows);
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for r in lo..hi {
            let (idx, val) = a_csr.slice(r);
            entries.extend(idx.iter().zip(val).map(|(&k, &v)| (k, r, v)));
        }
        entries.sort_by_key(|&(k, r, _)| (k, r));
        for group in entries.chunk_by(|x, y| x.0 == y.0) {
            let start = a_vals.len();
            let k = group[0].0;
            // Skip columns whose B row is empty: they emit no products.
            if b_csr.slice_nnz(k) == 0 {
                continue;
            }
            let tile_rows: Vec<u32> = group.iter().map(|&(_, r, _)| r as u32).collect();
            for &(_, r, v) in group {
                a_vals.push(v);
                a_rows.push(r as u32);
            }
            tiles.push(ATile {
                block,
                k,
                start,
                rows: tile_rows,
            });
        }
    }

    // Instructions with segment-relative offsets; patched once the layout is
    // known.
    struct Pending {
        instr: MmhInstruction,
        block: usize,
        a_off: u32,
        b_off: u32,
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut counters: Vec<u16> = Vec::new();
    let b_offsets = b_csr.offsets();
    let b_cols = b_csr.minor_indices();
    for t in &tiles {
        let (qs, qe) = (b_offsets[t.k], b_offsets[t.k + 1]);
        let mut q = qs;
        while q < qe {
            let nb = (qe - q).min(w);
            let mut a_row_ids = [0u32; 8];
            a_row_ids[..t.rows.len()].copy_from_slice(&t.rows);
            let mut block_ctr = vec![0u16; w * w];
            for (i, &r) in t.rows.iter().enumerate() {
                for j in 0..nb {
                    let tag = (r as usize * cols + b_cols[q + j]) as u32;
                    block_ctr[i * w + j] = (mult[&tag] - 1) as u16;
                }
            }
            pending.push(Pending {
                instr: MmhInstruction {
                    width: opts.width,
                    base_addr: opts.base_addr,
                    a_data_addr: 0,
                    b_col_ind_addr: 0,
                    b_data_addr: 0,
                    roll_counter_addr: 0,
                    a_row_ids,
                    lane_mask_a: opts.width.full_mask() >> (w - t.rows.len()),
                    lane_mask_b: opts.width.full_mask() >> (w - nb),
                },
                block: t.block,
                a_off: t.start as u32,
                b_off: q as u32,
            });
            counters.extend_from_slice(&block_ctr);
            q += nb;
        }
    }

    let image = layout_memory(opts.base_addr, &a_vals, &a_rows, &b_csr, &counters)?;
    let rel = |role: SegmentRole| image.segment_base(role) - opts.base_addr;
    let (a_seg, bc_seg, bd_seg, ctr_seg) = (
        rel(SegmentRole::AData),
        rel(SegmentRole::BColInd),
        rel(SegmentRole::BData),
        rel(SegmentRole::Counters),
    );
    let ctr_stride = 2 * (w * w) as u32;
    let mut instructions = Vec::with_capacity(pending.len());
    let mut row_blocks: Vec<RowBlock> = Vec::new();
    let mut pp = 0u64;
    for (idx, p) in pending.into_iter().enumerate() {
        let block = p.block;
        match row_blocks.last_mut() {
            Some(rb) if rb.id == block => rb.end = idx + 1,
            _ => row_blocks.push(RowBlock {
                id: block,
                start: idx,
                end: idx + 1,
            }),
        }
        let mut m = p.instr;
        m.a_data_addr = a_seg + 8 * p.a_off;
        m.b_col_ind_addr = bc_seg + 4 * p.b_off;
        m.b_data_addr = bd_seg + 8 * p.b_off;
        m.roll_counter_addr = ctr_seg + ctr_stride * idx as u32;
        pp += m.hacc_count() as u64;
        instructions.push(m);
    }

    Ok(CompiledWorkload {
        image,
        row_block_boundaries: row_blocks.iter().map(|b| b.start).collect(),
        row_blocks,
        instructions,
        expected_pp_count: pp,
        expected_output_nnz: mult.len() as u64,
        out_rows: rows,
        out_cols: cols,
        width: opts.width,
    })
}

/// Places the five operand segments in ascending order from `base`, each
/// 64-byte aligned: A values (f64), A row ids (u32), B column indices (u32),
/// B values (f64), rolling counters (u16).
pub fn layout_memory(
    base: u32,
    a_values: &[f64],
    a_row_ids: &[u32],
    b: &SparseMatrix<f64>,
    counters: &[u16],
) -> Result<MemoryImage, ImageError> {
    let b = b.to_csr();
    let f64_bytes = |v: &[f64]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
    let b_cols: Vec<u8> = b.minor_indices().iter().flat_map(|&c| (c as u32).to_le_bytes()).collect();
    MemoryImage::layout(
        base,
        vec![
            (SegmentRole::AData, f64_bytes(a_values)),
            (SegmentRole::ARowIds, a_row_ids.iter().flat_map(|r| r.to_le_bytes()).collect()),
            (SegmentRole::BColInd, b_cols),
            (SegmentRole::BData, f64_bytes(b.values())),
            (SegmentRole::Counters, counters.iter().flat_map(|c| c.to_le_bytes()).collect()),
        ],
    )
}

/// Two chained workloads for one GCN layer `relu(A X W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnPlan {
    /// Computes `P = A X`.
    pub aggregate: CompiledWorkload,
    /// Computes `P W`, compiled from the reference `P`.
    pub combine: CompiledWorkload,
    /// Reference `P` the second stage was compiled from.
    pub p: SparseMatrix<f64>,
}

/// Lowers one GCN layer. The second stage is compiled from the reference
/// product `A X`; `relu` is applied by the driver after simulation.
pub fn compile_gcn_layer(
    a: &SparseMatrix<f64>,
    x: &SparseMatrix<f64>,
    w: &SparseMatrix<f64>,
    opts: CompileOptions,
) -> Result<GcnPlan, CompileError> {
    if x.n_cols() != w.n_rows() {
        return Err(SparseError::DimensionMismatch {
            left_cols: x.n_cols(),
            right_rows: w.n_rows(),
        }
        .into());
    }
    let aggregate = compile_spgemm_with(a, x, opts)?;
    let p = oracle_spgemm(a, x)?;
    let combine = compile_spgemm_with(&p.to_csc(), w, opts)?;
    Ok(GcnPlan { aggregate, combine, p })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::HaccInstruction;
    use crate::Layout;

    fn dense(n: usize, m: usize, f: impl Fn(usize, usize) -> f64) -> SparseMatrix<f64> {
        let rows: Vec<Vec<f64>> = (0..n).map(|r| (0..m).map(|c| f(r, c)).collect()).collect();
        SparseMatrix::from_dense(&rows, Layout::Csr)
    }

    fn haccs(w: &CompiledWorkload) -> Vec<HaccInstruction> {
        w.instructions
            .iter()
            .flat_map(|m| expand_mmh(&w.image, m, w.out_cols as u32).unwrap())
            .collect()
    }

    #[test]
    fn identity_pair() {
        let i = SparseMatrix::<f64>::identity(4, Layout::Csc);
        let w = compile_spgemm(&i, &i.to_csr()).unwrap();
        assert_eq!(w.instructions.len(), 4);
        for m in &w.instructions {
            assert_eq!((m.lane_mask_a, m.lane_mask_b), (1, 1));
        }
        let h = haccs(&w);
        assert_eq!(h.len(), 4);
        assert!(h.iter().all(|h| h.counter == 0 && h.data == 1.0));
        assert_eq!(w.expected_pp_count, 4);
        assert_eq!(w.expected_output_nnz, 4);
        assert_eq!(w.row_block_boundaries, vec![0]);
    }

    #[test]
    fn identity_image_size() {
        // A_DATA 4 x 8 = 32 -> 64; A_ROW_IDS 16 -> 64; B_COL_IND 16 -> 64;
        // B_DATA 32 -> 64; COUNTERS 4 x 16 x 2 = 128.
        let i = SparseMatrix::<f64>::identity(4, Layout::Csc);
        let w = compile_spgemm(&i, &i).unwrap();
        let bases: Vec<u32> = w.image.segments().iter().map(|s| s.base).collect();
        assert_eq!(bases, vec![0, 64, 128, 192, 256]);
        assert_eq!(w.image.total_size(), 384);
    }

    #[test]
    fn empty_matrices_give_five_empty_segments() {
        let z = SparseMatrix::<f64>::empty(3, 3, Layout::Csc);
        let w = compile_spgemm(&z, &z).unwrap();
        assert!(w.instructions.is_empty());
        assert_eq!(w.image.segments().len(), 5);
        assert!(w.image.segments().iter().all(|s| s.is_empty()));
        assert_eq!(w.image.total_size(), 0);
        assert!(w.row_blocks.is_empty());
    }

    #[test]
    fn hand_3x3_counters() {
        let a = dense(3, 3, |r, c| [[1.0, 0.0, 2.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]][r][c]);
        let b = dense(3, 3, |r, c| [[1.0, 1.0, 0.0], [0.0, 2.0, 0.0], [5.0, 0.0, 6.0]][r][c]);
        let w = compile_spgemm(&a.to_csc(), &b).unwrap();
        let h = haccs(&w);
        assert_eq!(h.len(), 7);
        assert_eq!(w.expected_pp_count, 7);
        assert_eq!(w.expected_output_nnz, 6);
        for x in &h {
            let expect = if x.tag == 0 { 1 } else { 0 };
            assert_eq!(x.counter, expect, "tag {}", x.tag);
        }
        assert_eq!(h.iter().filter(|x| x.tag == 0).count(), 2);
    }

    #[test]
    fn dense_8x8() {
        let a = dense(8, 8, |r, c| (r + c) as f64 + 1.0);
        let w = compile_spgemm(&a.to_csc(), &a).unwrap();
        assert_eq!(w.instructions.len(), 32);
        let h = haccs(&w);
        assert_eq!(h.len(), 512);
        assert!(h.iter().all(|x| x.counter == 7));
        assert_eq!(w.row_block_boundaries, vec![0, 16]);
        assert_eq!(w.n_row_blocks(), 2);
    }

    #[test]
    fn widths_change_tiling() {
        let a = dense(8, 8, |_, _| 1.0);
        for (width, count) in [(MmhWidth::W1, 512), (MmhWidth::W2, 128), (MmhWidth::W4, 32), (MmhWidth::W8, 8)] {
            let w = compile_spgemm_with(
                &a,
                &a,
                CompileOptions {
                    width,
                    base_addr: 0,
                },
            )
            .unwrap();
            assert_eq!(w.instructions.len(), count, "width {width}");
            assert_eq!(w.expected_pp_count, 512);
        }
    }

    #[test]
    fn dimension_and_tag_space_errors() {
        let a = SparseMatrix::<f64>::identity(2, Layout::Csc);
        let b = SparseMatrix::<f64>::identity(3, Layout::Csr);
        assert!(matches!(compile_spgemm(&a, &b).unwrap_err(), CompileError::Sparse(_)));
        let tall = SparseMatrix::<f64>::empty(1 << 16, 1, Layout::Csc);
        let wide = SparseMatrix::<f64>::empty(1, 1 << 16, Layout::Csr);
        assert_eq!(
            compile_spgemm(&tall, &wide).unwrap_err(),
            CompileError::TagSpace {
                rows: 1 << 16,
                cols: 1 << 16
            }
        );
    }

    #[test]
    fn counter_overflow_is_rejected() {
        let n = 65537;
        let a = SparseMatrix::from_triplets(1, n, Layout::Csc, (0..n).map(|k| (0, k, 1.0))).unwrap();
        let b = SparseMatrix::from_triplets(n, 1, Layout::Csr, (0..n).map(|k| (k, 0, 1.0))).unwrap();
        assert!(matches!(
            compile_spgemm(&a, &b).unwrap_err(),
            CompileError::CounterOverflow { multiplicity: 65537, .. }
        ));
    }

    #[test]
    fn base_address_offsets_everything() {
        let i = SparseMatrix::<f64>::identity(4, Layout::Csc);
        let opts = CompileOptions {
            base_addr: 0x1000,
            ..Default::default()
        };
        let w = compile_spgemm_with(&i, &i, opts).unwrap();
        assert_eq!(w.image.segments()[0].base, 0x1000);
        assert_eq!(w.instructions[0].a_lane_addr(0), 0x1000);
        assert_eq!(haccs(&w).len(), 4);
    }

    #[test]
    fn from_parts_recovers_derived_fields() {
        let a = dense(6, 5, |r, c| if (r + 2 * c) % 3 == 0 { (r * 5 + c) as f64 } else { 0.0 });
        let b = dense(5, 7, |r, c| if (r * c) % 2 == 1 { 1.0 + r as f64 } else { 0.0 });
        let w = compile_spgemm(&a, &b).unwrap();
        let back = CompiledWorkload::from_parts(w.image.clone(), w.instructions.clone(), w.image_header()).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn gcn_plan_chains_through_reference_product() {
        let a = dense(4, 4, |r, c| if r.abs_diff(c) == 1 { 1.0 } else { 0.0 });
        let x = SparseMatrix::identity(4, Layout::Csr);
        let plan = compile_gcn_layer(&a, &x, &x, CompileOptions::default()).unwrap();
        assert_eq!(plan.p, a);
        assert_eq!(plan.aggregate.expected_pp_count, 6);
        assert_eq!(plan.combine.expected_pp_count, 6);
    }
}
