//! Functional, zero-latency replay of a compiled workload.

use std::collections::HashMap;

use super::{CompileError, CompiledWorkload, ImageError, MemoryImage};
use crate::isa::{HaccInstruction, MmhInstruction};
use crate::sparse::{Layout, SparseMatrix};

/// Expands one `MMH` into its `HACC`s, lane `i` outer and lane `j` inner,
/// reading operands from `image`. `tag_stride` is the output column count.
pub fn expand_mmh(
    image: &MemoryImage,
    m: &MmhInstruction,
    tag_stride: u32,
) -> Result<Vec<HaccInstruction>, ImageError> {
    let mut out = Vec::with_capacity(m.hacc_count());
    let b_lanes: Vec<(u32, f64)> = m
        .active_b()
        .map(|j| Ok((image.read_u32(m.b_col_lane_addr(j))?, image.read_f64(m.b_data_lane_addr(j))?)))
        .collect::<Result<_, ImageError>>()?;
    for i in m.active_a() {
        let a = image.read_f64(m.a_lane_addr(i))?;
        let row = m.a_row_ids[i];
        for (j, &(col, b)) in m.active_b().zip(&b_lanes) {
            out.push(HaccInstruction {
                tag: row.wrapping_mul(tag_stride).wrapping_add(col),
                data: a * b,
                counter: image.read_u16(m.counter_addr(i, j))?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpretResult {
    /// Evicted outputs as a CSR matrix.
    pub output: SparseMatrix<f64>,
    pub haccs: u64,
    pub evictions: u64,
}

/// Replays every instruction in order against an unbounded accumulator with
/// the rolling-counter rules: a new tag stores its counter, a hit adds and
/// decrements, and a counter of zero evicts.
pub fn interpret(w: &CompiledWorkload) -> Result<InterpretResult, CompileError> {
    let mut live: HashMap<u32, (f64, u16)> = HashMap::new();
    let mut evicted: Vec<(usize, usize, f64)> = Vec::with_capacity(w.expected_output_nnz as usize);
    let mut haccs = 0u64;
    for m in &w.instructions {
        for h in expand_mmh(&w.image, m, w.out_cols as u32)? {
            haccs += 1;
            let done = match live.get_mut(&h.tag) {
                None if h.counter == 0 => Some(h.data),
                None => {
                    live.insert(h.tag, (h.data, h.counter));
                    None
                }
                Some((data, counter)) => {
                    *data += h.data;
                    *counter -= 1;
                    (*counter == 0).then_some(*data)
                }
            };
            if let Some(value) = done {
                live.remove(&h.tag);
                let (r, c) = w.coords(h.tag);
                evicted.push((r, c, value));
            }
        }
    }
    if !live.is_empty() {
        return Err(CompileError::Inconsistent(format!(
            "{} outputs never reached a zero counter",
            live.len()
        )));
    }
    let evictions = evicted.len() as u64;
    let output = SparseMatrix::from_triplets(w.out_rows, w.out_cols, Layout::Csr, evicted)?;
    Ok(InterpretResult {
        output,
        haccs,
        evictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::compile_spgemm;
    use crate::sparse::oracle_spgemm;

    #[test]
    fn replay_matches_oracle_on_hand_example() {
        let a = SparseMatrix::from_dense(
            &[vec![1.0, 0.0, 2.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 4.0]],
            Layout::Csc,
        );
        let b = SparseMatrix::from_dense(
            &[vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 0.0], vec![5.0, 0.0, 6.0]],
            Layout::Csr,
        );
        let w = compile_spgemm(&a, &b).unwrap();
        let r = interpret(&w).unwrap();
        assert_eq!(r.output, oracle_spgemm(&a, &b).unwrap());
        assert_eq!((r.haccs, r.evictions), (7, 6));
    }

    #[test]
    fn corrupted_counter_is_detected() {
        let a = SparseMatrix::from_dense(&[vec![1.0, 1.0]], Layout::Csc);
        let b = SparseMatrix::from_dense(&[vec![2.0], vec![3.0]], Layout::Csr);
        let mut w = compile_spgemm(&a, &b).unwrap();
        // Both contributions carry counter 1; leaving only one instruction
        // strands the output in the accumulator.
        w.instructions.truncate(1);
        assert!(matches!(interpret(&w).unwrap_err(), CompileError::Inconsistent(_)));
    }
}
