//! Cell-grouped code layout and the lookup-table scan over it.
//!
//! Codes are stored grouped by coarse center so the coarse table entry is
//! read once per cell. Cells are visited in decreasing order of an upper
//! bound on their scores and the scan stops once no remaining cell can beat
//! the current `m`-th score, so the result equals a full scan. Scores are
//! summed in the same order as [`adc_score`](super::adc_score), so both agree
//! bitwise.

use super::LookupTables;
use crate::topk::TopK;

#[derive(Debug, Clone, PartialEq)]
pub(super) struct ScanLayout {
    /// Original ids in scan order.
    order: Vec<u32>,
    /// `(vq code, start, end)` ranges into `order`.
    cells: Vec<(u16, usize, usize)>,
    /// PQ codes in scan order, `n x subspaces`.
    codes: Vec<u8>,
    subspaces: usize,
}

impl ScanLayout {
    pub(super) fn new(vq_codes: &[u16], pq_codes: &[u8], subspaces: usize) -> Self {
        let mut order: Vec<u32> = (0..vq_codes.len() as u32).collect();
        order.sort_by_key(|&i| (vq_codes[i as usize], i));
        let mut cells = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let v = vq_codes[order[start] as usize];
            let mut end = start;
            while end < order.len() && vq_codes[order[end] as usize] == v {
                end += 1;
            }
            cells.push((v, start, end));
            start = end;
        }
        let mut codes = Vec::with_capacity(pq_codes.len());
        for &i in &order {
            let i = i as usize;
            codes.extend_from_slice(&pq_codes[i * subspaces..(i + 1) * subspaces]);
        }
        ScanLayout {
            order,
            cells,
            codes,
            subspaces,
        }
    }

    /// Scans every code and keeps the best `m` `(id, score)` pairs.
    pub(super) fn scan(&self, tables: &LookupTables, bias: Option<&[f32]>, m: usize) -> Vec<(u32, f32)> {
        let mut top = TopK::new(m);
        let padded = padded_tables(tables, self.subspaces);
        let plan = self.plan(tables, bias);
        match self.subspaces {
            1 => self.kernel::<1>(tables, &padded, &plan, bias, &mut top),
            2 => self.kernel::<2>(tables, &padded, &plan, bias, &mut top),
            4 => self.kernel::<4>(tables, &padded, &plan, bias, &mut top),
            8 => self.kernel::<8>(tables, &padded, &plan, bias, &mut top),
            16 => self.kernel::<16>(tables, &padded, &plan, bias, &mut top),
            32 => self.kernel::<32>(tables, &padded, &plan, bias, &mut top),
            _ => self.kernel_dyn(tables, &padded, &plan, bias, &mut top),
        }
        top.into_sorted()
    }

    /// Cells with their score upper bounds, best first.
    fn plan(&self, tables: &LookupTables, bias: Option<&[f32]>) -> Vec<(f32, usize)> {
        let p = tables.pq_size;
        let (pq_max, pq_abs) = tables.pq.chunks_exact(p).fold((0.0f32, 0.0f32), |(m, a), t| {
            let hi = t.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let abs = t.iter().map(|v| v.abs()).fold(0.0f32, f32::max);
            (m + hi, a + abs)
        });
        let mut plan: Vec<(f32, usize)> = self
            .cells
            .iter()
            .enumerate()
            .map(|(c, &(v, start, end))| {
                let base = tables.vq[v as usize];
                let (b_max, b_abs) = match bias {
                    Some(b) => self.order[start..end].iter().fold((f32::NEG_INFINITY, 0.0f32), |(m, a), &i| {
                        let x = tables.alpha * b[i as usize];
                        (m.max(x), a.max(x.abs()))
                    }),
                    None => (0.0, 0.0),
                };
                // Slack covers rounding in the f32 sums.
                let slack = 1e-5 * (base.abs() + pq_abs + b_abs + 1.0);
                (base + pq_max + b_max + slack, c)
            })
            .collect();
        plan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        plan
    }

    fn kernel<const K: usize>(
        &self,
        tables: &LookupTables,
        pq: &[[f32; 256]],
        plan: &[(f32, usize)],
        bias: Option<&[f32]>,
        top: &mut TopK,
    ) {
        let pq: &[[f32; 256]; K] = pq.try_into().expect("one table per subspace");
        let alpha = tables.alpha;
        let mut thr = f32::NEG_INFINITY;
        for &(bound, cell) in plan {
            if bound < thr {
                break;
            }
            let (v, start, end) = self.cells[cell];
            let base = tables.vq[v as usize];
            let codes = &self.codes[start * K..end * K];
            for (j, c) in codes.chunks_exact(K).enumerate() {
                let c: &[u8; K] = c.try_into().expect("chunk of K codes");
                let mut s = base;
                for k in 0..K {
                    s += pq[k][c[k] as usize];
                }
                let id = self.order[start + j];
                if let Some(b) = bias {
                    s += alpha * b[id as usize];
                }
                if s >= thr {
                    top.push(id, s);
                    thr = top.threshold().unwrap_or(f32::NEG_INFINITY);
                }
            }
        }
    }

    fn kernel_dyn(
        &self,
        tables: &LookupTables,
        pq: &[[f32; 256]],
        plan: &[(f32, usize)],
        bias: Option<&[f32]>,
        top: &mut TopK,
    ) {
        let k_sub = self.subspaces;
        let alpha = tables.alpha;
        let mut thr = f32::NEG_INFINITY;
        for &(bound, cell) in plan {
            if bound < thr {
                break;
            }
            let (v, start, end) = self.cells[cell];
            let base = tables.vq[v as usize];
            for (j, c) in self.codes[start * k_sub..end * k_sub].chunks_exact(k_sub).enumerate() {
                let mut s = base;
                for (t, &code) in pq.iter().zip(c) {
                    s += t[code as usize];
                }
                let id = self.order[start + j];
                if let Some(b) = bias {
                    s += alpha * b[id as usize];
                }
                if s >= thr {
                    top.push(id, s);
                    thr = top.threshold().unwrap_or(f32::NEG_INFINITY);
                }
            }
        }
    }
}

fn padded_tables(tables: &LookupTables, subspaces: usize) -> Vec<[f32; 256]> {
    let p = tables.pq_size;
    (0..subspaces)
        .map(|k| {
            let mut t = [0.0f32; 256];
            t[..p].copy_from_slice(&tables.pq[k * p..(k + 1) * p]);
            t
        })
        .collect()
}
