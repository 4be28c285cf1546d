//! Small dense matrix kernels used by the layers.
//!
//! Every output element is accumulated in ascending `k` order starting from
//! its initial value, so results equal a textbook triple loop bit for bit.

const MR: usize = 4;
const NR: usize = 16;

/// `b` packed into `NR`-column panels, each `k x NR`, zero padded on the right.
fn pack_b(n: usize, k: usize, at: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let panels = n.div_ceil(NR);
    let mut out = vec![0.0; panels * k * NR];
    for p in 0..panels {
        let dst = &mut out[p * k * NR..(p + 1) * k * NR];
        let width = NR.min(n - p * NR);
        for kk in 0..k {
            for jj in 0..width {
                dst[kk * NR + jj] = at(kk, p * NR + jj);
            }
        }
    }
    out
}

#[inline(always)]
fn load_row(c: &[f64], at: usize, width: usize) -> [f64; NR] {
    let mut row = [0.0; NR];
    row[..width].copy_from_slice(&c[at..at + width]);
    row
}

#[inline(always)]
fn axpy(acc: &mut [f64; NR], s: f64, b: &[f64; NR]) {
    for jj in 0..NR {
        acc[jj] += s * b[jj];
    }
}

/// One `MR x NR` tile of `c`. Accumulators are separate locals so they stay in registers.
#[inline(always)]
fn tile4(ap: &[f64], panel: &[f64], c: &mut [f64], n: usize, i0: usize, j0: usize) {
    let width = NR.min(n - j0);
    let base = i0 * n + j0;
    let mut r0 = load_row(c, base, width);
    let mut r1 = load_row(c, base + n, width);
    let mut r2 = load_row(c, base + 2 * n, width);
    let mut r3 = load_row(c, base + 3 * n, width);
    for (av, bk) in ap.chunks_exact(MR).zip(panel.chunks_exact(NR)) {
        let bk: &[f64; NR] = bk.try_into().expect("NR wide");
        axpy(&mut r0, av[0], bk);
        axpy(&mut r1, av[1], bk);
        axpy(&mut r2, av[2], bk);
        axpy(&mut r3, av[3], bk);
    }
    for (r, row) in [r0, r1, r2, r3].iter().enumerate() {
        c[base + r * n..][..width].copy_from_slice(&row[..width]);
    }
}

/// Tile for the leftover rows; `ap` holds `rows` interleaved rows of `a`.
#[inline(always)]
fn tile_rows(rows: usize, ap: &[f64], panel: &[f64], c: &mut [f64], n: usize, i0: usize, j0: usize) {
    let width = NR.min(n - j0);
    for r in 0..rows {
        let base = (i0 + r) * n + j0;
        let mut acc = load_row(c, base, width);
        for (av, bk) in ap.chunks_exact(rows).zip(panel.chunks_exact(NR)) {
            axpy(&mut acc, av[r], bk.try_into().expect("NR wide"));
        }
        c[base..][..width].copy_from_slice(&acc[..width]);
    }
}

/// Depth of one pass over `k`; keeps a `KC x NR` panel slice resident in L1.
const KC: usize = 256;

/// `a(i, kk)` lives at `a[i * rs + kk * cs]`.
#[allow(clippy::too_many_arguments)]
fn gemm_packed(m: usize, n: usize, k: usize, a: &[f64], rs: usize, cs: usize, packed: &[f64], c: &mut [f64]) {
    // A packed into MR-row blocks, each k x rows.
    let mut ap = vec![0.0; m * k];
    let mut i0 = 0;
    while i0 < m {
        let rows = MR.min(m - i0);
        let dst = &mut ap[i0 * k..(i0 + rows) * k];
        for kk in 0..k {
            for r in 0..rows {
                dst[kk * rows + r] = a[(i0 + r) * rs + kk * cs];
            }
        }
        i0 += rows;
    }
    // Splitting k into passes keeps ascending order per output element.
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        let mut i0 = 0;
        while i0 < m {
            let rows = MR.min(m - i0);
            let block = &ap[i0 * k + k0 * rows..i0 * k + k1 * rows];
            for (p, panel) in packed.chunks_exact(k * NR).enumerate() {
                let panel = &panel[k0 * NR..k1 * NR];
                if rows == MR {
                    tile4(block, panel, c, n, i0, p * NR);
                } else {
                    tile_rows(rows, block, panel, c, n, i0, p * NR);
                }
            }
            i0 += rows;
        }
    }
}

fn prepare(m: usize, n: usize, k: usize, c: &mut [f64], accumulate: bool) -> bool {
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.fill(0.0);
    }
    m > 0 && n > 0 && k > 0
}

/// `c (m x n) = [c +] a (m x k) * b (k x n)`, all row-major.
pub fn gemm(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if !prepare(m, n, k, c, accumulate) {
        return;
    }
    let packed = pack_b(n, k, |kk, j| b[kk * n + j]);
    gemm_packed(m, n, k, a, k, 1, &packed, c);
}

/// Row-major transpose of a `rows x cols` matrix.
pub fn transpose(rows: usize, cols: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    const B: usize = 32;
    for i0 in (0..rows).step_by(B) {
        for j0 in (0..cols).step_by(B) {
            for i in i0..(i0 + B).min(rows) {
                for j in j0..(j0 + B).min(cols) {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    out
}

/// `c (m x n) = [c +] a (m x k) * b^T` where `b` is stored `n x k`.
pub fn gemm_bt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    if !prepare(m, n, k, c, accumulate) {
        return;
    }
    let packed = pack_b(n, k, |kk, j| b[j * k + kk]);
    gemm_packed(m, n, k, a, k, 1, &packed, c);
}

/// `c (m x n) = [c +] a^T * b` where `a` is stored `k x m`.
pub fn gemm_at(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    if !prepare(m, n, k, c, accumulate) {
        return;
    }
    let packed = pack_b(n, k, |kk, j| b[kk * n + j]);
    gemm_packed(m, n, k, a, 1, m, &packed, c);
}
