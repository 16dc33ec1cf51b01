//! Orthonormal 8x8 DCT-II and the zigzag scan.

use std::sync::OnceLock;

pub const N: usize = 8;

fn basis() -> &'static [[f64; N]; N] {
    static BASIS: OnceLock<[[f64; N]; N]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; N]; N];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / (2 * N) as f64).cos();
            }
        }
        b
    })
}

/// Forward 2D DCT-II of a row-major 8x8 block.
pub fn forward(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    // rows
    for y in 0..N {
        for u in 0..N {
            tmp[y * N + u] = (0..N).map(|x| b[u][x] * block[y * N + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..N {
        for v in 0..N {
            out[v * N + u] = (0..N).map(|y| b[v][y] * tmp[y * N + u]).sum();
        }
    }
    out
}

/// Inverse of [`forward`].
pub fn inverse(coeffs: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..N {
        for x in 0..N {
            tmp[v * N + x] = (0..N).map(|u| b[u][x] * coeffs[v * N + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..N {
        for x in 0..N {
            out[y * N + x] = (0..N).map(|v| b[v][y] * tmp[v * N + x]).sum();
        }
    }
    out
}

/// Row-major coefficient index for each zigzag position.
pub fn zigzag() -> &'static [usize; 64] {
    static ZIGZAG: OnceLock<[usize; 64]> = OnceLock::new();
    ZIGZAG.get_or_init(|| {
        let mut order = [0usize; 64];
        let mut i = 0;
        for s in 0..(2 * N - 1) {
            let range: Vec<usize> = (0..N).filter(|&r| s >= r && s - r < N).collect();
            // even diagonals run bottom-left to top-right
            let rows: Vec<usize> = if s % 2 == 0 { range.into_iter().rev().collect() } else { range };
            for r in rows {
                order[i] = r * N + (s - r);
                i += 1;
            }
        }
        order
    })
}
