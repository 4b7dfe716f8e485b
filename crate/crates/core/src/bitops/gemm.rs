use ndarray::Array2;

use super::matrix::{tail_mask, BitMatrix, TriStateMatrix};
use crate::error::{shape_err, Result};

/// `a (r×n) · b (n×c)` over ±1 entries via xnor and popcount.
///
/// Each output is `2·popcount(xnor(row, col)) − n`, the integer dot product.
pub fn xnor_popcount_gemm(a: &BitMatrix, b: &BitMatrix) -> Result<Array2<i32>> {
    if a.cols() != b.rows() {
        return Err(shape_err(format!(
            "xnor gemm inner dims {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    xnor_popcount_gemm_nt(a, &b.transpose())
}

/// Same as [`xnor_popcount_gemm`] with the right operand given transposed
/// (`bt` is `c×n`), so both operands are read row-wise.
pub fn xnor_popcount_gemm_nt(a: &BitMatrix, bt: &BitMatrix) -> Result<Array2<i32>> {
    if a.cols() != bt.cols() {
        return Err(shape_err(format!(
            "xnor gemm inner dims {} vs {}",
            a.cols(),
            bt.cols()
        )));
    }
    let n = a.cols();
    let wpr = a.words_per_row();
    let tail = tail_mask(n);
    let mut out = Array2::<i32>::zeros((a.rows(), bt.rows()));
    if wpr == 0 {
        return Ok(out);
    }
    for i in 0..a.rows() {
        let ra = a.row_words(i);
        for j in 0..bt.rows() {
            let rb = bt.row_words(j);
            let mut count = 0u32;
            for w in 0..wpr - 1 {
                count += (!(ra[w] ^ rb[w])).count_ones();
            }
            count += (!(ra[wpr - 1] ^ rb[wpr - 1]) & tail).count_ones();
            out[[i, j]] = 2 * count as i32 - n as i32;
        }
    }
    Ok(out)
}

/// Skip-zero product of a `{0,1}` matrix `a (r×n)` with a `{-1,0,+1}` matrix
/// `v (n×c)`. Positions where either operand is zero are excluded from the
/// popcount: with `s = mask_a & mask_v`, `out = 2·popcount(s & sign_v) − popcount(s)`.
pub fn masked_gemm(a: &TriStateMatrix, v: &TriStateMatrix) -> Result<Array2<i32>> {
    if a.cols() != v.rows() {
        return Err(shape_err(format!(
            "masked gemm inner dims {}x{} · {}x{}",
            a.rows(),
            a.cols(),
            v.rows(),
            v.cols()
        )));
    }
    masked_gemm_nt(a, &v.transpose())
}

/// [`masked_gemm`] with the right operand given transposed (`vt` is `c×n`).
pub fn masked_gemm_nt(a: &TriStateMatrix, vt: &TriStateMatrix) -> Result<Array2<i32>> {
    if a.cols() != vt.cols() {
        return Err(shape_err(format!(
            "masked gemm inner dims {} vs {}",
            a.cols(),
            vt.cols()
        )));
    }
    if !a.is_indicator() {
        return Err(shape_err("left operand of masked gemm must hold {0,1} values"));
    }
    let wpr = a.cols().div_ceil(super::WORD_BITS);
    let mut out = Array2::<i32>::zeros((a.rows(), vt.rows()));
    for i in 0..a.rows() {
        let ma = a.mask_row(i);
        for j in 0..vt.rows() {
            let mv = vt.mask_row(j);
            let sv = vt.sign_row(j);
            let mut present = 0u32;
            let mut positive = 0u32;
            for w in 0..wpr {
                let s = ma[w] & mv[w];
                present += s.count_ones();
                positive += (s & sv[w]).count_ones();
            }
            out[[i, j]] = 2 * positive as i32 - present as i32;
        }
    }
    Ok(out)
}
