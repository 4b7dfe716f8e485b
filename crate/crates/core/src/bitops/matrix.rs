use ndarray::Array2;

use crate::error::{shape_err, Error, Result};

pub const WORD_BITS: usize = 64;

#[inline]
pub(crate) fn words_for(cols: usize) -> usize {
    cols.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a row.
#[inline]
pub(crate) fn tail_mask(cols: usize) -> u64 {
    match cols % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Row-major packed ±1 matrix. Bit `1` encodes `+1`, bit `0` encodes `-1`;
/// bits are LSB-first within a word and each row's padding bits are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    /// All `-1` matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    /// Packs a dense matrix whose entries are exactly `-1.0` or `+1.0`.
    pub fn pack(dense: &Array2<f64>) -> Result<Self> {
        let (rows, cols) = dense.dim();
        let mut out = Self::zeros(rows, cols);
        for ((r, c), &v) in dense.indexed_iter() {
            if v == 1.0 {
                out.set(r, c, true);
            } else if v != -1.0 {
                return Err(Error::NotBinary {
                    row: r,
                    col: c,
                    value: v,
                });
            }
        }
        Ok(out)
    }

    /// Packs `x >= 0` as `+1` and `x < 0` as `-1` (the `sign` binarizer).
    pub fn from_signs(dense: &Array2<f64>) -> Self {
        let (rows, cols) = dense.dim();
        Self::from_fn(rows, cols, |r, c| dense[[r, c]] >= 0.0)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let row = &mut out.words[r * out.words_per_row..(r + 1) * out.words_per_row];
            for c in 0..cols {
                if f(r, c) {
                    row[c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
                }
            }
        }
        out
    }

    pub fn unpack(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            if self.get(r, c) {
                1.0
            } else {
                -1.0
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        (self.words[r * self.words_per_row + c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        let w = &mut self.words[r * self.words_per_row + c / WORD_BITS];
        let m = 1u64 << (c % WORD_BITS);
        if bit {
            *w |= m;
        } else {
            *w &= !m;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// True when every padding bit past `cols` is zero.
    pub fn padding_is_clean(&self) -> bool {
        let tail = tail_mask(self.cols);
        self.words_per_row == 0
            || (0..self.rows).all(|r| self.row_words(r)[self.words_per_row - 1] & !tail == 0)
    }
}

/// Values in `{-1, 0, +1}` stored as a presence mask plus sign bits.
///
/// Where the mask bit is `0` the value is `0` and the sign bit is kept at `0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriStateMatrix {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    sign_words: Vec<u64>,
    mask_words: Vec<u64>,
}

impl TriStateMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = words_for(cols);
        Self {
            rows,
            cols,
            words_per_row,
            sign_words: vec![0; rows * words_per_row],
            mask_words: vec![0; rows * words_per_row],
        }
    }

    /// Packs a dense matrix with entries in `{-1, 0, +1}`.
    pub fn from_dense(dense: &Array2<f64>) -> Result<Self> {
        let (rows, cols) = dense.dim();
        let mut out = Self::zeros(rows, cols);
        for ((r, c), &v) in dense.indexed_iter() {
            let value = if v == 1.0 {
                1
            } else if v == -1.0 {
                -1
            } else if v == 0.0 {
                0
            } else {
                return Err(Error::NotBinary {
                    row: r,
                    col: c,
                    value: v,
                });
            };
            out.set(r, c, value);
        }
        Ok(out)
    }

    /// Builds a tri-state matrix from a value function returning -1, 0 or 1.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> i8) -> Self {
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                if v != 0 {
                    out.set(r, c, v);
                }
            }
        }
        out
    }

    /// A `{0, 1}` matrix: value is the mask bit.
    pub fn from_indicator(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::from_fn(rows, cols, |r, c| i8::from(f(r, c)))
    }

    /// All-present tri-state view of a ±1 matrix.
    pub fn from_bits(bits: &BitMatrix) -> Self {
        let mut mask_words = vec![0u64; bits.words.len()];
        let tail = tail_mask(bits.cols);
        for r in 0..bits.rows {
            for w in 0..bits.words_per_row {
                mask_words[r * bits.words_per_row + w] =
                    if w + 1 == bits.words_per_row { tail } else { u64::MAX };
            }
        }
        Self {
            rows: bits.rows,
            cols: bits.cols,
            words_per_row: bits.words_per_row,
            sign_words: bits.words.clone(),
            mask_words,
        }
    }

    pub fn set(&mut self, r: usize, c: usize, value: i8) {
        let idx = r * self.words_per_row + c / WORD_BITS;
        let m = 1u64 << (c % WORD_BITS);
        match value {
            0 => {
                self.mask_words[idx] &= !m;
                self.sign_words[idx] &= !m;
            }
            v if v > 0 => {
                self.mask_words[idx] |= m;
                self.sign_words[idx] |= m;
            }
            _ => {
                self.mask_words[idx] |= m;
                self.sign_words[idx] &= !m;
            }
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        let idx = r * self.words_per_row + c / WORD_BITS;
        let shift = c % WORD_BITS;
        if (self.mask_words[idx] >> shift) & 1 == 0 {
            0
        } else if (self.sign_words[idx] >> shift) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| f64::from(self.get(r, c)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn sign_row(&self, r: usize) -> &[u64] {
        &self.sign_words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    #[inline]
    pub fn mask_row(&self, r: usize) -> &[u64] {
        &self.mask_words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// True when every present value is `+1`, i.e. the matrix is a `{0, 1}` indicator.
    pub fn is_indicator(&self) -> bool {
        self.sign_words == self.mask_words
    }

    pub fn mask_is_full(&self) -> bool {
        let tail = tail_mask(self.cols);
        (0..self.rows).all(|r| {
            self.mask_row(r).iter().enumerate().all(|(w, &m)| {
                m == if w + 1 == self.words_per_row { tail } else { u64::MAX }
            })
        })
    }

    /// Sign bits outside the mask are zero.
    pub fn signs_are_normalized(&self) -> bool {
        self.sign_words
            .iter()
            .zip(&self.mask_words)
            .all(|(s, m)| s & !m == 0)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Converts an all-present matrix back into a [`BitMatrix`].
    pub fn to_bits(&self) -> Result<BitMatrix> {
        if !self.mask_is_full() {
            return Err(shape_err("tri-state matrix has zero entries"));
        }
        Ok(BitMatrix {
            rows: self.rows,
            cols: self.cols,
            words_per_row: self.words_per_row,
            words: self.sign_words.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn pack_two_by_two() {
        let m = BitMatrix::pack(&array![[1.0, -1.0], [-1.0, 1.0]]).unwrap();
        assert_eq!(m.row_words(0), &[0b01]);
        assert_eq!(m.row_words(1), &[0b10]);
        assert!(m.get(0, 0) && !m.get(0, 1));
        assert!(!m.get(1, 0) && m.get(1, 1));
    }

    #[test]
    fn pack_all_plus_three_by_three() {
        let m = BitMatrix::pack(&Array2::from_elem((3, 3), 1.0)).unwrap();
        for r in 0..3 {
            assert_eq!(m.row_words(r), &[0b111]);
        }
    }

    #[test]
    fn pack_rejects_non_binary() {
        let err = BitMatrix::pack(&array![[1.0, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::NotBinary { row: 0, col: 1, .. }));
        assert!(BitMatrix::pack(&array![[0.0]]).is_err());
    }

    #[test]
    fn tri_state_normalizes_signs() {
        let t = TriStateMatrix::from_dense(&array![[1.0, 0.0, -1.0]]).unwrap();
        assert!(t.signs_are_normalized());
        assert_eq!(t.get(0, 0), 1);
        assert_eq!(t.get(0, 1), 0);
        assert_eq!(t.get(0, 2), -1);
        let mut t = t;
        t.set(0, 0, 0);
        assert!(t.signs_are_normalized());
        assert!(TriStateMatrix::from_dense(&array![[2.0]]).is_err());
    }

    #[test]
    fn full_mask_tri_state_matches_bits() {
        let dense = array![[1.0, -1.0, -1.0], [-1.0, 1.0, 1.0]];
        let bits = BitMatrix::pack(&dense).unwrap();
        let tri = TriStateMatrix::from_bits(&bits);
        assert!(tri.mask_is_full());
        assert_eq!(tri.to_dense(), dense);
        assert_eq!(tri.to_bits().unwrap(), bits);
        assert_eq!(TriStateMatrix::from_dense(&dense).unwrap(), tri);
    }

    fn pm1_matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Array2<f64>> {
        (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
            proptest::collection::vec(any::<bool>(), r * c).prop_map(move |bits| {
                Array2::from_shape_fn((r, c), |(i, j)| if bits[i * c + j] { 1.0 } else { -1.0 })
            })
        })
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(m in pm1_matrix(6, 140)) {
            let packed = BitMatrix::pack(&m).unwrap();
            prop_assert!(packed.padding_is_clean());
            prop_assert_eq!(packed.unpack(), m.clone());
            prop_assert_eq!(packed.transpose().unpack(), m.t().to_owned());
        }

        #[test]
        fn tri_state_round_trip(
            (r, c, vals) in (1usize..6, 1usize..140).prop_flat_map(|(r, c)| {
                (Just(r), Just(c), proptest::collection::vec(-1i8..=1, r * c))
            })
        ) {
            let dense = Array2::from_shape_fn((r, c), |(i, j)| f64::from(vals[i * c + j]));
            let t = TriStateMatrix::from_dense(&dense).unwrap();
            prop_assert!(t.signs_are_normalized());
            prop_assert_eq!(t.to_dense(), dense);
        }
    }

    #[test]
    fn random_5x70_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((5, 70), |_| if rng.random::<bool>() { 1.0 } else { -1.0 });
        assert_eq!(BitMatrix::pack(&m).unwrap().unpack(), m);
    }
}
