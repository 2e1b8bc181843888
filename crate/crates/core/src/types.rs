//! Shared numeric containers, precision handling and problem validation.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Compute precision used for all accumulation (logits, softmax stats, loss, gradients).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const NAME: &'static str;

    /// Round to the nearest value with an 8-bit significand (bfloat16), ties to even.
    fn round_bf16(self) -> Self;

    #[inline]
    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn round_bf16(self) -> Self {
        round_bf16(self)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    /// Rounds directly at bit 45 of the f64 encoding (52 - 7 explicit bits),
    /// then narrows to the f32 exponent range. Values already in bf16 survive
    /// both steps unchanged.
    #[inline]
    fn round_bf16(self) -> Self {
        if self.is_nan() {
            return self;
        }
        let bits = self.to_bits();
        let lsb = (bits >> 45) & 1;
        let rounded = bits.wrapping_add((1u64 << 44) - 1 + lsb) & !((1u64 << 45) - 1);
        let r = f64::from_bits(rounded);
        round_bf16(r as f32) as f64
    }
}

/// Round an `f32` to bfloat16 precision (round-to-nearest-even on the top 16 bits).
///
/// NaN stays NaN; values past the bf16 range round to infinity.
#[inline]
pub fn round_bf16(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits(bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000)
}

/// How matrix elements are stored. Arithmetic always runs at the compute precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Storage {
    #[default]
    SameAsCompute,
    Bf16Emulated,
}

/// User-facing precision selector: `Bf16` means f32 compute over bf16-rounded inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
    Bf16,
}

impl Precision {
    pub fn storage(self) -> Storage {
        match self {
            Precision::Bf16 => Storage::Bf16Emulated,
            _ => Storage::SameAsCompute,
        }
    }

    /// Bytes per element of the compute type.
    pub fn compute_bytes(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 | Precision::Bf16 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
            Precision::Bf16 => "bf16",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(Precision::F32),
            "f64" | "fp64" => Ok(Precision::F64),
            "bf16" => Ok(Precision::Bf16),
            other => Err(Error::InvalidConfig(format!("unknown precision '{other}'"))),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    storage: Storage,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
            storage: Storage::SameAsCompute,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            storage: Storage::SameAsCompute,
        })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Re-store every element under `storage`. Converting to bf16 rounds in place.
    pub fn with_storage(mut self, storage: Storage) -> Self {
        if storage == Storage::Bf16Emulated {
            for x in &mut self.data {
                *x = x.round_bf16();
            }
        }
        self.storage = storage;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    /// Contiguous copy of rows `range`.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
            storage: self.storage,
        }
    }

    /// Largest elementwise absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if self.rows != other.rows || self.cols != other.cols {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs())),
        )
    }
}

impl<T: fmt::Debug> fmt::Debug for DenseMatrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseMatrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("storage", &self.storage)
            .finish_non_exhaustive()
    }
}

/// Target token index per position, 0-based, with an optional ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVector {
    targets: Vec<i64>,
    ignore_index: Option<i64>,
}

impl TargetVector {
    pub fn new(targets: Vec<i64>) -> Self {
        Self {
            targets,
            ignore_index: None,
        }
    }

    pub fn with_ignore_index(mut self, ignore_index: i64) -> Self {
        self.ignore_index = Some(ignore_index);
        self
    }

    pub fn from_indices(targets: &[usize]) -> Self {
        Self::new(targets.iter().map(|&t| t as i64).collect())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn ignore_index(&self) -> Option<i64> {
        self.ignore_index
    }

    pub fn raw(&self) -> &[i64] {
        &self.targets
    }

    /// Target at `n`, or `None` if the position is ignored.
    ///
    /// Only meaningful after [`validate_problem`] has accepted the vector.
    #[inline]
    pub fn get(&self, n: usize) -> Option<usize> {
        let t = self.targets[n];
        if Some(t) == self.ignore_index {
            None
        } else {
            Some(t as usize)
        }
    }

    pub fn valid_count(&self) -> usize {
        (0..self.len()).filter(|&n| self.get(n).is_some()).count()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            targets: self.targets[range].to_vec(),
            ignore_index: self.ignore_index,
        }
    }

    /// Check every non-ignored target against the vocabulary size.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        for (position, &t) in self.targets.iter().enumerate() {
            if Some(t) == self.ignore_index {
                continue;
            }
            if t < 0 || t as u64 >= vocab as u64 {
                return Err(Error::TargetOutOfRange {
                    position,
                    target: t,
                    vocab,
                });
            }
        }
        Ok(())
    }
}

/// Problem dimensions: `positions` = B·T, `hidden` = d, `vocab` = V.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemDims {
    pub positions: usize,
    pub hidden: usize,
    pub vocab: usize,
}

pub fn validate_problem<T: Real>(
    hidden: &DenseMatrix<T>,
    weight: &DenseMatrix<T>,
    targets: &TargetVector,
) -> Result<ProblemDims> {
    if hidden.cols() != weight.cols() {
        return Err(Error::DimensionMismatch(format!(
            "hidden states have {} columns, weights have {}",
            hidden.cols(),
            weight.cols()
        )));
    }
    if hidden.rows() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} hidden rows but {} targets",
            hidden.rows(),
            targets.len()
        )));
    }
    targets.validate(weight.rows())?;
    Ok(ProblemDims {
        positions: hidden.rows(),
        hidden: hidden.cols(),
        vocab: weight.rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent bf16 oracle: snap to the nearest multiple of the bf16 ulp
    /// in exact f64 arithmetic, breaking ties toward an even multiple.
    fn bf16_oracle(x: f32) -> f32 {
        if x == 0.0 || !x.is_finite() {
            return x;
        }
        let v = x as f64;
        let exp = v.abs().log2().floor() as i32;
        let exp = exp.max(-126);
        let ulp = 2f64.powi(exp - 7);
        let q = v / ulp;
        let lo = q.floor();
        let frac = q - lo;
        let k = if frac > 0.5 || (frac == 0.5 && lo % 2.0 != 0.0) {
            lo + 1.0
        } else {
            lo
        };
        (k * ulp) as f32
    }

    #[test]
    fn validate_reads_dims() {
        let h = DenseMatrix::<f32>::zeros(4, 8);
        let w = DenseMatrix::<f32>::zeros(16, 8);
        let y = TargetVector::from_indices(&[0, 1, 2, 3]);
        assert_eq!(
            validate_problem(&h, &w, &y).unwrap(),
            ProblemDims {
                positions: 4,
                hidden: 8,
                vocab: 16
            }
        );
    }

    #[test]
    fn validate_rejects_column_mismatch() {
        let h = DenseMatrix::<f32>::zeros(4, 8);
        let w = DenseMatrix::<f32>::zeros(16, 7);
        let y = TargetVector::from_indices(&[0, 1, 2, 3]);
        assert!(matches!(
            validate_problem(&h, &w, &y),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn validate_rejects_target_past_vocab() {
        let h = DenseMatrix::<f32>::zeros(4, 8);
        let w = DenseMatrix::<f32>::zeros(16, 8);
        let y = TargetVector::new(vec![0, 3, 16, 1]);
        assert_eq!(
            validate_problem(&h, &w, &y),
            Err(Error::TargetOutOfRange {
                position: 2,
                target: 16,
                vocab: 16
            })
        );
    }

    #[test]
    fn validate_negative_target_only_when_ignored() {
        let h = DenseMatrix::<f32>::zeros(2, 2);
        let w = DenseMatrix::<f32>::zeros(3, 2);
        let y = TargetVector::new(vec![-100, 1]);
        assert!(validate_problem(&h, &w, &y).is_err());
        let y = y.with_ignore_index(-100);
        assert!(validate_problem(&h, &w, &y).is_ok());
        assert_eq!(y.get(0), None);
        assert_eq!(y.valid_count(), 1);
    }

    #[test]
    fn bf16_fixed_points() {
        assert_eq!(round_bf16(1.0), 1.0);
        assert_eq!(round_bf16(0.0), 0.0);
        assert!(round_bf16(f32::NAN).is_nan());
        assert_eq!(round_bf16(f32::INFINITY), f32::INFINITY);
    }

    #[test]
    fn bf16_tie_rounds_to_even() {
        let x = 1.0f32 + 2f32.powi(-8);
        assert_eq!(x, 1.003_906_25);
        let expect = bf16_oracle(x);
        assert_eq!(expect, 1.0);
        assert_eq!(round_bf16(x), expect);
        // odd neighbour ties upward
        let y = 1.0f32 + 3.0 * 2f32.powi(-8);
        assert_eq!(round_bf16(y), bf16_oracle(y));
        assert_eq!(round_bf16(y), 1.0 + 2f32.powi(-6));
    }

    #[test]
    fn f64_bf16_agrees_with_f32_path_on_f32_inputs() {
        for &x in &[1.003_906_25f32, 3.141_592_7, -0.1, 65504.0, 1e-30] {
            assert_eq!((x as f64).round_bf16(), round_bf16(x) as f64);
        }
    }

    #[test]
    fn storage_conversion_rounds_every_element() {
        let m = DenseMatrix::from_vec(1, 3, vec![0.1f32, 1.003_906_25, -7.77])
            .unwrap()
            .with_storage(Storage::Bf16Emulated);
        for &x in m.as_slice() {
            assert_eq!(round_bf16(x), x);
        }
        assert_eq!(m.storage(), Storage::Bf16Emulated);
    }

    proptest! {
        #[test]
        fn bf16_matches_oracle(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            prop_assume!(x.is_finite() && x.abs() < 3.0e38 && x.abs() > 1.2e-38);
            prop_assert_eq!(round_bf16(x).to_bits(), bf16_oracle(x).to_bits());
        }

        #[test]
        fn bf16_idempotent(bits in any::<u32>()) {
            let x = f32::from_bits(bits);
            let r = round_bf16(x);
            if r.is_nan() {
                prop_assert!(round_bf16(r).is_nan());
            } else {
                prop_assert_eq!(round_bf16(r).to_bits(), r.to_bits());
            }
        }

        #[test]
        fn bf16_f64_idempotent(x in -1e30f64..1e30) {
            let r = x.round_bf16();
            prop_assert_eq!(r.round_bf16(), r);
        }
    }
}
