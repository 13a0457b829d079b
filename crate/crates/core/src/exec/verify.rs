use super::tensor::{DenseTensor, Element};
use crate::error::{PitError, Result};

/// Relative tolerance for f32 results against the f64 oracle.
pub const RTOL: f64 = 1e-5;
/// Absolute floor added to the relative tolerance.
pub const ATOL: f64 = 1e-6;

/// Normwise comparison of a result against a reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_abs_err: f64,
    /// Largest reference magnitude.
    pub ref_max: f64,
    /// `max_abs_err / ref_max` (0 when both are 0).
    pub rel_err: f64,
}

impl Comparison {
    pub fn within(&self, rtol: f64, atol: f64) -> bool {
        self.max_abs_err <= rtol * self.ref_max + atol
    }

    pub fn passes(&self) -> bool {
        self.within(RTOL, ATOL)
    }
}

pub fn compare<T: Element>(got: &DenseTensor<T>, want: &DenseTensor<f64>) -> Result<Comparison> {
    if got.shape() != want.shape() {
        return Err(PitError::Shape(format!(
            "result {:?} vs reference {:?}",
            got.shape(),
            want.shape()
        )));
    }
    let got = got.to_layout(want.layout());
    let mut max_abs_err = 0.0f64;
    let mut ref_max = 0.0f64;
    for (&g, &w) in got.data().iter().zip(want.data()) {
        max_abs_err = max_abs_err.max((g.to_f64() - w).abs());
        ref_max = ref_max.max(w.abs());
    }
    let rel_err = if max_abs_err == 0.0 {
        0.0
    } else if ref_max == 0.0 {
        f64::INFINITY
    } else {
        max_abs_err / ref_max
    };
    Ok(Comparison {
        max_abs_err,
        ref_max,
        rel_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normwise() {
        let want = DenseTensor::from_vec_2d(1, 3, vec![100.0, 0.0, -1.0]).unwrap();
        let got = DenseTensor::<f32>::from_vec_2d(1, 3, vec![100.0, 1e-4, -1.0]).unwrap();
        let c = compare(&got, &want).unwrap();
        assert!((c.rel_err - 1e-6).abs() < 1e-9);
        assert!(c.passes());
        let bad = DenseTensor::<f32>::from_vec_2d(1, 3, vec![100.1, 0.0, -1.0]).unwrap();
        assert!(!compare(&bad, &want).unwrap().passes());
        let zeros = DenseTensor::<f64>::zeros_2d(2, 2);
        assert_eq!(compare(&zeros, &zeros).unwrap().rel_err, 0.0);
        assert!(compare(&zeros, &want).is_err());
    }
}
