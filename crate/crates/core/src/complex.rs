//! Complex-vector kernels used by every scoring function.
//!
//! Two independent routes compute the same multilinear real parts:
//!
//! * `re_dot3` / `re_dot4` multiply the operands as complex numbers and take
//!   the real part of the sum.
//! * `expand3_re` / `expand4_re` evaluate the equivalent sum of real
//!   trilinear (four-term) or quadrilinear (eight-term) products.
//!
//! The scoring heads use the expansion route and the test-suite checks it
//! against the direct route.
//!
//! In every scoring call site the object-side operand is passed already
//! conjugated, e.g. `re_dot3(h_s, h_r, &conjugate(h_o))`. The expansions are
//! written in terms of that un-conjugated object vector, so they read the
//! third operand as `(Re c, -Im c)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A d-dimensional complex vector stored as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexVec {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexVec {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        check_dim(re.len(), im.len())?;
        Ok(Self { re, im })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            re: vec![0.0; dim],
            im: vec![0.0; dim],
        }
    }

    /// Real vector embedded with zero imaginary part.
    pub fn from_real(re: Vec<f64>) -> Self {
        let im = vec![0.0; re.len()];
        Self { re, im }
    }

    pub fn dim(&self) -> usize {
        self.re.len()
    }

    /// Inverse of [`split_to_complex`]: `re ‖ im`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim());
        out.extend_from_slice(&self.re);
        out.extend_from_slice(&self.im);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|x| x.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.re.iter().chain(&self.im).map(|x| x * x).sum()
    }

    fn at(&self, k: usize) -> Complex64 {
        Complex64::new(self.re[k], self.im[k])
    }
}

pub fn conjugate(v: &ComplexVec) -> ComplexVec {
    ComplexVec {
        re: v.re.clone(),
        im: v.im.iter().map(|x| -x).collect(),
    }
}

/// Interpret the first half of `v` as the real part and the second half as
/// the imaginary part.
pub fn split_to_complex(v: &[f64]) -> Result<ComplexVec> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::OddLength(v.len()));
    }
    let d = v.len() / 2;
    Ok(ComplexVec {
        re: v[..d].to_vec(),
        im: v[d..].to_vec(),
    })
}

fn check_same(vs: &[&ComplexVec]) -> Result<usize> {
    let d = vs[0].dim();
    for v in vs {
        check_dim(d, v.re.len())?;
        check_dim(d, v.im.len())?;
    }
    Ok(d)
}

/// `Re(Σ_k a_k b_k c_k)` via complex multiplication.
pub fn re_dot3(a: &ComplexVec, b: &ComplexVec, c: &ComplexVec) -> Result<f64> {
    let d = check_same(&[a, b, c])?;
    let sum: Complex64 = (0..d).map(|k| a.at(k) * b.at(k) * c.at(k)).sum();
    Ok(sum.re)
}

/// `Re(Σ_k a_k b_k c_k x_k)` via complex multiplication.
pub fn re_dot4(a: &ComplexVec, b: &ComplexVec, c: &ComplexVec, x: &ComplexVec) -> Result<f64> {
    let d = check_same(&[a, b, c, x])?;
    let sum: Complex64 = (0..d).map(|k| a.at(k) * b.at(k) * c.at(k) * x.at(k)).sum();
    Ok(sum.re)
}

/// Four-term real expansion of `Re(<a, b, c>)`.
pub fn expand3_re(a: &ComplexVec, b: &ComplexVec, c: &ComplexVec) -> Result<f64> {
    check_same(&[a, b, c])?;
    Ok(expand3_parts(&a.re, &a.im, &b.re, &b.im, &c.re, &c.im))
}

/// Eight-term real expansion of `Re(<a, b, c, x>)`.
pub fn expand4_re(a: &ComplexVec, b: &ComplexVec, c: &ComplexVec, x: &ComplexVec) -> Result<f64> {
    check_same(&[a, b, c, x])?;
    Ok(expand4_parts(
        &a.re, &a.im, &b.re, &b.im, &c.re, &c.im, &x.re, &x.im,
    ))
}

#[inline]
fn tri(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((a, b), c)| a * b * c).sum()
}

#[inline]
fn quad(a: &[f64], b: &[f64], c: &[f64], x: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(c)
        .zip(x)
        .map(|(((a, b), c), x)| a * b * c * x)
        .sum()
}

/// Slice-level kernel behind [`expand3_re`]. The third operand is the
/// (already conjugated) object vector; `h` below is its un-conjugated form.
pub(crate) fn expand3_parts(
    ar: &[f64],
    ai: &[f64],
    br: &[f64],
    bi: &[f64],
    cr: &[f64],
    ci: &[f64],
) -> f64 {
    let hr = cr;
    let hi: Vec<f64> = ci.iter().map(|x| -x).collect();
    tri(ar, br, hr) + tri(ar, bi, &hi) + tri(ai, br, &hi) - tri(ai, bi, hr)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn expand4_parts(
    ar: &[f64],
    ai: &[f64],
    br: &[f64],
    bi: &[f64],
    cr: &[f64],
    ci: &[f64],
    xr: &[f64],
    xi: &[f64],
) -> f64 {
    let hr = cr;
    let hi: Vec<f64> = ci.iter().map(|x| -x).collect();
    quad(ar, br, hr, xr) + quad(ar, bi, &hi, xr) + quad(ai, br, &hi, xr) + quad(ar, br, &hi, xi)
        - quad(ai, bi, hr, xr)
        - quad(ai, br, hr, xi)
        - quad(ai, bi, &hi, xi)
        - quad(ar, bi, hr, xi)
}
