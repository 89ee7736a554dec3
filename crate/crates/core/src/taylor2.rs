//! Second-order forward-mode automatic differentiation.
//!
//! A [`Taylor2`] carries a value together with its dense gradient and Hessian
//! with respect to a fixed parameter vector of length `D`. Estimators written
//! in `Taylor2` arithmetic are differentiated "through the estimate" without
//! any extra bookkeeping.
//!
//! The Hessian is stored as a packed upper triangle (row-major), so symmetry is
//! structural: `hess(i, j)` and `hess(j, i)` read the same slot. Memory per
//! scalar is `D + D(D+1)/2` floats.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, MulAssign, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Taylor2Error {
    #[error("parameter dimension must be at least 1")]
    ZeroDimension,
    #[error("seed index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("division by a zero-valued scalar")]
    DivisionByZero,
    #[error("logarithm of non-positive value {0}")]
    NonPositiveLog(f64),
}

/// Number of differentiation variables. Always at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dim(usize);

impl Dim {
    pub fn new(dim: usize) -> Result<Self, Taylor2Error> {
        if dim == 0 {
            Err(Taylor2Error::ZeroDimension)
        } else {
            Ok(Dim(dim))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    fn packed_len(self) -> usize {
        self.0 * (self.0 + 1) / 2
    }
}

/// Offset of `(i, j)` in the packed upper triangle. Row `i` starts at
/// `i*dim - i(i-1)/2`.
#[inline]
fn packed_index(dim: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * dim - i * i.saturating_sub(1) / 2 + (j - i)
}

#[derive(Clone, PartialEq)]
pub struct Taylor2 {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl fmt::Debug for Taylor2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Taylor2")
            .field("value", &self.value)
            .field("grad", &self.grad)
            .field("hess", &self.hessian_rows())
            .finish()
    }
}

impl Taylor2 {
    /// A constant: zero gradient and zero Hessian.
    pub fn constant(value: f64, dim: Dim) -> Self {
        Taylor2 {
            value,
            grad: vec![0.0; dim.get()],
            hess: vec![0.0; dim.packed_len()],
        }
    }

    /// The `index`-th coordinate function evaluated at `value`.
    pub fn variable(value: f64, index: usize, dim: Dim) -> Result<Self, Taylor2Error> {
        if index >= dim.get() {
            return Err(Taylor2Error::IndexOutOfRange {
                index,
                dim: dim.get(),
            });
        }
        let mut out = Taylor2::constant(value, dim);
        out.grad[index] = 1.0;
        Ok(out)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn dim(&self) -> Dim {
        Dim(self.grad.len())
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Packed upper triangle of the Hessian, row-major.
    pub fn packed_hessian(&self) -> &[f64] {
        &self.hess
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.hess[packed_index(self.grad.len(), i, j)]
    }

    /// Full `D x D` Hessian, row-major.
    pub fn hessian_dense(&self) -> Vec<f64> {
        let d = self.grad.len();
        let mut out = vec![0.0; d * d];
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                out[i * d + j] = self.hess[k];
                out[j * d + i] = self.hess[k];
                k += 1;
            }
        }
        out
    }

    pub fn hessian_rows(&self) -> Vec<Vec<f64>> {
        let d = self.grad.len();
        self.hessian_dense()
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Hessian-vector product `H v` read off the packed triangle.
    pub fn hvp(&self, v: &[f64]) -> Vec<f64> {
        let d = self.grad.len();
        assert_eq!(v.len(), d, "hvp: vector length must equal the dimension");
        let mut out = vec![0.0; d];
        let mut k = 0;
        for i in 0..d {
            out[i] += self.hess[k] * v[i];
            k += 1;
            for j in (i + 1)..d {
                let h = self.hess[k];
                out[i] += h * v[j];
                out[j] += h * v[i];
                k += 1;
            }
        }
        out
    }

    fn check_dim(&self, other: &Taylor2) -> Result<(), Taylor2Error> {
        if self.grad.len() == other.grad.len() {
            Ok(())
        } else {
            Err(Taylor2Error::DimensionMismatch {
                left: self.grad.len(),
                right: other.grad.len(),
            })
        }
    }

    pub fn try_add(&self, other: &Taylor2) -> Result<Taylor2, Taylor2Error> {
        self.check_dim(other)?;
        let mut out = self.clone();
        out.add_assign_unchecked(other, 1.0);
        Ok(out)
    }

    pub fn try_sub(&self, other: &Taylor2) -> Result<Taylor2, Taylor2Error> {
        self.check_dim(other)?;
        let mut out = self.clone();
        out.add_assign_unchecked(other, -1.0);
        Ok(out)
    }

    pub fn try_mul(&self, other: &Taylor2) -> Result<Taylor2, Taylor2Error> {
        self.check_dim(other)?;
        let (a, b) = (self, other);
        let d = a.grad.len();
        let grad = a
            .grad
            .iter()
            .zip(&b.grad)
            .map(|(ag, bg)| a.value * bg + b.value * ag)
            .collect();
        let mut hess: Vec<f64> = a
            .hess
            .iter()
            .zip(&b.hess)
            .map(|(ah, bh)| a.value * bh + b.value * ah)
            .collect();
        // Ratio factors have gradients confined to one state block, so most
        // rows of the outer-product part are zero.
        let mut start = 0;
        for i in 0..d {
            let row = &mut hess[start..start + d - i];
            let (ai, bi) = (a.grad[i], b.grad[i]);
            if ai != 0.0 {
                row.iter_mut()
                    .zip(&b.grad[i..])
                    .for_each(|(h, g)| *h += ai * g);
            }
            if bi != 0.0 {
                row.iter_mut()
                    .zip(&a.grad[i..])
                    .for_each(|(h, g)| *h += bi * g);
            }
            start += d - i;
        }
        Ok(Taylor2 {
            value: a.value * b.value,
            grad,
            hess,
        })
    }

    pub fn try_div(&self, other: &Taylor2) -> Result<Taylor2, Taylor2Error> {
        self.check_dim(other)?;
        self.try_mul(&other.recip()?)
    }

    /// Applies a scalar function with derivatives `f1 = f'(v)`, `f2 = f''(v)`.
    fn chain(&self, f0: f64, f1: f64, f2: f64) -> Taylor2 {
        let d = self.grad.len();
        let grad = self.grad.iter().map(|g| f1 * g).collect();
        let mut hess = Vec::with_capacity(self.hess.len());
        let mut k = 0;
        for i in 0..d {
            let gi = f2 * self.grad[i];
            for j in i..d {
                hess.push(f1 * self.hess[k] + gi * self.grad[j]);
                k += 1;
            }
        }
        Taylor2 {
            value: f0,
            grad,
            hess,
        }
    }

    pub fn exp(&self) -> Taylor2 {
        let e = self.value.exp();
        self.chain(e, e, e)
    }

    pub fn ln(&self) -> Result<Taylor2, Taylor2Error> {
        let v = self.value;
        if !(v > 0.0) {
            return Err(Taylor2Error::NonPositiveLog(v));
        }
        Ok(self.chain(v.ln(), 1.0 / v, -1.0 / (v * v)))
    }

    pub fn recip(&self) -> Result<Taylor2, Taylor2Error> {
        let v = self.value;
        if v == 0.0 {
            return Err(Taylor2Error::DivisionByZero);
        }
        Ok(self.chain(1.0 / v, -1.0 / (v * v), 2.0 / (v * v * v)))
    }

    /// `self * c` for a plain constant `c`.
    pub fn scale(&self, c: f64) -> Taylor2 {
        let mut out = self.clone();
        out *= c;
        out
    }

    /// `self + c` for a plain constant `c`.
    pub fn add_scalar(&self, c: f64) -> Taylor2 {
        let mut out = self.clone();
        out.value += c;
        out
    }

    /// `self += c * other` without the dimension check.
    fn add_assign_unchecked(&mut self, other: &Taylor2, c: f64) {
        self.value += c * other.value;
        for (s, o) in self.grad.iter_mut().zip(&other.grad) {
            *s += c * o;
        }
        for (s, o) in self.hess.iter_mut().zip(&other.hess) {
            *s += c * o;
        }
    }

    /// In-place `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Taylor2) {
        assert_eq!(
            self.grad.len(),
            other.grad.len(),
            "Taylor2 dimension mismatch"
        );
        self.add_assign_unchecked(other, c);
    }

    /// Sum of an iterator of scalars of dimension `dim`.
    pub fn sum<'a, I>(iter: I, dim: Dim) -> Taylor2
    where
        I: IntoIterator<Item = &'a Taylor2>,
    {
        let mut acc = Taylor2::constant(0.0, dim);
        for x in iter {
            acc.axpy(1.0, x);
        }
        acc
    }
}

// Operator forms panic on dimension mismatch: mixing dimensions is a
// programming error. Use the `try_*` methods where the dimensions come from
// untrusted input.

impl Add for &Taylor2 {
    type Output = Taylor2;
    fn add(self, rhs: &Taylor2) -> Taylor2 {
        self.try_add(rhs).expect("Taylor2 dimension mismatch")
    }
}

impl Add for Taylor2 {
    type Output = Taylor2;
    fn add(mut self, rhs: Taylor2) -> Taylor2 {
        self += &rhs;
        self
    }
}

impl Sub for &Taylor2 {
    type Output = Taylor2;
    fn sub(self, rhs: &Taylor2) -> Taylor2 {
        self.try_sub(rhs).expect("Taylor2 dimension mismatch")
    }
}

impl Sub for Taylor2 {
    type Output = Taylor2;
    fn sub(mut self, rhs: Taylor2) -> Taylor2 {
        self.axpy(-1.0, &rhs);
        self
    }
}

impl Mul for &Taylor2 {
    type Output = Taylor2;
    fn mul(self, rhs: &Taylor2) -> Taylor2 {
        self.try_mul(rhs).expect("Taylor2 dimension mismatch")
    }
}

impl Mul for Taylor2 {
    type Output = Taylor2;
    fn mul(self, rhs: Taylor2) -> Taylor2 {
        &self * &rhs
    }
}

impl Mul<f64> for Taylor2 {
    type Output = Taylor2;
    fn mul(mut self, rhs: f64) -> Taylor2 {
        self *= rhs;
        self
    }
}

impl Add<f64> for Taylor2 {
    type Output = Taylor2;
    fn add(mut self, rhs: f64) -> Taylor2 {
        self.value += rhs;
        self
    }
}

impl Sub<f64> for Taylor2 {
    type Output = Taylor2;
    fn sub(mut self, rhs: f64) -> Taylor2 {
        self.value -= rhs;
        self
    }
}

impl Neg for Taylor2 {
    type Output = Taylor2;
    fn neg(self) -> Taylor2 {
        self * -1.0
    }
}

impl Neg for &Taylor2 {
    type Output = Taylor2;
    fn neg(self) -> Taylor2 {
        self.scale(-1.0)
    }
}

impl AddAssign<&Taylor2> for Taylor2 {
    fn add_assign(&mut self, rhs: &Taylor2) {
        self.axpy(1.0, rhs);
    }
}

impl MulAssign<f64> for Taylor2 {
    fn mul_assign(&mut self, rhs: f64) {
        self.value *= rhs;
        self.grad.iter_mut().for_each(|g| *g *= rhs);
        self.hess.iter_mut().for_each(|h| *h *= rhs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dim(d: usize) -> Dim {
        Dim::new(d).unwrap()
    }

    #[test]
    fn packed_index_walks_rows() {
        let d = 4;
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                assert_eq!(packed_index(d, i, j), k);
                assert_eq!(packed_index(d, j, i), k);
                k += 1;
            }
        }
    }

    #[test]
    fn constants_have_no_derivatives() {
        for (c, d) in [(0.0, 2), (1.0, 1), (-3.5, 3)] {
            let x = Taylor2::constant(c, dim(d));
            assert_eq!(x.value(), c);
            assert!(x.grad().iter().all(|&g| g == 0.0));
            assert!(x.hessian_dense().iter().all(|&h| h == 0.0));
        }
        assert_eq!(Dim::new(0), Err(Taylor2Error::ZeroDimension));
    }

    #[test]
    fn variable_seeds_unit_gradient() {
        let x = Taylor2::variable(2.0, 0, dim(2)).unwrap();
        assert_eq!(x.value(), 2.0);
        assert_eq!(x.grad(), &[1.0, 0.0]);
        let y = Taylor2::variable(0.0, 1, dim(2)).unwrap();
        assert_eq!(y.grad(), &[0.0, 1.0]);
        assert!(y.hessian_dense().iter().all(|&h| h == 0.0));
        assert_eq!(
            Taylor2::variable(5.0, 3, dim(3)),
            Err(Taylor2Error::IndexOutOfRange { index: 3, dim: 3 })
        );
    }

    #[test]
    fn product_rule() {
        let a = Taylor2::variable(2.0, 0, dim(2)).unwrap();
        let b = Taylor2::variable(3.0, 1, dim(2)).unwrap();
        let p = &a * &b;
        assert_eq!(p.value(), 6.0);
        assert_eq!(p.grad(), &[3.0, 2.0]);
        assert_eq!(p.hessian_rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }

    #[test]
    fn adding_zero_is_identity() {
        let a = Taylor2::variable(2.0, 0, dim(2)).unwrap().exp();
        let s = &a + &Taylor2::constant(0.0, dim(2));
        assert_eq!(s, a);
    }

    #[test]
    fn quotient_rule() {
        // f(t) = 1 / (2 + t) at t = 0
        let one = Taylor2::constant(1.0, dim(1));
        let den = Taylor2::variable(2.0, 0, dim(1)).unwrap();
        let q = one.try_div(&den).unwrap();
        assert_abs_diff_eq!(q.value(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(q.grad()[0], -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(q.hess(0, 0), 0.25, epsilon = 1e-15);

        // central differences of the same function
        let f = |t: f64| 1.0 / (2.0 + t);
        let h = 1e-4;
        let fd1 = (f(h) - f(-h)) / (2.0 * h);
        let fd2 = (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        assert_abs_diff_eq!(q.grad()[0], fd1, epsilon = 1e-7);
        assert_abs_diff_eq!(q.hess(0, 0), fd2, epsilon = 1e-5);
    }

    #[test]
    fn division_and_log_reject_bad_inputs() {
        let x = Taylor2::variable(1.0, 0, dim(1)).unwrap();
        let z = Taylor2::constant(0.0, dim(1));
        assert_eq!(x.try_div(&z), Err(Taylor2Error::DivisionByZero));
        assert!(matches!(z.ln(), Err(Taylor2Error::NonPositiveLog(_))));
        assert!(matches!(
            x.scale(-1.0).ln(),
            Err(Taylor2Error::NonPositiveLog(_))
        ));
        let y = Taylor2::constant(1.0, dim(2));
        assert_eq!(
            x.try_add(&y),
            Err(Taylor2Error::DimensionMismatch { left: 1, right: 2 })
        );
    }

    #[test]
    fn exp_and_log_at_simple_points() {
        let e = Taylor2::variable(0.0, 0, dim(1)).unwrap().exp();
        assert_eq!((e.value(), e.grad()[0], e.hess(0, 0)), (1.0, 1.0, 1.0));
        let l = Taylor2::variable(1.0, 0, dim(1)).unwrap().ln().unwrap();
        assert_eq!((l.value(), l.grad()[0], l.hess(0, 0)), (0.0, 1.0, -1.0));
    }

    #[test]
    fn log_inverts_exp() {
        let a = Taylor2::variable(0.7, 0, dim(2)).unwrap();
        let b = Taylor2::variable(-0.3, 1, dim(2)).unwrap();
        let x = &(&a * &b) + &a.exp();
        let y = x.exp().ln().unwrap();
        assert_abs_diff_eq!(y.value(), x.value(), epsilon = 1e-12);
        for (p, q) in y.grad().iter().zip(x.grad()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
        for (p, q) in y.packed_hessian().iter().zip(x.packed_hessian()) {
            assert_abs_diff_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn hvp_matches_dense_product() {
        let d = dim(3);
        let x: Vec<_> = (0..3)
            .map(|i| Taylor2::variable(0.1 * i as f64 + 0.2, i, d).unwrap())
            .collect();
        let f = (&(&x[0] * &x[1]) * &x[2]).exp();
        let v = [0.3, -1.0, 2.0];
        let dense = f.hessian_dense();
        let expected: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| dense[i * 3 + j] * v[j]).sum())
            .collect();
        for (a, b) in f.hvp(&v).iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }
}
