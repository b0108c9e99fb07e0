//! Minimal dense linear algebra shared by every other module.
//!
//! Everything is 64-bit: the gradient checks compare analytic derivatives
//! against finite differences at 1e-6 relative error, which single
//! precision cannot support. Storage is row-major and dense; model sizes
//! here are small enough that anything fancier would be wasted.
//!
//! Shape mismatches are programmer errors and panic. Non-finite values are
//! an error *state* and are checked where they can actually arise (state
//! rollouts, optimizer updates), not on every elementwise op.

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from a row-major slice; `data.len()` must equal `rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `A v`, length `rows`.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(
            self.cols,
            v.len(),
            "matvec: {}x{} matrix with length-{} vector",
            self.rows,
            self.cols,
            v.len()
        );
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, x) in row.iter().zip(v.data()) {
                acc += a * x;
            }
            *o = acc;
        }
        Vector::from_vec(out)
    }

    /// `Aᵀ v`, length `cols`. Used throughout the backward passes.
    pub fn matvec_t(&self, v: &Vector) -> Vector {
        assert_eq!(
            self.rows,
            v.len(),
            "matvec_t: {}x{} matrix with length-{} vector",
            self.rows,
            self.cols,
            v.len()
        );
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let s = v.data()[r];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        Vector::from_vec(out)
    }

    /// `self += s · u vᵀ` (rank-one update, the shape of every weight gradient).
    pub fn add_outer(&mut self, u: &Vector, v: &Vector, s: f64) {
        assert_eq!(self.rows, u.len(), "add_outer: row mismatch");
        assert_eq!(self.cols, v.len(), "add_outer: col mismatch");
        for r in 0..self.rows {
            let ur = s * u.data()[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, x) in row.iter_mut().zip(v.data()) {
                *o += ur * x;
            }
        }
    }

    /// `self += s · other`, elementwise.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!(self.rows, other.rows, "add_scaled: row mismatch");
        assert_eq!(self.cols, other.cols, "add_scaled: col mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Plain matrix product; only used by the power-series and generator code.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (o, b) in dst.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

/// Dense vector of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Vector {
            data: data.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    /// Elementwise product `u ⊙ v`.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(
            self.len(),
            other.len(),
            "hadamard: length {} vs {}",
            self.len(),
            other.len()
        );
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "add: length mismatch");
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "sub: length mismatch");
        Vector::from_vec(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Vector, s: f64) {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector::from_vec(self.data.iter().map(|a| a * s).collect())
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }
}

/// Activation kinds used by the cells and the output layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative evaluated at the *pre-activation* value. The backward
    /// equations apply σ′ to the barred (pre-activation) vectors, so this is
    /// the form every caller needs.
    pub fn deriv_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    /// Elementwise σ(v).
    pub fn apply(self, v: &Vector) -> Vector {
        Vector::from_vec(v.data().iter().map(|&x| self.apply_scalar(x)).collect())
    }

    /// Elementwise σ′ at the pre-activation vector.
    pub fn deriv(self, pre: &Vector) -> Vector {
        Vector::from_vec(pre.data().iter().map(|&x| self.deriv_scalar(x)).collect())
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity_and_hand_case() {
        let eye = Matrix::identity(2);
        let v = Vector::from_slice(&[3.0, 4.0]);
        assert_eq!(eye.matvec(&v).data(), &[3.0, 4.0]);

        let a = Matrix::from_rows(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let ones = Vector::from_slice(&[1.0, 1.0]);
        assert_eq!(a.matvec(&ones).data(), &[3.0, 7.0]);

        let z = Matrix::zeros(2, 3);
        let v3 = Vector::from_slice(&[5.0, -1.0, 2.0]);
        assert_eq!(z.matvec(&v3).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matvec_t_matches_explicit_transpose() {
        let a = Matrix::from_rows(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let v = Vector::from_slice(&[1.0, -2.0]);
        let out = a.matvec_t(&v);
        assert_eq!(out.data(), &[1.0 - 8.0, 2.0 - 10.0, 3.0 - 12.0]);
    }

    #[test]
    #[should_panic(expected = "matvec")]
    fn matvec_dimension_mismatch_panics() {
        let a = Matrix::zeros(2, 2);
        let v = Vector::zeros(3);
        let _ = a.matvec(&v);
    }

    #[test]
    fn hadamard_cases() {
        let u = Vector::from_slice(&[1.0, 2.0]);
        let v = Vector::from_slice(&[3.0, 4.0]);
        assert_eq!(u.hadamard(&v).data(), &[3.0, 8.0]);
        let ones = Vector::from_slice(&[1.0, 1.0]);
        assert_eq!(u.hadamard(&ones), u);
        let zeros = Vector::zeros(2);
        assert_eq!(u.hadamard(&zeros), zeros);
    }

    #[test]
    #[should_panic(expected = "hadamard")]
    fn hadamard_dimension_mismatch_panics() {
        let u = Vector::zeros(2);
        let v = Vector::zeros(3);
        let _ = u.hadamard(&v);
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply_scalar(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply_scalar(0.0), 0.0);
        assert_eq!(Activation::Identity.apply_scalar(1.75), 1.75);
        assert_eq!(Activation::Sigmoid.deriv_scalar(0.0), 0.25);
        assert_eq!(Activation::Tanh.deriv_scalar(0.0), 1.0);
        assert_eq!(Activation::Identity.deriv_scalar(-3.0), 1.0);
    }

    #[test]
    fn add_outer_accumulates_rank_one() {
        let mut m = Matrix::zeros(2, 2);
        let u = Vector::from_slice(&[1.0, 2.0]);
        let v = Vector::from_slice(&[3.0, 4.0]);
        m.add_outer(&u, &v, 2.0);
        assert_eq!(m.data(), &[6.0, 8.0, 12.0, 16.0]);
    }

    proptest! {
        // σ′ against a central difference of σ itself. The step and the
        // argument range keep the comparison above the floating-point floor.
        #[test]
        fn activation_deriv_matches_finite_difference(
            x in -3.0f64..3.0,
            kind in prop::sample::select(vec![Activation::Identity, Activation::Tanh, Activation::Sigmoid]),
        ) {
            let h = 3e-6;
            let fd = (kind.apply_scalar(x + h) - kind.apply_scalar(x - h)) / (2.0 * h);
            let analytic = kind.deriv_scalar(x);
            let rel = (analytic - fd).abs() / fd.abs().max(1e-12);
            prop_assert!(rel <= 1e-8, "kind={:?} x={} rel={}", kind, x, rel);
        }

        #[test]
        fn matvec_distributes_over_addition(
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (r, c) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
            let a = Matrix::from_rows(r, c, &(0..r*c).map(|_| rng.gen_range(-1e3..1e3)).collect::<Vec<_>>());
            let u = Vector::from_vec((0..c).map(|_| rng.gen_range(-1e3..1e3)).collect());
            let v = Vector::from_vec((0..c).map(|_| rng.gen_range(-1e3..1e3)).collect());
            let lhs = a.matvec(&u.add(&v));
            let rhs = a.matvec(&u).add(&a.matvec(&v));
            for i in 0..r {
                let scale = 1.0f64.max(lhs.get(i).abs()).max(rhs.get(i).abs());
                prop_assert!((lhs.get(i) - rhs.get(i)).abs() <= 1e-12 * scale);
            }
        }
    }
}
