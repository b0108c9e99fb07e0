//! Continuous-time autoregressive pieces: the trainable correction layer
//! applied to recurrent states, the truncated power series for the matrix
//! exponential, and the univariate imputer for missing feature values.
//!
//! The correction layer maps a regularized state `v` to
//!
//! ```text
//! [I + (Δt − τ) Φ] v + (Δt − τ) ς
//! ```
//!
//! so that `Δt = τ` collapses it to the identity and the cell behaves like
//! its standard discrete-time counterpart.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Trainable affine correction with drift `Φ`, bias `ς`, and nominal step `τ`.
#[derive(Clone, Debug)]
pub struct CarLayer {
    pub phi: Matrix,
    pub varsigma: Vector,
    pub tau: f64,
}

impl CarLayer {
    /// Zero-initialized layer (the usual starting point: corrections off).
    pub fn zeros(dim: usize, tau: f64) -> Self {
        CarLayer {
            phi: Matrix::zeros(dim, dim),
            varsigma: Vector::zeros(dim),
            tau,
        }
    }

    pub fn dim(&self) -> usize {
        self.varsigma.len()
    }
}

/// `[I + (Δt − τ) Φ] v + (Δt − τ) ς`.
pub fn car_correct(layer: &CarLayer, v: &Vector, delta_t: f64) -> Result<Vector> {
    let d = delta_t - layer.tau;
    let mut out = layer.phi.matvec(v);
    for i in 0..out.len() {
        let y = v.get(i) + d * (out.get(i) + layer.varsigma.get(i));
        out.set(i, y);
    }
    if !out.is_finite() {
        return Err(Error::NonFinite {
            what: "car correction",
            step: 0,
        });
    }
    Ok(out)
}

/// Backward of [`car_correct`] for incoming gradient `d_out`.
///
/// Returns `(d_v, d_phi, d_varsigma)` where `d_v = [I + (Δt − τ) Φᵀ] d_out`,
/// `d_phi = (Δt − τ) d_out vᵀ`, and `d_varsigma = (Δt − τ) d_out`.
pub fn car_correct_backward(
    layer: &CarLayer,
    v: &Vector,
    delta_t: f64,
    d_out: &Vector,
) -> (Vector, Matrix, Vector) {
    let d = delta_t - layer.tau;
    let mut d_v = layer.phi.matvec_t(d_out);
    for i in 0..d_v.len() {
        d_v.set(i, d_out.get(i) + d * d_v.get(i));
    }
    let mut d_phi = Matrix::zeros(layer.phi.rows(), layer.phi.cols());
    d_phi.add_outer(d_out, v, d);
    let d_varsigma = d_out.scaled(d);
    (d_v, d_phi, d_varsigma)
}

/// Truncated power series `Σ_{p=0..order} (Φ Δt)^p / p!`.
///
/// `order = 1` is the linearization `I + Φ Δt` the model itself uses; high
/// orders converge to the matrix exponential for moderate `‖Φ Δt‖`.
pub fn transition_matrix(phi: &Matrix, delta_t: f64, order: usize) -> Matrix {
    assert!(order >= 1, "transition_matrix: order must be >= 1");
    assert_eq!(phi.rows(), phi.cols(), "transition_matrix: square drift");
    let n = phi.rows();
    let mut scaled = phi.clone();
    scaled.scale(delta_t);
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for p in 1..=order {
        term = term.matmul(&scaled);
        term.scale(1.0 / p as f64);
        sum.add_scaled(&term, 1.0);
    }
    sum
}

/// Matrix exponential via scaling-and-squaring on the power series.
///
/// Accurate to near machine precision for the small, stable drifts used by
/// the synthetic generator; not a general-purpose expm.
pub fn expm(phi: &Matrix, delta_t: f64) -> Matrix {
    let n = phi.rows();
    let norm = phi.frobenius_norm() * delta_t.abs();
    // Halve until the series argument is comfortably small.
    let squarings = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as usize
    } else {
        0
    };
    let scale = 0.5f64.powi(squarings as i32);
    let mut result = transition_matrix(phi, delta_t * scale, 16);
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    debug_assert_eq!(result.rows(), n);
    result
}

/// Per-feature univariate CAR(1) imputer with parameters `φ` and `ζ`.
///
/// With both at zero this is exact last-observation-carried-forward; during
/// training the parameters adjust carried values by the elapsed gap.
#[derive(Clone, Debug)]
pub struct UnivariateImputer {
    pub phi: Vector,
    pub zeta: Vector,
}

impl UnivariateImputer {
    pub fn zeros(n_features: usize) -> Self {
        UnivariateImputer {
            phi: Vector::zeros(n_features),
            zeta: Vector::zeros(n_features),
        }
    }

    pub fn n_features(&self) -> usize {
        self.phi.len()
    }

    /// `[1 + (t_k − t_j) φ(n)] x_{n,j} + (t_k − t_j) ζ(n)`.
    ///
    /// The gap `t_k − t_j` is signed: negative when the source observation is
    /// later than the imputed time (used for missing values at the start of a
    /// sequence, where the nearest later observation is carried backward).
    pub fn impute(&self, feature: usize, value_at_tj: f64, t_j: f64, t_k: f64) -> f64 {
        let gap = t_k - t_j;
        (1.0 + gap * self.phi.get(feature)) * value_at_tj + gap * self.zeta.get(feature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(phi: f64, varsigma: f64, tau: f64) -> CarLayer {
        CarLayer {
            phi: Matrix::from_rows(1, 1, &[phi]),
            varsigma: Vector::from_slice(&[varsigma]),
            tau,
        }
    }

    #[test]
    fn correction_is_identity_at_nominal_gap() {
        let layer = CarLayer {
            phi: Matrix::from_rows(2, 2, &[0.3, -0.1, 0.2, 0.5]),
            varsigma: Vector::from_slice(&[1.0, -2.0]),
            tau: 0.7,
        };
        let v = Vector::from_slice(&[0.4, -1.3]);
        let out = car_correct(&layer, &v, 0.7).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn correction_scalar_case() {
        let layer = scalar_layer(0.1, 0.2, 0.0);
        let v = Vector::from_slice(&[2.0]);
        let out = car_correct(&layer, &v, 0.5).unwrap();
        assert!((out.get(0) - 2.2).abs() < 1e-15);
    }

    #[test]
    fn zero_parameters_give_identity_for_any_gap() {
        let layer = CarLayer::zeros(3, 0.5);
        let v = Vector::from_slice(&[1.0, -2.0, 0.25]);
        for dt in [0.01, 0.5, 3.0] {
            assert_eq!(car_correct(&layer, &v, dt).unwrap(), v);
        }
    }

    #[test]
    fn backward_at_nominal_gap_passes_gradient_through() {
        let layer = scalar_layer(0.4, -0.2, 0.3);
        let v = Vector::from_slice(&[1.5]);
        let d_out = Vector::from_slice(&[2.0]);
        let (d_v, d_phi, d_s) = car_correct_backward(&layer, &v, 0.3, &d_out);
        assert_eq!(d_v, d_out);
        assert_eq!(d_phi.get(0, 0), 0.0);
        assert_eq!(d_s.get(0), 0.0);
    }

    #[test]
    fn backward_scalar_chain_rule() {
        // Forward example: v=2, Φ=0.1, ς=0.2, Δt−τ=0.5; dΦ = 0.5·1·2.
        let layer = scalar_layer(0.1, 0.2, 0.0);
        let v = Vector::from_slice(&[2.0]);
        let d_out = Vector::from_slice(&[1.0]);
        let (_, d_phi, d_s) = car_correct_backward(&layer, &v, 0.5, &d_out);
        assert!((d_phi.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((d_s.get(0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = 3;
        let layer = CarLayer {
            phi: Matrix::from_rows(
                m,
                m,
                &(0..m * m).map(|_| rng.gen_range(-0.8..0.8)).collect::<Vec<_>>(),
            ),
            varsigma: Vector::from_vec((0..m).map(|_| rng.gen_range(-0.5..0.5)).collect()),
            tau: 0.4,
        };
        let v = Vector::from_vec((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let d_out = Vector::from_vec((0..m).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let delta_t = 0.9;

        // Scalar objective g = d_outᵀ f(·) so every partial is a plain number.
        let loss = |layer: &CarLayer, v: &Vector| -> f64 {
            car_correct(layer, v, delta_t).unwrap().dot(&d_out)
        };
        let (d_v, d_phi, d_s) = car_correct_backward(&layer, &v, delta_t, &d_out);

        let h = 1e-4;
        for i in 0..m {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp.set(i, v.get(i) + h);
            vm.set(i, v.get(i) - h);
            let fd = (loss(&layer, &vp) - loss(&layer, &vm)) / (2.0 * h);
            let rel = (d_v.get(i) - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-8, "d_v[{i}] rel err {rel}");
        }
        for r in 0..m {
            for c in 0..m {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.phi.set(r, c, layer.phi.get(r, c) + h);
                lm.phi.set(r, c, layer.phi.get(r, c) - h);
                let fd = (loss(&lp, &v) - loss(&lm, &v)) / (2.0 * h);
                let rel = (d_phi.get(r, c) - fd).abs() / fd.abs().max(1e-8);
                assert!(rel <= 1e-8, "d_phi[{r},{c}] rel err {rel}");
            }
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.varsigma.set(r, layer.varsigma.get(r) + h);
            lm.varsigma.set(r, layer.varsigma.get(r) - h);
            let fd = (loss(&lp, &v) - loss(&lm, &v)) / (2.0 * h);
            let rel = (d_s.get(r) - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-8, "d_varsigma[{r}] rel err {rel}");
        }
    }

    #[test]
    fn correction_is_affine() {
        let layer = CarLayer {
            phi: Matrix::from_rows(2, 2, &[0.2, -0.3, 0.1, 0.4]),
            varsigma: Vector::from_slice(&[0.5, -0.25]),
            tau: 0.2,
        };
        let u = Vector::from_slice(&[1.0, -0.5]);
        let v = Vector::from_slice(&[0.3, 2.0]);
        let (a, b) = (0.7, -1.2);
        let dt = 0.9;
        let lhs = car_correct(&layer, &u.scaled(a).add(&v.scaled(b)), dt).unwrap();
        let fu = car_correct(&layer, &u, dt).unwrap();
        let fv = car_correct(&layer, &v, dt).unwrap();
        // f(αu+βv) = αf(u) + βf(v) + (1−α−β)(Δt−τ)ς
        let d = dt - layer.tau;
        for i in 0..2 {
            let rhs = a * fu.get(i) + b * fv.get(i) + (1.0 - a - b) * d * layer.varsigma.get(i);
            assert!((lhs.get(i) - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn transition_series_hand_values() {
        let phi = Matrix::from_rows(1, 1, &[-1.0]);
        let t1 = transition_matrix(&phi, 0.1, 1);
        assert!((t1.get(0, 0) - 0.9).abs() < 1e-15);
        let t8 = transition_matrix(&phi, 0.1, 8);
        assert!((t8.get(0, 0) - (-0.1f64).exp()).abs() < 1e-9);
        let t0 = transition_matrix(&phi, 0.0, 5);
        assert_eq!(t0.get(0, 0), 1.0);
    }

    #[test]
    fn transition_residual_quarters_when_gap_halves() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = 3;
            let mut phi = Matrix::zeros(n, n);
            for r in 0..n {
                for c in 0..n {
                    phi.set(r, c, rng.gen_range(-0.5..0.5));
                }
            }
            // Diagonal dominance keeps the drift stable.
            for i in 0..n {
                phi.set(i, i, phi.get(i, i) - 1.5);
            }
            let resid = |dt: f64| {
                let exact = transition_matrix(&phi, dt, 12);
                let mut lin = transition_matrix(&phi, dt, 1);
                lin.scale(-1.0);
                lin.add_scaled(&exact, 1.0);
                lin.frobenius_norm()
            };
            let (r2, r1, r05) = (resid(0.2), resid(0.1), resid(0.05));
            for ratio in [r2 / r1, r1 / r05] {
                assert!((3.2..=4.8).contains(&ratio), "ratio {ratio}");
            }
        }
    }

    #[test]
    fn expm_matches_diagonal_closed_form() {
        let phi = Matrix::from_rows(2, 2, &[-0.7, 0.0, 0.0, -2.5]);
        let e = expm(&phi, 1.3);
        assert!((e.get(0, 0) - (-0.7f64 * 1.3).exp()).abs() < 1e-13);
        assert!((e.get(1, 1) - (-2.5f64 * 1.3).exp()).abs() < 1e-13);
        assert!(e.get(0, 1).abs() < 1e-15 && e.get(1, 0).abs() < 1e-15);
    }

    #[test]
    fn imputer_degenerates_to_carry_forward() {
        let imp = UnivariateImputer::zeros(3);
        assert_eq!(imp.impute(1, 2.0, 0.0, 5.0), 2.0);
        assert_eq!(imp.impute(2, -0.75, 1.0, 1.0), -0.75);
    }

    #[test]
    fn imputer_scalar_case() {
        let mut imp = UnivariateImputer::zeros(2);
        imp.phi.set(0, 0.1);
        imp.zeta.set(0, 0.05);
        let out = imp.impute(0, 2.0, 0.0, 2.0);
        assert!((out - 2.5).abs() < 1e-15);
    }

    #[test]
    fn imputer_reversed_gap_for_later_source() {
        let mut imp = UnivariateImputer::zeros(1);
        imp.phi.set(0, 0.1);
        imp.zeta.set(0, 0.05);
        // Source observed at t=3, imputing t=1: gap = −2.
        let out = imp.impute(0, 2.0, 3.0, 1.0);
        assert!((out - ((1.0 - 0.2) * 2.0 - 0.1)).abs() < 1e-15);
    }
}
