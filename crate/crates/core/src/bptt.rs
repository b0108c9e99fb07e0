//! Exact backpropagation through time for all three cells, the masked loss
//! with its per-step gradient scaling, and the finite-difference oracle that
//! verifies every analytic gradient.
//!
//! The loss over a K-step prediction with Q target features is
//!
//! ```text
//! L = (1/K) Σ_k (1/avail_k) Σ_{q available} (y_kq − s_kq)²
//! ```
//!
//! which reduces to `(1/KQ)‖Y − S‖²` for fully observed targets and whose
//! exact derivative is the per-step `Q/avail_k` rescaling of the output
//! gradients: missing targets get exactly zero gradient, the rest are scaled
//! up by how many targets that step is missing. Keeping loss and gradient
//! consistent to the last bit is what lets central differences agree with the
//! analytic backward pass at 1e-6 relative error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::car::{car_correct_backward, CarLayer};
use crate::cells::{
    forward_sequence, CellKind, CellParams, ForwardCache, GruParams, GruStepCache, LstmParams,
    LstmStepCache, Model, PreparedSequence, RnnParams, RnnStepCache,
};
use crate::dataset::BinnedSequence;
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, Vector};
use crate::train::init_params;

/// Masks and rescales one input vector: missing entries become zero, the
/// rest are multiplied by `available / N`. Returns the scale as well, since
/// the same factor reappears in the imputer backward.
pub fn scale_inputs(x: &Vector, mask_row: &[f64]) -> (Vector, f64) {
    assert_eq!(x.len(), mask_row.len(), "scale_inputs: mask length mismatch");
    let avail = mask_row.iter().filter(|&&m| m == 1.0).count();
    let scale = avail as f64 / x.len() as f64;
    let mut out = Vector::zeros(x.len());
    for i in 0..x.len() {
        if mask_row[i] == 1.0 {
            out.set(i, x.get(i) * scale);
        }
    }
    (out, scale)
}

/// Masked loss and output-layer gradient (identity output activation).
///
/// Errors when every target cell is missing. Steps with no available target
/// contribute nothing and receive no gradient.
pub fn loss_and_output_grad(
    y: &Matrix,
    targets: &Matrix,
    target_mask: &Matrix,
) -> Result<(f64, Matrix)> {
    let k = y.rows();
    let q = y.cols();
    assert_eq!(targets.rows(), k, "loss: target row mismatch");
    assert_eq!(targets.cols(), q, "loss: target col mismatch");
    let total_avail: f64 = target_mask.data().iter().sum();
    if total_avail == 0.0 {
        return Err(Error::NoSupervision);
    }
    let mut loss = 0.0;
    let mut dybar = Matrix::zeros(k, q);
    for step in 0..k {
        let avail = target_mask.row(step).iter().filter(|&&m| m == 1.0).count();
        if avail == 0 {
            continue;
        }
        let w = 1.0 / (k as f64 * avail as f64);
        for col in 0..q {
            if target_mask.get(step, col) == 1.0 {
                let e = y.get(step, col) - targets.get(step, col);
                loss += w * e * e;
                dybar.set(step, col, 2.0 * w * e);
            }
        }
    }
    Ok((loss, dybar))
}

#[derive(Clone, Debug)]
pub struct RnnGrads {
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vector,
    pub phi_h: Matrix,
    pub varsigma_h: Vector,
    pub w_y: Matrix,
    pub b_y: Vector,
}

#[derive(Clone, Debug)]
pub struct LstmGrads {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_z: Matrix,
    pub w_o: Matrix,
    pub u_f: Matrix,
    pub u_i: Matrix,
    pub u_z: Matrix,
    pub u_o: Matrix,
    pub v_f: Vector,
    pub v_i: Vector,
    pub v_o: Vector,
    pub b_f: Vector,
    pub b_i: Vector,
    pub b_z: Vector,
    pub b_o: Vector,
    pub phi_h: Matrix,
    pub varsigma_h: Vector,
    pub phi_c: Matrix,
    pub varsigma_c: Vector,
    pub w_y: Matrix,
    pub b_y: Vector,
}

#[derive(Clone, Debug)]
pub struct GruGrads {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_c: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_c: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_c: Vector,
    pub phi_h: Matrix,
    pub varsigma_h: Vector,
    pub w_y: Matrix,
    pub b_y: Vector,
}

#[derive(Clone, Debug)]
pub enum CellGrads {
    Rnn(RnnGrads),
    Lstm(LstmGrads),
    Gru(GruGrads),
}

/// Value-for-value mirror of the model's learnable parameters.
#[derive(Clone, Debug)]
pub struct GradientSet {
    pub cell: CellGrads,
    pub imp_phi: Vector,
    pub imp_zeta: Vector,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> GradientSet {
        let m = model.hidden_dim();
        let n = model.input_dim();
        let q = model.output_dim();
        let cell = match &model.cell {
            CellParams::Rnn(_) => CellGrads::Rnn(RnnGrads {
                w_h: Matrix::zeros(m, n),
                u_h: Matrix::zeros(m, m),
                b_h: Vector::zeros(m),
                phi_h: Matrix::zeros(m, m),
                varsigma_h: Vector::zeros(m),
                w_y: Matrix::zeros(q, m),
                b_y: Vector::zeros(q),
            }),
            CellParams::Lstm(_) => CellGrads::Lstm(LstmGrads {
                w_f: Matrix::zeros(m, n),
                w_i: Matrix::zeros(m, n),
                w_z: Matrix::zeros(m, n),
                w_o: Matrix::zeros(m, n),
                u_f: Matrix::zeros(m, m),
                u_i: Matrix::zeros(m, m),
                u_z: Matrix::zeros(m, m),
                u_o: Matrix::zeros(m, m),
                v_f: Vector::zeros(m),
                v_i: Vector::zeros(m),
                v_o: Vector::zeros(m),
                b_f: Vector::zeros(m),
                b_i: Vector::zeros(m),
                b_z: Vector::zeros(m),
                b_o: Vector::zeros(m),
                phi_h: Matrix::zeros(m, m),
                varsigma_h: Vector::zeros(m),
                phi_c: Matrix::zeros(m, m),
                varsigma_c: Vector::zeros(m),
                w_y: Matrix::zeros(q, m),
                b_y: Vector::zeros(q),
            }),
            CellParams::Gru(_) => CellGrads::Gru(GruGrads {
                w_z: Matrix::zeros(m, n),
                w_r: Matrix::zeros(m, n),
                w_c: Matrix::zeros(m, n),
                u_z: Matrix::zeros(m, m),
                u_r: Matrix::zeros(m, m),
                u_c: Matrix::zeros(m, m),
                b_z: Vector::zeros(m),
                b_r: Vector::zeros(m),
                b_c: Vector::zeros(m),
                phi_h: Matrix::zeros(m, m),
                varsigma_h: Vector::zeros(m),
                w_y: Matrix::zeros(q, m),
                b_y: Vector::zeros(q),
            }),
        };
        GradientSet {
            cell,
            imp_phi: Vector::zeros(model.imputer.n_features()),
            imp_zeta: Vector::zeros(model.imputer.n_features()),
        }
    }

    /// Tensor slices aligned with [`Model::tensor_descs`].
    pub fn tensor_data(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.cell {
            CellGrads::Rnn(g) => out.extend([
                g.w_h.data(),
                g.u_h.data(),
                g.b_h.data(),
                g.phi_h.data(),
                g.varsigma_h.data(),
                g.w_y.data(),
                g.b_y.data(),
            ]),
            CellGrads::Lstm(g) => out.extend([
                g.w_f.data(),
                g.w_i.data(),
                g.w_z.data(),
                g.w_o.data(),
                g.u_f.data(),
                g.u_i.data(),
                g.u_z.data(),
                g.u_o.data(),
                g.v_f.data(),
                g.v_i.data(),
                g.v_o.data(),
                g.b_f.data(),
                g.b_i.data(),
                g.b_z.data(),
                g.b_o.data(),
                g.phi_h.data(),
                g.varsigma_h.data(),
                g.phi_c.data(),
                g.varsigma_c.data(),
                g.w_y.data(),
                g.b_y.data(),
            ]),
            CellGrads::Gru(g) => out.extend([
                g.w_z.data(),
                g.w_r.data(),
                g.w_c.data(),
                g.u_z.data(),
                g.u_r.data(),
                g.u_c.data(),
                g.b_z.data(),
                g.b_r.data(),
                g.b_c.data(),
                g.phi_h.data(),
                g.varsigma_h.data(),
                g.w_y.data(),
                g.b_y.data(),
            ]),
        }
        out.push(self.imp_phi.data());
        out.push(self.imp_zeta.data());
        out
    }

    pub fn tensor_data_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.cell {
            CellGrads::Rnn(g) => {
                out.push(g.w_h.data_mut());
                out.push(g.u_h.data_mut());
                out.push(g.b_h.data_mut());
                out.push(g.phi_h.data_mut());
                out.push(g.varsigma_h.data_mut());
                out.push(g.w_y.data_mut());
                out.push(g.b_y.data_mut());
            }
            CellGrads::Lstm(g) => {
                out.push(g.w_f.data_mut());
                out.push(g.w_i.data_mut());
                out.push(g.w_z.data_mut());
                out.push(g.w_o.data_mut());
                out.push(g.u_f.data_mut());
                out.push(g.u_i.data_mut());
                out.push(g.u_z.data_mut());
                out.push(g.u_o.data_mut());
                out.push(g.v_f.data_mut());
                out.push(g.v_i.data_mut());
                out.push(g.v_o.data_mut());
                out.push(g.b_f.data_mut());
                out.push(g.b_i.data_mut());
                out.push(g.b_z.data_mut());
                out.push(g.b_o.data_mut());
                out.push(g.phi_h.data_mut());
                out.push(g.varsigma_h.data_mut());
                out.push(g.phi_c.data_mut());
                out.push(g.varsigma_c.data_mut());
                out.push(g.w_y.data_mut());
                out.push(g.b_y.data_mut());
            }
            CellGrads::Gru(g) => {
                out.push(g.w_z.data_mut());
                out.push(g.w_r.data_mut());
                out.push(g.w_c.data_mut());
                out.push(g.u_z.data_mut());
                out.push(g.u_r.data_mut());
                out.push(g.u_c.data_mut());
                out.push(g.b_z.data_mut());
                out.push(g.b_r.data_mut());
                out.push(g.b_c.data_mut());
                out.push(g.phi_h.data_mut());
                out.push(g.varsigma_h.data_mut());
                out.push(g.w_y.data_mut());
                out.push(g.b_y.data_mut());
            }
        }
        out.push(self.imp_phi.data_mut());
        out.push(self.imp_zeta.data_mut());
        out
    }

    /// `self += s · other`; used to accumulate per-sequence gradients.
    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) {
        let mut mine = self.tensor_data_mut();
        let theirs = other.tensor_data();
        assert_eq!(mine.len(), theirs.len(), "gradient sets differ in layout");
        for (a, b) in mine.iter_mut().zip(theirs) {
            assert_eq!(a.len(), b.len(), "gradient tensors differ in shape");
            for (x, y) in a.iter_mut().zip(b.iter()) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensor_data_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensor_data()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensor_data().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Routes the input gradient of one step into the imputer parameters.
///
/// Imputed cells carry gradient into `φ` and `ζ` only; the source
/// observation is a constant. `d_x` is the gradient with respect to the
/// scaled input, so the mask scale reappears here.
fn accumulate_imputer(
    imp_phi: &mut Vector,
    imp_zeta: &mut Vector,
    prep: &PreparedSequence,
    step: usize,
    d_x: &Vector,
    input_scale: f64,
) {
    for cell in &prep.imputed[step] {
        let g = d_x.get(cell.feature) * input_scale;
        imp_phi.set(cell.feature, imp_phi.get(cell.feature) + g * cell.gap * cell.source_value);
        imp_zeta.set(cell.feature, imp_zeta.get(cell.feature) + g * cell.gap);
    }
}

fn car_backward_into(
    layer: &CarLayer,
    car_input: &Vector,
    delta_t: f64,
    d_out: &Vector,
    phi_acc: &mut Matrix,
    varsigma_acc: &mut Vector,
) -> Vector {
    let (d_in, d_phi, d_sig) = car_correct_backward(layer, car_input, delta_t, d_out);
    phi_acc.add_scaled(&d_phi, 1.0);
    varsigma_acc.add_scaled(&d_sig, 1.0);
    d_in
}

fn backward_rnn_impl(
    p: &RnnParams,
    imputer_features: usize,
    prep: &PreparedSequence,
    caches: &[RnnStepCache],
    dybar: &Matrix,
) -> GradientSet {
    let m = p.b_h.len();
    let mut g = GradientSet {
        cell: CellGrads::Rnn(RnnGrads {
            w_h: Matrix::zeros(m, p.w_h.cols()),
            u_h: Matrix::zeros(m, m),
            b_h: Vector::zeros(m),
            phi_h: Matrix::zeros(m, m),
            varsigma_h: Vector::zeros(m),
            w_y: Matrix::zeros(p.out.w.rows(), m),
            b_y: Vector::zeros(p.out.b.len()),
        }),
        imp_phi: Vector::zeros(imputer_features),
        imp_zeta: Vector::zeros(imputer_features),
    };
    let GradientSet { cell, imp_phi, imp_zeta } = &mut g;
    let CellGrads::Rnn(cg) = cell else { unreachable!() };

    let mut d_hbar_next = Vector::zeros(m);
    for k in (0..caches.len()).rev() {
        let s = &caches[k];
        let dy = Vector::from_slice(dybar.row(k));

        // δh_k = W_yᵀ δȳ_k + U_hᵀ δh̄̃_{k+1}
        let mut d_h = p.out.w.matvec_t(&dy);
        d_h.add_scaled(&p.u_h.matvec_t(&d_hbar_next), 1.0);

        let d_htilde =
            car_backward_into(&p.car_h, &s.h_tilde, s.delta_t, &d_h, &mut cg.phi_h, &mut cg.varsigma_h);
        let d_hbar = d_htilde.hadamard(&p.act_h.deriv(&s.h_bar));

        cg.w_y.add_outer(&dy, &s.h, 1.0);
        cg.b_y.add_scaled(&dy, 1.0);
        cg.w_h.add_outer(&d_hbar, &s.x, 1.0);
        cg.u_h.add_outer(&d_hbar, &s.h_prev, 1.0);
        cg.b_h.add_scaled(&d_hbar, 1.0);

        let d_x = p.w_h.matvec_t(&d_hbar);
        accumulate_imputer(imp_phi, imp_zeta, prep, k, &d_x, s.input_scale);
        d_hbar_next = d_hbar;
    }
    g
}

fn backward_lstm_impl(
    p: &LstmParams,
    imputer_features: usize,
    prep: &PreparedSequence,
    caches: &[LstmStepCache],
    dybar: &Matrix,
) -> GradientSet {
    let m = p.b_f.len();
    let n = p.w_f.cols();
    let mut g = GradientSet {
        cell: CellGrads::Lstm(LstmGrads {
            w_f: Matrix::zeros(m, n),
            w_i: Matrix::zeros(m, n),
            w_z: Matrix::zeros(m, n),
            w_o: Matrix::zeros(m, n),
            u_f: Matrix::zeros(m, m),
            u_i: Matrix::zeros(m, m),
            u_z: Matrix::zeros(m, m),
            u_o: Matrix::zeros(m, m),
            v_f: Vector::zeros(m),
            v_i: Vector::zeros(m),
            v_o: Vector::zeros(m),
            b_f: Vector::zeros(m),
            b_i: Vector::zeros(m),
            b_z: Vector::zeros(m),
            b_o: Vector::zeros(m),
            phi_h: Matrix::zeros(m, m),
            varsigma_h: Vector::zeros(m),
            phi_c: Matrix::zeros(m, m),
            varsigma_c: Vector::zeros(m),
            w_y: Matrix::zeros(p.out.w.rows(), m),
            b_y: Vector::zeros(p.out.b.len()),
        }),
        imp_phi: Vector::zeros(imputer_features),
        imp_zeta: Vector::zeros(imputer_features),
    };
    let GradientSet { cell, imp_phi, imp_zeta } = &mut g;
    let CellGrads::Lstm(cg) = cell else { unreachable!() };

    let mut d_fbar_next = Vector::zeros(m);
    let mut d_ibar_next = Vector::zeros(m);
    let mut d_zbar_next = Vector::zeros(m);
    let mut d_obar_next = Vector::zeros(m);
    let mut d_cbar_next = Vector::zeros(m);
    let mut f_next = Vector::zeros(m);

    for k in (0..caches.len()).rev() {
        let s = &caches[k];
        let dy = Vector::from_slice(dybar.row(k));

        // δh_k = W_yᵀ δȳ_k + Σ_π U_πᵀ δπ̄̃_{k+1}
        let mut d_h = p.out.w.matvec_t(&dy);
        d_h.add_scaled(&p.u_f.matvec_t(&d_fbar_next), 1.0);
        d_h.add_scaled(&p.u_i.matvec_t(&d_ibar_next), 1.0);
        d_h.add_scaled(&p.u_z.matvec_t(&d_zbar_next), 1.0);
        d_h.add_scaled(&p.u_o.matvec_t(&d_obar_next), 1.0);

        let d_htilde =
            car_backward_into(&p.car_h, &s.h_tilde, s.delta_t, &d_h, &mut cg.phi_h, &mut cg.varsigma_h);

        // Output gate and activated cell pick up the split of δh̃.
        let d_o = d_htilde.hadamard(&s.c_tilde);
        let d_obar = d_o.hadamard(&p.act_g.deriv(&s.o_bar));
        let d_ctilde = d_htilde.hadamard(&s.o);

        // δc_k: peepholes of the next-step forget/input gates, this step's
        // output gate, and the cell recurrence through f̃_{k+1}.
        let mut d_c = d_cbar_next.hadamard(&f_next);
        if p.peepholes {
            for idx in 0..m {
                d_c.set(
                    idx,
                    d_c.get(idx)
                        + p.v_f.get(idx) * d_fbar_next.get(idx)
                        + p.v_i.get(idx) * d_ibar_next.get(idx)
                        + p.v_o.get(idx) * d_obar.get(idx),
                );
            }
        }

        let mut d_cbar =
            car_backward_into(&p.car_c, &s.c_bar, s.delta_t, &d_c, &mut cg.phi_c, &mut cg.varsigma_c);
        d_cbar.add_scaled(&d_ctilde.hadamard(&p.act_h.deriv(&s.c_bar)), 1.0);

        let d_z = d_cbar.hadamard(&s.i);
        let d_zbar = d_z.hadamard(&p.act_c.deriv(&s.z_bar));
        let d_i = d_cbar.hadamard(&s.z);
        let d_ibar = d_i.hadamard(&p.act_g.deriv(&s.i_bar));
        let d_f = d_cbar.hadamard(&s.c_prev);
        let d_fbar = d_f.hadamard(&p.act_g.deriv(&s.f_bar));

        cg.w_y.add_outer(&dy, &s.h, 1.0);
        cg.b_y.add_scaled(&dy, 1.0);
        cg.w_f.add_outer(&d_fbar, &s.x, 1.0);
        cg.w_i.add_outer(&d_ibar, &s.x, 1.0);
        cg.w_z.add_outer(&d_zbar, &s.x, 1.0);
        cg.w_o.add_outer(&d_obar, &s.x, 1.0);
        cg.u_f.add_outer(&d_fbar, &s.h_prev, 1.0);
        cg.u_i.add_outer(&d_ibar, &s.h_prev, 1.0);
        cg.u_z.add_outer(&d_zbar, &s.h_prev, 1.0);
        cg.u_o.add_outer(&d_obar, &s.h_prev, 1.0);
        cg.b_f.add_scaled(&d_fbar, 1.0);
        cg.b_i.add_scaled(&d_ibar, 1.0);
        cg.b_z.add_scaled(&d_zbar, 1.0);
        cg.b_o.add_scaled(&d_obar, 1.0);
        if p.peepholes {
            // δV_f/δV_i read the previous cell, δV_o the current corrected one.
            cg.v_f.add_scaled(&d_fbar.hadamard(&s.c_prev), 1.0);
            cg.v_i.add_scaled(&d_ibar.hadamard(&s.c_prev), 1.0);
            cg.v_o.add_scaled(&d_obar.hadamard(&s.c), 1.0);
        }

        let mut d_x = p.w_f.matvec_t(&d_fbar);
        d_x.add_scaled(&p.w_i.matvec_t(&d_ibar), 1.0);
        d_x.add_scaled(&p.w_z.matvec_t(&d_zbar), 1.0);
        d_x.add_scaled(&p.w_o.matvec_t(&d_obar), 1.0);
        accumulate_imputer(imp_phi, imp_zeta, prep, k, &d_x, s.input_scale);

        d_fbar_next = d_fbar;
        d_ibar_next = d_ibar;
        d_zbar_next = d_zbar;
        d_obar_next = d_obar;
        d_cbar_next = d_cbar;
        f_next = s.f.clone();
    }
    g
}

fn backward_gru_impl(
    p: &GruParams,
    imputer_features: usize,
    prep: &PreparedSequence,
    caches: &[GruStepCache],
    dybar: &Matrix,
) -> GradientSet {
    let m = p.b_z.len();
    let n = p.w_z.cols();
    let mut g = GradientSet {
        cell: CellGrads::Gru(GruGrads {
            w_z: Matrix::zeros(m, n),
            w_r: Matrix::zeros(m, n),
            w_c: Matrix::zeros(m, n),
            u_z: Matrix::zeros(m, m),
            u_r: Matrix::zeros(m, m),
            u_c: Matrix::zeros(m, m),
            b_z: Vector::zeros(m),
            b_r: Vector::zeros(m),
            b_c: Vector::zeros(m),
            phi_h: Matrix::zeros(m, m),
            varsigma_h: Vector::zeros(m),
            w_y: Matrix::zeros(p.out.w.rows(), m),
            b_y: Vector::zeros(p.out.b.len()),
        }),
        imp_phi: Vector::zeros(imputer_features),
        imp_zeta: Vector::zeros(imputer_features),
    };
    let GradientSet { cell, imp_phi, imp_zeta } = &mut g;
    let CellGrads::Gru(cg) = cell else { unreachable!() };

    let mut d_zbar_next = Vector::zeros(m);
    let mut d_rbar_next = Vector::zeros(m);
    let mut d_cbar_next = Vector::zeros(m);
    let mut d_htilde_next = Vector::zeros(m);
    let mut z_next = Vector::zeros(m);
    let mut r_next = Vector::zeros(m);

    for k in (0..caches.len()).rev() {
        let s = &caches[k];
        let dy = Vector::from_slice(dybar.row(k));

        // δh_k = W_yᵀδȳ + U_zᵀδz̄̃₊ + U_rᵀδr̄̃₊ + δh̃₊⊙z̃₊ + r̃₊⊙(U_cᵀδc̄̃₊)
        let mut d_h = p.out.w.matvec_t(&dy);
        d_h.add_scaled(&p.u_z.matvec_t(&d_zbar_next), 1.0);
        d_h.add_scaled(&p.u_r.matvec_t(&d_rbar_next), 1.0);
        d_h.add_scaled(&d_htilde_next.hadamard(&z_next), 1.0);
        d_h.add_scaled(&r_next.hadamard(&p.u_c.matvec_t(&d_cbar_next)), 1.0);

        let d_htilde =
            car_backward_into(&p.car_h, &s.h_tilde, s.delta_t, &d_h, &mut cg.phi_h, &mut cg.varsigma_h);

        let mut d_ctilde = Vector::zeros(m);
        for idx in 0..m {
            d_ctilde.set(idx, d_htilde.get(idx) * (1.0 - s.z.get(idx)));
        }
        let d_cbar = d_ctilde.hadamard(&p.act_h.deriv(&s.c_bar));
        let ucd = p.u_c.matvec_t(&d_cbar);
        let d_r = s.h_prev.hadamard(&ucd);
        let d_rbar = d_r.hadamard(&p.act_g.deriv(&s.r_bar));
        let d_z = d_htilde.hadamard(&s.h_prev.sub(&s.c_tilde));
        let d_zbar = d_z.hadamard(&p.act_g.deriv(&s.z_bar));

        cg.w_y.add_outer(&dy, &s.h, 1.0);
        cg.b_y.add_scaled(&dy, 1.0);
        cg.w_z.add_outer(&d_zbar, &s.x, 1.0);
        cg.w_r.add_outer(&d_rbar, &s.x, 1.0);
        cg.w_c.add_outer(&d_cbar, &s.x, 1.0);
        cg.u_z.add_outer(&d_zbar, &s.h_prev, 1.0);
        cg.u_r.add_outer(&d_rbar, &s.h_prev, 1.0);
        cg.u_c.add_outer(&d_cbar, &s.r.hadamard(&s.h_prev), 1.0);
        cg.b_z.add_scaled(&d_zbar, 1.0);
        cg.b_r.add_scaled(&d_rbar, 1.0);
        cg.b_c.add_scaled(&d_cbar, 1.0);

        let mut d_x = p.w_z.matvec_t(&d_zbar);
        d_x.add_scaled(&p.w_r.matvec_t(&d_rbar), 1.0);
        d_x.add_scaled(&p.w_c.matvec_t(&d_cbar), 1.0);
        accumulate_imputer(imp_phi, imp_zeta, prep, k, &d_x, s.input_scale);

        d_zbar_next = d_zbar;
        d_rbar_next = d_rbar;
        d_cbar_next = d_cbar;
        d_htilde_next = d_htilde;
        z_next = s.z.clone();
        r_next = s.r.clone();
    }
    g
}

/// Backward pass for the whole model. The cache must come from a forward
/// pass of the same model over the same prepared sequence.
pub fn backward(
    model: &Model,
    prep: &PreparedSequence,
    cache: &ForwardCache,
    dybar: &Matrix,
) -> Result<GradientSet> {
    let nf = model.imputer.n_features();
    match (&model.cell, cache) {
        (CellParams::Rnn(p), ForwardCache::Rnn(c)) => {
            Ok(backward_rnn_impl(p, nf, prep, c, dybar))
        }
        (CellParams::Lstm(p), ForwardCache::Lstm(c)) => {
            Ok(backward_lstm_impl(p, nf, prep, c, dybar))
        }
        (CellParams::Gru(p), ForwardCache::Gru(c)) => {
            Ok(backward_gru_impl(p, nf, prep, c, dybar))
        }
        _ => Err(Error::CacheMismatch("cell type and cache variant differ")),
    }
}

/// Full masked loss of a model on one prepared sequence (forward only).
pub fn sequence_loss(model: &Model, prep: &PreparedSequence) -> Result<f64> {
    let (y, _) = forward_sequence(model, prep)?;
    Ok(loss_and_output_grad(&y, &prep.targets, &prep.target_mask)?.0)
}

/// Central finite difference of the full masked loss along one parameter
/// coordinate: `(L(θ+h) − L(θ−h)) / 2h`, with `h = 1e-5·max(1, |θ|)` when not
/// given.
pub fn finite_difference(
    model: &Model,
    prep: &PreparedSequence,
    tensor_index: usize,
    offset: usize,
    h: Option<f64>,
) -> f64 {
    let mut probe = model.clone();
    let theta = probe.tensor_data()[tensor_index][offset];
    let h = h.unwrap_or_else(|| 1e-5 * theta.abs().max(1.0));

    probe.tensor_data_mut()[tensor_index][offset] = theta + h;
    let up = sequence_loss(&probe, prep).expect("finite_difference: forward failed");
    probe.tensor_data_mut()[tensor_index][offset] = theta - h;
    let down = sequence_loss(&probe, prep).expect("finite_difference: forward failed");
    (up - down) / (2.0 * h)
}

/// Worst coordinate of one tensor in a gradient comparison.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Absolute agreement below which a coordinate counts as exact: central
/// differences of a double-precision loss carry ~1e-12 of roundoff, so
/// demanding tighter agreement would test the oracle, not the gradient.
pub const FD_RESOLUTION: f64 = 1e-10;

/// Compares a precomputed gradient set against Richardson-extrapolated
/// central differences, coordinate by coordinate. Relative error uses
/// `|a − fd| / max(|fd|, 1e-8)`; coordinates agreeing within
/// [`FD_RESOLUTION`] absolute are at the oracle's own measurement floor and
/// score zero.
pub fn compare_against_fd(
    model: &Model,
    prep: &PreparedSequence,
    grads: &GradientSet,
) -> Vec<GroupCheck> {
    let descs = model.tensor_descs();
    let grad_tensors = grads.tensor_data();
    let mut out = Vec::with_capacity(descs.len());
    for (ti, desc) in descs.iter().enumerate() {
        let g = grad_tensors[ti];
        let mut worst = GroupCheck {
            name: desc.name,
            max_rel_err: 0.0,
            worst_offset: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (offset, &analytic) in g.iter().enumerate() {
            let theta = model.tensor_data()[ti][offset];
            let h = 1e-4 * theta.abs().max(1.0);
            // Two central differences extrapolated to kill the O(h²) term.
            let coarse = finite_difference(model, prep, ti, offset, Some(h));
            let fine = finite_difference(model, prep, ti, offset, Some(h / 2.0));
            let fd = (4.0 * fine - coarse) / 3.0;
            let abs_diff = (analytic - fd).abs();
            let rel = if abs_diff <= FD_RESOLUTION {
                0.0
            } else {
                abs_diff / fd.abs().max(1e-8)
            };
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.worst_offset = offset;
                worst.analytic = analytic;
                worst.numeric = fd;
            }
        }
        out.push(worst);
    }
    out
}

/// One gradient-check run: a randomized model/sequence pair and the per-group
/// comparison results.
#[derive(Clone, Debug)]
pub struct GradcheckRun {
    pub cell: CellKind,
    pub label: String,
    pub groups: Vec<GroupCheck>,
}

impl GradcheckRun {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Builds a random binned sequence with irregular gaps, partial observation,
/// and occasionally a fully missing feature; the prepared view of it is what
/// the gradient checks run on.
pub fn random_prepared_sequence(
    rng: &mut ChaCha8Rng,
    n_features: usize,
    steps: usize,
    tau: f64,
) -> PreparedSequence {
    let bins = steps + 1;
    let mut values = Matrix::zeros(bins, n_features);
    let mut mask = Matrix::zeros(bins, n_features);
    let drop_feature = if rng.gen::<f64>() < 0.3 {
        Some(rng.gen_range(0..n_features))
    } else {
        None
    };
    for b in 0..bins {
        loop {
            for nf in 0..n_features {
                let observed = Some(nf) != drop_feature && rng.gen::<f64>() < 0.75;
                mask.set(b, nf, if observed { 1.0 } else { 0.0 });
                values.set(b, nf, if observed { rng.gen_range(-1.0..1.0) } else { 0.0 });
            }
            // Retained bins always contain at least one observation.
            if mask.row(b).iter().any(|&m| m == 1.0) {
                break;
            }
        }
    }
    let mut rep_times = Vec::with_capacity(bins);
    let mut t = 0.0;
    for b in 0..bins {
        if b > 0 {
            t += rng.gen_range(0.5 * tau..1.8 * tau);
        }
        rep_times.push(t);
    }
    let mut delta_t = vec![tau];
    for b in 1..bins {
        delta_t.push(rep_times[b] - rep_times[b - 1]);
    }
    let binned = BinnedSequence {
        values,
        mask,
        rep_times,
        delta_t,
    };
    let mut prep = crate::cells::prepare_sequence(&binned, None);
    // Guarantee supervision somewhere.
    if prep.target_mask.data().iter().sum::<f64>() == 0.0 {
        prep.target_mask.set(0, 0, 1.0);
        prep.targets.set(0, 0, 0.1);
    }
    prep
}

/// Randomizes every tensor of a freshly initialized model so that no gradient
/// path is structurally dormant (corrections and imputer included).
pub fn randomize_model(model: &mut Model, rng: &mut ChaCha8Rng) {
    let descs = model.tensor_descs();
    for (ti, data) in model.tensor_data_mut().into_iter().enumerate() {
        let range = match descs[ti].kind {
            crate::cells::TensorKind::Weight | crate::cells::TensorKind::Bias => 0.5,
            _ => 0.3,
        };
        for x in data {
            *x = rng.gen_range(-range..range);
        }
    }
}

/// The full randomized gradient-check suite for one cell kind.
///
/// Covers the shapes N∈{2,3}, M∈{4,6}, K∈{3,7} with irregular gaps and random
/// masks; the LSTM additionally sweeps peepholes on/off and both hidden
/// activations. Returns one run per configuration.
pub fn run_gradcheck(kind: CellKind, seed: u64, configs_per_variant: usize) -> Vec<GradcheckRun> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::new();

    let variants: Vec<(bool, Activation, String)> = match kind {
        CellKind::CarLstm | CellKind::Lstm => [
            (true, Activation::Identity),
            (true, Activation::Tanh),
            (false, Activation::Identity),
            (false, Activation::Tanh),
        ]
        .iter()
        .map(|&(peep, act)| {
            (
                peep,
                act,
                format!("peepholes={} act_h={}", if peep { "on" } else { "off" }, act.name()),
            )
        })
        .collect(),
        _ => vec![
            (false, Activation::Identity, "act_h=identity".to_string()),
            (false, Activation::Tanh, "act_h=tanh".to_string()),
        ],
    };

    for (peepholes, act_h, label) in &variants {
        for cfg in 0..configs_per_variant {
            let n = [2usize, 3][rng.gen_range(0..2)];
            let m = [4usize, 6][rng.gen_range(0..2)];
            let steps = [3usize, 7][rng.gen_range(0..2)];
            let tau = 0.5;

            let mut model = init_params(kind, n, m, n, tau, *act_h, *peepholes, &mut rng);
            randomize_model(&mut model, &mut rng);
            if let CellParams::Lstm(p) = &mut model.cell {
                if !p.peepholes {
                    // Unused peepholes stay at zero; their FD is exactly zero.
                    for v in [&mut p.v_f, &mut p.v_i, &mut p.v_o] {
                        for x in v.data_mut() {
                            *x = 0.0;
                        }
                    }
                }
            }
            let prep = random_prepared_sequence(&mut rng, n, steps, tau);

            let (y, cache) = forward_sequence(&model, &prep).expect("gradcheck forward");
            let (_, dybar) =
                loss_and_output_grad(&y, &prep.targets, &prep.target_mask).expect("gradcheck loss");
            let grads = backward(&model, &prep, &cache, &dybar).expect("gradcheck backward");
            let groups = compare_against_fd(&model, &prep, &grads);
            runs.push(GradcheckRun {
                cell: kind,
                label: format!("{label} config={cfg} n={n} m={m} k={steps}"),
                groups,
            });
        }
    }
    runs
}
