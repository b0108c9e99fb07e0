//! Forward passes for the three corrected recurrent cells, the regression
//! output layer, sequence rollout with caching, and the model container.
//!
//! Every cell computes its regularized state the standard way and then runs
//! it through the time-gap correction, so `Δt_k = τ` for all steps makes the
//! forward pass equal to the corresponding standard RNN/LSTM/GRU. The LSTM
//! applies the correction to the *pre-activation* cell state, and its output
//! gate peephole reads the corrected cell; the forget/input peepholes read
//! the previous corrected cell.
//!
//! The cache keeps every pre- and post-activation vector the backward
//! equations need, so the backward pass recomputes nothing.

use crate::bptt::scale_inputs;
use crate::car::{car_correct, CarLayer, UnivariateImputer};
use crate::dataset::{apply_baseline_fill, BinnedSequence, FillMode};
use crate::error::{Error, Result};
use crate::numerics::{Activation, Matrix, Vector};

/// Which cell the model uses, and whether the correction layer (and imputer)
/// are trainable. The plain variants keep the correction frozen at zero,
/// which is how the fill-based baselines are realized on the same kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    CarRnn,
    CarLstm,
    CarGru,
    Rnn,
    Lstm,
    Gru,
}

impl CellKind {
    pub fn car_trainable(self) -> bool {
        matches!(self, CellKind::CarRnn | CellKind::CarLstm | CellKind::CarGru)
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::CarRnn => "car_rnn",
            CellKind::CarLstm => "car_lstm",
            CellKind::CarGru => "car_gru",
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s {
            "car_rnn" => Some(CellKind::CarRnn),
            "car_lstm" => Some(CellKind::CarLstm),
            "car_gru" => Some(CellKind::CarGru),
            "rnn" => Some(CellKind::Rnn),
            "lstm" => Some(CellKind::Lstm),
            "gru" => Some(CellKind::Gru),
            _ => None,
        }
    }
}

/// Regression output layer `y = W_y h + b_y` (identity output activation).
#[derive(Clone, Debug)]
pub struct OutputLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl OutputLayer {
    pub fn apply(&self, h: &Vector) -> Vector {
        let mut y = self.w.matvec(h);
        y.add_scaled(&self.b, 1.0);
        y
    }
}

#[derive(Clone, Debug)]
pub struct RnnParams {
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vector,
    pub car_h: CarLayer,
    pub out: OutputLayer,
    pub act_h: Activation,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_z: Matrix,
    pub w_o: Matrix,
    pub u_f: Matrix,
    pub u_i: Matrix,
    pub u_z: Matrix,
    pub u_o: Matrix,
    /// Diagonals of the peephole matrices; unused when `peepholes` is off.
    pub v_f: Vector,
    pub v_i: Vector,
    pub v_o: Vector,
    pub b_f: Vector,
    pub b_i: Vector,
    pub b_z: Vector,
    pub b_o: Vector,
    pub car_h: CarLayer,
    pub car_c: CarLayer,
    pub out: OutputLayer,
    pub act_g: Activation,
    pub act_c: Activation,
    pub act_h: Activation,
    pub peepholes: bool,
}

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_c: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_c: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_c: Vector,
    pub car_h: CarLayer,
    pub out: OutputLayer,
    pub act_g: Activation,
    pub act_h: Activation,
}

#[derive(Clone, Debug)]
pub enum CellParams {
    Rnn(RnnParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

/// The full trainable model: one cell plus the univariate imputer.
#[derive(Clone, Debug)]
pub struct Model {
    pub kind: CellKind,
    pub cell: CellParams,
    pub imputer: UnivariateImputer,
}

impl Model {
    pub fn hidden_dim(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(p) => p.b_h.len(),
            CellParams::Lstm(p) => p.b_f.len(),
            CellParams::Gru(p) => p.b_z.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(p) => p.w_h.cols(),
            CellParams::Lstm(p) => p.w_f.cols(),
            CellParams::Gru(p) => p.w_z.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.cell {
            CellParams::Rnn(p) => p.out.b.len(),
            CellParams::Lstm(p) => p.out.b.len(),
            CellParams::Gru(p) => p.out.b.len(),
        }
    }

    pub fn output(&self) -> &OutputLayer {
        match &self.cell {
            CellParams::Rnn(p) => &p.out,
            CellParams::Lstm(p) => &p.out,
            CellParams::Gru(p) => &p.out,
        }
    }
}

/// One imputed input cell: the carried source value and the signed time gap
/// between the imputed bin and its source bin.
#[derive(Clone, Copy, Debug)]
pub struct ImputedCell {
    pub feature: usize,
    pub source_value: f64,
    pub gap: f64,
}

/// A binned sequence arranged for one-step-ahead training: inputs are bins
/// `0..K`, targets are bins `1..K+1`, and step `k` carries the gap between
/// bins `k` and `k−1` (the first gap is the nominal step by construction).
#[derive(Clone, Debug)]
pub struct PreparedSequence {
    /// K x N_in observed-or-filled values; zero at imputed and missing cells.
    pub inputs: Matrix,
    /// K x N_in availability after imputation/fill (imputed cells count).
    pub input_mask: Matrix,
    /// Per-step imputation plan; empty when a fill mode completed the inputs.
    pub imputed: Vec<Vec<ImputedCell>>,
    /// K x Q observed target values (zero where missing).
    pub targets: Matrix,
    /// K x Q observed-target mask; fills never touch the supervision side.
    pub target_mask: Matrix,
    pub delta_t: Vec<f64>,
    /// Representative timestamps of all K+1 bins.
    pub bin_times: Vec<f64>,
}

impl PreparedSequence {
    pub fn steps(&self) -> usize {
        self.inputs.rows()
    }

    pub fn n_in(&self) -> usize {
        self.inputs.cols()
    }

    pub fn n_out(&self) -> usize {
        self.targets.cols()
    }
}

/// Builds the model-ready view of a binned sequence.
///
/// With `fill = None` the input side keeps its gaps and an imputation plan is
/// computed per missing cell: the most recent earlier observation of the same
/// feature wins; a cell before the feature's first observation takes the
/// nearest later one with a negative gap; a feature never observed in the
/// sequence stays masked. With a fill mode, inputs are completed up front and
/// the plan is empty.
pub fn prepare_sequence(binned: &BinnedSequence, fill: Option<FillMode>) -> PreparedSequence {
    let bins = binned.n_bins();
    assert!(bins >= 2, "prepare_sequence: need at least 2 bins");
    let k = bins - 1;
    let n = binned.n_features();

    let (input_values, input_mask_full) = match fill {
        Some(mode) => {
            let filled = apply_baseline_fill(binned, mode);
            (filled.values, filled.mask)
        }
        None => (binned.values.clone(), binned.mask.clone()),
    };
    let n_in = input_values.cols();

    let mut inputs = Matrix::zeros(k, n_in);
    let mut input_mask = Matrix::zeros(k, n_in);
    let mut imputed: Vec<Vec<ImputedCell>> = vec![Vec::new(); k];

    for step in 0..k {
        for col in 0..n_in {
            if input_mask_full.get(step, col) == 1.0 {
                inputs.set(step, col, input_values.get(step, col));
                input_mask.set(step, col, 1.0);
            } else if fill.is_none() {
                // Imputation plan over the full grid (all bins observe data).
                let source = (0..step)
                    .rev()
                    .find(|&j| binned.mask.get(j, col) == 1.0)
                    .or_else(|| (step + 1..bins).find(|&j| binned.mask.get(j, col) == 1.0));
                if let Some(j) = source {
                    imputed[step].push(ImputedCell {
                        feature: col,
                        source_value: binned.values.get(j, col),
                        gap: binned.rep_times[step] - binned.rep_times[j],
                    });
                    input_mask.set(step, col, 1.0);
                }
            }
        }
    }

    let mut targets = Matrix::zeros(k, n);
    let mut target_mask = Matrix::zeros(k, n);
    for step in 0..k {
        for col in 0..n {
            if binned.mask.get(step + 1, col) == 1.0 {
                targets.set(step, col, binned.values.get(step + 1, col));
                target_mask.set(step, col, 1.0);
            }
        }
    }

    PreparedSequence {
        inputs,
        input_mask,
        imputed,
        targets,
        target_mask,
        delta_t: binned.delta_t[..k].to_vec(),
        bin_times: binned.rep_times.clone(),
    }
}

/// Composes the step-`k` input: fills imputed cells from the current imputer
/// parameters, then masks and scales. Returns the scaled input and the scale.
pub fn compose_input(
    imputer: &UnivariateImputer,
    prep: &PreparedSequence,
    step: usize,
) -> (Vector, f64) {
    let mut x = Vector::from_slice(prep.inputs.row(step));
    for cell in &prep.imputed[step] {
        // impute() takes (t_j, t_k); the plan stores gap = t_k − t_j.
        let v = imputer.impute(cell.feature, cell.source_value, 0.0, cell.gap);
        x.set(cell.feature, v);
    }
    scale_inputs(&x, prep.input_mask.row(step))
}

#[derive(Clone, Debug)]
pub struct RnnStepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub h_bar: Vector,
    pub h_tilde: Vector,
    pub h: Vector,
    pub delta_t: f64,
    pub input_scale: f64,
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub f_bar: Vector,
    pub f: Vector,
    pub i_bar: Vector,
    pub i: Vector,
    pub z_bar: Vector,
    pub z: Vector,
    /// Pre-activation cell state (the correction input).
    pub c_bar: Vector,
    /// Corrected cell state.
    pub c: Vector,
    /// σ_h of the pre-activation cell state.
    pub c_tilde: Vector,
    pub o_bar: Vector,
    pub o: Vector,
    pub h_tilde: Vector,
    pub h: Vector,
    pub delta_t: f64,
    pub input_scale: f64,
}

#[derive(Clone, Debug)]
pub struct GruStepCache {
    pub x: Vector,
    pub h_prev: Vector,
    pub z_bar: Vector,
    pub z: Vector,
    pub r_bar: Vector,
    pub r: Vector,
    pub c_bar: Vector,
    pub c_tilde: Vector,
    pub h_tilde: Vector,
    pub h: Vector,
    pub delta_t: f64,
    pub input_scale: f64,
}

/// Per-step vectors retained for the backward pass, one entry per timestep.
#[derive(Clone, Debug)]
pub enum ForwardCache {
    Rnn(Vec<RnnStepCache>),
    Lstm(Vec<LstmStepCache>),
    Gru(Vec<GruStepCache>),
}

impl ForwardCache {
    pub fn steps(&self) -> usize {
        match self {
            ForwardCache::Rnn(v) => v.len(),
            ForwardCache::Lstm(v) => v.len(),
            ForwardCache::Gru(v) => v.len(),
        }
    }
}

fn affine(w: &Matrix, x: &Vector, u: &Matrix, h: &Vector, b: &Vector) -> Vector {
    let mut out = w.matvec(x);
    out.add_scaled(&u.matvec(h), 1.0);
    out.add_scaled(b, 1.0);
    out
}

/// One corrected-RNN step.
pub fn rnn_step(
    p: &RnnParams,
    x: &Vector,
    h_prev: &Vector,
    delta_t: f64,
    input_scale: f64,
) -> Result<(Vector, RnnStepCache)> {
    let h_bar = affine(&p.w_h, x, &p.u_h, h_prev, &p.b_h);
    let h_tilde = p.act_h.apply(&h_bar);
    let h = car_correct(&p.car_h, &h_tilde, delta_t)?;
    let cache = RnnStepCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        h_bar,
        h_tilde,
        h: h.clone(),
        delta_t,
        input_scale,
    };
    Ok((h, cache))
}

/// One corrected peephole-LSTM step.
pub fn lstm_step(
    p: &LstmParams,
    x: &Vector,
    h_prev: &Vector,
    c_prev: &Vector,
    delta_t: f64,
    input_scale: f64,
) -> Result<(Vector, Vector, LstmStepCache)> {
    let m = p.b_f.len();
    let mut f_bar = affine(&p.w_f, x, &p.u_f, h_prev, &p.b_f);
    let mut i_bar = affine(&p.w_i, x, &p.u_i, h_prev, &p.b_i);
    if p.peepholes {
        for idx in 0..m {
            f_bar.set(idx, f_bar.get(idx) + p.v_f.get(idx) * c_prev.get(idx));
            i_bar.set(idx, i_bar.get(idx) + p.v_i.get(idx) * c_prev.get(idx));
        }
    }
    let f = p.act_g.apply(&f_bar);
    let i = p.act_g.apply(&i_bar);
    let z_bar = affine(&p.w_z, x, &p.u_z, h_prev, &p.b_z);
    let z = p.act_c.apply(&z_bar);

    let mut c_bar = f.hadamard(c_prev);
    c_bar.add_scaled(&i.hadamard(&z), 1.0);
    let c = car_correct(&p.car_c, &c_bar, delta_t)?;
    let c_tilde = p.act_h.apply(&c_bar);

    let mut o_bar = affine(&p.w_o, x, &p.u_o, h_prev, &p.b_o);
    if p.peepholes {
        // The output-gate peephole reads the corrected current cell.
        for idx in 0..m {
            o_bar.set(idx, o_bar.get(idx) + p.v_o.get(idx) * c.get(idx));
        }
    }
    let o = p.act_g.apply(&o_bar);
    let h_tilde = o.hadamard(&c_tilde);
    // No further activation on the recurrent vector.
    let h = car_correct(&p.car_h, &h_tilde, delta_t)?;

    let cache = LstmStepCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        f_bar,
        f,
        i_bar,
        i,
        z_bar,
        z,
        c_bar,
        c: c.clone(),
        c_tilde,
        o_bar,
        o,
        h_tilde,
        h: h.clone(),
        delta_t,
        input_scale,
    };
    Ok((h, c, cache))
}

/// One corrected-GRU step.
pub fn gru_step(
    p: &GruParams,
    x: &Vector,
    h_prev: &Vector,
    delta_t: f64,
    input_scale: f64,
) -> Result<(Vector, GruStepCache)> {
    let z_bar = affine(&p.w_z, x, &p.u_z, h_prev, &p.b_z);
    let z = p.act_g.apply(&z_bar);
    let r_bar = affine(&p.w_r, x, &p.u_r, h_prev, &p.b_r);
    let r = p.act_g.apply(&r_bar);
    let c_bar = affine(&p.w_c, x, &p.u_c, &r.hadamard(h_prev), &p.b_c);
    let c_tilde = p.act_h.apply(&c_bar);

    let mut h_tilde = Vector::zeros(z.len());
    for idx in 0..z.len() {
        h_tilde.set(
            idx,
            (1.0 - z.get(idx)) * c_tilde.get(idx) + z.get(idx) * h_prev.get(idx),
        );
    }
    let h = car_correct(&p.car_h, &h_tilde, delta_t)?;

    let cache = GruStepCache {
        x: x.clone(),
        h_prev: h_prev.clone(),
        z_bar,
        z,
        r_bar,
        r,
        c_bar,
        c_tilde,
        h_tilde,
        h: h.clone(),
        delta_t,
        input_scale,
    };
    Ok((h, cache))
}

/// Rolls the model over a prepared sequence. Returns the K x Q prediction
/// matrix and the cache for the backward pass. Hidden (and cell) state start
/// at zero.
pub fn forward_sequence(model: &Model, prep: &PreparedSequence) -> Result<(Matrix, ForwardCache)> {
    let steps = prep.steps();
    let q = model.output_dim();
    let mut y = Matrix::zeros(steps, q);

    macro_rules! check_finite {
        ($v:expr, $what:expr, $k:expr) => {
            if !$v.is_finite() {
                return Err(Error::NonFinite { what: $what, step: $k });
            }
        };
    }

    match &model.cell {
        CellParams::Rnn(p) => {
            let mut caches = Vec::with_capacity(steps);
            let mut h = Vector::zeros(model.hidden_dim());
            for k in 0..steps {
                let (x, scale) = compose_input(&model.imputer, prep, k);
                let (h_next, cache) = rnn_step(p, &x, &h, prep.delta_t[k], scale)
                    .map_err(|_| Error::NonFinite { what: "hidden state", step: k })?;
                check_finite!(h_next, "hidden state", k);
                y.row_mut(k).copy_from_slice(p.out.apply(&h_next).data());
                h = h_next;
                caches.push(cache);
            }
            Ok((y, ForwardCache::Rnn(caches)))
        }
        CellParams::Lstm(p) => {
            let mut caches = Vec::with_capacity(steps);
            let mut h = Vector::zeros(model.hidden_dim());
            let mut c = Vector::zeros(model.hidden_dim());
            for k in 0..steps {
                let (x, scale) = compose_input(&model.imputer, prep, k);
                let (h_next, c_next, cache) = lstm_step(p, &x, &h, &c, prep.delta_t[k], scale)
                    .map_err(|_| Error::NonFinite { what: "cell state", step: k })?;
                check_finite!(h_next, "hidden state", k);
                check_finite!(c_next, "cell state", k);
                y.row_mut(k).copy_from_slice(p.out.apply(&h_next).data());
                h = h_next;
                c = c_next;
                caches.push(cache);
            }
            Ok((y, ForwardCache::Lstm(caches)))
        }
        CellParams::Gru(p) => {
            let mut caches = Vec::with_capacity(steps);
            let mut h = Vector::zeros(model.hidden_dim());
            for k in 0..steps {
                let (x, scale) = compose_input(&model.imputer, prep, k);
                let (h_next, cache) = gru_step(p, &x, &h, prep.delta_t[k], scale)
                    .map_err(|_| Error::NonFinite { what: "hidden state", step: k })?;
                check_finite!(h_next, "hidden state", k);
                y.row_mut(k).copy_from_slice(p.out.apply(&h_next).data());
                h = h_next;
                caches.push(cache);
            }
            Ok((y, ForwardCache::Gru(caches)))
        }
    }
}

/// Closed-loop rollout: the first `n_context` steps consume true inputs, the
/// rest feed the previous prediction back in (fully available, so unscaled).
/// When the model was trained with the gap-concat fill, the extra input
/// column keeps taking the known bin gap.
pub fn rollout_predict(model: &Model, prep: &PreparedSequence, n_context: usize) -> Result<Matrix> {
    let steps = prep.steps();
    let q = model.output_dim();
    let n_in = prep.n_in();
    assert!(n_context >= 1, "rollout needs at least one context step");
    let concat_gap = n_in == q + 1;
    let mut y = Matrix::zeros(steps, q);

    let mut h = Vector::zeros(model.hidden_dim());
    let mut c = Vector::zeros(model.hidden_dim());
    let mut prev_pred: Option<Vector> = None;
    for k in 0..steps {
        let (x, scale) = if k < n_context {
            compose_input(&model.imputer, prep, k)
        } else {
            let pred = prev_pred.as_ref().expect("prediction available after context");
            let mut x = Vector::zeros(n_in);
            for idx in 0..q {
                x.set(idx, pred.get(idx));
            }
            if concat_gap {
                x.set(q, prep.delta_t[k]);
            }
            (x, 1.0)
        };
        let h_next = match &model.cell {
            CellParams::Rnn(p) => rnn_step(p, &x, &h, prep.delta_t[k], scale)?.0,
            CellParams::Lstm(p) => {
                let (hn, cn, _) = lstm_step(p, &x, &h, &c, prep.delta_t[k], scale)?;
                c = cn;
                hn
            }
            CellParams::Gru(p) => gru_step(p, &x, &h, prep.delta_t[k], scale)?.0,
        };
        if !h_next.is_finite() {
            return Err(Error::NonFinite { what: "hidden state", step: k });
        }
        let pred = model.output().apply(&h_next);
        y.row_mut(k).copy_from_slice(pred.data());
        prev_pred = Some(pred);
        h = h_next;
    }
    Ok(y)
}

/// Kinds of tensors in a model, used to route weight decay and freezing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    CarPhi,
    CarSigma,
    ImputerPhi,
    ImputerZeta,
}

impl TensorKind {
    /// L2 weight decay applies to weight and drift matrices, not to biases.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::Weight | TensorKind::CarPhi)
    }

    /// Whether this tensor is trainable given the cell kind.
    pub fn trainable(self, car_trainable: bool) -> bool {
        match self {
            TensorKind::Weight | TensorKind::Bias => true,
            _ => car_trainable,
        }
    }
}

/// Shape and role of one named tensor.
#[derive(Clone, Copy, Debug)]
pub struct TensorDesc {
    pub name: &'static str,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
}

impl Model {
    /// Canonical tensor order: cell tensors, then the imputer pair. Gradient
    /// sets list their tensors in the same order.
    pub fn tensor_descs(&self) -> Vec<TensorDesc> {
        let m = self.hidden_dim();
        let n = self.input_dim();
        let q = self.output_dim();
        let mut out = Vec::new();
        let mut push = |name: &'static str, kind: TensorKind, rows: usize, cols: usize| {
            out.push(TensorDesc { name, kind, rows, cols })
        };
        match &self.cell {
            CellParams::Rnn(_) => {
                push("W_h", TensorKind::Weight, m, n);
                push("U_h", TensorKind::Weight, m, m);
                push("b_h", TensorKind::Bias, 1, m);
                push("Phi_h", TensorKind::CarPhi, m, m);
                push("varsigma_h", TensorKind::CarSigma, 1, m);
            }
            CellParams::Lstm(_) => {
                push("W_f", TensorKind::Weight, m, n);
                push("W_i", TensorKind::Weight, m, n);
                push("W_z", TensorKind::Weight, m, n);
                push("W_o", TensorKind::Weight, m, n);
                push("U_f", TensorKind::Weight, m, m);
                push("U_i", TensorKind::Weight, m, m);
                push("U_z", TensorKind::Weight, m, m);
                push("U_o", TensorKind::Weight, m, m);
                push("V_f", TensorKind::Weight, 1, m);
                push("V_i", TensorKind::Weight, 1, m);
                push("V_o", TensorKind::Weight, 1, m);
                push("b_f", TensorKind::Bias, 1, m);
                push("b_i", TensorKind::Bias, 1, m);
                push("b_z", TensorKind::Bias, 1, m);
                push("b_o", TensorKind::Bias, 1, m);
                push("Phi_h", TensorKind::CarPhi, m, m);
                push("varsigma_h", TensorKind::CarSigma, 1, m);
                push("Phi_c", TensorKind::CarPhi, m, m);
                push("varsigma_c", TensorKind::CarSigma, 1, m);
            }
            CellParams::Gru(_) => {
                push("W_z", TensorKind::Weight, m, n);
                push("W_r", TensorKind::Weight, m, n);
                push("W_c", TensorKind::Weight, m, n);
                push("U_z", TensorKind::Weight, m, m);
                push("U_r", TensorKind::Weight, m, m);
                push("U_c", TensorKind::Weight, m, m);
                push("b_z", TensorKind::Bias, 1, m);
                push("b_r", TensorKind::Bias, 1, m);
                push("b_c", TensorKind::Bias, 1, m);
                push("Phi_h", TensorKind::CarPhi, m, m);
                push("varsigma_h", TensorKind::CarSigma, 1, m);
            }
        }
        push("W_y", TensorKind::Weight, q, m);
        push("b_y", TensorKind::Bias, 1, q);
        push("imp_phi", TensorKind::ImputerPhi, 1, self.imputer.n_features());
        push("imp_zeta", TensorKind::ImputerZeta, 1, self.imputer.n_features());
        out
    }

    /// Tensor data slices in [`Model::tensor_descs`] order.
    pub fn tensor_data(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.cell {
            CellParams::Rnn(p) => {
                out.extend([
                    p.w_h.data(),
                    p.u_h.data(),
                    p.b_h.data(),
                    p.car_h.phi.data(),
                    p.car_h.varsigma.data(),
                ]);
            }
            CellParams::Lstm(p) => {
                out.extend([
                    p.w_f.data(),
                    p.w_i.data(),
                    p.w_z.data(),
                    p.w_o.data(),
                    p.u_f.data(),
                    p.u_i.data(),
                    p.u_z.data(),
                    p.u_o.data(),
                    p.v_f.data(),
                    p.v_i.data(),
                    p.v_o.data(),
                    p.b_f.data(),
                    p.b_i.data(),
                    p.b_z.data(),
                    p.b_o.data(),
                    p.car_h.phi.data(),
                    p.car_h.varsigma.data(),
                    p.car_c.phi.data(),
                    p.car_c.varsigma.data(),
                ]);
            }
            CellParams::Gru(p) => {
                out.extend([
                    p.w_z.data(),
                    p.w_r.data(),
                    p.w_c.data(),
                    p.u_z.data(),
                    p.u_r.data(),
                    p.u_c.data(),
                    p.b_z.data(),
                    p.b_r.data(),
                    p.b_c.data(),
                    p.car_h.phi.data(),
                    p.car_h.varsigma.data(),
                ]);
            }
        }
        let (out_layer, imputer) = (self.output(), &self.imputer);
        out.push(out_layer.w.data());
        out.push(out_layer.b.data());
        out.push(imputer.phi.data());
        out.push(imputer.zeta.data());
        out
    }

    /// Mutable tensor data slices in [`Model::tensor_descs`] order.
    pub fn tensor_data_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        match &mut self.cell {
            CellParams::Rnn(p) => {
                out.push(p.w_h.data_mut());
                out.push(p.u_h.data_mut());
                out.push(p.b_h.data_mut());
                out.push(p.car_h.phi.data_mut());
                out.push(p.car_h.varsigma.data_mut());
                out.push(p.out.w.data_mut());
                out.push(p.out.b.data_mut());
            }
            CellParams::Lstm(p) => {
                out.push(p.w_f.data_mut());
                out.push(p.w_i.data_mut());
                out.push(p.w_z.data_mut());
                out.push(p.w_o.data_mut());
                out.push(p.u_f.data_mut());
                out.push(p.u_i.data_mut());
                out.push(p.u_z.data_mut());
                out.push(p.u_o.data_mut());
                out.push(p.v_f.data_mut());
                out.push(p.v_i.data_mut());
                out.push(p.v_o.data_mut());
                out.push(p.b_f.data_mut());
                out.push(p.b_i.data_mut());
                out.push(p.b_z.data_mut());
                out.push(p.b_o.data_mut());
                out.push(p.car_h.phi.data_mut());
                out.push(p.car_h.varsigma.data_mut());
                out.push(p.car_c.phi.data_mut());
                out.push(p.car_c.varsigma.data_mut());
                out.push(p.out.w.data_mut());
                out.push(p.out.b.data_mut());
            }
            CellParams::Gru(p) => {
                out.push(p.w_z.data_mut());
                out.push(p.w_r.data_mut());
                out.push(p.w_c.data_mut());
                out.push(p.u_z.data_mut());
                out.push(p.u_r.data_mut());
                out.push(p.u_c.data_mut());
                out.push(p.b_z.data_mut());
                out.push(p.b_r.data_mut());
                out.push(p.b_c.data_mut());
                out.push(p.car_h.phi.data_mut());
                out.push(p.car_h.varsigma.data_mut());
                out.push(p.out.w.data_mut());
                out.push(p.out.b.data_mut());
            }
        }
        out.push(self.imputer.phi.data_mut());
        out.push(self.imputer.zeta.data_mut());
        out
    }
}
