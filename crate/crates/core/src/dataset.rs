//! Sporadic-series ingestion: time binning, standardization, baseline fills,
//! CSV round-tripping, and a synthetic generator driven by a true
//! continuous-time autoregressive process.
//!
//! A sporadic series is irregular (variable gaps) and asynchronous (features
//! observed at different times). Binning aligns it onto a width-`τ` grid:
//! observations of the same feature in one bin are averaged, each retained
//! bin takes the mean of its observation times as representative timestamp,
//! and empty bins are dropped — which is exactly what makes the per-step
//! gaps `Δt_k` irregular downstream.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::car::expm;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Subject outcome label; carried through but unused by the regression path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Stable,
    Converting,
}

/// One observation: `feature` observed with `value` at `time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub time: f64,
    pub feature: usize,
    pub value: f64,
}

/// One subject's raw irregular, asynchronous observations.
#[derive(Clone, Debug)]
pub struct SporadicSeries {
    pub subject_id: String,
    pub observations: Vec<Observation>,
    pub label: Option<Label>,
}

impl SporadicSeries {
    /// Distinct observation timestamps, sorted ascending.
    pub fn distinct_times(&self) -> Vec<f64> {
        let mut times: Vec<f64> = self.observations.iter().map(|o| o.time).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        times
    }
}

/// A subject aligned onto the binning grid.
///
/// `mask[k][n] = 1` marks an observed cell. `delta_t[k]` is the gap between
/// consecutive representative timestamps, with `delta_t[0] = τ` so the first
/// step carries no correction.
#[derive(Clone, Debug)]
pub struct BinnedSequence {
    pub values: Matrix,
    pub mask: Matrix,
    pub rep_times: Vec<f64>,
    pub delta_t: Vec<f64>,
}

impl BinnedSequence {
    pub fn n_bins(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }
}

/// Bins one series onto a width-`tau` grid anchored at its first timestamp.
pub fn bin_series(series: &SporadicSeries, n_features: usize, tau: f64) -> Result<BinnedSequence> {
    assert!(tau > 0.0, "bin_series: tau must be positive");
    if series.observations.is_empty() {
        return Err(Error::SequenceTooShort { bins: 0 });
    }
    let t0 = series
        .observations
        .iter()
        .map(|o| o.time)
        .fold(f64::INFINITY, f64::min);

    // bin index -> (per-feature (sum, count), time sum, obs count)
    struct Bin {
        feat_sum: Vec<f64>,
        feat_count: Vec<usize>,
        time_sum: f64,
        count: usize,
    }
    let mut bins: BTreeMap<usize, Bin> = BTreeMap::new();
    for obs in &series.observations {
        assert!(
            obs.feature < n_features,
            "bin_series: feature index {} out of range {}",
            obs.feature,
            n_features
        );
        let idx = ((obs.time - t0) / tau).floor() as usize;
        let bin = bins.entry(idx).or_insert_with(|| Bin {
            feat_sum: vec![0.0; n_features],
            feat_count: vec![0; n_features],
            time_sum: 0.0,
            count: 0,
        });
        bin.feat_sum[obs.feature] += obs.value;
        bin.feat_count[obs.feature] += 1;
        bin.time_sum += obs.time;
        bin.count += 1;
    }

    if bins.len() < 2 {
        return Err(Error::SequenceTooShort { bins: bins.len() });
    }

    let k = bins.len();
    let mut values = Matrix::zeros(k, n_features);
    let mut mask = Matrix::zeros(k, n_features);
    let mut rep_times = Vec::with_capacity(k);
    for (row, bin) in bins.values().enumerate() {
        for n in 0..n_features {
            if bin.feat_count[n] > 0 {
                values.set(row, n, bin.feat_sum[n] / bin.feat_count[n] as f64);
                mask.set(row, n, 1.0);
            }
        }
        rep_times.push(bin.time_sum / bin.count as f64);
    }
    let mut delta_t = Vec::with_capacity(k);
    delta_t.push(tau);
    for i in 1..k {
        delta_t.push(rep_times[i] - rep_times[i - 1]);
    }
    Ok(BinnedSequence {
        values,
        mask,
        rep_times,
        delta_t,
    })
}

/// Per-feature affine value transform plus a global time rescaling.
#[derive(Clone, Debug)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub time_iqr: f64,
}

/// Type-7 (linear interpolation) quantile of a sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits per-feature mean/std (population convention) over observed training
/// values, and the interquartile range over distinct training timestamps.
pub fn fit_standardizer(train: &[SporadicSeries], n_features: usize) -> Result<Standardizer> {
    let mut sums = vec![0.0; n_features];
    let mut counts = vec![0usize; n_features];
    for series in train {
        for obs in &series.observations {
            sums[obs.feature] += obs.value;
            counts[obs.feature] += 1;
        }
    }
    let mut mean = vec![0.0; n_features];
    for n in 0..n_features {
        if counts[n] == 0 {
            return Err(Error::InvalidInput(format!(
                "feature {n} never observed in training data"
            )));
        }
        mean[n] = sums[n] / counts[n] as f64;
    }
    let mut sq = vec![0.0; n_features];
    for series in train {
        for obs in &series.observations {
            let d = obs.value - mean[obs.feature];
            sq[obs.feature] += d * d;
        }
    }
    let mut std = vec![0.0; n_features];
    for n in 0..n_features {
        std[n] = (sq[n] / counts[n] as f64).sqrt();
        if std[n] == 0.0 {
            return Err(Error::ConstantFeature { feature: n });
        }
    }

    let mut times: Vec<f64> = Vec::new();
    for series in train {
        times.extend(series.distinct_times());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if times.is_empty() {
        return Err(Error::InvalidInput("no training timestamps".into()));
    }
    let iqr = quantile_sorted(&times, 0.75) - quantile_sorted(&times, 0.25);
    if iqr <= 0.0 {
        return Err(Error::ZeroTimeIqr);
    }
    Ok(Standardizer {
        mean,
        std,
        time_iqr: iqr,
    })
}

impl Standardizer {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes values and divides timestamps by the time IQR.
    pub fn transform(&self, series: &SporadicSeries) -> SporadicSeries {
        let observations = series
            .observations
            .iter()
            .map(|o| Observation {
                time: o.time / self.time_iqr,
                feature: o.feature,
                value: (o.value - self.mean[o.feature]) / self.std[o.feature],
            })
            .collect();
        SporadicSeries {
            subject_id: series.subject_id.clone(),
            observations,
            label: series.label,
        }
    }

    /// A nominal step expressed in raw time units, normalized.
    pub fn normalize_tau(&self, tau: f64) -> f64 {
        tau / self.time_iqr
    }
}

/// Baseline strategies for completing the input side of a binned sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FillMode {
    /// Missing cells take the training mean (zero in standardized space).
    Mean,
    /// Last observation carried forward; leading gaps fall back to the mean.
    Forward,
    /// Nearest observation in time, plus the time gap appended as an extra
    /// input column.
    NearestConcat,
}

impl FillMode {
    pub fn name(self) -> &'static str {
        match self {
            FillMode::Mean => "mean",
            FillMode::Forward => "forward",
            FillMode::NearestConcat => "nearest_concat",
        }
    }

    pub fn parse(s: &str) -> Option<FillMode> {
        match s {
            "mean" => Some(FillMode::Mean),
            "forward" => Some(FillMode::Forward),
            "nearest_concat" => Some(FillMode::NearestConcat),
            _ => None,
        }
    }
}

/// Completes missing input cells per `mode`. Expects standardized data (the
/// mean fill value is zero). The returned mask is all ones; `NearestConcat`
/// widens the feature axis by one with the per-bin time gap.
pub fn apply_baseline_fill(seq: &BinnedSequence, mode: FillMode) -> BinnedSequence {
    let k = seq.n_bins();
    let n = seq.n_features();
    let out_cols = if mode == FillMode::NearestConcat { n + 1 } else { n };
    let mut values = Matrix::zeros(k, out_cols);
    let mask = {
        let mut m = Matrix::zeros(k, out_cols);
        for cell in m.data_mut() {
            *cell = 1.0;
        }
        m
    };

    for feat in 0..n {
        match mode {
            FillMode::Mean => {
                for row in 0..k {
                    if seq.mask.get(row, feat) == 1.0 {
                        values.set(row, feat, seq.values.get(row, feat));
                    }
                }
            }
            FillMode::Forward => {
                let mut carried: Option<f64> = None;
                for row in 0..k {
                    if seq.mask.get(row, feat) == 1.0 {
                        carried = Some(seq.values.get(row, feat));
                    }
                    // Leading entries stay at the mean (zero) until the first
                    // observation appears.
                    values.set(row, feat, carried.unwrap_or(0.0));
                }
            }
            FillMode::NearestConcat => {
                let observed: Vec<usize> = (0..k)
                    .filter(|&row| seq.mask.get(row, feat) == 1.0)
                    .collect();
                for row in 0..k {
                    if seq.mask.get(row, feat) == 1.0 {
                        values.set(row, feat, seq.values.get(row, feat));
                    } else if !observed.is_empty() {
                        let t = seq.rep_times[row];
                        // Nearest in time; earlier wins ties.
                        let mut best = observed[0];
                        let mut best_d = (seq.rep_times[best] - t).abs();
                        for &cand in &observed[1..] {
                            let d = (seq.rep_times[cand] - t).abs();
                            if d < best_d {
                                best = cand;
                                best_d = d;
                            }
                        }
                        values.set(row, feat, seq.values.get(best, feat));
                    }
                }
            }
        }
    }
    if mode == FillMode::NearestConcat {
        for row in 0..k {
            values.set(row, n, seq.delta_t[row]);
        }
    }
    BinnedSequence {
        values,
        mask,
        rep_times: seq.rep_times.clone(),
        delta_t: seq.delta_t.clone(),
    }
}

/// Ground-truth process for the synthetic generator: a stable linear drift
/// with bias, Gaussian innovation noise, exponential inter-arrival times, and
/// independent per-feature missingness.
#[derive(Clone, Debug)]
pub struct ProcessSpec {
    pub n_subjects: usize,
    pub drift: Matrix,
    pub bias: Vector,
    pub diffusion_chol: Matrix,
    pub init_mean: Vector,
    pub init_cov: Matrix,
    pub arrival_rate: f64,
    pub missing_prob: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
}

impl ProcessSpec {
    pub fn n_features(&self) -> usize {
        self.bias.len()
    }

    /// Checks stability (all drift eigenvalues in the left half-plane) and
    /// structural invariants. Returns the eigenvalues on failure so callers
    /// can report them.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_features();
        if self.drift.rows() != n || self.drift.cols() != n {
            return Err(Error::InvalidInput("drift matrix must be N x N".into()));
        }
        if self.diffusion_chol.rows() != n || self.diffusion_chol.cols() != n {
            return Err(Error::InvalidInput("diffusion Cholesky must be N x N".into()));
        }
        for r in 0..n {
            if self.diffusion_chol.get(r, r) < 0.0 {
                return Err(Error::InvalidInput(
                    "diffusion Cholesky diagonal must be non-negative".into(),
                ));
            }
            for c in r + 1..n {
                if self.diffusion_chol.get(r, c) != 0.0 {
                    return Err(Error::InvalidInput(
                        "diffusion Cholesky must be lower-triangular".into(),
                    ));
                }
            }
        }
        if self.missing_prob.len() != n
            || self.missing_prob.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidInput(
                "missing_prob must list one probability in [0,1] per feature".into(),
            ));
        }
        if self.arrival_rate <= 0.0 || self.horizon <= 0.0 {
            return Err(Error::InvalidInput(
                "arrival_rate and horizon must be positive".into(),
            ));
        }

        let na = nalgebra::DMatrix::from_row_slice(n, n, self.drift.data());
        let eigen = na.complex_eigenvalues();
        if eigen.iter().any(|l| l.re >= 0.0) {
            let listed = eigen
                .iter()
                .map(|l| format!("({:.6}, {:.6})", l.re, l.im))
                .collect::<Vec<_>>()
                .join(" ");
            return Err(Error::UnstableDrift { eigenvalues: listed });
        }
        Ok(())
    }
}

impl ProcessSpec {
    /// Parses the flat `key = value` spec format. Lists are comma-separated,
    /// matrices row-major. Unknown keys are rejected by name.
    pub fn parse_key_values(text: &str) -> Result<ProcessSpec> {
        let mut fields: BTreeMap<&str, String> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::InvalidInput(format!(
                "process spec line {}: expected 'key = value', got '{line}'",
                idx + 1
            )))?;
            fields.insert(
                match key.trim() {
                    "n_subjects" => "n_subjects",
                    "n_features" => "n_features",
                    "phi" => "phi",
                    "varsigma" => "varsigma",
                    "gamma" => "gamma",
                    "init_mean" => "init_mean",
                    "init_cov" => "init_cov",
                    "arrival_rate" => "arrival_rate",
                    "missing_prob" => "missing_prob",
                    "horizon" => "horizon",
                    "seed" => "seed",
                    other => {
                        return Err(Error::InvalidInput(format!(
                            "process spec: unknown key '{other}'"
                        )))
                    }
                },
                value.trim().to_string(),
            );
        }
        let required = |key: &str| {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("process spec: missing key '{key}'")))
        };
        let floats = |key: &str, raw: &str, expect: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = raw
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::InvalidInput(format!("process spec: bad float list for '{key}'")))?;
            if vals.len() != expect {
                return Err(Error::InvalidInput(format!(
                    "process spec: '{key}' needs {expect} values, got {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };

        let n_subjects: usize = required("n_subjects")?
            .parse()
            .map_err(|_| Error::InvalidInput("process spec: bad n_subjects".into()))?;
        let n: usize = required("n_features")?
            .parse()
            .map_err(|_| Error::InvalidInput("process spec: bad n_features".into()))?;
        let drift = Matrix::from_rows(n, n, &floats("phi", &required("phi")?, n * n)?);
        let bias = match fields.get("varsigma") {
            Some(raw) => Vector::from_vec(floats("varsigma", raw, n)?),
            None => Vector::zeros(n),
        };
        let diffusion_chol = match fields.get("gamma") {
            Some(raw) => Matrix::from_rows(n, n, &floats("gamma", raw, n * n)?),
            None => Matrix::zeros(n, n),
        };
        let init_mean = match fields.get("init_mean") {
            Some(raw) => Vector::from_vec(floats("init_mean", raw, n)?),
            None => Vector::zeros(n),
        };
        let init_cov = match fields.get("init_cov") {
            Some(raw) => Matrix::from_rows(n, n, &floats("init_cov", raw, n * n)?),
            None => Matrix::identity(n),
        };
        let missing_prob = match fields.get("missing_prob") {
            Some(raw) => {
                let vals: Vec<f64> = raw
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::InvalidInput("process spec: bad missing_prob".into()))?;
                if vals.len() == 1 {
                    vec![vals[0]; n]
                } else if vals.len() == n {
                    vals
                } else {
                    return Err(Error::InvalidInput(format!(
                        "process spec: missing_prob needs 1 or {n} values"
                    )));
                }
            }
            None => vec![0.0; n],
        };
        let arrival_rate: f64 = required("arrival_rate")?
            .parse()
            .map_err(|_| Error::InvalidInput("process spec: bad arrival_rate".into()))?;
        let horizon: f64 = required("horizon")?
            .parse()
            .map_err(|_| Error::InvalidInput("process spec: bad horizon".into()))?;
        let seed: u64 = match fields.get("seed") {
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::InvalidInput("process spec: bad seed".into()))?,
            None => 0,
        };
        Ok(ProcessSpec {
            n_subjects,
            drift,
            bias,
            diffusion_chol,
            init_mean,
            init_cov,
            arrival_rate,
            missing_prob,
            horizon,
            seed,
        })
    }
}

/// Lower-triangular Cholesky factor; errors if the matrix is not positive
/// semidefinite (small negative pivots are clamped to zero).
fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s < -1e-12 {
                    return Err(Error::InvalidInput(
                        "initial covariance is not positive semidefinite".into(),
                    ));
                }
                l.set(i, j, s.max(0.0).sqrt());
            } else if l.get(j, j) > 0.0 {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Samples subjects from the exact discrete transition of the continuous
/// process: `x(t_k) = e^{ΦΔ} x(t_{k−1}) + Φ⁻¹[e^{ΦΔ} − I] ς + η`, with the
/// integrated noise covariance approximated as `Δ·ΓΓᵀ`.
///
/// Each subject draws from its own RNG stream, so parallel generation would
/// reproduce the serial output.
pub fn generate_synthetic(spec: &ProcessSpec) -> Result<Vec<SporadicSeries>> {
    spec.validate()?;
    let n = spec.n_features();
    let init_chol = cholesky(&spec.init_cov)?;
    let has_bias = spec.bias.data().iter().any(|&b| b != 0.0);
    let drift_lu = if has_bias {
        let na = nalgebra::DMatrix::from_row_slice(n, n, spec.drift.data());
        let lu = na.lu();
        if lu.determinant().abs() < 1e-300 {
            return Err(Error::SingularDrift);
        }
        Some(lu)
    } else {
        None
    };

    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for subj in 0..spec.n_subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(subj as u64);

        let mut times = vec![0.0f64];
        loop {
            let u: f64 = rng.gen();
            let gap = -spec.arrival_rate * (1.0 - u).ln();
            let next = times.last().unwrap() + gap;
            if next > spec.horizon && times.len() >= 2 {
                break;
            }
            times.push(next);
        }

        let gauss = |rng: &mut ChaCha8Rng| -> f64 {
            // Box-Muller; two uniforms per normal keeps the draw count fixed.
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };

        let mut x = spec.init_mean.clone();
        let z = Vector::from_vec((0..n).map(|_| gauss(&mut rng)).collect());
        x.add_scaled(&init_chol.matvec(&z), 1.0);

        let mut states = Vec::with_capacity(times.len());
        states.push(x.clone());
        for k in 1..times.len() {
            let dt = times[k] - times[k - 1];
            let trans = expm(&spec.drift, dt);
            let mut next = trans.matvec(&x);
            if let Some(lu) = &drift_lu {
                // u = Φ⁻¹ (e^{ΦΔ} − I) ς
                let mut rhs = trans.matvec(&spec.bias);
                rhs.add_scaled(&spec.bias, -1.0);
                let sol = lu
                    .solve(&nalgebra::DVector::from_column_slice(rhs.data()))
                    .ok_or(Error::SingularDrift)?;
                for i in 0..n {
                    next.set(i, next.get(i) + sol[i]);
                }
            }
            let z = Vector::from_vec((0..n).map(|_| gauss(&mut rng)).collect());
            next.add_scaled(&spec.diffusion_chol.matvec(&z), dt.sqrt());
            x = next;
            states.push(x.clone());
        }

        let mut observations = Vec::new();
        for (k, &t) in times.iter().enumerate() {
            for feat in 0..n {
                let drop: f64 = rng.gen();
                if drop < spec.missing_prob[feat] {
                    continue;
                }
                observations.push(Observation {
                    time: t,
                    feature: feat,
                    value: states[k].get(feat),
                });
            }
        }
        let series = SporadicSeries {
            subject_id: format!("subj{subj:04}"),
            observations,
            label: None,
        };
        // Cleaning rule: a subject needs at least two distinct timestamps.
        if series.distinct_times().len() >= 2 {
            subjects.push(series);
        }
    }
    Ok(subjects)
}

/// Reads the long-format CSV `subject_id,time,feature,value`.
///
/// Subjects appear in first-row order. Subjects left with fewer than two
/// distinct timestamps are dropped, mirroring the cohort cleaning rule.
pub fn read_csv(content: &str) -> Result<Vec<SporadicSeries>> {
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::CsvParse {
            line: 1,
            message: "empty file".into(),
        })?;
    if header.trim() != "subject_id,time,feature,value" {
        return Err(Error::CsvParse {
            line: 1,
            message: format!("expected header 'subject_id,time,feature,value', got '{header}'"),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_subject: BTreeMap<String, Vec<Observation>> = BTreeMap::new();
    let mut seen: std::collections::HashSet<(String, u64, usize)> = std::collections::HashSet::new();

    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::CsvParse {
                line: line_no,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let subject = fields[0].trim();
        if subject.is_empty() {
            return Err(Error::CsvParse {
                line: line_no,
                message: "empty subject_id".into(),
            });
        }
        let time: f64 = fields[1].trim().parse().map_err(|_| Error::CsvParse {
            line: line_no,
            message: format!("invalid time '{}'", fields[1]),
        })?;
        if !time.is_finite() || time < 0.0 {
            return Err(Error::CsvParse {
                line: line_no,
                message: format!("time must be finite and non-negative, got {time}"),
            });
        }
        let feature: usize = fields[2].trim().parse().map_err(|_| Error::CsvParse {
            line: line_no,
            message: format!("unknown feature name '{}'", fields[2]),
        })?;
        let value: f64 = fields[3].trim().parse().map_err(|_| Error::CsvParse {
            line: line_no,
            message: format!("invalid value '{}'", fields[3]),
        })?;
        if !value.is_finite() {
            return Err(Error::CsvParse {
                line: line_no,
                message: "non-finite value".into(),
            });
        }
        if !seen.insert((subject.to_string(), time.to_bits(), feature)) {
            return Err(Error::CsvParse {
                line: line_no,
                message: format!("duplicate (time, feature) pair ({time}, {feature}) for subject {subject}"),
            });
        }
        if !by_subject.contains_key(subject) {
            order.push(subject.to_string());
        }
        by_subject
            .entry(subject.to_string())
            .or_default()
            .push(Observation {
                time,
                feature,
                value,
            });
    }

    let mut out = Vec::new();
    for id in order {
        let series = SporadicSeries {
            observations: by_subject.remove(&id).unwrap(),
            subject_id: id,
            label: None,
        };
        if series.distinct_times().len() >= 2 {
            out.push(series);
        }
    }
    Ok(out)
}

/// Writes the long-format CSV. Values use the shortest representation that
/// round-trips `f64` exactly, so `read_csv(write_csv(s))` is lossless.
pub fn write_csv(series: &[SporadicSeries]) -> String {
    let mut out = String::from("subject_id,time,feature,value\n");
    for s in series {
        for o in &s.observations {
            out.push_str(&format!("{},{},{},{}\n", s.subject_id, o.time, o.feature, o.value));
        }
    }
    out
}

/// Largest feature index across all series, plus one.
pub fn infer_n_features(series: &[SporadicSeries]) -> usize {
    series
        .iter()
        .flat_map(|s| s.observations.iter())
        .map(|o| o.feature + 1)
        .max()
        .unwrap_or(0)
}
