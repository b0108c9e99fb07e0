//! End-to-end orchestration: subject splitting, standardization, nominal-step
//! candidates, training with grid search, evaluation of saved checkpoints,
//! and closed-loop prediction.

use anyhow::{anyhow, bail, Context, Result};
use carrnn_core::dataset::{infer_n_features, quantile_sorted, SporadicSeries};
use carrnn_core::train::{
    evaluate, gap_range, prepare_dataset, tau_search, EpochStats, Metrics, TauCurvePoint,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TauSpec};

/// Raw subject series partitioned before any fitting; the standardizer only
/// ever sees the training part.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<SporadicSeries>,
    pub val: Vec<SporadicSeries>,
    pub test: Vec<SporadicSeries>,
}

/// Deterministic subject-level split by seeded shuffle.
pub fn split_subjects(
    series: Vec<SporadicSeries>,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<Splits> {
    if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) {
        bail!("val_fraction and test_fraction must lie in [0, 1)");
    }
    if val_fraction + test_fraction >= 1.0 {
        bail!("val_fraction + test_fraction must leave room for training data");
    }
    let n = series.len();
    if n < 3 {
        bail!("need at least 3 subjects to split, got {n}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 2);
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_test - 1);
    let mut series: Vec<Option<SporadicSeries>> = series.into_iter().map(Some).collect();
    let take = |series: &mut Vec<Option<SporadicSeries>>, idx: &[usize]| {
        idx.iter().map(|&i| series[i].take().unwrap()).collect::<Vec<_>>()
    };
    let test = take(&mut series, &order[..n_test]);
    let val = take(&mut series, &order[n_test..n_test + n_val]);
    let train = take(&mut series, &order[n_test + n_val..]);
    Ok(Splits { train, val, test })
}

/// Consecutive gaps between distinct timestamps, pooled over subjects.
fn pooled_gaps(series: &[SporadicSeries]) -> Vec<f64> {
    let mut gaps = Vec::new();
    for s in series {
        let times = s.distinct_times();
        for w in times.windows(2) {
            gaps.push(w[1] - w[0]);
        }
    }
    gaps
}

/// Data-derived nominal-step candidates: the mean gap and the gap IQR of the
/// (already normalized) training series.
pub fn auto_tau_candidates(train: &[SporadicSeries]) -> Result<Vec<f64>> {
    let mut gaps = pooled_gaps(train);
    if gaps.is_empty() {
        bail!("no gaps in training data; cannot derive tau candidates");
    }
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let iqr = quantile_sorted(&gaps, 0.75) - quantile_sorted(&gaps, 0.25);
    let mut cands: Vec<f64> = [mean, iqr].into_iter().filter(|&t| t > 0.0).collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    if cands.is_empty() {
        bail!("derived tau candidates were all non-positive");
    }
    Ok(cands)
}

/// Metrics for the three splits plus the selected nominal step.
#[derive(Clone, Debug)]
pub struct Report {
    pub cell: &'static str,
    pub fill: &'static str,
    pub tau: f64,
    pub tau_raw: f64,
    pub train: Metrics,
    pub val: Option<Metrics>,
    pub test: Option<Metrics>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
}

impl Report {
    pub fn text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("cell: {}\n", self.cell));
        out.push_str(&format!("fill: {}\n", self.fill));
        out.push_str(&format!(
            "tau: {:.6} (normalized)  {:.6} (raw time units)\n",
            self.tau, self.tau_raw
        ));
        out.push_str(&format!(
            "subjects: train={} val={} test={}\n",
            self.n_train, self.n_val, self.n_test
        ));
        out.push_str(&format!("best epoch: {}\n", self.best_epoch));
        let line = |name: &str, m: &Metrics| {
            format!("{name}: mae={:.6} mse={:.6} cells={}\n", m.mae, m.mse, m.n_cells)
        };
        out.push_str(&line("train", &self.train));
        if let Some(m) = &self.val {
            out.push_str(&line("val", m));
        }
        if let Some(m) = &self.test {
            out.push_str(&line("test", m));
        }
        out
    }

    /// Machine-readable form; floats use the shortest exact representation
    /// so downstream comparisons can be bitwise.
    pub fn csv(&self) -> String {
        let mut out = String::from("split,mae,mse,n_cells,tau\n");
        let mut push = |name: &str, m: &Metrics| {
            out.push_str(&format!("{name},{},{},{},{}\n", m.mae, m.mse, m.n_cells, self.tau));
        };
        push("train", &self.train);
        if let Some(m) = &self.val {
            push("val", m);
        }
        if let Some(m) = &self.test {
            push("test", m);
        }
        out
    }
}

/// Everything a training run produces.
pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub report: Report,
    pub history: Vec<EpochStats>,
    pub curve: Vec<TauCurvePoint>,
    pub splits: Splits,
}

/// The full training pipeline on raw series: split, standardize, derive the
/// step grid, search, and evaluate the winner on all three splits.
pub fn run_train(cfg: &RunConfig, series: Vec<SporadicSeries>) -> Result<TrainArtifacts> {
    let n_features = infer_n_features(&series);
    if n_features == 0 {
        bail!("training data contains no observations");
    }
    let splits = split_subjects(series, cfg.val_fraction, cfg.test_fraction, cfg.seed)
        .context("splitting subjects")?;

    let standardizer = carrnn_core::dataset::fit_standardizer(&splits.train, n_features)
        .context("fitting standardizer")?;
    let train_norm: Vec<SporadicSeries> =
        splits.train.iter().map(|s| standardizer.transform(s)).collect();
    let val_norm: Vec<SporadicSeries> =
        splits.val.iter().map(|s| standardizer.transform(s)).collect();
    let test_norm: Vec<SporadicSeries> =
        splits.test.iter().map(|s| standardizer.transform(s)).collect();

    let candidates = match &cfg.tau {
        TauSpec::Auto => auto_tau_candidates(&train_norm).context("deriving tau candidates")?,
        TauSpec::Values(raw) => raw.iter().map(|&t| standardizer.normalize_tau(t)).collect(),
    };

    let tcfg = cfg.train_config();
    // Grid search monitors validation MSE; with no validation subjects the
    // training loss itself is monitored.
    let search = tau_search(
        &candidates,
        &train_norm,
        if val_norm.is_empty() { &train_norm } else { &val_norm },
        n_features,
        cfg.fill,
        &tcfg,
    )
    .context("training")?;

    let tau = search.best_tau;
    let train_seqs = prepare_dataset(&train_norm, n_features, tau, cfg.fill)
        .context("binning training data")?;
    let (gap_lo, gap_hi) = gap_range(&train_seqs);
    if tau < gap_lo || tau > gap_hi {
        eprintln!(
            "warning: nominal step {tau:.6} lies outside the training gap range [{gap_lo:.6}, {gap_hi:.6}]"
        );
    }

    let model = &search.best_outcome.model;
    let train_metrics = evaluate(model, &train_seqs).context("evaluating train split")?;
    let val_metrics = if val_norm.is_empty() {
        None
    } else {
        let seqs = prepare_dataset(&val_norm, n_features, tau, cfg.fill)?;
        Some(evaluate(model, &seqs).context("evaluating validation split")?)
    };
    let test_metrics = if test_norm.is_empty() {
        None
    } else {
        let seqs = prepare_dataset(&test_norm, n_features, tau, cfg.fill)?;
        Some(evaluate(model, &seqs).context("evaluating test split")?)
    };

    let report = Report {
        cell: cfg.cell.name(),
        fill: cfg.fill.map_or("none", |f| f.name()),
        tau,
        tau_raw: tau * standardizer.time_iqr,
        train: train_metrics,
        val: val_metrics,
        test: test_metrics,
        n_train: splits.train.len(),
        n_val: splits.val.len(),
        n_test: splits.test.len(),
        best_epoch: search.best_outcome.best_epoch,
    };
    Ok(TrainArtifacts {
        checkpoint: Checkpoint {
            model: search.best_outcome.model.clone(),
            standardizer,
            fill: cfg.fill,
            tau,
        },
        report,
        history: search.best_outcome.history.clone(),
        curve: search.curve,
        splits,
    })
}

fn check_compatible(ck: &Checkpoint, series: &[SporadicSeries]) -> Result<()> {
    let n_data = infer_n_features(series);
    let n_model = ck.standardizer.n_features();
    if n_data > n_model {
        bail!("data has {n_data} features but the checkpoint was trained on {n_model}");
    }
    Ok(())
}

/// Evaluates a saved checkpoint on raw series using its stored standardizer,
/// nominal step, and fill mode.
pub fn evaluate_checkpoint(ck: &Checkpoint, series: &[SporadicSeries]) -> Result<Metrics> {
    check_compatible(ck, series)?;
    let n_features = ck.standardizer.n_features();
    let norm: Vec<SporadicSeries> = series.iter().map(|s| ck.standardizer.transform(s)).collect();
    let seqs = prepare_dataset(&norm, n_features, ck.tau, ck.fill)?;
    evaluate(&ck.model, &seqs).map_err(|e| anyhow!(e))
}

/// One predicted cell of the closed-loop rollout, reported in raw data units.
#[derive(Clone, Debug)]
pub struct PredictionRow {
    pub subject_id: String,
    pub step: usize,
    pub time: f64,
    pub feature: usize,
    pub predicted: f64,
    pub actual: Option<f64>,
}

/// Pooled absolute error per prediction step (raw units), masked to observed
/// cells.
#[derive(Clone, Copy, Debug)]
pub struct StepError {
    pub step: usize,
    pub mae: f64,
    pub n_cells: usize,
}

/// Rolls each subject forward: the first `n_context` binned steps consume
/// true inputs, later steps feed predictions back in. Returns per-cell rows
/// and the per-step masked error summary.
pub fn predict_checkpoint(
    ck: &Checkpoint,
    series: &[SporadicSeries],
    n_context: usize,
) -> Result<(Vec<PredictionRow>, Vec<StepError>)> {
    if n_context < 1 {
        bail!("n_context must be at least 1");
    }
    check_compatible(ck, series)?;
    let n_features = ck.standardizer.n_features();
    let mut rows = Vec::new();
    let mut per_step: Vec<(f64, usize)> = Vec::new();

    for raw in series {
        let norm = ck.standardizer.transform(raw);
        let binned = match carrnn_core::dataset::bin_series(&norm, n_features, ck.tau) {
            Ok(b) => b,
            Err(carrnn_core::Error::SequenceTooShort { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let prep = carrnn_core::cells::prepare_sequence(&binned, ck.fill);
        let y = carrnn_core::cells::rollout_predict(&ck.model, &prep, n_context)?;
        for k in 0..prep.steps() {
            for q in 0..prep.n_out() {
                let pred_std = y.get(k, q);
                let predicted = pred_std * ck.standardizer.std[q] + ck.standardizer.mean[q];
                let actual = if prep.target_mask.get(k, q) == 1.0 {
                    Some(prep.targets.get(k, q) * ck.standardizer.std[q] + ck.standardizer.mean[q])
                } else {
                    None
                };
                if let Some(a) = actual {
                    if per_step.len() <= k {
                        per_step.resize(k + 1, (0.0, 0));
                    }
                    per_step[k].0 += (predicted - a).abs();
                    per_step[k].1 += 1;
                }
                rows.push(PredictionRow {
                    subject_id: raw.subject_id.clone(),
                    step: k,
                    time: prep.bin_times[k + 1] * ck.standardizer.time_iqr,
                    feature: q,
                    predicted,
                    actual,
                });
            }
        }
    }
    let summary = per_step
        .iter()
        .enumerate()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(step, (abs, n))| StepError {
            step,
            mae: abs / *n as f64,
            n_cells: *n,
        })
        .collect();
    Ok((rows, summary))
}

/// Renders prediction rows as CSV (empty fields where the truth is missing).
pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("subject_id,step,time,feature,predicted,actual,abs_error\n");
    for r in rows {
        let (actual, err) = match r.actual {
            Some(a) => (format!("{a}"), format!("{}", (r.predicted - a).abs())),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.subject_id, r.step, r.time, r.feature, r.predicted, actual, err
        ));
    }
    out
}

/// Renders the training history as CSV.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.val_loss));
    }
    out
}

/// Renders the grid-search curve as CSV.
pub fn curve_csv(curve: &[TauCurvePoint]) -> String {
    let mut out = String::from("tau,val_mse,epochs\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.tau, p.val_mse, p.epochs));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use carrnn_core::dataset::Observation;

    fn subjects(n: usize) -> Vec<SporadicSeries> {
        (0..n)
            .map(|i| SporadicSeries {
                subject_id: format!("s{i}"),
                observations: vec![
                    Observation { time: 0.0, feature: 0, value: i as f64 },
                    Observation { time: 1.0, feature: 0, value: i as f64 + 1.0 },
                    Observation { time: 2.0, feature: 0, value: i as f64 * 0.5 },
                ],
                label: None,
            })
            .collect()
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let a = split_subjects(subjects(10), 0.2, 0.3, 5).unwrap();
        let b = split_subjects(subjects(10), 0.2, 0.3, 5).unwrap();
        let ids = |v: &[SporadicSeries]| v.iter().map(|s| s.subject_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        assert_eq!(a.train.len() + a.val.len() + a.test.len(), 10);
        assert_eq!(a.test.len(), 3);
        assert_eq!(a.val.len(), 2);

        let c = split_subjects(subjects(10), 0.2, 0.3, 6).unwrap();
        assert_ne!(ids(&a.test), ids(&c.test), "different seeds should split differently");
    }

    #[test]
    fn auto_candidates_use_mean_and_iqr_of_gaps() {
        let series = subjects(4);
        let cands = auto_tau_candidates(&series).unwrap();
        // All gaps are exactly 1.0: IQR is 0 and is dropped, the mean stays.
        assert_eq!(cands, vec![1.0]);
    }
}
