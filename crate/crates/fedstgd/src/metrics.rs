//! Forecast quality metrics over denormalized values, the persistence
//! baseline, and the test-split evaluation harness.

use thiserror::Error;

use crate::data::{Normalizer, Window};
use crate::forward::{forecast, ForwardError};
use crate::model::{AblationMode, GlobalParams, HyperConfig};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error("metric undefined: every target is masked")]
    AllMasked,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<(), MetricsError> {
    if pred.dims() != target.dims() {
        return Err(MetricsError::Shape(
            pred.dims().to_vec(),
            target.dims().to_vec(),
        ));
    }
    Ok(())
}

pub fn rmse(pred: &Tensor, target: &Tensor) -> Result<f64, MetricsError> {
    check_shapes(pred, target)?;
    let sq: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64, MetricsError> {
    check_shapes(pred, target)?;
    let abs: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(abs / pred.len() as f64)
}

/// Mean absolute percentage error over entries with non-zero targets;
/// exact-zero targets are masked out. Returns (percent, masked count).
pub fn mape(pred: &Tensor, target: &Tensor) -> Result<(f64, usize), MetricsError> {
    check_shapes(pred, target)?;
    let mut sum = 0.0;
    let mut used = 0usize;
    for (p, t) in pred.data().iter().zip(target.data()) {
        if *t == 0.0 {
            continue;
        }
        sum += ((p - t) / t).abs();
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::AllMasked);
    }
    Ok((100.0 * sum / used as f64, pred.len() - used))
}

/// Repeat the last observed frame across every forecast horizon.
pub fn persistence_baseline(last_frame: &Tensor, t_out: usize) -> Tensor {
    let (n, d) = (last_frame.rows(), last_frame.cols());
    let mut out = Vec::with_capacity(t_out * n * d);
    for _ in 0..t_out {
        out.extend_from_slice(last_frame.data());
    }
    Tensor::new(vec![t_out, n, d], out).expect("baseline")
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonRow {
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    pub mape_percent: Option<f64>,
}

/// Aggregate forecast quality in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub mape_percent: Option<f64>,
    pub masked_count: usize,
    pub windows: usize,
    pub per_horizon: Vec<HorizonRow>,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        let fmt_mape = |m: Option<f64>| match m {
            Some(v) => format!("{v:>10.4}"),
            None => format!("{:>10}", "masked"),
        };
        out.push_str(&format!(
            "{:>8} {:>12} {:>12} {:>10}\n",
            "horizon", "rmse", "mae", "mape%"
        ));
        for row in &self.per_horizon {
            out.push_str(&format!(
                "{:>8} {:>12.6} {:>12.6} {}\n",
                row.horizon + 1,
                row.rmse,
                row.mae,
                fmt_mape(row.mape_percent)
            ));
        }
        out.push_str(&format!(
            "{:>8} {:>12.6} {:>12.6} {}   (masked {} of {} windows)\n",
            "all",
            self.rmse,
            self.mae,
            fmt_mape(self.mape_percent),
            self.masked_count,
            self.windows
        ));
        out
    }

    pub fn records(&self) -> String {
        let mut out = String::new();
        let mape = self
            .mape_percent
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "nan".into());
        out.push_str(&format!(
            "split=all rmse={:.6} mae={:.6} mape_percent={} masked={} windows={}\n",
            self.rmse, self.mae, mape, self.masked_count, self.windows
        ));
        for row in &self.per_horizon {
            let mape = row
                .mape_percent
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "nan".into());
            out.push_str(&format!(
                "horizon={} rmse={:.6} mae={:.6} mape_percent={}\n",
                row.horizon + 1,
                row.rmse,
                row.mae,
                mape
            ));
        }
        out
    }
}

#[derive(Default, Clone)]
struct Accumulator {
    sq: f64,
    abs: f64,
    pct: f64,
    count: usize,
    pct_count: usize,
}

impl Accumulator {
    fn push(&mut self, pred: f64, target: f64) {
        let err = pred - target;
        self.sq += err * err;
        self.abs += err.abs();
        self.count += 1;
        if target != 0.0 {
            self.pct += (err / target).abs();
            self.pct_count += 1;
        }
    }
}

/// Shared reducer: feeds denormalized prediction frames into global and
/// per-horizon accumulators.
struct ReportBuilder {
    total: Accumulator,
    horizon: Vec<Accumulator>,
    windows: usize,
}

impl ReportBuilder {
    fn new(t_out: usize) -> Self {
        ReportBuilder {
            total: Accumulator::default(),
            horizon: vec![Accumulator::default(); t_out],
            windows: 0,
        }
    }

    /// `pred` and `target` are [t_out, rows, d] in raw units.
    fn push_window(&mut self, pred: &Tensor, target: &Tensor) -> Result<(), MetricsError> {
        check_shapes(pred, target)?;
        let t_out = pred.dims()[0];
        let per = pred.len() / t_out;
        for tau in 0..t_out {
            for i in 0..per {
                let p = pred.data()[tau * per + i];
                let t = target.data()[tau * per + i];
                self.total.push(p, t);
                self.horizon[tau].push(p, t);
            }
        }
        self.windows += 1;
        Ok(())
    }

    fn finish(self) -> Result<MetricReport, MetricsError> {
        if self.total.count == 0 {
            return Err(MetricsError::AllMasked);
        }
        let report_of = |a: &Accumulator| {
            let rmse = (a.sq / a.count as f64).sqrt();
            let mae = a.abs / a.count as f64;
            let mape = if a.pct_count > 0 {
                Some(100.0 * a.pct / a.pct_count as f64)
            } else {
                None
            };
            (rmse, mae, mape)
        };
        let (rmse, mae, mape_percent) = report_of(&self.total);
        let per_horizon = self
            .horizon
            .iter()
            .enumerate()
            .map(|(h, a)| {
                let (rmse, mae, mape_percent) = report_of(a);
                HorizonRow {
                    horizon: h,
                    rmse,
                    mae,
                    mape_percent,
                }
            })
            .collect();
        Ok(MetricReport {
            rmse,
            mae,
            mape_percent,
            masked_count: self.total.count - self.total.pct_count,
            windows: self.windows,
            per_horizon,
        })
    }
}

/// Denormalized target frames of a window as [t_out, rows, d].
fn window_targets(w: &Window, normalizer: &Normalizer, t_out: usize, d: usize) -> Tensor {
    let n = w.y.rows();
    let mut out = vec![0.0; t_out * n * d];
    let y = normalizer.invert(&w.y);
    for node in 0..n {
        for tau in 0..t_out {
            for f in 0..d {
                out[tau * n * d + node * d + f] = y.at2(node, tau * d + f);
            }
        }
    }
    Tensor::new(vec![t_out, n, d], out).expect("targets")
}

/// Evaluate trained parameters over a window set. Under the intra-only
/// ablation each client block forecasts on its own shares, matching the
/// training-time aggregation; every other mode is evaluated monolithically
/// (the full-graph sums equal the protocol's by the factorization
/// identity).
pub fn evaluate(
    globals: &GlobalParams,
    full_embed: &Tensor,
    partitions: &[Vec<usize>],
    hyper: &HyperConfig,
    windows: &[Window],
    normalizer: &Normalizer,
) -> Result<MetricReport, MetricsError> {
    let d = windows
        .first()
        .map(|w| w.x[0].cols())
        .ok_or(MetricsError::AllMasked)?;
    let full: Vec<usize> = (0..full_embed.rows()).collect();
    let blocks: Vec<&[usize]> = if hyper.mode == AblationMode::IntraOnly {
        partitions.iter().map(|p| p.as_slice()).collect()
    } else {
        vec![full.as_slice()]
    };

    let mut builder = ReportBuilder::new(hyper.t_out);
    for w in windows {
        let target_full = window_targets(w, normalizer, hyper.t_out, d);
        for nodes in &blocks {
            let embed = full_embed.gather_rows(nodes)?;
            let x_steps: Vec<Tensor> = w
                .x
                .iter()
                .map(|x| x.gather_rows(nodes))
                .collect::<Result<_, _>>()?;
            let pred_norm = forecast(&x_steps, &w.slots, &w.prev_slots, globals, &embed, hyper)?;
            let pred = denormalize_frames(&pred_norm, normalizer);
            let target = gather_frames(&target_full, nodes);
            builder.push_window(&pred, &target)?;
        }
    }
    builder.finish()
}

/// Persistence-baseline report over the same windows.
pub fn evaluate_persistence(
    windows: &[Window],
    normalizer: &Normalizer,
    t_out: usize,
) -> Result<MetricReport, MetricsError> {
    let d = windows
        .first()
        .map(|w| w.x[0].cols())
        .ok_or(MetricsError::AllMasked)?;
    let mut builder = ReportBuilder::new(t_out);
    for w in windows {
        let last = normalizer.invert(w.x.last().expect("window has inputs"));
        let pred = persistence_baseline(&last, t_out);
        let target = window_targets(w, normalizer, t_out, d);
        builder.push_window(&pred, &target)?;
    }
    builder.finish()
}

fn denormalize_frames(pred: &Tensor, normalizer: &Normalizer) -> Tensor {
    normalizer.invert(pred)
}

fn gather_frames(frames: &Tensor, nodes: &[usize]) -> Tensor {
    let (t_out, n, d) = (frames.dims()[0], frames.dims()[1], frames.dims()[2]);
    let mut out = Vec::with_capacity(t_out * nodes.len() * d);
    for tau in 0..t_out {
        for &node in nodes {
            let off = tau * n * d + node * d;
            out.extend_from_slice(&frames.data()[off..off + d]);
        }
    }
    Tensor::new(vec![t_out, nodes.len(), d], out).expect("gathered frames")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_and_window, synth_diffusion, SignalSeries};
    use crate::model::init_node_embed;

    #[test]
    fn rmse_mae_examples() {
        let p = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        let t = Tensor::new(vec![2], vec![4.0, 3.0]).unwrap();
        assert!((rmse(&p, &t).unwrap() - 2.828427).abs() < 1e-6);
        assert!((mae(&p, &t).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert!(rmse(&p, &Tensor::new(vec![3], vec![0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = crate::data::CounterRng::new(42);
        for _ in 0..20 {
            let p = Tensor::new(vec![8], (0..8).map(|_| rng.next_signed()).collect()).unwrap();
            let t = Tensor::new(vec![8], (0..8).map(|_| rng.next_signed()).collect()).unwrap();
            assert!(rmse(&p, &t).unwrap() >= mae(&p, &t).unwrap() - 1e-15);
        }
    }

    #[test]
    fn mape_examples() {
        let p = Tensor::new(vec![1], vec![110.0]).unwrap();
        let t = Tensor::new(vec![1], vec![100.0]).unwrap();
        let (m, masked) = mape(&p, &t).unwrap();
        assert!((m - 10.0).abs() < 1e-12);
        assert_eq!(masked, 0);

        assert_eq!(mape(&t, &t).unwrap().0, 0.0);

        let p = Tensor::new(vec![2], vec![5.0, 100.0]).unwrap();
        let t = Tensor::new(vec![2], vec![0.0, 100.0]).unwrap();
        let (m, masked) = mape(&p, &t).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(masked, 1);

        let zeros = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(mape(&p, &zeros), Err(MetricsError::AllMasked)));
    }

    #[test]
    fn persistence_examples() {
        let last = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let pred = persistence_baseline(&last, 3);
        assert_eq!(pred.dims(), &[3, 2, 2]);
        for tau in 0..3 {
            assert_eq!(&pred.data()[tau * 4..(tau + 1) * 4], last.data());
        }

        // Constant series: baseline is exact.
        let series = SignalSeries {
            data: Tensor::new(vec![60, 2, 1], vec![5.0; 120]).unwrap(),
            start_slot: 0,
        };
        let splits = split_and_window(&series, 2, 2, (7, 1, 2), 8).unwrap();
        let report = evaluate_persistence(&splits.test, &splits.normalizer, 2).unwrap();
        assert_eq!(report.rmse, 0.0);
        assert_eq!(report.mae, 0.0);
    }

    #[test]
    fn metric_symmetry_under_node_permutation() {
        let series = synth_diffusion(3, 4, 200, 1, 8, 0.05);
        let splits = split_and_window(&series, 2, 2, (7, 1, 2), 8).unwrap();
        let report = evaluate_persistence(&splits.test, &splits.normalizer, 2).unwrap();

        // Permute nodes inside every window; aggregate metrics move only
        // by floating-point reassociation.
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<Window> = splits
            .test
            .iter()
            .map(|w| Window {
                x: w.x.iter().map(|x| x.gather_rows(&perm).unwrap()).collect(),
                y: w.y.gather_rows(&perm).unwrap(),
                start_t: w.start_t,
                slots: w.slots.clone(),
                prev_slots: w.prev_slots.clone(),
            })
            .collect();
        let report_p = evaluate_persistence(&permuted, &splits.normalizer, 2).unwrap();
        assert!((report.rmse - report_p.rmse).abs() <= 1e-12);
        assert!((report.mae - report_p.mae).abs() <= 1e-12);
    }

    #[test]
    fn zero_readout_model_predicts_the_mean() {
        // With zero readout weights the prediction is the feature mean, so
        // the raw rmse approaches the target standard deviation.
        let hyper = HyperConfig {
            d_n: 4,
            d_t: 3,
            h_dim: 4,
            t_in: 2,
            t_out: 2,
            ..HyperConfig::default()
        };
        let series = synth_diffusion(9, 4, 1200, 1, 8, 0.05);
        let splits = split_and_window(&series, hyper.t_in, hyper.t_out, (7, 1, 2), 8).unwrap();
        let mut globals = GlobalParams::init(&hyper, 1, 8, 5);
        globals.w_out = Tensor::zeros(globals.w_out.dims());
        globals.b_out = Tensor::zeros(globals.b_out.dims());
        let embed = init_node_embed(4, hyper.d_n, 5);
        let partitions = vec![(0..4).collect::<Vec<_>>()];
        let report = evaluate(
            &globals,
            &embed,
            &partitions,
            &hyper,
            &splits.test,
            &splits.normalizer,
        )
        .unwrap();

        // Target std in raw units over the evaluated frames.
        let mut sq = 0.0;
        let mut mean = 0.0;
        let mut count = 0.0;
        for w in &splits.test {
            let raw = splits.normalizer.invert(&w.y);
            for v in raw.data() {
                mean += v;
                count += 1.0;
            }
        }
        mean /= count;
        for w in &splits.test {
            let raw = splits.normalizer.invert(&w.y);
            for v in raw.data() {
                sq += (v - mean) * (v - mean);
            }
        }
        let std = (sq / count).sqrt();
        let ratio = report.rmse / std;
        assert!(
            (ratio - 1.0).abs() < 0.02,
            "rmse {} vs std {} (ratio {ratio})",
            report.rmse,
            std
        );
    }

    #[test]
    fn masked_count_matches_zero_targets() {
        let series = SignalSeries {
            data: Tensor::new(
                vec![50, 1, 1],
                (0..50).map(|t| if t % 3 == 0 { 0.0 } else { t as f64 }).collect(),
            )
            .unwrap(),
            start_slot: 0,
        };
        let splits = split_and_window(&series, 2, 2, (7, 1, 2), 8).unwrap();
        let report = evaluate_persistence(&splits.test, &splits.normalizer, 2).unwrap();
        let mut zeros = 0;
        for w in &splits.test {
            let raw = splits.normalizer.invert(&w.y);
            zeros += raw.data().iter().filter(|&&v| v == 0.0).count();
        }
        assert_eq!(report.masked_count, zeros);
    }

    #[test]
    fn report_rendering_contains_rows() {
        let series = synth_diffusion(1, 3, 200, 1, 8, 0.05);
        let splits = split_and_window(&series, 2, 2, (7, 1, 2), 8).unwrap();
        let report = evaluate_persistence(&splits.test, &splits.normalizer, 2).unwrap();
        let table = report.table();
        assert!(table.contains("horizon"));
        assert!(table.lines().count() >= 4);
        let records = report.records();
        assert!(records.contains("split=all rmse="));
        assert!(records.contains("horizon=2"));
    }
}
