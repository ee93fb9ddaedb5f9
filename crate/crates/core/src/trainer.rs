//! Optimization loop, validation tracking and staged calibration.

use serde::{Deserialize, Serialize};

use crate::dataset::{MultiSourceDataset, Record, RowFilter};
use crate::error::{Error, Result};
use crate::loss::{draw_eps, evaluate, zero_eps, LossConfig, LossReport, PreparedBatch, Terms};
use crate::net::Network;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BatchMode {
    Full,
    Mini { size: usize },
}

/// Pins a calibration parameter for a whole run. `value` is in physical units;
/// `None` keeps the value the network currently holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezeSpec {
    pub name: String,
    #[serde(default)]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub batch: BatchMode,
    pub frozen: Vec<FreezeSpec>,
    pub log_interval: usize,
    /// Return the parameters with the lowest validation loss instead of the last ones.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            optimizer: AdamWConfig::default(),
            batch: BatchMode::Full,
            frozen: Vec::new(),
            log_interval: 10,
            keep_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be >= 1".into()));
        }
        if let BatchMode::Mini { size: 0 } = self.batch {
            return Err(Error::Config("mini-batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_total: f64,
    pub train_nll_em: f64,
    pub train_nll_cal: f64,
    pub train_is_em: f64,
    pub train_is_cal: f64,
    pub train_kl: f64,
    pub val_total: Option<f64>,
    pub val_nll_em: Option<f64>,
    pub val_nll_cal: Option<f64>,
}

pub const HISTORY_COLUMNS: [&str; 10] = [
    "epoch",
    "train_total",
    "train_nll_em",
    "train_nll_cal",
    "train_is_em",
    "train_is_cal",
    "train_kl",
    "val_total",
    "val_nll_em",
    "val_nll_cal",
];

impl HistoryRow {
    pub fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            self.train_total.to_string(),
            self.train_nll_em.to_string(),
            self.train_nll_cal.to_string(),
            self.train_is_em.to_string(),
            self.train_is_cal.to_string(),
            self.train_kl.to_string(),
            opt(self.val_total),
            opt(self.val_nll_em),
            opt(self.val_nll_cal),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best-validation parameters (or final ones when `keep_best` is off or there is no validation set).
    pub network: Network,
    pub final_network: Network,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
    /// Training loss of the last epoch.
    pub final_report: LossReport,
    /// Validation loss of the returned parameters, when a validation set was given.
    pub best_val: Option<LossReport>,
}

fn apply_freezes(net: &mut Network, train: &MultiSourceDataset, frozen: &[FreezeSpec]) -> Result<()> {
    net.posterior.unfreeze_all();
    for f in frozen {
        let slot = net
            .schema
            .param_index(&f.name)
            .ok_or_else(|| Error::Config(format!("frozen parameter `{}` is not a calibration parameter", f.name)))?;
        let value = f.value.map(|v| match &train.standardizer {
            Some(st) => st.theta[slot].forward(v),
            None => v,
        });
        net.posterior.freeze_slot(slot, value)?;
    }
    Ok(())
}

fn batches(records: &[Record], n_sources: usize, mode: BatchMode, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    match mode {
        BatchMode::Full => vec![(0..records.len()).collect()],
        BatchMode::Mini { size } => {
            use rand::seq::SliceRandom;
            let n_batches = records.len().div_ceil(size).max(1);
            let mut out = vec![Vec::new(); n_batches];
            for s in 0..n_sources {
                let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].source == s).collect();
                idx.shuffle(rng);
                for (k, i) in idx.into_iter().enumerate() {
                    out[k % n_batches].push(i);
                }
            }
            out.retain(|b| !b.is_empty());
            for b in &mut out {
                b.sort_unstable();
            }
            out
        }
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let mut out = reports[0].clone();
    let avg = |get: &dyn Fn(&LossReport) -> &Vec<Vec<f64>>, dst: &mut Vec<Vec<f64>>| {
        for (i, row) in dst.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = reports.iter().map(|r| get(r)[i][j]).sum::<f64>() / n;
            }
        }
    };
    avg(&|r| &r.nll_em, &mut out.nll_em);
    avg(&|r| &r.nll_cal, &mut out.nll_cal);
    avg(&|r| &r.is_em, &mut out.is_em);
    avg(&|r| &r.is_cal, &mut out.is_cal);
    avg(&|r| &r.kl, &mut out.kl);
    out.total = out.recombine();
    out
}

/// Trains `net` on a standardized training set.
///
/// Every step draws fresh ε for each low-fidelity posterior, evaluates the
/// full objective and applies one AdamW update (decay on block parameters
/// only). Validation uses ε = 0 and is evaluated at every logged epoch.
pub fn train(
    mut net: Network,
    train_set: &MultiSourceDataset,
    val_set: Option<&MultiSourceDataset>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    apply_freezes(&mut net, train_set, &cfg.frozen)?;
    if train_set.records.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let val_batch = match val_set {
        Some(v) if !v.records.is_empty() => {
            let refs: Vec<&Record> = v.records.iter().collect();
            Some(PreparedBatch::new(&v.schema, &refs)?)
        }
        _ => None,
    };
    let mut batch_rng = substream(seed, "train/batches");
    let mut eps_rng = substream(seed, "train/eps");
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let full = match cfg.batch {
        BatchMode::Full => {
            let refs: Vec<&Record> = train_set.records.iter().collect();
            Some(PreparedBatch::new(&train_set.schema, &refs)?)
        }
        BatchMode::Mini { .. } => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network, LossReport)> = None;
    let mut last_report = None;
    for epoch in 1..=cfg.epochs {
        let mut reports = Vec::new();
        let minis;
        let plan: Vec<&PreparedBatch> = match &full {
            Some(b) => vec![b],
            None => {
                minis = batches(&train_set.records, train_set.n_sources(), cfg.batch, &mut batch_rng)
                    .into_iter()
                    .map(|idx| {
                        let refs: Vec<&Record> = idx.iter().map(|&i| &train_set.records[i]).collect();
                        PreparedBatch::new(&train_set.schema, &refs)
                    })
                    .collect::<Result<Vec<_>>>()?;
                minis.iter().collect()
            }
        };
        for batch in plan {
            let eps = draw_eps(&net.posterior, &mut eps_rng);
            let terms = Terms {
                calibration: batch.n_hf() > 0,
                ..Terms::ALL
            };
            let (report, grads) = evaluate(&net, batch, loss_cfg, &eps, terms, true)?;
            if let Some(term) = report.non_finite_term() {
                return Err(Error::NonFinite {
                    term: term.into(),
                    epoch,
                });
            }
            opt.step(&mut net, &grads.expect("gradient requested"));
            reports.push(report);
        }
        let report = mean_report(&reports);

        if epoch % cfg.log_interval == 0 || epoch == cfg.epochs {
            let val = match &val_batch {
                Some(vb) => {
                    let (r, _) = evaluate(&net, vb, loss_cfg, &zero_eps(&net.posterior), Terms::ALL, false)?;
                    if let Some(term) = r.non_finite_term() {
                        return Err(Error::NonFinite {
                            term: format!("validation {term}"),
                            epoch,
                        });
                    }
                    Some(r)
                }
                None => None,
            };
            history.push(HistoryRow {
                epoch,
                train_total: report.total,
                train_nll_em: report.nll_em_total(),
                train_nll_cal: report.nll_cal_total(),
                train_is_em: report.is_em_total(),
                train_is_cal: report.is_cal_total(),
                train_kl: report.kl_total(),
                val_total: val.as_ref().map(|r| r.total),
                val_nll_em: val.as_ref().map(LossReport::nll_em_total),
                val_nll_cal: val.as_ref().map(LossReport::nll_cal_total),
            });
            if let Some(v) = val {
                if best.as_ref().is_none_or(|(b, ..)| v.total < *b) {
                    best = Some((v.total, epoch, net.clone(), v));
                }
            }
        }
        last_report = Some(report);
    }

    let final_report = last_report.expect("epochs >= 1");
    let (network, best_epoch, best_val) = match best {
        Some((_, e, n, v)) if cfg.keep_best => (n, e, Some(v)),
        _ => {
            let v = match &val_batch {
                Some(vb) => Some(evaluate(&net, vb, loss_cfg, &zero_eps(&net.posterior), Terms::ALL, false)?.0),
                None => None,
            };
            (net.clone(), cfg.epochs, v)
        }
    };
    Ok(TrainOutcome {
        network,
        final_network: net,
        best_epoch,
        history,
        final_report,
        best_val,
    })
}

/// One stage of a staged calibration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepConfig {
    /// Restricts both training and validation rows for this stage.
    pub filter: Option<RowFilter>,
    pub train: TrainConfig,
}

/// Runs the stages in order, each starting from the previous stage's result
/// with its own freeze list.
pub fn two_step_calibrate(
    net: Network,
    train_set: &MultiSourceDataset,
    val_set: Option<&MultiSourceDataset>,
    loss_cfg: &LossConfig,
    steps: &[StepConfig],
    seed: u64,
) -> Result<(Network, Vec<TrainOutcome>)> {
    if steps.is_empty() {
        return Err(Error::Config("no calibration steps given".into()));
    }
    let mut net = net;
    let mut outcomes = Vec::with_capacity(steps.len());
    for (k, step) in steps.iter().enumerate() {
        let (tr, va) = match &step.filter {
            Some(f) => {
                let tr = f.apply(train_set)?;
                if tr.records.is_empty() {
                    return Err(Error::Config(format!(
                        "step {}: filter on `{}` selects no training rows",
                        k + 1,
                        f.column
                    )));
                }
                let va = val_set.map(|v| f.apply(v)).transpose()?;
                (tr, va)
            }
            None => (train_set.clone(), val_set.cloned()),
        };
        let step_seed = if k == 0 { seed } else { derive_seed(seed, &format!("step{k}")) };
        let out = train(net, &tr, va.as_ref(), loss_cfg, &step.train, step_seed)?;
        net = out.network.clone();
        outcomes.push(out);
    }
    Ok((net, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{generate, AnalyticConfig};
    use crate::dataset::CompareOp;
    use crate::net::NetworkConfig;

    fn data(sources: Vec<usize>) -> (MultiSourceDataset, MultiSourceDataset) {
        let cfg = AnalyticConfig {
            sources,
            ..Default::default()
        };
        let tr = generate(&cfg, cfg.n_train, 1).unwrap();
        let va = generate(&cfg, cfg.val_counts(), 2).unwrap();
        let trs = tr.standardize().unwrap();
        let vas = va.standardize_with(trs.standardizer.as_ref().unwrap());
        (trs, vas)
    }

    fn short(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            log_interval: 5,
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_and_history_rows() {
        let (tr, va) = data(vec![0, 2]);
        let net = Network::init(&NetworkConfig::default(), &tr, 1).unwrap();
        let out = train(net, &tr, Some(&va), &LossConfig::default(), &short(200), 3).unwrap();
        assert_eq!(out.history.len(), 40);
        assert!(out.history.last().unwrap().train_total < out.history[0].train_total);

        let net = Network::init(&NetworkConfig::default(), &tr, 1).unwrap();
        let one = train(net, &tr, None, &LossConfig::default(), &short(1), 3).unwrap();
        assert_eq!(one.history.len(), 1);
        assert_eq!(one.history[0].epoch, 1);
        let net = Network::init(&NetworkConfig::default(), &tr, 1).unwrap();
        let odd = train(net, &tr, None, &LossConfig::default(), &short(12), 3).unwrap();
        assert_eq!(odd.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), vec![5, 10, 12]);
    }

    #[test]
    fn training_is_deterministic() {
        let (tr, va) = data(vec![0, 1, 2]);
        let run = || {
            let net = Network::init(&NetworkConfig::default(), &tr, 4).unwrap();
            train(net, &tr, Some(&va), &LossConfig::default(), &short(30), 9).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.final_network, b.final_network);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn mini_batches_cover_every_source() {
        let (tr, _) = data(vec![0, 1, 2]);
        let net = Network::init(&NetworkConfig::default(), &tr, 4).unwrap();
        let cfg = TrainConfig {
            batch: BatchMode::Mini { size: 64 },
            ..short(3)
        };
        let out = train(net, &tr, None, &LossConfig::default(), &cfg, 1).unwrap();
        assert!(out.final_report.total.is_finite());
        let mut rng = substream(1, "t");
        let plan = batches(&tr.records, 3, BatchMode::Mini { size: 64 }, &mut rng);
        let mut all: Vec<usize> = plan.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..tr.records.len()).collect::<Vec<_>>());
        assert!(plan.iter().all(|b| b.iter().any(|&i| tr.records[i].source == 0)));
    }

    #[test]
    fn freeze_pins_value_and_rejects_unknown_names() {
        let (tr, _) = data(vec![0, 1, 2]);
        let net = Network::init(&NetworkConfig::default(), &tr, 4).unwrap();
        let cfg = TrainConfig {
            frozen: vec![FreezeSpec {
                name: "theta2".into(),
                value: Some(0.25),
            }],
            ..short(20)
        };
        let out = train(net.clone(), &tr, None, &LossConfig::default(), &cfg, 1).unwrap();
        let st = tr.standardizer.as_ref().unwrap();
        let slot = tr.schema.param_index("theta2").unwrap();
        let k = out.final_network.posterior.sources[1].iter().position(|e| e.slot == slot).unwrap();
        let v = out.final_network.posterior.centre_values(1).unwrap()[k];
        assert!((st.theta[slot].inverse(v) - 0.25).abs() < 1e-12);

        let bad = TrainConfig {
            frozen: vec![FreezeSpec {
                name: "E".into(),
                value: None,
            }],
            ..short(2)
        };
        assert!(matches!(
            train(net, &tr, None, &LossConfig::default(), &bad, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_unfiltered_step_equals_plain_training() {
        let (tr, va) = data(vec![0, 2]);
        let net = Network::init(&NetworkConfig::default(), &tr, 4).unwrap();
        let plain = train(net.clone(), &tr, Some(&va), &LossConfig::default(), &short(25), 6).unwrap();
        let step = StepConfig {
            filter: None,
            train: short(25),
        };
        let (staged, _) = two_step_calibrate(net, &tr, Some(&va), &LossConfig::default(), &[step], 6).unwrap();
        assert_eq!(staged, plain.network);
    }

    #[test]
    fn filtered_step_uses_only_matching_rows_and_empty_filter_fails() {
        let (tr, _) = data(vec![0, 2]);
        let f = RowFilter {
            column: "x_1".into(),
            op: CompareOp::Le,
            threshold: 0.5,
        };
        let kept = f.apply(&tr).unwrap();
        let st = tr.standardizer.as_ref().unwrap();
        assert!(kept.records.iter().all(|r| st.x[0].inverse(r.x[0]) <= 0.5));
        assert!(kept.records.len() < tr.records.len());

        let net = Network::init(&NetworkConfig::default(), &tr, 4).unwrap();
        let empty = StepConfig {
            filter: Some(RowFilter {
                column: "x_1".into(),
                op: CompareOp::Lt,
                threshold: -5.0,
            }),
            train: short(2),
        };
        assert!(matches!(
            two_step_calibrate(net, &tr, None, &LossConfig::default(), &[empty], 1),
            Err(Error::Config(_))
        ));
    }
}
