//! Composite emulation + calibration objective.
//!
//! ```text
//! total = Σ_i (NLL_em_i + NLL_cal_i) + β_IS (IS_em + IS_cal) + β_KL KL
//! ```
//!
//! Emulation terms score every source against its own targets and are averaged
//! per source before summing, so small sources weigh as much as large ones.
//! Calibration terms score each low-fidelity source, evaluated at a sampled
//! θ̂ on the high-fidelity inputs, against the high-fidelity targets. Only the
//! calibration path carries gradients into the posterior parameters.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetSchema, Record};
use crate::error::{Error, Result};
use crate::net::{CalibPosterior, NetGrads, NetInput, Network};

/// Half-width multiplier of the central prediction interval.
pub const INTERVAL_Z: f64 = 1.96;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub beta_is: f64,
    pub beta_kl: f64,
    /// Interval-score miscoverage level.
    pub phi: f64,
    /// Prior std of every calibration posterior (standardized units).
    pub prior_std: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta_is: 0.1,
            beta_kl: 0.01,
            phi: 0.05,
            prior_std: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::Config(format!("phi = {} not in (0, 1)", self.phi)));
        }
        if !(self.prior_std > 0.0) {
            return Err(Error::Config("prior_std must be positive".into()));
        }
        if !(self.beta_is >= 0.0 && self.beta_kl >= 0.0) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("standard deviation {sigma} is not positive")));
    }
    Ok(())
}

fn check_lengths(a: usize, b: usize, c: usize) -> Result<()> {
    if a != b || a != c {
        return Err(Error::Shape {
            expected: a,
            actual: if a != b { b } else { c },
        });
    }
    if a == 0 {
        return Err(Error::Contract("empty sample".into()));
    }
    Ok(())
}

/// Mean Gaussian negative log-likelihood.
pub fn nll(y: &[f64], mu: &[f64], sigma: &[f64]) -> Result<f64> {
    check_lengths(y.len(), mu.len(), sigma.len())?;
    let mut acc = 0.0;
    for ((&y, &m), &s) in y.iter().zip(mu).zip(sigma) {
        check_sigma(s)?;
        let r = (y - m) / s;
        acc += HALF_LN_2PI + s.ln() + 0.5 * r * r;
    }
    Ok(acc / y.len() as f64)
}

fn interval_score_one(y: f64, mu: f64, sigma: f64, phi: f64) -> f64 {
    let l = mu - INTERVAL_Z * sigma;
    let u = mu + INTERVAL_Z * sigma;
    let mut v = u - l;
    if y < l {
        v += 2.0 / phi * (l - y);
    }
    if y > u {
        v += 2.0 / phi * (y - u);
    }
    v
}

/// Mean interval score of the `μ ± 1.96σ` interval at level `phi`.
pub fn interval_score(y: &[f64], mu: &[f64], sigma: &[f64], phi: f64) -> Result<f64> {
    check_lengths(y.len(), mu.len(), sigma.len())?;
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::Contract(format!("phi = {phi} not in (0, 1)")));
    }
    let mut acc = 0.0;
    for ((&y, &m), &s) in y.iter().zip(mu).zip(sigma) {
        check_sigma(s)?;
        acc += interval_score_one(y, m, s, phi);
    }
    Ok(acc / y.len() as f64)
}

/// `log(σ/σ_p) + σ_p/(2σ) − 1/2` for one posterior std.
pub fn kl_entry(sigma: f64, prior_std: f64) -> Result<f64> {
    check_sigma(sigma)?;
    check_sigma(prior_std)?;
    Ok(kl_raw(sigma, prior_std))
}

/// Unchecked form; an underflowed σ yields a non-finite value for the caller to report.
fn kl_raw(sigma: f64, prior_std: f64) -> f64 {
    (sigma / prior_std).ln() + prior_std / (2.0 * sigma) - 0.5
}

/// Std-only divergence summed over every low-fidelity posterior entry.
pub fn kl_term(posterior: &CalibPosterior, prior_std: f64) -> Result<f64> {
    posterior
        .sources
        .iter()
        .skip(1)
        .flatten()
        .map(|e| kl_entry(e.std(), prior_std))
        .sum()
}

/// Standard-normal draws for every low-fidelity posterior (empty for source 0).
pub type EpsDraw = Vec<Vec<f64>>;

pub fn draw_eps<R: Rng>(posterior: &CalibPosterior, rng: &mut R) -> EpsDraw {
    posterior
        .sources
        .iter()
        .enumerate()
        .map(|(s, e)| {
            if s == 0 {
                Vec::new()
            } else {
                e.iter().map(|_| rng.sample(StandardNormal)).collect()
            }
        })
        .collect()
}

/// All-zero draws (posterior centres).
pub fn zero_eps(posterior: &CalibPosterior) -> EpsDraw {
    posterior.sources.iter().map(|e| vec![0.0; e.len()]).collect()
}

/// Network-ready view of a batch, built once and reused across epochs.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub n_sources: usize,
    emulation: NetInput,
    emulation_y: Array2<f64>,
    /// Weight `1/n_j` of each emulation row.
    emulation_w: Vec<f64>,
    source_counts: Vec<usize>,
    hf_records: Vec<Record>,
    hf_y: Array2<f64>,
}

fn targets(records: &[&Record], n_y: usize) -> Array2<f64> {
    Array2::from_shape_fn((records.len(), n_y), |(i, j)| records[i].y[j])
}

impl PreparedBatch {
    pub fn new(schema: &DatasetSchema, records: &[&Record]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let n_y = records[0].y.len();
        let ds = schema.n_sources();
        let mut counts = vec![0usize; ds];
        for r in records {
            counts[r.source] += 1;
        }
        let emulation = NetInput::emulation(schema, records)?;
        let emulation_w = records.iter().map(|r| 1.0 / counts[r.source] as f64).collect();
        let hf: Vec<&Record> = records.iter().copied().filter(|r| r.source == 0).collect();
        Ok(Self {
            n_sources: ds,
            emulation_y: targets(records, n_y),
            emulation,
            emulation_w,
            source_counts: counts,
            hf_y: targets(&hf, n_y),
            hf_records: hf.into_iter().cloned().collect(),
        })
    }

    pub fn source_counts(&self) -> &[usize] {
        &self.source_counts
    }

    pub fn n_hf(&self) -> usize {
        self.hf_records.len()
    }
}

/// Which parts of the objective to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub emulation: bool,
    pub calibration: bool,
    pub kl: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        emulation: true,
        calibration: true,
        kl: true,
    };
    pub const EMULATION: Terms = Terms {
        emulation: true,
        calibration: false,
        kl: false,
    };
    pub const CALIBRATION: Terms = Terms {
        emulation: false,
        calibration: true,
        kl: false,
    };
}

/// Loss value with its breakdown. Matrices are indexed `[output][source]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub nll_em: Vec<Vec<f64>>,
    pub nll_cal: Vec<Vec<f64>>,
    pub is_em: Vec<Vec<f64>>,
    pub is_cal: Vec<Vec<f64>>,
    /// `[source][entry]`.
    pub kl: Vec<Vec<f64>>,
    pub beta_is: f64,
    pub beta_kl: f64,
}

fn sum2(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().sum()
}

impl LossReport {
    fn zeros(n_y: usize, ds: usize, cfg: &LossConfig) -> Self {
        let z = vec![vec![0.0; ds]; n_y];
        Self {
            total: 0.0,
            nll_em: z.clone(),
            nll_cal: z.clone(),
            is_em: z.clone(),
            is_cal: z,
            kl: vec![Vec::new(); ds],
            beta_is: cfg.beta_is,
            beta_kl: cfg.beta_kl,
        }
    }

    pub fn nll_em_total(&self) -> f64 {
        sum2(&self.nll_em)
    }

    pub fn nll_cal_total(&self) -> f64 {
        sum2(&self.nll_cal)
    }

    pub fn is_em_total(&self) -> f64 {
        sum2(&self.is_em)
    }

    pub fn is_cal_total(&self) -> f64 {
        sum2(&self.is_cal)
    }

    pub fn kl_total(&self) -> f64 {
        sum2(&self.kl)
    }

    /// Weighted recombination of the parts.
    pub fn recombine(&self) -> f64 {
        self.nll_em_total()
            + self.nll_cal_total()
            + self.beta_is * (self.is_em_total() + self.is_cal_total())
            + self.beta_kl * self.kl_total()
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("nll_em", self.nll_em_total()),
            ("nll_cal", self.nll_cal_total()),
            ("is_em", self.is_em_total()),
            ("is_cal", self.is_cal_total()),
            ("kl", self.kl_total()),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Scores a head output against targets. Fills `nll[i][col]`, `is[i][col]`
/// (row-weighted sums) and, when requested, returns `∂/∂head`.
#[allow(clippy::too_many_arguments)]
fn score_rows(
    head: &Array2<f64>,
    y: &Array2<f64>,
    weight: impl Fn(usize) -> f64,
    column: impl Fn(usize) -> usize,
    cfg: &LossConfig,
    nll_out: &mut [Vec<f64>],
    is_out: &mut [Vec<f64>],
    want_grad: bool,
) -> Option<Array2<f64>> {
    let n_y = y.ncols();
    let mut d = want_grad.then(|| Array2::zeros(head.raw_dim()));
    let c = 2.0 / cfg.phi;
    for k in 0..head.nrows() {
        let w = weight(k);
        let col = column(k);
        for i in 0..n_y {
            let mu = head[(k, i)];
            let log_s = head[(k, n_y + i)];
            let s = log_s.exp();
            let r = (y[(k, i)] - mu) / s;
            nll_out[i][col] += w * (HALF_LN_2PI + log_s + 0.5 * r * r);
            let yk = y[(k, i)];
            is_out[i][col] += w * interval_score_one(yk, mu, s, cfg.phi);
            if let Some(d) = d.as_mut() {
                let l = mu - INTERVAL_Z * s;
                let u = mu + INTERVAL_Z * s;
                let below = (yk < l) as u8 as f64;
                let above = (yk > u) as u8 as f64;
                let d_mu_is = c * (below - above);
                let d_s_is = 2.0 * INTERVAL_Z - c * INTERVAL_Z * (below + above);
                d[(k, i)] = w * (-r / s + cfg.beta_is * d_mu_is);
                d[(k, n_y + i)] = w * ((1.0 - r * r) + cfg.beta_is * d_s_is * s);
            }
        }
    }
    d
}

/// Evaluates the selected terms and, when `want_grad`, their gradient.
pub fn evaluate(
    net: &Network,
    batch: &PreparedBatch,
    cfg: &LossConfig,
    eps: &EpsDraw,
    terms: Terms,
    want_grad: bool,
) -> Result<(LossReport, Option<NetGrads>)> {
    let ds = batch.n_sources;
    let mut report = LossReport::zeros(net.n_y, ds, cfg);
    let mut grads = want_grad.then(|| net.zero_grads());

    if terms.emulation {
        let (head, cache) = if want_grad {
            let (h, c) = net.forward_cached(&batch.emulation)?;
            (h, Some(c))
        } else {
            (net.forward_batch(&batch.emulation)?.0, None)
        };
        let d = score_rows(
            &head,
            &batch.emulation_y,
            |k| batch.emulation_w[k],
            |k| batch.emulation.source[k],
            cfg,
            &mut report.nll_em,
            &mut report.is_em,
            want_grad,
        );
        if let (Some(g), Some(cache), Some(d)) = (grads.as_mut(), cache, d) {
            // ∂/∂θ_input is dropped: emulation never updates the posteriors
            let _ = net.backward(&cache, d, g);
        }
    }

    if terms.calibration && ds > 1 {
        if batch.hf_records.is_empty() {
            return Err(Error::Contract("calibration loss needs high-fidelity records".into()));
        }
        if eps.len() != ds {
            return Err(Error::Shape {
                expected: ds,
                actual: eps.len(),
            });
        }
        let hf: Vec<&Record> = batch.hf_records.iter().collect();
        let w = 1.0 / hf.len() as f64;
        for (j, eps_j) in eps.iter().enumerate().take(ds).skip(1) {
            let fill = net.posterior.theta_fill(j, eps_j)?;
            let input = NetInput::with_source_theta(&net.schema, &hf, j, &fill)?;
            let (head, cache) = if want_grad {
                let (h, c) = net.forward_cached(&input)?;
                (h, Some(c))
            } else {
                (net.forward_batch(&input)?.0, None)
            };
            let d = score_rows(
                &head,
                &batch.hf_y,
                |_| w,
                |_| j,
                cfg,
                &mut report.nll_cal,
                &mut report.is_cal,
                want_grad,
            );
            if let (Some(g), Some(cache), Some(d)) = (grads.as_mut(), cache, d) {
                let d_theta = net.backward(&cache, d, g);
                let d_hat: Vec<f64> = net.posterior.sources[j]
                    .iter()
                    .map(|e| d_theta.column(e.slot).sum())
                    .collect();
                net.posterior_backward(j, eps_j, &d_hat, g);
            }
        }
    }

    if terms.kl {
        for (j, entries) in net.posterior.sources.iter().enumerate().skip(1) {
            report.kl[j] = entries.iter().map(|e| kl_raw(e.std(), cfg.prior_std)).collect();
            if let Some(g) = grads.as_mut() {
                for (k, e) in entries.iter().enumerate() {
                    if !e.frozen {
                        g.posterior[j][k].1 += cfg.beta_kl * (1.0 - cfg.prior_std / (2.0 * e.std()));
                    }
                }
            }
        }
    }

    report.total = report.recombine();
    Ok((report, grads))
}

/// `(NLL_em, IS_em)` summed over outputs and sources.
pub fn emulation_loss(net: &Network, batch: &PreparedBatch, cfg: &LossConfig) -> Result<(f64, f64)> {
    let eps = zero_eps(&net.posterior);
    let (r, _) = evaluate(net, batch, cfg, &eps, Terms::EMULATION, false)?;
    Ok((r.nll_em_total(), r.is_em_total()))
}

/// `(NLL_cal, IS_cal)` summed over outputs and low-fidelity sources.
pub fn calibration_loss(net: &Network, batch: &PreparedBatch, cfg: &LossConfig, eps: &EpsDraw) -> Result<(f64, f64)> {
    let (r, _) = evaluate(net, batch, cfg, eps, Terms::CALIBRATION, false)?;
    Ok((r.nll_cal_total(), r.is_cal_total()))
}

pub fn total_loss(net: &Network, batch: &PreparedBatch, cfg: &LossConfig, eps: &EpsDraw) -> Result<LossReport> {
    Ok(evaluate(net, batch, cfg, eps, Terms::ALL, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{generate, AnalyticConfig};
    use crate::net::NetworkConfig;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn nll_closed_forms() {
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((nll(&[0.0], &[0.0], &[1.0]).unwrap() - half_ln_2pi).abs() < 1e-12);
        assert!((nll(&[0.0], &[0.0], &[1.0]).unwrap() - 0.918939).abs() < 1e-6);
        assert!((nll(&[1.0], &[0.0], &[1.0]).unwrap() - (half_ln_2pi + 0.5)).abs() < 1e-12);
        let one = nll(&[0.3], &[0.1], &[0.7]).unwrap();
        let two = nll(&[0.3, 0.3], &[0.1, 0.1], &[0.7, 0.7]).unwrap();
        assert!((one - two).abs() < 1e-15);
        assert!(matches!(nll(&[0.0], &[0.0], &[0.0]), Err(Error::Contract(_))));
        assert!(matches!(nll(&[0.0], &[0.0], &[-1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn interval_score_closed_forms() {
        assert!((interval_score(&[0.0], &[0.0], &[1.0], 0.05).unwrap() - 3.92).abs() < 1e-12);
        assert!((interval_score(&[3.0], &[0.0], &[1.0], 0.05).unwrap() - 45.52).abs() < 1e-9);
        assert!((interval_score(&[-3.0], &[0.0], &[1.0], 0.05).unwrap() - 45.52).abs() < 1e-9);
        assert!((interval_score(&[1.96], &[0.0], &[1.0], 0.05).unwrap() - 3.92).abs() < 1e-12);
        assert!(interval_score(&[0.0], &[0.0], &[0.0], 0.05).is_err());
        assert!(interval_score(&[0.0], &[0.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn interval_score_minimized_by_tightest_covering_sigma() {
        // single sample at distance 1 from the mean: the optimum σ puts the
        // interval edge on the sample, σ* = 1/1.96
        let y = 1.0;
        let mut best = (f64::INFINITY, 0.0);
        for k in 1..=4000 {
            let s = k as f64 * 0.001;
            let v = interval_score(&[y], &[0.0], &[s], 0.05).unwrap();
            if v < best.0 {
                best = (v, s);
            }
        }
        assert!((best.1 - 1.0 / 1.96).abs() <= 0.001, "argmin {}", best.1);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_entry(2.0, 2.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let v = kl_entry(e * 1.5, 1.5).unwrap();
        assert!((v - (1.0 + 1.0 / (2.0 * e) - 0.5)).abs() < 1e-12);
        assert!((v - 0.683940).abs() < 1e-6);
        assert!(kl_entry(0.0, 1.0).is_err());
    }

    #[test]
    fn kl_grid_behaviour() {
        // this std-only divergence vanishes at σ = σ_p but its minimum sits at
        // σ = σ_p/2 with value 1/2 − ln 2
        let sp = 0.8;
        let floor = 0.5 - 2f64.ln();
        let mut min = (f64::INFINITY, 0.0);
        for k in 1..=20000 {
            let s = k as f64 * 1e-4 * 4.0 * sp;
            let v = kl_entry(s, sp).unwrap();
            assert!(v >= floor - 1e-12);
            if v < min.0 {
                min = (v, s);
            }
        }
        assert!((min.1 - sp / 2.0).abs() < 1e-3);
        assert!((min.0 - floor).abs() < 1e-6);
        assert_eq!(kl_entry(sp, sp).unwrap(), 0.0);
    }

    fn setup(sources: Vec<usize>) -> (Network, crate::dataset::MultiSourceDataset) {
        let cfg = AnalyticConfig {
            sources,
            ..Default::default()
        };
        let ds = generate(&cfg, cfg.n_train, 2).unwrap().standardize().unwrap();
        let net = Network::init(&NetworkConfig::default(), &ds, 17).unwrap();
        (net, ds)
    }

    #[test]
    fn report_identity_and_weights() {
        let (net, ds) = setup(vec![0, 1, 2]);
        let refs: Vec<&Record> = ds.records.iter().collect();
        let batch = PreparedBatch::new(&ds.schema, &refs).unwrap();
        let eps = draw_eps(&net.posterior, &mut substream(1, "eps"));
        let cfg = LossConfig::default();
        let r = total_loss(&net, &batch, &cfg, &eps).unwrap();
        let recomputed = r.nll_em_total()
            + r.nll_cal_total()
            + cfg.beta_is * (r.is_em_total() + r.is_cal_total())
            + cfg.beta_kl * r.kl_total();
        assert!((r.total - recomputed).abs() < 1e-9);
        assert!(r.nll_cal.iter().all(|row| row[0] == 0.0));

        let bare = LossConfig {
            beta_is: 0.0,
            beta_kl: 0.0,
            ..cfg.clone()
        };
        let r0 = total_loss(&net, &batch, &bare, &eps).unwrap();
        assert!((r0.total - (r0.nll_em_total() + r0.nll_cal_total())).abs() < 1e-12);

        let mut at_prior = net.clone();
        for e in at_prior.posterior.sources.iter_mut().flatten() {
            e.log_std = cfg.prior_std.ln();
        }
        assert_eq!(kl_term(&at_prior.posterior, cfg.prior_std).unwrap(), 0.0);
    }

    #[test]
    fn hf_only_perfect_fit_gives_closed_form() {
        // zero block-3 output weights and biases equal to the targets' mean 0 / log σ 0
        let (mut net, ds) = setup(vec![0]);
        let last = net.block3.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        let recs: Vec<Record> = ds
            .records
            .iter()
            .map(|r| Record {
                y: vec![0.0; 3],
                ..r.clone()
            })
            .collect();
        let refs: Vec<&Record> = recs.iter().collect();
        let batch = PreparedBatch::new(&ds.schema, &refs).unwrap();
        let (nll_em, _) = emulation_loss(&net, &batch, &LossConfig::default()).unwrap();
        assert!((nll_em - 3.0 * HALF_LN_2PI).abs() < 1e-12);
        // single source: calibration terms vanish
        let (nc, ic) = calibration_loss(&net, &batch, &LossConfig::default(), &zero_eps(&net.posterior)).unwrap();
        assert_eq!((nc, ic), (0.0, 0.0));
    }

    #[test]
    fn triplicating_a_source_leaves_emulation_nll_unchanged() {
        let (net, ds) = setup(vec![0, 1, 2]);
        let refs: Vec<&Record> = ds.records.iter().collect();
        let base = emulation_loss(&net, &PreparedBatch::new(&ds.schema, &refs).unwrap(), &LossConfig::default()).unwrap();
        let mut tripled = refs.clone();
        for r in ds.records_of(2) {
            tripled.push(r);
            tripled.push(r);
        }
        let trip = emulation_loss(&net, &PreparedBatch::new(&ds.schema, &tripled).unwrap(), &LossConfig::default()).unwrap();
        assert!((base.0 - trip.0).abs() < 1e-9);
        assert!((base.1 - trip.1).abs() < 1e-9);
    }

    #[test]
    fn emulation_gradient_never_reaches_posterior() {
        let (net, ds) = setup(vec![0, 1, 2]);
        let refs: Vec<&Record> = ds.records.iter().collect();
        let batch = PreparedBatch::new(&ds.schema, &refs).unwrap();
        let eps = draw_eps(&net.posterior, &mut substream(3, "eps"));
        let (_, g) = evaluate(&net, &batch, &LossConfig::default(), &eps, Terms::EMULATION, true).unwrap();
        assert!(g.unwrap().posterior_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_batch_and_missing_hf_are_contract_violations() {
        let (net, ds) = setup(vec![0, 2]);
        assert!(matches!(PreparedBatch::new(&ds.schema, &[]), Err(Error::Contract(_))));
        let lf: Vec<&Record> = ds.records_of(1).collect();
        let batch = PreparedBatch::new(&ds.schema, &lf).unwrap();
        let eps = zero_eps(&net.posterior);
        assert!(matches!(
            calibration_loss(&net, &batch, &LossConfig::default(), &eps),
            Err(Error::Contract(_))
        ));
    }

    fn block_mut(n: &mut Network, blk: usize) -> &mut crate::nn::Mlp {
        match blk {
            0 => &mut n.block0,
            1 => &mut n.block1,
            _ => &mut n.block3,
        }
    }

    /// Finite-difference oracle over every posterior parameter and a sample of weights.
    #[test]
    fn full_gradient_matches_central_differences() {
        let (net, ds) = setup(vec![0, 1, 2]);
        let sub: Vec<&Record> = ds.records.iter().step_by(7).collect();
        let batch = PreparedBatch::new(&ds.schema, &sub).unwrap();
        let eps = draw_eps(&net.posterior, &mut substream(4, "eps"));
        let cfg = LossConfig::default();
        let (_, g) = evaluate(&net, &batch, &cfg, &eps, Terms::ALL, true).unwrap();
        let g = g.unwrap();
        let f = |n: &Network| evaluate(n, &batch, &cfg, &eps, Terms::ALL, false).unwrap().0.total;
        let h = 1e-6;
        for s in 1..3 {
            for k in 0..net.posterior.sources[s].len() {
                for which in 0..2 {
                    let mut p = net.clone();
                    let mut m = net.clone();
                    if which == 0 {
                        p.posterior.sources[s][k].mean += h;
                        m.posterior.sources[s][k].mean -= h;
                    } else {
                        p.posterior.sources[s][k].log_std += h;
                        m.posterior.sources[s][k].log_std -= h;
                    }
                    let fd = (f(&p) - f(&m)) / (2.0 * h);
                    let an = if which == 0 { g.posterior[s][k].0 } else { g.posterior[s][k].1 };
                    assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-2), "s{s} k{k} w{which}: fd {fd} an {an}");
                }
            }
        }
        for (blk, gb) in [(0usize, &g.block0), (1, &g.block1), (3, &g.block3)] {
            for l in 0..gb.weight.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                block_mut(&mut p, blk).layers[l].weight[(0, 0)] += h;
                block_mut(&mut m, blk).layers[l].weight[(0, 0)] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = gb.weight[l][(0, 0)];
                assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-2), "block{blk} layer{l}: fd {fd} an {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn kl_never_below_floor(ratio in 1e-3f64..1e3) {
            let v = kl_entry(ratio, 1.0).unwrap();
            prop_assert!(v >= 0.5 - 2f64.ln() - 1e-12);
        }
    }
}
