//! Accuracy metrics, the brute-force θ̂ reference, posterior summaries and
//! latent-space export.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{eval_source, owned_params, test_grid, GridMode};
use crate::dataset::{MultiSourceDataset, Record, Standardizer};
use crate::error::{Error, Result};
use crate::net::{LatentTrace, NetInput, Network};
use crate::rng::substream;

/// Root-mean-square error divided by the population std of the targets.
pub fn rrmse(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape {
            expected: y_true.len(),
            actual: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::Contract("rrmse of an empty sample".into()));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let std = (y_true.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) {
        return Err(Error::Data("rrmse target is constant".into()));
    }
    let mse = y_true.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    Ok(mse.sqrt() / std)
}

/// Result of the exhaustive θ search for one low-fidelity source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub source: String,
    pub params: Vec<String>,
    pub resolution: f64,
    pub argmin: Vec<f64>,
    pub min_mse: f64,
    /// `(θ, mse)` for every evaluated grid point.
    pub surface: Vec<(Vec<f64>, f64)>,
    /// Grid points dropped because some x hit a log-domain violation.
    pub skipped: Vec<Vec<f64>>,
}

fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|k| lo + k as f64 * step).collect()
}

/// Grid search over θ minimizing the mean squared discrepancy between a
/// low-fidelity model and the high-fidelity model over `x_grid`, with each
/// output scaled by the high-fidelity output's std over the grid.
pub fn theta_mse_oracle<L, H>(
    source: &str,
    params: &[String],
    bounds: &[(f64, f64)],
    resolution: f64,
    x_grid: &[f64],
    lf: L,
    hf: H,
) -> Result<OracleResult>
where
    L: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
    H: Fn(f64) -> Result<Vec<f64>>,
{
    if bounds.is_empty() || !(resolution > 0.0) || x_grid.is_empty() {
        return Err(Error::Config("oracle needs parameters, a positive resolution and x points".into()));
    }
    let hf_y: Vec<Vec<f64>> = x_grid.iter().map(|&x| hf(x)).collect::<Result<_>>()?;
    let n_y = hf_y[0].len();
    let scale: Vec<f64> = (0..n_y)
        .map(|i| {
            let n = hf_y.len() as f64;
            let m = hf_y.iter().map(|y| y[i]).sum::<f64>() / n;
            let s = (hf_y.iter().map(|y| (y[i] - m).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 { s } else { 1.0 }
        })
        .collect();
    let axes: Vec<Vec<f64>> = bounds.iter().map(|&(lo, hi)| axis(lo, hi, resolution)).collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let point = |mut k: usize| -> Vec<f64> {
        let mut p = vec![0.0; axes.len()];
        for d in (0..axes.len()).rev() {
            p[d] = axes[d][k % axes[d].len()];
            k /= axes[d].len();
        }
        p
    };
    let evaluated: Vec<(Vec<f64>, Option<f64>)> = (0..total)
        .into_par_iter()
        .map(|k| {
            let theta = point(k);
            let mut acc = 0.0;
            for (x, yh) in x_grid.iter().zip(&hf_y) {
                match lf(&theta, *x) {
                    Ok(yl) => {
                        for i in 0..n_y {
                            acc += ((yl[i] - yh[i]) / scale[i]).powi(2);
                        }
                    }
                    Err(_) => return (theta, None),
                }
            }
            (theta, Some(acc / (x_grid.len() * n_y) as f64))
        })
        .collect();
    let mut surface = Vec::new();
    let mut skipped = Vec::new();
    for (theta, mse) in evaluated {
        match mse {
            Some(m) => surface.push((theta, m)),
            None => skipped.push(theta),
        }
    }
    let (argmin, min_mse) = surface
        .iter()
        .fold(None::<(&Vec<f64>, f64)>, |best, (t, m)| match best {
            Some((_, bm)) if bm <= *m => best,
            _ => Some((t, *m)),
        })
        .map(|(t, m)| (t.clone(), m))
        .ok_or_else(|| Error::Generation(format!("oracle for {source}: every grid point failed")))?;
    Ok(OracleResult {
        source: source.into(),
        params: params.to_vec(),
        resolution,
        argmin,
        min_mse,
        surface,
        skipped,
    })
}

/// Oracle for analytic source `source` (1 or 2) against source 0 on a
/// linspace x grid of `n_x` points.
pub fn analytic_oracle(source: usize, theta_range: [f64; 2], x_range: [f64; 2], resolution: f64, n_x: usize) -> Result<OracleResult> {
    let names: Vec<String> = owned_params(source).iter().map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(Error::Contract(format!("analytic source {source} has no calibration parameters")));
    }
    let xs = test_grid(n_x, x_range, GridMode::Linspace)?;
    let bounds = vec![(theta_range[0], theta_range[1]); names.len()];
    theta_mse_oracle(
        &format!("s{source}"),
        &names,
        &bounds,
        resolution,
        &xs,
        |t, x| eval_source(source, x, t).map(|y| y.to_vec()),
        |x| eval_source(0, x, &[]).map(|y| y.to_vec()),
    )
}

/// Monte Carlo summary of one posterior entry, physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub source: String,
    pub param: String,
    pub mean: f64,
    pub std: f64,
    pub q025: f64,
    pub q975: f64,
    /// Unclamped Gaussian mean / std mapped to physical units.
    pub mu_raw: f64,
    pub sigma_raw: f64,
    pub frozen: bool,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Physical-unit posterior samples for source `source`, one vector per owned entry.
pub fn posterior_samples(net: &Network, st: &Standardizer, source: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let k = net.posterior.n_owned(source);
    let mut rng = substream(seed, &format!("eval/posterior{source}"));
    let mut out = vec![Vec::with_capacity(n); k];
    for _ in 0..n {
        let eps: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let draw = net.posterior.sample_theta(source, &eps)?;
        for (j, (e, v)) in net.posterior.sources[source].iter().zip(draw).enumerate() {
            out[j].push(st.theta[e.slot].inverse(v));
        }
    }
    Ok(out)
}

pub fn posterior_report(net: &Network, st: &Standardizer, n_mc: usize, seed: u64) -> Result<Vec<PosteriorSummary>> {
    if n_mc < 1000 {
        return Err(Error::Config(format!("posterior report needs n_mc >= 1000, got {n_mc}")));
    }
    let mut out = Vec::new();
    for s in 1..net.n_sources() {
        let samples = posterior_samples(net, st, s, n_mc, seed)?;
        for (e, mut v) in net.posterior.sources[s].iter().zip(samples) {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            v.sort_by(f64::total_cmp);
            let col = st.theta[e.slot];
            out.push(PosteriorSummary {
                source: net.schema.sources[s].name.clone(),
                param: net.schema.calib_params[e.slot].name.clone(),
                mean,
                std,
                q025: quantile(&v, 0.025),
                q975: quantile(&v, 0.975),
                mu_raw: col.inverse(e.mean),
                sigma_raw: e.std() * col.std,
                frozen: e.frozen,
            });
        }
    }
    Ok(out)
}

/// Posterior mean of every θ slot owned by `source`, standardized, as a full-width fill vector.
pub fn posterior_mean_fill(net: &Network, st: &Standardizer, source: usize, n_mc: usize, seed: u64) -> Result<Vec<f64>> {
    let samples = posterior_samples(net, st, source, n_mc, seed)?;
    let mut fill = vec![0.0; net.n_theta()];
    for (e, v) in net.posterior.sources[source].iter().zip(samples) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        fill[e.slot] = st.theta[e.slot].forward(m);
    }
    Ok(fill)
}

/// One row of the accuracy table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrmseRow {
    /// What is compared, e.g. `s0 vs s0` or `s0 vs s2(theta_hat)`.
    pub comparison: String,
    pub rrmse: Vec<f64>,
}

fn predict_means(net: &Network, input: &NetInput, st: &Standardizer) -> Result<Vec<Vec<f64>>> {
    let (head, ..) = net.forward_batch(input)?;
    Ok(head
        .rows()
        .into_iter()
        .map(|row| (0..net.n_y).map(|i| st.y[i].inverse(row[i])).collect())
        .collect())
}

fn table_row(comparison: String, truth: &[&Record], pred: &[Vec<f64>], n_y: usize) -> Result<RrmseRow> {
    let rrmse = (0..n_y)
        .map(|i| {
            let t: Vec<f64> = truth.iter().map(|r| r.y[i]).collect();
            let p: Vec<f64> = pred.iter().map(|v| v[i]).collect();
            rrmse(&t, &p)
        })
        .collect::<Result<_>>()?;
    Ok(RrmseRow { comparison, rrmse })
}

/// Accuracy on a raw-unit test set:
/// HF emulation (`t_s = s0`), each calibrated LF source evaluated on the HF
/// test inputs at its posterior-mean θ̂, and each LF source emulating itself.
pub fn emulate_hf_suite(net: &Network, st: &Standardizer, test_raw: &MultiSourceDataset, n_mc: usize, seed: u64) -> Result<Vec<RrmseRow>> {
    let test = test_raw.standardize_with(st);
    let names: Vec<&str> = net.schema.sources.iter().map(|s| s.name.as_str()).collect();
    let hf_std: Vec<&Record> = test.records_of(0).collect();
    let hf_raw: Vec<&Record> = test_raw.records_of(0).collect();
    if hf_std.is_empty() {
        return Err(Error::Data("test set has no high-fidelity records".into()));
    }
    let mut rows = Vec::new();
    let hf_input = NetInput::emulation(&net.schema, &hf_std)?;
    rows.push(table_row(format!("{0} vs {0}", names[0]), &hf_raw, &predict_means(net, &hf_input, st)?, net.n_y)?);
    for j in 1..net.n_sources() {
        let fill = posterior_mean_fill(net, st, j, n_mc, seed)?;
        let input = NetInput::with_source_theta(&net.schema, &hf_std, j, &fill)?;
        rows.push(table_row(
            format!("{} vs {}(theta_hat)", names[0], names[j]),
            &hf_raw,
            &predict_means(net, &input, st)?,
            net.n_y,
        )?);
    }
    for (j, name) in names.iter().enumerate().skip(1) {
        let own_std: Vec<&Record> = test.records_of(j).collect();
        if own_std.is_empty() {
            continue;
        }
        let own_raw: Vec<&Record> = test_raw.records_of(j).collect();
        let input = NetInput::emulation(&net.schema, &own_std)?;
        rows.push(table_row(format!("{name} vs {name}"), &own_raw, &predict_means(net, &input, st)?, net.n_y)?);
    }
    Ok(rows)
}

/// Latent-space export plus the summary statistics derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentExport {
    pub trace: LatentTrace,
    /// Mean `‖z_theta(s0) − z_theta(s_j, θ̂)‖` over posterior draws, per LF source.
    pub distances: Vec<(String, f64)>,
    /// Bounding-box area of the prior and posterior `z_theta` clouds, per LF source.
    pub areas: Vec<(String, f64, f64)>,
}

fn bbox_area(points: &[Vec<f64>]) -> f64 {
    let dims = points.first().map_or(0, Vec::len);
    (0..dims)
        .map(|d| {
            let (lo, hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
            hi - lo
        })
        .product()
}

/// Latent coordinates for every source (`z_s`), `z_theta` clouds under
/// uniform prior θ and under posterior draws for each LF source, and the HF
/// `z_theta` under random dummy θ (a single repeated point by construction).
pub fn export_latents(net: &Network, st: &Standardizer, n_probe: usize, seed: u64) -> Result<LatentExport> {
    let mut trace = LatentTrace::default();
    let mut rng = substream(seed, "eval/latents");
    let names: Vec<String> = net.schema.sources.iter().map(|s| s.name.clone()).collect();
    let zs: Vec<Vec<f64>> = (0..net.n_sources()).map(|s| net.encode_source(s)).collect::<Result<_>>()?;
    for (name, z) in names.iter().zip(&zs) {
        trace.z_source.push((name.clone(), z.clone()));
    }
    let hf_mask = net.schema.mask_for(0);
    let mut hf_point = None;
    for _ in 0..n_probe {
        let dummy: Vec<Option<f64>> = (0..net.n_theta()).map(|_| Some(rng.random_range(-3.0..3.0))).collect();
        let masked = crate::dataset::mask_theta(&dummy, &hf_mask, &vec![0.0; net.n_theta()], crate::dataset::MaskMode::Emulation)?;
        let z = net.encode_calibration(&zs[0], &masked)?;
        hf_point.get_or_insert_with(|| z.clone());
        trace.z_theta.push((format!("{}_dummy", names[0]), z));
    }
    let hf_z = match hf_point {
        Some(z) => z,
        None => net.encode_calibration(&zs[0], &vec![0.0; net.n_theta()])?,
    };
    let mut distances = Vec::new();
    let mut areas = Vec::new();
    for j in 1..net.n_sources() {
        let entries = &net.posterior.sources[j];
        let mut prior_cloud = Vec::with_capacity(n_probe);
        for _ in 0..n_probe {
            let mut fill = vec![0.0; net.n_theta()];
            for e in entries {
                let p = &net.schema.calib_params[e.slot];
                fill[e.slot] = st.theta[e.slot].forward(rng.random_range(p.lower..p.upper));
            }
            let z = net.encode_calibration(&zs[j], &fill)?;
            trace.z_theta.push((format!("{}_prior", names[j]), z.clone()));
            prior_cloud.push(z);
        }
        let mut post_cloud = Vec::with_capacity(n_probe);
        let mut dist = 0.0;
        for _ in 0..n_probe {
            let eps: Vec<f64> = entries.iter().map(|_| rng.sample(StandardNormal)).collect();
            let fill = net.posterior.theta_fill(j, &eps)?;
            let z = net.encode_calibration(&zs[j], &fill)?;
            dist += z.iter().zip(&hf_z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            trace.z_theta.push((format!("{}_posterior", names[j]), z.clone()));
            post_cloud.push(z);
        }
        distances.push((names[j].clone(), if n_probe > 0 { dist / n_probe as f64 } else { f64::NAN }));
        areas.push((names[j].clone(), bbox_area(&prior_cloud), bbox_area(&post_cloud)));
    }
    Ok(LatentExport { trace, distances, areas })
}

/// Plot-ready density curves, physical units: the unclamped Gaussian and a
/// normalized histogram of clamped Monte Carlo draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub source: String,
    pub param: String,
    pub kind: String,
    pub theta: f64,
    pub density: f64,
}

pub fn posterior_densities(net: &Network, st: &Standardizer, n_points: usize, n_mc: usize, bins: usize, seed: u64) -> Result<Vec<DensityRow>> {
    let mut rows = Vec::new();
    for j in 1..net.n_sources() {
        let samples = posterior_samples(net, st, j, n_mc, seed)?;
        for (e, draws) in net.posterior.sources[j].iter().zip(samples) {
            let p = &net.schema.calib_params[e.slot];
            let col = st.theta[e.slot];
            let (mu, sigma) = (col.inverse(e.mean), e.std() * col.std);
            let source = net.schema.sources[j].name.clone();
            for t in test_grid(n_points.max(2), [p.lower, p.upper], GridMode::Linspace)? {
                let z = (t - mu) / sigma;
                rows.push(DensityRow {
                    source: source.clone(),
                    param: p.name.clone(),
                    kind: "gaussian".into(),
                    theta: t,
                    density: (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()),
                });
            }
            let width = p.width() / bins as f64;
            let mut counts = vec![0usize; bins];
            for v in &draws {
                let b = (((v - p.lower) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.into_iter().enumerate() {
                rows.push(DensityRow {
                    source: source.clone(),
                    param: p.name.clone(),
                    kind: "mc_histogram".into(),
                    theta: p.lower + (b as f64 + 0.5) * width,
                    density: c as f64 / (draws.len() as f64 * width),
                });
            }
        }
    }
    Ok(rows)
}
