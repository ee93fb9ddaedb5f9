//! File-level commands: generate, train, two-step and eval.
//!
//! Every artifact carries the resolved config hash and the root seed, as a
//! leading `# config_hash=… seed=…` line in CSV files or as JSON fields.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytic::generate as generate_analytic;
use crate::config::{sha256_hex, RunConfig};
use crate::dataset::{load_dataset, write_dataset, MultiSourceDataset};
use crate::error::{Error, Result};
use crate::eval::{
    analytic_oracle, emulate_hf_suite, export_latents, posterior_densities, posterior_report, OracleResult,
    PosteriorSummary, RrmseRow,
};
use crate::loss::LossReport;
use crate::net::{Checkpoint, Network};
use crate::rng::derive_seed;
use crate::trainer::{train, two_step_calibrate, HistoryRow, TrainOutcome, HISTORY_COLUMNS};

pub const MANIFEST_FORMAT: &str = "fusecal-manifest";
pub const REPORT_FORMAT: &str = "fusecal-eval-report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub seed: u64,
    /// Rows per source, in source-id order.
    pub counts: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub seed: u64,
    pub sources: Vec<String>,
    pub train: ManifestFile,
    pub val: ManifestFile,
    pub test: ManifestFile,
}

fn header_line(config_hash: &str, seed: u64) -> String {
    format!("config_hash={config_hash} seed={seed}")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Writes a CSV table preceded by the provenance comment line.
fn write_table(path: &Path, config_hash: &str, seed: u64, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    let mut text = format!("# {}\n", header_line(config_hash, seed));
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    write_text(path, &text)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes analytic train/validation/test files and `manifest.json`.
/// Refuses to replace existing files unless `force` is set.
pub fn run_generate(cfg: &RunConfig, force: bool) -> Result<Manifest> {
    let analytic = cfg
        .analytic_config()
        .ok_or_else(|| Error::Config("generate needs an analytic config, not an external schema".into()))?;
    let paths = [cfg.paths.train_path(), cfg.paths.val_path(), cfg.paths.test_path()];
    let manifest_path = cfg.paths.data_dir().join("manifest.json");
    if !force {
        if let Some(p) = paths.iter().chain([&manifest_path]).find(|p| p.exists()) {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
    }
    let hash = cfg.hash()?;
    let comment = vec![header_line(&hash, cfg.seed)];
    let plan = [
        ("data/train", analytic.n_train),
        ("data/val", analytic.val_counts()),
        ("data/test", [analytic.n_test; 3]),
    ];
    let mut files = Vec::new();
    let mut names = Vec::new();
    for ((stream, counts), path) in plan.into_iter().zip(&paths) {
        let seed = derive_seed(cfg.seed, stream);
        let ds = generate_analytic(&analytic, counts, seed)?;
        ensure_parent(path)?;
        write_dataset(path, &ds, &comment)?;
        names = ds.schema.sources.iter().map(|s| s.name.clone()).collect();
        files.push(ManifestFile {
            path: path.clone(),
            seed,
            counts: ds.counts(),
            sha256: file_sha256(path)?,
        });
    }
    let mut files = files.into_iter();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        config_hash: hash,
        seed: cfg.seed,
        sources: names,
        train: files.next().expect("three files"),
        val: files.next().expect("three files"),
        test: files.next().expect("three files"),
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

struct Prepared {
    train: MultiSourceDataset,
    val: Option<MultiSourceDataset>,
    dataset_hash: String,
}

fn prepare_training_data(cfg: &RunConfig) -> Result<Prepared> {
    let schema = cfg.dataset_schema();
    let train_path = cfg.paths.train_path();
    let dataset_hash = file_sha256(&train_path)?;
    let train = load_dataset(&train_path, &schema)?.standardize()?;
    let st = train.standardizer.clone().expect("just standardized");
    let val_path = cfg.paths.val_path();
    let val = if val_path.exists() || cfg.paths.val.is_some() {
        Some(load_dataset(&val_path, &schema)?.standardize_with(&st))
    } else {
        None
    };
    Ok(Prepared { train, val, dataset_hash })
}

fn history_rows(history: &[HistoryRow]) -> Vec<Vec<String>> {
    history.iter().map(HistoryRow::fields).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub best_epoch: usize,
    pub final_train: LossReport,
    pub best_val: Option<LossReport>,
}

impl From<&TrainOutcome> for StageSummary {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            best_epoch: o.best_epoch,
            final_train: o.final_report.clone(),
            best_val: o.best_val.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
}

fn save_checkpoint(cfg: &RunConfig, prep: &Prepared, net: Network, epoch: usize, hash: &str) -> Result<Checkpoint> {
    let st = prep.train.standardizer.clone().expect("standardized");
    let mut ck = Checkpoint::new(net, st, cfg.seed, epoch);
    ck.config_hash = hash.to_string();
    ck.dataset_hash = prep.dataset_hash.clone();
    let path = cfg.paths.checkpoint_path();
    ensure_parent(&path)?;
    ck.save(&path)?;
    Ok(ck)
}

/// Trains from a fresh initialization; writes `checkpoint.json`,
/// `history.csv` and `loss_report.json` under `out_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let hash = cfg.hash()?;
    let prep = prepare_training_data(cfg)?;
    let net = Network::init(&cfg.network, &prep.train, derive_seed(cfg.seed, "init"))?;
    let out = train(net, &prep.train, prep.val.as_ref(), &cfg.loss, &cfg.train, derive_seed(cfg.seed, "train"))?;
    let out_dir = &cfg.paths.out_dir;
    write_table(&out_dir.join("history.csv"), &hash, cfg.seed, &HISTORY_COLUMNS, &history_rows(&out.history))?;
    save_checkpoint(cfg, &prep, out.network.clone(), out.best_epoch, &hash)?;
    let summary = TrainSummary {
        config_hash: hash,
        dataset_hash: prep.dataset_hash.clone(),
        seed: cfg.seed,
        stages: vec![StageSummary::from(&out)],
    };
    write_json(&out_dir.join("loss_report.json"), &summary)?;
    Ok(summary)
}

/// Runs the configured calibration stages; writes one `history_step{k}.csv`
/// per stage plus the final checkpoint and `loss_report.json`.
pub fn run_two_step(cfg: &RunConfig) -> Result<TrainSummary> {
    if cfg.steps.is_empty() {
        return Err(Error::Config("two-step needs at least one [[steps]] entry".into()));
    }
    let hash = cfg.hash()?;
    let prep = prepare_training_data(cfg)?;
    let net = Network::init(&cfg.network, &prep.train, derive_seed(cfg.seed, "init"))?;
    let (net, outcomes) = two_step_calibrate(
        net,
        &prep.train,
        prep.val.as_ref(),
        &cfg.loss,
        &cfg.steps,
        derive_seed(cfg.seed, "train"),
    )?;
    let out_dir = &cfg.paths.out_dir;
    for (k, o) in outcomes.iter().enumerate() {
        let path = out_dir.join(format!("history_step{}.csv", k + 1));
        write_table(&path, &hash, cfg.seed, &HISTORY_COLUMNS, &history_rows(&o.history))?;
    }
    let epoch = outcomes.last().map_or(0, |o| o.best_epoch);
    save_checkpoint(cfg, &prep, net, epoch, &hash)?;
    let summary = TrainSummary {
        config_hash: hash,
        dataset_hash: prep.dataset_hash.clone(),
        seed: cfg.seed,
        stages: outcomes.iter().map(StageSummary::from).collect(),
    };
    write_json(&out_dir.join("loss_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSummary {
    pub source: String,
    pub params: Vec<String>,
    pub resolution: f64,
    pub theta_mse: Vec<f64>,
    pub min_mse: f64,
    pub skipped_points: usize,
}

impl From<&OracleResult> for OracleSummary {
    fn from(o: &OracleResult) -> Self {
        Self {
            source: o.source.clone(),
            params: o.params.clone(),
            resolution: o.resolution,
            theta_mse: o.argmin.clone(),
            min_mse: o.min_mse,
            skipped_points: o.skipped.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSummary {
    pub source: String,
    pub distance_to_hf: f64,
    pub prior_area: f64,
    pub posterior_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub config_hash: String,
    pub checkpoint_config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub rrmse: Vec<RrmseRow>,
    pub posterior: Vec<PosteriorSummary>,
    pub oracle: Option<Vec<OracleSummary>>,
    pub latents: Option<Vec<LatentSummary>>,
}

fn fmt_vec(v: &[f64]) -> Vec<String> {
    v.iter().map(f64::to_string).collect()
}

/// Evaluates the checkpoint on the test set and writes tables under `out_dir/eval`.
/// Fails when the training file no longer matches the checkpoint's dataset hash.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let hash = cfg.hash()?;
    let ck = Checkpoint::load(&cfg.paths.checkpoint_path())?;
    let train_hash = file_sha256(&cfg.paths.train_path())?;
    if train_hash != ck.dataset_hash {
        return Err(Error::Data(format!(
            "dataset hash mismatch: {} is {train_hash}, checkpoint was trained on {}",
            cfg.paths.train_path().display(),
            ck.dataset_hash
        )));
    }
    let net = &ck.network;
    let st = &ck.standardizer;
    let schema = cfg.dataset_schema();
    let names = |s: &crate::dataset::DatasetSchema| s.sources.iter().map(|x| x.name.clone()).collect::<Vec<_>>();
    if names(&schema) != names(&net.schema) || schema.calib_params != net.schema.calib_params {
        return Err(Error::Data("config schema does not match the checkpoint".into()));
    }
    let test = load_dataset(&cfg.paths.test_path(), &schema)?;
    let eval_seed = derive_seed(cfg.seed, "eval");
    let dir = cfg.paths.eval_dir();
    let seed = cfg.seed;

    let rrmse = emulate_hf_suite(net, st, &test, cfg.eval.n_mc, eval_seed)?;
    let mut header = vec!["comparison".to_string()];
    header.extend((1..=net.n_y).map(|i| format!("y_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = rrmse
        .iter()
        .map(|r| std::iter::once(r.comparison.clone()).chain(fmt_vec(&r.rrmse)).collect())
        .collect();
    write_table(&dir.join("rrmse.csv"), &hash, seed, &header, &rows)?;

    let posterior = posterior_report(net, st, cfg.eval.n_mc, eval_seed)?;
    let rows: Vec<Vec<String>> = posterior
        .iter()
        .map(|p| {
            let mut r = vec![p.source.clone(), p.param.clone()];
            r.extend(fmt_vec(&[p.mean, p.std, p.q025, p.q975, p.mu_raw, p.sigma_raw]));
            r.push(p.frozen.to_string());
            r
        })
        .collect();
    let cols = ["source", "param", "mean", "std", "q025", "q975", "mu_raw", "sigma_raw", "frozen"];
    write_table(&dir.join("posterior.csv"), &hash, seed, &cols, &rows)?;

    let pdf = posterior_densities(net, st, cfg.eval.pdf_points, cfg.eval.n_mc, cfg.eval.pdf_bins, eval_seed)?;
    let rows: Vec<Vec<String>> = pdf
        .iter()
        .map(|d| vec![d.source.clone(), d.param.clone(), d.kind.clone(), d.theta.to_string(), d.density.to_string()])
        .collect();
    let cols = ["source", "param", "kind", "theta", "density"];
    write_table(&dir.join("posterior_pdf.csv"), &hash, seed, &cols, &rows)?;

    let oracle = if cfg.eval.oracle {
        let analytic = cfg
            .analytic_config()
            .ok_or_else(|| Error::Config("the θ reference search needs analytic data".into()))?;
        let mut results = Vec::new();
        for &s in analytic.sources.iter().filter(|&&s| s != 0) {
            results.push(analytic_oracle(
                s,
                analytic.theta_range,
                analytic.x_range,
                cfg.eval.oracle_resolution,
                cfg.eval.oracle_points,
            )?);
        }
        let mut rows = Vec::new();
        for o in &results {
            for (k, p) in o.params.iter().enumerate() {
                let post = posterior.iter().find(|q| q.source == o.source && &q.param == p);
                rows.push(vec![
                    o.source.clone(),
                    p.clone(),
                    o.argmin[k].to_string(),
                    post.map(|q| q.mean.to_string()).unwrap_or_default(),
                    o.min_mse.to_string(),
                ]);
            }
        }
        let cols = ["source", "param", "theta_mse", "posterior_mean", "min_mse"];
        write_table(&dir.join("oracle.csv"), &hash, seed, &cols, &rows)?;
        let rows: Vec<Vec<String>> = results
            .iter()
            .flat_map(|o| {
                o.surface.iter().map(|(t, m)| {
                    let mut r = vec![o.source.clone()];
                    r.extend((0..2).map(|k| t.get(k).map(f64::to_string).unwrap_or_default()));
                    r.push(m.to_string());
                    r
                })
            })
            .collect();
        let cols = ["source", "theta_a", "theta_b", "mse"];
        write_table(&dir.join("oracle_surface.csv"), &hash, seed, &cols, &rows)?;
        Some(results.iter().map(OracleSummary::from).collect())
    } else {
        None
    };

    let latents = if cfg.eval.latents {
        let ex = export_latents(net, st, cfg.eval.latent_probes, eval_seed)?;
        let points = |pts: &[(String, Vec<f64>)]| -> Vec<Vec<String>> {
            pts.iter().map(|(l, z)| std::iter::once(l.clone()).chain(fmt_vec(z)).collect()).collect()
        };
        let zs_cols: Vec<String> = std::iter::once("label".to_string())
            .chain((1..=net.config.latent_source).map(|k| format!("z{k}")))
            .collect();
        let zt_cols: Vec<String> = std::iter::once("label".to_string())
            .chain((1..=net.config.latent_theta).map(|k| format!("z{k}")))
            .collect();
        write_table(&dir.join("latents_zs.csv"), &hash, seed, &zs_cols.iter().map(String::as_str).collect::<Vec<_>>(), &points(&ex.trace.z_source))?;
        write_table(&dir.join("latents_ztheta.csv"), &hash, seed, &zt_cols.iter().map(String::as_str).collect::<Vec<_>>(), &points(&ex.trace.z_theta))?;
        let summary: Vec<LatentSummary> = ex
            .distances
            .iter()
            .zip(&ex.areas)
            .map(|((s, d), (_, prior, post))| LatentSummary {
                source: s.clone(),
                distance_to_hf: *d,
                prior_area: *prior,
                posterior_area: *post,
            })
            .collect();
        let rows: Vec<Vec<String>> = summary
            .iter()
            .map(|l| std::iter::once(l.source.clone()).chain(fmt_vec(&[l.distance_to_hf, l.prior_area, l.posterior_area])).collect())
            .collect();
        let cols = ["source", "distance_to_hf", "prior_area", "posterior_area"];
        write_table(&dir.join("latent_distance.csv"), &hash, seed, &cols, &rows)?;
        Some(summary)
    } else {
        None
    };

    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        config_hash: hash,
        checkpoint_config_hash: ck.config_hash.clone(),
        dataset_hash: ck.dataset_hash.clone(),
        seed,
        rrmse,
        posterior,
        oracle,
        latents,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
