//! Three-source, three-output analytic benchmark with one numeric input.
//!
//! Source 0 is the noisy high-fidelity function. Source 1 has two calibration
//! parameters and model-form error; source 2 has one calibration parameter and
//! reproduces source 0 exactly at θ = −0.5.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibParam, DatasetSchema, MultiSourceDataset, Record, SourceSpec};
use crate::error::{Error, Result};
use crate::rng::substream;

pub const N_OUTPUTS: usize = 3;

/// Calibration parameters owned by each analytic source, as slot names of the
/// global union. Source 1 and source 2 share the `theta1` slot but keep
/// separate posteriors.
pub fn owned_params(source: usize) -> &'static [&'static str] {
    match source {
        1 => &["theta1", "theta2"],
        2 => &["theta1"],
        _ => &[],
    }
}

/// Noise-free evaluation of source `source` at `(x, θ)`.
pub fn eval_source(source: usize, x: f64, theta: &[f64]) -> Result<[f64; N_OUTPUTS]> {
    let arity = owned_params(source).len();
    if source > 2 {
        return Err(Error::Contract(format!("analytic source {source} does not exist")));
    }
    if theta.len() != arity {
        return Err(Error::Shape {
            expected: arity,
            actual: theta.len(),
        });
    }
    let x2 = x * x;
    let x3 = x2 * x;
    let (y1, log_arg, y3) = match source {
        0 => (
            -0.5 * x3 - 2.0 * x2 + x + 1.0,
            -0.5 * x3 + 2.0 * x2 + 2.0 * x + 11.0,
            -0.5 * x3 + 2.0 * (x - 0.5).powi(2) - 2.0,
        ),
        1 => {
            let (t1, t2) = (theta[0], theta[1]);
            (
                t1 * x3 - t2 * x2 + 2.0,
                t1 * x3 + t2 * x2 + 2.0 * x + 11.0,
                t1 * x3 + t2 * (x - 0.3).cosh() - 3.5,
            )
        }
        _ => {
            let t1 = theta[0];
            (
                t1 * x3 - 2.0 * x2 + x + 1.0,
                t1 * x3 + 2.0 * x2 + 2.0 * x + 11.0,
                t1 * x3 + 2.0 * (x - 0.5).powi(2) - 2.0,
            )
        }
    };
    if !(log_arg > 0.0) {
        return Err(Error::Domain {
            source_id: source,
            x,
            theta: theta.to_vec(),
        });
    }
    Ok([y1, log_arg.ln(), y3])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticConfig {
    pub x_range: [f64; 2],
    pub theta_range: [f64; 2],
    /// Per-output noise variance added to source 0.
    pub hf_noise_var: [f64; N_OUTPUTS],
    /// Training samples per analytic source (index = analytic source id).
    pub n_train: [usize; 3],
    /// Validation samples per source as a ratio of its training count.
    pub val_ratio: f64,
    /// Test samples per source.
    pub n_test: usize,
    /// Analytic sources included in the generated dataset; must contain 0.
    pub sources: Vec<usize>,
    /// Maximum number of log-domain rejections per source before giving up.
    pub max_rejections: usize,
}

impl Default for AnalyticConfig {
    fn default() -> Self {
        Self {
            x_range: [-1.0, 2.2],
            theta_range: [-1.0, 2.2],
            hf_noise_var: [0.025, 0.00005, 0.02],
            n_train: [40, 200, 100],
            val_ratio: 0.25,
            n_test: 1000,
            sources: vec![0, 1, 2],
            max_rejections: 100_000,
        }
    }
}

impl AnalyticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_range[0] < self.x_range[1]) || !(self.theta_range[0] < self.theta_range[1]) {
            return Err(Error::Config("analytic ranges must be nonempty".into()));
        }
        if self.hf_noise_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise variances must be nonnegative".into()));
        }
        if self.sources.first() != Some(&0) {
            return Err(Error::Config("analytic sources must start with 0 (the HF source)".into()));
        }
        let mut seen = [false; 3];
        for &s in &self.sources {
            if s > 2 || std::mem::replace(&mut seen[s], true) {
                return Err(Error::Config(format!("bad analytic source list {:?}", self.sources)));
            }
        }
        if !(self.val_ratio >= 0.0) {
            return Err(Error::Config("val_ratio must be nonnegative".into()));
        }
        Ok(())
    }

    /// Schema of a dataset made of `self.sources`, renumbered contiguously.
    pub fn schema(&self) -> DatasetSchema {
        let mut calib_params: Vec<CalibParam> = Vec::new();
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(id, &s)| {
                for name in owned_params(s) {
                    if !calib_params.iter().any(|p| p.name == *name) {
                        calib_params.push(CalibParam {
                            name: name.to_string(),
                            lower: self.theta_range[0],
                            upper: self.theta_range[1],
                        });
                    }
                }
                SourceSpec {
                    source_id: id,
                    name: format!("s{s}"),
                    is_hf: s == 0,
                    calib_param_names: owned_params(s).iter().map(|n| n.to_string()).collect(),
                    n_samples: 0,
                }
            })
            .collect();
        calib_params.sort_by(|a, b| a.name.cmp(&b.name));
        DatasetSchema {
            sources,
            calib_params,
            categorical_levels: vec![],
        }
    }

    pub fn val_counts(&self) -> [usize; 3] {
        self.n_train
            .map(|n| (n as f64 * self.val_ratio).round() as usize)
    }
}

fn draw_uniform(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.random::<f64>()
}

/// Samples `counts[s]` records for every selected source `s`. x and θ are i.i.d.
/// uniform; log-domain violations are rejected and redrawn. Source 0 outputs
/// receive Gaussian noise; low-fidelity outputs are noise-free.
pub fn generate(config: &AnalyticConfig, counts: [usize; 3], seed: u64) -> Result<MultiSourceDataset> {
    config.validate()?;
    let schema = config.schema();
    let mut records = Vec::new();
    for (id, &s) in config.sources.iter().enumerate() {
        let mut rng = substream(seed, &format!("analytic/source{s}"));
        let slots: Vec<usize> = owned_params(s)
            .iter()
            .map(|n| schema.param_index(n).expect("schema built from owned_params"))
            .collect();
        let mut rejections = 0;
        let mut made = 0;
        while made < counts[s] {
            let x = draw_uniform(&mut rng, config.x_range);
            let theta: Vec<f64> = slots
                .iter()
                .map(|_| draw_uniform(&mut rng, config.theta_range))
                .collect();
            let mut y = match eval_source(s, x, &theta) {
                Ok(y) => y,
                Err(Error::Domain { .. }) => {
                    rejections += 1;
                    if rejections > config.max_rejections {
                        return Err(Error::Generation(format!(
                            "source s{s}: exceeded {} log-domain rejections",
                            config.max_rejections
                        )));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            if s == 0 {
                for (v, var) in y.iter_mut().zip(config.hf_noise_var) {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += var.sqrt() * z;
                }
            }
            let mut full = vec![None; schema.n_theta()];
            for (&slot, &t) in slots.iter().zip(&theta) {
                full[slot] = Some(t);
            }
            records.push(Record {
                source: id,
                x: vec![x],
                tc: vec![],
                theta: full,
                y: y.to_vec(),
            });
            made += 1;
        }
    }
    MultiSourceDataset::from_records(schema, 1, N_OUTPUTS, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMode {
    /// Evenly spaced, endpoints included.
    Linspace,
    /// Seeded i.i.d. uniform draws.
    Uniform { seed: u64 },
}

/// Test locations spanning `range`.
pub fn test_grid(n: usize, range: [f64; 2], mode: GridMode) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config(format!("test grid needs n >= 2, got {n}")));
    }
    Ok(match mode {
        GridMode::Linspace => (0..n)
            .map(|i| {
                if i == n - 1 {
                    range[1]
                } else {
                    range[0] + (range[1] - range[0]) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
        GridMode::Uniform { seed } => {
            let mut rng = substream(seed, "analytic/test_grid");
            (0..n).map(|_| draw_uniform(&mut rng, range)).collect()
        }
    })
}
