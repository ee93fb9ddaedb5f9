//! Four-block probabilistic network with per-source calibration posteriors.
//!
//! * Block 0 embeds the one-hot source indicator into `z_s`.
//! * Block 1 maps `[z_s, masked θ]` to `z_theta`.
//! * Block 2 (only with categorical inputs) embeds the one-hot categorical
//!   levels into `z_c`.
//! * Block 3 maps `[x, z_theta, z_c]` to a mean and a log-std per output.
//!
//! Each low-fidelity source owns an independent Gaussian over its calibration
//! parameters. Samples are drawn with the reparameterization
//! `u = μ + exp(log σ)·ε` and squashed into the training domain by
//! `c + h·tanh((u − c)/h)`, where `c`/`h` are the centre/half-width of the
//! domain in standardized units.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{mask_theta, one_hot, DatasetSchema, MaskMode, MultiSourceDataset, Record, Standardizer, ThetaMask};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, MlpGrad};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub latent_source: usize,
    pub latent_theta: usize,
    pub latent_cat: usize,
    pub block0_hidden: Vec<usize>,
    pub block1_hidden: Vec<usize>,
    pub block2_hidden: Vec<usize>,
    pub block3_hidden: Vec<usize>,
    /// Initial posterior std as a fraction of each parameter's domain width.
    pub init_std_fraction: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latent_source: 2,
            latent_theta: 2,
            latent_cat: 2,
            block0_hidden: vec![5],
            block1_hidden: vec![5],
            block2_hidden: vec![5],
            block3_hidden: vec![16, 32, 16, 8],
            init_std_fraction: 0.25,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_source == 0 || self.latent_theta == 0 || self.latent_cat == 0 {
            return Err(Error::Config("latent dimensions must be >= 1".into()));
        }
        let hidden = [&self.block0_hidden, &self.block1_hidden, &self.block2_hidden, &self.block3_hidden];
        if hidden.iter().any(|h| h.contains(&0)) {
            return Err(Error::Config("hidden layer widths must be >= 1".into()));
        }
        if !(self.init_std_fraction > 0.0) {
            return Err(Error::Config("init_std_fraction must be positive".into()));
        }
        Ok(())
    }
}

/// Calibration domain of one θ slot in standardized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotDomain {
    pub lower: f64,
    pub upper: f64,
}

impl SlotDomain {
    fn centre(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }

    /// Maps the real line onto the open interval `(lower, upper)`.
    /// Saturated `tanh` is pulled one ulp inside so the bound itself is never returned.
    pub fn clamp(&self, u: f64) -> f64 {
        let (c, h) = (self.centre(), self.half_width());
        let t = c + h * ((u - c) / h).tanh();
        t.clamp(self.lower.next_up(), self.upper.next_down())
    }

    /// `d clamp / du`.
    pub fn clamp_slope(&self, u: f64) -> f64 {
        let t = ((u - self.centre()) / self.half_width()).tanh();
        1.0 - t * t
    }

    pub fn unclamp(&self, t: f64) -> f64 {
        let (c, h) = (self.centre(), self.half_width());
        c + h * ((t - c) / h).atanh()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEntry {
    /// Global θ slot.
    pub slot: usize,
    /// Unconstrained mean, standardized units.
    pub mean: f64,
    pub log_std: f64,
    /// Frozen entries are excluded from updates and sampled at `clamp(mean)`.
    #[serde(default)]
    pub frozen: bool,
}

impl PosteriorEntry {
    pub fn std(&self) -> f64 {
        self.log_std.exp()
    }
}

/// Per-source Gaussian posteriors over owned calibration parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibPosterior {
    /// Indexed by source id; the HF source (0) has no entries.
    pub sources: Vec<Vec<PosteriorEntry>>,
    pub domain: Vec<SlotDomain>,
}

impl CalibPosterior {
    fn entries(&self, source: usize) -> Result<&[PosteriorEntry]> {
        if source == 0 {
            return Err(Error::Contract(
                "the high-fidelity source has no calibration parameters".into(),
            ));
        }
        self.sources
            .get(source)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Contract(format!("source {source} out of range")))
    }

    pub fn n_owned(&self, source: usize) -> usize {
        self.sources.get(source).map_or(0, Vec::len)
    }

    /// Reparameterized sample for a low-fidelity source, one value per owned
    /// parameter (standardized units).
    pub fn sample_theta(&self, source: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let entries = self.entries(source)?;
        if eps.len() != entries.len() {
            return Err(Error::Shape {
                expected: entries.len(),
                actual: eps.len(),
            });
        }
        Ok(entries
            .iter()
            .zip(eps)
            .map(|(e, &z)| self.domain[e.slot].clamp(pre_clamp(e, z)))
            .collect())
    }

    /// Full-width θ vector with the sample in the source's slots and zeros elsewhere.
    pub fn theta_fill(&self, source: usize, eps: &[f64]) -> Result<Vec<f64>> {
        let sample = self.sample_theta(source, eps)?;
        let mut fill = vec![0.0; self.domain.len()];
        for (e, v) in self.sources[source].iter().zip(sample) {
            fill[e.slot] = v;
        }
        Ok(fill)
    }

    /// `clamp(μ)` for each owned parameter.
    pub fn centre_values(&self, source: usize) -> Result<Vec<f64>> {
        Ok(self
            .entries(source)?
            .iter()
            .map(|e| self.domain[e.slot].clamp(e.mean))
            .collect())
    }

    /// Pins every entry on `slot` to `value` (standardized); `None` keeps the current `clamp(μ)`.
    pub fn freeze_slot(&mut self, slot: usize, value: Option<f64>) -> Result<()> {
        let dom = self.domain[slot];
        if let Some(v) = value {
            if !(v > dom.lower && v < dom.upper) {
                return Err(Error::Config(format!(
                    "frozen value {v} (standardized) is not strictly inside the domain of slot {slot}"
                )));
            }
        }
        for e in self.sources.iter_mut().flatten().filter(|e| e.slot == slot) {
            if let Some(v) = value {
                e.mean = dom.unclamp(v);
            }
            e.frozen = true;
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for e in self.sources.iter_mut().flatten() {
            e.frozen = false;
        }
    }
}

fn pre_clamp(e: &PosteriorEntry, eps: f64) -> f64 {
    if e.frozen {
        e.mean
    } else {
        e.mean + e.std() * eps
    }
}

/// Raw head, `z_s`, `z_theta` and optional `z_c` for a batch.
pub type BatchOutput = (Array2<f64>, Array2<f64>, Array2<f64>, Option<Array2<f64>>);

/// Per-output predictive Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Latent coordinates of one evaluated input.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub z_source: Vec<f64>,
    pub z_theta: Vec<f64>,
    pub z_cat: Vec<f64>,
}

/// Labelled latent points for export.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentTrace {
    pub z_source: Vec<(String, Vec<f64>)>,
    pub z_theta: Vec<(String, Vec<f64>)>,
    pub z_cat: Vec<(String, Vec<f64>)>,
}

/// θ input of a single forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    /// Use the record's own calibration values (masked to the source's slots).
    Emulation { theta: &'a [Option<f64>] },
    /// Use a reparameterized posterior sample for the (low-fidelity) source.
    Calibration { eps: &'a [f64] },
}

/// Row-batched network input.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub source: Vec<usize>,
    pub x: Array2<f64>,
    /// Concatenated one-hot categorical encodings, `None` without categorical inputs.
    pub tc: Option<Array2<f64>>,
    /// Masked θ, standardized units.
    pub theta: Array2<f64>,
}

impl NetInput {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Emulation-mode input for a set of records.
    pub fn emulation(schema: &DatasetSchema, records: &[&Record]) -> Result<Self> {
        let masks: Vec<ThetaMask> = (0..schema.n_sources()).map(|s| schema.mask_for(s)).collect();
        let zero = vec![0.0; schema.n_theta()];
        let thetas = records
            .iter()
            .map(|r| mask_theta(&r.theta, &masks[r.source], &zero, MaskMode::Emulation))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(schema, records, |i| thetas[i].clone(), |r| r.source)
    }

    /// Calibration-mode input: the records' x/tc evaluated as `source` with a
    /// shared θ vector.
    pub fn with_source_theta(
        schema: &DatasetSchema,
        records: &[&Record],
        source: usize,
        theta: &[f64],
    ) -> Result<Self> {
        Self::assemble(schema, records, |_| theta.to_vec(), |_| source)
    }

    fn assemble(
        schema: &DatasetSchema,
        records: &[&Record],
        theta_of: impl Fn(usize) -> Vec<f64>,
        source_of: impl Fn(&Record) -> usize,
    ) -> Result<Self> {
        let n = records.len();
        let n_x = records.first().map_or(0, |r| r.x.len());
        let n_theta = schema.n_theta();
        let mut x = Array2::zeros((n, n_x));
        let mut theta = Array2::zeros((n, n_theta));
        let cat_w = schema.categorical_width();
        let mut tc = (!schema.categorical_levels.is_empty()).then(|| Array2::zeros((n, cat_w)));
        let mut source = Vec::with_capacity(n);
        for (i, r) in records.iter().enumerate() {
            source.push(source_of(r));
            for (j, v) in r.x.iter().enumerate() {
                x[(i, j)] = *v;
            }
            let th = theta_of(i);
            if th.len() != n_theta {
                return Err(Error::Shape {
                    expected: n_theta,
                    actual: th.len(),
                });
            }
            for (j, v) in th.into_iter().enumerate() {
                theta[(i, j)] = v;
            }
            if let Some(tc) = tc.as_mut() {
                let mut off = 0;
                for (&level, &card) in r.tc.iter().zip(&schema.categorical_levels) {
                    for (k, v) in one_hot(level, card)?.into_iter().enumerate() {
                        tc[(i, off + k)] = v;
                    }
                    off += card;
                }
            }
        }
        Ok(Self { source, x, tc, theta })
    }
}

#[derive(Debug, Clone)]
pub struct NetCache {
    c0: MlpCache,
    c1: MlpCache,
    c2: Option<MlpCache>,
    c3: MlpCache,
    n_x: usize,
}

/// Gradients for every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub block0: MlpGrad,
    pub block1: MlpGrad,
    pub block2: Option<MlpGrad>,
    pub block3: MlpGrad,
    /// `(∂/∂mean, ∂/∂log_std)` per posterior entry, same layout as `CalibPosterior::sources`.
    pub posterior: Vec<Vec<(f64, f64)>>,
}

impl NetGrads {
    pub fn add_assign(&mut self, other: &NetGrads) {
        self.block0.add_assign(&other.block0);
        self.block1.add_assign(&other.block1);
        if let (Some(a), Some(b)) = (self.block2.as_mut(), other.block2.as_ref()) {
            a.add_assign(b);
        }
        self.block3.add_assign(&other.block3);
        for (a, b) in self.posterior.iter_mut().zip(&other.posterior) {
            for (x, y) in a.iter_mut().zip(b) {
                x.0 += y.0;
                x.1 += y.1;
            }
        }
    }

    /// Every posterior gradient component, flattened.
    pub fn posterior_flat(&self) -> Vec<f64> {
        self.posterior
            .iter()
            .flatten()
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub schema: DatasetSchema,
    pub n_x: usize,
    pub n_y: usize,
    pub block0: Mlp,
    pub block1: Mlp,
    pub block2: Option<Mlp>,
    pub block3: Mlp,
    pub posterior: CalibPosterior,
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut v = vec![input];
    v.extend_from_slice(hidden);
    v.push(output);
    v
}

impl Network {
    /// Seeded random block weights; posterior centres at each source's sample
    /// mean of θ; posterior std at `init_std_fraction` of the domain width.
    /// `dataset` must be the standardized training set (or raw, in which case
    /// standardized and raw units coincide).
    pub fn init(config: &NetworkConfig, dataset: &MultiSourceDataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let schema = dataset.schema.clone();
        schema.validate()?;
        let (ds, n_theta) = (schema.n_sources(), schema.n_theta());
        let mut rng = substream(seed, "init/blocks");
        let block0 = Mlp::new(&sizes(ds, &config.block0_hidden, config.latent_source), &mut rng);
        let block1 = Mlp::new(
            &sizes(config.latent_source + n_theta, &config.block1_hidden, config.latent_theta),
            &mut rng,
        );
        let block2 = (!schema.categorical_levels.is_empty()).then(|| {
            Mlp::new(
                &sizes(schema.categorical_width(), &config.block2_hidden, config.latent_cat),
                &mut rng,
            )
        });
        let z_cat = if block2.is_some() { config.latent_cat } else { 0 };
        let block3 = Mlp::new(
            &sizes(dataset.n_x + config.latent_theta + z_cat, &config.block3_hidden, 2 * dataset.n_y),
            &mut rng,
        );

        let st = dataset
            .standardizer
            .clone()
            .unwrap_or_else(|| Standardizer::identity(dataset.n_x, n_theta, dataset.n_y));
        let domain: Vec<SlotDomain> = schema
            .calib_params
            .iter()
            .zip(&st.theta)
            .map(|(p, s)| SlotDomain {
                lower: s.forward(p.lower),
                upper: s.forward(p.upper),
            })
            .collect();
        let mut sources = vec![Vec::new(); ds];
        for (s, entries) in sources.iter_mut().enumerate().skip(1) {
            for (slot, m) in dataset.theta_means(s) {
                let dom = domain[slot];
                let centre = if m.is_finite() { m } else { dom.centre() };
                // keep the inverse finite when the sample mean sits on the boundary
                let eps = 1e-6 * (dom.upper - dom.lower);
                let centre = centre.clamp(dom.lower + eps, dom.upper - eps);
                entries.push(PosteriorEntry {
                    slot,
                    mean: dom.unclamp(centre),
                    log_std: (config.init_std_fraction * (dom.upper - dom.lower)).ln(),
                    frozen: false,
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            n_x: dataset.n_x,
            n_y: dataset.n_y,
            block0,
            block1,
            block2,
            block3,
            posterior: CalibPosterior { sources, domain },
            schema,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.schema.n_sources()
    }

    pub fn n_theta(&self) -> usize {
        self.schema.n_theta()
    }

    fn source_onehot(&self, source: &[usize]) -> Result<Array2<f64>> {
        let ds = self.n_sources();
        let mut m = Array2::zeros((source.len(), ds));
        for (i, &s) in source.iter().enumerate() {
            if s >= ds {
                return Err(Error::Encoding {
                    level: s,
                    cardinality: ds,
                });
            }
            m[(i, s)] = 1.0;
        }
        Ok(m)
    }

    fn block3_input(&self, x: &Array2<f64>, z_theta: &Array2<f64>, z_cat: Option<&Array2<f64>>) -> Array2<f64> {
        let mut parts = vec![x.view(), z_theta.view()];
        if let Some(zc) = z_cat {
            parts.push(zc.view());
        }
        ndarray::concatenate(Axis(1), &parts).expect("row counts agree")
    }

    /// Raw head output (`n × 2·n_y`: means then log-stds) with latents.
    pub fn forward_batch(&self, input: &NetInput) -> Result<BatchOutput> {
        let zs = self.block0.forward(&self.source_onehot(&input.source)?);
        let zt = self
            .block1
            .forward(&ndarray::concatenate(Axis(1), &[zs.view(), input.theta.view()]).expect("rows"));
        let zc = match (&self.block2, &input.tc) {
            (Some(b2), Some(tc)) => Some(b2.forward(tc)),
            _ => None,
        };
        let head = self.block3.forward(&self.block3_input(&input.x, &zt, zc.as_ref()));
        Ok((head, zs, zt, zc))
    }

    pub fn forward_cached(&self, input: &NetInput) -> Result<(Array2<f64>, NetCache)> {
        let (zs, c0) = self.block0.forward_cached(self.source_onehot(&input.source)?);
        let (zt, c1) = self
            .block1
            .forward_cached(ndarray::concatenate(Axis(1), &[zs.view(), input.theta.view()]).expect("rows"));
        let (zc, c2) = match (&self.block2, &input.tc) {
            (Some(b2), Some(tc)) => {
                let (z, c) = b2.forward_cached(tc.clone());
                (Some(z), Some(c))
            }
            _ => (None, None),
        };
        let (head, c3) = self.block3.forward_cached(self.block3_input(&input.x, &zt, zc.as_ref()));
        Ok((
            head,
            NetCache {
                c0,
                c1,
                c2,
                c3,
                n_x: input.x.ncols(),
            },
        ))
    }

    pub fn zero_grads(&self) -> NetGrads {
        NetGrads {
            block0: self.block0.zero_grad(),
            block1: self.block1.zero_grad(),
            block2: self.block2.as_ref().map(Mlp::zero_grad),
            block3: self.block3.zero_grad(),
            posterior: self
                .posterior
                .sources
                .iter()
                .map(|v| vec![(0.0, 0.0); v.len()])
                .collect(),
        }
    }

    /// Backpropagates `d_head` into the block gradients; returns `∂/∂θ_input`.
    pub fn backward(&self, cache: &NetCache, d_head: Array2<f64>, grads: &mut NetGrads) -> Array2<f64> {
        let d_in3 = self.block3.backward(&cache.c3, d_head, &mut grads.block3);
        let lt = self.config.latent_theta;
        let d_zt = d_in3.slice(s![.., cache.n_x..cache.n_x + lt]).to_owned();
        if let (Some(b2), Some(c2), Some(g2)) = (&self.block2, &cache.c2, grads.block2.as_mut()) {
            let d_zc = d_in3.slice(s![.., cache.n_x + lt..]).to_owned();
            b2.backward(c2, d_zc, g2);
        }
        let d_in1 = self.block1.backward(&cache.c1, d_zt, &mut grads.block1);
        let ls = self.config.latent_source;
        let d_zs = d_in1.slice(s![.., ..ls]).to_owned();
        self.block0.backward(&cache.c0, d_zs, &mut grads.block0);
        d_in1.slice(s![.., ls..]).to_owned()
    }

    /// Chain rule from `∂L/∂θ̂` (per owned entry of `source`) to the posterior parameters.
    pub fn posterior_backward(&self, source: usize, eps: &[f64], d_theta_hat: &[f64], grads: &mut NetGrads) {
        for (k, e) in self.posterior.sources[source].iter().enumerate() {
            if e.frozen {
                continue;
            }
            let u = pre_clamp(e, eps[k]);
            let d_u = d_theta_hat[k] * self.posterior.domain[e.slot].clamp_slope(u);
            grads.posterior[source][k].0 += d_u;
            grads.posterior[source][k].1 += d_u * e.std() * eps[k];
        }
    }

    pub fn head_to_distributions(&self, head: &Array2<f64>) -> Vec<PredictiveDistribution> {
        let ny = self.n_y;
        head.rows()
            .into_iter()
            .map(|row| PredictiveDistribution {
                mean: row.slice(s![..ny]).to_vec(),
                std: row.slice(s![ny..]).iter().map(|v| v.exp()).collect(),
            })
            .collect()
    }

    /// `z_s` for a source index.
    pub fn encode_source(&self, source: usize) -> Result<Vec<f64>> {
        let oh = self.source_onehot(&[source])?;
        Ok(self.block0.forward(&oh).row(0).to_vec())
    }

    /// `z_theta` for a given `z_s` and masked θ (standardized).
    pub fn encode_calibration(&self, z_source: &[f64], theta_masked: &[f64]) -> Result<Vec<f64>> {
        if z_source.len() != self.config.latent_source {
            return Err(Error::Shape {
                expected: self.config.latent_source,
                actual: z_source.len(),
            });
        }
        if theta_masked.len() != self.n_theta() {
            return Err(Error::Shape {
                expected: self.n_theta(),
                actual: theta_masked.len(),
            });
        }
        let v: Vec<f64> = z_source.iter().chain(theta_masked).copied().collect();
        let m = Array2::from_shape_vec((1, v.len()), v).expect("shape");
        Ok(self.block1.forward(&m).row(0).to_vec())
    }

    /// Single-record prediction in standardized units.
    pub fn predict(
        &self,
        source: usize,
        x: &[f64],
        tc: &[usize],
        mode: ForwardMode<'_>,
    ) -> Result<(PredictiveDistribution, Latents)> {
        if x.len() != self.n_x {
            return Err(Error::Shape {
                expected: self.n_x,
                actual: x.len(),
            });
        }
        if source >= self.n_sources() {
            return Err(Error::Encoding {
                level: source,
                cardinality: self.n_sources(),
            });
        }
        let zero = vec![0.0; self.n_theta()];
        let theta = match mode {
            ForwardMode::Emulation { theta } => {
                mask_theta(theta, &self.schema.mask_for(source), &zero, MaskMode::Emulation)?
            }
            ForwardMode::Calibration { eps } => self.posterior.theta_fill(source, eps)?,
        };
        let rec = Record {
            source,
            x: x.to_vec(),
            tc: tc.to_vec(),
            theta: vec![None; self.n_theta()],
            y: vec![],
        };
        let input = NetInput::with_source_theta(&self.schema, &[&rec], source, &theta)?;
        let (head, zs, zt, zc) = self.forward_batch(&input)?;
        let dist = self.head_to_distributions(&head).remove(0);
        Ok((
            dist,
            Latents {
                z_source: zs.row(0).to_vec(),
                z_theta: zt.row(0).to_vec(),
                z_cat: zc.map(|z| z.row(0).to_vec()).unwrap_or_default(),
            },
        ))
    }

    /// Parameter visitor used by the optimizer. Visits block parameters then
    /// posterior parameters in a fixed order.
    pub fn visit_params(&mut self, grads: &NetGrads, mut f: impl FnMut(ParamGroup, &mut [f64], &[f64])) {
        let mut blocks: Vec<(&mut Mlp, &MlpGrad)> = vec![(&mut self.block0, &grads.block0), (&mut self.block1, &grads.block1)];
        if let (Some(b2), Some(g2)) = (self.block2.as_mut(), grads.block2.as_ref()) {
            blocks.push((b2, g2));
        }
        blocks.push((&mut self.block3, &grads.block3));
        for (mlp, g) in blocks {
            for (l, layer) in mlp.layers.iter_mut().enumerate() {
                f(
                    ParamGroup::Weights,
                    layer.weight.as_slice_mut().expect("standard layout"),
                    g.weight[l].as_slice().expect("standard layout"),
                );
                f(
                    ParamGroup::Weights,
                    layer.bias.as_slice_mut().expect("standard layout"),
                    g.bias[l].as_slice().expect("standard layout"),
                );
            }
        }
        for (entries, g) in self.posterior.sources.iter_mut().zip(&grads.posterior) {
            for (e, &(gm, gs)) in entries.iter_mut().zip(g) {
                let group = if e.frozen {
                    ParamGroup::Frozen
                } else {
                    ParamGroup::Calibration
                };
                f(group, std::slice::from_mut(&mut e.mean), &[gm]);
                f(group, std::slice::from_mut(&mut e.log_std), &[gs]);
            }
        }
    }
}

/// Optimizer treatment of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Block weights and biases: updated with weight decay.
    Weights,
    /// Posterior means and log-stds: updated without weight decay.
    Calibration,
    /// Frozen posterior entries: never updated.
    Frozen,
}

pub const CHECKPOINT_FORMAT: &str = "fusecal-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized training state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub standardizer: Standardizer,
    pub network: Network,
}

impl Checkpoint {
    pub fn new(network: Network, standardizer: Standardizer, seed: u64, epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: String::new(),
            dataset_hash: String::new(),
            seed,
            epoch,
            standardizer,
            network,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}
