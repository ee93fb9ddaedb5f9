//! Multi-source data model: source declarations, record storage, file ingestion,
//! z-score standardization, calibration-input masking and one-hot encoding.
//!
//! A dataset file is a flat CSV table with a header row:
//!
//! ```text
//! source,x_1,..,x_dx,[tc_1,..],theta_1,..,theta_dθ,y_1,..,y_ny
//! ```
//!
//! `theta_k` refers to the k-th entry of the global calibration-parameter union
//! declared in the [`DatasetSchema`]. An empty theta cell means the parameter is
//! absent for that record. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity, fidelity role and owned calibration parameters of one data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub source_id: usize,
    pub name: String,
    #[serde(default)]
    pub is_hf: bool,
    #[serde(default)]
    pub calib_param_names: Vec<String>,
    #[serde(default)]
    pub n_samples: usize,
}

/// One calibration parameter of the global union with its training domain
/// in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibParam {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
}

impl CalibParam {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Full description of the sources, the calibration-parameter union and any
/// categorical inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub sources: Vec<SourceSpec>,
    #[serde(default)]
    pub calib_params: Vec<CalibParam>,
    /// Cardinality of each categorical column `tc_k`. Empty when there are none.
    #[serde(default)]
    pub categorical_levels: Vec<usize>,
}

/// Ownership pattern of the global θ vector for one source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThetaMask {
    pub owned: Vec<bool>,
    pub is_hf: bool,
}

impl DatasetSchema {
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn n_theta(&self) -> usize {
        self.calib_params.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.calib_params.iter().position(|p| p.name == name)
    }

    /// Global slot indices owned by `source_id`, in the source's declared order.
    pub fn owned_slots(&self, source_id: usize) -> Vec<usize> {
        self.sources[source_id]
            .calib_param_names
            .iter()
            .map(|n| self.param_index(n).expect("validated schema"))
            .collect()
    }

    pub fn mask_for(&self, source_id: usize) -> ThetaMask {
        let mut owned = vec![false; self.n_theta()];
        for slot in self.owned_slots(source_id) {
            owned[slot] = true;
        }
        ThetaMask {
            owned,
            is_hf: self.sources[source_id].is_hf,
        }
    }

    /// Total width of the concatenated one-hot categorical encoding.
    pub fn categorical_width(&self) -> usize {
        self.categorical_levels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Schema("no sources declared".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if s.source_id != i {
                return Err(Error::Schema(format!(
                    "source ids must be contiguous 0..{}; position {i} has id {}",
                    self.sources.len() - 1,
                    s.source_id
                )));
            }
        }
        let n_hf = self.sources.iter().filter(|s| s.is_hf).count();
        if n_hf != 1 {
            return Err(Error::Schema(format!(
                "exactly one high-fidelity source required, found {n_hf}"
            )));
        }
        if !self.sources[0].is_hf {
            return Err(Error::Schema(
                "the high-fidelity source must have source_id 0".into(),
            ));
        }
        if !self.sources[0].calib_param_names.is_empty() {
            return Err(Error::Schema(
                "the high-fidelity source cannot own calibration parameters".into(),
            ));
        }
        for (i, p) in self.calib_params.iter().enumerate() {
            if !(p.lower < p.upper) || !p.lower.is_finite() || !p.upper.is_finite() {
                return Err(Error::Schema(format!(
                    "calibration parameter `{}` has invalid bounds [{}, {}]",
                    p.name, p.lower, p.upper
                )));
            }
            if self.calib_params[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::Schema(format!(
                    "calibration parameter `{}` declared twice",
                    p.name
                )));
            }
        }
        for s in &self.sources {
            for (k, name) in s.calib_param_names.iter().enumerate() {
                if self.param_index(name).is_none() {
                    return Err(Error::Schema(format!(
                        "source `{}` owns unknown calibration parameter `{name}`",
                        s.name
                    )));
                }
                if s.calib_param_names[..k].contains(name) {
                    return Err(Error::Schema(format!(
                        "source `{}` lists `{name}` twice",
                        s.name
                    )));
                }
            }
        }
        if self.categorical_levels.contains(&0) {
            return Err(Error::Schema("categorical cardinality must be >= 1".into()));
        }
        Ok(())
    }
}

/// One sample. Values are raw or standardized depending on the owning dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub source: usize,
    pub x: Vec<f64>,
    pub tc: Vec<usize>,
    pub theta: Vec<Option<f64>>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
}

impl ColumnStats {
    pub fn forward(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn inverse(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

/// Per-column mean / population std of x, θ and y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x: Vec<ColumnStats>,
    pub theta: Vec<ColumnStats>,
    pub y: Vec<ColumnStats>,
}

impl Standardizer {
    pub fn fit(records: &[Record], n_x: usize, n_theta: usize, n_y: usize) -> Result<Self> {
        let col = |name: String, values: Vec<f64>| -> Result<ColumnStats> {
            if values.is_empty() {
                return Err(Error::DegenerateColumn(name));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if !(std > 1e-12 * mean.abs().max(1.0)) {
                return Err(Error::DegenerateColumn(name));
            }
            Ok(ColumnStats { mean, std })
        };
        let x = (0..n_x)
            .map(|j| col(format!("x_{}", j + 1), records.iter().map(|r| r.x[j]).collect()))
            .collect::<Result<_>>()?;
        let theta = (0..n_theta)
            .map(|j| {
                col(
                    format!("theta_{}", j + 1),
                    records.iter().filter_map(|r| r.theta[j]).collect(),
                )
            })
            .collect::<Result<_>>()?;
        let y = (0..n_y)
            .map(|j| col(format!("y_{}", j + 1), records.iter().map(|r| r.y[j]).collect()))
            .collect::<Result<_>>()?;
        Ok(Self { x, theta, y })
    }

    pub fn identity(n_x: usize, n_theta: usize, n_y: usize) -> Self {
        Self {
            x: vec![ColumnStats::identity(); n_x],
            theta: vec![ColumnStats::identity(); n_theta],
            y: vec![ColumnStats::identity(); n_y],
        }
    }

    pub fn apply(&self, r: &Record) -> Record {
        Record {
            source: r.source,
            x: r.x.iter().zip(&self.x).map(|(v, s)| s.forward(*v)).collect(),
            tc: r.tc.clone(),
            theta: r
                .theta
                .iter()
                .zip(&self.theta)
                .map(|(v, s)| v.map(|v| s.forward(v)))
                .collect(),
            y: r.y.iter().zip(&self.y).map(|(v, s)| s.forward(*v)).collect(),
        }
    }

    pub fn invert(&self, r: &Record) -> Record {
        Record {
            source: r.source,
            x: r.x.iter().zip(&self.x).map(|(v, s)| s.inverse(*v)).collect(),
            tc: r.tc.clone(),
            theta: r
                .theta
                .iter()
                .zip(&self.theta)
                .map(|(v, s)| v.map(|v| s.inverse(v)))
                .collect(),
            y: r.y.iter().zip(&self.y).map(|(v, s)| s.inverse(*v)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Concatenated samples from all sources.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceDataset {
    pub schema: DatasetSchema,
    pub n_x: usize,
    pub n_y: usize,
    pub records: Vec<Record>,
    /// Present once the records have been standardized.
    pub standardizer: Option<Standardizer>,
}

impl MultiSourceDataset {
    /// Builds a dataset from raw records, validating them against the schema.
    /// Per-source `n_samples` are filled in from the records.
    pub fn from_records(
        mut schema: DatasetSchema,
        n_x: usize,
        n_y: usize,
        records: Vec<Record>,
    ) -> Result<Self> {
        schema.validate()?;
        let masks: Vec<ThetaMask> = (0..schema.n_sources()).map(|s| schema.mask_for(s)).collect();
        let mut counts = vec![0usize; schema.n_sources()];
        for (row, r) in records.iter().enumerate() {
            let Some(mask) = masks.get(r.source) else {
                return Err(Error::Schema(format!(
                    "row {row}: source {} not declared",
                    r.source
                )));
            };
            counts[r.source] += 1;
            check_len(r.x.len(), n_x)?;
            check_len(r.y.len(), n_y)?;
            check_len(r.theta.len(), schema.n_theta())?;
            check_len(r.tc.len(), schema.categorical_levels.len())?;
            if r.x.iter().chain(&r.y).chain(r.theta.iter().flatten()).any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("row {row}: non-finite value")));
            }
            for (k, (&level, &card)) in r.tc.iter().zip(&schema.categorical_levels).enumerate() {
                if level >= card {
                    return Err(Error::Data(format!(
                        "row {row}: tc_{} level {level} >= cardinality {card}",
                        k + 1
                    )));
                }
            }
            for (k, (v, &owned)) in r.theta.iter().zip(&mask.owned).enumerate() {
                let pname = &schema.calib_params[k].name;
                match (v, owned) {
                    (Some(_), false) => {
                        return Err(Error::Consistency(format!(
                            "row {row}: source `{}` carries a value for `{pname}` which it does not own",
                            schema.sources[r.source].name
                        )))
                    }
                    (None, true) => {
                        return Err(Error::Consistency(format!(
                            "row {row}: source `{}` is missing its parameter `{pname}`",
                            schema.sources[r.source].name
                        )))
                    }
                    _ => {}
                }
            }
        }
        for (spec, &n) in schema.sources.iter_mut().zip(&counts) {
            spec.n_samples = n;
        }
        Ok(Self {
            schema,
            n_x,
            n_y,
            records,
            standardizer: None,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.schema.n_sources()
    }

    pub fn n_theta(&self) -> usize {
        self.schema.n_theta()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.schema.sources.iter().map(|s| s.n_samples).collect()
    }

    pub fn records_of(&self, source: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.source == source)
    }

    /// Returns a dataset restricted to the given records, keeping schema and standardizer.
    pub fn with_records(&self, records: Vec<Record>) -> Self {
        let mut schema = self.schema.clone();
        for s in &mut schema.sources {
            s.n_samples = records.iter().filter(|r| r.source == s.source_id).count();
        }
        Self {
            schema,
            n_x: self.n_x,
            n_y: self.n_y,
            records,
            standardizer: self.standardizer.clone(),
        }
    }

    /// Fits a standardizer on this (training) dataset and returns the transformed copy.
    /// Fails when the dataset is already tagged as standardized.
    pub fn standardize(&self) -> Result<Self> {
        if self.standardizer.is_some() {
            return Err(Error::Contract("dataset is already standardized".into()));
        }
        let st = Standardizer::fit(&self.records, self.n_x, self.n_theta(), self.n_y)?;
        Ok(self.standardize_with(&st))
    }

    /// Transforms raw records with an existing standardizer (validation/test splits).
    pub fn standardize_with(&self, st: &Standardizer) -> Self {
        let mut out = self.with_records(self.records.iter().map(|r| st.apply(r)).collect());
        out.standardizer = Some(st.clone());
        out
    }

    /// Back to raw units; no-op on a raw dataset.
    pub fn destandardize(&self) -> Self {
        match &self.standardizer {
            None => self.clone(),
            Some(st) => {
                let mut out = self.with_records(self.records.iter().map(|r| st.invert(r)).collect());
                out.standardizer = None;
                out
            }
        }
    }

    /// Per-source mean of each owned θ slot in the dataset's current units.
    pub fn theta_means(&self, source: usize) -> Vec<(usize, f64)> {
        self.schema
            .owned_slots(source)
            .into_iter()
            .map(|slot| {
                let (sum, n) = self
                    .records_of(source)
                    .filter_map(|r| r.theta[slot])
                    .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                (slot, if n == 0 { f64::NAN } else { sum / n as f64 })
            })
            .collect()
    }

    /// Raw-unit check that every observed θ lies inside the declared domain.
    pub fn check_domain(&self) -> Result<()> {
        let raw = self.destandardize();
        for (row, r) in raw.records.iter().enumerate() {
            for (k, v) in r.theta.iter().enumerate() {
                if let Some(v) = v {
                    let p = &self.schema.calib_params[k];
                    if *v < p.lower || *v > p.upper {
                        return Err(Error::Consistency(format!(
                            "row {row}: `{}` = {v} outside domain [{}, {}]",
                            p.name, p.lower, p.upper
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::Shape { expected, actual });
    }
    Ok(())
}

/// Column layout parsed from a dataset header.
#[derive(Debug, Clone)]
struct Layout {
    source: usize,
    x: Vec<usize>,
    tc: Vec<usize>,
    theta: Vec<usize>,
    y: Vec<usize>,
}

fn parse_header(header: &csv::StringRecord) -> Result<Layout> {
    let mut source = None;
    let mut groups: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (col, name) in header.iter().enumerate() {
        let name = name.trim();
        if name == "source" {
            source = Some(col);
            continue;
        }
        let Some((prefix, idx)) = name.rsplit_once('_') else {
            return Err(Error::Schema(format!("unrecognized column `{name}`")));
        };
        let prefix = match prefix {
            "x" | "tc" | "theta" | "y" => prefix,
            _ => return Err(Error::Schema(format!("unrecognized column `{name}`"))),
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| Error::Schema(format!("unrecognized column `{name}`")))?;
        if groups.entry(prefix).or_default().insert(idx, col).is_some() {
            return Err(Error::Schema(format!("duplicate column `{name}`")));
        }
    }
    let source = source.ok_or_else(|| Error::Schema("missing column `source`".into()))?;
    let mut take = |prefix: &str| -> Result<Vec<usize>> {
        let g = groups.remove(prefix).unwrap_or_default();
        for (expect, (&idx, _)) in (1..).zip(&g) {
            if idx != expect {
                return Err(Error::Schema(format!("missing column `{prefix}_{expect}`")));
            }
        }
        Ok(g.into_values().collect())
    };
    Ok(Layout {
        source,
        x: take("x")?,
        tc: take("tc")?,
        theta: take("theta")?,
        y: take("y")?,
    })
}

fn parse_f64(s: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Data(format!("row {row}: cannot parse `{s}` in `{col}`")))?;
    if !v.is_finite() {
        return Err(Error::Data(format!("row {row}: non-finite value in `{col}`")));
    }
    Ok(v)
}

/// Reads a dataset file against a schema. Values stay in raw units.
pub fn load_dataset(path: &Path, schema: &DatasetSchema) -> Result<MultiSourceDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, schema)
}

pub fn parse_dataset(text: &str, schema: &DatasetSchema) -> Result<MultiSourceDataset> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let layout = parse_header(rdr.headers()?)?;
    if layout.theta.len() != schema.n_theta() {
        let missing = layout.theta.len().min(schema.n_theta()) + 1;
        return Err(Error::Schema(format!(
            "expected {} theta columns, found {} (check `theta_{missing}`)",
            schema.n_theta(),
            layout.theta.len()
        )));
    }
    if layout.tc.len() != schema.categorical_levels.len() {
        return Err(Error::Schema(format!(
            "expected {} categorical columns, found {}",
            schema.categorical_levels.len(),
            layout.tc.len()
        )));
    }
    if layout.y.is_empty() {
        return Err(Error::Schema("missing column `y_1`".into()));
    }
    let mut records = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let source: usize = field(layout.source)
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: bad source `{}`", field(layout.source))))?;
        let x = layout
            .x
            .iter()
            .enumerate()
            .map(|(j, &c)| parse_f64(field(c), row, &format!("x_{}", j + 1)))
            .collect::<Result<_>>()?;
        let tc = layout
            .tc
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                field(c)
                    .parse::<usize>()
                    .map_err(|_| Error::Data(format!("row {row}: bad level in `tc_{}`", j + 1)))
            })
            .collect::<Result<_>>()?;
        let theta = layout
            .theta
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let s = field(c);
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse_f64(s, row, &format!("theta_{}", j + 1)).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let y = layout
            .y
            .iter()
            .enumerate()
            .map(|(j, &c)| parse_f64(field(c), row, &format!("y_{}", j + 1)))
            .collect::<Result<_>>()?;
        records.push(Record {
            source,
            x,
            tc,
            theta,
            y,
        });
    }
    MultiSourceDataset::from_records(schema.clone(), layout.x.len(), layout.y.len(), records)
}

/// Serializes a dataset in raw units. `comment` lines are written first, each
/// prefixed with `# `.
pub fn write_dataset(path: &Path, dataset: &MultiSourceDataset, comment: &[String]) -> Result<()> {
    fs::write(path, render_dataset(dataset, comment)?).map_err(|e| Error::io(path, e))
}

pub fn render_dataset(dataset: &MultiSourceDataset, comment: &[String]) -> Result<String> {
    let raw = dataset.destandardize();
    let mut out = String::new();
    for line in comment {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend((1..=raw.n_x).map(|j| format!("x_{j}")));
    header.extend((1..=raw.schema.categorical_levels.len()).map(|j| format!("tc_{j}")));
    header.extend((1..=raw.n_theta()).map(|j| format!("theta_{j}")));
    header.extend((1..=raw.n_y).map(|j| format!("y_{j}")));
    w.write_record(&header)?;
    for r in &raw.records {
        let mut row = vec![r.source.to_string()];
        row.extend(r.x.iter().map(|v| v.to_string()));
        row.extend(r.tc.iter().map(|v| v.to_string()));
        row.extend(r.theta.iter().map(|v| v.map(|v| v.to_string()).unwrap_or_default()));
        row.extend(r.y.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("csv flush failed: {e}")))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    Ok(out)
}

/// Stratified per-source split. `fraction` is the share of each source's
/// records assigned to validation (rounded to the nearest integer).
pub fn split_train_val(
    dataset: &MultiSourceDataset,
    fraction: f64,
    seed: u64,
) -> Result<(MultiSourceDataset, MultiSourceDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} not in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; dataset.records.len()];
    for spec in &dataset.schema.sources {
        let mut idx: Vec<usize> = dataset
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.source == spec.source_id)
            .map(|(i, _)| i)
            .collect();
        let n = idx.len();
        let n_val = (fraction * n as f64).round() as usize;
        if n > 0 && n_val >= n {
            return Err(Error::Split(format!(
                "fraction {fraction} leaves source `{}` with no training samples",
                spec.name
            )));
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (r, v) in dataset.records.iter().zip(is_val) {
        if v {
            val.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((dataset.with_records(train), dataset.with_records(val)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Owned slots keep the record's data values.
    Emulation,
    /// Owned slots take the fill (sampled calibration estimates).
    Calibration,
}

/// Builds the θ vector fed to the calibration block. Slots outside the
/// source's ownership always take the fill value; the HF source yields zeros.
pub fn mask_theta(
    theta: &[Option<f64>],
    mask: &ThetaMask,
    fill: &[f64],
    mode: MaskMode,
) -> Result<Vec<f64>> {
    check_len(theta.len(), mask.owned.len())?;
    check_len(fill.len(), mask.owned.len())?;
    if mask.is_hf {
        return Ok(vec![0.0; theta.len()]);
    }
    Ok(theta
        .iter()
        .zip(&mask.owned)
        .zip(fill)
        .map(|((v, &owned), &f)| match (mode, owned, v) {
            (MaskMode::Emulation, true, Some(v)) => *v,
            _ => f,
        })
        .collect())
}

pub fn one_hot(level: usize, cardinality: usize) -> Result<Vec<f64>> {
    if level >= cardinality {
        return Err(Error::Encoding { level, cardinality });
    }
    let mut v = vec![0.0; cardinality];
    v[level] = 1.0;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareOp {
    Lt,
    Le,
    Gt,
    Ge,
}

/// Numeric row predicate on a raw-unit input or output column, e.g.
/// `x_3 <= 0.05` to select the elastic part of a load curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    pub op: CompareOp,
    pub threshold: f64,
}

impl RowFilter {
    fn column_value(&self, r: &Record, st: Option<&Standardizer>) -> Result<f64> {
        let (prefix, idx) = self
            .column
            .rsplit_once('_')
            .and_then(|(p, i)| i.parse::<usize>().ok().map(|i| (p, i)))
            .filter(|(_, i)| *i >= 1)
            .ok_or_else(|| Error::Config(format!("bad filter column `{}`", self.column)))?;
        let j = idx - 1;
        let (v, stats) = match prefix {
            "x" => (r.x.get(j), st.map(|s| s.x[j])),
            "y" => (r.y.get(j), st.map(|s| s.y[j])),
            _ => return Err(Error::Config(format!("bad filter column `{}`", self.column))),
        };
        let v = *v.ok_or_else(|| Error::Config(format!("filter column `{}` out of range", self.column)))?;
        Ok(stats.map_or(v, |s| s.inverse(v)))
    }

    pub fn matches(&self, r: &Record, st: Option<&Standardizer>) -> Result<bool> {
        let v = self.column_value(r, st)?;
        Ok(match self.op {
            CompareOp::Lt => v < self.threshold,
            CompareOp::Le => v <= self.threshold,
            CompareOp::Gt => v > self.threshold,
            CompareOp::Ge => v >= self.threshold,
        })
    }

    pub fn apply(&self, dataset: &MultiSourceDataset) -> Result<MultiSourceDataset> {
        let st = dataset.standardizer.as_ref();
        let mut kept = Vec::new();
        for r in &dataset.records {
            if self.matches(r, st)? {
                kept.push(r.clone());
            }
        }
        Ok(dataset.with_records(kept))
    }
}
