//! Datasets: synthetic generation with controllable disease/group
//! entanglement, CSV I/O, stratified splitting and median binarization.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NirError, Result};
use crate::matrix::Matrix;

/// Name of the attribute column written by [`generate_synthetic`].
pub const GROUP_ATTRIBUTE: &str = "group";
/// Group with `g = 0` in the generative model.
pub const GROUP_A: &str = "A";
/// Group with `g = 1`; it carries the extra group-direction signal.
pub const GROUP_B: &str = "B";

const ATTR_PREFIX: &str = "attr:";

/// Features, binary labels and named categorical attribute columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u8>,
    attributes: BTreeMap<String, Vec<String>>,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<u8>,
        attributes: BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(NirError::Contract(format!(
                "{} labels for {n} feature rows",
                labels.len()
            )));
        }
        if let Some(row) = labels.iter().position(|&y| y > 1) {
            return Err(NirError::Validation {
                row: row + 1,
                message: format!("label {} is not 0 or 1", labels[row]),
            });
        }
        for (name, column) in &attributes {
            if column.len() != n {
                return Err(NirError::Contract(format!(
                    "attribute `{name}` has {} entries, expected {n}",
                    column.len()
                )));
            }
        }
        for r in 0..n {
            if !features.row(r).iter().all(|v| v.is_finite()) {
                return Err(NirError::Validation {
                    row: r + 1,
                    message: "non-finite feature value".into(),
                });
            }
        }
        Ok(Self {
            features,
            labels,
            attributes,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn attributes(&self) -> &BTreeMap<String, Vec<String>> {
        &self.attributes
    }

    /// Looks up an attribute column, naming the available ones on failure.
    pub fn attribute(&self, name: &str) -> Result<&[String]> {
        self.attributes.get(name).map(Vec::as_slice).ok_or_else(|| {
            let available: Vec<&str> = self.attributes.keys().map(String::as_str).collect();
            NirError::Selection(format!(
                "unknown attribute `{name}`; available: [{}]",
                available.join(", ")
            ))
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn count_positive(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: self
                .attributes
                .iter()
                .map(|(k, col)| (k.clone(), indices.iter().map(|&i| col[i].clone()).collect()))
                .collect(),
        }
    }

    pub fn with_attribute(mut self, name: impl Into<String>, values: Vec<String>) -> Result<Self> {
        let name = name.into();
        if values.len() != self.size() {
            return Err(NirError::Contract(format!(
                "attribute `{name}` has {} entries, expected {}",
                values.len(),
                self.size()
            )));
        }
        self.attributes.insert(name, values);
        Ok(self)
    }
}

fn default_n_samples() -> usize {
    3000
}
fn default_feature_dim() -> usize {
    16
}
fn default_prevalence() -> f64 {
    0.3
}
fn default_group_balance() -> f64 {
    0.5
}
fn default_entanglement() -> f64 {
    0.8
}
fn default_signal() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    1.0
}

/// Parameters of the entangled generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_prevalence")]
    pub disease_prevalence: f64,
    #[serde(default = "default_group_balance")]
    pub group_balance: f64,
    /// Fraction of the disease direction shared with the group direction.
    #[serde(default = "default_entanglement")]
    pub entanglement: f64,
    #[serde(default = "default_signal")]
    pub signal_strength: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_samples: default_n_samples(),
            feature_dim: default_feature_dim(),
            disease_prevalence: default_prevalence(),
            group_balance: default_group_balance(),
            entanglement: default_entanglement(),
            signal_strength: default_signal(),
            noise_std: default_noise(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n_samples < 2 {
            return Err(NirError::Config("n_samples must be at least 2".into()));
        }
        if self.feature_dim < 4 {
            return Err(NirError::Config("feature_dim must be at least 4".into()));
        }
        if !open_unit(self.disease_prevalence) {
            return Err(NirError::Config(
                "disease_prevalence must lie strictly inside (0, 1)".into(),
            ));
        }
        if !open_unit(self.group_balance) {
            return Err(NirError::Config(
                "group_balance must lie strictly inside (0, 1)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.entanglement) {
            return Err(NirError::Config("entanglement must lie in [0, 1]".into()));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength.is_finite()) {
            return Err(NirError::Config("signal_strength must be positive".into()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(NirError::Config("noise_std must be positive".into()));
        }
        Ok(())
    }

    /// The disease-only, group-only and shared unit directions used by
    /// [`generate_synthetic`] for this seed.
    pub fn directions(&self) -> Result<Directions> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok(draw_directions(&mut rng, self.feature_dim))
    }
}

/// Three orthonormal directions in feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    pub disease: Vec<f64>,
    pub group: Vec<f64>,
    pub shared: Vec<f64>,
}

fn draw_directions(rng: &mut ChaCha8Rng, dim: usize) -> Directions {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    while basis.len() < 3 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // A near-degenerate draw is simply redrawn.
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let shared = basis.pop().unwrap();
    let group = basis.pop().unwrap();
    let disease = basis.pop().unwrap();
    Directions {
        disease,
        group,
        shared,
    }
}

/// Draws a dataset in which disease and group membership share a feature
/// direction in proportion to `entanglement`.
///
/// Random stream (ChaCha8 seeded with `seed`): first three Gaussian vectors
/// of length `m`, Gram–Schmidt orthonormalized into (disease, group, shared);
/// then per sample `y ~ Bernoulli(prevalence)`, `g ~ Bernoulli(balance)` and
/// `m` standard normals for the noise. The feature vector is
///
/// ```text
/// x = a·[(1−ρ)·y·v_dis + ρ·y·v_shared + g·v_grp + ρ·g·v_shared] + σ·ε
/// ```
///
/// and the `group` attribute records `A` for `g = 0`, `B` for `g = 1`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let m = config.feature_dim;
    let rho = config.entanglement;
    let amp = config.signal_strength;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dirs = draw_directions(&mut rng, m);

    let mut features = Matrix::zeros(config.n_samples, m);
    let mut labels = Vec::with_capacity(config.n_samples);
    let mut groups = Vec::with_capacity(config.n_samples);
    for i in 0..config.n_samples {
        let y = rng.gen_bool(config.disease_prevalence);
        let g = rng.gen_bool(config.group_balance);
        let (yf, gf) = (f64::from(u8::from(y)), f64::from(u8::from(g)));
        let row = features.row_mut(i);
        for (j, x) in row.iter_mut().enumerate() {
            let signal = (1.0 - rho) * yf * dirs.disease[j]
                + rho * yf * dirs.shared[j]
                + gf * dirs.group[j]
                + rho * gf * dirs.shared[j];
            let noise: f64 = rng.sample(StandardNormal);
            *x = amp * signal + config.noise_std * noise;
        }
        labels.push(u8::from(y));
        groups.push(if g { GROUP_B } else { GROUP_A }.to_string());
    }
    let mut attributes = BTreeMap::new();
    attributes.insert(GROUP_ATTRIBUTE.to_string(), groups);
    Dataset::new(features, labels, attributes)
}

fn csv_error(row: usize, err: csv::Error) -> NirError {
    NirError::Parse {
        row,
        column: String::new(),
        message: err.to_string(),
    }
}

enum Column {
    Feature(usize),
    Label,
    Attribute(String),
}

/// Reads a dataset from CSV: `f0..f{m-1}` feature columns, a `label`
/// column and any number of `attr:<name>` columns. Rows are numbered from
/// 1, not counting the header.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| NirError::Schema(format!("unreadable header: {e}")))?
        .clone();

    let mut columns = Vec::with_capacity(header.len());
    let mut feature_seen = Vec::new();
    let mut label_seen = false;
    for name in header.iter() {
        let col = if name == "label" {
            if label_seen {
                return Err(NirError::Schema("duplicate `label` column".into()));
            }
            label_seen = true;
            Column::Label
        } else if let Some(attr) = name.strip_prefix(ATTR_PREFIX) {
            if attr.is_empty() {
                return Err(NirError::Schema("attribute column with empty name".into()));
            }
            Column::Attribute(attr.to_string())
        } else if let Some(idx) = name
            .strip_prefix('f')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|idx| idx.to_string() == name[1..])
        {
            if feature_seen.contains(&idx) {
                return Err(NirError::Schema(format!(
                    "duplicate feature column `{name}`"
                )));
            }
            feature_seen.push(idx);
            Column::Feature(idx)
        } else {
            return Err(NirError::Schema(format!("unexpected column `{name}`")));
        };
        columns.push(col);
    }
    if !label_seen {
        return Err(NirError::Schema("missing `label` column".into()));
    }
    let m = feature_seen.len();
    if m == 0 {
        return Err(NirError::Schema("no feature columns".into()));
    }
    if let Some(missing) = (0..m).find(|i| !feature_seen.contains(i)) {
        return Err(NirError::Schema(format!(
            "missing feature column `f{missing}`"
        )));
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut attributes: BTreeMap<String, Vec<String>> = columns
        .iter()
        .filter_map(|c| match c {
            Column::Attribute(a) => Some((a.clone(), Vec::new())),
            _ => None,
        })
        .collect();
    let mut row_buf = vec![0.0; m];
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_error(row, e))?;
        for (value, col) in record.iter().zip(&columns) {
            match col {
                Column::Feature(j) => {
                    let v: f64 = value.trim().parse().map_err(|_| NirError::Parse {
                        row,
                        column: format!("f{j}"),
                        message: format!("`{value}` is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(NirError::Parse {
                            row,
                            column: format!("f{j}"),
                            message: format!("`{value}` is not finite"),
                        });
                    }
                    row_buf[*j] = v;
                }
                Column::Label => {
                    let y: i64 = value.trim().parse().map_err(|_| NirError::Parse {
                        row,
                        column: "label".into(),
                        message: format!("`{value}` is not an integer label"),
                    })?;
                    if y != 0 && y != 1 {
                        return Err(NirError::Validation {
                            row,
                            message: format!("label {y} is not 0 or 1"),
                        });
                    }
                    labels.push(y as u8);
                }
                Column::Attribute(a) => {
                    attributes.get_mut(a).unwrap().push(value.to_string());
                }
            }
        }
        data.extend_from_slice(&row_buf);
    }
    let n = labels.len();
    Dataset::new(Matrix::from_vec(n, m, data)?, labels, attributes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| NirError::io(path, e))?;
    read_csv(file)
}

/// Writes `ds` in the CSV layout accepted by [`read_csv`]. Numbers use the
/// shortest representation that parses back to the identical `f64`.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let ser = |e: csv::Error| NirError::Serialization(e.to_string());

    let mut header: Vec<String> = (0..ds.feature_dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    header.extend(ds.attributes.keys().map(|k| format!("{ATTR_PREFIX}{k}")));
    wtr.write_record(&header).map_err(ser)?;

    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.size() {
        record.clear();
        record.extend(ds.features.row(i).iter().map(|v| format!("{v:?}")));
        record.push(ds.labels[i].to_string());
        record.extend(ds.attributes.values().map(|col| col[i].clone()));
        wtr.write_record(&record).map_err(ser)?;
    }
    wtr.flush()
        .map_err(|e| NirError::Serialization(e.to_string()))
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| NirError::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file))
}

/// Train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let fr = Self { train, val, test };
        fr.validate()?;
        Ok(fr)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = self.as_array();
        if parts.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return Err(NirError::Config(
                "every split fraction must be strictly positive".into(),
            ));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(NirError::Config(format!(
                "split fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Integer allocation of `total` proportional to `fractions`: floors first,
/// then the leftover units go to the largest remainders (lower index wins
/// ties).
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Index partition produced by [`stratified_split_indices`]; each list is
/// sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Per-class split counts: split totals come from largest-remainder rounding
/// of `N·fraction`, and each class receives the floor or ceiling of its own
/// quota `n_c·fraction` so that both row and column totals are exact.
fn allocate_per_class(class_sizes: [usize; 2], fr: &SplitFractions) -> [[usize; 3]; 2] {
    let fractions = fr.as_array();
    let totals = largest_remainder(class_sizes[0] + class_sizes[1], &fractions);
    let mut base = [[0usize; 3]; 2];
    let mut rem = [[0f64; 3]; 2];
    let mut deficit = [0usize; 2];
    for c in 0..2 {
        for k in 0..3 {
            let q = class_sizes[c] as f64 * fractions[k];
            base[c][k] = q.floor() as usize;
            rem[c][k] = q - q.floor();
        }
        deficit[c] = class_sizes[c] - base[c].iter().sum::<usize>();
    }

    // Each class picks `deficit[c]` splits to round up; with two classes and
    // three splits the search space is tiny, so enumerate it.
    let subsets = |size: usize| -> Vec<[bool; 3]> {
        (0u8..8)
            .map(|bits| [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0])
            .filter(|s| s.iter().filter(|&&b| b).count() == size)
            .collect()
    };
    let mut best: Option<([[usize; 3]; 2], f64)> = None;
    for s0 in subsets(deficit[0]) {
        for s1 in subsets(deficit[1]) {
            let mut alloc = base;
            let mut score = 0.0;
            for k in 0..3 {
                if s0[k] {
                    alloc[0][k] += 1;
                    score += rem[0][k];
                }
                if s1[k] {
                    alloc[1][k] += 1;
                    score += rem[1][k];
                }
            }
            if (0..3).all(|k| alloc[0][k] + alloc[1][k] == totals[k])
                && best.as_ref().is_none_or(|(_, b)| score > *b)
            {
                best = Some((alloc, score));
            }
        }
    }
    match best {
        Some((alloc, _)) => alloc,
        // Margins that no floor/ceil table satisfies: fall back to
        // sequential allocation, class 0 by largest remainder, class 1 the rest.
        None => {
            let first = largest_remainder(class_sizes[0], &fractions);
            let mut alloc = [[0; 3]; 2];
            for k in 0..3 {
                alloc[0][k] = first[k].min(totals[k]);
            }
            let placed: usize = alloc[0].iter().sum();
            let mut left = class_sizes[0] - placed;
            for k in 0..3 {
                let room = totals[k] - alloc[0][k];
                let extra = room.min(left);
                alloc[0][k] += extra;
                left -= extra;
                alloc[1][k] = totals[k] - alloc[0][k];
            }
            alloc
        }
    }
}

/// Seeded class-stratified partition of `ds` into train/val/test indices.
pub fn stratified_split_indices(
    ds: &Dataset,
    fr: &SplitFractions,
    seed: u64,
) -> Result<SplitIndices> {
    fr.validate()?;
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[usize::from(y)].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 3 {
            return Err(NirError::Stratification(format!(
                "class {c} has {} sample(s); at least 3 are needed to reach every split",
                members.len()
            )));
        }
    }
    let alloc = allocate_per_class([by_class[0].len(), by_class[1].len()], fr);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (c, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let mut start = 0;
        for k in 0..3 {
            let end = start + alloc[c][k];
            parts[k].extend_from_slice(&members[start..end]);
            start = end;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(SplitIndices { train, val, test })
}

pub fn stratified_split(
    ds: &Dataset,
    fr: &SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = stratified_split_indices(ds, fr, seed)?;
    Ok((
        ds.subset(&idx.train),
        ds.subset(&idx.val),
        ds.subset(&idx.test),
    ))
}

/// Median split of a numeric attribute into a new categorical attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Binarize {
    pub source: String,
    /// Output column; defaults to `<source>_bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub low: String,
    pub high: String,
    /// Explicit cut point; the lower median of the column when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<f64>,
}

impl Binarize {
    pub fn new(source: impl Into<String>, low: impl Into<String>, high: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: None,
            low: low.into(),
            high: high.into(),
            cutoff: None,
        }
    }

    pub fn target_name(&self) -> String {
        self.target
            .clone()
            .unwrap_or_else(|| format!("{}_bin", self.source))
    }
}

/// Lower median: element `⌊(n−1)/2⌋` of the sorted values.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(sorted[(sorted.len() - 1) / 2])
}

/// Adds `rule.target_name()`: `low` where value ≤ cut point, `high` above
/// it. The source column is kept.
pub fn binarize_attribute(ds: &Dataset, rule: &Binarize) -> Result<Dataset> {
    let column = ds.attribute(&rule.source)?;
    let values = column
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| NirError::Parse {
                    row: i + 1,
                    column: format!("{ATTR_PREFIX}{}", rule.source),
                    message: format!("`{s}` is not numeric"),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    let cut = match rule.cutoff {
        Some(c) => c,
        None => lower_median(&values)
            .ok_or_else(|| NirError::Contract("cannot binarize an empty dataset".into()))?,
    };
    let groups = values
        .iter()
        .map(|&v| {
            if v <= cut {
                rule.low.clone()
            } else {
                rule.high.clone()
            }
        })
        .collect();
    ds.clone().with_attribute(rule.target_name(), groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn toy(labels: &[u8]) -> Dataset {
        let n = labels.len();
        let features = Matrix::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        Dataset::new(features, labels.to_vec(), BTreeMap::new()).unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            n_samples: 200,
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.attribute(GROUP_ATTRIBUTE).unwrap().len(), 200);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        for cfg in [
            SyntheticConfig {
                disease_prevalence: 1.0,
                ..Default::default()
            },
            SyntheticConfig {
                group_balance: 0.0,
                ..Default::default()
            },
            SyntheticConfig {
                feature_dim: 3,
                ..Default::default()
            },
            SyntheticConfig {
                noise_std: 0.0,
                ..Default::default()
            },
            SyntheticConfig {
                entanglement: 1.5,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(NirError::Config(_))));
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let d = SyntheticConfig::default().directions().unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        for v in [&d.disease, &d.group, &d.shared] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        assert!(dot(&d.disease, &d.group).abs() < 1e-12);
        assert!(dot(&d.disease, &d.shared).abs() < 1e-12);
        assert!(dot(&d.group, &d.shared).abs() < 1e-12);
    }

    #[test]
    fn largest_remainder_matches_hand_allocation() {
        assert_eq!(largest_remainder(10, &[0.7, 0.1, 0.2]), vec![7, 1, 2]);
        assert_eq!(largest_remainder(5, &[0.7, 0.1, 0.2]), vec![4, 0, 1]);
        assert_eq!(largest_remainder(3, &[1.0 / 3.0; 3]), vec![1, 1, 1]);
    }

    #[test]
    fn split_of_ten_with_five_positives() {
        let ds = toy(&[1, 1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let fr = SplitFractions::default();
        let idx = stratified_split_indices(&ds, &fr, 3).unwrap();
        let sizes: Vec<usize> = idx.parts().iter().map(|p| p.len()).collect();
        assert_eq!(sizes, vec![7, 1, 2]);
        let pos: Vec<usize> = idx
            .parts()
            .iter()
            .map(|p| p.iter().filter(|&&i| ds.labels()[i] == 1).count())
            .collect();
        assert!(pos[0] == 3 || pos[0] == 4);
        assert!(pos[1] <= 1);
        assert_eq!(pos[2], 1);
        assert_eq!(pos.iter().sum::<usize>(), 5);
    }

    #[test]
    fn split_is_partition_and_deterministic() {
        let cfg = SyntheticConfig {
            n_samples: 503,
            seed: 1,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let fr = SplitFractions::default();
        let a = stratified_split_indices(&ds, &fr, 11).unwrap();
        let b = stratified_split_indices(&ds, &fr, 11).unwrap();
        assert_eq!(a, b);

        let all: BTreeSet<usize> = (0..ds.size()).collect();
        let sets: Vec<BTreeSet<usize>> = a
            .parts()
            .iter()
            .map(|p| p.iter().copied().collect())
            .collect();
        let union: BTreeSet<usize> = sets.iter().flatten().copied().collect();
        assert_eq!(union, all);
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        let prevalence = ds.count_positive() as f64 / ds.size() as f64;
        for part in a.parts() {
            let pos = part.iter().filter(|&&i| ds.labels()[i] == 1).count() as f64;
            assert!((pos - prevalence * part.len() as f64).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn split_rejects_tiny_class() {
        let ds = toy(&[1, 1, 0, 0, 0, 0, 0, 0]);
        let err = stratified_split_indices(&ds, &SplitFractions::default(), 0).unwrap_err();
        assert!(matches!(err, NirError::Stratification(_)));
    }

    #[test]
    fn split_fractions_validation() {
        assert!(SplitFractions::new(1.0, 1e-3, 1e-3).is_err());
        assert!(SplitFractions::new(1.0, 0.0, 0.0).is_err());
        assert!(SplitFractions::new(0.7, 0.0, 0.3).is_err());
        assert!(SplitFractions::new(0.7, 0.1, 0.2).is_ok());
    }

    fn with_ages(ages: &[&str]) -> Dataset {
        let labels: Vec<u8> = (0..ages.len()).map(|i| (i % 2) as u8).collect();
        toy(&labels)
            .with_attribute("age", ages.iter().map(|s| s.to_string()).collect())
            .unwrap()
    }

    #[test]
    fn binarize_at_median() {
        let ds = with_ages(&["30", "40", "50", "60", "70"]);
        let out = binarize_attribute(&ds, &Binarize::new("age", "young", "old")).unwrap();
        assert_eq!(
            out.attribute("age_bin").unwrap(),
            &["young", "young", "young", "old", "old"]
        );
        assert_eq!(out.attribute("age").unwrap(), ds.attribute("age").unwrap());
    }

    #[test]
    fn binarize_even_with_ties_uses_lower_median() {
        let ds = with_ages(&["70", "50", "30", "50"]);
        assert_eq!(lower_median(&[70.0, 50.0, 30.0, 50.0]), Some(50.0));
        let out = binarize_attribute(&ds, &Binarize::new("age", "lo", "hi")).unwrap();
        assert_eq!(out.attribute("age_bin").unwrap(), &["hi", "lo", "lo", "lo"]);
    }

    #[test]
    fn binarize_constant_column_is_single_group() {
        let ds = with_ages(&["5", "5", "5"]);
        let out = binarize_attribute(&ds, &Binarize::new("age", "lo", "hi")).unwrap();
        assert!(out.attribute("age_bin").unwrap().iter().all(|g| g == "lo"));
    }

    #[test]
    fn binarize_explicit_cutoff_and_parse_error() {
        let ds = with_ages(&["55", "61", "62"]);
        let rule = Binarize {
            target: Some("age_group".into()),
            cutoff: Some(61.0),
            ..Binarize::new("age", "young", "older")
        };
        let out = binarize_attribute(&ds, &rule).unwrap();
        assert_eq!(
            out.attribute("age_group").unwrap(),
            &["young", "young", "older"]
        );

        let bad = with_ages(&["55", "n/a", "62"]);
        let err = binarize_attribute(&bad, &rule).unwrap_err();
        assert!(matches!(err, NirError::Parse { row: 2, .. }));
    }
}
