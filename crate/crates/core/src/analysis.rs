//! Subgroup activation analysis: pick the strongest penultimate neurons for
//! a reference subgroup and tabulate how every other subgroup activates
//! them.
//!
//! Activations are raw post-rectifier values of the penultimate layer.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{NirError, Result};
use crate::model::{forward, ModelParams};
use crate::nir::incidence;
use crate::trainer::TrainingLog;

pub const DEFAULT_TOP_K: usize = 10;
pub const ACTIVATION_KIND: &str = "raw post-rectifier penultimate activations";
pub const CELL_GRAMMAR: &str =
    "cell := item (',' item)*; item := 'label=' ('+'|'-'|'*') | <attr> '=' <value>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelFilter {
    Positive,
    Negative,
    Any,
}

impl LabelFilter {
    fn matches(self, y: u8) -> bool {
        match self {
            LabelFilter::Positive => y == 1,
            LabelFilter::Negative => y == 0,
            LabelFilter::Any => true,
        }
    }

    fn symbol(self) -> char {
        match self {
            LabelFilter::Positive => '+',
            LabelFilter::Negative => '-',
            LabelFilter::Any => '*',
        }
    }
}

/// A subgroup × label selection such as `label=+,group=A`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgroupCell {
    pub label: LabelFilter,
    pub filters: Vec<(String, String)>,
}

impl SubgroupCell {
    pub fn new(label: LabelFilter, filters: &[(&str, &str)]) -> Self {
        Self {
            label,
            filters: filters
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Rows of `ds` in this cell, in dataset order.
    pub fn select(&self, ds: &Dataset) -> Result<Vec<usize>> {
        let columns = self
            .filters
            .iter()
            .map(|(attr, value)| Ok((ds.attribute(attr)?, value)))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..ds.size())
            .filter(|&i| {
                self.label.matches(ds.labels()[i])
                    && columns.iter().all(|(col, value)| col[i] == **value)
            })
            .collect())
    }
}

impl fmt::Display for SubgroupCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "label={}", self.label.symbol())?;
        for (k, v) in &self.filters {
            write!(f, ",{k}={v}")?;
        }
        Ok(())
    }
}

impl FromStr for SubgroupCell {
    type Err = NirError;

    fn from_str(spec: &str) -> Result<Self> {
        let fail = |why: String| {
            NirError::Config(format!(
                "invalid cell `{spec}`: {why}; expected {CELL_GRAMMAR}"
            ))
        };
        let mut label = None;
        let mut filters = Vec::new();
        for item in spec.split(',').map(str::trim) {
            let (key, value) = item
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| fail(format!("`{item}` is not key=value")))?;
            if key.is_empty() || value.is_empty() {
                return Err(fail(format!("`{item}` has an empty side")));
            }
            if key == "label" {
                if label.is_some() {
                    return Err(fail("label given twice".into()));
                }
                label = Some(match value {
                    "+" => LabelFilter::Positive,
                    "-" => LabelFilter::Negative,
                    "*" => LabelFilter::Any,
                    other => return Err(fail(format!("label must be +, - or *, got `{other}`"))),
                });
            } else {
                if filters.iter().any(|(k, _): &(String, String)| k == key) {
                    return Err(fail(format!("attribute `{key}` given twice")));
                }
                filters.push((key.to_string(), value.to_string()));
            }
        }
        Ok(Self {
            label: label.unwrap_or(LabelFilter::Any),
            filters,
        })
    }
}

/// Statistic used to rank neurons in the reference cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeuronRanking {
    #[default]
    MeanActivation,
    /// Probability-weighted mean, as in the incidence statistic.
    Incidence,
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean penultimate activation of every neuron over the rows of `cell`.
pub fn cell_means(params: &ModelParams, ds: &Dataset, cell: &SubgroupCell) -> Result<Vec<f64>> {
    let rows = cell.select(ds)?;
    if rows.is_empty() {
        return Err(NirError::EmptyGroup(cell.name()));
    }
    let trace = forward(params, &ds.features().select_rows(&rows))?;
    let z = trace.penultimate();
    Ok((0..z.cols())
        .map(|j| stable_mean(&mut z.column(j)))
        .collect())
}

/// Indices of the `k` largest entries, ties to the lower index.
fn rank_desc(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn top_k_neurons(
    params: &ModelParams,
    ds: &Dataset,
    reference: &SubgroupCell,
    k: usize,
) -> Result<Vec<usize>> {
    top_k_neurons_by(params, ds, reference, k, NeuronRanking::MeanActivation)
}

pub fn top_k_neurons_by(
    params: &ModelParams,
    ds: &Dataset,
    reference: &SubgroupCell,
    k: usize,
    ranking: NeuronRanking,
) -> Result<Vec<usize>> {
    let d = params.architecture.penultimate_dim();
    if k == 0 || k > d {
        return Err(NirError::Selection(format!(
            "k must lie in 1..={d}, got {k}"
        )));
    }
    let rows = reference.select(ds)?;
    if rows.is_empty() {
        return Err(NirError::Selection(format!(
            "reference cell `{reference}` selects no samples"
        )));
    }
    let scores = match ranking {
        NeuronRanking::MeanActivation => cell_means(params, ds, reference)?,
        NeuronRanking::Incidence => {
            let trace = forward(params, &ds.features().select_rows(&rows))?;
            incidence(
                trace.penultimate(),
                &trace.probs,
                crate::nir::DEFAULT_EPSILON,
            )?
            .phi
        }
    };
    Ok(rank_desc(&scores, k))
}

/// Mean activations of selected neurons (rows) across subgroup cells
/// (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub neuron_indices: Vec<usize>,
    pub cells: Vec<String>,
    /// `values[r][c]`: neuron `neuron_indices[r]` in cell `cells[c]`.
    pub values: Vec<Vec<f64>>,
    pub reference_cell: String,
    pub activation: String,
}

impl ActivationMatrix {
    pub fn column_index(&self, cell: &str) -> Result<usize> {
        self.cells.iter().position(|c| c == cell).ok_or_else(|| {
            NirError::Contract(format!(
                "cell `{cell}` not in matrix; have [{}]",
                self.cells.join("; ")
            ))
        })
    }

    pub fn column(&self, cell: &str) -> Result<Vec<f64>> {
        let c = self.column_index(cell)?;
        Ok(self.values.iter().map(|row| row[c]).collect())
    }

    /// Delimited table: header `neuron,<cell>...`, one row per neuron.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let ser = |e: csv::Error| NirError::Serialization(e.to_string());
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = vec!["neuron".to_string()];
        header.extend(self.cells.iter().cloned());
        wtr.write_record(&header).map_err(ser)?;
        for (n, row) in self.neuron_indices.iter().zip(&self.values) {
            let mut rec = vec![n.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&rec).map_err(ser)?;
        }
        wtr.flush()
            .map_err(|e| NirError::Serialization(e.to_string()))
    }

    /// Reads a table written by [`write_csv`](Self::write_csv). The
    /// reference cell is not part of the table and must be supplied.
    pub fn read_csv<R: Read>(reader: R, reference_cell: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| NirError::Schema(e.to_string()))?
            .clone();
        if header.get(0) != Some("neuron") {
            return Err(NirError::Schema("first column must be `neuron`".into()));
        }
        let cells: Vec<String> = header.iter().skip(1).map(String::from).collect();
        let mut neuron_indices = Vec::new();
        let mut values = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 1;
            let rec = rec.map_err(|e| NirError::Parse {
                row,
                column: String::new(),
                message: e.to_string(),
            })?;
            let parse_err = |column: &str, v: &str| NirError::Parse {
                row,
                column: column.to_string(),
                message: format!("`{v}` is not a number"),
            };
            neuron_indices.push(rec[0].parse().map_err(|_| parse_err("neuron", &rec[0]))?);
            values.push(
                rec.iter()
                    .skip(1)
                    .zip(&cells)
                    .map(|(v, c)| v.parse::<f64>().map_err(|_| parse_err(c, v)))
                    .collect::<Result<Vec<f64>>>()?,
            );
        }
        Ok(Self {
            neuron_indices,
            cells,
            values,
            reference_cell: reference_cell.to_string(),
            activation: ACTIVATION_KIND.to_string(),
        })
    }

    /// Plain-text heat table; cell shading marks each value's position
    /// between the matrix minimum and maximum.
    pub fn to_table(&self) -> String {
        const SHADES: [char; 5] = [' ', '░', '▒', '▓', '█'];
        let flat = self.values.iter().flatten().copied();
        let lo = flat.clone().fold(f64::INFINITY, f64::min);
        let hi = flat.fold(f64::NEG_INFINITY, f64::max);
        let width = self
            .cells
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(12);
        let mut out = format!("reference: {}\n{:>8}", self.reference_cell, "neuron");
        for c in &self.cells {
            out.push_str(&format!(" {c:>width$}"));
        }
        out.push('\n');
        for (n, row) in self.neuron_indices.iter().zip(&self.values) {
            out.push_str(&format!("{n:>8}"));
            for &v in row {
                let level = if hi > lo {
                    (((v - lo) / (hi - lo)) * (SHADES.len() - 1) as f64).round() as usize
                } else {
                    0
                };
                let cell = format!("{v:.4} {}", SHADES[level]);
                out.push_str(&format!(" {cell:>width$}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn subgroup_activation_matrix(
    params: &ModelParams,
    ds: &Dataset,
    neurons: &[usize],
    cells: &[SubgroupCell],
    reference: &SubgroupCell,
) -> Result<ActivationMatrix> {
    let d = params.architecture.penultimate_dim();
    if let Some(&bad) = neurons.iter().find(|&&n| n >= d) {
        return Err(NirError::Selection(format!(
            "neuron {bad} out of range 0..{d}"
        )));
    }
    let means = cells
        .iter()
        .map(|c| cell_means(params, ds, c))
        .collect::<Result<Vec<_>>>()?;
    let values = neurons
        .iter()
        .map(|&n| means.iter().map(|m| m[n]).collect())
        .collect();
    Ok(ActivationMatrix {
        neuron_indices: neurons.to_vec(),
        cells: cells.iter().map(SubgroupCell::name).collect(),
        values,
        reference_cell: reference.name(),
        activation: ACTIVATION_KIND.to_string(),
    })
}

/// Mean over selected neurons of `privileged − reference` activation.
/// Positive when the privileged cell drives the reference cell's top
/// neurons harder than the reference cell does.
pub fn entanglement_score(
    matrix: &ActivationMatrix,
    privileged: &str,
    reference: &str,
) -> Result<f64> {
    let p = matrix.column_index(privileged)?;
    let r = matrix.column_index(reference)?;
    if matrix.values.is_empty() {
        return Err(NirError::Contract("empty activation matrix".into()));
    }
    let sum: f64 = matrix.values.iter().map(|row| row[p] - row[r]).sum();
    Ok(sum / matrix.values.len() as f64)
}

/// `(epoch, probe incidence variance)` for every logged epoch.
pub fn variance_trace(log: &TrainingLog) -> Vec<(usize, f64)> {
    log.records
        .iter()
        .map(|r| (r.epoch, r.probe_variance))
        .collect()
}
