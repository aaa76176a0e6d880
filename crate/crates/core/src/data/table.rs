use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schema::{infer_family, Schema, Sidecar};
use super::{Batch, Modality};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::likelihoods::Family;

/// Modalities with raw values for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<Modality>,
    pub data: Batch,
}

impl Dataset {
    pub fn new(modalities: Vec<Modality>, data: Batch) -> Result<Self> {
        if modalities.len() != data.modalities() {
            return Err(Error::Schema(format!(
                "{} modalities declared, {} present",
                modalities.len(),
                data.modalities()
            )));
        }
        for (m, v) in modalities.iter().zip(&data.values) {
            if v.last_dim() != m.dim() {
                return Err(Error::Schema(format!(
                    "modality `{}` declares dim {} but has {} columns",
                    m.name,
                    m.dim(),
                    v.last_dim()
                )));
            }
        }
        Ok(Self { modalities, data })
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            modalities: self.modalities.clone(),
            data: self.data.select(idx),
        }
    }
}

/// Split fractions for train / validation / test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

/// Row indices of each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Seeded random partition of `0..n`.
    pub fn random(n: usize, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let f = fractions;
        if [f.train, f.val, f.test].iter().any(|v| !(0.0..=1.0).contains(v)) || (f.train + f.val + f.test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split fractions must be in [0, 1] and sum to 1, got {f:?}")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (f.train * n as f64).round() as usize;
        let n_val = ((f.val * n as f64).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Self { train: idx, val, test })
    }

    /// Writes `train.idx`, `val.idx` and `test.idx` (one index per line).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, idx) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
            std::fs::write(dir.join(format!("{name}.idx")), text)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let load = |name: &str| -> Result<Vec<usize>> {
            std::fs::read_to_string(dir.join(format!("{name}.idx")))?
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim()
                        .parse()
                        .map_err(|_| Error::Schema(format!("bad row index `{l}` in {name}.idx")))
                })
                .collect()
        };
        Ok(Self {
            train: load("train")?,
            val: load("val")?,
            test: load("test")?,
        })
    }
}

/// Preprocessed splits plus everything needed to undo the preprocessing.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub schema: Schema,
    pub indices: SplitIndices,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    /// Raw (untransformed) test rows, the reference for error metrics.
    pub raw_test: Batch,
    raw_val: Batch,
}

impl Prepared {
    pub fn modalities(&self) -> Vec<Modality> {
        self.schema.model_modalities()
    }

    /// Raw (untransformed) validation rows.
    pub fn raw_val(&self) -> Batch {
        self.raw_val.clone()
    }
}

/// Splits, fits the preprocessing on the training rows and applies it.
pub fn prepare(dataset: &Dataset, indices: SplitIndices) -> Result<Prepared> {
    let n = dataset.rows();
    if let Some(bad) = [&indices.train, &indices.val, &indices.test].iter().flat_map(|v| v.iter()).find(|&&i| i >= n) {
        return Err(Error::Schema(format!("row index {bad} out of range for {n} rows")));
    }
    let raw_train = dataset.data.select(&indices.train);
    let schema = Schema::fit(&dataset.modalities, &raw_train)?;
    let raw_test = dataset.data.select(&indices.test);
    let raw_val = dataset.data.select(&indices.val);
    Ok(Prepared {
        train: schema.apply(&raw_train)?,
        val: schema.apply(&raw_val)?,
        test: schema.apply(&raw_test)?,
        raw_test,
        raw_val,
        schema,
        indices,
    })
}

fn is_missing(cell: &str, token: Option<&str>) -> bool {
    let c = cell.trim();
    c.is_empty() || c.eq_ignore_ascii_case("nan") || c.eq_ignore_ascii_case("na") || token.is_some_and(|t| c == t)
}

/// Reads a headed CSV file into one-column modalities. Families come from the
/// sidecar when declared and are otherwise inferred from the rows listed in
/// `infer_rows` (normally the training split).
pub fn read_csv(path: &Path, sidecar: &Sidecar, infer_rows: Option<&[usize]>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut columns: Vec<Vec<Option<f64>>> = vec![Vec::new(); headers.len()];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Schema(format!("row {} has {} cells, expected {}", r + 1, record.len(), headers.len())));
        }
        for (c, cell) in record.iter().enumerate() {
            let spec = sidecar.column(&headers[c]);
            let value = if is_missing(cell, spec.and_then(|s| s.missing_token.as_deref())) {
                None
            } else if let Ok(v) = cell.trim().parse::<f64>() {
                Some(v)
            } else if let Some(cats) = spec.and_then(|s| s.categories.as_ref()) {
                let i = cats.iter().position(|k| k == cell.trim()).ok_or_else(|| {
                    Error::Schema(format!("`{}` is not a category of column `{}`", cell.trim(), headers[c]))
                })?;
                Some(i as f64)
            } else {
                return Err(Error::Schema(format!(
                    "column `{}` has non-numeric value `{}` and no category coding in the sidecar",
                    headers[c],
                    cell.trim()
                )));
            };
            columns[c].push(value);
        }
    }
    let rows = columns.first().map_or(0, Vec::len);
    let label_col = sidecar.label.as_ref().map(|l| {
        headers
            .iter()
            .position(|h| h == l)
            .ok_or_else(|| Error::Schema(format!("label column `{l}` not found")))
    });
    let label_col = label_col.transpose()?;
    let labels = label_col
        .map(|c| {
            columns[c]
                .iter()
                .map(|v| match v {
                    Some(v) if v.fract() == 0.0 && *v >= 0.0 => Ok(*v as usize),
                    _ => Err(Error::Schema("labels must be non-negative integers without gaps".into())),
                })
                .collect::<Result<Vec<usize>>>()
        })
        .transpose()?;

    let mut modalities = Vec::new();
    let mut values = Vec::new();
    let mut masks = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if Some(c) == label_col {
            continue;
        }
        let col = &columns[c];
        let spec = sidecar.column(name);
        let family = match spec.and_then(|s| s.family.as_deref()) {
            Some(f) => {
                let distinct = || {
                    let set: std::collections::BTreeSet<u64> = col.iter().flatten().map(|v| v.to_bits()).collect();
                    set.len().max(2)
                };
                let classes = spec
                    .and_then(|s| s.classes.or(s.categories.as_ref().map(Vec::len)))
                    .unwrap_or_else(distinct);
                Family::parse(f, Some(classes))?
            }
            None => {
                let sample: Vec<f64> = match infer_rows {
                    Some(rows) => rows.iter().filter_map(|&r| col.get(r).copied().flatten()).collect(),
                    None => col.iter().flatten().copied().collect(),
                };
                infer_family(&sample).map_err(|e| Error::Schema(format!("column `{name}`: {e}")))?
            }
        };
        modalities.push(Modality::new(name.clone(), family, 1)?);
        values.push(Tensor::new(vec![rows, 1], col.iter().map(|v| v.unwrap_or(0.0)).collect())?);
        let any_missing = col.iter().any(Option::is_none);
        masks.push(
            any_missing
                .then(|| Tensor::new(vec![rows, 1], col.iter().map(|v| f64::from(v.is_some())).collect()))
                .transpose()?,
        );
    }
    Dataset::new(modalities, Batch::new(values, masks, labels)?)
}

/// Writes raw values as a headed CSV with one column per modality entry.
/// Missing entries are left empty.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    for m in &dataset.modalities {
        if m.dim() == 1 {
            header.push(m.name.clone());
        } else {
            header.extend((0..m.dim()).map(|j| format!("{}_{j}", m.name)));
        }
    }
    if dataset.data.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for r in 0..dataset.rows() {
        let mut row = Vec::with_capacity(header.len());
        for d in 0..dataset.modalities.len() {
            let v = dataset.data.values[d].row(r);
            let dim = v.len();
            for (j, x) in v.iter().enumerate() {
                let observed = dataset.data.mask(d).is_none_or(|m| m.data()[r * dim + j] != 0.0);
                row.push(if observed { format!("{x}") } else { String::new() });
            }
        }
        if let Some(l) = &dataset.data.labels {
            row.push(l[r].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
