use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ivae::data::{
    read_csv, synth_hetero, synth_trimodal, Dataset, HeteroSpec, Sidecar, SplitFractions, SplitIndices, TrimodalSpec,
};
use serde::{Deserialize, Serialize};

/// Where a run's rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf, sidecar: Option<PathBuf> },
    SynthHetero { n: usize, seed: u64 },
    SynthTrimodal { n: usize, classes: usize, seed: u64 },
}

impl DataSource {
    /// Parses `--data`. CSV paths are made absolute; a sidecar next to the
    /// file (same stem, `.json`) is picked up when none is given.
    pub fn parse(spec: &str, sidecar: Option<&Path>, n: usize, classes: usize, seed: u64) -> Result<Self> {
        match spec.trim() {
            "synth:hetero" => Ok(DataSource::SynthHetero { n, seed }),
            "synth:trimodal" => Ok(DataSource::SynthTrimodal { n, classes, seed }),
            s if s.starts_with("synth:") => bail!("unknown synthetic dataset `{s}` (expected synth:hetero or synth:trimodal)"),
            s => {
                let path = std::path::absolute(s).with_context(|| format!("resolving {s}"))?;
                if !path.is_file() {
                    bail!("data file {} does not exist", path.display());
                }
                let sidecar = match sidecar {
                    Some(p) => Some(std::path::absolute(p)?),
                    None => Some(path.with_extension("json")).filter(|p| p.is_file()),
                };
                Ok(DataSource::Csv { path, sidecar })
            }
        }
    }

    /// Short label for tables.
    pub fn name(&self) -> String {
        match self {
            DataSource::Csv { path, .. } => path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into()),
            DataSource::SynthHetero { .. } => "synth_hetero".into(),
            DataSource::SynthTrimodal { .. } => "synth_trimodal".into(),
        }
    }

    /// Number of label classes, when the data carries labels.
    pub fn classes(&self, dataset: &Dataset) -> Option<usize> {
        match self {
            DataSource::SynthTrimodal { classes, .. } => Some(*classes),
            _ => dataset.data.labels.as_ref().and_then(|l| l.iter().max()).map(|m| m + 1),
        }
    }

    /// Loads the rows and the split. Without `split`, a random split is drawn
    /// from `split_seed`; CSV families are inferred on its training rows.
    pub fn load(&self, split: Option<SplitIndices>, fractions: SplitFractions, split_seed: u64) -> Result<(Dataset, SplitIndices)> {
        match self {
            DataSource::Csv { path, sidecar } => {
                let sidecar = match sidecar {
                    Some(p) => Sidecar::read(p).with_context(|| format!("reading sidecar {}", p.display()))?,
                    None => Sidecar::default(),
                };
                let probe = read_csv(path, &sidecar, None).with_context(|| format!("reading {}", path.display()))?;
                let split = match split {
                    Some(s) => s,
                    None => SplitIndices::random(probe.rows(), fractions, split_seed)?,
                };
                let dataset = read_csv(path, &sidecar, Some(&split.train))?;
                Ok((dataset, split))
            }
            DataSource::SynthHetero { n, seed } => {
                let dataset = synth_hetero(*seed, *n, &HeteroSpec::default())?;
                let split = split.map_or_else(|| SplitIndices::random(*n, fractions, split_seed), Ok)?;
                Ok((dataset, split))
            }
            DataSource::SynthTrimodal { n, classes, seed } => {
                let dataset = synth_trimodal(*seed, *n, &TrimodalSpec::new(*classes))?;
                let split = split.map_or_else(|| SplitIndices::random(*n, fractions, split_seed), Ok)?;
                Ok((dataset, split))
            }
        }
    }
}
