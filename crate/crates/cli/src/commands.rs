use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use clap::Args;
use ivae::data::gmm::default_components;
use ivae::data::{prepare, write_csv, ColumnSpec, Dataset, Gmm, Prepared, Sidecar, SplitIndices};
use ivae::eval::{parallel_coordinates, pair_plot, MetricReport, ProbeConfig, ProbeSet};
use ivae::gradconflict::ResolverChain;
use ivae::impartiality::{BlockSet, ImpartialityConfig};
use ivae::likelihoods::Family;
use ivae::models::checkpoint::{self, schema_hash};
use ivae::models::Model;
use ivae::train::{evaluate, fit, resolver_grid, run, select_best, summarize, validation_metric, Candidate, Probing};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{RunArgs, RunConfig};
use crate::source::DataSource;
use crate::VERSION;

/// Contents of `run.json` in every per-seed run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub seed: u64,
    pub version: String,
    pub inventory: String,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn load_prepared(source: &DataSource, cfg: &RunConfig, split: Option<SplitIndices>, seed: u64) -> Result<(Prepared, Option<usize>)> {
    let (dataset, split) = source.load(split, cfg.split, seed)?;
    let classes = source.classes(&dataset);
    Ok((prepare(&dataset, split)?, classes))
}

fn fit_probes(prepared: &Prepared, classes: usize, seed: u64) -> Result<ProbeSet> {
    let cfg = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    let probes = ProbeSet::fit(&prepared.modalities(), &prepared.train, classes, &cfg)?;
    let labels = prepared.test.labels.as_ref().expect("labelled");
    for (d, m) in prepared.modalities().iter().enumerate() {
        let acc = probes.accuracy(d, &prepared.test.values[d], labels)?;
        log::info!("probe `{}`: test accuracy {acc:.3}", m.name);
        if acc < 0.9 {
            log::warn!("probe `{}` is weak ({acc:.3}); coherence will be noisy", m.name);
        }
    }
    Ok(probes)
}

/// Probes cached in `dir/probes.json`, trained on first use.
fn cached_probes(dir: &Path, prepared: &Prepared, classes: usize, seed: u64) -> Result<ProbeSet> {
    let path = dir.join("probes.json");
    if path.is_file() {
        let probes: ProbeSet = read_json(&path)?;
        if probes.modalities == prepared.modalities() {
            return Ok(probes);
        }
        log::warn!("cached probes do not match the data; retraining");
    }
    let probes = fit_probes(prepared, classes, seed)?;
    write_json(&path, &probes)?;
    Ok(probes)
}

fn write_report(dir: &Path, report: &MetricReport, model: &Model, prepared: &Prepared, label: &str) -> Result<()> {
    report.write_csv(&dir.join("metrics.csv"))?;
    report.write_json(&dir.join("metrics.json"))?;
    if let Some(rec) = &report.reconstruction {
        let axes: Vec<String> = rec.per_modality.iter().map(|e| e.modality.clone()).collect();
        let values: Vec<f64> = rec.per_modality.iter().map(|e| e.value).collect();
        fs::write(dir.join("errors.svg"), parallel_coordinates(&axes, &[(label.to_string(), values)]))?;
    }
    if let Some(coh) = &report.coherence {
        let axes = report.modalities.clone();
        let mut lines: Vec<(String, Vec<f64>)> = Vec::new();
        for cell in &coh.cells {
            match lines.iter_mut().find(|(name, _)| *name == cell.evidence_label) {
                Some((_, v)) => v.push(cell.accuracy),
                None => lines.push((cell.evidence_label.clone(), vec![cell.accuracy])),
            }
        }
        fs::write(dir.join("coherence.svg"), parallel_coordinates(&axes, &lines))?;
    }
    // Pair plot of the first column of each modality, data against reconstruction.
    let truth = &prepared.raw_test;
    let recon = prepared.schema.invert_all(&model.reconstruct(&prepared.test)?);
    let cols: Vec<usize> = (0..truth.values.len()).take(6).collect();
    let names: Vec<String> = cols.iter().map(|&d| report.modalities[d].clone()).collect();
    let rows = |xs: &[ivae::autodiff::Tensor]| -> Vec<Vec<f64>> {
        (0..truth.rows().min(500)).map(|r| cols.iter().map(|&d| xs[d].row(r)[0]).collect()).collect()
    };
    let groups = vec![("data".to_string(), rows(&truth.values)), ("reconstruction".to_string(), rows(&recon))];
    fs::write(dir.join("pairs.svg"), pair_plot(&names, &groups))?;
    Ok(())
}

fn resume_model(path: &Path, cfg: &RunConfig, prepared: &Prepared) -> Result<Model> {
    let header = checkpoint::read_header(path)?;
    if header.schema_hash != schema_hash(&prepared.modalities()) {
        bail!("checkpoint {} was trained on a different data schema", path.display());
    }
    let (a, b) = (&header.config, &cfg.model);
    if (a.kind, a.loss, a.k, a.latent, a.hidden) != (b.kind, b.loss, b.k, b.latent, b.hidden) {
        bail!("checkpoint {} has an incompatible model configuration", path.display());
    }
    let (mut model, _) = checkpoint::load(path)?;
    model.set_impartiality(cfg.model.impartiality.clone())?;
    Ok(model)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
    skipped_steps: usize,
    aggregate_error: Option<f64>,
    cross_coherence: Option<f64>,
    cross_latent: Option<f64>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_args(&args.run)?;
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    let mut summary = csv::Writer::from_path(cfg.out.join("summary.csv"))?;
    for &seed in &cfg.seeds {
        let s = train_seed(&cfg, seed, args.resume.as_deref())?;
        summary.serialize(s)?;
    }
    summary.flush()?;
    Ok(())
}

fn train_seed(cfg: &RunConfig, seed: u64, resume: Option<&Path>) -> Result<SeedSummary> {
    let dir = seed_dir(&cfg.out, seed);
    fs::create_dir_all(&dir)?;
    let (prepared, classes) = load_prepared(&cfg.data, cfg, None, seed)?;
    prepared.indices.write(&dir.join("splits"))?;
    let mut model = match resume {
        Some(p) => resume_model(p, cfg, &prepared)?,
        None => Model::build(cfg.model.clone(), prepared.modalities(), seed)?,
    };
    let inventory = model.inventory().summary();
    log::info!("seed {seed}: {} {} with {inventory}", cfg.model.kind, cfg.model.loss);
    let record = RunRecord {
        config: RunConfig {
            seeds: vec![seed],
            ..cfg.clone()
        },
        seed,
        version: VERSION.to_string(),
        inventory: inventory.clone(),
    };
    write_json(&dir.join("run.json"), &record)?;
    fs::write(dir.join("inventory.txt"), format!("{inventory}\n"))?;

    let probes = match classes {
        Some(c) if cfg.model.kind.is_mixture() => Some((cached_probes(&dir, &prepared, c, seed)?, c)),
        _ => None,
    };
    let probing = probes.as_ref().map(|(p, c)| Probing { probes: p, classes: *c });
    let train_cfg = cfg.train_config(seed);
    let mut validate = |m: &mut Model| validation_metric(m, &prepared, cfg.selection, probing, cfg.batch_size, seed);
    let report = fit(&mut model, &prepared.train, &train_cfg, Some(&mut validate))?;
    if report.skipped_steps > 0 {
        log::warn!("seed {seed}: skipped {} non-finite steps", report.skipped_steps);
    }
    report.write_csv(&dir.join("history.csv"))?;
    let meta = json!({
        "best_epoch": report.best_epoch,
        "best_metric": report.best_metric,
        "selection": cfg.selection,
        "version": VERSION,
    });
    checkpoint::save(&model, seed, meta, &dir.join("model.ivae"))?;

    let mut metrics = evaluate(&model, &prepared, probing, seed)?;
    metrics.meta = json!({ "seed": seed, "inventory": inventory, "version": VERSION });
    write_report(&dir, &metrics, &model, &prepared, &format!("seed-{seed}"))?;
    let s = SeedSummary {
        seed,
        best_epoch: report.best_epoch,
        best_metric: report.best_metric,
        skipped_steps: report.skipped_steps,
        aggregate_error: metrics.reconstruction.as_ref().map(|r| r.aggregate),
        cross_coherence: metrics.coherence.as_ref().map(|c| c.cross_coherence()),
        cross_latent: metrics.latent.as_ref().map(|l| l.cross_accuracy()),
    };
    log::info!(
        "seed {seed}: best epoch {:?}, test aggregate error {:?}",
        s.best_epoch,
        s.aggregate_error
    );
    Ok(s)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// A per-seed run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to evaluate; defaults to the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn open_run(dir: &Path, ckpt: Option<&Path>) -> Result<(RunRecord, Prepared, Option<usize>, Model)> {
    let record: RunRecord = read_json(&dir.join("run.json"))?;
    let split = SplitIndices::read(&dir.join("splits"))?;
    let (prepared, classes) = load_prepared(&record.config.data, &record.config, Some(split), record.seed)?;
    let ckpt = ckpt.map_or_else(|| dir.join("model.ivae"), Path::to_path_buf);
    let header = checkpoint::read_header(&ckpt)?;
    if header.schema_hash != schema_hash(&prepared.modalities()) {
        bail!("checkpoint {} does not match the data schema of {}", ckpt.display(), dir.display());
    }
    let (model, _) = checkpoint::load(&ckpt)?;
    Ok((record, prepared, classes, model))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (record, prepared, classes, model) = open_run(&args.run, args.checkpoint.as_deref())?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    fs::create_dir_all(&out)?;
    let probes = match classes {
        Some(c) if model.kind().is_mixture() => Some((cached_probes(&args.run, &prepared, c, record.seed)?, c)),
        _ => None,
    };
    let probing = probes.as_ref().map(|(p, c)| Probing { probes: p, classes: *c });
    let mut metrics = evaluate(&model, &prepared, probing, record.seed)?;
    metrics.meta = json!({ "seed": record.seed, "inventory": model.inventory().summary(), "version": record.version });
    write_report(&out, &metrics, &model, &prepared, &format!("seed-{}", record.seed))?;
    for row in metrics.rows().iter().filter(|r| r.target.is_empty()) {
        println!("{} {} {:.6}", row.section, row.key, row.value);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// GradNorm α values to try (each adds a GradNorm row per direction option).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    /// Explicit chains separated by `;` instead of the 12-combination grid.
    #[arg(long)]
    pub grid: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
struct SweepRow {
    chain: String,
    seed: u64,
    status: String,
    val_metric: Option<f64>,
    test_aggregate: Option<f64>,
    test_cross_coherence: Option<f64>,
    seconds: Option<f64>,
}

pub fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("IVAE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    cap.unwrap_or(available).min(jobs).max(1)
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = RunConfig::from_args(&args.run)?;
    let grid: Vec<ResolverChain> = match &args.grid {
        Some(g) => g.split(';').map(|c| c.trim().parse()).collect::<ivae::Result<_>>()?,
        None => resolver_grid(&args.alphas),
    };
    if grid.is_empty() {
        bail!("the resolver grid is empty");
    }
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), &cfg)?;

    let mut data = Vec::new();
    for &seed in &cfg.seeds {
        let (prepared, classes) = load_prepared(&cfg.data, &cfg, None, seed)?;
        let probes = match classes {
            Some(c) if cfg.model.kind.is_mixture() => Some((cached_probes(&seed_dir(&cfg.out, seed), &prepared, c, seed)?, c)),
            _ => None,
        };
        data.push((seed, prepared, probes));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..data.len()).map(move |s| (g, s))).collect();
    let blocks = args.run.blocks.clone().unwrap_or_else(|| "li,eei,dei".into());
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = worker_count(jobs.len());
    log::info!("sweep: {} chains x {} seeds on {workers} workers", grid.len(), data.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(g, s)) = jobs.get(i) else { break };
                let chain = &grid[g];
                let (seed, prepared, probes) = &data[s];
                let row = sweep_job(&cfg, chain, &blocks, *seed, prepared, probes.as_ref());
                results.lock().expect("results lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = results.into_inner().expect("results lock").into_iter().flatten().collect();

    let mut w = csv::Writer::from_path(cfg.out.join("sweep_runs.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let candidates: Vec<Candidate> = grid
        .iter()
        .map(|c| Candidate {
            name: c.to_string(),
            metrics: rows
                .iter()
                .filter(|r| r.chain == c.to_string())
                .map(|r| r.val_metric.unwrap_or(f64::NAN))
                .collect(),
        })
        .collect();
    let mut w = csv::Writer::from_path(cfg.out.join("sweep_summary.csv"))?;
    w.write_record(["chain", "median", "mean", "std", "failures"])?;
    for c in &candidates {
        let s = summarize(&c.metrics);
        let failures = c.metrics.iter().filter(|m| !m.is_finite()).count();
        w.write_record([c.name.clone(), s.median.to_string(), s.mean.to_string(), s.std.to_string(), failures.to_string()])?;
    }
    w.flush()?;
    let best = select_best(&candidates).map(|i| candidates[i].name.clone()).unwrap_or_default();
    let mut w = csv::Writer::from_path(cfg.out.join("best.csv"))?;
    w.write_record(["dataset", "model", "loss", "selection", "chosen"])?;
    w.write_record([
        cfg.data.name(),
        cfg.model.kind.to_string(),
        cfg.model.loss.to_string(),
        cfg.selection.to_string(),
        best.clone(),
    ])?;
    w.flush()?;
    println!("best: {best}");
    Ok(())
}

fn sweep_job(
    cfg: &RunConfig,
    chain: &ResolverChain,
    blocks: &str,
    seed: u64,
    prepared: &Prepared,
    probes: Option<&(ProbeSet, usize)>,
) -> SweepRow {
    let name = chain.to_string();
    let result = (|| -> Result<_> {
        let mut model = cfg.model.clone();
        let blocks: BlockSet = if chain.is_identity() { BlockSet::none() } else { blocks.parse()? };
        model.impartiality = ImpartialityConfig {
            beta: model.impartiality.beta,
            ..ImpartialityConfig::uniform(blocks, chain.clone())
        };
        let probing = probes.map(|(p, c)| Probing { probes: p, classes: *c });
        Ok(run(prepared, model, &cfg.train_config(seed), cfg.selection, probing)?.1)
    })();
    match result {
        Ok(out) => SweepRow {
            chain: name,
            seed,
            status: "ok".into(),
            val_metric: out.train.best_metric,
            test_aggregate: out.report.reconstruction.as_ref().map(|r| r.aggregate),
            test_cross_coherence: out.report.coherence.as_ref().map(|c| c.cross_coherence()),
            seconds: Some(out.train.seconds),
        },
        Err(e) => {
            log::warn!("sweep: {name} seed {seed} failed: {e:#}");
            SweepRow {
                chain: name,
                seed,
                status: format!("failed: {e}"),
                val_metric: None,
                test_aggregate: None,
                test_cross_coherence: None,
                seconds: None,
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// A per-seed run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Rows to generate.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Mixture components of the latent GMM; defaults to n_train / 50.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

/// Fits a Gaussian mixture to the training latents, samples it and decodes
/// the likelihood modes back to raw units.
pub fn generate(args: &GenerateArgs) -> Result<()> {
    let (_, prepared, _, model) = open_run(&args.run, None)?;
    let z = model.latent_mean(&prepared.train)?;
    let k = args.components.unwrap_or_else(|| default_components(z.rows()));
    let gmm = Gmm::fit(&z, k, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let samples = gmm.sample(args.n, &mut rng);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let decoded = model.decode_modes(&samples, &prepared.train)?;
    let raw = prepared.schema.invert_all(&decoded);
    let modalities: Vec<_> = prepared.schema.modalities.iter().map(|m| m.modality.clone()).collect();
    let batch = ivae::data::Batch::new(raw, vec![None; modalities.len()], None)?;
    write_csv(&Dataset::new(modalities, batch)?, &args.out)?;
    log::info!("wrote {} rows from a {k}-component latent mixture", args.n);
    Ok(())
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// `synth:hetero` or `synth:trimodal`.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 5000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// Output CSV; a sidecar with the declared families is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Writes a synthetic dataset and its schema sidecar.
pub fn data(args: &DataArgs) -> Result<()> {
    let source = DataSource::parse(&args.data, None, args.n, args.classes, args.data_seed)?;
    if matches!(source, DataSource::Csv { .. }) {
        bail!("`data` writes synthetic datasets only");
    }
    let (dataset, _) = source.load(None, Default::default(), 0)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&dataset, &args.out)?;
    let mut columns = Vec::new();
    for m in &dataset.modalities {
        let classes = match m.spec.family {
            Family::Categorical { classes } => Some(classes),
            _ => None,
        };
        for j in 0..m.dim() {
            columns.push(ColumnSpec {
                name: if m.dim() == 1 { m.name.clone() } else { format!("{}_{j}", m.name) },
                family: Some(m.spec.family.name().to_string()),
                classes,
                ..ColumnSpec::default()
            });
        }
    }
    let sidecar = Sidecar {
        columns,
        label: dataset.data.labels.as_ref().map(|_| "label".to_string()),
    };
    write_json(&args.out.with_extension("json"), &sidecar)?;
    Ok(())
}
