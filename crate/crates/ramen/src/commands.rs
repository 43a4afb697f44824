//! The `gen`, `run`, `analyze`, and `verify` commands as library calls.

use std::fs;
use std::path::{Path, PathBuf};

use ramen_core::analysis::{evaluate, similarity_bins, EvalReport, MAX_PAIRS};
use ramen_core::datagen::{generate, StreamConfig};
use ramen_core::{RamenConfig, Sample};

use crate::bench::bench_cache;
use crate::error::{Error, Result};
use crate::io::{self, Dataset};
use crate::manifest::RunManifest;
use crate::method::{run_method, Method};
use crate::verify::{run_suite, Check, Suite};

fn config_error(path: Option<&Path>, e: ramen_core::Error) -> Error {
    Error::Config {
        path: path.map_or_else(|| PathBuf::from("<defaults>"), Path::to_path_buf),
        msg: e.to_string(),
    }
}

pub fn load_stream_config(path: Option<&Path>, seed: Option<u64>) -> Result<StreamConfig> {
    let mut cfg: StreamConfig = match path {
        Some(p) => io::read_json(p)?,
        None => StreamConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_error(path, e))?;
    Ok(cfg)
}

pub fn load_ramen_config(path: Option<&Path>, seed: Option<u64>) -> Result<RamenConfig> {
    let mut cfg: RamenConfig = match path {
        Some(p) => io::read_json(p)?,
        None => RamenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| config_error(path, e))?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Generates a synthetic dataset into `out`.
pub fn cmd_gen(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<RunManifest> {
    let cfg = load_stream_config(config, seed)?;
    let g = generate(&cfg)?;
    let metadata = Dataset::describe(&g.samples, &g.bank, Some(cfg.clone()));
    let data = Dataset {
        samples: g.samples,
        bank: g.bank,
        metadata,
    };
    let mut manifest = RunManifest::new("gen");
    if let Some(p) = config {
        manifest.add_input("config", p)?;
    }
    let written = io::write_dataset(out, &data)?;
    for (name, p) in ["dataset", "metadata", "bank"].into_iter().zip(&written) {
        manifest.add_output(name, p)?;
    }
    manifest.seed = Some(cfg.seed);
    manifest.stream_config = Some(cfg);
    io::write_json(&out.join(io::MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dataset: PathBuf,
    pub method: Method,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub renormalize: bool,
    /// Also time the cached engine against the recompute engine.
    pub timing: bool,
    /// Include embeddings and gradients in the memory snapshot.
    pub snapshot_full: bool,
}

fn bins_for(samples: &[Sample], seed: u64) -> Result<Option<Vec<f64>>> {
    let mut domains: Vec<&str> = samples.iter().filter_map(|s| s.domain_id.as_deref()).collect();
    domains.sort_unstable();
    domains.dedup();
    if domains.len() < 2 {
        return Ok(None);
    }
    Ok(Some(similarity_bins(samples, MAX_PAIRS, seed)?))
}

fn write_tables(out: &Path, report: &EvalReport, manifest: &mut RunManifest) -> Result<()> {
    let per_domain = out.join(io::PER_DOMAIN_FILE);
    let composition = out.join(io::COMPOSITION_FILE);
    let bins = out.join(io::BINS_FILE);
    io::write_per_domain_csv(&per_domain, report)?;
    io::write_composition_csv(&composition, report)?;
    io::write_bins_csv(&bins, report.same_domain_ratio_bins.as_deref())?;
    manifest.add_output("per_domain", &per_domain)?;
    manifest.add_output("composition", &composition)?;
    manifest.add_output("bins", &bins)
}

/// Runs one method over a dataset directory and writes the report files.
pub fn cmd_run(opts: &RunOptions) -> Result<EvalReport> {
    let data = io::load_dataset(&opts.dataset, opts.renormalize)?;
    let cfg = load_ramen_config(opts.config.as_deref(), opts.seed)?;
    let run = run_method(opts.method, &data.samples, &data.bank, &cfg)?;
    let mut report = evaluate(&run.outcomes, &data.samples)?;
    report.same_domain_ratio_bins = bins_for(&data.samples, cfg.seed)?;
    if opts.timing && opts.method.uses_memory() {
        let engine_cfg = opts.method.configure(&cfg);
        let warmup = (2 * data.bank.num_classes() * engine_cfg.capacity).min(data.samples.len() / 2);
        let bench = bench_cache(&data.samples, &data.bank, &engine_cfg, warmup, 1)?;
        report.timing = Some(bench.timing);
    }

    create_dir(&opts.out)?;
    let mut manifest = RunManifest::new("run");
    manifest.method = Some(opts.method);
    manifest.seed = Some(cfg.seed);
    manifest.renormalize = opts.renormalize;
    manifest.dataset_dir = Some(opts.dataset.display().to_string());
    manifest.stream_config = data.metadata.stream_config.clone();
    for (name, file) in [
        ("dataset", io::DATASET_FILE),
        ("metadata", io::METADATA_FILE),
        ("bank", io::BANK_FILE),
    ] {
        manifest.add_input(name, &opts.dataset.join(file))?;
    }
    if let Some(p) = &opts.config {
        manifest.add_input("config", p)?;
    }
    manifest.ramen_config = Some(cfg);

    let report_path = opts.out.join(io::REPORT_FILE);
    io::write_json(&report_path, &report)?;
    manifest.add_output("report", &report_path)?;
    write_tables(&opts.out, &report, &mut manifest)?;
    let outcomes = opts.out.join(io::OUTCOMES_FILE);
    io::write_outcomes(&outcomes, &run.outcomes)?;
    manifest.add_output("outcomes", &outcomes)?;
    if let Some(engine) = &run.engine {
        let snap = opts.out.join(io::MEMORY_FILE);
        io::write_snapshot(&snap, engine.memory(), opts.snapshot_full)?;
        manifest.add_output("memory", &snap)?;
    }
    io::write_json(&opts.out.join(io::MANIFEST_FILE), &manifest)?;
    Ok(report)
}

/// Recomputes the report tables of a finished run from its outcome trace.
///
/// The dataset defaults to the one recorded in the run manifest.
pub fn cmd_analyze(
    run_dir: &Path,
    dataset: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<EvalReport> {
    let run_manifest: RunManifest = io::read_json(&run_dir.join(io::MANIFEST_FILE))?;
    let dataset: PathBuf = match (dataset, &run_manifest.dataset_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => {
            return Err(Error::Usage(
                "run manifest names no dataset; pass --dataset".into(),
            ))
        }
    };
    let data = io::load_dataset(&dataset, run_manifest.renormalize)?;
    let outcomes_path = run_dir.join(io::OUTCOMES_FILE);
    let outcomes = io::read_outcomes(&outcomes_path)?;
    let mut report = evaluate(&outcomes, &data.samples)?;
    let seed = seed.or(run_manifest.seed).unwrap_or(0);
    report.same_domain_ratio_bins = bins_for(&data.samples, seed)?;

    let out = out.unwrap_or(run_dir);
    create_dir(out)?;
    let mut manifest = RunManifest::new("analyze");
    manifest.seed = Some(seed);
    manifest.dataset_dir = Some(dataset.display().to_string());
    manifest.add_input("outcomes", &outcomes_path)?;
    manifest.add_input("dataset", &dataset.join(io::DATASET_FILE))?;
    write_tables(out, &report, &mut manifest)?;
    io::write_json(&out.join("analyze_manifest.json"), &manifest)?;
    Ok(report)
}

/// Runs the selected checks and optionally writes them to `out/verify.json`.
/// Returns the checks; callers decide how to report failures.
pub fn cmd_verify(suite: Suite, out: Option<&Path>) -> Result<Vec<Check>> {
    let checks = run_suite(suite)?;
    if let Some(dir) = out {
        create_dir(dir)?;
        io::write_json(&dir.join("verify.json"), &checks)?;
    }
    Ok(checks)
}
