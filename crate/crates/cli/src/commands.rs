use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fedsim_core::config::ExperimentConfig;
use fedsim_core::orchestrator::Simulation;
use rayon::prelude::*;
use serde::Serialize;

use crate::config_file::{apply_preset, parse_config};
use crate::error::{CliError, CliResult};
use crate::metrics::MetricsTable;
use crate::svg::{emit_svg, Series};

/// Window of the "final accuracy" summary.
pub const FINAL_WINDOW: usize = 10;

#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub policy: Option<String>,
    pub force: bool,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct CompareArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub policies: Vec<String>,
    /// Falls back to the config's seed when empty.
    pub seeds: Vec<u64>,
    pub force: bool,
    pub threads: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub config: &'a ExperimentConfig,
    pub out_dir: &'a Path,
    /// SHA-256 of the resolved configuration.
    pub config_digest: String,
    pub created_unix: u64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub policies: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
}

impl<'a> RunManifest<'a> {
    fn new(config: &'a ExperimentConfig, out_dir: &'a Path) -> Self {
        RunManifest {
            config,
            out_dir,
            config_digest: config.digest_hex(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            policies: Vec::new(),
            seeds: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// `--threads`, else `FEDSIM_THREADS`, else rayon's default.
pub fn resolve_threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("FEDSIM_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("FEDSIM_THREADS=`{v}` is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolve_threads(threads)? {
        if n == 0 {
            return Err(CliError::Usage("thread count must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn prepare_out_dir(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

fn load(config: &Path, seed: Option<u64>, policy: Option<&str>) -> CliResult<ExperimentConfig> {
    let mut cfg = parse_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = policy {
        apply_preset(&mut cfg, p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one experiment and writes `metrics.csv`, `manifest.json` and
/// `checkpoint.bin` into `args.out`.
pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let cfg = load(&args.config, args.seed, args.policy.as_deref())?;
    prepare_out_dir(&args.out, args.force)?;
    let (records, checkpoint) = with_pool(args.threads, || {
        let mut sim = Simulation::new(cfg.clone())?;
        let records = sim.run_to_end()?;
        Ok::<_, fedsim_core::Error>((records, sim.checkpoint()))
    })??;
    let table = MetricsTable::new(cfg.strategy_label(), cfg.seed, cfg.data.num_nodes, records);
    table.write_to(&args.out.join("metrics.csv"))?;
    RunManifest::new(&cfg, &args.out).write(&args.out.join("manifest.json"))?;
    checkpoint.write(&args.out.join("checkpoint.bin"))?;
    Ok(())
}

/// Runs every (policy, seed) cell on paired seeds and writes one CSV per
/// cell, `summary.csv` and `test_acc.svg` / `train_loss.svg`.
pub fn cmd_compare(args: &CompareArgs) -> CliResult<()> {
    let mut policies: Vec<String> = Vec::new();
    for p in &args.policies {
        if !policies.contains(p) {
            policies.push(p.clone());
        }
    }
    if policies.len() < 2 {
        return Err(CliError::Usage("compare needs at least two distinct policies".into()));
    }
    let base = load(&args.config, None, None)?;
    let seeds = if args.seeds.is_empty() {
        vec![base.seed]
    } else {
        args.seeds.clone()
    };
    let mut cells = Vec::new();
    for p in &policies {
        for &s in &seeds {
            let mut cfg = base.clone();
            cfg.seed = s;
            apply_preset(&mut cfg, p)?;
            cfg.validate()?;
            cells.push((p.clone(), cfg));
        }
    }
    prepare_out_dir(&args.out, args.force)?;

    let tables = with_pool(args.threads, || {
        cells
            .par_iter()
            .map(|(p, cfg)| {
                let records = fedsim_core::orchestrator::run_experiment(cfg)?;
                Ok(MetricsTable::new(p.clone(), cfg.seed, cfg.data.num_nodes, records))
            })
            .collect::<CliResult<Vec<_>>>()
    })??;

    let summary_path = args.out.join("summary.csv");
    let file = std::fs::File::create(&summary_path).map_err(|e| CliError::io(&summary_path, e))?;
    let mut summary = csv::Writer::from_writer(file);
    summary.write_record(["policy", "seed", "final_test_acc", "final_train_loss"])?;
    for t in &tables {
        t.write_to(&args.out.join(format!("{}_seed{}.csv", t.policy, t.seed)))?;
        let last = t.rows.last().map(|r| r.train_loss).unwrap_or(f64::NAN);
        summary.write_record([
            t.policy.clone(),
            t.seed.to_string(),
            t.final_accuracy(FINAL_WINDOW).to_string(),
            last.to_string(),
        ])?;
    }
    summary.flush().map_err(|e| CliError::io(&summary_path, e))?;

    let series: Vec<Series> = policies
        .iter()
        .map(|p| Series {
            label: p.clone(),
            tables: tables.iter().filter(|t| &t.policy == p).collect(),
        })
        .collect();
    for metric in ["test_acc", "train_loss"] {
        emit_svg(&series, metric, &args.out.join(format!("{metric}.svg")))?;
    }

    let mut manifest = RunManifest::new(&base, &args.out);
    manifest.policies = policies;
    manifest.seeds = seeds;
    manifest.write(&args.out.join("manifest.json"))
}
