//! Experiment execution for each config kind.

use crate::config::{DataSource, ExperimentConfig, HypercleanTaskConfig, SolverConfig, TaskConfig, ToyTask};
use crate::output::{self, config_hash, Manifest};
use anyhow::{bail, Context, Result};
use bilevel_kfac::bilevel::{outer_loop, BilevelTask, OuterRun};
use bilevel_kfac::nn::{Activation, Network};
use bilevel_kfac::rng::stream;
use bilevel_kfac::tasks::{
    diagnostic_study, gen_synthetic_classification, load_dataset, make_hyperclean_task, roc_auc, save_dataset, summarize,
    HypercleanDataset, HypercleanTask, QuadraticTask, SyntheticConfig,
};
use bilevel_kfac::{Mat, Vector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

/// What a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    /// Set when the run stopped early; outputs up to that point are kept.
    pub error: Option<String>,
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("[bilevel-kfac] {}", msg.as_ref());
    }
}

struct Collected {
    files: Vec<PathBuf>,
    results: BTreeMap<String, f64>,
    seeds: BTreeMap<String, u64>,
    warnings: Vec<String>,
    error: Option<String>,
}

impl Collected {
    fn new(seed: u64) -> Self {
        Self {
            files: Vec::new(),
            results: BTreeMap::new(),
            seeds: BTreeMap::from([("base".to_string(), seed)]),
            warnings: Vec::new(),
            error: None,
        }
    }
}

/// Execute a configuration, writing every artifact under `cfg.out_dir`.
type SweepCell = (String, Option<usize>, u64, Collected);

pub fn run(cfg: &ExperimentConfig, quiet: bool) -> Result<RunOutcome> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    let started = output::unix_seconds();
    let mut col = Collected::new(cfg.seed);
    progress(
        quiet,
        format!("{} run, seed {}, writing to {}", cfg.kind.name(), cfg.seed, dir.display()),
    );
    match &cfg.parsed_task {
        TaskConfig::Diagnostic(t) => {
            let study = t.study_config(cfg.seed);
            for (i, s) in study.seeds.iter().enumerate() {
                col.seeds.insert(format!("cell{i}"), *s);
            }
            let records = diagnostic_study(&study).context("diagnostic study")?;
            let path = dir.join("summary.csv");
            output::write_summary(&path, &records)?;
            col.files.push(path);
            let rows: Vec<Vec<String>> = summarize(&records)
                .into_iter()
                .map(|s| {
                    progress(
                        quiet,
                        format!("{:<12} d={:<4} mean error {:.3e}", s.method, s.d, s.mean_error),
                    );
                    col.results.insert(format!("mean_error/{}/d{}", s.method, s.d), s.mean_error);
                    vec![s.method, s.d.to_string(), s.mean_error.to_string(), s.seeds.to_string()]
                })
                .collect();
            let path = dir.join("summary_mean.csv");
            output::write_table(&path, &["method", "d", "mean_rel_error", "seeds"], &rows)?;
            col.files.push(path);
        }
        TaskConfig::Hyperclean(t) => {
            let ds = build_dataset(t, cfg.seed)?;
            col.seeds.insert("dataset".into(), cfg.seed);
            if let Some(p) = &t.save_dataset {
                save_dataset(p, &ds).with_context(|| format!("saving dataset to {}", p.display()))?;
            }
            let res = hyperclean_run(t, &cfg.solver, cfg, ds, cfg.seed, t.batch_size, &dir, "", quiet)?;
            col.absorb(res);
        }
        TaskConfig::ToyQuadratic(t) => {
            let task = toy_task(t, cfg.seed)?;
            let lambda0 = Vector::from_element(task.c.ncols(), t.lambda0);
            let theta0 = Vector::zeros(task.p.nrows());
            let loop_cfg = cfg.outer.loop_config(&cfg.solver, None, cfg.seed);
            let run = outer_loop(&task, &lambda0, &theta0, &loop_cfg, |r, _| {
                progress(
                    quiet,
                    format!(
                        "outer {:>4}  J_out {:.6e}  |grad| {:.3e}",
                        r.outer_iter, r.outer_loss, r.hypergrad_norm
                    ),
                );
                ControlFlow::Continue(())
            })?;
            let path = dir.join("history.csv");
            output::write_history(&path, &run.history)?;
            col.files.push(path);
            let opt = task.solve_inner(&run.lambda)?;
            col.results.insert("final_lambda_norm".into(), run.lambda.norm());
            col.results
                .insert("final_outer_loss".into(), 0.5 * (&opt - &task.target).norm_squared());
            let path = dir.join("lambda.csv");
            let rows: Vec<Vec<String>> = run
                .lambda
                .iter()
                .enumerate()
                .map(|(i, v)| vec![i.to_string(), v.to_string()])
                .collect();
            output::write_table(&path, &["index", "lambda"], &rows)?;
            col.files.push(path);
            col.error = run.error.map(|e| e.to_string());
        }
        TaskConfig::BatchSweep(t) => {
            let ds = build_dataset(&t.hyperclean, cfg.seed)?;
            col.seeds.insert("dataset".into(), cfg.seed);
            let mut cells = Vec::new();
            for s in &t.solvers {
                for &b in &t.batch_sizes {
                    for i in 0..t.num_seeds as u64 {
                        cells.push((s.clone(), b, cfg.seed.wrapping_add(i)));
                    }
                }
            }
            let results: Vec<Result<SweepCell>> = cells
                .par_iter()
                .map(|(s, b, seed)| {
                    let tag = format!("{}_{}_{}", s.label(), b.map_or("full".to_string(), |b| b.to_string()), seed);
                    let c = hyperclean_run(&t.hyperclean, s, cfg, ds.clone(), *seed, *b, &dir, &tag, true)?;
                    progress(quiet, format!("sweep cell {tag} done"));
                    Ok((s.label(), *b, *seed, c))
                })
                .collect();
            let mut rows = Vec::new();
            for r in results {
                let (label, b, seed, c) = r?;
                let get = |k: &str| c.results.get(k).map(|v| v.to_string()).unwrap_or_default();
                rows.push(vec![
                    label.clone(),
                    b.map(|b| b.to_string()).unwrap_or_else(|| "full".into()),
                    seed.to_string(),
                    get("final_test_loss"),
                    get("min_test_loss"),
                    get("roc_auc"),
                    get("final_test_accuracy"),
                ]);
                col.files.extend(c.files);
                col.warnings.extend(c.warnings);
                if let Some(e) = c.error {
                    col.warnings.push(format!("{label} seed {seed}: {e}"));
                }
            }
            let path = dir.join("sweep.csv");
            output::write_table(
                &path,
                &[
                    "solver",
                    "batch_size",
                    "seed",
                    "final_test_loss",
                    "min_test_loss",
                    "roc_auc",
                    "final_test_accuracy",
                ],
                &rows,
            )?;
            col.files.push(path);
        }
    }
    let effective = cfg.effective_json();
    let manifest = Manifest {
        tool: "bilevel-kfac".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        format_version: crate::config::FORMAT_VERSION,
        kind: cfg.kind.name().into(),
        config_hash: config_hash(&effective),
        config: effective,
        seeds: col.seeds,
        started_unix: started,
        finished_unix: output::unix_seconds(),
        files: col
            .files
            .iter()
            .map(|f| f.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or_else(|_| f.clone()))
            .collect(),
        results: col.results,
        warnings: col.warnings,
    };
    manifest.write(&dir)?;
    if let Some(e) = &col.error {
        progress(quiet, format!("run stopped early: {e}"));
    }
    progress(quiet, format!("done, manifest at {}", dir.join("manifest.json").display()));
    Ok(RunOutcome {
        out_dir: dir,
        manifest,
        error: col.error,
    })
}

impl Collected {
    fn absorb(&mut self, other: Collected) {
        self.files.extend(other.files);
        self.results.extend(other.results);
        self.seeds.extend(other.seeds);
        self.warnings.extend(other.warnings);
        self.error = self.error.take().or(other.error);
    }
}

pub fn build_dataset(t: &HypercleanTaskConfig, seed: u64) -> Result<HypercleanDataset> {
    let sizes = (t.n_train, t.n_val, t.n_test);
    let ds = match t.source {
        DataSource::Synthetic => gen_synthetic_classification(&SyntheticConfig {
            n_train: t.n_train,
            n_val: t.n_val,
            n_test: t.n_test,
            classes: t.classes,
            input_dim: t.input_dim,
            separation: t.separation,
            noise_ratio: t.noise_ratio,
            seed,
        })?,
        DataSource::Idx => {
            let (img, lab) = (
                t.idx_images.as_ref().expect("validated"),
                t.idx_labels.as_ref().expect("validated"),
            );
            let data = crate::idx::load_idx(img, lab)?;
            if let Some(&bad) = data.labels.iter().find(|&&l| l >= t.classes) {
                bail!("label {bad} in {} is out of range for classes = {}", lab.display(), t.classes);
            }
            HypercleanDataset::from_examples(&data, t.classes, sizes, t.noise_ratio, seed)?
        }
        DataSource::Tensor => {
            let p = t.tensor_path.as_ref().expect("validated");
            load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?
        }
    };
    Ok(if t.bias { ds.with_bias() } else { ds })
}

pub fn build_network(t: &HypercleanTaskConfig, input_dim: usize, classes: usize, seed: u64) -> Result<(Network, Vector)> {
    let mut widths = vec![input_dim];
    widths.extend(&t.hidden);
    widths.push(classes);
    let mut acts = vec![t.activation; t.hidden.len()];
    acts.push(Activation::Identity);
    let net = if t.hidden.is_empty() {
        Network::zeros(&widths, &acts)?
    } else {
        Network::random(&widths, &acts, &mut stream(seed, "init"))?
    };
    let theta0 = net.flatten_params();
    Ok((net, theta0))
}

#[allow(clippy::too_many_arguments)]
fn hyperclean_run(
    t: &HypercleanTaskConfig,
    solver: &SolverConfig,
    cfg: &ExperimentConfig,
    ds: HypercleanDataset,
    seed: u64,
    batch_size: Option<usize>,
    dir: &Path,
    tag: &str,
    quiet: bool,
) -> Result<Collected> {
    let mut col = Collected::new(seed);
    let (net, theta0) = build_network(t, ds.input_dim(), ds.classes, seed)?;
    let task = make_hyperclean_task(ds, net, t.alpha)?;
    let lambda0 = Vector::from_element(task.data.train.len(), t.init_lambda);
    let mut loop_cfg = cfg.outer.loop_config(solver, batch_size, seed);
    loop_cfg.freeze_outer = t.baseline;
    col.seeds.insert(
        format!("outer{}", if tag.is_empty() { String::new() } else { format!("/{tag}") }),
        seed,
    );
    let run = outer_loop(&task, &lambda0, &theta0, &loop_cfg, |r, _| {
        if r.outer_iter % 10 == 0 {
            progress(
                quiet,
                format!(
                    "outer {:>4}  val {:.5}  test {:.5}  |grad| {:.3e}",
                    r.outer_iter,
                    r.outer_loss,
                    r.test_metric.unwrap_or(f64::NAN),
                    r.hypergrad_norm
                ),
            );
        }
        ControlFlow::Continue(())
    })?;
    let suffix = if tag.is_empty() { String::new() } else { format!("_{tag}") };
    let path = dir.join(format!("history{suffix}.csv"));
    output::write_history(&path, &run.history)?;
    col.files.push(path);
    let path = dir.join(format!("weights{suffix}.csv"));
    let rows: Vec<Vec<String>> = (0..task.data.train.len())
        .map(|i| {
            vec![
                i.to_string(),
                run.lambda[i].to_string(),
                (task.data.corrupted[i] as u8).to_string(),
                task.data.train.labels[i].to_string(),
            ]
        })
        .collect();
    output::write_table(&path, &["index", "lambda", "corrupted", "label"], &rows)?;
    col.files.push(path);
    hyperclean_results(&task, &run, &mut col)?;
    Ok(col)
}

fn hyperclean_results(task: &HypercleanTask, run: &OuterRun, col: &mut Collected) -> Result<()> {
    col.results.insert("final_test_loss".into(), task.test_loss(&run.theta)?);
    col.results
        .insert("final_test_accuracy".into(), task.test_accuracy(&run.theta)?);
    col.results
        .insert("final_val_loss".into(), task.outer_eval(&run.lambda, &run.theta)?.value);
    let min = run.history.iter().filter_map(|r| r.test_metric).fold(f64::INFINITY, f64::min);
    if min.is_finite() {
        col.results.insert("min_test_loss".into(), min);
    }
    col.results.insert("outer_iters_done".into(), run.history.len() as f64);
    if task.data.num_corrupted() > 0 && task.data.num_corrupted() < task.data.train.len() {
        let scores: Vec<f64> = run.lambda.iter().map(|l| 1.0 - l).collect();
        col.results.insert("roc_auc".into(), roc_auc(&scores, &task.data.corrupted)?);
    }
    for r in &run.history {
        for w in &r.warnings {
            col.warnings.push(format!("outer {}: {w}", r.outer_iter));
        }
    }
    col.error = run.error.as_ref().map(|e| e.to_string());
    Ok(())
}

/// Scalar toy for `d = 1`, otherwise a random quadratic with `cond(P)` set
/// by `condition`.
pub fn toy_task(t: &ToyTask, seed: u64) -> Result<QuadraticTask> {
    if t.d == 1 {
        return Ok(QuadraticTask::toy());
    }
    let mut rng = stream(seed, "toy");
    let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
    let raw = Mat::from_fn(t.d, t.d, |_, _| g());
    let q = raw.qr().q();
    let evals = Vector::from_fn(t.d, |i, _| t.condition.powf(i as f64 / (t.d - 1) as f64));
    let p = &q * Mat::from_diagonal(&evals) * q.transpose();
    let p = (&p + p.transpose()) * 0.5;
    let c = Mat::from_fn(t.d, t.m, |_, _| g());
    let target = Vector::from_fn(t.d, |_, _| g());
    Ok(QuadraticTask::new(p, c, target)?)
}
