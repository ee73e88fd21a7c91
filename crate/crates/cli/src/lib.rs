//! Reproducible runs over generated datasets: data generation, threshold
//! fitting, training, forecasting, evaluation and curve tours.

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hydroscan::curves::{tour, CurveKind};
use hydroscan::data::{generate_dataset, Dataset, Splits};
use hydroscan::evaluation::{
    climatology_forecasts, climatology_table, evaluate, fit_thresholds, model_forecasts, observed, persistence_forecasts,
    Forecasts,
};
use hydroscan::hydrology::FloodThresholds;
use hydroscan::metrics::{MetricReport, F1_RETURN_PERIODS};
use hydroscan::model::{sidecar_path, Model, ModelOrders};
use hydroscan::training::{fit, InputNorm, Prepared};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hydroscan", version, about = "River discharge forecasting on generated river networks")]
pub struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical outputs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory for all artifacts.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and write a dataset container.
    GenData {
        /// Overrides `data.points`.
        #[arg(long)]
        points: Option<usize>,
        /// Overrides `data.days`.
        #[arg(long)]
        days: Option<usize>,
    },
    /// Fit flood thresholds and write them as CSV.
    FitThresholds,
    /// Train a model; writes the checkpoint, normalization statistics and loss trace.
    Train,
    /// Write per-point discharge forecasts with severity ranks.
    Forecast {
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
    },
    /// Score the model and both baselines on the validation and test splits.
    Evaluate {
        /// Score the observed targets in place of the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Write the tour of a curve over a full rectangle.
    Curve {
        #[arg(long)]
        kind: CurveKind,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
    },
}

/// Files written by the current command, deleted again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    done: bool,
}

impl Outputs {
    fn claim(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.done {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    eprintln!("# resolved config\n{}", cfg.to_toml()?);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build()?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let mut outputs = Outputs::default();
    pool.install(|| execute(cli, &cfg, &mut outputs))?;
    outputs.done = true;
    Ok(())
}

fn execute(cli: &Cli, cfg: &RunConfig, outputs: &mut Outputs) -> anyhow::Result<()> {
    let paths = cfg.paths.resolve(&cli.out);
    match &cli.command {
        Command::GenData { points, days } => {
            let points = points.unwrap_or(cfg.data.points);
            let days = days.unwrap_or(cfg.data.days);
            let data = generate_dataset(cfg.seed, points, days, cfg.data.sample)?;
            data.save(&outputs.claim(paths.dataset.clone()))?;
            eprintln!("wrote {} points x {} days to {}", data.n_points(), data.sim.days, paths.dataset.display());
        }
        Command::FitThresholds => {
            let data = load_dataset(&paths.dataset)?;
            let splits = splits(cfg, &data)?;
            let th = fit_thresholds(&data, record_end(cfg, &data, &splits))?;
            let mut w = create(&outputs.claim(paths.thresholds.clone()))?;
            th.write_csv(&mut w)?;
            w.flush()?;
        }
        Command::Train => train(cfg, &paths, outputs)?,
        Command::Forecast { split } => forecast(cfg, &paths, *split, outputs)?,
        Command::Evaluate { oracle } => evaluate_all(cfg, &paths, &cli.out, *oracle, outputs)?,
        Command::Curve { kind, width, height } => {
            if *width == 0 || *height == 0 {
                bail!("curve rectangle must be non-empty");
            }
            let path = outputs.claim(cli.out.join(format!("curve_{kind}_{width}x{height}.csv")));
            let mut w = csv::Writer::from_writer(create(&path)?);
            w.write_record(["step", "x", "y"])?;
            for (i, (x, y)) in tour(*kind, *width, *height).into_iter().enumerate() {
                w.write_record([i.to_string(), x.to_string(), y.to_string()])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_thresholds(path: &Path) -> anyhow::Result<FloodThresholds> {
    let f = File::open(path).with_context(|| format!("opening thresholds {}", path.display()))?;
    Ok(FloodThresholds::read_csv(std::io::BufReader::new(f))?)
}

fn splits(cfg: &RunConfig, data: &Dataset) -> anyhow::Result<Splits> {
    let s = &cfg.split;
    Ok(match (s.val_start, s.test_start) {
        (Some(v), Some(t)) => data.split_by_dates(v, t)?,
        _ => data.split(s.train_fraction, s.val_fraction)?,
    })
}

/// Exclusive end day of the discharge record covered by training targets.
fn train_end(data: &Dataset, splits: &Splits) -> usize {
    splits.train.last().map_or(0, |&d| d + data.spec().lead_times + 1)
}

/// Exclusive end day of the record the thresholds are fitted on.
fn record_end(cfg: &RunConfig, data: &Dataset, splits: &Splits) -> usize {
    match cfg.thresholds.record {
        config::RecordSpan::Full => data.sim.days,
        config::RecordSpan::Train => train_end(data, splits),
    }
}

fn check_points(data: &Dataset, th: &FloodThresholds) -> anyhow::Result<()> {
    let ids = data.points.points().iter().map(|p| p.id);
    if th.points.len() != data.n_points() || !ids.zip(&th.points).all(|(a, b)| a == b.point_id) {
        bail!("thresholds were fitted on a different point set");
    }
    Ok(())
}

fn train(cfg: &RunConfig, paths: &config::Paths, outputs: &mut Outputs) -> anyhow::Result<()> {
    let data = load_dataset(&paths.dataset)?;
    let th = load_thresholds(&paths.thresholds)?;
    check_points(&data, &th)?;
    let splits = splits(cfg, &data)?;
    let norm = InputNorm::compute(&data, &splits.train)?;
    let prep = Prepared::new(&data, norm, cfg.loss.clone(), &th, cfg.model.positional_encoding)?;
    let orders = ModelOrders::build(&data.points, &cfg.model)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let val: Vec<usize> = splits.val.iter().step_by(cfg.split.val_stride).copied().collect();
    let report = fit(&mut model, &prep, &splits.train, &val, &orders, &cfg.train, cfg.seed, |r| {
        let val = r.val_loss.map_or(String::new(), |v| format!(" val {v:.5}"));
        eprintln!("epoch {} step {} lr {:.2e} train {:.5}{val}", r.epoch, r.step, r.lr, r.train_loss);
    })?;
    let ckpt = outputs.claim(paths.checkpoint.clone());
    outputs.claim(sidecar_path(&ckpt));
    model.save(&ckpt)?;
    prep.norm.save(&outputs.claim(paths.norm.clone()))?;
    let mut w = create(&outputs.claim(paths.trace.clone()))?;
    report.write_trace(&mut w)?;
    w.flush()?;
    eprintln!(
        "best epoch {}; training loss {:.5} -> {:.5}",
        report.best_epoch, report.initial_train_loss, report.final_train_loss
    );
    Ok(())
}

fn load_model(paths: &config::Paths, data: &Dataset) -> anyhow::Result<(Model, InputNorm)> {
    let model = Model::load(&paths.checkpoint).with_context(|| format!("loading checkpoint {}", paths.checkpoint.display()))?;
    if model.config.hindcast_steps != data.spec().hindcast_steps || model.config.lead_times != data.spec().lead_times {
        bail!("checkpoint windows do not match the dataset");
    }
    let norm = InputNorm::load(&paths.norm).with_context(|| format!("loading {}", paths.norm.display()))?;
    Ok((model, norm))
}

fn forecast(cfg: &RunConfig, paths: &config::Paths, split: SplitName, outputs: &mut Outputs) -> anyhow::Result<()> {
    let data = load_dataset(&paths.dataset)?;
    let th = load_thresholds(&paths.thresholds)?;
    check_points(&data, &th)?;
    let (model, norm) = load_model(paths, &data)?;
    let splits = splits(cfg, &data)?;
    let days = match split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    if days.is_empty() {
        bail!("the {split:?} split has no issuance dates");
    }
    let prep = Prepared::new(&data, norm, cfg.loss.clone(), &th, model.config.positional_encoding)?;
    let orders = ModelOrders::build(&data.points, &model.config)?;
    let fc = model_forecasts(&model, &prep, days, &orders)?;
    let mut w = csv::Writer::from_writer(create(&outputs.claim(paths.forecast.clone()))?);
    w.write_record(["point_id", "issuance", "lead", "discharge", "severity_rp"])?;
    for (k, &d) in fc.days.iter().enumerate() {
        let date = data.sim.date(d).to_string();
        for (p, pt) in data.points.points().iter().enumerate() {
            for l in 0..fc.leads() {
                let x = fc.values[k].get(&[l, p]);
                w.write_record([pt.id.to_string(), date.clone(), (l + 1).to_string(), x.to_string(), th.severity(p, x).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn evaluate_all(cfg: &RunConfig, paths: &config::Paths, out: &Path, oracle: bool, outputs: &mut Outputs) -> anyhow::Result<()> {
    let data = load_dataset(&paths.dataset)?;
    let th = load_thresholds(&paths.thresholds)?;
    check_points(&data, &th)?;
    let splits = splits(cfg, &data)?;
    let ids: Vec<u64> = data.points.points().iter().map(|p| p.id).collect();
    let table = climatology_table(&data, train_end(&data, &splits))?;
    let model = if oracle { None } else { Some(load_model(paths, &data)?) };

    let name = if oracle { "oracle" } else { "model" };
    let names = ["climatology", "persistence", name];
    let mut rows: Vec<(String, Vec<(String, MetricReport)>)> = names.iter().map(|n| (n.to_string(), Vec::new())).collect();
    for (split, days) in [("val", &splits.val), ("test", &splits.test)] {
        if days.is_empty() {
            continue;
        }
        let obs = observed(&data, days)?;
        let pred: Vec<Forecasts> = vec![
            climatology_forecasts(&data, &table, days, cfg.evaluate.climatology)?,
            persistence_forecasts(&data, days)?,
            match &model {
                None => obs.clone(),
                Some((m, norm)) => {
                    let prep = Prepared::new(&data, norm.clone(), cfg.loss.clone(), &th, m.config.positional_encoding)?;
                    model_forecasts(m, &prep, days, &ModelOrders::build(&data.points, &m.config)?)?
                }
            },
        ];
        for (k, f) in pred.iter().enumerate() {
            let report = evaluate(&obs, f, &ids, &th)?;
            let path = outputs.claim(out.join(format!("metrics_{}_{split}.csv", names[k])));
            write_metrics(&path, &report)?;
            rows[k].1.push((split.to_string(), report));
        }
    }

    let summary = summary_table(&rows)?;
    let mut w = create(&outputs.claim(out.join("summary.txt")))?;
    w.write_all(summary.as_bytes())?;
    w.flush()?;
    print!("{summary}");

    let mut w = csv::Writer::from_writer(create(&outputs.claim(out.join("summary_by_lead.csv")))?);
    w.write_record(["forecaster", "split", "lead", "r2_mean", "r2_median", "kge_mean", "kge_median", "f1_mean"])?;
    for (name, reports) in &rows {
        for (split, rep) in reports {
            for lead in rep.leads() {
                let a = rep.aggregate(Some(lead))?;
                w.write_record([
                    name.clone(),
                    split.clone(),
                    lead.to_string(),
                    a.r2.mean.to_string(),
                    a.r2.median.to_string(),
                    a.kge.mean.to_string(),
                    a.kge.median.to_string(),
                    a.f1.map_or(String::new(), |s| s.mean.to_string()),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_metrics(path: &Path, report: &MetricReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = ["point_id", "lead", "mae", "rmse", "r", "r2", "kge"].map(String::from).to_vec();
    for rp in F1_RETURN_PERIODS {
        header.extend(["precision", "recall", "f1"].map(|m| format!("{m}_{rp}")));
    }
    w.write_record(&header)?;
    for e in &report.entries {
        let c = &e.continuous;
        let mut rec = vec![
            e.point_id.to_string(),
            e.lead.to_string(),
            c.mae.to_string(),
            c.rmse.to_string(),
            opt(c.r),
            opt(c.r2),
            opt(c.kge),
        ];
        for rp in F1_RETURN_PERIODS {
            let m = e.events.iter().find(|(r, _)| *r == rp).map(|(_, m)| *m);
            rec.extend([opt(m.and_then(|m| m.precision)), opt(m.and_then(|m| m.recall)), opt(m.and_then(|m| m.f1))]);
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Forecasters as rows; R2, KGE and F1 per split as columns, means over points and leads, times 100.
fn summary_table(rows: &[(String, Vec<(String, MetricReport)>)]) -> anyhow::Result<String> {
    let splits: Vec<&str> = rows.first().map_or(Vec::new(), |r| r.1.iter().map(|(s, _)| s.as_str()).collect());
    let mut out = format!("{:<12}", "forecaster");
    for s in &splits {
        out += &format!(" | {:>7} {:>7} {:>7}", format!("{s} R2"), "KGE", "F1");
    }
    out.push('\n');
    for (name, reports) in rows {
        out += &format!("{name:<12}");
        for (_, rep) in reports {
            let a = rep.aggregate(None)?;
            let f1 = a.f1.map_or("--".to_string(), |s| format!("{:.2}", 100.0 * s.mean));
            out += &format!(" | {:>7.2} {:>7.2} {:>7}", 100.0 * a.r2.mean, 100.0 * a.kge.mean, f1);
        }
        out.push('\n');
    }
    Ok(out)
}
