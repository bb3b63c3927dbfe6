//! File-level experiment steps behind the command-line runner.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::continual::{
    pretrain_base_lm, run_continual, run_two_task, RunStore, SequenceMode,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_dataset, read_report_csv, render4, serialize_report, EvalResult, ForgettingMatrix, ModelPredictor,
    ReportRow, RunManifest,
};
use crate::mitigation::RankSpec;
use crate::scalar::Scalar;
use crate::synthdata::io::{read_bundle, read_manifest, write_bundle, DataManifest};
use crate::synthdata::{DataBundle, TaskKind};
use crate::training::MetricsLog;

fn remove_if(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
        }
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path.display().to_string(), e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
}

/// Materializes every dataset plus the manifest under `<out>/data`.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<DataManifest> {
    let dir = cfg.data_dir();
    remove_if(&dir, force)?;
    let bundle = DataBundle::generate(&cfg.data, cfg.seeds.data)?;
    write_bundle(&dir, &bundle)
}

/// Loads the dataset directory, generating it first when absent. A
/// manifest from another configuration is refused.
pub fn load_data(cfg: &RunConfig) -> Result<DataBundle> {
    let dir = cfg.data_dir();
    if !dir.join(crate::synthdata::io::MANIFEST_FILE).exists() {
        gen_data(cfg, false)?;
    }
    let manifest = read_manifest(&dir)?;
    if manifest.config_hash != cfg.data_hash() {
        return Err(Error::Provenance(format!(
            "dataset manifest {} does not match config data hash {}",
            manifest.config_hash,
            cfg.data_hash()
        )));
    }
    read_bundle(&dir)
}

/// Written next to the base checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub base_hash: String,
    pub data_hash: String,
    pub steps: usize,
    pub nl: Vec<EvalResult>,
    /// The base model on VL test sets, before any vision training.
    pub vl: Vec<EvalResult>,
}

fn base_path(cfg: &RunConfig) -> PathBuf {
    cfg.base_dir().join("base.ckpt")
}

fn pretrain_typed<S: Scalar>(cfg: &RunConfig, bundle: &DataBundle) -> Result<BaselineReport> {
    let dir = cfg.base_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut log = MetricsLog::default();
    let out = pretrain_base_lm::<S>(
        &cfg.model,
        &bundle.pretrain,
        &bundle.nl_suite,
        &cfg.pretrain,
        cfg.seeds.init,
        cfg.seeds.train,
        &cfg.base_hash(),
        &mut log,
    );
    log.append_csv(&dir.join("metrics.csv"))?;
    let out = out?;
    let m = ModelPredictor::new(&out.checkpoint.params);
    let vl = bundle
        .vl_tasks
        .iter()
        .filter(|d| d.kind != TaskKind::CaptionInstruct)
        .map(|d| evaluate_dataset(&m, d, d.task_id))
        .collect::<Result<Vec<_>>>()?;
    out.checkpoint.save(&base_path(cfg))?;
    let report = BaselineReport {
        base_hash: cfg.base_hash(),
        data_hash: cfg.data_hash(),
        steps: out.steps,
        nl: out.checkpoint.baselines.clone(),
        vl,
    };
    write_json(&dir.join("baselines.json"), &report)?;
    Ok(report)
}

/// Trains the task-1 model and records its NL baselines under `<out>/base`.
pub fn pretrain(cfg: &RunConfig, force: bool) -> Result<BaselineReport> {
    let bundle = load_data(cfg)?;
    remove_if(&cfg.base_dir(), force)?;
    match cfg.precision {
        Precision::F32 => pretrain_typed::<f32>(cfg, &bundle),
        Precision::F64 => pretrain_typed::<f64>(cfg, &bundle),
    }
}

fn load_base<S: Scalar>(cfg: &RunConfig, bundle: &DataBundle) -> Result<Checkpoint<S>> {
    let path = base_path(cfg);
    if !path.exists() {
        pretrain_typed::<S>(cfg, bundle)?;
    }
    Checkpoint::load_expecting(&path, &cfg.base_hash())
}

pub fn manifest(cfg: &RunConfig) -> RunManifest {
    let s = cfg.seeds;
    RunManifest {
        run_id: cfg.run_id.clone(),
        config_hash: cfg.run_hash(),
        data_hash: cfg.data_hash(),
        mode: cfg.mode.name().to_string(),
        method: cfg.method.variant.name().to_string(),
        seeds: [("data", s.data), ("init", s.init), ("train", s.train), ("eval", s.eval)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub matrix: ForgettingMatrix,
}

fn run_typed<S: Scalar>(cfg: &RunConfig, bundle: &DataBundle) -> Result<RunArtifacts> {
    let base = load_base::<S>(cfg, bundle)?;
    let dir = cfg.run_dir();
    let store = RunStore::new(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
    let mut log = MetricsLog::default();
    let exp = cfg.experiment();
    let hash = cfg.run_hash();
    let out = match cfg.mode {
        SequenceMode::TwoTask => run_two_task(&base, bundle, &exp, &hash, &mut log, Some(&store)),
        SequenceMode::Continual => run_continual(&base, bundle, &exp, &hash, &mut log, Some(&store)),
    };
    log.append_csv(&dir.join("metrics.csv"))?;
    let out = out?;
    serialize_report(&out.matrix, &manifest(cfg), &dir)?;
    Ok(RunArtifacts { dir, matrix: out.matrix })
}

/// Runs the configured sequence and writes its reports; an interrupted
/// run resumes after its last completed task.
pub fn run(cfg: &RunConfig, force: bool) -> Result<RunArtifacts> {
    let bundle = load_data(cfg)?;
    if force {
        remove_if(&cfg.run_dir(), true)?;
    }
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, &bundle),
        Precision::F64 => run_typed::<f64>(cfg, &bundle),
    }
}

pub const SWEEP_COLUMNS: [&str; 9] =
    ["variant", "method", "alpha", "lora_rank", "rslora", "nl_delta", "nlu_delta", "nlg_delta", "mean_vl_accuracy"];

/// Runs every sweep variant on shared data, base model and seeds, then
/// writes `sweep.csv` and `sweep.md` side-by-side tables.
pub fn sweep(cfg: &RunConfig, force: bool) -> Result<PathBuf> {
    if cfg.sweep.is_empty() {
        return Err(Error::Config("sweep spec lists no variants".into()));
    }
    let mut table = vec![SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    for v in &cfg.sweep {
        let mut c = cfg.clone();
        c.method = v.method.clone();
        c.run_id = format!("{}-{}", cfg.run_id, v.name);
        c.sweep.clear();
        c.validate()?;
        let art = run(&c, force)?;
        let last = art.matrix.final_row().expect("runs have rows");
        let m = &v.method;
        let rank = match m.lora.rank {
            RankSpec::Fraction(f) => format!("{f}"),
            RankSpec::Explicit(r) => format!("r={r}"),
        };
        table.push(vec![
            v.name.clone(),
            m.variant.name().to_string(),
            if m.uses_soft_targets() { format!("{}", m.soft.alpha) } else { "-".into() },
            if m.uses_lora() { rank } else { "-".into() },
            if m.uses_lora() { m.lora.rank_stabilized.to_string() } else { "-".into() },
            render4(&last.nl_delta()),
            render4(&last.split.nlu_delta),
            render4(&last.split.nlg_delta),
            last.mean_vl_accuracy().map_or("-".into(), |a| render4(&a)),
        ]);
    }
    let dir = cfg.out_dir.join("sweep").join(&cfg.run_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &table {
        w.write_record(row).map_err(|e| Error::format("sweep table", e))?;
    }
    let csv_bytes = w.into_inner().map_err(|e| Error::format("sweep table", e))?;
    let p = dir.join("sweep.csv");
    fs::write(&p, csv_bytes).map_err(|e| Error::io(&p, e))?;
    let mut md = String::new();
    for (i, row) in table.iter().enumerate() {
        md.push_str(&format!("| {} |\n", row.join(" | ")));
        if i == 0 {
            md.push_str(&format!("|{}\n", "---|".repeat(row.len())));
        }
    }
    let p = dir.join("sweep.md");
    fs::write(&p, md).map_err(|e| Error::io(&p, e))?;
    Ok(dir)
}

/// Series extracted from one run's report.
struct RunSeries {
    label: String,
    nl_delta: Vec<(u8, f64)>,
    vl_accuracy: Vec<(u8, f64)>,
}

fn series(rows: &[ReportRow]) -> Result<RunSeries> {
    let label = rows.first().map(|r| r.run_id.clone()).ok_or_else(|| Error::format("report", "no rows"))?;
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::format("report value", e));
    let mut nl = Vec::new();
    let mut vl: Vec<(u8, f64, usize)> = Vec::new();
    for r in rows {
        if r.eval_task_t == 1 {
            if nl.last().map(|&(k, _)| k) != Some(r.after_task_k) {
                nl.push((r.after_task_k, parse(&r.delta)?));
            }
        } else {
            let a = parse(&r.accuracy)?;
            match vl.last_mut() {
                Some((k, sum, n)) if *k == r.after_task_k => {
                    *sum += a;
                    *n += 1;
                }
                _ => vl.push((r.after_task_k, a, 1)),
            }
        }
    }
    Ok(RunSeries { label, nl_delta: nl, vl_accuracy: vl.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect() })
}

fn line_chart(path: &Path, title: &str, y_label: &str, runs: &[(String, Vec<(u8, f64)>)]) -> Result<()> {
    use plotters::prelude::*;
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
        root.fill(&WHITE)?;
        let pts = runs.iter().flat_map(|(_, s)| s.iter());
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for &(_, y) in pts.clone() {
            lo = lo.min(y);
            hi = hi.max(y);
        }
        let pad = ((hi - lo) * 0.1).max(0.01);
        let k_max = pts.map(|&(k, _)| k).max().unwrap_or(1).max(2) as i32;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(1i32..k_max, (lo - pad)..(hi + pad))?;
        chart.configure_mesh().x_desc("after task").y_desc(y_label).draw()?;
        for (i, (label, s)) in runs.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(s.iter().map(|&(k, y)| (k as i32, y)), color.stroke_width(2)))?
                .label(label.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(s.iter().map(|&(k, y)| Circle::new((k as i32, y), 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(format!("plot {}", path.display()), e))
}

fn bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    use plotters::prelude::*;
    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (720, 440)).into_drawing_area();
        root.fill(&WHITE)?;
        let lo = bars.iter().map(|b| b.1).fold(0.0f64, f64::min);
        let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.01);
        let labels: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(56)
            .build_cartesian_2d(0i32..bars.len() as i32, (lo - pad)..(hi + pad))?;
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(bars.len() + 1)
            .x_label_formatter(&|i| labels.get(*i as usize).cloned().unwrap_or_default())
            .y_desc("final NL forgetting")
            .draw()?;
        chart.draw_series(bars.iter().enumerate().map(|(i, b)| {
            let color = Palette99::pick(i).to_rgba();
            Rectangle::new([(i as i32, 0.0), (i as i32 + 1, b.1)], color.filled())
        }))?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::format(format!("plot {}", path.display()), e))
}

/// Renders NL forgetting and VL accuracy per task for each run (overlaid
/// when several are given), a final-forgetting comparison, and
/// `plot_data.csv` with the report rows behind them.
pub fn plot(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories to plot".into()));
    }
    let mut all_rows = Vec::new();
    let mut runs = Vec::new();
    for dir in run_dirs {
        let p = dir.join("report.csv");
        if !p.exists() {
            return Err(Error::io(&p, std::io::Error::new(std::io::ErrorKind::NotFound, "missing report")));
        }
        let rows = read_report_csv(&p)?;
        runs.push(series(&rows)?);
        all_rows.extend(rows);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = Vec::new();

    let nl: Vec<_> = runs.iter().map(|r| (r.label.clone(), r.nl_delta.clone())).collect();
    let p = out.join("nl_delta.svg");
    line_chart(&p, "NL forgetting per task", "NL delta", &nl)?;
    files.push(p);

    let vl: Vec<_> = runs.iter().filter(|r| !r.vl_accuracy.is_empty()).map(|r| (r.label.clone(), r.vl_accuracy.clone())).collect();
    if !vl.is_empty() {
        let p = out.join("vl_accuracy.svg");
        line_chart(&p, "Mean VL accuracy per task", "accuracy", &vl)?;
        files.push(p);
    }

    let bars: Vec<_> =
        runs.iter().filter_map(|r| r.nl_delta.last().map(|&(_, d)| (r.label.clone(), d))).collect();
    let p = out.join("method_comparison.svg");
    bar_chart(&p, "Final NL forgetting by run", &bars)?;
    files.push(p);

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &all_rows {
        w.serialize(r).map_err(|e| Error::format("plot data", e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("plot data", e))?;
    let p = out.join("plot_data.csv");
    fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    files.push(p);
    Ok(files)
}

/// Loads the floor details of a finished pretraining for reporting.
pub fn read_baselines(cfg: &RunConfig) -> Result<BaselineReport> {
    read_json(&cfg.base_dir().join("baselines.json"))
}

