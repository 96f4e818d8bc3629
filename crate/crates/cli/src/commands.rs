use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};

use mbhgcn::config::RunConfig;
use mbhgcn::data::{
    build_dataset, load_bundle, mask_cold_start, parse_log, save_bundle, write_id_map,
};
use mbhgcn::eval::{evaluate_cold_start, evaluate_split, EvalOptions, EvalReport, Holdout};
use mbhgcn::io::{export_embeddings, load_model, save_model, ExportSelection};
use mbhgcn::synthetic::{generate_records, SyntheticConfig};
use mbhgcn::training::{train as fit, TrainLog};
use mbhgcn::{Dataset, Delimiter, ItemWeighting, ModelParams, UserAggregation, Variant};

use crate::table::Table;

/// Malformed command-line input not covered by the library's errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

fn load(data: &Path) -> Result<Dataset> {
    load_bundle(data).with_context(|| format!("loading bundle {}", data.display()))
}

pub fn prepare(input: &Path, behaviors: &[String], delimiter: Delimiter, out: &Path) -> Result<()> {
    let records = parse_log(input, behaviors, delimiter)
        .with_context(|| format!("reading {}", input.display()))?;
    let dataset = build_dataset(&records, behaviors)?;
    save_bundle(&dataset, out).with_context(|| format!("writing {}", out.display()))?;
    let ids = sibling(out, ".ids");
    write_id_map(&dataset, BufWriter::new(File::create(&ids)?))?;

    let mut table = Table::new(["statistic", "value"]);
    for (key, value) in dataset.stats() {
        table.push(vec![key, value.to_string()]);
    }
    print!("{}", table.aligned());
    table.save_csv(&sibling(out, ".stats.csv"))?;
    Ok(())
}

/// Parses `key=v1,v2,...` axes into the list of assignments to try.
fn grid_points(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let Some((key, values)) = axis.split_once('=') else {
            bail!(UsageError(format!(
                "grid axis `{axis}` is not `key=v1,v2,...`"
            )));
        };
        let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!(UsageError(format!("grid axis `{key}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut next = p.clone();
                    next.push((key.trim().to_owned(), v.trim().to_owned()));
                    next
                })
            })
            .collect();
    }
    Ok(points)
}

fn write_log(log: &TrainLog, behaviors: &[String], path: &Path) -> Result<()> {
    std::fs::write(path, log.to_csv(behaviors))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn train(
    data: &Path,
    base: RunConfig,
    grid: &[String],
    out: &Path,
    log_path: &Path,
) -> Result<()> {
    let dataset = load(data)?;
    let points = grid_points(grid)?;
    let mut best: Option<(f64, ModelParams, TrainLog)> = None;
    let mut table = Table::new(["run", "settings", "best_epoch", "val_HR@10"]);
    for (run, point) in points.iter().enumerate() {
        let mut config = base.clone();
        for (key, value) in point {
            config.set(key, value)?;
        }
        config.train.validate()?;
        let settings = point
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        info!("run {}: {settings}", run + 1);
        let (params, log) = fit(&dataset, &config.train, &config.variant)?;
        table.push(vec![
            (run + 1).to_string(),
            if settings.is_empty() {
                "-".into()
            } else {
                settings
            },
            log.best_epoch.to_string(),
            format!("{:.4}", log.best_val_hr10),
        ]);
        if best
            .as_ref()
            .is_none_or(|(hr, _, _)| log.best_val_hr10 > *hr)
        {
            best = Some((log.best_val_hr10, params, log));
        }
    }
    let (_, params, log) = best.expect("at least one grid point");
    save_model(&params, out).with_context(|| format!("writing {}", out.display()))?;
    write_log(&log, &dataset.behaviors, log_path)?;
    if points.len() > 1 {
        print!("{}", table.aligned());
        table.save_csv(&sibling(out, ".grid.csv"))?;
    }
    println!(
        "saved {} (best epoch {}, validation HR@10 {:.4})",
        out.display(),
        log.best_epoch,
        log.best_val_hr10
    );
    Ok(())
}

pub struct EvaluateRequest<'a> {
    pub data: &'a Path,
    pub model: &'a Path,
    pub ks: &'a [usize],
    pub dim: Option<usize>,
    pub valid: bool,
    pub exclude_auxiliary: bool,
    pub out: Option<&'a Path>,
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) {
        bail!(UsageError("--ks needs positive cut-offs".into()));
    }
    Ok(())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    print!("{}", report.to_table());
    if let Some(path) = out {
        std::fs::write(path, report.to_csv())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn evaluate(req: &EvaluateRequest<'_>) -> Result<()> {
    check_ks(req.ks)?;
    let dataset = load(req.data)?;
    let params =
        load_model(req.model).with_context(|| format!("loading model {}", req.model.display()))?;
    if let Some(dim) = req.dim {
        if dim != params.dim() {
            bail!(mbhgcn::Error::Mismatch(format!(
                "model has d = {}, expected {dim}",
                params.dim()
            )));
        }
    }
    params.check_compatible(&dataset)?;
    let holdout = if req.valid {
        Holdout::Valid
    } else {
        Holdout::Test
    };
    let options = EvalOptions {
        exclude_auxiliary: req.exclude_auxiliary,
    };
    let report = evaluate_split(&params, &dataset, holdout, req.ks, &options);
    emit_report(&report, req.out)
}

/// Ablation rows in display order with their variants.
pub fn ablation_rows() -> Vec<(&'static str, Variant)> {
    let full = Variant::default();
    vec![
        (
            "w/o. G",
            Variant {
                use_unified: false,
                ..full
            },
        ),
        ("w. G", full),
        (
            "sum agg.",
            Variant {
                user_agg: UserAggregation::Sum,
                ..full
            },
        ),
        (
            "linear agg.",
            Variant {
                user_agg: UserAggregation::Linear,
                ..full
            },
        ),
        ("adaptive agg.", full),
        (
            "fix γ_ik",
            Variant {
                item_weighting: ItemWeighting::Fixed,
                ..full
            },
        ),
        (
            "w/o. w_k",
            Variant {
                item_weighting: ItemWeighting::CountsOnly,
                ..full
            },
        ),
        ("w. w_k", full),
        (
            "w/o. c.g.",
            Variant {
                fuse_global: false,
                ..full
            },
        ),
        ("w. c.g.", full),
        (
            "w/o. MTL",
            Variant {
                multi_task: false,
                ..full
            },
        ),
        ("w. MTL", full),
    ]
}

fn metric_header(first: &str, ks: &[usize]) -> Vec<String> {
    let mut header = vec![first.to_owned()];
    header.extend(ks.iter().map(|k| format!("HR@{k}")));
    header.extend(ks.iter().map(|k| format!("NDCG@{k}")));
    header
}

fn metric_row(name: String, report: &EvalReport) -> Vec<String> {
    let mut row = vec![name];
    row.extend(report.ks.iter().map(|k| format!("{:.4}", report.hr[k])));
    row.extend(report.ks.iter().map(|k| format!("{:.4}", report.ndcg[k])));
    row
}

fn train_and_test(
    dataset: &Dataset,
    config: &RunConfig,
    variant: &Variant,
    ks: &[usize],
) -> Result<EvalReport> {
    let (params, _) = fit(dataset, &config.train, variant)?;
    Ok(evaluate_split(
        &params,
        dataset,
        Holdout::Test,
        ks,
        &EvalOptions::default(),
    ))
}

fn sorted_ks(ks: &[usize]) -> Vec<usize> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    ks
}

pub fn ablate(
    data: &Path,
    config: &RunConfig,
    only: Option<&str>,
    ks: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    check_ks(ks)?;
    let rows: Vec<_> = ablation_rows()
        .into_iter()
        .filter(|(name, _)| only.is_none_or(|o| o == *name))
        .collect();
    if rows.is_empty() {
        let names: Vec<_> = ablation_rows().into_iter().map(|(n, _)| n).collect();
        bail!(UsageError(format!(
            "unknown row `{}`; expected one of: {}",
            only.unwrap_or(""),
            names.join(", ")
        )));
    }
    let dataset = load(data)?;
    let mut table = Table::new(metric_header("variant", &sorted_ks(ks)));
    // Rows sharing a variant share one training run.
    let mut cache: Vec<(Variant, EvalReport)> = Vec::new();
    for (name, variant) in rows {
        let report = match cache.iter().find(|(v, _)| *v == variant) {
            Some((_, r)) => r.clone(),
            None => {
                info!("training `{name}`");
                let r = train_and_test(&dataset, config, &variant, ks)?;
                cache.push((variant, r.clone()));
                r
            }
        };
        table.push(metric_row(name.to_owned(), &report));
    }
    print!("{}", table.aligned());
    if let Some(path) = out {
        table.save_csv(path)?;
    }
    Ok(())
}

pub fn layer_sweep(
    data: &Path,
    config: &RunConfig,
    depths: &[usize],
    ks: &[usize],
    out: Option<&Path>,
) -> Result<()> {
    check_ks(ks)?;
    let dataset = load(data)?;
    let mut table = Table::new(metric_header("layers", &sorted_ks(ks)));
    for &layers in depths {
        let mut config = config.clone();
        config.train.layers = layers;
        let report = train_and_test(&dataset, &config, &config.variant, ks)?;
        table.push(metric_row(layers.to_string(), &report));
    }
    print!("{}", table.aligned());
    if let Some(path) = out {
        table.save_csv(path)?;
    }
    Ok(())
}

pub struct ColdStartRequest<'a> {
    pub data: &'a Path,
    pub config: &'a RunConfig,
    pub n_cold: usize,
    pub mask_seed: u64,
    pub scale_down: bool,
    pub ks: &'a [usize],
    pub out: Option<&'a Path>,
}

pub fn cold_start(req: &ColdStartRequest<'_>) -> Result<()> {
    check_ks(req.ks)?;
    let dataset = load(req.data)?;
    let available = dataset.test_users().len();
    // Masking every test user would leave no target edges to train on.
    let cap = available / 2;
    let n_cold = if req.scale_down && req.n_cold > cap {
        warn!("only {available} test users; masking {cap} of them");
        cap
    } else {
        req.n_cold
    };
    let (masked, cold) = mask_cold_start(&dataset, n_cold, req.mask_seed)?;
    let (params, _) = fit(&masked, &req.config.train, &req.config.variant)?;
    let report = evaluate_cold_start(&params, &cold, &masked, req.ks);
    emit_report(&report, req.out)?;
    if let Some(path) = req.out {
        let users: Vec<&str> = cold.iter().map(|&u| dataset.user_ids[u].as_str()).collect();
        std::fs::write(sibling(path, ".users"), users.join("\n") + "\n")?;
    }
    Ok(())
}

pub fn export(
    data: &Path,
    model: &Path,
    users: &[String],
    items: &[String],
    dims: Option<usize>,
    out_dir: &Path,
) -> Result<()> {
    let dataset = load(data)?;
    let params = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    params.check_compatible(&dataset)?;
    let lookup = |ids: &[String], table: &[String], kind: &str| -> Vec<usize> {
        let index: BTreeMap<&str, usize> = table
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        ids.iter()
            .filter_map(|id| {
                let found = index.get(id.as_str()).copied();
                if found.is_none() {
                    warn!("unknown {kind} id `{id}`; skipped");
                }
                found
            })
            .collect()
    };
    let selection = ExportSelection {
        users: lookup(users, &dataset.user_ids, "user"),
        items: lookup(items, &dataset.item_ids, "item"),
        dims,
    };
    let written = export_embeddings(&params, &dataset, &selection, out_dir)?;
    for path in &written {
        println!("{}", path.display());
    }
    Ok(())
}

pub fn synth(config: &SyntheticConfig, out: &Path) -> Result<()> {
    let records = generate_records(config)?;
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("writing {}", out.display()))?);
    for r in &records {
        writeln!(w, "{}\t{}\t{}\t{}", r.user, r.item, r.behavior, r.timestamp)?;
    }
    w.flush()?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}
