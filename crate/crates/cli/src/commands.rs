use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use dpae_autograd::{primitive_suite, GradCheckReport};
use dpae_core::data::{generate_dataset, normalize, read_dataset, write_dataset, Dataset, PerturbConfig};
use dpae_core::evaluate::{perturbed_set, ViewConfig};
use dpae_core::heads::{load_head, save_head, FitReport, Head, HeadKind, Task};
use dpae_core::model::{model_grad_check, probe_input, Dpae, DpaeConfig};
use dpae_core::pipeline::{self, FittedHead, LOCATION, SIZE};
use dpae_core::profile::{ExperimentConfig, PerturbSetting, Scale, MODERATE, STRESS};
use dpae_core::train::{load_checkpoint, save_checkpoint, summarize, write_loss_csv};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::output::{number_row, summary_line, write_csv, write_json, write_matrix, OutputDir, RunRecord};
use crate::{Cli, Command, Failure, GlobalArgs, HeadArg, ModelProfile, PerturbArgs, Preset, ScaleArg, Scope, TaskArg};

pub const HEADS_INDEX: &str = "heads.json";
const TOP_CHANNELS: usize = 5;

pub fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.global)?;
    match cli.command {
        Command::Config { out } => config_cmd(config, out.as_deref()),
        Command::GenData { count, out } => gen_data(config, count, &out),
        Command::TrainDpae { data, epochs, out } => train_dpae(config, &data, epochs, &out),
        Command::Reconstruct {
            model,
            data,
            sample,
            perturb,
            passthrough,
            out,
        } => reconstruct(config, &model, &data, sample, &perturb, passthrough, &out),
        Command::ExtractLatents { model, data, perturb, out } => extract_latents(config, &model, &data, &perturb, &out),
        Command::TrainHeads {
            model,
            data,
            head,
            task,
            out,
        } => train_heads(config, &model, &data, &head, &task, &out),
        Command::Evaluate { model, data, heads, out } => evaluate(config, &model, &data, &heads, &out),
        Command::Explain {
            model,
            data,
            heads,
            head,
            band,
            out,
        } => explain(config, &model, &data, &heads, head, band, &out),
        Command::Gradcheck {
            scope,
            profile,
            eps,
            tol,
            atol,
            out,
        } => gradcheck(config, scope, profile, eps, tol, atol, out.as_deref()),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn resolve_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| usage(format!("{}: not a valid experiment config: {e}", path.display())))?
        }
        None => {
            let scale = match global.scale {
                ScaleArg::Desk => Scale::Desk,
                ScaleArg::Paper => Scale::Paper,
            };
            ExperimentConfig::new(scale, global.seed.unwrap_or(0))
        }
    };
    if let Some(seed) = global.seed {
        config.set_seed(seed);
    }
    Ok(config)
}

/// Loads a normalized dataset and adopts its generator settings.
fn load_data(config: &mut ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let dataset = read_dataset(dir)?;
    if !dataset.normalized {
        return Err(usage(format!("{} holds an unnormalized dataset", dir.display())));
    }
    config.data = dataset.config.clone();
    Ok(dataset)
}

/// Loads a checkpoint and adopts its model settings.
fn load_model(config: &mut ExperimentConfig, dir: &Path) -> Result<Dpae> {
    let (model, _) = load_checkpoint(dir)?;
    config.model = model.config().clone();
    Ok(model)
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn config_cmd(config: ExperimentConfig, out: Option<&Path>) -> Result<()> {
    config.validate()?;
    let text = serde_json::to_string_pretty(&config)? + "\n";
    match out {
        None => print!("{text}"),
        Some(dir) => {
            let out = OutputDir::acquire(dir)?;
            let path = out.join("config.json");
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    Ok(())
}

fn gen_data(mut config: ExperimentConfig, count: Option<usize>, out: &Path) -> Result<()> {
    if let Some(n) = count {
        config.data.count = n;
    }
    config.validate()?;
    let run = RunRecord::new("gen-data", json!({ "count": config.data.count }), &config);
    let out = OutputDir::acquire(out)?;
    let dataset = normalize(&generate_dataset(&config.data)?);
    write_dataset(&dataset, out.path(), &run.to_value())?;
    eprintln!("wrote {} events to {}", dataset.len(), out.path().display());
    Ok(())
}

fn train_dpae(mut config: ExperimentConfig, data: &Path, epochs: Option<usize>, out: &Path) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    if let Some(e) = epochs {
        config.train.epochs = e;
    }
    config.validate()?;
    let run = RunRecord::new("train-dpae", json!({ "data": path_arg(data) }), &config);
    let out = OutputDir::acquire(out)?;
    let (total, every) = (config.train.epochs, config.train.checkpoint_every);
    let (model, history) = pipeline::train_autoencoder(&dataset, &config, |epoch, model, history| {
        if epoch == 1 || epoch % 10 == 0 || epoch == total {
            let mean = summarize(history).last_epoch_mean.unwrap_or(f64::NAN);
            eprintln!("epoch {epoch}/{total}: mean loss {mean:.6}");
        }
        if every.is_some_and(|k| epoch % k == 0 && epoch < total) {
            let dir = out.join(format!("epoch_{epoch:05}"));
            save_checkpoint(model, config.seed, summarize(history), run.to_value(), &dir)?;
        }
        Ok(())
    })?;
    save_checkpoint(&model, config.seed, summarize(&history), run.to_value(), out.path())?;

    let (reloaded, _) = load_checkpoint(out.path())?;
    let probe = probe_input(config.model.samples, config.model.channels)?;
    let clean = PerturbConfig::clean();
    let (a, b) = (model.latent(&probe, &clean)?, reloaded.latent(&probe, &clean)?);
    if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(Failure::Numerical("reloaded checkpoint does not reproduce the probe latent".into()).into());
    }

    let path = out.join("loss.csv");
    let mut text = run.csv_comment().into_bytes();
    write_loss_csv(&history, &mut text)?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("checkpoint verified: {}", out.path().display());
    Ok(())
}

fn preset_setting(p: Preset) -> PerturbSetting {
    match p {
        Preset::Moderate => MODERATE,
        Preset::Stress => STRESS,
    }
}

/// `(snr_db, ratio_pad)`; without flags the given default applies.
fn perturbation(args: &PerturbArgs, default: Option<PerturbSetting>) -> Result<(Option<f64>, f64)> {
    let base = args.preset.map(preset_setting).or(default);
    let snr = args.snr.or(base.map(|s| s.snr_db));
    let pad = args.pad.or(base.map(|s| s.ratio_pad)).unwrap_or(0.0);
    if !(0.0..=1.0).contains(&pad) {
        return Err(usage(format!("--pad {pad} outside [0, 1]")));
    }
    if snr.is_some_and(|s| !s.is_finite()) {
        return Err(usage("--snr must be finite"));
    }
    Ok((snr, pad))
}

#[allow(clippy::too_many_arguments)]
fn reconstruct(
    mut config: ExperimentConfig,
    model_dir: &Path,
    data: &Path,
    sample: usize,
    args: &PerturbArgs,
    passthrough: bool,
    out: &Path,
) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    let model = load_model(&mut config, model_dir)?;
    config.validate()?;
    let x = &dataset
        .samples
        .get(sample)
        .ok_or_else(|| usage(format!("sample {sample} out of range (dataset has {})", dataset.len())))?
        .matrix;
    let (snr_db, ratio_pad) = perturbation(args, (!passthrough).then_some(MODERATE))?;
    let perturb = PerturbConfig {
        snr_db,
        ratio_pad,
        rng_seed: pipeline::reconstruction_seed(config.seed, sample),
    };
    let run = RunRecord::new(
        "reconstruct",
        json!({
            "model": path_arg(model_dir),
            "data": path_arg(data),
            "sample": sample,
            "perturbation": perturb,
            "passthrough": passthrough,
        }),
        &config,
    );
    let out = OutputDir::acquire(out)?;
    let (perturbed, recon) = if passthrough {
        let (perturbed, _) = model.reconstruct(x, &perturb)?;
        (perturbed.clone(), perturbed)
    } else {
        model.reconstruct(x, &perturb)?
    };
    let report = dpae_core::metrics::reconstruction_report(x, &perturbed, &recon)?;
    let names: Vec<String> = dataset.channels().iter().map(|c| c.node_name.clone()).collect();
    write_matrix(&out.join("clean.csv"), &run, &names, x)?;
    write_matrix(&out.join("perturbed.csv"), &run, &names, &perturbed)?;
    write_matrix(&out.join("reconstructed.csv"), &run, &names, &recon)?;
    let label = dataset.samples[sample].label;
    write_json(
        &out.join("reconstruction_report.json"),
        &run,
        &json!({ "label": label, "report": report }),
    )?;
    println!(
        "{}",
        summary_line(&[
            ("mse_model", format!("{:.6e}", report.mse_model)),
            ("mse_identity", format!("{:.6e}", report.mse_identity)),
            ("improvement_ratio", format!("{:.4}", report.improvement_ratio)),
        ])
    );
    if report.improvement_ratio < 1.0 {
        return Err(Failure::Numerical(format!(
            "reconstruction is worse than the perturbed input (ratio {:.4})",
            report.improvement_ratio
        ))
        .into());
    }
    Ok(())
}

fn extract_latents(mut config: ExperimentConfig, model_dir: &Path, data: &Path, args: &PerturbArgs, out: &Path) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    let model = load_model(&mut config, model_dir)?;
    config.validate()?;
    let (snr_db, ratio_pad) = perturbation(args, None)?;
    let view = ViewConfig {
        snr_db,
        ratio_pad,
        replicates: 1,
        seed: config.seed,
        fresh: false,
    };
    let run = RunRecord::new(
        "extract-latents",
        json!({ "model": path_arg(model_dir), "data": path_arg(data), "snr_db": snr_db, "ratio_pad": ratio_pad }),
        &config,
    );
    let out = OutputDir::acquire(out)?;
    let events: Vec<usize> = (0..dataset.len()).collect();
    let set = perturbed_set(&model, &dataset, &events, &view)?;
    let d = config.model.encoder.latent_dim;
    let mut header: Vec<String> = (0..d).map(|i| format!("z{i}")).collect();
    header.extend(["location".to_string(), "size_cm".to_string()]);
    let rows = (0..set.len()).map(|r| {
        let mut row = number_row(&set.latents[r]);
        row.push(set.locations[r].to_string());
        row.push(set.sizes[r].to_string());
        row
    });
    write_csv(&out.join("latents.csv"), &run, &header, rows)?;
    eprintln!("wrote {} latent rows of width {}", set.len(), d + 2);
    Ok(())
}

fn head_kind(h: HeadArg) -> HeadKind {
    match h {
        HeadArg::Mlp => HeadKind::Mlp,
        HeadArg::Forest => HeadKind::RandomForest,
        HeadArg::EndToEnd => HeadKind::EndToEndMlp,
    }
}

fn task_of(t: TaskArg) -> Task {
    match t {
        TaskArg::Location => LOCATION,
        TaskArg::Size => SIZE,
    }
}

fn task_name(t: Task) -> &'static str {
    if t == LOCATION {
        "location"
    } else {
        "size"
    }
}

fn kind_name(k: HeadKind) -> &'static str {
    match k {
        HeadKind::Mlp => "mlp",
        HeadKind::RandomForest => "forest",
        HeadKind::EndToEndMlp => "end_to_end",
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadEntry {
    kind: HeadKind,
    task: Task,
    dir: String,
    fit: FitReport,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadsIndex {
    heads: Vec<HeadEntry>,
}

fn dedup<T: PartialEq + Copy>(items: &[T]) -> Vec<T> {
    let mut out = Vec::new();
    for &x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn train_heads(mut config: ExperimentConfig, model_dir: &Path, data: &Path, heads: &[HeadArg], tasks: &[TaskArg], out: &Path) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    let model = load_model(&mut config, model_dir)?;
    config.validate()?;
    let kinds: Vec<HeadKind> = dedup(heads).into_iter().map(head_kind).collect();
    let tasks: Vec<Task> = dedup(tasks).into_iter().map(task_of).collect();
    let run = RunRecord::new(
        "train-heads",
        json!({
            "model": path_arg(model_dir),
            "data": path_arg(data),
            "heads": kinds,
            "tasks": tasks,
        }),
        &config,
    );
    let out = OutputDir::acquire(out)?;
    let train_set = pipeline::training_view(&model, &dataset, &config)?;
    let fitted = pipeline::fit_heads(&train_set, &config, &kinds, &tasks)?;
    let mut index = HeadsIndex { heads: Vec::new() };
    for f in fitted {
        let dir = format!("{}_{}", kind_name(f.kind), task_name(f.task));
        save_head(&f.head, &out.join(&dir))?;
        eprintln!(
            "{dir}: best epoch {} of {}, {} parameters",
            f.fit.best_epoch, f.fit.stopping_epoch, f.fit.param_count
        );
        index.heads.push(HeadEntry {
            kind: f.kind,
            task: f.task,
            dir,
            fit: f.fit,
        });
    }
    write_json(&out.join(HEADS_INDEX), &run, &index)
}

fn load_heads(dir: &Path) -> Result<Vec<FittedHead>> {
    let path = dir.join(HEADS_INDEX);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let index: HeadsIndex = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    index
        .heads
        .into_iter()
        .map(|e| {
            Ok(FittedHead {
                kind: e.kind,
                task: e.task,
                head: load_head(&dir.join(&e.dir))?,
                fit: e.fit,
            })
        })
        .collect()
}

fn evaluate(mut config: ExperimentConfig, model_dir: &Path, data: &Path, heads_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    let model = load_model(&mut config, model_dir)?;
    config.validate()?;
    let heads = load_heads(heads_dir)?;
    let run = RunRecord::new(
        "evaluate",
        json!({ "model": path_arg(model_dir), "data": path_arg(data), "heads": path_arg(heads_dir) }),
        &config,
    );
    let out = OutputDir::acquire(out)?;
    let report = pipeline::evaluate_heads(&model, &dataset, &config, &heads)?;
    let mut summary = Vec::new();
    for h in &report.heads {
        for e in &h.evaluations {
            let line = summary_line(&[
                ("head", kind_name(h.kind).to_string()),
                ("task", task_name(h.task).to_string()),
                ("view", format!("{:?}", e.view)),
                ("snr", e.snr_db.to_string()),
                ("pad", e.ratio_pad.to_string()),
                ("macro_f1", e.metrics.macro_f1().map_or("-".into(), |v| format!("{v:.4}"))),
                ("rmse", e.metrics.rmse().map_or("-".into(), |v| format!("{v:.4}"))),
            ]);
            println!("{line}");
            summary.push(json!({
                "head": h.kind,
                "task": task_name(h.task),
                "view": e.view,
                "snr_db": e.snr_db,
                "ratio_pad": e.ratio_pad,
                "macro_f1": e.metrics.macro_f1(),
                "rmse": e.metrics.rmse(),
            }));
        }
    }
    write_json(&out.join("metrics.json"), &run, &json!({ "summary": summary, "report": report }))
}

#[allow(clippy::too_many_arguments)]
fn explain(
    mut config: ExperimentConfig,
    model_dir: &Path,
    data: &Path,
    heads_dir: &Path,
    head: HeadArg,
    band: Option<(f64, f64)>,
    out: &Path,
) -> Result<()> {
    let dataset = load_data(&mut config, data)?;
    let model = load_model(&mut config, model_dir)?;
    if let Some(b) = band {
        config.interpret.size_band_cm = b;
    }
    config.validate()?;
    let kind = head_kind(head);
    if kind == HeadKind::EndToEndMlp {
        return Err(usage("only latent heads (mlp, forest) can be explained"));
    }
    let heads = load_heads(heads_dir)?;
    let pick = |task: Task| -> Result<&Head> {
        heads
            .iter()
            .find(|h| h.kind == kind && h.task == task)
            .map(|h| &h.head)
            .ok_or_else(|| usage(format!("{} has no {} {} head", heads_dir.display(), kind_name(kind), task_name(task))))
    };
    let (location_head, size_head) = (pick(LOCATION)?, pick(SIZE)?);
    let band_events = pipeline::events_in_band(&dataset, config.interpret.size_band_cm);
    if band_events.is_empty() {
        return Err(usage(format!("no events in size band {:?}", config.interpret.size_band_cm)));
    }
    let run = RunRecord::new(
        "explain",
        json!({
            "model": path_arg(model_dir),
            "data": path_arg(data),
            "heads": path_arg(heads_dir),
            "head": kind,
            "band_cm": config.interpret.size_band_cm,
        }),
        &config,
    );
    let out = OutputDir::acquire(out)?;
    let report = pipeline::explain(&model, &dataset, &config, location_head, size_head)?;
    let params = &report.parameters;

    write_csv(
        &out.join("phi.csv"),
        &run,
        &["dim".into(), "phi".into()],
        report.phi.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )?;
    write_csv(
        &out.join("psi.csv"),
        &run,
        &["rank".into(), "channel".into(), "node_name".into(), "psi".into()],
        params
            .ranking
            .iter()
            .enumerate()
            .map(|(r, &c)| vec![(r + 1).to_string(), c.to_string(), report.channel_names[c].clone(), params.psi[c].to_string()]),
    )?;
    let regions = params.heatmap.first().map_or(0, Vec::len);
    let mut header = vec!["channel".to_string(), "node_name".to_string()];
    header.extend((0..regions).map(|n| format!("region{n}")));
    write_csv(
        &out.join("heatmap.csv"),
        &run,
        &header,
        params.heatmap.iter().enumerate().map(|(c, row)| {
            let mut line = vec![c.to_string(), report.channel_names[c].clone()];
            line.extend(number_row(row));
            line
        }),
    )?;

    let top_dir = out.join("top_channels");
    fs::create_dir_all(&top_dir).with_context(|| format!("creating {}", top_dir.display()))?;
    let period = dataset.config.period_s;
    let mut header = vec!["time_s".to_string()];
    header.extend(band_events.iter().map(|i| format!("event{i}")));
    for (rank, &c) in params.ranking.iter().take(TOP_CHANNELS).enumerate() {
        let name = &report.channel_names[c];
        let rows = (0..config.data.samples).map(|t| {
            let mut row = vec![(t as f64 * period).to_string()];
            row.extend(band_events.iter().map(|&i| {
                let m = &dataset.samples[i].matrix;
                m.data()[t * m.cols() + c].to_string()
            }));
            row
        });
        write_csv(&top_dir.join(format!("rank{}_{name}.csv", rank + 1)), &run, &header, rows)?;
    }
    write_json(&out.join("importance.json"), &run, &json!({ "band_events": band_events, "report": report }))?;
    for (r, &c) in params.ranking.iter().enumerate() {
        println!("{:>3}  {:<24} {:.6e}", r + 1, report.channel_names[c], params.psi[c]);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CheckLine {
    name: String,
    entries: usize,
    max_rel_error: f64,
    worst: Option<(String, usize)>,
    /// Entries outside both the relative and the absolute bound.
    failures: usize,
    passed: bool,
}

fn check_line(name: &str, report: &GradCheckReport, tol: f64, atol: f64) -> CheckLine {
    let failures = report
        .failures(tol)
        .filter(|c| (c.analytic - c.numeric).abs() > atol)
        .count();
    CheckLine {
        name: name.to_string(),
        entries: report.entries,
        max_rel_error: report.max_rel_error,
        worst: report.worst.clone(),
        failures,
        passed: failures == 0 && report.entries > 0,
    }
}

fn gradcheck(
    mut config: ExperimentConfig,
    scope: Scope,
    profile: ModelProfile,
    eps: f64,
    tol: f64,
    atol: f64,
    out: Option<&Path>,
) -> Result<()> {
    if !(eps > 0.0 && tol > 0.0 && atol >= 0.0) {
        return Err(usage("--eps and --tol must be positive, --atol non-negative"));
    }
    config.model = match profile {
        ModelProfile::Toy => DpaeConfig::toy(),
        ModelProfile::Desk => DpaeConfig::desk(),
    };
    let mut lines = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        for (name, report) in primitive_suite(eps)? {
            lines.push(check_line(name, &report, tol, atol));
        }
    }
    if matches!(scope, Scope::Model | Scope::All) {
        let report = model_grad_check(&config.model, config.seed, eps)?;
        lines.push(check_line("encode_decode_mse", &report, tol, atol));
    }
    for l in &lines {
        println!(
            "{} {:<24} entries={:<6} max_rel={:.3e} failures={}",
            if l.passed { "PASS" } else { "FAIL" },
            l.name,
            l.entries,
            l.max_rel_error,
            l.failures
        );
    }
    if let Some(dir) = out {
        let run = RunRecord::new(
            "gradcheck",
            json!({ "scope": format!("{scope:?}").to_lowercase(), "profile": format!("{profile:?}").to_lowercase(), "eps": eps, "tol": tol, "atol": atol }),
            &config,
        );
        let out = OutputDir::acquire(dir)?;
        write_json(&out.join("gradcheck.json"), &run, &json!({ "checks": lines }))?;
    }
    let worst = lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max);
    match lines.iter().filter(|l| !l.passed).count() {
        0 => Ok(()),
        n => Err(Failure::Numerical(format!("{n} gradient check(s) failed; worst relative error {worst:.3e}")).into()),
    }
}
