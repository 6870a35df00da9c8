use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use apl_core::evaluation::{embed_records, Histogram};
use apl_core::features::{load_dataset, save_dataset, split_gcd, synth_generate};
use apl_core::gradsuite;
use apl_core::tensor::OpKind;
use apl_core::training::{fit, load_checkpoint, save_checkpoint, FitObserver, StepRecord};
use apl_core::{evaluate, EvalReport, GroundTruthParts, ModelState, TrainConfig, TrainError};
use serde_json::{Map, Value};

use crate::config::{checkpoint_file, RunConfig, DATA_FILE, TRUTH_FILE};
use crate::CliError;

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, gt) = synth_generate(&cfg.synth)?;
    cfg.echo("synth")?;
    let dir = cfg.out_dir()?;
    save_dataset(&dir.join(DATA_FILE), &ds)?;
    write_json(&dir.join(TRUTH_FILE), &gt)?;
    log::info!("wrote {} records to {}", ds.len(), dir.display());
    Ok(())
}

/// Averages every numeric field of the epoch's step records.
struct EpochLog<'a> {
    cfg: &'a TrainConfig,
    dir: &'a Path,
    metrics: BufWriter<File>,
    pending: Vec<StepRecord>,
    stop_after: Option<usize>,
}

impl EpochLog<'_> {
    fn line(&self, epoch: usize) -> Value {
        let mut sums: Map<String, Value> = Map::new();
        for rec in &self.pending {
            if let Value::Object(m) = serde_json::to_value(&rec.loss).unwrap_or_default() {
                for (k, v) in m {
                    let prev = sums.get(&k).and_then(Value::as_f64).unwrap_or(0.0);
                    sums.insert(k, Value::from(prev + v.as_f64().unwrap_or(0.0)));
                }
            }
        }
        let n = self.pending.len().max(1) as f64;
        let mut out = Map::new();
        out.insert("epoch".into(), epoch.into());
        out.insert("steps".into(), self.pending.len().into());
        for (k, v) in sums {
            out.insert(k, Value::from(v.as_f64().unwrap_or(0.0) / n));
        }
        Value::Object(out)
    }
}

impl FitObserver for EpochLog<'_> {
    fn on_step(&mut self, record: &StepRecord) -> apl_core::training::Result<()> {
        self.pending.push(record.clone());
        Ok(())
    }

    fn on_epoch_end(&mut self, epoch: usize, state: &ModelState) -> apl_core::training::Result<()> {
        let line = self.line(epoch);
        self.pending.clear();
        writeln!(self.metrics, "{line}")?;
        self.metrics.flush()?;
        save_checkpoint(&self.dir.join("last.aplc"), state, self.cfg)?;
        log::info!(
            "epoch {epoch}: total {:.4}",
            line["total"].as_f64().unwrap_or(f64::NAN)
        );
        if self.stop_after == Some(epoch) {
            return Err(TrainError::Stopped { epoch });
        }
        Ok(())
    }
}

pub fn train(mut cfg: RunConfig) -> Result<(), CliError> {
    let ds = load_dataset(&cfg.data_file()?)?;
    let mut state = match &cfg.paths.resume {
        Some(path) => {
            let (state, saved) = load_checkpoint(&checkpoint_file(path))?;
            if saved != cfg.train && cfg.train != TrainConfig::default() {
                return Err(CliError::Config(
                    "[train] differs from the checkpoint being resumed; drop it or match it".into(),
                ));
            }
            cfg.train = saved;
            state
        }
        None => {
            cfg.train.validate().map_err(CliError::Config)?;
            ModelState::init(&cfg.train, ds.dims.channels, ds.class_count)
        }
    };
    if state.dim() != ds.dims.channels || state.classes() != ds.class_count {
        return Err(CliError::Config(format!(
            "model expects C={} and {} classes, dataset has C={} and {} classes",
            state.dim(),
            state.classes(),
            ds.dims.channels,
            ds.class_count
        )));
    }
    let split = split_gcd(&ds, cfg.train.labeled_fraction)?;
    cfg.echo("train")?;
    let dir = cfg.out_dir()?;
    let metrics_path = dir.join("metrics.jsonl");
    let metrics = fs::OpenOptions::new()
        .create(true)
        .append(cfg.paths.resume.is_some())
        .write(true)
        .truncate(cfg.paths.resume.is_none())
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    let mut obs = EpochLog {
        cfg: &cfg.train,
        dir,
        metrics: BufWriter::new(metrics),
        pending: Vec::new(),
        stop_after: cfg.run.stop_after_epoch,
    };
    match fit(
        &mut state,
        &split.labeled,
        &split.unlabeled,
        &cfg.train,
        &mut obs,
    ) {
        Ok(_) => {}
        Err(TrainError::Stopped { epoch }) => {
            log::info!(
                "stopped after epoch {epoch}; resume from {}",
                dir.join("last.aplc").display()
            );
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    }
    save_checkpoint(&dir.join("final.aplc"), &state, &cfg.train)?;
    log::info!("wrote {}", dir.join("final.aplc").display());
    Ok(())
}

fn print_table(r: &EvalReport) {
    println!("{:<8} {:>8}", "subset", "acc");
    for (name, v) in [
        ("All", r.acc_all),
        ("Known", r.acc_known),
        ("Novel", r.acc_novel),
    ] {
        println!("{name:<8} {:>8.4}", v);
    }
    if let (Some(p), Some(a)) = (r.part_purity, r.part_ari) {
        println!("part purity {p:.4}  ARI {a:.4}");
    }
    if let Some(s) = &r.similarity {
        println!(
            "hit rate {:.4}  argmin sim {:.4}  shared sim {:.4}",
            s.hit_rate, s.mean_argmin_similarity, s.mean_shared_similarity
        );
    }
}

fn write_histogram(path: &Path, h: &Histogram) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Config(e.to_string()))?;
    w.write_record(["lower", "upper", "count"])
        .map_err(|e| CliError::Config(e.to_string()))?;
    for (i, &(lo, n)) in h.bins.iter().enumerate() {
        let hi = h.bins.get(i + 1).map_or(1.0, |b| b.0);
        w.write_record([lo.to_string(), hi.to_string(), n.to_string()])
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn eval(mut cfg: RunConfig) -> Result<(), CliError> {
    let ckpt =
        cfg.paths.checkpoint.clone().ok_or_else(|| {
            CliError::Config("no checkpoint (use --ckpt or paths.checkpoint)".into())
        })?;
    if cfg.paths.out.is_none() {
        cfg.paths.out = Some(ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    }
    let (state, train_cfg) = load_checkpoint(&checkpoint_file(&ckpt))?;
    let ds = load_dataset(&cfg.data_file()?)?;
    let gt: Option<GroundTruthParts> = cfg.truth_file()?.map(|p| read_json(&p)).transpose()?;
    let split = split_gcd(&ds, train_cfg.labeled_fraction)?;
    let canonical: Vec<_> = ds
        .records
        .iter()
        .filter(|r| r.view_id == 0)
        .cloned()
        .collect();
    let report = evaluate(
        &state,
        &train_cfg,
        &split.unlabeled,
        &split.known_classes,
        &canonical,
        gt.as_ref(),
    )?;
    cfg.echo("eval")?;
    let dir = cfg.out_dir()?;
    write_json(&dir.join("report.json"), &report)?;
    print_table(&report);

    if cfg.eval.dump_embeddings {
        let path = dir.join("embeddings.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Config(e.to_string()))?;
        let dim = state.dim();
        let mut header = vec!["image_id".to_string()];
        header.extend((0..dim).map(|i| format!("f{i}")));
        header.push("label".into());
        w.write_record(&header)
            .map_err(|e| CliError::Config(e.to_string()))?;
        for e in embed_records(&state, &canonical, &train_cfg)? {
            let mut row = vec![e.image_id.to_string()];
            row.extend(e.pooled.iter().map(|x| x.to_string()));
            row.push(e.label.map_or("-1".into(), |l| l.to_string()));
            w.write_record(&row)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }

    if cfg.eval.similarity_report {
        let Some(sim) = &report.similarity else {
            return Err(CliError::Config(
                "similarity report needs ground-truth parts and a part-based model".into(),
            ));
        };
        write_json(&dir.join("similarity.json"), sim)?;
        write_histogram(&dir.join("similarity_argmin.csv"), &sim.argmin_histogram)?;
        write_histogram(&dir.join("similarity_other.csv"), &sim.other_histogram)?;
    }
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let fault = match &cfg.gradcheck.inject_fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .ok_or_else(|| CliError::Config(format!("unknown op {name:?}")))?,
        ),
        None => None,
    };
    cfg.echo("gradcheck")?;
    let rows = gradsuite::run(cfg.gradcheck.seed, fault)?;
    println!(
        "{:<20} {:>8} {:>14}  result",
        "row", "checked", "max_rel_error"
    );
    for r in &rows {
        println!(
            "{:<20} {:>8} {:>14.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    write_json(&cfg.out_dir()?.join("gradcheck.json"), &rows)?;
    let failed: Vec<_> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck failed: {}",
            failed.join(", ")
        )))
    }
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.out_dir()?;
    let mut md = format!("# Run {}\n\n", dir.display());
    let metrics = dir.join("metrics.jsonl");
    if metrics.exists() {
        let text = fs::read_to_string(&metrics).map_err(|e| CliError::io(&metrics, e))?;
        md.push_str("| epoch | total | all_min | diversity |\n|---|---|---|---|\n");
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| CliError::Config(format!("metrics.jsonl: {e}")))?;
            let f = |k: &str| v[k].as_f64().unwrap_or(f64::NAN);
            md.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} |\n",
                v["epoch"],
                f("total"),
                f("all_min"),
                f("diversity")
            ));
        }
        md.push('\n');
    }
    let report = dir.join("report.json");
    if report.exists() {
        let r: EvalReport = read_json(&report)?;
        md.push_str("| subset | ACC |\n|---|---|\n");
        for (name, v) in [
            ("All", r.acc_all),
            ("Known", r.acc_known),
            ("Novel", r.acc_novel),
        ] {
            md.push_str(&format!("| {name} | {v:.4} |\n"));
        }
        if let (Some(p), Some(a)) = (r.part_purity, r.part_ari) {
            md.push_str(&format!("\nPart purity {p:.4}, ARI {a:.4}.\n"));
        }
        if let Some(s) = &r.similarity {
            md.push_str(&format!(
                "Hit rate {:.4}; argmin similarity {:.4} vs shared {:.4}.\n",
                s.hit_rate, s.mean_argmin_similarity, s.mean_shared_similarity
            ));
        }
    }
    if !metrics.exists() && !report.exists() {
        return Err(CliError::Config(format!(
            "{} holds neither metrics.jsonl nor report.json",
            dir.display()
        )));
    }
    cfg.echo("report")?;
    let path = dir.join("summary.md");
    fs::write(&path, &md).map_err(|e| CliError::io(&path, e))?;
    print!("{md}");
    Ok(())
}
