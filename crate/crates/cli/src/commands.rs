use std::fs;
use std::path::{Path, PathBuf};

use mmfuse::data::{
    generate_synthetic, load_encoded, loso_protocols, make_split, DatasetManifest, EncodedDataset,
    EncodingConfig, Protocol, SplitSpec, SyntheticSpec,
};
use mmfuse::distill::{evaluate, train, write_confusion_csv, EvalMetrics, TrainReport};
use mmfuse::exec::{self, ExecMode};
use mmfuse::model::{ModelConfig, Network, Role};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{claim_dir, ExperimentConfig};
use crate::CliError;

pub const ENCODING_FILE: &str = "encoding.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn gen_data(spec: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let manifest = generate_synthetic(&spec, out, ExecMode::Parallel)?;
    eprintln!(
        "wrote {} samples, {} modalities to {}",
        manifest.samples.len(),
        manifest.modalities.len(),
        out.display()
    );
    Ok(())
}

fn encode(
    dataset: &Path,
    encoding: &EncodingConfig,
    modalities: &[String],
) -> Result<(EncodedDataset<f32>, EncodingConfig, Vec<String>), CliError> {
    let manifest = DatasetManifest::read(dataset)?;
    let (data, resolved) = load_encoded(dataset, &manifest, encoding, ExecMode::Parallel)?;
    let (data, names) = if modalities.is_empty() {
        let names = data.modalities.iter().map(|m| m.name.clone()).collect();
        (data, names)
    } else {
        let picks: Vec<&str> = modalities.iter().map(String::as_str).collect();
        (data.select_modalities(&picks)?, modalities.to_vec())
    };
    Ok((data.cast(), resolved, names))
}

/// Loads the dataset and fills every default of `cfg` that depends on it.
fn prepare(cfg: &mut ExperimentConfig) -> Result<(EncodedDataset<f32>, SplitSpec), CliError> {
    let (data, encoding, names) = encode(&cfg.dataset, &cfg.encoding, &cfg.modalities)?;
    cfg.encoding = encoding;
    cfg.modalities = names;
    cfg.kd.resolve(cfg.modalities.len())?;
    cfg.train.validate()?;
    let split = make_split(&data.keys(), cfg.protocol)?;
    Ok((data, split))
}

fn build(cfg: &ExperimentConfig, role: Role, data: &EncodedDataset<f32>) -> Result<Network<f32>, CliError> {
    let model = ModelConfig::new(&cfg.arch, role, data.modalities.clone(), data.classes.len());
    Ok(Network::new(model, role, cfg.seed)?)
}

/// Report body with the wall-clock timing moved out of it.
fn split_timing(report: &TrainReport) -> (Value, Value) {
    let mut value = serde_json::to_value(report).expect("report serializes");
    let timing = value
        .as_object_mut()
        .and_then(|o| o.remove("timing"))
        .unwrap_or(Value::Null);
    (value, timing)
}

fn save_run(
    dir: &Path,
    net: &Network<f32>,
    encoding: &EncodingConfig,
    metrics: &EvalMetrics,
    classes: &[String],
) -> Result<(), CliError> {
    let ckpt = dir.join("checkpoint");
    net.save(&ckpt)?;
    write_json(&ckpt.join(ENCODING_FILE), encoding)?;
    write_confusion_csv(&dir.join("confusion_matrix.csv"), &metrics.confusion, classes)?;
    Ok(())
}

pub fn cmd_train(config: &Path, role: Role, force: bool) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::read(config)?;
    let (data, split) = prepare(&mut cfg)?;
    let mut net = build(&cfg, role, &data)?;
    let dir = cfg.run_dir(&format!("train-{role}"), &format!("train-{role}"));
    claim_dir(&dir, force)?;

    let report = train(&mut net, &data, &split, &cfg.train, None)?;
    save_run(&dir, &net, &cfg.encoding, &report.metrics, &data.classes)?;
    let (results, timing) = split_timing(&report);
    write_json(
        &dir.join("report.json"),
        &json!({
            "command": "train",
            "model": role,
            "config": cfg,
            "results": results,
            "timing": timing,
        }),
    )?;
    eprintln!(
        "{role}: accuracy {:.4}, macro-F1 {:.4}, {} parameters",
        report.metrics.accuracy, report.metrics.macro_f1, report.param_count
    );
    Ok(dir)
}

pub fn cmd_distill(config: &Path, teacher_ckpt: &Path, compare_raw: bool, force: bool) -> Result<PathBuf, CliError> {
    let mut cfg = ExperimentConfig::read(config)?;
    let teacher = Network::<f32>::load(teacher_ckpt)?;
    let (data, split) = prepare(&mut cfg)?;
    let mut student = build(&cfg, Role::Student, &data)?;
    let salt = format!("distill\0{}\0{compare_raw}", teacher_ckpt.display());
    let dir = cfg.run_dir("distill", &salt);
    claim_dir(&dir, force)?;

    let kd_report = train(&mut student, &data, &split, &cfg.train, Some((&teacher, &cfg.kd)))?;
    save_run(&dir, &student, &cfg.encoding, &kd_report.metrics, &data.classes)?;
    let (kd_results, kd_timing) = split_timing(&kd_report);

    let split_name = cfg.protocol.to_string();
    let mut rows = vec![("student_kd", kd_report.metrics.clone())];
    let mut results = json!({ "student_kd": kd_results });
    let mut timing = json!({ "student_kd": kd_timing });
    if compare_raw {
        let mut raw = build(&cfg, Role::Student, &data)?;
        let raw_report = train(&mut raw, &data, &split, &cfg.train, None)?;
        let teacher_metrics = evaluate(&teacher, &data, &split.test, cfg.train.batch_size)?;
        let (raw_results, raw_timing) = split_timing(&raw_report);
        results["teacher"] = json!({
            "metrics": teacher_metrics,
            "param_count": teacher.param_count(),
        });
        results["student"] = raw_results;
        timing["student"] = raw_timing;
        rows.insert(0, ("student", raw_report.metrics));
        rows.insert(0, ("teacher", teacher_metrics));
    }
    let mut csv = String::from("split,model,accuracy,macro_f1\n");
    for (name, m) in &rows {
        csv.push_str(&format!("{split_name},{name},{},{}\n", m.accuracy, m.macro_f1));
        eprintln!("{name}: accuracy {:.4}, macro-F1 {:.4}", m.accuracy, m.macro_f1);
    }
    write_text(&dir.join("results.csv"), &csv)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "command": "distill",
            "teacher_checkpoint": teacher_ckpt,
            "compare_raw": compare_raw,
            "config": cfg,
            "results": results,
            "timing": timing,
        }),
    )?;
    Ok(dir)
}

/// `loso` alone means every LOSO fold followed by their mean.
pub fn parse_eval_protocol(text: &str) -> Result<Option<Protocol>, CliError> {
    if text == "loso" {
        Ok(None)
    } else {
        Ok(Some(text.parse()?))
    }
}

/// One row per split, plus a mean row when every LOSO fold is evaluated.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    protocol: Option<Protocol>,
    batch_size: usize,
    out: Option<&Path>,
) -> Result<String, CliError> {
    if batch_size == 0 {
        return Err(CliError::config("batch size must be at least 1"));
    }
    let net = Network::<f32>::load(checkpoint)?;
    let enc_path = checkpoint.join(ENCODING_FILE);
    let encoding = if enc_path.exists() {
        let text = fs::read_to_string(&enc_path).map_err(|e| CliError::io(&enc_path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", enc_path.display())))?
    } else {
        EncodingConfig::default()
    };
    let names: Vec<String> = net.config().modalities.iter().map(|m| m.name.clone()).collect();
    let (data, _, _) = encode(dataset, &encoding, &names)?;
    if let Some((mine, theirs)) = net
        .config()
        .modalities
        .iter()
        .zip(&data.modalities)
        .find(|(a, b)| a != b)
    {
        return Err(CliError::config(format!(
            "checkpoint modality `{}` expects {}x{} inputs, dataset gives {}x{}",
            mine.name, mine.patches, mine.features, theirs.patches, theirs.features
        )));
    }

    let keys = data.keys();
    let protocols = match protocol {
        Some(p) => vec![p],
        None => loso_protocols(&keys),
    };
    let folds = exec::try_map(ExecMode::Parallel, protocols.clone(), |p| -> Result<EvalMetrics, CliError> {
        let split = make_split(&keys, p)?;
        Ok(evaluate(&net, &data, &split.test, batch_size)?)
    })?;

    let mut csv = String::from("split,samples,accuracy,macro_f1");
    for n in &names {
        csv.push_str(&format!(",{n}_spatial,{n}_temporal,{n}_overall"));
    }
    csv.push('\n');
    let row = |label: &str, samples: usize, values: &[f64]| -> String {
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        format!("{label},{samples},{}\n", cells.join(","))
    };
    let values = |m: &EvalMetrics| -> Vec<f64> {
        let mut v = vec![m.accuracy, m.macro_f1];
        for s in &m.per_modality {
            v.extend([s.spatial, s.temporal, s.combined]);
        }
        v
    };
    for (p, m) in protocols.iter().zip(&folds) {
        csv.push_str(&row(&p.to_string(), m.samples, &values(m)));
    }
    if protocol.is_none() {
        let all: Vec<Vec<f64>> = folds.iter().map(values).collect();
        let width = all.first().map_or(0, Vec::len);
        let mean: Vec<f64> = (0..width)
            .map(|i| all.iter().map(|v| v[i]).sum::<f64>() / all.len() as f64)
            .collect();
        let samples = folds.iter().map(|m| m.samples).sum();
        csv.push_str(&row("mean", samples, &mean));
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        write_text(&dir.join("eval.csv"), &csv)?;
        let folds_json: Vec<Value> = protocols
            .iter()
            .zip(&folds)
            .map(|(p, m)| json!({ "split": p, "metrics": m }))
            .collect();
        write_json(
            &dir.join("report.json"),
            &json!({
                "command": "eval",
                "checkpoint": checkpoint,
                "dataset": dataset,
                "encoding": encoding,
                "batch_size": batch_size,
                "folds": folds_json,
            }),
        )?;
    }
    Ok(csv)
}

pub fn cmd_ablate_tokens(config: &Path, tokens: &[usize], force: bool) -> Result<PathBuf, CliError> {
    if tokens.is_empty() {
        return Err(CliError::config("--tokens needs at least one value"));
    }
    if tokens.contains(&0) {
        return Err(CliError::config("fusion token counts must be at least 1"));
    }
    let mut cfg = ExperimentConfig::read(config)?;
    let (data, split) = prepare(&mut cfg)?;
    let list: Vec<String> = tokens.iter().map(usize::to_string).collect();
    let dir = cfg.run_dir("ablate-tokens", &format!("ablate-tokens\0{}", list.join(",")));
    claim_dir(&dir, force)?;

    let runs = exec::try_map(ExecMode::Parallel, tokens.to_vec(), |f| -> Result<_, CliError> {
        let mut run_cfg = cfg.clone();
        run_cfg.arch.fusion_tokens = f;
        let mut net = build(&run_cfg, Role::Teacher, &data)?;
        let report = train(&mut net, &data, &split, &run_cfg.train, None)?;
        Ok((f, run_cfg, report))
    })?;
    let mut runs = runs;
    runs.sort_by_key(|r| r.0);

    let mut csv = String::from("fusion_tokens,accuracy,macro_f1,param_count\n");
    let mut entries = Vec::new();
    let mut timing = Vec::new();
    for (f, run_cfg, report) in &runs {
        csv.push_str(&format!(
            "{f},{},{},{}\n",
            report.metrics.accuracy, report.metrics.macro_f1, report.param_count
        ));
        let (results, t) = split_timing(report);
        entries.push(json!({ "fusion_tokens": f, "config": run_cfg, "results": results }));
        timing.push(json!({ "fusion_tokens": f, "timing": t }));
    }
    write_text(&dir.join("tokens.csv"), &csv)?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "command": "ablate-tokens",
            "tokens": tokens,
            "runs": entries,
            "timing": timing,
        }),
    )?;
    eprint!("{csv}");
    Ok(dir)
}

