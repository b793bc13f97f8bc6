use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use robustnet::attacks::{attack_all, clean_accuracy, AttackConfig, AttackKind};
use robustnet::data::{load_delimited, load_idx, make_moons, LabelColumn, PreprocessKind};
use robustnet::report::{attack_label, rank_aggregate, Format, ReportRow, ReportTable};
use robustnet::robust_bound::{certify_all, CertResult};
use robustnet::trainer::{
    grid_select, load_checkpoint, save_checkpoint, scale_rho_l1, train as run_training, CheckpointMeta, TrainConfig,
};
use robustnet::{Dataset64, Example, Network64, Norm, ObjectiveKind, RobustConfig};

use crate::config::{check_radii, parse_list, DatasetSection, ModelEntry, RunFile};
use crate::Flags;

fn field<T: std::str::FromStr>(name: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow!("{name}: {e}"))
}

fn output_format(flags: &Flags, file: &RunFile, out: Option<&Path>) -> Result<Format> {
    match flags.format.as_deref().or(file.format.as_deref()) {
        Some(f) => field("format", f),
        None => Ok(out.map_or(Format::Csv, Format::from_path)),
    }
}

fn seed(flags: &Flags, file: &RunFile) -> u64 {
    flags.seed.or(file.seed).unwrap_or(0)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn render_records<R: Serialize>(records: &[R], format: Format) -> Result<String> {
    match format {
        Format::Json => Ok(serde_json::to_string_pretty(records)? + "\n"),
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in records {
                w.serialize(r)?;
            }
            Ok(String::from_utf8(w.into_inner()?)?)
        }
    }
}

fn load_dataset(flags: &Flags, section: &DatasetSection) -> Result<Dataset64> {
    let path = flags.dataset.clone().or_else(|| section.path.clone());
    let format = match (&section.format, &path) {
        (Some(f), _) => f.clone(),
        (None, Some(p)) if p.as_os_str() == "moons" => "moons".into(),
        (None, Some(p)) if p.to_string_lossy().contains("idx") => "idx".into(),
        (None, Some(_)) => "csv".into(),
        (None, None) => bail!("dataset.path: required (or set dataset.format = \"moons\")"),
    };
    let split_seed = section.split_seed.unwrap_or(0);
    let (ds, default_pre) = match format.as_str() {
        "moons" => (
            make_moons(section.samples.unwrap_or(500), section.noise.unwrap_or(0.1), split_seed)?,
            PreprocessKind::Standardize,
        ),
        "csv" => {
            let path = path.ok_or_else(|| anyhow!("dataset.path: required for csv"))?;
            let label: LabelColumn = section.label_column.as_deref().unwrap_or("last").parse().unwrap();
            let delim = section.delimiter.unwrap_or(',');
            if !delim.is_ascii() {
                bail!("dataset.delimiter: must be a single ASCII character");
            }
            (
                load_delimited(&path, &label, delim as u8, section.header.unwrap_or(false))
                    .with_context(|| format!("loading {}", path.display()))?,
                PreprocessKind::Standardize,
            )
        }
        "idx" => {
            let images = path.ok_or_else(|| anyhow!("dataset.path: required for idx"))?;
            let labels = section.labels.clone().ok_or_else(|| anyhow!("dataset.labels: required for idx"))?;
            (load_idx(&images, &labels)?, PreprocessKind::Scale01)
        }
        other => bail!("dataset.format: unknown format `{other}` (expected csv, idx or moons)"),
    };
    let pre = match &section.preprocess {
        Some(p) => field("dataset.preprocess", p)?,
        None => default_pre,
    };
    Ok(ds.split(split_seed)?.preprocess(pre)?)
}

fn split_examples<'a>(ds: &'a Dataset64, split: &str) -> Result<Vec<Example<'a, f64>>> {
    Ok(match split {
        "train" => ds.train()?,
        "val" => ds.val()?,
        "test" => ds.test()?,
        "all" => ds.all_examples(),
        other => bail!("split: unknown split `{other}` (expected train, val, test or all)"),
    })
}

fn model_path(flags: &Flags, section: Option<&PathBuf>, name: &str) -> Result<PathBuf> {
    flags
        .model
        .first()
        .map(PathBuf::from)
        .or_else(|| section.cloned())
        .ok_or_else(|| anyhow!("{name}.model: required"))
}

fn load_model(path: &Path, ds: &Dataset64) -> Result<Network64> {
    let net = Network64::load(path).with_context(|| format!("loading model {}", path.display()))?;
    if net.input_dim() != ds.dim() || net.class_count() != ds.class_count() {
        bail!(
            "model {} expects {} features and {} classes; dataset has {} and {}",
            path.display(),
            net.input_dim(),
            net.class_count(),
            ds.dim(),
            ds.class_count()
        );
    }
    Ok(net)
}

fn radii(flags: &Flags, from_file: Option<&Vec<f64>>, name: &str) -> Result<Vec<f64>> {
    let r = match &flags.rho {
        Some(s) => parse_list(s).with_context(|| format!("{name}.rho"))?,
        None => from_file.cloned().ok_or_else(|| anyhow!("{name}.rho: required"))?,
    };
    check_radii(&format!("{name}.rho"), &r)?;
    Ok(r)
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    objective: f64,
}

pub fn train(flags: &Flags) -> Result<()> {
    let file = RunFile::load(flags.config.as_deref())?;
    let s = &file.train;
    let ds = load_dataset(flags, &file.dataset)?;
    let seed = seed(flags, &file);
    let objective: ObjectiveKind = field(
        "train.objective",
        flags.objective.as_deref().or(s.objective.as_deref()).unwrap_or("nominal"),
    )?;
    let default_p = if objective == ObjectiveKind::Rub { "1" } else { "inf" };
    let p: Norm = field("train.p", flags.p.as_deref().or(s.p.as_deref()).unwrap_or(default_p))?;
    let mut rho = match &flags.rho {
        Some(r) => *parse_list(r)?.first().ok_or_else(|| anyhow!("train.rho: empty"))?,
        None => s.rho.unwrap_or(0.0),
    };
    let mut rho_grid = s.rho_grid.clone();
    if s.scale_rho.unwrap_or(false) && p == Norm::L1 {
        rho = scale_rho_l1(rho, ds.dim());
        rho_grid.iter_mut().for_each(|r| *r = scale_rho_l1(*r, ds.dim()));
    }
    let robust = RobustConfig::new(objective, p, rho).context("train")?;
    let mut cfg = TrainConfig::new(
        robust,
        s.learning_rate.unwrap_or(0.1),
        s.batch_size.unwrap_or(32),
        s.iterations.unwrap_or(1000),
        seed,
    );
    cfg.lr_grid = s.lr_grid.clone();
    cfg.rho_grid = rho_grid;
    cfg.validate().context("train")?;
    let mut widths = vec![ds.dim()];
    widths.extend(s.hidden.clone().unwrap_or_else(|| vec![32, 32]));
    widths.push(ds.class_count());
    let init = Network64::init(&widths, seed)?;

    let (history, chosen) = if cfg.lr_grid.is_empty() && cfg.rho_grid.is_empty() {
        (run_training(&init, &ds, &cfg)?, cfg.clone())
    } else {
        let kind: AttackKind = field("train.select_attack", s.select_attack.as_deref().unwrap_or("pgd"))?;
        let sp: Norm = match &s.select_p {
            Some(v) => field("train.select_p", v)?,
            None if kind == AttackKind::Fgsm => Norm::Inf,
            None => p,
        };
        let attack = AttackConfig::new(kind, sp, s.select_rho.unwrap_or(rho))
            .context("train.select_attack")?
            .with_seed(seed);
        let sel = grid_select(&init, &ds, &cfg, &attack)?;
        eprintln!(
            "selected lr={} rho={} (validation adversarial accuracy {:.4})",
            sel.config.learning_rate, sel.config.objective.rho, sel.val_adversarial
        );
        (sel.history, sel.config)
    };

    let mut metrics = BTreeMap::new();
    for (name, part) in [("train_accuracy", ds.train()?), ("val_accuracy", ds.val()?), ("test_accuracy", ds.test()?)] {
        if !part.is_empty() {
            metrics.insert(name.to_string(), clean_accuracy(&history.params, &part)?);
        }
    }
    metrics.insert("samples_per_second".into(), history.samples_per_second);
    if let Some(v) = history.objective_values.last() {
        metrics.insert("final_objective".into(), *v);
    }
    let model = flags
        .model
        .first()
        .map(PathBuf::from)
        .or_else(|| s.model.clone())
        .unwrap_or_else(|| PathBuf::from("model.bin"));
    let meta = CheckpointMeta {
        config: chosen,
        iteration: history.objective_values.len(),
        metrics: metrics.clone(),
    };
    save_checkpoint(&model, &history.params, &meta).with_context(|| format!("writing {}", model.display()))?;
    eprintln!("wrote {}", model.display());
    for (k, v) in &metrics {
        eprintln!("{k} = {v:.6}");
    }
    let out = flags.out.clone().or_else(|| s.out.clone());
    if let Some(out) = out {
        let rows: Vec<HistoryRow> = history
            .objective_values
            .iter()
            .enumerate()
            .map(|(iteration, &objective)| HistoryRow { iteration, objective })
            .collect();
        let format = output_format(flags, &file, Some(&out))?;
        emit(Some(&out), &render_records(&rows, format)?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackRow {
    sample_id: usize,
    attack: AttackKind,
    p: Norm,
    rho: f64,
    label: usize,
    clean_prediction: usize,
    adversarial_prediction: usize,
    perturbation_norm: f64,
    success: bool,
}

pub fn attack(flags: &Flags) -> Result<()> {
    let file = RunFile::load(flags.config.as_deref())?;
    let s = &file.attack;
    let ds = load_dataset(flags, &file.dataset)?;
    let net = load_model(&model_path(flags, s.model.as_ref(), "attack")?, &ds)?;
    let kind: AttackKind = field("attack.kind", flags.attack.as_deref().or(s.kind.as_deref()).unwrap_or("pgd"))?;
    let p: Norm = field("attack.p", flags.p.as_deref().or(s.p.as_deref()).unwrap_or("inf"))?;
    let rhos = radii(flags, s.rho.as_ref(), "attack")?;
    let examples = split_examples(&ds, s.split.as_deref().unwrap_or("test"))?;
    let mut rows = Vec::new();
    for &rho in &rhos {
        let mut cfg = AttackConfig::new(kind, p, rho).context("attack")?.with_seed(seed(flags, &file));
        if let Some(v) = s.steps {
            cfg.steps = v;
        }
        if let Some(v) = s.restarts {
            cfg.restarts = v;
        }
        cfg.step_size = s.step_size;
        cfg.validate().context("attack")?;
        let records = attack_all(&net, &examples, &cfg)?;
        let acc = records.iter().filter(|r| r.correct()).count() as f64 / records.len().max(1) as f64;
        eprintln!("{} rho={rho}: adversarial accuracy {acc:.4}", attack_label(kind, p));
        rows.extend(records.into_iter().map(|r| AttackRow {
            success: r.clean_prediction == r.label && !r.correct(),
            sample_id: r.sample_id,
            attack: r.attack,
            p: r.p,
            rho: r.rho,
            label: r.label,
            clean_prediction: r.clean_prediction,
            adversarial_prediction: r.adversarial_prediction,
            perturbation_norm: r.perturbation_norm,
        }));
    }
    let out = flags.out.clone().or_else(|| s.out.clone());
    let format = output_format(flags, &file, out.as_deref())?;
    emit(out.as_deref(), &render_records(&rows, format)?)
}

#[derive(Serialize)]
struct CurvePoint {
    rho: f64,
    certified_accuracy: f64,
}

/// Path of the certified-accuracy curve written next to the records file.
pub fn curve_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}-curve{ext}"))
}

pub fn certify(flags: &Flags) -> Result<()> {
    let file = RunFile::load(flags.config.as_deref())?;
    let s = &file.certify;
    if let Some(p) = &flags.p {
        if field::<Norm>("p", p)? != Norm::L1 {
            bail!("p: certification is available for p = 1 only");
        }
    }
    let ds = load_dataset(flags, &file.dataset)?;
    let net = load_model(&model_path(flags, s.model.as_ref(), "certify")?, &ds)?;
    let rhos = radii(flags, s.rho.as_ref(), "certify")?;
    let examples = split_examples(&ds, s.split.as_deref().unwrap_or("test"))?;
    let mut records: Vec<CertResult> = Vec::new();
    let mut curve = Vec::new();
    for &rho in &rhos {
        let r = certify_all(&net, &examples, rho)?;
        let acc = r.iter().filter(|c| c.certified).count() as f64 / r.len().max(1) as f64;
        eprintln!("rho={rho}: certified accuracy {acc:.4}");
        curve.push(CurvePoint { rho, certified_accuracy: acc });
        records.extend(r);
    }
    let out = flags.out.clone().or_else(|| s.out.clone());
    let format = output_format(flags, &file, out.as_deref())?;
    emit(out.as_deref(), &render_records(&records, format)?)?;
    if let Some(out) = out {
        emit(Some(&curve_path(&out)), &render_records(&curve, format)?)?;
    }
    Ok(())
}

fn parse_attack_label(label: &str) -> Result<(AttackKind, Norm)> {
    let (kind, p) = label
        .split_once('_')
        .ok_or_else(|| anyhow!("report.attacks: `{label}` should look like pgd_l2"))?;
    let p = match p {
        "l1" => Norm::L1,
        "l2" => Norm::L2,
        "linf" => Norm::Inf,
        other => bail!("report.attacks: unknown norm `{other}` in `{label}`"),
    };
    Ok((field("report.attacks", kind)?, p))
}

pub fn report(flags: &Flags) -> Result<()> {
    let file = RunFile::load(flags.config.as_deref())?;
    let s = &file.report;
    let ds = load_dataset(flags, &file.dataset)?;
    let mut models: Vec<ModelEntry> = s.models.clone();
    for m in &flags.model {
        let (method, path) = m
            .split_once('=')
            .ok_or_else(|| anyhow!("--model: expected method=path, got `{m}`"))?;
        models.push(ModelEntry { method: method.into(), path: path.into() });
    }
    if models.is_empty() {
        bail!("report.models: at least one model is required");
    }
    let rhos = radii(flags, s.rho.as_ref(), "report")?;
    let labels = match &flags.attack {
        Some(a) => a.split(',').map(str::to_string).collect(),
        None => s
            .attacks
            .clone()
            .unwrap_or_else(|| vec!["pgd_l1".into(), "pgd_l2".into(), "pgd_linf".into()]),
    };
    let attacks: Vec<(String, AttackKind, Norm)> = labels
        .iter()
        .map(|l| parse_attack_label(l).map(|(k, p)| (attack_label(k, p), k, p)))
        .collect::<Result<_>>()?;
    let examples = split_examples(&ds, s.split.as_deref().unwrap_or("test"))?;
    let seed = seed(flags, &file);
    let mut table = ReportTable::new(s.name.clone().unwrap_or_else(|| "dataset".into()));
    for m in &models {
        let net = load_model(&m.path, &ds)?;
        let sps = load_checkpoint::<f64>(&m.path)
            .ok()
            .and_then(|(_, meta)| meta.metrics.get("samples_per_second").copied());
        let clean = clean_accuracy(&net, &examples)?;
        for &rho in &rhos {
            let mut row = ReportRow::new(m.method.clone(), rho, clean);
            for (label, kind, p) in &attacks {
                let cfg = AttackConfig::new(*kind, *p, rho).with_context(|| format!("report.attacks: {label}"))?;
                let recs = attack_all(&net, &examples, &cfg.with_seed(seed))?;
                let acc = recs.iter().filter(|r| r.correct()).count() as f64 / recs.len() as f64;
                row.adversarial.insert(label.clone(), acc);
            }
            if s.certify.unwrap_or(true) {
                let c = certify_all(&net, &examples, rho)?;
                row.certified_accuracy = Some(c.iter().filter(|r| r.certified).count() as f64 / c.len() as f64);
            }
            row.samples_per_second = sps;
            table.push(row)?;
        }
    }
    let out = flags.out.clone().or_else(|| s.out.clone());
    let format = output_format(flags, &file, out.as_deref())?;
    emit(out.as_deref(), &table.render(format)?)
}

#[derive(Serialize)]
struct RankRow {
    method: String,
    mean_rank: f64,
}

pub fn rank(flags: &Flags) -> Result<()> {
    let file = RunFile::load(flags.config.as_deref())?;
    let s = &file.rank;
    let paths: Vec<PathBuf> = if flags.table.is_empty() { s.tables.clone() } else { flags.table.clone() };
    if paths.is_empty() {
        bail!("rank.tables: at least one table is required");
    }
    let tables: Vec<ReportTable> = paths
        .iter()
        .map(|p| ReportTable::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    let attack = flags
        .attack
        .clone()
        .or_else(|| s.attack.clone())
        .ok_or_else(|| anyhow!("rank.attack: required (e.g. pgd_l2)"))?;
    let rho = match &flags.rho {
        Some(r) => *parse_list(r)?.first().ok_or_else(|| anyhow!("rank.rho: empty"))?,
        None => s.rho.ok_or_else(|| anyhow!("rank.rho: required"))?,
    };
    let ranks = rank_aggregate(&tables, &attack, rho)?;
    let rows: Vec<RankRow> = ranks
        .into_iter()
        .map(|(method, mean_rank)| RankRow { method, mean_rank })
        .collect();
    let out = flags.out.clone().or_else(|| s.out.clone());
    let format = output_format(flags, &file, out.as_deref())?;
    emit(out.as_deref(), &render_records(&rows, format)?)
}
