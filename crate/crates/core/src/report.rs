//! Result tables, rank aggregation across datasets, and the bound-holds
//! statistic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, AttackKind};
use crate::error::{Error, Result};
use crate::network::{Example, NetworkParams};
use crate::objectives::{cross_entropy, sample_value, ObjectiveKind, RobustConfig};
use crate::rng::SeededRng;
use crate::scalar::Real;
use crate::tensor::Norm;

const ADV_PREFIX: &str = "adv_";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidConfig(format!("unknown output format `{other}`"))),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

/// Column label for an attack, e.g. `pgd_l2`.
pub fn attack_label(kind: AttackKind, p: Norm) -> String {
    let p = match p {
        Norm::L1 => "l1",
        Norm::L2 => "l2",
        Norm::Inf => "linf",
    };
    format!("{kind}_{p}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub rho: f64,
    pub clean_accuracy: f64,
    /// Adversarial accuracy keyed by [`attack_label`].
    #[serde(default)]
    pub adversarial: BTreeMap<String, f64>,
    #[serde(default)]
    pub certified_accuracy: Option<f64>,
    #[serde(default)]
    pub samples_per_second: Option<f64>,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, rho: f64, clean_accuracy: f64) -> Self {
        Self {
            method: method.into(),
            rho,
            clean_accuracy,
            adversarial: BTreeMap::new(),
            certified_accuracy: None,
            samples_per_second: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub dataset: String,
    pub rows: Vec<ReportRow>,
}

fn fraction_ok(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl ReportTable {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            rows: Vec::new(),
        }
    }

    /// Adds a row, keeping rows ordered by method then ascending `ρ`.
    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        let fractions = [row.clean_accuracy]
            .into_iter()
            .chain(row.adversarial.values().copied())
            .chain(row.certified_accuracy);
        if fractions.into_iter().any(|v| !fraction_ok(v)) {
            return Err(Error::InvalidConfig(format!(
                "accuracies for {} at rho {} must lie in [0, 1]",
                row.method, row.rho
            )));
        }
        if !(row.rho >= 0.0) {
            return Err(Error::InvalidConfig(format!("negative rho {}", row.rho)));
        }
        self.rows.push(row);
        self.rows
            .sort_by(|a, b| a.method.cmp(&b.method).then(a.rho.total_cmp(&b.rho)));
        Ok(())
    }

    pub fn methods(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.method.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn rhos(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.rows.iter().map(|r| r.rho).collect();
        r.sort_by(f64::total_cmp);
        r.dedup();
        r
    }

    pub fn attacks(&self) -> Vec<String> {
        self.rows
            .iter()
            .flat_map(|r| r.adversarial.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn find(&self, method: &str, rho: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && same_rho(r.rho, rho))
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["dataset".to_string(), "method".into(), "rho".into(), "clean_accuracy".into()];
        h.extend(self.attacks().into_iter().map(|a| format!("{ADV_PREFIX}{a}")));
        h.push("certified_accuracy".into());
        h.push("samples_per_second".into());
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let attacks = self.attacks();
        w.write_record(self.header())?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![self.dataset.clone(), r.method.clone(), r.rho.to_string(), r.clean_accuracy.to_string()];
            rec.extend(attacks.iter().map(|a| opt(r.adversarial.get(a).copied())));
            rec.push(opt(r.certified_accuracy));
            rec.push(opt(r.samples_per_second));
            w.write_record(&rec)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let col = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::Missing {
                what: "column",
                name: name.to_string(),
            })
        };
        let (cd, cm, cr, cc) = (col("dataset")?, col("method")?, col("rho")?, col("clean_accuracy")?);
        let (ccert, csps) = (col("certified_accuracy")?, col("samples_per_second")?);
        let adv_cols: Vec<(usize, String)> = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(ADV_PREFIX).map(|a| (i, a.to_string())))
            .collect();
        let mut table = ReportTable::default();
        for (r, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<Option<f64>> {
                let cell = rec.get(c).unwrap_or("");
                if cell.is_empty() {
                    return Ok(None);
                }
                cell.parse().map(Some).map_err(|_| Error::NonNumeric {
                    row: r + 2,
                    column: c,
                    value: cell.to_string(),
                })
            };
            let required = |c: usize| -> Result<f64> {
                num(c)?.ok_or_else(|| Error::Format(format!("row {}: empty required cell in column {c}", r + 2)))
            };
            table.dataset = rec.get(cd).unwrap_or("").to_string();
            let mut row = ReportRow::new(rec.get(cm).unwrap_or(""), required(cr)?, required(cc)?);
            for (c, a) in &adv_cols {
                if let Some(v) = num(*c)? {
                    row.adversarial.insert(a.clone(), v);
                }
            }
            row.certified_accuracy = num(ccert)?;
            row.samples_per_second = num(csps)?;
            table.push(row)?;
        }
        Ok(table)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ReportTable = serde_json::from_str(text)?;
        let mut table = ReportTable::new(raw.dataset);
        for row in raw.rows {
            table.push(row)?;
        }
        Ok(table)
    }

    pub fn render(&self, format: Format) -> Result<String> {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    pub fn parse(text: &str, format: Format) -> Result<Self> {
        match format {
            Format::Csv => Self::from_csv(text),
            Format::Json => Self::from_json(text),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, format: Format) -> Result<()> {
        std::fs::write(path, self.render(format)?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, Format::from_path(path))
    }

    /// Method-by-`ρ` grid of adversarial accuracies for one attack, the
    /// layout of a per-dataset accuracy table.
    pub fn pivot(&self, attack: &str) -> PivotTable {
        let rhos = self.rhos();
        let rows = self
            .methods()
            .into_iter()
            .map(|m| {
                let cells = rhos
                    .iter()
                    .map(|&rho| self.find(&m, rho).and_then(|r| r.adversarial.get(attack).copied()))
                    .collect();
                (m, cells)
            })
            .collect();
        PivotTable {
            attack: attack.to_string(),
            rhos,
            rows,
        }
    }
}

fn same_rho(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PivotTable {
    pub attack: String,
    pub rhos: Vec<f64>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl fmt::Display for PivotTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "method")?;
        for r in &self.rhos {
            write!(f, ",{r}")?;
        }
        writeln!(f)?;
        for (m, cells) in &self.rows {
            write!(f, "{m}")?;
            for c in cells {
                match c {
                    Some(v) => write!(f, ",{v}")?,
                    None => write!(f, ",")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Ranks 1..n by descending value; tied entries share the mean of their positions.
pub fn mean_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Average over tables of each method's rank by adversarial accuracy at `ρ`.
pub fn rank_aggregate(tables: &[ReportTable], attack: &str, rho: f64) -> Result<BTreeMap<String, f64>> {
    if tables.is_empty() {
        return Err(Error::Empty);
    }
    let methods: BTreeSet<String> = tables.iter().flat_map(|t| t.methods()).collect();
    let mut totals: BTreeMap<String, f64> = methods.iter().map(|m| (m.clone(), 0.0)).collect();
    for t in tables {
        let mut values = Vec::with_capacity(methods.len());
        for m in &methods {
            let row = t.find(m, rho).ok_or_else(|| Error::Missing {
                what: "method at rho",
                name: format!("{m} @ {rho} in {}", t.dataset),
            })?;
            values.push(*row.adversarial.get(attack).ok_or_else(|| Error::Missing {
                what: "attack column",
                name: format!("{attack} for {m} @ {rho} in {}", t.dataset),
            })?);
        }
        for (m, r) in methods.iter().zip(mean_ranks(&values)) {
            *totals.get_mut(m).unwrap() += r;
        }
    }
    let n = tables.len() as f64;
    Ok(totals.into_iter().map(|(m, s)| (m, s / n)).collect())
}

/// Fraction of samples whose per-sample robust objective (aRUB or RUB) is at
/// least the cross-entropy at the PGD adversarial point for the same `ρ` and
/// `p`. `attack` supplies PGD steps, restarts and seed; its radius and norm
/// are replaced by the bound's. A relative slack of `1e-12` absorbs rounding
/// between the two loss formulas.
pub fn bound_holds_fraction<T: Real>(
    params: &NetworkParams<T>,
    examples: &[Example<'_, T>],
    bound: &RobustConfig,
    attack: &AttackConfig,
) -> Result<f64> {
    if !matches!(bound.objective, ObjectiveKind::Arub | ObjectiveKind::Rub) {
        return Err(Error::InvalidConfig("bound must be arub or rub".into()));
    }
    bound.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let mut pgd_cfg = *attack;
    pgd_cfg.kind = AttackKind::Pgd;
    pgd_cfg.p = bound.p;
    pgd_cfg.rho = bound.rho;
    pgd_cfg.validate()?;
    let holds: Vec<bool> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let v = sample_value(params, *ex, bound)?.as_f64();
            let local = pgd_cfg.with_seed(SeededRng::derive(pgd_cfg.seed, i as u64).seed());
            let d = pgd(params, ex.x, ex.y, &local)?;
            let xd: Vec<T> = ex.x.iter().zip(&d).map(|(&a, &b)| a + b).collect();
            let adv = cross_entropy(ex.y, &params.logits(&xd)?)?.as_f64();
            Ok(v >= adv - 1e-12 * adv.abs().max(1.0))
        })
        .collect::<Result<_>>()?;
    Ok(holds.iter().filter(|&&h| h).count() as f64 / holds.len() as f64)
}
