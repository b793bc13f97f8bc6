//! Run configuration: a TOML file with one section per command. Command-line
//! flags override individual fields after the file is read.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub seed: Option<u64>,
    pub format: Option<String>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub certify: CertifySection,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub rank: RankSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// `csv`, `idx` or `moons`.
    pub format: Option<String>,
    pub path: Option<PathBuf>,
    /// IDX label file.
    pub labels: Option<PathBuf>,
    /// Column index, header name, or `last`.
    pub label_column: Option<String>,
    pub delimiter: Option<char>,
    pub header: Option<bool>,
    /// `none`, `standardize` or `scale01`.
    pub preprocess: Option<String>,
    pub split_seed: Option<u64>,
    pub samples: Option<usize>,
    pub noise: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub objective: Option<String>,
    pub p: Option<String>,
    pub rho: Option<f64>,
    /// Multiply L1 radii by the square root of the input dimension.
    pub scale_rho: Option<bool>,
    pub hidden: Option<Vec<usize>>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    #[serde(default)]
    pub rho_grid: Vec<f64>,
    /// Attack used to pick among grid candidates on the validation split.
    pub select_attack: Option<String>,
    pub select_p: Option<String>,
    pub select_rho: Option<f64>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: Option<String>,
    pub p: Option<String>,
    pub rho: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub restarts: Option<usize>,
    pub split: Option<String>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifySection {
    pub rho: Option<Vec<f64>>,
    pub split: Option<String>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub method: String,
    pub path: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub name: Option<String>,
    #[serde(default)]
    pub models: Vec<ModelEntry>,
    pub rho: Option<Vec<f64>>,
    /// Attack labels such as `pgd_l2` or `fgsm_linf`.
    pub attacks: Option<Vec<String>>,
    pub certify: Option<bool>,
    pub split: Option<String>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankSection {
    #[serde(default)]
    pub tables: Vec<PathBuf>,
    pub attack: Option<String>,
    pub rho: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.exists() {
            bail!("config file {} does not exist", path.display());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut file: RunFile = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        file.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(file)
    }

    /// Relative paths in the file are taken relative to the file itself.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(v) = p {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.dataset.labels);
        fix(&mut self.train.model);
        fix(&mut self.train.out);
        fix(&mut self.attack.model);
        fix(&mut self.attack.out);
        fix(&mut self.certify.model);
        fix(&mut self.certify.out);
        fix(&mut self.report.out);
        fix(&mut self.rank.out);
        for m in &mut self.report.models {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
        }
        for t in &mut self.rank.tables {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
    }
}

/// Parses `0.1,0.2` style lists.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("`{s}` is not a number")))
        .collect()
}

pub fn check_radii(field: &str, rhos: &[f64]) -> Result<()> {
    if rhos.is_empty() {
        bail!("{field}: at least one radius is required");
    }
    if let Some(r) = rhos.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
        bail!("{field}: radius {r} must be finite and >= 0");
    }
    Ok(())
}
