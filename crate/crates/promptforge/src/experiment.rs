//! Experiment configuration and method × seed sweeps.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::data::{generate_synthetic, load_directory, DataError, Dataset};
use crate::eval::{average, markdown_table, report_for, summary_csv, AveragedRow, EvalError, EvalReport, CSV_HEADER};
use crate::par::{self, Execution};
use crate::prompt::MethodSpec;
use crate::trainer::{default_weights, encode_dataset, train_with_exec, Checkpoint, SplitSpec, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { classes: usize, per_class: usize, seed: u64 },
    Directory(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        Ok(match self {
            Self::Synthetic { classes, per_class, seed } => generate_synthetic(*classes, *per_class, *seed)?,
            Self::Directory(p) => load_directory(p)?,
        })
    }

    /// Compact single-line form stored in checkpoint headers.
    pub fn describe(&self) -> String {
        match self {
            Self::Synthetic { classes, per_class, seed } => format!("synthetic:{classes}:{per_class}:{seed}"),
            Self::Directory(p) => format!("dir:{}", p.display()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        if let Some(p) = text.strip_prefix("dir:") {
            return Ok(Self::Directory(PathBuf::from(p)));
        }
        let parts: Vec<&str> = text.strip_prefix("synthetic:").unwrap_or("").split(':').collect();
        match parts[..] {
            [c, n, s] => {
                let num = |v: &str| {
                    v.parse::<u64>()
                        .map_err(|_| ExperimentError::Config(format!("bad data source {text:?}")))
                };
                Ok(Self::Synthetic {
                    classes: num(c)? as usize,
                    per_class: num(n)? as usize,
                    seed: num(s)?,
                })
            }
            _ => Err(ExperimentError::Config(format!("bad data source {text:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Shared training settings; `method` and `seed` are overridden per cell.
    pub train: TrainConfig,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub out_dir: PathBuf,
}

pub const DEFAULT_METHODS: [&str; 4] = ["coop", "cocoop", "mlp-pl+mlp-ft", "full"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            methods: DEFAULT_METHODS.iter().map(|m| MethodSpec::preset(m).expect("preset")).collect(),
            seeds: vec![1, 2, 3],
            data: DataSource::Synthetic {
                classes: 8,
                per_class: 64,
                seed: 0,
            },
            out_dir: PathBuf::from("out"),
        }
    }
}

fn list<T>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| f(s).ok_or_else(|| ExperimentError::Config(format!("bad entry {s:?} in {key}"))))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let (mut classes, mut per_class, mut data_seed, mut dir) = (8usize, 64usize, 0u64, None);
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| ExperimentError::Config(format!("line {}: bad value for {k}: {v:?}", n + 1)))
            };
            match k {
                "methods" | "method" => cfg.methods = list(k, v, |s| MethodSpec::preset(s).ok())?,
                "seeds" | "seed" => cfg.seeds = list(k, v, |s| s.parse().ok())?,
                "synthetic_classes" => classes = num(v)? as usize,
                "synthetic_per_class" => per_class = num(v)? as usize,
                "data_seed" => data_seed = num(v)?,
                "data_dir" => dir = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                _ => {
                    if !cfg.train.set(k, v)? {
                        return Err(ExperimentError::Config(format!("line {}: unknown key {k:?}", n + 1)));
                    }
                }
            }
        }
        cfg.data = match dir {
            Some(p) => DataSource::Directory(p),
            None => DataSource::Synthetic {
                classes,
                per_class,
                seed: data_seed,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(ExperimentError::Config("at least one method and one seed are required".into()));
        }
        for m in &self.methods {
            self.cell_config(m, self.seeds[0]).validate()?;
        }
        Ok(())
    }

    /// Text form that [`ExperimentConfig::parse`] maps back to `self`.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.train.pairs() {
            if k != "method" && k != "seed" {
                writeln!(s, "{k}={v}").unwrap();
            }
        }
        let methods: Vec<String> = self.methods.iter().map(MethodSpec::name).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        writeln!(s, "methods={}", methods.join(",")).unwrap();
        writeln!(s, "seeds={}", seeds.join(",")).unwrap();
        match &self.data {
            DataSource::Synthetic { classes, per_class, seed } => {
                writeln!(s, "synthetic_classes={classes}").unwrap();
                writeln!(s, "synthetic_per_class={per_class}").unwrap();
                writeln!(s, "data_seed={seed}").unwrap();
            }
            DataSource::Directory(p) => writeln!(s, "data_dir={}", p.display()).unwrap(),
        }
        writeln!(s, "out_dir={}", self.out_dir.display()).unwrap();
        s
    }

    fn cell_config(&self, method: &MethodSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            method: *method,
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub reports: Vec<EvalReport>,
    pub averaged: Vec<AveragedRow>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains and evaluates every method × seed cell without touching disk.
pub fn sweep(cfg: &ExperimentConfig, ds: &Dataset, exec: Execution) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let split = SplitSpec::half(ds.num_classes());
    let weights = default_weights(&cfg.train);
    let bank = encode_dataset(&weights, ds, exec)?;
    let cells: Vec<(MethodSpec, u64)> = cfg
        .methods
        .iter()
        .flat_map(|m| cfg.seeds.iter().map(move |s| (*m, *s)))
        .collect();
    let meta = vec![("data".to_string(), cfg.data.describe())];
    let results = par::map_with(exec, &cells, |(m, s)| -> Result<(EvalReport, Checkpoint)> {
        let tc = cfg.cell_config(m, *s);
        let state = train_with_exec(Arc::clone(&weights), &bank, ds, &split, &tc, exec)?;
        let report = report_for(&state, ds, &bank, exec)?;
        Ok((report, Checkpoint::from_state(&state, &ds.class_names, meta.clone())))
    });
    let mut reports = Vec::with_capacity(cells.len());
    let mut checkpoints = Vec::with_capacity(cells.len());
    for r in results {
        let (rep, ck) = r?;
        reports.push(rep);
        checkpoints.push(ck);
    }
    Ok(ExperimentOutput {
        averaged: average(&reports),
        reports,
        checkpoints,
    })
}

pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        writeln!(s, "{}", r.csv_row()).unwrap();
    }
    s
}

pub fn per_class_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("method,seed,class,accuracy\n");
    for r in reports {
        for (name, acc) in &r.per_class_acc {
            writeln!(s, "{},{},{},{:.4}", r.method, r.seed, name, acc).unwrap();
        }
    }
    s
}

pub fn summary_markdown(cfg: &ExperimentConfig, out: &ExperimentOutput) -> String {
    format!(
        "# Base-to-new results\n\nSeed-averaged over {} seed(s). Base and New are top-1 accuracy (%), Hos is their harmonic mean, Disc the mean positive-vs-negative prompt cosine distance on base classes.\n\n{}\n## Config\n\n```text\n{}```\n",
        cfg.seeds.len(),
        markdown_table(&out.averaged),
        cfg.echo()
    )
}

/// Pulls the config echo back out of a Markdown summary.
pub fn config_from_markdown(md: &str) -> Result<ExperimentConfig> {
    let start = md
        .find("```text\n")
        .ok_or_else(|| ExperimentError::Config("no config block in summary".into()))?
        + "```text\n".len();
    let end = md[start..]
        .find("```")
        .ok_or_else(|| ExperimentError::Config("unterminated config block".into()))?;
    ExperimentConfig::parse(&md[start..start + end])
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Runs the sweep and writes results.csv, per_class.csv, summary.csv,
/// summary.md and one checkpoint per cell into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let ds = cfg.data.load()?;
    let out = sweep(cfg, &ds, Execution::default())?;
    let ck_dir = cfg.out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|source| ExperimentError::Io {
        path: ck_dir.clone(),
        source,
    })?;
    write(&cfg.out_dir.join("results.csv"), results_csv(&out.reports))?;
    write(&cfg.out_dir.join("per_class.csv"), per_class_csv(&out.reports))?;
    write(&cfg.out_dir.join("summary.csv"), summary_csv(&out.averaged))?;
    write(&cfg.out_dir.join("summary.md"), summary_markdown(cfg, &out))?;
    for ck in &out.checkpoints {
        let name = format!("{}_seed{}.ckpt", ck.config.method.name(), ck.config.seed);
        ck.save(&ck_dir.join(name))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_and_reparse() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn non_default_round_trip() {
        let text = "# sweep\nepochs = 3\nbase_lr=0.0015\nlambda=0.35\nmethods=ctp, tft\nseeds=4,4\ndata_dir=/tmp/x y\nout_dir=res\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.base_lr, 0.0015);
        assert_eq!(cfg.seeds, vec![4, 4]);
        assert_eq!(cfg.data, DataSource::Directory(PathBuf::from("/tmp/x y")));
        assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::parse("bogus=1").is_err());
        assert!(ExperimentConfig::parse("epochs").is_err());
        assert!(ExperimentConfig::parse("methods=").is_err());
        assert!(ExperimentConfig::parse("methods=proda").is_err());
        assert!(ExperimentConfig::parse("lambda=2").is_err());
        assert!(ExperimentConfig::parse("tau=0").is_err());
        assert!(ExperimentConfig::parse("shots=x").is_err());
    }

    #[test]
    fn data_source_descriptions_parse() {
        for d in [
            DataSource::Synthetic {
                classes: 6,
                per_class: 9,
                seed: 2,
            },
            DataSource::Directory(PathBuf::from("some/where")),
        ] {
            assert_eq!(DataSource::parse(&d.describe()).unwrap(), d);
        }
        assert!(DataSource::parse("synthetic:1").is_err());
    }
}
