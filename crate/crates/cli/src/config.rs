//! Run configuration. A run is described by a flat `key=value` file, and
//! every file key has a command-line flag that overrides it. Repeated
//! `spec=` lines append; any other repeated key keeps its last value.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use confound::constraint::ConstraintSpec;
use confound::data::CsvSchema;
use confound::estimator::Direction;
use confound::policy::Policy;
use confound::sensitivity::SensitivityModel;
use confound::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Bounds,
    Learn,
    Selfcheck,
}

impl Command {
    pub fn parse(s: &str) -> Result<Command> {
        match s {
            "simulate" => Ok(Command::Simulate),
            "bounds" => Ok(Command::Bounds),
            "learn" => Ok(Command::Learn),
            "selfcheck" => Ok(Command::Selfcheck),
            other => Err(Error::Parse(format!(
                "unknown command '{other}' (expected simulate, bounds, learn, or selfcheck)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic { n: usize },
    Csv { path: PathBuf, schema: CsvSchema },
}

/// Wall-clock timing per cell, or zeros for byte-reproducible output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Wall,
    Off,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    pub source: DataSource,
    pub seeds: Vec<u64>,
    /// Model template; the sweep grid rewrites its parameter per cell.
    pub model: SensitivityModel,
    pub specs: Vec<ConstraintSpec>,
    pub grid: Vec<f64>,
    pub directions: Vec<Direction>,
    pub out: PathBuf,
    pub workers: usize,
    pub timing: Timing,
    pub policy: Policy,
    /// Component policies for mixture learning.
    pub components: Vec<Policy>,
    /// Monte Carlo draws behind the ground-truth value in learn reports.
    pub mc_draws: usize,
}

/// Command-line values that override file keys. `None`/empty means the flag
/// was not given.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub n: Option<usize>,
    pub seeds: Option<String>,
    pub grid: Option<String>,
    pub model: Option<String>,
    pub specs: Vec<String>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub direction: Option<String>,
}

/// The file keys, with the repeatable ones kept as lists.
#[derive(Debug, Default)]
struct FileKeys {
    scalars: BTreeMap<String, String>,
    specs: Vec<String>,
    components: Option<Vec<String>>,
}

const KNOWN_KEYS: &[&str] = &[
    "command",
    "n",
    "seeds",
    "grid",
    "model",
    "spec",
    "out",
    "workers",
    "direction",
    "timing",
    "csv",
    "csv_reward",
    "csv_action",
    "csv_covariates",
    "csv_actions",
    "policy",
    "component",
    "mc",
];

fn parse_file(path: &Path) -> Result<FileKeys> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("config '{}': {e}", path.display())))?;
    let mut keys = FileKeys::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("config line {}: '{line}' is not key=value", lineno + 1))
        })?;
        let (k, v) = (k.trim(), v.trim().to_string());
        if !KNOWN_KEYS.contains(&k) {
            return Err(Error::Parse(format!("config line {}: unknown key '{k}'", lineno + 1)));
        }
        if k == "spec" || k == "component" {
            keys.specs_entry(k).push(v);
        } else {
            keys.scalars.insert(k.to_string(), v);
        }
    }
    Ok(keys)
}

impl FileKeys {
    fn specs_entry(&mut self, key: &str) -> &mut Vec<String> {
        if key == "spec" {
            &mut self.specs
        } else {
            self.components.get_or_insert_with(Vec::new)
        }
    }
}

/// Seed lists accept `a..b` (half-open), a comma list, or one value.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let s = s.trim();
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad_seed(s))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad_seed(s))?;
        if lo >= hi {
            return Err(bad_seed(s));
        }
        return Ok((lo..hi).collect());
    }
    let seeds: Vec<u64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad_seed(s)))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(bad_seed(s));
    }
    Ok(seeds)
}

fn bad_seed(s: &str) -> Error {
    Error::Parse(format!("seeds '{s}' must be 'a..b' or a comma list of integers"))
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("grid entry '{}' is not a number", t.trim())))
        })
        .collect()
}

fn parse_directions(s: &str) -> Result<Vec<Direction>> {
    match s {
        "both" => Ok(vec![Direction::Lower, Direction::Upper]),
        other => Ok(vec![Direction::parse(other)?]),
    }
}

/// Policy tokens: `nominal`, `uniform`, `always-K`, or `logistic:c1;c2;...`.
pub fn parse_policy(s: &str) -> Result<Policy> {
    if s == "nominal" {
        return Ok(Policy::synthetic_nominal());
    }
    if s == "uniform" {
        return Ok(Policy::Uniform);
    }
    if let Some(k) = s.strip_prefix("always-") {
        let action: usize =
            k.parse().map_err(|_| Error::Parse(format!("policy '{s}': bad action index")))?;
        return Ok(Policy::Constant { action });
    }
    if let Some(rest) = s.strip_prefix("logistic:") {
        let coefficients: Vec<f64> = rest
            .split(';')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("policy '{s}': bad coefficient '{t}'")))
            })
            .collect::<Result<_>>()?;
        if coefficients.is_empty() {
            return Err(Error::Parse(format!("policy '{s}': no coefficients")));
        }
        return Ok(Policy::Logistic { coefficients });
    }
    Err(Error::Parse(format!(
        "unknown policy '{s}' (expected nominal, uniform, always-K, or logistic:c1;c2;...)"
    )))
}

/// Rebuilds the template model at one sweep-grid value.
pub fn model_at(template: &SensitivityModel, value: f64) -> Result<SensitivityModel> {
    use confound::sensitivity::{BoxModel, FDivergenceModel};
    Ok(match template {
        SensitivityModel::Box(_) => SensitivityModel::Box(BoxModel::new(value)?),
        SensitivityModel::FDivergence(f) => {
            SensitivityModel::FDivergence(FDivergenceModel::new(f.kind, value)?)
        }
    })
}

/// Merges defaults, the optional config file, and command-line overrides,
/// then validates the result for the given command.
pub fn load(command: Command, config_path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let file = match config_path {
        Some(p) => parse_file(p)?,
        None => FileKeys::default(),
    };
    let scalar = |key: &str| file.scalars.get(key).map(String::as_str);

    let n = match ov.n {
        Some(n) => n,
        None => match scalar("n") {
            Some(v) => v.parse().map_err(|_| Error::Parse(format!("n '{v}' is not an integer")))?,
            None => 500,
        },
    };
    let mut seeds = match ov.seeds.as_deref().or(scalar("seeds")) {
        Some(v) => parse_seeds(v)?,
        None => (0..10).collect(),
    };
    let grid = match ov.grid.as_deref().or(scalar("grid")) {
        Some(v) => parse_grid(v)?,
        None => Vec::new(),
    };
    let model = SensitivityModel::parse(ov.model.as_deref().or(scalar("model")).unwrap_or("box:GAMMA=1"))?;
    let spec_strings: Vec<String> = if !ov.specs.is_empty() {
        ov.specs.clone()
    } else if !file.specs.is_empty() {
        file.specs.clone()
    } else {
        ["zsb", "qb", "kcmc:hard,D=100", "kcmc:gp,D=100,alpha=0.05"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    };
    let specs: Vec<ConstraintSpec> =
        spec_strings.iter().map(|s| ConstraintSpec::parse(s)).collect::<Result<_>>()?;
    let directions = parse_directions(ov.direction.as_deref().or(scalar("direction")).unwrap_or("both"))?;
    let workers = match ov.workers {
        Some(w) => w,
        None => match scalar("workers") {
            Some(v) => {
                v.parse().map_err(|_| Error::Parse(format!("workers '{v}' is not an integer")))?
            }
            None => 1,
        },
    };
    let timing = match scalar("timing").unwrap_or("wall") {
        "wall" => Timing::Wall,
        "none" => Timing::Off,
        other => return Err(Error::Parse(format!("timing '{other}' (expected wall or none)"))),
    };
    let policy = parse_policy(scalar("policy").unwrap_or("nominal"))?;
    let components = match &file.components {
        Some(tokens) => tokens.iter().map(|t| parse_policy(t)).collect::<Result<_>>()?,
        None => vec![Policy::Constant { action: 0 }, Policy::Constant { action: 1 }, Policy::synthetic_nominal()],
    };
    let mc_draws = match scalar("mc") {
        Some(v) => v.parse().map_err(|_| Error::Parse(format!("mc '{v}' is not an integer")))?,
        None => 100_000,
    };

    let source = match scalar("csv") {
        Some(path) => {
            let schema = CsvSchema {
                reward: scalar("csv_reward").unwrap_or("y").to_string(),
                action: scalar("csv_action").unwrap_or("t").to_string(),
                covariates: scalar("csv_covariates")
                    .ok_or_else(|| Error::Parse("csv input needs csv_covariates".into()))?
                    .split(',')
                    .map(|c| c.trim().to_string())
                    .collect(),
                action_count: scalar("csv_actions")
                    .map(|v| v.parse().map_err(|_| Error::Parse(format!("csv_actions '{v}'"))))
                    .transpose()?,
            };
            // One fixed dataset: sweeping seeds would repeat identical rows.
            seeds.truncate(1);
            DataSource::Csv { path: PathBuf::from(path), schema }
        }
        None => DataSource::Synthetic { n },
    };

    let out = ov
        .out
        .clone()
        .or_else(|| scalar("out").map(PathBuf::from))
        .unwrap_or_else(|| {
            PathBuf::from(match command {
                Command::Simulate => "dataset.csv",
                Command::Bounds => "results.csv",
                Command::Learn => "learned.json",
                Command::Selfcheck => "selfcheck.txt",
            })
        });

    let cfg = RunConfig {
        command,
        source,
        seeds,
        model,
        specs,
        grid,
        directions,
        out,
        workers,
        timing,
        policy,
        components,
        mc_draws,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    if cfg.workers == 0 {
        return Err(Error::InvalidArgument("workers must be at least 1".into()));
    }
    if let DataSource::Synthetic { n } = cfg.source {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
    }
    if cfg.command == Command::Bounds {
        if cfg.grid.is_empty() {
            return Err(Error::InvalidArgument(
                "bounds needs a nonempty sweep grid (grid=... or --grid)".into(),
            ));
        }
        // Surface bad grid values before any cell runs.
        for &g in &cfg.grid {
            model_at(&cfg.model, g)?;
        }
    }
    if cfg.command == Command::Learn {
        if cfg.components.len() < 2 {
            return Err(Error::InvalidArgument("learning needs at least two components".into()));
        }
        match cfg.specs.first() {
            Some(ConstraintSpec::KcmcHard { .. }) | Some(ConstraintSpec::Zsb) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "learning needs a hard constraint spec (kcmc:hard,D=... or zsb) first".into(),
                ))
            }
        }
    }
    Ok(())
}
