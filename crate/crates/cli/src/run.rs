//! The (policy, ζ) sweep and its output files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use ridematch::indices::{build_index_table, table_key, IndexTable};
use ridematch::network::{
    build_services, generate_uniform_network, load_real_network, HexLayout, NetworkSpec, ServiceCatalog,
};
use ridematch::policies::Policy;
use ridematch::simulator::{replicate, Dispatch, ReplicationSummary, SimOptions, RNG_NAME};

use crate::config::{LoadedConfig, NetworkConfig};
use crate::CliError;

/// `--only policy=…,zeta=…`; either key may be omitted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlyFilter {
    pub policy: Option<Policy>,
    pub zeta: Option<f64>,
}

impl FromStr for OnlyFilter {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let mut f = OnlyFilter::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("expected key=value in --only, got {part:?}")))?;
            match k.trim() {
                "policy" => f.policy = Some(v.parse().map_err(|e: ridematch::Error| CliError::Usage(e.to_string()))?),
                "zeta" => {
                    f.zeta = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| CliError::Usage(format!("bad zeta {v:?} in --only")))?,
                    )
                }
                other => return Err(CliError::Usage(format!("unknown --only key {other:?}"))),
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rebuild_index: bool,
    pub only: OnlyFilter,
}

#[derive(Debug)]
pub struct Cell {
    pub policy: Policy,
    pub zeta: f64,
    pub outcome: Result<ReplicationSummary, CliError>,
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub cells: Vec<Cell>,
}

impl RunReport {
    /// Exit status: 0, or the code of the first failed cell.
    pub fn exit_code(&self) -> i32 {
        self.cells
            .iter()
            .find_map(|c| c.outcome.as_ref().err().map(CliError::exit_code))
            .unwrap_or(0)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    rng: &'static str,
    config_sha256: &'a str,
    base_seed: u64,
    n_reps: usize,
    seeds: Vec<u64>,
    horizon: f64,
    warmup: f64,
    include_reneged_delays: bool,
    network: NetworkInfo,
    catalogs: Vec<CatalogInfo>,
    index_tables: Vec<TableInfo>,
    cells: Vec<CellInfo>,
    files: Vec<&'static str>,
}

#[derive(Serialize)]
struct NetworkInfo {
    kind: &'static str,
    types: usize,
    intervals: usize,
}

#[derive(Serialize)]
struct CatalogInfo {
    zeta: f64,
    services: usize,
    sha256: String,
}

#[derive(Serialize)]
struct TableInfo {
    zeta: f64,
    interval: usize,
    key: String,
    file: String,
}

#[derive(Serialize)]
struct CellInfo {
    policy: String,
    zeta: f64,
    status: &'static str,
    error: Option<String>,
    /// Metrics whose CI half-width exceeds 3% of the mean.
    flagged: Vec<String>,
}

pub fn build_network(cfg: &LoadedConfig) -> Result<NetworkSpec, CliError> {
    Ok(match &cfg.config.network {
        NetworkConfig::Uniform { arrival_rate, layout } => {
            let layout = layout.map(HexLayout::from).unwrap_or_default();
            generate_uniform_network(&layout, *arrival_rate)?
        }
        NetworkConfig::Real {
            demand,
            centroids,
            profile,
            distance_scale,
        } => load_real_network(
            &cfg.resolve(demand),
            &cfg.resolve(centroids),
            &cfg.resolve(profile),
            *distance_scale,
        )?,
    })
}

fn zeta_label(z: f64) -> String {
    format!("{z}")
}

/// One table per profile interval, loaded from `dir` when cached.
fn index_tables(
    cfg: &LoadedConfig,
    net: &NetworkSpec,
    catalog: &ServiceCatalog,
    dir: &Path,
    rebuild: bool,
    zeta: f64,
    info: &mut Vec<TableInfo>,
) -> Result<Vec<IndexTable>, CliError> {
    let ix = &cfg.config.index;
    let solver = ix.solver();
    fs::create_dir_all(dir)?;
    let mut built: HashMap<String, IndexTable> = HashMap::new();
    let mut out = Vec::new();
    for k in 0..net.n_intervals() {
        let rates = net.rates_in_interval(k);
        let key = table_key(catalog, &rates, solver, ix.beta, ix.sigma);
        let name = format!("interval_{k:02}.txt");
        let path = dir.join(&name);
        let table = if let Some(t) = built.get(&key) {
            t.clone()
        } else if path.is_file() && !rebuild {
            IndexTable::load(&path, catalog, &key).map_err(|e| {
                CliError::Config(format!("{e}; rerun with --rebuild-index to refresh {}", path.display()))
            })?
        } else {
            build_index_table(catalog, &rates, solver, ix.beta, ix.sigma)?
        };
        if rebuild || !path.is_file() {
            table.save(&path, catalog)?;
        }
        built.insert(key.clone(), table.clone());
        info.push(TableInfo {
            zeta,
            interval: k,
            key,
            file: format!("index/zeta_{}/{name}", zeta_label(zeta)),
        });
        out.push(table);
    }
    Ok(out)
}

pub fn run_experiment(cfg: &LoadedConfig, opts: &RunOptions) -> Result<RunReport, CliError> {
    let e = &cfg.config.experiment;
    let out_dir = opts
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve(&cfg.config.output.dir));
    fs::create_dir_all(&out_dir)?;
    let base_seed = opts.seed.unwrap_or(e.base_seed);
    let warmup = cfg.warmup();
    let net = build_network(cfg)?;
    let zetas: Vec<f64> = e
        .zeta
        .iter()
        .copied()
        .filter(|z| opts.only.zeta.is_none_or(|t| (z - t).abs() < 1e-9))
        .collect();
    let policies: Vec<Policy> = cfg
        .policies
        .iter()
        .filter(|p| opts.only.policy.as_ref().is_none_or(|t| t == *p))
        .cloned()
        .collect();
    if zetas.is_empty() || policies.is_empty() {
        return Err(CliError::Usage("--only selects no (policy, zeta) cell".into()));
    }
    let sim = SimOptions {
        horizon: e.horizon,
        warmup,
        seed: base_seed,
        include_reneged_delays: e.include_reneged_delays,
        max_events: None,
    };
    let mut cells = Vec::new();
    let mut catalogs = Vec::new();
    let mut tables_info = Vec::new();
    for &zeta in &zetas {
        let catalog = build_services(&net, &cfg.config.econ.at_zeta(zeta))?;
        catalogs.push(CatalogInfo {
            zeta,
            services: catalog.len(),
            sha256: catalog.hash(),
        });
        let tables = if policies.contains(&Policy::Bi) {
            let dir = out_dir.join("index").join(format!("zeta_{}", zeta_label(zeta)));
            index_tables(cfg, &net, &catalog, &dir, opts.rebuild_index, zeta, &mut tables_info)?
        } else {
            Vec::new()
        };
        for policy in &policies {
            let outcome = replicate(
                &net,
                &catalog,
                Dispatch {
                    policy,
                    tables: &tables,
                },
                &sim,
                e.n_reps,
            )
            .map_err(CliError::from);
            if let Err(err) = &outcome {
                eprintln!("cell policy={policy} zeta={zeta} failed: {err}");
            }
            cells.push(Cell {
                policy: policy.clone(),
                zeta,
                outcome,
            });
        }
    }
    fs::write(out_dir.join("metrics.csv"), metrics_csv(&cells))?;
    fs::write(out_dir.join("reldiff.csv"), reldiff_csv(&cells))?;
    fs::write(out_dir.join("hourly.csv"), hourly_csv(&cells))?;
    let manifest = Manifest {
        tool: "ridematch",
        version: env!("CARGO_PKG_VERSION"),
        rng: RNG_NAME,
        config_sha256: &cfg.sha256,
        base_seed,
        n_reps: e.n_reps,
        seeds: (0..e.n_reps as u64).map(|i| base_seed.wrapping_add(i)).collect(),
        horizon: e.horizon,
        warmup,
        include_reneged_delays: e.include_reneged_delays,
        network: NetworkInfo {
            kind: match cfg.config.network {
                NetworkConfig::Uniform { .. } => "uniform",
                NetworkConfig::Real { .. } => "real",
            },
            types: net.len(),
            intervals: net.n_intervals(),
        },
        catalogs,
        index_tables: tables_info,
        cells: cells
            .iter()
            .map(|c| {
                let (status, error, flagged) = match &c.outcome {
                    Ok(s) => (
                        "ok",
                        None,
                        [&s.average_reward, &s.mean_delay]
                            .into_iter()
                            .filter(|m| m.flagged)
                            .map(|m| m.name.clone())
                            .collect(),
                    ),
                    Err(e) => ("failed", Some(e.to_string()), Vec::new()),
                };
                CellInfo {
                    policy: c.policy.to_string(),
                    zeta: c.zeta,
                    status,
                    error,
                    flagged,
                }
            })
            .collect(),
        files: vec!["metrics.csv", "reldiff.csv", "hourly.csv"],
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), json + "\n")?;
    Ok(RunReport { out_dir, cells })
}

fn ok_cells(cells: &[Cell]) -> impl Iterator<Item = (&Cell, &ReplicationSummary)> {
    cells.iter().filter_map(|c| c.outcome.as_ref().ok().map(|s| (c, s)))
}

pub fn metrics_csv(cells: &[Cell]) -> String {
    let mut s = String::from("policy,zeta,metric,mean,ci_halfwidth\n");
    for (c, sum) in ok_cells(cells) {
        for m in [&sum.average_reward, &sum.mean_delay] {
            let _ = writeln!(s, "{},{},{},{},{}", c.policy, c.zeta, m.name, m.mean, m.half_width);
        }
    }
    s
}

/// `(m(policy) - m(baseline)) / m(baseline)` for every ordered policy pair.
pub fn reldiff_csv(cells: &[Cell]) -> String {
    let mut s = String::from("zeta,metric,policy,baseline,reldiff\n");
    let ok: Vec<_> = ok_cells(cells).collect();
    let mut zetas: Vec<f64> = ok.iter().map(|(c, _)| c.zeta).collect();
    zetas.dedup();
    for z in zetas {
        let at: Vec<_> = ok.iter().filter(|(c, _)| c.zeta == z).collect();
        for metric in ["average_reward", "mean_delay"] {
            let value = |s: &ReplicationSummary| {
                if metric == "average_reward" {
                    s.average_reward.mean
                } else {
                    s.mean_delay.mean
                }
            };
            for (c1, s1) in &at {
                for (c2, s2) in &at {
                    if c1.policy == c2.policy {
                        continue;
                    }
                    let d = (value(s1) - value(s2)) / value(s2);
                    let _ = writeln!(s, "{z},{metric},{},{},{d}", c1.policy, c2.policy);
                }
            }
        }
    }
    s
}

pub fn hourly_csv(cells: &[Cell]) -> String {
    let mut s = String::from("zeta,hour,policy,reward_rate,ci_halfwidth\n");
    for (c, sum) in ok_cells(cells) {
        for (h, m) in sum.hourly_reward_rate.iter().enumerate() {
            let _ = writeln!(s, "{},{h},{},{},{}", c.zeta, c.policy, m.mean, m.half_width);
        }
    }
    s
}
