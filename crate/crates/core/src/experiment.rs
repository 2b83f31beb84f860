//! Experiment harness: config files, policy construction, and the
//! run/compare/abtest/sweep/heatmap/gen-log commands behind the CLI.
//!
//! Configs are TOML with unknown keys rejected everywhere. Command-line
//! overrides are applied after parsing, before validation. Every command
//! writes its artifacts under the experiment's output directory and is fully
//! reproducible: identical inputs give byte-identical outputs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::policy::{
    CompletionModel, DispatchPolicy, FrozenPolicy, MyopicPolicy, RlwConfig, RlwPolicy, V1d3Config,
    V1d3Policy,
};
use crate::runner::map_runs;
use crate::sim::{
    self, derive_seed, gen_event_log, CityPreset, RunOutput, RunReport, Scenario, SimParams,
    TripEventLog, ValueSnapshot, WindowRow, STREAM_POLICY,
};
use crate::value::ValueTable;

/// Empty parameter tables keep the "unknown keys are errors" rule for
/// policies that take no options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MyopicSpec {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrozenSpec {
    /// CSV value table produced by an earlier run.
    pub table_path: PathBuf,
    #[serde(default = "default_frozen_gamma")]
    pub gamma: f64,
}

fn default_frozen_gamma() -> f64 {
    0.9
}

/// One policy entry: the table key names the kind, its value holds the
/// parameters, e.g. `[policies.main.rlw]` or `myopic = {}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Rlw(RlwConfig),
    V1d3(V1d3Config),
    Myopic(MyopicSpec),
    Frozen(FrozenSpec),
}

impl PolicySpec {
    pub fn kind(&self) -> &'static str {
        match self {
            PolicySpec::Rlw(_) => "rlw",
            PolicySpec::V1d3(_) => "v1d3",
            PolicySpec::Myopic(_) => "myopic",
            PolicySpec::Frozen(_) => "frozen",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PolicySpec::Rlw(cfg) => cfg.validate(),
            PolicySpec::V1d3(cfg) => cfg.validate(),
            PolicySpec::Myopic(_) => Ok(()),
            PolicySpec::Frozen(spec) => {
                if !(spec.gamma >= 0.0 && spec.gamma < 1.0) {
                    return Err(Error::config("frozen policy gamma must lie in [0, 1)"));
                }
                Ok(())
            }
        }
    }
}

/// The `[experiment]` section: scenario selection plus runtime knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Built-in city preset name. Exactly one of `preset` and `log_path`.
    pub preset: Option<String>,
    /// Replay a trip event log instead of generating demand.
    pub log_path: Option<PathBuf>,
    /// Grid geometry, required in replay mode.
    pub grid_rows: Option<u16>,
    pub grid_cols: Option<u16>,
    pub cell_size_m: Option<f64>,
    /// Rider completion model override; replay mode falls back to defaults.
    pub completion_a: Option<f64>,
    pub completion_b_per_km: Option<f64>,
    pub seed: u64,
    pub horizon_s: u64,
    pub out_dir: PathBuf,
    pub price_scale: f64,
    pub round_s: u64,
    pub max_wait_s: u64,
    pub broadcast_radius_m: f64,
    pub cancel_fraction: f64,
    pub driver_speed_mps: f64,
    pub report_window_s: u64,
    pub value_snapshot_interval_s: u64,
    pub keep_match_log: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        let d = SimParams::default();
        ExperimentSection {
            preset: None,
            log_path: None,
            grid_rows: None,
            grid_cols: None,
            cell_size_m: None,
            completion_a: None,
            completion_b_per_km: None,
            seed: d.seed,
            horizon_s: d.horizon_s,
            out_dir: PathBuf::from("out"),
            price_scale: d.price_scale,
            round_s: d.round_s,
            max_wait_s: d.max_wait_s,
            broadcast_radius_m: d.broadcast_radius_m,
            cancel_fraction: d.cancel_fraction,
            driver_speed_mps: d.driver_speed_mps,
            report_window_s: d.report_window_s,
            value_snapshot_interval_s: d.value_snapshot_interval_s,
            keep_match_log: d.keep_match_log,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Policy name the improvements are measured against.
    pub baseline: String,
    /// Seeds shared by every policy; `--seeds` overrides.
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { baseline: String::new(), seeds: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbtestSection {
    pub a: String,
    pub b: String,
    pub flip_hours: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Random,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub mode: SweepMode,
    /// Evaluation count in random mode; grid mode evaluates every point.
    pub budget: usize,
    pub sweep_seed: u64,
    /// Random mode: `[lo, hi]` ranges. Grid mode: explicit value lists.
    pub w_rew_start: Vec<f64>,
    pub w_rew_finish: Vec<f64>,
    pub w_p_start: Vec<f64>,
    pub w_p_finish: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            mode: SweepMode::Random,
            budget: 10,
            sweep_seed: 0,
            w_rew_start: vec![0.0, 1.0],
            w_rew_finish: vec![0.0, 1.0],
            w_p_start: vec![0.0, 0.01],
            w_p_finish: vec![0.0, 0.01],
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub policies: BTreeMap<String, PolicySpec>,
    #[serde(default)]
    pub compare: Option<CompareSection>,
    #[serde(default)]
    pub abtest: Option<AbtestSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
}

/// Command-line overrides, applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Half-open `start..end` seed range.
    pub seeds: Option<(u64, u64)>,
    pub out: Option<PathBuf>,
    pub price_scale: Option<f64>,
    pub policy: Option<String>,
}

impl Overrides {
    pub fn seed_list(&self) -> Option<Vec<u64>> {
        self.seeds.map(|(a, b)| (a..b).collect())
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.experiment.seed = seed;
        }
        if let Some(out) = &ov.out {
            self.experiment.out_dir = out.clone();
        }
        if let Some(scale) = ov.price_scale {
            self.experiment.price_scale = scale;
        }
        if let Some(seeds) = ov.seed_list() {
            if let Some(c) = self.compare.as_mut() {
                c.seeds = seeds.clone();
            }
            if let Some(s) = self.sweep.as_mut() {
                s.seeds = seeds;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        match (&e.preset, &e.log_path) {
            (None, None) => {
                return Err(Error::config(
                    "experiment needs either `preset` or `log_path`",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::config("`preset` and `log_path` are mutually exclusive"))
            }
            _ => {}
        }
        if e.log_path.is_some()
            && (e.grid_rows.is_none() || e.grid_cols.is_none() || e.cell_size_m.is_none())
        {
            return Err(Error::config(
                "replay mode needs grid_rows, grid_cols, and cell_size_m",
            ));
        }
        for (name, spec) in &self.policies {
            spec.validate()
                .map_err(|err| Error::config(format!("policy '{name}': {err}")))?;
        }
        self.sim_params(e.seed).validate()
    }

    pub fn sim_params(&self, seed: u64) -> SimParams {
        let e = &self.experiment;
        SimParams {
            horizon_s: e.horizon_s,
            round_s: e.round_s,
            max_wait_s: e.max_wait_s,
            broadcast_radius_m: e.broadcast_radius_m,
            price_scale: e.price_scale,
            cancel_fraction: e.cancel_fraction,
            driver_speed_mps: e.driver_speed_mps,
            report_window_s: e.report_window_s,
            seed,
            value_snapshot_interval_s: e.value_snapshot_interval_s,
            keep_match_log: e.keep_match_log,
            flip_interval_s: 0,
        }
    }

    fn completion_override(&self, fallback: CompletionModel) -> Result<CompletionModel> {
        let e = &self.experiment;
        let model = CompletionModel {
            a: e.completion_a.unwrap_or(fallback.a),
            b_per_km: e.completion_b_per_km.unwrap_or(fallback.b_per_km),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn preset(&self) -> Result<CityPreset> {
        let name = self
            .experiment
            .preset
            .as_deref()
            .ok_or_else(|| Error::config("this command needs `experiment.preset`"))?;
        let mut p = sim::preset(name)?;
        p.completion = self.completion_override(p.completion)?;
        Ok(p)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let e = &self.experiment;
        if e.preset.is_some() {
            return Ok(Scenario::from_preset(self.preset()?));
        }
        let path = e.log_path.as_ref().expect("validated");
        let file = fs::File::open(path)
            .map_err(|err| Error::config(format!("cannot open log {}: {err}", path.display())))?;
        let log = TripEventLog::read_jsonl(BufReader::new(file))?;
        let grid = Grid::new(
            e.grid_rows.expect("validated"),
            e.grid_cols.expect("validated"),
            e.cell_size_m.expect("validated"),
        )?;
        let completion = self.completion_override(CompletionModel::default())?;
        Scenario::from_log(log, grid, completion)
    }

    /// Resolve which configured policy a single-policy command uses.
    pub fn select_policy(&self, requested: Option<&str>) -> Result<(&str, &PolicySpec)> {
        if let Some(name) = requested {
            let (key, spec) = self
                .policies
                .get_key_value(name)
                .ok_or_else(|| Error::config(format!("no policy named '{name}' in config")))?;
            return Ok((key.as_str(), spec));
        }
        match self.policies.len() {
            0 => Err(Error::config("config defines no policies")),
            1 => {
                let (name, spec) = self.policies.iter().next().unwrap();
                Ok((name, spec))
            }
            _ => Err(Error::config("multiple policies configured; choose one with --policy")),
        }
    }
}

/// Instantiate a policy for slot `slot` of a run seeded with `base_seed`.
/// Slot index feeds the policy's private random stream.
pub fn build_policy(
    name: &str,
    spec: &PolicySpec,
    grid: &Grid,
    base_seed: u64,
    slot: u64,
) -> Result<Box<dyn DispatchPolicy>> {
    match spec {
        PolicySpec::Rlw(cfg) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base_seed, STREAM_POLICY + slot));
            Ok(Box::new(RlwPolicy::new(name, cfg.clone(), grid, &mut rng)?))
        }
        PolicySpec::V1d3(cfg) => Ok(Box::new(V1d3Policy::new(name, *cfg, grid)?)),
        PolicySpec::Myopic(_) => Ok(Box::new(MyopicPolicy::new(name))),
        PolicySpec::Frozen(s) => {
            let file = fs::File::open(&s.table_path).map_err(|e| {
                Error::config(format!("cannot open value table {}: {e}", s.table_path.display()))
            })?;
            let table = ValueTable::read_csv(grid, BufReader::new(file))?;
            Ok(Box::new(FrozenPolicy::new(name, table, s.gamma)?))
        }
    }
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::runtime(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn write_series_csv(path: &Path, windows: &[WindowRow]) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "window_start,policy,requests,accepted,completed,cancelled,expired,income,cr,ar,sr"
    )?;
    for r in windows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.window_start,
            r.policy,
            r.requests,
            r.accepted,
            r.completed,
            r.cancelled,
            r.expired,
            r.income,
            r.cr,
            r.ar,
            r.sr
        )?;
    }
    Ok(())
}

fn write_run_artifacts(out_dir: &Path, grid: &Grid, out: &RunOutput) -> Result<()> {
    create_out_dir(out_dir)?;
    write_json(&out_dir.join("report.json"), &out.report)?;
    write_series_csv(&out_dir.join("series.csv"), &out.report.windows)?;
    for (name, table) in &out.final_tables {
        let path = out_dir.join(format!("value_table_{name}.csv"));
        let file = fs::File::create(&path)
            .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        table.write_csv(grid, &mut w)?;
    }
    if !out.threshold_trace.is_empty() {
        let path = out_dir.join("threshold_trace.csv");
        let file = fs::File::create(&path)
            .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "time,arm_index,threshold,q,cr,ar")?;
        for r in &out.threshold_trace {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.time, r.arm_index, r.threshold, r.q, r.cr, r.ar
            )?;
        }
    }
    if !out.match_log.is_empty() {
        let path = out_dir.join("match_log.jsonl");
        let file = fs::File::create(&path)
            .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        for r in &out.match_log {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::runtime(e.to_string()))?;
            writeln!(w)?;
        }
    }
    if !out.value_snapshots.is_empty() {
        let path = out_dir.join("value_snapshots.jsonl");
        let file = fs::File::create(&path)
            .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        for s in &out.value_snapshots {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::runtime(e.to_string()))?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Run one policy through the configured scenario and write all artifacts.
pub fn cmd_run(cfg: &ExperimentConfig, requested_policy: Option<&str>) -> Result<RunReport> {
    cfg.validate()?;
    let (name, spec) = cfg.select_policy(requested_policy)?;
    let scenario = cfg.scenario()?;
    let params = cfg.sim_params(cfg.experiment.seed);
    let mut policies = vec![build_policy(name, spec, &scenario.grid, params.seed, 0)?];
    let out = sim::run(&scenario, &mut policies, &params)?;
    write_run_artifacts(&cfg.experiment.out_dir, &scenario.grid, &out)?;
    Ok(out.report)
}

/// Per-policy, per-seed totals plus percent improvements against a baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
    pub improvements: Vec<ImprovementRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub seed: u64,
    pub income: f64,
    pub cr: f64,
    pub ar: f64,
    pub sr: f64,
    pub requests: u64,
    pub completed: u64,
    pub demand_hash: u64,
}

/// Mean and population standard deviation of per-seed percent improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub policy: String,
    pub metric: String,
    pub mean_pct: f64,
    pub std_pct: f64,
}

fn pct_improvement(x: f64, baseline: f64) -> f64 {
    // A zero baseline gives no meaningful percentage; report 0 rather than a
    // non-finite value.
    if baseline == 0.0 {
        0.0
    } else {
        (x - baseline) / baseline * 100.0
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run every configured policy over matched seeds and tabulate improvements
/// against the baseline. Matched demand is enforced by comparing demand
/// stream fingerprints per seed.
pub fn cmd_compare(cfg: &ExperimentConfig, ov: &Overrides) -> Result<ComparisonReport> {
    cfg.validate()?;
    let section = cfg
        .compare
        .as_ref()
        .ok_or_else(|| Error::config("compare needs a [compare] section"))?;
    if cfg.policies.len() < 2 {
        return Err(Error::config("compare needs at least two policies"));
    }
    let baseline = &section.baseline;
    if !cfg.policies.contains_key(baseline) {
        return Err(Error::config(format!("baseline '{baseline}' is not a configured policy")));
    }
    let seeds: Vec<u64> = ov
        .seed_list()
        .or_else(|| (!section.seeds.is_empty()).then(|| section.seeds.clone()))
        .unwrap_or_else(|| vec![cfg.experiment.seed]);
    if seeds.is_empty() {
        return Err(Error::config("compare needs at least one seed"));
    }

    let scenario = cfg.scenario()?;
    let names: Vec<String> = cfg.policies.keys().cloned().collect();

    // One job per (policy, seed); jobs are independent and deterministic.
    let mut jobs: Vec<(String, u64)> = Vec::new();
    for name in &names {
        for &seed in &seeds {
            jobs.push((name.clone(), seed));
        }
    }
    let cfg_ref = &*cfg;
    let scenario_ref = &scenario;
    let rows: Vec<ComparisonRow> = map_runs(jobs, move |(name, seed)| {
        let spec = &cfg_ref.policies[&name];
        let params = cfg_ref.sim_params(seed);
        let mut policies = vec![build_policy(&name, spec, &scenario_ref.grid, seed, 0)?];
        let out = sim::run(scenario_ref, &mut policies, &params)?;
        let t = &out.report.per_policy[0];
        Ok(ComparisonRow {
            policy: name,
            seed,
            income: t.income,
            cr: t.cr,
            ar: t.ar,
            sr: t.sr,
            requests: t.requests,
            completed: t.completed,
            demand_hash: out.report.demand_hash,
        })
    })?;

    // Matched-seed discipline: every policy saw the identical demand stream.
    for &seed in &seeds {
        let hashes: Vec<u64> =
            rows.iter().filter(|r| r.seed == seed).map(|r| r.demand_hash).collect();
        if hashes.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::runtime(format!(
                "demand stream diverged across policies for seed {seed}"
            )));
        }
    }

    let metric = |r: &ComparisonRow, m: &str| match m {
        "income" => r.income,
        "cr" => r.cr,
        "ar" => r.ar,
        "sr" => r.sr,
        _ => unreachable!(),
    };
    let mut improvements = Vec::new();
    for name in &names {
        for m in ["income", "cr", "ar", "sr"] {
            let pcts: Vec<f64> = seeds
                .iter()
                .map(|&seed| {
                    let x = rows
                        .iter()
                        .find(|r| r.policy == *name && r.seed == seed)
                        .expect("every job produced a row");
                    let b = rows
                        .iter()
                        .find(|r| r.policy == *baseline && r.seed == seed)
                        .expect("baseline row exists");
                    pct_improvement(metric(x, m), metric(b, m))
                })
                .collect();
            let (mean, std) = mean_std(&pcts);
            improvements.push(ImprovementRow {
                policy: name.clone(),
                metric: m.to_string(),
                mean_pct: mean,
                std_pct: std,
            });
        }
    }

    let report =
        ComparisonReport { baseline: baseline.clone(), seeds, rows, improvements };

    let out_dir = &cfg.experiment.out_dir;
    create_out_dir(out_dir)?;
    write_json(&out_dir.join("comparison.json"), &report)?;
    let path = out_dir.join("comparison.csv");
    let file = fs::File::create(&path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "policy,seed,income,cr,ar,sr,requests,completed")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.policy, r.seed, r.income, r.cr, r.ar, r.sr, r.requests, r.completed
        )?;
    }
    let path = out_dir.join("improvements.csv");
    let file = fs::File::create(&path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "policy,metric,mean_pct,std_pct")?;
    for r in &report.improvements {
        writeln!(w, "{},{},{},{}", r.policy, r.metric, r.mean_pct, r.std_pct)?;
    }
    Ok(report)
}

/// Alternate two policies over wall-clock blocks of `flip_hours` within one
/// continuous run. Each request is attributed to the policy active when its
/// fate settled; the inactive policy neither acts nor learns.
pub fn cmd_abtest(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let section = cfg
        .abtest
        .as_ref()
        .ok_or_else(|| Error::config("abtest needs an [abtest] section"))?;
    if section.flip_hours <= 0.0 {
        return Err(Error::config("flip_hours must be positive"));
    }
    let flip_s = (section.flip_hours * 3600.0).round() as u64;
    let scenario = cfg.scenario()?;
    let mut params = cfg.sim_params(cfg.experiment.seed);
    params.flip_interval_s = flip_s;

    let mut policies = Vec::new();
    for (slot, name) in [&section.a, &section.b].into_iter().enumerate() {
        let spec = cfg
            .policies
            .get(name)
            .ok_or_else(|| Error::config(format!("abtest policy '{name}' is not configured")))?;
        // Distinct display names keep window attribution unambiguous when
        // both sides use the same configured policy (A/A test).
        let display = format!("{}:{}", if slot == 0 { "a" } else { "b" }, name);
        policies.push(build_policy(&display, spec, &scenario.grid, params.seed, slot as u64)?);
    }

    let out = sim::run(&scenario, &mut policies, &params)?;
    let out_dir = &cfg.experiment.out_dir;
    create_out_dir(out_dir)?;
    write_json(&out_dir.join("abtest.json"), &out.report)?;
    write_series_csv(&out_dir.join("series.csv"), &out.report.windows)?;
    Ok(out.report)
}

/// One evaluated sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub index: usize,
    pub w_rew_start: f64,
    pub w_rew_finish: f64,
    pub w_p_start: f64,
    pub w_p_finish: f64,
    /// Mean total income across the sweep seeds.
    pub income: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: SweepMode,
    pub seeds: Vec<u64>,
    pub best: SweepPoint,
    pub trace: Vec<SweepPoint>,
}

fn sample_range(rng: &mut impl Rng, range: &[f64], what: &str) -> Result<f64> {
    if range.len() != 2 || range[1] < range[0] {
        return Err(Error::config(format!(
            "random sweep needs `{what} = [lo, hi]` with lo <= hi"
        )));
    }
    Ok(rng.random_range(range[0]..=range[1]))
}

/// Random or grid search over the four edge-weight schedule bounds.
/// Objective: mean total income over the sweep seeds. Ties keep the lowest
/// evaluation index.
pub fn cmd_sweep(cfg: &ExperimentConfig, ov: &Overrides) -> Result<SweepReport> {
    cfg.validate()?;
    let section = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::config("sweep needs a [sweep] section"))?;
    let (base_name, base_spec) = cfg.select_policy(ov.policy.as_deref())?;
    let base = match base_spec {
        PolicySpec::Rlw(c) => c.clone(),
        _ => {
            return Err(Error::config(format!(
                "sweep tunes edge-weight schedules; policy '{base_name}' has none"
            )))
        }
    };
    let seeds: Vec<u64> = ov
        .seed_list()
        .or_else(|| (!section.seeds.is_empty()).then(|| section.seeds.clone()))
        .unwrap_or_else(|| vec![cfg.experiment.seed]);

    let mut candidates: Vec<(f64, f64, f64, f64)> = Vec::new();
    match section.mode {
        SweepMode::Random => {
            if section.budget == 0 {
                return Err(Error::config("random sweep budget must be at least 1"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(section.sweep_seed);
            for _ in 0..section.budget {
                candidates.push((
                    sample_range(&mut rng, &section.w_rew_start, "w_rew_start")?,
                    sample_range(&mut rng, &section.w_rew_finish, "w_rew_finish")?,
                    sample_range(&mut rng, &section.w_p_start, "w_p_start")?,
                    sample_range(&mut rng, &section.w_p_finish, "w_p_finish")?,
                ));
            }
        }
        SweepMode::Grid => {
            for lists in [
                &section.w_rew_start,
                &section.w_rew_finish,
                &section.w_p_start,
                &section.w_p_finish,
            ] {
                if lists.is_empty() {
                    return Err(Error::config("grid sweep lists must be non-empty"));
                }
            }
            for &a in &section.w_rew_start {
                for &b in &section.w_rew_finish {
                    for &c in &section.w_p_start {
                        for &d in &section.w_p_finish {
                            candidates.push((a, b, c, d));
                        }
                    }
                }
            }
        }
    }

    let scenario = cfg.scenario()?;
    let name = base_name.to_string();
    let indexed: Vec<(usize, (f64, f64, f64, f64))> =
        candidates.into_iter().enumerate().collect();
    let cfg_ref = &*cfg;
    let scenario_ref = &scenario;
    let seeds_ref = &seeds;
    let base_ref = &base;
    let name_ref = &name;
    let trace: Vec<SweepPoint> = map_runs(indexed, move |(index, (a, b, c, d))| {
        let mut tuned = base_ref.clone();
        tuned.w_rew_start = a;
        tuned.w_rew_finish = b;
        tuned.w_p_start = c;
        tuned.w_p_finish = d;
        tuned
            .validate()
            .map_err(|e| Error::config(format!("sweep point {index}: {e}")))?;
        let mut incomes = Vec::with_capacity(seeds_ref.len());
        for &seed in seeds_ref {
            let params = cfg_ref.sim_params(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_POLICY));
            let mut policies: Vec<Box<dyn DispatchPolicy>> =
                vec![Box::new(RlwPolicy::new(name_ref, tuned.clone(), &scenario_ref.grid, &mut rng)?)];
            let out = sim::run(scenario_ref, &mut policies, &params)?;
            incomes.push(out.report.totals.income);
        }
        let income = incomes.iter().sum::<f64>() / incomes.len() as f64;
        Ok(SweepPoint {
            index,
            w_rew_start: a,
            w_rew_finish: b,
            w_p_start: c,
            w_p_finish: d,
            income,
        })
    })?;

    let best = trace
        .iter()
        .cloned()
        .reduce(|best, p| if p.income > best.income { p } else { best })
        .ok_or_else(|| Error::config("sweep evaluated no points"))?;

    let report = SweepReport { mode: section.mode, seeds, best, trace };
    let out_dir = &cfg.experiment.out_dir;
    create_out_dir(out_dir)?;
    write_json(&out_dir.join("sweep_best.json"), &report.best)?;
    let path = out_dir.join("sweep_trace.csv");
    let file = fs::File::create(&path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,w_rew_start,w_rew_finish,w_p_start,w_p_finish,income")?;
    for p in &report.trace {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.index, p.w_rew_start, p.w_rew_finish, p.w_p_start, p.w_p_finish, p.income
        )?;
    }
    Ok(report)
}

/// Export the value snapshot nearest to `t` from a previous run directory as
/// `row,col,value` CSV. Ties pick the earlier snapshot.
pub fn cmd_heatmap(
    run_dir: &Path,
    t: u64,
    policy: Option<&str>,
    out_file: Option<&Path>,
) -> Result<String> {
    let report_path = run_dir.join("report.json");
    let report_text = fs::read_to_string(&report_path).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", report_path.display()))
    })?;
    let report: RunReport = serde_json::from_str(&report_text)
        .map_err(|e| Error::config(format!("invalid report.json: {e}")))?;
    let grid = Grid::new(report.grid_rows, report.grid_cols, report.cell_size_m)?;

    let snap_path = run_dir.join("value_snapshots.jsonl");
    let file = fs::File::open(&snap_path).map_err(|e| {
        Error::config(format!(
            "cannot read {}: {e}; rerun with value_snapshot_interval_s > 0",
            snap_path.display()
        ))
    })?;
    let mut snapshots: Vec<ValueSnapshot> = Vec::new();
    for line in std::io::BufRead::lines(BufReader::new(file)) {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ValueSnapshot = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("invalid snapshot line: {e}")))?;
        snapshots.push(s);
    }
    let policies: Vec<String> = {
        let mut seen = Vec::new();
        for s in &snapshots {
            if !seen.contains(&s.policy) {
                seen.push(s.policy.clone());
            }
        }
        seen
    };
    let chosen = match policy {
        Some(p) => p.to_string(),
        None if policies.len() == 1 => policies[0].clone(),
        None => {
            return Err(Error::config(format!(
                "snapshots cover several policies ({}); choose one with --policy",
                policies.join(", ")
            )))
        }
    };
    let best = snapshots
        .iter()
        .filter(|s| s.policy == chosen)
        .min_by_key(|s| (s.t.abs_diff(t), s.t))
        .ok_or_else(|| {
            Error::runtime(format!("no value snapshot for policy '{chosen}' in range"))
        })?;
    if best.values.len() != grid.cell_count() {
        return Err(Error::runtime("snapshot size does not match the report grid"));
    }

    let mut csv = String::from("row,col,value\n");
    for (i, v) in best.values.iter().enumerate() {
        let cell = grid.cell_from_id(i as u32);
        csv.push_str(&format!("{},{},{}\n", cell.row, cell.col, v));
    }
    if let Some(path) = out_file {
        fs::write(path, &csv)
            .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(csv)
}

/// Generate a trip event log from the configured preset and write it as
/// JSONL. Returns the written path.
pub fn cmd_gen_log(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let preset = cfg.preset()?;
    let params = cfg.sim_params(cfg.experiment.seed);
    let log = gen_event_log(&preset, &params)?;
    let out_dir = &cfg.experiment.out_dir;
    create_out_dir(out_dir)?;
    let path = out_dir.join("trip_log.jsonl");
    let file = fs::File::create(&path)
        .map_err(|e| Error::runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    log.write_jsonl(&mut w)?;
    Ok(path)
}
