use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    apply_method, mean, median, results_csv, Artifact, Experiment, ExperimentConfig, GateResult,
    MethodKind, MethodSpec, Runner, Sweep,
};
use crate::adaptive::FitConfig;
use crate::bounds::{
    landscape_csv, landscape_scan, run_trials, summarize, trials_csv, Axis, BoundLabConfig,
    CheckKind, Grid, TrialSummary,
};
use crate::data::task_accuracies;
use crate::error::{MergeError, Result};
use crate::nn::Batch;

/// Margins the headline comparisons are held to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternThresholds {
    pub samerging_over_adamerging: f64,
    pub samerging_over_task_arithmetic: f64,
    /// Allowed gap between the configured `k` and the largest swept `k`.
    pub k_tolerance: f64,
}

impl Default for PatternThresholds {
    fn default() -> Self {
        PatternThresholds {
            samerging_over_adamerging: 0.01,
            samerging_over_task_arithmetic: 0.02,
            k_tolerance: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceConfig {
    pub grid: Grid,
    /// 1-D scan along the first direction.
    pub slice: Axis,
    /// Task vectors spanning the scan plane.
    pub directions: (usize, usize),
    /// Landscapes are scanned for the first this-many seeds.
    pub landscape_seeds: usize,
    pub bounds: BoundLabConfig,
    /// Overrides every check's default trial count.
    pub bound_trials: Option<usize>,
    pub bound_seed: u64,
    pub lam_init_values: Vec<f64>,
    pub k_values: Vec<usize>,
    pub thresholds: PatternThresholds,
}

impl Default for ReproduceConfig {
    fn default() -> Self {
        ReproduceConfig {
            grid: Grid {
                a: Axis::new(-1.0, 1.0, 11).expect("axis"),
                b: Axis::new(-1.0, 1.0, 11).expect("axis"),
            },
            slice: Axis::new(-2.0, 2.0, 21).expect("axis"),
            directions: (0, 1),
            landscape_seeds: 1,
            bounds: BoundLabConfig::default(),
            bound_trials: None,
            bound_seed: 0,
            lam_init_values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            k_values: vec![4, 16, 64, 256, 1024],
            thresholds: PatternThresholds::default(),
        }
    }
}

fn method(cfg: &ExperimentConfig, name: &str) -> Result<MethodSpec> {
    MethodSpec::lookup(&cfg.methods, name)
        .ok_or_else(|| MergeError::InvalidConfig(format!("unknown method `{name}`")))
}

fn fit_config(cfg: &ExperimentConfig, name: &str) -> Result<FitConfig> {
    match method(cfg, name)?.kind {
        MethodKind::Adaptive(f) => Ok(f),
        _ => Err(MergeError::InvalidConfig(format!(
            "`{name}` is not a coefficient-learning method"
        ))),
    }
}

fn gate(name: impl Into<String>, passed: bool, value: f64, threshold: f64) -> GateResult {
    GateResult {
        name: name.into(),
        passed,
        value,
        threshold,
    }
}

fn has(exp: &Experiment, m: &str) -> bool {
    exp.rows_for(m).next().is_some()
}

fn comparison_gates(exp: &Experiment, t: &PatternThresholds) -> Vec<GateResult> {
    let mut gates = Vec::new();
    let sam = exp.median_acc("samerging", None);
    for (other, margin) in [
        ("adamerging", t.samerging_over_adamerging),
        ("task_arithmetic", t.samerging_over_task_arithmetic),
    ] {
        if has(exp, "samerging") && has(exp, other) {
            let gap = sam - exp.median_acc(other, None);
            gates.push(gate(
                format!("comparison.samerging_minus_{other}"),
                gap >= margin,
                gap,
                margin,
            ));
        }
    }
    if has(exp, "pretrained") {
        let base = exp.median_acc("pretrained", None);
        let mut names: Vec<&str> = exp.rows.iter().map(|r| r.method.as_str()).collect();
        names.dedup();
        for m in names {
            if m != "pretrained" && m != "fine_tuned" {
                let v = exp.median_acc(m, None);
                gates.push(gate(
                    format!("comparison.{m}_above_pretrained"),
                    v > base,
                    v,
                    base,
                ));
            }
        }
    }
    gates
}

fn medians_by_method(exp: &Experiment) -> BTreeMap<String, f64> {
    exp.rows
        .iter()
        .map(|r| (r.method.clone(), exp.median_acc(&r.method, r.sweep)))
        .collect()
}

/// Every table, sweep, figure and bound check with the gates they imply.
/// Fails with [`MergeError::Gate`] when fine-tuning misses its gates.
pub fn reproduce(
    cfg: &ExperimentConfig,
    runner: &Runner,
) -> Result<(Vec<Artifact>, Vec<GateResult>)> {
    cfg.validate()?;
    let rc = &cfg.reproduce;
    let th = &rc.thresholds;
    let mut artifacts = Vec::new();
    let mut summary: BTreeMap<&str, serde_json::Value> = BTreeMap::new();

    let base = ExperimentConfig {
        sweep: Sweep::None,
        ..cfg.clone()
    };
    let comparison = runner.run(&base)?;
    let mut gates = comparison.gates.clone();
    gates.extend(comparison_gates(&comparison, th));
    artifacts.push(Artifact::text(
        "results.csv",
        results_csv(&comparison.rows, cfg.include_wall_time),
    ));
    summary.insert(
        "comparison",
        serde_json::to_value(medians_by_method(&comparison))?,
    );

    let (sam, ada) = (
        fit_config(cfg, "samerging")?,
        fit_config(cfg, "adamerging")?,
    );
    let lam = runner.run(&ExperimentConfig {
        methods: vec![method(cfg, "adamerging")?, method(cfg, "samerging")?],
        sweep: Sweep::LamInit(rc.lam_init_values.clone()),
        ..base.clone()
    })?;
    let (ra, rs) = (
        lam.median_sweep_range("adamerging"),
        lam.median_sweep_range("samerging"),
    );
    gates.push(gate(
        "lam_init.samerging_range_below_adamerging",
        rs < ra,
        rs,
        ra,
    ));
    artifacts.push(Artifact::text(
        "sweeps/lam_init.csv",
        results_csv(&lam.rows, cfg.include_wall_time),
    ));
    summary.insert(
        "lam_init_range",
        serde_json::json!({ "adamerging": ra, "samerging": rs }),
    );

    if !rc.k_values.is_empty() {
        let max_k = rc.k_values.iter().copied().max().unwrap_or(cfg.k);
        let mut suite = cfg.suite.clone();
        suite.n_calib = suite.n_calib.max(max_k);
        let ks = runner.run(&ExperimentConfig {
            suite,
            methods: vec![method(cfg, "samerging")?],
            sweep: Sweep::K(rc.k_values.clone()),
            ..base.clone()
        })?;
        let reference = if rc.k_values.contains(&cfg.k) {
            cfg.k
        } else {
            rc.k_values[0]
        };
        let gap = ks.median_paired_gap("samerging", reference as f64, max_k as f64);
        gates.push(gate(
            format!("k.samerging_k{reference}_within_k{max_k}"),
            gap <= th.k_tolerance,
            gap,
            th.k_tolerance,
        ));
        artifacts.push(Artifact::text(
            "sweeps/k.csv",
            results_csv(&ks.rows, cfg.include_wall_time),
        ));
        let per_k: BTreeMap<String, f64> = rc
            .k_values
            .iter()
            .map(|&k| (k.to_string(), ks.median_acc("samerging", Some(k as f64))))
            .collect();
        summary.insert("k", serde_json::to_value(per_k)?);
    }

    let ablation = runner.run(&ExperimentConfig {
        methods: MethodSpec::ablation_variants_from(&sam, &ada),
        ..base.clone()
    })?;
    let acc = |m: &str| ablation.median_acc(m, None);
    for (hi, lo) in [
        ("kl+sam", "kl+adam"),
        ("kl+sam", "entropy+sam"),
        ("kl+adam", "entropy+adam"),
        ("entropy+sam", "entropy+adam"),
    ] {
        gates.push(gate(
            format!("ablation.{hi}_ge_{lo}"),
            acc(hi) >= acc(lo),
            acc(hi),
            acc(lo),
        ));
    }
    artifacts.push(Artifact::text(
        "ablation.csv",
        results_csv(&ablation.rows, cfg.include_wall_time),
    ));
    summary.insert(
        "ablation",
        serde_json::to_value(medians_by_method(&ablation))?,
    );

    let (figs, fig_gates) = reproduce_figures(cfg, runner)?;
    artifacts.extend(figs);
    gates.extend(fig_gates);

    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    artifacts.push(Artifact::text("summary.json", text));
    Ok((artifacts, gates))
}

/// Landscapes, 1-D slices and flatness for the AdaMerging and SAMerging
/// solutions, plus one CSV per bound-lab check and their summaries.
pub fn reproduce_figures(
    cfg: &ExperimentConfig,
    runner: &Runner,
) -> Result<(Vec<Artifact>, Vec<GateResult>)> {
    cfg.validate()?;
    let fig = &cfg.reproduce;
    let methods = [method(cfg, "adamerging")?, method(cfg, "samerging")?];
    let mut artifacts = Vec::new();
    let mut flat_csv = String::from("#schema_version=1\nmethod,seed,flatness,avg_acc\n");
    let mut flat_by_method: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let p = runner.pipeline(cfg, seed)?;
        let (da, db) = fig.directions;
        if da >= p.taus.len() || db >= p.taus.len() {
            return Err(MergeError::Index {
                index: da.max(db),
                len: p.taus.len(),
            });
        }
        let batches = p
            .suite
            .tasks
            .iter()
            .map(|t| Batch::labeled(t.test.inputs.clone(), t.test.labels.clone()))
            .collect::<Result<Vec<_>>>()?;
        for (mi, m) in methods.iter().enumerate() {
            let out = apply_method(&p, &m.kind, cfg.k, runner.exec)?;
            let g = p.flatness(&out.params)?;
            let acc = mean(&task_accuracies(&out.params, &p.suite)?);
            flat_csv.push_str(&format!("{},{seed},{g},{acc}\n", m.name));
            flat_by_method[mi].push(g);
            if si < fig.landscape_seeds {
                let grid = landscape_scan(
                    &out.params,
                    &p.taus[da],
                    &p.taus[db],
                    &fig.grid,
                    &batches,
                    runner.exec,
                )?;
                artifacts.push(Artifact::text(
                    format!("landscape/{}_seed{seed}.csv", m.name),
                    landscape_csv(&fig.grid, &grid),
                ));
                let line = Grid {
                    a: fig.slice,
                    b: Axis::origin(),
                };
                let slice = landscape_scan(
                    &out.params,
                    &p.taus[da],
                    &p.taus[db],
                    &line,
                    &batches,
                    runner.exec,
                )?;
                artifacts.push(Artifact::text(
                    format!("landscape/{}_seed{seed}_slice.csv", m.name),
                    landscape_csv(&line, &slice),
                ));
            }
        }
    }
    artifacts.push(Artifact::text("flatness.csv", flat_csv));
    let mut gates = vec![GateResult {
        name: "flatness.samerging_le_adamerging".into(),
        passed: median(&flat_by_method[1]) <= median(&flat_by_method[0]),
        value: median(&flat_by_method[1]),
        threshold: median(&flat_by_method[0]),
    }];

    let mut summaries: Vec<TrialSummary> = Vec::new();
    for kind in CheckKind::ALL {
        let n = fig.bound_trials.unwrap_or_else(|| kind.default_trials());
        let rows = run_trials(kind, n, fig.bound_seed, &fig.bounds, runner.exec)?;
        artifacts.push(Artifact::text(
            format!("bounds/{kind}.csv"),
            trials_csv(&rows),
        ));
        let s = summarize(kind, &rows, fig.bounds.delta);
        gates.push(GateResult {
            name: format!("bounds.{kind}"),
            passed: s.passed,
            value: s.violation_rate,
            threshold: if kind.is_probabilistic() {
                fig.bounds.delta
            } else {
                0.0
            },
        });
        summaries.push(s);
    }
    let mut text = serde_json::to_string_pretty(&summaries)?;
    text.push('\n');
    artifacts.push(Artifact::text("bounds/summary.json", text));
    Ok((artifacts, gates))
}
