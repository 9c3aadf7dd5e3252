use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mergelab::bounds::{
    landscape_csv, landscape_scan, run_trials, summarize, trials_csv, CheckKind,
};
use mergelab::data::gen_suite;
use mergelab::harness::{
    apply_method, evaluate_params, reproduce, results_csv, write_artifacts, Artifact,
    ExperimentConfig, GateResult, MethodSpec, Pipeline, Runner, Sweep,
};
use mergelab::nn::{Batch, ParamSet};
use mergelab::{Execution, MergeError, Result};
use serde_json::{json, Value};

use crate::{Command, Common};

const EXPERIMENT_FILE: &str = "experiment.json";
const RHO_VALUES: [f64; 6] = [0.0, 0.01, 0.03, 0.07, 0.1, 0.2];

fn checkpoint_name(task: Option<usize>) -> String {
    match task {
        None => "pretrained.json".into(),
        Some(t) => format!("task_{t}.json"),
    }
}

fn exec(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    }
}

fn read_required(path: &Path, hint: &str) -> Result<String> {
    if !path.is_file() {
        return Err(MergeError::MissingFile {
            path: path.to_path_buf(),
            hint: hint.into(),
        });
    }
    Ok(fs::read_to_string(path)?)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = read_required(path, "pass an existing JSON file to --config")?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| MergeError::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_or_default(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn first_seed(cfg: &ExperimentConfig) -> u64 {
    cfg.seeds.first().copied().unwrap_or(0)
}

/// Rebuilds the pipeline a `finetune` run left in `dir`.
fn load_checkpoints(dir: &Path) -> Result<(ExperimentConfig, Pipeline)> {
    let hint = format!("run `mergelab finetune --out {}` first", dir.display());
    let cfg: ExperimentConfig =
        serde_json::from_str(&read_required(&dir.join(EXPERIMENT_FILE), &hint)?)?;
    let seed = first_seed(&cfg);
    let theta_0 = ParamSet::from_json(&read_required(&dir.join(checkpoint_name(None)), &hint)?)?;
    let partial = "merging needs every task; rerun `mergelab finetune` without --task";
    let finetuned = (0..cfg.suite.tasks)
        .map(|t| {
            ParamSet::from_json(&read_required(
                &dir.join(checkpoint_name(Some(t))),
                partial,
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let suite = gen_suite(&mergelab::data::SuiteConfig {
        seed,
        ..cfg.suite.clone()
    })?;
    let pipeline = Pipeline::from_parts(seed, suite, theta_0, finetuned)?;
    Ok((cfg, pipeline))
}

fn json_artifact(path: &str, value: &impl serde::Serialize) -> Result<Artifact> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(Artifact::text(path, text))
}

fn finish(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    args: Value,
    artifacts: Vec<Artifact>,
    gates: Vec<GateResult>,
) -> Result<bool> {
    let config = json!({ "experiment": cfg, "args": args });
    let manifest = write_artifacts(out, command, config, artifacts, gates)?;
    for g in manifest.gates.iter().filter(|g| !g.passed) {
        eprintln!("FAIL {}: {} vs threshold {}", g.name, g.value, g.threshold);
    }
    Ok(manifest.passed)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| MergeError::InvalidConfig(format!("bad {what} `{v}` in `{s}`")))
        })
        .collect()
}

fn test_batches(p: &Pipeline) -> Result<Vec<Batch>> {
    p.suite
        .tasks
        .iter()
        .map(|t| Batch::labeled(t.test.inputs.clone(), t.test.labels.clone()))
        .collect()
}

fn method_names(methods: &[MethodSpec]) -> String {
    let mut names: Vec<String> = Vec::new();
    for m in methods
        .iter()
        .cloned()
        .chain(MethodSpec::defaults())
        .chain(MethodSpec::ablation_variants())
    {
        if !names.contains(&m.name) {
            names.push(m.name);
        }
    }
    names.join(", ")
}

pub fn run(command: Command) -> Result<bool> {
    match command {
        Command::GenData {
            common,
            tasks,
            classes,
            dim,
            seed,
        } => gen_data(&common, tasks, classes, dim, seed),
        Command::Finetune { common, task, seed } => finetune(&common, task, seed),
        Command::Merge {
            common,
            checkpoints,
            method,
            k,
        } => merge(&common, &checkpoints, &method, k),
        Command::Eval {
            common,
            checkpoints,
            model,
        } => eval(&common, &checkpoints, &model),
        Command::Bounds {
            common,
            check,
            trials,
            seed,
        } => bounds(&common, &check, trials, seed),
        Command::Landscape {
            common,
            checkpoints,
            model,
            grid,
            directions,
        } => landscape(
            &common,
            &checkpoints,
            model.as_deref(),
            grid,
            directions.as_deref(),
        ),
        Command::Sweep {
            common,
            axis,
            values,
        } => sweep(&common, &axis, values.as_deref()),
        Command::Reproduce { common } => reproduce_all(&common),
    }
}

fn gen_data(
    common: &Common,
    tasks: Option<usize>,
    classes: Option<usize>,
    dim: Option<usize>,
    seed: Option<u64>,
) -> Result<bool> {
    let mut cfg = config_or_default(common)?;
    let suite_cfg = &mut cfg.suite;
    suite_cfg.tasks = tasks.unwrap_or(suite_cfg.tasks);
    suite_cfg.classes = classes.unwrap_or(suite_cfg.classes);
    suite_cfg.dim = dim.unwrap_or(suite_cfg.dim);
    let seed = seed.unwrap_or(first_seed(&cfg));
    cfg.suite.seed = seed;
    cfg.seeds = vec![seed];
    let suite = gen_suite(&cfg.suite)?;
    let mut artifacts = vec![
        json_artifact("suite.json", &suite.config)?,
        Artifact::text("pretrain.csv", suite.pretrain.to_csv()),
    ];
    for (t, task) in suite.tasks.iter().enumerate() {
        artifacts.push(json_artifact(&format!("task{t}/spec.json"), &task.spec)?);
        artifacts.push(Artifact::text(
            format!("task{t}/train.csv"),
            task.train.to_csv(),
        ));
        artifacts.push(Artifact::text(
            format!("task{t}/test.csv"),
            task.test.to_csv(),
        ));
        artifacts.push(Artifact::text(
            format!("task{t}/calib_pool.csv"),
            task.calib_pool.to_csv(),
        ));
    }
    finish(
        &common.out,
        "gen-data",
        &cfg,
        json!({ "seed": seed }),
        artifacts,
        Vec::new(),
    )
}

fn finetune(common: &Common, task: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let mut cfg = config_or_default(common)?;
    let seed = seed.unwrap_or(first_seed(&cfg));
    cfg.seeds = vec![seed];
    if let Some(t) = task {
        if t >= cfg.suite.tasks {
            return Err(MergeError::Index {
                index: t,
                len: cfg.suite.tasks,
            });
        }
    }
    let p = Pipeline::build(&cfg, seed, exec(common))?;
    let mut artifacts = vec![
        json_artifact(EXPERIMENT_FILE, &cfg)?,
        Artifact::text(checkpoint_name(None), p.theta_0.to_json()?),
    ];
    for (t, f) in p.finetuned.iter().enumerate() {
        if task.is_none_or(|only| only == t) {
            artifacts.push(Artifact::text(checkpoint_name(Some(t)), f.to_json()?));
        }
    }
    let mut acc = String::from("#schema_version=1\ntask,pretrained_acc,finetuned_acc\n");
    for (t, (a, b)) in p.pretrained_acc.iter().zip(&p.finetuned_acc).enumerate() {
        acc.push_str(&format!("{t},{a},{b}\n"));
    }
    artifacts.push(Artifact::text("accuracies.csv", acc));
    let gates = p.gates(&cfg.gates);
    finish(
        &common.out,
        "finetune",
        &cfg,
        json!({ "seed": seed, "task": task }),
        artifacts,
        gates,
    )
}

fn merge(common: &Common, checkpoints: &Path, method: &str, k: Option<usize>) -> Result<bool> {
    let (mut cfg, p) = load_checkpoints(checkpoints)?;
    if let Some(path) = &common.config {
        let over = load_config(path)?;
        cfg.methods = over.methods;
        cfg.k = over.k;
    }
    let spec = MethodSpec::lookup(&cfg.methods, method).ok_or_else(|| {
        MergeError::InvalidConfig(format!(
            "unknown method `{method}`; known: {}",
            method_names(&cfg.methods)
        ))
    })?;
    let k = k.unwrap_or(cfg.k);
    let outcome = apply_method(&p, &spec.kind, k, exec(common))?;
    let row = evaluate_params(&p, &spec.name, &outcome.params)?;
    let mut artifacts = vec![
        Artifact::text("merged.json", outcome.params.to_json()?),
        Artifact::text("results.csv", results_csv(&[row], false)),
        json_artifact("method.json", &spec)?,
    ];
    if let Some(lam) = &outcome.coefficients {
        artifacts.push(Artifact::text("coefficients.json", lam.to_json()?));
    }
    if let Some(log) = &outcome.log {
        artifacts.push(Artifact::text("train_log.csv", log.to_csv()));
    }
    let args = json!({
        "checkpoints": checkpoints.display().to_string(),
        "method": method,
        "k": if spec.kind.uses_calibration() { Some(k) } else { None },
    });
    finish(&common.out, "merge", &cfg, args, artifacts, Vec::new())
}

fn load_model(path: &Path) -> Result<ParamSet> {
    ParamSet::from_json(&read_required(
        path,
        "pass a model written by `mergelab merge` or `finetune`",
    )?)
}

fn eval(common: &Common, checkpoints: &Path, model: &Path) -> Result<bool> {
    let (cfg, p) = load_checkpoints(checkpoints)?;
    let net = load_model(model)?;
    let name = model
        .file_stem()
        .map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let row = evaluate_params(&p, &name, &net)?;
    let artifacts = vec![Artifact::text("results.csv", results_csv(&[row], false))];
    let args = json!({
        "checkpoints": checkpoints.display().to_string(),
        "model": model.display().to_string(),
    });
    finish(&common.out, "eval", &cfg, args, artifacts, Vec::new())
}

fn bounds(common: &Common, check: &str, trials: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let cfg = config_or_default(common)?;
    let lab = &cfg.reproduce.bounds;
    let kinds: Vec<CheckKind> = if check == "all" {
        CheckKind::ALL.to_vec()
    } else {
        vec![check.parse()?]
    };
    let seed = seed.unwrap_or(cfg.reproduce.bound_seed);
    let mut artifacts = Vec::new();
    let mut gates = Vec::new();
    let mut summaries = Vec::new();
    for kind in kinds {
        let n = trials
            .or(cfg.reproduce.bound_trials)
            .unwrap_or_else(|| kind.default_trials());
        let rows = run_trials(kind, n, seed, lab, exec(common))?;
        artifacts.push(Artifact::text(format!("{kind}.csv"), trials_csv(&rows)));
        let s = summarize(kind, &rows, lab.delta);
        println!(
            "{kind}: {} trials, {} violations (rate {:.4}), mean se {:.3e}",
            s.trials, s.violations, s.violation_rate, s.mean_se
        );
        gates.push(GateResult {
            name: format!("bounds.{kind}"),
            passed: s.passed,
            value: s.violation_rate,
            threshold: if kind.is_probabilistic() {
                lab.delta
            } else {
                0.0
            },
        });
        summaries.push(s);
    }
    artifacts.push(json_artifact("summary.json", &summaries)?);
    let args = json!({ "check": check, "trials": trials, "seed": seed });
    finish(&common.out, "bounds", &cfg, args, artifacts, gates)
}

fn landscape(
    common: &Common,
    checkpoints: &Path,
    model: Option<&Path>,
    grid: Option<mergelab::bounds::Grid>,
    directions: Option<&str>,
) -> Result<bool> {
    let (mut cfg, p) = load_checkpoints(checkpoints)?;
    if let Some(path) = &common.config {
        cfg.reproduce = load_config(path)?.reproduce;
    }
    let center = match model {
        Some(m) => load_model(m)?,
        None => p.theta_0.clone(),
    };
    let grid = grid.unwrap_or(cfg.reproduce.grid);
    let (da, db) = match directions {
        Some(s) => match parse_list::<usize>(s, "direction")?.as_slice() {
            [a, b] => (*a, *b),
            _ => {
                return Err(MergeError::InvalidConfig(format!(
                    "--directions `{s}` must be `i,j`"
                )))
            }
        },
        None => cfg.reproduce.directions,
    };
    for d in [da, db] {
        if d >= p.taus.len() {
            return Err(MergeError::Index {
                index: d,
                len: p.taus.len(),
            });
        }
    }
    let losses = landscape_scan(
        &center,
        &p.taus[da],
        &p.taus[db],
        &grid,
        &test_batches(&p)?,
        exec(common),
    )?;
    let artifacts = vec![Artifact::text(
        "landscape.csv",
        landscape_csv(&grid, &losses),
    )];
    let args = json!({
        "checkpoints": checkpoints.display().to_string(),
        "model": model.map(|m| m.display().to_string()),
        "grid": grid,
        "directions": [da, db],
    });
    finish(&common.out, "landscape", &cfg, args, artifacts, Vec::new())
}

fn sweep(common: &Common, axis: &str, values: Option<&str>) -> Result<bool> {
    let cfg = config_or_default(common)?;
    let lookup = |name: &str| {
        MethodSpec::lookup(&cfg.methods, name)
            .ok_or_else(|| MergeError::InvalidConfig(format!("unknown method `{name}`")))
    };
    let mut run_cfg = cfg.clone();
    match axis {
        "lam_init" => {
            let v = match values {
                Some(s) => parse_list(s, "lam_init")?,
                None => cfg.reproduce.lam_init_values.clone(),
            };
            run_cfg.methods = vec![lookup("adamerging")?, lookup("samerging")?];
            run_cfg.sweep = Sweep::LamInit(v);
        }
        "rho" => {
            let v = match values {
                Some(s) => parse_list(s, "rho")?,
                None => RHO_VALUES.to_vec(),
            };
            run_cfg.methods = vec![lookup("samerging")?];
            run_cfg.sweep = Sweep::Rho(v);
        }
        "k" => {
            let v: Vec<usize> = match values {
                Some(s) => parse_list(s, "k")?,
                None => cfg.reproduce.k_values.clone(),
            };
            let max_k = v.iter().copied().max().unwrap_or(cfg.k);
            run_cfg.suite.n_calib = run_cfg.suite.n_calib.max(max_k);
            run_cfg.methods = vec![lookup("samerging")?];
            run_cfg.sweep = Sweep::K(v);
        }
        other => {
            return Err(MergeError::InvalidConfig(format!(
                "unknown sweep axis `{other}`; use lam_init, rho or k"
            )))
        }
    }
    let exp = Runner::new(exec(common)).run(&run_cfg)?;
    let mut medians: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &exp.rows {
        let point = r.sweep.map_or(String::new(), |v| v.to_string());
        medians
            .entry(r.method.clone())
            .or_default()
            .insert(point, exp.median_acc(&r.method, r.sweep));
    }
    let ranges: BTreeMap<&str, f64> = run_cfg
        .methods
        .iter()
        .map(|m| (m.name.as_str(), exp.median_sweep_range(&m.name)))
        .collect();
    let artifacts = vec![
        Artifact::text(
            "results.csv",
            results_csv(&exp.rows, run_cfg.include_wall_time),
        ),
        json_artifact(
            "summary.json",
            &json!({ "median_acc": medians, "median_range": ranges }),
        )?,
    ];
    let args = json!({ "axis": axis, "values": values });
    finish(&common.out, "sweep", &run_cfg, args, artifacts, exp.gates)
}

fn reproduce_all(common: &Common) -> Result<bool> {
    let cfg = config_or_default(common)?;
    let runner = Runner::new(exec(common));
    let (artifacts, gates) = reproduce(&cfg, &runner)?;
    for g in &gates {
        println!(
            "{} {}: {} (threshold {})",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.value,
            g.threshold
        );
    }
    finish(&common.out, "reproduce", &cfg, json!({}), artifacts, gates)
}
