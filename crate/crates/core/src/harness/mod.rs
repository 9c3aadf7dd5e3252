//! End-to-end experiments: per-seed pipelines, method comparisons, sweeps
//! and the artefacts they write.

mod output;
mod reproduce;

pub use output::{results_csv, sha256_hex, write_artifacts, Artifact, FileEntry, Manifest};
pub use reproduce::{reproduce, reproduce_figures, ReproduceConfig};

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adaptive::{fit, FitConfig, MergeObjective, MergeProblem, Optimizer, TrainLog};
use crate::bounds::flatness_proxy;
use crate::data::{
    default_arch, finetune_all, gen_suite, pretrain, sample_calibration, task_accuracies,
    SuiteConfig, SyntheticSuite, TrainConfig,
};
use crate::error::{MergeError, Result};
use crate::exec::{derive_seed, Execution};
use crate::nn::{Objective, ParamSet};
use crate::static_mergers::{
    collect_gram_stats, estimate_diag_fisher, fisher_merge, regmean_merge, simple_average,
    task_arithmetic, ties_merge, FisherConfig, RegMeanConfig, TiesConfig, TASK_ARITHMETIC_SCALE,
};
use crate::task_vectors::{compute_task_vectors, merged_params, MergeCoefficients, TaskVector};

/// How a method turns the checkpoints into one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodKind {
    /// `θ₀` itself.
    Pretrained,
    /// Each task evaluated with its own fine-tuned model.
    FineTuned,
    Average,
    TaskArithmetic {
        scale: f64,
    },
    Ties(TiesConfig),
    Fisher(FisherConfig),
    RegMean(RegMeanConfig),
    Adaptive(FitConfig),
}

impl MethodKind {
    pub fn uses_calibration(&self) -> bool {
        matches!(
            self,
            MethodKind::Fisher(_) | MethodKind::RegMean(_) | MethodKind::Adaptive(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodSpec {
    pub fn new(name: &str, kind: MethodKind) -> Self {
        MethodSpec {
            name: name.to_string(),
            kind,
        }
    }

    pub fn samerging() -> Self {
        MethodSpec::new("samerging", MethodKind::Adaptive(FitConfig::samerging()))
    }

    pub fn adamerging() -> Self {
        MethodSpec::new("adamerging", MethodKind::Adaptive(FitConfig::adamerging()))
    }

    pub fn task_arithmetic() -> Self {
        MethodSpec::new(
            "task_arithmetic",
            MethodKind::TaskArithmetic {
                scale: TASK_ARITHMETIC_SCALE,
            },
        )
    }

    /// Every baseline plus both coefficient-learning mergers.
    pub fn defaults() -> Vec<MethodSpec> {
        vec![
            MethodSpec::new("pretrained", MethodKind::Pretrained),
            MethodSpec::new("fine_tuned", MethodKind::FineTuned),
            MethodSpec::new("average", MethodKind::Average),
            MethodSpec::task_arithmetic(),
            MethodSpec::new("ties", MethodKind::Ties(TiesConfig::default())),
            MethodSpec::new("fisher", MethodKind::Fisher(FisherConfig::default())),
            MethodSpec::new("regmean", MethodKind::RegMean(RegMeanConfig::default())),
            MethodSpec::adamerging(),
            MethodSpec::samerging(),
        ]
    }

    /// `{kl, entropy} × {sam, adam}`. Each single removal swaps exactly
    /// one ingredient of SAMerging; `entropy+adam` is AdaMerging itself.
    pub fn ablation_variants() -> Vec<MethodSpec> {
        Self::ablation_variants_from(&FitConfig::samerging(), &FitConfig::adamerging())
    }

    /// The same four variants built around the given SAMerging and
    /// AdaMerging settings.
    pub fn ablation_variants_from(full: &FitConfig, entropy_adam: &FitConfig) -> Vec<MethodSpec> {
        let full = full.clone();
        let kl_adam = FitConfig {
            optimizer: Optimizer::Adam(full.optimizer_base()),
            ..full.clone()
        };
        let entropy_sam = FitConfig {
            objective: MergeObjective::Entropy,
            ..full.clone()
        };
        vec![
            MethodSpec::new("kl+sam", MethodKind::Adaptive(full)),
            MethodSpec::new("kl+adam", MethodKind::Adaptive(kl_adam)),
            MethodSpec::new("entropy+sam", MethodKind::Adaptive(entropy_sam)),
            MethodSpec::new("entropy+adam", MethodKind::Adaptive(entropy_adam.clone())),
        ]
    }

    /// Finds `name` among `methods`, then among the built-in defaults and
    /// ablation variants.
    pub fn lookup(methods: &[MethodSpec], name: &str) -> Option<MethodSpec> {
        methods
            .iter()
            .cloned()
            .chain(Self::defaults())
            .chain(Self::ablation_variants())
            .find(|m| m.name == name)
    }
}

/// Which setting varies across the cells of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum Sweep {
    #[default]
    None,
    LamInit(Vec<f64>),
    Rho(Vec<f64>),
    K(Vec<usize>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::None => "none",
            Sweep::LamInit(_) => "lam_init",
            Sweep::Rho(_) => "rho",
            Sweep::K(_) => "k",
        }
    }

    fn points(&self) -> Vec<Option<f64>> {
        match self {
            Sweep::None => vec![None],
            Sweep::LamInit(v) | Sweep::Rho(v) => v.iter().map(|x| Some(*x)).collect(),
            Sweep::K(v) => v.iter().map(|x| Some(*x as f64)).collect(),
        }
    }

    fn len(&self) -> usize {
        self.points().len()
    }
}

/// Fine-tuning preconditions checked before any merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub min_finetune_accuracy: f64,
    pub min_finetune_gain: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            min_finetune_accuracy: 0.95,
            min_finetune_gain: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    /// Calibration inputs per task.
    pub k: usize,
    pub sweep: Sweep,
    pub gates: GateConfig,
    /// Adds a `wall_time_s` column; off by default so reruns stay byte-identical.
    pub include_wall_time: bool,
    pub reproduce: ReproduceConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            suite: SuiteConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            methods: MethodSpec::defaults(),
            seeds: vec![0, 1, 2, 3, 4],
            k: 16,
            sweep: Sweep::None,
            gates: GateConfig::default(),
            include_wall_time: false,
            reproduce: ReproduceConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MergeError::InvalidConfig(m));
        if self.methods.is_empty() || self.seeds.is_empty() {
            return bad("an experiment needs at least one method and one seed".into());
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("method names must be unique".into());
        }
        self.suite.validate()?;
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        match &self.sweep {
            Sweep::None => {}
            Sweep::LamInit(v) | Sweep::Rho(v) => {
                if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                    return bad(format!(
                        "{} sweep values must be finite and non-empty",
                        self.sweep.name()
                    ));
                }
                for m in &self.methods {
                    let ok = match (&self.sweep, &m.kind) {
                        (Sweep::LamInit(_), MethodKind::Adaptive(_)) => true,
                        (Sweep::Rho(_), MethodKind::Adaptive(f)) => {
                            matches!(f.optimizer, Optimizer::Sam(_))
                        }
                        _ => false,
                    };
                    if !ok {
                        return bad(format!(
                            "method `{}` has no {} setting to sweep",
                            m.name,
                            self.sweep.name()
                        ));
                    }
                }
            }
            Sweep::K(v) => {
                if v.is_empty() || v.contains(&0) {
                    return bad("k sweep values must be >= 1".into());
                }
            }
        }
        for m in &self.methods {
            if let MethodKind::Adaptive(f) = &m.kind {
                f.validate()?;
            }
        }
        Ok(())
    }

    /// AdaMerging and SAMerging over `λ_init ∈ {0, 0.1, …, 0.5}`.
    pub fn lam_init_sweep() -> Self {
        ExperimentConfig {
            methods: vec![MethodSpec::adamerging(), MethodSpec::samerging()],
            sweep: Sweep::LamInit(vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
            ..Self::default()
        }
    }

    /// SAMerging over `k ∈ {4, 16, 64, 256, 1024}` from a 1024-row pool.
    pub fn k_sweep() -> Self {
        let values = vec![4, 16, 64, 256, 1024];
        ExperimentConfig {
            suite: SuiteConfig {
                n_calib: 1024,
                ..SuiteConfig::default()
            },
            methods: vec![MethodSpec::samerging()],
            sweep: Sweep::K(values),
            ..Self::default()
        }
    }

    pub fn ablation() -> Self {
        ExperimentConfig {
            methods: MethodSpec::ablation_variants(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

/// Suite, `θ₀` and fine-tuned checkpoints for one seed.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub seed: u64,
    pub suite: SyntheticSuite,
    pub theta_0: ParamSet,
    pub finetuned: Vec<ParamSet>,
    pub taus: Vec<TaskVector>,
    pub pretrained_acc: Vec<f64>,
    /// Own-task test accuracy of each fine-tuned model.
    pub finetuned_acc: Vec<f64>,
}

impl Pipeline {
    pub fn build(cfg: &ExperimentConfig, seed: u64, exec: Execution) -> Result<Pipeline> {
        let suite = gen_suite(&SuiteConfig {
            seed,
            ..cfg.suite.clone()
        })?;
        let arch = default_arch(suite.config.dim, suite.config.classes);
        let (theta_0, _) = pretrain(
            &suite,
            &arch,
            &TrainConfig {
                seed,
                ..cfg.pretrain
            },
        )?;
        let finetuned = finetune_all(
            &theta_0,
            &suite,
            &TrainConfig {
                seed,
                ..cfg.finetune
            },
            exec,
        )?;
        Pipeline::from_parts(seed, suite, theta_0, finetuned)
    }

    pub fn from_parts(
        seed: u64,
        suite: SyntheticSuite,
        theta_0: ParamSet,
        finetuned: Vec<ParamSet>,
    ) -> Result<Pipeline> {
        if finetuned.len() != suite.tasks.len() {
            return Err(MergeError::Dimension(format!(
                "{} checkpoints for {} tasks",
                finetuned.len(),
                suite.tasks.len()
            )));
        }
        let taus = compute_task_vectors(&theta_0, &finetuned)?;
        let pretrained_acc = task_accuracies(&theta_0, &suite)?;
        let finetuned_acc = finetuned
            .iter()
            .enumerate()
            .map(|(t, f)| {
                crate::nn::accuracy(f, &suite.tasks[t].test.inputs, &suite.tasks[t].test.labels)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pipeline {
            seed,
            suite,
            theta_0,
            finetuned,
            taus,
            pretrained_acc,
            finetuned_acc,
        })
    }

    pub fn finetuned_average(&self) -> f64 {
        mean(&self.finetuned_acc)
    }

    pub fn gates(&self, g: &GateConfig) -> Vec<GateResult> {
        let min_acc = self
            .finetuned_acc
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let min_gain = self
            .finetuned_acc
            .iter()
            .zip(&self.pretrained_acc)
            .map(|(f, p)| f - p)
            .fold(f64::INFINITY, f64::min);
        vec![
            GateResult {
                name: format!("seed{}.finetune_accuracy", self.seed),
                passed: min_acc >= g.min_finetune_accuracy,
                value: min_acc,
                threshold: g.min_finetune_accuracy,
            },
            GateResult {
                name: format!("seed{}.finetune_gain", self.seed),
                passed: min_gain >= g.min_finetune_gain,
                value: min_gain,
                threshold: g.min_finetune_gain,
            },
        ]
    }

    /// Mean over tasks of `Ĝ` on each task's labelled test split.
    pub fn flatness(&self, net: &ParamSet) -> Result<f64> {
        let vals = self
            .suite
            .tasks
            .iter()
            .map(|t| flatness_proxy(net, &t.test.inputs, Objective::CrossEntropy(&t.test.labels)))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean(&vals))
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median with the two middle values averaged.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A merged model plus whatever the method fitted along the way.
#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub params: ParamSet,
    pub coefficients: Option<MergeCoefficients>,
    pub log: Option<TrainLog>,
}

/// Builds the merged model of `kind`. Data-dependent methods see only
/// the unlabeled calibration inputs. Not defined for [`MethodKind::FineTuned`].
pub fn apply_method(
    p: &Pipeline,
    kind: &MethodKind,
    k: usize,
    exec: Execution,
) -> Result<MethodOutcome> {
    let plain = |params| MethodOutcome {
        params,
        coefficients: None,
        log: None,
    };
    let calib = if kind.uses_calibration() {
        Some(sample_calibration(
            &p.suite,
            k,
            derive_seed(p.seed, 0xCA11),
        )?)
    } else {
        None
    };
    Ok(match kind {
        MethodKind::Pretrained => plain(p.theta_0.clone()),
        MethodKind::FineTuned => {
            return Err(MergeError::InvalidConfig(
                "fine_tuned is a per-task reference, not a merged model".into(),
            ))
        }
        MethodKind::Average => plain(simple_average(&p.finetuned)?),
        MethodKind::TaskArithmetic { scale } => {
            plain(task_arithmetic(&p.theta_0, &p.taus, *scale)?)
        }
        MethodKind::Ties(c) => plain(ties_merge(&p.theta_0, &p.taus, c)?),
        MethodKind::Fisher(c) => {
            let cal = calib.expect("calibration");
            let fishers = p
                .finetuned
                .iter()
                .zip(&cal.inputs)
                .map(|(f, x)| estimate_diag_fisher(f, x, c))
                .collect::<Result<Vec<_>>>()?;
            plain(fisher_merge(&p.finetuned, &fishers)?)
        }
        MethodKind::RegMean(c) => {
            let cal = calib.expect("calibration");
            let grams = p
                .finetuned
                .iter()
                .zip(&cal.inputs)
                .map(|(f, x)| collect_gram_stats(f, x))
                .collect::<Result<Vec<_>>>()?;
            plain(regmean_merge(&p.finetuned, &grams, c.rho_off)?)
        }
        MethodKind::Adaptive(f) => {
            let cal = calib.expect("calibration");
            let teachers = (f.objective == MergeObjective::Kl).then_some(p.finetuned.as_slice());
            let problem =
                MergeProblem::new(&p.theta_0, &p.taus, teachers, &cal.inputs, None, exec)?;
            let (lam, log) = fit(&problem, f)?;
            MethodOutcome {
                params: merged_params(&p.theta_0, &p.taus, &lam)?,
                coefficients: Some(lam),
                log: Some(log),
            }
        }
    })
}

/// One (method, seed, sweep value) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub sweep: Option<f64>,
    pub task_acc: Vec<f64>,
    pub avg_acc: f64,
    /// `avg_acc` over the mean own-task accuracy of the fine-tuned models.
    pub norm_acc: f64,
    pub flatness: f64,
    pub wall_time_s: f64,
}

/// Scores an arbitrary parameter set the same way experiment cells are scored.
pub fn evaluate_params(p: &Pipeline, name: &str, params: &ParamSet) -> Result<ResultRow> {
    let task_acc = task_accuracies(params, &p.suite)?;
    let avg_acc = mean(&task_acc);
    Ok(ResultRow {
        method: name.to_string(),
        seed: p.seed,
        sweep: None,
        task_acc,
        avg_acc,
        norm_acc: avg_acc / p.finetuned_average(),
        flatness: p.flatness(params)?,
        wall_time_s: 0.0,
    })
}

fn evaluate(
    p: &Pipeline,
    spec_name: &str,
    kind: &MethodKind,
    k: usize,
    sweep: Option<f64>,
    exec: Execution,
) -> Result<ResultRow> {
    let start = Instant::now();
    let (task_acc, flatness) = match kind {
        MethodKind::FineTuned => {
            let g = p
                .finetuned
                .iter()
                .zip(&p.suite.tasks)
                .map(|(f, t)| {
                    flatness_proxy(f, &t.test.inputs, Objective::CrossEntropy(&t.test.labels))
                })
                .collect::<Result<Vec<_>>>()?;
            (p.finetuned_acc.clone(), mean(&g))
        }
        _ => {
            let out = apply_method(p, kind, k, exec)?;
            (
                task_accuracies(&out.params, &p.suite)?,
                p.flatness(&out.params)?,
            )
        }
    };
    let avg_acc = mean(&task_acc);
    Ok(ResultRow {
        method: spec_name.to_string(),
        seed: p.seed,
        sweep,
        task_acc,
        avg_acc,
        norm_acc: avg_acc / p.finetuned_average(),
        flatness,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

fn swept(kind: &MethodKind, sweep: &Sweep, point: Option<f64>, k: usize) -> (MethodKind, usize) {
    let mut kind = kind.clone();
    let mut k = k;
    if let (Some(v), MethodKind::Adaptive(f)) = (point, &mut kind) {
        match sweep {
            Sweep::LamInit(_) => f.lam_init = v,
            Sweep::Rho(_) => {
                if let Optimizer::Sam(s) = &mut f.optimizer {
                    s.rho = v;
                }
            }
            _ => {}
        }
    }
    if let (Sweep::K(_), Some(v)) = (sweep, point) {
        k = v as usize;
    }
    if !kind.uses_calibration() {
        k = 0;
    }
    (kind, k)
}

/// Experiment output: sorted rows plus the gates evaluated on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub rows: Vec<ResultRow>,
    pub gates: Vec<GateResult>,
}

impl Experiment {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Median over seeds of `avg_acc` at one sweep point.
    pub fn median_acc(&self, method: &str, sweep: Option<f64>) -> f64 {
        let v: Vec<f64> = self
            .rows_for(method)
            .filter(|r| r.sweep == sweep)
            .map(|r| r.avg_acc)
            .collect();
        median(&v)
    }

    pub fn median_flatness(&self, method: &str) -> f64 {
        let v: Vec<f64> = self.rows_for(method).map(|r| r.flatness).collect();
        median(&v)
    }

    /// Median over seeds of `max − min` accuracy across the sweep.
    /// Median over seeds of `|acc(a) − acc(b)|` between two sweep points.
    pub fn median_paired_gap(&self, method: &str, a: f64, b: f64) -> f64 {
        let mut per_seed: HashMap<u64, (Option<f64>, Option<f64>)> = HashMap::new();
        for r in self.rows_for(method) {
            let e = per_seed.entry(r.seed).or_default();
            if r.sweep == Some(a) {
                e.0 = Some(r.avg_acc);
            }
            if r.sweep == Some(b) {
                e.1 = Some(r.avg_acc);
            }
        }
        let gaps: Vec<f64> = per_seed
            .values()
            .filter_map(|e| match e {
                (Some(x), Some(y)) => Some((x - y).abs()),
                _ => None,
            })
            .collect();
        median(&gaps)
    }

    pub fn median_sweep_range(&self, method: &str) -> f64 {
        let mut per_seed: HashMap<u64, (f64, f64)> = HashMap::new();
        for r in self.rows_for(method) {
            let e = per_seed
                .entry(r.seed)
                .or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(r.avg_acc);
            e.1 = e.1.max(r.avg_acc);
        }
        let ranges: Vec<f64> = per_seed.values().map(|(lo, hi)| hi - lo).collect();
        median(&ranges)
    }
}

/// Caches pipelines per (suite, training config, seed) and results per
/// effective cell so overlapping experiments reuse work.
#[derive(Debug, Default)]
pub struct Runner {
    pub exec: Execution,
    pipelines: Mutex<HashMap<String, Arc<Pipeline>>>,
    cells: Mutex<HashMap<String, ResultRow>>,
}

impl Runner {
    pub fn new(exec: Execution) -> Self {
        Runner {
            exec,
            ..Runner::default()
        }
    }

    pub fn pipeline(&self, cfg: &ExperimentConfig, seed: u64) -> Result<Arc<Pipeline>> {
        let key = serde_json::to_string(&(&cfg.suite, &cfg.pretrain, &cfg.finetune, seed))?;
        if let Some(p) = self.pipelines.lock().expect("pipeline cache").get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(Pipeline::build(cfg, seed, self.exec)?);
        self.pipelines
            .lock()
            .expect("pipeline cache")
            .insert(key, p.clone());
        Ok(p)
    }

    /// Installs a pipeline built elsewhere (for example from checkpoints on disk).
    pub fn insert_pipeline(&self, cfg: &ExperimentConfig, p: Pipeline) -> Result<()> {
        let key = serde_json::to_string(&(&cfg.suite, &cfg.pretrain, &cfg.finetune, p.seed))?;
        self.pipelines
            .lock()
            .expect("pipeline cache")
            .insert(key, Arc::new(p));
        Ok(())
    }

    /// Runs every (method, seed, sweep value) cell. Fails with
    /// [`MergeError::Gate`] if any seed's fine-tuned models miss the gates.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<Experiment> {
        cfg.validate()?;
        let mut gates = Vec::new();
        let mut pipes = Vec::with_capacity(cfg.seeds.len());
        for &s in &cfg.seeds {
            let p = self.pipeline(cfg, s)?;
            gates.extend(p.gates(&cfg.gates));
            pipes.push(p);
        }
        if let Some(g) = gates.iter().find(|g| !g.passed) {
            return Err(MergeError::Gate(format!(
                "{}: {:.4} below threshold {:.4}",
                g.name, g.value, g.threshold
            )));
        }
        let points = cfg.sweep.points();
        let (nm, ns, np) = (cfg.methods.len(), pipes.len(), cfg.sweep.len());
        let mut rows = self.exec.try_map(nm * ns * np, |c| {
            let (m, rest) = (c / (ns * np), c % (ns * np));
            let (s, i) = (rest / np, rest % np);
            let spec = &cfg.methods[m];
            let pipe = &pipes[s];
            let (kind, k) = swept(&spec.kind, &cfg.sweep, points[i], cfg.k);
            let key = serde_json::to_string(&(
                &cfg.suite,
                &cfg.pretrain,
                &cfg.finetune,
                pipe.seed,
                &kind,
                k,
            ))?;
            let cached = self.cells.lock().expect("cell cache").get(&key).cloned();
            let mut row = match cached {
                Some(r) => r,
                None => {
                    let r = evaluate(pipe, &spec.name, &kind, k, points[i], Execution::Sequential)?;
                    self.cells
                        .lock()
                        .expect("cell cache")
                        .insert(key, r.clone());
                    r
                }
            };
            row.method = spec.name.clone();
            row.sweep = points[i];
            Ok::<_, MergeError>(row)
        })?;
        sort_rows(&mut rows);
        Ok(Experiment { rows, gates })
    }
}

pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(
                a.sweep
                    .unwrap_or(f64::NEG_INFINITY)
                    .total_cmp(&b.sweep.unwrap_or(f64::NEG_INFINITY)),
            )
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn run_comparison(cfg: &ExperimentConfig, exec: Execution) -> Result<Experiment> {
    Runner::new(exec).run(cfg)
}

/// Runs `cfg` with its sweep replaced by `λ_init ∈ values`.
pub fn sweep_lambda_init(
    cfg: &ExperimentConfig,
    values: &[f64],
    exec: Execution,
) -> Result<Experiment> {
    Runner::new(exec).run(&ExperimentConfig {
        sweep: Sweep::LamInit(values.to_vec()),
        ..cfg.clone()
    })
}

/// Runs `cfg` with its sweep replaced by `k ∈ values`; the calibration
/// pool grows to the largest `k` when needed.
pub fn sweep_k(cfg: &ExperimentConfig, values: &[usize], exec: Execution) -> Result<Experiment> {
    let max_k = values.iter().copied().max().unwrap_or(cfg.k);
    let mut suite = cfg.suite.clone();
    suite.n_calib = suite.n_calib.max(max_k);
    Runner::new(exec).run(&ExperimentConfig {
        suite,
        sweep: Sweep::K(values.to_vec()),
        ..cfg.clone()
    })
}

/// The four objective × optimizer variants.
pub fn ablate_kl_sam(cfg: &ExperimentConfig, exec: Execution) -> Result<Experiment> {
    Runner::new(exec).run(&ExperimentConfig {
        methods: MethodSpec::ablation_variants(),
        sweep: Sweep::None,
        ..cfg.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn config_round_trips_through_json() {
        for cfg in [
            ExperimentConfig::default(),
            ExperimentConfig::lam_init_sweep(),
            ExperimentConfig::k_sweep(),
            ExperimentConfig::ablation(),
        ] {
            let s = serde_json::to_string_pretty(&cfg).unwrap();
            let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
            assert_eq!(back, cfg);
            back.validate().unwrap();
        }
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds":[7],"k":4}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert_eq!(partial.methods, MethodSpec::defaults());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.seeds = vec![0];
        cfg.sweep = Sweep::LamInit(vec![0.0, f64::NAN]);
        assert!(cfg.validate().is_err());
        cfg.sweep = Sweep::LamInit(vec![0.0]);
        assert!(
            cfg.validate().is_err(),
            "static methods cannot sweep lam_init"
        );
        cfg.methods = vec![MethodSpec::adamerging()];
        cfg.sweep = Sweep::Rho(vec![0.1]);
        assert!(cfg.validate().is_err(), "adam has no rho");
        cfg.methods = vec![MethodSpec::samerging(), MethodSpec::samerging()];
        cfg.sweep = Sweep::None;
        assert!(cfg.validate().is_err(), "duplicate names");
    }

    #[test]
    fn rows_sort_by_method_then_sweep_then_seed() {
        let row = |m: &str, s: u64, v: f64| ResultRow {
            method: m.into(),
            seed: s,
            sweep: Some(v),
            task_acc: vec![0.5],
            avg_acc: 0.5,
            norm_acc: 0.5,
            flatness: 0.0,
            wall_time_s: 0.0,
        };
        let mut rows = vec![
            row("b", 0, 0.1),
            row("a", 1, 0.2),
            row("a", 0, 0.2),
            row("a", 3, 0.1),
        ];
        sort_rows(&mut rows);
        let keys: Vec<(String, u64)> = rows.iter().map(|r| (r.method.clone(), r.seed)).collect();
        assert_eq!(
            keys,
            vec![
                ("a".into(), 3),
                ("a".into(), 0),
                ("a".into(), 1),
                ("b".into(), 0)
            ]
        );
    }
}
