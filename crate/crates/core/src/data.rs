//! Synthetic multi-task suites and the pretrain / fine-tune pipeline.
//!
//! Every task is a Gaussian mixture over a shared label space of `C`
//! classes. Task `t` takes the suite's base class means, rotates them by a
//! near-identity random rotation, blends in task-specific means and
//! translates the result to its own region of input space, so tasks are
//! related but still disagree where a single merged model has to serve all
//! of them.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptive::{adam_step, AdamConfig, AdamState};
use crate::error::{MergeError, Result};
use crate::exec::{derive_seed, Execution};
use crate::nn::{
    accuracy, backward_params, mlp_specs, Activation, LayerSpec, Matrix, Objective, ParamSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub tasks: usize,
    pub classes: usize,
    pub dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_calib: usize,
    /// Pretraining rows drawn from each task.
    pub n_pretrain: usize,
    /// Probability that a pretraining label is replaced by a uniform one.
    pub pretrain_label_noise: f64,
    /// Norm of each class mean around its task centre.
    pub separation: f64,
    /// Norm of each task's translation.
    pub task_offset: f64,
    /// Weight of the task-specific class means against the shared ones.
    pub task_specificity: f64,
    /// Scale of the perturbation the task rotation is built from.
    pub rotation: f64,
    /// Within-class standard deviation.
    pub noise: f64,
    /// Task `t` uses `noise · exp(u_t)` with `u_t ~ U(−spread, spread)`.
    pub noise_spread: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            tasks: 8,
            classes: 4,
            dim: 16,
            n_train: 2000,
            n_test: 1000,
            n_calib: 512,
            n_pretrain: 32,
            pretrain_label_noise: 0.5,
            separation: 5.0,
            task_offset: 5.0,
            task_specificity: 0.0,
            rotation: 0.2,
            noise: 1.0,
            noise_spread: 0.0,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MergeError::InvalidConfig(m.to_string()));
        if self.tasks < 2 || self.classes < 2 || self.dim < 2 {
            return bad("suite needs tasks >= 2, classes >= 2, dim >= 2");
        }
        if self.n_train == 0 || self.n_test == 0 || self.n_calib == 0 {
            return bad("every split needs at least one row");
        }
        if !(0.0..=1.0).contains(&self.pretrain_label_noise) {
            return bad("pretrain_label_noise must lie in [0, 1]");
        }
        if !(self.noise > 0.0 && self.separation > 0.0 && self.noise_spread >= 0.0) {
            return bad("noise, separation > 0 and noise_spread >= 0 required");
        }
        if !(self.task_offset >= 0.0 && self.rotation >= 0.0)
            || !(0.0..=1.0).contains(&self.task_specificity)
        {
            return bad("task_offset, rotation >= 0 and task_specificity in [0, 1] required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: usize,
    pub dim: usize,
    /// `C × d` class means.
    pub means: Matrix,
    pub noise: f64,
    pub rotation_seed: u64,
}

impl TaskSpec {
    /// Draws `n` labelled rows with uniform class priors.
    fn sample(&self, n: usize, rng: &mut impl Rng) -> (Matrix, Vec<usize>) {
        let mut x = Matrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        for r in 0..n {
            let c = rng.random_range(0..self.classes);
            labels.push(c);
            let mean = self.means.row(c);
            for (v, m) in x.row_mut(r).iter_mut().zip(mean) {
                let z: f64 = StandardNormal.sample(rng);
                *v = m + self.noise * z;
            }
        }
        (x, labels)
    }

    /// Index of the closest class mean.
    pub fn nearest_mean(&self, x: &[f64]) -> usize {
        let d2 = |c: usize| -> f64 {
            self.means
                .row(c)
                .iter()
                .zip(x)
                .map(|(m, v)| (m - v).powi(2))
                .sum()
        };
        (0..self.classes)
            .min_by(|&a, &b| d2(a).total_cmp(&d2(b)))
            .unwrap_or(0)
    }
}

/// Labelled rows with globally unique sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `id,x0,…,x{d-1},label` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id");
        for j in 0..self.inputs.cols {
            s.push_str(&format!(",x{j}"));
        }
        s.push_str(",label\n");
        for r in 0..self.len() {
            s.push_str(&self.ids[r].to_string());
            for v in self.inputs.row(r) {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{}\n", self.labels[r]));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(MergeError::Empty("dataset csv"))?;
        let cols = header.split(',').count();
        if cols < 3 {
            return Err(MergeError::InvalidConfig(
                "dataset csv header too short".into(),
            ));
        }
        let dim = cols - 2;
        let (mut data, mut labels, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let parse_err = || MergeError::InvalidConfig(format!("dataset csv line {}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(parse_err());
            }
            ids.push(fields[0].parse().map_err(|_| parse_err())?);
            for f in &fields[1..=dim] {
                data.push(f.parse::<f64>().map_err(|_| parse_err())?);
            }
            labels.push(fields[cols - 1].parse().map_err(|_| parse_err())?);
        }
        Ok(Dataset {
            inputs: Matrix::new(labels.len(), dim, data)?,
            labels,
            ids,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub calib_pool: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub config: SuiteConfig,
    pub pretrain: Dataset,
    pub tasks: Vec<TaskData>,
}

/// Unlabeled calibration inputs, `k` per task.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub inputs: Vec<Matrix>,
    pub ids: Vec<Vec<u64>>,
}

impl CalibrationSet {
    pub fn k(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.rows)
    }
}

fn random_vector(dim: usize, norm: f64, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.into_iter().map(|x| x * norm / n).collect()
}

/// Orthogonal factor of `I + s·G` with Gaussian `G`, signs fixed so the
/// diagonal of `R` is positive.
fn near_identity_rotation(dim: usize, s: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |i, j| {
        let z: f64 = StandardNormal.sample(rng);
        s * z + if i == j { 1.0 } else { 0.0 }
    });
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            for i in 0..dim {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    q
}

fn sample_dataset(spec: &TaskSpec, n: usize, next_id: &mut u64, rng: &mut impl Rng) -> Dataset {
    let (inputs, labels) = spec.sample(n, rng);
    let ids = (0..n as u64).map(|i| *next_id + i).collect();
    *next_id += n as u64;
    Dataset {
        inputs,
        labels,
        ids,
    }
}

/// Generates the suite; a pure function of `cfg`.
pub fn gen_suite(cfg: &SuiteConfig) -> Result<SyntheticSuite> {
    cfg.validate()?;
    let (c, d) = (cfg.classes, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5u64));
    let base: Vec<Vec<f64>> = (0..c)
        .map(|_| random_vector(d, cfg.separation, &mut rng))
        .collect();
    let mut specs = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let rotation_seed = derive_seed(cfg.seed, 1000 + t as u64);
        let mut trng = ChaCha8Rng::seed_from_u64(rotation_seed);
        let rot = near_identity_rotation(d, cfg.rotation, &mut trng);
        let offset = random_vector(d, cfg.task_offset, &mut trng);
        let noise = if cfg.noise_spread > 0.0 {
            cfg.noise
                * trng
                    .random_range(-cfg.noise_spread..=cfg.noise_spread)
                    .exp()
        } else {
            cfg.noise
        };
        let mut means = Matrix::zeros(c, d);
        for (k, b) in base.iter().enumerate() {
            let own = random_vector(d, cfg.separation, &mut trng);
            let blend: Vec<f64> = b
                .iter()
                .zip(&own)
                .map(|(s, o)| (1.0 - cfg.task_specificity) * s + cfg.task_specificity * o)
                .collect();
            let n = blend.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            for i in 0..d {
                let rotated: f64 = (0..d).map(|j| rot[(i, j)] * blend[j]).sum();
                means.set(k, i, rotated * cfg.separation / n + offset[i]);
            }
        }
        specs.push(TaskSpec {
            id: t,
            classes: c,
            dim: d,
            means,
            noise,
            rotation_seed,
        });
    }
    let mut tasks = Vec::with_capacity(cfg.tasks);
    let mut pre_x = Vec::new();
    let mut pre_y = Vec::new();
    let mut pre_ids = Vec::new();
    for spec in specs {
        let mut trng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2000 + spec.id as u64));
        let mut next_id = (spec.id as u64 + 1) << 32;
        let train = sample_dataset(&spec, cfg.n_train, &mut next_id, &mut trng);
        let test = sample_dataset(&spec, cfg.n_test, &mut next_id, &mut trng);
        let pre = sample_dataset(&spec, cfg.n_pretrain, &mut next_id, &mut trng);
        for r in 0..pre.len() {
            pre_x.extend_from_slice(pre.inputs.row(r));
            let y = if trng.random_bool(cfg.pretrain_label_noise) {
                trng.random_range(0..c)
            } else {
                pre.labels[r]
            };
            pre_y.push(y);
            pre_ids.push(pre.ids[r]);
        }
        // Drawn last from its own stream so the pool size leaves every other
        // split untouched.
        let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2500 + spec.id as u64));
        let calib_pool = sample_dataset(&spec, cfg.n_calib, &mut next_id, &mut crng);
        tasks.push(TaskData {
            spec,
            train,
            test,
            calib_pool,
        });
    }
    let pretrain = Dataset {
        inputs: Matrix::new(pre_y.len(), d, pre_x)?,
        labels: pre_y,
        ids: pre_ids,
    };
    Ok(SyntheticSuite {
        config: cfg.clone(),
        pretrain,
        tasks,
    })
}

/// Draws `k` pool rows per task without replacement; labels are dropped.
pub fn sample_calibration(suite: &SyntheticSuite, k: usize, seed: u64) -> Result<CalibrationSet> {
    let mut inputs = Vec::with_capacity(suite.tasks.len());
    let mut ids = Vec::with_capacity(suite.tasks.len());
    for (t, task) in suite.tasks.iter().enumerate() {
        let pool = &task.calib_pool;
        if k == 0 || k > pool.len() {
            return Err(MergeError::InvalidConfig(format!(
                "calibration size {k} not in 1..={} for task {t}",
                pool.len()
            )));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        if k < pool.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3000 + t as u64));
            order.shuffle(&mut rng);
            order.truncate(k);
        }
        inputs.push(pool.inputs.select_rows(&order));
        ids.push(order.iter().map(|&i| pool.ids[i]).collect());
    }
    Ok(CalibrationSet { inputs, ids })
}

/// True when no calibration id appears in the matching test split.
pub fn calibration_disjoint_from_test(suite: &SyntheticSuite, calib: &CalibrationSet) -> bool {
    suite.tasks.iter().zip(&calib.ids).all(|(task, ids)| {
        let test: HashSet<u64> = task.test.ids.iter().copied().collect();
        ids.iter().all(|i| !test.contains(i))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Keep the output layer fixed.
    #[serde(default)]
    pub freeze_head: bool,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 32,
            adam: AdamConfig::plain(),
            seed: 0,
            freeze_head: false,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 32,
            ..Self::pretrain_default()
        }
    }
}

/// Per-epoch mean cross-entropy.
pub type TrainCurve = Vec<f64>;

/// Minibatch Adam on cross-entropy, reshuffling every epoch.
pub fn train_ce(
    init: &ParamSet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainCurve)> {
    cfg.adam.validate()?;
    if cfg.batch_size == 0 {
        return Err(MergeError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let mut net = init.clone();
    if cfg.epochs == 0 {
        return Ok((net, Vec::new()));
    }
    if data.is_empty() {
        return Err(MergeError::Empty("training set"));
    }
    let mut flat = net.flatten();
    let mut state = AdamState::new(cfg.adam, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.inputs.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, mut grad) = backward_params(&net, &x, Objective::CrossEntropy(&y))?;
            total += loss * chunk.len() as f64;
            if cfg.freeze_head {
                let head = grad.layers.len() - 1;
                grad.layers[head].w.data.fill(0.0);
                grad.layers[head].b.fill(0.0);
            }
            adam_step(&mut state, &mut flat, &grad.flatten())?;
            net = net.unflatten(&flat)?;
        }
        curve.push(total / data.len() as f64);
    }
    Ok((net, curve))
}

/// Default `d-64-64-C` ReLU network.
pub fn default_arch(dim: usize, classes: usize) -> Vec<LayerSpec> {
    mlp_specs(&[dim, 64, 64, classes], Activation::Relu)
}

/// `θ₀`: seeded He initialisation trained on the pooled pretraining set.
pub fn pretrain(
    suite: &SyntheticSuite,
    arch: &[LayerSpec],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainCurve)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xB0));
    let init = ParamSet::init(arch, &mut rng);
    if init.input_dim() != suite.config.dim || init.output_dim() != suite.config.classes {
        return Err(MergeError::Dimension(
            "architecture does not match the suite".into(),
        ));
    }
    train_ce(&init, &suite.pretrain, cfg)
}

/// `θ_t`: fine-tunes a copy of `theta_0` on one task's training split.
pub fn finetune_task(theta_0: &ParamSet, task: &TaskData, cfg: &TrainConfig) -> Result<ParamSet> {
    let cfg = TrainConfig {
        seed: derive_seed(cfg.seed, 0xF00 + task.spec.id as u64),
        ..*cfg
    };
    Ok(train_ce(theta_0, &task.train, &cfg)?.0)
}

/// Fine-tunes every task independently.
pub fn finetune_all(
    theta_0: &ParamSet,
    suite: &SyntheticSuite,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<Vec<ParamSet>> {
    exec.try_map(suite.tasks.len(), |t| {
        finetune_task(theta_0, &suite.tasks[t], cfg)
    })
}

/// Test accuracy of `net` on every task.
pub fn task_accuracies(net: &ParamSet, suite: &SyntheticSuite) -> Result<Vec<f64>> {
    suite
        .tasks
        .iter()
        .map(|t| accuracy(net, &t.test.inputs, &t.test.labels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            tasks: 2,
            n_train: 200,
            n_test: 500,
            n_calib: 50,
            n_pretrain: 20,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = gen_suite(&small()).unwrap();
        let b = gen_suite(&small()).unwrap();
        assert_eq!(a, b);
        for t in &a.tasks {
            let mut all: Vec<u64> = t.train.ids.clone();
            all.extend(&t.test.ids);
            all.extend(&t.calib_pool.ids);
            let set: HashSet<u64> = all.iter().copied().collect();
            assert_eq!(set.len(), all.len());
        }
        let cal = sample_calibration(&a, 16, 3).unwrap();
        assert!(calibration_disjoint_from_test(&a, &cal));
        assert_eq!(cal.k(), 16);
        let whole = sample_calibration(&a, 50, 3).unwrap();
        assert_eq!(whole.inputs[0], a.tasks[0].calib_pool.inputs);
        assert!(sample_calibration(&a, 51, 3).is_err());
    }

    #[test]
    fn separated_tasks_are_nearly_bayes_perfect() {
        let cfg = SuiteConfig {
            separation: 12.0,
            noise: 0.5,
            ..small()
        };
        let s = gen_suite(&cfg).unwrap();
        for t in &s.tasks {
            let hits = (0..t.test.len())
                .filter(|&r| t.spec.nearest_mean(t.test.inputs.row(r)) == t.test.labels[r])
                .count();
            assert!(hits as f64 / t.test.len() as f64 >= 0.99);
        }
    }

    #[test]
    fn class_priors_uniform() {
        let s = gen_suite(&SuiteConfig {
            n_train: 4000,
            ..small()
        })
        .unwrap();
        let n: f64 = 4000.0;
        let p: f64 = 0.25;
        let sd = (n * p * (1.0 - p)).sqrt();
        for t in &s.tasks {
            for c in 0..4 {
                let count = t.train.labels.iter().filter(|&&y| y == c).count() as f64;
                assert!((count - n * p).abs() < 3.0 * sd + 1.0, "class {c}: {count}");
            }
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let s = gen_suite(&small()).unwrap();
        let arch = default_arch(16, 4);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::pretrain_default()
        };
        let (theta_0, curve) = pretrain(&s, &arch, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, 0xB0));
        assert_eq!(theta_0, ParamSet::init(&arch, &mut rng));
        assert!(curve.is_empty());
        let ft = finetune_task(&theta_0, &s.tasks[0], &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(ft, theta_0);
    }

    #[test]
    fn csv_roundtrip() {
        let s = gen_suite(&small()).unwrap();
        let ds = &s.tasks[1].calib_pool;
        assert_eq!(&Dataset::from_csv(&ds.to_csv()).unwrap(), ds);
    }
}
