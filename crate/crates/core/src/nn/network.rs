//! Forward evaluation and manual reverse-mode gradients for [`ParamSet`]
//! networks.
//!
//! Batched work is split into fixed-size row chunks. Each chunk is an
//! independent unit for [`Execution`]; chunk results are summed in chunk
//! order, so parallel and sequential runs agree bit for bit.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParamSet;
use super::prob::{argmax, softmax_into, LOG_CLAMP};
use crate::error::{dim_err, MergeError, Result};
use crate::exec::Execution;

/// Rows per independent chunk in batched gradient evaluation.
pub const CHUNK_ROWS: usize = 256;

/// Inputs with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn labeled(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != inputs.rows {
            return Err(dim_err(format!(
                "{} labels for {} rows",
                labels.len(),
                inputs.rows
            )));
        }
        Ok(Batch {
            inputs,
            labels: Some(labels),
        })
    }

    pub fn unlabeled(inputs: Matrix) -> Self {
        Batch {
            inputs,
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows == 0
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return Err(MergeError::Index {
                    index: bad,
                    len: classes,
                });
            }
        }
        Ok(())
    }

    pub fn labels_or_err(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| MergeError::InvalidConfig("batch has no labels".into()))
    }
}

/// Per-row scalar loss on the network output.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// `-ln softmax(z)[y]`.
    CrossEntropy(&'a [usize]),
    /// `KL(p ‖ softmax(z))` against row-major teacher probabilities.
    KlToTeacher(&'a [f64]),
    /// Shannon entropy of `softmax(z)`.
    Entropy,
    /// `scale · Σ_o (z_o − y_o)²` against row-major targets.
    SquaredError { targets: &'a [f64], scale: f64 },
}

impl<'a> Objective<'a> {
    fn check(&self, rows: usize, classes: usize) -> Result<()> {
        match self {
            Objective::CrossEntropy(labels) => {
                if labels.len() != rows {
                    return Err(dim_err("label count != batch rows"));
                }
                if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                    return Err(MergeError::Index {
                        index: bad,
                        len: classes,
                    });
                }
            }
            Objective::KlToTeacher(p) => {
                if p.len() != rows * classes {
                    return Err(dim_err("teacher probabilities shape"));
                }
            }
            Objective::SquaredError { targets, .. } => {
                if targets.len() != rows * classes {
                    return Err(dim_err("regression targets shape"));
                }
            }
            Objective::Entropy => {}
        }
        Ok(())
    }

    fn rows(&self, start: usize, end: usize, classes: usize) -> Objective<'a> {
        match *self {
            Objective::CrossEntropy(l) => Objective::CrossEntropy(&l[start..end]),
            Objective::KlToTeacher(p) => Objective::KlToTeacher(&p[start * classes..end * classes]),
            Objective::Entropy => Objective::Entropy,
            Objective::SquaredError { targets, scale } => Objective::SquaredError {
                targets: &targets[start * classes..end * classes],
                scale,
            },
        }
    }

    /// Loss of row `i` and its gradient with respect to the logits.
    fn row(&self, i: usize, z: &[f64], q: &mut [f64], dz: &mut [f64]) -> f64 {
        let k = z.len();
        match *self {
            Objective::SquaredError { targets, scale } => {
                let t = &targets[i * k..(i + 1) * k];
                let mut loss = 0.0;
                for o in 0..k {
                    let r = z[o] - t[o];
                    loss += r * r;
                    dz[o] = 2.0 * scale * r;
                }
                return scale * loss;
            }
            _ => softmax_into(z, q),
        }
        match *self {
            Objective::CrossEntropy(labels) => {
                let y = labels[i];
                if q[y] < LOG_CLAMP {
                    dz.iter_mut().for_each(|d| *d = 0.0);
                    return -LOG_CLAMP.ln();
                }
                dz[..k].copy_from_slice(&q[..k]);
                dz[y] -= 1.0;
                -q[y].ln()
            }
            Objective::KlToTeacher(teacher) => {
                let p = &teacher[i * k..(i + 1) * k];
                // Terms whose student probability sits at the clamp are
                // constant in z.
                let mut mass = 0.0;
                let mut loss = 0.0;
                for o in 0..k {
                    if p[o] > 0.0 {
                        loss += p[o] * (p[o].ln() - q[o].max(LOG_CLAMP).ln());
                    }
                    if q[o] >= LOG_CLAMP {
                        mass += p[o];
                    }
                }
                for o in 0..k {
                    let own = if q[o] >= LOG_CLAMP { p[o] } else { 0.0 };
                    dz[o] = q[o] * mass - own;
                }
                loss.max(0.0)
            }
            Objective::Entropy => {
                let mut h = 0.0;
                for &v in q.iter() {
                    if v > 0.0 {
                        h -= v * v.ln();
                    }
                }
                for o in 0..k {
                    dz[o] = if q[o] > 0.0 {
                        -q[o] * (q[o].ln() + h)
                    } else {
                        0.0
                    };
                }
                h
            }
            Objective::SquaredError { .. } => unreachable!(),
        }
    }
}

struct Trace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    acts: Vec<Matrix>,
    pre: Vec<Matrix>,
}

fn check_input(net: &ParamSet, x: &Matrix) -> Result<()> {
    if x.cols != net.input_dim() {
        return Err(dim_err(format!(
            "input has {} columns, network expects {}",
            x.cols,
            net.input_dim()
        )));
    }
    Ok(())
}

fn trace(net: &ParamSet, x: &Matrix) -> Result<Trace> {
    check_input(net, x)?;
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    let mut pre = Vec::with_capacity(net.layers.len());
    acts.push(x.clone());
    for layer in &net.layers {
        let mut z = acts.last().expect("input").matmul_nt(&layer.w)?;
        for r in 0..z.rows {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.b) {
                *v += b;
            }
        }
        let mut a = z.clone();
        a.data.iter_mut().for_each(|v| *v = layer.act.apply(*v));
        pre.push(z);
        acts.push(a);
    }
    Ok(Trace { acts, pre })
}

/// Walks the layers backwards starting from `dout = ∂L/∂output`, calling
/// `visit(layer, dZ, A_prev)` with the pre-activation gradient of each layer.
fn backprop(
    net: &ParamSet,
    tr: &Trace,
    dout: Matrix,
    mut visit: impl FnMut(usize, &Matrix, &Matrix) -> Result<()>,
) -> Result<()> {
    let mut delta = dout;
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        for (d, z) in delta.data.iter_mut().zip(&tr.pre[l].data) {
            *d *= layer.act.derivative(*z);
        }
        visit(l, &delta, &tr.acts[l])?;
        if l > 0 {
            delta = delta.matmul(&layer.w)?;
        }
    }
    Ok(())
}

/// Per-row losses and logit gradients for a traced chunk.
fn output_grads(net: &ParamSet, tr: &Trace, obj: &Objective) -> (Vec<f64>, Matrix) {
    let out = tr.acts.last().expect("output");
    let k = out.cols;
    let mut q = vec![0.0; k];
    let mut dz = Matrix::zeros(out.rows, k);
    let losses = (0..out.rows)
        .map(|i| obj.row(i, out.row(i), &mut q, dz.row_mut(i)))
        .collect();
    debug_assert_eq!(k, net.output_dim());
    (losses, dz)
}

/// Network logits, one row per input row.
pub fn forward(net: &ParamSet, x: &Matrix) -> Result<Matrix> {
    check_input(net, x)?;
    let mut h = x.clone();
    for layer in &net.layers {
        let mut z = h.matmul_nt(&layer.w)?;
        for r in 0..z.rows {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.b) {
                *v = layer.act.apply(*v + b);
            }
        }
        h = z;
    }
    Ok(h)
}

/// Softmax of the logits, row by row.
pub fn predict_probs(net: &ParamSet, x: &Matrix) -> Result<Matrix> {
    let mut z = forward(net, x)?;
    let mut buf = vec![0.0; z.cols];
    for r in 0..z.rows {
        softmax_into(z.row(r), &mut buf);
        z.row_mut(r).copy_from_slice(&buf);
    }
    Ok(z)
}

/// Arg-max class per row (lowest index on ties).
pub fn predict_labels(net: &ParamSet, x: &Matrix) -> Result<Vec<usize>> {
    let z = forward(net, x)?;
    Ok((0..z.rows).map(|r| argmax(z.row(r))).collect())
}

pub fn accuracy(net: &ParamSet, x: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != x.rows {
        return Err(dim_err("label count != rows"));
    }
    if labels.is_empty() {
        return Err(MergeError::Empty("accuracy on empty batch"));
    }
    let pred = predict_labels(net, x)?;
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-row losses.
pub fn row_losses(net: &ParamSet, x: &Matrix, obj: Objective) -> Result<Vec<f64>> {
    let k = net.output_dim();
    obj.check(x.rows, k)?;
    let z = forward(net, x)?;
    let mut q = vec![0.0; k];
    let mut dz = vec![0.0; k];
    Ok((0..z.rows)
        .map(|i| obj.row(i, z.row(i), &mut q, &mut dz))
        .collect())
}

/// Mean loss over rows.
pub fn mean_loss(net: &ParamSet, x: &Matrix, obj: Objective) -> Result<f64> {
    if x.rows == 0 {
        return Err(MergeError::Empty("loss on empty batch"));
    }
    Ok(row_losses(net, x, obj)?.iter().sum::<f64>() / x.rows as f64)
}

/// `(Σ_i w_i ℓ_i, Σ_i w_i ∇_θ ℓ_i)`.
pub fn weighted_loss_and_grad(
    net: &ParamSet,
    x: &Matrix,
    obj: Objective,
    weights: &[f64],
    exec: Execution,
) -> Result<(f64, ParamSet)> {
    let k = net.output_dim();
    check_input(net, x)?;
    obj.check(x.rows, k)?;
    if weights.len() != x.rows {
        return Err(dim_err("row weight count != rows"));
    }
    let chunks = x.rows.div_ceil(CHUNK_ROWS);
    let parts = exec.try_map(chunks, |c| {
        let start = c * CHUNK_ROWS;
        let end = (start + CHUNK_ROWS).min(x.rows);
        chunk_loss_and_grad(
            net,
            &x.slice_rows(start, end),
            &obj.rows(start, end, k),
            &weights[start..end],
        )
    })?;
    let mut loss = 0.0;
    let mut grad = net.zeros_like();
    for (l, g) in parts {
        loss += l;
        grad.axpy(1.0, &g)?;
    }
    Ok((loss, grad))
}

fn chunk_loss_and_grad(
    net: &ParamSet,
    x: &Matrix,
    obj: &Objective,
    weights: &[f64],
) -> Result<(f64, ParamSet)> {
    let tr = trace(net, x)?;
    let (losses, mut dz) = output_grads(net, &tr, obj);
    let k = dz.cols;
    let mut loss = 0.0;
    for (i, (&l, &w)) in losses.iter().zip(weights).enumerate() {
        loss += w * l;
        dz.row_mut(i).iter_mut().for_each(|d| *d *= w);
    }
    debug_assert_eq!(k, net.output_dim());
    let mut grad = net.zeros_like();
    backprop(net, &tr, dz, |l, dzl, a_prev| {
        let gw = dzl.matmul_tn(a_prev)?;
        let layer = &mut grad.layers[l];
        layer.w = gw;
        for r in 0..dzl.rows {
            for (b, d) in layer.b.iter_mut().zip(dzl.row(r)) {
                *b += d;
            }
        }
        Ok(())
    })?;
    Ok((loss, grad))
}

/// Mean loss over the batch rows and its parameter gradient.
pub fn backward_params(net: &ParamSet, x: &Matrix, obj: Objective) -> Result<(f64, ParamSet)> {
    if x.rows == 0 {
        return Err(MergeError::Empty("gradient of empty batch"));
    }
    let w = vec![1.0 / x.rows as f64; x.rows];
    weighted_loss_and_grad(net, x, obj, &w, Execution::default())
}

/// `‖∇_θ ℓ_i‖²` for every row. Each layer's per-row weight gradient is the
/// outer product `dz_i a_iᵀ`, whose squared norm is `‖dz_i‖² ‖a_i‖²`.
pub fn per_sample_grad_sq_norms(net: &ParamSet, x: &Matrix, obj: Objective) -> Result<Vec<f64>> {
    let k = net.output_dim();
    obj.check(x.rows, k)?;
    let tr = trace(net, x)?;
    let (_, dz) = output_grads(net, &tr, &obj);
    let mut norms = vec![0.0; x.rows];
    backprop(net, &tr, dz, |_, dzl, a_prev| {
        for (i, n) in norms.iter_mut().enumerate() {
            let d: f64 = dzl.row(i).iter().map(|v| v * v).sum();
            let a: f64 = a_prev.row(i).iter().map(|v| v * v).sum();
            *n += d * (a + 1.0);
        }
        Ok(())
    })?;
    Ok(norms)
}

/// `Σ_i (∇_θ ℓ_i)²` element-wise. For weights the squared outer product
/// is the outer product of the squares.
pub fn per_sample_grad_squares(net: &ParamSet, x: &Matrix, obj: Objective) -> Result<ParamSet> {
    let k = net.output_dim();
    obj.check(x.rows, k)?;
    let tr = trace(net, x)?;
    let (_, dz) = output_grads(net, &tr, &obj);
    let mut acc = net.zeros_like();
    backprop(net, &tr, dz, |l, dzl, a_prev| {
        let mut d2 = dzl.clone();
        d2.data.iter_mut().for_each(|v| *v *= *v);
        let mut a2 = a_prev.clone();
        a2.data.iter_mut().for_each(|v| *v *= *v);
        let layer = &mut acc.layers[l];
        layer.w = d2.matmul_tn(&a2)?;
        for r in 0..d2.rows {
            for (b, d) in layer.b.iter_mut().zip(d2.row(r)) {
                *b += d;
            }
        }
        Ok(())
    })?;
    Ok(acc)
}

/// Inputs seen by every layer (`[x, a_1, …, a_{L-1}]`).
pub fn layer_inputs(net: &ParamSet, x: &Matrix) -> Result<Vec<Matrix>> {
    let mut tr = trace(net, x)?;
    tr.acts.pop();
    Ok(tr.acts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{mlp_specs, Activation, Layer};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_net(theta: f64) -> ParamSet {
        ParamSet::new(vec![Layer {
            w: Matrix::new(1, 1, vec![theta]).unwrap(),
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = ParamSet::new(vec![Layer {
            w: Matrix::identity(3),
            b: vec![0.0; 3],
            act: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::new(2, 3, vec![1.5, -2.0, 0.25, 9.0, 0.0, -1e3]).unwrap();
        assert_eq!(forward(&net, &x).unwrap(), x);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let net = ParamSet::zeros(&mlp_specs(&[4, 6, 3], Activation::Tanh));
        let x = Matrix::new(2, 4, vec![1.0; 8]).unwrap();
        assert!(forward(&net, &x).unwrap().data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_wrong_input_width() {
        let net = ParamSet::zeros(&mlp_specs(&[4, 3], Activation::Relu));
        assert!(forward(&net, &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn scalar_squared_error_gradient_by_hand() {
        let (theta, x, y) = (0.7, 1.3, -0.4);
        let net = scalar_net(theta);
        let xm = Matrix::new(1, 1, vec![x]).unwrap();
        let t = [y];
        let (loss, g) = backward_params(
            &net,
            &xm,
            Objective::SquaredError {
                targets: &t,
                scale: 1.0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(loss, (theta * x - y).powi(2), epsilon = 1e-15);
        assert_abs_diff_eq!(
            g.layers[0].w.data[0],
            2.0 * (theta * x - y) * x,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(g.layers[0].b[0], 2.0 * (theta * x - y), epsilon = 1e-15);
    }

    #[test]
    fn kl_to_own_outputs_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = ParamSet::init(&mlp_specs(&[3, 8, 4], Activation::Relu), &mut rng);
        let x = Matrix::new(
            5,
            3,
            (0..15).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let teacher = predict_probs(&net, &x).unwrap();
        let (loss, g) = backward_params(&net, &x, Objective::KlToTeacher(&teacher.data)).unwrap();
        assert!(loss.abs() < 1e-15);
        assert!(g.norm_sq() < 1e-28);
    }

    #[test]
    fn chunked_parallel_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ParamSet::init(&mlp_specs(&[2, 5, 3], Activation::Tanh), &mut rng);
        let n = CHUNK_ROWS * 2 + 17;
        let x = Matrix::new(
            n,
            2,
            (0..2 * n)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let w = vec![1.0 / n as f64; n];
        let obj = Objective::CrossEntropy(&labels);
        let a = weighted_loss_and_grad(&net, &x, obj, &w, Execution::Sequential).unwrap();
        let b = weighted_loss_and_grad(&net, &x, obj, &w, Execution::Parallel).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn label_out_of_range_is_an_index_error() {
        let net = ParamSet::zeros(&mlp_specs(&[2, 3], Activation::Relu));
        let x = Matrix::zeros(1, 2);
        let labels = [3usize];
        assert!(matches!(
            backward_params(&net, &x, Objective::CrossEntropy(&labels)),
            Err(MergeError::Index { index: 3, len: 3 })
        ));
    }
}
