use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, MergeError, Result};
use crate::nn::{layer_inputs, Matrix, ParamSet};

/// Input Gram matrices `XᵀX` at every linear layer of one task's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramStats {
    pub grams: Vec<Matrix>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegMeanConfig {
    /// Multiplier applied to off-diagonal Gram entries.
    pub rho_off: f64,
    pub num_samples: usize,
}

impl Default for RegMeanConfig {
    fn default() -> Self {
        RegMeanConfig {
            rho_off: 0.6,
            num_samples: 1600,
        }
    }
}

/// Accumulates Grams of the inputs each layer sees under `theta` itself.
pub fn collect_gram_stats(theta: &ParamSet, inputs: &Matrix) -> Result<GramStats> {
    if inputs.rows == 0 {
        return Err(MergeError::Empty("gram statistics batch"));
    }
    let grams = layer_inputs(theta, inputs)?
        .iter()
        .map(|a| a.matmul_tn(a))
        .collect::<Result<Vec<_>>>()?;
    Ok(GramStats {
        grams,
        count: inputs.rows,
    })
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

/// Solves `A X = B` for symmetric positive-definite `A`, retrying once with
/// `1e-8 · tr(A)/dim` on the diagonal.
fn spd_solve(a: DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    let n = a.nrows();
    let jitter = 1e-8 * a.trace() / n as f64;
    let mut aj = a;
    for i in 0..n {
        aj[(i, i)] += jitter;
    }
    aj.cholesky()
        .map(|ch| ch.solve(b))
        .ok_or_else(|| MergeError::Degenerate("accumulated Gram is singular after jitter".into()))
}

/// Per linear layer `Wᵀ = (Σ_t G̃_t)⁻¹ Σ_t G̃_t W_tᵀ`, with `G̃` the Gram whose
/// off-diagonal entries are scaled by `rho_off`. Biases are averaged.
pub fn regmean_merge(thetas: &[ParamSet], grams: &[GramStats], rho_off: f64) -> Result<ParamSet> {
    let first = thetas
        .first()
        .ok_or(MergeError::Empty("regmean_merge needs models"))?;
    if !(rho_off > 0.0 && rho_off <= 1.0) {
        return Err(MergeError::InvalidConfig(format!(
            "rho_off {rho_off} not in (0, 1]"
        )));
    }
    if grams.len() != thetas.len() {
        return Err(dim_err("one GramStats per model required"));
    }
    for t in thetas {
        first.check_shape(t, "regmean_merge")?;
    }
    let mut out = first.clone();
    for l in 0..first.layers.len() {
        let (out_dim, in_dim) = (first.layers[l].w.rows, first.layers[l].w.cols);
        let mut a = DMatrix::<f64>::zeros(in_dim, in_dim);
        let mut b = DMatrix::<f64>::zeros(in_dim, out_dim);
        for (theta, g) in thetas.iter().zip(grams) {
            let gram = g
                .grams
                .get(l)
                .ok_or_else(|| dim_err(format!("missing Gram for layer {l}")))?;
            if gram.rows != in_dim || gram.cols != in_dim {
                return Err(dim_err(format!(
                    "Gram for layer {l} is not {in_dim}x{in_dim}"
                )));
            }
            let mut gt = to_dmatrix(gram);
            for i in 0..in_dim {
                for j in 0..in_dim {
                    if i != j {
                        gt[(i, j)] *= rho_off;
                    }
                }
            }
            let wt = to_dmatrix(&theta.layers[l].w).transpose();
            b += &gt * wt;
            a += gt;
        }
        let x = spd_solve(a, &b)?;
        let w = &mut out.layers[l].w;
        for o in 0..out_dim {
            for i in 0..in_dim {
                w.data[o * in_dim + i] = x[(i, o)];
            }
        }
        let mut bias = DVector::<f64>::zeros(out_dim);
        for theta in thetas {
            bias += DVector::from_column_slice(&theta.layers[l].b);
        }
        out.layers[l].b = (bias / thetas.len() as f64).iter().copied().collect();
    }
    out.validate()?;
    Ok(out)
}
