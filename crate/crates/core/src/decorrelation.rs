//! Correlation penalty between the two feature halves.
//!
//! Each half goes through its own small projection head; the penalty is the
//! mean squared Pearson correlation over every (dim of view A, dim of view B)
//! pair, estimated across all pixels of the batch. Standard deviations carry a
//! small floor so a constant dimension contributes ~0 instead of NaN.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::{gemm, Mat, Tensor};

/// Column statistics of a `[M, D]` sample matrix.
struct Centered {
    data: Vec<f64>,
    std: Vec<f64>,
}

fn center(x: &Tensor) -> Centered {
    let (m, d) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut data = x.data().to_vec();
    let mut var = vec![0.0; d];
    for row in data.chunks_mut(d) {
        for ((v, mu), s) in row.iter_mut().zip(&mean).zip(var.iter_mut()) {
            *v -= mu;
            *s += *v * *v;
        }
    }
    Centered {
        data,
        std: var.into_iter().map(|s| (s / m as f64).sqrt()).collect(),
    }
}

/// Correlation matrix `[P, Q]` and the centered inputs it came from.
fn correlations(a: &Tensor, b: &Tensor, eps_var: f64) -> (Vec<f64>, Centered, Centered) {
    let (m, p) = (a.shape()[0], a.shape()[1]);
    let q = b.shape()[1];
    let ca = center(a);
    let cb = center(b);
    let mut r = vec![0.0; p * q];
    gemm(
        Mat::new(&ca.data, m, p).t(),
        Mat::new(&cb.data, m, q),
        &mut r,
        0.0,
    );
    for i in 0..p {
        for j in 0..q {
            r[i * q + j] /= m as f64 * (ca.std[i] + eps_var) * (cb.std[j] + eps_var);
        }
    }
    (r, ca, cb)
}

fn check_views(a: &Tensor, b: &Tensor) -> Result<()> {
    let (m, _) = a.dims2()?;
    let (mb, _) = b.dims2()?;
    if m != mb {
        return Err(Error::Shape(format!("views have {m} and {mb} samples")));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs at least 2 samples, got {m}"
        )));
    }
    Ok(())
}

/// Mean squared Pearson correlation between the columns of `a [M, P]` and
/// `b [M, Q]`. Always in `[0, 1]`.
pub fn pearson_loss(a: &Tensor, b: &Tensor, eps_var: f64) -> Result<f64> {
    check_views(a, b)?;
    let (r, _, _) = correlations(a, b, eps_var);
    Ok(r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64)
}

/// [`pearson_loss`] recorded on the tape.
pub fn pearson_loss_var(g: &mut Graph, a: Var, b: Var, eps_var: f64) -> Result<Var> {
    let loss = pearson_loss(g.value(a), g.value(b), eps_var)?;
    Ok(g.record(Tensor::scalar(loss), &[a, b], PearsonRule { eps_var }))
}

struct PearsonRule {
    eps_var: f64,
}

impl Backward for PearsonRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, p) = (a.shape()[0], a.shape()[1]);
        let q = b.shape()[1];
        let n = m as f64;
        let eps = self.eps_var;
        let (r, ca, cb) = correlations(a, b, eps);
        // dL/dr for L = mean(r^2)
        let up = grad.item() * 2.0 / (p * q) as f64;
        let gr: Vec<f64> = r.iter().map(|v| up * v).collect();

        let side =
            |own: &Centered, other: &Centered, own_dim: usize, other_dim: usize, for_b: bool| {
                // cross term: sum over the other view's dims of G * other_centered / (s_other + eps)
                let scaled: Vec<f64> = other
                    .data
                    .chunks(other_dim)
                    .flat_map(|row| {
                        row.iter()
                            .zip(&other.std)
                            .map(|(v, s)| v / (s + eps))
                            .collect::<Vec<_>>()
                    })
                    .collect();
                let mut cross = vec![0.0; m * own_dim];
                let gmat = if for_b {
                    Mat::new(&gr, p, q)
                } else {
                    Mat::new(&gr, p, q).t()
                };
                gemm(Mat::new(&scaled, m, other_dim), gmat, &mut cross, 0.0);
                // self term: sum over the other view's dims of G * r
                let mut gdotr = vec![0.0; own_dim];
                for i in 0..p {
                    for j in 0..q {
                        let o = if for_b { j } else { i };
                        gdotr[o] += gr[i * q + j] * r[i * q + j];
                    }
                }
                let mut d = vec![0.0; m * own_dim];
                for (drow, (crow, orow)) in d
                    .chunks_mut(own_dim)
                    .zip(cross.chunks(own_dim).zip(own.data.chunks(own_dim)))
                {
                    for k in 0..own_dim {
                        let s = own.std[k];
                        let mut v = crow[k] / (n * (s + eps));
                        if s > 0.0 {
                            v -= orow[k] * gdotr[k] / (n * s * (s + eps));
                        }
                        drow[k] = v;
                    }
                }
                d
            };
        // For view A the cross term is scaled_b [M, Q] x G^T [Q, P];
        // for view B it is scaled_a [M, P] x G [P, Q].
        let da = side(&ca, &cb, p, q, false);
        let db = side(&cb, &ca, q, p, true);
        vec![
            Some(Tensor::new(a.shape(), da).expect("shape")),
            Some(Tensor::new(b.shape(), db).expect("shape")),
        ]
    }
}

/// Two-layer per-pixel head `C_in -> 2 C_in -> out` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    hidden: Linear,
    output: Linear,
}

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), inputs, 2 * inputs, rng),
            output: Linear::new(store, &format!("{name}.output"), 2 * inputs, outputs, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, rows: Var) -> Result<Var> {
        let h = self.hidden.forward(g, p, rows)?;
        let h = g.relu(h);
        self.output.forward(g, p, h)
    }
}

/// One projection head per view, both mapping into the same embedding width.
#[derive(Clone, Debug)]
pub struct ProjectionParams {
    pub view_a: ProjectionHead,
    pub view_b: ProjectionHead,
}

impl ProjectionParams {
    pub fn new(
        store: &mut ParamStore,
        channels_a: usize,
        channels_b: usize,
        embed: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            view_a: ProjectionHead::new(store, "projection.view_a", channels_a, embed, rng),
            view_b: ProjectionHead::new(store, "projection.view_b", channels_b, embed, rng),
        }
    }

    /// Correlation penalty between pixel-row views `a [M, Ca]` and `b [M, Cb]`.
    pub fn corrcoef_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        a: Var,
        b: Var,
        eps_var: f64,
    ) -> Result<Var> {
        let pa = self.view_a.forward(g, p, a)?;
        let pb = self.view_b.forward(g, p, b)?;
        pearson_loss_var(g, pa, pb, eps_var)
    }
}
