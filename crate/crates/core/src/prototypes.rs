//! Learnable per-category prototypes and the pull/push clustering loss.
//!
//! For each category `i` present in the batch the pull term is the mean L2
//! distance between its pixels' category features and prototype `t_i`. The
//! push term `sum_j ||t_i - t_j|| / 2` is applied for every category, present
//! or not. Loss = sum_i (pull_i - push_i).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PROTOTYPE_INIT_STD: f64 = 0.5;

/// `t [K, C1]`.
#[derive(Clone, Debug)]
pub struct PrototypeSet {
    id: ParamId,
}

impl PrototypeSet {
    pub fn new(
        store: &mut ParamStore,
        categories: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let id = store.add(
            "prototypes",
            normal_tensor(&[categories, channels], PROTOTYPE_INIT_STD, rng),
        );
        Self { id }
    }

    pub fn var(&self, p: &Bound) -> Var {
        p.var(self.id)
    }

    pub fn tensor<'a>(&self, store: &'a ParamStore) -> &'a Tensor {
        store.get(self.id)
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check(z1: &Tensor, labels: &[usize], t: &Tensor) -> Result<(usize, usize)> {
    let (m, c) = z1.dims2()?;
    let (k, tc) = t.dims2()?;
    if tc != c {
        return Err(Error::Shape(format!(
            "features have {c} channels, prototypes {tc}"
        )));
    }
    if labels.len() != m {
        return Err(Error::Shape(format!(
            "{} labels for {m} pixels",
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {l} >= {k} prototypes"
        )));
    }
    Ok((k, c))
}

/// Pull/push loss over pixel rows `z1 [M, C1]` with labels `[M]`.
pub fn domain_loss(z1: &Tensor, labels: &[usize], t: &Tensor) -> Result<f64> {
    let (k, c) = check(z1, labels, t)?;
    let mut pull = vec![0.0; k];
    let mut count = vec![0usize; k];
    for (row, &l) in z1.data().chunks(c).zip(labels) {
        pull[l] += dist(row, &t.data()[l * c..(l + 1) * c]);
        count[l] += 1;
    }
    let mut loss = 0.0;
    for i in 0..k {
        if count[i] > 0 {
            loss += pull[i] / count[i] as f64;
        }
        let ti = &t.data()[i * c..(i + 1) * c];
        for j in 0..k {
            loss -= dist(ti, &t.data()[j * c..(j + 1) * c]) / 2.0;
        }
    }
    Ok(loss)
}

/// [`domain_loss`] on the tape, differentiable in `z1` and `t`.
pub fn domain_loss_var(g: &mut Graph, z1: Var, labels: &[usize], t: Var) -> Result<Var> {
    let loss = domain_loss(g.value(z1), labels, g.value(t))?;
    Ok(g.record(
        Tensor::scalar(loss),
        &[z1, t],
        DomainLossRule {
            labels: labels.to_vec(),
        },
    ))
}

struct DomainLossRule {
    labels: Vec<usize>,
}

impl Backward for DomainLossRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (z1, t) = (inputs[0], inputs[1]);
        let (k, c) = (t.shape()[0], t.shape()[1]);
        let up = grad.item();
        let mut count = vec![0usize; k];
        for &l in &self.labels {
            count[l] += 1;
        }
        let mut dz = vec![0.0; z1.numel()];
        let mut dt = vec![0.0; t.numel()];
        for ((row, drow), &l) in z1.data().chunks(c).zip(dz.chunks_mut(c)).zip(&self.labels) {
            let tl = &t.data()[l * c..(l + 1) * c];
            let d = dist(row, tl);
            if d == 0.0 {
                continue;
            }
            let s = up / (count[l] as f64 * d);
            for ch in 0..c {
                let v = s * (row[ch] - tl[ch]);
                drow[ch] = v;
                dt[l * c + ch] -= v;
            }
        }
        // the push double sum counts each unordered pair once in total
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let ti = &t.data()[i * c..(i + 1) * c];
                let tj = &t.data()[j * c..(j + 1) * c];
                let d = dist(ti, tj);
                if d == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    dt[i * c + ch] -= up * (ti[ch] - tj[ch]) / d;
                }
            }
        }
        vec![
            Some(Tensor::new(z1.shape(), dz).expect("shape")),
            Some(Tensor::new(t.shape(), dt).expect("shape")),
        ]
    }
}
