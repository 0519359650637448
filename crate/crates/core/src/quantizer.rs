//! Grouped codebooks with Mahalanobis logits and Gumbel-Softmax assignment.
//!
//! Codes are partitioned into `K` contiguous groups of `N / K`, so a code
//! index implies a category. Pixel rows are `[M, C]` with `M = B * H * W`
//! in `(b, y, x)` order; `AssignmentProbs` and logits are `[M, N]`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{softmax_in_place, Backward, Graph, Var};
use crate::batch::LabelBatch;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Bound, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, Tensor};

pub const CODE_INIT_STD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct GroupedCodebook {
    pub e_alpha: ParamId,
    pub e_beta: ParamId,
    pub log_var_gamma: ParamId,
    pub log_tau: ParamId,
    codes: usize,
    groups: usize,
}

pub const CODEBOOK_TENSORS: [&str; 4] = [
    "codebook.e_alpha",
    "codebook.e_beta",
    "codebook.log_var_gamma",
    "codebook.log_tau",
];

impl GroupedCodebook {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        codes: usize,
        groups: usize,
        c1: usize,
        c2: usize,
        init_var: f64,
        init_tau: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 || codes % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{codes} codes do not split into {groups} groups"
            )));
        }
        if init_var <= 0.0 || init_tau <= 0.0 {
            return Err(Error::InvalidArgument(
                "initial variance and temperature must be positive".into(),
            ));
        }
        let e_alpha = store.add(
            CODEBOOK_TENSORS[0],
            normal_tensor(&[codes, c1], CODE_INIT_STD, rng),
        );
        let e_beta = store.add(
            CODEBOOK_TENSORS[1],
            normal_tensor(&[codes, c2], CODE_INIT_STD, rng),
        );
        let log_var_gamma = store.add(CODEBOOK_TENSORS[2], Tensor::scalar(init_var.ln()));
        let log_tau = store.add(CODEBOOK_TENSORS[3], Tensor::scalar(init_tau.ln()));
        Ok(Self {
            e_alpha,
            e_beta,
            log_var_gamma,
            log_tau,
            codes,
            groups,
        })
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn var_gamma(&self, store: &ParamStore) -> f64 {
        store.get(self.log_var_gamma).item().exp()
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.get(self.log_tau).item().exp()
    }

    /// Group `g` of the category codebook: rows `[g N/K, (g+1) N/K)`.
    pub fn group_rows(&self, g: usize) -> std::ops::Range<usize> {
        let per = self.codes / self.groups;
        g * per..(g + 1) * per
    }

    pub fn vars(&self, p: &Bound) -> (Var, Var, Var, Var) {
        (
            p.var(self.e_alpha),
            p.var(self.e_beta),
            p.var(self.log_var_gamma),
            p.var(self.log_tau),
        )
    }
}

/// Row-stochastic `[M, N]` assignment probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentProbs(Tensor);

impl AssignmentProbs {
    pub fn new(p: Tensor) -> Result<Self> {
        let (_, n) = p.dims2()?;
        for row in p.data().chunks(n) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(format!(
                    "assignment row sums to {s}"
                )));
            }
        }
        Ok(Self(p))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn codes(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Chosen code per pixel, `[M]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeIndices(pub Vec<usize>);

#[cfg(test)]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_codes(z: &Tensor, codes: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, c) = z.dims2()?;
    let (n, cc) = codes.dims2()?;
    if c != cc {
        return Err(Error::Shape(format!(
            "features have {c} channels, codes {cc}"
        )));
    }
    Ok((m, n, c))
}

/// `logit[s, j] = -||codes_j - z_s||^2 / (2 sigma_sq)` for rows `z [M, C]`.
pub fn mahalanobis_logits(z: &Tensor, codes: &Tensor, sigma_sq: f64) -> Result<Tensor> {
    if !(sigma_sq > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance {sigma_sq} must be positive"
        )));
    }
    let (m, n, c) = check_codes(z, codes)?;
    // ||z||^2 + ||e||^2 - 2 z.e with the cross term from one GEMM
    let mut cross = vec![0.0; m * n];
    gemm(
        Mat::new(z.data(), m, c),
        Mat::new(codes.data(), n, c).t(),
        &mut cross,
        0.0,
    );
    let zn: Vec<f64> = z
        .data()
        .chunks(c)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    let en: Vec<f64> = codes
        .data()
        .chunks(c)
        .map(|r| r.iter().map(|v| v * v).sum())
        .collect();
    let scale = -0.5 / sigma_sq;
    for (s, row) in cross.chunks_mut(n).enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = scale * (zn[s] + en[j] - 2.0 * *v).max(0.0);
        }
    }
    Tensor::new(&[m, n], cross)
}

/// [`mahalanobis_logits`] on the tape with `sigma_sq = exp(log_var)`.
pub fn mahalanobis_logits_var(g: &mut Graph, z: Var, codes: Var, log_var: Var) -> Result<Var> {
    let sigma_sq = g.value(log_var).item().exp();
    // a learned variance that under- or overflows means training blew up
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(Error::NonFinite {
            term: "var_gamma".into(),
        });
    }
    let out = mahalanobis_logits(g.value(z), g.value(codes), sigma_sq)?;
    Ok(g.record(out, &[z, codes, log_var], MahalanobisRule { sigma_sq }))
}

struct MahalanobisRule {
    sigma_sq: f64,
}

impl Backward for MahalanobisRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (z, e) = (inputs[0], inputs[1]);
        let (m, c) = (z.shape()[0], z.shape()[1]);
        let n = e.shape()[0];
        let s = self.sigma_sq;
        let gd = grad.data();
        // logit = -(||z||^2 - 2 z.e + ||e||^2) / (2s)
        let mut dz = vec![0.0; m * c];
        gemm(Mat::new(gd, m, n), Mat::new(e.data(), n, c), &mut dz, 0.0);
        for (row, (zr, gr)) in dz.chunks_mut(c).zip(z.data().chunks(c).zip(gd.chunks(n))) {
            let gs: f64 = gr.iter().sum();
            for (d, zv) in row.iter_mut().zip(zr) {
                *d = (*d - zv * gs) / s;
            }
        }
        let mut de = vec![0.0; n * c];
        gemm(
            Mat::new(gd, m, n).t(),
            Mat::new(z.data(), m, c),
            &mut de,
            0.0,
        );
        let mut colsum = vec![0.0; n];
        for gr in gd.chunks(n) {
            for (cs, v) in colsum.iter_mut().zip(gr) {
                *cs += v;
            }
        }
        for (j, row) in de.chunks_mut(c).enumerate() {
            let er = &e.data()[j * c..(j + 1) * c];
            for (d, ev) in row.iter_mut().zip(er) {
                *d = (*d - colsum[j] * ev) / s;
            }
        }
        // d logit / d log s = -logit
        let dlog: f64 = gd.iter().zip(output.data()).map(|(g, l)| -g * l).sum();
        vec![
            Some(Tensor::new(z.shape(), dz).expect("shape")),
            Some(Tensor::new(e.shape(), de).expect("shape")),
            Some(Tensor::scalar(dlog)),
        ]
    }
}

/// Standard Gumbel(0, 1) noise of the given shape.
pub fn sample_gumbel(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `softmax((logits + g) / tau)` row-wise; `g` is Gumbel noise when `rng`
/// is given, zero otherwise.
pub fn gumbel_softmax_assign(
    logits: &Tensor,
    tau: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<AssignmentProbs> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau} must be positive"
        )));
    }
    let (_, n) = logits.dims2()?;
    let mut p = match rng {
        Some(rng) => {
            let noise = sample_gumbel(logits.shape(), rng);
            logits.zip_map(&noise, |l, g| (l + g) / tau)
        }
        None => logits.map(|l| l / tau),
    };
    for row in p.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(AssignmentProbs(p))
}

/// [`gumbel_softmax_assign`] on the tape with `tau = exp(log_tau)`.
pub fn gumbel_softmax_var(
    g: &mut Graph,
    logits: Var,
    log_tau: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let noisy = match rng {
        Some(rng) => {
            let noise = sample_gumbel(g.value(logits).shape(), rng);
            let nv = g.constant(noise);
            g.add(logits, nv)?
        }
        None => logits,
    };
    let tau = g.exp(log_tau);
    let t = g.value(tau).item();
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::NonFinite { term: "tau".into() });
    }
    let scaled = g.div_scalar(noisy, tau)?;
    g.softmax_rows(scaled)
}

/// Per-pixel mixture `sum_j p_j codes_j`, as rows `[M, C]`.
pub fn quantize_soft(p: &AssignmentProbs, codes: &Tensor) -> Result<Tensor> {
    let (n, c) = codes.dims2()?;
    if p.codes() != n {
        return Err(Error::Shape(format!(
            "{} probabilities for {n} codes",
            p.codes()
        )));
    }
    let m = p.pixels();
    let mut out = vec![0.0; m * c];
    gemm(
        Mat::new(p.tensor().data(), m, n),
        Mat::new(codes.data(), n, c),
        &mut out,
        0.0,
    );
    Tensor::new(&[m, c], out)
}

/// Soft quantization on the tape; gradients reach both `p` and `codes`.
pub fn quantize_soft_var(g: &mut Graph, p: Var, codes: Var) -> Result<Var> {
    g.matmul(p, codes)
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Replace each pixel by its maximal-logit code, lowest index on ties.
pub fn quantize_hard(logits: &Tensor, codes: &Tensor) -> Result<(Tensor, CodeIndices)> {
    let (m, n) = logits.dims2()?;
    let (cn, c) = codes.dims2()?;
    if cn != n {
        return Err(Error::Shape(format!("{n} logits for {cn} codes")));
    }
    let idx: Vec<usize> = logits.data().chunks(n).map(argmax_first).collect();
    let mut out = Vec::with_capacity(m * c);
    for &j in &idx {
        out.extend_from_slice(&codes.data()[j * c..(j + 1) * c]);
    }
    Ok((Tensor::new(&[m, c], out)?, CodeIndices(idx)))
}

/// `label = idx / (N / K)`, reshaped to `[B, H, W]`.
pub fn predict_labels(
    idx: &CodeIndices,
    codes: usize,
    groups: usize,
    dims: (usize, usize, usize),
) -> Result<LabelBatch> {
    if groups == 0 || codes % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{codes} codes do not split into {groups} groups"
        )));
    }
    let per = codes / groups;
    let labels = idx
        .0
        .iter()
        .map(|&i| {
            if i < codes {
                Ok(i / per)
            } else {
                Err(Error::InvalidArgument(format!("code index {i} >= {codes}")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (b, h, w) = dims;
    LabelBatch::new(b, h, w, labels, groups)
}

fn group_maxima(row: &[f64], groups: usize) -> Vec<f64> {
    let per = row.len() / groups;
    row.chunks(per)
        .map(|g| g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn group_masses(row: &[f64], groups: usize) -> Vec<f64> {
    let per = row.len() / groups;
    row.chunks(per).map(|g| g.iter().sum()).collect()
}

/// Uncertainty weights per pixel: the gap between the two largest group
/// maxima (for `K = 2`, `|max P^0 - max P^1|`), normalized by the batch
/// maximum. An all-zero gap gives uniform weight 1.
pub fn assignment_weights(p: &AssignmentProbs, groups: usize) -> Result<Vec<f64>> {
    let n = p.codes();
    if groups < 2 || n % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} codes do not split into {groups} groups"
        )));
    }
    let dif: Vec<f64> = p
        .tensor()
        .data()
        .chunks(n)
        .map(|row| {
            let mut maxima = group_maxima(row, groups);
            maxima.sort_by(|a, b| b.total_cmp(a));
            maxima[0] - maxima[1]
        })
        .collect();
    let top = dif.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(vec![1.0; dif.len()]);
    }
    Ok(dif.into_iter().map(|d| d / top).collect())
}

fn check_code_loss(
    p: &Tensor,
    labels: &[usize],
    w: &[f64],
    groups: usize,
) -> Result<(usize, usize)> {
    let (m, n) = p.dims2()?;
    if labels.len() != m || w.len() != m {
        return Err(Error::Shape(format!(
            "{m} pixels but {} labels and {} weights",
            labels.len(),
            w.len()
        )));
    }
    if groups == 0 || n % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} codes do not split into {groups} groups"
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= groups) {
        return Err(Error::InvalidArgument(format!(
            "label {l} >= {groups} groups"
        )));
    }
    Ok((m, n))
}

/// `ln(mean_i w_i (1 - mass of group label_i)^2 + eps)`.
pub fn code_loss(
    p: &AssignmentProbs,
    labels: &[usize],
    w: &[f64],
    groups: usize,
    eps: f64,
) -> Result<f64> {
    code_loss_raw(p.tensor(), labels, w, groups, eps)
}

fn code_loss_raw(p: &Tensor, labels: &[usize], w: &[f64], groups: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} must be positive"
        )));
    }
    let (m, n) = check_code_loss(p, labels, w, groups)?;
    let per = n / groups;
    let mut acc = 0.0;
    for ((row, &l), wi) in p.data().chunks(n).zip(labels).zip(w) {
        let mass: f64 = row[l * per..(l + 1) * per].iter().sum();
        acc += wi * (1.0 - mass) * (1.0 - mass);
    }
    Ok((acc / m as f64 + eps).ln())
}

/// [`code_loss`] on the tape; `w` enters as a constant.
pub fn code_loss_var(
    g: &mut Graph,
    p: Var,
    labels: &[usize],
    w: &[f64],
    groups: usize,
    eps: f64,
) -> Result<Var> {
    let loss = code_loss_raw(g.value(p), labels, w, groups, eps)?;
    Ok(g.record(
        Tensor::scalar(loss),
        &[p],
        CodeLossRule {
            labels: labels.to_vec(),
            w: w.to_vec(),
            groups,
        },
    ))
}

struct CodeLossRule {
    labels: Vec<usize>,
    w: Vec<f64>,
    groups: usize,
}

impl Backward for CodeLossRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let (m, n) = (p.shape()[0], p.shape()[1]);
        let per = n / self.groups;
        // d ln(S + eps) / dS = exp(-loss)
        let outer = grad.item() * (-output.item()).exp() / m as f64;
        let mut dp = vec![0.0; m * n];
        for (s, (row, drow)) in p.data().chunks(n).zip(dp.chunks_mut(n)).enumerate() {
            let l = self.labels[s];
            let mass: f64 = row[l * per..(l + 1) * per].iter().sum();
            let d = -2.0 * outer * self.w[s] * (1.0 - mass);
            for v in &mut drow[l * per..(l + 1) * per] {
                *v = d;
            }
        }
        vec![Some(Tensor::new(p.shape(), dp).expect("shape"))]
    }
}

/// Mean over pixels of the largest assignment probability.
pub fn mean_max_prob(p: &Tensor) -> Result<f64> {
    let (m, n) = p.dims2()?;
    Ok(p.data()
        .chunks(n)
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / m as f64)
}

/// Random row-stochastic matrix, for tests and oracles.
pub fn random_probs(m: usize, n: usize, rng: &mut ChaCha8Rng) -> AssignmentProbs {
    let mut t = Tensor::from_fn(&[m, n], |_| rng.gen_range(-2.0..2.0));
    for row in t.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    AssignmentProbs(t)
}

/// Masses of each group per pixel, `[M, K]`.
pub fn group_mass(p: &AssignmentProbs, groups: usize) -> Result<Tensor> {
    let n = p.codes();
    if groups == 0 || n % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} codes do not split into {groups} groups"
        )));
    }
    let data = p
        .tensor()
        .data()
        .chunks(n)
        .flat_map(|r| group_masses(r, groups))
        .collect();
    Tensor::new(&[p.pixels(), groups], data)
}
