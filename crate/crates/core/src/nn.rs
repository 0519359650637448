//! Parameters, convolutional building blocks and the Adam optimizer.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Backward, Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrite every parameter from `(name, tensor)` pairs. Names and shapes
    /// must match this store exactly.
    pub fn load(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if self.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = t;
        }
        Ok(())
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| g.leaf(t.clone()))
                .collect(),
        }
    }

    /// Put every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| g.constant(t.clone()))
                .collect(),
        }
    }
}

/// Tape handles for the parameters of a [`ParamStore`], index-aligned.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order; parameters the loss never touched get zeros.
    pub fn gradients(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.iter())
            .map(|(&v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Same-padding 2-D convolution with stride 1 and an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(
                &[out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                rng,
            ),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        conv2d(g, x, p.var(self.weight), p.var(self.bias), self.kernel)
    }
}

/// Convolution followed by ReLU.
pub fn conv2d_block(g: &mut Graph, p: &Bound, conv: &Conv2d, x: Var) -> Result<Var> {
    let y = conv.forward(g, p, x)?;
    Ok(g.relu(y))
}

/// Row-wise affine layer `[M, I] -> [M, O]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[inputs, outputs], (2.0 / inputs as f64).sqrt(), rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Output columns `xo` whose source `xo + d` lies inside `0..w`.
fn valid_span(w: usize, d: isize) -> (usize, usize) {
    let lo = (-d).clamp(0, w as isize) as usize;
    let hi = (w as isize - d).clamp(0, w as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row =
                    &mut cols[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..lo].fill(0.0);
                    out[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    out[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx_out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                let (lo, hi) = valid_span(w, dxo);
                let s0 = (lo as isize + dxo) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + hi - lo];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

thread_local! {
    // im2col buffers are fully overwritten on each use, so they are kept
    // between calls instead of being reallocated and zeroed
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|s| {
        let mut s = s.borrow_mut();
        let (a, b) = &mut *s;
        if a.len() < len {
            a.resize(len, 0.0);
            b.resize(len, 0.0);
        }
        f(&mut a[..len], &mut b[..len])
    })
}

/// Same-padding convolution: `x [B, Cin, H, W]`, `weight [Cout, Cin, k, k]`, `bias [Cout]`.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Var, kernel: usize) -> Result<Var> {
    let (b, cin, h, w) = g.value(x).dims4()?;
    let (cout, wcin, kh, kw) = g.value(weight).dims4()?;
    if wcin != cin || kh != kernel || kw != kernel || kernel % 2 == 0 {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input with {cin} channels",
            g.value(weight).shape()
        )));
    }
    let hw = h * w;
    let ck = cin * kernel * kernel;
    let mut out = vec![0.0; b * cout * hw];
    let xv = g.value(x).data();
    let wv = g.value(weight).data();
    let bv = g.value(bias).data();
    with_scratch(if kernel == 1 { 0 } else { ck * hw }, |cols, _| {
        for bi in 0..b {
            let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(bv[co]);
            }
            if kernel == 1 {
                gemm(
                    Mat::new(wv, cout, ck),
                    Mat::new(&xv[bi * cin * hw..(bi + 1) * cin * hw], ck, hw),
                    dst,
                    1.0,
                );
            } else {
                im2col(
                    &xv[bi * cin * hw..(bi + 1) * cin * hw],
                    cin,
                    h,
                    w,
                    kernel,
                    cols,
                );
                gemm(Mat::new(wv, cout, ck), Mat::new(cols, ck, hw), dst, 1.0);
            }
        }
    });
    let out = Tensor::new(&[b, cout, h, w], out)?;
    Ok(g.record(out, &[x, weight, bias], Conv2dRule { kernel }))
}

struct Conv2dRule {
    kernel: usize,
}

impl Backward for Conv2dRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let k = self.kernel;
        let (b, cin, h, w) = inputs[0].dims4().expect("rank 4");
        let cout = inputs[1].shape()[0];
        let hw = h * w;
        let ck = cin * k * k;
        let wv = inputs[1].data();
        let mut dx = vec![0.0; b * cin * hw];
        let mut dw = vec![0.0; cout * ck];
        let mut db = vec![0.0; cout];
        with_scratch(if k == 1 { 0 } else { ck * hw }, |cols, dcols| {
            for bi in 0..b {
                let gb = &grad.data()[bi * cout * hw..(bi + 1) * cout * hw];
                for (co, plane) in gb.chunks(hw).enumerate() {
                    db[co] += plane.iter().sum::<f64>();
                }
                let xb = &inputs[0].data()[bi * cin * hw..(bi + 1) * cin * hw];
                let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                if k == 1 {
                    gemm(
                        Mat::new(gb, cout, hw),
                        Mat::new(xb, ck, hw).t(),
                        &mut dw,
                        1.0,
                    );
                    gemm(Mat::new(wv, cout, ck).t(), Mat::new(gb, cout, hw), dxb, 0.0);
                } else {
                    im2col(xb, cin, h, w, k, cols);
                    gemm(
                        Mat::new(gb, cout, hw),
                        Mat::new(cols, ck, hw).t(),
                        &mut dw,
                        1.0,
                    );
                    gemm(
                        Mat::new(wv, cout, ck).t(),
                        Mat::new(gb, cout, hw),
                        dcols,
                        0.0,
                    );
                    col2im(dcols, cin, h, w, k, dxb);
                }
            }
        });
        vec![
            Some(Tensor::new(inputs[0].shape(), dx).expect("shape")),
            Some(Tensor::new(inputs[1].shape(), dw).expect("shape")),
            Some(Tensor::new(inputs[2].shape(), db).expect("shape")),
        ]
    }
}

/// 2x2 max pooling with stride 2; H and W must be even.
pub fn max_pool2(g: &mut Graph, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "max_pool2 needs even H and W, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = g.value(x).data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + 2 * y * w + 2 * xo;
                for idx in [
                    base + 2 * y * w + 2 * xo + 1,
                    base + (2 * y + 1) * w + 2 * xo,
                    base + (2 * y + 1) * w + 2 * xo + 1,
                ] {
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
    }
    let out = Tensor::new(&[b, c, oh, ow], out)?;
    Ok(g.record(out, &[x], MaxPoolRule { argmax }))
}

struct MaxPoolRule {
    argmax: Vec<usize>,
}

impl Backward for MaxPoolRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let d = dx.data_mut();
        for (&i, &gv) in self.argmax.iter().zip(grad.data()) {
            d[i] += gv;
        }
        vec![Some(dx)]
    }
}

/// Source taps for 2x bilinear upsampling with half-pixel centres.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// 2x bilinear upsampling.
pub fn upsample2(g: &mut Graph, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let xv = g.value(x).data();
    let mut out = vec![0.0; b * c * oh * ow];
    for plane in 0..b * c {
        let src = &xv[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[y * ow + xo] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    let out = Tensor::new(&[b, c, oh, ow], out)?;
    Ok(g.record(out, &[x], UpsampleRule))
}

struct UpsampleRule;

impl Backward for UpsampleRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (b, c, h, w) = inputs[0].dims4().expect("rank 4");
        let ty = bilinear_taps(h);
        let tx = bilinear_taps(w);
        let (oh, ow) = (2 * h, 2 * w);
        let mut dx = vec![0.0; b * c * h * w];
        for plane in 0..b * c {
            let gsrc = &grad.data()[plane * oh * ow..(plane + 1) * oh * ow];
            let d = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let gv = gsrc[y * ow + xo];
                    d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                    d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                    d[y1 * w + x0] += gv * fy * (1.0 - fx);
                    d[y1 * w + x1] += gv * fy * fx;
                }
            }
        }
        vec![Some(Tensor::new(inputs[0].shape(), dx).expect("shape"))]
    }
}

/// Adam with the usual bias correction and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        debug_assert_eq!(grads.len(), store.len());
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let param = store.get_mut(ParamId(i));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                let g = g * scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_tensor(shape, 1.0, &mut rng)
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let x = rand_t(&[2, 3, 5, 4], 1);
        let w = rand_t(&[2, 3, 3, 3], 2);
        let bias = rand_t(&[2], 3);
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(bias.clone()),
        );
        let y = conv2d(&mut g, xv, wv, bv, 3).unwrap();
        let y = g.value(y);
        for b in 0..2 {
            for co in 0..2 {
                for yy in 0..5i64 {
                    for xx in 0..4i64 {
                        let mut acc = bias.data()[co];
                        for ci in 0..3 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (yy + ky - 1, xx + kx - 1);
                                    if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                        acc += w.data()
                                            [((co * 3 + ci) * 3 + ky as usize) * 3 + kx as usize]
                                            * x.data()[((b * 3 + ci) * 5 + sy as usize) * 4
                                                + sx as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 2 + co) * 5 + yy as usize) * 4 + xx as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let inputs = [
            rand_t(&[1, 2, 4, 4], 4),
            rand_t(&[3, 2, 3, 3], 5),
            rand_t(&[3], 6),
            rand_t(&[2, 3, 1, 1], 7),
        ];
        let err = check_gradients(&inputs, 1e-6, |g, v| {
            let y = conv2d(g, v[0], v[1], v[2], 3)?;
            let y = max_pool2(g, y)?;
            let y = upsample2(g, y)?;
            let zero = g.constant(Tensor::zeros(&[2]));
            let y = conv2d(g, y, v[3], zero, 1)?;
            let y = g.sigmoid(y);
            g.sum(y)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 2.5));
        let y = upsample2(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 6, 6]);
        assert!(g.value(y).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &[Tensor::scalar(3.0)]);
        assert!((store.get(id).item() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[2]));
        assert!(store.load(vec![("w".into(), Tensor::zeros(&[3]))]).is_err());
        assert!(store.load(vec![("v".into(), Tensor::zeros(&[2]))]).is_err());
        store.load(vec![("w".into(), Tensor::ones(&[2]))]).unwrap();
    }
}
