//! Skip-free encoder-decoder that rebuilds the image from quantized
//! features, and the per-element log reconstruction loss.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Backward, Graph, Var};
use crate::config::DECODER_STAGES;
use crate::error::{Error, Result};
use crate::nn::{conv2d_block, max_pool2, upsample2, Bound, Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Conv in, three pool+conv stages down, three upsample+conv stages back,
/// a 1x1 projection to RGB and a sigmoid. No skips.
#[derive(Clone, Debug)]
pub struct Decoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = Conv2d::new(store, "decoder.stem", channels, width, 3, rng);
        let widths: Vec<usize> = (0..=DECODER_STAGES).map(|s| width << s.min(2)).collect();
        let down = (0..DECODER_STAGES)
            .map(|s| {
                Conv2d::new(
                    store,
                    &format!("decoder.down{s}"),
                    widths[s],
                    widths[s + 1],
                    3,
                    rng,
                )
            })
            .collect();
        let up = (0..DECODER_STAGES)
            .rev()
            .map(|s| {
                Conv2d::new(
                    store,
                    &format!("decoder.up{s}"),
                    widths[s + 1],
                    widths[s],
                    3,
                    rng,
                )
            })
            .collect();
        let out = Conv2d::new(store, "decoder.out", width, 3, 1, rng);
        Self {
            stem,
            down,
            up,
            out,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.stem.in_channels()
    }

    /// `zq [B, C, H, W]` to `x' [B, 3, H, W]` in `[0, 1]`.
    pub fn decode(&self, g: &mut Graph, p: &Bound, zq: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(zq).dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "decoder expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let m = 1 << DECODER_STAGES;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!(
                "decoder needs sides divisible by {m}, got {h}x{w}"
            )));
        }
        let mut x = conv2d_block(g, p, &self.stem, zq)?;
        for conv in &self.down {
            x = max_pool2(g, x)?;
            x = conv2d_block(g, p, conv, x)?;
        }
        for conv in &self.up {
            x = upsample2(g, x)?;
            x = conv2d_block(g, p, conv, x)?;
        }
        let x = self.out.forward(g, p, x)?;
        Ok(g.sigmoid(x))
    }
}

/// `0.5 * sum_i ln((x_i - x'_i)^2 + eps)`.
pub fn recon_loss(x: &Tensor, x_prime: &Tensor, eps: f64) -> Result<f64> {
    if x.shape() != x_prime.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            x.shape(),
            x_prime.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps {eps} must be positive"
        )));
    }
    Ok(0.5
        * x.data()
            .iter()
            .zip(x_prime.data())
            .map(|(a, b)| ((a - b) * (a - b) + eps).ln())
            .sum::<f64>())
}

/// [`recon_loss`] on the tape, differentiable in both arguments.
pub fn recon_loss_var(g: &mut Graph, x: Var, x_prime: Var, eps: f64) -> Result<Var> {
    let loss = recon_loss(g.value(x), g.value(x_prime), eps)?;
    Ok(g.record(Tensor::scalar(loss), &[x, x_prime], ReconRule { eps }))
}

struct ReconRule {
    eps: f64,
}

impl Backward for ReconRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let up = grad.item();
        let dx = inputs[0].zip_map(inputs[1], |a, b| {
            up * (a - b) / ((a - b) * (a - b) + self.eps)
        });
        let dxp = dx.scale(-1.0);
        vec![Some(dx), Some(dxp)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::nn::normal_tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn decodes_to_image_shape_in_unit_range() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::new(&mut store, 8, 4, &mut rng);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let z = g.constant(normal_tensor(&[1, 8, 16, 16], 3.0, &mut rng));
        let x = dec.decode(&mut g, &p, z).unwrap();
        assert_eq!(g.value(x).shape(), &[1, 3, 16, 16]);
        assert!(g.value(x).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = g.constant(Tensor::zeros(&[1, 6, 16, 16]));
        assert!(dec.decode(&mut g, &p, bad).is_err());
    }

    #[test]
    fn gradient_reaches_every_decoder_parameter() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&mut store, 4, 4, &mut rng);
        let target = Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 7) as f64 / 7.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = g.constant(normal_tensor(&[2, 4, 16, 16], 1.0, &mut rng));
        let x = dec.decode(&mut g, &p, z).unwrap();
        let t = g.constant(target);
        let loss = recon_loss_var(&mut g, t, x, 1e-6).unwrap();
        let mut grads = g.backward(loss);
        for ((name, _), grad) in store.iter().zip(p.gradients(&mut grads, &store)) {
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "{name} got no gradient"
            );
        }
    }

    #[test]
    fn loss_examples() {
        let one = |r: f64| recon_loss(&Tensor::scalar(0.0), &Tensor::scalar(r), 1e-12).unwrap();
        assert!(one(1.0).abs() < 1e-9);
        assert!((one(std::f64::consts::E) - 1.0).abs() < 1e-9);
        let x = Tensor::full(&[2, 3], 0.4);
        let loss = recon_loss(&x, &x, 1e-6).unwrap();
        assert!((loss - 3.0 * 1e-6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smaller_residual_gets_larger_gradient() {
        let eps = 1e-6;
        let grad = |r: f64| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::scalar(0.0));
            let xp = g.leaf(Tensor::scalar(r));
            let l = recon_loss_var(&mut g, x, xp, eps).unwrap();
            g.backward(l).get(xp).unwrap().item().abs()
        };
        let rs = [0.01, 0.05, 0.1, 0.3, 0.9];
        for pair in rs.windows(2) {
            assert!(grad(pair[0]) > grad(pair[1]));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = normal_tensor(&[4], 0.5, &mut rng);
        let xp = normal_tensor(&[4], 0.5, &mut rng);
        let err =
            check_gradients(&[x, xp], 1e-7, |g, v| recon_loss_var(g, v[0], v[1], 1e-3)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = normal_tensor(&[3, 5], 1.0, &mut rng);
            let b = normal_tensor(&[3, 5], 1.0, &mut rng);
            prop_assert_eq!(recon_loss(&a, &b, 1e-6).unwrap(), recon_loss(&b, &a, 1e-6).unwrap());
        }
    }
}
