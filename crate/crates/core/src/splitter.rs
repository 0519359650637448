//! Channel split of the encoder output into category and domain halves, and
//! the matching concatenation of the quantized halves.
//!
//! Channels `[0, C/2)` form the category half, `[C/2, C)` the domain half.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    /// Category half, `[B, C/2, H, W]`.
    pub z1: Tensor,
    /// Domain-specific half, `[B, C/2, H, W]`.
    pub z2: Tensor,
}

fn check_even(c: usize) -> Result<()> {
    if c % 2 != 0 {
        return Err(Error::Shape(format!(
            "cannot split {c} channels into equal halves"
        )));
    }
    Ok(())
}

pub fn split_channels(z: &Tensor) -> Result<SplitFeatures> {
    let (_, c, _, _) = z.dims4()?;
    check_even(c)?;
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let (a, b) = split_var(&mut g, zv)?;
    Ok(SplitFeatures {
        z1: g.value(a).clone(),
        z2: g.value(b).clone(),
    })
}

pub fn concat_quantized(z1q: &Tensor, z2q: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(z1q.clone());
    let b = g.constant(z2q.clone());
    let out = g.concat_channels(&[a, b])?;
    Ok(g.value(out).clone())
}

/// Differentiable split on the tape.
pub fn split_var(g: &mut Graph, z: Var) -> Result<(Var, Var)> {
    let (_, c, _, _) = g.value(z).dims4()?;
    check_even(c)?;
    let half = c / 2;
    Ok((
        g.narrow_channels(z, 0, half)?,
        g.narrow_channels(z, half, half)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn halves_have_equal_width() {
        let s = split_channels(&Tensor::zeros(&[2, 8, 3, 3])).unwrap();
        assert_eq!(s.z1.shape(), &[2, 4, 3, 3]);
        assert_eq!(s.z2.shape(), &[2, 4, 3, 3]);
    }

    #[test]
    fn ordering_first_half_is_category() {
        let z = Tensor::from_fn(&[1, 8, 2, 2], |i| (i / 4) as f64);
        let s = split_channels(&z).unwrap();
        let firsts = |t: &Tensor| t.data().chunks(4).map(|c| c[0]).collect::<Vec<_>>();
        assert_eq!(firsts(&s.z1), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(firsts(&s.z2), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(split_channels(&Tensor::zeros(&[1, 7, 2, 2])).is_err());
    }

    #[test]
    fn concat_shape_and_mismatch() {
        let out =
            concat_quantized(&Tensor::zeros(&[1, 4, 8, 8]), &Tensor::zeros(&[1, 4, 8, 8])).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 8]);
        assert!(concat_quantized(
            &Tensor::zeros(&[1, 4, 8, 8]),
            &Tensor::zeros(&[1, 4, 16, 8])
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn concat_inverts_split(b in 1usize..3, half in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u32>()) {
            let z = Tensor::from_fn(&[b, 2 * half, h, w], |i| ((i as f64 + seed as f64) * 1.618).sin());
            let s = split_channels(&z).unwrap();
            prop_assert_eq!(concat_quantized(&s.z1, &s.z2).unwrap(), z);
        }
    }
}
