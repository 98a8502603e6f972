//! Spatial feature shrinking: reduces an `H×W×C` map to `(H/s)×(W/s)×C`
//! before attention, cutting the token count by `s²`.
//!
//! Two variants:
//! - mixed pooling, `λ·avg + (1−λ)·max` with `λ = sigmoid(lambda_raw)`;
//! - space-to-channel reshape followed by a 1×1 convolution from `s²·C` back
//!   to `C` channels. Blocks are flattened row-major over `(dy, dx, c)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, MulSite, Var};
use crate::ops::{sigmoid, PoolKind};
use crate::params::{join, ParamKind, Parameters};
use crate::tensor::{FeatureMap, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShrinkVariant {
    #[default]
    Pool,
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedPoolParam<S> {
    /// One-element tensor holding the unconstrained mixing weight.
    pub lambda_raw: Tensor<S>,
}

impl<S: Scalar> MixedPoolParam<S> {
    /// `lambda_raw = 0`, i.e. an even blend of average and max pooling.
    pub fn new() -> Self {
        Self::with_raw(S::zero())
    }

    pub fn with_raw(raw: S) -> Self {
        Self {
            lambda_raw: Tensor::scalar(raw),
        }
    }

    pub fn lambda(&self) -> S {
        sigmoid(self.lambda_raw.data()[0])
    }
}

impl<S: Scalar> Default for MixedPoolParam<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvShrinkParam<S> {
    /// `(s²·C)×C`.
    pub w: Tensor<S>,
    /// `C`.
    pub b: Tensor<S>,
}

impl<S: Scalar> ConvShrinkParam<S> {
    pub fn random<R: Rng + ?Sized>(window: usize, channels: usize, rng: &mut R) -> Self {
        let fan_in = window * window * channels;
        Self {
            w: Tensor::uniform(&[fan_in, channels], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShrinkParams<S> {
    Pool(MixedPoolParam<S>),
    Conv(ConvShrinkParam<S>),
}

impl<S: Scalar> ShrinkParams<S> {
    pub fn init<R: Rng + ?Sized>(
        variant: ShrinkVariant,
        window: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        match variant {
            ShrinkVariant::Pool => ShrinkParams::Pool(MixedPoolParam::new()),
            ShrinkVariant::Conv => ShrinkParams::Conv(ConvShrinkParam::random(window, channels, rng)),
        }
    }

    pub fn variant(&self) -> ShrinkVariant {
        match self {
            ShrinkParams::Pool(_) => ShrinkVariant::Pool,
            ShrinkParams::Conv(_) => ShrinkVariant::Conv,
        }
    }
}

impl<S: Scalar> Parameters<S> for ShrinkParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        match self {
            ShrinkParams::Pool(p) => f(&join(prefix, "lambda_raw"), ParamKind::MixWeight, &p.lambda_raw),
            ShrinkParams::Conv(p) => {
                f(&join(prefix, "w"), ParamKind::Weight, &p.w);
                f(&join(prefix, "b"), ParamKind::Bias, &p.b);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        match self {
            ShrinkParams::Pool(p) => {
                f(&join(prefix, "lambda_raw"), ParamKind::MixWeight, &mut p.lambda_raw)
            }
            ShrinkParams::Conv(p) => {
                f(&join(prefix, "w"), ParamKind::Weight, &mut p.w);
                f(&join(prefix, "b"), ParamKind::Bias, &mut p.b);
            }
        }
    }
}

/// Mixed pooling on a graph. `lambda_raw` must be a bound one-element var.
pub fn shrink_pool_on<S: Scalar>(
    g: &mut Graph<S>,
    map: Var,
    window: usize,
    lambda_raw: Var,
) -> Result<Var> {
    let avg = g.pool2d(map, window, PoolKind::Avg)?;
    let max = g.pool2d(map, window, PoolKind::Max)?;
    let lambda = g.sigmoid(lambda_raw);
    let rest = g.one_minus(lambda);
    let a = g.scale_by(avg, lambda)?;
    let m = g.scale_by(max, rest)?;
    g.add(a, m)
}

/// Space-to-channel plus 1×1 convolution on a graph.
pub fn shrink_conv_on<S: Scalar>(
    g: &mut Graph<S>,
    map: Var,
    window: usize,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (h, wd, c) = g.value(map).dims3()?;
    if g.shape(w) != [window * window * c, c] {
        return Err(Error::dim("shrink_conv weight", &[window * window * c, c], g.shape(w)));
    }
    let packed = g.space_to_depth(map, window)?;
    let (ho, wo) = (h / window, wd / window);
    let rows = g.reshape(packed, &[ho * wo, window * window * c])?;
    let proj = g.at_site(MulSite::Shrink, |g| g.matmul(rows, w))?;
    let biased = g.add_bias(proj, b)?;
    g.reshape(biased, &[ho, wo, c])
}

/// Binds `p` under `prefix` and shrinks `map` on the graph.
pub fn shrink_on<S: Scalar>(
    g: &mut Graph<S>,
    map: Var,
    window: usize,
    p: &ShrinkParams<S>,
    prefix: &str,
) -> Result<Var> {
    match p {
        ShrinkParams::Pool(mp) => {
            let raw = g.param(&join(prefix, "lambda_raw"), &mp.lambda_raw)?;
            shrink_pool_on(g, map, window, raw)
        }
        ShrinkParams::Conv(cp) => {
            let w = g.param(&join(prefix, "w"), &cp.w)?;
            let b = g.param(&join(prefix, "b"), &cp.b)?;
            shrink_conv_on(g, map, window, w, b)
        }
    }
}

pub fn shrink_pool<S: Scalar>(
    map: &FeatureMap<S>,
    window: usize,
    p: &MixedPoolParam<S>,
) -> Result<FeatureMap<S>> {
    let mut g = Graph::new();
    let x = g.input(map.clone());
    let raw = g.input(p.lambda_raw.clone());
    let out = shrink_pool_on(&mut g, x, window, raw)?;
    Ok(g.value(out).clone())
}

pub fn shrink_conv<S: Scalar>(
    map: &FeatureMap<S>,
    window: usize,
    p: &ConvShrinkParam<S>,
) -> Result<FeatureMap<S>> {
    let mut g = Graph::new();
    let x = g.input(map.clone());
    let w = g.input(p.w.clone());
    let b = g.input(p.b.clone());
    let out = shrink_conv_on(&mut g, x, window, w, b)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::pool2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window() -> Tensor<f64> {
        Tensor::from_f64(&[2, 2, 1], &[1., 3., 5., 7.]).unwrap()
    }

    #[test]
    fn lambda_is_half_at_zero_and_bounded() {
        assert_eq!(MixedPoolParam::<f64>::new().lambda(), 0.5);
        for raw in [-50.0, -3.0, 0.1, 4.0, 30.0] {
            let l = MixedPoolParam::with_raw(raw).lambda();
            assert!((0.0..=1.0).contains(&l));
        }
        assert!(MixedPoolParam::with_raw(-5.0f64).lambda() > 0.0);
        assert!(MixedPoolParam::with_raw(5.0f64).lambda() < 1.0);
    }

    #[test]
    fn mixed_pool_window_blend() {
        let out = shrink_pool(&window(), 2, &MixedPoolParam::new()).unwrap();
        assert_eq!(out.data(), &[5.5]);
    }

    #[test]
    fn mixed_pool_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let map = Tensor::<f64>::uniform(&[4, 6, 3], 2.0, &mut rng);
        let (avg, _) = pool2d(&map, 2, PoolKind::Avg).unwrap();
        let (max, _) = pool2d(&map, 2, PoolKind::Max).unwrap();
        let hi = shrink_pool(&map, 2, &MixedPoolParam::with_raw(20.0)).unwrap();
        let lo = shrink_pool(&map, 2, &MixedPoolParam::with_raw(-20.0)).unwrap();
        assert!(hi.max_abs_diff(&avg) < 1e-6);
        assert!(lo.max_abs_diff(&max) < 1e-6);
    }

    #[test]
    fn window_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = Tensor::<f64>::uniform(&[3, 5, 2], 1.0, &mut rng);
        for raw in [-3.0, 0.0, 1.7] {
            let out = shrink_pool(&map, 1, &MixedPoolParam::with_raw(raw)).unwrap();
            assert!(out.max_abs_diff(&map) < 1e-15);
        }
    }

    #[test]
    fn divisibility_is_config_error() {
        let map = Tensor::<f64>::zeros(&[5, 4, 1]);
        assert!(matches!(
            shrink_pool(&map, 2, &MixedPoolParam::new()),
            Err(Error::Config(_))
        ));
        let p = ConvShrinkParam {
            w: Tensor::zeros(&[4, 1]),
            b: Tensor::zeros(&[1]),
        };
        assert!(matches!(shrink_conv(&map, 2, &p), Err(Error::Config(_))));
    }

    #[test]
    fn conv_weight_shape_is_checked() {
        let p = ConvShrinkParam {
            w: Tensor::<f64>::zeros(&[3, 1]),
            b: Tensor::zeros(&[1]),
        };
        assert!(matches!(
            shrink_conv(&Tensor::zeros(&[4, 4, 1]), 2, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn conv_identity_with_unit_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = Tensor::<f64>::uniform(&[3, 3, 4], 1.0, &mut rng);
        let p = ConvShrinkParam {
            w: Tensor::eye(4),
            b: Tensor::zeros(&[4]),
        };
        assert_eq!(shrink_conv(&map, 1, &p).unwrap(), map);
    }

    #[test]
    fn conv_with_quarter_weights_is_average_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let map = Tensor::<f64>::uniform(&[4, 6, 1], 1.0, &mut rng);
        let p = ConvShrinkParam {
            w: Tensor::full(&[4, 1], 0.25),
            b: Tensor::zeros(&[1]),
        };
        let (avg, _) = pool2d(&map, 2, PoolKind::Avg).unwrap();
        assert!(shrink_conv(&map, 2, &p).unwrap().max_abs_diff(&avg) < 1e-15);
    }

    #[test]
    fn conv_matches_per_pixel_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let map = Tensor::<f64>::uniform(&[4, 4, 2], 1.0, &mut rng);
        let mut p = ConvShrinkParam::random(2, 2, &mut rng);
        p.b = Tensor::uniform(&[2], 0.5, &mut rng);
        let out = shrink_conv(&map, 2, &p).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                for co in 0..2 {
                    let mut acc = p.b.get(&[co]);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            for ci in 0..2 {
                                let slot = (dy * 2 + dx) * 2 + ci;
                                acc += map.get(&[oy * 2 + dy, ox * 2 + dx, ci]) * p.w.get(&[slot, co]);
                            }
                        }
                    }
                    assert!((out.get(&[oy, ox, co]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}
