//! Feature map ↔ token sequence conversion with learnable positional
//! embeddings.
//!
//! Flattening is row-major over pixels, so a `H×W×C` map and its `HW×C`
//! token matrix share the same flat buffer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamKind, Parameters};
use crate::tensor::{FeatureMap, Scalar, Tensor};

/// Initialization bound for positional embedding entries.
pub const PE_INIT_BOUND: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSeq<S> {
    /// `T×C` token matrix.
    pub tokens: Tensor<S>,
    pub origin_h: usize,
    pub origin_w: usize,
}

impl<S: Scalar> TokenSeq<S> {
    pub fn new(tokens: Tensor<S>, origin_h: usize, origin_w: usize) -> Result<Self> {
        let (t, _) = tokens.dims2()?;
        if t != origin_h * origin_w {
            return Err(Error::dim("token sequence", &[t], &[origin_h, origin_w]));
        }
        Ok(Self {
            tokens,
            origin_h,
            origin_w,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding<S> {
    /// `T×C`, one row per token.
    pub table: Tensor<S>,
}

impl<S: Scalar> PositionalEmbedding<S> {
    pub fn random<R: Rng + ?Sized>(tokens: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            table: Tensor::uniform(&[tokens, channels], PE_INIT_BOUND, rng),
        }
    }

    pub fn zeros(tokens: usize, channels: usize) -> Self {
        Self {
            table: Tensor::zeros(&[tokens, channels]),
        }
    }
}

impl<S: Scalar> Parameters<S> for PositionalEmbedding<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        f(prefix, ParamKind::Embedding, &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        f(prefix, ParamKind::Embedding, &mut self.table);
    }
}

/// Flattens `map` into tokens, adding `pe` row-wise when given.
pub fn tokenize<S: Scalar>(
    map: &FeatureMap<S>,
    pe: Option<&PositionalEmbedding<S>>,
) -> Result<TokenSeq<S>> {
    let (h, w, c) = map.dims3()?;
    let mut tokens = map.reshape(&[h * w, c])?;
    if let Some(pe) = pe {
        if pe.table.shape() != tokens.shape() {
            return Err(Error::dim("positional embedding", tokens.shape(), pe.table.shape()));
        }
        tokens = tokens.add(&pe.table)?;
    }
    TokenSeq::new(tokens, h, w)
}

pub fn detokenize<S: Scalar>(seq: &TokenSeq<S>) -> Result<FeatureMap<S>> {
    let (t, c) = seq.tokens.dims2()?;
    if t != seq.origin_h * seq.origin_w {
        return Err(Error::dim(
            "detokenize",
            &[t, c],
            &[seq.origin_h, seq.origin_w, c],
        ));
    }
    seq.tokens.reshape(&[seq.origin_h, seq.origin_w, c])
}

/// Graph form of [`tokenize`]; `pe` must already be bound.
pub fn tokenize_on<S: Scalar>(g: &mut Graph<S>, map: Var, pe: Option<Var>) -> Result<Var> {
    let (h, w, c) = g.value(map).dims3()?;
    let tokens = g.reshape(map, &[h * w, c])?;
    match pe {
        Some(pe) => {
            if g.shape(pe) != g.shape(tokens) {
                return Err(Error::dim("positional embedding", g.shape(tokens), g.shape(pe)));
            }
            g.add(tokens, pe)
        }
        None => Ok(tokens),
    }
}

pub fn detokenize_on<S: Scalar>(g: &mut Graph<S>, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let (t, c) = g.value(tokens).dims2()?;
    if t != h * w {
        return Err(Error::dim("detokenize", &[t, c], &[h, w, c]));
    }
    g.reshape(tokens, &[h, w, c])
}
