//! Cross-modal feature enhancement: one direction of the dual
//! cross-attention block.
//!
//! Queries come from the auxiliary modality; keys and values from the target
//! modality being enhanced:
//!
//! ```text
//! Z  = concat_j softmax(Q_j K_jᵀ / √d_k) V_j
//! T' = α·(Z·W_O) + β·T_target
//! out = γ·T' + δ·FFN(T'),   FFN(x) = relu(x·W1 + b1)·W2 + b2
//! ```
//!
//! Heads are contiguous column blocks of width `C / heads`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, MulSite, Var};
use crate::params::{join, ParamKind, Parameters};
use crate::tensor::{Scalar, Tensor};
use crate::tokens::TokenSeq;

pub const DEFAULT_HEADS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CfeParams<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
    pub alpha: Tensor<S>,
    pub beta: Tensor<S>,
    pub gamma: Tensor<S>,
    pub delta: Tensor<S>,
    pub heads: usize,
}

impl<S: Scalar> CfeParams<S> {
    /// Projection and FFN weights uniform in `±1/√C`, biases zero,
    /// residual coefficients one.
    pub fn random<R: Rng + ?Sized>(
        channels: usize,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(channels, heads)?;
        if hidden == 0 {
            return Err(Error::Config("FFN hidden width must be positive".into()));
        }
        let bound = 1.0 / (channels as f64).sqrt();
        let c = channels;
        Ok(Self {
            w_q: Tensor::uniform(&[c, c], bound, rng),
            w_k: Tensor::uniform(&[c, c], bound, rng),
            w_v: Tensor::uniform(&[c, c], bound, rng),
            w_o: Tensor::uniform(&[c, c], bound, rng),
            ffn_w1: Tensor::uniform(&[c, hidden], bound, rng),
            ffn_b1: Tensor::zeros(&[hidden]),
            ffn_w2: Tensor::uniform(&[hidden, c], bound, rng),
            ffn_b2: Tensor::zeros(&[c]),
            alpha: Tensor::scalar(S::one()),
            beta: Tensor::scalar(S::one()),
            gamma: Tensor::scalar(S::one()),
            delta: Tensor::scalar(S::one()),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.ffn_w1.shape()[1]
    }

    /// Sets `(α, β, γ, δ)`.
    pub fn set_coefficients(&mut self, alpha: f64, beta: f64, gamma: f64, delta: f64) {
        self.alpha = Tensor::scalar(S::lit(alpha));
        self.beta = Tensor::scalar(S::lit(beta));
        self.gamma = Tensor::scalar(S::lit(gamma));
        self.delta = Tensor::scalar(S::lit(delta));
    }

    pub fn cast<T: Scalar>(&self) -> CfeParams<T> {
        CfeParams {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            w_o: self.w_o.cast(),
            ffn_w1: self.ffn_w1.cast(),
            ffn_b1: self.ffn_b1.cast(),
            ffn_w2: self.ffn_w2.cast(),
            ffn_b2: self.ffn_b2.cast(),
            alpha: self.alpha.cast(),
            beta: self.beta.cast(),
            gamma: self.gamma.cast(),
            delta: self.delta.cast(),
            heads: self.heads,
        }
    }

    fn fields(&self) -> [(&'static str, ParamKind, &Tensor<S>); 12] {
        use ParamKind::*;
        [
            ("w_q", Weight, &self.w_q),
            ("w_k", Weight, &self.w_k),
            ("w_v", Weight, &self.w_v),
            ("w_o", Weight, &self.w_o),
            ("ffn_w1", Weight, &self.ffn_w1),
            ("ffn_b1", Bias, &self.ffn_b1),
            ("ffn_w2", Weight, &self.ffn_w2),
            ("ffn_b2", Bias, &self.ffn_b2),
            ("alpha", Coefficient, &self.alpha),
            ("beta", Coefficient, &self.beta),
            ("gamma", Coefficient, &self.gamma),
            ("delta", Coefficient, &self.delta),
        ]
    }

    /// Registers every tensor on `g` under `prefix`.
    pub fn bind(&self, g: &mut Graph<S>, prefix: &str) -> Result<CfeVars> {
        let [q, k, v, o, w1, b1, w2, b2, a, be, ga, de] = self.fields();
        let mut p = |(name, _, t): (&str, ParamKind, &Tensor<S>)| g.param(&join(prefix, name), t);
        Ok(CfeVars {
            w_q: p(q)?,
            w_k: p(k)?,
            w_v: p(v)?,
            w_o: p(o)?,
            ffn_w1: p(w1)?,
            ffn_b1: p(b1)?,
            ffn_w2: p(w2)?,
            ffn_b2: p(b2)?,
            alpha: p(a)?,
            beta: p(be)?,
            gamma: p(ga)?,
            delta: p(de)?,
            heads: self.heads,
        })
    }

    /// Places every tensor on `g` as a constant.
    pub fn bind_const(&self, g: &mut Graph<S>) -> CfeVars {
        let [q, k, v, o, w1, b1, w2, b2, a, be, ga, de] =
            self.fields().map(|(_, _, t)| g.input(t.clone()));
        CfeVars {
            w_q: q,
            w_k: k,
            w_v: v,
            w_o: o,
            ffn_w1: w1,
            ffn_b1: b1,
            ffn_w2: w2,
            ffn_b2: b2,
            alpha: a,
            beta: be,
            gamma: ga,
            delta: de,
            heads: self.heads,
        }
    }
}

impl<S: Scalar> Parameters<S> for CfeParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        for (name, kind, t) in self.fields() {
            f(&join(prefix, name), kind, t);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        use ParamKind::*;
        let fields: [(&str, ParamKind, &mut Tensor<S>); 12] = [
            ("w_q", Weight, &mut self.w_q),
            ("w_k", Weight, &mut self.w_k),
            ("w_v", Weight, &mut self.w_v),
            ("w_o", Weight, &mut self.w_o),
            ("ffn_w1", Weight, &mut self.ffn_w1),
            ("ffn_b1", Bias, &mut self.ffn_b1),
            ("ffn_w2", Weight, &mut self.ffn_w2),
            ("ffn_b2", Bias, &mut self.ffn_b2),
            ("alpha", Coefficient, &mut self.alpha),
            ("beta", Coefficient, &mut self.beta),
            ("gamma", Coefficient, &mut self.gamma),
            ("delta", Coefficient, &mut self.delta),
        ];
        for (name, kind, t) in fields {
            f(&join(prefix, name), kind, t);
        }
    }
}

/// Graph handles for one bound [`CfeParams`].
#[derive(Clone, Copy, Debug)]
pub struct CfeVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub alpha: Var,
    pub beta: Var,
    pub gamma: Var,
    pub delta: Var,
    pub heads: usize,
}

fn check_heads(channels: usize, heads: usize) -> Result<()> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::Config(format!(
            "channel width {channels} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Output of the attention stage before `W_O`.
pub struct Attention {
    pub z: Var,
    /// Row-stochastic score matrix per head, `T_q×T_kv`.
    pub probs: Vec<Var>,
}

/// Multi-head cross-attention: queries from `q_tokens`, keys and values
/// from `kv_tokens`.
pub fn cross_attention_on<S: Scalar>(
    g: &mut Graph<S>,
    q_tokens: Var,
    kv_tokens: Var,
    p: &CfeVars,
) -> Result<Attention> {
    let (_, cq) = g.value(q_tokens).dims2()?;
    let (_, ckv) = g.value(kv_tokens).dims2()?;
    if cq != ckv {
        return Err(Error::dim("cross_attention", g.shape(q_tokens), g.shape(kv_tokens)));
    }
    check_heads(cq, p.heads)?;
    let d_k = cq / p.heads;
    let scale = S::lit(1.0 / (d_k as f64).sqrt());

    let (q, k, v) = g.at_site(MulSite::Projection, |g| -> Result<_> {
        Ok((
            g.matmul(q_tokens, p.w_q)?,
            g.matmul(kv_tokens, p.w_k)?,
            g.matmul(kv_tokens, p.w_v)?,
        ))
    })?;
    let scale = g.input(Tensor::scalar(scale));

    let mut heads = Vec::with_capacity(p.heads);
    let mut probs = Vec::with_capacity(p.heads);
    for j in 0..p.heads {
        let qj = g.slice_cols(q, j * d_k, d_k)?;
        let kj = g.slice_cols(k, j * d_k, d_k)?;
        let vj = g.slice_cols(v, j * d_k, d_k)?;
        let scores = g.at_site(MulSite::Scores, |g| g.matmul_nt(qj, kj))?;
        let scaled = g.scale_by(scores, scale)?;
        let attn = g.softmax_rows(scaled)?;
        heads.push(g.at_site(MulSite::Values, |g| g.matmul(attn, vj))?);
        probs.push(attn);
    }
    let z = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    Ok(Attention { z, probs })
}

/// `relu(x·W1 + b1)·W2 + b2`.
pub fn ffn_on<S: Scalar>(g: &mut Graph<S>, x: Var, p: &CfeVars) -> Result<Var> {
    g.at_site(MulSite::Ffn, |g| {
        let h = g.matmul(x, p.ffn_w1)?;
        let h = g.add_bias(h, p.ffn_b1)?;
        let h = g.relu(h);
        let o = g.matmul(h, p.ffn_w2)?;
        g.add_bias(o, p.ffn_b2)
    })
}

/// Enhances `target` tokens with queries drawn from `aux`.
pub fn cfe_forward_on<S: Scalar>(
    g: &mut Graph<S>,
    target: Var,
    aux: Var,
    p: &CfeVars,
) -> Result<Var> {
    let att = cross_attention_on(g, aux, target, p)?;
    let projected = g.at_site(MulSite::Projection, |g| g.matmul(att.z, p.w_o))?;
    let a = g.scale_by(projected, p.alpha)?;
    let b = g.scale_by(target, p.beta)?;
    let mid = g.add(a, b)?;
    let f = ffn_on(g, mid, p)?;
    let c = g.scale_by(mid, p.gamma)?;
    let d = g.scale_by(f, p.delta)?;
    g.add(c, d)
}

/// Attention output `Z` (before `W_O`) for fixed parameters.
pub fn cross_attention<S: Scalar>(
    q_tokens: &TokenSeq<S>,
    kv_tokens: &TokenSeq<S>,
    p: &CfeParams<S>,
) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    let q = g.input(q_tokens.tokens.clone());
    let kv = g.input(kv_tokens.tokens.clone());
    let att = cross_attention_on(&mut g, q, kv, &vars)?;
    Ok(g.value(att.z).clone())
}

/// Per-head score matrices of [`cross_attention`].
pub fn attention_maps<S: Scalar>(
    q_tokens: &TokenSeq<S>,
    kv_tokens: &TokenSeq<S>,
    p: &CfeParams<S>,
) -> Result<Vec<Tensor<S>>> {
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    let q = g.input(q_tokens.tokens.clone());
    let kv = g.input(kv_tokens.tokens.clone());
    let att = cross_attention_on(&mut g, q, kv, &vars)?;
    Ok(att.probs.iter().map(|&v| g.value(v).clone()).collect())
}

pub fn cfe_forward<S: Scalar>(
    target: &TokenSeq<S>,
    aux: &TokenSeq<S>,
    p: &CfeParams<S>,
) -> Result<TokenSeq<S>> {
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    let t = g.input(target.tokens.clone());
    let a = g.input(aux.tokens.clone());
    let out = cfe_forward_on(&mut g, t, a, &vars)?;
    Ok(TokenSeq {
        tokens: g.value(out).clone(),
        origin_h: target.origin_h,
        origin_w: target.origin_w,
    })
}
