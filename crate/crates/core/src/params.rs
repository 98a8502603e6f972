//! Named parameter sets.
//!
//! Every learnable structure exposes its tensors through [`Parameters`] under
//! dotted names (`cfe_t.w_q`, `sfs_r.lambda_raw`, ...). The same names are
//! used when binding tensors onto a [`crate::graph::Graph`], so gradient
//! records, optimizers and weight files all line up.

use crate::tensor::{Scalar, Tensor};

/// Role of a tensor, used to decide optimizer treatment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Residual-branch scale (α, β, γ, δ).
    Coefficient,
    /// Raw mixing weight of mixed pooling (λ before the sigmoid).
    MixWeight,
    /// Positional embedding table.
    Embedding,
}

impl ParamKind {
    /// Whether weight decay applies when decay exemptions are enabled.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

pub trait Parameters<S: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>));

    /// Total learnable scalar count.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, t| n += t.numel());
        n
    }

    /// `(name, scalar count)` per tensor, in visiting order.
    fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, _, t| out.push((name.to_string(), t.numel())));
        out
    }

    fn named_tensors(&self) -> Vec<(String, ParamKind, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, kind, t| out.push((name.to_string(), kind, t.clone())));
        out
    }
}

/// `prefix.name`, or `name` alone under an empty prefix.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<S: Scalar, P: Parameters<S>> Parameters<S> for Option<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        if let Some(p) = self {
            p.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f);
        }
    }
}
