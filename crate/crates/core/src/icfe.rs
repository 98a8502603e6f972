//! Iterative refinement with the dual CFE pair.
//!
//! [`IcfeParams`] applies one parameter set `n` times; [`StackedParams`]
//! chains independently parameterised blocks. Both update the two branches
//! from the same previous pair unless [`UpdateOrder::Sequential`] is chosen.

use serde::{Deserialize, Serialize};

use crate::cfe::{cfe_forward_on, CfeParams, CfeVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{join, ParamKind, Parameters};
use crate::tensor::{Scalar, Tensor};
use crate::tokens::TokenSeq;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOrder {
    /// Both branches read the previous iteration's pair.
    #[default]
    Synchronous,
    /// The thermal update reads the already-updated RGB tokens.
    Sequential,
}

/// Which CFE modules exist and whether they share parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum CfeBranches<S> {
    /// Separate parameters for each direction.
    Dual {
        rgb: CfeParams<S>,
        thermal: CfeParams<S>,
    },
    /// One parameter set used for both directions.
    Shared(CfeParams<S>),
    /// Only the RGB branch is enhanced; thermal tokens pass through.
    RgbOnly(CfeParams<S>),
    /// Only the thermal branch is enhanced; RGB tokens pass through.
    ThermalOnly(CfeParams<S>),
}

impl<S: Scalar> CfeBranches<S> {
    fn parts(&self) -> Vec<(&'static str, &CfeParams<S>)> {
        match self {
            CfeBranches::Dual { rgb, thermal } => vec![("cfe_r", rgb), ("cfe_t", thermal)],
            CfeBranches::Shared(p) => vec![("cfe", p)],
            CfeBranches::RgbOnly(p) => vec![("cfe_r", p)],
            CfeBranches::ThermalOnly(p) => vec![("cfe_t", p)],
        }
    }

    fn parts_mut(&mut self) -> Vec<(&'static str, &mut CfeParams<S>)> {
        match self {
            CfeBranches::Dual { rgb, thermal } => vec![("cfe_r", rgb), ("cfe_t", thermal)],
            CfeBranches::Shared(p) => vec![("cfe", p)],
            CfeBranches::RgbOnly(p) => vec![("cfe_r", p)],
            CfeBranches::ThermalOnly(p) => vec![("cfe_t", p)],
        }
    }

    /// Binds parameters and returns `(rgb, thermal)` handles. In shared mode
    /// both handles point at the same nodes.
    pub fn bind(&self, g: &mut Graph<S>, prefix: &str) -> Result<(Option<CfeVars>, Option<CfeVars>)> {
        Ok(match self {
            CfeBranches::Dual { rgb, thermal } => (
                Some(rgb.bind(g, &join(prefix, "cfe_r"))?),
                Some(thermal.bind(g, &join(prefix, "cfe_t"))?),
            ),
            CfeBranches::Shared(p) => {
                let v = p.bind(g, &join(prefix, "cfe"))?;
                (Some(v), Some(v))
            }
            CfeBranches::RgbOnly(p) => (Some(p.bind(g, &join(prefix, "cfe_r"))?), None),
            CfeBranches::ThermalOnly(p) => (None, Some(p.bind(g, &join(prefix, "cfe_t"))?)),
        })
    }

    pub fn cast<T: Scalar>(&self) -> CfeBranches<T> {
        match self {
            CfeBranches::Dual { rgb, thermal } => CfeBranches::Dual {
                rgb: rgb.cast(),
                thermal: thermal.cast(),
            },
            CfeBranches::Shared(p) => CfeBranches::Shared(p.cast()),
            CfeBranches::RgbOnly(p) => CfeBranches::RgbOnly(p.cast()),
            CfeBranches::ThermalOnly(p) => CfeBranches::ThermalOnly(p.cast()),
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut CfeParams<S>)) {
        for (_, p) in self.parts_mut() {
            f(p);
        }
    }
}

impl<S: Scalar> Parameters<S> for CfeBranches<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        for (name, p) in self.parts() {
            p.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        for (name, p) in self.parts_mut() {
            p.visit_mut(&join(prefix, name), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcfeParams<S> {
    pub branches: CfeBranches<S>,
    pub iterations: usize,
    pub update: UpdateOrder,
}

impl<S: Scalar> IcfeParams<S> {
    pub fn new(branches: CfeBranches<S>, iterations: usize) -> Self {
        Self {
            branches,
            iterations,
            update: UpdateOrder::Synchronous,
        }
    }

    pub fn is_shared(&self) -> bool {
        matches!(self.branches, CfeBranches::Shared(_))
    }
}

impl<S: Scalar> Parameters<S> for IcfeParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        self.branches.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        self.branches.visit_mut(prefix, f);
    }
}

/// Independently parameterised `(cfe_r, cfe_t)` blocks applied in series.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedParams<S> {
    pub blocks: Vec<(CfeParams<S>, CfeParams<S>)>,
    pub update: UpdateOrder,
}

impl<S: Scalar> StackedParams<S> {
    pub fn new(blocks: Vec<(CfeParams<S>, CfeParams<S>)>) -> Self {
        Self {
            blocks,
            update: UpdateOrder::Synchronous,
        }
    }
}

impl<S: Scalar> Parameters<S> for StackedParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        for (i, (r, t)) in self.blocks.iter().enumerate() {
            let block = join(prefix, &format!("blocks.{i}"));
            r.visit(&join(&block, "cfe_r"), f);
            t.visit(&join(&block, "cfe_t"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        for (i, (r, t)) in self.blocks.iter_mut().enumerate() {
            let block = join(prefix, &format!("blocks.{i}"));
            r.visit_mut(&join(&block, "cfe_r"), f);
            t.visit_mut(&join(&block, "cfe_t"), f);
        }
    }
}

/// One application of the dual pair.
pub fn dual_step_on<S: Scalar>(
    g: &mut Graph<S>,
    t_r: Var,
    t_t: Var,
    rgb: Option<&CfeVars>,
    thermal: Option<&CfeVars>,
    update: UpdateOrder,
) -> Result<(Var, Var)> {
    let next_r = match rgb {
        Some(p) => cfe_forward_on(g, t_r, t_t, p)?,
        None => t_r,
    };
    let aux_for_t = match update {
        UpdateOrder::Synchronous => t_r,
        UpdateOrder::Sequential => next_r,
    };
    let next_t = match thermal {
        Some(p) => cfe_forward_on(g, t_t, aux_for_t, p)?,
        None => t_t,
    };
    Ok((next_r, next_t))
}

/// Applies the shared pair `iterations` times.
pub fn icfe_forward_on<S: Scalar>(
    g: &mut Graph<S>,
    t_r: Var,
    t_t: Var,
    p: &IcfeParams<S>,
    prefix: &str,
) -> Result<(Var, Var)> {
    iterate_on(g, t_r, t_t, &p.branches, p.iterations, p.update, prefix)
}

/// [`icfe_forward_on`] with the iteration count and update order given
/// explicitly.
pub fn iterate_on<S: Scalar>(
    g: &mut Graph<S>,
    t_r: Var,
    t_t: Var,
    branches: &CfeBranches<S>,
    iterations: usize,
    update: UpdateOrder,
    prefix: &str,
) -> Result<(Var, Var)> {
    if iterations == 0 {
        return Ok((t_r, t_t));
    }
    let (rgb, thermal) = branches.bind(g, prefix)?;
    let mut pair = (t_r, t_t);
    for _ in 0..iterations {
        pair = dual_step_on(g, pair.0, pair.1, rgb.as_ref(), thermal.as_ref(), update)?;
    }
    Ok(pair)
}

pub fn stacked_forward_on<S: Scalar>(
    g: &mut Graph<S>,
    t_r: Var,
    t_t: Var,
    p: &StackedParams<S>,
    prefix: &str,
) -> Result<(Var, Var)> {
    if p.blocks.is_empty() {
        return Err(Error::Config("a stack needs at least one block".into()));
    }
    let mut pair = (t_r, t_t);
    for (i, (r, t)) in p.blocks.iter().enumerate() {
        let block = join(prefix, &format!("blocks.{i}"));
        let rv = r.bind(g, &join(&block, "cfe_r"))?;
        let tv = t.bind(g, &join(&block, "cfe_t"))?;
        pair = dual_step_on(g, pair.0, pair.1, Some(&rv), Some(&tv), p.update)?;
    }
    Ok(pair)
}

fn run_pair<S: Scalar>(
    t_r: &TokenSeq<S>,
    t_t: &TokenSeq<S>,
    f: impl FnOnce(&mut Graph<S>, Var, Var) -> Result<(Var, Var)>,
) -> Result<(TokenSeq<S>, TokenSeq<S>)> {
    let mut g = Graph::new();
    let r = g.input(t_r.tokens.clone());
    let t = g.input(t_t.tokens.clone());
    let (r, t) = f(&mut g, r, t)?;
    Ok((
        TokenSeq::new(g.value(r).clone(), t_r.origin_h, t_r.origin_w)?,
        TokenSeq::new(g.value(t).clone(), t_t.origin_h, t_t.origin_w)?,
    ))
}

pub fn icfe_forward<S: Scalar>(
    t_r: &TokenSeq<S>,
    t_t: &TokenSeq<S>,
    p: &IcfeParams<S>,
) -> Result<(TokenSeq<S>, TokenSeq<S>)> {
    run_pair(t_r, t_t, |g, r, t| icfe_forward_on(g, r, t, p, ""))
}

pub fn stacked_forward<S: Scalar>(
    t_r: &TokenSeq<S>,
    t_t: &TokenSeq<S>,
    p: &StackedParams<S>,
) -> Result<(TokenSeq<S>, TokenSeq<S>)> {
    run_pair(t_r, t_t, |g, r, t| stacked_forward_on(g, r, t, p, ""))
}
