//! The full fusion pipeline: shrink → tokenize (+PE) → iterative dual CFE →
//! detokenize → bilinear resize back to `H×W` → NIN fusion, with the
//! fusion-mode and input-duplication variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfe::{CfeParams, DEFAULT_HEADS};
use crate::error::{Error, Result};
use crate::graph::{Graph, MulSite, Var};
use crate::icfe::{iterate_on, CfeBranches, IcfeParams, UpdateOrder};
use crate::params::{join, ParamKind, Parameters};
use crate::sfs::{shrink_on, ShrinkParams, ShrinkVariant};
use crate::tensor::{FeatureMap, Scalar, Tensor};
use crate::tokens::{detokenize_on, tokenize_on, PositionalEmbedding};

/// Which maps the pipeline emits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    /// Enhanced RGB map from a single RGB-side CFE.
    #[serde(rename = "a")]
    A,
    /// Enhanced thermal map from a single thermal-side CFE.
    #[serde(rename = "b")]
    B,
    /// Both directions with one shared parameter set, then NIN.
    #[serde(rename = "c")]
    C,
    /// Both directions with separate parameters, then NIN.
    #[default]
    #[serde(rename = "d")]
    D,
    /// NIN on the raw inputs; no attention.
    #[serde(rename = "e")]
    E,
    #[serde(rename = "f-rgb")]
    FRgb,
    #[serde(rename = "f-thermal")]
    FThermal,
}

impl FusionMode {
    pub fn uses_attention(self) -> bool {
        matches!(self, FusionMode::A | FusionMode::B | FusionMode::C | FusionMode::D)
    }

    pub fn uses_nin(self) -> bool {
        matches!(self, FusionMode::C | FusionMode::D | FusionMode::E)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase()))
            .map_err(|_| Error::Config(format!("unknown fusion mode {s:?}")))
    }
}

/// Feeds one modality to both branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDuplication {
    #[default]
    None,
    RgbBoth,
    ThermalBoth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmffConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub shrink_variant: ShrinkVariant,
    pub shrink_window: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub iterations: usize,
    pub mode: FusionMode,
    pub input_duplication: InputDuplication,
    pub update_order: UpdateOrder,
}

impl Default for DmffConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 16,
            shrink_variant: ShrinkVariant::Pool,
            shrink_window: 2,
            heads: DEFAULT_HEADS,
            ffn_hidden: 64,
            iterations: 1,
            mode: FusionMode::D,
            input_duplication: InputDuplication::None,
            update_order: UpdateOrder::Synchronous,
        }
    }
}

impl DmffConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.shrink_window;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("feature map extents must be positive".into()));
        }
        if s == 0 || self.height % s != 0 || self.width % s != 0 {
            return Err(Error::Config(format!(
                "shrink window {s} must divide {}x{}",
                self.height, self.width
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Token count per branch after shrinking.
    pub fn tokens(&self) -> usize {
        (self.height / self.shrink_window) * (self.width / self.shrink_window)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NinParams<S> {
    /// `2C×C`; rows `0..C` weight the RGB channels, `C..2C` the thermal ones.
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> NinParams<S> {
    pub fn random<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let fan_in = 2 * channels;
        Self {
            w: Tensor::uniform(&[fan_in, channels], 1.0 / (fan_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[channels]),
        }
    }

    /// `w = [a·I; b·I]`, zero bias.
    pub fn blend(channels: usize, rgb: f64, thermal: f64) -> Self {
        let mut w = Tensor::zeros(&[2 * channels, channels]);
        for c in 0..channels {
            w.set(&[c, c], S::lit(rgb));
            w.set(&[channels + c, c], S::lit(thermal));
        }
        Self {
            w,
            b: Tensor::zeros(&[channels]),
        }
    }
}

impl<S: Scalar> Parameters<S> for NinParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        f(&join(prefix, "w"), ParamKind::Weight, &self.w);
        f(&join(prefix, "b"), ParamKind::Bias, &self.b);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        f(&join(prefix, "w"), ParamKind::Weight, &mut self.w);
        f(&join(prefix, "b"), ParamKind::Bias, &mut self.b);
    }
}

/// Learnable state of one fusion pipeline. Components a mode does not use
/// are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct DmffWeights<S> {
    pub sfs_r: Option<ShrinkParams<S>>,
    pub sfs_t: Option<ShrinkParams<S>>,
    pub pe_r: Option<PositionalEmbedding<S>>,
    pub pe_t: Option<PositionalEmbedding<S>>,
    pub icfe: Option<IcfeParams<S>>,
    pub nin: Option<NinParams<S>>,
}

impl<S: Scalar> DmffWeights<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &DmffConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let mut w = Self {
            sfs_r: None,
            sfs_t: None,
            pe_r: None,
            pe_t: None,
            icfe: None,
            nin: None,
        };
        if cfg.mode.uses_attention() {
            let s = cfg.shrink_window;
            let t = cfg.tokens();
            w.sfs_r = Some(ShrinkParams::init(cfg.shrink_variant, s, c, rng));
            w.sfs_t = Some(ShrinkParams::init(cfg.shrink_variant, s, c, rng));
            w.pe_r = Some(PositionalEmbedding::random(t, c, rng));
            w.pe_t = Some(PositionalEmbedding::random(t, c, rng));
            let mut cfe = || CfeParams::random(c, cfg.ffn_hidden, cfg.heads, rng);
            let branches = match cfg.mode {
                FusionMode::A => CfeBranches::RgbOnly(cfe()?),
                FusionMode::B => CfeBranches::ThermalOnly(cfe()?),
                FusionMode::C => CfeBranches::Shared(cfe()?),
                _ => CfeBranches::Dual {
                    rgb: cfe()?,
                    thermal: cfe()?,
                },
            };
            let mut icfe = IcfeParams::new(branches, cfg.iterations);
            icfe.update = cfg.update_order;
            w.icfe = Some(icfe);
        }
        if cfg.mode.uses_nin() {
            w.nin = Some(NinParams::random(c, rng));
        }
        Ok(w)
    }

    pub fn cast<T: Scalar>(&self) -> DmffWeights<T> {
        let mut out = DmffWeights {
            sfs_r: self.sfs_r.as_ref().map(cast_shrink),
            sfs_t: self.sfs_t.as_ref().map(cast_shrink),
            pe_r: self.pe_r.as_ref().map(|p| PositionalEmbedding {
                table: p.table.cast(),
            }),
            pe_t: self.pe_t.as_ref().map(|p| PositionalEmbedding {
                table: p.table.cast(),
            }),
            icfe: self.icfe.as_ref().map(|p| IcfeParams {
                branches: p.branches.cast(),
                iterations: p.iterations,
                update: p.update,
            }),
            nin: None,
        };
        out.nin = self.nin.as_ref().map(|n| NinParams {
            w: n.w.cast(),
            b: n.b.cast(),
        });
        out
    }

    /// Sets `(α, β, γ, δ)` on every CFE module.
    pub fn set_coefficients(&mut self, alpha: f64, beta: f64, gamma: f64, delta: f64) {
        if let Some(icfe) = &mut self.icfe {
            icfe.branches
                .for_each_mut(|p| p.set_coefficients(alpha, beta, gamma, delta));
        }
    }
}

fn cast_shrink<S: Scalar, T: Scalar>(p: &ShrinkParams<S>) -> ShrinkParams<T> {
    match p {
        ShrinkParams::Pool(m) => ShrinkParams::Pool(crate::sfs::MixedPoolParam {
            lambda_raw: m.lambda_raw.cast(),
        }),
        ShrinkParams::Conv(c) => ShrinkParams::Conv(crate::sfs::ConvShrinkParam {
            w: c.w.cast(),
            b: c.b.cast(),
        }),
    }
}

impl<S: Scalar> Parameters<S> for DmffWeights<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Tensor<S>)) {
        self.sfs_r.visit(&join(prefix, "sfs_r"), f);
        self.sfs_t.visit(&join(prefix, "sfs_t"), f);
        self.pe_r.visit(&join(prefix, "pe_r"), f);
        self.pe_t.visit(&join(prefix, "pe_t"), f);
        self.icfe.visit(prefix, f);
        self.nin.visit(&join(prefix, "nin"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<S>)) {
        self.sfs_r.visit_mut(&join(prefix, "sfs_r"), f);
        self.sfs_t.visit_mut(&join(prefix, "sfs_t"), f);
        self.pe_r.visit_mut(&join(prefix, "pe_r"), f);
        self.pe_t.visit_mut(&join(prefix, "pe_t"), f);
        self.icfe.visit_mut(prefix, f);
        self.nin.visit_mut(&join(prefix, "nin"), f);
    }
}

/// 1×1 convolution over the channel concatenation of two maps.
pub fn nin_fuse_on<S: Scalar>(g: &mut Graph<S>, f_r: Var, f_t: Var, w: Var, b: Var) -> Result<Var> {
    if g.shape(f_r) != g.shape(f_t) {
        return Err(Error::dim("nin_fuse", g.shape(f_r), g.shape(f_t)));
    }
    let (h, wd, c) = g.value(f_r).dims3()?;
    if g.shape(w) != [2 * c, c] {
        return Err(Error::dim("nin_fuse weight", &[2 * c, c], g.shape(w)));
    }
    let r = g.reshape(f_r, &[h * wd, c])?;
    let t = g.reshape(f_t, &[h * wd, c])?;
    let cat = g.concat_cols(&[r, t])?;
    let out = g.at_site(MulSite::Nin, |g| g.matmul(cat, w))?;
    let out = g.add_bias(out, b)?;
    g.reshape(out, &[h, wd, c])
}

pub fn nin_fuse<S: Scalar>(
    f_r: &FeatureMap<S>,
    f_t: &FeatureMap<S>,
    p: &NinParams<S>,
) -> Result<FeatureMap<S>> {
    let mut g = Graph::new();
    let r = g.input(f_r.clone());
    let t = g.input(f_t.clone());
    let w = g.input(p.w.clone());
    let b = g.input(p.b.clone());
    let out = nin_fuse_on(&mut g, r, t, w, b)?;
    Ok(g.value(out).clone())
}

/// Graph handles produced by [`dmff_forward_on`].
#[derive(Clone, Copy, Debug)]
pub struct DmffVars {
    pub output: Var,
    /// Enhanced maps at full resolution, when the mode computes them.
    pub enhanced_rgb: Option<Var>,
    pub enhanced_thermal: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmffOutput<S> {
    pub output: FeatureMap<S>,
    pub enhanced_rgb: Option<FeatureMap<S>>,
    pub enhanced_thermal: Option<FeatureMap<S>>,
}

fn missing(what: &str, mode: FusionMode) -> Error {
    Error::Config(format!("weights lack {what} required by fusion mode {mode:?}"))
}

fn check_branches<S: Scalar>(mode: FusionMode, b: &CfeBranches<S>) -> Result<()> {
    let ok = matches!(
        (mode, b),
        (FusionMode::A, CfeBranches::RgbOnly(_))
            | (FusionMode::B, CfeBranches::ThermalOnly(_))
            | (FusionMode::C, CfeBranches::Shared(_))
            | (FusionMode::D, CfeBranches::Dual { .. })
    );
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "CFE parameter layout does not match fusion mode {mode:?}"
        )))
    }
}

/// Runs the pipeline on a graph, binding every used weight as a parameter.
///
/// Iteration count and update order come from `cfg`, not from the stored
/// [`IcfeParams`].
pub fn dmff_forward_on<S: Scalar>(
    g: &mut Graph<S>,
    f_r: Var,
    f_t: Var,
    cfg: &DmffConfig,
    wts: &DmffWeights<S>,
) -> Result<DmffVars> {
    cfg.validate()?;
    let expected = [cfg.height, cfg.width, cfg.channels];
    for v in [f_r, f_t] {
        if g.shape(v) != expected {
            return Err(Error::dim("dmff input", &expected, g.shape(v)));
        }
    }
    let (f_r, f_t) = match cfg.input_duplication {
        InputDuplication::None => (f_r, f_t),
        InputDuplication::RgbBoth => (f_r, f_r),
        InputDuplication::ThermalBoth => (f_t, f_t),
    };

    let (mut enh_r, mut enh_t) = (None, None);
    if cfg.mode.uses_attention() {
        let icfe = wts.icfe.as_ref().ok_or_else(|| missing("CFE parameters", cfg.mode))?;
        check_branches(cfg.mode, &icfe.branches)?;
        let s = cfg.shrink_window;
        let (hs, ws) = (cfg.height / s, cfg.width / s);

        let branch = |g: &mut Graph<S>,
                          map: Var,
                          sfs: &Option<ShrinkParams<S>>,
                          pe: &Option<PositionalEmbedding<S>>,
                          tag: &str|
         -> Result<Var> {
            let sfs = sfs
                .as_ref()
                .ok_or_else(|| missing(&format!("sfs_{tag}"), cfg.mode))?;
            if sfs.variant() != cfg.shrink_variant {
                return Err(Error::Config(format!(
                    "sfs_{tag} is {:?} but the config asks for {:?}",
                    sfs.variant(),
                    cfg.shrink_variant
                )));
            }
            let pe = pe
                .as_ref()
                .ok_or_else(|| missing(&format!("pe_{tag}"), cfg.mode))?;
            let small = shrink_on(g, map, s, sfs, &format!("sfs_{tag}"))?;
            let pe = g.param(&format!("pe_{tag}"), &pe.table)?;
            tokenize_on(g, small, Some(pe))
        };
        let t_r = branch(g, f_r, &wts.sfs_r, &wts.pe_r, "r")?;
        let t_t = branch(g, f_t, &wts.sfs_t, &wts.pe_t, "t")?;

        let (out_r, out_t) = iterate_on(
            g,
            t_r,
            t_t,
            &icfe.branches,
            cfg.iterations,
            cfg.update_order,
            "",
        )?;

        let restore = |g: &mut Graph<S>, tokens: Var| -> Result<Var> {
            let m = detokenize_on(g, tokens, hs, ws)?;
            g.bilinear_resize(m, cfg.height, cfg.width)
        };
        if !matches!(cfg.mode, FusionMode::B) {
            enh_r = Some(restore(g, out_r)?);
        }
        if !matches!(cfg.mode, FusionMode::A) {
            enh_t = Some(restore(g, out_t)?);
        }
    }

    let output = match cfg.mode {
        FusionMode::A => enh_r.expect("rgb branch"),
        FusionMode::B => enh_t.expect("thermal branch"),
        FusionMode::FRgb => f_r,
        FusionMode::FThermal => f_t,
        FusionMode::C | FusionMode::D | FusionMode::E => {
            let nin = wts.nin.as_ref().ok_or_else(|| missing("NIN weights", cfg.mode))?;
            let (a, b) = match cfg.mode {
                FusionMode::E => (f_r, f_t),
                _ => (enh_r.expect("rgb branch"), enh_t.expect("thermal branch")),
            };
            let w = g.param("nin.w", &nin.w)?;
            let bias = g.param("nin.b", &nin.b)?;
            nin_fuse_on(g, a, b, w, bias)?
        }
    };
    Ok(DmffVars {
        output,
        enhanced_rgb: enh_r,
        enhanced_thermal: enh_t,
    })
}

/// Evaluates the pipeline for fixed weights.
pub fn dmff_fuse<S: Scalar>(
    f_r: &FeatureMap<S>,
    f_t: &FeatureMap<S>,
    cfg: &DmffConfig,
    wts: &DmffWeights<S>,
) -> Result<DmffOutput<S>> {
    let mut g = Graph::new();
    let r = g.input(f_r.clone());
    let t = g.input(f_t.clone());
    let vars = dmff_forward_on(&mut g, r, t, cfg, wts)?;
    Ok(DmffOutput {
        output: g.value(vars.output).clone(),
        enhanced_rgb: vars.enhanced_rgb.map(|v| g.value(v).clone()),
        enhanced_thermal: vars.enhanced_thermal.map(|v| g.value(v).clone()),
    })
}
