//! Multiply-count accounting for the fusion block.
//!
//! Symbolic costs are polynomials in the token count `T` and channel width
//! `C` with integer coefficients. Runtime counters replay the real graph
//! operations and report the multiplies they performed, so the two can be
//! compared as integers.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cfe::{cross_attention_on, ffn_on, CfeParams};
use crate::dmff::{dmff_forward_on, DmffConfig, DmffWeights};
use crate::error::{Error, Result};
use crate::graph::{Graph, MulCounter, MulSite};
use crate::params::Parameters;
use crate::tensor::Tensor;

/// One monomial `coefficient · T^t_pow · C^c_pow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Term {
    pub coefficient: u64,
    pub t_pow: u8,
    pub c_pow: u8,
}

/// A sum of monomials in `T` and `C`, kept in canonical form: like terms
/// merged, zero terms dropped, highest `T` power first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostExpr {
    terms: Vec<Term>,
}

impl CostExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn monomial(coefficient: u64, t_pow: u8, c_pow: u8) -> Self {
        Self::zero().plus(coefficient, t_pow, c_pow)
    }

    /// Adds `coefficient · T^t_pow · C^c_pow`.
    pub fn plus(mut self, coefficient: u64, t_pow: u8, c_pow: u8) -> Self {
        assert!(t_pow <= 2 && c_pow <= 2, "powers are limited to 0..=2");
        if coefficient == 0 {
            return self;
        }
        match self
            .terms
            .iter_mut()
            .find(|t| t.t_pow == t_pow && t.c_pow == c_pow)
        {
            Some(t) => t.coefficient += coefficient,
            None => self.terms.push(Term {
                coefficient,
                t_pow,
                c_pow,
            }),
        }
        self.terms
            .sort_by(|a, b| (b.t_pow, b.c_pow).cmp(&(a.t_pow, a.c_pow)));
        self
    }

    pub fn add(&self, other: &CostExpr) -> CostExpr {
        other
            .terms
            .iter()
            .fold(self.clone(), |acc, t| acc.plus(t.coefficient, t.t_pow, t.c_pow))
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Coefficient of `T^t_pow · C^c_pow`, zero when absent.
    pub fn coefficient(&self, t_pow: u8, c_pow: u8) -> u64 {
        self.terms
            .iter()
            .find(|t| t.t_pow == t_pow && t.c_pow == c_pow)
            .map_or(0, |t| t.coefficient)
    }

    pub fn eval(&self, t: u64, c: u64) -> u128 {
        self.terms
            .iter()
            .map(|m| {
                m.coefficient as u128 * (t as u128).pow(m.t_pow as u32) * (c as u128).pow(m.c_pow as u32)
            })
            .sum()
    }
}

impl fmt::Display for CostExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        fn power(f: &mut fmt::Formatter<'_>, sym: char, p: u8) -> fmt::Result {
            match p {
                0 => Ok(()),
                1 => write!(f, "{sym}"),
                _ => write!(f, "{sym}^{p}"),
            }
        }
        for (i, m) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            if m.coefficient != 1 || (m.t_pow == 0 && m.c_pow == 0) {
                write!(f, "{}", m.coefficient)?;
            }
            power(f, 'T', m.t_pow)?;
            power(f, 'C', m.c_pow)?;
        }
        Ok(())
    }
}

/// Which fusion block is being costed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two cross-attention modules over `T` tokens each.
    Ours,
    /// One self-attention over the `2T` concatenated tokens.
    Cft,
}

impl Variant {
    pub const ALL: [Variant; 2] = [Variant::Ours, Variant::Cft];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Cft => "cft",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Variant::Ours),
            "cft" => Ok(Variant::Cft),
            other => Err(Error::Config(format!("unknown cost variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    /// Query-key score products.
    pub qk: CostExpr,
    /// Score-weighted value sums.
    pub sv: CostExpr,
}

impl AttentionCost {
    pub fn total(&self) -> CostExpr {
        self.qk.add(&self.sv)
    }
}

fn require_positive(pairs: &[(&str, u64)]) -> Result<()> {
    for &(name, v) in pairs {
        if v == 0 {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

/// Attention multiplies; the expressions are symbolic, `t` and `c` only
/// gate the preconditions.
pub fn attention_cost(variant: Variant, t: u64, c: u64) -> Result<AttentionCost> {
    require_positive(&[("T", t), ("C", c)])?;
    let k = match variant {
        Variant::Ours => 2,
        Variant::Cft => 4,
    };
    Ok(AttentionCost {
        qk: CostExpr::monomial(k, 2, 1),
        sv: CostExpr::monomial(k, 2, 1),
    })
}

/// FFN multiplies for hidden width `h`: `4·h·T·C` for both variants.
pub fn ffn_cost(variant: Variant, t: u64, c: u64, h: u64) -> Result<CostExpr> {
    require_positive(&[("T", t), ("C", c), ("h", h)])?;
    let modules_times_tokens = match variant {
        Variant::Ours => 2 * 2,
        Variant::Cft => 2 * 2,
    };
    Ok(CostExpr::monomial(modules_times_tokens * h, 1, 1))
}

/// The complexity table's literal FFN row.
pub fn table_ffn_row(variant: Variant) -> CostExpr {
    match variant {
        Variant::Ours => CostExpr::monomial(8, 1, 2),
        Variant::Cft => CostExpr::monomial(16, 1, 2),
    }
}

/// The complexity table's literal total row.
pub fn table_total_row(variant: Variant) -> CostExpr {
    match variant {
        Variant::Ours => CostExpr::monomial(2, 2, 1).plus(16, 1, 2),
        Variant::Cft => CostExpr::monomial(4, 2, 1).plus(16, 1, 2),
    }
}

/// Multiple of `C` that a `k·T·C²` FFN term implies for the hidden width,
/// given `4·h·T·C` multiplies. `None` when it is not a whole multiple.
pub fn implied_hidden_multiple(ffn_term: &CostExpr) -> Option<u64> {
    let k = ffn_term.coefficient(1, 2);
    (k % 4 == 0 && k > 0).then_some(k / 4)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ShrinkReduction {
    /// `(WH)²·C + 8·WH·C²` with `W`, `H` substituted.
    pub before: CostExpr,
    /// Same with `WH/S` tokens.
    pub after: CostExpr,
}

/// Cost of the full block before and after shrinking the token count by a
/// factor `s`. Both expressions are polynomials in `C` alone.
pub fn shrink_reduction(w: u64, h: u64, c: u64, s: u64) -> Result<ShrinkReduction> {
    require_positive(&[("W", w), ("H", h), ("C", c), ("S", s)])?;
    let tokens = w * h;
    if tokens % s != 0 {
        return Err(Error::Config(format!(
            "shrink factor {s} does not divide the token count {tokens}"
        )));
    }
    let shrunk = tokens / s;
    let cost = |t: u64| CostExpr::monomial(t * t, 0, 1).plus(8 * t, 0, 2);
    Ok(ShrinkReduction {
        before: cost(tokens),
        after: cost(shrunk),
    })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multiplies performed by both cross-attention directions of the dual
/// block over `t` tokens of width `c`.
pub fn count_dual_attention(t: usize, c: usize, heads: usize) -> Result<MulCounter> {
    let mut r = rng(0);
    let p = CfeParams::<f64>::random(c, 1, heads, &mut r)?;
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    let rgb = g.input(Tensor::uniform(&[t, c], 1.0, &mut r));
    let thermal = g.input(Tensor::uniform(&[t, c], 1.0, &mut r));
    cross_attention_on(&mut g, thermal, rgb, &vars)?;
    cross_attention_on(&mut g, rgb, thermal, &vars)?;
    Ok(g.muls().clone())
}

/// Multiplies of one self-attention over the concatenated `2t` tokens.
pub fn count_joint_attention(t: usize, c: usize, heads: usize) -> Result<MulCounter> {
    let mut r = rng(1);
    let p = CfeParams::<f64>::random(c, 1, heads, &mut r)?;
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    let rgb = g.input(Tensor::uniform(&[t, c], 1.0, &mut r));
    let thermal = g.input(Tensor::uniform(&[t, c], 1.0, &mut r));
    let joint = g.concat_rows(&[rgb, thermal])?;
    cross_attention_on(&mut g, joint, joint, &vars)?;
    Ok(g.muls().clone())
}

/// Runtime attention counter for `variant`.
pub fn count_attention(variant: Variant, t: usize, c: usize, heads: usize) -> Result<MulCounter> {
    match variant {
        Variant::Ours => count_dual_attention(t, c, heads),
        Variant::Cft => count_joint_attention(t, c, heads),
    }
}

/// Multiplies of the feed-forward stage: two FFNs over `t` tokens for
/// `Ours`, one over `2t` tokens for `Cft`.
pub fn count_ffn(variant: Variant, t: usize, c: usize, hidden: usize) -> Result<MulCounter> {
    let mut r = rng(2);
    let p = CfeParams::<f64>::random(c, hidden, 1, &mut r)?;
    let mut g = Graph::new();
    let vars = p.bind_const(&mut g);
    match variant {
        Variant::Ours => {
            for _ in 0..2 {
                let x = g.input(Tensor::uniform(&[t, c], 1.0, &mut r));
                ffn_on(&mut g, x, &vars)?;
            }
        }
        Variant::Cft => {
            let x = g.input(Tensor::uniform(&[2 * t, c], 1.0, &mut r));
            ffn_on(&mut g, x, &vars)?;
        }
    }
    Ok(g.muls().clone())
}

/// Multiplies of one full pipeline evaluation under `cfg`.
pub fn count_pipeline(cfg: &DmffConfig) -> Result<MulCounter> {
    let mut r = rng(3);
    let wts = DmffWeights::<f64>::init(cfg, &mut r)?;
    let shape = [cfg.height, cfg.width, cfg.channels];
    let mut g = Graph::new();
    let a = g.input(Tensor::uniform(&shape, 1.0, &mut r));
    let b = g.input(Tensor::uniform(&shape, 1.0, &mut r));
    dmff_forward_on(&mut g, a, b, cfg, &wts)?;
    Ok(g.muls().clone())
}

/// Scalar count of any parameter set.
pub fn param_count<S: crate::tensor::Scalar, P: Parameters<S>>(p: &P) -> usize {
    p.param_count()
}

/// Closed-form scalar count of one CFE module without projection biases.
pub fn cfe_param_formula(c: usize, hidden: usize) -> usize {
    4 * c * c + (c * hidden + hidden) + (hidden * c + c) + 4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub variant: &'static str,
    pub term: &'static str,
    pub expression: String,
    pub value: u128,
    /// Runtime-counted multiplies, where an instrumented counterpart exists.
    pub counted: Option<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub t: u64,
    pub c: u64,
    pub h: u64,
    pub rows: Vec<AuditRow>,
    pub notes: Vec<String>,
}

impl AuditReport {
    /// True when every runtime count agrees with its symbolic value.
    pub fn counts_agree(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.counted.map_or(true, |n| n as u128 == r.value))
    }

    pub fn to_text(&self) -> String {
        let header = ["variant", "term", "expression", "value", "counted"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.variant.to_string(),
                    r.term.to_string(),
                    r.expression.clone(),
                    r.value.to_string(),
                    r.counted.map_or("-".into(), |n| n.to_string()),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("T={} C={} h={}\n", self.t, self.c, self.h);
        let line = |out: &mut String, cols: [&str; 5]| {
            let parts: Vec<String> = cols
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (s, w))| {
                    if i >= 3 {
                        format!("{s:>w$}")
                    } else {
                        format!("{s:<w$}")
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(&mut out, header);
        for row in &cells {
            line(&mut out, [&row[0], &row[1], &row[2], &row[3], &row[4]]);
        }
        for note in &self.notes {
            out.push_str("note: ");
            out.push_str(note);
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,term,expression,value,counted\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant,
                r.term,
                r.expression,
                r.value,
                r.counted.map_or(String::new(), |n| n.to_string())
            ));
        }
        out
    }
}

/// Builds the comparison table at concrete `(T, C, h)`.
///
/// Runtime counts use a single head; multiply counts do not depend on the
/// head split.
pub fn audit(t: u64, c: u64, h: u64) -> Result<AuditReport> {
    require_positive(&[("T", t), ("C", c), ("h", h)])?;
    let mut rows = Vec::new();
    let (tu, cu, hu) = (t as usize, c as usize, h as usize);
    for variant in Variant::ALL {
        let att = attention_cost(variant, t, c)?;
        let ffn = ffn_cost(variant, t, c, h)?;
        let counted_att = count_attention(variant, tu, cu, 1)?;
        let counted_ffn = count_ffn(variant, tu, cu, hu)?;
        let mut row = |term: &'static str, e: &CostExpr, counted: Option<u64>| {
            rows.push(AuditRow {
                variant: variant.name(),
                term,
                expression: e.to_string(),
                value: e.eval(t, c),
                counted,
            })
        };
        row("qk", &att.qk, Some(counted_att.get(MulSite::Scores)));
        row("sv", &att.sv, Some(counted_att.get(MulSite::Values)));
        row("ffn", &ffn, Some(counted_ffn.get(MulSite::Ffn)));
        row("ffn_table_row", &table_ffn_row(variant), None);
        row("total", &att.total().add(&ffn), None);
        row("total_table_row", &table_total_row(variant), None);
    }

    let mut notes = Vec::new();
    notes.push("costs count scalar multiplications in matrix products only".to_string());
    for variant in Variant::ALL {
        let from_row = implied_hidden_multiple(&table_ffn_row(variant));
        let total = table_total_row(variant);
        let from_total = implied_hidden_multiple(&CostExpr::monomial(total.coefficient(1, 2), 1, 2));
        let show = |m: Option<u64>| m.map_or("none".to_string(), |k| format!("h={k}C"));
        if from_row != from_total {
            notes.push(format!(
                "{}: table FFN row implies {} but table total implies {}; inconsistent",
                variant.name(),
                show(from_row),
                show(from_total)
            ));
        } else {
            notes.push(format!(
                "{}: table FFN row and total both imply {}",
                variant.name(),
                show(from_row)
            ));
        }
    }
    Ok(AuditReport { t, c, h, rows, notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        assert_eq!(attention_cost(Variant::Ours, 1, 1).unwrap().qk.eval(1, 1), 2);
        assert_eq!(attention_cost(Variant::Cft, 1, 1).unwrap().qk.eval(1, 1), 4);
        let ours = attention_cost(Variant::Ours, 10, 3).unwrap();
        assert_eq!(ours.qk.eval(10, 3), 600);
    }

    #[test]
    fn ffn_hidden_choices_reproduce_table_rows() {
        let c = 7;
        assert_eq!(
            ffn_cost(Variant::Cft, 3, c, 4 * c).unwrap().eval(3, c),
            table_ffn_row(Variant::Cft).eval(3, c)
        );
        assert_eq!(
            ffn_cost(Variant::Ours, 3, c, 2 * c).unwrap().eval(3, c),
            table_ffn_row(Variant::Ours).eval(3, c)
        );
        assert_eq!(ffn_cost(Variant::Ours, 5, 4, 8).unwrap().eval(5, 4), 640);
    }

    #[test]
    fn implied_hidden_widths() {
        assert_eq!(implied_hidden_multiple(&table_ffn_row(Variant::Ours)), Some(2));
        assert_eq!(implied_hidden_multiple(&table_ffn_row(Variant::Cft)), Some(4));
        let report = audit(4, 8, 32).unwrap();
        assert!(report
            .notes
            .iter()
            .any(|n| n.starts_with("ours") && n.contains("h=2C") && n.contains("h=4C")));
    }

    #[test]
    fn display_and_merge() {
        let e = CostExpr::monomial(16, 1, 2).plus(2, 2, 1).plus(0, 0, 0);
        assert_eq!(e.to_string(), "2T^2C + 16TC^2");
        assert_eq!(e.add(&e).coefficient(2, 1), 4);
        assert_eq!(CostExpr::zero().to_string(), "0");
        assert_eq!(CostExpr::monomial(1, 0, 0).to_string(), "1");
    }

    #[test]
    fn unknown_variant_and_bad_extents() {
        assert!("transformer".parse::<Variant>().is_err());
        assert_eq!("CFT".parse::<Variant>().unwrap(), Variant::Cft);
        assert!(attention_cost(Variant::Ours, 0, 4).is_err());
        assert!(ffn_cost(Variant::Ours, 1, 1, 0).is_err());
    }

    #[test]
    fn shrink_examples() {
        let same = shrink_reduction(8, 8, 4, 1).unwrap();
        assert_eq!(same.before, same.after);
        let r = shrink_reduction(8, 8, 4, 4).unwrap();
        assert_eq!(r.before.coefficient(0, 1), 16 * r.after.coefficient(0, 1));
        assert_eq!(r.before.coefficient(0, 2), 4 * r.after.coefficient(0, 2));
        let r = shrink_reduction(16, 16, 8, 4).unwrap();
        let before = 256u128 * 256 * 8 + 8 * 256 * 64;
        let after = 64u128 * 64 * 8 + 8 * 64 * 64;
        assert_eq!((r.before.eval(0, 8), r.after.eval(0, 8)), (before, after));
        assert!(shrink_reduction(3, 3, 4, 2).is_err());
    }

    #[test]
    fn ffn_counter_matches() {
        for v in Variant::ALL {
            assert_eq!(count_ffn(v, 5, 4, 8).unwrap().get(MulSite::Ffn), 640);
        }
    }

    #[test]
    fn cfe_formula_matches_enumeration() {
        let p = CfeParams::<f64>::random(16, 64, 8, &mut rng(0)).unwrap();
        assert_eq!(p.param_count(), 3156);
        assert_eq!(cfe_param_formula(16, 64), 3156);
    }

    #[test]
    fn report_renders() {
        let r = audit(4, 8, 16).unwrap();
        assert!(r.counts_agree());
        let text = r.to_text();
        assert!(text.contains("ours") && text.contains("2T^2C"));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 1 + r.rows.len());
    }
}
