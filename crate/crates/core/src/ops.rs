//! Forward kernels and their adjoints.
//!
//! Every function here is a pure map between tensors. The tape in
//! [`crate::graph`] records which kernel produced each value and calls the
//! matching `*_backward` function during the reverse sweep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar, Tensor};

/// `a[M×K] · b[K×N]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[M×K] · b[N×K]ᵀ`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a[K×M]ᵀ · b[K×N]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Adjoint of [`matmul`]: `(dA, dB) = (dC·Bᵀ, Aᵀ·dC)`.
pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    dc: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((matmul_nt(dc, b)?, matmul_tn(a, dc)?))
}

/// Adjoint of [`matmul_nt`]: `C = A·Bᵀ` gives `dA = dC·B`, `dB = dCᵀ·A`.
pub fn matmul_nt_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    dc: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((matmul(dc, b)?, matmul_tn(dc, a)?))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<S: Scalar>(m: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = m.dims2()?;
    let mut out = m.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let peak = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - peak).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(&[r, c], out)
}

/// Adjoint of [`softmax_rows`] given its output `y`: `dx = y ⊙ (dy − ⟨dy, y⟩_row)`.
pub fn softmax_rows_backward<S: Scalar>(y: &Tensor<S>, dy: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = y.dims2()?;
    if dy.shape() != y.shape() {
        return Err(Error::dim("softmax_rows_backward", y.shape(), dy.shape()));
    }
    let mut out = Vec::with_capacity(r * c);
    for (yr, dr) in y.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
        let dot: S = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(dr).map(|(&yv, &dv)| yv * (dv - dot)));
    }
    Tensor::new(&[r, c], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "window {s} must divide the spatial extents {h}x{w}"
        )));
    }
    Ok(())
}

/// Non-overlapping `s×s` pooling of an `H×W×C` map.
///
/// For max pooling the second value holds, per output element, the flat
/// input index that won (first row-major maximum on ties).
pub fn pool2d<S: Scalar>(
    map: &FeatureMap<S>,
    s: usize,
    kind: PoolKind,
) -> Result<(FeatureMap<S>, Option<Vec<usize>>)> {
    let (h, w, c) = map.dims3()?;
    check_divisible(h, w, s)?;
    let (ho, wo) = (h / s, w / s);
    let d = map.data();
    let mut out = Vec::with_capacity(ho * wo * c);
    let mut arg = match kind {
        PoolKind::Max => Some(Vec::with_capacity(ho * wo * c)),
        PoolKind::Avg => None,
    };
    let inv = S::lit(1.0 / (s * s) as f64);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut acc = S::zero();
                let mut best = S::neg_infinity();
                let mut best_at = usize::MAX;
                for dy in 0..s {
                    for dx in 0..s {
                        let idx = ((oy * s + dy) * w + ox * s + dx) * c + ch;
                        let v = d[idx];
                        acc = acc + v;
                        if best_at == usize::MAX || v > best {
                            best = v;
                            best_at = idx;
                        }
                    }
                }
                match kind {
                    PoolKind::Avg => out.push(acc * inv),
                    PoolKind::Max => {
                        out.push(best);
                        arg.as_mut().unwrap().push(best_at);
                    }
                }
            }
        }
    }
    Ok((Tensor::new(&[ho, wo, c], out)?, arg))
}

/// Adjoint of [`pool2d`]. `argmax` must be the index vector the forward
/// max pass returned.
pub fn pool2d_backward<S: Scalar>(
    input_shape: &[usize],
    dy: &FeatureMap<S>,
    s: usize,
    kind: PoolKind,
    argmax: Option<&[usize]>,
) -> Result<FeatureMap<S>> {
    let mut dx = Tensor::zeros(input_shape);
    let (h, w, c) = dx.dims3()?;
    check_divisible(h, w, s)?;
    let (ho, wo) = (h / s, w / s);
    if dy.shape() != [ho, wo, c] {
        return Err(Error::dim("pool2d_backward", &[ho, wo, c], dy.shape()));
    }
    let g = dy.data();
    let out = dx.data_mut();
    match kind {
        PoolKind::Avg => {
            let inv = S::lit(1.0 / (s * s) as f64);
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let share = g[(oy * wo + ox) * c + ch] * inv;
                        for dy_ in 0..s {
                            for dx_ in 0..s {
                                let idx = ((oy * s + dy_) * w + ox * s + dx_) * c + ch;
                                out[idx] = out[idx] + share;
                            }
                        }
                    }
                }
            }
        }
        PoolKind::Max => {
            let arg = argmax.ok_or_else(|| {
                Error::State("max pooling adjoint needs the forward argmax".into())
            })?;
            for (&src, &gv) in arg.iter().zip(g) {
                out[src] = out[src] + gv;
            }
        }
    }
    Ok(dx)
}

/// Sampling taps along one axis for align-corners-false bilinear resizing:
/// `(low index, high index, weight of high)`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if lo == n_in - 1 { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize of an `H×W×C` map (align-corners-false, edge clamped).
pub fn bilinear_resize<S: Scalar>(
    map: &FeatureMap<S>,
    h_out: usize,
    w_out: usize,
) -> Result<FeatureMap<S>> {
    let (h, w, c) = map.dims3()?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::Config("resize target extents must be positive".into()));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(map.clone());
    }
    let ty = bilinear_taps(h, h_out);
    let tx = bilinear_taps(w, w_out);
    let d = map.data();
    let mut out = Vec::with_capacity(h_out * w_out * c);
    for &(y0, y1, fy) in &ty {
        let (fy, gy) = (S::lit(fy), S::lit(1.0 - fy));
        for &(x0, x1, fx) in &tx {
            let (fx, gx) = (S::lit(fx), S::lit(1.0 - fx));
            for ch in 0..c {
                let at = |y: usize, x: usize| d[(y * w + x) * c + ch];
                let top = gx * at(y0, x0) + fx * at(y0, x1);
                let bottom = gx * at(y1, x0) + fx * at(y1, x1);
                out.push(gy * top + fy * bottom);
            }
        }
    }
    Tensor::new(&[h_out, w_out, c], out)
}

/// Adjoint of [`bilinear_resize`]: scatters each output gradient back to its
/// four taps with the forward weights.
pub fn bilinear_resize_backward<S: Scalar>(
    input_shape: &[usize],
    dy: &FeatureMap<S>,
) -> Result<FeatureMap<S>> {
    let (h_out, w_out, c_out) = dy.dims3()?;
    let mut dx = Tensor::zeros(input_shape);
    let (h, w, c) = dx.dims3()?;
    if c != c_out {
        return Err(Error::dim("bilinear_resize_backward", input_shape, dy.shape()));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(dy.clone());
    }
    let ty = bilinear_taps(h, h_out);
    let tx = bilinear_taps(w, w_out);
    let g = dy.data();
    let out = dx.data_mut();
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let (fy, gy) = (S::lit(fy), S::lit(1.0 - fy));
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let (fx, gx) = (S::lit(fx), S::lit(1.0 - fx));
            for ch in 0..c {
                let gv = g[(oy * w_out + ox) * c + ch];
                for (y, wy) in [(y0, gy), (y1, fy)] {
                    for (x, wx) in [(x0, gx), (x1, fx)] {
                        let idx = (y * w + x) * c + ch;
                        out[idx] = out[idx] + gv * wy * wx;
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Moves each `s×s×C` block into the channel axis, flattening the block
/// row-major over `(dy, dx, c)`: `[H, W, C] -> [H/s, W/s, s²·C]`.
pub fn space_to_depth<S: Scalar>(map: &FeatureMap<S>, s: usize) -> Result<FeatureMap<S>> {
    let (h, w, c) = map.dims3()?;
    check_divisible(h, w, s)?;
    let (ho, wo) = (h / s, w / s);
    let d = map.data();
    let mut out = Vec::with_capacity(d.len());
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..s {
                for dx in 0..s {
                    let base = ((oy * s + dy) * w + ox * s + dx) * c;
                    out.extend_from_slice(&d[base..base + c]);
                }
            }
        }
    }
    Tensor::new(&[ho, wo, s * s * c], out)
}

/// Inverse of [`space_to_depth`]; also its adjoint, since the forward map is
/// a permutation.
pub fn depth_to_space<S: Scalar>(map: &FeatureMap<S>, s: usize) -> Result<FeatureMap<S>> {
    let (ho, wo, cs) = map.dims3()?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::Config(format!(
            "channel extent {cs} is not a multiple of {s}²"
        )));
    }
    let c = cs / (s * s);
    let (h, w) = (ho * s, wo * s);
    let d = map.data();
    let mut out = vec![S::zero(); d.len()];
    let mut src = 0;
    for oy in 0..ho {
        for ox in 0..wo {
            for dy in 0..s {
                for dx in 0..s {
                    let base = ((oy * s + dy) * w + ox * s + dx) * c;
                    out[base..base + c].copy_from_slice(&d[src..src + c]);
                    src += c;
                }
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
