//! The algebraically-constrained normalized convolution layer.
//!
//! A layer carries unconstrained raw weights; the applicability actually
//! applied to the signal is `gamma(raw)` (softplus), which is strictly
//! positive, so the data path computes a confidence-weighted mean of the
//! inputs under its window and the confidence path propagates a matching
//! reliability estimate from the same accumulated denominator.
//!
//! [`nconv_backward`] is the hand-derived exact gradient of that forward
//! map, through both the data path and the confidence path, including the
//! softplus chain factor on the raw weights.
//!
//! [`nc_oracle`] and [`conf_oracle`] are slow per-patch reference
//! implementations of the general-basis formulation and the determinant-
//! ratio confidence measure; the layer must agree with them in the
//! constant-basis case, and the test suites hold it to that.

use crate::error::{NcError, Result};
use crate::rng::SeededRng;
use crate::tensor::{SignalPair, Tensor4, WeightBank};

/// Confidences may exceed 1 by accumulated epsilon terms when layers are
/// chained; inputs are accepted up to this slack.
pub const CONF_SLACK: f64 = 1e-6;

/// Strictly positive floor applied to the softplus output so platform
/// flush-to-zero can never produce an exactly zero applicability.
pub const GAMMA_FLOOR: f64 = 1e-30;

/// Softplus `ln(1 + e^x)` in branch form, floored away from zero.
pub fn gamma(x: f64) -> f64 {
    let v = if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    };
    v.max(GAMMA_FLOOR)
}

/// Derivative of [`gamma`]: the logistic function.
pub fn gamma_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One constrained layer: raw weights, a per-output-channel bias on the
/// data path, and the epsilon guarding the normalization denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct NConvLayer {
    pub weights: WeightBank,
    pub bias: Vec<f64>,
    pub epsilon: f64,
}

impl NConvLayer {
    /// Layer with raw weights drawn uniformly from [-1, 1] and zero biases.
    pub fn new_seeded(
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        epsilon: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut weights = WeightBank::zeros(out_ch, in_ch, kh, kw)?;
        for v in weights.values_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        Self::from_parts(weights, vec![0.0; out_ch], epsilon)
    }

    pub fn from_parts(weights: WeightBank, bias: Vec<f64>, epsilon: f64) -> Result<Self> {
        if weights.kh.is_multiple_of(2) || weights.kw.is_multiple_of(2) {
            return Err(NcError::Invalid(format!(
                "nconv kernel must be odd, got {}x{}",
                weights.kh, weights.kw
            )));
        }
        if bias.len() != weights.out_ch {
            return Err(NcError::Shape(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                weights.out_ch
            )));
        }
        if epsilon.is_nan() || epsilon < 0.0 {
            return Err(NcError::Invalid(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if let Some(b) = bias.iter().find(|b| !b.is_finite()) {
            return Err(NcError::NonFinite(format!("bias value {b}")));
        }
        Ok(NConvLayer {
            weights,
            bias,
            epsilon,
        })
    }

    pub fn in_ch(&self) -> usize {
        self.weights.in_ch
    }

    pub fn out_ch(&self) -> usize {
        self.weights.out_ch
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.kh, self.weights.kw)
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// The constrained applicability `gamma(raw)`.
    pub fn gamma_bank(&self) -> WeightBank {
        self.weights.map(gamma)
    }
}

/// Forward intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub(crate) z_prev: Tensor4,
    pub(crate) c_prev: Tensor4,
    pub(crate) gamma_w: WeightBank,
    pub(crate) num: Tensor4,
    pub(crate) den: Tensor4,
    pub(crate) sum_gamma: Vec<f64>,
}

fn validate_pair(z_prev: &Tensor4, c_prev: &Tensor4, layer: &NConvLayer) -> Result<()> {
    if !z_prev.same_shape(c_prev) {
        return Err(NcError::Shape(format!(
            "signal {:?} vs confidence {:?}",
            z_prev.shape(),
            c_prev.shape()
        )));
    }
    if z_prev.channels() != layer.in_ch() {
        return Err(NcError::Shape(format!(
            "input has {} channels, layer expects {}",
            z_prev.channels(),
            layer.in_ch()
        )));
    }
    if let Some(&c) = c_prev
        .values()
        .iter()
        .find(|&&c| !(0.0..=1.0 + CONF_SLACK).contains(&c))
    {
        return Err(NcError::Invalid(format!(
            "confidence {c} outside [0, 1] (+{CONF_SLACK} slack for chained layers)"
        )));
    }
    Ok(())
}

/// Normalized convolution forward pass.
///
/// Per output pixel and channel the data value is the gamma-weighted,
/// confidence-weighted mean of the window (plus bias) and the confidence
/// is `(sum(c * gamma) + eps) / sum(gamma)`, reusing the data-path
/// denominator. Padding is zero data with zero confidence, so padded
/// values can never influence the output. A window with zero accumulated
/// confidence and `eps = 0` yields `bias` as data and confidence 0.
#[allow(clippy::needless_range_loop)]
pub fn nconv_forward(
    z_prev: &Tensor4,
    c_prev: &Tensor4,
    layer: &NConvLayer,
) -> Result<(SignalPair, LayerCache)> {
    validate_pair(z_prev, c_prev, layer)?;
    let (n, in_ch, h, w) = z_prev.shape();
    let (kh, kw) = layer.kernel();
    let (ph, pw) = (kh / 2, kw / 2);
    let out_ch = layer.out_ch();
    let eps = layer.epsilon;

    let gamma_w = layer.gamma_bank();
    let sum_gamma: Vec<f64> = (0..out_ch)
        .map(|o| gamma_w.filter(o).iter().sum())
        .collect();

    let mut num = Tensor4::zeros(n, out_ch, h, w)?;
    let mut den = Tensor4::zeros(n, out_ch, h, w)?;
    let hw = h * w;

    for b in 0..n {
        for o in 0..out_ch {
            let base = (b * out_ch + o) * hw;
            for ci in 0..in_ch {
                let zp = z_prev.plane(b, ci);
                let cp = c_prev.plane(b, ci);
                for m in 0..kh {
                    // source row si = i + m - ph must land in [0, h)
                    let i_lo = ph.saturating_sub(m);
                    let i_hi = (h + ph).saturating_sub(m).min(h);
                    for nk in 0..kw {
                        let g = gamma_w.get(o, ci, m, nk);
                        let j_lo = pw.saturating_sub(nk);
                        let j_hi = (w + pw).saturating_sub(nk).min(w);
                        for i in i_lo..i_hi {
                            let si = i + m - ph;
                            let src = si * w;
                            let dst = base + i * w;
                            for j in j_lo..j_hi {
                                let sj = j + nk - pw;
                                let c_v = cp[src + sj];
                                num.values_mut()[dst + j] += zp[src + sj] * c_v * g;
                                den.values_mut()[dst + j] += c_v * g;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut z_out = Tensor4::zeros(n, out_ch, h, w)?;
    let mut c_out = Tensor4::zeros(n, out_ch, h, w)?;
    for b in 0..n {
        for o in 0..out_ch {
            let base = (b * out_ch + o) * hw;
            let bias = layer.bias[o];
            let s = sum_gamma[o];
            for k in base..base + hw {
                let d = den.values()[k] + eps;
                z_out.values_mut()[k] = if d > 0.0 {
                    num.values()[k] / d + bias
                } else {
                    bias
                };
                c_out.values_mut()[k] = d / s;
            }
        }
    }

    let cache = LayerCache {
        z_prev: z_prev.clone(),
        c_prev: c_prev.clone(),
        gamma_w,
        num,
        den,
        sum_gamma,
    };
    Ok((SignalPair::new(z_out, c_out)?, cache))
}

/// Gradients produced by [`nconv_backward`].
#[derive(Debug, Clone)]
pub struct NConvGrads {
    pub z_prev: Tensor4,
    pub c_prev: Tensor4,
    pub w_raw: WeightBank,
    pub bias: Vec<f64>,
}

/// Exact analytic backward pass for [`nconv_forward`].
///
/// Gradients flow through both outputs: the data quotient and the
/// propagated confidence. Raw-weight gradients carry the softplus chain
/// factor. At pixels where the forward denominator was exactly zero
/// (possible only with `eps = 0`) the data output is the constant `bias`,
/// so the quotient contributes nothing there; the confidence path is
/// linear in the window confidences and keeps its gradient.
#[allow(clippy::needless_range_loop)]
pub fn nconv_backward(
    grad_z: &Tensor4,
    grad_c: &Tensor4,
    cache: &LayerCache,
    layer: &NConvLayer,
) -> Result<NConvGrads> {
    if !grad_z.same_shape(&cache.num) || !grad_c.same_shape(&cache.num) {
        return Err(NcError::Shape(format!(
            "output gradients {:?}/{:?} do not match forward output {:?}",
            grad_z.shape(),
            grad_c.shape(),
            cache.num.shape()
        )));
    }
    if cache.gamma_w.shape() != layer.weights.shape()
        || cache.z_prev.channels() != layer.in_ch()
        || cache.sum_gamma.len() != layer.out_ch()
    {
        return Err(NcError::Shape(
            "cache does not match this layer (was it produced by the same forward call?)".into(),
        ));
    }

    let (n, in_ch, h, w) = cache.z_prev.shape();
    let (kh, kw) = layer.kernel();
    let (ph, pw) = (kh / 2, kw / 2);
    let out_ch = layer.out_ch();
    let eps = layer.epsilon;
    let hw = h * w;

    // Per-pixel sensitivities of the two accumulated sums:
    //   gn = dL/d(num), gd = dL/d(den)
    let mut gn_buf = vec![0.0f64; n * out_ch * hw];
    let mut gd_buf = vec![0.0f64; n * out_ch * hw];
    let mut grad_sum_gamma = vec![0.0f64; out_ch];
    let mut grad_bias = vec![0.0f64; out_ch];

    for b in 0..n {
        for o in 0..out_ch {
            let base = (b * out_ch + o) * hw;
            let s = cache.sum_gamma[o];
            let mut g_s = 0.0;
            let mut g_b = 0.0;
            for k in base..base + hw {
                let gz = grad_z.values()[k];
                let gc = grad_c.values()[k];
                let d = cache.den.values()[k] + eps;
                g_b += gz;
                let (gn, gd_data) = if d > 0.0 {
                    (gz / d, -gz * cache.num.values()[k] / (d * d))
                } else {
                    (0.0, 0.0)
                };
                gn_buf[k] = gn;
                gd_buf[k] = gd_data + gc / s;
                g_s -= gc * d / (s * s);
            }
            grad_sum_gamma[o] += g_s;
            grad_bias[o] += g_b;
        }
    }

    let mut grad_z_prev = Tensor4::zeros(n, in_ch, h, w)?;
    let mut grad_c_prev = Tensor4::zeros(n, in_ch, h, w)?;
    let mut grad_gamma = WeightBank::zeros(out_ch, in_ch, kh, kw)?;

    for b in 0..n {
        for o in 0..out_ch {
            let base = (b * out_ch + o) * hw;
            for ci in 0..in_ch {
                let zp = cache.z_prev.plane(b, ci);
                let cp = cache.c_prev.plane(b, ci);
                let in_base = (b * in_ch + ci) * hw;
                for m in 0..kh {
                    let i_lo = ph.saturating_sub(m);
                    let i_hi = (h + ph).saturating_sub(m).min(h);
                    for nk in 0..kw {
                        let g = cache.gamma_w.get(o, ci, m, nk);
                        let j_lo = pw.saturating_sub(nk);
                        let j_hi = (w + pw).saturating_sub(nk).min(w);
                        let mut acc_w = 0.0;
                        for i in i_lo..i_hi {
                            let si = i + m - ph;
                            let src = si * w;
                            let dst = base + i * w;
                            for j in j_lo..j_hi {
                                let sj = j + nk - pw;
                                let gn = gn_buf[dst + j];
                                let gd = gd_buf[dst + j];
                                let z_v = zp[src + sj];
                                let c_v = cp[src + sj];
                                grad_z_prev.values_mut()[in_base + src + sj] += gn * c_v * g;
                                grad_c_prev.values_mut()[in_base + src + sj] += (gn * z_v + gd) * g;
                                acc_w += (gn * z_v + gd) * c_v;
                            }
                        }
                        let k = grad_gamma.idx(o, ci, m, nk);
                        grad_gamma.values_mut()[k] += acc_w;
                    }
                }
            }
        }
    }

    // sum_gamma = sum over all taps of gamma, so its gradient lands on
    // every tap of the filter; then chain through softplus.
    let mut w_raw = WeightBank::zeros(out_ch, in_ch, kh, kw)?;
    for o in 0..out_ch {
        let patch = in_ch * kh * kw;
        for p in 0..patch {
            let k = o * patch + p;
            let total = grad_gamma.values()[k] + grad_sum_gamma[o];
            w_raw.values_mut()[k] = total * gamma_prime(layer.weights.values()[k]);
        }
    }

    Ok(NConvGrads {
        z_prev: grad_z_prev,
        c_prev: grad_c_prev,
        w_raw,
        bias: grad_bias,
    })
}

/// A set of basis vectors for the general-basis reference oracle, stored
/// column-major: `m` columns of length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    n: usize,
    m: usize,
    cols: Vec<f64>,
}

impl BasisMatrix {
    /// The constant basis `B = [1]`: normalized averaging.
    pub fn constant(n: usize) -> Self {
        BasisMatrix {
            n,
            m: 1,
            cols: vec![1.0; n],
        }
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        if m == 0 {
            return Err(NcError::Invalid("basis needs at least one column".into()));
        }
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(NcError::Shape("basis columns must share one length".into()));
        }
        if m > n {
            return Err(NcError::Invalid(format!(
                "basis has {m} columns but patches only have {n} samples"
            )));
        }
        let cols: Vec<f64> = columns.iter().flat_map(|c| c.iter().copied()).collect();
        if cols.iter().any(|v| !v.is_finite()) {
            return Err(NcError::NonFinite("basis values".into()));
        }
        Ok(BasisMatrix { n, m, cols })
    }

    pub fn patch_len(&self) -> usize {
        self.n
    }

    pub fn basis_count(&self) -> usize {
        self.m
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }
}

fn validate_patch(what: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(NcError::Shape(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

fn grammian(basis: &BasisMatrix, weights: &[f64]) -> Vec<f64> {
    let m = basis.m;
    let mut g = vec![0.0f64; m * m];
    for p in 0..m {
        for q in p..m {
            let bp = basis.col(p);
            let bq = basis.col(q);
            let mut acc = 0.0;
            for i in 0..basis.n {
                acc += bp[i] * weights[i] * bq[i];
            }
            g[p * m + q] = acc;
            g[q * m + p] = acc;
        }
    }
    g
}

/// Gaussian elimination with partial pivoting; `None` means singular at
/// the relative pivot threshold.
fn solve_dense(mut g: Vec<f64>, mut rhs: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    let scale = g.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    for k in 0..m {
        let mut piv = k;
        for r in k + 1..m {
            if g[r * m + k].abs() > g[piv * m + k].abs() {
                piv = r;
            }
        }
        if g[piv * m + k].abs() <= 1e-12 * scale {
            return None;
        }
        if piv != k {
            for c in 0..m {
                g.swap(k * m + c, piv * m + c);
            }
            rhs.swap(k, piv);
        }
        for r in k + 1..m {
            let f = g[r * m + k] / g[k * m + k];
            for c in k..m {
                g[r * m + c] -= f * g[k * m + c];
            }
            rhs[r] -= f * rhs[k];
        }
    }
    for k in (0..m).rev() {
        let mut acc = rhs[k];
        for c in k + 1..m {
            acc -= g[k * m + c] * rhs[c];
        }
        rhs[k] = acc / g[k * m + k];
    }
    Some(rhs)
}

/// Determinant by LU with partial pivoting.
fn det_dense(mut g: Vec<f64>, m: usize) -> f64 {
    let mut det = 1.0;
    for k in 0..m {
        let mut piv = k;
        for r in k + 1..m {
            if g[r * m + k].abs() > g[piv * m + k].abs() {
                piv = r;
            }
        }
        if g[piv * m + k] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for c in 0..m {
                g.swap(k * m + c, piv * m + c);
            }
            det = -det;
        }
        det *= g[k * m + k];
        for r in k + 1..m {
            let f = g[r * m + k] / g[k * m + k];
            for c in k..m {
                g[r * m + c] -= f * g[k * m + c];
            }
        }
    }
    det
}

/// General-basis normalized convolution on one patch: solves
/// `(B* Da Dc B) r = B* Da Dc f` for the projection coefficients `r`.
///
/// With the constant basis this reduces to the confidence-weighted mean
/// `sum(a c f) / sum(a c)`.
pub fn nc_oracle(f: &[f64], c: &[f64], a: &[f64], basis: &BasisMatrix) -> Result<Vec<f64>> {
    let n = basis.patch_len();
    validate_patch("signal patch", f, n)?;
    validate_patch("confidence patch", c, n)?;
    validate_patch("applicability patch", a, n)?;
    if a.iter().any(|&v| v < 0.0) {
        return Err(NcError::Invalid("applicability must be non-negative".into()));
    }
    if c.iter().any(|&v| !(0.0..=1.0 + CONF_SLACK).contains(&v)) {
        return Err(NcError::Invalid("confidence must lie in [0, 1]".into()));
    }
    let m = basis.basis_count();
    let ac: Vec<f64> = a.iter().zip(c).map(|(&av, &cv)| av * cv).collect();
    let g = grammian(basis, &ac);
    let mut rhs = vec![0.0f64; m];
    for (p, r) in rhs.iter_mut().enumerate() {
        let bp = basis.col(p);
        *r = (0..n).map(|i| bp[i] * ac[i] * f[i]).sum();
    }
    solve_dense(g, rhs, m).ok_or_else(|| {
        NcError::InsufficientSupport(format!(
            "Grammian is singular for this {m}-basis patch (confident mass {:.3e})",
            ac.iter().sum::<f64>()
        ))
    })
}

/// Determinant-ratio confidence measure `(det G / det G0)^(1/m)` with
/// `G = B* Da Dc B` and `G0 = B* Da B`. For the constant basis this is
/// `sum(a c) / sum(a)`.
pub fn conf_oracle(c: &[f64], a: &[f64], basis: &BasisMatrix) -> Result<f64> {
    let n = basis.patch_len();
    validate_patch("confidence patch", c, n)?;
    validate_patch("applicability patch", a, n)?;
    if a.iter().any(|&v| v < 0.0) {
        return Err(NcError::Invalid("applicability must be non-negative".into()));
    }
    if c.iter().any(|&v| !(0.0..=1.0 + CONF_SLACK).contains(&v)) {
        return Err(NcError::Invalid("confidence must lie in [0, 1]".into()));
    }
    let m = basis.basis_count();
    let ac: Vec<f64> = a.iter().zip(c).map(|(&av, &cv)| av * cv).collect();
    let det_g = det_dense(grammian(basis, &ac), m);
    let det_g0 = det_dense(grammian(basis, a), m);
    if det_g0 <= 0.0 {
        return Err(NcError::DegenerateBasis(format!(
            "full-confidence Grammian determinant {det_g0} is not positive"
        )));
    }
    // det G >= 0 in exact arithmetic (G is positive semidefinite); tiny
    // negative rounding residue is clipped.
    Ok((det_g.max(0.0) / det_g0).powf(1.0 / m as f64))
}
