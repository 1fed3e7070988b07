//! Tape-free numeric kernels shared by the differentiable ops and by
//! inference-only forward passes.

/// `C = op(A) · op(B)` for row-major operands; `op` optionally transposes.
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut out);
    out
}

/// Adds `bias` (length `cols`) to every row in place.
pub fn add_row_bias(x: &mut [f64], cols: usize, bias: &[f64]) {
    for row in x.chunks_mut(cols) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Softmax over the axis described by `(outer, n, inner)`, max-shifted.
pub fn softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                out[at(j)] /= s;
            }
        }
    }
    out
}

/// Log-sum-exp reduction over the `(outer, n, inner)` axis.
pub fn logsumexp(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut m = f64::NEG_INFINITY;
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            let s: f64 = (0..n).map(|j| (x[at(j)] - m).exp()).sum();
            out[o * inner + i] = m + s.ln();
        }
    }
    out
}

pub fn log_softmax(x: &[f64], outer: usize, n: usize, inner: usize) -> Vec<f64> {
    let lse = logsumexp(x, outer, n, inner);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..n {
            for i in 0..inner {
                let at = o * n * inner + j * inner + i;
                out[at] = x[at] - lse[o * inner + i];
            }
        }
    }
    out
}

/// Row-wise softmax of a `rows×cols` matrix.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    softmax(x, x.len() / cols, cols, 1)
}

/// Squared-norm floor inside l2 normalization.
pub const L2_EPS: f64 = 1e-24;

/// Returns the normalized array and the per-slice norms.
pub fn l2_normalize(x: &[f64], outer: usize, n: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut norms = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let ss: f64 = (0..n).map(|j| x[at(j)] * x[at(j)]).sum();
            let r = (ss + L2_EPS).sqrt();
            norms[o * inner + i] = r;
            for j in 0..n {
                out[at(j)] = x[at(j)] / r;
            }
        }
    }
    (out, norms)
}

/// Closed-form log-similarity between two diagonal Gaussians, evaluated for
/// every (row of A, row of B) pair by [`pair_scores`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairKernel {
    /// `log ∫ p^ρ q^ρ`; ρ = 1 is the expected likelihood kernel, ρ = ½ the
    /// Bhattacharyya kernel.
    Ppk(f64),
    /// `-KL(p ‖ q)`.
    NegKl,
    /// `-W2(p, q)`.
    NegW2,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `[n, k]` scores between Gaussians `(ma, va)` (`n × d`) and `(mb, vb)`
/// (`k × d`).
pub fn pair_scores(kind: PairKernel, ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64], d: usize) -> Vec<f64> {
    let n = ma.len() / d;
    let k = mb.len() / d;
    let la: Vec<f64> = va.iter().map(|v| v.ln()).collect();
    let lb: Vec<f64> = vb.iter().map(|v| v.ln()).collect();
    let row_sum = |l: &[f64], i: usize| l[i * d..(i + 1) * d].iter().sum::<f64>();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let (mai, vai) = (&ma[i * d..(i + 1) * d], &va[i * d..(i + 1) * d]);
        let la_i = row_sum(&la, i);
        for c in 0..k {
            let (mbc, vbc) = (&mb[c * d..(c + 1) * d], &vb[c * d..(c + 1) * d]);
            out[i * k + c] = match kind {
                PairKernel::Ppk(rho) => {
                    let konst = (1.0 - 2.0 * rho) * HALF_LN_2PI - 0.5 * rho.ln();
                    let mut quad = 0.0;
                    for j in 0..d {
                        let delta = mai[j] - mbc[j];
                        quad += delta * delta / (vai[j] + vbc[j]);
                    }
                    d as f64 * konst + 0.5 * (1.0 - rho) * (la_i + row_sum(&lb, c))
                        - 0.5 * ln_sum_of_pairs(vai, vbc)
                        - 0.5 * rho * quad
                }
                PairKernel::NegKl => {
                    let mut acc = 0.0;
                    for j in 0..d {
                        let (a, b) = (vai[j], vbc[j]);
                        let delta = mai[j] - mbc[j];
                        acc += (a + delta * delta) / b - 1.0;
                    }
                    -0.5 * (acc + row_sum(&lb, c) - la_i)
                }
                PairKernel::NegW2 => -w2_sq(mai, vai, mbc, vbc).sqrt(),
            };
        }
    }
    out
}

/// `Σ_j ln(a_j + b_j)`, taking one logarithm per block of eight factors
/// unless a block product leaves the normal range.
fn ln_sum_of_pairs(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    for (ca, cb) in a.chunks(8).zip(b.chunks(8)) {
        let prod: f64 = ca.iter().zip(cb).map(|(x, y)| x + y).product();
        total += if prod.is_normal() {
            prod.ln()
        } else {
            ca.iter().zip(cb).map(|(x, y)| (x + y).ln()).sum()
        };
    }
    total
}

fn w2_sq(ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..ma.len() {
        let delta = ma[j] - mb[j];
        let ds = va[j].sqrt() - vb[j].sqrt();
        acc += delta * delta + ds * ds;
    }
    acc
}

/// Gradients of `Σ g ⊙ pair_scores(..)` with respect to `(ma, va, mb, vb)`.
#[allow(clippy::too_many_arguments)]
pub fn pair_scores_grad(
    kind: PairKernel,
    ma: &[f64],
    va: &[f64],
    mb: &[f64],
    vb: &[f64],
    d: usize,
    g: &[f64],
) -> [Vec<f64>; 4] {
    let n = ma.len() / d;
    let k = mb.len() / d;
    let mut gma = vec![0.0; ma.len()];
    let mut gva = vec![0.0; va.len()];
    let mut gmb = vec![0.0; mb.len()];
    let mut gvb = vec![0.0; vb.len()];
    for i in 0..n {
        for c in 0..k {
            let w = g[i * k + c];
            if w == 0.0 {
                continue;
            }
            let scale = match kind {
                PairKernel::NegW2 => {
                    let s = w2_sq(
                        &ma[i * d..(i + 1) * d],
                        &va[i * d..(i + 1) * d],
                        &mb[c * d..(c + 1) * d],
                        &vb[c * d..(c + 1) * d],
                    );
                    // d(-√S)/dS; the cusp at S = 0 gets the zero subgradient.
                    if s > 0.0 {
                        -0.5 / s.sqrt()
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            };
            for j in 0..d {
                let (ia, ib) = (i * d + j, c * d + j);
                let (a, b) = (va[ia], vb[ib]);
                let delta = ma[ia] - mb[ib];
                let (dm, da, db) = match kind {
                    PairKernel::Ppk(rho) => {
                        let s = a + b;
                        let common = -0.5 / s + 0.5 * rho * delta * delta / (s * s);
                        (
                            -rho * delta / s,
                            0.5 * (1.0 - rho) / a + common,
                            0.5 * (1.0 - rho) / b + common,
                        )
                    }
                    PairKernel::NegKl => (
                        -delta / b,
                        0.5 * (1.0 / a - 1.0 / b),
                        -0.5 * (1.0 / b - (a + delta * delta) / (b * b)),
                    ),
                    PairKernel::NegW2 => {
                        let (sa, sb) = (a.sqrt(), b.sqrt());
                        (scale * 2.0 * delta, scale * (sa - sb) / sa, -scale * (sa - sb) / sb)
                    }
                };
                gma[ia] += w * dm;
                gmb[ib] -= w * dm;
                gva[ia] += w * da;
                gvb[ib] += w * db;
            }
        }
    }
    [gma, gva, gmb, gvb]
}

/// Shared reparameterized draws for [`js_scores`]: `j × d` standard-normal
/// noise for the anchor side (`x`) and the prototype side (`y`).
#[derive(Debug, Clone, PartialEq)]
pub struct JsDraws {
    pub samples: usize,
    pub eps_x: Vec<f64>,
    pub eps_y: Vec<f64>,
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Per-draw quantities for one anchor–prototype pair: the log-density
/// gaps `lq(x) − lp(x)` and `lp(y) − lq(y)`.
struct JsPair {
    gap_x: f64,
    gap_y: f64,
}

/// Samples `x = μ_a + σ_a ε_x` for every anchor and `y = μ_b + σ_b ε_y`
/// for every prototype, laid out `[row][draw][dim]`.
fn js_points(m: &[f64], v: &[f64], eps: &[f64], d: usize, j: usize) -> Vec<f64> {
    let rows = m.len() / d;
    let mut out = Vec::with_capacity(rows * j * d);
    for r in 0..rows {
        for s in 0..j {
            for t in 0..d {
                out.push(m[r * d + t] + v[r * d + t].sqrt() * eps[s * d + t]);
            }
        }
    }
    out
}

/// `Σ_t (z_t − m_t)² / v_t`.
fn mahalanobis(z: &[f64], m: &[f64], v: &[f64]) -> f64 {
    z.iter().zip(m).zip(v).map(|((z, m), v)| (z - m) * (z - m) / v).sum()
}

fn js_pair(
    draws: &JsDraws,
    s: usize,
    d: usize,
    (xi, yc): (&[f64], &[f64]),
    (mai, vai, la_i): (&[f64], &[f64], f64),
    (mbc, vbc, lb_c): (&[f64], &[f64], f64),
) -> JsPair {
    let ex = &draws.eps_x[s * d..(s + 1) * d];
    let ey = &draws.eps_y[s * d..(s + 1) * d];
    let x = &xi[s * d..(s + 1) * d];
    let y = &yc[s * d..(s + 1) * d];
    // Twice the negative log-densities, without the shared ln 2π terms.
    let p_x = ex.iter().map(|e| e * e).sum::<f64>() + la_i;
    let q_x = mahalanobis(x, mbc, vbc) + lb_c;
    let p_y = mahalanobis(y, mai, vai) + la_i;
    let q_y = ey.iter().map(|e| e * e).sum::<f64>() + lb_c;
    JsPair {
        gap_x: 0.5 * (p_x - q_x),
        gap_y: 0.5 * (q_y - p_y),
    }
}

/// `[n, k]` negative Monte-Carlo Jensen–Shannon divergences between
/// Gaussians `(ma, va)` and `(mb, vb)`:
/// `−(1/J) Σ_s ½[log p(x_s) − log m(x_s) + log q(y_s) − log m(y_s)]`
/// with `m = ½(p + q)`.
pub fn js_scores(ma: &[f64], va: &[f64], mb: &[f64], vb: &[f64], d: usize, draws: &JsDraws) -> Vec<f64> {
    let (n, k, j) = (ma.len() / d, mb.len() / d, draws.samples);
    let xs = js_points(ma, va, &draws.eps_x, d, j);
    let ys = js_points(mb, vb, &draws.eps_y, d, j);
    let la: Vec<f64> = va.chunks(d).map(|r| r.iter().map(|v| v.ln()).sum()).collect();
    let lb: Vec<f64> = vb.chunks(d).map(|r| r.iter().map(|v| v.ln()).sum()).collect();
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let a = (&ma[i * d..(i + 1) * d], &va[i * d..(i + 1) * d], la[i]);
        let xi = &xs[i * j * d..(i + 1) * j * d];
        for c in 0..k {
            let b = (&mb[c * d..(c + 1) * d], &vb[c * d..(c + 1) * d], lb[c]);
            let yc = &ys[c * j * d..(c + 1) * j * d];
            let mut acc = 0.0;
            for s in 0..j {
                let p = js_pair(draws, s, d, (xi, yc), a, b);
                // log p − log m = ln 2 − softplus(lq − lp), likewise for y.
                acc += 2.0 * std::f64::consts::LN_2 - softplus(p.gap_x) - softplus(p.gap_y);
            }
            out[i * k + c] = -0.5 * acc / j as f64;
        }
    }
    out
}

/// Gradients of `Σ g ⊙ js_scores(..)` with respect to `(ma, va, mb, vb)`,
/// holding the draws fixed.
pub fn js_scores_grad(
    ma: &[f64],
    va: &[f64],
    mb: &[f64],
    vb: &[f64],
    d: usize,
    draws: &JsDraws,
    g: &[f64],
) -> [Vec<f64>; 4] {
    let (n, k, j) = (ma.len() / d, mb.len() / d, draws.samples);
    let xs = js_points(ma, va, &draws.eps_x, d, j);
    let ys = js_points(mb, vb, &draws.eps_y, d, j);
    let la: Vec<f64> = va.chunks(d).map(|r| r.iter().map(|v| v.ln()).sum()).collect();
    let lb: Vec<f64> = vb.chunks(d).map(|r| r.iter().map(|v| v.ln()).sum()).collect();
    let mut gma = vec![0.0; ma.len()];
    let mut gva = vec![0.0; va.len()];
    let mut gmb = vec![0.0; mb.len()];
    let mut gvb = vec![0.0; vb.len()];
    for i in 0..n {
        let a = (&ma[i * d..(i + 1) * d], &va[i * d..(i + 1) * d], la[i]);
        let xi = &xs[i * j * d..(i + 1) * j * d];
        for c in 0..k {
            let coef = -0.5 * g[i * k + c] / j as f64;
            if coef == 0.0 {
                continue;
            }
            let b = (&mb[c * d..(c + 1) * d], &vb[c * d..(c + 1) * d], lb[c]);
            let yc = &ys[c * j * d..(c + 1) * j * d];
            for s in 0..j {
                let p = js_pair(draws, s, d, (xi, yc), a, b);
                // d(log p − log m)(x) = w_x (d log p − d log q) at x, with
                // w_x = q/(p+q); likewise w_y = p/(p+q) at y.
                let wx = coef * sigmoid(p.gap_x);
                let wy = coef * sigmoid(p.gap_y);
                for t in 0..d {
                    let (ia, ib) = (i * d + t, c * d + t);
                    let (ex, ey) = (draws.eps_x[s * d + t], draws.eps_y[s * d + t]);
                    let (x, y) = (xi[s * d + t], yc[s * d + t]);
                    let (va_t, vb_t) = (va[ia], vb[ib]);
                    let rx = (x - mb[ib]) / vb_t;
                    let ry = (y - ma[ia]) / va_t;
                    gma[ia] += wx * rx - wy * ry;
                    gmb[ib] += wy * ry - wx * rx;
                    let dlq_x_dva = -rx * ex / (2.0 * va_t.sqrt());
                    let dlp_y_dva = 0.5 * ry * ry - 0.5 / va_t;
                    gva[ia] += wx * (-0.5 / va_t - dlq_x_dva) - wy * dlp_y_dva;
                    let dlq_x_dvb = 0.5 * rx * rx - 0.5 / vb_t;
                    let dlp_y_dvb = -ry * ey / (2.0 * vb_t.sqrt());
                    gvb[ib] += -wx * dlq_x_dvb + wy * (-0.5 / vb_t - dlp_y_dvb);
                }
            }
        }
    }
    [gma, gva, gmb, gvb]
}
