//! Selective-scan state space recurrence (S6).
//!
//! For an input sequence `x[t, d]` the layer derives an input-dependent step
//! size `Δ[t, d]` and input/output vectors `B[t, :]`, `C[t, :]` from `x_t`
//! through low-rank projections, discretizes the continuous decay
//! `A = -exp(a_log)` with a zero-order hold, and runs
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t B_t) x_t        h_0 = 0
//! y_t = Σ_n C_t[n] h_t[:, n] + D ⊙ x_t
//! ```
//!
//! Two forward evaluators are provided: a sequential reference and a chunked
//! associative scan (Blelloch up/down sweep inside each chunk, carries
//! applied across chunks in order). State is always carried in f64.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::ops::{linear, sigmoid_f64, softplus_f64};
use crate::tensor::{Scalar, Tensor};

/// Default state size per channel.
pub const DEFAULT_N_STATE: usize = 16;

/// Default low-rank width of the step-size projection.
pub fn default_dt_rank(d_inner: usize) -> usize {
    d_inner.div_ceil(16)
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;
const DT_FLOOR: f64 = 1e-4;

/// Per-layer S6 parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct S6Params<T = f32> {
    /// `[D, N]`, `A = -exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[D]` direct feedthrough.
    pub d_skip: Tensor<T>,
    /// `[D, R + 2N]` producing the Δ seed, `B_t` and `C_t`.
    pub x_proj: Tensor<T>,
    /// `[R, D]`.
    pub dt_proj: Tensor<T>,
    /// `[D]`.
    pub dt_bias: Tensor<T>,
}

impl<T: Scalar> S6Params<T> {
    pub fn zeros(d_inner: usize, n_state: usize, dt_rank: usize) -> Self {
        S6Params {
            a_log: Tensor::zeros([d_inner, n_state]),
            d_skip: Tensor::zeros([d_inner]),
            x_proj: Tensor::zeros([d_inner, dt_rank + 2 * n_state]),
            dt_proj: Tensor::zeros([dt_rank, d_inner]),
            dt_bias: Tensor::zeros([d_inner]),
        }
    }

    /// Conventional selective-scan initialisation: `A[d, n] = -(n + 1)`,
    /// `D = 1`, the Δ bias set so `softplus(bias)` is log-uniform in
    /// `[1e-3, 1e-1]`, truncated-normal `x_proj`.
    pub fn init(d_inner: usize, n_state: usize, dt_rank: usize, rng: &mut impl Rng) -> Self {
        let a_log = Tensor::from_fn([d_inner, n_state], |i| {
            T::from_f64(((i % n_state) as f64 + 1.0).ln())
        });
        let bound = (dt_rank as f64).powf(-0.5);
        let dt_bias = Tensor::from_fn([d_inner], |_| {
            let u: f64 = rng.random_range(DT_MIN.ln()..DT_MAX.ln());
            let dt = u.exp().max(DT_FLOOR);
            // inverse softplus
            T::from_f64(dt + (-(-dt).exp_m1()).ln())
        });
        S6Params {
            a_log,
            d_skip: Tensor::ones([d_inner]),
            x_proj: init::trunc_normal(&[d_inner, dt_rank + 2 * n_state], init::PROJ_STD, rng),
            dt_proj: init::uniform(&[dt_rank, d_inner], -bound, bound, rng),
            dt_bias,
        }
    }

    pub fn cast<U: Scalar>(&self) -> S6Params<U> {
        S6Params {
            a_log: self.a_log.cast(),
            d_skip: self.d_skip.cast(),
            x_proj: self.x_proj.cast(),
            dt_proj: self.dt_proj.cast(),
            dt_bias: self.dt_bias.cast(),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.d_skip.len()
    }

    pub fn n_state(&self) -> usize {
        self.a_log.last_dim()
    }

    pub fn dt_rank(&self) -> usize {
        self.dt_proj.shape()[0]
    }

    pub fn param_count(d_inner: usize, n_state: usize, dt_rank: usize) -> usize {
        d_inner * n_state + d_inner + d_inner * (dt_rank + 2 * n_state) + dt_rank * d_inner + d_inner
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "S6Params";
        let (d, n) = self.a_log.dims2(OP)?;
        let (r, d2) = self.dt_proj.dims2(OP)?;
        if self.d_skip.shape() != [d]
            || self.dt_bias.shape() != [d]
            || d2 != d
            || self.x_proj.shape() != [d, r + 2 * n]
        {
            return Err(Error::shape(
                OP,
                format!(
                    "inconsistent shapes: a_log {:?}, d_skip {:?}, x_proj {:?}, dt_proj {:?}, dt_bias {:?}",
                    self.a_log.shape(),
                    self.d_skip.shape(),
                    self.x_proj.shape(),
                    self.dt_proj.shape(),
                    self.dt_bias.shape()
                ),
            ));
        }
        Ok(())
    }

    /// The continuous decay `A = -exp(a_log)` as f64.
    pub fn decay(&self) -> Vec<f64> {
        self.a_log.data().iter().map(|v| -v.as_f64().exp()).collect()
    }
}

/// The input-dependent quantities of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection<T = f32> {
    /// `[L, D]`, strictly positive.
    pub delta: Tensor<T>,
    /// `[L, N]`.
    pub b: Tensor<T>,
    /// `[L, N]`.
    pub c: Tensor<T>,
}

/// Project `x: [L, D]` to `(Δ, B, C)`.
pub fn select<T: Scalar>(x: &Tensor<T>, params: &S6Params<T>) -> Result<Selection<T>> {
    params.validate()?;
    let (_, d) = x.dims2("s6")?;
    if d != params.d_inner() {
        return Err(Error::shape(
            "s6",
            format!("input has {d} channels, parameters expect {}", params.d_inner()),
        ));
    }
    let r = params.dt_rank();
    let n = params.n_state();
    let z = linear(x, &params.x_proj, None)?;
    let (seed, bc) = z.split_last(r)?;
    let (b, c) = bc.split_last(n)?;
    let dt_raw = linear(&seed, &params.dt_proj, Some(&params.dt_bias))?;
    let delta = dt_raw
        .map(|v| T::from_f64(softplus_f64(v.as_f64())))
        .ensure_finite("softplus")?;
    Ok(Selection { delta, b, c })
}

/// Zero-order hold on `A` and first-order hold on `B`:
/// `abar = exp(Δ A)`, `bbar = Δ B`, both `[L, D, N]`.
pub fn discretize<T: Scalar>(
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b_t: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    const OP: &str = "discretize";
    let (l, d) = delta.dims2(OP)?;
    let (d2, n) = a_log.dims2(OP)?;
    let (l2, n2) = b_t.dims2(OP)?;
    if d != d2 || l != l2 || n != n2 {
        return Err(Error::shape(
            OP,
            format!(
                "delta {:?}, a_log {:?}, b {:?}",
                delta.shape(),
                a_log.shape(),
                b_t.shape()
            ),
        ));
    }
    if delta.data().iter().any(|v| v.as_f64().is_nan() || v.as_f64() <= 0.0) {
        return Err(Error::invalid(OP, "delta must be strictly positive"));
    }
    let a: Vec<f64> = a_log.data().iter().map(|v| -v.as_f64().exp()).collect();
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for j in 0..d {
            let dt = delta.data()[t * d + j].as_f64();
            for k in 0..n {
                abar.push(T::from_f64((dt * a[j * n + k]).exp()));
                bbar.push(T::from_f64(dt * b_t.data()[t * n + k].as_f64()));
            }
        }
    }
    Ok((
        Tensor::new([l, d, n], abar)?.ensure_finite(OP)?,
        Tensor::new([l, d, n], bbar)?.ensure_finite(OP)?,
    ))
}

/// Shape checks shared by the scan evaluators; returns `(L, D, N)`.
fn check_scan_inputs<T: Scalar>(
    x: &Tensor<T>,
    sel: &Selection<T>,
    a_log: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    const OP: &str = "selective_scan";
    let (l, d) = x.dims2(OP)?;
    let (d2, n) = a_log.dims2(OP)?;
    if d2 != d
        || d_skip.shape() != [d]
        || sel.delta.shape() != [l, d]
        || sel.b.shape() != [l, n]
        || sel.c.shape() != [l, n]
    {
        return Err(Error::shape(
            OP,
            format!(
                "x {:?}, delta {:?}, b {:?}, c {:?}, a_log {:?}, d_skip {:?}",
                x.shape(),
                sel.delta.shape(),
                sel.b.shape(),
                sel.c.shape(),
                a_log.shape(),
                d_skip.shape()
            ),
        ));
    }
    Ok((l, d, n))
}

/// f64 views of the scan operands, gathered once per call.
struct ScanOperands {
    l: usize,
    d: usize,
    n: usize,
    x: Vec<f64>,
    delta: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    a: Vec<f64>,
    d_skip: Vec<f64>,
}

impl ScanOperands {
    fn gather<T: Scalar>(
        x: &Tensor<T>,
        sel: &Selection<T>,
        a_log: &Tensor<T>,
        d_skip: &Tensor<T>,
    ) -> Result<Self> {
        let (l, d, n) = check_scan_inputs(x, sel, a_log, d_skip)?;
        Ok(ScanOperands {
            l,
            d,
            n,
            x: x.to_f64_vec(),
            delta: sel.delta.to_f64_vec(),
            b: sel.b.to_f64_vec(),
            c: sel.c.to_f64_vec(),
            a: a_log.data().iter().map(|v| -v.as_f64().exp()).collect(),
            d_skip: d_skip.to_f64_vec(),
        })
    }

    /// Writes `(abar, bbar·x)` of step `t`, channel `j` into `a`, `b`.
    #[inline]
    fn element(&self, t: usize, j: usize, a: &mut [f64], b: &mut [f64]) {
        let dt = self.delta[t * self.d + j];
        let dx = dt * self.x[t * self.d + j];
        let arow = &self.a[j * self.n..(j + 1) * self.n];
        let brow = &self.b[t * self.n..(t + 1) * self.n];
        for k in 0..self.n {
            a[k] = (dt * arow[k]).exp();
            b[k] = brow[k] * dx;
        }
    }

    #[inline]
    fn readout(&self, t: usize, j: usize, h: &[f64]) -> f64 {
        let crow = &self.c[t * self.n..(t + 1) * self.n];
        let mut y = 0.0;
        for k in 0..self.n {
            y += crow[k] * h[k];
        }
        y + self.d_skip[j] * self.x[t * self.d + j]
    }

    /// Run `per_channel` for every channel (in parallel) and assemble `[L, D]`.
    fn assemble<T: Scalar>(&self, per_channel: impl Fn(usize) -> Vec<f64> + Sync) -> Result<Tensor<T>> {
        let cols: Vec<Vec<f64>> = if self.l * self.d * self.n >= 1 << 14 {
            (0..self.d).into_par_iter().map(&per_channel).collect()
        } else {
            (0..self.d).map(&per_channel).collect()
        };
        let mut out = vec![T::zero(); self.l * self.d];
        for (j, col) in cols.iter().enumerate() {
            for (t, &v) in col.iter().enumerate() {
                out[t * self.d + j] = T::from_f64(v);
            }
        }
        Tensor::new([self.l, self.d], out)?.ensure_finite("selective_scan")
    }
}

/// Reference recurrence with explicit `Δ, B, C` ("frozen" selection).
pub fn selective_scan_sequential<T: Scalar>(
    x: &Tensor<T>,
    sel: &Selection<T>,
    a_log: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let ops = ScanOperands::gather(x, sel, a_log, d_skip)?;
    let n = ops.n;
    ops.assemble(|j| {
        let mut h = vec![0.0f64; n];
        let mut a = vec![0.0f64; n];
        let mut b = vec![0.0f64; n];
        (0..ops.l)
            .map(|t| {
                ops.element(t, j, &mut a, &mut b);
                for k in 0..n {
                    h[k] = a[k] * h[k] + b[k];
                }
                ops.readout(t, j, &h)
            })
            .collect()
    })
}

/// Chunked associative-scan evaluation of the same recurrence.
pub fn selective_scan_chunked<T: Scalar>(
    x: &Tensor<T>,
    sel: &Selection<T>,
    a_log: &Tensor<T>,
    d_skip: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    if chunk == 0 {
        return Err(Error::invalid("selective_scan_chunked", "chunk must be >= 1"));
    }
    let ops = ScanOperands::gather(x, sel, a_log, d_skip)?;
    let n = ops.n;
    let chunk = chunk.min(ops.l);
    let p = chunk.next_power_of_two();
    ops.assemble(|j| {
        let mut y = Vec::with_capacity(ops.l);
        let mut carry = vec![0.0f64; n];
        let mut ea = vec![1.0f64; p * n];
        let mut eb = vec![0.0f64; p * n];
        let mut orig_a = vec![0.0f64; chunk * n];
        let mut orig_b = vec![0.0f64; chunk * n];
        let mut h = vec![0.0f64; n];
        for start in (0..ops.l).step_by(chunk) {
            let len = chunk.min(ops.l - start);
            ea.iter_mut().for_each(|v| *v = 1.0);
            eb.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..len {
                let (a, b) = (&mut ea[i * n..(i + 1) * n], &mut eb[i * n..(i + 1) * n]);
                ops.element(start + i, j, a, b);
            }
            orig_a[..len * n].copy_from_slice(&ea[..len * n]);
            orig_b[..len * n].copy_from_slice(&eb[..len * n]);
            blelloch_exclusive(&mut ea, &mut eb, n);
            for i in 0..len {
                let s = i * n..(i + 1) * n;
                for k in 0..n {
                    // inclusive prefix = exclusive prefix then element i
                    let (ia, ib) = combine_scalar(
                        (ea[s.start + k], eb[s.start + k]),
                        (orig_a[s.start + k], orig_b[s.start + k]),
                    );
                    h[k] = ia * carry[k] + ib;
                }
                y.push(ops.readout(start + i, j, &h));
            }
            carry.copy_from_slice(&h);
        }
        y
    })
}

#[inline]
fn combine_scalar(first: (f64, f64), second: (f64, f64)) -> (f64, f64) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// In-place exclusive Blelloch scan over `p = a.len() / n` elements, each an
/// `n`-wide `(a, b)` pair. `p` must be a power of two.
fn blelloch_exclusive(a: &mut [f64], b: &mut [f64], n: usize) {
    let p = a.len() / n;
    debug_assert!(p.is_power_of_two());
    let mut step = 1;
    while step < p {
        let mut i = 2 * step - 1;
        while i < p {
            let l = i - step;
            for k in 0..n {
                let (na, nb) = combine_scalar((a[l * n + k], b[l * n + k]), (a[i * n + k], b[i * n + k]));
                a[i * n + k] = na;
                b[i * n + k] = nb;
            }
            i += 2 * step;
        }
        step *= 2;
    }
    for k in 0..n {
        a[(p - 1) * n + k] = 1.0;
        b[(p - 1) * n + k] = 0.0;
    }
    let mut step = p / 2;
    while step >= 1 {
        let mut i = 2 * step - 1;
        while i < p {
            let l = i - step;
            for k in 0..n {
                let left = (a[l * n + k], b[l * n + k]);
                let prefix = (a[i * n + k], b[i * n + k]);
                a[l * n + k] = prefix.0;
                b[l * n + k] = prefix.1;
                let (na, nb) = combine_scalar(prefix, left);
                a[i * n + k] = na;
                b[i * n + k] = nb;
            }
            i += 2 * step;
        }
        step /= 2;
    }
}

/// One element of the associative reformulation of the recurrence:
/// the affine map `h -> a ⊙ h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement<T = f32> {
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> ScanElement<T> {
    pub fn identity(n: usize) -> Self {
        ScanElement {
            a: vec![T::one(); n],
            b: vec![T::zero(); n],
        }
    }

    /// Apply `self` first, then `later`: `(a2·a1, a2·b1 + b2)`.
    pub fn combine(&self, later: &Self) -> Self {
        assert_eq!(self.a.len(), later.a.len(), "ScanElement width mismatch");
        let a = self.a.iter().zip(&later.a).map(|(&a1, &a2)| a2 * a1).collect();
        let b = self
            .b
            .iter()
            .zip(&later.a)
            .zip(&later.b)
            .map(|((&b1, &a2), &b2)| a2 * b1 + b2)
            .collect();
        ScanElement { a, b }
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        h.iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(&h, (&a, &b))| a * h + b)
            .collect()
    }
}

pub fn s6_forward_sequential<T: Scalar>(x: &Tensor<T>, params: &S6Params<T>) -> Result<Tensor<T>> {
    let sel = select(x, params)?;
    selective_scan_sequential(x, &sel, &params.a_log, &params.d_skip)
}

pub fn s6_forward_scan<T: Scalar>(
    x: &Tensor<T>,
    params: &S6Params<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    let sel = select(x, params)?;
    selective_scan_chunked(x, &sel, &params.a_log, &params.d_skip, chunk)
}

/// Reverse-mode gradients of [`s6_forward_sequential`].
///
/// Returns `dx` and a parameter-shaped gradient set. Intermediates are
/// recomputed from `x`.
pub fn s6_backward<T: Scalar>(
    x: &Tensor<T>,
    params: &S6Params<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, S6Params<T>)> {
    if dy.shape() != x.shape() {
        return Err(Error::shape(
            "s6_backward",
            format!("dy {:?} does not match x {:?}", dy.shape(), x.shape()),
        ));
    }
    let sel = select(x, params)?;
    let (l, d) = x.dims2("s6_backward")?;
    let n = params.n_state();
    let r = params.dt_rank();
    let w = r + 2 * n;

    let xs = x.to_f64_vec();
    let dys = dy.to_f64_vec();
    let a = params.decay();
    let d_skip = params.d_skip.to_f64_vec();
    let x_proj = params.x_proj.to_f64_vec();
    let dt_proj = params.dt_proj.to_f64_vec();
    let dt_bias = params.dt_bias.to_f64_vec();

    // Recompute the selection in f64 so gradients are consistent with it.
    let mut z = vec![0.0f64; l * w];
    for t in 0..l {
        for j in 0..d {
            let xv = xs[t * d + j];
            for q in 0..w {
                z[t * w + q] += xv * x_proj[j * w + q];
            }
        }
    }
    let mut dt_raw = vec![0.0f64; l * d];
    for t in 0..l {
        for j in 0..d {
            let mut s = dt_bias[j];
            for q in 0..r {
                s += z[t * w + q] * dt_proj[q * d + j];
            }
            dt_raw[t * d + j] = s;
        }
    }
    let delta: Vec<f64> = dt_raw.iter().map(|&v| softplus_f64(v)).collect();
    let bm = |t: usize, k: usize| z[t * w + r + k];
    let cm = |t: usize, k: usize| z[t * w + r + n + k];

    // Forward states h_t for t = 0..L (h[0] is the zero initial state).
    let mut hs = vec![0.0f64; (l + 1) * d * n];
    for t in 0..l {
        for j in 0..d {
            for k in 0..n {
                let ab = (delta[t * d + j] * a[j * n + k]).exp();
                let prev = hs[(t * d + j) * n + k];
                hs[((t + 1) * d + j) * n + k] =
                    ab * prev + delta[t * d + j] * bm(t, k) * xs[t * d + j];
            }
        }
    }
    drop(sel);

    let mut dx = vec![0.0f64; l * d];
    let mut dz = vec![0.0f64; l * w];
    let mut d_a = vec![0.0f64; d * n];
    let mut d_dskip = vec![0.0f64; d];
    let mut d_dtraw = vec![0.0f64; l * d];
    let mut gh_next = vec![0.0f64; d * n]; // dL/dh_t arriving from step t+1
    for t in (0..l).rev() {
        for j in 0..d {
            let g = dys[t * d + j];
            let xv = xs[t * d + j];
            let dt = delta[t * d + j];
            d_dskip[j] += g * xv;
            dx[t * d + j] += g * d_skip[j];
            let mut d_delta = 0.0;
            for k in 0..n {
                let h_t = hs[((t + 1) * d + j) * n + k];
                let h_prev = hs[(t * d + j) * n + k];
                // readout
                dz[t * w + r + n + k] += g * h_t;
                let gh = g * cm(t, k) + gh_next[j * n + k];
                let ab = (dt * a[j * n + k]).exp();
                // h_t = ab·h_prev + dt·B·x
                let d_ab = gh * h_prev;
                let d_bbar = gh * xv;
                dx[t * d + j] += gh * dt * bm(t, k);
                d_delta += d_ab * ab * a[j * n + k] + d_bbar * bm(t, k);
                d_a[j * n + k] += d_ab * ab * dt;
                dz[t * w + r + k] += d_bbar * dt;
                gh_next[j * n + k] = gh * ab;
            }
            d_dtraw[t * d + j] = d_delta * sigmoid_f64(dt_raw[t * d + j]);
        }
    }

    let mut d_dtproj = vec![0.0f64; r * d];
    let mut d_dtbias = vec![0.0f64; d];
    for t in 0..l {
        for j in 0..d {
            let g = d_dtraw[t * d + j];
            d_dtbias[j] += g;
            for q in 0..r {
                d_dtproj[q * d + j] += z[t * w + q] * g;
                dz[t * w + q] += dt_proj[q * d + j] * g;
            }
        }
    }
    let mut d_xproj = vec![0.0f64; d * w];
    for t in 0..l {
        for j in 0..d {
            let xv = xs[t * d + j];
            let mut acc = 0.0;
            for q in 0..w {
                d_xproj[j * w + q] += xv * dz[t * w + q];
                acc += x_proj[j * w + q] * dz[t * w + q];
            }
            dx[t * d + j] += acc;
        }
    }
    // A = -exp(a_log) so dA/da_log = A
    let d_alog: Vec<f64> = d_a.iter().zip(&a).map(|(g, a)| g * a).collect();

    let grads = S6Params {
        a_log: Tensor::from_f64([d, n], &d_alog)?,
        d_skip: Tensor::from_f64([d], &d_dskip)?,
        x_proj: Tensor::from_f64([d, w], &d_xproj)?,
        dt_proj: Tensor::from_f64([r, d], &d_dtproj)?,
        dt_bias: Tensor::from_f64([d], &d_dtbias)?,
    };
    Ok((Tensor::from_f64([l, d], &dx)?.ensure_finite("s6_backward")?, grads))
}

/// FLOPs (2 × multiply-accumulates) of one S6 layer over `l` steps:
/// the three projections plus the state update and readout MACs.
/// Elementwise work (exp, softplus, Δ·B·x) is not counted.
pub fn s6_flops(l: usize, d_inner: usize, n_state: usize, dt_rank: usize) -> u64 {
    let per_step = d_inner * (dt_rank + 2 * n_state) + dt_rank * d_inner + 2 * d_inner * n_state;
    2 * (l as u64) * per_step as u64
}

/// Arithmetic operations actually performed by [`selective_scan_chunked`]
/// after the projections: combines in the up/down sweeps, inclusive
/// prefixes, carry application and readout.
pub fn chunked_scan_ops(l: usize, d_inner: usize, n_state: usize, chunk: usize) -> u64 {
    let chunk = chunk.clamp(1, l.max(1));
    let p = chunk.next_power_of_two() as u64;
    let full = (l / chunk) as u64;
    let rem = (l % chunk) as u64;
    let combines_per_chunk = 2 * (p - 1);
    let chunks = full + u64::from(rem > 0);
    // combine = 3 flops, carry = 2 flops, readout = 2 flops per state element
    let per_channel = chunks * combines_per_chunk * 3 + l as u64 * (3 + 2 + 2);
    per_channel * (d_inner * n_state) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng_from_seed;

    fn small(l: usize, d: usize, n: usize, seed: u64) -> (Tensor<f64>, S6Params<f64>) {
        let mut rng = rng_from_seed(seed);
        let mut p = S6Params::<f64>::init(d, n, 2, &mut rng);
        p.x_proj = init::uniform(&[d, 2 + 2 * n], -0.5, 0.5, &mut rng);
        let x = init::uniform(&[l, d], -1.0, 1.0, &mut rng);
        (x, p)
    }

    #[test]
    fn discretize_closed_forms() {
        let delta = Tensor::<f64>::full([1, 2], 1e-12);
        let a_log = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::full([1, 3], 0.7);
        let (ab, bb) = discretize(&delta, &a_log, &b).unwrap();
        assert!(ab.data().iter().all(|&v| (v - 1.0).abs() < 1e-11));
        assert!(bb.data().iter().all(|&v| v.abs() < 1e-11));

        let (ab, _) = discretize(&Tensor::<f64>::ones([1, 2]), &a_log, &b).unwrap();
        assert!(ab.data().iter().all(|&v| (v - 0.367_879_441_171_442_33).abs() < 1e-15));
    }

    #[test]
    fn discretize_rejects_non_positive_delta() {
        let delta = Tensor::<f32>::new([1, 2], vec![0.1, 0.0]).unwrap();
        let err = discretize(&delta, &Tensor::zeros([2, 1]), &Tensor::zeros([1, 1])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument { .. }));
    }

    #[test]
    fn blelloch_matches_running_product() {
        let n = 2;
        let p = 8;
        let mut a: Vec<f64> = (0..p * n).map(|i| 0.5 + 0.05 * i as f64).collect();
        let mut b: Vec<f64> = (0..p * n).map(|i| (i as f64).cos()).collect();
        let (a0, b0) = (a.clone(), b.clone());
        blelloch_exclusive(&mut a, &mut b, n);
        let mut run = vec![(1.0, 0.0); n];
        for i in 0..p {
            for k in 0..n {
                assert!((a[i * n + k] - run[k].0).abs() < 1e-14);
                assert!((b[i * n + k] - run[k].1).abs() < 1e-14);
                run[k] = combine_scalar(run[k], (a0[i * n + k], b0[i * n + k]));
            }
        }
    }

    #[test]
    fn single_chunk_matches_sequential() {
        let (x, p) = small(13, 3, 4, 7);
        let s = s6_forward_sequential(&x, &p).unwrap();
        for chunk in [13, 64] {
            let c = s6_forward_scan(&x, &p, chunk).unwrap();
            assert!(c.max_abs_diff(&s) < 1e-12);
        }
        assert!(s6_forward_scan(&x, &p, 0).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (_, p) = small(4, 3, 2, 1);
        let x = Tensor::<f64>::zeros([4, 5]);
        assert!(matches!(s6_forward_sequential(&x, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gradient() {
        let (x, p) = small(5, 2, 3, 3);
        let (dx, g) = s6_backward(&x, &p, &Tensor::zeros([5, 2])).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for t in [&g.a_log, &g.d_skip, &g.x_proj, &g.dt_proj, &g.dt_bias] {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(s6_backward(&x, &p, &Tensor::zeros([4, 2])).is_err());
    }

    #[test]
    fn flop_counter_is_linear() {
        assert_eq!(s6_flops(2048, 8, 16, 1), 2 * s6_flops(1024, 8, 16, 1));
    }

    #[test]
    fn init_respects_invariants() {
        let mut rng = rng_from_seed(0);
        let p = S6Params::<f64>::init(32, 16, 2, &mut rng);
        assert!(p.decay().iter().all(|&a| a < 0.0));
        for &b in p.dt_bias.data() {
            let dt = softplus_f64(b);
            assert!((DT_FLOOR * 0.999..=DT_MAX * 1.001).contains(&dt), "{dt}");
        }
    }
}
