//! Diagonal state-space kernel: zero-order-hold discretization, recurrent and
//! convolutional evaluation of a time-invariant system, and the input-dependent
//! (selective) scan used inside the vision blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{uniform_init, Bound, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor, Var};

/// Below this `|Δa|` the ZOH input gain uses its series limit instead of a division.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-12;

/// Timescale: one value for the whole sequence or one per step.
#[derive(Debug, Clone, PartialEq)]
pub enum Delta<S> {
    Constant(S),
    PerStep(Vec<S>),
}

/// Continuous single-input single-output diagonal SSM `h' = A h + B x`, `y = C h`.
///
/// `C` is a row (`y = Σ C_n h_n`).
#[derive(Debug, Clone)]
pub struct SsmParams<S> {
    /// Diagonal of `A`, strictly negative.
    pub a: Vec<S>,
    pub b: Vec<S>,
    pub c: Vec<S>,
    pub delta: Delta<S>,
}

impl<S: Scalar> SsmParams<S> {
    /// `A = -exp(a_log)`.
    pub fn from_log(a_log: &[S], b: Vec<S>, c: Vec<S>, delta: Delta<S>) -> Result<Self> {
        Self::new(a_log.iter().map(|&l| -l.exp()).collect(), b, c, delta)
    }

    pub fn new(a: Vec<S>, b: Vec<S>, c: Vec<S>, delta: Delta<S>) -> Result<Self> {
        if b.len() != a.len() || c.len() != a.len() {
            return Err(Error::dim(
                "ssm_params",
                format!("A has {} states but B has {} and C has {}", a.len(), b.len(), c.len()),
            ));
        }
        if let Some(bad) = a.iter().find(|&&x| !(x < S::zero())) {
            return Err(Error::Domain(format!("diagonal of A must be negative, got {bad}")));
        }
        Ok(Self { a, b, c, delta })
    }

    pub fn state_dim(&self) -> usize {
        self.a.len()
    }
}

/// Discretized `(Ā, B̄)`, row-major `[steps, N]`; `steps == 1` when time-invariant.
#[derive(Debug, Clone)]
pub struct DiscreteSsm<S> {
    pub a_bar: Vec<S>,
    pub b_bar: Vec<S>,
    pub state_dim: usize,
    pub time_varying: bool,
}

impl<S: Scalar> DiscreteSsm<S> {
    pub fn steps(&self) -> usize {
        self.a_bar.len() / self.state_dim.max(1)
    }

    fn step(&self, t: usize) -> (&[S], &[S]) {
        let n = self.state_dim;
        let t = if self.time_varying { t } else { 0 };
        (&self.a_bar[t * n..(t + 1) * n], &self.b_bar[t * n..(t + 1) * n])
    }
}

/// `φ(Δ, a) = (e^{Δa} - 1) / a`, so that `B̄ = φ B`.
#[inline]
pub fn zoh_gain<S: Scalar>(delta: S, a: S) -> S {
    let z = delta * a;
    if z.abs() < S::c(ZOH_SERIES_THRESHOLD) {
        delta * (S::one() + z * S::c(0.5))
    } else {
        delta * z.exp_m1() / z
    }
}

/// `g'(z)` for `g(z) = (e^z - 1) / z`; `∂φ/∂a = Δ² g'(Δa)`.
#[inline]
fn gain_slope<S: Scalar>(z: S) -> S {
    if z.abs() < S::c(1e-2) {
        let coeffs = [1.0 / 2.0, 1.0 / 3.0, 1.0 / 8.0, 1.0 / 30.0, 1.0 / 144.0, 1.0 / 840.0, 1.0 / 5760.0];
        coeffs.iter().rev().fold(S::zero(), |acc, &k| acc * z + S::c(k))
    } else {
        (z.exp() * (z - S::one()) + S::one()) / (z * z)
    }
}

fn check_delta<S: Scalar>(d: S) -> Result<()> {
    if d > S::zero() && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("timescale must be positive and finite, got {d}")))
    }
}

/// Zero-order hold per diagonal entry: `Ā = exp(ΔA)`, `B̄ = (ΔA)⁻¹(exp(ΔA) - 1) ΔB`.
pub fn discretize_zoh<S: Scalar>(p: &SsmParams<S>) -> Result<DiscreteSsm<S>> {
    let deltas: Vec<S> = match &p.delta {
        Delta::Constant(d) => vec![*d],
        Delta::PerStep(v) => v.clone(),
    };
    let n = p.state_dim();
    let mut a_bar = Vec::with_capacity(deltas.len() * n);
    let mut b_bar = Vec::with_capacity(deltas.len() * n);
    for &d in &deltas {
        check_delta(d)?;
        for k in 0..n {
            a_bar.push((d * p.a[k]).exp());
            b_bar.push(zoh_gain(d, p.a[k]) * p.b[k]);
        }
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        state_dim: n,
        time_varying: matches!(p.delta, Delta::PerStep(_)),
    })
}

fn check_sequence<S: Scalar>(op: &'static str, d: &DiscreteSsm<S>, c: &[S], x: &Tensor<S>) -> Result<usize> {
    if x.rank() != 1 {
        return Err(Error::dim(op, format!("expected a [L] sequence, got {:?}", x.shape())));
    }
    if c.len() != d.state_dim {
        return Err(Error::dim(op, format!("C has {} entries for {} states", c.len(), d.state_dim)));
    }
    let l = x.len();
    if d.time_varying && d.steps() != l {
        return Err(Error::dim(op, format!("{} discretized steps for a length-{l} sequence", d.steps())));
    }
    Ok(l)
}

/// `h_t = Ā h_{t-1} + B̄ x_t`, `y_t = C h_t`, from `h_0 = 0`.
pub fn scan_recurrent<S: Scalar>(d: &DiscreteSsm<S>, c: &[S], x: &Tensor<S>) -> Result<Tensor<S>> {
    let l = check_sequence("scan_recurrent", d, c, x)?;
    let mut h = vec![S::zero(); d.state_dim];
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(t, &xt)| {
            let (a, b) = d.step(t);
            let mut yt = S::zero();
            for k in 0..h.len() {
                h[k] = a[k] * h[k] + b[k] * xt;
                yt = yt + c[k] * h[k];
            }
            yt
        })
        .collect();
    Tensor::new(vec![l], y)
}

/// `K̄ = (C B̄, C Ā B̄, …, C Ā^{L-1} B̄)`.
pub fn ssm_kernel<S: Scalar>(d: &DiscreteSsm<S>, c: &[S], len: usize) -> Result<Vec<S>> {
    if d.time_varying {
        return Err(Error::Contract(
            "convolution mode requires time-invariant parameters (single Δ)".into(),
        ));
    }
    let (a, b) = d.step(0);
    let mut power: Vec<S> = b.iter().zip(c).map(|(&b, &c)| b * c).collect();
    let mut kernel = Vec::with_capacity(len);
    for _ in 0..len {
        kernel.push(power.iter().copied().sum());
        for (p, &ak) in power.iter_mut().zip(a) {
            *p = *p * ak;
        }
    }
    Ok(kernel)
}

/// Causal convolution of `x` with the materialized kernel `K̄`.
pub fn scan_convolutional<S: Scalar>(d: &DiscreteSsm<S>, c: &[S], x: &Tensor<S>) -> Result<Tensor<S>> {
    if d.time_varying {
        return Err(Error::Contract(
            "convolution mode requires time-invariant parameters (single Δ)".into(),
        ));
    }
    let l = check_sequence("scan_convolutional", d, c, x)?;
    let k = ssm_kernel(d, c, l)?;
    let xs = x.data();
    let y = (0..l)
        .map(|t| (0..=t).map(|j| k[j] * xs[t - j]).sum())
        .collect();
    Tensor::new(vec![l], y)
}

fn first_non_finite<S: Scalar>(what: &str, data: &[S], row: usize, steps: usize) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite {
            what: what.to_string(),
            step: (i / row) % steps,
        }),
        None => Ok(()),
    }
}

/// Fused diagonal selective scan with a hand-written reverse pass.
///
/// Shapes: `u, delta: [B, L, D]` (delta already positive), `a: [D, N]`
/// (negative), `b, c: [B, L, N]`, `d_skip: [D]`. Every channel `d` runs
/// `h_t = exp(Δ_t a_d) h_{t-1} + φ(Δ_t, a_d) B_t u_t` and emits
/// `y_t = C_t · h_t + D_d u_t`.
pub fn selective_scan_core<'t, S: Scalar>(
    u: &Var<'t, S>,
    delta: &Var<'t, S>,
    a: &Var<'t, S>,
    b: &Var<'t, S>,
    c: &Var<'t, S>,
    d_skip: &Var<'t, S>,
) -> Result<Var<'t, S>> {
    let &[bs, l, dd] = u.shape() else {
        return Err(Error::dim("selective_scan", format!("u must be [B, L, D], got {:?}", u.shape())));
    };
    let n = a.shape().get(1).copied().unwrap_or(0);
    let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(Error::dim(
                "selective_scan",
                format!("{name} has shape {got:?}, expected {want:?}"),
            ))
        }
    };
    expect("delta", delta.shape(), &[bs, l, dd])?;
    expect("A", a.shape(), &[dd, n])?;
    expect("B", b.shape(), &[bs, l, n])?;
    expect("C", c.shape(), &[bs, l, n])?;
    expect("D", d_skip.shape(), &[dd])?;

    first_non_finite("delta", delta.value().data(), dd, l)?;
    first_non_finite("B", b.value().data(), n, l)?;
    first_non_finite("C", c.value().data(), n, l)?;
    if let Some(i) = delta.value().data().iter().position(|&v| !(v > S::zero())) {
        return Err(Error::Domain(format!(
            "selective scan timescale must be positive, got {} at step {}",
            delta.value().data()[i],
            (i / dd) % l
        )));
    }

    let track = [u, delta, a, b, c, d_skip].iter().any(|v| v.is_tracked());
    let (uv, dv, av, bv, cv, skip) = (
        u.value().clone(),
        delta.value().clone(),
        a.value().clone(),
        b.value().clone(),
        c.value().clone(),
        d_skip.value().clone(),
    );
    let mut y = vec![S::zero(); bs * l * dd];
    // h after each step, [B, L, D, N], kept only for the reverse pass
    let mut hist = if track { vec![S::zero(); bs * l * dd * n] } else { Vec::new() };
    {
        let (ud, dl, ad, bd, cd, sd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
        let mut h = vec![S::zero(); n];
        for bi in 0..bs {
            for ch in 0..dd {
                h.iter_mut().for_each(|x| *x = S::zero());
                let arow = &ad[ch * n..(ch + 1) * n];
                for t in 0..l {
                    let row = bi * l + t;
                    let xt = ud[row * dd + ch];
                    let dt = dl[row * dd + ch];
                    let bt = &bd[row * n..(row + 1) * n];
                    let ct = &cd[row * n..(row + 1) * n];
                    let mut acc = S::zero();
                    for k in 0..n {
                        let abar = (dt * arow[k]).exp();
                        h[k] = abar * h[k] + zoh_gain(dt, arow[k]) * bt[k] * xt;
                        acc = acc + ct[k] * h[k];
                    }
                    y[row * dd + ch] = acc + sd[ch] * xt;
                    if track {
                        let o = (row * dd + ch) * n;
                        hist[o..o + n].copy_from_slice(&h);
                    }
                }
            }
        }
    }
    let value = Tensor::new(vec![bs, l, dd], y)?;
    if let Some(t) = value.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "selective scan output".into(),
            step: (t / dd) % l,
        });
    }

    Ok(u.tape().record(value, &[u, delta, a, b, c, d_skip], move |g, _| {
        let gy = g.data();
        let (ud, dl, ad, bd, cd, sd) = (uv.data(), dv.data(), av.data(), bv.data(), cv.data(), skip.data());
        let mut gu = vec![S::zero(); bs * l * dd];
        let mut gdelta = vec![S::zero(); bs * l * dd];
        let mut ga = vec![S::zero(); dd * n];
        let mut gb = vec![S::zero(); bs * l * n];
        let mut gc = vec![S::zero(); bs * l * n];
        let mut gd = vec![S::zero(); dd];
        let mut gh = vec![S::zero(); n];
        for bi in 0..bs {
            for ch in 0..dd {
                gh.iter_mut().for_each(|x| *x = S::zero());
                let arow = &ad[ch * n..(ch + 1) * n];
                for t in (0..l).rev() {
                    let row = bi * l + t;
                    let idx = row * dd + ch;
                    let (xt, dt, gyt) = (ud[idx], dl[idx], gy[idx]);
                    gd[ch] = gd[ch] + gyt * xt;
                    let mut gxt = gyt * sd[ch];
                    let mut gdt = S::zero();
                    let h_now = &hist[idx * n..(idx + 1) * n];
                    for k in 0..n {
                        let ak = arow[k];
                        let h_prev = if t == 0 { S::zero() } else { hist[(idx - dd) * n + k] };
                        let bk = bd[row * n + k];
                        gc[row * n + k] = gc[row * n + k] + gyt * h_now[k];
                        let ghk = gh[k] + gyt * cd[row * n + k];
                        let z = dt * ak;
                        let abar = z.exp();
                        let phi = zoh_gain(dt, ak);
                        let g_abar = ghk * h_prev;
                        let g_phi = ghk * bk * xt;
                        gb[row * n + k] = gb[row * n + k] + ghk * phi * xt;
                        gxt = gxt + ghk * phi * bk;
                        gdt = gdt + g_abar * abar * ak + g_phi * abar;
                        ga[ch * n + k] = ga[ch * n + k] + g_abar * abar * dt + g_phi * dt * dt * gain_slope(z);
                        gh[k] = ghk * abar;
                    }
                    gu[idx] = gxt;
                    gdelta[idx] = gdt;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![bs, l, dd], gu)),
            Some(Tensor::from_parts(vec![bs, l, dd], gdelta)),
            Some(Tensor::from_parts(vec![dd, n], ga)),
            Some(Tensor::from_parts(vec![bs, l, n], gb)),
            Some(Tensor::from_parts(vec![bs, l, n], gc)),
            Some(Tensor::from_parts(vec![dd], gd)),
        ]
    }))
}

/// Learned input-dependent parameterization of one selective scan over `D`
/// channels with `N` states each.
///
/// `x_proj: D -> R + 2N` produces a low-rank timescale input and `B_t`, `C_t`;
/// `dt_proj: R -> D` lifts it back and `Δ_t = softplus(dt_proj(·) + dt_bias)`.
#[derive(Debug, Clone)]
pub struct SelectiveScan {
    pub x_proj: Linear,
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub channels: usize,
    pub state_dim: usize,
    pub dt_rank: usize,
}

impl SelectiveScan {
    pub const DT_MIN: f64 = 1e-3;
    pub const DT_MAX: f64 = 0.1;

    /// `ceil(width / 16)` for a block of model width `width`.
    pub fn default_rank(width: usize) -> usize {
        width.div_ceil(16).max(1)
    }

    /// Initial timescales are log-uniform in `[DT_MIN, DT_MAX]`, `A_log = ln(1..=N)`
    /// and the skip gain is one.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        state_dim: usize,
        dt_rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let r = dt_rank.max(1);
        let x_proj = Linear::new(store, &format!("{name}.x_proj"), channels, r + 2 * state_dim, true, rng)?;
        let dt_w = store.add(
            format!("{name}.dt_proj.weight"),
            uniform_init(&[r, channels], (r as f64).powf(-0.5), rng),
        )?;
        let (lo, hi) = (Self::DT_MIN.ln(), Self::DT_MAX.ln());
        let dt_b = Tensor::from_fn(vec![channels], |_| {
            let dt: f64 = rng.gen_range(lo..hi).exp();
            // inverse softplus
            S::c(dt + (-(-dt).exp_m1()).ln())
        });
        let dt_b = store.add(format!("{name}.dt_proj.bias"), dt_b)?;
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::from_fn(vec![channels, state_dim], |i| S::c((((i % state_dim) + 1) as f64).ln())),
        )?;
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::ones(vec![channels]))?;
        Ok(Self {
            x_proj,
            dt_proj: Linear {
                weight: dt_w,
                bias: Some(dt_b),
                d_in: r,
                d_out: channels,
            },
            a_log,
            d_skip,
            channels,
            state_dim,
            dt_rank: r,
        })
    }

    /// `x: [B, L, D] -> [B, L, D]`.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        if x.shape().len() != 3 || x.shape()[2] != self.channels {
            return Err(Error::dim(
                "selective_scan",
                format!("expected [B, L, {}], got {:?}", self.channels, x.shape()),
            ));
        }
        let (r, n) = (self.dt_rank, self.state_dim);
        let proj = self.x_proj.forward(p, x)?;
        let dt_in = proj.narrow(2, 0, r)?;
        let b = proj.narrow(2, r, n)?;
        let c = proj.narrow(2, r + n, n)?;
        let delta = self.dt_proj.forward(p, &dt_in)?.softplus();
        let a = p.get(self.a_log).exp().neg();
        selective_scan_core(x, &delta, &a, &b, &c, p.get(self.d_skip))
    }

    pub fn numel(&self) -> usize {
        self.x_proj.numel() + self.dt_proj.numel() + self.channels * self.state_dim + self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, Selection};
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Taylor series of `e^z` and `(e^z - 1)/z` to 30 terms.
    fn series_oracle(a: f64, b: f64, dt: f64) -> (f64, f64) {
        let z = dt * a;
        let (mut e, mut g, mut term) = (0.0, 0.0, 1.0);
        for k in 0..30 {
            e += term;
            g += term / (k + 1) as f64;
            term *= z / (k + 1) as f64;
        }
        (e, g * dt * b)
    }

    fn scalar_ssm(a: f64, b: f64, c: f64, dt: f64) -> (DiscreteSsm<f64>, Vec<f64>) {
        let p = SsmParams::new(vec![a], vec![b], vec![c], Delta::Constant(dt)).unwrap();
        (discretize_zoh(&p).unwrap(), p.c)
    }

    #[test]
    fn ln2_step_halves() {
        let (d, _) = scalar_ssm(-1.0, 1.0, 1.0, 2f64.ln());
        assert!((d.a_bar[0] - 0.5).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tiny_step_limit() {
        let (d, _) = scalar_ssm(-3.0, 2.0, 1.0, 1e-14);
        assert!((d.a_bar[0] - 1.0).abs() < 1e-13);
        assert!((d.b_bar[0] - 2e-14).abs() < 1e-26);
    }

    #[test]
    fn non_positive_delta_rejected() {
        let p = SsmParams::new(vec![-1.0], vec![1.0], vec![1.0], Delta::Constant(0.0)).unwrap();
        assert!(matches!(discretize_zoh(&p), Err(Error::Domain(_))));
        assert!(SsmParams::new(vec![0.5], vec![1.0], vec![1.0], Delta::Constant(1.0)).is_err());
    }

    #[test]
    fn hand_recurrence_and_kernel() {
        let d = DiscreteSsm {
            a_bar: vec![0.5],
            b_bar: vec![0.5],
            state_dim: 1,
            time_varying: false,
        };
        let x = Tensor::from_f64(vec![3], &[1.0, 0.0, 0.0]).unwrap();
        let rec = scan_recurrent(&d, &[1.0], &x).unwrap();
        let conv = scan_convolutional(&d, &[1.0], &x).unwrap();
        assert_eq!(rec.data(), &[0.5, 0.25, 0.125]);
        assert_eq!(conv.data(), &[0.5, 0.25, 0.125]);
        assert_eq!(ssm_kernel(&d, &[1.0], 3).unwrap(), vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn zero_input_and_memoryless_cases() {
        let (d, c) = scalar_ssm(-0.7, 1.3, 0.9, 0.2);
        let zeros = scan_recurrent(&d, &c, &Tensor::zeros(vec![5])).unwrap();
        assert!(zeros.data().iter().all(|&v| v == 0.0));

        let d0 = DiscreteSsm::<f64> {
            a_bar: vec![0.0],
            b_bar: vec![0.4],
            state_dim: 1,
            time_varying: false,
        };
        let x = Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 3.0]).unwrap();
        let y = scan_recurrent(&d0, &[2.0], &x).unwrap();
        for (yt, xt) in y.data().iter().zip(x.data()) {
            assert!((yt - 0.8 * xt).abs() < 1e-15);
        }
        let one = scan_convolutional(&d0, &[2.0], &Tensor::from_f64(vec![1], &[3.0]).unwrap()).unwrap();
        assert!((one.data()[0] - 2.4).abs() < 1e-15);
    }

    #[test]
    fn convolution_rejects_time_varying() {
        let p = SsmParams::new(vec![-1.0], vec![1.0], vec![1.0], Delta::PerStep(vec![0.1, 0.2])).unwrap();
        let d = discretize_zoh(&p).unwrap();
        let x = Tensor::ones(vec![2]);
        assert!(scan_recurrent(&d, &p.c, &x).is_ok());
        assert!(matches!(scan_convolutional(&d, &p.c, &x), Err(Error::Contract(_))));
    }

    #[test]
    fn gain_slope_series_meets_closed_form() {
        for z in [-9.9e-3f64, -1.01e-2, 5e-3, -0.5, -3.0] {
            let h = 1e-6;
            let g = |z: f64| z.exp_m1() / z;
            let numeric = (g(z + h) - g(z - h)) / (2.0 * h);
            assert!((gain_slope(z) - numeric).abs() < 1e-8, "z={z}");
        }
    }

    proptest! {
        #[test]
        // |Δa| <= 4 keeps the 30-term truncation error below 1e-14
        fn zoh_matches_series(a in -4.0f64..-1e-3, b in -3.0f64..3.0, dt in 1e-4f64..1.0, tiny in any::<bool>()) {
            let dt = if tiny { dt * 1e-12 } else { dt };
            let (d, _) = scalar_ssm(a, b, 1.0, dt);
            let (ea, eb) = series_oracle(a, b, dt);
            prop_assert!((d.a_bar[0] - ea).abs() < 1e-12);
            prop_assert!((d.b_bar[0] - eb).abs() < 1e-12);
        }

        #[test]
        fn recurrent_equals_convolutional(n in 1usize..=16, l in 1usize..=64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.01..4.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = SsmParams::new(a, b, c, Delta::Constant(rng.gen_range(0.001..1.0))).unwrap();
            let d = discretize_zoh(&p).unwrap();
            let x = Tensor::from_fn(vec![l], |_| rng.gen_range(-1.0..1.0));
            let diff = scan_recurrent(&d, &p.c, &x).unwrap()
                .max_abs_diff(&scan_convolutional(&d, &p.c, &x).unwrap()).unwrap();
            prop_assert!(diff < 1e-10);
        }

        #[test]
        fn state_stays_bounded(n in 1usize..=8, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.05..3.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = SsmParams::new(a, b, vec![0.0; n], Delta::Constant(rng.gen_range(0.01..1.0))).unwrap();
            let d = discretize_zoh(&p).unwrap();
            let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xmax = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let bnorm = d.b_bar.iter().map(|v| v * v).sum::<f64>().sqrt();
            let amax = d.a_bar.iter().cloned().fold(0.0, f64::max);
            let bound = bnorm * xmax / (1.0 - amax) + 1e-12;
            let mut h = vec![0.0; n];
            for x in xs {
                for k in 0..n {
                    h[k] = d.a_bar[k] * h[k] + d.b_bar[k] * x;
                    prop_assert!(h[k].abs() <= bound);
                }
            }
        }

        #[test]
        fn output_is_causal(l in 2usize..20, t in 0usize..19, seed in any::<u64>()) {
            let t = t % (l - 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let deltas: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
            let p = SsmParams::new(vec![-0.5, -2.0], vec![1.0, -0.3], vec![0.7, 1.1], Delta::PerStep(deltas)).unwrap();
            let d = discretize_zoh(&p).unwrap();
            let x = Tensor::from_fn(vec![l], |_| rng.gen_range(-1.0..1.0));
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[t + 1..] {
                *v += rng.gen_range(0.5..2.0);
            }
            let y1 = scan_recurrent(&d, &p.c, &x).unwrap();
            let y2 = scan_recurrent(&d, &p.c, &x2).unwrap();
            prop_assert_eq!(&y1.data()[..=t], &y2.data()[..=t]);
        }
    }

    #[test]
    fn core_matches_per_channel_recurrence() {
        let (bs, l, dd, n) = (2, 7, 3, 4);
        let u = gradcheck::uniform(&[bs, l, dd], -1.0, 1.0, 1);
        let delta = gradcheck::uniform(&[bs, l, dd], 0.05, 0.8, 2);
        let a = gradcheck::uniform(&[dd, n], -2.0, -0.1, 3);
        let b = gradcheck::uniform(&[bs, l, n], -1.0, 1.0, 4);
        let c = gradcheck::uniform(&[bs, l, n], -1.0, 1.0, 5);
        let skip = gradcheck::uniform(&[dd], -1.0, 1.0, 6);
        let tape = Tape::new();
        let k = |t: &Tensor<f64>| tape.constant(t.clone());
        let y = selective_scan_core(&k(&u), &k(&delta), &k(&a), &k(&b), &k(&c), &k(&skip)).unwrap();
        for bi in 0..bs {
            for ch in 0..dd {
                // B and C vary per step, so fold them into per-step gains of a unit-input system
                let mut h = vec![0.0; n];
                for t in 0..l {
                    let r = bi * l + t;
                    let dt = delta.data()[r * dd + ch];
                    let xt = u.data()[r * dd + ch];
                    let mut want = skip.data()[ch] * xt;
                    for s in 0..n {
                        let p = SsmParams::new(vec![a.data()[ch * n + s]], vec![b.data()[r * n + s]], vec![1.0], Delta::Constant(dt)).unwrap();
                        let dz = discretize_zoh(&p).unwrap();
                        h[s] = dz.a_bar[0] * h[s] + dz.b_bar[0] * xt;
                        want += c.data()[r * n + s] * h[s];
                    }
                    assert!((y.value().data()[r * dd + ch] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn core_gradients_match_finite_differences() {
        let (bs, l, dd, n) = (2, 5, 2, 3);
        let inputs = vec![
            gradcheck::uniform(&[bs, l, dd], -1.0, 1.0, 11),
            gradcheck::uniform(&[bs, l, dd], 0.05, 1.5, 12),
            gradcheck::uniform(&[dd, n], -2.0, -0.01, 13),
            gradcheck::uniform(&[bs, l, n], -1.0, 1.0, 14),
            gradcheck::uniform(&[bs, l, n], -1.0, 1.0, 15),
            gradcheck::uniform(&[dd], -1.0, 1.0, 16),
        ];
        let r = gradcheck::check(&inputs, Selection::All, |_, v| {
            let y = selective_scan_core(&v[0], &v[1], &v[2], &v[3], &v[4], &v[5])?;
            gradcheck::project(&y, 17)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }

    #[test]
    fn non_finite_projection_reports_step() {
        let tape = Tape::<f64>::new();
        let mut b = Tensor::zeros(vec![1, 4, 1]);
        b.data_mut()[2] = f64::NAN;
        let k = |t: Tensor<f64>| tape.constant(t);
        let err = selective_scan_core(
            &k(Tensor::ones(vec![1, 4, 1])),
            &k(Tensor::full(vec![1, 4, 1], 0.1)),
            &k(Tensor::full(vec![1, 1], -1.0)),
            &k(b),
            &k(Tensor::zeros(vec![1, 4, 1])),
            &k(Tensor::ones(vec![1])),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 2, .. }), "{err}");
    }

    fn build(dd: usize, n: usize) -> (ParamStore<f64>, SelectiveScan) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SelectiveScan::new(&mut store, "scan", dd, n, 2, &mut rng).unwrap();
        (store, s)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (mut store, s) = build(4, 3);
        if let Some(b) = s.x_proj.bias {
            *store.get_mut(b) = Tensor::zeros(vec![s.dt_rank + 6]);
        }
        let tape = Tape::new();
        let p = store.constants(&tape);
        let y = s.forward(&p, &tape.constant(Tensor::zeros(vec![2, 5, 4]))).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_projections_reduce_to_recurrence() {
        let (dd, n, l) = (3, 2, 6);
        let (mut store, s) = build(dd, n);
        let r = s.dt_rank;
        *store.get_mut(s.x_proj.weight) = Tensor::zeros(vec![dd, r + 2 * n]);
        let bias: Vec<f64> = (0..r + 2 * n).map(|i| 0.3 * i as f64 - 0.4).collect();
        *store.get_mut(s.x_proj.bias.unwrap()) = Tensor::from_f64(vec![r + 2 * n], &bias).unwrap();
        *store.get_mut(s.dt_proj.weight) = Tensor::zeros(vec![r, dd]);
        *store.get_mut(s.d_skip) = Tensor::zeros(vec![dd]);
        let x = gradcheck::uniform(&[1, l, dd], -1.0, 1.0, 9);
        let tape = Tape::new();
        let p = store.constants(&tape);
        let y = s.forward(&p, &tape.constant(x.clone())).unwrap();

        let a_log = store.get(s.a_log).data().to_vec();
        let dt_bias = store.get(s.dt_proj.bias.unwrap()).data().to_vec();
        for ch in 0..dd {
            let dt = crate::tensor::ops::softplus_scalar(dt_bias[ch]);
            let params = SsmParams::from_log(
                &a_log[ch * n..(ch + 1) * n],
                bias[r..r + n].to_vec(),
                bias[r + n..].to_vec(),
                Delta::Constant(dt),
            )
            .unwrap();
            let d = discretize_zoh(&params).unwrap();
            let xc = Tensor::from_fn(vec![l], |t| x.data()[t * dd + ch]);
            let want = scan_recurrent(&d, &params.c, &xc).unwrap();
            for t in 0..l {
                assert!((y.value().data()[t * dd + ch] - want.data()[t]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn parameterized_scan_gradients() {
        let (dd, n, l) = (2, 4, 6);
        let (store, s) = build(dd, n);
        let mut inputs: Vec<Tensor<f64>> = store.values().to_vec();
        inputs.push(gradcheck::uniform(&[1, l, dd], -1.0, 1.0, 21));
        let x_at = inputs.len() - 1;
        let r = gradcheck::check(&inputs, Selection::All, |_, v| {
            let bound = Bound::from_vars(v[..x_at].to_vec());
            let y = s.forward(&bound, &v[x_at])?;
            gradcheck::project(&y, 22)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "{r:?}");
    }
}
