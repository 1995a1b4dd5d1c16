//! Zero-order-hold discretization and the input-dependent selective scan.
//!
//! The state matrix is diagonal: channel `d` owns `N` independent scalar
//! states with decay rates `A[d, n] < 0`. For one step with step size `Δ`:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) · ΔB = φ(ΔA) · ΔB,   φ(z) = (eᶻ − 1) / z
//! h_t = Ā_t h_{t−1} + B̄_t u_t,   y_t = C_t · h_t
//! ```

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// Below this `|ΔA|` the ZOH input gain switches to its Taylor series.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// `φ(z) = (eᶻ − 1)/z`, the ZOH input-gain factor.
pub fn zoh_gain(z: f64) -> f64 {
    if z.abs() < SERIES_THRESHOLD {
        1.0 + z / 2.0 + z * z / 6.0
    } else {
        z.exp_m1() / z
    }
}

/// `φ'(z)`.
pub fn zoh_gain_derivative(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// Discretizes one scalar channel: returns `(Ā, B̄)`.
pub fn zoh_scalar(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0) {
        return Err(Error::Precondition(format!(
            "ZOH step size must be positive, got {delta}"
        )));
    }
    let z = delta * a;
    Ok((z.exp(), zoh_gain(z) * delta * b))
}

/// Discretizes a diagonal SSM.
///
/// `a: [D, N]` per-channel decay rates, `b: [N]` input projection, `delta: [D]`
/// per-channel step sizes. Returns `(Ā, B̄)`, both `[D, N]`.
pub fn zoh_discretize(a: &Tensor, b: &Tensor, delta: &Tensor) -> Result<(Tensor, Tensor)> {
    if a.rank() != 2 {
        return Err(Error::Contract(format!(
            "A must be [D, N], got {:?}",
            a.shape()
        )));
    }
    let (channels, state) = (a.shape()[0], a.shape()[1]);
    if b.numel() != state {
        return Err(Error::shape("zoh_discretize(B)", a.shape(), b.shape()));
    }
    if delta.numel() != channels {
        return Err(Error::shape(
            "zoh_discretize(delta)",
            a.shape(),
            delta.shape(),
        ));
    }
    let mut abar = Vec::with_capacity(channels * state);
    let mut bbar = Vec::with_capacity(channels * state);
    for d in 0..channels {
        for n in 0..state {
            let (ab, bb) = zoh_scalar(
                f64::from(a.data()[d * state + n]),
                f64::from(b.data()[n]),
                f64::from(delta.data()[d]),
            )?;
            abar.push(ab as f32);
            bbar.push(bb as f32);
        }
    }
    Ok((
        Tensor::new(&[channels, state], abar)?,
        Tensor::new(&[channels, state], bbar)?,
    ))
}

/// Borrowed views of the scan operands (row-major).
pub struct ScanInputs<'a> {
    /// `[L, D]`
    pub u: &'a [f32],
    /// `[L, D]`, strictly positive
    pub delta: &'a [f32],
    /// `[D, N]`
    pub a: &'a [f32],
    /// `[L, N]`
    pub b: &'a [f32],
    /// `[L, N]`
    pub c: &'a [f32],
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

pub struct ScanGrads {
    pub du: Vec<f32>,
    pub ddelta: Vec<f32>,
    pub da: Vec<f32>,
    pub db: Vec<f32>,
    pub dc: Vec<f32>,
}

/// Runs the recurrence. Channels are independent and may run in parallel;
/// each channel is a strictly sequential loop over time.
///
/// When `keep_states`, the second result holds `h_t` laid out `[D, L, N]`.
pub(crate) fn scan_forward(
    inp: &ScanInputs<'_>,
    keep_states: bool,
    exec: Exec,
) -> (Vec<f32>, Vec<f32>) {
    let (len, ch, ns) = (inp.len, inp.channels, inp.state);
    let per_channel = par::map_indexed(ch, exec, |d| {
        let mut h = vec![0.0f64; ns];
        let mut y = vec![0.0f32; len];
        let mut states = if keep_states {
            Vec::with_capacity(len * ns)
        } else {
            Vec::new()
        };
        for t in 0..len {
            let delta = f64::from(inp.delta[t * ch + d]);
            let u = f64::from(inp.u[t * ch + d]);
            let mut acc = 0.0f64;
            for n in 0..ns {
                let z = delta * f64::from(inp.a[d * ns + n]);
                let bbar = zoh_gain(z) * delta * f64::from(inp.b[t * ns + n]);
                h[n] = z.exp() * h[n] + bbar * u;
                acc += f64::from(inp.c[t * ns + n]) * h[n];
            }
            y[t] = acc as f32;
            if keep_states {
                states.extend(h.iter().map(|&v| v as f32));
            }
        }
        (y, states)
    });
    let mut y = vec![0.0f32; len * ch];
    let mut states = Vec::with_capacity(if keep_states { ch * len * ns } else { 0 });
    for (d, (yd, sd)) in per_channel.into_iter().enumerate() {
        for t in 0..len {
            y[t * ch + d] = yd[t];
        }
        states.extend(sd);
    }
    (y, states)
}

/// Reverse sweep through the recurrence given upstream `gy: [L, D]`.
pub(crate) fn scan_backward(
    inp: &ScanInputs<'_>,
    states: &[f32],
    gy: &[f32],
    exec: Exec,
) -> ScanGrads {
    let (len, ch, ns) = (inp.len, inp.channels, inp.state);
    assert_eq!(states.len(), ch * len * ns, "scan states were not retained");
    struct Partial {
        du: Vec<f32>,
        ddelta: Vec<f32>,
        da: Vec<f64>,
        db: Vec<f64>,
        dc: Vec<f64>,
    }
    let partials = par::map_indexed(ch, exec, |d| {
        let hs = &states[d * len * ns..(d + 1) * len * ns];
        let mut out = Partial {
            du: vec![0.0; len],
            ddelta: vec![0.0; len],
            da: vec![0.0; ns],
            db: vec![0.0; len * ns],
            dc: vec![0.0; len * ns],
        };
        let mut carry = vec![0.0f64; ns];
        for t in (0..len).rev() {
            let delta = f64::from(inp.delta[t * ch + d]);
            let u = f64::from(inp.u[t * ch + d]);
            let g = f64::from(gy[t * ch + d]);
            let mut du = 0.0f64;
            let mut ddelta = 0.0f64;
            for n in 0..ns {
                let a = f64::from(inp.a[d * ns + n]);
                let b = f64::from(inp.b[t * ns + n]);
                let c = f64::from(inp.c[t * ns + n]);
                let h = f64::from(hs[t * ns + n]);
                let h_prev = if t > 0 {
                    f64::from(hs[(t - 1) * ns + n])
                } else {
                    0.0
                };
                let gh = g * c + carry[n];
                out.dc[t * ns + n] = g * h;
                let z = delta * a;
                let abar = z.exp();
                let gain = zoh_gain(z);
                let ga = gh * h_prev;
                let gb = gh * u;
                du += gh * gain * delta * b;
                let dz = ga * abar + gb * zoh_gain_derivative(z) * delta * b;
                ddelta += dz * a + gb * gain * b;
                out.da[n] += dz * delta;
                out.db[t * ns + n] = gb * gain * delta;
                carry[n] = gh * abar;
            }
            out.du[t] = du as f32;
            out.ddelta[t] = ddelta as f32;
        }
        out
    });
    let mut grads = ScanGrads {
        du: vec![0.0; len * ch],
        ddelta: vec![0.0; len * ch],
        da: vec![0.0; ch * ns],
        db: vec![0.0; len * ns],
        dc: vec![0.0; len * ns],
    };
    let mut db = vec![0.0f64; len * ns];
    let mut dc = vec![0.0f64; len * ns];
    for (d, p) in partials.into_iter().enumerate() {
        for t in 0..len {
            grads.du[t * ch + d] = p.du[t];
            grads.ddelta[t * ch + d] = p.ddelta[t];
        }
        for n in 0..ns {
            grads.da[d * ns + n] = p.da[n] as f32;
        }
        for (acc, v) in db.iter_mut().zip(&p.db) {
            *acc += v;
        }
        for (acc, v) in dc.iter_mut().zip(&p.dc) {
            *acc += v;
        }
    }
    grads.db = db.into_iter().map(|v| v as f32).collect();
    grads.dc = dc.into_iter().map(|v| v as f32).collect();
    grads
}

/// Untracked selective scan: `u, delta: [L, D]`, `a: [D, N]`, `b, c: [L, N]`.
pub fn selective_scan(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    exec: Exec,
) -> Result<Tensor> {
    if u.rank() != 2 || delta.shape() != u.shape() {
        return Err(Error::shape("selective_scan", u.shape(), delta.shape()));
    }
    let (len, channels) = (u.shape()[0], u.shape()[1]);
    if a.rank() != 2 || a.shape()[0] != channels {
        return Err(Error::shape("selective_scan(A)", u.shape(), a.shape()));
    }
    let state = a.shape()[1];
    for (name, t) in [("selective_scan(B)", b), ("selective_scan(C)", c)] {
        if t.shape() != [len, state] {
            return Err(Error::shape(name, &[len, state], t.shape()));
        }
    }
    if let Some(bad) = delta.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::Precondition(format!(
            "scan step size must be positive, found {bad}"
        )));
    }
    let inputs = ScanInputs {
        u: u.data(),
        delta: delta.data(),
        a: a.data(),
        b: b.data(),
        c: c.data(),
        len,
        channels,
        state,
    };
    let (y, _) = scan_forward(&inputs, false, exec);
    Tensor::new(&[len, channels], y)
}
