//! Zero-order-hold discretization and the selective state-space recurrence.
//!
//! `A` is diagonal (one entry per channel and state), so every matrix
//! expression of the discretization reduces to scalars:
//!
//! ```text
//! Ā = exp(ΔA)
//! B̄ = (ΔA)⁻¹ (exp(ΔA) − 1) ΔB = Δ · φ(ΔA) · B,   φ(u) = (eᵘ − 1) / u
//! ```

use std::ops::Range;

use crate::error::{Error, Result};

/// Below this `|ΔA|` the series form of `φ` is used.
pub const SMALL_ARG: f64 = 1e-8;

/// `φ(u) = (eᵘ − 1)/u`, continuous at 0.
pub fn phi(u: f64) -> f64 {
    if u.abs() < SMALL_ARG {
        1.0 + 0.5 * u
    } else {
        u.exp_m1() / u
    }
}

/// `dφ/du`.
pub fn phi_grad(u: f64) -> f64 {
    exp_phi(u).2
}

/// `(eᵘ, φ(u), φ'(u))` from a single exponential; the series branch keeps
/// the cancellation-prone small arguments exact.
#[inline]
pub fn exp_phi(u: f64) -> (f64, f64, f64) {
    let e = u.exp();
    if u.abs() >= 0.1 {
        let ph = (e - 1.0) / u;
        (e, ph, (e - ph) / u)
    } else {
        // φ(u) = Σ uᵏ/(k+1)!, φ'(u) = Σ k uᵏ⁻¹/(k+1)!
        let mut ph = 0.0;
        let mut dph = 0.0;
        let mut c = 1.0 / 479_001_600.0; // 1/12!
        for k in (0..=10).rev() {
            // c = 1/(k+2)! here; the next coefficient is 1/(k+1)!
            dph = dph * u + (k + 1) as f64 * c;
            c *= (k + 2) as f64;
            ph = ph * u + c;
        }
        (e, ph, dph)
    }
}

/// Discretizes one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize_scalar(a: f64, b: f64, delta: f64) -> (f64, f64) {
    let u = delta * a;
    (u.exp(), delta * phi(u) * b)
}

/// Discretized system for a whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    /// `[S, E, N]`
    pub a_bar: Vec<f64>,
    /// `[S, E, N]`
    pub b_bar: Vec<f64>,
}

/// Discretizes `A: [E, N]`, `B: [S, N]`, `Δ: [S, E]`.
pub fn discretize(a: &[f64], b: &[f64], delta: &[f64], e: usize, n: usize) -> Result<Discretized> {
    if a.len() != e * n || !b.len().is_multiple_of(n) || !delta.len().is_multiple_of(e) || b.len() / n != delta.len() / e {
        return Err(Error::shape("discretize expects A [E,N], B [S,N], delta [S,E]"));
    }
    let s = delta.len() / e;
    let mut a_bar = Vec::with_capacity(s * e * n);
    let mut b_bar = Vec::with_capacity(s * e * n);
    for i in 0..s {
        for ch in 0..e {
            let dt = delta[i * e + ch];
            for k in 0..n {
                let (ab, bb) = discretize_scalar(a[ch * n + k], b[i * n + k], dt);
                a_bar.push(ab);
                b_bar.push(bb);
            }
        }
    }
    Ok(Discretized { a_bar, b_bar })
}

/// Shapes of one scan call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub steps: usize,
    pub channels: usize,
    pub state: usize,
}

/// Inputs of the selective scan, borrowed row-major buffers.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a> {
    /// `[S, E]`
    pub x: &'a [f64],
    /// `[S, E]`, positive
    pub delta: &'a [f64],
    /// `[E, N]`, negative
    pub a: &'a [f64],
    /// `[S, N]`
    pub b: &'a [f64],
    /// `[S, N]`
    pub c: &'a [f64],
    /// `[E]`
    pub d: &'a [f64],
}

impl ScanInputs<'_> {
    pub fn dims(&self) -> Result<ScanDims> {
        let e = self.d.len();
        if e == 0 || !self.x.len().is_multiple_of(e) {
            return Err(Error::shape("scan: x must be [S, E] with E = len(D)"));
        }
        let s = self.x.len() / e;
        if !self.a.len().is_multiple_of(e) {
            return Err(Error::shape("scan: A must be [E, N]"));
        }
        let n = self.a.len() / e;
        if self.delta.len() != s * e || self.b.len() != s * n || self.c.len() != s * n {
            return Err(Error::shape(format!(
                "scan: inconsistent shapes for S={s}, E={e}, N={n}"
            )));
        }
        Ok(ScanDims {
            steps: s,
            channels: e,
            state: n,
        })
    }
}

/// Output of [`selective_scan`]: `y: [S, E]`, the hidden state after every
/// step `[S, E, N]`, and `(Ā, φ, φ')` per element `[S, E, N, 3]`; the
/// backward pass reuses both.
#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub y: Vec<f64>,
    pub states: Vec<f64>,
    pub disc: Vec<f64>,
}

/// Runs `h ← Ā⊙h + B̄⊙x`, `y = h·C + D⊙x` along each segment, starting each
/// segment from `h = 0`.
pub fn selective_scan(inp: ScanInputs<'_>, segments: &[Range<usize>]) -> Result<ScanOutput> {
    let ScanDims {
        steps: s,
        channels: e,
        state: n,
    } = inp.dims()?;
    check_segments(segments, s)?;
    let mut y = vec![0.0; s * e];
    let mut states = vec![0.0; s * e * n];
    let mut disc = vec![0.0; 3 * s * e * n];
    let mut h = vec![0.0; e * n];
    for seg in segments {
        h.fill(0.0);
        for i in seg.clone() {
            let xi = &inp.x[i * e..(i + 1) * e];
            let bi = &inp.b[i * n..(i + 1) * n];
            let ci = &inp.c[i * n..(i + 1) * n];
            for ch in 0..e {
                let dt = inp.delta[i * e + ch];
                let mut acc = 0.0;
                for k in 0..n {
                    let u = dt * inp.a[ch * n + k];
                    let (a_bar, ph, dph) = exp_phi(u);
                    let slot = 3 * ((i * e + ch) * n + k);
                    disc[slot] = a_bar;
                    disc[slot + 1] = ph;
                    disc[slot + 2] = dph;
                    let b_bar = dt * ph * bi[k];
                    let hk = &mut h[ch * n + k];
                    *hk = a_bar * *hk + b_bar * xi[ch];
                    acc += *hk * ci[k];
                }
                let out = acc + inp.d[ch] * xi[ch];
                if !out.is_finite() {
                    return Err(Error::NonFinite {
                        what: "selective scan",
                        step: i,
                    });
                }
                y[i * e + ch] = out;
            }
            states[i * e * n..(i + 1) * e * n].copy_from_slice(&h);
        }
    }
    Ok(ScanOutput { y, states, disc })
}

/// Gradients of the scan inputs, same layouts as [`ScanInputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// Reverse-mode pass of [`selective_scan`] given `dL/dy`, reusing the
/// forward states and discretization.
pub fn selective_scan_backward(
    inp: ScanInputs<'_>,
    segments: &[Range<usize>],
    fwd: &ScanOutput,
    gy: &[f64],
) -> Result<ScanGrads> {
    let (states, disc) = (&fwd.states, &fwd.disc);
    let ScanDims {
        steps: s,
        channels: e,
        state: n,
    } = inp.dims()?;
    if states.len() != s * e * n || disc.len() != 3 * s * e * n || gy.len() != s * e {
        return Err(Error::shape("scan backward: cached forward buffers do not match the inputs"));
    }
    let mut g = ScanGrads {
        x: vec![0.0; s * e],
        delta: vec![0.0; s * e],
        a: vec![0.0; e * n],
        b: vec![0.0; s * n],
        c: vec![0.0; s * n],
        d: vec![0.0; e],
    };
    // carry = dL/dh_i flowing in from step i+1, already multiplied by Ā_{i+1}.
    let mut carry = vec![0.0; e * n];
    for seg in segments.iter().rev() {
        carry.fill(0.0);
        for i in seg.clone().rev() {
            let xi = &inp.x[i * e..(i + 1) * e];
            let bi = &inp.b[i * n..(i + 1) * n];
            let ci = &inp.c[i * n..(i + 1) * n];
            let h_now = &states[i * e * n..(i + 1) * e * n];
            let h_prev = (i > seg.start).then(|| &states[(i - 1) * e * n..i * e * n]);
            for ch in 0..e {
                let gyi = gy[i * e + ch];
                let dt = inp.delta[i * e + ch];
                g.d[ch] += gyi * xi[ch];
                g.x[i * e + ch] += gyi * inp.d[ch];
                for k in 0..n {
                    let idx = ch * n + k;
                    g.c[i * n + k] += gyi * h_now[idx];
                    let gh = gyi * ci[k] + carry[idx];
                    let a = inp.a[idx];
                    let slot = 3 * ((i * e + ch) * n + k);
                    let (a_bar, ph, dph) = (disc[slot], disc[slot + 1], disc[slot + 2]);
                    let b_bar = dt * ph * bi[k];
                    let hp = h_prev.map_or(0.0, |hp| hp[idx]);
                    let g_abar = gh * hp;
                    let g_bbar = gh * xi[ch];
                    g.x[i * e + ch] += gh * b_bar;
                    // Ā = exp(u), B̄ = Δ φ(u) B, u = Δ A
                    let gu = g_abar * a_bar + g_bbar * dt * bi[k] * dph;
                    g.delta[i * e + ch] += g_bbar * ph * bi[k] + gu * a;
                    g.a[idx] += gu * dt;
                    g.b[i * n + k] += g_bbar * dt * ph;
                    carry[idx] = gh * a_bar;
                }
            }
        }
    }
    Ok(g)
}

fn check_segments(segments: &[Range<usize>], steps: usize) -> Result<()> {
    let mut next = 0;
    for seg in segments {
        if seg.start != next || seg.end < seg.start {
            return Err(Error::invalid("scan segments must tile the sequence in order"));
        }
        next = seg.end;
    }
    if next != steps {
        return Err(Error::invalid("scan segments do not cover the sequence"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_discretization() {
        let (a_bar, b_bar) = discretize_scalar(-1.0, 3.0, 2f64.ln());
        assert!((a_bar - 0.5).abs() < 1e-15);
        assert!((b_bar - 1.5).abs() < 1e-15);
        let (a_bar, b_bar) = discretize_scalar(-1e-300, 2.0, 0.25);
        assert_eq!(a_bar, 1.0);
        assert!((b_bar - 0.5).abs() < 1e-15);
    }

    #[test]
    fn phi_grad_matches_difference_quotient() {
        for &u in &[-5.0, -1.0, -0.3, -1e-3, -2e-5, -1e-9, 0.0, 1e-6, 0.7] {
            let h = 1e-6;
            let fd = (phi(u + h) - phi(u - h)) / (2.0 * h);
            assert!((fd - phi_grad(u)).abs() < 1e-7, "u={u}: {fd} vs {}", phi_grad(u));
        }
    }

    #[test]
    fn single_exponential_form_agrees() {
        for i in -400..=400 {
            let u = i as f64 * 0.0125 - 1e-7 * (i % 3) as f64;
            let (e, ph, dph) = exp_phi(u);
            assert_eq!(e, u.exp());
            assert!((ph - phi(u)).abs() <= 2e-15 * phi(u).abs(), "u={u}");
            // 25-term power series of φ' near zero, closed form elsewhere
            let reference: f64 = if u.abs() >= 1.0 {
                (u * u.exp() - u.exp_m1()) / (u * u)
            } else {
                (1..25)
                .map(|k| k as f64 * u.powi(k - 1) / (1..=k + 1).map(|j| j as f64).product::<f64>())
                .sum()
            };
            assert!((dph - reference).abs() <= 1e-14 * reference.abs().max(1.0), "u={u}: {dph} vs {reference}");
        }
        assert_eq!(exp_phi(0.0), (1.0, 1.0, 0.5));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (s, e, n) = (5, 2, 3);
        let x = vec![0.0; s * e];
        let delta = vec![0.1; s * e];
        let a = vec![-1.0; e * n];
        let b = vec![0.4; s * n];
        let c = vec![0.7; s * n];
        let d = vec![1.0; e];
        let out = selective_scan(
            ScanInputs { x: &x, delta: &delta, a: &a, b: &b, c: &c, d: &d },
            &[0..s],
        )
        .unwrap();
        assert!(out.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_reports_step() {
        let x = vec![1.0, f64::NAN];
        let delta = vec![0.1, 0.1];
        let a = vec![-1.0];
        let b = vec![1.0, 1.0];
        let c = vec![1.0, 1.0];
        let d = vec![1.0];
        let err = selective_scan(
            ScanInputs { x: &x, delta: &delta, a: &a, b: &b, c: &c, d: &d },
            &[0..2],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }));
    }

    #[test]
    fn segments_must_tile() {
        let x = vec![0.0; 4];
        let inp = ScanInputs {
            x: &x,
            delta: &x,
            a: &[-1.0],
            b: &x,
            c: &x,
            d: &[1.0],
        };
        assert!(selective_scan(inp, &[0..2]).is_err());
        assert!(selective_scan(inp, &[0..2, 3..4]).is_err());
        assert!(selective_scan(inp, &[0..2, 2..4]).is_ok());
    }
}
