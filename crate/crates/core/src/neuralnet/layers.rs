//! Layer primitives on flat row-major slices. Forward passes return what the
//! matching backward pass needs; backward passes accumulate into gradient slices.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub in_ch: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.filters * self.in_ch * self.kernel
    }

    pub fn output_len(&self, n_in: usize) -> Option<usize> {
        (n_in >= self.kernel).then(|| (n_in - self.kernel) / self.stride + 1)
    }
}

/// Valid 1-D cross-correlation. `x` is `in_ch x n_in`, `w` is
/// `filters x in_ch x kernel`; returns the pre-activation `filters x n_out`.
pub fn conv1d_forward(
    shape: ConvShape,
    w: &[f64],
    b: &[f64],
    x: &[f64],
    n_in: usize,
) -> Result<(Vec<f64>, usize)> {
    let n_out = shape.output_len(n_in).ok_or(Error::TooShort {
        needed: shape.kernel,
        got: n_in,
    })?;
    let ConvShape {
        in_ch,
        filters,
        kernel,
        stride,
    } = shape;
    debug_assert_eq!(x.len(), in_ch * n_in);
    let mut out = vec![0.0; filters * n_out];
    for f in 0..filters {
        let row = &mut out[f * n_out..(f + 1) * n_out];
        row.fill(b[f]);
        for c in 0..in_ch {
            let wk = &w[(f * in_ch + c) * kernel..(f * in_ch + c + 1) * kernel];
            let xc = &x[c * n_in..(c + 1) * n_in];
            for (t, o) in row.iter_mut().enumerate() {
                let xs = &xc[t * stride..t * stride + kernel];
                *o += wk.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Ok((out, n_out))
}

/// Backward of [`conv1d_forward`] given the gradient of the pre-activation.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    shape: ConvShape,
    w: &[f64],
    x: &[f64],
    n_in: usize,
    d_pre: &[f64],
    n_out: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let ConvShape {
        in_ch,
        kernel,
        stride,
        filters,
    } = shape;
    for f in 0..filters {
        let g = &d_pre[f * n_out..(f + 1) * n_out];
        db[f] += g.iter().sum::<f64>();
        for c in 0..in_ch {
            let base = (f * in_ch + c) * kernel;
            let xc = &x[c * n_in..(c + 1) * n_in];
            let dwk = &mut dw[base..base + kernel];
            for (t, &gt) in g.iter().enumerate() {
                if gt == 0.0 {
                    continue;
                }
                let xs = &xc[t * stride..t * stride + kernel];
                for (d, &xv) in dwk.iter_mut().zip(xs) {
                    *d += gt * xv;
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let wk = &w[base..base + kernel];
                let dxc = &mut dx[c * n_in..(c + 1) * n_in];
                for (t, &gt) in g.iter().enumerate() {
                    if gt == 0.0 {
                        continue;
                    }
                    for (d, &wv) in dxc[t * stride..t * stride + kernel].iter_mut().zip(wk) {
                        *d += gt * wv;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruShape {
    pub input: usize,
    pub units: usize,
}

impl GruShape {
    /// Lengths of the stacked `[z; r; h]` blocks `W`, `U` and `b`.
    pub fn block_lens(&self) -> (usize, usize, usize) {
        let u = self.units;
        (3 * u * self.input, 3 * u * u, 3 * u)
    }
}

/// Per-step gate activations and the hidden state sequence `h_0..h_T`.
#[derive(Debug, Clone)]
pub struct GruTrace {
    pub steps: usize,
    pub units: usize,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub hc: Vec<f64>,
}

impl GruTrace {
    pub fn hidden(&self, t: usize) -> &[f64] {
        &self.h[t * self.units..(t + 1) * self.units]
    }

    pub fn last(&self) -> &[f64] {
        self.hidden(self.steps)
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn matvec_add(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t_add(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (row, &s) in m.chunks_exact(cols).zip(v) {
        if s == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * s;
        }
    }
}

fn outer_add(out: &mut [f64], cols: usize, a: &[f64], b: &[f64]) {
    for (row, &s) in out.chunks_exact_mut(cols).zip(a) {
        if s == 0.0 {
            continue;
        }
        for (o, &bv) in row.iter_mut().zip(b) {
            *o += s * bv;
        }
    }
}

/// Runs the GRU over `xs` (`steps x input`, row per time step):
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h̃`.
pub fn gru_forward(
    shape: GruShape,
    w: &[f64],
    u: &[f64],
    b: &[f64],
    xs: &[f64],
    steps: usize,
    h0: &[f64],
) -> GruTrace {
    let GruShape { input, units } = shape;
    debug_assert_eq!(xs.len(), steps * input);
    let mut h = Vec::with_capacity((steps + 1) * units);
    h.extend_from_slice(h0);
    let mut zs = vec![0.0; steps * units];
    let mut rs = vec![0.0; steps * units];
    let mut hcs = vec![0.0; steps * units];
    let (u_zr, u_h) = u.split_at(2 * units * units);
    let mut ax = vec![0.0; 3 * units];
    let mut ah = vec![0.0; 2 * units];
    let mut rh = vec![0.0; units];
    let mut ahh = vec![0.0; units];
    for t in 0..steps {
        let x = &xs[t * input..(t + 1) * input];
        let hp = h[t * units..(t + 1) * units].to_vec();
        ax.copy_from_slice(b);
        matvec_add(w, input, x, &mut ax);
        ah.fill(0.0);
        matvec_add(u_zr, units, &hp, &mut ah);
        let z = &mut zs[t * units..(t + 1) * units];
        let r = &mut rs[t * units..(t + 1) * units];
        for j in 0..units {
            z[j] = sigmoid(ax[j] + ah[j]);
            r[j] = sigmoid(ax[units + j] + ah[units + j]);
            rh[j] = r[j] * hp[j];
        }
        ahh.fill(0.0);
        matvec_add(u_h, units, &rh, &mut ahh);
        let hc = &mut hcs[t * units..(t + 1) * units];
        for j in 0..units {
            hc[j] = (ax[2 * units + j] + ahh[j]).tanh();
            h.push((1.0 - z[j]) * hp[j] + z[j] * hc[j]);
        }
    }
    GruTrace {
        steps,
        units,
        h,
        z: zs,
        r: rs,
        hc: hcs,
    }
}

/// Backpropagation through time for [`gru_forward`], starting from the
/// gradient of the final hidden state. Returns the gradient w.r.t. `h_0`.
#[allow(clippy::too_many_arguments)]
pub fn gru_backward(
    shape: GruShape,
    w: &[f64],
    u: &[f64],
    xs: &[f64],
    trace: &GruTrace,
    dh_last: &[f64],
    dw: &mut [f64],
    du: &mut [f64],
    db: &mut [f64],
    mut dxs: Option<&mut [f64]>,
) -> Vec<f64> {
    let GruShape { input, units } = shape;
    let uu = units * units;
    let mut dh = dh_last.to_vec();
    let mut da = vec![0.0; 3 * units];
    let mut drh = vec![0.0; units];
    let mut rh = vec![0.0; units];
    let mut dh_prev = vec![0.0; units];
    for t in (0..trace.steps).rev() {
        let x = &xs[t * input..(t + 1) * input];
        let hp = trace.hidden(t);
        let z = &trace.z[t * units..(t + 1) * units];
        let r = &trace.r[t * units..(t + 1) * units];
        let hc = &trace.hc[t * units..(t + 1) * units];
        for j in 0..units {
            let dz = dh[j] * (hc[j] - hp[j]);
            let dhc = dh[j] * z[j];
            dh_prev[j] = dh[j] * (1.0 - z[j]);
            da[j] = dz * z[j] * (1.0 - z[j]);
            da[2 * units + j] = dhc * (1.0 - hc[j] * hc[j]);
            rh[j] = r[j] * hp[j];
        }
        let (da_zr, da_h) = da.split_at_mut(2 * units);
        drh.fill(0.0);
        matvec_t_add(&u[2 * uu..], units, da_h, &mut drh);
        outer_add(&mut du[2 * uu..], units, da_h, &rh);
        for j in 0..units {
            dh_prev[j] += drh[j] * r[j];
            let dr = drh[j] * hp[j];
            da_zr[units + j] = dr * r[j] * (1.0 - r[j]);
        }
        outer_add(&mut du[..2 * uu], units, da_zr, hp);
        matvec_t_add(&u[..2 * uu], units, da_zr, &mut dh_prev);
        outer_add(dw, input, &da, x);
        for (d, a) in db.iter_mut().zip(&da) {
            *d += a;
        }
        if let Some(dxs) = dxs.as_deref_mut() {
            matvec_t_add(w, input, &da, &mut dxs[t * input..(t + 1) * input]);
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    dh
}

/// `w x + b` with `w` stored `classes x input`.
pub fn dense_forward(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    matvec_add(w, x.len(), x, &mut out);
    out
}

/// Accumulates the dense-layer gradients and returns the input gradient.
pub fn dense_backward(
    w: &[f64],
    x: &[f64],
    d_out: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    outer_add(dw, x.len(), d_out, x);
    for (d, g) in db.iter_mut().zip(d_out) {
        *d += g;
    }
    let mut dx = vec![0.0; x.len()];
    matvec_t_add(w, x.len(), d_out, &mut dx);
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-ln softmax(logits)[label]`, computed without forming the probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_example() {
        let shape = ConvShape {
            in_ch: 1,
            filters: 1,
            kernel: 3,
            stride: 1,
        };
        let (out, n) =
            conv1d_forward(shape, &[1.0, 0.0, -1.0], &[0.0], &[1.0, 2.0, 3.0, 4.0], 4).unwrap();
        assert_eq!(n, 2);
        assert_eq!(out, vec![-2.0, -2.0]);
    }

    #[test]
    fn conv_output_length() {
        let shape = ConvShape {
            in_ch: 2,
            filters: 3,
            kernel: 5,
            stride: 2,
        };
        assert_eq!(shape.output_len(100), Some(48));
        assert_eq!(shape.output_len(4), None);
        let x = vec![0.5; 200];
        let (out, n) = conv1d_forward(shape, &vec![0.1; 30], &[0.0; 3], &x, 100).unwrap();
        assert_eq!((out.len(), n), (144, 48));
        assert!(matches!(
            conv1d_forward(shape, &vec![0.1; 30], &[0.0; 3], &x[..8], 4),
            Err(Error::TooShort { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn zero_gru_halves_state() {
        let shape = GruShape { input: 2, units: 3 };
        let (lw, lu, lb) = shape.block_lens();
        let xs = vec![0.7; 2 * 6];
        let v = [1.0, -2.0, 0.25];
        let tr = gru_forward(
            shape,
            &vec![0.0; lw],
            &vec![0.0; lu],
            &vec![0.0; lb],
            &xs,
            6,
            &v,
        );
        for t in 0..=6 {
            for j in 0..3 {
                assert_eq!(tr.hidden(t)[j], v[j] / 2f64.powi(t as i32));
            }
        }
        let tr0 = gru_forward(
            shape,
            &vec![0.0; lw],
            &vec![0.0; lu],
            &vec![0.0; lb],
            &xs,
            6,
            &[0.0; 3],
        );
        assert!(tr0.h.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn gru_single_step_by_hand() {
        let shape = GruShape { input: 1, units: 1 };
        // W = [wz, wr, wh], U = [uz, ur, uh], b = [bz, br, bh]
        let (w, u, b) = ([0.5, -0.3, 0.8], [0.2, 0.4, -0.6], [0.1, 0.0, -0.2]);
        let (x, h0) = (1.5, 0.3);
        let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
        let z = sig(0.5 * x + 0.2 * h0 + 0.1);
        let r = sig(-0.3 * x + 0.4 * h0);
        let hc = (0.8 * x - 0.6 * (r * h0) - 0.2).tanh();
        let expect = (1.0 - z) * h0 + z * hc;
        let tr = gru_forward(shape, &w, &u, &b, &[x], 1, &[h0]);
        assert!((tr.last()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn softmax_and_entropy() {
        let p = softmax(&[0.0; 4]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!((cross_entropy(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] == 1.0 && p[1] >= 0.0);
        assert!(cross_entropy(&[1000.0, 0.0], 1).is_finite());
    }
}
