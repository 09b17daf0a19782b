//! Gated recurrent unit and its bidirectional wrapper.
//!
//! For input `x_t` and previous state `h_{t-1}`:
//!
//! ```text
//! z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
//! r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
//! c_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
//! h_t = (1 - z_t) * h_{t-1} + z_t * c_t
//! ```
//!
//! Sequences start from `h_0 = 0`.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{gemm, sigmoid_scalar};
use crate::layers::glorot;
use crate::tensor::{Element, Tensor};

/// Suffixes of the nine GRU parameter tensors, in storage order.
pub const GRU_PARAM_NAMES: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T = f32> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Element> GruParams<T> {
    pub fn zeros(units: usize, input_dim: usize) -> Self {
        let w = || Tensor::zeros([units, input_dim]);
        let u = || Tensor::zeros([units, units]);
        let b = || Tensor::zeros([units]);
        GruParams {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            u_z: u(),
            u_r: u(),
            u_h: u(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Glorot-uniform matrices, zero biases.
    pub fn glorot(units: usize, input_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(units, input_dim);
        for w in [&mut p.w_z, &mut p.w_r, &mut p.w_h] {
            glorot(w, input_dim, units, rng);
        }
        for u in [&mut p.u_z, &mut p.u_r, &mut p.u_h] {
            glorot(u, units, units, rng);
        }
        p
    }

    pub fn units(&self) -> usize {
        self.b_z.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn tensors(&self) -> [&Tensor<T>; 9] {
        [
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z, &self.b_r, &self.b_h,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let units = self.units();
        let input_dim = self.w_z.shape().get(1).copied().unwrap_or(0);
        let expect = |t: &Tensor<T>, shape: &[usize], name: &str| {
            if t.shape() == shape {
                Ok(())
            } else {
                dim_err(format!(
                    "GRU parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))
            }
        };
        for (t, name) in self.tensors().into_iter().zip(GRU_PARAM_NAMES) {
            let shape: &[usize] = match name.as_bytes()[0] {
                b'w' => &[units, input_dim],
                b'u' => &[units, units],
                _ => &[units],
            };
            expect(t, shape, name)?;
        }
        Ok(())
    }
}

/// `y[i] = sum_j m[i, j] * v[j]`, accumulated left to right.
fn matvec<T: Element>(m: &[T], v: &[T], out: &mut [T]) {
    let n = v.len();
    for (o, row) in out.iter_mut().zip(m.chunks_exact(n)) {
        let mut s = T::zero();
        for (&a, &b) in row.iter().zip(v) {
            s += a * b;
        }
        *o = s;
    }
}

/// `out[j] += sum_i m[i, j] * v[i]`.
fn matvec_t_add<T: Element>(m: &[T], v: &[T], out: &mut [T]) {
    let n = out.len();
    for (&vi, row) in v.iter().zip(m.chunks_exact(n)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// Forward activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruTrace<T> {
    input: Tensor<T>,
    /// `h_0 .. h_T`, row-major `(T+1) x units`.
    h: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    c: Vec<T>,
}

impl<T: Element> GruTrace<T> {
    pub fn steps(&self) -> usize {
        self.input.shape()[0]
    }

    fn units(&self) -> usize {
        self.z.len() / self.steps()
    }

    /// Hidden state after step `t` (1-based; `t = 0` is the zero state).
    pub fn state(&self, t: usize) -> &[T] {
        let u = self.units();
        &self.h[t * u..(t + 1) * u]
    }

    pub fn final_state(&self) -> &[T] {
        self.state(self.steps())
    }

    /// All hidden states `h_1 .. h_T` as a `[T, units]` tensor.
    pub fn sequence(&self) -> Tensor<T> {
        let u = self.units();
        Tensor::new([self.steps(), u], self.h[u..].to_vec()).expect("trace shape")
    }
}

fn check_sequence<T: Element>(x: &Tensor<T>, p: &GruParams<T>) -> Result<usize> {
    let &[steps, dim] = x.shape() else {
        return dim_err(format!("GRU input must be [T, input_dim], got {:?}", x.shape()));
    };
    if steps == 0 {
        return Err(Error::EmptySequence("GRU input has zero time steps".into()));
    }
    if dim != p.input_dim() {
        return dim_err(format!(
            "GRU input dim {dim} does not match parameters expecting {}",
            p.input_dim()
        ));
    }
    Ok(steps)
}

/// One recurrence step given the input projections `W x + b` for each gate.
fn step<T: Element>(
    p: &GruParams<T>,
    proj: [&[T]; 3],
    h_prev: &[T],
    z: &mut [T],
    r: &mut [T],
    c: &mut [T],
    h: &mut [T],
) {
    let units = h_prev.len();
    let mut tmp = vec![T::zero(); units];
    matvec(p.u_z.data(), h_prev, &mut tmp);
    for i in 0..units {
        z[i] = sigmoid_scalar(proj[0][i] + tmp[i]);
    }
    matvec(p.u_r.data(), h_prev, &mut tmp);
    for i in 0..units {
        r[i] = sigmoid_scalar(proj[1][i] + tmp[i]);
    }
    let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
    matvec(p.u_h.data(), &rh, &mut tmp);
    for i in 0..units {
        c[i] = (proj[2][i] + tmp[i]).tanh();
        h[i] = (T::one() - z[i]) * h_prev[i] + z[i] * c[i];
    }
}

/// `X W^T + b` for all time steps at once: `[T, units]`.
fn project<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (steps, dim) = (x.shape()[0], x.shape()[1]);
    let units = b.len();
    let mut out = Vec::with_capacity(steps * units);
    for _ in 0..steps {
        out.extend_from_slice(b.data());
    }
    gemm(steps, dim, units, x.data(), false, w.data(), true, &mut out, true);
    out
}

/// Runs the recurrence over `x: [T, input_dim]`, keeping every activation.
pub fn gru_trace<T: Element>(x: &Tensor<T>, p: &GruParams<T>) -> Result<GruTrace<T>> {
    let steps = check_sequence(x, p)?;
    let units = p.units();
    let pz = project(x, &p.w_z, &p.b_z);
    let pr = project(x, &p.w_r, &p.b_r);
    let ph = project(x, &p.w_h, &p.b_h);
    let mut h = vec![T::zero(); (steps + 1) * units];
    let mut z = vec![T::zero(); steps * units];
    let mut r = vec![T::zero(); steps * units];
    let mut c = vec![T::zero(); steps * units];
    for t in 0..steps {
        let span = t * units..(t + 1) * units;
        let (prev, next) = h.split_at_mut((t + 1) * units);
        step(
            p,
            [&pz[span.clone()], &pr[span.clone()], &ph[span.clone()]],
            &prev[t * units..],
            &mut z[span.clone()],
            &mut r[span.clone()],
            &mut c[span],
            &mut next[..units],
        );
    }
    Ok(GruTrace {
        input: x.clone(),
        h,
        z,
        r,
        c,
    })
}

/// A single GRU update.
pub fn gru_cell<T: Element>(x_t: &Tensor<T>, h_prev: &Tensor<T>, p: &GruParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let units = p.units();
    if x_t.shape() != [p.input_dim()] {
        return dim_err(format!(
            "gru_cell input shape {:?}, expected [{}]",
            x_t.shape(),
            p.input_dim()
        ));
    }
    if h_prev.shape() != [units] {
        return dim_err(format!("gru_cell state shape {:?}, expected [{units}]", h_prev.shape()));
    }
    let x = x_t.clone().reshape([1, p.input_dim()])?;
    let pz = project(&x, &p.w_z, &p.b_z);
    let pr = project(&x, &p.w_r, &p.b_r);
    let ph = project(&x, &p.w_h, &p.b_h);
    let (mut z, mut r, mut c, mut h) = (
        vec![T::zero(); units],
        vec![T::zero(); units],
        vec![T::zero(); units],
        vec![T::zero(); units],
    );
    step(p, [&pz, &pr, &ph], h_prev.data(), &mut z, &mut r, &mut c, &mut h);
    Ok(Tensor::vector(h))
}

/// Runs the GRU left to right from a zero state. Returns `[T, units]` when
/// `return_sequence` is set, otherwise the final state `[units]`.
pub fn gru_sequence<T: Element>(x: &Tensor<T>, p: &GruParams<T>, return_sequence: bool) -> Result<Tensor<T>> {
    p.validate()?;
    let trace = gru_trace(x, p)?;
    Ok(if return_sequence {
        trace.sequence()
    } else {
        Tensor::vector(trace.final_state().to_vec())
    })
}

/// Final forward state over `x` concatenated with the final state of a
/// second GRU run over time-reversed `x`: `[2 * units]`, forward half first.
pub fn bidirectional_gru<T: Element>(x: &Tensor<T>, p_fwd: &GruParams<T>, p_bwd: &GruParams<T>) -> Result<Tensor<T>> {
    let f = gru_sequence(x, p_fwd, false)?;
    let b = gru_sequence(&x.reverse_axis0(), p_bwd, false)?;
    let mut out = f.into_data();
    out.extend(b.into_data());
    Ok(Tensor::vector(out))
}

/// Backpropagation through time.
///
/// `grad_h` is either `[units]` (gradient of the final state only) or
/// `[T, units]` (gradient of every emitted state). Parameter gradients are
/// accumulated into `grads` (same order as [`GruParams::tensors`]); the
/// input gradient `[T, input_dim]` is returned when requested.
pub fn gru_backward<T: Element>(
    trace: &GruTrace<T>,
    p: &GruParams<T>,
    grad_h: &Tensor<T>,
    grads: &mut [Tensor<T>],
    need_input: bool,
) -> Result<Option<Tensor<T>>> {
    let steps = trace.steps();
    let units = p.units();
    let dim = p.input_dim();
    let per_step = match grad_h.shape() {
        [u] if *u == units => false,
        [t, u] if *t == steps && *u == units => true,
        other => {
            return dim_err(format!(
                "GRU backward: gradient shape {other:?} fits neither [{units}] nor [{steps}, {units}]"
            ))
        }
    };
    if grads.len() != 9 {
        return dim_err(format!("GRU backward needs 9 gradient slots, got {}", grads.len()));
    }

    let mut daz = vec![T::zero(); steps * units];
    let mut dar = vec![T::zero(); steps * units];
    let mut dah = vec![T::zero(); steps * units];
    let mut rh_all = vec![T::zero(); steps * units];
    let mut dh = vec![T::zero(); units];
    if !per_step {
        dh.copy_from_slice(grad_h.data());
    }
    let mut drh = vec![T::zero(); units];
    for t in (0..steps).rev() {
        if per_step {
            for (d, &g) in dh.iter_mut().zip(grad_h.row(t)) {
                *d += g;
            }
        }
        let s = t * units..(t + 1) * units;
        let (z, r, c) = (&trace.z[s.clone()], &trace.r[s.clone()], &trace.c[s.clone()]);
        let h_prev = trace.state(t);
        let mut dh_prev = vec![T::zero(); units];
        for i in 0..units {
            let dz = dh[i] * (c[i] - h_prev[i]);
            let dc = dh[i] * z[i];
            dh_prev[i] = dh[i] * (T::one() - z[i]);
            daz[t * units + i] = dz * z[i] * (T::one() - z[i]);
            dah[t * units + i] = dc * (T::one() - c[i] * c[i]);
            rh_all[t * units + i] = r[i] * h_prev[i];
        }
        drh.iter_mut().for_each(|v| *v = T::zero());
        matvec_t_add(p.u_h.data(), &dah[s.clone()], &mut drh);
        for i in 0..units {
            let dr = drh[i] * h_prev[i];
            dh_prev[i] += drh[i] * r[i];
            dar[t * units + i] = dr * r[i] * (T::one() - r[i]);
        }
        matvec_t_add(p.u_z.data(), &daz[s.clone()], &mut dh_prev);
        matvec_t_add(p.u_r.data(), &dar[s], &mut dh_prev);
        dh = dh_prev;
    }

    let x = trace.input.data();
    let h_prev_all = &trace.h[..steps * units];
    let [gw_z, gw_r, gw_h, gu_z, gu_r, gu_h, gb_z, gb_r, gb_h] = grads else {
        unreachable!("length checked above");
    };
    for (da, gw, gu, gb, hsrc) in [
        (&daz, gw_z, gu_z, gb_z, h_prev_all),
        (&dar, gw_r, gu_r, gb_r, h_prev_all),
        (&dah, gw_h, gu_h, gb_h, &rh_all[..]),
    ] {
        gemm(units, steps, dim, da, true, x, false, gw.data_mut(), true);
        gemm(units, steps, units, da, true, hsrc, false, gu.data_mut(), true);
        for row in da.chunks_exact(units) {
            for (b, &v) in gb.data_mut().iter_mut().zip(row) {
                *b += v;
            }
        }
    }
    if !need_input {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); steps * dim];
    for (da, w) in [(&daz, &p.w_z), (&dar, &p.w_r), (&dah, &p.w_h)] {
        gemm(steps, units, dim, da, false, w.data(), false, &mut dx, true);
    }
    Ok(Some(Tensor::new([steps, dim], dx)?))
}
