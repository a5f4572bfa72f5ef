//! Single LSTM cell with hand-derived backward pass.
//!
//! Gate equations (i = input, f = forget, o = output, z = candidate):
//!   i = σ(Wi x + Ui h + bi),  f = σ(Wf x + Uf h + bf),
//!   o = σ(Wo x + Uo h + bo),  z = tanh(Wz x + Uz h + bz),
//!   c' = f ⊙ c + i ⊙ z,       h' = o ⊙ tanh(c').
//! Each gate carries a pair of affine maps (input side, hidden side), both
//! with their own bias, so the preactivation is the sum of two DenseMap
//! applications.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, DenseMap, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    pub w_input: DenseMap,
    pub u_input: DenseMap,
    pub w_forget: DenseMap,
    pub u_forget: DenseMap,
    pub w_output: DenseMap,
    pub u_output: DenseMap,
    pub w_cell: DenseMap,
    pub u_cell: DenseMap,
}

/// Recurrent state (h, c).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(dim: usize) -> Self {
        LstmState { h: vec![0.0; dim], c: vec![0.0; dim] }
    }
}

/// Forward-pass values needed by the backward pass of one step.
#[derive(Debug, Clone)]
pub struct LstmStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub gate_i: Vec<f64>,
    pub gate_f: Vec<f64>,
    pub gate_o: Vec<f64>,
    pub gate_z: Vec<f64>,
    pub c_new: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

impl LstmCell {
    pub fn zeros(input_dim: usize, state_dim: usize) -> Self {
        LstmCell {
            w_input: DenseMap::zeros(state_dim, input_dim),
            u_input: DenseMap::zeros(state_dim, state_dim),
            w_forget: DenseMap::zeros(state_dim, input_dim),
            u_forget: DenseMap::zeros(state_dim, state_dim),
            w_output: DenseMap::zeros(state_dim, input_dim),
            u_output: DenseMap::zeros(state_dim, state_dim),
            w_cell: DenseMap::zeros(state_dim, input_dim),
            u_cell: DenseMap::zeros(state_dim, state_dim),
        }
    }

    pub fn init(input_dim: usize, state_dim: usize, rng: &mut SeededRng) -> Self {
        LstmCell {
            w_input: DenseMap::init(state_dim, input_dim, rng),
            u_input: DenseMap::init(state_dim, state_dim, rng),
            w_forget: DenseMap::init(state_dim, input_dim, rng),
            u_forget: DenseMap::init(state_dim, state_dim, rng),
            w_output: DenseMap::init(state_dim, input_dim, rng),
            u_output: DenseMap::init(state_dim, state_dim, rng),
            w_cell: DenseMap::init(state_dim, input_dim, rng),
            u_cell: DenseMap::init(state_dim, state_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.in_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.w_input.out_dim()
    }

    fn gates(&self, x: &[f64], state: &LstmState) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "lstm step expects input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        if state.h.len() != self.state_dim() || state.c.len() != self.state_dim() {
            return Err(Error::Contract("lstm state dimension mismatch".into()));
        }
        let add = |a: Vec<f64>, b: Vec<f64>| -> Vec<f64> {
            a.into_iter().zip(b).map(|(p, q)| p + q).collect()
        };
        let pre_i = add(self.w_input.apply(x)?, self.u_input.apply(&state.h)?);
        let pre_f = add(self.w_forget.apply(x)?, self.u_forget.apply(&state.h)?);
        let pre_o = add(self.w_output.apply(x)?, self.u_output.apply(&state.h)?);
        let pre_z = add(self.w_cell.apply(x)?, self.u_cell.apply(&state.h)?);
        Ok((
            pre_i.iter().map(|&v| sigmoid(v)).collect(),
            pre_f.iter().map(|&v| sigmoid(v)).collect(),
            pre_o.iter().map(|&v| sigmoid(v)).collect(),
            pre_z.iter().map(|&v| v.tanh()).collect(),
        ))
    }

    /// One step; the emitted output equals the new hidden state.
    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<LstmState> {
        let (i, f, o, z) = self.gates(x, state)?;
        let d = self.state_dim();
        let mut c_new = vec![0.0; d];
        let mut h_new = vec![0.0; d];
        for k in 0..d {
            c_new[k] = f[k] * state.c[k] + i[k] * z[k];
            h_new[k] = o[k] * c_new[k].tanh();
        }
        Ok(LstmState { h: h_new, c: c_new })
    }

    /// One step, keeping everything the backward pass needs.
    pub fn step_cached(&self, x: &[f64], state: &LstmState) -> Result<(LstmState, LstmStepCache)> {
        let (i, f, o, z) = self.gates(x, state)?;
        let d = self.state_dim();
        let mut c_new = vec![0.0; d];
        let mut tanh_c = vec![0.0; d];
        let mut h_new = vec![0.0; d];
        for k in 0..d {
            c_new[k] = f[k] * state.c[k] + i[k] * z[k];
            tanh_c[k] = c_new[k].tanh();
            h_new[k] = o[k] * tanh_c[k];
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            gate_i: i,
            gate_f: f,
            gate_o: o,
            gate_z: z,
            c_new: c_new.clone(),
            tanh_c,
        };
        Ok((LstmState { h: h_new, c: c_new }, cache))
    }

    /// Backward through one step.
    ///
    /// `dh`/`dc` are the gradients flowing into the step's outputs (h', c').
    /// Parameter gradients accumulate into `grads`; returns (dx, dh_prev, dc_prev).
    pub fn backward_step(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc: &[f64],
        grads: &mut LstmCell,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.state_dim();
        let mut da_i = vec![0.0; d];
        let mut da_f = vec![0.0; d];
        let mut da_o = vec![0.0; d];
        let mut da_z = vec![0.0; d];
        let mut dc_prev = vec![0.0; d];
        for k in 0..d {
            let i = cache.gate_i[k];
            let f = cache.gate_f[k];
            let o = cache.gate_o[k];
            let z = cache.gate_z[k];
            let tc = cache.tanh_c[k];
            let dck = dc[k] + dh[k] * o * (1.0 - tc * tc);
            let do_k = dh[k] * tc;
            da_o[k] = do_k * o * (1.0 - o);
            da_i[k] = dck * z * i * (1.0 - i);
            da_f[k] = dck * cache.c_prev[k] * f * (1.0 - f);
            da_z[k] = dck * i * (1.0 - z * z);
            dc_prev[k] = dck * f;
        }
        let mut dx = vec![0.0; self.input_dim()];
        let mut dh_prev = vec![0.0; d];
        let accumulate = |w: &DenseMap, u: &DenseMap, gw: &mut DenseMap, gu: &mut DenseMap, da: &[f64], dx: &mut [f64], dh_prev: &mut [f64]| {
            let part = w.backward(&cache.x, da, gw);
            for (a, b) in dx.iter_mut().zip(part) {
                *a += b;
            }
            let part = u.backward(&cache.h_prev, da, gu);
            for (a, b) in dh_prev.iter_mut().zip(part) {
                *a += b;
            }
        };
        accumulate(&self.w_input, &self.u_input, &mut grads.w_input, &mut grads.u_input, &da_i, &mut dx, &mut dh_prev);
        accumulate(&self.w_forget, &self.u_forget, &mut grads.w_forget, &mut grads.u_forget, &da_f, &mut dx, &mut dh_prev);
        accumulate(&self.w_output, &self.u_output, &mut grads.w_output, &mut grads.u_output, &da_o, &mut dx, &mut dh_prev);
        accumulate(&self.w_cell, &self.u_cell, &mut grads.w_cell, &mut grads.u_cell, &da_z, &mut dx, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }

    pub fn maps(&self) -> [&DenseMap; 8] {
        [
            &self.w_input,
            &self.u_input,
            &self.w_forget,
            &self.u_forget,
            &self.w_output,
            &self.u_output,
            &self.w_cell,
            &self.u_cell,
        ]
    }

    pub fn maps_mut(&mut self) -> [&mut DenseMap; 8] {
        [
            &mut self.w_input,
            &mut self.u_input,
            &mut self.w_forget,
            &mut self.u_forget,
            &mut self.w_output,
            &mut self.u_output,
            &mut self.w_cell,
            &mut self.u_cell,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct transcription of the gate equations, kept independent of the
    /// implementation above (no shared helpers).
    fn oracle_step(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = cell.state_dim();
        let mut h_new = vec![0.0; d];
        let mut c_new = vec![0.0; d];
        for k in 0..d {
            let pre = |w: &DenseMap, u: &DenseMap| -> f64 {
                let mut acc = w.bias[k] + u.bias[k];
                for (j, xv) in x.iter().enumerate() {
                    acc += w.weight.get(k, j) * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    acc += u.weight.get(k, j) * hv;
                }
                acc
            };
            let i = 1.0 / (1.0 + (-pre(&cell.w_input, &cell.u_input)).exp());
            let f = 1.0 / (1.0 + (-pre(&cell.w_forget, &cell.u_forget)).exp());
            let o = 1.0 / (1.0 + (-pre(&cell.w_output, &cell.u_output)).exp());
            let z = pre(&cell.w_cell, &cell.u_cell).tanh();
            c_new[k] = f * c[k] + i * z;
            h_new[k] = o * c_new[k].tanh();
        }
        (h_new, c_new)
    }

    #[test]
    fn zero_weights_zero_state_is_fixed_point() {
        let cell = LstmCell::zeros(3, 4);
        let out = cell.step(&[1.0, -2.0, 0.5], &LstmState::zeros(4)).unwrap();
        assert_eq!(out.h, vec![0.0; 4]);
        assert_eq!(out.c, vec![0.0; 4]);
    }

    #[test]
    fn step_matches_gate_equation_oracle() {
        let mut rng = SeededRng::new(11);
        let cell = LstmCell::init(3, 5, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let state = LstmState {
            h: (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            c: (0..5).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        };
        let got = cell.step(&x, &state).unwrap();
        let (h, c) = oracle_step(&cell, &x, &state.h, &state.c);
        for k in 0..5 {
            assert!((got.h[k] - h[k]).abs() < 1e-10);
            assert!((got.c[k] - c[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let mut rng = SeededRng::new(12);
        let cell = LstmCell::init(2, 3, &mut rng);
        let x = [0.3, -0.4];
        let state = LstmState { h: vec![0.1, 0.2, -0.3], c: vec![0.0, 0.5, 0.25] };
        let a = cell.step(&x, &state).unwrap();
        let b = cell.step(&x, &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_input_dimension_is_error() {
        let cell = LstmCell::zeros(3, 4);
        assert!(cell.step(&[1.0], &LstmState::zeros(4)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeededRng::new(13);
        let cell = LstmCell::init(2, 3, &mut rng);
        let x: Vec<f64> = vec![0.4, -0.6];
        let state = LstmState {
            h: (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect(),
            c: (0..3).map(|_| rng.uniform(-0.5, 0.5)).collect(),
        };
        let dh: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let dc: Vec<f64> = (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let loss = |cell: &LstmCell, x: &[f64], st: &LstmState| -> f64 {
            let out = cell.step(x, st).unwrap();
            out.h.iter().zip(&dh).map(|(a, b)| a * b).sum::<f64>()
                + out.c.iter().zip(&dc).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = cell.step_cached(&x, &state).unwrap();
        let mut grads = LstmCell::zeros(2, 3);
        let (dx, dh_prev, dc_prev) = cell.backward_step(&cache, &dh, &dc, &mut grads);
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (loss(&cell, &xp, &state) - loss(&cell, &xm, &state)) / (2.0 * h);
            assert!((fd - dx[j]).abs() < 1e-6, "dx[{j}]: fd {fd} vs {}", dx[j]);
        }
        for j in 0..3 {
            let mut sp = state.clone();
            sp.h[j] += h;
            let mut sm = state.clone();
            sm.h[j] -= h;
            let fd = (loss(&cell, &x, &sp) - loss(&cell, &x, &sm)) / (2.0 * h);
            assert!((fd - dh_prev[j]).abs() < 1e-6);
            let mut sp = state.clone();
            sp.c[j] += h;
            let mut sm = state.clone();
            sm.c[j] -= h;
            let fd = (loss(&cell, &x, &sp) - loss(&cell, &x, &sm)) / (2.0 * h);
            assert!((fd - dc_prev[j]).abs() < 1e-6);
        }
        // Spot-check one weight gradient.
        let mut cp = cell.clone();
        cp.w_input.weight.data[0] += h;
        let mut cm = cell.clone();
        cm.w_input.weight.data[0] -= h;
        let fd = (loss(&cp, &x, &state) - loss(&cm, &x, &state)) / (2.0 * h);
        assert!((fd - grads.w_input.weight.data[0]).abs() < 1e-6);
    }
}
