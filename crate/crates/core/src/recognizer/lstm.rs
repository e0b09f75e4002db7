use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Archive, Tensor};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Four-gate LSTM cell, gate order `i, f, g, o` (PyTorch layout).
///
/// `w_ih: [4H, In]`, `w_hh: [4H, H]`, `bias: [4H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub bias: Tensor,
}

impl LstmCell {
    pub fn seeded(seed: u64, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            w_ih: init::fan_in_uniform(seed, &format!("{name}.w_ih"), &[4 * hidden, input], hidden),
            w_hh: init::fan_in_uniform(
                seed,
                &format!("{name}.w_hh"),
                &[4 * hidden, hidden],
                hidden,
            ),
            bias: init::fan_in_uniform(seed, &format!("{name}.bias"), &[4 * hidden], hidden),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::zeros(&[4 * hidden]),
        }
    }

    pub fn from_archive(a: &Archive, name: &str) -> Result<Self> {
        let cell = Self {
            w_ih: a.get(&format!("{name}.w_ih"))?.clone(),
            w_hh: a.get(&format!("{name}.w_hh"))?.clone(),
            bias: a.get(&format!("{name}.bias"))?.clone(),
        };
        cell.validate(name)?;
        Ok(cell)
    }

    pub fn store(&self, a: &mut Archive, name: &str) {
        a.insert(format!("{name}.w_ih"), self.w_ih.clone());
        a.insert(format!("{name}.w_hh"), self.w_hh.clone());
        a.insert(format!("{name}.bias"), self.bias.clone());
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }

    pub(crate) fn validate(&self, name: &str) -> Result<()> {
        let bad = || Error::shape(format!("{name}: inconsistent LSTM weight shapes"));
        let (g, _) = self.w_ih.dims2(name)?;
        let (g2, h) = self.w_hh.dims2(name)?;
        if g != 4 * h || g2 != g || self.bias.shape() != [g] {
            return Err(bad());
        }
        Ok(())
    }

    /// One step; returns the new `(h, c)`.
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid = self.hidden();
        let inp = self.input();
        debug_assert_eq!(x.len(), inp);
        let (wi, wh, b) = (self.w_ih.data(), self.w_hh.data(), self.bias.data());
        let gate = |row: usize| -> f64 {
            let mut s = b[row] as f64;
            for (k, &xv) in x.iter().enumerate() {
                s += wi[row * inp + k] as f64 * xv;
            }
            for (k, &hv) in h.iter().enumerate() {
                s += wh[row * hid + k] as f64 * hv;
            }
            s
        };
        let mut h_new = vec![0.0; hid];
        let mut c_new = vec![0.0; hid];
        for j in 0..hid {
            let i = sigmoid(gate(j));
            let f = sigmoid(gate(hid + j));
            let g = gate(2 * hid + j).tanh();
            let o = sigmoid(gate(3 * hid + j));
            c_new[j] = f * c[j] + i * g;
            h_new[j] = o * c_new[j].tanh();
        }
        (h_new, c_new)
    }
}

/// Forward and backward cells of one bidirectional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstmLayer {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

/// Output of a bidirectional layer: per-step concatenated states and the
/// final state of each direction.
pub(crate) struct BiOutput {
    pub sequence: Vec<Vec<f64>>,
    pub last_fwd: Vec<f64>,
    pub last_bwd: Vec<f64>,
}

impl BiLstmLayer {
    pub(crate) fn run(&self, seq: &[Vec<f64>]) -> BiOutput {
        let hid = self.fwd.hidden();
        let n = seq.len();
        let mut fwd_out = vec![Vec::new(); n];
        let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
        for t in 0..n {
            (h, c) = self.fwd.step(&seq[t], &h, &c);
            fwd_out[t] = h.clone();
        }
        let last_fwd = h;
        let mut bwd_out = vec![Vec::new(); n];
        let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
        for t in (0..n).rev() {
            (h, c) = self.bwd.step(&seq[t], &h, &c);
            bwd_out[t] = h.clone();
        }
        let sequence = fwd_out
            .into_iter()
            .zip(bwd_out)
            .map(|(mut f, b)| {
                f.extend(b);
                f
            })
            .collect();
        BiOutput {
            sequence,
            last_fwd,
            last_bwd: h,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cell_stays_zero() {
        let cell = LstmCell::zeros(3, 2);
        let (h, c) = cell.step(&[1.0, -2.0, 0.5], &[0.0; 2], &[0.0; 2]);
        assert_eq!(h, vec![0.0; 2]);
        assert_eq!(c, vec![0.0; 2]);
    }

    #[test]
    fn hand_stepped_gates() {
        // hidden 1, input 1: gate pre-activations are w_ih*x + bias.
        let cell = LstmCell {
            w_ih: Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            w_hh: Tensor::zeros(&[4, 1]),
            bias: Tensor::new(&[4], vec![0.0, 0.0, 0.0, -1.0]).unwrap(),
        };
        let x = 0.5;
        let (h, c) = cell.step(&[x], &[0.0], &[2.0]);
        let i = sigmoid(0.5);
        let f = sigmoid(1.0);
        let g = 1.5f64.tanh();
        let o = sigmoid(1.0);
        let c_exp = f * 2.0 + i * g;
        assert!((c[0] - c_exp).abs() < 1e-12);
        assert!((h[0] - o * c_exp.tanh()).abs() < 1e-12);
    }
}
