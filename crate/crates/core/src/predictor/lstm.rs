use alloc::vec;

use crate::numkit::{sigmoid, Matrix, Rng};

/// One LSTM layer. Gate blocks inside the `4·hidden` axis are ordered
/// input, forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub wx: Matrix,
    pub wh: Matrix,
    pub bias: Matrix,
}

/// Activations kept from [`LstmLayer::forward`] for the backward pass.
pub struct LstmCache {
    /// Post-activation gates per step, `n × 4H`.
    gates: Matrix,
    cells: Matrix,
    tanh_cells: Matrix,
    pub hidden: Matrix,
}

impl LstmLayer {
    pub fn new(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut bias = Matrix::zeros(1, 4 * hidden);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        Self {
            wx: Matrix::glorot(input, 4 * hidden, rng),
            wh: Matrix::glorot(hidden, 4 * hidden, rng),
            bias,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            wx: Matrix::zeros(self.wx.rows(), self.wx.cols()),
            wh: Matrix::zeros(self.wh.rows(), self.wh.cols()),
            bias: Matrix::zeros(1, self.bias.cols()),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.wh.rows()
    }

    /// Runs the sequence `x` (`n × input`) from zero state.
    pub fn forward(&self, x: &Matrix) -> LstmCache {
        let n = x.rows();
        let hs = self.hidden_size();
        let mut gates = Matrix::zeros(n, 4 * hs);
        let mut cells = Matrix::zeros(n, hs);
        let mut tanh_cells = Matrix::zeros(n, hs);
        let mut hidden = Matrix::zeros(n, hs);
        let mut z = vec![0.0; 4 * hs];
        let mut hprev = vec![0.0; hs];
        let mut cprev = vec![0.0; hs];
        for t in 0..n {
            self.wx.vec_mat_into(x.row(t), &mut z);
            let zh = self.wh.vec_mat(&hprev);
            for ((zi, h), b) in z.iter_mut().zip(&zh).zip(self.bias.data()) {
                *zi += h + b;
            }
            let g = gates.row_mut(t);
            for j in 0..hs {
                g[j] = sigmoid(z[j]);
                g[hs + j] = sigmoid(z[hs + j]);
                g[2 * hs + j] = libm::tanh(z[2 * hs + j]);
                g[3 * hs + j] = sigmoid(z[3 * hs + j]);
            }
            for j in 0..hs {
                let g = gates.row(t);
                let c = g[hs + j] * cprev[j] + g[j] * g[2 * hs + j];
                let tc = libm::tanh(c);
                cells.set(t, j, c);
                tanh_cells.set(t, j, tc);
                hidden.set(t, j, g[3 * hs + j] * tc);
            }
            hprev.copy_from_slice(hidden.row(t));
            cprev.copy_from_slice(cells.row(t));
        }
        LstmCache { gates, cells, tanh_cells, hidden }
    }

    /// Backpropagates `dh` (gradient w.r.t. every hidden output) through time,
    /// accumulating into `grad` and returning the gradient w.r.t. `x`.
    /// Accumulates parameter gradients into `grad` given `dh = ∂L/∂hidden`
    /// and returns `∂L/∂x`.
    pub fn backward(&self, x: &Matrix, cache: &LstmCache, dh: &Matrix, grad: &mut LstmLayer) -> Matrix {
        let n = x.rows();
        let hs = self.hidden_size();
        let mut dx = Matrix::zeros(n, x.cols());
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let mut dz = vec![0.0; 4 * hs];
        let zero = vec![0.0; hs];
        for t in (0..n).rev() {
            let g = cache.gates.row(t);
            let cprev = if t > 0 { cache.cells.row(t - 1) } else { &zero[..] };
            let hprev = if t > 0 { cache.hidden.row(t - 1) } else { &zero[..] };
            let tc = cache.tanh_cells.row(t);
            for j in 0..hs {
                let (i, f, c_hat, o) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                let dht = dh.get(t, j) + dh_next[j];
                let d_o = dht * tc[j];
                let dc = dht * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                dz[j] = dc * c_hat * i * (1.0 - i);
                dz[hs + j] = dc * cprev[j] * f * (1.0 - f);
                dz[2 * hs + j] = dc * i * (1.0 - c_hat * c_hat);
                dz[3 * hs + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            grad.wx.add_outer(x.row(t), &dz, 1.0);
            grad.wh.add_outer(hprev, &dz, 1.0);
            for (b, d) in grad.bias.data_mut().iter_mut().zip(&dz) {
                *b += d;
            }
            self.wx.mat_vec_acc(&dz, dx.row_mut(t));
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            self.wh.mat_vec_acc(&dz, &mut dh_next);
        }
        dx
    }
}
