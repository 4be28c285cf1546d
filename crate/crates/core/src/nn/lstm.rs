use rand::Rng;

use super::{expect_dims, no_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

pub const FORGET_BIAS_INIT: f64 = 1.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One direction of an LSTM. Gate rows are stacked `[i, f, g, o]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
    reverse: bool,
}

/// Activations of one direction over one sequence.
#[derive(Debug, Clone)]
struct Trace {
    /// Post-activation gates per step, `T x 4h`.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl LstmCell {
    fn new<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, reverse: bool, rng: &mut R) -> Self {
        let bound = (1.0 / hidden as f64).sqrt();
        let w_ih = Param::uniform(format!("{prefix}.w_ih"), &[4 * hidden, input], (1.0 / input as f64).sqrt(), rng);
        let w_hh = Param::uniform(format!("{prefix}.w_hh"), &[4 * hidden, hidden], bound, rng);
        let mut bias = Param::uniform(format!("{prefix}.bias"), &[4 * hidden], bound, rng);
        bias.value.data_mut()[hidden..2 * hidden].fill(FORGET_BIAS_INIT);
        LstmCell {
            w_ih,
            w_hh,
            bias,
            reverse,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.value.dims()[1]
    }

    fn order(&self, t_len: usize) -> Box<dyn Iterator<Item = usize>> {
        if self.reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        }
    }

    fn run(&self, x: &[f64], t_len: usize, input: usize, w_hh_t: &[f64]) -> Trace {
        let h = self.hidden();
        let g4 = 4 * h;
        let mut gates = vec![0.0; t_len * g4];
        linalg::gemm_bt(t_len, g4, input, x, self.w_ih.value.data(), &mut gates, false);
        let mut c = vec![0.0; t_len * h];
        let mut tanh_c = vec![0.0; t_len * h];
        let mut hs = vec![0.0; t_len * h];
        let bias = self.bias.value.data();
        let mut prev: Option<usize> = None;
        for t in self.order(t_len) {
            let row = &mut gates[t * g4..(t + 1) * g4];
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
            if let Some(p) = prev {
                for k in 0..h {
                    let hk = hs[p * h + k];
                    for (v, w) in row.iter_mut().zip(&w_hh_t[k * g4..(k + 1) * g4]) {
                        *v += hk * w;
                    }
                }
            }
            for j in 0..h {
                let i = sigmoid(row[j]);
                let f = sigmoid(row[h + j]);
                let g = row[2 * h + j].tanh();
                let o = sigmoid(row[3 * h + j]);
                row[j] = i;
                row[h + j] = f;
                row[2 * h + j] = g;
                row[3 * h + j] = o;
                let c_prev = prev.map_or(0.0, |p| c[p * h + j]);
                let ct = f * c_prev + i * g;
                c[t * h + j] = ct;
                tanh_c[t * h + j] = ct.tanh();
                hs[t * h + j] = o * tanh_c[t * h + j];
            }
            prev = Some(t);
        }
        Trace {
            gates,
            c,
            tanh_c,
            h: hs,
        }
    }

    /// `dh_out` is `T x h`; returns `T x input` and accumulates weight grads.
    fn backprop(&mut self, x: &[f64], t_len: usize, input: usize, tr: &Trace, dh_out: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let g4 = 4 * h;
        let mut da = vec![0.0; t_len * g4];
        let mut h_prev = vec![0.0; t_len * h];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let steps: Vec<usize> = self.order(t_len).collect();
        let w_hh = self.w_hh.value.data();
        for (n, &t) in steps.iter().enumerate().rev() {
            let prev = n.checked_sub(1).map(|m| steps[m]);
            if let Some(p) = prev {
                h_prev[t * h..(t + 1) * h].copy_from_slice(&tr.h[p * h..(p + 1) * h]);
            }
            let gate = &tr.gates[t * g4..(t + 1) * g4];
            let row = &mut da[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let tc = tr.tanh_c[t * h + j];
                let dh = dh_out[t * h + j] + dh_next[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                let c_prev = prev.map_or(0.0, |p| tr.c[p * h + j]);
                row[j] = dc * g * i * (1.0 - i);
                row[h + j] = dc * c_prev * f * (1.0 - f);
                row[2 * h + j] = dc * i * (1.0 - g * g);
                row[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.fill(0.0);
            for (k, &a) in row.iter().enumerate() {
                for (d, w) in dh_next.iter_mut().zip(&w_hh[k * h..(k + 1) * h]) {
                    *d += a * w;
                }
            }
        }
        linalg::gemm_at(g4, input, t_len, &da, x, self.w_ih.grad.data_mut(), true);
        linalg::gemm_at(g4, h, t_len, &da, &h_prev, self.w_hh.grad.data_mut(), true);
        let gb = self.bias.grad.data_mut();
        for row in da.chunks_exact(g4) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = vec![0.0; t_len * input];
        linalg::gemm(t_len, input, g4, &da, self.w_ih.value.data(), &mut dx, false);
        dx
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_ih);
        f(&mut self.w_hh);
        f(&mut self.bias);
    }
}

/// Bidirectional LSTM, `batch x T x d -> batch x T x 2h` with the forward
/// direction in the first `h` outputs of each step.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    cache: Option<(Tensor, Vec<[Trace; 2]>)>,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        BiLstm {
            fwd: LstmCell::new(&format!("{prefix}.fwd"), input, hidden, false, rng),
            bwd: LstmCell::new(&format!("{prefix}.bwd"), input, hidden, true, rng),
            cache: None,
        }
    }

    pub fn input_size(&self) -> usize {
        self.fwd.w_ih.value.dims()[1]
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden()
    }
}

impl Layer for BiLstm {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_dims(x, 3, "bilstm")?;
        let (batch, t_len, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        if d != self.input_size() {
            return Err(Error::shape(format!("bilstm expects {} features, got {d}", self.input_size())));
        }
        if t_len == 0 {
            return Err(Error::shape("bilstm needs at least one time step"));
        }
        let h = self.hidden();
        let wf = linalg::transpose(4 * h, h, self.fwd.w_hh.value.data());
        let wb = linalg::transpose(4 * h, h, self.bwd.w_hh.value.data());
        let mut out = vec![0.0; batch * t_len * 2 * h];
        let mut traces = Vec::with_capacity(batch);
        for b in 0..batch {
            let xb = &x.data()[b * t_len * d..(b + 1) * t_len * d];
            let tf = self.fwd.run(xb, t_len, d, &wf);
            let tb = self.bwd.run(xb, t_len, d, &wb);
            for t in 0..t_len {
                let dst = &mut out[(b * t_len + t) * 2 * h..][..2 * h];
                dst[..h].copy_from_slice(&tf.h[t * h..(t + 1) * h]);
                dst[h..].copy_from_slice(&tb.h[t * h..(t + 1) * h]);
            }
            traces.push([tf, tb]);
        }
        self.cache = Some((x.clone(), traces));
        Tensor::new(vec![batch, t_len, 2 * h], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (x, traces) = self.cache.take().ok_or_else(|| no_forward("bilstm"))?;
        let (batch, t_len, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let h = self.hidden();
        if grad_out.dims() != [batch, t_len, 2 * h] {
            self.cache = Some((x, traces));
            return Err(Error::shape("bilstm grad_out dims"));
        }
        let mut dx = vec![0.0; x.len()];
        let mut dh_f = vec![0.0; t_len * h];
        let mut dh_b = vec![0.0; t_len * h];
        for (b, [tf, tb]) in traces.iter().enumerate() {
            for t in 0..t_len {
                let src = &grad_out.data()[(b * t_len + t) * 2 * h..][..2 * h];
                dh_f[t * h..(t + 1) * h].copy_from_slice(&src[..h]);
                dh_b[t * h..(t + 1) * h].copy_from_slice(&src[h..]);
            }
            let xb = &x.data()[b * t_len * d..(b + 1) * t_len * d];
            let gf = self.fwd.backprop(xb, t_len, d, tf, &dh_f);
            let gb = self.bwd.backprop(xb, t_len, d, tb, &dh_b);
            for ((dst, a), c) in dx[b * t_len * d..(b + 1) * t_len * d].iter_mut().zip(&gf).zip(&gb) {
                *dst = a + c;
            }
        }
        let dims = x.dims().to_vec();
        self.cache = Some((x, traces));
        Tensor::new(dims, dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fwd.visit_params(f);
        self.bwd.visit_params(f);
    }
}

/// Reads the final forward state and the first-step backward state from a
/// bidirectional sequence, `batch x T x 2h -> batch x 2h`.
#[derive(Debug, Clone, Default)]
pub struct SequenceEnds {
    dims: Option<Vec<usize>>,
}

impl SequenceEnds {
    pub fn new() -> Self {
        SequenceEnds::default()
    }
}

impl Layer for SequenceEnds {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_dims(x, 3, "sequence ends")?;
        let (batch, t_len, w) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        if t_len == 0 || w % 2 != 0 {
            return Err(Error::shape("sequence ends needs T >= 1 and an even width"));
        }
        let h = w / 2;
        let mut out = Vec::with_capacity(batch * w);
        for b in 0..batch {
            out.extend_from_slice(&x.data()[(b * t_len + t_len - 1) * w..][..h]);
            out.extend_from_slice(&x.data()[(b * t_len) * w + h..][..h]);
        }
        self.dims = Some(x.dims().to_vec());
        Tensor::new(vec![batch, w], out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let dims = self.dims.as_ref().ok_or_else(|| no_forward("sequence ends"))?;
        let (batch, t_len, w) = (dims[0], dims[1], dims[2]);
        if grad_out.dims() != [batch, w] {
            return Err(Error::shape("sequence ends grad_out dims"));
        }
        let h = w / 2;
        let mut dx = Tensor::zeros(dims);
        let d = dx.data_mut();
        for b in 0..batch {
            let g = grad_out.row(b);
            for j in 0..h {
                d[(b * t_len + t_len - 1) * w + j] += g[j];
                d[(b * t_len) * w + h + j] += g[h + j];
            }
        }
        Ok(dx)
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
}
