use rand::Rng;

use super::{expect_dims, no_forward, Layer, Mode, Param};
use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(prefix: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (1.0 / input as f64).sqrt();
        Dense {
            weight: Param::uniform(format!("{prefix}.weight"), &[output, input], bound, rng),
            bias: Param::uniform(format!("{prefix}.bias"), &[output], bound, rng),
            input: None,
        }
    }

    pub fn from_params(weight: Param, bias: Param) -> Result<Self> {
        let (out, _) = weight.value.shape2()?;
        if bias.value.dims() != [out] {
            return Err(Error::shape("dense bias does not match weight rows"));
        }
        Ok(Dense {
            weight,
            bias,
            input: None,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dims()[0]
    }
}

impl Layer for Dense {
    fn forward(&mut self, x: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_dims(x, 2, "dense")?;
        let (batch, inp) = x.shape2()?;
        let (out, w_in) = self.weight.value.shape2()?;
        if inp != w_in {
            return Err(Error::shape(format!("dense expects {w_in} inputs, got {inp}")));
        }
        let mut y = vec![0.0; batch * out];
        linalg::gemm_bt(batch, out, inp, x.data(), self.weight.value.data(), &mut y, false);
        let b = self.bias.value.data();
        for row in y.chunks_exact_mut(out) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.input = Some(x.clone());
        Tensor::new(vec![batch, out], y)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let x = self.input.as_ref().ok_or_else(|| no_forward("dense"))?;
        let (batch, inp) = x.shape2()?;
        let out = self.out_features();
        if grad_out.dims() != [batch, out] {
            return Err(Error::shape("dense grad_out dims"));
        }
        let g = grad_out.data();
        linalg::gemm_at(out, inp, batch, g, x.data(), self.weight.grad.data_mut(), true);
        let gb = self.bias.grad.data_mut();
        for row in g.chunks_exact(out) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = vec![0.0; batch * inp];
        linalg::gemm(batch, inp, out, g, self.weight.value.data(), &mut dx, false);
        Tensor::new(vec![batch, inp], dx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_layer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Dense::new("fc", 3, 3, &mut rng);
        d.weight.value = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        d.bias.value = Tensor::zeros(&[3]);
        let x = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.25, 0.0, -7.0]).unwrap();
        assert_eq!(d.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Dense::new("fc", 4, 2, &mut rng);
        let y = d.forward(&Tensor::zeros(&[3, 4]), Mode::Eval).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), d.bias.value.data());
        }
    }

    #[test]
    fn matches_naive_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Dense::new("fc", 7, 5, &mut rng);
        let x = Tensor::from_fn(&[4, 7], |_| rng.random_range(-1.0..1.0));
        let y = d.forward(&x, Mode::Eval).unwrap();
        for b in 0..4 {
            for o in 0..5 {
                let mut s = 0.0;
                for i in 0..7 {
                    s += x.at2(b, i) * d.weight.value.at2(o, i);
                }
                s += d.bias.value.data()[o];
                assert_eq!(y.at2(b, o), s);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut d = Dense::new("fc", 4, 2, &mut rng);
        let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
        let report = check_layer(&mut d, &x, Mode::Train, &mut rng).unwrap();
        assert!(report.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Dense::new("fc", 4, 2, &mut rng);
        assert!(matches!(
            d.forward(&Tensor::zeros(&[3, 5]), Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(d.backward(&Tensor::zeros(&[3, 2])).is_err());
    }
}
