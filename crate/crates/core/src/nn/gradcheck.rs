//! Central finite-difference verification of analytic gradients.
//!
//! The scalar probe is `L = sum(r * layer(x))` for a fixed random `r`, so the
//! upstream gradient handed to `backward` is exactly `r`.

use rand::Rng;

use super::{zero_grads, Layer, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name (or `input`) and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_err: 0.0,
            worst: (String::new(), 0),
            checked: 0,
        }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err || self.worst.0.is_empty() {
            self.max_rel_err = self.max_rel_err.max(e);
            self.worst = (name.to_string(), idx);
        }
    }
}

fn probe(layer: &mut dyn Layer, x: &Tensor, r: &Tensor, mode: Mode) -> Result<f64> {
    let y = layer.forward(x, mode)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Check input and parameter gradients of `layer` at `x`.
pub fn check_layer<R: Rng + ?Sized>(layer: &mut dyn Layer, x: &Tensor, mode: Mode, rng: &mut R) -> Result<GradCheckReport> {
    check_layer_with_step(layer, x, mode, DEFAULT_STEP, rng)
}

pub fn check_layer_with_step<R: Rng + ?Sized>(
    layer: &mut dyn Layer,
    x: &Tensor,
    mode: Mode,
    step: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    zero_grads(layer);
    let y = layer.forward(x, mode)?;
    let r = Tensor::from_fn(y.dims(), |_| rng.random_range(-1.0..1.0));
    let dx = layer.backward(&r)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    layer.visit_params(&mut |p| analytic.push((p.name.clone(), p.grad.data().to_vec())));

    let mut report = GradCheckReport::new();
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for (idx, &g) in grads.iter().enumerate() {
            let numeric = {
                let mut nudge = |delta: f64| -> Result<f64> {
                    let mut k = 0;
                    layer.visit_params(&mut |p| {
                        if k == pi {
                            p.value.data_mut()[idx] += delta;
                        }
                        k += 1;
                    });
                    probe(layer, x, &r, mode)
                };
                let plus = nudge(step)?;
                let minus = nudge(-2.0 * step)?;
                nudge(step)?;
                (plus - minus) / (2.0 * step)
            };
            report.record(name, idx, g, numeric);
        }
    }

    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.data()[idx];
        xp.data_mut()[idx] = orig + step;
        let plus = probe(layer, &xp, &r, mode)?;
        xp.data_mut()[idx] = orig - step;
        let minus = probe(layer, &xp, &r, mode)?;
        xp.data_mut()[idx] = orig;
        report.record("input", idx, dx.data()[idx], (plus - minus) / (2.0 * step));
    }
    Ok(report)
}
