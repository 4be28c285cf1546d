//! RBF-kernel support vector machine trained by SMO, one-vs-rest.
//!
//! The binary solver follows the second-order working-set selection of
//! Fan, Chen and Lin (2005) as used by LIBSVM, on the dual
//! `min 1/2 a'Qa - e'a, 0 <= a <= C, y'a = 0`.

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use crate::dataset::{EmotionLabel, N_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_C: f64 = 1.0;
pub const DEFAULT_TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;

pub fn rbf_kernel(u: &[f64], v: &[f64], gamma: f64) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// `None` selects `1 / (d * var)` of the standardized features.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: DEFAULT_C,
            gamma: None,
            tol: DEFAULT_TOL,
            max_iter: 10_000_000,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        let gamma_ok = self.gamma.is_none_or(|g| g > 0.0 && g.is_finite());
        if !(self.c > 0.0 && self.c.is_finite()) || !gamma_ok || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidConfig(format!("invalid svm config {self:?}")));
        }
        Ok(())
    }
}

/// Solution of one binary dual problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    /// Dual objective `e'a - 1/2 a'Qa`, starting at 0 and recorded after every update.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dual_objective(alpha: &[f64], grad: &[f64]) -> f64 {
    // With G = Qa - e: e'a - 1/2 a'Qa = -1/2 sum a_t (G_t - 1)
    -0.5 * alpha.iter().zip(grad).map(|(a, g)| a * (g - 1.0)).sum::<f64>()
}

/// Solves one binary problem on a precomputed `n x n` kernel matrix with
/// labels `y` in {-1, +1}.
pub fn smo_solve(kernel: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> BinarySolution {
    let n = y.len();
    let k = |i: usize, j: usize| kernel[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut objective = vec![0.0];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        // i: maximal violating index in I_up
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
            if in_up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut best = f64::INFINITY;
        if let Some(i) = i_sel {
            for t in 0..n {
                let in_low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
                if !in_low {
                    continue;
                }
                let v = y[t] * grad[t];
                gmax2 = gmax2.max(v);
                let diff = gmax + v;
                if diff > 0.0 {
                    let quad = (k(i, i) + k(t, t) - 2.0 * k(i, t)).max(TAU);
                    let obj = -diff * diff / quad;
                    if obj <= best {
                        best = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) if gmax + gmax2 >= tol => (i, j),
            _ => {
                converged = true;
                break;
            }
        };
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (k(i, i) + k(j, j) - 2.0 * k(i, j)).max(TAU);
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(i, t) * di + y[j] * k(j, t) * dj);
        }
        objective.push(dual_objective(&alpha, &grad));
    }

    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut free = 0usize;
    let mut sum_free = 0.0;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    BinarySolution {
        alpha,
        bias: -rho,
        objective,
        iterations,
        converged,
    }
}

/// Largest per-sample violation of the KKT conditions, measured on
/// `y_t f(x_t) - 1` against the bound status of `alpha_t`.
pub fn kkt_max_violation(kernel: &[f64], y: &[f64], alpha: &[f64], bias: f64, c: f64) -> f64 {
    let n = y.len();
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let f: f64 = (0..n).map(|s| alpha[s] * y[s] * kernel[s * n + t]).sum::<f64>() + bias;
        let margin = y[t] * f - 1.0;
        let v = if alpha[t] <= 0.0 {
            (-margin).max(0.0)
        } else if alpha[t] >= c {
            margin.max(0.0)
        } else {
            margin.abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Per-dimension affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.shape2()?;
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.shape2()?;
        if d != self.dim() {
            return Err(Error::shape(format!("expected {} feature dims, got {d}", self.dim())));
        }
        Ok(Tensor::from_fn(&[n, d], |i| {
            let c = i % d;
            (x.data()[i] - self.mean[c]) / self.scale[c]
        }))
    }
}

/// Training-time record for one binary problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryDiagnostics {
    pub class: EmotionLabel,
    pub solution: BinarySolution,
    pub kkt_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// Support vectors in standardized coordinates, `n_sv x d`.
    pub support_vectors: Tensor,
    /// `alpha * y` per class and support vector, `n_cls x n_sv`.
    pub dual_coefs: Tensor,
    pub biases: Vec<f64>,
    pub gamma: f64,
    pub c: f64,
    /// Ascending class codes; decision rows follow this order.
    pub classes: Vec<EmotionLabel>,
    pub standardizer: Standardizer,
    /// Populated by training only; not persisted.
    pub diagnostics: Vec<BinaryDiagnostics>,
}

fn check_finite(x: &Tensor) -> Result<()> {
    let (_, d) = x.shape2()?;
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteFeature { row: i / d, col: i % d }),
        None => Ok(()),
    }
}

pub fn kernel_matrix(x: &Tensor, gamma: f64) -> Result<Vec<f64>> {
    let (n, _) = x.shape2()?;
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rbf_kernel(x.row(i), x.row(j), gamma);
        }
    });
    Ok(k)
}

pub fn svm_train(features: &Tensor, labels: &[EmotionLabel], cfg: &SvmConfig) -> Result<SvmModel> {
    cfg.validate()?;
    let (n, d) = features.shape2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    check_finite(features)?;
    let mut classes: Vec<EmotionLabel> = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    let standardizer = Standardizer::fit(features)?;
    let x = standardizer.apply(features)?;
    let gamma = cfg.gamma.unwrap_or_else(|| {
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let var = x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
        if var > 0.0 { 1.0 / (d as f64 * var) } else { 1.0 / d as f64 }
    });
    let kernel = kernel_matrix(&x, gamma)?;

    let mut diagnostics = Vec::with_capacity(classes.len());
    for &class in &classes {
        let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let solution = smo_solve(&kernel, &y, cfg.c, cfg.tol, cfg.max_iter);
        if !solution.converged {
            log::warn!("svm {class}: stopped after {} iterations without convergence", solution.iterations);
        }
        let kkt_violation = kkt_max_violation(&kernel, &y, &solution.alpha, solution.bias, cfg.c);
        diagnostics.push(BinaryDiagnostics {
            class,
            solution,
            kkt_violation,
        });
    }

    let sv_index: Vec<usize> = (0..n)
        .filter(|&t| diagnostics.iter().any(|b| b.solution.alpha[t] > 0.0))
        .collect();
    let mut support_vectors = Vec::with_capacity(sv_index.len() * d);
    for &t in &sv_index {
        support_vectors.extend_from_slice(x.row(t));
    }
    let mut coefs = Vec::with_capacity(classes.len() * sv_index.len());
    for b in &diagnostics {
        for &t in &sv_index {
            let y = if labels[t] == b.class { 1.0 } else { -1.0 };
            coefs.push(b.solution.alpha[t] * y);
        }
    }
    Ok(SvmModel {
        support_vectors: Tensor::new(vec![sv_index.len(), d], support_vectors)?,
        dual_coefs: Tensor::new(vec![classes.len(), sv_index.len()], coefs)?,
        biases: diagnostics.iter().map(|b| b.solution.bias).collect(),
        gamma,
        c: cfg.c,
        classes,
        standardizer,
        diagnostics,
    })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn n_support(&self) -> usize {
        self.support_vectors.dims()[0]
    }

    /// Decision values, `m x n_cls`.
    pub fn decision_values(&self, features: &Tensor) -> Result<Tensor> {
        let x = self.standardizer.apply(features)?;
        let (m, _) = x.shape2()?;
        let n_sv = self.n_support();
        let n_cls = self.classes.len();
        let mut out = vec![0.0; m * n_cls];
        out.par_chunks_mut(n_cls).enumerate().for_each(|(r, dst)| {
            let kv: Vec<f64> = (0..n_sv)
                .map(|s| rbf_kernel(self.support_vectors.row(s), x.row(r), self.gamma))
                .collect();
            for (c, v) in dst.iter_mut().enumerate() {
                let coef = self.dual_coefs.row(c);
                *v = coef.iter().zip(&kv).map(|(a, k)| a * k).sum::<f64>() + self.biases[c];
            }
        });
        Tensor::new(vec![m, n_cls], out)
    }

    /// Decision values spread over all 8 class slots; absent classes get `-inf`.
    pub fn scores8(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        let dv = self.decision_values(features)?;
        let (m, _) = dv.shape2()?;
        Ok((0..m)
            .map(|r| {
                let mut s = vec![f64::NEG_INFINITY; N_CLASSES];
                for (c, &v) in self.classes.iter().zip(dv.row(r)) {
                    s[c.code()] = v;
                }
                s
            })
            .collect())
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.set("gamma", self.gamma);
        ckpt.set("c", self.c);
        ckpt.set("dim", self.dim());
        ckpt.set("n_sv", self.n_support());
        let codes: Vec<String> = self.classes.iter().map(|c| c.code().to_string()).collect();
        ckpt.set("classes", codes.join(" "));
        ckpt.push("svm.support_vectors", self.support_vectors.clone());
        ckpt.push("svm.dual_coefs", self.dual_coefs.clone());
        ckpt.push(
            "svm.biases",
            Tensor::new(vec![self.biases.len()], self.biases.clone()).expect("bias length"),
        );
        ckpt.push("svm.mean", Tensor::new(vec![self.dim()], self.standardizer.mean.clone()).expect("dim"));
        ckpt.push("svm.scale", Tensor::new(vec![self.dim()], self.standardizer.scale.clone()).expect("dim"));
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let classes = ckpt
            .desc("classes")?
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .ok()
                    .and_then(EmotionLabel::from_code)
                    .ok_or_else(|| Error::MalformedContainer(format!("bad class code {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let d: usize = ckpt.desc_parse("dim")?;
        let n_sv: usize = ckpt.desc_parse("n_sv")?;
        let expect = |name: &str, dims: Vec<usize>| -> Result<Tensor> {
            let t = ckpt.require(name)?;
            if t.dims() != dims.as_slice() {
                return Err(Error::DimMismatch {
                    name: name.into(),
                    expected: dims,
                    found: t.dims().to_vec(),
                });
            }
            Ok(t.clone())
        };
        Ok(SvmModel {
            support_vectors: expect("svm.support_vectors", vec![n_sv, d])?,
            dual_coefs: expect("svm.dual_coefs", vec![classes.len(), n_sv])?,
            biases: expect("svm.biases", vec![classes.len()])?.into_data(),
            gamma: ckpt.desc_parse("gamma")?,
            c: ckpt.desc_parse("c")?,
            standardizer: Standardizer {
                mean: expect("svm.mean", vec![d])?.into_data(),
                scale: expect("svm.scale", vec![d])?.into_data(),
            },
            classes,
            diagnostics: Vec::new(),
        })
    }
}

/// Labels (ties to the lowest class code) and decision values.
pub fn svm_predict(model: &SvmModel, features: &Tensor) -> Result<(Vec<EmotionLabel>, Tensor)> {
    let dv = model.decision_values(features)?;
    let (m, _) = dv.shape2()?;
    let labels = (0..m)
        .map(|r| model.classes[crate::augment::argmax(dv.row(r))])
        .collect();
    Ok((labels, dv))
}
