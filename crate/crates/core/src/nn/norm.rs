use super::Matrix;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        let d = self.dim();
        if x.cols() != d {
            return Err(Error::shape("layer_norm", d, x.cols()));
        }
        let mut normalized = Matrix::zeros(x.rows(), d);
        let mut out = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let nrow = normalized.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let orow = out.row_mut(r);
            for j in 0..d {
                orow[j] = self.gamma[j] * normalized.get(r, j) + self.beta[j];
            }
        }
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward(&self, cache: &LayerNormCache, grad_out: &Matrix) -> (Matrix, LayerNormGrads) {
        let d = self.dim();
        let mut grads = LayerNormGrads {
            gamma: vec![0.0; d],
            beta: vec![0.0; d],
        };
        let mut dx = Matrix::zeros(grad_out.rows(), d);
        let mut dxhat = vec![0.0; d];
        for r in 0..grad_out.rows() {
            let g = grad_out.row(r);
            let xhat = cache.normalized.row(r);
            for j in 0..d {
                grads.gamma[j] += g[j] * xhat[j];
                grads.beta[j] += g[j];
                dxhat[j] = g[j] * self.gamma[j];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let is = cache.inv_std[r];
            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[j] - mean_d - xhat[j] * mean_dx);
            }
        }
        (dx, grads)
    }

    pub fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

impl LayerNormGrads {
    pub fn slices(&self) -> [&[f64]; 2] {
        [&self.gamma, &self.beta]
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::testutil::{numeric_grad, random_matrix, rel_err};

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ln = LayerNorm::new(6);
        for (g, b) in ln.gamma.iter_mut().zip(ln.beta.iter_mut()) {
            *g = rng.gen_range(0.5..1.5);
            *b = rng.gen_range(-0.5..0.5);
        }
        let x = random_matrix(&mut rng, 3, 6);
        let probe = random_matrix(&mut rng, 3, 6);
        let loss = |ln: &LayerNorm, x: &Matrix| -> f64 {
            let (y, _) = ln.forward(x).unwrap();
            y.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = ln.forward(&x).unwrap();
        let (dx, grads) = ln.backward(&cache, &probe);
        let mut xs = x.as_slice().to_vec();
        let num_x = numeric_grad(&mut xs, 1e-5, |d| loss(&ln, &Matrix::new(3, 6, d.to_vec()).unwrap()));
        let mut gs = ln.gamma.clone();
        let num_g = numeric_grad(&mut gs, 1e-5, |d| {
            let mut l = ln.clone();
            l.gamma.copy_from_slice(d);
            loss(&l, &x)
        });
        for (a, n) in dx.as_slice().iter().zip(&num_x).chain(grads.gamma.iter().zip(&num_g)) {
            assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
        }
    }
}
