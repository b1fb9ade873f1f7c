use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Differentiable, Gradients, Matrix};
use crate::seeds::Rng;

/// Learned lookup table for one sparse field, `cardinality x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub field_name: String,
    pub table: Matrix,
}

impl EmbeddingTable {
    pub fn cardinality(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn lookup(&self, code: usize) -> Result<&[f64]> {
        if code >= self.cardinality() {
            return Err(Error::Encoding(format!(
                "code {code} out of range for `{}` (cardinality {})",
                self.field_name,
                self.cardinality()
            )));
        }
        Ok(self.table.row(code))
    }
}

/// Row `code` of the table, i.e. the table applied to a one-hot vector.
pub fn embed_lookup(table: &EmbeddingTable, code: usize) -> Result<Vec<f64>> {
    table.lookup(code).map(<[f64]>::to_vec)
}

/// Dense block followed by each embedding in field order.
pub fn assemble_input(dense_std: &[f64], embeddings: &[&[f64]], expected_dim: usize) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(expected_dim);
    z.extend_from_slice(dense_std);
    for e in embeddings {
        z.extend_from_slice(e);
    }
    if z.len() != expected_dim {
        return Err(Error::shape("assemble_input", expected_dim, z.len()));
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Additive Gaussian noise on the deep-branch input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub mu: f64,
    pub sigma: f64,
    pub train_only: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mu: 0.0,
            sigma: 0.1,
            train_only: true,
        }
    }
}

impl NoiseConfig {
    pub const OFF: NoiseConfig = NoiseConfig {
        mu: 0.0,
        sigma: 0.0,
        train_only: true,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite() && self.mu.is_finite()) {
            return Err(Error::Argument(format!(
                "noise needs finite mu and sigma >= 0, got mu={} sigma={}",
                self.mu, self.sigma
            )));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.mu == 0.0 && self.sigma == 0.0
    }

    pub fn active(&self, mode: Mode) -> bool {
        mode == Mode::Train || !self.train_only
    }

    pub(crate) fn sampler(&self) -> Normal<f64> {
        Normal::new(self.mu, self.sigma).expect("validated noise parameters")
    }
}

/// `z + R` with `R ~ N(mu, sigma²)` i.i.d. when noise is active for `mode`,
/// otherwise `z` unchanged.
pub fn inject_noise(z: &[f64], cfg: &NoiseConfig, mode: Mode, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !cfg.active(mode) {
        return Ok(z.to_vec());
    }
    let normal = cfg.sampler();
    Ok(z.iter().map(|&v| v + normal.sample(rng)).collect())
}

/// One cross layer: `x_{l+1} = (⟨w, x_l⟩ + b) · x_0 + x_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossLayerParams {
    /// `1 x D`
    pub w: Matrix,
    /// `1 x 1`
    pub b: Matrix,
}

impl CrossLayerParams {
    pub fn new(w: &[f64], b: f64) -> Self {
        Self {
            w: Matrix::row_vector(w),
            b: Matrix::row_vector(&[b]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            w: Matrix::zeros(1, dim),
            b: Matrix::zeros(1, 1),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn bias(&self) -> f64 {
        self.b.as_slice()[0]
    }

    /// Batched forward; also returns the per-row scalar gate `s`.
    pub fn forward_batch(&self, x0: &Matrix, xl: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if x0.shape() != xl.shape() || x0.cols() != self.dim() {
            return Err(Error::shape(
                "cross_forward",
                format!("x0 {} / xl {}", x0.shape(), xl.shape()),
                format!("w 1x{}", self.dim()),
            ));
        }
        let w = self.w.as_slice();
        let b = self.bias();
        let mut out = xl.clone();
        let mut gates = Vec::with_capacity(x0.rows());
        for i in 0..x0.rows() {
            let s = dot(w, xl.row(i)) + b;
            for (o, &a) in out.row_mut(i).iter_mut().zip(x0.row(i)) {
                *o += s * a;
            }
            gates.push(s);
        }
        Ok((out, gates))
    }

    /// Returns `(d x0, d xl, d w, d b)`.
    pub fn backward_batch(
        &self,
        x0: &Matrix,
        xl: &Matrix,
        gates: &[f64],
        grad: &Matrix,
    ) -> (Matrix, Matrix, Matrix, Matrix) {
        let w = self.w.as_slice();
        let mut dx0 = Matrix::zeros(x0.rows(), x0.cols());
        let mut dxl = grad.clone();
        let mut dw = Matrix::zeros(1, self.dim());
        let mut db = 0.0;
        for i in 0..x0.rows() {
            let g = grad.row(i);
            let ds = dot(g, x0.row(i));
            for (d, &gv) in dx0.row_mut(i).iter_mut().zip(g) {
                *d = gates[i] * gv;
            }
            for (d, &wv) in dxl.row_mut(i).iter_mut().zip(w) {
                *d += ds * wv;
            }
            for (d, &xv) in dw.as_mut_slice().iter_mut().zip(xl.row(i)) {
                *d += ds * xv;
            }
            db += ds;
        }
        (dx0, dxl, dw, Matrix::row_vector(&[db]))
    }
}

pub fn cross_forward(x0: &[f64], xl: &[f64], p: &CrossLayerParams) -> Result<Vec<f64>> {
    let (out, _) = p.forward_batch(&Matrix::row_vector(x0), &Matrix::row_vector(xl))?;
    Ok(out.into_vec())
}

impl Differentiable for CrossLayerParams {
    fn name(&self) -> String {
        "cross".into()
    }

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        Ok(self.forward_batch(&inputs[0], &inputs[1])?.0)
    }

    fn backward(&self, inputs: &[Matrix], grad: &Matrix) -> Result<Gradients> {
        let (_, gates) = self.forward_batch(&inputs[0], &inputs[1])?;
        let (dx0, dxl, dw, db) = self.backward_batch(&inputs[0], &inputs[1], &gates, grad);
        Ok(Gradients {
            inputs: vec![dx0, dxl],
            params: vec![dw, db],
        })
    }

    fn params(&self) -> Vec<Matrix> {
        vec![self.w.clone(), self.b.clone()]
    }

    fn set_params(&mut self, p: &[Matrix]) -> Result<()> {
        self.w = p[0].clone();
        self.b = p[1].clone();
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected layer `f(W h + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayerParams {
    /// `out x in`
    pub weight: Matrix,
    /// `1 x out`
    pub bias: Matrix,
    pub activation: Activation,
}

impl DenseLayerParams {
    pub fn new(weight: Matrix, bias: &[f64], activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape("DenseLayerParams::new", weight.shape(), bias.len()));
        }
        Ok(Self {
            weight,
            bias: Matrix::row_vector(bias),
            activation,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: Matrix::zeros(1, outputs),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Returns `(output, pre-activation)`.
    pub fn forward_batch(&self, h: &Matrix) -> Result<(Matrix, Matrix)> {
        if h.cols() != self.in_dim() {
            return Err(Error::shape("deep_forward", h.shape(), self.weight.shape()));
        }
        let mut pre = h.matmul_t(&self.weight)?;
        let bias = self.bias.as_slice();
        for i in 0..pre.rows() {
            for (p, b) in pre.row_mut(i).iter_mut().zip(bias) {
                *p += b;
            }
        }
        let act = self.activation;
        let out = match act {
            Activation::Identity => pre.clone(),
            _ => pre.map(|v| act.apply(v)),
        };
        Ok((out, pre))
    }

    /// Returns `(d h, d W, d b)`.
    pub fn backward_batch(&self, h: &Matrix, pre: &Matrix, grad: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let act = self.activation;
        let dpre = match act {
            Activation::Identity => grad.clone(),
            _ => {
                let mut d = grad.clone();
                for (g, &p) in d.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *g *= act.derivative(p);
                }
                d
            }
        };
        let dh = dpre.matmul(&self.weight)?;
        let dw = dpre.t_matmul(h)?;
        Ok((dh, dw, dpre.col_sums()))
    }
}

pub fn deep_forward(h: &[f64], p: &DenseLayerParams) -> Result<Vec<f64>> {
    Ok(p.forward_batch(&Matrix::row_vector(h))?.0.into_vec())
}

impl Differentiable for DenseLayerParams {
    fn name(&self) -> String {
        format!("dense[{:?}]", self.activation).to_lowercase()
    }

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        Ok(self.forward_batch(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Matrix], grad: &Matrix) -> Result<Gradients> {
        let (_, pre) = self.forward_batch(&inputs[0])?;
        let (dh, dw, db) = self.backward_batch(&inputs[0], &pre, grad)?;
        Ok(Gradients {
            inputs: vec![dh],
            params: vec![dw, db],
        })
    }

    fn params(&self) -> Vec<Matrix> {
        vec![self.weight.clone(), self.bias.clone()]
    }

    fn set_params(&mut self, p: &[Matrix]) -> Result<()> {
        self.weight = p[0].clone();
        self.bias = p[1].clone();
        Ok(())
    }
}

/// Embedding lookup over a fixed batch of codes, differentiable in the table.
pub struct EmbeddingProbe {
    pub table: EmbeddingTable,
    pub codes: Vec<usize>,
}

impl Differentiable for EmbeddingProbe {
    fn name(&self) -> String {
        format!("embedding[{}]", self.table.field_name)
    }

    fn forward(&self, _inputs: &[Matrix]) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.codes.len(), self.table.dim());
        for (i, &c) in self.codes.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.table.lookup(c)?);
        }
        Ok(out)
    }

    fn backward(&self, _inputs: &[Matrix], grad: &Matrix) -> Result<Gradients> {
        let mut dt = Matrix::zeros(self.table.cardinality(), self.table.dim());
        for (i, &c) in self.codes.iter().enumerate() {
            for (d, g) in dt.row_mut(c).iter_mut().zip(grad.row(i)) {
                *d += g;
            }
        }
        Ok(Gradients {
            inputs: vec![],
            params: vec![dt],
        })
    }

    fn params(&self) -> Vec<Matrix> {
        vec![self.table.table.clone()]
    }

    fn set_params(&mut self, p: &[Matrix]) -> Result<()> {
        self.table.table = p[0].clone();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use crate::seeds::rng_from_seed;
    use rand::Rng as _;

    #[test]
    fn embedding_lookup() {
        let id = EmbeddingTable {
            field_name: "c".into(),
            table: Matrix::identity(3),
        };
        assert_eq!(embed_lookup(&id, 1).unwrap(), vec![0.0, 1.0, 0.0]);
        let t = EmbeddingTable {
            field_name: "c".into(),
            table: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap(),
        };
        assert_eq!(embed_lookup(&t, 0).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(embed_lookup(&t, 2), Err(Error::Encoding(_))));
    }

    #[test]
    fn assemble_concatenates_in_order() {
        let z = assemble_input(&[0.5, -1.0], &[&[1.0, 2.0]], 4).unwrap();
        assert_eq!(z, vec![0.5, -1.0, 1.0, 2.0]);
        assert_eq!(assemble_input(&[3.0], &[], 1).unwrap(), vec![3.0]);
        assert_eq!(assemble_input(&[], &[&[1.0], &[2.0]], 2).unwrap().len(), 2);
        assert!(assemble_input(&[1.0], &[&[1.0]], 3).is_err());
    }

    #[test]
    fn noise_degenerate_and_inference() {
        let z = [1.0, -2.0, 0.25];
        let mut rng = rng_from_seed(1);
        let cfg = NoiseConfig {
            mu: 0.5,
            sigma: 0.0,
            train_only: true,
        };
        assert_eq!(
            inject_noise(&z, &cfg, Mode::Train, &mut rng).unwrap(),
            vec![1.5, -1.5, 0.75]
        );
        let cfg = NoiseConfig {
            mu: 3.0,
            sigma: 2.0,
            train_only: true,
        };
        assert_eq!(inject_noise(&z, &cfg, Mode::Infer, &mut rng).unwrap(), z.to_vec());
    }

    #[test]
    fn noise_mean_within_three_sigma() {
        let cfg = NoiseConfig {
            mu: 0.0,
            sigma: 0.1,
            train_only: true,
        };
        let mut rng = rng_from_seed(9);
        let n = 100_000;
        let draws = inject_noise(&vec![0.0; n], &cfg, Mode::Train, &mut rng).unwrap();
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 0.1 / (n as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn noise_rejects_negative_sigma() {
        let cfg = NoiseConfig {
            mu: 0.0,
            sigma: -1.0,
            train_only: true,
        };
        assert!(inject_noise(&[0.0], &cfg, Mode::Train, &mut rng_from_seed(0)).is_err());
    }

    #[test]
    fn cross_forward_examples() {
        let zero = CrossLayerParams::zeros(2);
        assert_eq!(cross_forward(&[5.0, 6.0], &[3.0, 4.0], &zero).unwrap(), vec![3.0, 4.0]);
        let p = CrossLayerParams::new(&[0.5, 0.5], 1.0);
        assert_eq!(cross_forward(&[1.0, 2.0], &[3.0, 4.0], &p).unwrap(), vec![7.5, 13.0]);
        assert_eq!(cross_forward(&[0.0, 0.0], &[0.0, 0.0], &p).unwrap(), vec![0.0, 0.0]);
        assert!(cross_forward(&[1.0], &[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn deep_forward_examples() {
        let id = DenseLayerParams::new(Matrix::identity(2), &[0.0, 0.0], Activation::Identity).unwrap();
        assert_eq!(deep_forward(&[0.3, -4.0], &id).unwrap(), vec![0.3, -4.0]);
        let p = DenseLayerParams::new(Matrix::from_rows(&[[1.0, 1.0]]).unwrap(), &[-3.0], Activation::Relu).unwrap();
        assert_eq!(deep_forward(&[1.0, 1.0], &p).unwrap(), vec![0.0]);
        let p = DenseLayerParams::new(Matrix::from_rows(&[[2.0]]).unwrap(), &[1.0], Activation::Relu).unwrap();
        assert_eq!(deep_forward(&[3.0], &p).unwrap(), vec![7.0]);
        assert!(deep_forward(&[3.0, 1.0], &p).is_err());
    }

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn cross_gradients() {
        let mut rng = rng_from_seed(3);
        let mut p = CrossLayerParams {
            w: random(1, 5, &mut rng),
            b: random(1, 1, &mut rng),
        };
        let x0 = random(3, 5, &mut rng);
        let xl = random(3, 5, &mut rng);
        let r = grad_check(&mut p, &[x0, xl], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn dense_gradients() {
        let mut rng = rng_from_seed(4);
        for act in [Activation::Relu, Activation::Identity] {
            let w = random(4, 6, &mut rng);
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let mut p = DenseLayerParams::new(w, &b, act).unwrap();
            let h = random(3, 6, &mut rng);
            let r = grad_check(&mut p, &[h], 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn embedding_gradients() {
        let mut rng = rng_from_seed(5);
        let mut probe = EmbeddingProbe {
            table: EmbeddingTable {
                field_name: "city".into(),
                table: random(4, 3, &mut rng),
            },
            codes: vec![2, 0, 2, 3],
        };
        let r = grad_check(&mut probe, &[], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
