//! Multi-head scaled dot-product attention over feature tokens.
//!
//! Every schema field is one token. A dense scalar `z_j` becomes
//! `z_j · P_j` through its own `1 x d_model` projection; a sparse field's
//! embedding `e_k` becomes `e_k · P_k` through a `d x d_model` projection.
//! Each head attends over the `T = m + n` tokens, head outputs are
//! concatenated and mixed by `W_O`, and the block output is the mean of the
//! `T` mixed token vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{softmax_in_place, Differentiable, Gradients, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_dense: usize,
    pub n_sparse: usize,
    pub embed_dim: usize,
    pub d_model: usize,
}

impl TokenLayout {
    pub fn tokens(&self) -> usize {
        self.n_dense + self.n_sparse
    }

    /// Length of the assembled input vector.
    pub fn input_dim(&self) -> usize {
        self.n_dense + self.n_sparse * self.embed_dim
    }

    /// Expected shape of token `t`'s projection.
    pub fn projection_shape(&self, t: usize) -> (usize, usize) {
        if t < self.n_dense {
            (1, self.d_model)
        } else {
            (self.embed_dim, self.d_model)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `(heads · d_k) x d_model`
    pub w_o: Matrix,
}

impl AttentionParams {
    pub fn d_k(&self) -> usize {
        self.heads.first().map_or(0, |h| h.w_q.cols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBlock {
    pub layout: TokenLayout,
    pub projections: Vec<Matrix>,
    pub params: AttentionParams,
}

/// Per-sample intermediates kept for the backward pass.
pub(crate) struct SampleCache {
    tokens: Matrix,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
    weights: Vec<Matrix>,
    concat: Matrix,
}

pub(crate) struct AttentionGrads {
    pub projections: Vec<Matrix>,
    pub heads: Vec<HeadParams>,
    pub w_o: Matrix,
}

impl AttentionBlock {
    pub fn validate(&self) -> Result<()> {
        let l = &self.layout;
        if self.projections.len() != l.tokens() {
            return Err(Error::shape(
                "attention",
                format!("{} tokens", l.tokens()),
                format!("{} projections", self.projections.len()),
            ));
        }
        for (t, p) in self.projections.iter().enumerate() {
            let (r, c) = l.projection_shape(t);
            if p.rows() != r || p.cols() != c {
                return Err(Error::shape("attention projection", format!("{r}x{c}"), p.shape()));
            }
        }
        if self.params.heads.is_empty() {
            return Err(Error::Argument("attention needs at least one head".into()));
        }
        let dk = self.params.d_k();
        for h in &self.params.heads {
            for w in [&h.w_q, &h.w_k, &h.w_v] {
                if w.rows() != l.d_model || w.cols() != dk {
                    return Err(Error::shape("attention head", format!("{}x{dk}", l.d_model), w.shape()));
                }
            }
        }
        let w_o = &self.params.w_o;
        if w_o.rows() != self.params.heads.len() * dk || w_o.cols() != l.d_model {
            return Err(Error::shape(
                "attention output",
                format!("{}x{}", self.params.heads.len() * dk, l.d_model),
                w_o.shape(),
            ));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layout.d_model
    }

    fn tokens(&self, z: &[f64]) -> Matrix {
        let l = &self.layout;
        let mut tok = Matrix::zeros(l.tokens(), l.d_model);
        for j in 0..l.n_dense {
            let p = self.projections[j].as_slice();
            for (t, &pv) in tok.row_mut(j).iter_mut().zip(p) {
                *t = z[j] * pv;
            }
        }
        for k in 0..l.n_sparse {
            let start = l.n_dense + k * l.embed_dim;
            let e = Matrix::row_vector(&z[start..start + l.embed_dim]);
            let row = e
                .matmul(&self.projections[l.n_dense + k])
                .expect("validated projection shape");
            tok.row_mut(l.n_dense + k).copy_from_slice(row.as_slice());
        }
        tok
    }

    pub(crate) fn forward_sample(&self, z: &[f64]) -> Result<(Vec<f64>, SampleCache)> {
        let l = &self.layout;
        if z.len() != l.input_dim() {
            return Err(Error::shape("attention_forward", l.input_dim(), z.len()));
        }
        let dk = self.params.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let n_tok = l.tokens();
        let tokens = self.tokens(z);
        let mut concat = Matrix::zeros(n_tok, self.params.heads.len() * dk);
        let (mut qs, mut ks, mut vs, mut ws) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (h, head) in self.params.heads.iter().enumerate() {
            let q = tokens.matmul(&head.w_q)?;
            let k = tokens.matmul(&head.w_k)?;
            let v = tokens.matmul(&head.w_v)?;
            let mut a = q.matmul_t(&k)?.scale(scale);
            for i in 0..n_tok {
                softmax_in_place(a.row_mut(i));
            }
            let o = a.matmul(&v)?;
            for i in 0..n_tok {
                concat.row_mut(i)[h * dk..(h + 1) * dk].copy_from_slice(o.row(i));
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
            ws.push(a);
        }
        let mixed = concat.matmul(&self.params.w_o)?;
        let out = mixed.col_sums().scale(1.0 / n_tok as f64).into_vec();
        Ok((
            out,
            SampleCache {
                tokens,
                q: qs,
                k: ks,
                v: vs,
                weights: ws,
                concat,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns `d z`.
    pub(crate) fn backward_sample(
        &self,
        z: &[f64],
        cache: &SampleCache,
        grad_out: &[f64],
        grads: &mut AttentionGrads,
    ) -> Result<Vec<f64>> {
        let l = &self.layout;
        let dk = self.params.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let n_tok = l.tokens();

        let g = Matrix::row_vector(grad_out).scale(1.0 / n_tok as f64);
        // every mixed-token row receives the same upstream gradient
        let concat_sum = cache.concat.col_sums();
        grads.w_o.add_assign(&concat_sum.t_matmul(&g)?)?;
        let dconcat_row = g.matmul_t(&self.params.w_o)?;

        let mut dtok = Matrix::zeros(n_tok, l.d_model);
        for (h, head) in self.params.heads.iter().enumerate() {
            let mut dout = Matrix::zeros(n_tok, dk);
            for i in 0..n_tok {
                dout.row_mut(i)
                    .copy_from_slice(&dconcat_row.as_slice()[h * dk..(h + 1) * dk]);
            }
            let a = &cache.weights[h];
            let da = dout.matmul_t(&cache.v[h])?;
            let dv = a.t_matmul(&dout)?;
            let mut ds = Matrix::zeros(n_tok, n_tok);
            for i in 0..n_tok {
                let ar = a.row(i);
                let dar = da.row(i);
                let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for (d, (&av, &dav)) in ds.row_mut(i).iter_mut().zip(ar.iter().zip(dar)) {
                    *d = av * (dav - inner) * scale;
                }
            }
            let dq = ds.matmul(&cache.k[h])?;
            let dk_ = ds.t_matmul(&cache.q[h])?;

            let hg = &mut grads.heads[h];
            hg.w_q.add_assign(&cache.tokens.t_matmul(&dq)?)?;
            hg.w_k.add_assign(&cache.tokens.t_matmul(&dk_)?)?;
            hg.w_v.add_assign(&cache.tokens.t_matmul(&dv)?)?;

            dtok.add_assign(&dq.matmul_t(&head.w_q)?)?;
            dtok.add_assign(&dk_.matmul_t(&head.w_k)?)?;
            dtok.add_assign(&dv.matmul_t(&head.w_v)?)?;
        }

        let mut dz = vec![0.0; l.input_dim()];
        for j in 0..l.n_dense {
            let p = self.projections[j].as_slice();
            let dt = dtok.row(j);
            for (gp, &d) in grads.projections[j].as_mut_slice().iter_mut().zip(dt) {
                *gp += z[j] * d;
            }
            dz[j] = dt.iter().zip(p).map(|(a, b)| a * b).sum();
        }
        for k in 0..l.n_sparse {
            let t = l.n_dense + k;
            let start = l.n_dense + k * l.embed_dim;
            let e = &z[start..start + l.embed_dim];
            let dt = dtok.row(t);
            let proj = &self.projections[t];
            let gp = &mut grads.projections[t];
            for (r, &ev) in e.iter().enumerate() {
                for (g, &d) in gp.row_mut(r).iter_mut().zip(dt) {
                    *g += ev * d;
                }
                dz[start + r] = proj.row(r).iter().zip(dt).map(|(a, b)| a * b).sum();
            }
        }
        Ok(dz)
    }

    pub fn forward_batch(&self, z: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(z.rows(), self.output_dim());
        for i in 0..z.rows() {
            let (a, _) = self.forward_sample(z.row(i))?;
            out.row_mut(i).copy_from_slice(&a);
        }
        Ok(out)
    }

    /// Per-head attention weight matrices (`T x T`) for one sample.
    pub fn attention_weights(&self, z: &[f64]) -> Result<Vec<Matrix>> {
        Ok(self.forward_sample(z)?.1.weights)
    }

    pub(crate) fn zero_grads(&self) -> AttentionGrads {
        AttentionGrads {
            projections: self
                .projections
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            heads: self
                .params
                .heads
                .iter()
                .map(|h| HeadParams {
                    w_q: Matrix::zeros(h.w_q.rows(), h.w_q.cols()),
                    w_k: Matrix::zeros(h.w_k.rows(), h.w_k.cols()),
                    w_v: Matrix::zeros(h.w_v.rows(), h.w_v.cols()),
                })
                .collect(),
            w_o: Matrix::zeros(self.params.w_o.rows(), self.params.w_o.cols()),
        }
    }

    /// Parameters in canonical order: projections, then `w_q, w_k, w_v` per
    /// head, then `w_o`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.projections.iter().collect();
        for h in &self.params.heads {
            out.extend([&h.w_q, &h.w_k, &h.w_v]);
        }
        out.push(&self.params.w_o);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.projections.iter_mut().collect();
        for h in &mut self.params.heads {
            out.extend([&mut h.w_q, &mut h.w_k, &mut h.w_v]);
        }
        out.push(&mut self.params.w_o);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.projections.len())
            .map(|t| format!("attention.projection.{t}"))
            .collect();
        for h in 0..self.params.heads.len() {
            for w in ["w_q", "w_k", "w_v"] {
                out.push(format!("attention.head.{h}.{w}"));
            }
        }
        out.push("attention.w_o".into());
        out
    }
}

impl AttentionGrads {
    pub(crate) fn into_tensors(self) -> Vec<Matrix> {
        let mut out = self.projections;
        for h in self.heads {
            out.extend([h.w_q, h.w_k, h.w_v]);
        }
        out.push(self.w_o);
        out
    }
}

pub fn attention_forward(z: &[f64], block: &AttentionBlock) -> Result<Vec<f64>> {
    block.validate()?;
    Ok(block.forward_sample(z)?.0)
}

impl Differentiable for AttentionBlock {
    fn name(&self) -> String {
        "attention".into()
    }

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        self.forward_batch(&inputs[0])
    }

    fn backward(&self, inputs: &[Matrix], grad: &Matrix) -> Result<Gradients> {
        let z = &inputs[0];
        let mut grads = self.zero_grads();
        let mut dz = Matrix::zeros(z.rows(), z.cols());
        for i in 0..z.rows() {
            let (_, cache) = self.forward_sample(z.row(i))?;
            let d = self.backward_sample(z.row(i), &cache, grad.row(i), &mut grads)?;
            dz.row_mut(i).copy_from_slice(&d);
        }
        Ok(Gradients {
            inputs: vec![dz],
            params: grads.into_tensors(),
        })
    }

    fn params(&self) -> Vec<Matrix> {
        self.tensors().into_iter().cloned().collect()
    }

    fn set_params(&mut self, p: &[Matrix]) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != p.len() {
            return Err(Error::shape("attention set_params", slots.len(), p.len()));
        }
        for (slot, v) in slots.into_iter().zip(p) {
            *slot = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use crate::seeds::{rng_from_seed, Rng};
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn random_block(layout: TokenLayout, heads: usize, dk: usize, rng: &mut Rng) -> AttentionBlock {
        let projections = (0..layout.tokens())
            .map(|t| {
                let (r, c) = layout.projection_shape(t);
                random(r, c, rng)
            })
            .collect();
        let heads = (0..heads)
            .map(|_| HeadParams {
                w_q: random(layout.d_model, dk, rng),
                w_k: random(layout.d_model, dk, rng),
                w_v: random(layout.d_model, dk, rng),
            })
            .collect::<Vec<_>>();
        let w_o = random(heads.len() * dk, layout.d_model, rng);
        let block = AttentionBlock {
            layout,
            projections,
            params: AttentionParams { heads, w_o },
        };
        block.validate().unwrap();
        block
    }

    const LAYOUT: TokenLayout = TokenLayout {
        n_dense: 3,
        n_sparse: 2,
        embed_dim: 2,
        d_model: 4,
    };

    #[test]
    fn identical_tokens_attend_uniformly() {
        let layout = TokenLayout {
            n_dense: 3,
            n_sparse: 0,
            embed_dim: 1,
            d_model: 4,
        };
        let mut rng = rng_from_seed(1);
        let mut block = random_block(layout, 2, 3, &mut rng);
        let p = block.projections[0].clone();
        block.projections = vec![p.clone(), p.clone(), p];
        let z = [0.7, 0.7, 0.7];
        for w in block.attention_weights(&z).unwrap() {
            for &v in w.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_token_passes_value_through() {
        let layout = TokenLayout {
            n_dense: 1,
            n_sparse: 0,
            embed_dim: 1,
            d_model: 2,
        };
        let mut rng = rng_from_seed(2);
        let block = random_block(layout, 1, 2, &mut rng);
        let z = [1.3];
        let w = block.attention_weights(&z).unwrap();
        assert_eq!(w[0].as_slice(), &[1.0]);
        // output = v · W_O where v = tok · W_v
        let tok = block.projections[0].scale(1.3);
        let v = tok.matmul(&block.params.heads[0].w_v).unwrap();
        let expected = v.matmul(&block.params.w_o).unwrap();
        let out = attention_forward(&z, &block).unwrap();
        for (a, b) in out.iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_set_logits_give_quarter_three_quarter_weights() {
        // T = 2 dense tokens, d_model = 1, d_k = 1.
        // tok = [z0·1, z1·1]; q = tok·1, k = tok·1, v = tok·1.
        // With z = (0, √ln3): logits row0 = [0, 0], row1 = [0, ln3].
        let layout = TokenLayout {
            n_dense: 2,
            n_sparse: 0,
            embed_dim: 1,
            d_model: 1,
        };
        let one = || Matrix::from_rows(&[[1.0]]).unwrap();
        let block = AttentionBlock {
            layout,
            projections: vec![one(), one()],
            params: AttentionParams {
                heads: vec![HeadParams {
                    w_q: one(),
                    w_k: one(),
                    w_v: one(),
                }],
                w_o: one(),
            },
        };
        let s = 3f64.ln().sqrt();
        let z = [0.0, s];
        let w = &block.attention_weights(&z).unwrap()[0];
        assert!((w[(1, 0)] - 0.25).abs() < 1e-15);
        assert!((w[(1, 1)] - 0.75).abs() < 1e-15);
        assert!((w[(0, 0)] - 0.5).abs() < 1e-15);
        // token outputs: row0 = 0.5·0 + 0.5·s, row1 = 0.25·0 + 0.75·s; mean of both
        let out = attention_forward(&z, &block).unwrap();
        let expected = (0.5 * s + 0.75 * s) / 2.0;
        assert!((out[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = rng_from_seed(7);
        for _ in 0..50 {
            let block = random_block(LAYOUT, 3, 2, &mut rng);
            let z: Vec<f64> = (0..LAYOUT.input_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            for w in block.attention_weights(&z).unwrap() {
                for r in w.iter_rows() {
                    assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(r.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let mut rng = rng_from_seed(8);
        let block = random_block(LAYOUT, 2, 2, &mut rng);
        assert!(matches!(
            attention_forward(&[1.0, 2.0], &block),
            Err(Error::Shape { .. })
        ));
        let mut bad = block.clone();
        bad.projections.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_from_seed(11);
        let mut block = random_block(LAYOUT, 2, 3, &mut rng);
        let z = random(3, LAYOUT.input_dim(), &mut rng);
        let r = grad_check(&mut block, &[z], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
