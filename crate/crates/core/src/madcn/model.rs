use rand::Rng as _;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionBlock, AttentionParams, HeadParams, SampleCache, TokenLayout};
use super::layers::{Activation, CrossLayerParams, DenseLayerParams, EmbeddingTable, Mode, NoiseConfig};
use crate::error::{Error, Result, StageExt};
use crate::features::{CategoryMaps, CodeMatrix, Dataset, FeatureSchema, StandardizerStats};
use crate::numcore::{Differentiable, Gradients, Matrix};
use crate::seeds::{rng_from_seed, Rng};

/// Which branches feed the output head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Cross, deep and attention branches.
    #[default]
    Madcn,
    /// Deep branch only.
    DnnOnly,
    /// Cross and deep branches, no attention, no noise.
    DcnNoAttention,
}

impl ModelKind {
    pub fn has_cross(self) -> bool {
        matches!(self, ModelKind::Madcn | ModelKind::DcnNoAttention)
    }

    pub fn has_attention(self) -> bool {
        self == ModelKind::Madcn
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Madcn => "MADCN",
            ModelKind::DnnOnly => "DNN",
            ModelKind::DcnNoAttention => "DCN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub cross_layers: usize,
    pub deep_layers: Vec<usize>,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub noise: NoiseConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Madcn,
            embed_dim: 8,
            cross_layers: 3,
            deep_layers: vec![128, 64],
            heads: 4,
            d_model: 32,
            d_k: 8,
            noise: NoiseConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Argument("embed_dim must be positive".into()));
        }
        if self.deep_layers.contains(&0) {
            return Err(Error::Argument("deep layer widths must be positive".into()));
        }
        if self.kind.has_attention() && (self.heads == 0 || self.d_model == 0 || self.d_k == 0) {
            return Err(Error::Argument("heads, d_model and d_k must be positive".into()));
        }
        Ok(())
    }
}

/// Affine target scaling: the network is trained on `(y - mu) / sigma` and
/// predictions are mapped back to raw units.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetScaler {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl TargetScaler {
    pub fn identity(targets: usize) -> Self {
        Self {
            mu: vec![0.0; targets],
            sigma: vec![1.0; targets],
        }
    }

    /// Mean and population standard deviation per target over `rows`; a
    /// zero spread falls back to `sigma = 1`.
    pub fn fit(ds: &Dataset, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("cannot fit target scaling on zero rows".into()));
        }
        let n = rows.len() as f64;
        let t = ds.targets.cols();
        let mut mu = vec![0.0; t];
        let mut sigma = vec![0.0; t];
        for j in 0..t {
            let m = rows.iter().map(|&r| ds.targets[(r, j)]).sum::<f64>() / n;
            let v = rows.iter().map(|&r| (ds.targets[(r, j)] - m).powi(2)).sum::<f64>() / n;
            mu[j] = m;
            sigma[j] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Ok(Self { mu, sigma })
    }

    pub fn scale(&self, y: &Matrix) -> Matrix {
        let mut out = y.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mu[j]) / self.sigma[j];
            }
        }
        out
    }

    pub fn unscale(&self, y: &Matrix) -> Matrix {
        let mut out = y.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.sigma[j] + self.mu[j];
            }
        }
        out
    }
}

/// Every learned tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub embeddings: Vec<EmbeddingTable>,
    pub cross_stack: Vec<CrossLayerParams>,
    pub deep_stack: Vec<DenseLayerParams>,
    pub attention: Option<AttentionBlock>,
    pub output_head: DenseLayerParams,
}

impl ModelParams {
    /// Tensors in canonical order: embeddings, cross layers, deep layers,
    /// attention, output head.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.embeddings.iter().map(|e| &e.table).collect();
        for c in &self.cross_stack {
            out.extend([&c.w, &c.b]);
        }
        for d in &self.deep_stack {
            out.extend([&d.weight, &d.bias]);
        }
        if let Some(a) = &self.attention {
            out.extend(a.tensors());
        }
        out.extend([&self.output_head.weight, &self.output_head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self.embeddings.iter_mut().map(|e| &mut e.table).collect();
        for c in &mut self.cross_stack {
            out.extend([&mut c.w, &mut c.b]);
        }
        for d in &mut self.deep_stack {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut());
        }
        out.extend([&mut self.output_head.weight, &mut self.output_head.bias]);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .embeddings
            .iter()
            .map(|e| format!("embedding.{}", e.field_name))
            .collect();
        for l in 0..self.cross_stack.len() {
            out.push(format!("cross.{l}.w"));
            out.push(format!("cross.{l}.b"));
        }
        for l in 0..self.deep_stack.len() {
            out.push(format!("deep.{l}.weight"));
            out.push(format!("deep.{l}.bias"));
        }
        if let Some(a) = &self.attention {
            out.extend(a.tensor_names());
        }
        out.push("output.weight".into());
        out.push("output.bias".into());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn set_tensors(&mut self, values: &[Matrix]) -> Result<()> {
        let slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(Error::shape("set_tensors", slots.len(), values.len()));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("set_tensors", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }
}

/// Forward selection: inference is deterministic, training draws noise from
/// the supplied generator.
pub enum ForwardMode<'a> {
    Infer,
    Train(&'a mut Rng),
}

impl ForwardMode<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            ForwardMode::Infer => Mode::Infer,
            ForwardMode::Train(_) => Mode::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MadcnModel {
    pub schema: FeatureSchema,
    pub category_maps: CategoryMaps,
    pub standardizer: StandardizerStats,
    pub target_scaler: TargetScaler,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
}

pub(crate) struct ForwardCache {
    z: Matrix,
    cross_xs: Vec<Matrix>,
    cross_gates: Vec<Vec<f64>>,
    deep_inputs: Vec<Matrix>,
    deep_pres: Vec<Matrix>,
    attention: Vec<SampleCache>,
    z_final: Matrix,
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::new(rows, cols, data).expect("sized by construction")
}

impl MadcnModel {
    /// Builds a freshly initialized model. Weights and embeddings are drawn
    /// from `U(-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))`, biases are
    /// zero.
    pub fn new(
        schema: FeatureSchema,
        standardizer: StandardizerStats,
        target_scaler: TargetScaler,
        config: ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        schema.validate()?;
        let mut config = config;
        if config.kind != ModelKind::Madcn {
            config.noise = NoiseConfig::OFF;
        }
        config.validate()?;
        if standardizer.fields.len() != schema.n_dense()
            || standardizer
                .fields
                .iter()
                .zip(&schema.dense_fields)
                .any(|(s, f)| s.name != f.name)
        {
            return Err(Error::Schema(
                "standardizer does not match the schema's dense fields".into(),
            ));
        }
        if target_scaler.mu.len() != schema.n_targets() || target_scaler.sigma.len() != schema.n_targets() {
            return Err(Error::Schema(
                "target scaling does not match the schema's targets".into(),
            ));
        }

        let mut rng = rng_from_seed(seed);
        let m = schema.n_dense();
        let d = config.embed_dim;
        let input_dim = m + schema.n_sparse() * d;

        let embeddings = schema
            .sparse_fields
            .iter()
            .map(|f| EmbeddingTable {
                field_name: f.name.clone(),
                table: glorot(f.cardinality, d, f.cardinality, d, &mut rng),
            })
            .collect();

        let cross_stack = if config.kind.has_cross() {
            (0..config.cross_layers)
                .map(|_| CrossLayerParams {
                    w: glorot(1, input_dim, input_dim, 1, &mut rng),
                    b: Matrix::zeros(1, 1),
                })
                .collect()
        } else {
            Vec::new()
        };

        let mut deep_stack = Vec::new();
        let mut width = input_dim;
        for &out in &config.deep_layers {
            deep_stack.push(DenseLayerParams {
                weight: glorot(out, width, width, out, &mut rng),
                bias: Matrix::zeros(1, out),
                activation: Activation::Relu,
            });
            width = out;
        }

        let attention = if config.kind.has_attention() {
            let layout = TokenLayout {
                n_dense: m,
                n_sparse: schema.n_sparse(),
                embed_dim: d,
                d_model: config.d_model,
            };
            let projections = (0..layout.tokens())
                .map(|t| {
                    let (r, c) = layout.projection_shape(t);
                    glorot(r, c, r, c, &mut rng)
                })
                .collect();
            let (dm, dk) = (config.d_model, config.d_k);
            let heads = (0..config.heads)
                .map(|_| HeadParams {
                    w_q: glorot(dm, dk, dm, dk, &mut rng),
                    w_k: glorot(dm, dk, dm, dk, &mut rng),
                    w_v: glorot(dm, dk, dm, dk, &mut rng),
                })
                .collect();
            let hd = config.heads * dk;
            let block = AttentionBlock {
                layout,
                projections,
                params: AttentionParams {
                    heads,
                    w_o: glorot(hd, dm, hd, dm, &mut rng),
                },
            };
            block.validate()?;
            Some(block)
        } else {
            None
        };

        let head_in = if config.kind.has_cross() { input_dim } else { 0 }
            + width
            + attention.as_ref().map_or(0, |a| a.output_dim());
        let t = schema.n_targets();
        let output_head = DenseLayerParams {
            weight: glorot(t, head_in, head_in, t, &mut rng),
            bias: Matrix::zeros(1, t),
            activation: Activation::Identity,
        };

        Ok(Self {
            schema,
            category_maps: CategoryMaps::new(),
            standardizer,
            target_scaler,
            config,
            params: ModelParams {
                embeddings,
                cross_stack,
                deep_stack,
                attention,
                output_head,
            },
            seed,
        })
    }

    /// Fits input standardization and target scaling on `train_rows`, then
    /// initializes.
    pub fn for_dataset(ds: &Dataset, train_rows: &[usize], config: ModelConfig, seed: u64) -> Result<Self> {
        let standardizer = StandardizerStats::fit(ds, train_rows)?;
        let scaler = TargetScaler::fit(ds, train_rows)?;
        let mut model = Self::new(ds.schema.clone(), standardizer, scaler, config, seed)?;
        model.category_maps = ds.category_maps.clone();
        Ok(model)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn input_dim(&self) -> usize {
        self.schema.n_dense() + self.schema.n_sparse() * self.config.embed_dim
    }

    pub fn n_targets(&self) -> usize {
        self.schema.n_targets()
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.schema != self.schema {
            return Err(Error::Schema("dataset schema differs from the model's schema".into()));
        }
        Ok(())
    }

    fn check_inputs(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<()> {
        if dense.cols() != self.schema.n_dense()
            || codes.cols() != self.schema.n_sparse()
            || dense.rows() != codes.rows()
        {
            return Err(Error::shape(
                "model input",
                format!(
                    "{} dense / {} sparse fields",
                    self.schema.n_dense(),
                    self.schema.n_sparse()
                ),
                format!("dense {} / codes {}x{}", dense.shape(), codes.rows(), codes.cols()),
            ));
        }
        Ok(())
    }

    /// Standardized dense block followed by the embeddings.
    fn assemble(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        let m = self.schema.n_dense();
        let d = self.config.embed_dim;
        let mut z = Matrix::zeros(dense.rows(), self.input_dim());
        for i in 0..dense.rows() {
            let row = z.row_mut(i);
            for (j, &x) in dense.row(i).iter().enumerate() {
                row[j] = self.standardizer.standardize_value(j, x);
            }
            for (k, (table, &code)) in self.params.embeddings.iter().zip(codes.row(i)).enumerate() {
                row[m + k * d..m + (k + 1) * d].copy_from_slice(table.lookup(code)?);
            }
        }
        Ok(z)
    }

    /// Draws the deep-branch noise for `rows` samples, or `None` when noise
    /// is inactive for the mode or configured off.
    pub(crate) fn draw_noise(&self, rows: usize, mode: &mut ForwardMode<'_>) -> Option<Matrix> {
        let cfg = &self.config.noise;
        if cfg.is_off() || !cfg.active(mode.mode()) {
            return None;
        }
        let ForwardMode::Train(rng) = mode else {
            return None;
        };
        let normal = cfg.sampler();
        let data = (0..rows * self.input_dim()).map(|_| normal.sample(*rng)).collect();
        Some(Matrix::new(rows, self.input_dim(), data).expect("sized by construction"))
    }

    /// Batched forward pass in standardized target units.
    pub(crate) fn forward_cached(
        &self,
        dense: &Matrix,
        codes: &CodeMatrix,
        noise: Option<&Matrix>,
    ) -> Result<(Matrix, ForwardCache)> {
        self.check_inputs(dense, codes)?;
        let z = self.assemble(dense, codes).stage("embedding")?;
        let p = &self.params;

        let mut cross_xs = Vec::new();
        let mut cross_gates = Vec::new();
        if self.kind().has_cross() {
            let mut x = z.clone();
            for layer in &p.cross_stack {
                let (next, gates) = layer.forward_batch(&z, &x).stage("cross network")?;
                cross_xs.push(x);
                cross_gates.push(gates);
                x = next;
            }
            cross_xs.push(x);
        }

        let mut h = match noise {
            Some(r) => z.add(r).stage("noise")?,
            None => z.clone(),
        };
        let mut deep_inputs = Vec::with_capacity(p.deep_stack.len());
        let mut deep_pres = Vec::with_capacity(p.deep_stack.len());
        for layer in &p.deep_stack {
            let (out, pre) = layer.forward_batch(&h).stage("deep network")?;
            deep_inputs.push(h);
            deep_pres.push(pre);
            h = out;
        }

        let mut attention = Vec::new();
        let mut attn_out = Matrix::zeros(z.rows(), 0);
        if let Some(block) = &p.attention {
            attn_out = Matrix::zeros(z.rows(), block.output_dim());
            for i in 0..z.rows() {
                let (a, cache) = block.forward_sample(z.row(i)).stage("attention")?;
                attn_out.row_mut(i).copy_from_slice(&a);
                attention.push(cache);
            }
        }

        let mut parts: Vec<&Matrix> = Vec::with_capacity(3);
        if let Some(x_l) = cross_xs.last() {
            parts.push(x_l);
        }
        parts.push(&h);
        if p.attention.is_some() {
            parts.push(&attn_out);
        }
        let z_final = Matrix::hstack(&parts)?;
        let (y, _) = p.output_head.forward_batch(&z_final).stage("output head")?;
        deep_inputs.push(h);

        Ok((
            y,
            ForwardCache {
                z,
                cross_xs,
                cross_gates,
                deep_inputs,
                deep_pres,
                attention,
                z_final,
            },
        ))
    }

    /// Back-propagates `dy` (gradient w.r.t. the standardized outputs).
    /// Returns parameter gradients in [`ModelParams::tensors`] order and the
    /// gradient w.r.t. the raw dense inputs.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        codes: &CodeMatrix,
        dy: &Matrix,
    ) -> Result<(Vec<Matrix>, Matrix)> {
        let p = &self.params;
        let rows = cache.z.rows();
        let input_dim = self.input_dim();

        // identity activation: the pre-activation argument is not read
        let (dz_final, d_out_w, d_out_b) = p.output_head.backward_batch(&cache.z_final, dy, dy)?;

        let mut offset = 0;
        let mut dz = Matrix::zeros(rows, input_dim);

        // cross branch
        let mut cross_grads = Vec::with_capacity(2 * p.cross_stack.len());
        if self.kind().has_cross() {
            let mut dx = dz_final.cols_slice(0, input_dim);
            offset += input_dim;
            let mut dx0 = Matrix::zeros(rows, input_dim);
            let mut per_layer = Vec::with_capacity(p.cross_stack.len());
            for (l, layer) in p.cross_stack.iter().enumerate().rev() {
                let (g0, gl, gw, gb) = layer.backward_batch(&cache.z, &cache.cross_xs[l], &cache.cross_gates[l], &dx);
                dx0.add_assign(&g0)?;
                dx = gl;
                per_layer.push((gw, gb));
            }
            dz.add_assign(&dx0)?;
            dz.add_assign(&dx)?;
            for (gw, gb) in per_layer.into_iter().rev() {
                cross_grads.push(gw);
                cross_grads.push(gb);
            }
        }

        // deep branch
        let deep_width = cache.deep_inputs.last().map_or(input_dim, |h| h.cols());
        let mut dh = dz_final.cols_slice(offset, deep_width);
        offset += deep_width;
        let mut deep_grads = Vec::with_capacity(2 * p.deep_stack.len());
        for (l, layer) in p.deep_stack.iter().enumerate().rev() {
            let (g, gw, gb) = layer.backward_batch(&cache.deep_inputs[l], &cache.deep_pres[l], &dh)?;
            dh = g;
            deep_grads.push((gw, gb));
        }
        dz.add_assign(&dh)?;
        let deep_grads: Vec<Matrix> = deep_grads.into_iter().rev().flat_map(|(w, b)| [w, b]).collect();

        // attention branch
        let mut attn_grads = Vec::new();
        if let Some(block) = &p.attention {
            let da = dz_final.cols_slice(offset, block.output_dim());
            let mut grads = block.zero_grads();
            for i in 0..rows {
                let d = block.backward_sample(cache.z.row(i), &cache.attention[i], da.row(i), &mut grads)?;
                for (a, b) in dz.row_mut(i).iter_mut().zip(&d) {
                    *a += b;
                }
            }
            attn_grads = grads.into_tensors();
        }

        // embeddings and raw dense inputs
        let m = self.schema.n_dense();
        let d = self.config.embed_dim;
        let mut emb_grads: Vec<Matrix> = p
            .embeddings
            .iter()
            .map(|e| Matrix::zeros(e.table.rows(), e.table.cols()))
            .collect();
        let mut d_dense = Matrix::zeros(rows, m);
        for i in 0..rows {
            let g = dz.row(i);
            for (j, v) in d_dense.row_mut(i).iter_mut().enumerate() {
                *v = g[j] * self.standardizer.scale_factor(j);
            }
            for (k, &code) in codes.row(i).iter().enumerate() {
                for (t, &gv) in emb_grads[k]
                    .row_mut(code)
                    .iter_mut()
                    .zip(&g[m + k * d..m + (k + 1) * d])
                {
                    *t += gv;
                }
            }
        }

        let mut out = emb_grads;
        out.extend(cross_grads);
        out.extend(deep_grads);
        out.extend(attn_grads);
        out.push(d_out_w);
        out.push(d_out_b);
        Ok((out, d_dense))
    }

    /// Infer-mode predictions in raw target units, one row per sample.
    pub fn predict(&self, dense: &Matrix, codes: &CodeMatrix) -> Result<Matrix> {
        let (y, _) = self.forward_cached(dense, codes, None)?;
        Ok(self.target_scaler.unscale(&y))
    }

    pub fn predict_rows(&self, ds: &Dataset, rows: &[usize]) -> Result<Matrix> {
        self.check_dataset(ds)?;
        self.predict(&ds.dense.select_rows(rows), &ds.sparse_codes.select_rows(rows))
    }

    /// Single-sample forward pass in raw target units.
    pub fn forward(&self, dense_raw: &[f64], codes: &[usize], mut mode: ForwardMode<'_>) -> Result<Vec<f64>> {
        let dense = Matrix::row_vector(dense_raw);
        let codes = CodeMatrix::new(1, codes.len(), codes.to_vec())?;
        let noise = self.draw_noise(1, &mut mode);
        let (y, _) = self.forward_cached(&dense, &codes, noise.as_ref())?;
        Ok(self.target_scaler.unscale(&y).into_vec())
    }
}

pub fn model_forward(
    model: &MadcnModel,
    dense_raw: &[f64],
    codes: &[usize],
    mode: ForwardMode<'_>,
) -> Result<Vec<f64>> {
    model.forward(dense_raw, codes, mode)
}

/// Whole infer-mode model as a differentiable map from raw dense inputs to
/// raw-unit predictions, with the categorical codes held fixed.
pub struct ModelProbe {
    pub model: MadcnModel,
    pub codes: CodeMatrix,
}

impl Differentiable for ModelProbe {
    fn name(&self) -> String {
        format!("model[{}]", self.model.kind().label())
    }

    fn forward(&self, inputs: &[Matrix]) -> Result<Matrix> {
        self.model.predict(&inputs[0], &self.codes)
    }

    fn backward(&self, inputs: &[Matrix], grad: &Matrix) -> Result<Gradients> {
        let (_, cache) = self.model.forward_cached(&inputs[0], &self.codes, None)?;
        let mut dy = grad.clone();
        for i in 0..dy.rows() {
            for (j, v) in dy.row_mut(i).iter_mut().enumerate() {
                *v *= self.model.target_scaler.sigma[j];
            }
        }
        let (params, d_dense) = self.model.backward(&cache, &self.codes, &dy)?;
        Ok(Gradients {
            inputs: vec![d_dense],
            params,
        })
    }

    fn params(&self) -> Vec<Matrix> {
        self.model.params.tensors().into_iter().cloned().collect()
    }

    fn set_params(&mut self, p: &[Matrix]) -> Result<()> {
        self.model.params.set_tensors(p)
    }
}
