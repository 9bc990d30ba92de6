//! Backbone, label-wise embedding encoder and per-class classifier.
//!
//! The backbone is a stack of `conv3x3 → SiLU → 2×2 average pool` stages on
//! NHWC grids. Its output is flattened to `[batch, positions, channels]` and
//! cross-attended by one learned query per class. Attention, output
//! projection and feed-forward weights are shared across classes but act on
//! each query row separately, so class `k`'s embedding never sees another
//! class's query. The classifier is a separate linear head per class.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Container, Real, Tensor};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capacity {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each backbone stage; every stage halves H and W.
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub capacity: Capacity,
    pub seed: u64,
    /// Add fixed 2-D sinusoidal encodings to the feature map.
    #[serde(default)]
    pub positional_encoding: bool,
}

impl ModelConfig {
    pub fn teacher(num_classes: usize, seed: u64) -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            widths: vec![32, 64, 128],
            embed_dim: 32,
            heads: 2,
            num_classes,
            capacity: Capacity::Teacher,
            seed,
            positional_encoding: false,
        }
    }

    pub fn student(num_classes: usize, seed: u64) -> Self {
        Self {
            widths: vec![8, 16, 32],
            capacity: Capacity::Student,
            ..Self::teacher(num_classes, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config("backbone widths must be non-empty and positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("input must have at least one channel"));
        }
        let stride = self.stride();
        if self.height % stride != 0 || self.width % stride != 0 || self.height < stride || self.width < stride {
            return Err(Error::config(format!(
                "input {}x{} is not divisible by the backbone stride {stride}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.widths.len()
    }

    /// Spatial positions `s` of the flattened feature map.
    pub fn spatial_positions(&self) -> usize {
        (self.height / self.stride()) * (self.width / self.stride())
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Backbone output `[batch, positions, channels]`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Real>(pub Tensor<T>);

/// One embedding per (instance, class): `[batch, classes, embed_dim]`.
#[derive(Debug, Clone)]
pub struct LabelWiseEmbeddingSet<T: Real>(pub Tensor<T>);

#[derive(Debug, Clone)]
pub struct Predictions<T: Real> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T: Real> {
    pub features: FeatureMap<T>,
    pub embeddings: LabelWiseEmbeddingSet<T>,
    pub predictions: Predictions<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    stages: Vec<(usize, usize)>,
    queries: usize,
    key_w: usize,
    value_w: usize,
    value_b: usize,
    out_w: usize,
    out_b: usize,
    ffn1_w: usize,
    ffn1_b: usize,
    ffn2_w: usize,
    ffn2_b: usize,
    norm1_w: usize,
    norm1_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    head_w: usize,
    head_b: usize,
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Init {
    /// Uniform with bound √(6/fan_in); layers followed by SiLU.
    He(usize),
    /// Uniform with bound √(3/fan_in).
    Lecun(usize),
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Parameters of one model as graph leaves for a single forward pass.
pub struct Bound<T: Real> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Bound<T> {
    /// Uses caller-built leaves, one per parameter in model order.
    pub fn from_tensors(model: &Model<T>, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != model.params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in model.params.iter().zip(&tensors) {
            if t.shape() != p.shape.as_slice() {
                return Err(Error::config(format!("{}: shape {:?}, expected {:?}", p.name, t.shape(), p.shape)));
            }
        }
        Ok(Bound { tensors })
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    /// Gradients in parameter order (zeros where nothing flowed).
    pub fn grads(&self) -> Vec<Vec<T>> {
        self.tensors.iter().map(Tensor::grad_or_zeros).collect()
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init| -> usize {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &name));
            let value = match init {
                Init::He(fan_in) | Init::Lecun(fan_in) => {
                    let scale = if matches!(init, Init::He(_)) { 6.0 } else { 3.0 };
                    let bound = (scale / fan_in as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::lit(dist.sample(&mut rng))).collect()
                }
            };
            params.push(Param { name, shape, value });
            params.len() - 1
        };

        let mut stages = Vec::new();
        let mut c_in = config.channels;
        for (i, &c_out) in config.widths.iter().enumerate() {
            let w = add(format!("backbone.stage{i}.weight"), vec![9 * c_in, c_out], Init::He(9 * c_in));
            let b = add(format!("backbone.stage{i}.bias"), vec![c_out], Init::Zeros);
            stages.push((w, b));
            c_in = c_out;
        }
        let (c, d, q) = (c_in, config.embed_dim, config.num_classes);
        let layout = Layout {
            stages,
            queries: add("encoder.queries".into(), vec![q, d], Init::Normal(0.02)),
            key_w: add("encoder.key.weight".into(), vec![c, d], Init::Lecun(c)),
            value_w: add("encoder.value.weight".into(), vec![c, d], Init::Lecun(c)),
            value_b: add("encoder.value.bias".into(), vec![d], Init::Zeros),
            out_w: add("encoder.out.weight".into(), vec![d, d], Init::Lecun(d)),
            out_b: add("encoder.out.bias".into(), vec![d], Init::Zeros),
            ffn1_w: add("encoder.ffn1.weight".into(), vec![d, 2 * d], Init::He(d)),
            ffn1_b: add("encoder.ffn1.bias".into(), vec![2 * d], Init::Zeros),
            ffn2_w: add("encoder.ffn2.weight".into(), vec![2 * d, d], Init::Lecun(2 * d)),
            ffn2_b: add("encoder.ffn2.bias".into(), vec![d], Init::Zeros),
            norm1_w: add("encoder.norm1.weight".into(), vec![d], Init::Ones),
            norm1_b: add("encoder.norm1.bias".into(), vec![d], Init::Zeros),
            norm2_w: add("encoder.norm2.weight".into(), vec![d], Init::Ones),
            norm2_b: add("encoder.norm2.bias".into(), vec![d], Init::Zeros),
            head_w: add("classifier.weight".into(), vec![q, d], Init::Lecun(d)),
            head_b: add("classifier.bias".into(), vec![q], Init::Zeros),
        };
        Ok(Model { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Converts every parameter to another element type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Wraps the parameters as leaves; `trainable = false` records no graph.
    pub fn bind(&self, trainable: bool) -> Result<Bound<T>> {
        let tensors = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    Tensor::param(p.value.clone(), &p.shape)
                } else {
                    Tensor::new(p.value.clone(), &p.shape)
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Bound { tensors })
    }

    pub fn forward(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<ModelOutput<T>> {
        let features = self.backbone_forward(p, x)?;
        let embeddings = self.encode_label_embeddings(p, &features)?;
        let predictions = self.classify(p, &embeddings)?;
        Ok(ModelOutput {
            features,
            embeddings,
            predictions,
        })
    }

    /// `[b, H, W, C] -> [b, s, c]`.
    pub fn backbone_forward(&self, p: &Bound<T>, x: &Tensor<T>) -> Result<FeatureMap<T>> {
        let cfg = &self.config;
        let expect = [cfg.height, cfg.width, cfg.channels];
        if x.rank() != 4 || x.shape()[1..] != expect {
            return Err(crate::tensor::TensorError::Shape {
                op: "backbone_forward",
                lhs: x.shape().to_vec(),
                rhs: expect.to_vec(),
            }
            .into());
        }
        let b = x.shape()[0];
        let mut h = x.clone();
        for &(w, bias) in &self.layout.stages {
            h = h
                .im2col3x3()?
                .matmul(&p.tensors[w])?
                .add(&p.tensors[bias])?
                .silu()
                .avg_pool2x2()?;
        }
        let fm = h.reshape(&[b, cfg.spatial_positions(), cfg.feature_channels()])?;
        Ok(FeatureMap(fm))
    }

    /// Cross-attention of the class queries over spatial positions, then a
    /// feed-forward layer; each followed by a residual add and LayerNorm.
    pub fn encode_label_embeddings(
        &self,
        p: &Bound<T>,
        fm: &FeatureMap<T>,
    ) -> Result<LabelWiseEmbeddingSet<T>> {
        let l = &self.layout;
        let t = |i: usize| &p.tensors[i];
        let queries = t(l.queries);
        let attended = self.attend(p, fm, queries)?;
        let eps = T::lit(LAYER_NORM_EPS);
        let x = queries
            .add(&attended)?
            .normalize_lastdim(eps)?
            .mul(t(l.norm1_w))?
            .add(t(l.norm1_b))?;
        let ffn = x
            .matmul(t(l.ffn1_w))?
            .add(t(l.ffn1_b))?
            .silu()
            .matmul(t(l.ffn2_w))?
            .add(t(l.ffn2_b))?;
        let e = x.add(&ffn)?.normalize_lastdim(eps)?.mul(t(l.norm2_w))?.add(t(l.norm2_b))?;
        Ok(LabelWiseEmbeddingSet(e))
    }

    /// Attention output for explicit query vectors, `[b, q, d]`, before the
    /// residual and feed-forward stages.
    pub fn attend(&self, p: &Bound<T>, fm: &FeatureMap<T>, queries: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let l = &self.layout;
        let t = |i: usize| &p.tensors[i];
        let (d, h, q) = (cfg.embed_dim, cfg.heads, cfg.num_classes);
        let dh = d / h;
        let fm = &fm.0;
        let (b, s) = (fm.shape()[0], fm.shape()[1]);
        let fm = if cfg.positional_encoding {
            fm.add(&sinusoidal_encoding(cfg)?)?
        } else {
            fm.clone()
        };
        // [b, s, d] -> [b, h, dh, s]
        let keys_t = fm.matmul(t(l.key_w))?.reshape(&[b, s, h, dh])?.permute(&[0, 2, 3, 1])?;
        // [b, s, d] -> [b, h, s, dh]
        let values = fm
            .matmul(t(l.value_w))?
            .add(t(l.value_b))?
            .reshape(&[b, s, h, dh])?
            .permute(&[0, 2, 1, 3])?;
        // [q, d] -> [h, q, dh]
        let qh = queries.reshape(&[q, h, dh])?.permute(&[1, 0, 2])?;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let attn = qh.matmul(&keys_t)?.mul_scalar(scale).softmax_lastdim()?;
        let attended = attn
            .matmul(&values)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, q, d])?
            .matmul(t(l.out_w))?
            .add(t(l.out_b))?;
        Ok(attended)
    }

    /// Per-class linear heads: `logit_k = ⟨w_k, e_k⟩ + b_k`.
    pub fn classify(&self, p: &Bound<T>, embs: &LabelWiseEmbeddingSet<T>) -> Result<Predictions<T>> {
        let l = &self.layout;
        let logits = embs
            .0
            .mul(&p.tensors[l.head_w])?
            .sum_axis(2)?
            .add(&p.tensors[l.head_b])?;
        let probs = logits.sigmoid();
        Ok(Predictions { logits, probs })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for p in &self.params {
            c.push(&p.name, &p.shape, &p.value)?;
        }
        Ok(c)
    }

    pub fn from_container(config: ModelConfig, container: &Container) -> Result<Self> {
        let mut model = Model::new(config)?;
        for p in &mut model.params {
            let (shape, values) = container
                .get(&p.name)
                .ok_or_else(|| Error::format(0, format!("checkpoint is missing {}", p.name)))?;
            if shape != p.shape.as_slice() {
                return Err(Error::format(
                    0,
                    format!("{}: checkpoint shape {shape:?}, model expects {:?}", p.name, p.shape),
                ));
            }
            p.value = values.iter().map(|&v| T::lit(v as f64)).collect();
        }
        Ok(model)
    }

    /// Writes `<stem>.bin` and `<stem>.json` (index plus model config).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let header = serde_json::json!({ "model": self.config });
        self.to_container()?.write(
            &dir.join(format!("{stem}.bin")),
            &dir.join(format!("{stem}.json")),
            header,
        )
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (container, header) =
            Container::read(&dir.join(format!("{stem}.bin")), &dir.join(format!("{stem}.json")))?;
        let config: ModelConfig = serde_json::from_value(header["model"].clone())
            .map_err(|e| Error::format(0, format!("checkpoint header: {e}")))?;
        Self::from_container(config, &container)
    }
}

/// Fixed 2-D sinusoidal encoding `[s, c]`: the first half of the channels
/// encodes the row, the second half the column.
fn sinusoidal_encoding<T: Real>(cfg: &ModelConfig) -> Result<Tensor<T>> {
    let (gh, gw) = (cfg.height / cfg.stride(), cfg.width / cfg.stride());
    let c = cfg.feature_channels();
    let half = (c / 2).max(1);
    let mut data = vec![T::zero(); gh * gw * c];
    for r in 0..gh {
        for col in 0..gw {
            let row = &mut data[(r * gw + col) * c..(r * gw + col + 1) * c];
            for (ch, v) in row.iter_mut().enumerate() {
                let (pos, i) = if ch < half { (r, ch) } else { (col, ch - half) };
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / half as f64);
                let angle = pos as f64 * freq;
                *v = T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Ok(Tensor::new(data, &[gh * gw, c])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(q: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            height: 4,
            width: 4,
            channels: 2,
            widths: vec![3],
            embed_dim: 4,
            heads: 2,
            num_classes: q,
            capacity: Capacity::Student,
            seed,
            positional_encoding: false,
        }
    }

    fn input(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.height * cfg.width * cfg.channels;
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(data, &[b, cfg.height, cfg.width, cfg.channels]).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(3, 0);
        cfg.num_classes = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(3, 0);
        cfg.embed_dim = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny(3, 0);
        cfg.widths = vec![4, 0];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::teacher(8, 0).validate().is_ok());
    }

    #[test]
    fn feature_map_positions_follow_strides() {
        let mut cfg = ModelConfig::student(4, 0);
        cfg.widths = vec![8, 16];
        assert_eq!(cfg.spatial_positions(), 64);
        let model = Model::<f32>::new(cfg.clone()).unwrap();
        let x = Tensor::<f32>::zeros(&[4, 32, 32, 3]).unwrap();
        let fm = model.backbone_forward(&model.bind(false).unwrap(), &x).unwrap();
        assert_eq!(fm.0.shape(), &[4, 64, 16]);
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut model = Model::<f64>::new(tiny(3, 1)).unwrap();
        let last = model.config().widths.len() - 1;
        for suffix in ["weight", "bias"] {
            let p = model.param_mut(&format!("backbone.stage{last}.{suffix}")).unwrap();
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::<f64>::zeros(&[2, 4, 4, 2]).unwrap();
        let fm = model.backbone_forward(&model.bind(false).unwrap(), &x).unwrap();
        assert!(fm.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let model = Model::<f64>::new(tiny(3, 1)).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 4, 4, 3]).unwrap();
        assert!(model.forward(&model.bind(false).unwrap(), &x).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = tiny(3, 9);
        let x = input(2, &cfg, 4);
        let a = Model::<f64>::new(cfg.clone()).unwrap();
        let b = Model::<f64>::new(cfg.clone()).unwrap();
        let pa = a.forward(&a.bind(false).unwrap(), &x).unwrap().predictions.probs;
        let pb = b.forward(&b.bind(false).unwrap(), &x).unwrap().predictions.probs;
        assert_eq!(pa.data(), pb.data());
        let other = Model::<f64>::new(tiny(3, 10)).unwrap();
        assert_ne!(a.params(), other.params());
    }

    #[test]
    fn single_position_attends_with_weight_one() {
        let mut cfg = tiny(3, 2);
        cfg.height = 2;
        cfg.width = 2;
        assert_eq!(cfg.spatial_positions(), 1);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let p = model.bind(false).unwrap();
        let fm = model.backbone_forward(&p, &input(2, &cfg, 3)).unwrap();
        let q1 = &p.tensors()[model.layout.queries];
        let a = model.attend(&p, &fm, q1).unwrap();
        // Different queries must give the same attended value: the only
        // position gets weight 1 whatever the query.
        let q2: Vec<f64> = (0..12).map(|i| i as f64 - 6.0).collect();
        let b = model.attend(&p, &fm, &Tensor::new(q2, &[3, 4]).unwrap()).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // and all classes share it
        let e = a.data();
        for k in 1..3 {
            for j in 0..4 {
                assert!((e[k * 4 + j] - e[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_features_make_attention_irrelevant() {
        let cfg = tiny(3, 5);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let p = model.bind(false).unwrap();
        let row = [0.3, -1.1, 0.7];
        let fm: Vec<f64> = (0..2 * 4).flat_map(|_| row).collect();
        let fm = FeatureMap(Tensor::new(fm, &[2, 4, 3]).unwrap());
        let e = model.attend(&p, &fm, &p.tensors()[model.layout.queries]).unwrap();
        let d = e.data();
        for k in 1..6 {
            for j in 0..4 {
                assert!((d[k * 4 + j] - d[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_positions_leaves_embeddings_unchanged() {
        let cfg = tiny(3, 6);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let p = model.bind(false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..2 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2, 0, 3, 1];
        let mut permuted = vals.clone();
        for b in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for c in 0..3 {
                    permuted[(b * 4 + dst) * 3 + c] = vals[(b * 4 + src) * 3 + c];
                }
            }
        }
        let e1 = model
            .encode_label_embeddings(&p, &FeatureMap(Tensor::new(vals, &[2, 4, 3]).unwrap()))
            .unwrap();
        let e2 = model
            .encode_label_embeddings(&p, &FeatureMap(Tensor::new(permuted, &[2, 4, 3]).unwrap()))
            .unwrap();
        for (x, y) in e1.0.data().iter().zip(e2.0.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_heads_are_independent_and_linear() {
        let mut model = Model::<f64>::new(tiny(3, 7)).unwrap();
        model.param_mut("classifier.bias").unwrap().value = vec![0.0; 3];
        let p = model.bind(false).unwrap();
        let zero = LabelWiseEmbeddingSet(Tensor::<f64>::zeros(&[1, 3, 4]).unwrap());
        let pred = model.classify(&p, &zero).unwrap();
        assert_eq!(pred.logits.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(pred.probs.data(), &[0.5, 0.5, 0.5]);

        let e: Vec<f64> = (0..12).map(|i| 0.1 * i as f64 - 0.4).collect();
        let base = model
            .classify(&p, &LabelWiseEmbeddingSet(Tensor::new(e.clone(), &[1, 3, 4]).unwrap()))
            .unwrap();
        let mut bumped = e.clone();
        bumped[4..8].iter_mut().for_each(|v| *v += 3.0);
        let moved = model
            .classify(&p, &LabelWiseEmbeddingSet(Tensor::new(bumped, &[1, 3, 4]).unwrap()))
            .unwrap();
        assert_eq!(base.logits.data()[0], moved.logits.data()[0]);
        assert_eq!(base.logits.data()[2], moved.logits.data()[2]);
        assert_ne!(base.logits.data()[1], moved.logits.data()[1]);

        let mut doubled = model.clone();
        doubled.param_mut("classifier.weight").unwrap().value[..4]
            .iter_mut()
            .for_each(|v| *v *= 2.0);
        let pd = doubled.bind(false).unwrap();
        let twice = doubled
            .classify(&pd, &LabelWiseEmbeddingSet(Tensor::new(e, &[1, 3, 4]).unwrap()))
            .unwrap();
        assert!((twice.logits.data()[0] - 2.0 * base.logits.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn logit_gradient_ignores_other_queries() {
        let cfg = tiny(3, 8);
        let model = Model::<f64>::new(cfg.clone()).unwrap();
        let x = input(2, &cfg, 8);
        for k in 0..3 {
            let p = model.bind(true).unwrap();
            let out = model.forward(&p, &x).unwrap();
            let logits = out.predictions.logits;
            let mut sel = vec![0.0; 6];
            sel[k] = 1.0;
            sel[3 + k] = 1.0;
            logits
                .mul(&Tensor::new(sel, &[2, 3]).unwrap())
                .unwrap()
                .sum()
                .backward()
                .unwrap();
            let gq = p.tensors()[model.layout.queries].grad_or_zeros();
            for j in (0..3).filter(|&j| j != k) {
                assert!(gq[j * 4..(j + 1) * 4].iter().all(|&g| g == 0.0));
            }
            assert!(gq[k * 4..(k + 1) * 4].iter().any(|&g| g != 0.0));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(ModelConfig::student(5, 3)).unwrap();
        model.save(dir.path(), "checkpoint").unwrap();
        let back = Model::<f32>::load(dir.path(), "checkpoint").unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let mut cfg = tiny(3, 6);
        cfg.positional_encoding = true;
        let model = Model::<f64>::new(cfg).unwrap();
        let p = model.bind(false).unwrap();
        let a: Vec<f64> = (0..12).map(|i| (i as f64).cos()).collect();
        let mut b = a.clone();
        b.swap(0, 3);
        b.swap(1, 4);
        b.swap(2, 5);
        let e1 = model.encode_label_embeddings(&p, &FeatureMap(Tensor::new(a, &[1, 4, 3]).unwrap())).unwrap();
        let e2 = model.encode_label_embeddings(&p, &FeatureMap(Tensor::new(b, &[1, 4, 3]).unwrap())).unwrap();
        assert!(e1.0.data().iter().zip(e2.0.data()).any(|(x, y)| (x - y).abs() > 1e-9));
    }
}
