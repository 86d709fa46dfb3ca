use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, NoiseConfig};
use super::noise::inject_noise_var;
use super::params::{allowed_from_bias, apply_bias_mask, init_params, Params, CLASSIFIER_BIAS, EMBEDDING};
use crate::data::{SideBatch, PAD_ID};
use crate::error::{Error, Result};
use crate::numerics::{dropout, scaled_dot_attention, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-6;
/// Additive attention penalty for padded or future keys.
const ATTN_MASK: f64 = -1e9;

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    /// Fresh model with the classifier bias masked outside `pe_allowed`.
    pub fn new(config: ModelConfig, pe_allowed: &[bool], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = init_params(&config, &mut rng)?;
        apply_bias_mask(&mut params, pe_allowed)?;
        Ok(Self { config, params })
    }

    pub fn pe_allowed(&self) -> Result<Vec<bool>> {
        allowed_from_bias(&self.params)
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.get(EMBEDDING).expect("embedding is always present")
    }
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for t in 0..len {
        for i in (0..d).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
            data[t * d + i] = angle.sin();
            if i + 1 < d {
                data[t * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// Output of one encoder stack plus the key-padding mask it was built with.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub repr: Var,
    /// Additive `[batch, 1, 1, len]` padding penalty.
    pub mask: Var,
    pub batch: usize,
    pub len: usize,
}

/// One forward computation over a fresh [`Graph`].
///
/// Parameters are copied into the graph the first time a layer asks for
/// them; [`Forward::gradients`] collects their gradients after backward.
pub struct Forward<'m> {
    g: Graph,
    model: &'m Model,
    bound: HashMap<&'m str, Var>,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'m> Forward<'m> {
    pub fn new(model: &'m Model, training: bool, rng: ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            model,
            bound: HashMap::new(),
            training,
            rng,
        }
    }

    /// Inference pass: no dropout, no noise.
    pub fn inference(model: &'m Model) -> Self {
        Self::new(model, false, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn graph(&self) -> &Graph {
        &self.g
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.g
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .model
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter '{name}'")))?;
        let v = self.g.param(t.clone());
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    /// Gradients of every parameter; unused ones get zeros.
    pub fn gradients(&self) -> Params {
        self.model
            .params
            .iter()
            .map(|(name, t)| {
                let grad = self
                    .bound
                    .get(name.as_str())
                    .and_then(|&v| self.g.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), grad)
            })
            .collect()
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout;
        dropout(&mut self.g, x, p, self.training, &mut self.rng)
    }

    /// Combined embedding `E[id]·√d + PE`, optionally noised, then dropout.
    pub fn embed(&mut self, side: &SideBatch, noise: Option<&NoiseConfig>) -> Result<Var> {
        let cfg = &self.model.config;
        let (b, l, d) = (side.batch, side.len, cfg.d_model);
        if l > cfg.max_positions {
            return Err(Error::Dimension(format!(
                "sequence length {l} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        let ids: Vec<usize> = side.ids.iter().map(|&i| i as usize).collect();
        let e = self.param(EMBEDDING)?;
        let tok = self.g.gather(e, &ids, &[b, l])?;
        let tok = self.g.scale(tok, (d as f64).sqrt());
        let pos = self.g.constant(positional_encoding(l, d));
        let mut x = self.g.add(tok, pos)?;
        if let Some(n) = noise {
            x = inject_noise_var(&mut self.g, x, n, &mut self.rng)?;
        }
        self.dropout(x)
    }

    fn padding_mask(&mut self, side: &SideBatch) -> Var {
        let data = side
            .ids
            .iter()
            .map(|&i| if i == PAD_ID { ATTN_MASK } else { 0.0 })
            .collect();
        self.g.constant(Tensor::from_parts(vec![side.batch, 1, 1, side.len], data))
    }

    fn causal_mask(&mut self, side: &SideBatch) -> Var {
        let (b, l) = (side.batch, side.len);
        let mut data = vec![0.0; b * l * l];
        for r in 0..b {
            for q in 0..l {
                for k in 0..l {
                    if k > q || side.ids[r * l + k] == PAD_ID {
                        data[(r * l + q) * l + k] = ATTN_MASK;
                    }
                }
            }
        }
        self.g.constant(Tensor::from_parts(vec![b, 1, l, l], data))
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.param(w)?, self.param(b)?);
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    /// `[B, L, D]` to `[B, H, L, D/H]`.
    fn split_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.g.shape(x).to_vec();
        let h = self.model.config.n_heads;
        let x = self.g.reshape(x, &[s[0], s[1], h, s[2] / h])?;
        self.g.permute(x, &[0, 2, 1, 3])
    }

    fn attention(&mut self, prefix: &str, x: Var, mem: Var, mask: Var) -> Result<Var> {
        let q = self.linear(x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(mem, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(mem, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let (q, k, v) = (self.split_heads(q)?, self.split_heads(k)?, self.split_heads(v)?);
        let a = scaled_dot_attention(&mut self.g, q, k, v, Some(mask))?;
        let a = self.g.permute(a, &[0, 2, 1, 3])?;
        let s = self.g.shape(a).to_vec();
        let a = self.g.reshape(a, &[s[0], s[1], s[2] * s[3]])?;
        self.linear(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.g.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Post-norm residual: `LayerNorm(x + Dropout(y))`.
    fn residual(&mut self, norm: &str, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        let s = self.g.add(x, y)?;
        let (gain, bias) = (self.param(&format!("{norm}.gain"))?, self.param(&format!("{norm}.bias"))?);
        self.g.layer_norm(s, gain, bias, LN_EPS)
    }

    pub fn encode_source(&mut self, src: &SideBatch) -> Result<Encoded> {
        let mask = self.padding_mask(src);
        let mut x = self.embed(src, None)?;
        for i in 0..self.model.config.n_layers {
            let l = format!("src.{i}");
            let y = self.attention(&format!("{l}.self_attn"), x, x, mask)?;
            x = self.residual(&format!("{l}.ln1"), x, y)?;
            let y = self.ffn(&format!("{l}.ffn"), x)?;
            x = self.residual(&format!("{l}.ln2"), x, y)?;
        }
        Ok(Encoded {
            repr: x,
            mask,
            batch: src.batch,
            len: src.len,
        })
    }

    /// MT encoder over the ids in `mt`, optionally with embedding noise
    /// (the de-noising input path feeds post-edits here).
    pub fn encode_mt(&mut self, mt: &SideBatch, src: &Encoded, noise: Option<&NoiseConfig>) -> Result<Encoded> {
        if mt.batch != src.batch {
            return Err(Error::Pairing(format!(
                "MT batch of {} rows paired with a source batch of {}",
                mt.batch, src.batch
            )));
        }
        let mask = self.padding_mask(mt);
        let mut x = self.embed(mt, noise)?;
        for i in 0..self.model.config.n_layers {
            let l = format!("mt.{i}");
            let y = self.attention(&format!("{l}.self_attn"), x, x, mask)?;
            x = self.residual(&format!("{l}.ln1"), x, y)?;
            let y = self.attention(&format!("{l}.cross_attn"), x, src.repr, src.mask)?;
            x = self.residual(&format!("{l}.ln2"), x, y)?;
            let y = self.ffn(&format!("{l}.ffn"), x)?;
            x = self.residual(&format!("{l}.ln3"), x, y)?;
        }
        Ok(Encoded {
            repr: x,
            mask,
            batch: mt.batch,
            len: mt.len,
        })
    }

    /// Decoder states for every prefix position, `[B, T, D]`.
    ///
    /// Encoder outputs may have batch 1 and broadcast over the prefixes.
    pub fn decode_states(&mut self, prefix: &SideBatch, src: &Encoded, mt: &Encoded) -> Result<Var> {
        for enc in [src, mt] {
            if enc.batch != prefix.batch && enc.batch != 1 {
                return Err(Error::Pairing(format!(
                    "decoder batch of {} rows paired with an encoder batch of {}",
                    prefix.batch, enc.batch
                )));
            }
        }
        let mask = self.causal_mask(prefix);
        let mut x = self.embed(prefix, None)?;
        for i in 0..self.model.config.n_layers {
            let l = format!("dec.{i}");
            let y = self.attention(&format!("{l}.self_attn"), x, x, mask)?;
            x = self.residual(&format!("{l}.ln1"), x, y)?;
            let y = self.attention(&format!("{l}.src_attn"), x, src.repr, src.mask)?;
            x = self.residual(&format!("{l}.ln2"), x, y)?;
            let y = self.attention(&format!("{l}.mt_attn"), x, mt.repr, mt.mask)?;
            x = self.residual(&format!("{l}.ln3"), x, y)?;
            let y = self.ffn(&format!("{l}.ffn"), x)?;
            x = self.residual(&format!("{l}.ln4"), x, y)?;
        }
        Ok(x)
    }

    /// `dec · Eᵀ + bias` with the tied embedding.
    pub fn logits(&mut self, dec: Var) -> Result<Var> {
        let d = self.model.config.d_model;
        if self.g.shape(dec).last() != Some(&d) {
            return Err(Error::Dimension(format!(
                "decoder output {:?} does not end in d_model {d}",
                self.g.shape(dec)
            )));
        }
        let e = self.param(EMBEDDING)?;
        let et = self.g.permute(e, &[1, 0])?;
        let z = self.g.matmul(dec, et)?;
        let bias = self.param(CLASSIFIER_BIAS)?;
        self.g.add(z, bias)
    }

    /// Re-inserts a previously computed encoder output as a constant.
    pub fn constant_encoding(&mut self, repr: &Tensor, mask: &Tensor) -> Encoded {
        let (batch, len) = (repr.shape()[0], repr.shape()[1]);
        Encoded {
            repr: self.g.constant(repr.clone()),
            mask: self.g.constant(mask.clone()),
            batch,
            len,
        }
    }
}

/// Decoder inputs (all but the last token) and targets (all but the first)
/// of a post-edit batch side.
pub fn shift_targets(pe: &SideBatch) -> (SideBatch, Vec<u32>) {
    let t = pe.len.saturating_sub(1).max(1);
    let mut input = Vec::with_capacity(pe.batch * t);
    let mut target = Vec::with_capacity(pe.batch * t);
    for r in 0..pe.batch {
        let row = &pe.ids[r * pe.len..(r + 1) * pe.len];
        for j in 0..t {
            input.push(row[j]);
            target.push(row.get(j + 1).copied().unwrap_or(PAD_ID));
        }
    }
    let lens = pe.lens.iter().map(|&n| n.saturating_sub(1)).collect();
    (
        SideBatch {
            ids: input,
            lens,
            batch: pe.batch,
            len: t,
        },
        target,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, Triple};

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_ffn: 16,
            n_heads: 2,
            dropout: 0.1,
            max_positions: 32,
            vocab_size: 20,
        }
    }

    fn toy_model() -> Model {
        let mut allowed = vec![true; 20];
        allowed[15..].iter_mut().for_each(|a| *a = false);
        Model::new(toy_config(), &allowed, 11).unwrap()
    }

    fn batch() -> Batch {
        Batch::new(vec![
            Triple {
                src: vec![1, 5, 6, 7, 2],
                mt: vec![1, 8, 9, 2],
                pe: vec![1, 8, 10, 9, 2],
            },
            Triple {
                src: vec![1, 4, 2],
                mt: vec![1, 11, 12, 13, 2],
                pe: vec![1, 11, 2],
            },
        ])
    }

    fn value(f: &Forward, v: Var) -> Tensor {
        f.graph().value(v).clone()
    }

    #[test]
    fn positional_values_at_origin() {
        let pe = positional_encoding(3, 6);
        assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn same_token_differs_only_by_position() {
        let m = toy_model();
        let mut f = Forward::inference(&m);
        let side = SideBatch::from_sequences(&[&[7, 7, 7]]);
        let x = f.embed(&side, None).unwrap();
        let x = value(&f, x);
        let pe = positional_encoding(3, 8);
        for t in 1..3 {
            for j in 0..8 {
                let lhs = x.data()[t * 8 + j] - x.data()[j];
                let rhs = pe.data()[t * 8 + j] - pe.data()[j];
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes() {
        let m = toy_model();
        let b = batch();
        let mut f = Forward::inference(&m);
        let s = f.encode_source(&b.src).unwrap();
        let t = f.encode_mt(&b.mt, &s, None).unwrap();
        let (inp, _) = shift_targets(&b.pe);
        let d = f.decode_states(&inp, &s, &t).unwrap();
        let z = f.logits(d).unwrap();
        assert_eq!(f.graph().shape(s.repr), &[2, 5, 8]);
        assert_eq!(f.graph().shape(t.repr), &[2, 5, 8]);
        assert_eq!(f.graph().shape(d), &[2, 4, 8]);
        assert_eq!(f.graph().shape(z), &[2, 4, 20]);
    }

    #[test]
    fn out_of_range_id_is_vocabulary_error() {
        let m = toy_model();
        let mut f = Forward::inference(&m);
        let side = SideBatch::from_sequences(&[&[1, 25, 2]]);
        assert!(matches!(f.embed(&side, None), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn pad_tail_does_not_leak() {
        let m = toy_model();
        let run = |rows: &[&[u32]]| {
            let side = SideBatch::from_sequences(rows);
            let mut f = Forward::inference(&m);
            let e = f.encode_source(&side).unwrap();
            value(&f, e.repr)
        };
        let short = run(&[&[1, 5, 2]]);
        let padded = run(&[&[1, 5, 2], &[1, 5, 6, 7, 8, 2]]);
        for t in 0..3 {
            for j in 0..8 {
                assert!((short.data()[t * 8 + j] - padded.data()[t * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_layers_return_embedding() {
        let mut cfg = toy_config();
        cfg.n_layers = 0;
        let m = Model::new(cfg, &[true; 20], 3).unwrap();
        let side = SideBatch::from_sequences(&[&[1, 4, 2]]);
        let mut f = Forward::inference(&m);
        let e = f.encode_source(&side).unwrap();
        let x = f.embed(&side, None).unwrap();
        assert_eq!(f.graph().value(e.repr), f.graph().value(x));
    }

    #[test]
    fn decoder_is_causal() {
        let m = toy_model();
        let b = batch();
        let states = |prefix: &[u32]| {
            let mut f = Forward::inference(&m);
            let s = f.encode_source(&b.src).unwrap();
            let t = f.encode_mt(&b.mt, &s, None).unwrap();
            let p = SideBatch::from_sequences(&[prefix, prefix]);
            let d = f.decode_states(&p, &s, &t).unwrap();
            value(&f, d)
        };
        let a = states(&[1, 8, 10, 9]);
        let c = states(&[1, 8, 4, 14]);
        for r in 0..2 {
            for j in 0..16 {
                let i = r * 32 + j;
                assert!((a.data()[i] - c.data()[i]).abs() < 1e-12);
            }
        }
        assert!(a.max_abs_diff(&c).unwrap() > 1e-6);
    }

    #[test]
    fn masked_classes_get_zero_probability() {
        let m = toy_model();
        let b = batch();
        let mut f = Forward::inference(&m);
        let s = f.encode_source(&b.src).unwrap();
        let t = f.encode_mt(&b.mt, &s, None).unwrap();
        let (inp, _) = shift_targets(&b.pe);
        let d = f.decode_states(&inp, &s, &t).unwrap();
        let z = f.logits(d).unwrap();
        let p = f.graph_mut().softmax(z, 2).unwrap();
        let p = f.graph().value(p);
        for row in p.data().chunks(20) {
            assert!(row[15..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn tied_embedding_drives_both_ends() {
        let mut m = toy_model();
        let b = batch();
        let run = |m: &Model| {
            let mut f = Forward::inference(m);
            let x = f.embed(&b.src, None).unwrap();
            let x = value(&f, x);
            let s = f.encode_source(&b.src).unwrap();
            let z = f.logits(s.repr).unwrap();
            (x, value(&f, z))
        };
        let (x0, z0) = run(&m);
        m.params.get_mut(EMBEDDING).unwrap().data_mut()[5 * 8] += 0.5;
        let (x1, z1) = run(&m);
        assert!(x0.max_abs_diff(&x1).unwrap() > 0.1);
        assert!(z0.max_abs_diff(&z1).unwrap() > 0.0);
    }

    #[test]
    fn gradient_reaches_source_encoder_through_mt_encoder() {
        let m = toy_model();
        let b = batch();
        let mut f = Forward::inference(&m);
        let s = f.encode_source(&b.src).unwrap();
        let t = f.encode_mt(&b.mt, &s, None).unwrap();
        let total = f.graph_mut().sum(t.repr);
        let sq = f.graph_mut().mul(t.repr, t.repr).unwrap();
        let sq = f.graph_mut().sum(sq);
        let loss = f.graph_mut().add(total, sq).unwrap();
        f.graph_mut().backward(loss).unwrap();
        let grads = f.gradients();
        let g = grads.get("src.1.ffn.w2").unwrap();
        assert!(g.data().iter().any(|v| v.abs() > 1e-8));
        assert!(grads.get("dec.0.ffn.w1").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_mismatch_is_pairing_error() {
        let m = toy_model();
        let b = batch();
        let mut f = Forward::inference(&m);
        let s = f.encode_source(&b.src).unwrap();
        let one = SideBatch::from_sequences(&[&[1, 4, 2]]);
        assert!(matches!(f.encode_mt(&one, &s, None), Err(Error::Pairing(_))));
    }

    #[test]
    fn shifted_targets() {
        let b = batch();
        let (inp, tgt) = shift_targets(&b.pe);
        assert_eq!(inp.ids, vec![1, 8, 10, 9, 1, 11, 2, 0]);
        assert_eq!(tgt, vec![8, 10, 9, 2, 11, 2, 0, 0]);
    }
}
