//! Encoder-only and encoder-decoder assemblies.
//!
//! An evolving block computes its attention operators once from the
//! sequence entering the block, then runs `depth_per_block` layers of
//! (attention → feed-forward), each with its own depth code. Decoder blocks
//! carry separate operator sets and depth codes for causal self-attention
//! and for attention over the encoder output.

mod config;
mod count;
mod norm;
mod registry;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Architecture, AttentionKind, FfVariant, ModelConfig};
pub use count::{count_params, ParamBreakdown};
pub use norm::{maybe_norm, NormParams, LAYER_NORM_EPS};
pub use registry::{gaussian, FrozenStore, Gradients, ParamId, ParameterRegistry, Session};

use crate::attention::{
    attention_layer_forward, init_evolution_operators, standard_attention_forward, AttentionDims,
    EvolvedLayerParams, OperatorParams, StandardAttentionParams,
};
use crate::depth::{derive_seed, initial_code_weights, sinusoidal_positions, DepthCode};
use crate::error::{Error, Result};
use crate::ff::{FeedForward, FullFfParams, RandomFfParams};
use crate::tensor::{Mask, Real, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Structural events of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub operator_inits: usize,
    pub attention_layers: usize,
    pub ff_layers: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer<R> {
    code: Option<ParamId>,
    attn: AttnLayer,
    ff: FeedForward<R>,
}

#[derive(Clone, Debug)]
struct DecoderLayer<R> {
    self_code: Option<ParamId>,
    cross_code: Option<ParamId>,
    self_attn: AttnLayer,
    cross_attn: AttnLayer,
    ff: FeedForward<R>,
}

#[derive(Clone, Copy, Debug)]
enum AttnLayer {
    Evolved(EvolvedLayerParams),
    Standard(StandardAttentionParams),
}

#[derive(Clone, Debug)]
struct Block<L> {
    /// Operator sets: one for encoders, self then cross for decoders.
    operators: Vec<OperatorParams>,
    layers: Vec<L>,
}

#[derive(Clone, Debug)]
struct ClassifierHead {
    norm: NormParams,
    w: ParamId,
    b: ParamId,
}

/// A built model with its parameters.
#[derive(Clone, Debug)]
pub struct Model<R: Real> {
    config: ModelConfig,
    dims: AttentionDims,
    registry: ParameterRegistry<R>,
    frozen: FrozenStore<R>,
    embedding: ParamId,
    positions: Tensor<R>,
    code: Option<DepthCode>,
    encoder: Vec<Block<EncoderLayer<R>>>,
    decoder: Vec<Block<DecoderLayer<R>>>,
    head: Option<ClassifierHead>,
}

struct Builder<'a, R: Real> {
    config: &'a ModelConfig,
    dims: AttentionDims,
    reg: ParameterRegistry<R>,
    frozen: FrozenStore<R>,
    rng: ChaCha8Rng,
}

impl<R: Real> Builder<'_, R> {
    fn operators(&mut self, prefix: &str) -> Result<OperatorParams> {
        OperatorParams::register(&mut self.reg, prefix, self.dims, &mut self.rng)
    }

    fn code(&mut self, name: String) -> Result<Option<ParamId>> {
        match self.config.attention {
            AttentionKind::Evolving => Ok(Some(self.reg.add(name, initial_code_weights(self.config.d_prime)?)?)),
            AttentionKind::Standard => Ok(None),
        }
    }

    fn attn(&mut self, prefix: &str) -> Result<AttnLayer> {
        let (d, norm) = (self.config.d, self.config.post_norm);
        Ok(match self.config.attention {
            AttentionKind::Evolving => {
                AttnLayer::Evolved(EvolvedLayerParams::register(&mut self.reg, prefix, d, norm, &mut self.rng)?)
            }
            AttentionKind::Standard => {
                AttnLayer::Standard(StandardAttentionParams::register(&mut self.reg, prefix, d, norm, &mut self.rng)?)
            }
        })
    }

    fn ff(&mut self, prefix: &str, stack: u64, block: usize, l: usize) -> Result<FeedForward<R>> {
        let c = self.config;
        Ok(match c.ff_variant {
            FfVariant::Full => FeedForward::Full(FullFfParams::register(
                &mut self.reg,
                prefix,
                c.d,
                c.d_ff,
                c.post_norm,
                &mut self.rng,
            )?),
            FfVariant::Random => FeedForward::Random(RandomFfParams::register(
                &mut self.reg,
                &mut self.frozen,
                prefix,
                c.d,
                c.d_ff,
                l,
                c.depth_per_block,
                derive_seed(c.seed, &[stack, block as u64, l as u64]),
                c.post_norm,
            )?),
        })
    }
}

impl<R: Real> Model<R> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.attention_dims()?;
        let mut b = Builder {
            config,
            dims,
            reg: ParameterRegistry::new(),
            frozen: FrozenStore::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d;
        let embedding = b.reg.add("embedding", gaussian(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut b.rng)?)?;
        let evolving = config.attention == AttentionKind::Evolving;

        let mut encoder = Vec::new();
        for blk in 0..config.num_blocks {
            let operators = if evolving {
                vec![b.operators(&format!("enc.{blk}.ops"))?]
            } else {
                Vec::new()
            };
            let mut layers = Vec::new();
            for l in 1..=config.depth_per_block {
                let p = format!("enc.{blk}.{l}");
                layers.push(EncoderLayer {
                    code: b.code(format!("{p}.code"))?,
                    attn: b.attn(&format!("{p}.attn"))?,
                    ff: b.ff(&format!("{p}.ff"), 0, blk, l)?,
                });
            }
            encoder.push(Block { operators, layers });
        }

        let mut decoder = Vec::new();
        let mut head = None;
        match config.architecture {
            Architecture::EncoderDecoder => {
                for blk in 0..config.num_blocks {
                    let operators = if evolving {
                        vec![
                            b.operators(&format!("dec.{blk}.self_ops"))?,
                            b.operators(&format!("dec.{blk}.cross_ops"))?,
                        ]
                    } else {
                        Vec::new()
                    };
                    let mut layers = Vec::new();
                    for l in 1..=config.depth_per_block {
                        let p = format!("dec.{blk}.{l}");
                        layers.push(DecoderLayer {
                            self_code: b.code(format!("{p}.self_code"))?,
                            cross_code: b.code(format!("{p}.cross_code"))?,
                            self_attn: b.attn(&format!("{p}.self_attn"))?,
                            cross_attn: b.attn(&format!("{p}.cross_attn"))?,
                            ff: b.ff(&format!("{p}.ff"), 1, blk, l)?,
                        });
                    }
                    decoder.push(Block { operators, layers });
                }
            }
            Architecture::EncoderOnly => {
                let norm = NormParams::register(&mut b.reg, "head.norm", d)?;
                let w = b.reg.add(
                    "head.w",
                    gaussian(&[d, config.num_classes], 1.0 / (d as f64).sqrt(), &mut b.rng)?,
                )?;
                let bias = b.reg.add("head.b", Tensor::zeros(&[config.num_classes])?)?;
                head = Some(ClassifierHead { norm, w, b: bias });
            }
        }

        let code = if evolving && config.depth_per_block > 0 {
            Some(DepthCode::new(config.d_prime, config.depth_per_block)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            dims,
            registry: b.reg,
            frozen: b.frozen,
            embedding,
            positions: sinusoidal_positions(config.max_len, d)?.cast(),
            code,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParameterRegistry<R> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry<R> {
        &mut self.registry
    }

    pub fn frozen(&self) -> &FrozenStore<R> {
        &self.frozen
    }

    /// Replaces the frozen factors, e.g. from a checkpoint.
    pub fn set_frozen(&mut self, frozen: FrozenStore<R>) -> Result<()> {
        for (name, t) in self.frozen.iter() {
            match frozen.get(name) {
                Some(n) if n.shape() == t.shape() => {}
                _ => return Err(Error::Config(format!("frozen tensor {name} missing or reshaped"))),
            }
        }
        if frozen.len() != self.frozen.len() {
            return Err(Error::Config("unexpected frozen tensors".into()));
        }
        self.frozen = frozen;
        let layers_ff = self
            .encoder
            .iter_mut()
            .flat_map(|b| b.layers.iter_mut().map(|l| &mut l.ff))
            .chain(self.decoder.iter_mut().flat_map(|b| b.layers.iter_mut().map(|l| &mut l.ff)));
        for ff in layers_ff {
            if let FeedForward::Random(p) = ff {
                p.sync(&self.frozen)?;
            }
        }
        Ok(())
    }

    /// The token embedding table, also used as the output projection.
    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn output_projection(&self) -> ParamId {
        self.embedding
    }

    /// Names of every depth-code weight vector.
    pub fn depth_code_params(&self) -> Vec<ParamId> {
        let enc = self.encoder.iter().flat_map(|b| b.layers.iter().filter_map(|l| l.code));
        let dec = self
            .decoder
            .iter()
            .flat_map(|b| b.layers.iter().flat_map(|l| [l.self_code, l.cross_code]).flatten());
        enc.chain(dec).collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!("token {t} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    /// `embedding[tokens]·√d + positions`, shape `[n, d]`.
    pub fn embed(&self, s: &mut Session<'_, R>, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = s.param(self.embedding);
        let e = s.tape.gather_rows(table, tokens)?;
        let e = s.tape.scale(e, (self.config.d as f64).sqrt())?;
        let pos = s.constant(&self.positions.rows(0..tokens.len())?);
        s.tape.add(e, pos)
    }

    fn depth_code(&self, s: &mut Session<'_, R>, l: usize, weights: Option<ParamId>) -> Result<Option<Var>> {
        match (&self.code, weights) {
            (Some(code), Some(w)) => {
                let wv = s.param(w);
                Ok(Some(code.record(&mut s.tape, l, wv)?))
            }
            _ => Ok(None),
        }
    }

    /// Encoder output `[n, d]`. `pad` flags positions that keys must ignore.
    pub fn encode(&self, s: &mut Session<'_, R>, tokens: &[usize], pad: Option<&[bool]>, stats: &mut ForwardStats) -> Result<Var> {
        let mask = padding_mask(tokens.len(), pad)?;
        let mut x = self.embed(s, tokens)?;
        for block in &self.encoder {
            let ops = match block.operators.first() {
                Some(p) => {
                    stats.operator_inits += 1;
                    Some(init_evolution_operators(s, x, x, p, self.dims)?)
                }
                None => None,
            };
            for (i, layer) in block.layers.iter().enumerate() {
                x = match (layer.attn, &ops) {
                    (AttnLayer::Evolved(p), Some(ops)) => {
                        let code = self.depth_code(s, i + 1, layer.code)?.expect("evolving layer has a code");
                        attention_layer_forward(s, x, x, ops, code, &p, mask.as_ref(), self.dims)?
                    }
                    (AttnLayer::Standard(p), _) => standard_attention_forward(s, x, x, &p, mask.as_ref(), self.dims)?,
                    _ => unreachable!("evolving layers always have operators"),
                };
                stats.attention_layers += 1;
                x = layer.ff.forward(s, x)?;
                stats.ff_layers += 1;
            }
        }
        Ok(x)
    }

    /// Class logits `[num_classes]` from mean-pooled non-pad encoder outputs.
    pub fn classify(&self, s: &mut Session<'_, R>, tokens: &[usize], pad: Option<&[bool]>) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("classification needs an encoder-only model".into()))?;
        let n = tokens.len();
        let keep: Vec<bool> = (0..n).map(|i| !pad.is_some_and(|p| p[i])).collect();
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::Input("every position is padding".into()));
        }
        let h = self.encode(s, tokens, pad, &mut ForwardStats::default())?;
        let weights: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / count as f64 } else { 0.0 }).collect();
        let pool = s.tape.constant_f64(&[1, n], &weights)?;
        let pooled = s.tape.matmul(pool, h)?;
        let pooled = head.norm.apply(s, pooled)?;
        let (w, b) = (s.param(head.w), s.param(head.b));
        let logits = s.tape.matmul(pooled, w)?;
        let logits = s.tape.add(logits, b)?;
        s.tape.reshape(logits, &[self.config.num_classes])
    }

    /// Vocabulary logits `[n_dec, vocab]` for a teacher-forced decoder input.
    pub fn decode_logits(
        &self,
        s: &mut Session<'_, R>,
        tgt_in: &[usize],
        enc_out: Var,
        enc_pad: Option<&[bool]>,
        stats: &mut ForwardStats,
    ) -> Result<Var> {
        if self.decoder.is_empty() {
            return Err(Error::Config("decoding needs an encoder-decoder model".into()));
        }
        let [n_enc, d] = s.tape.shape(enc_out)[..] else {
            return Err(Error::Shape(format!("encoder output {:?}", s.tape.shape(enc_out))));
        };
        if d != self.config.d {
            return Err(Error::Shape(format!("encoder output width {d}, model width {}", self.config.d)));
        }
        let causal = Mask::causal(tgt_in.len());
        let cross_mask = padding_mask(n_enc, enc_pad)?;
        let mut x = self.embed(s, tgt_in)?;
        for block in &self.decoder {
            let ops = match &block.operators[..] {
                [self_p, cross_p] => {
                    stats.operator_inits += 2;
                    let self_ops = init_evolution_operators(s, x, x, self_p, self.dims)?;
                    let cross_ops = init_evolution_operators(s, x, enc_out, cross_p, self.dims)?;
                    Some((self_ops, cross_ops))
                }
                _ => None,
            };
            for (i, layer) in block.layers.iter().enumerate() {
                let l = i + 1;
                x = match (layer.self_attn, &ops) {
                    (AttnLayer::Evolved(p), Some((self_ops, _))) => {
                        let code = self.depth_code(s, l, layer.self_code)?.expect("code");
                        attention_layer_forward(s, x, x, self_ops, code, &p, Some(&causal), self.dims)?
                    }
                    (AttnLayer::Standard(p), _) => standard_attention_forward(s, x, x, &p, Some(&causal), self.dims)?,
                    _ => unreachable!("evolving layers always have operators"),
                };
                x = match (layer.cross_attn, &ops) {
                    (AttnLayer::Evolved(p), Some((_, cross_ops))) => {
                        let code = self.depth_code(s, l, layer.cross_code)?.expect("code");
                        attention_layer_forward(s, x, enc_out, cross_ops, code, &p, cross_mask.as_ref(), self.dims)?
                    }
                    (AttnLayer::Standard(p), _) => {
                        standard_attention_forward(s, x, enc_out, &p, cross_mask.as_ref(), self.dims)?
                    }
                    _ => unreachable!("evolving layers always have operators"),
                };
                stats.attention_layers += 2;
                x = layer.ff.forward(s, x)?;
                stats.ff_layers += 1;
            }
        }
        let table = s.param(self.embedding);
        s.tape.matmul_t(x, table)
    }

    /// Encoder then decoder logits for one teacher-forced pair.
    pub fn seq2seq_logits(&self, s: &mut Session<'_, R>, src: &[usize], tgt_in: &[usize]) -> Result<Var> {
        let mut stats = ForwardStats::default();
        let enc = self.encode(s, src, None, &mut stats)?;
        self.decode_logits(s, tgt_in, enc, None, &mut stats)
    }

    /// Greedy decoding of `src` (without its end token).
    ///
    /// The encoder sees `src + [EOS]`, the decoder starts from `[BOS]` and is
    /// recomputed from scratch for every emitted token. Ties go to the lowest
    /// token id. The result excludes `BOS` and `EOS`.
    pub fn greedy_decode(&self, src: &[usize], max_out_len: usize) -> Result<Vec<usize>> {
        let mut enc_in = src.to_vec();
        enc_in.push(EOS);
        let limit = max_out_len.min(self.config.max_len.saturating_sub(1));
        let mut out = Vec::new();
        while out.len() < limit {
            let mut s = Session::inference(&self.registry);
            let mut stats = ForwardStats::default();
            let enc = self.encode(&mut s, &enc_in, None, &mut stats)?;
            let mut tgt = vec![BOS];
            tgt.extend(&out);
            let logits = self.decode_logits(&mut s, &tgt, enc, None, &mut stats)?;
            let v = self.config.vocab_size;
            let last = &s.tape.value(logits)[(tgt.len() - 1) * v..];
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<R: Real>(xs: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn padding_mask(n: usize, pad: Option<&[bool]>) -> Result<Option<Mask>> {
    match pad {
        None => Ok(None),
        Some(p) if p.len() != n => Err(Error::Shape(format!("pad mask of {} for {n} tokens", p.len()))),
        Some(p) if p.iter().all(|&x| x) => Err(Error::Input("every position is padding".into())),
        Some(p) if p.iter().any(|&x| x) => Ok(Some(Mask::key_padding(p))),
        Some(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Architecture, ff: FfVariant) -> Model<f64> {
        Model::build(&ModelConfig::tiny(arch, ff)).unwrap()
    }

    #[test]
    fn block_layouts_count_operator_inits() {
        for (blocks, depth, inits) in [(1, 6, 1), (2, 3, 2)] {
            let mut c = ModelConfig::tiny(Architecture::EncoderDecoder, FfVariant::Full);
            c.num_blocks = blocks;
            c.depth_per_block = depth;
            let m = Model::<f64>::build(&c).unwrap();
            let mut s = Session::inference(m.registry());
            let mut stats = ForwardStats::default();
            let enc = m.encode(&mut s, &[3, 4, 5], None, &mut stats).unwrap();
            assert_eq!(stats.operator_inits, inits);
            assert_eq!(stats.attention_layers, 6);
            assert_eq!(stats.ff_layers, 6);
            let mut dstats = ForwardStats::default();
            m.decode_logits(&mut s, &[1, 3], enc, None, &mut dstats).unwrap();
            assert_eq!(dstats.operator_inits, 2 * inits);
        }
    }

    #[test]
    fn builds_are_deterministic() {
        let a = tiny(Architecture::EncoderDecoder, FfVariant::Random);
        let b = tiny(Architecture::EncoderDecoder, FfVariant::Random);
        assert_eq!(a.registry().checksum(), b.registry().checksum());
        assert!(a.frozen().iter().zip(b.frozen().iter()).all(|(x, y)| x == y));
    }

    #[test]
    fn padded_tail_does_not_leak() {
        let m = tiny(Architecture::EncoderOnly, FfVariant::Full);
        let run = |tokens: &[usize]| {
            let pad = [false, false, false, true, true];
            let mut s = Session::inference(m.registry());
            let h = m.encode(&mut s, tokens, Some(&pad), &mut ForwardStats::default()).unwrap();
            s.tape.value(h)[..3 * 8].to_vec()
        };
        let a = run(&[3, 4, 5, 0, 6]);
        let b = run(&[3, 4, 5, 6, 0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_depth_returns_embeddings() {
        let mut c = ModelConfig::tiny(Architecture::EncoderOnly, FfVariant::Full);
        c.depth_per_block = 0;
        let m = Model::<f64>::build(&c).unwrap();
        let mut s = Session::inference(m.registry());
        let e = m.embed(&mut s, &[3, 4]).unwrap();
        let h = m.encode(&mut s, &[3, 4], None, &mut ForwardStats::default()).unwrap();
        assert_eq!(s.tape.value(e), s.tape.value(h));
    }

    #[test]
    fn classifier_shapes_and_pooling() {
        let m = tiny(Architecture::EncoderOnly, FfVariant::Random);
        let mut s = Session::inference(m.registry());
        let y = m.classify(&mut s, &[4], None).unwrap();
        assert_eq!(s.tape.shape(y), &[3]);
        assert!(m.classify(&mut s, &[4, 5], Some(&[true, true])).is_err());
    }

    #[test]
    fn decoder_is_causal_and_tied() {
        let m = tiny(Architecture::EncoderDecoder, FfVariant::Full);
        assert_eq!(m.embedding(), m.output_projection());
        let run = |tgt: &[usize]| {
            let mut s = Session::inference(m.registry());
            let y = m.seq2seq_logits(&mut s, &[3, 4, 2], tgt).unwrap();
            s.tape.value(y)[..2 * 7].to_vec()
        };
        assert_eq!(run(&[1, 5, 6, 3]), run(&[1, 5, 4, 4]));
        let mut s = Session::inference(m.registry());
        let y = m.seq2seq_logits(&mut s, &[3, 4, 2], &[1]).unwrap();
        assert_eq!(s.tape.shape(y), &[1, 7]);
    }

    #[test]
    fn uniform_logits_decode_to_lowest_token() {
        let mut m = tiny(Architecture::EncoderDecoder, FfVariant::Full);
        let e = m.embedding();
        m.registry_mut().get_mut(e).data_mut().fill(0.0);
        let out = m.greedy_decode(&[3, 4], 5).unwrap();
        assert_eq!(out, vec![0; 5]);
        assert!(m.greedy_decode(&[3, 4], 100).unwrap().len() <= m.config().max_len);
    }

    #[test]
    fn forward_leaves_parameters_untouched() {
        let m = tiny(Architecture::EncoderDecoder, FfVariant::Random);
        let before = m.registry().checksum();
        let mut s = Session::training(m.registry(), 0.0, 0);
        let y = m.seq2seq_logits(&mut s, &[3, 4], &[1, 3]).unwrap();
        let l = s.tape.sum(y).unwrap();
        s.backward(l).unwrap();
        assert_eq!(before, m.registry().checksum());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }
}
