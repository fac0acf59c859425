use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, TokenSequence};
use crate::error::{contract, Error, Result};
use crate::numkernel::{kernels, NodeId, Reduce, Tape, Tensor};
use crate::scalar::{dot, Scalar};

/// Index of a parameter tensor inside an [`EncoderModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Arc<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            tensor: Arc::new(tensor),
        }
    }

    /// Mutable access; copies the storage if a tape still shares it.
    pub fn tensor_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.tensor)
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    token_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    codes: ParamId,
    comp_w: ParamId,
    comp_b: ParamId,
    mlm_bias: ParamId,
    nsp_w: ParamId,
    nsp_b: ParamId,
}

/// Encoder outputs for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    /// Output at the `[CLS]` position.
    pub cls: Tensor<T>,
    /// All outputs, `[CLS]` first: `[len × d_model]`.
    pub tokens: Tensor<T>,
}

/// Dropout switch for a forward pass; `None` means evaluation mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn RngCore,
}

/// Tape handles for every model parameter.
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Shared-parameter Transformer with context codes, compression layer and
/// the two pretraining heads.
#[derive(Clone, Debug)]
pub struct EncoderModel<T> {
    config: EncoderConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

struct Builder<'a, T> {
    params: Vec<Param<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param::new(name, tensor));
        ParamId(self.params.len() - 1)
    }

    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).unwrap())
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::filled(shape, T::of(v)))
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
        };
        let (d, std) = (config.d_model, config.init_std);
        let token_emb = b.normal("token_emb".into(), &[config.vocab_size, d], std);
        let pos_emb = b.normal("pos_emb".into(), &[config.max_len, d], std);
        let seg_emb = b.normal("seg_emb".into(), &[2, d], std);
        let emb_ln_g = b.fill("emb_ln.gain".into(), &[d], 1.0);
        let emb_ln_b = b.fill("emb_ln.bias".into(), &[d], 0.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{}.{}", l, s);
            layers.push(LayerIds {
                wq: b.normal(p("wq"), &[d, d], std),
                bq: b.fill(p("bq"), &[d], 0.0),
                wk: b.normal(p("wk"), &[d, d], std),
                wv: b.normal(p("wv"), &[d, d], std),
                bv: b.fill(p("bv"), &[d], 0.0),
                wo: b.normal(p("wo"), &[d, d], std),
                bo: b.fill(p("bo"), &[d], 0.0),
                ln1_g: b.fill(p("ln1.gain"), &[d], 1.0),
                ln1_b: b.fill(p("ln1.bias"), &[d], 0.0),
                w1: b.normal(p("w1"), &[d, config.d_ff], std),
                b1: b.fill(p("b1"), &[config.d_ff], 0.0),
                w2: b.normal(p("w2"), &[config.d_ff, d], std),
                b2: b.fill(p("b2"), &[d], 0.0),
                ln2_g: b.fill(p("ln2.gain"), &[d], 1.0),
                ln2_b: b.fill(p("ln2.bias"), &[d], 0.0),
            });
        }
        let codes = b.normal("context_codes".into(), &[config.context_codes, d], std);
        let dc = config.d_compress;
        let comp_w = b.normal("compress.weight".into(), &[d, dc], 1.0 / (d as f64).sqrt());
        let comp_b = b.fill("compress.bias".into(), &[dc], 0.0);
        let mlm_bias = b.fill("mlm.bias".into(), &[config.vocab_size], 0.0);
        let nsp_w = b.normal("nsp.weight".into(), &[d, 1], std);
        let nsp_b = b.fill("nsp.bias".into(), &[1], 0.0);
        let params = b.params;
        Ok(Self {
            config,
            params,
            layout: Layout {
                token_emb,
                pos_emb,
                seg_emb,
                emb_ln_g,
                emb_ln_b,
                layers,
                codes,
                comp_w,
                comp_b,
                mlm_bias,
                nsp_w,
                nsp_b,
            },
        })
    }

    /// Rebuilds a model from a parameter list in declared order.
    pub fn from_params(config: EncoderConfig, params: Vec<Param<T>>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.tensor.shape() != p.tensor.shape() {
                return Err(Error::Format(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
            *slot = p;
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(Param::tensor_mut)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// All parameters flattened in declared order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return contract("flat parameter vector has the wrong length");
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor_mut().data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn context_codes(&self) -> &Tensor<T> {
        &self.params[self.layout.codes.0].tensor
    }

    pub fn context_codes_mut(&mut self) -> &mut Tensor<T> {
        self.params[self.layout.codes.0].tensor_mut()
    }

    /// Compression weight `[d_model × d_compress]` and bias.
    pub fn compression_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let (w, b) = (self.layout.comp_w.0, self.layout.comp_b.0);
        debug_assert!(w < b);
        let (head, tail) = self.params.split_at_mut(b);
        (head[w].tensor_mut(), tail[0].tensor_mut())
    }

    /// Places every parameter on `tape`; trainable ones receive gradients.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let nodes = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param_shared(Arc::clone(&p.tensor))
                } else {
                    tape.constant_shared(Arc::clone(&p.tensor))
                }
            })
            .collect();
        Bound { nodes }
    }

    /// Collects the gradient of every parameter after `tape.backward`.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(bound.nodes())
            .map(|(p, n)| {
                tape.grad(*n)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()])
            })
            .collect()
    }

    fn dropout(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        dropout: &mut Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let Some(d) = dropout.as_deref_mut() else {
            return Ok(x);
        };
        if d.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - d.rate));
        let mask = (0..tape.value(x).numel())
            .map(|_| {
                if d.rng.gen::<f64>() < d.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, mask)
    }

    fn dropout_mask(&self, n: usize, dropout: &mut Option<&mut Dropout<'_>>) -> Option<Vec<T>> {
        let d = dropout.as_deref_mut()?;
        if d.rate <= 0.0 {
            return None;
        }
        let keep = T::of(1.0 / (1.0 - d.rate));
        Some(
            (0..n)
                .map(|_| if d.rng.gen::<f64>() < d.rate { T::zero() } else { keep })
                .collect(),
        )
    }

    /// Transformer forward pass; returns the `[len × d_model]` output node.
    pub fn encode_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        segments: Option<&[usize]>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let segs = segments.map(|s| vec![s]);
        self.encode_batch_on(tape, bound, &[seq], segs.as_deref(), dropout)
    }

    /// Encodes several sequences in one pass. Rows of the returned node are the
    /// outputs of each sequence in turn (`[Σ len × d_model]`); attention never
    /// crosses sequence boundaries.
    pub fn encode_batch_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seqs: &[&TokenSequence],
        segments: Option<&[&[usize]]>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let x = self.embed_batch_on(tape, bound, seqs, segments, dropout.as_deref_mut())?;
        let spans: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.layers_on(tape, bound, x, &spans, 0..self.config.n_layers, dropout)
    }

    /// Normalized token + position + segment embeddings, stacked like
    /// [`Self::encode_batch_on`].
    pub fn embed_batch_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seqs: &[&TokenSequence],
        segments: Option<&[&[usize]]>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        if seqs.is_empty() {
            return contract("nothing to encode");
        }
        let cfg = &self.config;
        let l = &self.layout;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut seg_rows = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            seq.validate(cfg)?;
            let len = seq.len();
            ids.extend(seq.tokens().iter().map(|t| *t as usize));
            positions.extend(0..len);
            match segments.map(|s| s.get(i)) {
                Some(Some(s)) if s.len() == len => seg_rows.extend_from_slice(s),
                Some(_) => return Err(Error::Input("one segment id per token required".into())),
                None => seg_rows.extend(std::iter::repeat_n(0, len)),
            }
        }
        let tok = tape.gather(bound.node(l.token_emb), &ids)?;
        let pos = tape.gather(bound.node(l.pos_emb), &positions)?;
        let seg = tape.gather(bound.node(l.seg_emb), &seg_rows)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        let eps = T::of(cfg.layernorm_eps);
        let x = tape.layernorm(x, bound.node(l.emb_ln_g), bound.node(l.emb_ln_b), eps)?;
        self.dropout(tape, x, &mut dropout)
    }

    /// Runs Transformer layers `layers` over stacked hidden states `x`
    /// whose rows split into sequences of lengths `spans`.
    pub fn layers_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        mut x: NodeId,
        spans: &[usize],
        layers: std::ops::Range<usize>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let cfg = &self.config;
        let eps = T::of(cfg.layernorm_eps);
        let weights: usize = spans.iter().map(|n| cfg.n_heads * n * n).sum();
        for layer in &self.layout.layers[layers] {
            let q = tape.matmul(x, bound.node(layer.wq))?;
            let q = tape.add_row(q, bound.node(layer.bq))?;
            // No key bias: it shifts every score of a query row equally and cancels in softmax.
            let k = tape.matmul(x, bound.node(layer.wk))?;
            let v = tape.matmul(x, bound.node(layer.wv))?;
            let v = tape.add_row(v, bound.node(layer.bv))?;
            let mask = self.dropout_mask(weights, &mut dropout);
            let ctx = tape.multi_head_attention(q, k, v, spans, cfg.n_heads, mask)?;
            let a = tape.matmul(ctx, bound.node(layer.wo))?;
            let a = tape.add_row(a, bound.node(layer.bo))?;
            let a = self.dropout(tape, a, &mut dropout)?;
            let r = tape.add(x, a)?;
            x = tape.layernorm(r, bound.node(layer.ln1_g), bound.node(layer.ln1_b), eps)?;

            let f = tape.matmul(x, bound.node(layer.w1))?;
            let f = tape.add_row(f, bound.node(layer.b1))?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, bound.node(layer.w2))?;
            let f = tape.add_row(f, bound.node(layer.b2))?;
            let f = self.dropout(tape, f, &mut dropout)?;
            let r = tape.add(x, f)?;
            x = tape.layernorm(r, bound.node(layer.ln2_g), bound.node(layer.ln2_b), eps)?;
        }
        Ok(x)
    }

    /// Layer each parameter belongs to; `None` for embeddings and `Some(n_layers)`
    /// for everything above the last Transformer layer.
    pub fn param_stage(&self, id: usize) -> Option<usize> {
        let l = &self.layout;
        if [l.token_emb, l.pos_emb, l.seg_emb, l.emb_ln_g, l.emb_ln_b].iter().any(|p| p.0 == id) {
            return None;
        }
        for (i, layer) in l.layers.iter().enumerate() {
            let ids = [
                layer.wq, layer.bq, layer.wk, layer.wv, layer.bv, layer.wo, layer.bo, layer.ln1_g,
                layer.ln1_b, layer.w1, layer.b1, layer.w2, layer.b2, layer.ln2_g, layer.ln2_b,
            ];
            if ids.iter().any(|p| p.0 == id) {
                return Some(i);
            }
        }
        Some(l.layers.len())
    }

    /// Poly attention over encoder outputs: `[m × d_model]`, or the CLS row alone
    /// when poly attention is disabled.
    pub fn poly_on(&self, tape: &mut Tape<T>, bound: &Bound, outputs: NodeId) -> Result<NodeId> {
        if !self.config.poly {
            return tape.gather(outputs, &[0]);
        }
        let logits = tape.matmul_bt(bound.node(self.layout.codes), outputs)?;
        let weights = tape.softmax_rows(logits, T::one())?;
        tape.matmul(weights, outputs)
    }

    /// Applies the compression layer to every row.
    pub fn compress_on(&self, tape: &mut Tape<T>, bound: &Bound, rows: NodeId) -> Result<NodeId> {
        if !self.config.compression {
            return Ok(rows);
        }
        let y = tape.matmul(rows, bound.node(self.layout.comp_w))?;
        tape.add_row(y, bound.node(self.layout.comp_b))
    }

    /// Compressed global query representations `[m × out_dim]`.
    pub fn query_reps_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        self.query_reps_batch_on(tape, bound, &[seq], dropout)
    }

    /// Stacked representations of several queries: `[count·g × out_dim]` where
    /// `g` is [`Self::reps_per_query`].
    pub fn query_reps_batch_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seqs: &[&TokenSequence],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let out = self.encode_batch_on(tape, bound, seqs, None, dropout)?;
        let spans: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.query_head_on(tape, bound, out, &spans)
    }

    /// Poly attention and compression over stacked query encoder outputs.
    pub fn query_head_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        out: NodeId,
        spans: &[usize],
    ) -> Result<NodeId> {
        let mut polys = Vec::with_capacity(spans.len());
        let mut start = 0;
        for &len in spans {
            let h = if spans.len() == 1 {
                out
            } else {
                let rows: Vec<usize> = (start..start + len).collect();
                tape.gather(out, &rows)?
            };
            start += len;
            polys.push(self.poly_on(tape, bound, h)?);
        }
        let p = if polys.len() == 1 { polys[0] } else { tape.stack_rows(&polys)? };
        self.compress_on(tape, bound, p)
    }

    /// Rows per query representation: `m` with poly attention, else 1.
    pub fn reps_per_query(&self) -> usize {
        if self.config.poly {
            self.config.context_codes
        } else {
            1
        }
    }

    /// Compressed document representation `[1 × out_dim]` from its CLS output.
    pub fn doc_rep_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seq: &TokenSequence,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        self.doc_reps_batch_on(tape, bound, &[seq], dropout)
    }

    /// Stacked document representations `[count × out_dim]`.
    pub fn doc_reps_batch_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        seqs: &[&TokenSequence],
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<NodeId> {
        let out = self.encode_batch_on(tape, bound, seqs, None, dropout)?;
        let spans: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        self.doc_head_on(tape, bound, out, &spans)
    }

    /// Compressed CLS rows of stacked document encoder outputs.
    pub fn doc_head_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        out: NodeId,
        spans: &[usize],
    ) -> Result<NodeId> {
        let mut cls = Vec::with_capacity(spans.len());
        let mut start = 0;
        for &len in spans {
            cls.push(start);
            start += len;
        }
        let c = tape.gather(out, &cls)?;
        self.compress_on(tape, bound, c)
    }

    /// MLM logits `[rows × vocab]` for selected output rows, tied to the token embeddings.
    pub fn mlm_logits_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        outputs: NodeId,
        positions: &[usize],
    ) -> Result<NodeId> {
        let h = tape.gather(outputs, positions)?;
        let logits = tape.matmul_bt(h, bound.node(self.layout.token_emb))?;
        tape.add_row(logits, bound.node(self.layout.mlm_bias))
    }

    /// NSP logits `[rows × 1]` from the `[CLS]` outputs at `cls_rows`.
    pub fn nsp_logits_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        outputs: NodeId,
        cls_rows: &[usize],
    ) -> Result<NodeId> {
        let cls = tape.gather(outputs, cls_rows)?;
        let z = tape.matmul(cls, bound.node(self.layout.nsp_w))?;
        tape.add_row(z, bound.node(self.layout.nsp_b))
    }

    /// Encodes one sequence. Passing a random source enables dropout.
    pub fn encode(&self, seq: &TokenSequence, rng: Option<&mut dyn RngCore>) -> Result<EncoderOutput<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let mut d = rng.map(|rng| Dropout {
            rate: self.config.dropout,
            rng,
        });
        let out = self.encode_on(&mut tape, &bound, seq, None, d.as_mut())?;
        let tokens = (*tape.value(out)).clone();
        let cls = Tensor::vector(tokens.row(0).to_vec());
        Ok(EncoderOutput { cls, tokens })
    }

    /// Query-side encoding. Parameters are shared, so this is [`Self::encode`].
    pub fn encode_query(&self, seq: &TokenSequence) -> Result<EncoderOutput<T>> {
        self.encode(seq, None)
    }

    /// Document-side encoding. Parameters are shared, so this is [`Self::encode`].
    pub fn encode_document(&self, seq: &TokenSequence) -> Result<EncoderOutput<T>> {
        self.encode(seq, None)
    }

    /// Affine compression of one `d_model` vector.
    pub fn compress(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.config.d_model {
            return Err(Error::Shape(format!(
                "compress expects width {}, got {}",
                self.config.d_model,
                v.len()
            )));
        }
        if !self.config.compression {
            return Ok(v.to_vec());
        }
        let w = &self.params[self.layout.comp_w.0].tensor;
        let b = &self.params[self.layout.comp_b.0].tensor;
        let mut out = vec![T::zero(); self.config.d_compress];
        kernels::matmul_acc(v, w.data(), &mut out, 1, self.config.d_model, self.config.d_compress);
        for (o, bv) in out.iter_mut().zip(b.data()) {
            *o += *bv;
        }
        Ok(out)
    }

    /// Compressed per-code query representations `[m × out_dim]`.
    pub fn query_reps(&self, seq: &TokenSequence) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let reps = self.query_reps_on(&mut tape, &bound, seq, None)?;
        Ok(tape.value(reps).clone())
    }

    /// Prediction-time query embedding: the mean of the compressed poly representations,
    /// which equals the compression of their mean since the layer is affine.
    pub fn embed_query(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        let reps = self.query_reps(seq)?;
        Ok(kernels::mean_rows(reps.data(), reps.rows(), reps.cols()))
    }

    /// Compressed CLS output of a document.
    pub fn embed_document(&self, seq: &TokenSequence) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let rep = self.doc_rep_on(&mut tape, &bound, seq, None)?;
        Ok(tape.value(rep).data().to_vec())
    }

    /// Embeds many documents, sharing one parameter binding per chunk.
    pub fn embed_documents(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<T>>> {
        self.embed_many(seqs, false)
    }

    pub fn embed_queries(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<T>>> {
        self.embed_many(seqs, true)
    }

    fn embed_many(&self, seqs: &[TokenSequence], query: bool) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(32) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            if query {
                let reps = self.query_reps_batch_on(&mut tape, &bound, &refs, None)?;
                let v = tape.value(reps);
                let g = self.reps_per_query();
                for block in v.data().chunks(g * v.cols()) {
                    out.push(kernels::mean_rows(block, g, v.cols()));
                }
            } else {
                let reps = self.doc_reps_batch_on(&mut tape, &bound, &refs, None)?;
                let v = tape.value(reps);
                out.extend(v.data().chunks(v.cols()).map(<[T]>::to_vec));
            }
        }
        Ok(out)
    }
}

/// Poly-attention weights and the resulting global representations.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyAttention<T> {
    /// `[m × (N + 1)]`, each row a probability vector.
    pub weights: Tensor<T>,
    /// `[m × d_model]`
    pub reps: Tensor<T>,
}

/// Each context code attends over `C, F_1..F_N` of the query encoder output.
pub fn poly_attend<T: Scalar>(codes: &Tensor<T>, out: &EncoderOutput<T>) -> Result<PolyAttention<T>> {
    let mut tape = Tape::new();
    let c = tape.constant(codes.clone());
    let o = tape.constant(out.tokens.clone());
    let logits = tape.matmul_bt(c, o)?;
    let w = tape.softmax_rows(logits, T::one())?;
    let reps = tape.matmul(w, o)?;
    Ok(PolyAttention {
        weights: tape.value(w).clone(),
        reps: tape.value(reps).clone(),
    })
}

fn check_width<T: Scalar>(p: &Tensor<T>, c_doc: &[T]) -> Result<()> {
    if p.cols() != c_doc.len() || p.rows() == 0 {
        return Err(Error::Shape(format!(
            "representations of shape {:?} against document width {}",
            p.shape(),
            c_doc.len()
        )));
    }
    Ok(())
}

/// Training-time relevance: `max_i P_i · c_doc` (lowest index wins ties).
pub fn score_train<T: Scalar>(p: &Tensor<T>, c_doc: &[T]) -> Result<T> {
    check_width(p, c_doc)?;
    let mut best = dot(p.row(0), c_doc);
    for i in 1..p.rows() {
        let s = dot(p.row(i), c_doc);
        if s > best {
            best = s;
        }
    }
    Ok(best)
}

/// Prediction-time relevance: `((1/m) Σ P_i) · c_doc`.
pub fn score_predict<T: Scalar>(p: &Tensor<T>, c_doc: &[T]) -> Result<T> {
    check_width(p, c_doc)?;
    let mean = kernels::mean_rows(p.data(), p.rows(), p.cols());
    Ok(dot(&mean, c_doc))
}

/// Scoring rule used when ranking with per-code representations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Max-pooling over codes.
    Train,
    /// Mean-pooled surrogate embedding.
    Predict,
}

impl ScoreMode {
    pub fn reduce(self) -> Reduce {
        match self {
            ScoreMode::Train => Reduce::Max,
            ScoreMode::Predict => Reduce::Mean,
        }
    }

    pub fn score<T: Scalar>(self, p: &Tensor<T>, c_doc: &[T]) -> Result<T> {
        match self {
            ScoreMode::Train => score_train(p, c_doc),
            ScoreMode::Predict => score_predict(p, c_doc),
        }
    }
}
