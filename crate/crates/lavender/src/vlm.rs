//! A small vision-language transformer in two flavors.
//!
//! The cross variant runs a causal text stack and injects text-to-patch
//! cross-attention at a configurable subset of layers; the self variant
//! interleaves patch and text tokens into one sequence and relies on
//! self-attention alone, with patches fully visible and text causal.
//! Either way, every text-to-patch attention row the model produces is
//! recorded so it can be aggregated, reconstructed, and aligned downstream.
//!
//! The "image encoder" is deliberately tiny: a linear projection of raw
//! patch features plus a learned positional embedding per patch.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// Attention wiring of the host model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Dedicated text-to-patch cross-attention layers.
    Cross,
    /// One interleaved sequence, self-attention only.
    SelfOnly,
}

#[derive(Debug, Clone)]
pub struct VlmConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Layers carrying cross-attention (cross variant only).
    pub cross_layers: Vec<usize>,
    pub vocab_size: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub max_text_len: usize,
    /// Raw per-patch feature width fed to the linear image projection.
    pub d_patch_in: usize,
}

impl VlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Invalid {
                op: "VlmConfig",
                detail: format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads),
            });
        }
        if let Some(&bad) = self.cross_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(Error::Invalid {
                op: "VlmConfig",
                detail: format!("cross layer {bad} outside 0..{}", self.n_layers),
            });
        }
        if self.variant == Variant::Cross && self.cross_layers.is_empty() {
            return Err(Error::Invalid { op: "VlmConfig", detail: "cross variant needs cross layers".into() });
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Layers whose attention is recorded for alignment.
    pub fn recordable_layers(&self) -> Vec<usize> {
        match self.variant {
            Variant::Cross => self.cross_layers.clone(),
            Variant::SelfOnly => (0..self.n_layers).collect(),
        }
    }

    /// Default 4-layer cross model for the color-grid task.
    pub fn toy_cross(vocab_size: usize, patch_rows: usize, patch_cols: usize, d_patch_in: usize) -> Self {
        VlmConfig {
            variant: Variant::Cross,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            cross_layers: vec![1, 3],
            vocab_size,
            patch_rows,
            patch_cols,
            max_text_len: 16,
            d_patch_in,
        }
    }

    /// Small self-attention-only counterpart.
    pub fn toy_self(vocab_size: usize, patch_rows: usize, patch_cols: usize, d_patch_in: usize) -> Self {
        VlmConfig {
            variant: Variant::SelfOnly,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            cross_layers: vec![],
            vocab_size,
            patch_rows,
            patch_cols,
            max_text_len: 16,
            d_patch_in,
        }
    }
}

/// Whitespace-token vocabulary: a word <-> id map.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Self {
        Vocab { words }
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// One training example: patch features plus a tokenized question/label pair.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub sample_id: String,
    /// [n_patch, d_patch_in] raw patch features.
    pub image: Tensor,
    pub question: Vec<usize>,
    pub label: Vec<usize>,
    /// Color id per cell (kept for scene reconstruction and inspection).
    pub cell_colors: Vec<usize>,
    /// Cell the question asks about.
    pub queried_cell: usize,
}

/// Recorded attention weights for one forward pass.
///
/// Cross variant: one entry per cross layer, each head a [n_text, n_patch]
/// row-stochastic matrix. Self variant: one entry per layer, each head the
/// full [seq, seq] matrix; text-to-patch sub-rows are extracted later and
/// are not individually normalized.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub variant: Variant,
    pub layers: Vec<AttentionLayer>,
    pub n_text: usize,
    pub n_patch: usize,
    /// Sequence offset of the first text token (self variant; 0 for cross).
    pub text_offset: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub layer: usize,
    /// One weight matrix per head.
    pub heads: Vec<Var>,
}

impl AttentionRecord {
    /// Materialize the recorded weights as
    /// [n_layers_recorded, n_heads, rows, cols] values.
    pub fn values(&self, g: &Graph) -> Tensor {
        let (l, h) = (self.layers.len(), self.layers[0].heads.len());
        let shape = g.value(self.layers[0].heads[0]).shape().to_vec();
        let (r, c) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(l * h * r * c);
        for layer in &self.layers {
            for &head in &layer.heads {
                data.extend_from_slice(g.value(head).data());
            }
        }
        Tensor::from_vec(vec![l, h, r, c], data).unwrap()
    }
}

/// Per-layer hidden states captured for the learned aggregation path.
#[derive(Debug, Clone)]
pub struct LayerHidden {
    pub layer: usize,
    /// Text-side hidden state entering the layer's attention: [n_text, d].
    pub text: Var,
    /// Patch-side hidden state the same attention reads: [n_patch, d].
    pub patch: Var,
}

/// Everything a forward pass exposes to the losses and the aligner.
pub struct ForwardPass {
    /// Next-token logits for every sequence position: [n_text, vocab]
    /// (text positions only in the self variant).
    pub logits_all: Var,
    pub record: AttentionRecord,
    pub hidden: Vec<LayerHidden>,
    pub q_len: usize,
    pub n_label: usize,
}

impl ForwardPass {
    /// Logits rows that predict the label tokens: [n_label, vocab].
    pub fn label_logits(&self, g: &mut Graph) -> Result<Var> {
        let idx: Vec<usize> = (0..self.n_label).map(|i| self.q_len - 1 + i).collect();
        g.gather_rows(self.logits_all, &idx)
    }

    /// Sequence row (within the record) of the i-th label token.
    pub fn label_row(&self, i: usize) -> usize {
        self.record.text_offset + self.q_len + i
    }
}

/// Scaled dot-product attention: weights = softmax(Q Kᵀ / sqrt(d_k) + mask),
/// out = weights · V. Returns (out, weights).
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Tensor>,
) -> Result<(Var, Var)> {
    let dq = g.value(q).shape().to_vec();
    let dk = g.value(k).shape().to_vec();
    if dq.len() != 2 || dk.len() != 2 || dq[1] != dk[1] {
        return Err(Error::ShapeMismatch { op: "scaled_dot_attention", lhs: dq, rhs: dk });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (dq[1] as f64).sqrt())?;
    let weights = g.softmax(scaled, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Negative log-likelihood of the labels under the logit rows, summed over
/// label positions (batch averaging is the trainer's job).
pub fn vlm_nll(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.nll_rows(logits, labels)
}

/// The toy host model: named parameters plus the config that shapes them.
#[derive(Debug, Clone)]
pub struct ToyVlm {
    pub cfg: VlmConfig,
    pub params: ParamSet,
}

impl ToyVlm {
    pub fn new(cfg: VlmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::ModelInit);
        let params = init_params(&cfg, &mut rng);
        Ok(ToyVlm { cfg, params })
    }

    /// Bind parameters into a graph; `trainable` controls gradient tracking.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams::bind(g, &self.params, trainable)
    }

    /// Run the model over `question ++ label_input` with teacher forcing.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, sample: &SamplePair) -> Result<ForwardPass> {
        let tokens: Vec<usize> = sample.question.iter().chain(&sample.label).copied().collect();
        self.forward_tokens(g, bound, &sample.image, &tokens, sample.question.len(), sample.label.len())
    }

    /// Forward over an explicit token sequence (used by decoding too).
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        image: &Tensor,
        tokens: &[usize],
        q_len: usize,
        n_label: usize,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let t = tokens.len();
        if t > cfg.max_text_len {
            return Err(Error::SequenceTooLong { len: t, max: cfg.max_text_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: cfg.vocab_size });
        }
        if image.shape() != [cfg.n_patches(), cfg.d_patch_in] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: image.shape().to_vec(),
                rhs: vec![cfg.n_patches(), cfg.d_patch_in],
            });
        }

        // Patch embeddings: linear projection + positional table.
        let img = g.input(image);
        let proj = bound.var("img.proj")?;
        let projected = g.matmul(img, proj)?;
        let pos_patch = bound.var("embed.pos_patch")?;
        let h_patch = g.add(projected, pos_patch)?;

        // Text embeddings.
        let table = bound.var("embed.tok")?;
        let tok_emb = g.gather_rows(table, tokens)?;
        let pos_text_full = bound.var("embed.pos_text")?;
        let pos_text = g.slice_rows(pos_text_full, 0, t)?;
        let h_text = g.add(tok_emb, pos_text)?;

        match cfg.variant {
            Variant::Cross => self.forward_cross(g, bound, h_text, h_patch, t, q_len, n_label),
            Variant::SelfOnly => self.forward_self(g, bound, h_text, h_patch, t, q_len, n_label),
        }
    }

    fn forward_cross(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        mut h: Var,
        h_patch: Var,
        t: usize,
        q_len: usize,
        n_label: usize,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let causal = causal_mask(t);
        let mut layers = Vec::new();
        let mut hidden = Vec::new();

        for l in 0..cfg.n_layers {
            h = self.self_attention_block(g, bound, h, &format!("layer{l}.self"), Some(&causal))?;

            if cfg.cross_layers.contains(&l) {
                hidden.push(LayerHidden { layer: l, text: h, patch: h_patch });
                let mut heads = Vec::with_capacity(cfg.n_heads);
                let mut outs = Vec::with_capacity(cfg.n_heads);
                for hd in 0..cfg.n_heads {
                    let q = g.matmul(h, bound.var(&format!("layer{l}.cross.q.h{hd}"))?)?;
                    let k = g.matmul(h_patch, bound.var(&format!("layer{l}.cross.k.h{hd}"))?)?;
                    let v = g.matmul(h_patch, bound.var(&format!("layer{l}.cross.v.h{hd}"))?)?;
                    let (out, w) = scaled_dot_attention(g, q, k, v, None)?;
                    let o = g.matmul(out, bound.var(&format!("layer{l}.cross.o.h{hd}"))?)?;
                    heads.push(w);
                    outs.push(o);
                }
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = g.add(acc, o)?;
                }
                h = g.add(h, acc)?;
                layers.push(AttentionLayer { layer: l, heads });
            }

            h = self.mlp_block(g, bound, h, l)?;
        }

        let logits_all = g.matmul(h, bound.var("head.out")?)?;
        Ok(ForwardPass {
            logits_all,
            record: AttentionRecord {
                variant: Variant::Cross,
                layers,
                n_text: t,
                n_patch: cfg.n_patches(),
                text_offset: 0,
            },
            hidden,
            q_len,
            n_label,
        })
    }

    fn forward_self(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h_text: Var,
        h_patch: Var,
        t: usize,
        q_len: usize,
        n_label: usize,
    ) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let p = cfg.n_patches();
        let s = p + t;
        let mask = patch_text_mask(p, t);
        let mut h = g.concat_rows(h_patch, h_text)?;
        let mut layers = Vec::new();
        let mut hidden = Vec::new();

        for l in 0..cfg.n_layers {
            hidden.push(LayerHidden { layer: l, text: h, patch: h });
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut outs = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let q = g.matmul(h, bound.var(&format!("layer{l}.self.q.h{hd}"))?)?;
                let k = g.matmul(h, bound.var(&format!("layer{l}.self.k.h{hd}"))?)?;
                let v = g.matmul(h, bound.var(&format!("layer{l}.self.v.h{hd}"))?)?;
                let (out, w) = scaled_dot_attention(g, q, k, v, Some(&mask))?;
                let o = g.matmul(out, bound.var(&format!("layer{l}.self.o.h{hd}"))?)?;
                heads.push(w);
                outs.push(o);
            }
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = g.add(acc, o)?;
            }
            h = g.add(h, acc)?;
            h = self.mlp_block(g, bound, h, l)?;
            layers.push(AttentionLayer { layer: l, heads });
        }

        let h_text_rows = g.slice_rows(h, p, s)?;
        let logits_all = g.matmul(h_text_rows, bound.var("head.out")?)?;
        Ok(ForwardPass {
            logits_all,
            record: AttentionRecord {
                variant: Variant::SelfOnly,
                layers,
                n_text: t,
                n_patch: p,
                text_offset: p,
            },
            hidden,
            q_len,
            n_label,
        })
    }

    fn self_attention_block(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: Var,
        prefix: &str,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.cfg.n_heads);
        for hd in 0..self.cfg.n_heads {
            let q = g.matmul(h, bound.var(&format!("{prefix}.q.h{hd}"))?)?;
            let k = g.matmul(h, bound.var(&format!("{prefix}.k.h{hd}"))?)?;
            let v = g.matmul(h, bound.var(&format!("{prefix}.v.h{hd}"))?)?;
            let (out, _) = scaled_dot_attention(g, q, k, v, mask)?;
            let o = g.matmul(out, bound.var(&format!("{prefix}.o.h{hd}"))?)?;
            outs.push(o);
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = g.add(acc, o)?;
        }
        g.add(h, acc)
    }

    fn mlp_block(&self, g: &mut Graph, bound: &BoundParams, h: Var, l: usize) -> Result<Var> {
        let w1 = bound.var(&format!("layer{l}.mlp.w1"))?;
        let b1 = bound.var(&format!("layer{l}.mlp.b1"))?;
        let w2 = bound.var(&format!("layer{l}.mlp.w2"))?;
        let b2 = bound.var(&format!("layer{l}.mlp.b2"))?;
        let a = g.matmul(h, w1)?;
        let a = g.add_bias(a, b1)?;
        let a = g.silu(a)?;
        let b = g.matmul(a, w2)?;
        let b = g.add_bias(b, b2)?;
        g.add(h, b)
    }

    /// Greedy next-token decoding of `n_label` tokens after the question.
    pub fn greedy_decode(&self, image: &Tensor, question: &[usize], n_label: usize) -> Result<Vec<usize>> {
        let mut tokens = question.to_vec();
        let mut out = Vec::with_capacity(n_label);
        for _ in 0..n_label {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false);
            let fp = self.forward_tokens(&mut g, &bound, image, &tokens, tokens.len(), 0)?;
            let logits = g.value(fp.logits_all);
            let v = logits.last_dim();
            let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            out.push(next);
            tokens.push(next);
        }
        Ok(out)
    }
}

/// Additive causal mask over a length-`t` sequence.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![t, t]);
    for i in 0..t {
        for j in (i + 1)..t {
            m.data_mut()[i * t + j] = crate::tensor::mask_blocked();
        }
    }
    m
}

/// Mask for the interleaved [patches ∥ text] sequence: patches are visible
/// to every position, text is causal, patches do not look at text.
pub fn patch_text_mask(p: usize, t: usize) -> Tensor {
    let s = p + t;
    let mut m = Tensor::zeros(vec![s, s]);
    for i in 0..s {
        for j in 0..s {
            let allowed = j < p || j <= i;
            if !allowed {
                m.data_mut()[i * s + j] = crate::tensor::mask_blocked();
            }
        }
    }
    m
}

fn init_params(cfg: &VlmConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let v = cfg.vocab_size;
    let p = cfg.n_patches();
    // Residual-path outputs are initialized smaller to keep the stack stable
    // without normalization layers.
    let base_std = 1.0 / (d as f64).sqrt();
    let out_std = base_std / (2.0 * cfg.n_layers as f64).sqrt();

    let mut ps = ParamSet::new();
    ps.insert("embed.tok", Tensor::randn(vec![v, d], base_std, rng));
    ps.insert("embed.pos_text", Tensor::randn(vec![cfg.max_text_len, d], base_std, rng));
    ps.insert("embed.pos_patch", Tensor::randn(vec![p, d], base_std, rng));
    ps.insert("img.proj", Tensor::randn(vec![cfg.d_patch_in, d], base_std, rng));
    for l in 0..cfg.n_layers {
        for hd in 0..cfg.n_heads {
            ps.insert(format!("layer{l}.self.q.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
            ps.insert(format!("layer{l}.self.k.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
            ps.insert(format!("layer{l}.self.v.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
            ps.insert(format!("layer{l}.self.o.h{hd}"), Tensor::randn(vec![dh, d], out_std, rng));
        }
        if cfg.variant == Variant::Cross && cfg.cross_layers.contains(&l) {
            for hd in 0..cfg.n_heads {
                ps.insert(format!("layer{l}.cross.q.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
                ps.insert(format!("layer{l}.cross.k.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
                ps.insert(format!("layer{l}.cross.v.h{hd}"), Tensor::randn(vec![d, dh], base_std, rng));
                ps.insert(format!("layer{l}.cross.o.h{hd}"), Tensor::randn(vec![dh, d], out_std, rng));
            }
        }
        let hidden = 4 * d;
        ps.insert(format!("layer{l}.mlp.w1"), Tensor::randn(vec![d, hidden], base_std, rng));
        ps.insert(format!("layer{l}.mlp.b1"), Tensor::zeros(vec![hidden]));
        ps.insert(format!("layer{l}.mlp.w2"), Tensor::randn(vec![hidden, d], out_std, rng));
        ps.insert(format!("layer{l}.mlp.b2"), Tensor::zeros(vec![d]));
    }
    ps.insert("head.out", Tensor::randn(vec![d, v], base_std, rng));
    ps
}

/// Exact-match accuracy of greedy decoding over a sample set.
/// Single-token labels share one parameter binding across the whole set.
pub fn exact_match_accuracy(model: &ToyVlm, samples: &[SamplePair]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let mut hits = 0usize;
    for s in samples {
        if s.label.len() == 1 {
            let fp = model.forward_tokens(&mut g, &bound, &s.image, &s.question, s.question.len(), 0)?;
            let logits = g.value(fp.logits_all);
            let v = logits.last_dim();
            let last = &logits.data()[(s.question.len() - 1) * v..s.question.len() * v];
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if next == s.label[0] {
                hits += 1;
            }
        } else {
            let decoded = model.greedy_decode(&s.image, &s.question, s.label.len())?;
            if decoded == s.label {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{build_vocab, make_dataset};

    fn tiny_cfg() -> VlmConfig {
        VlmConfig {
            variant: Variant::Cross,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            cross_layers: vec![1],
            vocab_size: 8,
            patch_rows: 2,
            patch_cols: 2,
            max_text_len: 8,
            d_patch_in: 3,
        }
    }

    fn tiny_sample() -> SamplePair {
        SamplePair {
            sample_id: "t0".into(),
            image: Tensor::from_vec(vec![4, 3], (0..12).map(|v| v as f64 / 12.0).collect()).unwrap(),
            question: vec![0, 1, 2],
            label: vec![3],
            cell_colors: vec![0, 1, 2, 3],
            queried_cell: 0,
        }
    }

    #[test]
    fn logits_shape_matches_labels() {
        let model = ToyVlm::new(tiny_cfg(), 1).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &tiny_sample()).unwrap();
        let logits = fp.label_logits(&mut g).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 8]);
    }

    #[test]
    fn zero_head_gives_uniform_nll() {
        let mut model = ToyVlm::new(tiny_cfg(), 1).unwrap();
        *model.params.get_mut("head.out").unwrap() = Tensor::zeros(vec![16, 8]);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &tiny_sample()).unwrap();
        let logits = fp.label_logits(&mut g).unwrap();
        let nll = vlm_nll(&mut g, logits, &[3]).unwrap();
        assert!((g.value(nll).data()[0] - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_of_confident_logits() {
        // -log softmax([2,0,0])[0] hand-evaluated at 64-bit.
        let mut g = Graph::new();
        let logits = g.input(&Tensor::from_vec(vec![1, 3], vec![2.0, 0.0, 0.0]).unwrap());
        let nll = vlm_nll(&mut g, logits, &[0]).unwrap();
        let expected = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((g.value(nll).data()[0] - expected).abs() < 1e-12);
        assert!((g.value(nll).data()[0] - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn cross_attention_rows_are_stochastic() {
        let model = ToyVlm::new(tiny_cfg(), 2).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &tiny_sample()).unwrap();
        assert_eq!(fp.record.layers.len(), 1);
        for layer in &fp.record.layers {
            for &head in &layer.heads {
                let w = g.value(head);
                assert_eq!(w.shape(), &[4, 4]); // 4 text tokens, 4 patches
                for row in w.data().chunks(4) {
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn self_variant_obeys_causal_mask_exactly() {
        let mut cfg = tiny_cfg();
        cfg.variant = Variant::SelfOnly;
        cfg.cross_layers = vec![];
        let model = ToyVlm::new(cfg, 3).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &tiny_sample()).unwrap();
        let p = 4;
        for layer in &fp.record.layers {
            for &head in &layer.heads {
                let w = g.value(head);
                let s = w.shape()[0];
                for i in p..s {
                    for j in (i + 1)..s {
                        assert_eq!(w.at2(i, j), 0.0, "future text leaked at ({i},{j})");
                    }
                }
                // Patch rows must not see text at all.
                for i in 0..p {
                    for j in p..s {
                        assert_eq!(w.at2(i, j), 0.0, "patch row saw text at ({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn patch_permutation_equivariance() {
        let model = ToyVlm::new(tiny_cfg(), 4).unwrap();
        let sample = tiny_sample();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &sample).unwrap();
        let base = g.value(fp.logits_all).clone();

        // Permute patches and the positional table the same way.
        let perm = [2usize, 0, 3, 1];
        let mut permuted = model.clone();
        let pos = permuted.params.get("embed.pos_patch").unwrap().clone();
        let mut new_pos = pos.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let d = pos.shape()[1];
            new_pos.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&pos.data()[src * d..(src + 1) * d]);
        }
        *permuted.params.get_mut("embed.pos_patch").unwrap() = new_pos;

        let mut img = sample.image.clone();
        for (dst, &src) in perm.iter().enumerate() {
            let d = sample.image.shape()[1];
            img.data_mut()[dst * d..(dst + 1) * d].copy_from_slice(&sample.image.data()[src * d..(src + 1) * d]);
        }
        let sample2 = SamplePair { image: img, ..sample.clone() };

        let mut g2 = Graph::new();
        let bound2 = permuted.bind(&mut g2, false);
        let fp2 = permuted.forward(&mut g2, &bound2, &sample2).unwrap();
        let other = g2.value(fp2.logits_all);
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-9, "logits changed under patch permutation");
        }
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let model = ToyVlm::new(tiny_cfg(), 5).unwrap();
        let mut s = tiny_sample();
        s.question = vec![0; 9];
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        match model.forward(&mut g, &bound, &s) {
            Err(Error::SequenceTooLong { .. }) => {}
            other => panic!("expected SequenceTooLong, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn scaled_dot_attention_matches_hand_value() {
        // Q=[[1,0]], K=I2, d_k=2: weights = softmax([1/sqrt(2), 0]).
        let mut g = Graph::new();
        let q = g.input(&Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let k = g.input(&Tensor::eye(2));
        let v = g.input(&Tensor::eye(2));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        let got = g.value(w);
        assert!((got.data()[0] - 0.6698).abs() < 1e-4);
        assert!((got.data()[1] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let mut g = Graph::new();
        let q = g.input(&Tensor::zeros(vec![2, 3]));
        let k = g.input(&Tensor::from_vec(vec![4, 3], (0..12).map(|v| v as f64).collect()).unwrap());
        let v = g.input(&Tensor::zeros(vec![4, 2]));
        let (_, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
        for row in g.value(w).data().chunks(4) {
            for x in row {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn greedy_decode_runs_on_dataset_sample() {
        let vocab = build_vocab(4, 4);
        let data = make_dataset(1, 4, 4, &vocab, 1).unwrap();
        let (pair, _) = &data[0];
        let cfg = VlmConfig::toy_cross(vocab.len(), 4, 4, 8);
        let model = ToyVlm::new(cfg, 9).unwrap();
        let out = model.greedy_decode(&pair.image, &pair.question, 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0] < vocab.len());
    }
}
