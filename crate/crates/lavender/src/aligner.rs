//! The aligner: a small trainable map from aggregated student attention to
//! a teacher-comparable single-channel distribution.
//!
//! Conv kind: expand 1 -> `expansion` channels with 3x3 same-padding
//! convolutions, SiLU between stages, optional instance/batch normalization,
//! and a final projection back to one channel. Mlp kind: the same recipe on
//! the flattened 1024-cell vector. Either way the output passes through a
//! softmax over all cells, so it is always a distribution — leaving the raw
//! network output unnormalized would make the MSE scale-ambiguous.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::rng::{stream, Stream};
use crate::teacher::{SaliencyMap, MAP_CELLS, MAP_SIDE};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignerKind {
    Conv,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignerNorm {
    Instance,
    Batch,
    None,
}

/// Hidden-stage count presets: light = 1, sim = 2, deep = 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignerDepth {
    Light,
    Sim,
    Deep,
}

impl AlignerDepth {
    pub fn blocks(self) -> usize {
        match self {
            AlignerDepth::Light => 1,
            AlignerDepth::Sim => 2,
            AlignerDepth::Deep => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(AlignerDepth::Light),
            "sim" => Ok(AlignerDepth::Sim),
            "deep" => Ok(AlignerDepth::Deep),
            other => Err(Error::Config(format!("unknown aligner depth {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignerConfig {
    pub depth: AlignerDepth,
    pub kind: AlignerKind,
    pub norm: AlignerNorm,
    /// Channel (conv) or width (mlp) multiplier.
    pub expansion: usize,
}

impl Default for AlignerConfig {
    fn default() -> Self {
        AlignerConfig {
            depth: AlignerDepth::Sim,
            kind: AlignerKind::Conv,
            norm: AlignerNorm::Instance,
            expansion: 4,
        }
    }
}

impl AlignerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.expansion == 0 {
            return Err(Error::Invalid { op: "AlignerConfig", detail: "expansion must be >= 1".into() });
        }
        Ok(())
    }

    /// Parse "light-conv", "deep-mlp", etc.
    pub fn parse(s: &str) -> Result<Self> {
        let (depth, kind) = s.split_once('-').ok_or_else(|| {
            Error::Config(format!("aligner spec {s:?} should look like depth-kind, e.g. sim-conv"))
        })?;
        let kind = match kind {
            "conv" => AlignerKind::Conv,
            "mlp" => AlignerKind::Mlp,
            other => return Err(Error::Config(format!("unknown aligner kind {other:?}"))),
        };
        Ok(AlignerConfig { depth: AlignerDepth::parse(depth)?, kind, ..Default::default() })
    }

    pub fn name(&self) -> String {
        let d = match self.depth {
            AlignerDepth::Light => "light",
            AlignerDepth::Sim => "sim",
            AlignerDepth::Deep => "deep",
        };
        let k = match self.kind {
            AlignerKind::Conv => "conv",
            AlignerKind::Mlp => "mlp",
        };
        format!("{d}-{k}")
    }
}

const NORM_EPS: f64 = 1e-5;

/// The aligner network's parameters plus its configuration.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub cfg: AlignerConfig,
    pub params: ParamSet,
}

impl Aligner {
    pub fn new(cfg: AlignerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, Stream::AlignerInit);
        let params = init_aligner(&cfg, &mut rng);
        Ok(Aligner { cfg, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams::bind(g, &self.params, trainable)
    }

    /// Refine a stack of [n_words, 32, 32] maps into distributions of the
    /// same shape. Inputs are expected to be normalized per word.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, input: Var) -> Result<Var> {
        let shape = g.value(input).shape().to_vec();
        if shape.len() != 3 || shape[1] != MAP_SIDE || shape[2] != MAP_SIDE {
            return Err(Error::ShapeMismatch {
                op: "aligner_forward",
                lhs: shape,
                rhs: vec![0, MAP_SIDE, MAP_SIDE],
            });
        }
        let n = shape[0];
        let logits = match self.cfg.kind {
            AlignerKind::Conv => self.forward_conv(g, bound, input, n)?,
            AlignerKind::Mlp => self.forward_mlp(g, bound, input, n)?,
        };
        let flat = g.reshape(logits, vec![n, MAP_CELLS])?;
        let dist = g.softmax(flat, None)?;
        g.reshape(dist, vec![n, MAP_SIDE, MAP_SIDE])
    }

    fn forward_conv(&self, g: &mut Graph, bound: &BoundParams, input: Var, n: usize) -> Result<Var> {
        let mut h = g.reshape(input, vec![n, 1, MAP_SIDE, MAP_SIDE])?;
        let stages = self.cfg.depth.blocks();
        for i in 0..stages {
            let w = bound.var(&format!("aligner.conv{i}.w"))?;
            let b = bound.var(&format!("aligner.conv{i}.b"))?;
            h = g.conv2d(h, w, b)?;
            h = self.apply_norm(g, h)?;
            h = g.silu(h)?;
        }
        let w = bound.var("aligner.out.w")?;
        let b = bound.var("aligner.out.b")?;
        h = g.conv2d(h, w, b)?;
        g.reshape(h, vec![n, MAP_SIDE, MAP_SIDE])
    }

    fn forward_mlp(&self, g: &mut Graph, bound: &BoundParams, input: Var, n: usize) -> Result<Var> {
        let mut h = g.reshape(input, vec![n, MAP_CELLS])?;
        let stages = self.cfg.depth.blocks();
        let width = MAP_CELLS * self.cfg.expansion;
        for i in 0..stages {
            let w = bound.var(&format!("aligner.fc{i}.w"))?;
            let b = bound.var(&format!("aligner.fc{i}.b"))?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if self.cfg.norm != AlignerNorm::None {
                let cur = g.value(h).shape().to_vec();
                let as4d = g.reshape(h, vec![n, 1, 1, width])?;
                let normed = self.apply_norm(g, as4d)?;
                h = g.reshape(normed, cur)?;
            }
            h = g.silu(h)?;
        }
        let w = bound.var("aligner.fcout.w")?;
        let b = bound.var("aligner.fcout.b")?;
        h = g.matmul(h, w)?;
        h = g.add_bias(h, b)?;
        g.reshape(h, vec![n, MAP_SIDE, MAP_SIDE])
    }

    fn apply_norm(&self, g: &mut Graph, h: Var) -> Result<Var> {
        match self.cfg.norm {
            AlignerNorm::Instance => g.instance_norm(h, NORM_EPS),
            AlignerNorm::Batch => g.batch_norm(h, NORM_EPS),
            AlignerNorm::None => Ok(h),
        }
    }
}

fn init_aligner(cfg: &AlignerConfig, rng: &mut ChaCha12Rng) -> ParamSet {
    let mut ps = ParamSet::new();
    let e = cfg.expansion;
    match cfg.kind {
        AlignerKind::Conv => {
            let stages = cfg.depth.blocks();
            for i in 0..stages {
                let c_in = if i == 0 { 1 } else { e };
                let std = 1.0 / ((c_in * 9) as f64).sqrt();
                ps.insert(format!("aligner.conv{i}.w"), Tensor::randn(vec![e, c_in, 3, 3], std, rng));
                ps.insert(format!("aligner.conv{i}.b"), Tensor::zeros(vec![e]));
            }
            let std = 1.0 / ((e * 9) as f64).sqrt();
            ps.insert("aligner.out.w", Tensor::randn(vec![1, e, 3, 3], std, rng));
            ps.insert("aligner.out.b", Tensor::zeros(vec![1]));
        }
        AlignerKind::Mlp => {
            let stages = cfg.depth.blocks();
            let width = MAP_CELLS * e;
            for i in 0..stages {
                let d_in = if i == 0 { MAP_CELLS } else { width };
                let std = 1.0 / (d_in as f64).sqrt();
                ps.insert(format!("aligner.fc{i}.w"), Tensor::randn(vec![d_in, width], std, rng));
                ps.insert(format!("aligner.fc{i}.b"), Tensor::zeros(vec![width]));
            }
            let std = 1.0 / (width as f64).sqrt();
            ps.insert("aligner.fcout.w", Tensor::randn(vec![width, MAP_CELLS], std, rng));
            ps.insert("aligner.fcout.b", Tensor::zeros(vec![MAP_CELLS]));
        }
    }
    ps
}

/// Mean over matched words of the summed squared pointwise difference
/// between student and teacher maps. `None` when nothing matched — the
/// trainer then drops the alignment term for the step.
pub fn attention_alignment_loss(
    g: &mut Graph,
    student: Var,
    teachers: &[&SaliencyMap],
) -> Result<Option<Var>> {
    if teachers.is_empty() {
        return Ok(None);
    }
    let shape = g.value(student).shape().to_vec();
    if shape.len() != 3 || shape[0] != teachers.len() || shape[1] != MAP_SIDE || shape[2] != MAP_SIDE {
        return Err(Error::ShapeMismatch {
            op: "attention_alignment_loss",
            lhs: shape,
            rhs: vec![teachers.len(), MAP_SIDE, MAP_SIDE],
        });
    }
    let flat = g.reshape(student, vec![teachers.len(), MAP_CELLS])?;
    let mut terms = Vec::with_capacity(teachers.len());
    for (i, t) in teachers.iter().enumerate() {
        let s_row = g.gather_rows(flat, &[i])?;
        let t_row = g.input(&Tensor::from_vec(vec![1, MAP_CELLS], t.grid_f64())?);
        terms.push(g.sq_error(s_row, t_row)?);
    }
    let loss = g.mean_of(&terms)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite { op: "attention_alignment_loss", node: loss.index() });
    }
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn normalized_stack(g: &mut Graph, n: usize, seed: u64) -> Var {
        let mut rng = stream(seed, Stream::Other(40));
        let t = Tensor::rand_uniform(vec![n, MAP_CELLS], 0.0, 1.0, &mut rng);
        let x = g.input(&t);
        let normed = g.normalize_rows(x).unwrap();
        g.reshape(normed, vec![n, MAP_SIDE, MAP_SIDE]).unwrap()
    }

    #[test]
    fn output_rows_are_distributions() {
        for kind in [AlignerKind::Conv, AlignerKind::Mlp] {
            for norm in [AlignerNorm::Instance, AlignerNorm::Batch, AlignerNorm::None] {
                let cfg = AlignerConfig { depth: AlignerDepth::Light, kind, norm, expansion: 2 };
                let aligner = Aligner::new(cfg, 3).unwrap();
                let mut g = Graph::new();
                let x = normalized_stack(&mut g, 2, 5);
                let bound = aligner.bind(&mut g, false);
                let y = aligner.forward(&mut g, &bound, x).unwrap();
                let v = g.value(y);
                assert_eq!(v.shape(), &[2, MAP_SIDE, MAP_SIDE]);
                for row in v.data().chunks(MAP_CELLS) {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    assert!(row.iter().all(|x| *x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let cfg = AlignerConfig { depth: AlignerDepth::Light, kind: AlignerKind::Conv, norm: AlignerNorm::None, expansion: 2 };
        let mut aligner = Aligner::new(cfg, 1).unwrap();
        for (_, t) in aligner.params.iter_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::zeros(shape);
        }
        let mut g = Graph::new();
        let x = normalized_stack(&mut g, 1, 6);
        let bound = aligner.bind(&mut g, false);
        let y = aligner.forward(&mut g, &bound, x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / MAP_CELLS as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn center_tap_identity_preserves_argmax() {
        // Single conv stage, no norm: center tap scaled so the softmax keeps
        // the input's peak where it was.
        let cfg = AlignerConfig { depth: AlignerDepth::Light, kind: AlignerKind::Conv, norm: AlignerNorm::None, expansion: 1 };
        let mut aligner = Aligner::new(cfg, 2).unwrap();
        let logit_scale = 50.0;
        let mut w0 = Tensor::zeros(vec![1, 1, 3, 3]);
        w0.data_mut()[4] = 1.0; // center tap
        *aligner.params.get_mut("aligner.conv0.w").unwrap() = w0;
        *aligner.params.get_mut("aligner.conv0.b").unwrap() = Tensor::zeros(vec![1]);
        let mut wout = Tensor::zeros(vec![1, 1, 3, 3]);
        wout.data_mut()[4] = logit_scale;
        *aligner.params.get_mut("aligner.out.w").unwrap() = wout;
        *aligner.params.get_mut("aligner.out.b").unwrap() = Tensor::zeros(vec![1]);

        let mut g = Graph::new();
        let x = normalized_stack(&mut g, 1, 7);
        let input_argmax = g
            .value(x)
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let bound = aligner.bind(&mut g, false);
        let y = aligner.forward(&mut g, &bound, x).unwrap();
        let out_argmax = g
            .value(y)
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // SiLU is monotone for the non-negative inputs here, so the peak
        // survives both stages and the softmax.
        assert_eq!(input_argmax, out_argmax);
    }

    #[test]
    fn loss_zero_iff_equal_and_symmetric() {
        let m = crate::teacher::SaliencyMap::from_f64("w", &vec![1.0 / MAP_CELLS as f64; MAP_CELLS]).unwrap();
        let mut g = Graph::new();
        let s = g.input(&Tensor::from_vec(vec![1, MAP_SIDE, MAP_SIDE], m.grid_f64()).unwrap());
        let loss = attention_alignment_loss(&mut g, s, &[&m]).unwrap().unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-15);
    }

    #[test]
    fn uniform_vs_onehot_closed_form() {
        let mut one_hot = vec![0.0f64; MAP_CELLS];
        one_hot[0] = 1.0;
        let teacher = crate::teacher::SaliencyMap::from_f64("w", &one_hot).unwrap();
        let mut g = Graph::new();
        let uniform = Tensor::filled(vec![1, MAP_SIDE, MAP_SIDE], 1.0 / MAP_CELLS as f64);
        let s = g.input(&uniform);
        let loss = attention_alignment_loss(&mut g, s, &[&teacher]).unwrap().unwrap();
        let n = MAP_CELLS as f64;
        let expected = (n - 1.0) * (1.0 / n) * (1.0 / n) + (1.0 - 1.0 / n) * (1.0 - 1.0 / n);
        let got = g.value(loss).data()[0];
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.99902).abs() < 1e-5);
    }

    #[test]
    fn loss_is_mean_over_words() {
        let mut hot_a = vec![0.0f64; MAP_CELLS];
        hot_a[3] = 1.0;
        let mut hot_b = vec![0.0f64; MAP_CELLS];
        hot_b[9] = 1.0;
        let ta = crate::teacher::SaliencyMap::from_f64("a", &hot_a).unwrap();
        let tb = crate::teacher::SaliencyMap::from_f64("b", &hot_b).unwrap();

        let mut g = Graph::new();
        let uniform = Tensor::filled(vec![1, MAP_SIDE, MAP_SIDE], 1.0 / MAP_CELLS as f64);
        let s1 = g.input(&uniform);
        let a_only = attention_alignment_loss(&mut g, s1, &[&ta]).unwrap().unwrap();
        let b_only = attention_alignment_loss(&mut g, s1, &[&tb]).unwrap().unwrap();

        let both_stack = Tensor::filled(vec![2, MAP_SIDE, MAP_SIDE], 1.0 / MAP_CELLS as f64);
        let s2 = g.input(&both_stack);
        let both = attention_alignment_loss(&mut g, s2, &[&ta, &tb]).unwrap().unwrap();

        let expected = (g.value(a_only).data()[0] + g.value(b_only).data()[0]) / 2.0;
        assert!((g.value(both).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn no_matches_returns_none() {
        let mut g = Graph::new();
        let s = g.input(&Tensor::zeros(vec![0, MAP_SIDE, MAP_SIDE]));
        assert!(attention_alignment_loss(&mut g, s, &[]).unwrap().is_none());
    }
}
