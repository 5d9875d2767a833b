//! Collapsing recorded attention over heads and layers into per-word maps.
//!
//! Three families:
//!   * simple pooling — mean/max over heads, then mean/max over layers;
//!   * attention flow — a layer-recursive elementwise fold (multiply or add)
//!     with an optional per-token ramp `r_t = t / n_text` that counteracts
//!     the early-token mass dominance a causal mask induces;
//!   * learned — auxiliary query/key projections trained purely by the
//!     alignment objective, computed alongside the frozen host projections.
//!
//! Every public aggregation output is row-renormalized so downstream losses
//! compare distributions with distributions.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::recon::{extract_text_to_patch, TokenIndexMap};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Tensor, Var};
use crate::vlm::{AttentionRecord, LayerHidden, Variant, VlmConfig};

/// Reduction used along one axis of the simple family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Mean,
    Max,
}

/// Layer-fold operator of the flow family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Multiply,
    Add,
}

/// Aggregation strategy. `Simple` names the (layer, head) reductions in that
/// order: `mean-max` reduces heads by max, then layers by mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    Simple { layer_op: Reduce, head_op: Reduce },
    Flow { combine: Combine, regularize: bool },
    Learned,
}

impl AggMode {
    pub fn parse(s: &str) -> Result<Self> {
        let mode = match s {
            "mean-mean" => AggMode::Simple { layer_op: Reduce::Mean, head_op: Reduce::Mean },
            "mean-max" => AggMode::Simple { layer_op: Reduce::Mean, head_op: Reduce::Max },
            "max-mean" => AggMode::Simple { layer_op: Reduce::Max, head_op: Reduce::Mean },
            "max-max" => AggMode::Simple { layer_op: Reduce::Max, head_op: Reduce::Max },
            "flow-mul" => AggMode::Flow { combine: Combine::Multiply, regularize: true },
            "flow-add" => AggMode::Flow { combine: Combine::Add, regularize: true },
            "learn" => AggMode::Learned,
            other => return Err(Error::Config(format!("unknown aggregation mode {other:?}"))),
        };
        Ok(mode)
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggMode::Simple { layer_op: Reduce::Mean, head_op: Reduce::Mean } => "mean-mean",
            AggMode::Simple { layer_op: Reduce::Mean, head_op: Reduce::Max } => "mean-max",
            AggMode::Simple { layer_op: Reduce::Max, head_op: Reduce::Mean } => "max-mean",
            AggMode::Simple { layer_op: Reduce::Max, head_op: Reduce::Max } => "max-max",
            AggMode::Flow { combine: Combine::Multiply, .. } => "flow-mul",
            AggMode::Flow { combine: Combine::Add, .. } => "flow-add",
            AggMode::Learned => "learn",
        }
    }
}

/// Per-layer, per-head [n_text, n_patch] maps ready for aggregation.
/// For cross records these are the recorded weights as-is; for self records
/// the text-to-patch block is extracted (and row-renormalized) first.
pub fn record_to_maps(g: &mut Graph, record: &AttentionRecord) -> Result<Vec<Vec<Var>>> {
    if record.layers.is_empty() {
        return Err(Error::EmptyRecord);
    }
    match record.variant {
        Variant::Cross => Ok(record.layers.iter().map(|l| l.heads.clone()).collect()),
        Variant::SelfOnly => {
            let idx = TokenIndexMap::patches_then_text(record.n_patch, record.n_text);
            let mut out = Vec::with_capacity(record.layers.len());
            for layer in &record.layers {
                let mut heads = Vec::with_capacity(layer.heads.len());
                for &h in &layer.heads {
                    heads.push(extract_text_to_patch(g, h, &idx, true)?);
                }
                out.push(heads);
            }
            Ok(out)
        }
    }
}

fn reduce(g: &mut Graph, parts: &[Var], op: Reduce) -> Result<Var> {
    match op {
        Reduce::Mean => g.mean_of(parts),
        Reduce::Max => g.max_of(parts),
    }
}

/// Pool heads then layers with the configured reductions; rows renormalized.
pub fn aggregate_simple(g: &mut Graph, maps: &[Vec<Var>], layer_op: Reduce, head_op: Reduce) -> Result<Var> {
    if maps.is_empty() || maps.iter().any(|h| h.is_empty()) {
        return Err(Error::EmptyRecord);
    }
    let mut per_layer = Vec::with_capacity(maps.len());
    for heads in maps {
        per_layer.push(reduce(g, heads, head_op)?);
    }
    let pooled = reduce(g, &per_layer, layer_op)?;
    g.normalize_rows(pooled)
}

/// The raw flow fold: head-mean each layer, then combine layer maps
/// elementwise from the first layer upward. No normalization — row masses
/// carry the collapse signature this fold is known for.
pub fn flow_fold(g: &mut Graph, maps: &[Vec<Var>], combine: Combine) -> Result<Var> {
    if maps.is_empty() || maps.iter().any(|h| h.is_empty()) {
        return Err(Error::EmptyRecord);
    }
    let mut acc = g.mean_of(&maps[0])?;
    for heads in &maps[1..] {
        let layer_map = g.mean_of(heads)?;
        acc = match combine {
            Combine::Multiply => g.mul(acc, layer_map)?,
            Combine::Add => g.add(acc, layer_map)?,
        };
    }
    Ok(acc)
}

/// Attention flow over the layer stack. With `regularize`, pre-normalization
/// row `t` is scaled by `r_t = t / n_text` (1-indexed) so early tokens do
/// not dominate the folded map. Rows are renormalized at the end.
pub fn attention_flow(g: &mut Graph, maps: &[Vec<Var>], combine: Combine, regularize: bool) -> Result<Var> {
    let folded = flow_fold(g, maps, combine)?;
    let folded = if regularize {
        let n_text = g.value(folded).shape()[0];
        let factors: Vec<f64> = (1..=n_text).map(|t| t as f64 / n_text as f64).collect();
        g.scale_rows(folded, &factors)?
    } else {
        folded
    };
    g.normalize_rows(folded)
}

/// Auxiliary per-layer, per-head query/key projections for the learned
/// aggregation family. Shapes mirror the host's attention projections.
#[derive(Debug, Clone)]
pub struct ParallelAttn {
    pub layers: Vec<usize>,
    pub n_heads: usize,
    pub head_dim: usize,
    pub params: ParamSet,
}

impl ParallelAttn {
    /// Fresh projections for the selected layers, matching the host config.
    pub fn new(cfg: &VlmConfig, layers: &[usize], seed: u64) -> Result<Self> {
        for &l in layers {
            if l >= cfg.n_layers {
                return Err(Error::LayerNotSelected { layer: l });
            }
        }
        let mut rng = stream(seed, Stream::ParallelInit);
        let mut params = ParamSet::new();
        init_parallel_params(&mut params, cfg, layers, &mut rng);
        Ok(ParallelAttn {
            layers: layers.to_vec(),
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
            params,
        })
    }

    /// Copy the host's attention projections into the parallel slots
    /// (the weight-copy oracle: outputs must then match the host record).
    pub fn copy_from_host(&mut self, host: &ParamSet, variant: Variant) -> Result<()> {
        for &l in &self.layers.clone() {
            let src = match variant {
                Variant::Cross => format!("layer{l}.cross"),
                Variant::SelfOnly => format!("layer{l}.self"),
            };
            for hd in 0..self.n_heads {
                for side in ["q", "k"] {
                    let host_name = format!("{src}.{side}.h{hd}");
                    let host_t = host
                        .get(&host_name)
                        .ok_or_else(|| Error::Invalid {
                            op: "copy_from_host",
                            detail: format!("host has no {host_name:?}"),
                        })?
                        .clone();
                    self.params.insert(parallel_name(l, side, hd), host_t);
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams::bind(g, &self.params, trainable)
    }

    /// Compute the parallel attention A_d for one selected layer:
    /// softmax(qd kdᵀ / sqrt(d_k)) per head over patches. Gradients reach
    /// only the parallel projections and whatever feeds the hidden states;
    /// the host's own projections take no part.
    pub fn layer_maps(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        hidden: &LayerHidden,
        idx: Option<&TokenIndexMap>,
    ) -> Result<Vec<Var>> {
        if !self.layers.contains(&hidden.layer) {
            return Err(Error::LayerNotSelected { layer: hidden.layer });
        }
        let (h_text, h_patch) = match idx {
            None => (hidden.text, hidden.patch),
            Some(map) => {
                let t = g.gather_rows(hidden.text, &map.text)?;
                let p = g.gather_rows(hidden.patch, &map.patch)?;
                (t, p)
            }
        };
        let mut maps = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            let wq = bound.var(&parallel_name(hidden.layer, "q", hd))?;
            let wk = bound.var(&parallel_name(hidden.layer, "k", hd))?;
            let qd = g.matmul(h_text, wq)?;
            let kd = g.matmul(h_patch, wk)?;
            let kt = g.transpose(kd)?;
            let scores = g.matmul(qd, kt)?;
            let scaled = g.scale(scores, 1.0 / (self.head_dim as f64).sqrt())?;
            maps.push(g.softmax(scaled, None)?);
        }
        Ok(maps)
    }

    /// A_d per selected layer (head-mean), mean-folded across layers and
    /// row-renormalized: the learned family's aggregated map.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        hidden: &[LayerHidden],
        idx: Option<&TokenIndexMap>,
    ) -> Result<Var> {
        let mut per_layer = Vec::new();
        for h in hidden {
            if !self.layers.contains(&h.layer) {
                continue;
            }
            let heads = self.layer_maps(g, bound, h, idx)?;
            per_layer.push(g.mean_of(&heads)?);
        }
        if per_layer.is_empty() {
            return Err(Error::EmptyRecord);
        }
        let folded = g.mean_of(&per_layer)?;
        g.normalize_rows(folded)
    }
}

pub fn parallel_name(layer: usize, side: &str, head: usize) -> String {
    format!("parallel.l{layer}.{side}.h{head}")
}

fn init_parallel_params(params: &mut ParamSet, cfg: &VlmConfig, layers: &[usize], rng: &mut ChaCha12Rng) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let std = 1.0 / (d as f64).sqrt();
    for &l in layers {
        for hd in 0..cfg.n_heads {
            params.insert(parallel_name(l, "q", hd), Tensor::randn(vec![d, dh], std, rng));
            params.insert(parallel_name(l, "k", hd), Tensor::randn(vec![d, dh], std, rng));
        }
    }
}

/// Dispatch over the three families. `parallel` is required for `Learned`.
#[allow(clippy::too_many_arguments)]
pub fn aggregate(
    g: &mut Graph,
    mode: AggMode,
    record: &AttentionRecord,
    hidden: &[LayerHidden],
    parallel: Option<(&ParallelAttn, &BoundParams)>,
    layer_subset: &[usize],
) -> Result<Var> {
    match mode {
        AggMode::Simple { layer_op, head_op } => {
            let maps = subset_maps(g, record, layer_subset)?;
            aggregate_simple(g, &maps, layer_op, head_op)
        }
        AggMode::Flow { combine, regularize } => {
            let maps = subset_maps(g, record, layer_subset)?;
            attention_flow(g, &maps, combine, regularize)
        }
        AggMode::Learned => {
            let (pa, bound) = parallel.ok_or(Error::Invalid {
                op: "aggregate",
                detail: "learned mode needs parallel attention params".into(),
            })?;
            let idx = match record.variant {
                Variant::Cross => None,
                Variant::SelfOnly => Some(TokenIndexMap::patches_then_text(record.n_patch, record.n_text)),
            };
            pa.aggregate(g, bound, hidden, idx.as_ref())
        }
    }
}

/// Recorded maps restricted to the chosen layers (all when the subset is
/// empty or the record holds no matching layer ids).
fn subset_maps(g: &mut Graph, record: &AttentionRecord, layer_subset: &[usize]) -> Result<Vec<Vec<Var>>> {
    let maps = record_to_maps(g, record)?;
    if layer_subset.is_empty() {
        return Ok(maps);
    }
    let filtered: Vec<Vec<Var>> = record
        .layers
        .iter()
        .zip(maps)
        .filter(|(l, _)| layer_subset.contains(&l.layer))
        .map(|(_, m)| m)
        .collect();
    if filtered.is_empty() {
        return Err(Error::EmptyRecord);
    }
    Ok(filtered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn random_stochastic(g: &mut Graph, t: usize, p: usize, rng: &mut ChaCha12Rng) -> Var {
        let logits = Tensor::randn(vec![t, p], 1.0, rng);
        let x = g.input(&logits);
        g.softmax(x, None).unwrap()
    }

    #[test]
    fn single_map_all_modes_are_identity() {
        let mut rng = stream(5, Stream::Other(30));
        let mut g = Graph::new();
        let m = random_stochastic(&mut g, 3, 4, &mut rng);
        let maps = vec![vec![m]];
        for (layer_op, head_op) in [
            (Reduce::Mean, Reduce::Mean),
            (Reduce::Mean, Reduce::Max),
            (Reduce::Max, Reduce::Mean),
            (Reduce::Max, Reduce::Max),
        ] {
            let out = aggregate_simple(&mut g, &maps, layer_op, head_op).unwrap();
            for (a, b) in g.value(out).data().iter().zip(g.value(m).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_maps_make_all_modes_agree() {
        let mut rng = stream(6, Stream::Other(31));
        let mut g = Graph::new();
        let m = random_stochastic(&mut g, 2, 5, &mut rng);
        let maps = vec![vec![m, m], vec![m, m]];
        let mut outputs = Vec::new();
        for (layer_op, head_op) in [
            (Reduce::Mean, Reduce::Mean),
            (Reduce::Mean, Reduce::Max),
            (Reduce::Max, Reduce::Mean),
            (Reduce::Max, Reduce::Max),
        ] {
            let out = aggregate_simple(&mut g, &maps, layer_op, head_op).unwrap();
            outputs.push(g.value(out).data().to_vec());
        }
        for o in &outputs[1..] {
            for (a, b) in o.iter().zip(&outputs[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mean_mean_matches_brute_force() {
        let mut rng = stream(7, Stream::Other(32));
        let mut g = Graph::new();
        let maps: Vec<Vec<Var>> = (0..2)
            .map(|_| (0..2).map(|_| random_stochastic(&mut g, 3, 4, &mut rng)).collect())
            .collect();
        let out = aggregate_simple(&mut g, &maps, Reduce::Mean, Reduce::Mean).unwrap();

        // Brute force: plain average of the four matrices, renormalized.
        let mut acc = vec![0.0; 12];
        for heads in &maps {
            for &m in heads {
                for (a, v) in acc.iter_mut().zip(g.value(m).data()) {
                    *a += v / 4.0;
                }
            }
        }
        for row in acc.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        for (a, b) in g.value(out).data().iter().zip(&acc) {
            assert!((a - b).abs() < 1e-9, "mean-mean vs brute force: {a} vs {b}");
        }
    }

    #[test]
    fn head_then_layer_order_is_observable() {
        // A crafted 2-layer, 2-head record where max-mean and mean-max differ.
        let mut g = Graph::new();
        let mk = |g: &mut Graph, vals: Vec<f64>| {
            let t = Tensor::from_vec(vec![1, 2], vals).unwrap();
            g.input(&t)
        };
        let maps = vec![
            vec![mk(&mut g, vec![0.9, 0.1]), mk(&mut g, vec![0.1, 0.9])],
            vec![mk(&mut g, vec![0.7, 0.3]), mk(&mut g, vec![0.6, 0.4])],
        ];
        let a = aggregate_simple(&mut g, &maps, Reduce::Max, Reduce::Mean).unwrap();
        let b = aggregate_simple(&mut g, &maps, Reduce::Mean, Reduce::Max).unwrap();
        let av = g.value(a).data().to_vec();
        let bv = g.value(b).data().to_vec();
        assert!(
            av.iter().zip(&bv).any(|(x, y)| (x - y).abs() > 1e-9),
            "expected max-mean != mean-max, got {av:?} vs {bv:?}"
        );
    }

    #[test]
    fn uniform_maps_are_a_flow_fixed_point() {
        let mut g = Graph::new();
        let u = g.input(&Tensor::filled(vec![2, 4], 0.25));
        let maps = vec![vec![u], vec![u], vec![u]];
        for combine in [Combine::Multiply, Combine::Add] {
            let out = attention_flow(&mut g, &maps, combine, false).unwrap();
            for v in g.value(out).data() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn additive_flow_matches_direct_sum() {
        let mut rng = stream(8, Stream::Other(33));
        let mut g = Graph::new();
        let a = random_stochastic(&mut g, 2, 3, &mut rng);
        let b = random_stochastic(&mut g, 2, 3, &mut rng);
        let out = attention_flow(&mut g, &[vec![a], vec![b]], Combine::Add, false).unwrap();
        let av = g.value(a).data().to_vec();
        let bv = g.value(b).data().to_vec();
        for r in 0..2 {
            let mut row: Vec<f64> = (0..3).map(|c| av[r * 3 + c] + bv[r * 3 + c]).collect();
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
            for (c, expect) in row.iter().enumerate() {
                assert!((g.value(out).at2(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn regularization_scales_rows_before_normalization() {
        let mut rng = stream(9, Stream::Other(34));
        let mut g = Graph::new();
        let maps = vec![
            vec![random_stochastic(&mut g, 3, 4, &mut rng)],
            vec![random_stochastic(&mut g, 3, 4, &mut rng)],
        ];
        let plain = flow_fold(&mut g, &maps, Combine::Multiply).unwrap();
        let n_text = 3;
        let factors: Vec<f64> = (1..=n_text).map(|t| t as f64 / n_text as f64).collect();
        let scaled = g.scale_rows(plain, &factors).unwrap();
        // Pre-normalization rows are exactly (t / n_text) * unregularized rows.
        for t in 0..n_text {
            for c in 0..4 {
                let expect = g.value(plain).at2(t, c) * factors[t];
                assert_eq!(g.value(scaled).at2(t, c), expect);
            }
        }
    }

    #[test]
    fn single_layer_flow_returns_that_layer() {
        let mut rng = stream(10, Stream::Other(35));
        let mut g = Graph::new();
        let m = random_stochastic(&mut g, 2, 4, &mut rng);
        for combine in [Combine::Multiply, Combine::Add] {
            let out = attention_flow(&mut g, &[vec![m]], combine, false).unwrap();
            for (a, b) in g.value(out).data().iter().zip(g.value(m).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_parallel_queries_give_uniform_maps() {
        use crate::vlm::{ToyVlm, VlmConfig};
        let cfg = VlmConfig {
            variant: Variant::Cross,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            cross_layers: vec![0],
            vocab_size: 4,
            patch_rows: 2,
            patch_cols: 2,
            max_text_len: 4,
            d_patch_in: 2,
        };
        let model = ToyVlm::new(cfg.clone(), 1).unwrap();
        let mut pa = ParallelAttn::new(&cfg, &[0], 2).unwrap();
        for hd in 0..cfg.n_heads {
            *pa.params.get_mut(&parallel_name(0, "q", hd)).unwrap() = Tensor::zeros(vec![8, 4]);
        }
        let sample = crate::vlm::SamplePair {
            sample_id: "x".into(),
            image: Tensor::filled(vec![4, 2], 0.3),
            question: vec![0, 1],
            label: vec![2],
            cell_colors: vec![0; 4],
            queried_cell: 0,
        };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &sample).unwrap();
        let pb = pa.bind(&mut g, false);
        let maps = pa.layer_maps(&mut g, &pb, &fp.hidden[0], None).unwrap();
        for m in maps {
            for v in g.value(m).data() {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_outside_selection_is_rejected() {
        use crate::vlm::{ToyVlm, VlmConfig};
        let cfg = VlmConfig {
            variant: Variant::Cross,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            cross_layers: vec![0, 1],
            vocab_size: 4,
            patch_rows: 2,
            patch_cols: 2,
            max_text_len: 4,
            d_patch_in: 2,
        };
        let model = ToyVlm::new(cfg.clone(), 1).unwrap();
        let pa = ParallelAttn::new(&cfg, &[1], 2).unwrap();
        let sample = crate::vlm::SamplePair {
            sample_id: "x".into(),
            image: Tensor::filled(vec![4, 2], 0.3),
            question: vec![0, 1],
            label: vec![2],
            cell_colors: vec![0; 4],
            queried_cell: 0,
        };
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let fp = model.forward(&mut g, &bound, &sample).unwrap();
        let pb = pa.bind(&mut g, false);
        // hidden[0] belongs to layer 0, which is not in the selected set {1}.
        match pa.layer_maps(&mut g, &pb, &fp.hidden[0], None) {
            Err(Error::LayerNotSelected { layer: 0 }) => {}
            other => panic!("expected LayerNotSelected, got {:?}", other.map(|_| ())),
        }
    }
}
