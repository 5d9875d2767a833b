//! Joint training: next-token loss plus lambda-weighted attention alignment.
//!
//! The loop runs in two phases. During the first `pretrain_epochs` epochs
//! only the aligner (and, in learned-aggregation mode, the parallel
//! projections) receive updates; the host model is frozen and the alignment
//! branch reads detached copies of its activations, so the gradient on every
//! host parameter is exactly zero by construction. The remaining epochs
//! update the active set chosen by `ft_mode`: every parameter (full) or
//! low-rank adapters on the attention projections of the selected layers
//! plus the aligner (lora).
//!
//! With `lambda == 0` the alignment branch is never built, which makes the
//! run bitwise-identical to plain autoregressive fine-tuning under the same
//! seed: parameter initialization, batch order, and gradient arithmetic all
//! draw from independent streams.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::agg::{aggregate, AggMode, ParallelAttn};
use crate::aligner::{attention_alignment_loss, Aligner, AlignerConfig};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use crate::recon::{resize_to_standard_var, row_to_grid_var, Layout};
use crate::rng::{stream, Stream};
use crate::teacher::TeacherMapSet;
use crate::tensor::{Graph, Tensor, Var};
use crate::vlm::{exact_match_accuracy, vlm_nll, AttentionRecord, LayerHidden, SamplePair, ToyVlm, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtMode {
    Full,
    Lora,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    Exact,
    Root,
}

/// Named layer subsets for the alignment-layer ablation axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    All,
    First,
    Mid,
    Last,
    List(Vec<usize>),
}

impl LayerSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(LayerSpec::All),
            "first" => Ok(LayerSpec::First),
            "mid" => Ok(LayerSpec::Mid),
            "last" => Ok(LayerSpec::Last),
            list => {
                let ids: Vec<usize> = list
                    .split(',')
                    .map(|p| p.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad layer id {p:?}"))))
                    .collect::<Result<_>>()?;
                Ok(LayerSpec::List(ids))
            }
        }
    }

    /// Resolve against the model's alignable layers. Named subsets take a
    /// contiguous half (at least one layer).
    pub fn resolve(&self, recordable: &[usize]) -> Vec<usize> {
        let k = (recordable.len() / 2).max(1);
        match self {
            LayerSpec::All => recordable.to_vec(),
            LayerSpec::First => recordable[..k.min(recordable.len())].to_vec(),
            LayerSpec::Mid => {
                let start = (recordable.len().saturating_sub(k)) / 2;
                recordable[start..(start + k).min(recordable.len())].to_vec()
            }
            LayerSpec::Last => recordable[recordable.len().saturating_sub(k)..].to_vec(),
            LayerSpec::List(ids) => ids.clone(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            LayerSpec::All => "all".into(),
            LayerSpec::First => "first".into(),
            LayerSpec::Mid => "mid".into(),
            LayerSpec::Last => "last".into(),
            LayerSpec::List(ids) => ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub pretrain_epochs: usize,
    pub ft_mode: FtMode,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub match_mode: MatchMode,
    pub agg_mode: AggMode,
    pub layers: LayerSpec,
    pub seed: u64,
    pub aligner: AlignerConfig,
    /// Match against greedily decoded tokens instead of teacher-forced labels.
    pub match_predicted: bool,
    /// Evaluate on the held-out set after every epoch (needed for the
    /// calibration curve; costs one decode pass per epoch).
    pub eval_every_epoch: bool,
    /// Record a hash of the host parameters after every step (trajectory
    /// comparisons).
    pub trace_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.5,
            lr: 3e-4,
            epochs: 30,
            batch: 16,
            pretrain_epochs: 10,
            ft_mode: FtMode::Full,
            lora_rank: 4,
            lora_alpha: 8.0,
            match_mode: MatchMode::Exact,
            agg_mode: AggMode::Learned,
            layers: LayerSpec::All,
            seed: 1,
            aligner: AlignerConfig::default(),
            match_predicted: false,
            eval_every_epoch: false,
            trace_params: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs > self.epochs {
            return Err(Error::Config(format!(
                "pretrain_epochs {} exceeds epochs {}",
                self.pretrain_epochs, self.epochs
            )));
        }
        if self.lambda < 0.0 || self.lr <= 0.0 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("lambda >= 0, lr > 0, batch >= 1, epochs >= 1 required".into()));
        }
        Ok(())
    }

    /// Apply one key=value assignment (config files and CLI flags share this).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "pretrain_epochs" => self.pretrain_epochs = value.parse().map_err(|_| bad("pretrain_epochs"))?,
            "ft" => {
                self.ft_mode = match value {
                    "full" => FtMode::Full,
                    "lora" => FtMode::Lora,
                    _ => return Err(bad("ft")),
                }
            }
            "lora_rank" => self.lora_rank = value.parse().map_err(|_| bad("lora_rank"))?,
            "lora_alpha" => self.lora_alpha = value.parse().map_err(|_| bad("lora_alpha"))?,
            "match" => {
                self.match_mode = match value {
                    "exact" => MatchMode::Exact,
                    "root" => MatchMode::Root,
                    _ => return Err(bad("match")),
                }
            }
            "agg" => self.agg_mode = AggMode::parse(value)?,
            "layers" => self.layers = LayerSpec::parse(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "aligner" => self.aligner = AlignerConfig::parse(value)?,
            "match_predicted" => self.match_predicted = value.parse().map_err(|_| bad("match_predicted"))?,
            "eval_every_epoch" => self.eval_every_epoch = value.parse().map_err(|_| bad("eval_every_epoch"))?,
            "trace_params" => self.trace_params = value.parse().map_err(|_| bad("trace_params"))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parse a flat key=value file ('#' starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1)))?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

// ── Word matching ────────────────────────────────────────────────────

/// Heuristic suffix stem: strip the longest of ing/es/ed/s when at least
/// three characters remain, then undouble a trailing consonant pair left by
/// ing/ed ("running" -> "runn" -> "run").
pub fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    for suffix in ["ing", "es", "ed", "s"] {
        if let Some(stripped) = w.strip_suffix(suffix) {
            if stripped.chars().count() >= 3 {
                let mut s = stripped.to_string();
                if matches!(suffix, "ing" | "ed") {
                    let chars: Vec<char> = s.chars().collect();
                    let n = chars.len();
                    if n >= 4 && chars[n - 1] == chars[n - 2] && !"aeiou".contains(chars[n - 1]) {
                        s.pop();
                    }
                }
                return s;
            }
        }
    }
    w
}

/// Pair label positions with teacher-map keys. Exact mode compares
/// case-folded strings; root mode compares stems. Each teacher word is
/// matched at most once; the first occurrence wins.
pub fn match_words(label_words: &[&str], teacher_keys: &[&str], mode: MatchMode) -> Vec<(usize, String)> {
    let mut used = vec![false; teacher_keys.len()];
    let mut out = Vec::new();
    for (pos, label) in label_words.iter().enumerate() {
        let norm_label = match mode {
            MatchMode::Exact => label.to_lowercase(),
            MatchMode::Root => stem(label),
        };
        for (ki, key) in teacher_keys.iter().enumerate() {
            if used[ki] {
                continue;
            }
            let norm_key = match mode {
                MatchMode::Exact => key.to_lowercase(),
                MatchMode::Root => stem(key),
            };
            if norm_label == norm_key {
                used[ki] = true;
                out.push((pos, key.to_string()));
                break;
            }
        }
    }
    out
}

// ── LoRA ─────────────────────────────────────────────────────────────

/// Low-rank additive adapter on one weight matrix: the effective weight is
/// `base + (alpha / rank) * A . B` with B zero-initialized, so the adapted
/// model starts exactly at the base model.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct LoraState {
    pub rank: usize,
    pub alpha: f64,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraState {
    /// Build adapters for the given (target name, [d, d']) weights.
    pub fn new(targets: &[(String, Vec<usize>)], rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::LoraInit);
        let mut adapters = Vec::with_capacity(targets.len());
        for (target, shape) in targets {
            if shape.len() != 2 {
                return Err(Error::Invalid {
                    op: "LoraState::new",
                    detail: format!("target {target:?} is not a matrix: {shape:?}"),
                });
            }
            let max_rank = shape[0].min(shape[1]);
            if rank > max_rank {
                return Err(Error::RankTooLarge { rank, max: max_rank });
            }
            adapters.push(LoraAdapter {
                target: target.clone(),
                a: Tensor::randn(vec![shape[0], rank], 1.0 / (shape[0] as f64).sqrt(), &mut rng),
                b: Tensor::zeros(vec![rank, shape[1]]),
            });
        }
        Ok(LoraState { rank, alpha, adapters })
    }

    pub fn find(&self, target: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Attention projection names adapted for the given layers.
    pub fn attention_targets(model: &ToyVlm, layers: &[usize]) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, t) in model.params.iter() {
            let is_attn = name.contains(".self.") || name.contains(".cross.");
            if !is_attn {
                continue;
            }
            let layer_of = name
                .strip_prefix("layer")
                .and_then(|rest| rest.split('.').next())
                .and_then(|num| num.parse::<usize>().ok());
            if let Some(l) = layer_of {
                if layers.contains(&l) {
                    out.push((name.clone(), t.shape().to_vec()));
                }
            }
        }
        out
    }
}

/// Effective weight under an adapter: base + (alpha / rank) * A . B.
pub fn lora_apply(base: &Tensor, adapter: &LoraAdapter, alpha: f64, rank: usize) -> Result<Tensor> {
    let shape = base.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Invalid { op: "lora_apply", detail: format!("base is not a matrix: {shape:?}") });
    }
    if rank > shape[0].min(shape[1]) {
        return Err(Error::RankTooLarge { rank, max: shape[0].min(shape[1]) });
    }
    let (d, dp) = (shape[0], shape[1]);
    let scale = alpha / rank as f64;
    let mut out = base.clone();
    for i in 0..d {
        for j in 0..dp {
            let mut acc = 0.0;
            for r in 0..rank {
                acc += adapter.a.data()[i * rank + r] * adapter.b.data()[r * dp + j];
            }
            out.data_mut()[i * dp + j] += scale * acc;
        }
    }
    Ok(out)
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam with decoupled weight decay and a linear warmup over the first 5%
/// of scheduled steps, constant afterwards.
#[derive(Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    warmup_steps: usize,
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: (total_steps as f64 * 0.05).ceil() as usize,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advance the step counter and return the warmed-up learning rate.
    pub fn begin_step(&mut self) -> f64 {
        self.t += 1;
        if self.warmup_steps > 0 && self.t <= self.warmup_steps {
            self.lr * self.t as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn update(&mut self, name: &str, weight: &mut Tensor, grad: &Tensor, lr_t: f64) {
        let n = weight.numel();
        let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let w = weight.data_mut();
        let g = grad.data();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            w[i] -= lr_t * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[i]);
        }
    }
}

// ── Logs ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub l_vlm: f64,
    pub l_att: Option<f64>,
    pub l_total: f64,
    pub n_matched: usize,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: &'static str,
    pub mean_l_vlm: f64,
    pub mean_l_att: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    /// FNV-1a over the host parameter bits after each step, when traced.
    pub param_hashes: Vec<u64>,
}

/// Order-stable FNV-1a hash of every parameter's bit pattern.
pub fn hash_params(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for (_, t) in params.iter() {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

impl TrainLog {
    pub fn save_steps_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,l_vlm,l_att,l_total,n_matched\n");
        for e in &self.steps {
            let att = e.l_att.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", e.step, e.l_vlm, att, e.l_total, e.n_matched));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn save_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("epoch,phase,mean_l_vlm,mean_l_att,eval_accuracy\n");
        for e in &self.epochs {
            let acc = e.eval_accuracy.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.phase, e.mean_l_vlm, e.mean_l_att, acc));
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Read back an epochs CSV (the calibration tool's input).
    pub fn load_epochs_csv(path: &Path) -> Result<TrainLog> {
        let text = std::fs::read_to_string(path)?;
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Config(format!("epochs csv line {}: expected 5 fields", i + 1)));
            }
            let phase = match parts[1] {
                "pretrain" => "pretrain",
                "main" => "main",
                other => return Err(Error::Config(format!("unknown phase {other:?}"))),
            };
            log.epochs.push(EpochLog {
                epoch: parts[0].parse().map_err(|_| Error::Config("bad epoch".into()))?,
                phase,
                mean_l_vlm: parts[2].parse().map_err(|_| Error::Config("bad mean_l_vlm".into()))?,
                mean_l_att: parts[3].parse().map_err(|_| Error::Config("bad mean_l_att".into()))?,
                eval_accuracy: if parts[4].is_empty() {
                    None
                } else {
                    Some(parts[4].parse().map_err(|_| Error::Config("bad eval_accuracy".into()))?)
                },
            });
        }
        Ok(log)
    }
}

// ── The pipeline ─────────────────────────────────────────────────────

/// Everything trainable, bundled: host model, aligner, and the optional
/// learned-aggregation and LoRA parameter sets.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub model: ToyVlm,
    pub aligner: Aligner,
    pub parallel: Option<ParallelAttn>,
    pub lora: Option<LoraState>,
    pub layer_subset: Vec<usize>,
}

impl Pipeline {
    pub fn new(model: ToyVlm, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let recordable = model.cfg.recordable_layers();
        let layer_subset = cfg.layers.resolve(&recordable);
        for &l in &layer_subset {
            if !recordable.contains(&l) {
                return Err(Error::LayerNotSelected { layer: l });
            }
        }
        let aligner = Aligner::new(cfg.aligner, cfg.seed)?;
        let parallel = if cfg.agg_mode == AggMode::Learned {
            Some(ParallelAttn::new(&model.cfg, &layer_subset, cfg.seed)?)
        } else {
            None
        };
        let lora = if cfg.ft_mode == FtMode::Lora {
            let targets = LoraState::attention_targets(&model, &layer_subset);
            Some(LoraState::new(&targets, cfg.lora_rank, cfg.lora_alpha, cfg.seed)?)
        } else {
            None
        };
        Ok(Pipeline { model, aligner, parallel, lora, layer_subset })
    }

    /// Host model with any LoRA adapters folded into the weights; what
    /// evaluation and inspection should run.
    pub fn effective_model(&self) -> Result<ToyVlm> {
        let mut model = self.model.clone();
        if let Some(lora) = &self.lora {
            for adapter in &lora.adapters {
                let base = model
                    .params
                    .get(&adapter.target)
                    .ok_or_else(|| Error::Invalid {
                        op: "effective_model",
                        detail: format!("adapter target {:?} missing", adapter.target),
                    })?
                    .clone();
                let eff = lora_apply(&base, adapter, lora.alpha, lora.rank)?;
                model.params.insert(adapter.target.clone(), eff);
            }
        }
        Ok(model)
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> crate::checkpoint::Checkpoint {
        let mut lora_set = ParamSet::new();
        if let Some(lora) = &self.lora {
            for a in &lora.adapters {
                lora_set.insert(format!("lora.{}.a", a.target), a.a.clone());
                lora_set.insert(format!("lora.{}.b", a.target), a.b.clone());
            }
        }
        crate::checkpoint::Checkpoint {
            vlm_cfg: self.model.cfg.clone(),
            aligner_cfg: self.aligner.cfg,
            agg_mode: cfg.agg_mode,
            layer_subset: self.layer_subset.clone(),
            lora_rank: self.lora.as_ref().map(|l| l.rank as u32).unwrap_or(0),
            lora_alpha: self.lora.as_ref().map(|l| l.alpha as f32).unwrap_or(0.0),
            model: self.model.params.clone(),
            aligner: self.aligner.params.clone(),
            parallel: self.parallel.as_ref().map(|p| p.params.clone()).unwrap_or_default(),
            lora: lora_set,
        }
    }

    pub fn from_checkpoint(ckpt: crate::checkpoint::Checkpoint) -> Result<Self> {
        ckpt.vlm_cfg.validate()?;
        let model = ToyVlm { cfg: ckpt.vlm_cfg.clone(), params: ckpt.model };
        let aligner = Aligner { cfg: ckpt.aligner_cfg, params: ckpt.aligner };
        let parallel = if ckpt.parallel.is_empty() {
            None
        } else {
            Some(ParallelAttn {
                layers: ckpt.layer_subset.clone(),
                n_heads: ckpt.vlm_cfg.n_heads,
                head_dim: ckpt.vlm_cfg.head_dim(),
                params: ckpt.parallel,
            })
        };
        let lora = if ckpt.lora.is_empty() {
            None
        } else {
            let mut adapters: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
            for (name, t) in ckpt.lora.iter() {
                let rest = name.strip_prefix("lora.").unwrap_or(name);
                let (target, side) = rest.rsplit_once('.').ok_or_else(|| Error::Invalid {
                    op: "from_checkpoint",
                    detail: format!("bad adapter name {name:?}"),
                })?;
                let entry = adapters.entry(target.to_string()).or_default();
                match side {
                    "a" => entry.0 = Some(t.clone()),
                    "b" => entry.1 = Some(t.clone()),
                    _ => {
                        return Err(Error::Invalid {
                            op: "from_checkpoint",
                            detail: format!("bad adapter side in {name:?}"),
                        })
                    }
                }
            }
            let mut list = Vec::new();
            for (target, (a, b)) in adapters {
                let (a, b) = match (a, b) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(Error::Invalid {
                            op: "from_checkpoint",
                            detail: format!("adapter {target:?} missing a or b"),
                        })
                    }
                };
                list.push(LoraAdapter { target, a, b });
            }
            Some(LoraState { rank: ckpt.lora_rank as usize, alpha: ckpt.lora_alpha as f64, adapters: list })
        };
        Ok(Pipeline {
            model,
            aligner,
            parallel,
            lora,
            layer_subset: ckpt.layer_subset,
        })
    }

    fn resolve_param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (target, side) = rest.rsplit_once('.')?;
            let lora = self.lora.as_mut()?;
            let adapter = lora.adapters.iter_mut().find(|a| a.target == target)?;
            return Some(match side {
                "a" => &mut adapter.a,
                "b" => &mut adapter.b,
                _ => return None,
            });
        }
        if name.starts_with("aligner.") {
            return self.aligner.params.get_mut(name);
        }
        if name.starts_with("parallel.") {
            return self.parallel.as_mut()?.params.get_mut(name);
        }
        self.model.params.get_mut(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Main,
}

/// Deterministic shuffled batches for one epoch.
pub fn epoch_batches(n_samples: usize, batch: usize, epoch: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n_samples).collect();
    let derived = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
    let mut rng = stream(derived, Stream::Batches);
    idx.shuffle(&mut rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Train the pipeline on (sample, teacher-map) pairs. Returns the log;
/// the pipeline's parameters are updated in place.
pub fn train(
    pipe: &mut Pipeline,
    data: &[(SamplePair, TeacherMapSet)],
    eval_set: Option<&[SamplePair]>,
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid { op: "train", detail: "empty dataset".into() });
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.lr, total_steps);
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let phase = if epoch < cfg.pretrain_epochs { Phase::Pretrain } else { Phase::Main };
        let mut sum_vlm = 0.0;
        let mut sum_att = 0.0;
        let mut att_steps = 0usize;
        for batch_idx in epoch_batches(data.len(), cfg.batch, epoch, cfg.seed) {
            let batch: Vec<&(SamplePair, TeacherMapSet)> = batch_idx.iter().map(|&i| &data[i]).collect();
            let entry = train_step(pipe, &batch, vocab, cfg, phase, &mut opt, step)?;
            sum_vlm += entry.l_vlm;
            if let Some(a) = entry.l_att {
                sum_att += a;
                att_steps += 1;
            }
            log.steps.push(entry);
            if cfg.trace_params {
                log.param_hashes.push(hash_params(&pipe.model.params));
            }
            step += 1;
        }
        let eval_accuracy = match eval_set {
            Some(set) if cfg.eval_every_epoch || epoch + 1 == cfg.epochs => {
                Some(exact_match_accuracy(&pipe.effective_model()?, set)?)
            }
            _ => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            phase: match phase {
                Phase::Pretrain => "pretrain",
                Phase::Main => "main",
            },
            mean_l_vlm: sum_vlm / steps_per_epoch as f64,
            mean_l_att: if att_steps > 0 { sum_att / att_steps as f64 } else { 0.0 },
            eval_accuracy,
        });
    }
    Ok(log)
}

/// One optimizer step over a batch. Separated from [`train`] so tests can
/// drive single steps and inspect gradients.
pub fn train_step(
    pipe: &mut Pipeline,
    batch: &[&(SamplePair, TeacherMapSet)],
    vocab: &Vocab,
    cfg: &TrainConfig,
    phase: Phase,
    opt: &mut AdamW,
    step: usize,
) -> Result<StepLog> {
    let mut g = Graph::new();
    let align_active = match phase {
        Phase::Pretrain => true,
        Phase::Main => cfg.lambda > 0.0,
    };

    // Bind the parameter sets according to phase and fine-tuning mode.
    let mut bound = match (phase, cfg.ft_mode) {
        (Phase::Pretrain, _) => pipe.model.bind(&mut g, false),
        (Phase::Main, FtMode::Full) => pipe.model.bind(&mut g, true),
        (Phase::Main, FtMode::Lora) => bind_with_lora(&mut g, &pipe.model.params, pipe.lora.as_ref()),
    };
    if align_active {
        bound.extend(pipe.aligner.bind(&mut g, true));
        if let Some(pa) = &pipe.parallel {
            bound.extend(pa.bind(&mut g, true));
        }
    }

    // Accumulate losses over the batch in one graph.
    let mut nll_terms = Vec::with_capacity(batch.len());
    let mut word_maps: Vec<Var> = Vec::new();
    let mut word_teachers: Vec<&crate::teacher::SaliencyMap> = Vec::new();
    let mut n_matched = 0usize;

    for (sample, teachers) in batch {
        let fp = pipe.model.forward(&mut g, &bound, sample)?;
        let label_logits = fp.label_logits(&mut g)?;
        nll_terms.push(vlm_nll(&mut g, label_logits, &sample.label)?);

        if !align_active {
            continue;
        }
        let match_source: Vec<String> = if cfg.match_predicted {
            pipe.model
                .greedy_decode(&sample.image, &sample.question, sample.label.len())?
                .iter()
                .map(|&t| vocab.word(t).to_string())
                .collect()
        } else {
            sample.label.iter().map(|&t| vocab.word(t).to_string()).collect()
        };
        let words: Vec<&str> = match_source.iter().map(|s| s.as_str()).collect();
        let keys: Vec<&str> = teachers.words().collect();
        let matches = match_words(&words, &keys, cfg.match_mode);
        if matches.is_empty() {
            continue;
        }

        // During pretraining the alignment branch reads detached activations,
        // so no gradient can reach the host parameters.
        let (record, hidden) = if phase == Phase::Pretrain {
            detach_alignment_inputs(&mut g, &fp.record, &fp.hidden)
        } else {
            (fp.record.clone(), fp.hidden.clone())
        };

        let parallel_bound = pipe.parallel.as_ref().map(|pa| (pa, &bound));
        let agg_map = aggregate(
            &mut g,
            cfg.agg_mode,
            &record,
            &hidden,
            parallel_bound,
            &pipe.layer_subset,
        )?;

        let layout = Layout::Simple {
            rows: pipe.model.cfg.patch_rows,
            cols: pipe.model.cfg.patch_cols,
        };
        for (pos, word) in &matches {
            let row_idx = sample.question.len() + pos;
            let row = g.gather_rows(agg_map, &[row_idx])?;
            let grid = row_to_grid_var(&mut g, row, &layout)?;
            let std_map = resize_to_standard_var(&mut g, grid)?;
            word_maps.push(std_map);
            word_teachers.push(teachers.get(word).expect("matched word has a teacher map"));
        }
        n_matched += matches.len();
    }

    // L_vlm: mean over batch of per-sample label NLL.
    let nll_sum = {
        let mut acc = nll_terms[0];
        for &t in &nll_terms[1..] {
            acc = g.add(acc, t)?;
        }
        acc
    };
    let l_vlm = g.scale(nll_sum, 1.0 / batch.len() as f64)?;

    // L_att: mean over matched words across the batch.
    let l_att = if word_maps.is_empty() {
        None
    } else {
        let stack = g.stack(&word_maps)?;
        let aligner_bound = &bound;
        let refined = pipe.aligner.forward(&mut g, aligner_bound, stack)?;
        attention_alignment_loss(&mut g, refined, &word_teachers)?
    };

    let (root, l_vlm_val, l_att_val) = match phase {
        Phase::Pretrain => match l_att {
            Some(a) => (Some(a), g.value(l_vlm).data()[0], Some(g.value(a).data()[0])),
            None => (None, g.value(l_vlm).data()[0], None),
        },
        Phase::Main => match l_att {
            Some(a) if cfg.lambda > 0.0 => {
                let scaled = g.scale(a, cfg.lambda)?;
                let total = g.add(l_vlm, scaled)?;
                (Some(total), g.value(l_vlm).data()[0], Some(g.value(a).data()[0]))
            }
            _ => (Some(l_vlm), g.value(l_vlm).data()[0], l_att.map(|a| g.value(a).data()[0])),
        },
    };

    let l_total_val = l_vlm_val + cfg.lambda * l_att_val.unwrap_or(0.0);
    if !l_total_val.is_finite() {
        return Err(Error::NonFiniteLoss { step, l_vlm: l_vlm_val, l_att: l_att_val.unwrap_or(0.0) });
    }

    if let Some(root) = root {
        g.backward(root)?;
        let lr_t = opt.begin_step();
        let trainable: Vec<(String, Var)> = bound.trainable().to_vec();
        for (name, var) in trainable {
            let grad = g.grad_or_zero(var);
            if let Some(w) = pipe.resolve_param_mut(&name) {
                opt.update(&name, w, &grad, lr_t);
            }
        }
    }

    Ok(StepLog {
        step,
        l_vlm: l_vlm_val,
        l_att: l_att_val,
        l_total: l_total_val,
        n_matched,
    })
}

/// Detached copies of the record and hidden states: same values, no
/// gradient path back into the host model.
fn detach_alignment_inputs(
    g: &mut Graph,
    record: &AttentionRecord,
    hidden: &[LayerHidden],
) -> (AttentionRecord, Vec<LayerHidden>) {
    let mut rec = record.clone();
    for layer in &mut rec.layers {
        for h in &mut layer.heads {
            *h = g.detach(*h);
        }
    }
    let hid = hidden
        .iter()
        .map(|lh| LayerHidden { layer: lh.layer, text: g.detach(lh.text), patch: g.detach(lh.patch) })
        .collect();
    (rec, hid)
}

/// Bind host parameters with LoRA adapters on the adapted weights: bases
/// stay frozen, the A/B factors are the trainable leaves.
fn bind_with_lora(g: &mut Graph, params: &ParamSet, lora: Option<&LoraState>) -> BoundParams {
    let mut bound = BoundParams::empty();
    let Some(lora) = lora else {
        return BoundParams::bind(g, params, false);
    };
    for (name, t) in params.iter() {
        match lora.find(name) {
            None => {
                let v = g.input(t);
                bound.insert(name.clone(), v, false);
            }
            Some(adapter) => {
                let base = g.input(t);
                let a = g.param(&adapter.a);
                let b = g.param(&adapter.b);
                bound.insert(format!("lora.{name}.a"), a, true);
                bound.insert(format!("lora.{name}.b"), b, true);
                let ab = g.matmul(a, b).expect("adapter shapes conform");
                let scaled = g.scale(ab, lora.alpha / lora.rank as f64).expect("scale");
                let eff = g.add(base, scaled).expect("adapter add");
                bound.insert(name.clone(), eff, false);
            }
        }
    }
    bound
}

/// Per-sample saliency maps for the first label word, with or without the
/// aligner applied. The raw variant measures what the host attends to; the
/// aligned variant is what the alignment loss actually compares.
pub fn student_label_maps(
    pipe: &Pipeline,
    samples: &[SamplePair],
    vocab: &Vocab,
    agg_mode: AggMode,
    aligned: bool,
) -> Result<Vec<crate::teacher::SaliencyMap>> {
    use crate::teacher::{SaliencyMap, MAP_SIDE};
    let model = pipe.effective_model()?;
    let layout = Layout::Simple { rows: model.cfg.patch_rows, cols: model.cfg.patch_cols };
    let mut out = Vec::with_capacity(samples.len());
    let mut g = Graph::new();
    let mut bound = model.bind(&mut g, false);
    if let Some(pa) = &pipe.parallel {
        bound.extend(pa.bind(&mut g, false));
    }
    bound.extend(pipe.aligner.bind(&mut g, false));
    for s in samples {
        let fp = model.forward(&mut g, &bound, s)?;
        let agg_map = aggregate(
            &mut g,
            agg_mode,
            &fp.record,
            &fp.hidden,
            pipe.parallel.as_ref().map(|pa| (pa, &bound)),
            &pipe.layer_subset,
        )?;
        let word = vocab.word(s.label[0]).to_string();
        let row = g.gather_rows(agg_map, &[s.question.len()])?;
        let grid = row_to_grid_var(&mut g, row, &layout)?;
        let std_map = resize_to_standard_var(&mut g, grid)?;
        let final_map = if aligned {
            let stack = g.stack(&[std_map])?;
            let refined = pipe.aligner.forward(&mut g, &bound, stack)?;
            g.reshape(refined, vec![MAP_SIDE, MAP_SIDE])?
        } else {
            std_map
        };
        out.push(SaliencyMap::from_f64(&word, g.value(final_map).data())?);
    }
    Ok(out)
}

/// Plain autoregressive fine-tuning: the same loop with the alignment
/// branch absent by construction. The bitwise reference for lambda = 0.
/// Returns a per-step hash of the parameter bits.
pub fn train_autoregressive(
    model: &mut ToyVlm,
    data: &[SamplePair],
    cfg: &TrainConfig,
) -> Result<Vec<u64>> {
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.lr, total_steps);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        for batch_idx in epoch_batches(data.len(), cfg.batch, epoch, cfg.seed) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let mut terms = Vec::with_capacity(batch_idx.len());
            for &i in &batch_idx {
                let s = &data[i];
                let fp = model.forward(&mut g, &bound, s)?;
                let logits = fp.label_logits(&mut g)?;
                terms.push(vlm_nll(&mut g, logits, &s.label)?);
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            let loss = g.scale(acc, 1.0 / batch_idx.len() as f64)?;
            g.backward(loss)?;
            let lr_t = opt.begin_step();
            let trainable: Vec<(String, Var)> = bound.trainable().to_vec();
            for (name, var) in trainable {
                let grad = g.grad_or_zero(var);
                if let Some(w) = model.params.get_mut(&name) {
                    opt.update(&name, w, &grad, lr_t);
                }
            }
            trace.push(hash_params(&model.params));
        }
    }
    Ok(trace)
}
