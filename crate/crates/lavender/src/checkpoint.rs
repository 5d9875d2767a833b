//! Model checkpoint files.
//!
//! Layout: magic "LAVM", version u32, a config block (host model, aligner,
//! aggregation metadata), then named parameter blocks — name length u32,
//! UTF-8 name, shape rank u32, dims u32 x rank, 32-bit little-endian floats.
//! Parameter names carry their owner as a prefix ("aligner.", "parallel.",
//! "lora."; everything else belongs to the host model). Save -> load -> save
//! reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use crate::agg::{AggMode, Combine, Reduce};
use crate::aligner::{AlignerConfig, AlignerDepth, AlignerKind, AlignerNorm};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::teacher::Cursor;
use crate::tensor::Tensor;
use crate::vlm::{Variant, VlmConfig};

const LAVM_MAGIC: [u8; 4] = *b"LAVM";
const LAVM_VERSION: u32 = 1;

/// Everything needed to rebuild a trained pipeline.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub vlm_cfg: VlmConfig,
    pub aligner_cfg: AlignerConfig,
    pub agg_mode: AggMode,
    pub layer_subset: Vec<usize>,
    pub lora_rank: u32,
    pub lora_alpha: f32,
    pub model: ParamSet,
    pub aligner: ParamSet,
    pub parallel: ParamSet,
    pub lora: ParamSet,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&LAVM_MAGIC);
        buf.extend_from_slice(&LAVM_VERSION.to_le_bytes());

        // Host config.
        let c = &self.vlm_cfg;
        buf.push(match c.variant {
            Variant::Cross => 0,
            Variant::SelfOnly => 1,
        });
        for v in [c.d_model, c.n_heads, c.n_layers] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(c.cross_layers.len() as u32).to_le_bytes());
        for &l in &c.cross_layers {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for v in [c.vocab_size, c.patch_rows, c.patch_cols, c.max_text_len, c.d_patch_in] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }

        // Aligner config.
        let a = &self.aligner_cfg;
        buf.push(a.depth.blocks() as u8);
        buf.push(match a.kind {
            AlignerKind::Conv => 0,
            AlignerKind::Mlp => 1,
        });
        buf.push(match a.norm {
            AlignerNorm::Instance => 0,
            AlignerNorm::Batch => 1,
            AlignerNorm::None => 2,
        });
        buf.extend_from_slice(&(a.expansion as u32).to_le_bytes());

        // Aggregation metadata.
        let (k, x, y) = encode_agg(self.agg_mode);
        buf.push(k);
        buf.push(x);
        buf.push(y);
        buf.extend_from_slice(&(self.layer_subset.len() as u32).to_le_bytes());
        for &l in &self.layer_subset {
            buf.extend_from_slice(&(l as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.lora_rank.to_le_bytes());
        buf.extend_from_slice(&self.lora_alpha.to_le_bytes());

        // Parameter blocks, sorted by name across all owners.
        let mut blocks: Vec<(&String, &Tensor)> = self
            .model
            .iter()
            .chain(self.aligner.iter())
            .chain(self.parallel.iter())
            .chain(self.lora.iter())
            .collect();
        blocks.sort_by(|a, b| a.0.cmp(b.0));
        buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }

        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };

        let magic = cur.take::<4>("magic")?;
        if magic != LAVM_MAGIC {
            return Err(Error::BadMagic { expected: LAVM_MAGIC, found: magic });
        }
        let version = cur.u32("version")?;
        if version != LAVM_VERSION {
            return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("unsupported version {version}") });
        }

        let variant = match cur.take::<1>("variant")?[0] {
            0 => Variant::Cross,
            1 => Variant::SelfOnly,
            v => return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad variant tag {v}") }),
        };
        let d_model = cur.u32("d_model")? as usize;
        let n_heads = cur.u32("n_heads")? as usize;
        let n_layers = cur.u32("n_layers")? as usize;
        let n_cross = cur.u32("cross count")? as usize;
        let mut cross_layers = Vec::with_capacity(n_cross);
        for _ in 0..n_cross {
            cross_layers.push(cur.u32("cross layer")? as usize);
        }
        let vocab_size = cur.u32("vocab")? as usize;
        let patch_rows = cur.u32("patch rows")? as usize;
        let patch_cols = cur.u32("patch cols")? as usize;
        let max_text_len = cur.u32("max text len")? as usize;
        let d_patch_in = cur.u32("d_patch_in")? as usize;
        let vlm_cfg = VlmConfig {
            variant,
            d_model,
            n_heads,
            n_layers,
            cross_layers,
            vocab_size,
            patch_rows,
            patch_cols,
            max_text_len,
            d_patch_in,
        };

        let depth = match cur.take::<1>("aligner depth")?[0] {
            1 => AlignerDepth::Light,
            2 => AlignerDepth::Sim,
            4 => AlignerDepth::Deep,
            v => return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad depth {v}") }),
        };
        let kind = match cur.take::<1>("aligner kind")?[0] {
            0 => AlignerKind::Conv,
            1 => AlignerKind::Mlp,
            v => return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad kind {v}") }),
        };
        let norm = match cur.take::<1>("aligner norm")?[0] {
            0 => AlignerNorm::Instance,
            1 => AlignerNorm::Batch,
            2 => AlignerNorm::None,
            v => return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad norm {v}") }),
        };
        let expansion = cur.u32("expansion")? as usize;
        let aligner_cfg = AlignerConfig { depth, kind, norm, expansion };

        let k = cur.take::<1>("agg kind")?[0];
        let x = cur.take::<1>("agg x")?[0];
        let y = cur.take::<1>("agg y")?[0];
        let agg_mode = decode_agg(k, x, y)?;
        let n_subset = cur.u32("layer subset count")? as usize;
        let mut layer_subset = Vec::with_capacity(n_subset);
        for _ in 0..n_subset {
            layer_subset.push(cur.u32("layer subset entry")? as usize);
        }
        let lora_rank = cur.u32("lora rank")?;
        let lora_alpha = f32::from_le_bytes(cur.take::<4>("lora alpha")?);

        let n_blocks = cur.u32("param count")? as usize;
        let mut model = ParamSet::new();
        let mut aligner = ParamSet::new();
        let mut parallel = ParamSet::new();
        let mut lora = ParamSet::new();
        for _ in 0..n_blocks {
            let name = cur.string("param name")?;
            let rank = cur.u32("param rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32("param dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let v = f32::from_le_bytes(cur.take::<4>("param values")?);
                if !v.is_finite() {
                    return Err(Error::NonFiniteInFile { what: format!("parameter {name:?}") });
                }
                data.push(v as f64);
            }
            let t = Tensor::from_vec(shape, data)?;
            if name.starts_with("aligner.") {
                aligner.insert(name, t);
            } else if name.starts_with("parallel.") {
                parallel.insert(name, t);
            } else if name.starts_with("lora.") {
                lora.insert(name, t);
            } else {
                model.insert(name, t);
            }
        }

        Ok(Checkpoint {
            vlm_cfg,
            aligner_cfg,
            agg_mode,
            layer_subset,
            lora_rank,
            lora_alpha,
            model,
            aligner,
            parallel,
            lora,
        })
    }
}

fn encode_agg(mode: AggMode) -> (u8, u8, u8) {
    match mode {
        AggMode::Simple { layer_op, head_op } => (0, reduce_tag(layer_op), reduce_tag(head_op)),
        AggMode::Flow { combine, regularize } => (
            1,
            match combine {
                Combine::Multiply => 0,
                Combine::Add => 1,
            },
            regularize as u8,
        ),
        AggMode::Learned => (2, 0, 0),
    }
}

fn decode_agg(k: u8, x: u8, y: u8) -> Result<AggMode> {
    let mode = match k {
        0 => AggMode::Simple { layer_op: reduce_from(x)?, head_op: reduce_from(y)? },
        1 => AggMode::Flow {
            combine: if x == 0 { Combine::Multiply } else { Combine::Add },
            regularize: y != 0,
        },
        2 => AggMode::Learned,
        v => return Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad agg kind {v}") }),
    };
    Ok(mode)
}

fn reduce_tag(r: Reduce) -> u8 {
    match r {
        Reduce::Mean => 0,
        Reduce::Max => 1,
    }
}

fn reduce_from(v: u8) -> Result<Reduce> {
    match v {
        0 => Ok(Reduce::Mean),
        1 => Ok(Reduce::Max),
        v => Err(Error::Invalid { op: "Checkpoint::load", detail: format!("bad reduce tag {v}") }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::ParallelAttn;
    use crate::aligner::Aligner;
    use crate::vlm::ToyVlm;

    fn sample_checkpoint() -> Checkpoint {
        let cfg = VlmConfig {
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
        };
        let model = ToyVlm::new(cfg.clone(), 21).unwrap();
        let aligner = Aligner::new(AlignerConfig::default(), 22).unwrap();
        let parallel = ParallelAttn::new(&cfg, &[1], 23).unwrap();
        Checkpoint {
            vlm_cfg: cfg,
            aligner_cfg: aligner.cfg,
            agg_mode: AggMode::Learned,
            layer_subset: vec![1],
            lora_rank: 0,
            lora_alpha: 0.0,
            model: model.params,
            aligner: aligner.params,
            parallel: parallel.params,
            lora: ParamSet::new(),
        }
    }

    #[test]
    fn lavm_roundtrip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let dir = std::env::temp_dir().join("lavm_roundtrip_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("m1.lavm");
        let p2 = dir.join("m2.lavm");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.vlm_cfg.cross_layers, vec![1]);
        assert_eq!(loaded.agg_mode, AggMode::Learned);
        assert_eq!(loaded.model.len(), ckpt.model.len());
        assert_eq!(loaded.aligner.len(), ckpt.aligner.len());
        assert_eq!(loaded.parallel.len(), ckpt.parallel.len());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("lavm_badmagic_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.lavm");
        std::fs::write(&p, b"NOPE....").unwrap();
        match Checkpoint::load(&p) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncation_rejected() {
        let ckpt = sample_checkpoint();
        let dir = std::env::temp_dir().join("lavm_trunc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("full.lavm");
        ckpt.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let cut = dir.join("cut.lavm");
        std::fs::write(&cut, &bytes[..bytes.len() - 7]).unwrap();
        match Checkpoint::load(&cut) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }
}
