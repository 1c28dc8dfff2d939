//! Checkpoint serialization.
//!
//! Layout: magic `NFSMCK1\0`, u32 version, u64 header length, a
//! [`crate::kvtext`] header (model config, stage, step counter, RNG state,
//! tensor directory with shapes and byte offsets), then the tensor payloads
//! as little-endian f64 in directory order. Round-trips are byte-exact.

use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::kvtext::{KvDoc, KvWriter};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 8] = b"NFSMCK1\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// 1 = baseline only, 2 = NFSM attached.
    pub stage: u8,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    /// `(name, shape, values)` in the model's canonical parameter order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_model(
        cfg: &ModelConfig,
        model: &ModelParams,
        stage: u8,
        step: u64,
        rng: &ChaCha8Rng,
    ) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            stage,
            step,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            tensors: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.shape.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuild the parameter set, verifying that exactly the expected tensors
    /// are present with the shapes the config implies.
    pub fn to_model(&self) -> Result<(ModelConfig, ModelParams)> {
        self.config.validate()?;
        let mut model = ModelParams::init_stage1(&self.config);
        if self.stage >= 2 {
            model.attach_nfsm(&self.config);
        }
        let expected: Vec<(String, Vec<usize>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((name, shape, values), (exp_name, exp_shape)) in
            self.tensors.iter().zip(&expected)
        {
            if name != exp_name {
                return Err(Error::Format(format!(
                    "tensor {name:?} found where {exp_name:?} expected"
                )));
            }
            if shape != exp_shape {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected shape {exp_shape:?}, found {shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            if values.len() != numel {
                return Err(Error::Shape(format!(
                    "tensor {name}: shape {shape:?} needs {numel} values, found {}",
                    values.len()
                )));
            }
        }
        for (p, (_, _, values)) in model.params_mut().into_iter().zip(&self.tensors) {
            p.value.copy_from_slice(values);
        }
        Ok((self.config.clone(), model))
    }

    /// RNG restored to the recorded position.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = KvWriter::new();
        header.put("stage", self.stage);
        header.put("step", self.step);
        header.put("model.n", self.config.n);
        header.put("model.m", self.config.m);
        header.put("model.d", self.config.d);
        header.put("model.s", self.config.s);
        header.put("model.feat_dim", self.config.feat_dim);
        header.put("model.spatial_tokens", self.config.spatial_tokens);
        header.put_f64("model.alpha", self.config.alpha);
        header.put("model.seed", self.config.seed);
        header.put("rng.seed", hex::encode(self.rng_seed));
        header.put("rng.word_pos", self.rng_word_pos);
        header.put("tensors", self.tensors.len());
        let mut offset = 0usize;
        for (i, (name, shape, values)) in self.tensors.iter().enumerate() {
            header.put(&format!("tensor.{i}.name"), name);
            header.put(
                &format!("tensor.{i}.shape"),
                shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(" "),
            );
            header.put(&format!("tensor.{i}.offset"), offset);
            offset += values.len() * 8;
        }
        let header_bytes = header.into_string().into_bytes();
        let mut out = Vec::with_capacity(20 + header_bytes.len() + offset);
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 20 {
            return Err(Error::Format(format!(
                "checkpoint truncated before header length field ({} bytes)",
                bytes.len()
            )));
        }
        if &bytes[0..8] != CKPT_MAGIC {
            return Err(Error::Format("checkpoint magic mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(Error::Format("checkpoint truncated inside header".into()));
        }
        let header_text = std::str::from_utf8(&bytes[20..20 + header_len])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let payload = &bytes[20 + header_len..];

        let mut doc = KvDoc::parse(header_text)?;
        let stage = doc.get_usize("stage")? as u8;
        let step = doc.get_u64("step")?;
        let config = ModelConfig {
            n: doc.get_usize("model.n")?,
            m: doc.get_usize("model.m")?,
            d: doc.get_usize("model.d")?,
            s: doc.get_usize("model.s")?,
            feat_dim: doc.get_usize("model.feat_dim")?,
            spatial_tokens: doc.get_usize("model.spatial_tokens")?,
            alpha: doc.get_f64("model.alpha")?,
            seed: doc.get_u64("model.seed")?,
        };
        let seed_hex = doc.get_str("rng.seed")?;
        let seed_vec = hex::decode(&seed_hex)
            .map_err(|_| Error::Format(format!("rng.seed is not hex: {seed_hex:?}")))?;
        let rng_seed: [u8; 32] = seed_vec
            .try_into()
            .map_err(|_| Error::Format("rng.seed must be 32 bytes".into()))?;
        let rng_word_pos: u128 = doc
            .get_str("rng.word_pos")?
            .parse()
            .map_err(|_| Error::Format("rng.word_pos is not an integer".into()))?;
        let count = doc.get_usize("tensors")?;
        let mut tensors = Vec::with_capacity(count);
        let mut expected_offset = 0usize;
        for i in 0..count {
            let name = doc.get_str(&format!("tensor.{i}.name"))?;
            let shape: Vec<usize> = doc
                .get_str(&format!("tensor.{i}.shape"))?
                .split_whitespace()
                .map(|tok| {
                    tok.parse().map_err(|_| {
                        Error::Format(format!("tensor.{i}.shape: invalid dimension {tok:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            let offset = doc.get_usize(&format!("tensor.{i}.offset"))?;
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "tensor.{i}.offset is {offset}, expected {expected_offset}"
                )));
            }
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if payload.len() < end {
                return Err(Error::Format(format!(
                    "checkpoint truncated inside tensor {name} payload"
                )));
            }
            let values: Vec<f64> = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, shape, values));
            expected_offset = end;
        }
        if payload.len() != expected_offset {
            return Err(Error::Format(format!(
                "checkpoint has {} trailing payload bytes",
                payload.len() - expected_offset
            )));
        }
        doc.finish()?;
        Ok(Checkpoint {
            config,
            stage,
            step,
            rng_seed,
            rng_word_pos,
            tensors,
        })
    }

    /// Write to disk; returns the SHA-256 of the file bytes.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        fs::write(path, &bytes).map_err(|e| Error::file(path, e))?;
        Ok(hash_hex(&bytes))
    }

    /// Read from disk; returns the checkpoint and the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Checkpoint, String)> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        let ckpt = Checkpoint::decode(&bytes)?;
        Ok((ckpt, hash_hex(&bytes)))
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Minimal hex helpers (lowercase, strict length).
mod hex {
    pub fn encode(bytes: impl AsRef<[u8]>) -> String {
        bytes
            .as_ref()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn decode(s: &str) -> Result<Vec<u8>, ()> {
        if s.len() % 2 != 0 {
            return Err(());
        }
        (0..s.len() / 2)
            .map(|i| u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| ()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::RngCore;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            n: 2,
            m: 1,
            d: 4,
            s: 2,
            feat_dim: 3,
            spatial_tokens: 1,
            alpha: 0.5,
            seed: 77,
        }
    }

    fn sample_ckpt() -> Checkpoint {
        let cfg = micro_cfg();
        let mut model = ModelParams::init_stage1(&cfg);
        model.attach_nfsm(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        rng.next_u64();
        Checkpoint::from_model(&cfg, &model, 2, 123, &rng)
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let ckpt = sample_ckpt();
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode(), bytes);
        let (_, model) = back.to_model().unwrap();
        let (_, orig) = ckpt.to_model().unwrap();
        for (a, b) in model.params().iter().zip(orig.params()) {
            for (x, y) in a.value.iter().zip(&b.value) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn save_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.nfsmck");
        let ckpt = sample_ckpt();
        let h1 = ckpt.save(&path).unwrap();
        let (back, h2) = Checkpoint::load(&path).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncation_anywhere_is_a_format_error() {
        let bytes = sample_ckpt().encode();
        for cut in [0, 4, 12, 19, 40, bytes.len() - 9, bytes.len() - 1] {
            let err = Checkpoint::decode(&bytes[..cut]).unwrap_err();
            assert_eq!(err.kind(), "format", "cut at {cut}: {err}");
        }
    }

    #[test]
    fn corrupt_magic_and_version_are_rejected() {
        let mut bytes = sample_ckpt().encode();
        bytes[0] = b'Z';
        assert!(Checkpoint::decode(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = sample_ckpt().encode();
        bytes[8] = 9;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn shape_mismatch_names_expected_and_found() {
        let mut ckpt = sample_ckpt();
        // corrupt one tensor's shape metadata consistently with its data
        let name = {
            let (name, shape, values) = &mut ckpt.tensors[0];
            assert_eq!(shape.len(), 2);
            let numel = values.len();
            *shape = vec![1, numel];
            name.clone()
        };
        let err = ckpt.to_model().unwrap_err();
        let msg = err.to_string();
        assert_eq!(err.kind(), "shape");
        assert!(msg.contains(name.as_str()), "{msg}");
        assert!(msg.contains("expected") && msg.contains("found"), "{msg}");
    }

    #[test]
    fn rng_state_round_trips() {
        let ckpt = sample_ckpt();
        let mut rng = ckpt.rng();
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        rng2.next_u64();
        assert_eq!(rng.next_u64(), rng2.next_u64());
    }

    #[test]
    fn stage1_checkpoint_has_no_nfsm_tensors() {
        let cfg = micro_cfg();
        let model = ModelParams::init_stage1(&cfg);
        let rng = ChaCha8Rng::seed_from_u64(0);
        let ckpt = Checkpoint::from_model(&cfg, &model, 1, 10, &rng);
        assert!(ckpt.tensors.iter().all(|(n, _, _)| n.starts_with("backbone.")));
        let (_, back) = ckpt.to_model().unwrap();
        assert!(!back.has_nfsm());
    }
}
