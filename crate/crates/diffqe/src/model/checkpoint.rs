//! Single-file checkpoint container: format-version header, architecture
//! config echo, and named parameter tensors. Training state (optimizer
//! moments, RNG positions, step counter) rides along so an interrupted run
//! resumes bit-identically.

use super::{ArchConfig, Estimator, ModelWeights, Regressor, Variant};
use crate::error::{Error, Result};
use crate::model::decoder::Decoder;
use crate::model::encoder::Encoder;
use crate::nn::Param;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DQCK";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;
const DTYPE_BYTES: u8 = 2;

/// Serialized ChaCha state: 32-byte seed, 16-byte word position, 8-byte stream.
pub const RNG_STATE_LEN: usize = 56;

pub fn rng_state(rng: &ChaCha8Rng) -> [u8; RNG_STATE_LEN] {
    let mut out = [0u8; RNG_STATE_LEN];
    out[..32].copy_from_slice(&rng.get_seed());
    out[32..48].copy_from_slice(&rng.get_word_pos().to_le_bytes());
    out[48..].copy_from_slice(&rng.get_stream().to_le_bytes());
    out
}

pub fn rng_restore(state: &[u8; RNG_STATE_LEN]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&state[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(state[48..].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(state[32..48].try_into().unwrap()));
    rng
}

/// Everything beyond the weights needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: u64,
    pub adam_step: u64,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    /// Patch-stream position: (epoch, index within epoch).
    pub data_epoch: u64,
    pub data_pos: u64,
    /// Per-sample noise/timestep draw stream (stage 2).
    pub noise_rng: [u8; RNG_STATE_LEN],
}

enum Payload {
    F32(Vec<f32>),
    U64(Vec<u64>),
    Bytes(Vec<u8>),
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
}

fn write_tensor(w: &mut impl Write, name: &str, payload: &Payload) -> Result<()> {
    write_str(w, name)?;
    match payload {
        Payload::F32(v) => {
            w.write_all(&[DTYPE_F32])?;
            w.write_all(&(v.len() as u64).to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::U64(v) => {
            w.write_all(&[DTYPE_U64])?;
            w.write_all(&(v.len() as u64).to_le_bytes())?;
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Payload::Bytes(v) => {
            w.write_all(&[DTYPE_BYTES])?;
            w.write_all(&(v.len() as u64).to_le_bytes())?;
            w.write_all(v)?;
        }
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Payload)> {
    let name = read_str(r)?;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    let mut lenb = [0u8; 8];
    r.read_exact(&mut lenb)?;
    let len = u64::from_le_bytes(lenb) as usize;
    let payload = match dtype[0] {
        DTYPE_F32 => {
            let mut raw = vec![0u8; len * 4];
            r.read_exact(&mut raw)?;
            Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        DTYPE_U64 => {
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            Payload::U64(
                raw.chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        DTYPE_BYTES => {
            let mut raw = vec![0u8; len];
            r.read_exact(&mut raw)?;
            Payload::Bytes(raw)
        }
        d => return Err(Error::Checkpoint(format!("unknown dtype {d} for {name}"))),
    };
    Ok((name, payload))
}

pub fn save_checkpoint(
    path: &Path,
    weights: &mut ModelWeights<f32>,
    state: Option<&TrainState>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        // config echo
        let mut pairs = weights.cfg.to_pairs();
        pairs.push(("variant".into(), weights.variant.as_str().into()));
        pairs.push(("sections".into(), weights.sections().join(",")));
        f.write_all(&(pairs.len() as u32).to_le_bytes())?;
        for (k, v) in &pairs {
            write_str(&mut f, k)?;
            write_str(&mut f, v)?;
        }
        // tensors
        let mut tensors: Vec<(String, Payload)> = Vec::new();
        weights.visit_all(&mut |name: &str, p: &mut Param<f32>| {
            tensors.push((name.to_string(), Payload::F32(p.value.clone())));
        });
        if let Some(s) = state {
            tensors.push(("train.step".into(), Payload::U64(vec![s.step])));
            tensors.push(("train.adam_step".into(), Payload::U64(vec![s.adam_step])));
            tensors.push(("train.adam_m".into(), Payload::F32(s.adam_m.clone())));
            tensors.push(("train.adam_v".into(), Payload::F32(s.adam_v.clone())));
            tensors.push(("train.data_pos".into(), Payload::U64(vec![s.data_epoch, s.data_pos])));
            tensors.push(("train.noise_rng".into(), Payload::Bytes(s.noise_rng.to_vec())));
        }
        f.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, payload) in &tensors {
            write_tensor(&mut f, name, payload)?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelWeights<f32>, Option<TrainState>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    let mut ver = [0u8; 4];
    f.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {ver}")));
    }
    let mut cnt = [0u8; 4];
    f.read_exact(&mut cnt)?;
    let mut pairs = Vec::new();
    for _ in 0..u32::from_le_bytes(cnt) {
        let k = read_str(&mut f)?;
        let v = read_str(&mut f)?;
        pairs.push((k, v));
    }
    let cfg = ArchConfig::from_pairs(&pairs)?;
    let get = |k: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(kk, _)| kk == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing config key {k}")))
    };
    let variant = Variant::parse(get("variant")?)?;
    let sections: Vec<&str> = get("sections")?.split(',').collect();

    let mut tensors: BTreeMap<String, Payload> = BTreeMap::new();
    f.read_exact(&mut cnt)?;
    for _ in 0..u32::from_le_bytes(cnt) {
        let (name, payload) = read_tensor(&mut f)?;
        tensors.insert(name, payload);
    }

    // Rebuild the skeleton, then fill by name.
    let mut weights = ModelWeights {
        encoder: sections
            .contains(&"encoder")
            .then(|| Encoder::new(2, cfg.enc_width, cfg.latent_dim)),
        decoder: Decoder::new(cfg.base_width, cfg.latent_dim),
        estimator: sections.contains(&"estimator").then(|| Estimator::new(&cfg)),
        regressor: sections.contains(&"regressor").then(|| Regressor::new(&cfg)),
        cfg,
        variant,
    };
    let mut missing: Vec<String> = Vec::new();
    weights.visit_all(&mut |name: &str, p: &mut Param<f32>| match tensors.get(name) {
        Some(Payload::F32(v)) if v.len() == p.len() => p.value.copy_from_slice(v),
        Some(Payload::F32(v)) => missing.push(format!("{name} (length {} vs {})", v.len(), p.len())),
        Some(_) => missing.push(format!("{name} (wrong dtype)")),
        None => missing.push(format!("{name} (absent)")),
    });
    if let Some(m) = missing.first() {
        return Err(Error::Checkpoint(format!("parameter tensor mismatch: {m}")));
    }

    let state = if tensors.contains_key("train.step") {
        let u64_of = |k: &str| -> Result<u64> {
            match tensors.get(k) {
                Some(Payload::U64(v)) if v.len() == 1 => Ok(v[0]),
                _ => Err(Error::Checkpoint(format!("bad train-state entry {k}"))),
            }
        };
        let f32_of = |k: &str| -> Result<Vec<f32>> {
            match tensors.get(k) {
                Some(Payload::F32(v)) => Ok(v.clone()),
                _ => Err(Error::Checkpoint(format!("bad train-state entry {k}"))),
            }
        };
        let rng_of = |k: &str| -> Result<[u8; RNG_STATE_LEN]> {
            match tensors.get(k) {
                Some(Payload::Bytes(v)) if v.len() == RNG_STATE_LEN => {
                    Ok(v.as_slice().try_into().unwrap())
                }
                _ => Err(Error::Checkpoint(format!("bad train-state entry {k}"))),
            }
        };
        let data_pos = match tensors.get("train.data_pos") {
            Some(Payload::U64(v)) if v.len() == 2 => (v[0], v[1]),
            _ => return Err(Error::Checkpoint("bad train-state entry train.data_pos".into())),
        };
        Some(TrainState {
            step: u64_of("train.step")?,
            adam_step: u64_of("train.adam_step")?,
            adam_m: f32_of("train.adam_m")?,
            adam_v: f32_of("train.adam_v")?,
            data_epoch: data_pos.0,
            data_pos: data_pos.1,
            noise_rng: rng_of("train.noise_rng")?,
        })
    } else {
        None
    };
    Ok((weights, state))
}

/// Load and insist on an exact architecture match, naming the first
/// differing config key otherwise.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ArchConfig,
) -> Result<(ModelWeights<f32>, Option<TrainState>)> {
    let (w, s) = load_checkpoint(path)?;
    if let Some(diff) = expected.first_difference(&w.cfg) {
        return Err(Error::Checkpoint(format!(
            "architecture config mismatch at {diff} (checkpoint {})",
            path.display()
        )));
    }
    Ok((w, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::plane_to_feat;
    use crate::nn::Workspace;
    use crate::plane::Plane;

    fn small_cfg() -> ArchConfig {
        ArchConfig {
            latent_dim: 16,
            cond_dim: 16,
            base_width: 4,
            enc_width: 4,
            time_dim: 8,
            mlp_hidden: 16,
            diffusion_steps: 10,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut w = ModelWeights::<f32>::stage1(small_cfg(), 42);
        save_checkpoint(&path, &mut w, None).unwrap();
        let (mut w2, state) = load_checkpoint(&path).unwrap();
        assert!(state.is_none());
        assert_eq!(w2.variant, Variant::Full);
        // bit-exact values and identical forward output
        let mut vals1: Vec<f32> = Vec::new();
        w.visit_all(&mut |_: &str, p: &mut Param<f32>| vals1.extend_from_slice(&p.value));
        let mut vals2: Vec<f32> = Vec::new();
        w2.visit_all(&mut |_: &str, p: &mut Param<f32>| vals2.extend_from_slice(&p.value));
        assert_eq!(vals1.len(), vals2.len());
        assert!(vals1.iter().zip(&vals2).all(|(a, b)| a.to_bits() == b.to_bits()));
        let img = crate::dataset::synthetic_plane(32, 32, 1);
        let x = plane_to_feat::<f32>(&img);
        let mut ws = Workspace::new();
        let z = vec![0.25f32; 16];
        let y1 = w.decoder.forward(&x, &z, &mut ws);
        let y2 = w2.decoder.forward(&x, &z, &mut ws);
        assert!(y1.data.iter().zip(&y2.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        // second save of the loaded weights is byte-identical
        let path2 = dir.path().join("w2.ckpt");
        save_checkpoint(&path2, &mut w2, None).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&path2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn config_mismatch_names_first_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut w = ModelWeights::<f32>::stage1(small_cfg(), 1);
        save_checkpoint(&path, &mut w, None).unwrap();
        let mut other = small_cfg();
        other.latent_dim = 32;
        other.base_width = 8;
        let err = load_checkpoint_expecting(&path, &other).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("latent_dim"), "got: {msg}");
    }

    #[test]
    fn train_state_survives() {
        use rand::SeedableRng;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let mut w = ModelWeights::<f32>::stage1(small_cfg(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: f32 = crate::num::Scalar::std_normal(&mut rng);
        let st = TrainState {
            step: 123,
            adam_step: 123,
            adam_m: vec![0.5; 7],
            adam_v: vec![0.25; 7],
            data_epoch: 2,
            data_pos: 17,
            noise_rng: rng_state(&rng),
        };
        save_checkpoint(&path, &mut w, Some(&st)).unwrap();
        let (_, s2) = load_checkpoint(&path).unwrap();
        let s2 = s2.unwrap();
        assert_eq!(s2.step, 123);
        assert_eq!(s2.adam_m, st.adam_m);
        assert_eq!((s2.data_epoch, s2.data_pos), (2, 17));
        let mut r2 = rng_restore(&s2.noise_rng);
        let a: f32 = crate::num::Scalar::std_normal(&mut rng);
        let b: f32 = crate::num::Scalar::std_normal(&mut r2);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("absent.ckpt")).is_err());
    }
}
