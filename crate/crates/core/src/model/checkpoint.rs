//! Self-describing checkpoint container: versioned header, JSON model
//! config, then the three parameter collections with exact f64 bit patterns
//! (save -> load -> forward is bit-identical). A trained downstream head can
//! ride along in an optional trailing section.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::{EncoderParams, ParamGroup};
use super::{Model, ModelConfig, SizePreset, Variant};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::tensor::Mat;

const MAGIC: &[u8; 8] = b"SSLFTCK\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub head: Option<HeadParams>,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
}

fn write_mat(w: &mut impl Write, m: &Mat) -> Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    for v in m.data() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_mat(r: &mut impl Read) -> Result<Mat> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut b)?;
        data.push(f64::from_bits(u64::from_le_bytes(b)));
    }
    Ok(Mat::from_vec(rows, cols, data))
}

fn write_group(w: &mut impl Write, group: &ParamGroup) -> Result<()> {
    write_u32(w, group.len() as u32)?;
    for (name, m) in group.iter() {
        write_string(w, name)?;
        write_mat(w, m)?;
    }
    Ok(())
}

fn read_group(r: &mut impl Read) -> Result<ParamGroup> {
    let n = read_u32(r)? as usize;
    let mut group = ParamGroup::new();
    for _ in 0..n {
        let name = read_string(r)?;
        let m = read_mat(r)?;
        group.insert(&name, m)?;
    }
    Ok(group)
}

pub fn save_checkpoint(path: &Path, model: &Model, head: Option<&HeadParams>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let cfg = serde_json::to_string(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    write_u64(&mut w, cfg.len() as u64)?;
    w.write_all(cfg.as_bytes())?;
    write_group(&mut w, &model.params.cnn)?;
    write_group(&mut w, &model.params.transformer)?;
    write_group(&mut w, &model.params.auxiliary)?;
    match head {
        Some(h) => {
            w.write_all(&[1u8])?;
            let meta = serde_json::to_string(&h.meta())
                .map_err(|e| Error::Checkpoint(format!("head meta: {e}")))?;
            write_string(&mut w, &meta)?;
            write_group(&mut w, h.group())?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: ModelConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
    let cnn = read_group(&mut r)?;
    let transformer = read_group(&mut r)?;
    let auxiliary = read_group(&mut r)?;
    let params = EncoderParams {
        cnn,
        transformer,
        auxiliary,
    };
    params.check_partition()?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let head = if flag[0] == 1 {
        let meta = read_string(&mut r)?;
        let group = read_group(&mut r)?;
        Some(HeadParams::from_parts(
            serde_json::from_str(&meta)
                .map_err(|e| Error::Checkpoint(format!("head meta parse: {e}")))?,
            group,
        ))
    } else {
        None
    };
    Ok(Checkpoint {
        model: Model { config, params },
        head,
    })
}

/// Naming-grid key for externally provided pretrained checkpoints:
/// `{w2v|hbt}-{base|large}[-960h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PretrainedKey {
    pub variant: Variant,
    pub large: bool,
    pub asr_960h: bool,
}

impl PretrainedKey {
    pub fn render(&self) -> String {
        format!(
            "{}-{}{}",
            self.variant.tag(),
            if self.large { "large" } else { "base" },
            if self.asr_960h { "-960h" } else { "" }
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split('-');
        let variant = match parts.next() {
            Some("w2v") => Variant::W2v,
            Some("hbt") => Variant::Hbt,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variant tag {other:?} in pretrained key {s}"
                )))
            }
        };
        let large = match parts.next() {
            Some("base") => false,
            Some("large") => true,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown size tag {other:?} in pretrained key {s}"
                )))
            }
        };
        let asr_960h = match parts.next() {
            None => false,
            Some("960h") => true,
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "unexpected suffix {other} in pretrained key {s}"
                )))
            }
        };
        if parts.next().is_some() {
            return Err(Error::InvalidConfig(format!("trailing junk in key {s}")));
        }
        Ok(PretrainedKey {
            variant,
            large,
            asr_960h,
        })
    }
}

/// Load `<dir>/<key>.ckpt` and verify the stored config matches the size and
/// variant the key names.
pub fn import_pretrained(dir: &Path, key: &PretrainedKey) -> Result<Model> {
    let path = dir.join(format!("{}.ckpt", key.render()));
    let ckpt = load_checkpoint(&path)?;
    let cfg = &ckpt.model.config;
    if cfg.variant != key.variant {
        return Err(Error::Checkpoint(format!(
            "checkpoint variant {} does not match key {}",
            cfg.variant.tag(),
            key.render()
        )));
    }
    let expected = if key.large {
        SizePreset::Large
    } else {
        SizePreset::Base
    };
    if cfg.size_preset != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint size preset {:?} does not match key {}",
            cfg.size_preset,
            key.render()
        )));
    }
    Ok(ckpt.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(ModelConfig::toy(Variant::W2v), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wav: Vec<f64> = (0..600).map(|_| rng.random_range(-1.0..1.0)).collect();

        let before_frames = model.encode_features(&wav).unwrap();
        let before = model.contextualize(&before_frames, None).unwrap();

        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.head.is_none());

        let after_frames = loaded.model.encode_features(&wav).unwrap();
        let after = loaded.model.contextualize(&after_frames, None).unwrap();
        assert_eq!(before.values, after.values);
        assert_eq!(
            model.params.transformer.checksum(),
            loaded.model.params.transformer.checksum()
        );
    }

    #[test]
    fn pretrained_key_roundtrip_matches_naming_grid() {
        for (s, large, asr) in [
            ("w2v-base", false, false),
            ("w2v-large-960h", true, true),
            ("hbt-base", false, false),
            ("hbt-large", true, false),
        ] {
            let k = PretrainedKey::parse(s).unwrap();
            assert_eq!(k.large, large);
            assert_eq!(k.asr_960h, asr);
            assert_eq!(k.render(), s);
        }
        assert!(PretrainedKey::parse("w2v-huge").is_err());
        assert!(PretrainedKey::parse("bert-base").is_err());
    }

    #[test]
    fn import_checks_key_against_config() {
        let dir = tempfile::tempdir().unwrap();
        // toy preset saved under a base key must be rejected
        let model = Model::init(ModelConfig::toy(Variant::W2v), 1).unwrap();
        let path = dir.path().join("w2v-base.ckpt");
        save_checkpoint(&path, &model, None).unwrap();
        let key = PretrainedKey::parse("w2v-base").unwrap();
        assert!(import_pretrained(dir.path(), &key).is_err());
    }
}
