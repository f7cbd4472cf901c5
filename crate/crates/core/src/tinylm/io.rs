//! `MXK1` checkpoint files.
//!
//! Layout: magic, u64 header length, JSON header, `P` little-endian f64
//! parameters, a one-byte optimizer tag (0 = SGD, 1 = AdamW) followed for
//! AdamW by the u64 step count and both moment vectors, then the RNG
//! snapshot (32-byte seed, u64 stream, u128 word position).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelCheckpoint, ModelConfig, OptState};
use crate::error::{Error, Result};
use crate::rng::RngSnapshot;

const MAGIC: &[u8; 4] = b"MXK1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    step: u64,
    param_count: usize,
}

fn put_f64s(w: &mut impl Write, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_checkpoint(path: &Path, ckpt: &ModelCheckpoint) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        config: ckpt.config.clone(),
        config_hash: ckpt.config_hash.clone(),
        step: ckpt.step,
        param_count: ckpt.params.len(),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    put_f64s(&mut w, &ckpt.params)?;
    match &ckpt.opt_state {
        OptState::Sgd => w.write_all(&[0u8])?,
        OptState::AdamW { m, v, t } => {
            w.write_all(&[1u8])?;
            w.write_all(&t.to_le_bytes())?;
            put_f64s(&mut w, m)?;
            put_f64s(&mut w, v)?;
        }
    }
    w.write_all(&ckpt.rng_state.to_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an MXK1 checkpoint"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let mut header = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    header.config.validate()?;
    if header.config.hash() != header.config_hash {
        return Err(bad("config digest does not match the stored config"));
    }
    if header.config.param_count() != header.param_count {
        return Err(bad("parameter count does not match the config"));
    }
    let p = header.param_count;
    let params = get_f64s(&mut r, p)?;
    if params.iter().any(|x| !x.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let opt_state = match tag[0] {
        0 => OptState::Sgd,
        1 => {
            r.read_exact(&mut b8)?;
            let t = u64::from_le_bytes(b8);
            let m = get_f64s(&mut r, p)?;
            let v = get_f64s(&mut r, p)?;
            OptState::AdamW { m, v, t }
        }
        other => return Err(bad(&format!("unknown optimizer tag {other}"))),
    };
    let mut rng = [0u8; RngSnapshot::BYTES];
    r.read_exact(&mut rng)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(ModelCheckpoint {
        config: header.config,
        params,
        step: header.step,
        opt_state,
        rng_state: RngSnapshot::from_bytes(&rng),
        config_hash: header.config_hash,
    })
}
