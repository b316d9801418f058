//! Versioned binary checkpoints.
//!
//! All integers are little-endian `u64` unless noted; all reals are
//! little-endian IEEE-754 `f64`.
//!
//! | field            | size                | contents                                   |
//! |------------------|---------------------|--------------------------------------------|
//! | magic            | 8 bytes             | `b"FFCKPT\0\0"`                            |
//! | version          | `u32`               | currently `1`                              |
//! | header length    | `u64`               | byte length `J` of the JSON header         |
//! | header           | `J` bytes           | UTF-8 JSON: `spec`, `plan`, `train`, `epoch`, Adam hyper-parameters |
//! | params           | `u64` + `n × f64`   | flat parameter vector                      |
//! | buffers          | `u64` + `n × f64`   | batch-norm running mean/var                |
//! | adam step        | `u64`               | number of optimizer steps taken            |
//! | adam first moment  | `u64` + `n × f64` |                                            |
//! | adam second moment | `u64` + `n × f64` |                                            |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::optim::Adam;
use super::spec::{GatePlan, NetworkSpec};
use super::train::{TrainConfig, Trainer};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    plan: GatePlan,
    train: TrainConfig,
    epoch: usize,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    write_u64(w, v.len() as u64)?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, limit: usize) -> Result<Vec<f64>> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(Error::Checkpoint(format!("array of {n} values exceeds the file size")));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Serialises a trainer (network, plan, optimizer, epoch) to bytes.
pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let net = &trainer.net;
    let opt = &trainer.opt;
    let header = Header {
        spec: net.spec().clone(),
        plan: net.plan().clone(),
        train: trainer.config.clone(),
        epoch: trainer.epoch,
        learning_rate: opt.learning_rate,
        beta1: opt.beta1,
        beta2: opt.beta2,
        epsilon: opt.epsilon,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_u64(&mut out, json.len() as u64)?;
    out.extend_from_slice(&json);
    write_f64s(&mut out, net.params())?;
    write_f64s(&mut out, net.buffers())?;
    write_u64(&mut out, opt.step)?;
    write_f64s(&mut out, &opt.m)?;
    write_f64s(&mut out, &opt.v)?;
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let limit = bytes.len() / 8;
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut r)? as usize;
    if len > r.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len])?;
    r = &r[len..];
    let params = read_f64s(&mut r, limit)?;
    let buffers = read_f64s(&mut r, limit)?;
    let step = read_u64(&mut r)?;
    let m = read_f64s(&mut r, limit)?;
    let v = read_f64s(&mut r, limit)?;
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    let net = Network::from_state(header.spec, header.plan, params, buffers)?;
    let opt = Adam {
        learning_rate: header.learning_rate,
        beta1: header.beta1,
        beta2: header.beta2,
        epsilon: header.epsilon,
        step,
        m,
        v,
    };
    Ok(Trainer {
        net,
        opt,
        config: header.train,
        epoch: header.epoch,
    })
}

pub fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    std::fs::write(path, encode(trainer)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor3;

    #[test]
    fn round_trip_resumes_identically() {
        let spec = NetworkSpec::resnet_with_filters(1, 2, 2, &[3, 4]).with_seed(4);
        let plan = GatePlan::skipping(&spec, &[0]).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            seed: 1,
            ..Default::default()
        };
        let mut t = Trainer::new(Network::new(spec, plan).unwrap(), cfg).unwrap();
        let x = Tensor3::from_channel_major(8, 1, 12, (0..96).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect()).unwrap();
        let y = vec![0, 1, 0, 1, 1, 0, 1, 0];
        t.train_until(&x, &y, 2).unwrap();

        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let mut resumed = decode(&bytes).unwrap();
        assert_eq!(encode(&resumed).unwrap(), bytes);

        t.train_until(&x, &y, 4).unwrap();
        resumed.train_until(&x, &y, 4).unwrap();
        assert_eq!(t.network().params(), resumed.network().params());
    }

    #[test]
    fn rejects_corruption() {
        assert!(decode(b"not a checkpoint").is_err());
        let spec = NetworkSpec::fcn_with_filters(1, 2, 1, &[2]);
        let t = Trainer::new(Network::ungated(spec).unwrap(), TrainConfig::default()).unwrap();
        let mut bytes = encode(&t).unwrap();
        bytes.pop();
        assert!(decode(&bytes).is_err());
    }
}
