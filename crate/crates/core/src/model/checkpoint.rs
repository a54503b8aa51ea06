//! Binary checkpoint of the backbone and adapter store.
//!
//! Layout (little endian): magic `DMEA`, u32 format version, u32 length +
//! JSON backbone config, u32 block count, then per block a u16 name length,
//! the UTF-8 name, a u64 value count and the f64 values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::params::Backbone;
use super::{Adapter, BackboneConfig, ModelState, ModuleId};
use crate::error::{DmeaError, Result};

pub const MAGIC: &[u8; 4] = b"DMEA";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> DmeaError {
    DmeaError::Checkpoint(msg.into())
}

fn write_block(w: &mut impl Write, name: &str, values: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(state: &ModelState, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(state.config())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    let bb = &state.backbone;
    let blocks = bb.layout.named.len() + state.adapters.len();
    w.write_all(&(blocks as u32).to_le_bytes())?;
    for (name, slot) in &bb.layout.named {
        write_block(w, name, &bb.params[slot.range()])?;
    }
    for a in state.adapters.values() {
        write_block(w, &format!("adapter/{}/{}", a.id.0, a.layer), &a.params)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ModelState> {
    if &read_exact::<4>(r)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}, expected {FORMAT_VERSION}")));
    }
    let cfg_len = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(|e| bad(format!("truncated config: {e}")))?;
    let config: BackboneConfig = serde_json::from_slice(&cfg).map_err(|e| bad(format!("bad config: {e}")))?;
    config.validate()?;
    let blocks = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut named: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..blocks {
        let name_len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated block name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("block name is not UTF-8"))?;
        let count = u64::from_le_bytes(read_exact(r)?) as usize;
        if count > 1 << 28 {
            return Err(bad(format!("block {name} is implausibly large")));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(read_exact(r)?));
        }
        if named.insert(name.clone(), values).is_some() {
            return Err(bad(format!("duplicate block {name}")));
        }
    }

    let layout = super::params::Layout::new(&config);
    let mut params = vec![0.0; layout.total];
    for (name, slot) in &layout.named {
        let values = named.remove(name).ok_or_else(|| bad(format!("missing block {name}")))?;
        if values.len() != slot.len() {
            return Err(bad(format!("block {name}: expected {} values, found {}", slot.len(), values.len())));
        }
        params[slot.range()].copy_from_slice(&values);
    }
    let mut state = ModelState::new(Backbone::from_params(config, params)?);
    let expected = Adapter::param_count(config.hidden_width, config.adapter_bottleneck);
    for (name, values) in named {
        let parts: Vec<&str> = name.split('/').collect();
        let (id, layer) = match parts.as_slice() {
            ["adapter", id, layer] => (
                id.parse::<u32>().map_err(|_| bad(format!("bad adapter block {name}")))?,
                layer.parse::<usize>().map_err(|_| bad(format!("bad adapter block {name}")))?,
            ),
            _ => return Err(bad(format!("unknown block {name}"))),
        };
        if values.len() != expected || layer >= config.num_layers {
            return Err(bad(format!("adapter block {name} has the wrong shape")));
        }
        state.adapters.insert(
            ModuleId(id),
            Adapter {
                id: ModuleId(id),
                layer,
                width: config.hidden_width,
                bottleneck: config.adapter_bottleneck,
                params: values,
            },
        );
    }
    Ok(state)
}

pub fn save(state: &ModelState, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelState> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelState {
        let cfg = BackboneConfig {
            num_layers: 1,
            hidden_width: 8,
            num_heads: 2,
            ffn_width: 8,
            vocab_size: 20,
            max_sequence_length: 6,
            adapter_bottleneck: 2,
        };
        let mut s = ModelState::new(Backbone::new_random(cfg, 3).unwrap());
        s.adapters.insert(ModuleId(4), Adapter::new_random(ModuleId(4), 0, 8, 2, 9));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = small();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&small(), &mut buf).unwrap();
        buf[4] = 9;
        let err = read_checkpoint(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&small(), &mut buf).unwrap();
        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
