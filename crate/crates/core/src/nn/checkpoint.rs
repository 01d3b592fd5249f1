//! Weight files: magic "MUCW", version, named tensor blocks, then optimizer state.

use std::path::Path;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{MucError, Result};
use crate::nn::adam::AdamState;
use crate::nn::params::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &str = "MUCW";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(w: &mut Writer, name: &str, t: &Tensor) {
    w.str(name);
    w.u32(t.shape.len() as u32);
    for &d in &t.shape {
        w.u64(d as u64);
    }
    w.f64s(t.data.iter().copied());
}

fn read_tensor(r: &mut Reader) -> Result<(String, Tensor)> {
    let name = r.str()?;
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64()? as usize);
    }
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| MucError::Format(format!("tensor {name} too large")))?;
    let data = r.f64s(n)?;
    Ok((name, Tensor { shape, data }))
}

pub fn checkpoint_to_bytes(store: &ParamStore, adam: Option<&AdamState>) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC.as_bytes());
    w.u32(CHECKPOINT_VERSION);
    w.u32(store.len() as u32);
    for (name, t) in store.iter() {
        write_tensor(&mut w, name, t);
    }
    match adam {
        None => w.u32(0),
        Some(a) => {
            w.u32(1);
            w.f64s([a.lr, a.beta1, a.beta2, a.eps]);
            w.u64(a.step);
            for ((name, t), (m, v)) in store.iter().zip(a.m.iter().zip(&a.v)) {
                write_tensor(&mut w, &format!("{name}.adam_m"), &Tensor { shape: t.shape.clone(), data: m.clone() });
                write_tensor(&mut w, &format!("{name}.adam_v"), &Tensor { shape: t.shape.clone(), data: v.clone() });
            }
        }
    }
    w.buf
}

/// Parses a checkpoint into `store`, whose names and shapes must match exactly.
pub fn checkpoint_from_bytes(data: &[u8], store: &mut ParamStore) -> Result<Option<AdamState>> {
    let mut r = Reader::new(data, "checkpoint");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(MucError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()? as usize;
    if count != store.len() {
        return Err(MucError::CheckpointMismatch(format!("{count} tensors in file, network has {}", store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    let mut loaded = Vec::with_capacity(count);
    for &id in &ids {
        let (name, t) = read_tensor(&mut r)?;
        if name != store.name(id) || t.shape != store.get(id).shape {
            return Err(MucError::CheckpointMismatch(format!(
                "tensor {name} {:?} where network expects {} {:?}",
                t.shape,
                store.name(id),
                store.get(id).shape
            )));
        }
        loaded.push(t);
    }
    let adam = match r.u32()? {
        0 => None,
        1 => {
            let h = r.f64s(4)?;
            let step = r.u64()?;
            let mut a = AdamState { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3], step, m: Vec::new(), v: Vec::new() };
            for (id, t) in ids.iter().zip(&loaded) {
                for slot in [&mut a.m, &mut a.v] {
                    let (name, mt) = read_tensor(&mut r)?;
                    if !name.starts_with(store.name(*id)) || mt.shape != t.shape {
                        return Err(MucError::CheckpointMismatch(format!("optimizer block {name}")));
                    }
                    slot.push(mt.data);
                }
            }
            Some(a)
        }
        other => return Err(MucError::Format(format!("optimizer flag {other}"))),
    };
    r.finish()?;
    for (id, t) in ids.into_iter().zip(loaded) {
        *store.get_mut(id) = t;
    }
    Ok(adam)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
    write_file(path, &checkpoint_to_bytes(store, adam))
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<Option<AdamState>> {
    checkpoint_from_bytes(&read_file(path)?, store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("layer.w", Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, 1e-300]));
        s.add("layer.b", Tensor::new(&[2], vec![0.25, f64::MIN_POSITIVE]));
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let s = store();
        let mut a = AdamState::new(&s, 1e-3);
        a.step = 7;
        a.m[0][1] = 0.5;
        a.v[1][0] = 2.0;
        let bytes = checkpoint_to_bytes(&s, Some(&a));
        let mut t = store();
        t.get_mut(t.find("layer.b").unwrap()).data = vec![0.0, 0.0];
        let back = checkpoint_from_bytes(&bytes, &mut t).unwrap().unwrap();
        assert_eq!(t, s);
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_mismatched_network() {
        let bytes = checkpoint_to_bytes(&store(), None);
        let mut other = ParamStore::new();
        other.add("layer.w", Tensor::zeros(&[3, 2]));
        other.add("layer.b", Tensor::zeros(&[2]));
        assert!(matches!(checkpoint_from_bytes(&bytes, &mut other), Err(MucError::CheckpointMismatch(_))));
        let mut s = store();
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3], &mut s), Err(MucError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad, &mut s), Err(MucError::BadMagic { .. })));
    }
}
