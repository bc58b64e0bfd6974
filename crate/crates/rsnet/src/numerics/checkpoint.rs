//! Bit-exact binary checkpoints for a [`ParamStore`].
//!
//! Layout (all integers little-endian):
//!   magic "RSNETCK1" · u32 entry count · per entry:
//!   u32 name length · name bytes (UTF-8) · u32 rank · rank × u64 extents ·
//!   values as raw f64 bits.
//!
//! Loading requires the target store to have exactly the same entries in the
//! same order with the same shapes; values are restored bit-for-bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::numel;

const MAGIC: &[u8; 8] = b"RSNETCK1";

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let emit = |w: &mut BufWriter<fs::File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(&tmp, e))
        };
        emit(&mut w, MAGIC)?;
        emit(&mut w, &(store.len() as u32).to_le_bytes())?;
        for (_, name, tensor) in store.iter() {
            emit(&mut w, &(name.len() as u32).to_le_bytes())?;
            emit(&mut w, name.as_bytes())?;
            emit(&mut w, &(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                emit(&mut w, &(d as u64).to_le_bytes())?;
            }
            for &v in tensor.values() {
                emit(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Restore values into a store built with the identical architecture.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(8)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = cur.u32()? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: holds {count} parameters, model has {}",
            path.display(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("{}: malformed name", path.display())))?
            .to_string();
        if name != store.name(id) {
            return Err(Error::Checkpoint(format!(
                "{}: parameter `{name}` where model expects `{}`",
                path.display(),
                store.name(id)
            )));
        }
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        if shape != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{}: `{name}` has shape {shape:?}, model expects {:?}",
                path.display(),
                store.get(id).shape()
            )));
        }
        let n = numel(&shape);
        let raw = cur.take(n * 8)?;
        let tensor = store.get_mut(id);
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            let v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "{}: `{name}` holds a non-finite value",
                    path.display()
                )));
            }
            tensor.values_mut()[i] = v;
        }
    }
    if !cur.done() {
        return Err(Error::Checkpoint(format!(
            "{}: trailing bytes after last parameter",
            path.display()
        )));
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, at: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::init_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        store
            .add("enc.w", init_normal(&mut rng, vec![4, 3], 0.02))
            .unwrap();
        store
            .add("enc.b", init_normal(&mut rng, vec![3], 0.02))
            .unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let saved = build(1);
        save(&saved, &path).unwrap();
        let mut loaded = build(2);
        load_into(&mut loaded, &path).unwrap();
        for ((_, _, a), (_, _, b)) in saved.iter().zip(loaded.iter()) {
            let ab: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&build(1), &path).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut other_name = ParamStore::new();
        other_name
            .add("dec.w", init_normal(&mut rng, vec![4, 3], 0.02))
            .unwrap();
        other_name
            .add("enc.b", init_normal(&mut rng, vec![3], 0.02))
            .unwrap();
        assert!(load_into(&mut other_name, &path).is_err());

        let mut other_shape = ParamStore::new();
        other_shape
            .add("enc.w", init_normal(&mut rng, vec![3, 4], 0.02))
            .unwrap();
        other_shape
            .add("enc.b", init_normal(&mut rng, vec![3], 0.02))
            .unwrap();
        assert!(load_into(&mut other_shape, &path).is_err());

        let mut other_count = ParamStore::new();
        other_count
            .add("enc.w", init_normal(&mut rng, vec![4, 3], 0.02))
            .unwrap();
        assert!(load_into(&mut other_count, &path).is_err());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&build(1), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&path, &bytes).unwrap();
        assert!(load_into(&mut build(1), &path).is_err());

        fs::write(&path, b"JUNKJUNK").unwrap();
        assert!(load_into(&mut build(1), &path).is_err());
    }
}
