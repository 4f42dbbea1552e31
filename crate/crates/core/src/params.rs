//! Named parameter storage shared by every learnable (and frozen) component,
//! with bit-exact checksums and a little-endian binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian u64 unless noted):
//!   magic "PCPT0001" (8 bytes)
//!   param count
//!   per param: name length, name bytes (UTF-8), trainable flag (u8),
//!              ndim, dims..., values as little-endian f64

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PCPT0001";

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Ordered name -> parameter map. Names are dotted paths whose first segment
/// is the owning component ("backbone.", "perceiver.", ...), which is what
/// stage-wise freezing filters on.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>, trainable: bool) {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "param data does not match shape");
        self.params.insert(name.into(), Param { shape, values, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Names under a dotted component prefix, e.g. `with_prefix("perceiver")`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.params
            .keys()
            .filter(move |n| n.split('.').next() == Some(prefix))
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(Param::numel).sum()
    }

    /// Snapshot as gradient-checker inputs, optionally restricted by prefix.
    pub fn to_check_params(&self, prefix: &str) -> Vec<crate::numcore::CheckParam> {
        self.params
            .iter()
            .filter(|(n, _)| prefix.is_empty() || n.split('.').next() == Some(prefix))
            .map(|(n, p)| crate::numcore::CheckParam::new(n.clone(), p.shape.clone(), p.values.clone()))
            .collect()
    }

    /// FNV-1a over the exact f64 bit patterns of every parameter under the
    /// prefix (all parameters when prefix is empty). Bit-identical values
    /// give identical checksums; any single-bit change does not.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, param) in &self.params {
            if !prefix.is_empty() && name.split('.').next() != Some(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for &v in &param.values {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, param) in &self.params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(param.trainable as u8);
            out.extend_from_slice(&(param.shape.len() as u64).to_le_bytes());
            for &d in &param.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &param.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        let magic = cursor.take(8)?;
        if magic != MAGIC {
            return Err(Error::data("bad checkpoint magic".to_string()));
        }
        let count = cursor.u64()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = cursor.u64()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| Error::data(format!("bad parameter name: {e}")))?;
            let trainable = cursor.take(1)?[0] != 0;
            let ndim = cursor.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cursor.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = cursor.take(8)?;
                values.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            set.insert(name, shape, values, trainable);
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
            .map_err(|e| Error::data(format!("{} while reading {}", e, path.display())))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data("truncated checkpoint".to_string()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Name -> tape-node mapping for one recorded forward pass. Parameters are
/// re-inserted as leaves on every fresh tape; gradients are read back by
/// name after `backward`.
#[derive(Debug, Clone)]
pub struct TapeBinding {
    map: BTreeMap<String, crate::numcore::TensorId>,
}

impl TapeBinding {
    /// Insert every param as a constant leaf (inference).
    pub fn bind_frozen(tape: &mut crate::numcore::Tape, set: &ParamSet) -> Result<Self> {
        Self::bind(tape, set, &std::collections::BTreeSet::new())
    }

    /// Insert every param as a leaf; those named in `trainable` require grad.
    pub fn bind(
        tape: &mut crate::numcore::Tape,
        set: &ParamSet,
        trainable: &std::collections::BTreeSet<String>,
    ) -> Result<Self> {
        Self::bind_many(tape, &[set], trainable)
    }

    /// Bind several components' parameter sets into one name space.
    pub fn bind_many(
        tape: &mut crate::numcore::Tape,
        sets: &[&ParamSet],
        trainable: &std::collections::BTreeSet<String>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        for set in sets {
            for (name, p) in set.iter() {
                let id = tape.leaf(p.values.clone(), p.shape.clone(), trainable.contains(name))?;
                if map.insert(name.clone(), id).is_some() {
                    return Err(Error::config(format!("duplicate parameter name {name:?}")));
                }
            }
        }
        Ok(TapeBinding { map })
    }

    /// Pair pre-inserted tape nodes with names (used by gradient checking,
    /// where the harness owns leaf insertion).
    pub fn from_pairs<'a>(
        names: impl IntoIterator<Item = &'a str>,
        ids: &[crate::numcore::TensorId],
    ) -> Self {
        let map = names
            .into_iter()
            .zip(ids.iter().copied())
            .map(|(n, id)| (n.to_string(), id))
            .collect();
        TapeBinding { map }
    }

    pub fn id(&self, name: &str) -> Result<crate::numcore::TensorId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unbound parameter {name:?}")))
    }

    /// Gradients accumulated on bound leaves, keyed by name.
    pub fn read_grads(&self, tape: &crate::numcore::Tape) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }
}

/// Seeded normal(0, std) init. ChaCha8 keeps the stream portable.
pub fn normal_init(seed: u64, std: f64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("valid normal params");
    (0..count).map(|_| dist.sample(&mut rng)).collect()
}

/// splitmix64 finalizer: a fixed pseudo-random function of its input.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic value in (-1, 1) keyed by an arbitrary tuple hash.
pub fn unit_value(key: u64) -> f64 {
    // 53 mantissa bits -> uniform in [0, 1), then shift to (-1, 1).
    let u = (mix64(key) >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * u - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_changes_with_any_value() {
        let mut a = ParamSet::new();
        a.insert("backbone.w", vec![2], vec![1.0, 2.0], false);
        let before = a.checksum("backbone");
        a.get_mut("backbone.w").unwrap().values[1] = 2.0000000000000004;
        assert_ne!(before, a.checksum("backbone"));
    }

    #[test]
    fn checksum_prefix_isolation() {
        let mut a = ParamSet::new();
        a.insert("backbone.w", vec![1], vec![1.0], false);
        a.insert("perceiver.w", vec![1], vec![5.0], true);
        let backbone = a.checksum("backbone");
        a.get_mut("perceiver.w").unwrap().values[0] = -5.0;
        assert_eq!(backbone, a.checksum("backbone"));
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut set = ParamSet::new();
        set.insert("decoder.emb", vec![2, 3], vec![0.1, -0.2, 0.3, 1e-300, -0.0, 7.5], true);
        set.insert("backbone.freq", vec![2], vec![3.5, -1.25], false);
        set.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(loaded.checksum(""), set.checksum(""));
        assert_eq!(loaded.get("decoder.emb").unwrap().trainable, true);
        assert_eq!(loaded.get("backbone.freq").unwrap().shape, vec![2]);
    }

    #[test]
    fn normal_init_is_deterministic() {
        assert_eq!(normal_init(7, 0.02, 32), normal_init(7, 0.02, 32));
        assert_ne!(normal_init(7, 0.02, 32), normal_init(8, 0.02, 32));
    }

    #[test]
    fn unit_value_spreads() {
        let distinct: std::collections::BTreeSet<u64> =
            (0..100u64).map(|k| unit_value(k).to_bits()).collect();
        assert_eq!(distinct.len(), 100);
        assert!((0..100u64).all(|k| unit_value(k).abs() < 1.0));
    }
}
