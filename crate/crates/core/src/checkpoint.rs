//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic "TDCNCKPT" | u32 version | u32 epoch
//! u32 len | model config as TOML
//! u32 count | count × (u32 len | name | u8 trainable | u32 ndim | ndim × u64 | f64 data)
//! u32 count | count × (u32 len | cue name | u64 width | width × f64 mean | width × f64 std)
//! ```
//!
//! Tensors appear in declaration order, so identical parameters always
//! encode to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::model::{Cue, ModelConfig, Network};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TDCNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Epoch the parameters were taken from.
    pub epoch: u32,
    pub params: ParamStore,
    pub normalization: BTreeMap<Cue, NormalizationStats>,
}

impl Checkpoint {
    pub fn from_network(
        network: &Network,
        epoch: u32,
        normalization: BTreeMap<Cue, NormalizationStats>,
    ) -> Self {
        Self {
            config: network.config().clone(),
            epoch,
            params: network.params().clone(),
            normalization,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.epoch);
        let config = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_bytes(&mut out, config.as_bytes());

        put_u32(&mut out, self.params.len() as u32);
        for entry in self.params.entries() {
            put_bytes(&mut out, entry.name.as_bytes());
            out.push(u8::from(entry.trainable()));
            put_u32(&mut out, entry.tensor.ndim() as u32);
            for &d in entry.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, entry.tensor.data());
        }

        put_u32(&mut out, self.normalization.len() as u32);
        for (cue, stats) in &self.normalization {
            put_bytes(&mut out, cue.name().as_bytes());
            out.extend_from_slice(&(stats.mean.len() as u64).to_le_bytes());
            put_f64s(&mut out, &stats.mean);
            put_f64s(&mut out, &stats.std);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let epoch = r.u32()?;
        let text = r.string()?;
        let mut config: ModelConfig =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;

        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}`: bad trainable flag {other}"
                    )))
                }
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: shape overflow")))?;
            let tensor = Tensor::new(&shape, r.f64s(numel)?)?;
            if trainable {
                params.add_trainable(name, tensor);
            } else {
                params.add_buffer(name, tensor);
            }
        }

        let mut normalization = BTreeMap::new();
        for _ in 0..r.u32()? {
            let cue: Cue = r.string()?.parse()?;
            let width = r.len()?;
            let mean = r.f64s(width)?;
            let std = r.f64s(width)?;
            normalization.insert(cue, NormalizationStats { mean, std });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            epoch,
            params,
            normalization,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the network described by the checkpoint.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.clone(), 0)?;
        net.load_params(self.params.clone())?;
        Ok(net)
    }
}

/// Fails with a message naming the first architectural difference between
/// the configuration a checkpoint was trained with and the one requested.
pub fn ensure_compatible(checkpoint: &ModelConfig, requested: &ModelConfig) -> Result<()> {
    let mismatch = |what: String| Err(Error::CheckpointMismatch(what));
    if checkpoint.cues() != requested.cues() {
        return mismatch(format!(
            "cues: checkpoint {:?}, config {:?}",
            names(&checkpoint.cues()),
            names(&requested.cues())
        ));
    }
    for (a, b) in checkpoint.branches.iter().zip(&requested.branches) {
        if a.widths != b.widths {
            return mismatch(format!(
                "widths of branch `{}`: checkpoint {:?}, config {:?}",
                a.cue, a.widths, b.widths
            ));
        }
        if a.input_dim != b.input_dim {
            return mismatch(format!(
                "input width of branch `{}`: checkpoint {}, config {}",
                a.cue, a.input_dim, b.input_dim
            ));
        }
    }
    macro_rules! field {
        ($f:ident) => {
            if checkpoint.$f != requested.$f {
                return mismatch(format!(
                    "{}: checkpoint {:?}, config {:?}",
                    stringify!($f),
                    checkpoint.$f,
                    requested.$f
                ));
            }
        };
    }
    field!(sequence_length);
    field!(classifier_dims);
    field!(attention_reduction);
    field!(pooling);
    field!(kernel_size);
    field!(fusion);
    field!(backbone);
    field!(tcn_width);
    Ok(())
}

fn names(cues: &[Cue]) -> Vec<&'static str> {
    cues.iter().map(|c| c.name()).collect()
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BranchConfig;
    use crate::nn::PoolKind;

    fn tiny() -> ModelConfig {
        ModelConfig {
            sequence_length: 16,
            branches: vec![
                BranchConfig {
                    cue: Cue::Landmarks2d,
                    input_dim: 3,
                    widths: vec![4; 5],
                },
                BranchConfig {
                    cue: Cue::Pose,
                    input_dim: 2,
                    widths: vec![3, 3, 3, 3, 4],
                },
            ],
            classifier_dims: vec![4, 2],
            attention_reduction: 2,
            pooling: PoolKind::Max,
            ..ModelConfig::default()
        }
    }

    fn sample() -> Checkpoint {
        let net = Network::new(tiny(), 7).unwrap();
        let stats = NormalizationStats {
            mean: vec![0.5, -1.0],
            std: vec![1.0, 2.0],
        };
        Checkpoint::from_network(&net, 3, BTreeMap::from([(Cue::Pose, stats)]))
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.encode().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode().unwrap(), bytes);
        let net = back.network().unwrap();
        assert_eq!(net.params(), &ckpt.params);
    }

    #[test]
    fn encoding_is_deterministic() {
        assert_eq!(sample().encode().unwrap(), sample().encode().unwrap());
    }

    #[test]
    fn rejects_foreign_and_future_files() {
        let mut bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(b"not a checkpoint")
            .unwrap_err()
            .to_string()
            .contains("not a checkpoint"));
        bytes[8] = 9;
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let bytes = sample().encode().unwrap();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long)
            .unwrap_err()
            .to_string()
            .contains("trailing"));
    }

    #[test]
    fn width_mismatch_is_named() {
        let mut other = tiny();
        other.branches[0].widths = vec![8, 8, 8, 8, 4];
        let err = ensure_compatible(&tiny(), &other).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
        assert!(
            err.to_string().contains("widths of branch `landmarks2d`"),
            "{err}"
        );

        let mut pooled = tiny();
        pooled.pooling = PoolKind::Average;
        assert!(ensure_compatible(&tiny(), &pooled)
            .unwrap_err()
            .to_string()
            .contains("pooling"));

        let single = tiny().with_cues(&[Cue::Pose]).unwrap();
        assert!(ensure_compatible(&tiny(), &single)
            .unwrap_err()
            .to_string()
            .contains("cues"));
        assert!(ensure_compatible(&tiny(), &tiny()).is_ok());
    }

    #[test]
    fn loading_into_a_different_network_fails() {
        let mut other = tiny();
        other.branches[1].widths = vec![5, 5, 5, 5, 4];
        let mut net = Network::new(other, 0).unwrap();
        let err = net.load_params(sample().params).unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }
}
