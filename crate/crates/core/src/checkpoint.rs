//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "UPDM" | version: u32 | provenance_len: u64 | provenance (JSON)
//!        | tensor_count: u64
//!        | { name_len: u32 | name | ndim: u32 | dims: u64 × ndim | values: f64 × Π dims }*
//!        | sha256 of every preceding byte (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::evaluation::ConceptClassifier;
use crate::model::{hex, DenoiserModel, ModelConfig};
use crate::restoration::{Candidate, CandidateSet};
use crate::tensor::Param;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UPDM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Content hashes of the checkpoints this one was derived from.
    pub parents: Vec<String>,
    /// Hash of everything the producing stage read; drives stage skipping.
    pub input_hash: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Corrupt("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let prov = serde_json::to_vec(&self.provenance)?;
        out.extend_from_slice(&(prov.len() as u64).to_le_bytes());
        out.extend_from_slice(&prov);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Version("missing UPDM magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::Corrupt("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt("content hash mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let plen = r.len()?;
        let provenance: Provenance =
            serde_json::from_slice(r.take(plen)?).map_err(|e| Error::Corrupt(format!("provenance: {e}")))?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Corrupt("tensor name".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Corrupt("shape overflow".into()))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Corrupt("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes".into()));
        }
        Ok(Self { provenance, tensors })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_bytes()?)))
    }

    /// Writes atomically and returns the content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("updm.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(hex(&Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of a checkpoint file on disk.
    pub fn file_hash(path: &Path) -> Result<String> {
        Ok(hex(&Sha256::digest(std::fs::read(path)?)))
    }
}

fn params_into(ckpt: &mut Checkpoint, prefix: &str, params: &[Param]) {
    for p in params {
        ckpt.push(format!("{prefix}{}", p.name), &p.shape, p.data.clone());
    }
}

fn params_from(ckpt: &Checkpoint, prefix: &str, template: &[Param]) -> Result<Vec<Param>> {
    template
        .iter()
        .map(|p| {
            let t = ckpt.tensor(&format!("{prefix}{}", p.name))?;
            if t.shape != p.shape {
                return Err(Error::Corrupt(format!("tensor `{}` has shape {:?}", t.name, t.shape)));
            }
            Ok(Param::new(&p.name, &t.shape, t.data.clone()))
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &DenoiserModel, mut provenance: Provenance) -> Result<Self> {
        set_meta(&mut provenance, "model_config", serde_json::to_value(&model.config)?);
        let mut c = Checkpoint::new(provenance);
        params_into(&mut c, "", model.params());
        Ok(c)
    }

    pub fn to_model(&self) -> Result<DenoiserModel> {
        let cfg: ModelConfig = serde_json::from_value(meta(&self.provenance, "model_config")?)?;
        let mut m = DenoiserModel::new(&cfg, &mut crate::rng::Stream::new(0));
        let params = params_from(self, "", m.params())?;
        m.set_params(params)?;
        Ok(m)
    }

    pub fn from_classifier(clf: &ConceptClassifier, mut provenance: Provenance) -> Result<Self> {
        set_meta(
            &mut provenance,
            "classifier",
            serde_json::json!({
                "num_classes": clf.num_classes,
                "final_loss": clf.final_loss,
                "holdout_accuracy": clf.holdout_accuracy,
                "shapes": clf.params.iter().map(|p| (&p.name, &p.shape)).collect::<Vec<_>>(),
            }),
        );
        let mut c = Checkpoint::new(provenance);
        params_into(&mut c, "", &clf.params);
        Ok(c)
    }

    pub fn to_classifier(&self) -> Result<ConceptClassifier> {
        #[derive(Deserialize)]
        struct Meta {
            num_classes: usize,
            final_loss: f64,
            holdout_accuracy: f64,
            shapes: Vec<(String, Vec<usize>)>,
        }
        let m: Meta = serde_json::from_value(meta(&self.provenance, "classifier")?)?;
        let template: Vec<Param> = m
            .shapes
            .iter()
            .map(|(n, s)| Param::new(n, s, vec![0.0; s.iter().product()]))
            .collect();
        Ok(ConceptClassifier {
            num_classes: m.num_classes,
            params: params_from(self, "", &template)?,
            final_loss: m.final_loss,
            holdout_accuracy: m.holdout_accuracy,
        })
    }

    pub fn from_candidates(set: &CandidateSet, mut provenance: Provenance) -> Result<Self> {
        let header = CandidateSet {
            entries: Vec::new(),
            ..set.clone()
        };
        set_meta(&mut provenance, "candidates", serde_json::to_value(&header)?);
        let d = set.entries.first().map_or(0, |c| c.embedding.len());
        let mut c = Checkpoint::new(provenance);
        c.push(
            "candidates/embedding",
            &[set.len(), d],
            set.entries.iter().flat_map(|c| c.embedding.iter().copied()).collect(),
        );
        c.push("candidates/loss", &[set.len()], set.entries.iter().map(|c| c.loss).collect());
        c.push(
            "candidates/epoch",
            &[set.len()],
            set.entries.iter().map(|c| c.epoch as f64).collect(),
        );
        Ok(c)
    }

    pub fn to_candidates(&self) -> Result<CandidateSet> {
        let mut set: CandidateSet = serde_json::from_value(meta(&self.provenance, "candidates")?)?;
        let emb = self.tensor("candidates/embedding")?;
        let loss = self.tensor("candidates/loss")?;
        let epoch = self.tensor("candidates/epoch")?;
        let (n, d) = (emb.shape[0], emb.shape.get(1).copied().unwrap_or(0));
        if loss.data.len() != n || epoch.data.len() != n {
            return Err(Error::Corrupt("candidate tensors disagree in length".into()));
        }
        set.entries = (0..n)
            .map(|i| Candidate {
                epoch: epoch.data[i] as usize,
                embedding: emb.data[i * d..(i + 1) * d].to_vec(),
                loss: loss.data[i],
            })
            .collect();
        Ok(set)
    }

    /// Labeled embeddings stored one tensor each.
    pub fn from_embeddings(items: &[(String, Vec<f64>)], provenance: Provenance) -> Self {
        let mut c = Checkpoint::new(provenance);
        for (name, v) in items {
            c.push(name.clone(), &[v.len()], v.clone());
        }
        c
    }

    pub fn to_embeddings(&self) -> Vec<(String, Vec<f64>)> {
        self.tensors.iter().map(|t| (t.name.clone(), t.data.clone())).collect()
    }
}

fn set_meta(p: &mut Provenance, key: &str, value: serde_json::Value) {
    if !p.metadata.is_object() {
        p.metadata = serde_json::Value::Object(Default::default());
    }
    p.metadata
        .as_object_mut()
        .expect("object")
        .insert(key.to_string(), value);
}

fn meta(p: &Provenance, key: &str) -> Result<serde_json::Value> {
    p.metadata
        .get(key)
        .cloned()
        .ok_or_else(|| Error::Corrupt(format!("provenance lacks `{key}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn prov() -> Provenance {
        Provenance {
            stage: "train-base".into(),
            config_hash: "abc".into(),
            seed: 7,
            parents: vec!["p0".into()],
            input_hash: "in".into(),
            metadata: serde_json::Value::Null,
        }
    }

    fn model() -> DenoiserModel {
        let mut m = DenoiserModel::new(&ModelConfig::for_vocab(6), &mut Stream::new(4));
        // Values that a decimal round trip would not preserve.
        m.param_mut(crate::model::ParamId::HeadB).data[0] = 0.1 + 0.2;
        m.param_mut(crate::model::ParamId::HeadB).data[1] = f64::MIN_POSITIVE;
        m
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.updm");
        let m = model();
        let c = Checkpoint::from_model(&m, prov()).unwrap();
        let hash = c.save(&path).unwrap();
        assert_eq!(hash, Checkpoint::file_hash(&path).unwrap());
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let m2 = back.to_model().unwrap();
        assert_eq!(m2.checksum(), m.checksum());
        assert_eq!(back.provenance.parents, vec!["p0".to_string()]);
    }

    #[test]
    fn truncation_and_bit_flips_are_detected() {
        let bytes = Checkpoint::from_model(&model(), prov()).unwrap().to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 41, 9] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "{cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Corrupt(_))));
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut bytes = Checkpoint::from_model(&model(), prov()).unwrap().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(_))));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(_))));
    }

    #[test]
    fn candidates_round_trip() {
        let set = CandidateSet {
            entries: (0..3)
                .map(|i| Candidate {
                    epoch: i,
                    embedding: vec![i as f64 / 3.0; 4],
                    loss: 1.0 / (i as f64 + 3.0),
                })
                .collect(),
            config: Default::default(),
            target: 2,
            seed: 5,
            surrogate_checksum: "s".into(),
            final_surrogate_checksum: "f".into(),
            update_epochs: vec![0],
            param_trace: Vec::new(),
        };
        let c = Checkpoint::from_candidates(&set, prov()).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_candidates().unwrap(), set);
    }

    #[test]
    fn embeddings_round_trip() {
        let items = vec![("ti/base/0".to_string(), vec![0.5, -1.25]), ("ti/x/1".to_string(), vec![3.0, 1e-300])];
        let c = Checkpoint::from_embeddings(&items, prov());
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.to_embeddings(), items);
    }
}
