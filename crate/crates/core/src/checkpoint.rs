//! Binary encoder checkpoints.
//!
//! Layout: the 8-byte magic `SGUDACK1`, a little-endian `u64` header length,
//! a JSON header (model kind, encoder config, head sizes, array table), then
//! every array's values as little-endian `f64` in table order. Batch-norm
//! running statistics are stored as arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_file;
use crate::encoder::{EncoderConfig, SingleBranchEncoder, TwoBranchEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

const MAGIC: &[u8; 8] = b"SGUDACK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Single,
    TwoBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    encoder: EncoderConfig,
    source_classes: usize,
    target_classes: Option<usize>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug)]
pub enum Model {
    Single(SingleBranchEncoder),
    TwoBranch(TwoBranchEncoder),
}

fn encode(header: Header, arrays: &[(String, Matrix)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + arrays.iter().map(|(_, m)| 8 * m.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in arrays {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn table(arrays: &[(String, Matrix)]) -> Vec<ArrayEntry> {
    arrays
        .iter()
        .map(|(name, m)| ArrayEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect()
}

pub fn single_to_bytes(enc: &SingleBranchEncoder) -> Result<Vec<u8>> {
    let arrays = enc.arrays();
    let header = Header {
        kind: Kind::Single,
        encoder: enc.config.clone(),
        source_classes: enc.head.num_classes(),
        target_classes: None,
        arrays: table(&arrays),
    };
    encode(header, &arrays)
}

pub fn two_branch_to_bytes(enc: &TwoBranchEncoder) -> Result<Vec<u8>> {
    let arrays = enc.arrays();
    let header = Header {
        kind: Kind::TwoBranch,
        encoder: enc.config.clone(),
        source_classes: enc.source_head.num_classes(),
        target_classes: enc.target_head.as_ref().map(|h| h.num_classes()),
        arrays: table(&arrays),
    };
    encode(header, &arrays)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut offset = 16 + len;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in &header.arrays {
        let n = e.rows * e.cols;
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated array {}", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((e.name.clone(), Matrix::new(e.rows, e.cols, data)?));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after last array"));
    }

    // Build a skeleton with the right shapes, then overwrite every array.
    let mut rng = Rng::new(0);
    let mut single = SingleBranchEncoder::new(header.encoder.clone(), header.source_classes, &mut rng)?;
    match header.kind {
        Kind::Single => {
            single.load_arrays(&arrays)?;
            Ok(Model::Single(single))
        }
        Kind::TwoBranch => {
            let mut enc = TwoBranchEncoder::from_init(&single, header.encoder)?;
            if let Some(m) = header.target_classes {
                enc.reinit_target_head(m, &mut rng)?;
            }
            enc.load_arrays(&arrays)?;
            Ok(Model::TwoBranch(enc))
        }
    }
}

pub fn save_single(enc: &SingleBranchEncoder, path: &Path) -> Result<()> {
    write_file(path, &single_to_bytes(enc)?)
}

pub fn save_two_branch(enc: &TwoBranchEncoder, path: &Path) -> Result<()> {
    write_file(path, &two_branch_to_bytes(enc)?)
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BnMode;
    use crate::nn::{Domain, Mode};

    fn cfg(shared_depth: usize, bn_mode: BnMode) -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            block_dims: vec![5, 6, 5],
            embed_dim: 3,
            shared_depth,
            bn_mode,
        }
    }

    #[test]
    fn single_round_trip() {
        let mut rng = Rng::new(1);
        let mut enc = SingleBranchEncoder::new(cfg(1, BnMode::DomainSpecific), 4, &mut rng).unwrap();
        // move the running statistics away from their initial values
        enc.forward(&rng.gaussian_matrix(8, 4, 2.0), Mode::Train).unwrap();
        let bytes = single_to_bytes(&enc).unwrap();
        let Model::Single(back) = from_bytes(&bytes).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(single_to_bytes(&back).unwrap(), bytes);
        let x = rng.gaussian_matrix(5, 4, 1.0);
        assert_eq!(back.embed(&x).unwrap(), enc.embed(&x).unwrap());
    }

    #[test]
    fn two_branch_round_trip() {
        for (s, mode) in [
            (0, BnMode::DomainSpecific),
            (2, BnMode::DomainSpecific),
            (3, BnMode::DomainSpecific),
            (2, BnMode::Shared),
        ] {
            let mut rng = Rng::new(2);
            let c = cfg(s, mode);
            let init = SingleBranchEncoder::new(c.clone(), 4, &mut rng).unwrap();
            let mut enc = TwoBranchEncoder::from_init(&init, c).unwrap();
            enc.reinit_target_head(3, &mut rng).unwrap();
            enc.forward(&rng.gaussian_matrix(8, 4, 1.5), Domain::Target, Mode::Train)
                .unwrap();
            let bytes = two_branch_to_bytes(&enc).unwrap();
            let Model::TwoBranch(back) = from_bytes(&bytes).unwrap() else {
                panic!("wrong kind")
            };
            assert_eq!(two_branch_to_bytes(&back).unwrap(), bytes);
            let x = rng.gaussian_matrix(5, 4, 1.0);
            for d in Domain::ALL {
                assert_eq!(back.embed(&x, d).unwrap(), enc.embed(&x, d).unwrap());
            }
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut rng = Rng::new(3);
        let enc = SingleBranchEncoder::new(cfg(1, BnMode::DomainSpecific), 2, &mut rng).unwrap();
        let bytes = single_to_bytes(&enc).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes(b"NOTACKPT00000000").is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(from_bytes(&longer).is_err());
    }
}
