use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::features::Standardizer;

const MAGIC: &[u8; 4] = b"BHM1";
const VERSION: u32 = 1;

/// Free-form context stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Class names in output order.
    pub labels: Vec<String>,
    pub task: Option<String>,
    pub config_mode: Option<String>,
    /// Time pooling factor applied to features before the network.
    pub pool: usize,
    pub standardizer: Option<Standardizer>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    spec: NetworkSpec,
    num_params: usize,
    meta: CheckpointMeta,
}

/// Writes `BHM1`, a length-prefixed JSON header and the parameters as LE `f32`.
pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let header = Header {
        version: VERSION,
        spec: net.spec().clone(),
        num_params: net.num_params(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for &p in net.params() {
        w.write_all(&(p as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, CheckpointMeta)> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let truncated = |_| Error::Checkpoint("truncated file".into());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(truncated)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(truncated)?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file {}, reader {VERSION}",
            header.version
        )));
    }
    let mut bytes = vec![0u8; 4 * header.num_params];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let net = Network::from_params(header.spec, params)
        .map_err(|e| Error::Checkpoint(format!("parameters do not fit spec: {e}")))?;
    Ok((net, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bhm");
        let mut net = Network::new(NetworkSpec::model2(9, 4), 3).unwrap();
        for p in net.params_mut() {
            *p = *p as f32 as f64;
        }
        let meta = CheckpointMeta {
            seed: 3,
            labels: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            pool: 8,
            ..Default::default()
        };
        save_checkpoint(&net, &meta, &path).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.spec(), net.spec());
        assert_eq!(m, meta);
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        assert!(size > 4 * net.num_params());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
