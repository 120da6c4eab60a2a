//! Checkpoint serialization.
//!
//! Binary, little-endian, bit-exact round trip. Layout (all integers LE):
//!
//! ```text
//! magic            4 bytes   b"VLMF"
//! format version   u32       currently 1
//! config length    u32       followed by that many bytes of UTF-8 JSON
//! step counter     u64
//! tensor count     u32
//!   per tensor:
//!     name length  u32       followed by UTF-8 name bytes
//!     ndim         u32
//!     dims         ndim x u64
//!     data         numel x f64 (IEEE-754 bit pattern, little-endian)
//! optimizer flag   u8        0 = absent, 1 = present
//!   if present:
//!     opt config   u32 length + UTF-8 JSON (OptimConfig)
//!     step count   u64
//!     m buffers    u32 count, then per buffer: name, u64 length, f64 data
//!     v buffers    same encoding
//! ```
//!
//! Values are stored as raw f64 bit patterns, so save -> load -> save produces
//! byte-identical files and reloaded parameters are bit-equal to the originals.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamW, OptimConfig, Parameters, Tensor};

const MAGIC: &[u8; 4] = b"VLMF";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Deserialized checkpoint contents.
pub struct Checkpoint {
    pub format_version: u32,
    /// Model configuration as the JSON it was saved with.
    pub config_json: String,
    /// Training step counter at save time.
    pub step: u64,
    /// Named tensors: shape + values.
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub optim: Option<OptimState>,
}

/// Optimizer state captured in a checkpoint.
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step_count: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn into_adamw(self) -> AdamW {
        AdamW::restore(self.cfg, self.step_count, self.m, self.v)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn write_f64s(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    config_json: &str,
    params: &Parameters,
    optim: Option<&AdamW>,
    step: u64,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_bytes(&mut w, config_json.as_bytes())?;
    w.write_all(&step.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        write_bytes(&mut w, name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, &t.data())?;
    }
    match optim {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            let cfg = serde_json::to_string(&opt.cfg)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            write_bytes(&mut w, cfg.as_bytes())?;
            w.write_all(&opt.step_count.to_le_bytes())?;
            for buffers in [&opt.m, &opt.v] {
                w.write_all(&(buffers.len() as u32).to_le_bytes())?;
                for (name, data) in buffers {
                    write_bytes(&mut w, name.as_bytes())?;
                    w.write_all(&(data.len() as u64).to_le_bytes())?;
                    write_f64s(&mut w, data)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        let mut b = [0u8; 1];
        self.r.read_exact(&mut b)?;
        Ok(b[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.r.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            self.r.read_exact(&mut b)?;
            out.push(f64::from_le_bytes(b));
        }
        Ok(out)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader {
        r: BufReader::new(File::open(path)?),
    };
    let mut magic = [0u8; 4];
    r.r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(format_version));
    }
    let config_json = r.string()?;
    let step = r.u64()?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        tensors.insert(name, (shape, data));
    }
    let optim = match r.u8()? {
        0 => None,
        1 => {
            let cfg: OptimConfig = serde_json::from_str(&r.string()?)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let step_count = r.u64()?;
            let mut buffers = [BTreeMap::new(), BTreeMap::new()];
            for b in buffers.iter_mut() {
                let count = r.u32()? as usize;
                for _ in 0..count {
                    let name = r.string()?;
                    let len = r.u64()? as usize;
                    b.insert(name, r.f64s(len)?);
                }
            }
            let [m, v] = buffers;
            Some(OptimState {
                cfg,
                step_count,
                m,
                v,
            })
        }
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        format_version,
        config_json,
        step,
        tensors,
        optim,
    })
}

impl Checkpoint {
    /// Rebuilds a [`Parameters`] set from the stored tensors.
    pub fn to_parameters(&self) -> Parameters {
        let mut p = Parameters::new();
        for (name, (shape, data)) in &self.tensors {
            p.insert(name, Tensor::param(data.clone(), shape));
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("vlmforge-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");

        let mut rng = crate::rng::stream_rng(&[1, 2, 3]);
        let mut params = Parameters::new();
        let data: Vec<f64> = (0..64).map(|_| rng.gen::<f64>() * 2e3 - 1e3).collect();
        params.insert("layer.w", Tensor::param(data.clone(), &[8, 8]));
        params.insert("layer.b", Tensor::param(vec![1e-300, -0.0, 5.5], &[3]));

        let mut opt = AdamW::new(OptimConfig::default());
        // touch the optimizer so it has non-trivial state
        params.get("layer.w").gather_rows(&[0]).sum().backward();
        opt.step(&mut params);

        save_checkpoint(&path, "{\"c\":1}", &params, Some(&opt), 7).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.step, 7);
        assert_eq!(ck.config_json, "{\"c\":1}");
        let (shape, loaded) = &ck.tensors["layer.w"];
        assert_eq!(shape, &vec![8, 8]);
        let now = params.get("layer.w").value();
        assert!(loaded.iter().zip(&now).all(|(a, b)| a.to_bits() == b.to_bits()));
        // subnormal-adjacent and signed-zero values survive exactly, even after
        // the optimizer's decay pass nudged them
        let (_, b) = &ck.tensors["layer.b"];
        let live = params.get("layer.b").value();
        assert!(b.iter().zip(&live).all(|(a, c)| a.to_bits() == c.to_bits()));
        assert!(b[0] != 0.0 && b[0].abs() < 1e-299);
        assert!(live[1] == 0.0);

        let opt2 = ck.optim.unwrap();
        assert_eq!(opt2.step_count, 1);
        assert!(opt2.m["layer.w"]
            .iter()
            .zip(&opt.m["layer.w"])
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // save -> load -> save byte-identity
        let path2 = dir.join("t2.ckpt");
        let reloaded = load_checkpoint(&path).unwrap();
        save_checkpoint(
            &path2,
            &reloaded.config_json,
            &reloaded.to_parameters(),
            Some(&AdamW::restore(
                opt.cfg.clone(),
                opt2.step_count,
                opt2.m,
                opt2.v,
            )),
            reloaded.step,
        )
        .unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        let dir = std::env::temp_dir().join(format!("vlmforge-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VLMF");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion(99))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
