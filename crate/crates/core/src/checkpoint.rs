//! Binary checkpoints: an 8-byte magic, a little-endian `u32` header
//! length, a JSON header, then every array as little-endian `f64` in
//! header order (parameters, then Adam first and second moments).

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::AlignModel;
use crate::nn::{check_compatible, Params};
use crate::tensor::NdArray;
use crate::train::Adam;

const MAGIC: &[u8; 8] = b"MSHALGN\0";
pub const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry a full `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: Params,
    pub adam: Option<Adam>,
    pub step: u64,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: Config,
    step: u64,
    rng: Option<RngState>,
    adam: Option<AdamHeader>,
    arrays: Vec<ArrayEntry>,
}

impl Checkpoint {
    /// Rebuilds the model the checkpoint was taken from.
    pub fn model(&self) -> Result<AlignModel> {
        let mut m = AlignModel::new(self.config.model()?, self.config.seed)?;
        check_compatible(m.params(), &self.params)?;
        *m.params_mut() = self.params.clone();
        Ok(m)
    }
}

fn write_array(w: &mut impl Write, a: &NdArray) -> Result<()> {
    let mut buf = Vec::with_capacity(a.len() * 8);
    for v in a.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        config: ck.config.clone(),
        step: ck.step,
        rng: ck.rng.clone(),
        adam: ck.adam.as_ref().map(|a| AdamHeader {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
        }),
        arrays: ck
            .params
            .names()
            .iter()
            .zip(ck.params.values())
            .map(|(n, v)| ArrayEntry {
                name: n.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    // Write to a sibling file and rename so an interrupted save never
    // leaves a truncated checkpoint behind.
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(&json)?;
        for v in ck.params.values() {
            write_array(&mut w, v)?;
        }
        if let Some(a) = &ck.adam {
            for v in a.m.iter().chain(&a.v) {
                write_array(&mut w, v)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<NdArray> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint("file ends before all arrays were read".into()))?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    NdArray::new(shape, data)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ctx = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ctx("too short".into()))?;
    if &magic != MAGIC {
        return Err(ctx("not a meshalign checkpoint".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| ctx("too short".into()))?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json).map_err(|_| ctx("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| ctx(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ctx(format!("format version {} (expected {FORMAT_VERSION})", header.version)));
    }
    header.config.validate()?;
    let mut params = Params::new();
    for e in &header.arrays {
        params.insert(e.name.clone(), read_array(&mut r, &e.shape)?)?;
    }
    let adam = match header.adam {
        Some(h) => {
            let mut read_all = || -> Result<Vec<NdArray>> { header.arrays.iter().map(|e| read_array(&mut r, &e.shape)).collect() };
            let m = read_all()?;
            let v = read_all()?;
            Some(Adam {
                lr: h.lr,
                beta1: h.beta1,
                beta2: h.beta2,
                eps: h.eps,
                t: h.t,
                m,
                v,
            })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ctx("trailing bytes after the last array".into()));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        adam,
        step: header.step,
        rng: header.rng,
    })
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Config, AlignModel)> {
    let ck = load(path)?;
    let m = ck.model()?;
    Ok((ck.config, m))
}
