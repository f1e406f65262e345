//! Little-endian binary checkpoints.
//!
//! ```text
//! magic        8 bytes   "SIDAMOE1" (model) or "SIDAHSH1" (predictor)
//! version      u32
//! config_len   u32       bytes of the config block that follows
//! config       fields in declared order, u64 counts and f64 reals
//! tensor_count u32
//! per tensor:  u16 name_len, name (UTF-8), u32 rows, u32 cols, rows·cols f64
//! ```
//!
//! Tensors appear in the network's [`ParamSet`] order and are checked by name
//! and shape on load. Nothing may follow the last tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sida_core::model::{MoEConfig, MoEModel};
use sida_core::numkit::ParamSet;
use sida_core::predictor::{PredictorConfig, PredictorNet};

use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"SIDAMOE1";
pub const PREDICTOR_MAGIC: [u8; 8] = *b"SIDAHSH1";
pub const FORMAT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Fields(Vec<u8>);

impl Fields {
    fn count(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn real(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(bad("config block is truncated"));
        }
        let (head, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(head.try_into().expect("length checked"))
    }

    fn count(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take()?)).map_err(|_| bad("count does not fit in usize"))
    }

    fn real(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("reading {what}: {e}")))?;
    Ok(buf)
}

fn write_all(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| bad(format!("write failed: {e}")))
}

fn write_container<P: ParamSet>(w: &mut impl Write, magic: [u8; 8], config: &[u8], net: &P) -> Result<()> {
    write_all(w, &magic)?;
    write_all(w, &FORMAT_VERSION.to_le_bytes())?;
    write_all(w, &(config.len() as u32).to_le_bytes())?;
    write_all(w, config)?;
    let tensors = net.tensors();
    write_all(w, &(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in net.tensor_names().iter().zip(tensors) {
        write_all(w, &(name.len() as u16).to_le_bytes())?;
        write_all(w, name.as_bytes())?;
        write_all(w, &(t.rows() as u32).to_le_bytes())?;
        write_all(w, &(t.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        write_all(w, &buf)?;
    }
    w.flush().map_err(|e| bad(format!("flush failed: {e}")))
}

/// Reads magic, version and config block.
fn read_header(r: &mut impl Read, magic: [u8; 8]) -> Result<Vec<u8>> {
    let found: [u8; 8] = read_array(r, "magic")?;
    if found != magic {
        return Err(bad(format!(
            "magic {:?} is not {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u32::from_le_bytes(read_array(r, "version")?);
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let len = u32::from_le_bytes(read_array(r, "config length")?) as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config).map_err(|e| bad(format!("reading config block: {e}")))?;
    Ok(config)
}

/// Fills `net`'s tensors from the stream, which must match them one to one.
fn read_tensors<P: ParamSet>(r: &mut impl Read, net: &mut P) -> Result<()> {
    let names = net.tensor_names();
    let count = u32::from_le_bytes(read_array(r, "tensor count")?) as usize;
    if count != names.len() {
        return Err(bad(format!("{count} tensors stored, {} expected", names.len())));
    }
    for (expected, t) in names.iter().zip(net.tensors_mut()) {
        let len = u16::from_le_bytes(read_array(r, "tensor name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("reading name of {expected}: {e}")))?;
        if name != expected.as_bytes() {
            return Err(bad(format!("found tensor {:?} where {expected} belongs", String::from_utf8_lossy(&name))));
        }
        let rows = u32::from_le_bytes(read_array(r, "rows")?) as usize;
        let cols = u32::from_le_bytes(read_array(r, "cols")?) as usize;
        if rows != t.rows() || cols != t.cols() {
            return Err(bad(format!("{expected}: stored {rows}x{cols}, expected {}x{}", t.rows(), t.cols())));
        }
        let mut raw = vec![0u8; rows * cols * 8];
        r.read_exact(&mut raw).map_err(|e| bad(format!("reading data of {expected}: {e}")))?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if !t.is_finite() {
            return Err(bad(format!("{expected} has non-finite entries")));
        }
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(()),
        Ok(_) => Err(bad("trailing bytes after the last tensor")),
        Err(e) => Err(bad(format!("reading past the last tensor: {e}"))),
    }
}

fn model_config_block(c: &MoEConfig) -> Vec<u8> {
    let mut f = Fields(Vec::new());
    for v in [
        c.vocab_size,
        c.d_model,
        c.num_layers,
        c.num_experts,
        c.expert_hidden,
        c.max_seq_len,
        c.routing_k,
        c.num_classes,
    ] {
        f.count(v);
    }
    f.0
}

pub fn write_model(w: &mut impl Write, model: &MoEModel) -> Result<()> {
    write_container(w, MODEL_MAGIC, &model_config_block(model.config()), model)
}

pub fn read_model(r: &mut impl Read) -> Result<MoEModel> {
    let block = read_header(r, MODEL_MAGIC)?;
    let mut c = Cursor(&block);
    let config = MoEConfig {
        vocab_size: c.count()?,
        d_model: c.count()?,
        num_layers: c.count()?,
        num_experts: c.count()?,
        expert_hidden: c.count()?,
        max_seq_len: c.count()?,
        routing_k: c.count()?,
        num_classes: c.count()?,
    };
    if !c.0.is_empty() {
        return Err(bad("model config block has extra bytes"));
    }
    let mut model = MoEModel::zeros(config)?;
    read_tensors(r, &mut model)?;
    Ok(model)
}

fn predictor_config_block(net: &PredictorNet) -> Vec<u8> {
    let c = net.config();
    let mut f = Fields(Vec::new());
    f.count(net.d_model());
    f.count(net.num_layers());
    f.count(net.num_experts());
    f.count(c.compress_dim);
    f.count(c.lstm_hidden);
    f.count(c.top_t);
    f.real(c.lambda);
    f.real(c.lr);
    f.real(c.weight_decay);
    f.count(c.batch_size);
    f.count(c.max_steps);
    f.0.extend_from_slice(&c.seed.to_le_bytes());
    f.0
}

pub fn write_predictor(w: &mut impl Write, net: &PredictorNet) -> Result<()> {
    write_container(w, PREDICTOR_MAGIC, &predictor_config_block(net), net)
}

pub fn read_predictor(r: &mut impl Read) -> Result<PredictorNet> {
    let block = read_header(r, PREDICTOR_MAGIC)?;
    let mut c = Cursor(&block);
    let (d_model, num_layers, num_experts) = (c.count()?, c.count()?, c.count()?);
    let config = PredictorConfig {
        compress_dim: c.count()?,
        lstm_hidden: c.count()?,
        top_t: c.count()?,
        lambda: c.real()?,
        lr: c.real()?,
        weight_decay: c.real()?,
        batch_size: c.count()?,
        max_steps: c.count()?,
        seed: u64::from_le_bytes(c.take()?),
    };
    if !c.0.is_empty() {
        return Err(bad("predictor config block has extra bytes"));
    }
    let mut net = PredictorNet::new(config, d_model, num_layers, num_experts)?;
    read_tensors(r, &mut net)?;
    Ok(net)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(Error::io(path))?))
}

pub fn save_model(path: &Path, model: &MoEModel) -> Result<()> {
    write_model(&mut create(path)?, model)
}

pub fn load_model(path: &Path) -> Result<MoEModel> {
    read_model(&mut open(path)?)
}

pub fn save_predictor(path: &Path, net: &PredictorNet) -> Result<()> {
    write_predictor(&mut create(path)?, net)
}

pub fn load_predictor(path: &Path) -> Result<PredictorNet> {
    read_predictor(&mut open(path)?)
}

