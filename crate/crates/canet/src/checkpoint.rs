//! Binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "CANT" | version u32 | config len u32 + text | dataset count u32 +
//! (len u32 + utf-8 name)* | record count u32 + records | crc32 u32
//! ```
//!
//! Each record is `name len u32, name, dtype u8, rank u8, dims u32[rank],
//! raw payload`. Dtype 0 is f32, 1 is f64, 2 is a u64 scalar (rank 0).
//! The trailing CRC32 covers every byte before it. Round trips are bitwise
//! lossless, including every dataset's bank entries, adapter weights,
//! running statistics, and the adapter depth.

use std::fs;
use std::path::Path;

use crate::blocks::PoolingMode;
use crate::error::{Error, Result};
use crate::model::{Ablation, BlockKind, BnScope, CanetModel, ModelConfig};
use crate::tensor::{BnLayer, Dims, Dtype, Elem, Parameter, RunningStats, Tensor};
use crate::DatasetId;

const MAGIC: &[u8; 4] = b"CANT";
const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

fn dtype_tag(d: Dtype) -> u8 {
    match d {
        Dtype::F32 => DTYPE_F32,
        Dtype::F64 => DTYPE_F64,
    }
}

// ── slot enumeration ─────────────────────────────────────────────────

/// One named storage site. The enumeration order is the record order, so
/// save and load walk the identical sequence.
enum Slot<'a, E: Elem> {
    Param(String, Parameter<E>),
    Stats(String, &'a BnLayer<E>, DatasetId),
}

fn slots<E: Elem>(model: &CanetModel<E>) -> Vec<Slot<'_, E>> {
    let mut out: Vec<Slot<'_, E>> = Vec::new();
    for (name, p) in model.shared_params() {
        out.push(Slot::Param(name, p));
    }
    for (name, layer) in model.encoder_bn().into_iter().chain(model.decoder_bn()) {
        layer.for_each_entry(|ds, entry| {
            out.push(Slot::Param(format!("{name}.{ds}.gamma"), entry.gamma.clone()));
            out.push(Slot::Param(format!("{name}.{ds}.beta"), entry.beta.clone()));
        });
        let mut datasets = Vec::new();
        layer.for_each_entry(|ds, _| datasets.push(ds.clone()));
        for ds in datasets {
            out.push(Slot::Stats(format!("{name}.{ds}"), layer, ds));
        }
    }
    for id in model.datasets() {
        for (name, p) in model.adapter_params(&id).expect("registered") {
            out.push(Slot::Param(name, p));
        }
        for (name, layer) in model.adapter_bn(&id).expect("registered") {
            layer.for_each_entry(|ds, entry| {
                out.push(Slot::Param(format!("{name}.{ds}.gamma"), entry.gamma.clone()));
                out.push(Slot::Param(format!("{name}.{ds}.beta"), entry.beta.clone()));
            });
            let mut datasets = Vec::new();
            layer.for_each_entry(|ds, _| datasets.push(ds.clone()));
            for ds in datasets {
                out.push(Slot::Stats(format!("{name}.{ds}"), layer, ds));
            }
        }
    }
    out
}

fn record_count<E: Elem>(s: &[Slot<'_, E>]) -> u32 {
    // a stats slot stores running mean, running variance, and batch count
    s.iter().map(|s| match s { Slot::Param(..) => 1u32, Slot::Stats(..) => 3 }).sum()
}

// ── config block text ────────────────────────────────────────────────

fn kind_str(k: BlockKind) -> &'static str {
    match k {
        BlockKind::Plain => "plain",
        BlockKind::Residual => "residual",
        BlockKind::InvertedResidual => "inverted_residual",
    }
}

fn parse_kind(s: &str) -> Result<BlockKind> {
    match s {
        "plain" => Ok(BlockKind::Plain),
        "residual" => Ok(BlockKind::Residual),
        "inverted_residual" => Ok(BlockKind::InvertedResidual),
        _ => Err(Error::format("checkpoint config", format!("unknown block kind {s}"))),
    }
}

fn ablation_str(a: Ablation) -> &'static str {
    match a {
        Ablation::None => "none",
        Ablation::NoIcm => "no_icm",
        Ablation::SharedIcm => "shared_icm",
        Ablation::SharedBn => "shared_bn",
    }
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    match s {
        "none" => Ok(Ablation::None),
        "no_icm" => Ok(Ablation::NoIcm),
        "shared_icm" => Ok(Ablation::SharedIcm),
        "shared_bn" => Ok(Ablation::SharedBn),
        _ => Err(Error::format("checkpoint config", format!("unknown ablation {s}"))),
    }
}

fn config_text<E: Elem>(model: &CanetModel<E>) -> String {
    let c = model.config();
    let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
    let kinds: Vec<&str> = c.block_kinds.iter().map(|k| kind_str(*k)).collect();
    format!(
        "eta={}\nwidths={}\nkinds={}\nicm_width={}\npooling={}\nbn_scope={}\nablation={}\nseed={}\n",
        c.eta,
        widths.join(","),
        kinds.join(","),
        c.icm_width,
        match c.pooling_mode {
            PoolingMode::Channel => "channel",
            PoolingMode::Window => "window",
        },
        match c.bn_scope {
            BnScope::AllShared => "all_shared",
            BnScope::EncoderOnly => "encoder_only",
        },
        ablation_str(model.ablation()),
        model.seed(),
    )
}

fn parse_config(text: &str) -> Result<(ModelConfig, u64, Ablation)> {
    let mut config = ModelConfig::default();
    let mut seed = 0u64;
    let mut ablation = Ablation::None;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format("checkpoint config", format!("bad line {line:?}")))?;
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::format("checkpoint config", format!("bad integer {v:?}")))
        };
        match key {
            "eta" => config.eta = int(value)?,
            "widths" => {
                config.widths = value.split(',').map(int).collect::<Result<Vec<_>>>()?;
            }
            "kinds" => {
                config.block_kinds =
                    value.split(',').map(parse_kind).collect::<Result<Vec<_>>>()?;
            }
            "icm_width" => config.icm_width = int(value)?,
            "pooling" => {
                config.pooling_mode = match value {
                    "channel" => PoolingMode::Channel,
                    "window" => PoolingMode::Window,
                    _ => {
                        return Err(Error::format(
                            "checkpoint config",
                            format!("unknown pooling {value}"),
                        ))
                    }
                }
            }
            "bn_scope" => {
                config.bn_scope = match value {
                    "all_shared" => BnScope::AllShared,
                    "encoder_only" => BnScope::EncoderOnly,
                    _ => {
                        return Err(Error::format(
                            "checkpoint config",
                            format!("unknown bn scope {value}"),
                        ))
                    }
                }
            }
            "ablation" => ablation = parse_ablation(value)?,
            "seed" => {
                seed = value.parse::<u64>().map_err(|_| {
                    Error::format("checkpoint config", format!("bad seed {value:?}"))
                })?
            }
            _ => return Err(Error::format("checkpoint config", format!("unknown key {key}"))),
        }
    }
    Ok((config, seed, ablation))
}

// ── byte writer / reader ─────────────────────────────────────────────

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor_record<E: Elem>(&mut self, name: &str, dims: Dims, data: &[E]) {
        self.str(name);
        self.u8(dtype_tag(E::DTYPE));
        self.u8(4);
        for d in [dims.n, dims.c, dims.h, dims.w] {
            self.u32(d as u32);
        }
        match E::DTYPE {
            Dtype::F32 => {
                for v in data {
                    self.buf.extend_from_slice(&(v.to_f() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for v in data {
                    self.buf.extend_from_slice(&v.to_f().to_le_bytes());
                }
            }
        }
    }

    fn u64_record(&mut self, name: &str, v: u64) {
        self.str(name);
        self.u8(DTYPE_U64);
        self.u8(0);
        self.u64(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::format("checkpoint", "name is not valid utf-8"))
    }

    fn tensor_record<E: Elem>(&mut self, expect_name: &str, expect_dims: Dims) -> Result<Vec<E>> {
        let name = self.str()?;
        if name != expect_name {
            return Err(Error::format(
                "checkpoint",
                format!("expected record {expect_name:?}, found {name:?}"),
            ));
        }
        let dtype = self.u8()?;
        if dtype != dtype_tag(E::DTYPE) {
            return Err(Error::format("checkpoint", format!("{name}: unexpected dtype {dtype}")));
        }
        let rank = self.u8()?;
        if rank != 4 {
            return Err(Error::format("checkpoint", format!("{name}: unexpected rank {rank}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32()? as usize;
        }
        let got = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        if got != expect_dims {
            return Err(Error::format(
                "checkpoint",
                format!("{name}: dims {got} do not match model dims {expect_dims}"),
            ));
        }
        let count = got.count();
        let data = match E::DTYPE {
            Dtype::F32 => {
                let raw = self.take(4 * count)?;
                raw.chunks_exact(4)
                    .map(|c| E::from_f(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect()
            }
            Dtype::F64 => {
                let raw = self.take(8 * count)?;
                raw.chunks_exact(8)
                    .map(|c| E::from_f(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect()
            }
        };
        Ok(data)
    }

    fn u64_record(&mut self, expect_name: &str) -> Result<u64> {
        let name = self.str()?;
        if name != expect_name {
            return Err(Error::format(
                "checkpoint",
                format!("expected record {expect_name:?}, found {name:?}"),
            ));
        }
        let dtype = self.u8()?;
        let rank = self.u8()?;
        if dtype != DTYPE_U64 || rank != 0 {
            return Err(Error::format("checkpoint", format!("{name}: bad counter record")));
        }
        self.u64()
    }
}

// ── save / load ──────────────────────────────────────────────────────

pub fn save_bytes<E: Elem>(model: &CanetModel<E>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&config_text(model));
    let datasets = model.datasets();
    w.u32(datasets.len() as u32);
    for d in &datasets {
        w.str(d.as_str());
    }
    let slots = slots(model);
    w.u32(record_count(&slots));
    for slot in &slots {
        match slot {
            Slot::Param(name, p) => {
                let v = p.value();
                w.tensor_record(name, v.dims(), v.data());
            }
            Slot::Stats(name, layer, ds) => {
                let stats = layer.stats_for(ds).expect("entry exists");
                let c = stats.mean.len();
                let d = Dims::new(1, c, 1, 1);
                w.tensor_record(&format!("{name}.running_mean"), d, &stats.mean);
                w.tensor_record(&format!("{name}.running_var"), d, &stats.var);
                w.u64_record(&format!("{name}.batches"), stats.batches);
            }
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&w.buf);
    let crc = hasher.finalize();
    w.u32(crc);
    w.buf
}

pub fn save<E: Elem>(model: &CanetModel<E>, path: &Path) -> Result<()> {
    fs::write(path, save_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_bytes<E: Elem>(bytes: &[u8]) -> Result<CanetModel<E>> {
    if bytes.len() < 12 {
        return Err(Error::format("checkpoint", "file is too short"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("checkpoint", "bad magic bytes"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(body);
    if hasher.finalize() != stored_crc {
        return Err(Error::format("checkpoint", "checksum failure"));
    }

    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format version {version} (expected {VERSION})"),
        ));
    }
    let (config, seed, ablation) = parse_config(&r.str()?)?;

    let mut model = CanetModel::<E>::new(config, seed)?;
    model.set_ablation_flag(ablation);
    if ablation == Ablation::SharedIcm {
        model.ensure_shared_icm_placeholder();
    }
    let n_datasets = r.u32()? as usize;
    for _ in 0..n_datasets {
        let name = r.str()?;
        model.add_dataset(&DatasetId::new(name), None)?;
    }

    let expected_records = {
        let s = slots(&model);
        record_count(&s)
    };
    let stored_records = r.u32()?;
    if stored_records != expected_records {
        return Err(Error::format(
            "checkpoint",
            format!("{stored_records} records stored, model needs {expected_records}"),
        ));
    }

    // The slot walk borrows the model immutably; all mutation goes through
    // parameter handles and bank cells.
    {
        let slot_list = slots(&model);
        for slot in slot_list {
            match slot {
                Slot::Param(name, p) => {
                    let data: Vec<E> = r.tensor_record(&name, p.dims())?;
                    p.set_value(Tensor::new(p.dims(), data)?);
                }
                Slot::Stats(name, layer, ds) => {
                    let c = layer.channels();
                    let d = Dims::new(1, c, 1, 1);
                    let mean: Vec<E> = r.tensor_record(&format!("{name}.running_mean"), d)?;
                    let var: Vec<E> = r.tensor_record(&format!("{name}.running_var"), d)?;
                    let batches = r.u64_record(&format!("{name}.batches"))?;
                    layer.set_stats(&ds, RunningStats { mean, var, batches })?;
                }
            }
        }
    }
    if r.pos != body.len() {
        return Err(Error::format("checkpoint", "trailing bytes after final record"));
    }
    Ok(model)
}

pub fn load<E: Elem>(path: &Path) -> Result<CanetModel<E>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_bytes(&bytes)
}
