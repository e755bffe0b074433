//! The partitioned change-detection model: a siamese shared encoder, shared
//! feature-fusion decoder prefix, and one lightweight adapter (decoder
//! suffix, prediction head, change-region mask) plus normalization bank
//! entries per dataset.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Activation, BnSelect, ConvBlock, FfBlock, IcmBlock, PoolingMode};
use crate::error::{Error, Result};
use crate::tensor::ops::{add, relu};
use crate::tensor::{BnLayer, Elem, Mode, Parameter, Tape, Tensor};
use crate::DatasetId;

/// Encoder stage flavor.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
    InvertedResidual,
}

/// Which shared-module normalization layers carry per-dataset banks.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnScope {
    AllShared,
    EncoderOnly,
}

/// Structural ablations of the adapter.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    NoIcm,
    SharedIcm,
    SharedBn,
}

/// Which parameters a training run updates.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Full,
    AdapterOnly,
}

/// Static architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width per encoder stage; each stage halves spatial extent.
    pub widths: Vec<usize>,
    /// Stage flavor, one entry per stage.
    pub block_kinds: Vec<BlockKind>,
    /// Decoder blocks owned by each adapter (the rest are shared).
    pub eta: usize,
    /// Channel width of the mask block's entry convolution.
    pub icm_width: usize,
    /// MP/AP realization inside the mask block.
    pub pooling_mode: PoolingMode,
    /// Scope of per-dataset normalization banks in the shared module.
    pub bn_scope: BnScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![16, 32, 64, 128],
            block_kinds: vec![BlockKind::Plain; 4],
            eta: 3,
            icm_width: 16,
            pooling_mode: PoolingMode::Channel,
            bn_scope: BnScope::AllShared,
        }
    }
}

impl ModelConfig {
    /// Number of encoder stages (equal to decoder depth).
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.stages();
        if l < 2 {
            return Err(Error::Config(format!("need at least 2 encoder stages, got {l}")));
        }
        if self.block_kinds.len() != l {
            return Err(Error::Config(format!(
                "block_kinds has {} entries for {l} stages",
                self.block_kinds.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if !(2..=l).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in 2..={l}, got {}", self.eta)));
        }
        if self.icm_width == 0 {
            return Err(Error::Config("icm_width must be positive".into()));
        }
        Ok(())
    }

    /// Output width of decoder block `j` (0-based, front to back).
    fn ff_out(&self, j: usize) -> usize {
        let l = self.stages();
        self.widths[(l.saturating_sub(2)).saturating_sub(j.min(l - 2))]
    }

    /// Concatenated input width of decoder block `j`.
    fn ff_in(&self, j: usize) -> usize {
        let l = self.stages();
        let skip = 2 * self.widths[l - 1 - j];
        if j == 0 {
            skip
        } else {
            self.ff_out(j - 1) + skip
        }
    }
}

// ── encoder ──────────────────────────────────────────────────────────

enum StageTail<E: Elem> {
    Plain(ConvBlock<E>),
    Residual { conv1: ConvBlock<E>, conv2: ConvBlock<E> },
    Inverted { expand: ConvBlock<E>, depth: ConvBlock<E>, project: ConvBlock<E> },
}

struct EncoderStage<E: Elem> {
    down: ConvBlock<E>,
    tail: StageTail<E>,
}

impl<E: Elem> EncoderStage<E> {
    fn new(rng: &mut ChaCha8Rng, kind: BlockKind, in_c: usize, out_c: usize) -> Self {
        let down = ConvBlock::bn_relu(rng, in_c, out_c, 3, 2);
        let tail = match kind {
            BlockKind::Plain => StageTail::Plain(ConvBlock::bn_relu(rng, out_c, out_c, 3, 1)),
            BlockKind::Residual => StageTail::Residual {
                conv1: ConvBlock::bn_relu(rng, out_c, out_c, 3, 1),
                conv2: ConvBlock::new(rng, out_c, out_c, 3, 1, 1, true, Activation::None),
            },
            BlockKind::InvertedResidual => StageTail::Inverted {
                expand: ConvBlock::new(rng, out_c, 2 * out_c, 1, 1, 0, true, Activation::Relu6),
                depth: ConvBlock::new(rng, 2 * out_c, 2 * out_c, 3, 1, 1, true, Activation::Relu6),
                project: ConvBlock::new(rng, 2 * out_c, out_c, 1, 1, 0, true, Activation::None),
            },
        };
        EncoderStage { down, tail }
    }

    fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>, sel: BnSelect) -> Result<Tensor<E>> {
        let x = self.down.forward(tape, x, sel)?;
        match &self.tail {
            StageTail::Plain(conv) => conv.forward(tape, &x, sel),
            StageTail::Residual { conv1, conv2 } => {
                let y = conv1.forward(tape, &x, sel)?;
                let y = conv2.forward(tape, &y, sel)?;
                let sum = add(tape, &x, &y)?;
                relu(tape, &sum)
            }
            StageTail::Inverted { expand, depth, project } => {
                let y = expand.forward(tape, &x, sel)?;
                let y = depth.forward(tape, &y, sel)?;
                let y = project.forward(tape, &y, sel)?;
                add(tape, &x, &y)
            }
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        self.down.collect_params(&format!("{prefix}.down"), out);
        match &self.tail {
            StageTail::Plain(conv) => conv.collect_params(&format!("{prefix}.conv"), out),
            StageTail::Residual { conv1, conv2 } => {
                conv1.collect_params(&format!("{prefix}.res1"), out);
                conv2.collect_params(&format!("{prefix}.res2"), out);
            }
            StageTail::Inverted { expand, depth, project } => {
                expand.collect_params(&format!("{prefix}.expand"), out);
                depth.collect_params(&format!("{prefix}.depth"), out);
                project.collect_params(&format!("{prefix}.project"), out);
            }
        }
    }

    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BnLayer<E>)>) {
        self.down.collect_bn(&format!("{prefix}.down"), out);
        match &self.tail {
            StageTail::Plain(conv) => conv.collect_bn(&format!("{prefix}.conv"), out),
            StageTail::Residual { conv1, conv2 } => {
                conv1.collect_bn(&format!("{prefix}.res1"), out);
                conv2.collect_bn(&format!("{prefix}.res2"), out);
            }
            StageTail::Inverted { expand, depth, project } => {
                expand.collect_bn(&format!("{prefix}.expand"), out);
                depth.collect_bn(&format!("{prefix}.depth"), out);
                project.collect_bn(&format!("{prefix}.project"), out);
            }
        }
    }
}

/// Shared feature extractor applied to both temporal inputs with identical
/// weights.
pub struct Encoder<E: Elem> {
    stages: Vec<EncoderStage<E>>,
}

impl<E: Elem> Encoder<E> {
    fn new(rng: &mut ChaCha8Rng, config: &ModelConfig) -> Self {
        let mut stages = Vec::with_capacity(config.stages());
        let mut in_c = 3;
        for (kind, &out_c) in config.block_kinds.iter().zip(&config.widths) {
            stages.push(EncoderStage::new(rng, *kind, in_c, out_c));
            in_c = out_c;
        }
        Encoder { stages }
    }

    /// Feature pyramid, one tensor per stage, shallowest first.
    pub fn forward(&self, tape: &mut Tape<E>, x: &Tensor<E>, sel: BnSelect) -> Result<Vec<Tensor<E>>> {
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for stage in &self.stages {
            cur = stage.forward(tape, &cur, sel)?;
            feats.push(cur.clone());
        }
        Ok(feats)
    }

    fn collect_params(&self, out: &mut Vec<(String, Parameter<E>)>) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect_params(&format!("enc.s{i}"), out);
        }
    }

    fn collect_bn<'a>(&'a self, out: &mut Vec<(String, &'a BnLayer<E>)>) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.collect_bn(&format!("enc.s{i}"), out);
        }
    }
}

// ── adapter ──────────────────────────────────────────────────────────

/// The per-dataset tail: the last `eta` decoder blocks, a two-channel
/// prediction head, and (unless ablated) the change-region mask block.
pub struct AdapterModule<E: Elem> {
    pub(crate) ff: Vec<FfBlock<E>>,
    pub(crate) pred: ConvBlock<E>,
    pub(crate) icm: Option<IcmBlock<E>>,
}

impl<E: Elem> AdapterModule<E> {
    fn new(rng: &mut ChaCha8Rng, config: &ModelConfig, with_icm: bool) -> Self {
        let l = config.stages();
        let ff = (l - config.eta..l)
            .map(|j| FfBlock::new(rng, config.ff_in(j), config.ff_out(j)))
            .collect();
        let pred = ConvBlock::head(rng, config.ff_out(l - 1), 2, 3);
        let icm =
            if with_icm { Some(IcmBlock::new(rng, config.icm_width, config.pooling_mode)) } else { None };
        AdapterModule { ff, pred, icm }
    }

    fn deep_clone(&self) -> Self {
        AdapterModule {
            ff: self.ff.iter().map(|f| f.deep_clone()).collect(),
            pred: self.pred.deep_clone(),
            icm: self.icm.as_ref().map(|i| i.deep_clone()),
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Parameter<E>)>) {
        for (i, f) in self.ff.iter().enumerate() {
            f.collect_params(&format!("{prefix}.ff{i}"), out);
        }
        self.pred.collect_params(&format!("{prefix}.pred"), out);
        if let Some(icm) = &self.icm {
            icm.collect_params(&format!("{prefix}.icm"), out);
        }
    }

    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BnLayer<E>)>) {
        for (i, f) in self.ff.iter().enumerate() {
            f.collect_bn(&format!("{prefix}.ff{i}"), out);
        }
        self.pred.collect_bn(&format!("{prefix}.pred"), out);
    }
}

/// Exact integer parameter counts by partition, for one dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamPartition {
    /// Scalars in the shared encoder/decoder weights.
    pub shared_count: usize,
    /// Scalars in this dataset's adapter (weights plus its normalization
    /// parameters).
    pub adapter_count: usize,
    /// Scalars in this dataset's entries of shared-module normalization
    /// banks.
    pub bn_bank_count_per_dataset: usize,
    /// Updated fraction: (adapter + bank) over the single-dataset network
    /// size (shared + adapter + bank).
    pub fraction: f64,
}

/// Forward result: masked logits and, when the mask block ran, the mask.
pub struct ForwardOutput<E: Elem> {
    pub logits: Tensor<E>,
    pub mask: Option<Tensor<E>>,
}

// ── the model ────────────────────────────────────────────────────────

/// Change-detection network with a dataset-shared module and per-dataset
/// adapters and normalization banks.
pub struct CanetModel<E: Elem> {
    pub(crate) config: ModelConfig,
    pub(crate) seed: u64,
    pub(crate) encoder: Encoder<E>,
    pub(crate) shared_ff: Vec<FfBlock<E>>,
    pub(crate) shared_icm: Option<IcmBlock<E>>,
    pub(crate) adapters: IndexMap<DatasetId, AdapterModule<E>>,
    pub(crate) ablation: Ablation,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<E: Elem> CanetModel<E> {
    /// Build the shared module; datasets are registered separately.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut rng, &config);
        let l = config.stages();
        let shared_ff = (0..l - config.eta)
            .map(|j| FfBlock::new(&mut rng, config.ff_in(j), config.ff_out(j)))
            .collect();
        Ok(CanetModel {
            config,
            seed,
            encoder,
            shared_ff,
            shared_icm: None,
            adapters: IndexMap::new(),
            ablation: Ablation::None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn eta(&self) -> usize {
        self.config.eta
    }

    pub fn ablation(&self) -> Ablation {
        self.ablation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registered dataset ids, oldest first.
    pub fn datasets(&self) -> Vec<DatasetId> {
        self.adapters.keys().cloned().collect()
    }

    pub fn is_registered(&self, id: &DatasetId) -> bool {
        self.adapters.contains_key(id)
    }

    /// The first registered dataset (the historical one).
    pub fn primary(&self) -> Result<DatasetId> {
        self.adapters
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| Error::Config("model has no registered datasets".into()))
    }

    /// Register a dataset: create its adapter (fresh, or cloned from
    /// `init_from`) and its normalization bank entries.
    pub fn add_dataset(&mut self, id: &DatasetId, init_from: Option<&DatasetId>) -> Result<()> {
        if self.adapters.contains_key(id) {
            return Err(Error::DuplicateDataset(id.clone()));
        }
        let first = self.adapters.is_empty();

        let adapter = match init_from {
            Some(src) => {
                let source =
                    self.adapters.get(src).ok_or_else(|| Error::UnknownDataset(src.clone()))?;
                let clone = source.deep_clone();
                // adapter-internal banks are keyed by the owning dataset
                let mut bn = Vec::new();
                clone.collect_bn("a", &mut bn);
                for (_, layer) in bn {
                    layer.rename_dataset(src, id)?;
                }
                clone
            }
            None => {
                let with_icm = matches!(self.ablation, Ablation::None | Ablation::SharedBn);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(id.as_str()));
                let adapter = AdapterModule::new(&mut rng, &self.config, with_icm);
                let mut bn = Vec::new();
                adapter.collect_bn("a", &mut bn);
                for (_, layer) in bn {
                    layer.add_dataset(id, None)?;
                }
                adapter
            }
        };

        // Shared-module bank entries, honoring bank scope and ablation.
        let bank_encoder = first || self.ablation != Ablation::SharedBn;
        let bank_decoder = first
            || (self.ablation != Ablation::SharedBn && self.config.bn_scope == BnScope::AllShared);
        let mut enc_bn = Vec::new();
        self.encoder.collect_bn(&mut enc_bn);
        if bank_encoder {
            for (_, layer) in &enc_bn {
                layer.add_dataset(id, init_from)?;
            }
        }
        let mut ff_bn = Vec::new();
        for (i, f) in self.shared_ff.iter().enumerate() {
            f.collect_bn(&format!("ff{i}"), &mut ff_bn);
        }
        if bank_decoder {
            for (_, layer) in &ff_bn {
                layer.add_dataset(id, init_from)?;
            }
        }

        self.adapters.insert(id.clone(), adapter);
        Ok(())
    }

    /// Bank key used by encoder normalization layers for a forward pass.
    fn encoder_bank_id<'a>(&'a self, requested: &'a DatasetId) -> &'a DatasetId {
        match self.ablation {
            Ablation::SharedBn => {
                self.adapters.keys().next().expect("registered dataset")
            }
            _ => requested,
        }
    }

    /// Bank key used by shared decoder normalization layers.
    fn decoder_bank_id<'a>(&'a self, requested: &'a DatasetId) -> &'a DatasetId {
        if self.ablation == Ablation::SharedBn || self.config.bn_scope == BnScope::EncoderOnly {
            self.adapters.keys().next().expect("registered dataset")
        } else {
            requested
        }
    }

    /// The mask block an adapter routes through, after ablation rules.
    pub fn icm_for(&self, id: &DatasetId) -> Option<&IcmBlock<E>> {
        match self.ablation {
            Ablation::NoIcm => None,
            Ablation::SharedIcm => self.shared_icm.as_ref(),
            _ => self.adapters.get(id).and_then(|a| a.icm.as_ref()),
        }
    }

    /// Encoder features for one temporal image (exposed for inspection).
    pub fn encode(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        dataset_id: &DatasetId,
        mode: Mode,
    ) -> Result<Vec<Tensor<E>>> {
        let sel = BnSelect { dataset: self.encoder_bank_id(dataset_id), mode };
        self.encoder.forward(tape, x, sel)
    }

    /// Full forward pass for a bitemporal pair routed through one dataset's
    /// adapter and bank entries.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x1: &Tensor<E>,
        x2: &Tensor<E>,
        dataset_id: &DatasetId,
        mode: Mode,
    ) -> Result<ForwardOutput<E>> {
        let adapter =
            self.adapters.get(dataset_id).ok_or_else(|| Error::UnknownDataset(dataset_id.clone()))?;
        let d = x1.dims();
        if x2.dims() != d {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("temporal inputs differ: {} vs {}", d, x2.dims()),
            });
        }
        if d.c != 3 {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("inputs must have 3 channels, got {}", d.c),
            });
        }
        let l = self.config.stages();
        let down = 1usize << l;
        if d.h % down != 0 || d.w % down != 0 {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("spatial dims {}x{} must be divisible by {down}", d.h, d.w),
            });
        }

        let enc_sel = BnSelect { dataset: self.encoder_bank_id(dataset_id), mode };
        let f1 = self.encoder.forward(tape, x1, enc_sel)?;
        let f2 = self.encoder.forward(tape, x2, enc_sel)?;

        let dec_sel = BnSelect { dataset: self.decoder_bank_id(dataset_id), mode };
        let ada_sel = BnSelect { dataset: dataset_id, mode };
        let shared_count = self.shared_ff.len();
        let mut fused: Option<Tensor<E>> = None;
        for (j, ff) in self.shared_ff.iter().chain(adapter.ff.iter()).enumerate() {
            let level = l - 1 - j;
            let sel = if j < shared_count { dec_sel } else { ada_sel };
            fused = Some(ff.forward(tape, fused.as_ref(), &f1[level], &f2[level], sel)?);
        }
        let fused = fused.expect("decoder has at least two blocks");
        let p = adapter.pred.forward(tape, &fused, ada_sel)?;

        match self.icm_for(dataset_id) {
            Some(icm) => {
                let (mask, masked) = icm.forward(tape, &p)?;
                Ok(ForwardOutput { logits: masked, mask: Some(mask) })
            }
            None => Ok(ForwardOutput { logits: p, mask: None }),
        }
    }

    // ── parameter walking ────────────────────────────────────────────

    /// Shared weight parameters (encoder, shared decoder blocks, and the
    /// shared mask block when the shared-mask ablation is active).
    pub fn shared_params(&self) -> Vec<(String, Parameter<E>)> {
        let mut out = Vec::new();
        self.encoder.collect_params(&mut out);
        for (i, f) in self.shared_ff.iter().enumerate() {
            f.collect_params(&format!("ff{i}"), &mut out);
        }
        if let Some(icm) = &self.shared_icm {
            icm.collect_params("shared_icm", &mut out);
        }
        out
    }

    pub fn encoder_bn(&self) -> Vec<(String, &BnLayer<E>)> {
        let mut out = Vec::new();
        self.encoder.collect_bn(&mut out);
        out
    }

    pub fn decoder_bn(&self) -> Vec<(String, &BnLayer<E>)> {
        let mut out = Vec::new();
        for (i, f) in self.shared_ff.iter().enumerate() {
            f.collect_bn(&format!("ff{i}"), &mut out);
        }
        out
    }

    pub fn adapter_params(&self, id: &DatasetId) -> Result<Vec<(String, Parameter<E>)>> {
        let adapter = self.adapters.get(id).ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        let mut out = Vec::new();
        adapter.collect_params(&format!("adapter.{id}"), &mut out);
        Ok(out)
    }

    pub fn adapter_bn(&self, id: &DatasetId) -> Result<Vec<(String, &BnLayer<E>)>> {
        let adapter = self.adapters.get(id).ok_or_else(|| Error::UnknownDataset(id.clone()))?;
        let mut out = Vec::new();
        adapter.collect_bn(&format!("adapter.{id}"), &mut out);
        Ok(out)
    }

    /// Every parameter in the model, including all bank entries.
    pub fn all_params(&self) -> Vec<(String, Parameter<E>)> {
        let mut out = self.shared_params();
        for (name, layer) in self.encoder_bn().into_iter().chain(self.decoder_bn()) {
            layer.for_each_entry(|ds, entry| {
                out.push((format!("{name}.{ds}.gamma"), entry.gamma.clone()));
                out.push((format!("{name}.{ds}.beta"), entry.beta.clone()));
            });
        }
        for id in self.adapters.keys() {
            out.extend(self.adapter_params(id).expect("registered"));
            for (name, layer) in self.adapter_bn(id).expect("registered") {
                layer.for_each_entry(|ds, entry| {
                    out.push((format!("{name}.{ds}.gamma"), entry.gamma.clone()));
                    out.push((format!("{name}.{ds}.beta"), entry.beta.clone()));
                });
            }
        }
        out
    }

    /// Mark exactly the parameters covered by `scope` for `dataset_id` as
    /// trainable (everything else frozen) and return them.
    pub fn trainable_set(&self, dataset_id: &DatasetId, scope: Scope) -> Result<Vec<Parameter<E>>> {
        if !self.adapters.contains_key(dataset_id) {
            return Err(Error::UnknownDataset(dataset_id.clone()));
        }
        for (_, p) in self.all_params() {
            p.set_trainable(false);
        }

        let mut selected = Vec::new();
        if scope == Scope::Full {
            for (_, p) in self.shared_params() {
                selected.push(p);
            }
        }
        // Shared-module bank entries. In full scope the resolved entries
        // train; in adapter-only scope an entry trains only when it is this
        // dataset's own (shared single-bank entries stay frozen).
        let per_dataset_enc = self.ablation != Ablation::SharedBn;
        let per_dataset_dec = per_dataset_enc && self.config.bn_scope == BnScope::AllShared;
        for (banked, layers, resolved) in [
            (per_dataset_enc, self.encoder_bn(), self.encoder_bank_id(dataset_id)),
            (per_dataset_dec, self.decoder_bn(), self.decoder_bank_id(dataset_id)),
        ] {
            for (_, layer) in layers {
                let entry = match scope {
                    Scope::Full => layer.params_for(resolved).ok(),
                    Scope::AdapterOnly if banked => layer.params_for(dataset_id).ok(),
                    Scope::AdapterOnly => None,
                };
                if let Some((g, b)) = entry {
                    selected.push(g);
                    selected.push(b);
                }
            }
        }
        // the dataset's adapter, including its own bank entries
        for (_, p) in self.adapter_params(dataset_id)? {
            selected.push(p);
        }
        for (_, layer) in self.adapter_bn(dataset_id)? {
            let (g, b) = layer.params_for(dataset_id)?;
            selected.push(g);
            selected.push(b);
        }

        for p in &selected {
            p.set_trainable(true);
        }
        Ok(selected)
    }

    /// Exact parameter counts for one dataset's partition.
    pub fn param_partition(&self, dataset_id: &DatasetId) -> Result<ParamPartition> {
        if !self.adapters.contains_key(dataset_id) {
            return Err(Error::UnknownDataset(dataset_id.clone()));
        }
        let shared_count: usize = self.shared_params().iter().map(|(_, p)| p.count()).sum();
        let mut adapter_count: usize =
            self.adapter_params(dataset_id)?.iter().map(|(_, p)| p.count()).sum();
        for (_, layer) in self.adapter_bn(dataset_id)? {
            let (g, b) = layer.params_for(dataset_id)?;
            adapter_count += g.count() + b.count();
        }
        let mut bn_bank = 0usize;
        for (_, layer) in self.encoder_bn().into_iter().chain(self.decoder_bn()) {
            if let Ok((g, b)) = layer.params_for(dataset_id) {
                bn_bank += g.count() + b.count();
            }
        }
        let updated = adapter_count + bn_bank;
        let total = shared_count + updated;
        Ok(ParamPartition {
            shared_count,
            adapter_count,
            bn_bank_count_per_dataset: bn_bank,
            fraction: updated as f64 / total as f64,
        })
    }

    /// Total scalar count over every parameter in the model.
    pub fn total_param_count(&self) -> usize {
        self.all_params().iter().map(|(_, p)| p.count()).sum()
    }

    /// Restructure into an ablated variant. The shared-mask ablation moves
    /// the first dataset's mask block into shared ownership.
    pub fn apply_ablation(&mut self, ablation: Ablation) -> Result<()> {
        match ablation {
            Ablation::None => {}
            Ablation::NoIcm => {
                for (_, adapter) in self.adapters.iter_mut() {
                    adapter.icm = None;
                }
                self.shared_icm = None;
            }
            Ablation::SharedIcm => {
                let primary = self.primary()?;
                let icm = self
                    .adapters
                    .get_mut(&primary)
                    .and_then(|a| a.icm.take())
                    .ok_or_else(|| {
                        Error::Config("shared-mask ablation needs a mask block on the first dataset".into())
                    })?;
                self.shared_icm = Some(icm);
                for (_, adapter) in self.adapters.iter_mut() {
                    adapter.icm = None;
                }
            }
            Ablation::SharedBn => {
                let primary = self.primary()?;
                for (_, layer) in self.encoder_bn().into_iter().chain(self.decoder_bn()) {
                    layer.retain_dataset(&primary);
                }
            }
        }
        self.ablation = ablation;
        Ok(())
    }

    pub(crate) fn set_ablation_flag(&mut self, ablation: Ablation) {
        self.ablation = ablation;
    }

    pub(crate) fn ensure_shared_icm_placeholder(&mut self) {
        if self.shared_icm.is_none() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a("shared_icm"));
            self.shared_icm =
                Some(IcmBlock::new(&mut rng, self.config.icm_width, self.config.pooling_mode));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops::softmax_cross_entropy;
    use crate::tensor::{sgd_step, Dims, LabelMap, SgdConfig};
    use rand::{Rng, SeedableRng};

    fn small_config() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8, 8, 8],
            block_kinds: vec![BlockKind::Plain; 4],
            eta: 3,
            icm_width: 4,
            pooling_mode: PoolingMode::Channel,
            bn_scope: BnScope::AllShared,
        }
    }

    fn id(s: &str) -> DatasetId {
        DatasetId::new(s)
    }

    fn rand_input(seed: u64, dims: Dims) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(dims, (0..dims.count()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn seeded_model(datasets: &[&str]) -> CanetModel<f32> {
        let mut m = CanetModel::<f32>::new(small_config(), 41).unwrap();
        for d in datasets {
            m.add_dataset(&id(d), None).unwrap();
        }
        m
    }

    /// One train-mode forward seeds running statistics so eval mode works.
    fn seed_stats(m: &CanetModel<f32>, d: &DatasetId) {
        let x1 = rand_input(1, Dims::new(2, 3, 16, 16));
        let x2 = rand_input(2, Dims::new(2, 3, 16, 16));
        let mut tape = Tape::inference();
        m.forward(&mut tape, &x1, &x2, d, Mode::Train).unwrap();
    }

    fn eval_logits(m: &CanetModel<f32>, d: &DatasetId, seed: u64) -> Vec<f32> {
        let x1 = rand_input(seed, Dims::new(1, 3, 16, 16));
        let x2 = rand_input(seed + 1, Dims::new(1, 3, 16, 16));
        let mut tape = Tape::inference();
        m.forward(&mut tape, &x1, &x2, d, Mode::Eval).unwrap().logits.data().to_vec()
    }

    #[test]
    fn forward_preserves_spatial_dims_and_mask_invariant() {
        let m = seeded_model(&["a"]);
        let x1 = rand_input(3, Dims::new(2, 3, 16, 16));
        let x2 = rand_input(4, Dims::new(2, 3, 16, 16));
        let mut tape = Tape::inference();
        let out = m.forward(&mut tape, &x1, &x2, &id("a"), Mode::Train).unwrap();
        assert_eq!(out.logits.dims(), Dims::new(2, 2, 16, 16));
        let mask = out.mask.expect("mask present by default");
        let md = mask.dims();
        assert_eq!(md, Dims::new(2, 2, 16, 16));
        for b in 0..md.n {
            for p in 0..md.plane() {
                let m0 = mask.data()[md.at(b, 0, 0, 0) + p];
                let m1 = mask.data()[md.at(b, 1, 0, 0) + p];
                assert_eq!(m0 + m1, 1.0);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = seeded_model(&["a"]);
        let x = rand_input(5, Dims::new(1, 3, 16, 16));
        let mut tape = Tape::inference();
        assert!(matches!(
            m.forward(&mut tape, &x, &x, &id("zzz"), Mode::Train),
            Err(Error::UnknownDataset(_))
        ));
        let odd = rand_input(6, Dims::new(1, 3, 24, 24));
        assert!(matches!(
            m.forward(&mut tape, &odd, &odd, &id("a"), Mode::Train),
            Err(Error::Shape { .. })
        ));
        let wrong_c = rand_input(7, Dims::new(1, 4, 16, 16));
        assert!(m.forward(&mut tape, &wrong_c, &wrong_c, &id("a"), Mode::Train).is_err());
    }

    #[test]
    fn siamese_encoder_features_are_bitwise_identical_for_equal_inputs() {
        let m = seeded_model(&["a"]);
        let x = rand_input(8, Dims::new(2, 3, 16, 16));
        let mut tape = Tape::inference();
        let f1 = m.encode(&mut tape, &x, &id("a"), Mode::Train).unwrap();
        let f2 = m.encode(&mut tape, &x, &id("a"), Mode::Train).unwrap();
        for (a, b) in f1.iter().zip(&f2) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn add_dataset_clone_init_matches_source_exactly() {
        let mut m = seeded_model(&["a"]);
        seed_stats(&m, &id("a"));
        m.add_dataset(&id("b"), Some(&id("a"))).unwrap();
        assert_eq!(eval_logits(&m, &id("a"), 10), eval_logits(&m, &id("b"), 10));

        // fresh init diverges
        m.add_dataset(&id("c"), None).unwrap();
        seed_stats(&m, &id("c"));
        assert_ne!(eval_logits(&m, &id("a"), 10), eval_logits(&m, &id("c"), 10));
    }

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut m = seeded_model(&["a"]);
        assert!(matches!(m.add_dataset(&id("a"), None), Err(Error::DuplicateDataset(_))));
    }

    #[test]
    fn adapter_only_scope_freezes_every_shared_weight() {
        let m = seeded_model(&["a", "b"]);
        let selected = m.trainable_set(&id("b"), Scope::AdapterOnly).unwrap();
        assert!(!selected.is_empty());
        for (name, p) in m.shared_params() {
            assert!(!p.trainable(), "{name} must be frozen");
        }
        // dataset a's bank entries and adapter stay frozen too
        for (_, layer) in m.encoder_bn() {
            let (g, b) = layer.params_for(&id("a")).unwrap();
            assert!(!g.trainable() && !b.trainable());
            let (g, b) = layer.params_for(&id("b")).unwrap();
            assert!(g.trainable() && b.trainable());
        }
        for (name, p) in m.adapter_params(&id("a")).unwrap() {
            assert!(!p.trainable(), "{name} must be frozen");
        }

        let full = m.trainable_set(&id("b"), Scope::Full).unwrap();
        let shared: usize = m.shared_params().iter().map(|(_, p)| p.count()).sum();
        let full_count: usize = full.iter().map(|p| p.count()).sum();
        let adapter_count: usize = selected.iter().map(|p| p.count()).sum();
        assert_eq!(full_count - adapter_count, shared);
    }

    #[test]
    fn adapter_only_training_leaves_historical_outputs_bitwise_unchanged() {
        let mut m = seeded_model(&["a"]);
        seed_stats(&m, &id("a"));
        m.add_dataset(&id("b"), Some(&id("a"))).unwrap();
        let before_a = eval_logits(&m, &id("a"), 20);
        let shared_before: Vec<u32> = m
            .shared_params()
            .iter()
            .flat_map(|(_, p)| p.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();

        let params = m.trainable_set(&id("b"), Scope::AdapterOnly).unwrap();
        let cfg = SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 };
        let x1 = rand_input(21, Dims::new(2, 3, 16, 16));
        let x2 = rand_input(22, Dims::new(2, 3, 16, 16));
        let labels = LabelMap::new(2, 16, 16, vec![1; 2 * 256]).unwrap();
        for _ in 0..3 {
            for p in &params {
                p.zero_grad();
            }
            let mut tape = Tape::recording();
            let out = m.forward(&mut tape, &x1, &x2, &id("b"), Mode::Train).unwrap();
            let loss = softmax_cross_entropy(&mut tape, &out.logits, &labels).unwrap();
            tape.backward(&loss).unwrap();
            sgd_step(&params, &cfg).unwrap();
        }

        let shared_after: Vec<u32> = m
            .shared_params()
            .iter()
            .flat_map(|(_, p)| p.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        assert_eq!(shared_before, shared_after, "shared weights must be bitwise unchanged");
        assert_eq!(before_a, eval_logits(&m, &id("a"), 20), "historical outputs must not move");
        // and the new adapter actually learned something
        assert_ne!(eval_logits(&m, &id("b"), 20), before_a);
    }

    #[test]
    fn partition_fraction_is_small_and_monotone_in_eta() {
        // default desk-scale config
        let mut m = CanetModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        m.add_dataset(&id("a"), None).unwrap();
        let part = m.param_partition(&id("a")).unwrap();
        assert!(part.fraction < 0.15, "fraction {} too large", part.fraction);
        let single = (part.shared_count + part.adapter_count + part.bn_bank_count_per_dataset) as f64;
        assert!((part.adapter_count as f64) / single < 0.15);

        let mut last = f64::INFINITY;
        for eta in (2..=4).rev() {
            let cfg = ModelConfig { eta, ..ModelConfig::default() };
            let mut m = CanetModel::<f32>::new(cfg, 1).unwrap();
            m.add_dataset(&id("a"), None).unwrap();
            let p = m.param_partition(&id("a")).unwrap();
            assert!(p.fraction < last, "fraction must strictly decrease as eta decreases");
            last = p.fraction;
        }
    }

    #[test]
    fn partition_is_complete_and_disjoint() {
        let m = seeded_model(&["a", "b"]);
        let pa = m.param_partition(&id("a")).unwrap();
        let pb = m.param_partition(&id("b")).unwrap();
        let total = m.total_param_count();
        assert_eq!(
            pa.shared_count
                + pa.adapter_count
                + pa.bn_bank_count_per_dataset
                + pb.adapter_count
                + pb.bn_bank_count_per_dataset,
            total,
            "partition must cover every parameter exactly once"
        );
    }

    #[test]
    fn no_icm_ablation_emits_prediction_directly() {
        let mut m = seeded_model(&["a"]);
        m.apply_ablation(Ablation::NoIcm).unwrap();
        let x1 = rand_input(30, Dims::new(2, 3, 16, 16));
        let x2 = rand_input(31, Dims::new(2, 3, 16, 16));
        let mut tape = Tape::inference();
        let out = m.forward(&mut tape, &x1, &x2, &id("a"), Mode::Train).unwrap();
        assert!(out.mask.is_none());
        assert!(m.icm_for(&id("a")).is_none());
    }

    #[test]
    fn shared_icm_ablation_shares_one_parameter_set() {
        let mut m = seeded_model(&["a", "b"]);
        m.apply_ablation(Ablation::SharedIcm).unwrap();
        let ia = m.icm_for(&id("a")).unwrap().param_identity();
        let ib = m.icm_for(&id("b")).unwrap().param_identity();
        assert_eq!(ia, ib, "mask parameters must be object-identical across adapters");
    }

    #[test]
    fn shared_bn_ablation_routes_all_datasets_through_one_bank() {
        let mut m = seeded_model(&["a"]);
        seed_stats(&m, &id("a"));
        m.apply_ablation(Ablation::SharedBn).unwrap();
        m.add_dataset(&id("b"), None).unwrap();
        for (_, layer) in m.encoder_bn() {
            assert_eq!(layer.dataset_count(), 1);
        }
        seed_stats(&m, &id("b"));
        // perturb a's stats; b's outputs must move too
        let before_b = eval_logits(&m, &id("b"), 41);
        for (_, layer) in m.encoder_bn() {
            let mut stats = layer.stats_for(&id("a")).unwrap();
            for v in stats.mean.iter_mut() {
                *v += 0.5;
            }
            layer.set_stats(&id("a"), stats).unwrap();
        }
        let after_b = eval_logits(&m, &id("b"), 41);
        assert_ne!(before_b, after_b, "shared bank must affect every dataset");
    }

    #[test]
    fn config_validation_rejects_bad_eta() {
        let cfg = ModelConfig { eta: 1, ..small_config() };
        assert!(CanetModel::<f32>::new(cfg, 0).is_err());
        let cfg = ModelConfig { eta: 5, ..small_config() };
        assert!(CanetModel::<f32>::new(cfg, 0).is_err());
    }

    #[test]
    fn residual_and_inverted_stages_run_and_downsample() {
        for kind in [BlockKind::Residual, BlockKind::InvertedResidual] {
            let cfg = ModelConfig {
                widths: vec![4, 8],
                block_kinds: vec![kind; 2],
                eta: 2,
                icm_width: 4,
                pooling_mode: PoolingMode::Channel,
                bn_scope: BnScope::AllShared,
            };
            let mut m = CanetModel::<f32>::new(cfg, 9).unwrap();
            m.add_dataset(&id("a"), None).unwrap();
            let x1 = rand_input(50, Dims::new(1, 3, 8, 8));
            let x2 = rand_input(51, Dims::new(1, 3, 8, 8));
            let mut tape = Tape::inference();
            let out = m.forward(&mut tape, &x1, &x2, &id("a"), Mode::Train).unwrap();
            assert_eq!(out.logits.dims(), Dims::new(1, 2, 8, 8));
        }
    }
}
