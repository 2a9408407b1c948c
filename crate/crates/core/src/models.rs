//! Convolutional autoencoder and U-Net sharing one encoder definition, encoder
//! transfer, freezing, and checkpoints.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::layers::{DoubleCache, UnitCache};
use crate::nn::{maxpool2, maxpool2_backward, Conv2d, DoubleConv, ParamStore, Registry, Tensor, UpConvBnRelu};
use crate::rng::stream_rng;
use crate::{Error, Result};

pub const ENCODER_PREFIX: &str = "encoder.";
const MAGIC: &[u8; 8] = b"FNFCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSchema {
    pub in_channels: usize,
    pub base_filters: usize,
    pub n_levels: usize,
}

impl Default for EncoderSchema {
    fn default() -> Self {
        Self {
            in_channels: 5,
            base_filters: 64,
            n_levels: 4,
        }
    }
}

impl EncoderSchema {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::Config("encoder needs at least one input channel and filter".into()));
        }
        if self.n_levels == 0 || self.n_levels > 7 {
            return Err(Error::Config(format!("n_levels must be in 1..=7, got {}", self.n_levels)));
        }
        Ok(())
    }

    /// Filters at `level`; `level == n_levels` is the bottleneck.
    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Checks that a `size`x`size` input survives `n_levels` poolings.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let div = 1 << self.n_levels;
        if x.c != self.in_channels || x.h % div != 0 || x.w % div != 0 || x.h == 0 || x.w == 0 {
            return Err(Error::shape(
                format!("[n, {}, k*{div}, k*{div}]", self.in_channels),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!(
            "encoder:in={};filters={};levels={};conv3x3-bn-relu-x2;maxpool2",
            self.in_channels, self.base_filters, self.n_levels
        ));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Cae,
    Unet,
}

/// What a checkpoint was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "ssl-id")]
    SslIdentity,
    #[serde(rename = "ssl-in")]
    SslInpainting,
    #[serde(rename = "fsl")]
    Fsl,
    #[serde(rename = "dst")]
    Dst,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::SslIdentity => "ssl-id",
            Task::SslInpainting => "ssl-in",
            Task::Fsl => "fsl",
            Task::Dst => "dst",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssl-id" => Ok(Task::SslIdentity),
            "ssl-in" => Ok(Task::SslInpainting),
            "fsl" => Ok(Task::Fsl),
            "dst" => Ok(Task::Dst),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// Which parts of a U-Net are optimized during downstream training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainability {
    #[serde(rename = "E+D")]
    EncoderDecoder,
    #[serde(rename = "D")]
    DecoderOnly,
}

impl FromStr for Trainability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "E+D" => Ok(Trainability::EncoderDecoder),
            "D" => Ok(Trainability::DecoderOnly),
            _ => Err(Error::Config(format!("unknown trainability mode `{s}` (expected E+D or D)"))),
        }
    }
}

impl fmt::Display for Trainability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trainability::EncoderDecoder => "E+D",
            Trainability::DecoderOnly => "D",
        })
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    levels: Vec<DoubleConv>,
    bottleneck: DoubleConv,
}

struct EncoderCache {
    levels: Vec<DoubleCache>,
    pools: Vec<(Vec<u8>, usize, usize)>,
    bottleneck: DoubleCache,
}

impl Encoder {
    fn new(reg: &mut Registry, s: &EncoderSchema) -> Self {
        let mut levels = Vec::with_capacity(s.n_levels);
        let mut cin = s.in_channels;
        for l in 0..s.n_levels {
            levels.push(DoubleConv::new(reg, &format!("encoder.level{l}"), cin, s.filters(l)));
            cin = s.filters(l);
        }
        let bottleneck = DoubleConv::new(reg, "encoder.bottleneck", cin, s.filters(s.n_levels));
        Self { levels, bottleneck }
    }

    /// Per-level feature maps before pooling, then the bottleneck.
    fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Vec<Tensor> {
        let mut feats = Vec::with_capacity(self.levels.len() + 1);
        let mut cur = x.clone();
        for lvl in &self.levels {
            let f = lvl.forward_eval(store, &cur);
            cur = maxpool2(&f).0;
            feats.push(f);
        }
        feats.push(self.bottleneck.forward_eval(store, &cur));
        feats
    }

    fn forward_train(&self, store: &mut ParamStore, x: Tensor) -> EncoderCache {
        let mut levels = Vec::with_capacity(self.levels.len());
        let mut pools = Vec::with_capacity(self.levels.len());
        let mut cur = x;
        for lvl in &self.levels {
            let c = lvl.forward_train(store, cur);
            let f = c.output();
            let (p, arg) = maxpool2(f);
            pools.push((arg, f.h, f.w));
            levels.push(c);
            cur = p;
        }
        let bottleneck = self.bottleneck.forward_train(store, cur);
        EncoderCache {
            levels,
            pools,
            bottleneck,
        }
    }

    /// `d_skips[l]` (if any) is the gradient arriving at level `l` features from
    /// outside the encoder path.
    fn backward(&self, store: &mut ParamStore, cache: &EncoderCache, d_bottleneck: &Tensor, d_skips: Option<&[Tensor]>) {
        let mut d = self
            .bottleneck
            .backward(store, &cache.bottleneck, d_bottleneck, true)
            .expect("bottleneck input gradient");
        for l in (0..self.levels.len()).rev() {
            let (arg, h, w) = &cache.pools[l];
            let mut df = maxpool2_backward(&d, arg, *h, *w);
            if let Some(skips) = d_skips {
                df.data.iter_mut().zip(&skips[l].data).for_each(|(a, b)| *a += b);
            }
            let need = l > 0;
            match self.levels[l].backward(store, &cache.levels[l], &df, need) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Decoder {
    Cae {
        ups: Vec<UpConvBnRelu>,
        head: Conv2d,
    },
    Unet {
        ups: Vec<UpConvBnRelu>,
        convs: Vec<DoubleConv>,
        head: Conv2d,
    },
}

enum DecoderCache {
    Cae {
        ups: Vec<UnitCache>,
        head_in: Tensor,
    },
    Unet {
        ups: Vec<UnitCache>,
        convs: Vec<DoubleCache>,
        head_in: Tensor,
    },
}

impl Decoder {
    fn cae(reg: &mut Registry, s: &EncoderSchema) -> Self {
        // ups[i] goes from level n-i to level n-i-1
        let ups = (0..s.n_levels)
            .rev()
            .map(|l| UpConvBnRelu::new(reg, &format!("decoder.up{l}"), s.filters(l + 1), s.filters(l), 3))
            .collect();
        let head = Conv2d::new(reg, "decoder.head", s.filters(0), s.in_channels, 3, 1, 1, true);
        Decoder::Cae { ups, head }
    }

    fn unet(reg: &mut Registry, s: &EncoderSchema) -> Self {
        let mut ups = Vec::new();
        let mut convs = Vec::new();
        for l in (0..s.n_levels).rev() {
            ups.push(UpConvBnRelu::new(reg, &format!("decoder.up{l}"), s.filters(l + 1), s.filters(l), 2));
            convs.push(DoubleConv::new(reg, &format!("decoder.level{l}"), 2 * s.filters(l), s.filters(l)));
        }
        let head = Conv2d::new(reg, "decoder.head", s.filters(0), 1, 1, 1, 0, true);
        Decoder::Unet { ups, convs, head }
    }

    /// Pre-activation logits.
    fn forward_eval(&self, store: &ParamStore, feats: &[Tensor]) -> Tensor {
        let n = feats.len() - 1;
        let mut cur = feats[n].clone();
        match self {
            Decoder::Cae { ups, head } => {
                for up in ups {
                    cur = up.forward_eval(store, &cur);
                }
                head.forward(store, &cur)
            }
            Decoder::Unet { ups, convs, head } => {
                for (i, (up, conv)) in ups.iter().zip(convs).enumerate() {
                    let u = up.forward_eval(store, &cur);
                    cur = conv.forward_eval(store, &Tensor::concat_channels(&feats[n - 1 - i], &u));
                }
                head.forward(store, &cur)
            }
        }
    }

    fn forward_train(&self, store: &mut ParamStore, enc: &EncoderCache) -> (Tensor, DecoderCache) {
        let n = enc.levels.len();
        let mut cur = enc.bottleneck.output().clone();
        match self {
            Decoder::Cae { ups, head } => {
                let mut caches = Vec::with_capacity(ups.len());
                for up in ups {
                    let c = up.forward_train(store, cur);
                    cur = c.output().clone();
                    caches.push(c);
                }
                let z = head.forward(store, &cur);
                (z, DecoderCache::Cae { ups: caches, head_in: cur })
            }
            Decoder::Unet { ups, convs, head } => {
                let mut uc = Vec::with_capacity(ups.len());
                let mut cc = Vec::with_capacity(ups.len());
                for (i, (up, conv)) in ups.iter().zip(convs).enumerate() {
                    let c = up.forward_train(store, cur);
                    let cat = Tensor::concat_channels(enc.levels[n - 1 - i].output(), c.output());
                    uc.push(c);
                    let d = conv.forward_train(store, cat);
                    cur = d.output().clone();
                    cc.push(d);
                }
                let z = head.forward(store, &cur);
                (
                    z,
                    DecoderCache::Unet {
                        ups: uc,
                        convs: cc,
                        head_in: cur,
                    },
                )
            }
        }
    }

    /// Returns (gradient at the bottleneck, gradients at the skip features by level).
    fn backward(
        &self,
        store: &mut ParamStore,
        cache: &DecoderCache,
        dz: &Tensor,
        need_input: bool,
    ) -> Option<(Tensor, Option<Vec<Tensor>>)> {
        match (self, cache) {
            (Decoder::Cae { ups, head }, DecoderCache::Cae { ups: uc, head_in }) => {
                let mut d = head.backward(store, head_in, dz, true).expect("head input gradient");
                for i in (0..ups.len()).rev() {
                    let need = i > 0 || need_input;
                    match ups[i].backward(store, &uc[i], &d, need) {
                        Some(dx) => d = dx,
                        None => return None,
                    }
                }
                Some((d, None))
            }
            (
                Decoder::Unet { ups, convs, head },
                DecoderCache::Unet {
                    ups: uc,
                    convs: cc,
                    head_in,
                },
            ) => {
                let n = ups.len();
                let mut d = head.backward(store, head_in, dz, true).expect("head input gradient");
                let mut skips: Vec<Option<Tensor>> = vec![None; n];
                for i in (0..n).rev() {
                    let dcat = convs[i]
                        .backward(store, &cc[i], &d, true)
                        .expect("decoder conv input gradient");
                    let skip_c = dcat.c / 2;
                    let (dskip, du) = dcat.split_channels(skip_c);
                    skips[n - 1 - i] = Some(dskip);
                    let need = i > 0 || need_input;
                    match ups[i].backward(store, &uc[i], &du, need) {
                        Some(dx) => d = dx,
                        None => return None,
                    }
                }
                Some((d, Some(skips.into_iter().map(|s| s.expect("skip gradient")).collect())))
            }
            _ => unreachable!("decoder cache does not match decoder"),
        }
    }
}

/// Activations kept between [`Model::forward_train`] and [`Model::backward`].
pub struct ForwardCache {
    enc: EncoderCache,
    dec: DecoderCache,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// A network plus its named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub schema: EncoderSchema,
    pub arch: Arch,
    pub seed: u64,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
}

impl Model {
    pub fn new(arch: Arch, schema: EncoderSchema, seed: u64) -> Result<Self> {
        schema.validate()?;
        let mut reg = Registry::default();
        let encoder = Encoder::new(&mut reg, &schema);
        let decoder = match arch {
            Arch::Cae => Decoder::cae(&mut reg, &schema),
            Arch::Unet => Decoder::unet(&mut reg, &schema),
        };
        let mut rng = stream_rng(seed, 0x1417);
        reg.store.init_uniform(&reg.fan_in, &mut rng);
        reg.store.zero_grad();
        Ok(Self {
            schema,
            arch,
            seed,
            params: reg.store,
            encoder,
            decoder,
        })
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }

    pub fn is_encoder_key(name: &str) -> bool {
        name.starts_with(ENCODER_PREFIX)
    }

    fn activate(&self, z: &mut Tensor) {
        match self.arch {
            Arch::Cae => z.data.iter_mut().for_each(|v| *v = v.tanh()),
            Arch::Unet => z.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
    }

    /// Inference forward (batch norm uses running statistics). CAE output is in
    /// (-1, 1) with the input's shape; U-Net output is a one-channel probability map.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.schema.check_input(x)?;
        let feats = self.encoder.forward_eval(&self.params, x);
        let mut z = self.decoder.forward_eval(&self.params, &feats);
        self.activate(&mut z);
        Ok(z)
    }

    /// Encoder-only inference forward: pre-pool features of every level, then the bottleneck.
    pub fn encode(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.schema.check_input(x)?;
        Ok(self.encoder.forward_eval(&self.params, x))
    }

    /// Training forward: batch statistics for trainable batch-norm layers.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<ForwardCache> {
        self.schema.check_input(x)?;
        let enc = self.encoder.forward_train(&mut self.params, x.clone());
        let (mut z, dec) = self.decoder.forward_train(&mut self.params, &enc);
        self.activate(&mut z);
        Ok(ForwardCache { enc, dec, output: z })
    }

    /// Accumulates parameter gradients given the loss gradient with respect to the
    /// activated output. The encoder pass is skipped when the encoder is frozen.
    pub fn backward(&mut self, cache: &ForwardCache, d_out: &Tensor) {
        let y = &cache.output;
        let dz = Tensor {
            data: match self.arch {
                Arch::Cae => y.data.iter().zip(&d_out.data).map(|(y, d)| d * (1.0 - y * y)).collect(),
                Arch::Unet => y.data.iter().zip(&d_out.data).map(|(y, d)| d * y * (1.0 - y)).collect(),
            },
            ..*y
        };
        let enc_trainable = self.params.iter().any(|p| Self::is_encoder_key(&p.name) && p.trainable);
        if let Some((db, skips)) = self.decoder.backward(&mut self.params, &cache.dec, &dz, enc_trainable) {
            if enc_trainable {
                self.encoder.backward(&mut self.params, &cache.enc, &db, skips.as_deref());
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    pub fn set_trainability(&mut self, mode: Trainability) {
        for p in self.params.iter_mut() {
            p.trainable = match mode {
                Trainability::EncoderDecoder => true,
                Trainability::DecoderOnly => !Self::is_encoder_key(&p.name),
            };
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().filter(|p| !p.role.is_buffer()).map(|p| p.len()).sum()
    }
}

/// Copies every encoder array (weights and batch-norm statistics) from `src` into
/// `dst`. The decoder of `dst` is untouched.
pub fn transfer_encoder(src: &Model, dst: &mut Model) -> Result<()> {
    if src.schema_hash() != dst.schema_hash() {
        return Err(Error::Schema(format!(
            "source encoder {:?} does not match destination {:?}",
            src.schema, dst.schema
        )));
    }
    for p in src.params.iter().filter(|p| Model::is_encoder_key(&p.name)) {
        let q = dst
            .params
            .by_name_mut(&p.name)
            .ok_or_else(|| Error::Schema(format!("destination lacks `{}`", p.name)))?;
        if q.shape != p.shape {
            return Err(Error::Schema(format!("shape of `{}` differs", p.name)));
        }
        q.value.copy_from_slice(&p.value);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_hash: String,
    pub schema: EncoderSchema,
    pub arch: Arch,
    pub seed: u64,
    pub task: Task,
    pub config_digest: String,
    arrays: Vec<ArrayEntry>,
}

/// Writes `model` as a named-array archive: magic, header length, JSON header,
/// then little-endian f32 data.
pub fn save_checkpoint(path: &Path, model: &Model, task: Task, config_digest: &str) -> Result<()> {
    let mut arrays = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for p in model.params.iter() {
        arrays.push(ArrayEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            trainable: p.trainable,
        });
        offset += p.len();
    }
    let header = CheckpointHeader {
        schema_hash: model.schema_hash(),
        schema: model.schema,
        arch: model.arch,
        seed: model.seed,
        task,
        config_digest: config_digest.to_string(),
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params.iter() {
        for v in &p.value {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_raw(path)?.0)
}

fn read_raw(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Data(format!("{} is not a checkpoint", path.display())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + hlen {
        return Err(Error::Data("truncated checkpoint header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..16 + hlen]).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let data = bytes.split_off(16 + hlen);
    Ok((header, data))
}

/// Loads a checkpoint. With `expected`, rejects archives built for another encoder schema.
pub fn load_checkpoint(path: &Path, expected: Option<&EncoderSchema>) -> Result<(Model, CheckpointHeader)> {
    let (header, data) = read_raw(path)?;
    if header.schema_hash != header.schema.hash() {
        return Err(Error::Schema("checkpoint schema hash does not match its schema".into()));
    }
    if let Some(s) = expected {
        if s.hash() != header.schema_hash {
            return Err(Error::Schema(format!(
                "checkpoint encoder {:?} does not match expected {:?}",
                header.schema, s
            )));
        }
    }
    let mut model = Model::new(header.arch, header.schema, header.seed)?;
    if header.arrays.len() != model.params.len() {
        return Err(Error::Schema("checkpoint array count differs from architecture".into()));
    }
    for a in &header.arrays {
        let p = model
            .params
            .by_name_mut(&a.name)
            .ok_or_else(|| Error::Schema(format!("unknown array `{}`", a.name)))?;
        if p.shape != a.shape {
            return Err(Error::Schema(format!("shape of `{}` differs", a.name)));
        }
        let (start, end) = (a.offset * 4, (a.offset + p.len()) * 4);
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Data(format!("array `{}` truncated", a.name)))?;
        for (v, chunk) in p.value.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        p.trainable = a.trainable;
    }
    Ok((model, header))
}
