//! File formats: binary PGM images, `.tns` tensor containers, checkpoints,
//! on-disk datasets and the JSON run configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::Bandwidth;
use crate::model::{ModelConfig, StaUnet, DEFAULT_HEADS, DEFAULT_LAYERS, DEFAULT_TOKEN_SIZES, NUM_STAGES};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::TrainConfig;

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    /// Binary `P5` encoding with maxval 255.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("pgm: {m}"));
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(bad("missing P5 magic"));
        }
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err(bad("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad header number"))?;
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("header must end in a single whitespace byte"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad(&format!("only maxval 255 is supported, got {maxval}")));
        }
        let n = width * height;
        if bytes.len() - pos != n {
            return Err(bad(&format!("expected {n} pixel bytes, found {}", bytes.len() - pos)));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

const TNS_MAGIC: &[u8; 4] = b"TNS1";

/// A tensor read from a `.tns` container.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match self {
            AnyTensor::F32(t) => encode_tns(t),
            AnyTensor::F64(t) => encode_tns(t),
        }
    }
}

fn push_scalar<T: Scalar>(out: &mut Vec<u8>, v: T) {
    match T::DTYPE {
        DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
        DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
    }
}

/// `TNS1 | u8 dtype | u8 ndim | u32 dims… | payload`, all little-endian.
pub fn encode_tns<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(TNS_MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        push_scalar(&mut out, v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_tns(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader { bytes, pos: 0, what: "tns" };
    if r.take(4)? != TNS_MAGIC {
        return Err(Error::Format("tns: bad magic".into()));
    }
    let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format("tns: unknown dtype".into()))?;
    let ndim = r.u8()? as usize;
    let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tns: size overflow".into()))?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(&shape, r.f32s(n)?)?),
        DType::F64 => AnyTensor::F64(Tensor::new(&shape, r.f64s(n)?)?),
    };
    r.finish()?;
    Ok(t)
}

pub fn save_tns<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write_atomic(path, &encode_tns(t))
}

pub fn load_tns(path: &Path) -> Result<AnyTensor> {
    decode_tns(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

const CKPT_MAGIC: &[u8; 4] = b"STAU";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub params: Vec<ParamHeader>,
    pub dtype: String,
    pub model: ModelConfig,
    /// Run configuration the checkpoint was produced with.
    pub config: serde_json::Value,
    pub epoch: usize,
    pub iteration: usize,
}

/// Model parameters plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &StaUnet<T>, config: serde_json::Value, epoch: usize, iteration: usize) -> Self {
        let entries = model.params.entries();
        Self {
            header: CheckpointHeader {
                params: entries
                    .iter()
                    .map(|e| ParamHeader {
                        name: e.name.clone(),
                        shape: e.value.shape().to_vec(),
                        trainable: e.trainable,
                    })
                    .collect(),
                dtype: "f32".into(),
                model: model.config.clone(),
                config,
                epoch,
                iteration,
            },
            tensors: entries.iter().map(|e| e.value.cast()).collect(),
        }
    }

    /// Copy parameters into `model`, which must have the same layout.
    pub fn apply_to<T: Scalar>(&self, model: &mut StaUnet<T>) -> Result<()> {
        if self.header.model != model.config {
            return Err(Error::InvalidArgument("checkpoint model configuration differs from the target model".into()));
        }
        let entries = model.params.entries_mut();
        if entries.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                entries.len()
            )));
        }
        for ((e, h), t) in entries.iter_mut().zip(&self.header.params).zip(&self.tensors) {
            if e.name != h.name || e.value.shape() != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "checkpoint tensor {} {:?} does not match model parameter {} {:?}",
                    h.name,
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
            e.value = t.cast();
        }
        Ok(())
    }

    /// `STAU | u32 version | u32 header length | JSON header | f32 payloads`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            what: "checkpoint",
        };
        if r.take(4)? != CKPT_MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!("checkpoint: unsupported dtype {}", header.dtype)));
        }
        let tensors = header
            .params
            .iter()
            .map(|p| Tensor::new(&p.shape, r.f32s(p.shape.iter().product())?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// `dataset.json` manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub splits: BTreeMap<String, Vec<String>>,
}

/// Write splits as `images/<name>.pgm`, `masks/<name>.pgm` and `dataset.json`.
pub fn write_dataset(dir: &Path, splits: &[(&str, &Dataset)]) -> Result<DatasetManifest> {
    let first = splits.first().ok_or_else(|| Error::InvalidArgument("no splits to write".into()))?.1;
    let mut manifest = DatasetManifest {
        num_classes: first.num_classes,
        height: first.height,
        width: first.width,
        splits: BTreeMap::new(),
    };
    for (split, data) in splits {
        data.validate()?;
        if (data.num_classes, data.height, data.width) != (manifest.num_classes, manifest.height, manifest.width) {
            return Err(Error::InvalidArgument(format!("split {split} has a different layout")));
        }
        for s in &data.samples {
            let pgm = |pixels: &[u8]| Pgm {
                width: data.width,
                height: data.height,
                pixels: pixels.to_vec(),
            };
            pgm(&s.image).save(&dir.join("images").join(format!("{}.pgm", s.name)))?;
            pgm(&s.mask).save(&dir.join("masks").join(format!("{}.pgm", s.name)))?;
        }
        manifest
            .splits
            .insert(split.to_string(), data.samples.iter().map(|s| s.name.clone()).collect());
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join("dataset.json"), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("dataset.json");
    let bytes = read_file(&path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: format!("{}: {}", path.display(), e.path()),
        msg: e.inner().to_string(),
    })
}

pub fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let names = manifest
        .splits
        .get(split)
        .ok_or_else(|| Error::InvalidArgument(format!("dataset {} has no split `{split}`", dir.display())))?;
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let image = Pgm::load(&dir.join("images").join(format!("{name}.pgm")))?;
        let mask = Pgm::load(&dir.join("masks").join(format!("{name}.pgm")))?;
        for p in [&image, &mask] {
            if (p.height, p.width) != (manifest.height, manifest.width) {
                return Err(Error::Format(format!(
                    "{name}: extent {}x{} differs from manifest {}x{}",
                    p.height, p.width, manifest.height, manifest.width
                )));
            }
        }
        samples.push(Sample {
            name: name.clone(),
            image: image.pixels,
            mask: mask.pixels,
        });
    }
    let data = Dataset {
        height: manifest.height,
        width: manifest.width,
        num_classes: manifest.num_classes,
        samples,
    };
    data.validate()?;
    Ok(data)
}

pub const SCHEMA_VERSION: u32 = 1;

/// Architecture section of a run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "one")]
    pub input_channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    pub input_extent: (usize, usize),
    #[serde(default = "default_layers")]
    pub layers: [usize; NUM_STAGES],
    #[serde(default = "default_tokens")]
    pub token_sizes: [usize; NUM_STAGES],
    #[serde(default = "default_heads")]
    pub heads: [usize; NUM_STAGES],
}

fn one() -> usize {
    1
}
fn default_base() -> usize {
    64
}
fn default_layers() -> [usize; NUM_STAGES] {
    DEFAULT_LAYERS
}
fn default_tokens() -> [usize; NUM_STAGES] {
    DEFAULT_TOKEN_SIZES
}
fn default_heads() -> [usize; NUM_STAGES] {
    DEFAULT_HEADS
}

impl ModelSpec {
    pub fn to_config(&self) -> ModelConfig {
        ModelConfig::with_schedule(
            self.input_channels,
            self.num_classes,
            self.base_channels,
            self.input_extent,
            self.layers,
            self.token_sizes,
            self.heads,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataOptions {
    pub synth: SynthConfig,
    /// Samples per split name.
    pub splits: BTreeMap<String, usize>,
    pub seed: u64,
}

impl Default for GenDataOptions {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            splits: BTreeMap::from([("train".into(), 200), ("test".into(), 50), ("probe".into(), 64)]),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: String,
    pub exclude_classes: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: "test".into(),
            exclude_classes: Vec::new(),
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkaOptions {
    pub split: String,
    pub samples: usize,
    /// Block names to capture; empty selects every attention block.
    pub blocks: Vec<String>,
    pub max_features: Option<usize>,
    pub bandwidth: Bandwidth,
}

impl Default for CkaOptions {
    fn default() -> Self {
        Self {
            split: "probe".into(),
            samples: 64,
            blocks: Vec::new(),
            max_features: None,
            bandwidth: Bandwidth::Unit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsOptions {
    /// Extra token-size schedules to report totals for.
    pub schedules: Vec<[usize; NUM_STAGES]>,
}


/// Top-level JSON document accepted by every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dataset_dir: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub gen_data: GenDataOptions,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub cka: CkaOptions,
    #[serde(default)]
    pub flops: FlopsOptions,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{origin}: {}", e.path()),
            msg: e.inner().to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                path: format!("{origin}: schema_version"),
                msg: format!("unsupported schema version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            });
        }
        let model = cfg.model.to_config();
        model.validate().map_err(|e| Error::Config {
            path: format!("{origin}: model"),
            msg: e.to_string(),
        })?;
        cfg.train.validate().map_err(|e| Error::Config {
            path: format!("{origin}: train"),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}
