//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "FACT" | version | manifest length | manifest (UTF-8 key=value lines)
//! tensor count | per tensor: name length, name, ndim, dims..., f32 values
//! ```
//!
//! Tensors appear in the model's visiting order. Nothing time- or
//! host-dependent is written, so identical models give identical bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::data::{Activity, ChannelStats, DatasetKind, Superclass};
use crate::error::{Error, Result};
use crate::model::{Architecture, FusionModel, Guidance, GuidanceConfig, Pathway, PathwayConfig};
use crate::nn::{BlockSpec, Module};
use crate::tensor::Tensor;
use crate::train::Expert;

pub const MAGIC: &[u8; 4] = b"FACT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Static expert alone.
    Static,
    /// Dynamic expert alone.
    Dynamic,
    /// Both experts and the gate.
    Full,
}

impl CheckpointKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointKind::Static => "static",
            CheckpointKind::Dynamic => "dynamic",
            CheckpointKind::Full => "full",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(CheckpointKind::Static),
            "dynamic" => Ok(CheckpointKind::Dynamic),
            "full" => Ok(CheckpointKind::Full),
            other => Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub dataset: DatasetKind,
    pub arch: Architecture,
    /// Output classes in order: the expert's classes, or the fused class order.
    pub classes: Vec<Activity>,
    pub stats: Option<ChannelStats>,
    /// Effective run configuration, echoed for reproducibility.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn tensors_of(m: &dyn Module) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    m.visit(&mut |name, t, _| out.push((name.to_string(), t.clone())));
    out
}

impl Checkpoint {
    pub fn from_expert(
        expert: &Expert,
        dataset: DatasetKind,
        stats: Option<ChannelStats>,
        config: Vec<(String, String)>,
    ) -> Self {
        Checkpoint {
            kind: match expert.superclass {
                Superclass::Static => CheckpointKind::Static,
                Superclass::Dynamic => CheckpointKind::Dynamic,
            },
            dataset,
            arch: expert.arch.clone(),
            classes: expert.labels.clone(),
            stats,
            config,
            tensors: tensors_of(&expert.pathway),
        }
    }

    pub fn from_model(
        model: &FusionModel,
        dataset: DatasetKind,
        stats: Option<ChannelStats>,
        config: Vec<(String, String)>,
    ) -> Self {
        Checkpoint {
            kind: CheckpointKind::Full,
            dataset,
            arch: model.arch.clone(),
            classes: model.class_order().to_vec(),
            stats,
            config,
            tensors: tensors_of(model),
        }
    }

    fn tensor_map(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    fn check_tensor_count(&self, module: &dyn Module) -> Result<()> {
        let expected = module.named_tensors().len();
        if expected != self.tensors.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint holds {} tensors, model has {expected}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    /// Rebuilds the expert stored in a static or dynamic checkpoint.
    pub fn to_expert(&self) -> Result<Expert> {
        let which = match self.kind {
            CheckpointKind::Static => Superclass::Static,
            CheckpointKind::Dynamic => Superclass::Dynamic,
            CheckpointKind::Full => {
                return Err(Error::Incompatible("expected an expert checkpoint, found a full model".into()))
            }
        };
        let mut pathway = Pathway::new(CheckpointKind::name(self.kind), self.arch.pathway(which), 0)?;
        self.check_tensor_count(&pathway)?;
        pathway.load_named(&self.tensor_map())?;
        Ok(Expert {
            superclass: which,
            labels: self.classes.clone(),
            arch: self.arch.clone(),
            pathway,
            history: Vec::new(),
            best_epoch: 0,
            notes: Vec::new(),
        })
    }

    /// Rebuilds the fused model stored in a full checkpoint.
    pub fn to_model(&self) -> Result<FusionModel> {
        if self.kind != CheckpointKind::Full {
            return Err(Error::Incompatible(format!(
                "expected a full model checkpoint, found a {} expert",
                self.kind.name()
            )));
        }
        let n_static = self.arch.static_path.num_outputs;
        if self.classes.len() < n_static {
            return Err(Error::Checkpoint("class list shorter than the static expert's outputs".into()));
        }
        let (s, d) = self.classes.split_at(n_static);
        let static_path = Pathway::new("static", &self.arch.static_path, 0)?;
        let dynamic_path = Pathway::new("dynamic", &self.arch.dynamic_path, 0)?;
        let guidance = Guidance::new(&self.arch.guidance, 0)?;
        let mut model = FusionModel::assemble(self.arch.clone(), static_path, dynamic_path, guidance, s, d)?;
        self.check_tensor_count(&model)?;
        model.load_named(&self.tensor_map())?;
        Ok(model)
    }

    pub fn manifest(&self) -> String {
        let mut m = String::new();
        let join = |v: &[Activity]| v.iter().map(|a| a.abbrev()).collect::<Vec<_>>().join(",");
        let blocks = |p: &PathwayConfig| {
            p.blocks
                .iter()
                .map(|b| format!("{}:{}:{}", b.d_in, b.d_out, b.d_pool))
                .collect::<Vec<_>>()
                .join(",")
        };
        let floats = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(m, "kind={}", self.kind.name());
        let _ = writeln!(m, "dataset={}", self.dataset.name());
        let _ = writeln!(m, "classes={}", join(&self.classes));
        let _ = writeln!(m, "in_channels={}", self.arch.in_channels);
        let _ = writeln!(m, "window_len={}", self.arch.window_len);
        let _ = writeln!(m, "static_blocks={}", blocks(&self.arch.static_path));
        let _ = writeln!(m, "static_outputs={}", self.arch.static_path.num_outputs);
        let _ = writeln!(m, "dynamic_blocks={}", blocks(&self.arch.dynamic_path));
        let _ = writeln!(m, "dynamic_outputs={}", self.arch.dynamic_path.num_outputs);
        let guidance: Vec<String> = self.arch.guidance.channels.iter().map(usize::to_string).collect();
        let _ = writeln!(m, "guidance={}", guidance.join(","));
        if let Some(s) = &self.stats {
            let _ = writeln!(m, "norm_mean={}", floats(&s.mean));
            let _ = writeln!(m, "norm_std={}", floats(&s.std));
        }
        for (k, v) in &self.config {
            let _ = writeln!(m, "config.{k}={v}");
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, manifest.len() as u32);
        out.extend_from_slice(manifest.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let manifest = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
        let mut ck = parse_manifest(manifest)?;
        let count = r.u32()? as usize;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            ck.tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Checkpoint(format!("manifest: bad value {value:?} for {key}"))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| v.parse().map_err(|_| bad(key, value))).collect()
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<BlockSpec>> {
    value
        .split(',')
        .map(|b| {
            let p: Vec<usize> = parse_list(key, &b.replace(':', ","))?;
            match p[..] {
                [d_in, d_out, d_pool] => Ok(BlockSpec::new(d_in, d_out, d_pool)),
                _ => Err(bad(key, value)),
            }
        })
        .collect()
}

fn parse_manifest(text: &str) -> Result<Checkpoint> {
    let mut fields: HashMap<&str, &str> = HashMap::new();
    let mut config = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line without '=': {line:?}")))?;
        if let Some(key) = k.strip_prefix("config.") {
            config.push((key.to_string(), v.to_string()));
        } else if fields.insert(k, v).is_some() {
            return Err(Error::Checkpoint(format!("manifest repeats {k}")));
        }
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")))
    };
    let num = |k: &str| get(k).and_then(|v| v.parse::<usize>().map_err(|_| bad(k, v)));

    let kind = CheckpointKind::parse(get("kind")?)?;
    let dataset = DatasetKind::from_str(get("dataset")?).map_err(|_| bad("dataset", fields["dataset"]))?;
    let classes = get("classes")?
        .split(',')
        .map(|a| Activity::from_abbrev(a).ok_or_else(|| bad("classes", a)))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture {
        in_channels: num("in_channels")?,
        window_len: num("window_len")?,
        static_path: PathwayConfig {
            blocks: parse_blocks("static_blocks", get("static_blocks")?)?,
            num_outputs: num("static_outputs")?,
        },
        dynamic_path: PathwayConfig {
            blocks: parse_blocks("dynamic_blocks", get("dynamic_blocks")?)?,
            num_outputs: num("dynamic_outputs")?,
        },
        guidance: GuidanceConfig {
            channels: parse_list("guidance", get("guidance")?)?,
        },
    };
    arch.validate()
        .map_err(|e| Error::Checkpoint(format!("manifest architecture invalid: {e}")))?;
    let stats = match (fields.get("norm_mean"), fields.get("norm_std")) {
        (Some(m), Some(s)) => {
            let stats = ChannelStats {
                mean: parse_list("norm_mean", m)?,
                std: parse_list("norm_std", s)?,
            };
            if stats.mean.len() != arch.in_channels || stats.std.len() != arch.in_channels {
                return Err(Error::Checkpoint("normalization statistics do not match the channel count".into()));
            }
            Some(stats)
        }
        (None, None) => None,
        _ => return Err(Error::Checkpoint("manifest has only half of the normalization statistics".into())),
    };
    Ok(Checkpoint {
        kind,
        dataset,
        arch,
        classes,
        stats,
        config,
        tensors: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BlockSpec;

    fn arch() -> Architecture {
        let path = |n| PathwayConfig {
            blocks: vec![BlockSpec::new(9, 4, 4), BlockSpec::new(4, 4, 4)],
            num_outputs: n,
        };
        Architecture {
            in_channels: 9,
            window_len: 32,
            static_path: path(3),
            dynamic_path: path(3),
            guidance: GuidanceConfig { channels: vec![9, 4] },
        }
    }

    fn model() -> FusionModel {
        let k = DatasetKind::UciHar;
        FusionModel::new(arch(), &k.static_labels(), &k.dynamic_labels(), 9).unwrap()
    }

    fn checkpoint() -> Checkpoint {
        let stats = ChannelStats {
            mean: (0..9).map(|i| 0.1 * i as f64).collect(),
            std: vec![1.0 / 3.0; 9],
        };
        Checkpoint::from_model(&model(), DatasetKind::UciHar, Some(stats), vec![("seed".into(), "42".into())])
    }

    #[test]
    fn canonical_bytes() {
        let bytes = checkpoint().to_bytes();
        let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
        assert_eq!(bytes, again);
        assert_eq!(&bytes[..4], b"FACT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    }

    #[test]
    fn manifest_round_trip() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.arch, ck.arch);
        assert_eq!(back.classes, ck.classes);
        assert_eq!(back.stats, ck.stats);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.to_model().unwrap().class_order(), model().class_order());
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = checkpoint().to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Checkpoint(_))));
        let mut bad_version = bytes.clone();
        bad_version[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint(_))));
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn kind_mismatch_is_incompatible() {
        let ck = checkpoint();
        assert!(matches!(ck.to_expert(), Err(Error::Incompatible(_))));
        let mut short = ck.clone();
        short.tensors.pop();
        assert!(matches!(short.to_model(), Err(Error::Incompatible(_))));
    }
}
