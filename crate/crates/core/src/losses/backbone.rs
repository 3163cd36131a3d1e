use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ins_autograd::{Tape, Tensor, Var};
use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{InsError, Result};

/// ImageNet statistics the VGG weights were trained with.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// File name looked up inside `INS_WEIGHTS_DIR`.
pub const VGG16_FILE: &str = "vgg16.safetensors";

/// Smallest accepted input side. Pooling is ceil-mode so every layer keeps at
/// least one pixel; 8 keeps `relu4_*` maps non-degenerate.
pub const MIN_INPUT_SIDE: usize = 8;

/// `(block, conv, out_channels, torchvision feature index)` for the 13
/// convolutions; a 2×2 max-pool follows the last conv of every block.
const VGG16: [(usize, usize, usize, usize); 13] = [
    (1, 1, 64, 0),
    (1, 2, 64, 2),
    (2, 1, 128, 5),
    (2, 2, 128, 7),
    (3, 1, 256, 10),
    (3, 2, 256, 12),
    (3, 3, 256, 14),
    (4, 1, 512, 17),
    (4, 2, 512, 19),
    (4, 3, 512, 21),
    (5, 1, 512, 24),
    (5, 2, 512, 26),
    (5, 3, 512, 28),
];

/// Activation after conv `j` of block `i`, written `relu{i}_{j}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerKey(pub usize, pub usize);

impl From<LayerKey> for String {
    fn from(k: LayerKey) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for LayerKey {
    type Error = InsError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "relu{}_{}", self.0, self.1)
    }
}

impl FromStr for LayerKey {
    type Err = InsError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || InsError::Config(format!("layer key `{s}` is not of the form relu<i>_<j>"));
        let rest = s.strip_prefix("relu").ok_or_else(bad)?;
        let (i, j) = rest.split_once('_').ok_or_else(bad)?;
        Ok(LayerKey(
            i.parse().map_err(|_| bad())?,
            j.parse().map_err(|_| bad())?,
        ))
    }
}

pub fn default_content_keys() -> Vec<LayerKey> {
    vec![LayerKey(2, 2)]
}

pub fn default_style_keys() -> Vec<LayerKey> {
    vec![
        LayerKey(1, 2),
        LayerKey(2, 2),
        LayerKey(3, 3),
        LayerKey(4, 3),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Pretrained VGG-16 read from a safetensors file.
    Vgg16,
    /// Same topology, narrower, fixed-seed random weights.
    Surrogate,
}

impl FromStr for BackboneKind {
    type Err = InsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(BackboneKind::Vgg16),
            "surrogate" => Ok(BackboneKind::Surrogate),
            other => Err(InsError::Config(format!(
                "unknown backbone `{other}` (expected vgg16 or surrogate)"
            ))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Surrogate => "surrogate",
        })
    }
}

#[derive(Clone, Debug)]
struct Conv {
    key: LayerKey,
    weight: Arc<Tensor>,
    bias: Arc<Tensor>,
}

/// Frozen convolutional feature extractor.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    kind: BackboneKind,
    convs: Vec<Conv>,
}

impl FeatureExtractor {
    /// Surrogate with VGG-16 widths divided by `divisor` and He-normal weights.
    pub fn surrogate(divisor: usize, seed: u64) -> Self {
        let divisor = divisor.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let convs = VGG16
            .iter()
            .map(|&(i, j, c, _)| {
                let c_out = (c / divisor).max(1);
                let std = (2.0 / (9 * c_in) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid normal");
                let weight =
                    Tensor::from_shape_fn(IxDyn(&[c_out, c_in, 3, 3]), |_| dist.sample(&mut rng));
                c_in = c_out;
                Conv {
                    key: LayerKey(i, j),
                    weight: Arc::new(weight),
                    bias: Arc::new(Tensor::zeros(IxDyn(&[c_out]))),
                }
            })
            .collect();
        Self {
            kind: BackboneKind::Surrogate,
            convs,
        }
    }

    /// Loads torchvision-layout VGG-16 weights (`features.{n}.weight/bias`,
    /// f32) from a safetensors file.
    pub fn vgg16(path: &Path) -> Result<Self> {
        let load = |reason: String| InsError::Load {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| load(e.to_string()))?;
        let st = SafeTensors::deserialize(&bytes).map_err(|e| load(e.to_string()))?;
        let mut c_in = 3;
        let mut convs = Vec::with_capacity(VGG16.len());
        for &(i, j, c_out, idx) in &VGG16 {
            let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
                let view = st
                    .tensor(&name)
                    .map_err(|e| load(format!("tensor `{name}`: {e}")))?;
                if view.dtype() != Dtype::F32 || view.shape() != shape {
                    return Err(load(format!(
                        "tensor `{name}` is {:?} {:?}, expected F32 {shape:?}",
                        view.dtype(),
                        view.shape()
                    )));
                }
                let data: Vec<f64> = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                Ok(Tensor::from_shape_vec(IxDyn(shape), data).expect("checked shape"))
            };
            let weight = fetch(format!("features.{idx}.weight"), &[c_out, c_in, 3, 3])?;
            let bias = fetch(format!("features.{idx}.bias"), &[c_out])?;
            convs.push(Conv {
                key: LayerKey(i, j),
                weight: Arc::new(weight),
                bias: Arc::new(bias),
            });
            c_in = c_out;
        }
        Ok(Self {
            kind: BackboneKind::Vgg16,
            convs,
        })
    }

    /// Expected location of the VGG-16 weights given `INS_WEIGHTS_DIR`.
    pub fn vgg16_path(weights_dir: Option<&Path>) -> PathBuf {
        weights_dir
            .unwrap_or_else(|| Path::new("."))
            .join(VGG16_FILE)
    }

    /// Builds the requested backbone; VGG-16 weights come from
    /// `weights_dir/vgg16.safetensors`.
    pub fn load(
        kind: BackboneKind,
        weights_dir: Option<&Path>,
        surrogate_divisor: usize,
    ) -> Result<Self> {
        match kind {
            BackboneKind::Vgg16 => Self::vgg16(&Self::vgg16_path(weights_dir)),
            BackboneKind::Surrogate => Ok(Self::surrogate(surrogate_divisor, SURROGATE_SEED)),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    /// Channel count at `key`.
    pub fn channels(&self, key: LayerKey) -> Option<usize> {
        self.convs
            .iter()
            .find(|c| c.key == key)
            .map(|c| c.weight.shape()[0])
    }

    pub fn check_keys(&self, keys: &[LayerKey]) -> Result<()> {
        for k in keys {
            if self.channels(*k).is_none() {
                return Err(InsError::Config(format!("unknown feature layer {k}")));
            }
        }
        Ok(())
    }

    /// Features of an `HW×3` image in `[0, 1]` (row-major pixels), each
    /// `C×H'×W'`, differentiable with respect to `image`.
    pub fn features_on_tape<'t>(
        &self,
        image: Var<'t>,
        height: usize,
        width: usize,
        keys: &[LayerKey],
    ) -> Result<BTreeMap<LayerKey, Var<'t>>> {
        self.check_keys(keys)?;
        if height < MIN_INPUT_SIDE || width < MIN_INPUT_SIDE {
            return Err(InsError::Argument(format!(
                "feature input {height}×{width} is below the {MIN_INPUT_SIDE}-pixel minimum"
            )));
        }
        if image.shape() != [height * width, 3] {
            return Err(InsError::Argument(format!(
                "image tensor {:?} does not match {height}×{width}",
                image.shape()
            )));
        }
        let tape = image.tape();
        let last = keys.iter().max().copied();
        let mean = channel_const(tape, IMAGENET_MEAN);
        let inv_std = channel_const(tape, IMAGENET_STD.map(|s| 1.0 / s));
        let mut x = image
            .sub(&mean)
            .mul(&inv_std)
            .t()
            .reshape(&[3, height, width]);
        let mut out = BTreeMap::new();
        let mut block = 1;
        for conv in &self.convs {
            if Some(conv.key) > last {
                break;
            }
            if conv.key.0 != block {
                x = x.max_pool2();
                block = conv.key.0;
            }
            let w = tape.constant_shared(Arc::clone(&conv.weight));
            let b = tape.constant_shared(Arc::clone(&conv.bias));
            x = x.conv3x3(&w, &b).relu();
            if keys.contains(&conv.key) {
                out.insert(conv.key, x);
            }
        }
        Ok(out)
    }

    /// Value-only features.
    pub fn extract_features(
        &self,
        image: &Image,
        keys: &[LayerKey],
    ) -> Result<BTreeMap<LayerKey, Tensor>> {
        let tape = Tape::new();
        let f = self.features_on_tape(
            tape.constant(image.to_tensor()),
            image.height,
            image.width,
            keys,
        )?;
        Ok(f.into_iter()
            .map(|(k, v)| (k, (*v.value()).clone()))
            .collect())
    }
}

/// Seed of the surrogate's random weights.
pub const SURROGATE_SEED: u64 = 0x5EED;

fn channel_const(tape: &Tape, v: [f64; 3]) -> Var<'_> {
    tape.constant(Tensor::from_shape_vec(IxDyn(&[1, 3]), v.to_vec()).expect("1×3"))
}
