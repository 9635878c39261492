//! Classifier bundles and their on-disk container.
//!
//! Layout of a model file:
//!
//! ```text
//! magic   8 bytes   "TRODOMDL"
//! version u32 LE    1
//! hlen    u64 LE    length of the JSON header in bytes
//! header  hlen      UTF-8 JSON: layer list + metadata
//! payload           f32 LE weight blocks, per parametric layer: weight then bias
//! ```
//!
//! The same container (with magic `TRODODAT`) carries datasets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Params};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 8] = b"TRODOMDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Trojaned { trigger_id: String, mapping_id: String },
}

impl Provenance {
    pub fn is_trojaned(&self) -> bool {
        matches!(self, Provenance::Trojaned { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingMode {
    Standard,
    Adversarial { pgd_steps: usize, eps_linf: f64 },
    Adaptive { variant: u8, lambdas: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
    pub provenance: Provenance,
    pub training_mode: TrainingMode,
    pub seed: u64,
}

/// A classifier together with its provenance.
///
/// Parameters are held in `f64` but always lie on the `f32` grid, so the
/// single-precision payload round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    network: Network,
    meta: ModelMeta,
}

impl ModelBundle {
    pub fn new(mut network: Network, meta: ModelMeta) -> Result<Self> {
        if meta.num_classes != network.num_outputs() {
            return Err(Error::InvalidBundle(format!(
                "num_classes {} but final layer has {} outputs",
                meta.num_classes,
                network.num_outputs()
            )));
        }
        if meta.input_shape != network.input_shape() {
            return Err(Error::InvalidBundle(format!(
                "meta input shape {:?} differs from network input {:?}",
                meta.input_shape,
                network.input_shape()
            )));
        }
        network.quantize_f32();
        Ok(Self { network, meta })
    }

    /// Convenience constructor for a clean, standard-trained bundle.
    pub fn clean(network: Network, seed: u64) -> Result<Self> {
        let meta = ModelMeta {
            num_classes: network.num_outputs(),
            input_shape: network.input_shape().to_vec(),
            provenance: Provenance::Clean,
            training_mode: TrainingMode::Standard,
            seed,
        };
        Self::new(network, meta)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    /// Logits `z = f(x)`.
    pub fn evaluate_logits(&self, input: &Tensor) -> Result<Tensor> {
        self.network.logits(input)
    }

    /// Maximum softmax probability of one input.
    pub fn id_score(&self, input: &Tensor) -> Result<f64> {
        let z = self.network.logits(input)?;
        Ok(max_softmax(z.data()))
    }

    /// ID-Scores for a flat batch of `n` inputs.
    pub fn id_scores(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let c = self.num_classes();
        let logits = self.network.logits_batch(inputs, n)?;
        Ok(logits.chunks(c).map(max_softmax).collect())
    }

    pub fn input_gradient(&self, input: &Tensor, objective: crate::nn::Objective) -> Result<Tensor> {
        self.network.input_gradient(input, objective)
    }

    /// SHA-256 of the weight payload, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.payload_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.network.num_parameters() * 4);
        for p in self.network.params().iter().flatten() {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            layers: self.network.layers().iter().map(RawLayer::from).collect(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        Ok(write_container(MODEL_MAGIC, &header, &self.payload_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_container(bytes, MODEL_MAGIC, "TRODOMDL")?;
        let header: ModelHeader = serde_json::from_slice(header)?;
        let layers = header
            .layers
            .iter()
            .map(RawLayer::to_spec)
            .collect::<Result<Vec<_>>>()?;
        // Shape inference before reading weights so that a bad architecture is
        // reported as such rather than as a payload-size problem.
        Network::infer_shapes(&header.meta.input_shape, &layers)?;
        let expected: usize = layers
            .iter()
            .filter_map(|l| l.param_shapes())
            .map(|(w, b)| w.iter().product::<usize>() + b.iter().product::<usize>())
            .sum();
        if payload.len() < expected * 4 {
            return Err(Error::Truncated(format!(
                "weight payload has {} bytes, architecture needs {}",
                payload.len(),
                expected * 4
            )));
        }
        if payload.len() > expected * 4 {
            return Err(Error::InvalidBundle(format!(
                "{} trailing bytes after weight payload",
                payload.len() - expected * 4
            )));
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut params = Vec::with_capacity(layers.len());
        for layer in &layers {
            params.push(match layer.param_shapes() {
                None => None,
                Some((ws, bs)) => {
                    let nw = ws.iter().product();
                    let nb = bs.iter().product();
                    let w: Vec<f64> = floats.by_ref().take(nw).collect();
                    let b: Vec<f64> = floats.by_ref().take(nb).collect();
                    Some(Params {
                        weight: Tensor::new(ws, w)?,
                        bias: Tensor::new(bs, b)?,
                    })
                }
            });
        }
        let network = Network::new(header.meta.input_shape.clone(), layers, params)?;
        Self::new(network, header.meta)
    }
}

pub fn max_softmax(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    1.0 / logits.iter().map(|&z| (z - max).exp()).sum::<f64>()
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &bundle.to_bytes()?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::from_bytes(&std::fs::read(path)?)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    layers: Vec<RawLayer>,
    meta: ModelMeta,
}

/// Layer record in the header: numeric kind code plus its integer arguments.
///
/// | code | layer     | dims                                          |
/// |------|-----------|-----------------------------------------------|
/// | 1    | Dense     | in, out                                       |
/// | 2    | Conv2d    | in_ch, out_ch, kernel, stride, padding        |
/// | 3    | ReLU      |                                               |
/// | 4    | MaxPool2d | kernel, stride                                |
/// | 5    | Flatten   |                                               |
#[derive(Debug, Serialize, Deserialize)]
struct RawLayer {
    kind: u32,
    #[serde(default)]
    dims: Vec<usize>,
}

impl From<&LayerSpec> for RawLayer {
    fn from(l: &LayerSpec) -> Self {
        let (kind, dims) = match *l {
            LayerSpec::Dense { input, output } => (1, vec![input, output]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => (2, vec![in_channels, out_channels, kernel, stride, padding]),
            LayerSpec::Relu => (3, vec![]),
            LayerSpec::MaxPool2d { kernel, stride } => (4, vec![kernel, stride]),
            LayerSpec::Flatten => (5, vec![]),
        };
        Self { kind, dims }
    }
}

impl RawLayer {
    fn to_spec(&self) -> Result<LayerSpec> {
        let d = &self.dims;
        let arity = |n: usize| {
            if d.len() == n {
                Ok(())
            } else {
                Err(Error::InvalidBundle(format!(
                    "layer kind {} takes {n} dims, got {}",
                    self.kind,
                    d.len()
                )))
            }
        };
        Ok(match self.kind {
            1 => {
                arity(2)?;
                LayerSpec::Dense {
                    input: d[0],
                    output: d[1],
                }
            }
            2 => {
                arity(5)?;
                LayerSpec::Conv2d {
                    in_channels: d[0],
                    out_channels: d[1],
                    kernel: d[2],
                    stride: d[3],
                    padding: d[4],
                }
            }
            3 => {
                arity(0)?;
                LayerSpec::Relu
            }
            4 => {
                arity(2)?;
                LayerSpec::MaxPool2d {
                    kernel: d[0],
                    stride: d[1],
                }
            }
            5 => {
                arity(0)?;
                LayerSpec::Flatten
            }
            other => return Err(Error::UnsupportedLayer(format!("kind code {other}"))),
        })
    }
}

pub(crate) fn write_container(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Splits a container into (header, payload) after checking magic and version.
pub(crate) fn read_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 8],
    magic_name: &'static str,
) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            expected: magic_name,
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated("file ends inside the preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < hlen {
        return Err(Error::Truncated(format!(
            "header declares {hlen} bytes, {} available",
            rest.len()
        )));
    }
    Ok(rest.split_at(hlen))
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = match dir {
        Some(d) => d.join(format!(".{}.tmp", file_name.to_string_lossy())),
        None => format!(".{}.tmp", file_name.to_string_lossy()).into(),
    };
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::random(
            vec![6],
            vec![
                LayerSpec::Dense { input: 6, output: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 5, output: 3 },
            ],
            &mut rng,
        )
        .unwrap();
        ModelBundle::clean(net, seed).unwrap()
    }

    fn bits(b: &ModelBundle) -> Vec<u64> {
        b.network()
            .params()
            .iter()
            .flatten()
            .flat_map(|p| p.weight.data().iter().chain(p.bias.data()))
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tmdl");
        let b = mlp(1);
        save_model(&b, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(bits(&b), bits(&back));
        assert_eq!(b, back);
    }

    #[test]
    fn trojaned_provenance_preserved() {
        let b = mlp(2);
        let mut meta = b.meta().clone();
        meta.provenance = Provenance::Trojaned {
            trigger_id: "patch".into(),
            mapping_id: "all_to_one:0".into(),
        };
        meta.training_mode = TrainingMode::Adversarial {
            pgd_steps: 10,
            eps_linf: 2.0 / 255.0,
        };
        let b = ModelBundle::new(b.network().clone(), meta.clone()).unwrap();
        let back = ModelBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta(), &meta);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = mlp(3).to_bytes().unwrap();
        bytes[0] = b'X';
        let err = ModelBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = mlp(3).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            ModelBundle::from_bytes(&bytes),
            Err(Error::BadVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = mlp(4).to_bytes().unwrap();
        let err = ModelBundle::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("truncated payload"), "{err}");
    }

    #[test]
    fn unknown_layer_code_rejected() {
        let b = mlp(5);
        let header = serde_json::json!({
            "layers": [{"kind": 9, "dims": []}],
            "meta": b.meta(),
        });
        let bytes = write_container(MODEL_MAGIC, &serde_json::to_vec(&header).unwrap(), &[]);
        let err = ModelBundle::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("unsupported layer"), "{err}");
    }

    #[test]
    fn class_count_must_match_head() {
        let b = mlp(6);
        let mut meta = b.meta().clone();
        meta.num_classes = 4;
        assert!(ModelBundle::new(b.network().clone(), meta).is_err());
    }
}
