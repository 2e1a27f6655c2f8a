//! Network descriptors, tensor files, the built-in networks and the scalar
//! reference implementation used to check functional runs.
//!
//! A descriptor is a JSON object with an ordered `layers` list. Each entry is
//! either a layer or a block `{ "name", "branches": [[layer, ...], ...] }`
//! whose branches all read the block input and whose outputs are
//! concatenated along channels in branch order.
//!
//! Tensor files hold raw unsigned bytes next to a `<file>.json` sidecar
//! `{ "shape": [...], "layout": "regular" | "transposed" }`. Regular data is
//! row-major (`[H][W][C]` activations, `[M][R][S][C]` weights); transposed
//! data holds eight bit planes of `ceil(n / 8)` bytes, element `j` at bit
//! `j % 8` of byte `j / 8` of each plane.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{BatchNorm, LayerDescriptor, LayerKind, MapError, Padding};
use crate::transpose::{from_plane_bytes, from_transposed, to_plane_bytes, BitBlock, Layout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{at}: {source}")]
    Layer {
        at: String,
        #[source]
        source: MapError,
    },
    #[error("{at}: expects {expected}, but its input is {found}")]
    Chain {
        at: String,
        expected: String,
        found: String,
    },
    #[error("block `{0}` branches produce different spatial sizes")]
    BranchShape(String),
    #[error("tensor {name}: {message}")]
    Tensor { name: String, message: String },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("unknown built-in model `{0}`")]
    UnknownModel(String),
}

/// `[H][W][C]` unsigned 8-bit activations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Tensor {
            h,
            w,
            c,
            data: vec![0; h * w * c],
        }
    }

    pub fn from_data(h: usize, w: usize, c: usize, data: Vec<u8>) -> Result<Self, ModelError> {
        if data.len() != h * w * c {
            return Err(ModelError::ShapeMismatch(vec![data.len()], vec![h, w, c]));
        }
        Ok(Tensor { h, w, c, data })
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.h, self.w, self.c]
    }

    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> u8 {
        self.data[self.index(y, x, ch)]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: u8) {
        let i = self.index(y, x, ch);
        self.data[i] = v;
    }

    /// Channel-wise concatenation of equally sized tensors.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor, ModelError> {
        let first = parts.first().ok_or_else(|| ModelError::ShapeMismatch(vec![], vec![]))?;
        if let Some(p) = parts.iter().find(|p| (p.h, p.w) != (first.h, first.w)) {
            return Err(ModelError::ShapeMismatch(first.shape(), p.shape()));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Tensor::zeros(first.h, first.w, c);
        for y in 0..first.h {
            for x in 0..first.w {
                let mut off = 0;
                for p in parts {
                    for ch in 0..p.c {
                        out.set(y, x, off + ch, p.get(y, x, ch));
                    }
                    off += p.c;
                }
            }
        }
        Ok(out)
    }
}

/// Branches that all read the block input; their outputs are concatenated
/// along channels in branch order. Branches may nest further blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub name: String,
    pub branches: Vec<Vec<NetworkEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkEntry {
    Block(Block),
    Layer(LayerDescriptor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescriptor {
    pub name: String,
    /// Raw input tensor `[H][W][C]` with sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    /// Zero point added by every requantization.
    #[serde(default)]
    pub zero_point: u8,
    pub layers: Vec<NetworkEntry>,
    /// Directory that relative tensor paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// A layer in execution order.
#[derive(Debug, Clone)]
pub struct FlatLayer<'a> {
    /// Top-level entry the layer belongs to.
    pub block: &'a str,
    /// Unique key: enclosing block names and the layer name joined by `/`.
    pub key: String,
    pub layer: &'a LayerDescriptor,
}

impl FlatLayer<'_> {
    pub fn key(&self) -> String {
        self.key.clone()
    }
}

fn flatten<'a>(entries: &'a [NetworkEntry], top: Option<&'a str>, prefix: &str, out: &mut Vec<FlatLayer<'a>>) {
    for entry in entries {
        match entry {
            NetworkEntry::Layer(l) => out.push(FlatLayer {
                block: top.unwrap_or(&l.name),
                key: format!("{prefix}{}", l.name),
                layer: l,
            }),
            NetworkEntry::Block(b) => {
                let inner = format!("{prefix}{}/", b.name);
                for branch in &b.branches {
                    flatten(branch, Some(top.unwrap_or(&b.name)), &inner, out);
                }
            }
        }
    }
}

/// Run `f` on every layer in execution order (branches serially, in
/// descriptor order), threading activations and concatenating branches.
pub fn execute<E: From<ModelError>>(
    net: &NetworkDescriptor,
    input: Tensor,
    f: &mut dyn FnMut(&str, &LayerDescriptor, &Tensor) -> Result<Tensor, E>,
) -> Result<Tensor, E> {
    execute_entries(&net.layers, "", input, f)
}

fn execute_entries<E: From<ModelError>>(
    entries: &[NetworkEntry],
    prefix: &str,
    mut cur: Tensor,
    f: &mut dyn FnMut(&str, &LayerDescriptor, &Tensor) -> Result<Tensor, E>,
) -> Result<Tensor, E> {
    for entry in entries {
        cur = match entry {
            NetworkEntry::Layer(l) => f(&format!("{prefix}{}", l.name), l, &cur)?,
            NetworkEntry::Block(b) => {
                let inner = format!("{prefix}{}/", b.name);
                let outs = b
                    .branches
                    .iter()
                    .map(|branch| execute_entries(branch, &inner, cur.clone(), f))
                    .collect::<Result<Vec<_>, E>>()?;
                Tensor::concat(&outs)?
            }
        };
    }
    Ok(cur)
}

impl NetworkDescriptor {
    pub fn empty(name: &str) -> Self {
        NetworkDescriptor {
            name: name.to_string(),
            input: None,
            zero_point: 0,
            layers: vec![],
            base_dir: None,
        }
    }

    pub fn flat_layers(&self) -> Vec<FlatLayer<'_>> {
        let mut out = Vec::new();
        flatten(&self.layers, None, "", &mut out);
        out
    }

    /// Input shape `(H, W, C)` expected by the first layer.
    pub fn input_shape(&self) -> Option<(usize, usize, usize)> {
        self.flat_layers().first().map(|f| (f.layer.h, f.layer.w, f.layer.c))
    }

    /// Validate every layer, the channel/spatial chaining and key uniqueness.
    pub fn validate(&self) -> Result<(), ModelError> {
        check_entries(&self.layers, None, "layers", "")?;
        let mut seen = std::collections::HashSet::new();
        for f in self.flat_layers() {
            if !seen.insert(f.key.clone()) {
                return Err(ModelError::Schema {
                    path: f.key,
                    message: "duplicate layer name".into(),
                });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) if Path::new(path).is_relative() => dir.join(path),
            _ => PathBuf::from(path),
        }
    }
}

/// Returns the output `(E, channels)` of a run of entries.
fn check_entries(
    entries: &[NetworkEntry],
    mut cur: Option<(usize, usize)>,
    path: &str,
    prefix: &str,
) -> Result<Option<(usize, usize)>, ModelError> {
    for (i, entry) in entries.iter().enumerate() {
        let here = format!("{path}[{i}]");
        match entry {
            NetworkEntry::Layer(l) => {
                cur = Some(check_layer(l, cur, &format!("{here} `{prefix}{}`", l.name))?);
            }
            NetworkEntry::Block(b) => {
                if b.branches.is_empty() || b.branches.iter().any(|br| br.is_empty()) {
                    return Err(ModelError::Schema {
                        path: format!("{here} `{prefix}{}`", b.name),
                        message: "blocks need at least one non-empty branch".into(),
                    });
                }
                let inner = format!("{prefix}{}/", b.name);
                let mut out_e = None;
                let mut channels = 0;
                for (bi, branch) in b.branches.iter().enumerate() {
                    let (e, m) = check_entries(branch, cur, &format!("{here}.branches[{bi}]"), &inner)?
                        .expect("non-empty branch");
                    if out_e.is_some_and(|oe| oe != e) {
                        return Err(ModelError::BranchShape(format!("{prefix}{}", b.name)));
                    }
                    out_e = Some(e);
                    channels += m;
                }
                cur = Some((out_e.expect("non-empty block"), channels));
            }
        }
    }
    Ok(cur)
}

fn check_layer(l: &LayerDescriptor, cur: Option<(usize, usize)>, at: &str) -> Result<(usize, usize), ModelError> {
    l.validate().map_err(|source| ModelError::Layer {
        at: at.to_string(),
        source,
    })?;
    if let Some((e, c)) = cur {
        if (l.h, l.c) != (e, c) {
            return Err(ModelError::Chain {
                at: at.to_string(),
                expected: format!("{}x{}x{}", l.h, l.w, l.c),
                found: format!("{e}x{e}x{c}"),
            });
        }
    }
    Ok((l.e, l.m))
}

/// Parse and validate a descriptor file. Errors name the offending entry
/// (`layers[i].branches[j][k]`) and field.
pub fn load_descriptor(path: impl AsRef<Path>) -> Result<NetworkDescriptor, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut net = parse_descriptor(&text, &path.display().to_string())?;
    net.base_dir = path.parent().map(Path::to_path_buf);
    Ok(net)
}

pub fn parse_descriptor(text: &str, origin: &str) -> Result<NetworkDescriptor, ModelError> {
    let schema = |message: String| ModelError::Schema {
        path: origin.to_string(),
        message,
    };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| schema("top level must be an object".into()))?;
    let entries = obj
        .get("layers")
        .and_then(|l| l.as_array())
        .ok_or_else(|| schema("missing `layers` array".into()))?;
    let layers = parse_entries(entries, "layers").map_err(schema)?;
    let mut header = obj.clone();
    header.insert("layers".into(), serde_json::Value::Array(vec![]));
    let mut net: NetworkDescriptor =
        serde_json::from_value(serde_json::Value::Object(header)).map_err(|e| schema(e.to_string()))?;
    net.layers = layers;
    net.validate()?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub shape: Vec<usize>,
    pub layout: Layout,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Read a raw tensor and its sidecar, returning regular-layout bytes.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(TensorMeta, Vec<u8>), ModelError> {
    let path = path.as_ref();
    let io = |p: &Path, source| ModelError::Io {
        path: p.display().to_string(),
        source,
    };
    let meta_path = sidecar(path);
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| io(&meta_path, e))?;
    let meta: TensorMeta = serde_json::from_str(&meta_text).map_err(|e| ModelError::Schema {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    let raw = std::fs::read(path).map_err(|e| io(path, e))?;
    let n: usize = meta.shape.iter().product();
    let bad = |message: String| ModelError::Tensor {
        name: path.display().to_string(),
        message,
    };
    let data = match meta.layout {
        Layout::Regular => {
            if raw.len() != n {
                return Err(bad(format!("{} bytes for shape {:?}", raw.len(), meta.shape)));
            }
            raw
        }
        Layout::Transposed => {
            let block = from_plane_bytes(&raw, 8, n)
                .ok_or_else(|| bad(format!("{} bytes cannot hold 8 planes of {n} elements", raw.len())))?;
            from_transposed(&block)
                .elements()
                .expect("regular block")
                .iter()
                .map(|&v| v as u8)
                .collect()
        }
    };
    Ok((meta, data))
}

pub fn write_tensor(path: impl AsRef<Path>, shape: &[usize], data: &[u8], layout: Layout) -> Result<(), ModelError> {
    let path = path.as_ref();
    let n: usize = shape.iter().product();
    if data.len() != n {
        return Err(ModelError::ShapeMismatch(vec![data.len()], shape.to_vec()));
    }
    let bytes = match layout {
        Layout::Regular => data.to_vec(),
        Layout::Transposed => to_plane_bytes(&BitBlock::regular(data.iter().map(|&b| b as u64).collect(), 8)),
    };
    let io = |p: &Path, source| ModelError::Io {
        path: p.display().to_string(),
        source,
    };
    std::fs::write(path, bytes).map_err(|e| io(path, e))?;
    let meta = TensorMeta {
        shape: shape.to_vec(),
        layout,
    };
    let meta_path = sidecar(path);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable"))
        .map_err(|e| io(&meta_path, e))
}

/// Input activations and per-layer weights for a functional run.
#[derive(Debug, Clone)]
pub struct NetworkTensors {
    pub input: Tensor,
    /// Keyed by `FlatLayer::key`, `[M][R][S][C]` bytes.
    pub weights: HashMap<String, Vec<u8>>,
}

impl NetworkTensors {
    /// Uniform random bytes for every tensor the network needs.
    pub fn random(net: &NetworkDescriptor, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = net.input_shape().unwrap_or((0, 0, 0));
        let input = Tensor::from_data(h, w, c, (0..h * w * c).map(|_| rng.gen()).collect()).expect("sized");
        let weights = net
            .flat_layers()
            .iter()
            .filter(|f| f.layer.has_filters())
            .map(|f| (f.key(), (0..f.layer.filter_bytes()).map(|_| rng.gen()).collect()))
            .collect();
        NetworkTensors { input, weights }
    }

    /// Tensors named in the descriptor; anything missing is drawn from `seed`.
    pub fn load(net: &NetworkDescriptor, seed: u64) -> Result<Self, ModelError> {
        let mut t = NetworkTensors::random(net, seed);
        if let Some(p) = &net.input {
            let (meta, data) = read_tensor(net.resolve(p))?;
            let expect = t.input.shape();
            if meta.shape != expect {
                return Err(ModelError::ShapeMismatch(meta.shape, expect));
            }
            t.input.data = data;
        }
        for f in net.flat_layers() {
            if let Some(p) = &f.layer.weights {
                let (meta, data) = read_tensor(net.resolve(p))?;
                let l = f.layer;
                let expect = vec![l.m, l.r, l.s, l.c];
                if meta.shape != expect {
                    return Err(ModelError::ShapeMismatch(meta.shape, expect));
                }
                t.weights.insert(f.key(), data);
            }
        }
        Ok(t)
    }
}

/// Built-in network by name: `inception_v3` or `toy`.
pub fn builtin(name: &str) -> Result<NetworkDescriptor, ModelError> {
    match name {
        "inception_v3" => Ok(inception_v3()),
        "toy" => Ok(toy_network()),
        other => Err(ModelError::UnknownModel(other.to_string())),
    }
}

fn top(layer: LayerDescriptor) -> NetworkEntry {
    NetworkEntry::Layer(layer)
}

fn block(name: &str, branches: Vec<Vec<LayerDescriptor>>) -> NetworkEntry {
    NetworkEntry::Block(Block {
        name: name.to_string(),
        branches: branches.into_iter().map(|b| b.into_iter().map(top).collect()).collect(),
    })
}

fn fork(name: &str, entry: LayerDescriptor, a: LayerDescriptor, b: LayerDescriptor) -> Vec<NetworkEntry> {
    vec![top(entry), block(name, vec![vec![a], vec![b]])]
}

/// Inception v3 at 299x299 input, 8-bit quantized, batch norm folded into
/// the convolution weights. Per-branch layers inside the mixed blocks follow
/// the public Inception v3 topology.
pub fn inception_v3() -> NetworkDescriptor {
    use LayerKind::{Avgpool, Maxpool};
    use Padding::{Same, Valid};
    let conv = LayerDescriptor::conv;
    let pool = LayerDescriptor::pool;
    let mixed_5 = |name: &str, cin: usize, proj: usize| {
        let h = 35;
        block(
            name,
            vec![
                vec![conv("Branch_0_1x1", h, 1, 1, cin, 64, 1, Same)],
                vec![conv("Branch_1_1x1", h, 1, 1, cin, 48, 1, Same), conv("Branch_1_5x5", h, 5, 5, 48, 64, 1, Same)],
                vec![
                    conv("Branch_2_1x1", h, 1, 1, cin, 64, 1, Same),
                    conv("Branch_2_3x3a", h, 3, 3, 64, 96, 1, Same),
                    conv("Branch_2_3x3b", h, 3, 3, 96, 96, 1, Same),
                ],
                vec![pool("Branch_3_pool", Avgpool, h, 3, cin, 1, Same), conv("Branch_3_1x1", h, 1, 1, cin, proj, 1, Same)],
            ],
        )
    };
    let mixed_6 = |name: &str, c7: usize| {
        let h = 17;
        block(
            name,
            vec![
                vec![conv("Branch_0_1x1", h, 1, 1, 768, 192, 1, Same)],
                vec![
                    conv("Branch_1_1x1", h, 1, 1, 768, c7, 1, Same),
                    conv("Branch_1_1x7", h, 1, 7, c7, c7, 1, Same),
                    conv("Branch_1_7x1", h, 7, 1, c7, 192, 1, Same),
                ],
                vec![
                    conv("Branch_2_1x1", h, 1, 1, 768, c7, 1, Same),
                    conv("Branch_2_7x1a", h, 7, 1, c7, c7, 1, Same),
                    conv("Branch_2_1x7a", h, 1, 7, c7, c7, 1, Same),
                    conv("Branch_2_7x1b", h, 7, 1, c7, c7, 1, Same),
                    conv("Branch_2_1x7b", h, 1, 7, c7, 192, 1, Same),
                ],
                vec![pool("Branch_3_pool", Avgpool, h, 3, 768, 1, Same), conv("Branch_3_1x1", h, 1, 1, 768, 192, 1, Same)],
            ],
        )
    };
    // The 1x3 and 3x1 convolutions of these blocks read the same input and
    // concatenate, doubling the branch width to 768 channels.
    let mixed_7 = |name: &str, cin: usize| {
        let h = 8;
        let c = |n: &str, r, s, ci, m| conv(n, h, r, s, ci, m, 1, Same);
        NetworkEntry::Block(Block {
            name: name.to_string(),
            branches: vec![
                vec![top(c("Branch_0_1x1", 1, 1, cin, 320))],
                fork(
                    "Branch_1_fork",
                    c("Branch_1_1x1", 1, 1, cin, 384),
                    c("Branch_1_1x3", 1, 3, 384, 384),
                    c("Branch_1_3x1", 3, 1, 384, 384),
                ),
                [
                    vec![top(c("Branch_2_1x1", 1, 1, cin, 448))],
                    fork(
                        "Branch_2_fork",
                        c("Branch_2_3x3", 3, 3, 448, 384),
                        c("Branch_2_1x3", 1, 3, 384, 384),
                        c("Branch_2_3x1", 3, 1, 384, 384),
                    ),
                ]
                .concat(),
                vec![top(pool("Branch_3_pool", Avgpool, h, 3, cin, 1, Same)), top(c("Branch_3_1x1", 1, 1, cin, 192))],
            ],
        })
    };
    let layers = vec![
        top(conv("Conv2D_1a_3x3", 299, 3, 3, 3, 32, 2, Valid)),
        top(conv("Conv2D_2a_3x3", 149, 3, 3, 32, 32, 1, Valid)),
        top(conv("Conv2D_2b_3x3", 147, 3, 3, 32, 64, 1, Same)),
        top(pool("MaxPool_3a_3x3", Maxpool, 147, 3, 64, 2, Valid)),
        top(conv("Conv2D_3b_1x1", 73, 1, 1, 64, 80, 1, Valid)),
        top(conv("Conv2D_4a_3x3", 73, 3, 3, 80, 192, 1, Valid)),
        top(pool("MaxPool_5a_3x3", Maxpool, 71, 3, 192, 2, Valid)),
        mixed_5("Mixed_5b", 192, 32),
        mixed_5("Mixed_5c", 256, 64),
        mixed_5("Mixed_5d", 288, 64),
        block(
            "Mixed_6a",
            vec![
                vec![conv("Branch_0_3x3", 35, 3, 3, 288, 384, 2, Valid)],
                vec![
                    conv("Branch_1_1x1", 35, 1, 1, 288, 64, 1, Same),
                    conv("Branch_1_3x3a", 35, 3, 3, 64, 96, 1, Same),
                    conv("Branch_1_3x3b", 35, 3, 3, 96, 96, 2, Valid),
                ],
                vec![pool("Branch_2_pool", Maxpool, 35, 3, 288, 2, Valid)],
            ],
        ),
        mixed_6("Mixed_6b", 128),
        mixed_6("Mixed_6c", 160),
        mixed_6("Mixed_6d", 160),
        mixed_6("Mixed_6e", 192),
        block(
            "Mixed_7a",
            vec![
                vec![conv("Branch_0_1x1", 17, 1, 1, 768, 192, 1, Same), conv("Branch_0_3x3", 17, 3, 3, 192, 320, 2, Valid)],
                vec![
                    conv("Branch_1_1x1", 17, 1, 1, 768, 192, 1, Same),
                    conv("Branch_1_1x7", 17, 1, 7, 192, 192, 1, Same),
                    conv("Branch_1_7x1", 17, 7, 1, 192, 192, 1, Same),
                    conv("Branch_1_3x3", 17, 3, 3, 192, 192, 2, Valid),
                ],
                vec![pool("Branch_2_pool", Maxpool, 17, 3, 768, 2, Valid)],
            ],
        ),
        mixed_7("Mixed_7b", 1280),
        mixed_7("Mixed_7c", 2048),
        top(pool("AvgPool", Avgpool, 8, 8, 2048, 1, Valid)),
        top(LayerDescriptor::fc("FullyConnected", 2048, 1001)),
    ];
    NetworkDescriptor {
        name: "inception_v3".into(),
        input: None,
        zero_point: 0,
        layers,
        base_dir: None,
    }
}

/// Small quantized CNN: two convolutions (one with batch norm), max pool,
/// average pool and a fully connected layer over a 16x16x3 input.
pub fn toy_network() -> NetworkDescriptor {
    let mut conv1 = LayerDescriptor::conv("conv1", 16, 3, 3, 3, 8, 1, Padding::Same);
    conv1.batchnorm = Some(BatchNorm {
        multiplier: 3,
        shift: 2,
        bias: vec![-9000, 4000, -200, 0, 12000, -30000, 77, -1],
    });
    let conv2 = LayerDescriptor::conv("conv2", 16, 5, 5, 8, 8, 1, Padding::Same);
    let pool1 = LayerDescriptor::pool("pool1", LayerKind::Maxpool, 16, 3, 8, 2, Padding::Valid);
    let pool2 = LayerDescriptor::pool("pool2", LayerKind::Avgpool, 7, 7, 8, 1, Padding::Valid);
    let fc = LayerDescriptor::fc("fc", 8, 4);
    NetworkDescriptor {
        name: "toy".into(),
        input: None,
        zero_point: 0,
        layers: [conv1, conv2, pool1, pool2, fc].into_iter().map(NetworkEntry::Layer).collect(),
        base_dir: None,
    }
}

fn parse_entries(entries: &[serde_json::Value], path: &str) -> Result<Vec<NetworkEntry>, String> {
    entries
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let name = entry.get("name").and_then(|n| n.as_str()).unwrap_or("?");
            let here = format!("{path}[{i}] `{name}`");
            let Some(branches) = entry.get("branches") else {
                return LayerDescriptor::deserialize(entry)
                    .map(NetworkEntry::Layer)
                    .map_err(|e| format!("{here}: {e}"));
            };
            let obj = entry.as_object().ok_or_else(|| format!("{here}: expected an object"))?;
            if let Some(k) = obj.keys().find(|k| *k != "name" && *k != "branches") {
                return Err(format!("{here}: unknown field `{k}` in block"));
            }
            let branches = branches
                .as_array()
                .ok_or_else(|| format!("{here}: `branches` must be an array of arrays"))?
                .iter()
                .enumerate()
                .map(|(bi, b)| {
                    let list = b
                        .as_array()
                        .ok_or_else(|| format!("{path}[{i}].branches[{bi}]: expected an array"))?;
                    parse_entries(list, &format!("{path}[{i}].branches[{bi}]"))
                })
                .collect::<Result<_, _>>()?;
            Ok(NetworkEntry::Block(Block {
                name: obj
                    .get("name")
                    .and_then(|n| n.as_str())
                    .ok_or_else(|| format!("{here}: block needs a string `name`"))?
                    .to_string(),
                branches,
            }))
        })
        .collect()
}

/// Requantization parameters computed directly from a value range: the
/// largest shift whose multiplier `floor(255 * 2^shift / range)` fits 16 bits.
pub fn reference_requant_params(min: u32, max: u32) -> (u32, u32) {
    let range = (max - min) as u64;
    if range == 0 {
        return (0, 0);
    }
    let limit = ((65_536u128 * range as u128) - 1) / 255;
    let shift = 127 - limit.leading_zeros();
    let mult = (255u128 << shift) / range as u128;
    (mult as u32, shift)
}

/// Plain integer inference: every output element computed independently.
/// Returns the output of each layer in execution order, keyed as in
/// `FlatLayer::key`, and the network output.
pub fn reference_inference(
    net: &NetworkDescriptor,
    tensors: &NetworkTensors,
) -> Result<(Vec<(String, Tensor)>, Tensor), ModelError> {
    let mut trace = Vec::new();
    let out = execute(net, tensors.input.clone(), &mut |key: &str, l: &LayerDescriptor, input: &Tensor| {
        let t = reference_layer(l, input, tensors.weights.get(key), net.zero_point, key)?;
        trace.push((key.to_string(), t.clone()));
        Ok::<_, ModelError>(t)
    })?;
    Ok((trace, out))
}

fn reference_layer(
    l: &LayerDescriptor,
    input: &Tensor,
    weights: Option<&Vec<u8>>,
    zero_point: u8,
    key: &str,
) -> Result<Tensor, ModelError> {
    if (input.h, input.w, input.c) != (l.h, l.w, l.c) {
        return Err(ModelError::ShapeMismatch(input.shape(), vec![l.h, l.w, l.c]));
    }
    let (pt, pl) = l.pad_before();
    let tap = |oy: usize, ox: usize, r: usize, s: usize| -> Option<(usize, usize)> {
        let y = (oy * l.u + r).checked_sub(pt)?;
        let x = (ox * l.u + s).checked_sub(pl)?;
        (y < l.h && x < l.w).then_some((y, x))
    };
    match l.kind {
        LayerKind::Conv | LayerKind::Fc => {
            let w = weights.ok_or_else(|| ModelError::Tensor {
                name: key.to_string(),
                message: "missing weights".into(),
            })?;
            let mut acc = vec![0u32; l.e * l.e * l.m];
            for oy in 0..l.e {
                for ox in 0..l.e {
                    for m in 0..l.m {
                        let mut sum: u64 = 0;
                        for r in 0..l.r {
                            for s in 0..l.s {
                                if let Some((y, x)) = tap(oy, ox, r, s) {
                                    for c in 0..l.c {
                                        let wv = w[((m * l.r + r) * l.s + s) * l.c + c] as u64;
                                        sum += wv * input.get(y, x, c) as u64;
                                    }
                                }
                            }
                        }
                        let mut v = sum as u32;
                        if let Some(bn) = &l.batchnorm {
                            let scaled = ((v as u64 * bn.multiplier as u64) >> bn.shift) as u32;
                            v = scaled.wrapping_add(bn.bias[m] as u32);
                        }
                        if l.relu && v & 0x8000_0000 != 0 {
                            v = 0;
                        }
                        acc[(oy * l.e + ox) * l.m + m] = v;
                    }
                }
            }
            let lo = *acc.iter().min().unwrap_or(&0);
            let hi = *acc.iter().max().unwrap_or(&0);
            let (mult, shift) = reference_requant_params(lo, hi);
            let data = acc
                .iter()
                .map(|&v| {
                    let q = ((v - lo) as u64 * mult as u64) >> shift;
                    (q as u8).wrapping_add(zero_point)
                })
                .collect();
            Tensor::from_data(l.e, l.e, l.m, data)
        }
        LayerKind::Maxpool | LayerKind::Avgpool => {
            let mut out = Tensor::zeros(l.e, l.e, l.c);
            for oy in 0..l.e {
                for ox in 0..l.e {
                    for c in 0..l.c {
                        let vals: Vec<u32> = (0..l.r)
                            .flat_map(|r| (0..l.s).map(move |s| (r, s)))
                            .filter_map(|(r, s)| tap(oy, ox, r, s))
                            .map(|(y, x)| input.get(y, x, c) as u32)
                            .collect();
                        let v = if l.kind == LayerKind::Maxpool {
                            vals.iter().copied().max().unwrap_or(0)
                        } else {
                            vals.iter().sum::<u32>() / vals.len().max(1) as u32
                        };
                        out.set(oy, ox, c, v as u8);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Result of comparing two tensors element by element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiffReport {
    pub matches: bool,
    pub mismatches: usize,
    /// `(y, x, c, left, right)` of the first differing element.
    pub first_divergence: Option<(usize, usize, usize, u8, u8)>,
}

pub fn compare_outputs(a: &Tensor, b: &Tensor) -> Result<DiffReport, ModelError> {
    if a.shape() != b.shape() {
        return Err(ModelError::ShapeMismatch(a.shape(), b.shape()));
    }
    let mut first = None;
    let mut mismatches = 0;
    for (i, (&x, &y)) in a.data.iter().zip(&b.data).enumerate() {
        if x != y {
            mismatches += 1;
            if first.is_none() {
                let c = i % a.c;
                let px = i / a.c;
                first = Some((px / a.w, px % a.w, c, x, y));
            }
        }
    }
    Ok(DiffReport {
        matches: mismatches == 0,
        mismatches,
        first_divergence: first,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inception_has_twenty_rows() {
        let net = inception_v3();
        assert_eq!(net.layers.len(), 20);
        net.validate().unwrap();
        let flat = net.flat_layers();
        assert_eq!(flat.first().unwrap().layer.name, "Conv2D_1a_3x3");
        assert_eq!(flat.last().unwrap().layer.name, "FullyConnected");
    }

    #[test]
    fn inception_layer_table() {
        let net = inception_v3();
        let mut convs: HashMap<&str, usize> = HashMap::new();
        let mut filters: HashMap<&str, usize> = HashMap::new();
        for f in net.flat_layers() {
            if f.layer.has_filters() {
                *convs.entry(f.block).or_default() += f.layer.conv_count();
                *filters.entry(f.block).or_default() += f.layer.filter_bytes();
            }
        }
        assert_eq!(convs["Conv2D_1a_3x3"], 710_432);
        assert_eq!(convs["Conv2D_2b_3x3"], 1_382_976);
        assert_eq!(convs["FullyConnected"], 1001);
        let mb = |b: &str| filters[b] as f64 / (1 << 20) as f64;
        assert!((mb("Conv2D_4a_3x3") - 0.132).abs() < 0.001);
        assert!((mb("Mixed_7c") - 5.789).abs() < 0.001);
        assert_eq!(convs["Mixed_7c"], 208_896);
    }

    #[test]
    fn empty_network_is_valid() {
        let net = parse_descriptor(r#"{"name": "e", "layers": []}"#, "inline").unwrap();
        assert!(net.layers.is_empty());
        assert!(net.flat_layers().is_empty());
    }

    #[test]
    fn descriptor_round_trip() {
        let net = toy_network();
        let text = serde_json::to_string_pretty(&net).unwrap();
        let back = parse_descriptor(&text, "inline").unwrap();
        assert_eq!(back, net);
        let inc = inception_v3();
        let back = parse_descriptor(&serde_json::to_string(&inc).unwrap(), "inline").unwrap();
        assert_eq!(back, inc);
    }

    #[test]
    fn chain_mismatch_is_reported() {
        let mut net = toy_network();
        if let NetworkEntry::Layer(l) = &mut net.layers[1] {
            l.c = 7;
        }
        let err = parse_descriptor(&serde_json::to_string(&net).unwrap(), "inline").unwrap_err();
        assert!(matches!(err, ModelError::Chain { .. }), "{err}");
        assert!(err.to_string().contains("layers[1]"));
    }

    #[test]
    fn schema_errors_name_the_field() {
        let text = r#"{"name": "x", "layers": [{"name": "c", "kind": "conv", "H": 4, "W": 4, "C": 1, "R": 1, "S": 1, "M": 1, "E": 4, "U": 1, "colour": 3}]}"#;
        let err = parse_descriptor(text, "x.json").unwrap_err().to_string();
        assert!(err.contains("layers[0]") && err.contains("colour"), "{err}");
        let err = parse_descriptor("{\n\"name\": 1,", "x.json").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn tensor_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..60).map(|i| (i * 37 % 256) as u8).collect();
        for layout in [Layout::Regular, Layout::Transposed] {
            let p = dir.path().join(format!("t_{layout:?}.bin"));
            write_tensor(&p, &[3, 4, 5], &data, layout).unwrap();
            let (meta, back) = read_tensor(&p).unwrap();
            assert_eq!(meta.shape, vec![3, 4, 5]);
            assert_eq!(meta.layout, layout);
            assert_eq!(back, data);
        }
    }

    #[test]
    fn identity_one_by_one() {
        let l = LayerDescriptor {
            relu: false,
            ..LayerDescriptor::conv("id", 3, 1, 1, 1, 1, 1, Padding::Valid)
        };
        let input = Tensor::from_data(3, 3, 1, vec![0, 10, 20, 30, 40, 50, 60, 70, 255]).unwrap();
        let out = reference_layer(&l, &input, Some(&vec![1]), 0, "id").unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let l = LayerDescriptor {
            relu: false,
            ..LayerDescriptor::conv("c", 3, 2, 2, 1, 2, 1, Padding::Valid)
        };
        let input = Tensor::from_data(3, 3, 1, vec![1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        // filter 0 sums the window, filter 1 picks the top-left element
        let w = vec![1, 1, 1, 1, 1, 0, 0, 0];
        let out = reference_layer(&l, &input, Some(&w), 0, "c").unwrap();
        // raw: f0 = [12,16,24,28], f1 = [1,2,4,5]; range 1..28
        let raw = [12u32, 1, 16, 2, 24, 4, 28, 5];
        let (mult, shift) = reference_requant_params(1, 28);
        let expect: Vec<u8> = raw.iter().map(|&v| (((v - 1) as u64 * mult as u64) >> shift) as u8).collect();
        assert_eq!(out.data, expect);
        assert_eq!(out.data[6], 254);
        assert_eq!(out.data[1], 0);
    }

    #[test]
    fn requant_params_closed_form() {
        assert_eq!(reference_requant_params(5, 5), (0, 0));
        let (m, s) = reference_requant_params(0, 1);
        assert_eq!((m, s), (65280, 8));
        for range in [1u32, 2, 3, 255, 256, 1000, 65_535, 1 << 20, u32::MAX] {
            let (m, s) = reference_requant_params(0, range);
            assert!(m < 1 << 16);
            assert!(((255u128 << (s + 1)) / range as u128) >= 1 << 16);
            assert!((range as u64 * m as u64) >> s <= 255);
            assert!((range as u64 * m as u64) >> s >= 254);
        }
    }

    #[test]
    fn compare_locates_divergence() {
        let a = Tensor::from_data(2, 2, 2, (0..8).collect()).unwrap();
        assert!(compare_outputs(&a, &a).unwrap().matches);
        let mut b = a.clone();
        b.set(1, 0, 1, 99);
        let d = compare_outputs(&a, &b).unwrap();
        assert!(!d.matches);
        assert_eq!(d.mismatches, 1);
        assert_eq!(d.first_divergence, Some((1, 0, 1, 5, 99)));
        let c = Tensor::zeros(1, 2, 2);
        assert!(matches!(compare_outputs(&a, &c), Err(ModelError::ShapeMismatch(..))));
    }

    #[test]
    fn same_avgpool_divides_by_valid_taps() {
        let l = LayerDescriptor::pool("p", LayerKind::Avgpool, 3, 3, 1, 1, Padding::Same);
        let input = Tensor::from_data(3, 3, 1, vec![9, 9, 9, 9, 9, 9, 9, 9, 9]).unwrap();
        let out = reference_layer(&l, &input, None, 0, "p").unwrap();
        assert!(out.data.iter().all(|&v| v == 9));
    }

    #[test]
    fn builtin_lookup() {
        assert_eq!(builtin("toy").unwrap().name, "toy");
        assert!(matches!(builtin("resnet"), Err(ModelError::UnknownModel(_))));
    }
}
