//! Miniature pre-norm transformer encoder with a tied MLM head, a voxel world
//! encoder and a bilinear builder head over feasible actions.

mod checkpoint;
mod forward;

use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gridworld::{BlockColor, GridDims};
use crate::numcore::{ParamStore, Scalar, Tensor, TensorError};
use crate::par::derive_seed;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION,
    MAGIC,
};
pub use forward::Net;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("grid is {got:?} but the model was built for {expected:?}")]
    DimsMismatch { expected: GridDims, got: GridDims },
    #[error("candidate {action:?} lies outside the {dims} grid")]
    CandidateOutOfBounds { action: crate::gridworld::Action, dims: GridDims },
    #[error("builder scoring needs at least one candidate action")]
    EmptyFeasibleSet,
    #[error("model has no {0} parameters")]
    MissingComponent(Component),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint parameter `{name}`: {message}")]
    ManifestMismatch { name: String, message: String },
    #[error("backbone does not fit the target config: {0}")]
    IncompatibleBackbone(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    MlmHead,
    WorldEncoder,
    BuilderHead,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Encoder,
        Component::MlmHead,
        Component::WorldEncoder,
        Component::BuilderHead,
    ];

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::MlmHead => "mlm_head",
            Component::WorldEncoder => "world_encoder",
            Component::BuilderHead => "builder_head",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub grid: GridDims,
    pub n_colors: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 100,
            max_seq_len: 32,
            grid: GridDims::default(),
            n_colors: BlockColor::ALL.len(),
            dropout: 0.0,
            seed: 0,
        }
    }
}

/// Keys accepted by [`ModelConfig::set`], in canonical order.
pub const MODEL_CONFIG_KEYS: [&str; 12] = [
    "n_layers",
    "n_heads",
    "d_model",
    "d_ff",
    "vocab_size",
    "max_seq_len",
    "grid_width",
    "grid_height",
    "grid_depth",
    "n_colors",
    "dropout",
    "seed",
];

fn parse_field<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("`{key}` cannot be `{value}`"))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < crate::tokenizer::NUM_SPECIAL {
            return bad(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must hold at least CLS and SEP".into());
        }
        if self.grid.cell_count() == 0 {
            return bad(format!("grid {:?} has no cells", self.grid));
        }
        if self.n_colors != BlockColor::ALL.len() {
            return bad(format!("n_colors must be {}, got {}", BlockColor::ALL.len(), self.n_colors));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "d_model" => self.d_model.to_string(),
            "d_ff" => self.d_ff.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "grid_width" => self.grid.width.to_string(),
            "grid_height" => self.grid.height.to_string(),
            "grid_depth" => self.grid.depth.to_string(),
            "n_colors" => self.n_colors.to_string(),
            "dropout" => self.dropout.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "n_layers" => self.n_layers = parse_field(key, value)?,
            "n_heads" => self.n_heads = parse_field(key, value)?,
            "d_model" => self.d_model = parse_field(key, value)?,
            "d_ff" => self.d_ff = parse_field(key, value)?,
            "vocab_size" => self.vocab_size = parse_field(key, value)?,
            "max_seq_len" => self.max_seq_len = parse_field(key, value)?,
            "grid_width" => self.grid.width = parse_field(key, value)?,
            "grid_height" => self.grid.height = parse_field(key, value)?,
            "grid_depth" => self.grid.depth = parse_field(key, value)?,
            "n_colors" => self.n_colors = parse_field(key, value)?,
            "dropout" => self.dropout = parse_field(key, value)?,
            "seed" => self.seed = parse_field(key, value)?,
            _ => return Err(format!("unknown model key `{key}`")),
        }
        Ok(())
    }

    /// `key = value` lines in canonical key order. Floats print in their
    /// shortest round-trip form, so [`ModelConfig::from_text`] restores every
    /// field exactly.
    pub fn to_text(&self) -> String {
        MODEL_CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("malformed line `{line}`")))?;
            let k = k.trim();
            cfg.set(k, v).map_err(ModelError::InvalidConfig)?;
            seen.push(k.to_string());
        }
        if let Some(missing) = MODEL_CONFIG_KEYS.iter().find(|k| !seen.iter().any(|s| s == *k)) {
            return Err(ModelError::InvalidConfig(format!("missing key `{missing}`")));
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub init: Init,
}

/// Every parameter of a full model, in manifest order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, component, init| {
        out.push(ParamSpec {
            name,
            shape,
            component,
            init,
        })
    };
    use Component::*;
    use Init::*;
    add("encoder.tok_emb".into(), vec![cfg.vocab_size, d], Encoder, Normal);
    add("encoder.pos_emb".into(), vec![cfg.max_seq_len, d], Encoder, Normal);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("encoder.layer{l}.{s}");
        add(p("ln1.gain"), vec![d], Encoder, Ones);
        add(p("ln1.bias"), vec![d], Encoder, Zeros);
        for m in ["q", "k", "v", "o"] {
            add(p(&format!("attn.w{m}")), vec![d, d], Encoder, Normal);
            add(p(&format!("attn.b{m}")), vec![d], Encoder, Zeros);
        }
        add(p("ln2.gain"), vec![d], Encoder, Ones);
        add(p("ln2.bias"), vec![d], Encoder, Zeros);
        add(p("ffn.w1"), vec![d, cfg.d_ff], Encoder, Normal);
        add(p("ffn.b1"), vec![cfg.d_ff], Encoder, Zeros);
        add(p("ffn.w2"), vec![cfg.d_ff, d], Encoder, Normal);
        add(p("ffn.b2"), vec![d], Encoder, Zeros);
    }
    add("encoder.final_ln.gain".into(), vec![d], Encoder, Ones);
    add("encoder.final_ln.bias".into(), vec![d], Encoder, Zeros);
    add("mlm_head.bias".into(), vec![cfg.vocab_size], MlmHead, Zeros);
    add("world.occupancy_emb".into(), vec![cfg.n_colors + 1, d], WorldEncoder, Normal);
    add("world.x_emb".into(), vec![cfg.grid.width, d], WorldEncoder, Normal);
    add("world.y_emb".into(), vec![cfg.grid.height, d], WorldEncoder, Normal);
    add("world.z_emb".into(), vec![cfg.grid.depth, d], WorldEncoder, Normal);
    add("world.proj.w".into(), vec![d, d], WorldEncoder, Normal);
    add("world.proj.b".into(), vec![d], WorldEncoder, Zeros);
    add("builder.bilinear".into(), vec![d, d], BuilderHead, Normal);
    add("builder.color_emb".into(), vec![cfg.n_colors, d], BuilderHead, Normal);
    add("builder.stop".into(), vec![1, d], BuilderHead, Normal);
    out
}

fn name_key(name: &str) -> u64 {
    // FNV-1a, so a parameter's init stream depends only on its name.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor<f32> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::from_fn(spec.shape.clone(), |_| 1.0),
        Init::Normal => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[name_key(&spec.name)]));
            let normal = Normal::new(0.0f32, INIT_STD as f32).expect("positive std");
            Tensor::from_fn(spec.shape.clone(), |_| normal.sample(&mut rng))
        }
    }
}

/// Parameters with their config and the components they cover.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    components: Vec<Component>,
}

/// Fresh parameters for every component: normal(0, 0.02) weights and
/// embeddings, zero biases, unit layer-norm gains. Each tensor draws from its
/// own stream keyed by `(config.seed, name)`.
pub fn init_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut params = ParamStore::new();
    for spec in layout(config) {
        let t = init_tensor(&spec, config.seed);
        params.insert(spec.name, t);
    }
    Ok(Model {
        config: config.clone(),
        params,
        components: Component::ALL.to_vec(),
    })
}

/// Builder model whose encoder is copied from `mlm` and whose world encoder
/// and builder head come from `init_model(config)`. The MLM head is dropped.
pub fn init_builder_from_mlm(mlm: &Model, config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    if !mlm.has(Component::Encoder) {
        return Err(ModelError::IncompatibleBackbone("checkpoint has no encoder".into()));
    }
    let mut fresh = init_model(config)?.without(Component::MlmHead);
    for spec in layout(config).iter().filter(|s| s.component == Component::Encoder) {
        let src = mlm
            .params
            .by_name(&spec.name)
            .ok_or_else(|| ModelError::IncompatibleBackbone(format!("missing `{}`", spec.name)))?;
        if src.shape() != spec.shape.as_slice() {
            return Err(ModelError::IncompatibleBackbone(format!(
                "`{}` has shape {:?}, config needs {:?}",
                spec.name,
                src.shape(),
                spec.shape
            )));
        }
        let id = fresh.params.id(&spec.name).expect("layout parameter");
        fresh.params.get_mut(id).data_mut().copy_from_slice(src.data());
    }
    let extra = mlm
        .params
        .iter()
        .filter(|(_, n, _)| mlm.component_of(n) == Some(Component::Encoder))
        .find(|(_, n, _)| fresh.params.id(n).is_none());
    if let Some((_, n, _)) = extra {
        return Err(ModelError::IncompatibleBackbone(format!("unexpected `{n}`")));
    }
    Ok(fresh)
}

impl<T: Scalar> Model<T> {
    /// Assembles a model from named tensors, checking names, order and
    /// shapes against the layout restricted to `components`.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore<T>,
        components: &[Component],
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let expected: Vec<ParamSpec> = layout(&config)
            .into_iter()
            .filter(|s| components.contains(&s.component))
            .collect();
        for (i, spec) in expected.iter().enumerate() {
            let mismatch = |message: String| ModelError::ManifestMismatch {
                name: spec.name.clone(),
                message,
            };
            let id = params.id(&spec.name).ok_or_else(|| mismatch("missing".into()))?;
            if id.0 != i {
                return Err(mismatch(format!("at position {}, expected {i}", id.0)));
            }
            let shape = params.get(id).shape();
            if shape != spec.shape.as_slice() {
                return Err(mismatch(format!("shape {shape:?}, expected {:?}", spec.shape)));
            }
        }
        if params.len() != expected.len() {
            let (_, name, _) = params
                .iter()
                .find(|(_, n, _)| !expected.iter().any(|s| s.name == *n))
                .expect("extra parameter exists");
            return Err(ModelError::ManifestMismatch {
                name: name.to_string(),
                message: "not part of the model layout".into(),
            });
        }
        let mut components = components.to_vec();
        components.sort();
        components.dedup();
        Ok(Model {
            config,
            params,
            components,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn has(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    pub fn component_of(&self, name: &str) -> Option<Component> {
        component_of(name)
    }

    pub fn without(mut self, c: Component) -> Self {
        self.params.retain(|n| component_of(n) != Some(c));
        self.components.retain(|&k| k != c);
        self
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            components: self.components.clone(),
        }
    }

    pub fn net(&self) -> Result<Net<'_, T>, ModelError> {
        Net::new(&self.config, &self.params)
    }
}

/// Component owning a parameter, judged by its name prefix.
pub fn component_of(name: &str) -> Option<Component> {
    let prefix = name.split('.').next()?;
    Some(match prefix {
        "encoder" => Component::Encoder,
        "mlm_head" => Component::MlmHead,
        "world" => Component::WorldEncoder,
        "builder" => Component::BuilderHead,
        _ => return None,
    })
}
