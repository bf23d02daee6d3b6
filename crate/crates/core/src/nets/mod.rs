//! The learnable components: two pyramid encoders, the flow decoder, two
//! domain-transformation decoders and two patch discriminators.
//!
//! All forward passes are pure functions of a [`ParameterStore`] and their
//! tensor inputs, so they can be differentiated end to end.

mod kernels;
mod discriminator;
mod encoder;
mod flow;
mod layers;
mod transform;

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use flow::{cost_volume, cost_volume_channels, normalize_features, warp, FEATURE_NORM_EPS};

use crate::error::{invalid, Result};
use discriminator::{Discriminator, DISCRIMINATOR_KERNEL, DISCRIMINATOR_STRIDES};
use encoder::Encoder;
use flow::FlowDecoder;
use layers::{Initializer, NamedVars};
use transform::ImageDecoder;

/// Number of levels produced by an encoder.
pub const PYRAMID_LEVELS: usize = 6;

/// Pyramid levels consumed by the flow decoder, finest first.
pub const FLOW_LEVELS: [usize; 5] = [2, 3, 4, 5, 6];

/// Image appearance domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Fog,
    Clean,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Fog => "fog",
            Domain::Clean => "clean",
        })
    }
}

/// The seven independently weighted network components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    /// Encoder for fog images.
    FogEncoder,
    /// Encoder for clean images.
    CleanEncoder,
    /// Flow decoder shared by both domains.
    FlowDecoder,
    /// Renders fog images from clean-image features.
    FogDecoder,
    /// Renders clean images from fog-image features.
    CleanDecoder,
    /// Judges fog images.
    FogDiscriminator,
    /// Judges clean images.
    CleanDiscriminator,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::FogEncoder,
        Component::CleanEncoder,
        Component::FlowDecoder,
        Component::FogDecoder,
        Component::CleanDecoder,
        Component::FogDiscriminator,
        Component::CleanDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::FogEncoder => "fog_encoder",
            Component::CleanEncoder => "clean_encoder",
            Component::FlowDecoder => "flow_decoder",
            Component::FogDecoder => "fog_decoder",
            Component::CleanDecoder => "clean_decoder",
            Component::FogDiscriminator => "fog_discriminator",
            Component::CleanDiscriminator => "clean_discriminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn encoder(domain: Domain) -> Self {
        match domain {
            Domain::Fog => Component::FogEncoder,
            Domain::Clean => Component::CleanEncoder,
        }
    }

    pub fn decoder(domain: Domain) -> Self {
        match domain {
            Domain::Fog => Component::FogDecoder,
            Domain::Clean => Component::CleanDecoder,
        }
    }

    pub fn discriminator(domain: Domain) -> Self {
        match domain {
            Domain::Fog => Component::FogDiscriminator,
            Domain::Clean => Component::CleanDiscriminator,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of components, stored as a bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ComponentSet(u8);

impl ComponentSet {
    pub const EMPTY: ComponentSet = ComponentSet(0);

    pub const fn of(components: &[Component]) -> Self {
        let mut bits = 0u8;
        let mut i = 0;
        while i < components.len() {
            bits |= 1 << components[i] as u8;
            i += 1;
        }
        ComponentSet(bits)
    }

    pub fn all() -> Self {
        Self::of(&Component::ALL)
    }

    pub fn contains(self, c: Component) -> bool {
        self.0 & (1 << c.index()) != 0
    }

    pub fn insert(&mut self, c: Component) {
        self.0 |= 1 << c.index();
    }

    pub fn union(self, other: Self) -> Self {
        ComponentSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Component> {
        Component::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl fmt::Debug for ComponentSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(Component::name)).finish()
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Channel count of each encoder level, finest first.
    pub encoder_channels: [usize; 6],
    /// Widths of the hidden convolutions in each flow head.
    pub flow_head_channels: Vec<usize>,
    /// Cost-volume search radius in pixels.
    pub max_displacement: usize,
    /// Residual blocks in each transformation decoder.
    pub residual_blocks: usize,
    /// Output widths of the first two transposed convolutions of a transformation decoder.
    pub decoder_up_channels: [usize; 2],
    /// Widths of the first four discriminator convolutions.
    pub discriminator_channels: [usize; 4],
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64, 96, 128, 196],
            flow_head_channels: vec![128, 128, 96, 64, 32],
            max_displacement: 4,
            residual_blocks: 6,
            decoder_up_channels: [128, 64],
            discriminator_channels: [64, 128, 256, 512],
        }
    }
}

impl NetConfig {
    /// Narrow widths with the same topology, for desk-scale CPU runs.
    pub fn compact() -> Self {
        Self {
            encoder_channels: [8, 12, 12, 16, 24, 32],
            flow_head_channels: vec![32, 32, 24, 16, 8],
            max_displacement: 4,
            residual_blocks: 6,
            decoder_up_channels: [16, 8],
            discriminator_channels: [8, 16, 32, 32],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0)
            || self.flow_head_channels.contains(&0)
            || self.decoder_up_channels.contains(&0)
            || self.discriminator_channels.contains(&0)
        {
            return Err(invalid("network widths must be positive"));
        }
        Ok(())
    }
}

/// Encoder output: six feature maps, level `l` at `1/2^l` resolution.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// Feature map of pyramid level `l` (1-based, 1..=6).
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - 1]
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.dims().to_vec()).collect()
    }

    /// Batch elements `start..start + len` of every level.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|t| t.narrow(0, start, len))
                .collect::<candle_core::Result<_>>()?,
        })
    }
}

/// Flow estimates at pyramid levels 2..=6 plus the full-resolution result.
///
/// Displacements at level `l` are in pixels of that level's grid.
#[derive(Debug, Clone)]
pub struct MultiScaleFlow {
    levels: Vec<Tensor>,
    full: Tensor,
}

impl MultiScaleFlow {
    /// `levels` holds the flows of [`FLOW_LEVELS`], finest first.
    pub fn new(levels: Vec<Tensor>, full: Tensor) -> Result<Self> {
        if levels.len() != FLOW_LEVELS.len() {
            return Err(invalid(format!("expected {} flow levels, got {}", FLOW_LEVELS.len(), levels.len())));
        }
        Ok(Self { levels, full })
    }

    /// Flow at pyramid level `l` (2..=6).
    pub fn level(&self, l: usize) -> &Tensor {
        &self.levels[l - FLOW_LEVELS[0]]
    }

    pub fn full(&self) -> &Tensor {
        &self.full
    }

    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
            full: self.full.detach(),
        }
    }
}

/// Spatial size of the discriminator's score map for an `h×w` input.
pub fn discriminator_output_size(h: usize, w: usize) -> (usize, usize) {
    let step = |n: usize, s: usize| (n + 2 - DISCRIMINATOR_KERNEL) / s + 1;
    DISCRIMINATOR_STRIDES
        .iter()
        .fold((h, w), |(h, w), &s| (step(h, s), step(w, s)))
}

/// All network weights, grouped by component, with a per-component trainable flag.
pub struct ParameterStore {
    config: NetConfig,
    dtype: DType,
    device: Device,
    fog_encoder: Encoder,
    clean_encoder: Encoder,
    flow_decoder: FlowDecoder,
    fog_decoder: ImageDecoder,
    clean_decoder: ImageDecoder,
    fog_discriminator: Discriminator,
    clean_discriminator: Discriminator,
    trainable: ComponentSet,
}

impl ParameterStore {
    /// Deterministic initialization: convolution weights are fan-in scaled
    /// uniform draws from a per-component ChaCha stream, biases are zero.
    pub fn init(seed: u64, config: &NetConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let init_for = |c: Component| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c.index() as u64);
            Initializer::new(rng, &device, dtype)
        };
        Ok(Self {
            fog_encoder: Encoder::new(&mut init_for(Component::FogEncoder), config)?,
            clean_encoder: Encoder::new(&mut init_for(Component::CleanEncoder), config)?,
            flow_decoder: FlowDecoder::new(&mut init_for(Component::FlowDecoder), config)?,
            fog_decoder: ImageDecoder::new(&mut init_for(Component::FogDecoder), config)?,
            clean_decoder: ImageDecoder::new(&mut init_for(Component::CleanDecoder), config)?,
            fog_discriminator: Discriminator::new(&mut init_for(Component::FogDiscriminator), config)?,
            clean_discriminator: Discriminator::new(
                &mut init_for(Component::CleanDiscriminator),
                config,
            )?,
            config: config.clone(),
            dtype,
            device,
            trainable: ComponentSet::all(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Named weights of one component, in a fixed order.
    pub fn vars(&self, component: Component) -> Vec<(String, Var)> {
        let mut out = NamedVars::new();
        match component {
            Component::FogEncoder => self.fog_encoder.collect(&mut out),
            Component::CleanEncoder => self.clean_encoder.collect(&mut out),
            Component::FlowDecoder => self.flow_decoder.collect(&mut out),
            Component::FogDecoder => self.fog_decoder.collect(&mut out),
            Component::CleanDecoder => self.clean_decoder.collect(&mut out),
            Component::FogDiscriminator => self.fog_discriminator.collect(&mut out),
            Component::CleanDiscriminator => self.clean_discriminator.collect(&mut out),
        }
        out
    }

    pub fn parameter_count(&self, component: Component) -> usize {
        self.vars(component)
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    pub fn is_trainable(&self, component: Component) -> bool {
        self.trainable.contains(component)
    }

    pub fn set_trainable(&mut self, component: Component, trainable: bool) {
        let mut set = ComponentSet::EMPTY;
        for c in self.trainable.iter().filter(|c| *c != component) {
            set.insert(c);
        }
        if trainable {
            set.insert(component);
        }
        self.trainable = set;
    }

    pub fn trainable(&self) -> ComponentSet {
        self.trainable
    }

    /// Bit-exact copy of every weight.
    pub fn snapshot(&self) -> ParameterSnapshot {
        let mut values = BTreeMap::new();
        for c in Component::ALL {
            for (name, var) in self.vars(c) {
                values.insert((c, name), tensor_bits(var.as_tensor()));
            }
        }
        ParameterSnapshot { values }
    }

    /// Encodes `N×3×H×W` images of `domain` into a feature pyramid.
    pub fn encode(&self, domain: Domain, img: &Tensor) -> Result<FeaturePyramid> {
        match domain {
            Domain::Fog => self.fog_encoder.forward(img),
            Domain::Clean => self.clean_encoder.forward(img),
        }
    }

    /// Coarse-to-fine flow from the first frame's pyramid to the second's.
    pub fn estimate_flow(
        &self,
        pyr1: &FeaturePyramid,
        pyr2: &FeaturePyramid,
    ) -> Result<MultiScaleFlow> {
        self.flow_decoder.forward(pyr1, pyr2)
    }

    /// Renders an image in `domain` from the pyramid of `src`.
    pub fn decode_image(&self, domain: Domain, pyr: &FeaturePyramid, src: &Tensor) -> Result<Tensor> {
        match domain {
            Domain::Fog => self.fog_decoder.forward(pyr, src),
            Domain::Clean => self.clean_decoder.forward(pyr, src),
        }
    }

    /// Raw patch scores of the `domain` discriminator, `N×1×H'×W'`.
    pub fn discriminate(&self, domain: Domain, img: &Tensor) -> Result<Tensor> {
        match domain {
            Domain::Fog => self.fog_discriminator.forward(img),
            Domain::Clean => self.clean_discriminator.forward(img),
        }
    }

    /// Encodes both frames with the same encoder and estimates their flow.
    pub fn flow_between(&self, domain: Domain, frame1: &Tensor, frame2: &Tensor) -> Result<MultiScaleFlow> {
        let p1 = self.encode(domain, frame1)?;
        let p2 = self.encode(domain, frame2)?;
        self.estimate_flow(&p1, &p2)
    }

    /// Maps images of `from` into the other domain via the matching decoder.
    pub fn translate(&self, from: Domain, img: &Tensor) -> Result<Tensor> {
        let pyr = self.encode(from, img)?;
        let to = match from {
            Domain::Fog => Domain::Clean,
            Domain::Clean => Domain::Fog,
        };
        self.decode_image(to, &pyr, img)
    }

    /// Overwrites one weight tensor, checking its shape.
    pub fn assign(&self, component: Component, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars(component);
        let (_, var) = vars
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| invalid(format!("{component} has no parameter `{name}`")))?;
        if var.as_tensor().dims() != value.dims() {
            return Err(invalid(format!(
                "shape mismatch for {component}/{name}: {:?} vs {:?}",
                var.as_tensor().dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

fn tensor_bits(t: &Tensor) -> Vec<u64> {
    let flat = t.flatten_all().expect("flatten");
    match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()
            .expect("f64 values")
            .into_iter()
            .map(f64::to_bits)
            .collect(),
        _ => flat
            .to_dtype(DType::F32)
            .and_then(|t| t.to_vec1::<f32>())
            .expect("f32 values")
            .into_iter()
            .map(|v| v.to_bits() as u64)
            .collect(),
    }
}

/// Bit patterns of every weight at one instant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSnapshot {
    values: BTreeMap<(Component, String), Vec<u64>>,
}

impl ParameterSnapshot {
    /// Components with at least one weight whose bits differ from `other`.
    pub fn changed_components(&self, other: &ParameterSnapshot) -> ComponentSet {
        let mut set = ComponentSet::EMPTY;
        for (key, bits) in &self.values {
            if other.values.get(key) != Some(bits) {
                set.insert(key.0);
            }
        }
        set
    }

    /// Names of weights (as `component/name`) whose bits differ from `other`.
    pub fn changed_parameters(&self, other: &ParameterSnapshot) -> Vec<String> {
        self.values
            .iter()
            .filter(|(k, bits)| other.values.get(*k) != Some(*bits))
            .map(|((c, n), _)| format!("{c}/{n}"))
            .collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.values.keys().map(|(c, n)| format!("{c}/{n}")).collect()
    }
}
