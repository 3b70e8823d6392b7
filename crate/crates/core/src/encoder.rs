//! Tiny 3D CNN encoder with feature taps and per-(scale, role) projection heads.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{HdcError, Result};
use crate::seeding::{self, stream};
use crate::tensor::{Element, GradTape, Padding, Tensor, Var, conv_output_extent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
}

fn default_kernel() -> [usize; 3] {
    [3, 3, 3]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub blocks: Vec<BlockConfig>,
    /// 1-based indices of blocks whose activations feed the losses.
    pub tap_blocks: Vec<usize>,
    pub projection_dim: usize,
    /// Large by default: block 5 normalizes over only `1x2x2` positions per
    /// channel, and a tiny eps there lets near-constant channels blow up.
    pub norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let block = |channels, stride| BlockConfig {
            channels,
            kernel: [3, 3, 3],
            stride,
        };
        EncoderConfig {
            input_channels: 3,
            blocks: vec![
                block(8, [1, 1, 1]),
                block(16, [2, 2, 2]),
                block(32, [2, 2, 2]),
                block(64, [2, 2, 2]),
                block(128, [1, 2, 2]),
            ],
            tap_blocks: vec![3, 4, 5],
            projection_dim: 32,
            norm_eps: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("encoder: {m}")));
        if self.blocks.is_empty() || self.input_channels == 0 {
            return fail("need at least one block and one input channel".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel.contains(&0) || b.stride.contains(&0) {
                return fail(format!(
                    "block {} has a zero channel, kernel or stride",
                    i + 1
                ));
            }
        }
        if self.tap_blocks.is_empty() {
            return fail("tap_blocks is empty".into());
        }
        for k in &self.tap_blocks {
            if *k == 0 || *k > self.blocks.len() {
                return fail(format!("tap block {k} outside 1..={}", self.blocks.len()));
            }
        }
        if self.projection_dim == 0 {
            return fail("projection_dim must be >= 1".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, block: usize) -> usize {
        self.blocks[block - 1].channels
    }

    /// Output extents `(T, H, W, C)` of every block for a `(T, H, W)` input.
    pub fn block_shapes(&self, input: [usize; 3]) -> Result<Vec<[usize; 4]>> {
        let mut dims = input;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            for d in 0..3 {
                dims[d] = conv_output_extent(dims[d], b.kernel[d], b.stride[d], Padding::Same)
                    .ok_or_else(|| {
                        HdcError::Config(format!(
                            "block {} cannot process extent {}",
                            i + 1,
                            dims[d]
                        ))
                    })?;
            }
            out.push([dims[0], dims[1], dims[2], b.channels]);
        }
        Ok(out)
    }

    /// Every parameter name with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            let [kt, kh, kw] = b.kernel;
            out.push((conv_weight(n), vec![kt, kh, kw, cin, b.channels]));
            out.push((conv_bias(n), vec![b.channels]));
            out.push((norm_gamma(n), vec![b.channels]));
            out.push((norm_beta(n), vec![b.channels]));
            cin = b.channels;
        }
        for k in self.taps() {
            for role in Role::ALL {
                out.push((
                    head_weight(k, role),
                    vec![self.channels(k), self.projection_dim],
                ));
                out.push((head_bias(k, role), vec![self.projection_dim]));
            }
        }
        out
    }

    /// Tap blocks, sorted and deduplicated.
    pub fn taps(&self) -> Vec<usize> {
        let mut t = self.tap_blocks.clone();
        t.sort_unstable();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "o")]
    Original,
    #[serde(rename = "s")]
    Spatial,
    #[serde(rename = "t")]
    Temporal,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Original, Role::Spatial, Role::Temporal];

    pub fn tag(self) -> &'static str {
        match self {
            Role::Original => "o",
            Role::Spatial => "s",
            Role::Temporal => "t",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Average over H, W per temporal index.
    Spatial,
    /// Average over T, H, W.
    Global,
}

pub fn conv_weight(block: usize) -> String {
    format!("block{block}.conv.weight")
}
pub fn conv_bias(block: usize) -> String {
    format!("block{block}.conv.bias")
}
pub fn norm_gamma(block: usize) -> String {
    format!("block{block}.norm.gamma")
}
pub fn norm_beta(block: usize) -> String {
    format!("block{block}.norm.beta")
}
pub fn head_weight(scale: usize, role: Role) -> String {
    format!("head{scale}.{role}.weight")
}
pub fn head_bias(scale: usize, role: Role) -> String {
    format!("head{scale}.{role}.bias")
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F: Element> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Element> Params<F> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<F>>) -> Self {
        Params { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| HdcError::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Element>(&self) -> Params<G> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<F>> {
        self.tensors
    }

    /// Checks that names and shapes agree exactly with `config`.
    pub fn check_matches(&self, config: &EncoderConfig) -> Result<()> {
        let expected = config.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(HdcError::Config(format!(
                "parameter set has {} tensors, config expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| HdcError::Config(format!("parameter {name} missing")))?;
            if t.shape() != shape.as_slice() {
                return Err(HdcError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Conv kernels and head weights uniform in `±sqrt(6 / fan_in)`, conv and
/// head biases 0, norm gamma 1 and beta 0.
pub fn init_params<F: Element>(config: &EncoderConfig, seed: u64) -> Result<Params<F>> {
    config.validate()?;
    let mut rng = seeding::rng_from(&[seed, stream::INIT]);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let tensor = if name.ends_with(".weight") {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-bound..bound)))
        } else if name.ends_with(".gamma") {
            Tensor::ones(shape)
        } else {
            Tensor::zeros(shape)
        };
        tensors.insert(name, tensor);
    }
    Ok(Params { tensors })
}

/// Parameters recorded on a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| HdcError::InvalidArgument(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Records every parameter on `tape`, as trainable leaves or as constants.
pub fn bind<F: Element>(
    tape: &mut GradTape<F>,
    params: &Params<F>,
    trainable: bool,
) -> BoundParams {
    let vars = params
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect();
    BoundParams { vars }
}

/// Post-activation maps of the tap blocks, plus the final block.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub maps: BTreeMap<usize, Var>,
    pub last_block: Var,
}

/// conv3d -> instance norm -> relu per block.
pub fn forward<F: Element>(
    tape: &mut GradTape<F>,
    config: &EncoderConfig,
    params: &BoundParams,
    input: Var,
) -> Result<FeaturePyramid> {
    let taps = config.taps();
    let mut x = input;
    let mut maps = BTreeMap::new();
    for (i, b) in config.blocks.iter().enumerate() {
        let n = i + 1;
        let y = tape.conv3d(
            x,
            params.var(&conv_weight(n))?,
            params.var(&conv_bias(n))?,
            b.stride,
            Padding::Same,
        )?;
        let y = tape.instance_norm(
            y,
            params.var(&norm_gamma(n))?,
            params.var(&norm_beta(n))?,
            config.norm_eps,
        )?;
        x = tape.relu(y)?;
        if taps.contains(&n) {
            maps.insert(n, x);
        }
    }
    Ok(FeaturePyramid {
        maps,
        last_block: x,
    })
}

#[derive(Debug, Clone)]
pub enum ScaleEmbedding {
    /// One `[B, D]` vector set per temporal index of the scale's map.
    Spatial(Vec<Var>),
    Global(Var),
}

#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub role: Role,
    pub mode: PoolMode,
    pub scales: BTreeMap<usize, ScaleEmbedding>,
}

impl EmbeddingSet {
    pub fn get(&self, scale: usize) -> Result<&ScaleEmbedding> {
        self.scales
            .get(&scale)
            .ok_or_else(|| HdcError::InvalidArgument(format!("no embedding at scale {scale}")))
    }
}

/// Pools every requested scale of `pyramid` and applies the role's head.
pub fn pool_and_project<F: Element>(
    tape: &mut GradTape<F>,
    pyramid: &FeaturePyramid,
    scales: &[usize],
    role: Role,
    mode: PoolMode,
    params: &BoundParams,
) -> Result<EmbeddingSet> {
    let mut out = BTreeMap::new();
    for &k in scales {
        let map = *pyramid
            .maps
            .get(&k)
            .ok_or_else(|| HdcError::InvalidArgument(format!("scale {k} is not a tap block")))?;
        let (w, b) = (
            params.var(&head_weight(k, role))?,
            params.var(&head_bias(k, role))?,
        );
        let emb = match mode {
            PoolMode::Spatial => ScaleEmbedding::Spatial(
                tape.pool_spatial_vectors(map)?
                    .into_iter()
                    .map(|v| tape.linear(v, w, b))
                    .collect::<Result<_>>()?,
            ),
            PoolMode::Global => {
                let pooled = tape.global_pool(map)?;
                ScaleEmbedding::Global(tape.linear(pooled, w, b)?)
            }
        };
        out.insert(k, emb);
    }
    Ok(EmbeddingSet {
        role,
        mode,
        scales: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_block_shapes() {
        let shapes = EncoderConfig::default().block_shapes([8, 32, 32]).unwrap();
        assert_eq!(shapes[2], [2, 8, 8, 32]);
        assert_eq!(shapes[3], [1, 4, 4, 64]);
        assert_eq!(shapes[4], [1, 2, 2, 128]);
    }

    #[test]
    fn bad_taps_rejected() {
        let cfg = EncoderConfig {
            tap_blocks: vec![6],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_head_is_an_error() {
        let cfg = EncoderConfig {
            blocks: vec![BlockConfig {
                channels: 2,
                kernel: [1, 1, 1],
                stride: [1, 1, 1],
            }],
            tap_blocks: vec![1],
            projection_dim: 2,
            ..Default::default()
        };
        let params = init_params::<f64>(&cfg, 0).unwrap();
        let mut tape = GradTape::new();
        let bound = bind(&mut tape, &params, false);
        let x = tape.constant(Tensor::ones([1, 2, 2, 2, 3]));
        let pyr = forward(&mut tape, &cfg, &bound, x).unwrap();
        let err = pool_and_project(
            &mut tape,
            &pyr,
            &[2],
            Role::Original,
            PoolMode::Global,
            &bound,
        );
        assert!(err.is_err());
    }
}
