//! Network blocks: residual blocks with GroupNorm and ELU, the 5-stage
//! encoder/decoder, CBAM-3D, and the segmentation / texture / non-nodule
//! heads.

mod model;

pub use model::{
    cbam3d, classification_head, decoder_forward, encoder_forward, joint_forward,
    nonnodule_recognizer_forward, residual_block, segmentation_head,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{fill_uniform, Graph, Scalar, Tensor, Var};

/// Hidden widths of the classification head.
pub const CLS_HIDDEN_1: usize = 128;
pub const CLS_HIDDEN_2: usize = 32;
/// Channel-MLP reduction ratio inside CBAM.
pub const CBAM_REDUCTION: usize = 16;
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct JointModelConfig {
    pub stages: usize,
    pub base_features: usize,
    pub groups: usize,
    pub texture_classes: usize,
    pub dropout_rate: f64,
    pub use_cbam: bool,
    pub input_channels: usize,
}

impl Default for JointModelConfig {
    fn default() -> Self {
        JointModelConfig {
            stages: 5,
            base_features: 32,
            groups: 8,
            texture_classes: 3,
            dropout_rate: 0.6,
            use_cbam: false,
            input_channels: 1,
        }
    }
}

impl JointModelConfig {
    /// Desk-scale profile used by tests and the phantom harness.
    pub fn desk() -> Self {
        JointModelConfig { base_features: 8, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=6).contains(&self.stages) {
            return Err(Error::InvalidConfig(format!("stages must be in 2..=6, got {}", self.stages)));
        }
        if self.base_features == 0 || self.base_features % self.groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_features {} must be a positive multiple of groups {}",
                self.base_features, self.groups
            )));
        }
        if ![2, 3, 5].contains(&self.texture_classes) {
            return Err(Error::InvalidConfig(format!(
                "texture_classes must be 2, 3 or 5, got {}",
                self.texture_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Channels at encoder stage `i` (0-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_features << i
    }

    /// Channels at the bottleneck.
    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.stages - 1)
    }

    /// Configuration of the 2-class non-nodule recognizer sharing this
    /// model's encoder.
    pub fn binary_recognizer(&self) -> Self {
        JointModelConfig { texture_classes: 2, ..*self }
    }
}

/// Named map from layer path to tensor.
pub type Parameters<S> = BTreeMap<String, Tensor<S>>;

struct Init<'a, S: Scalar> {
    params: Parameters<S>,
    rng: &'a mut ChaCha8Rng,
}

impl<S: Scalar> Init<'_, S> {
    /// Fan-in-scaled uniform init (uniform in +-sqrt(3/fan_in), unit
    /// variance gain as appropriate for ELU).
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize) {
        let fan_in = (c_in * k * k * k) as f64;
        let limit = (3.0 / fan_in).sqrt();
        let mut w = Tensor::zeros(&[c_out, c_in, k, k, k]);
        fill_uniform(&mut w, self.rng, -limit, limit);
        self.params.insert(format!("{}.weight", name), w);
        self.params.insert(format!("{}.bias", name), Tensor::zeros(&[c_out]));
    }

    fn linear(&mut self, name: &str, f: usize, o: usize) {
        let limit = (3.0 / f as f64).sqrt();
        let mut w = Tensor::zeros(&[f, o]);
        fill_uniform(&mut w, self.rng, -limit, limit);
        self.params.insert(format!("{}.weight", name), w);
        self.params.insert(format!("{}.bias", name), Tensor::zeros(&[o]));
    }

    fn group_norm(&mut self, name: &str, c: usize) {
        self.params.insert(format!("{}.gamma", name), Tensor::full(&[c], S::one()));
        self.params.insert(format!("{}.beta", name), Tensor::zeros(&[c]));
    }

    fn residual_block(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.group_norm(&format!("{}.gn1", prefix), c_in);
        self.conv(&format!("{}.conv1", prefix), c_out, c_in, 3);
        self.group_norm(&format!("{}.gn2", prefix), c_out);
        self.conv(&format!("{}.conv2", prefix), c_out, c_out, 3);
        if c_in != c_out {
            self.conv(&format!("{}.proj", prefix), c_out, c_in, 1);
        }
    }

    fn cbam(&mut self, prefix: &str, c: usize) {
        let hidden = (c / CBAM_REDUCTION).max(1);
        self.linear(&format!("{}.mlp1", prefix), c, hidden);
        self.linear(&format!("{}.mlp2", prefix), hidden, c);
        self.conv(&format!("{}.spatial", prefix), 1, 2, 7);
    }
}

/// Decoder block input channels at stage `i`: halved incoming channels
/// concatenated with the matching skip.
fn decoder_block_in(cfg: &JointModelConfig, i: usize) -> usize {
    let incoming = if i + 1 == cfg.stages {
        cfg.bottleneck_channels()
    } else {
        cfg.stage_channels(i + 1)
    };
    incoming / 2 + cfg.stage_channels(i)
}

/// Initialize the full joint-model parameter set. Decoder and
/// segmentation-head entries are omitted when `encoder_only` (non-nodule
/// recognizer layout).
pub fn init_parameters<S: Scalar>(cfg: &JointModelConfig, seed: u64, encoder_only: bool) -> Result<Parameters<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { params: BTreeMap::new(), rng: &mut rng };
    init.conv("stem", cfg.base_features, cfg.input_channels, 3);
    let mut c_prev = cfg.base_features;
    for i in 0..cfg.stages {
        let c_out = cfg.stage_channels(i);
        init.residual_block(&format!("enc{}", i), c_prev, c_out);
        if cfg.use_cbam {
            init.cbam(&format!("enc{}.cbam", i), c_out);
        }
        c_prev = c_out;
    }
    if !encoder_only {
        for i in (0..cfg.stages).rev() {
            let incoming = if i + 1 == cfg.stages { cfg.bottleneck_channels() } else { cfg.stage_channels(i + 1) };
            init.conv(&format!("dec{}.up", i), incoming / 2, incoming, 3);
            init.residual_block(&format!("dec{}.block", i), decoder_block_in(cfg, i), cfg.stage_channels(i));
            if cfg.use_cbam {
                init.cbam(&format!("dec{}.cbam", i), cfg.stage_channels(i));
            }
        }
        init.conv("seg", 1, cfg.base_features, 1);
    }
    let cb = cfg.bottleneck_channels();
    init.linear("cls.fc1", cb, CLS_HIDDEN_1);
    init.linear("cls.fc2", CLS_HIDDEN_1, CLS_HIDDEN_2);
    init.linear("cls.out", CLS_HIDDEN_2, cfg.texture_classes);
    Ok(init.params)
}

/// Initialize a non-nodule recognizer from a joint checkpoint: encoder
/// parameters are copied byte-identical (shape mismatch is a load error),
/// classification-head parameters are copied only where shapes agree, and
/// decoder entries are dropped.
pub fn load_recognizer_from_joint<S: Scalar>(
    joint: &Parameters<S>,
    cfg_binary: &JointModelConfig,
    seed: u64,
) -> Result<Parameters<S>> {
    if cfg_binary.texture_classes != 2 {
        return Err(Error::InvalidConfig("non-nodule recognizer requires texture_classes = 2".into()));
    }
    let mut params = init_parameters::<S>(cfg_binary, seed, true)?;
    for (name, tensor) in params.iter_mut() {
        let is_encoder = name.starts_with("stem") || name.starts_with("enc");
        match joint.get(name) {
            Some(src) if src.shape() == tensor.shape() => *tensor = src.clone(),
            Some(_) if is_encoder => {
                return Err(Error::Load(format!(
                    "encoder parameter {} has mismatched shape in checkpoint",
                    name
                )));
            }
            None if is_encoder => {
                return Err(Error::Load(format!("encoder parameter {} missing from checkpoint", name)));
            }
            _ => {} // head parameter with different shape: keep fresh init
        }
    }
    Ok(params)
}

/// Record every parameter on a tape and return name -> handle bindings.
pub fn bind_parameters<S: Scalar>(
    graph: &mut Graph<S>,
    params: &Parameters<S>,
    requires_grad: bool,
) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(name, tensor)| (name.clone(), graph.leaf(tensor.clone(), requires_grad)))
        .collect()
}

pub(crate) fn param<'a>(bindings: &'a BTreeMap<String, Var>, name: &str) -> Result<Var> {
    bindings
        .get(name)
        .copied()
        .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {}", name)))
}
