//! Mini 3D classifier architectures with a single-logit head.
//!
//! Both variants keep the defining mechanisms of their full-scale namesakes
//! (dense connectivity with transition layers; residual shortcuts) at a scale
//! where training runs on CPU. Layer counts and widths are config-driven so
//! larger variants stay expressible.

pub mod checkpoint;
mod densenet;
mod resnet;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Mode;
use crate::tensor::{Parameter, Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadPolicy};
pub use densenet::DenseNet;
pub use resnet::ResNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MiniDensenet,
    MiniResnet,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::MiniDensenet => "mini_densenet",
            Variant::MiniResnet => "mini_resnet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    ClassifierLogit,
    RegressorScalar,
}

impl Head {
    pub fn as_str(&self) -> &'static str {
        match self {
            Head::ClassifierLogit => "classifier_logit",
            Head::RegressorScalar => "regressor_scalar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenseParams {
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
}

impl Default for DenseParams {
    fn default() -> Self {
        DenseParams {
            growth_rate: 8,
            block_layers: vec![2, 2, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResParams {
    pub block_channels: Vec<usize>,
}

impl Default for ResParams {
    fn default() -> Self {
        ResParams {
            block_channels: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_shape: [usize; 3],
    pub stem_channels: usize,
    pub dense: DenseParams,
    pub res: ResParams,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::MiniDensenet,
            input_shape: [32, 32, 32],
            stem_channels: 16,
            dense: DenseParams::default(),
            res: ResParams::default(),
            head: Head::ClassifierLogit,
        }
    }
}

impl ModelConfig {
    /// Total spatial downsampling: a stride-2 stem, then one 2x reduction per
    /// transition (DenseNet) or per stage after the first (ResNet).
    pub fn downsample_factor(&self) -> usize {
        match self.variant {
            Variant::MiniDensenet => 2 << (self.dense.block_layers.len().saturating_sub(1)),
            Variant::MiniResnet => 2 << (self.res.block_channels.len().saturating_sub(1)),
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.stem_channels == 0 {
            return Err(Error::validation(
                format!("{prefix}.stem_channels"),
                "must be >= 1",
            ));
        }
        match self.variant {
            Variant::MiniDensenet => {
                if self.dense.growth_rate == 0 {
                    return Err(Error::validation(
                        format!("{prefix}.dense.growth_rate"),
                        "must be >= 1",
                    ));
                }
                if self.dense.block_layers.is_empty()
                    || self.dense.block_layers.iter().any(|&l| l == 0)
                {
                    return Err(Error::validation(
                        format!("{prefix}.dense.block_layers"),
                        "need at least one block, every block with >= 1 layers",
                    ));
                }
            }
            Variant::MiniResnet => {
                if self.res.block_channels.is_empty() || self.res.block_channels.contains(&0) {
                    return Err(Error::validation(
                        format!("{prefix}.res.block_channels"),
                        "need at least one stage with >= 1 channels",
                    ));
                }
            }
        }
        let factor = self.downsample_factor();
        for (i, &n) in self.input_shape.iter().enumerate() {
            if n == 0 || n % factor != 0 {
                return Err(Error::validation(
                    format!("{prefix}.input_shape[{i}]"),
                    format!("must be a positive multiple of the downsampling factor {factor}"),
                ));
            }
        }
        Ok(())
    }
}

/// Layer whose activations (and their gradients) can be retained for
/// explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapturePoint {
    /// Output of the last convolution (final conv of the last dense block /
    /// last residual stage).
    LastConv,
    /// Feature map entering global average pooling.
    Features,
}

impl CapturePoint {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "last_conv" => Ok(CapturePoint::LastConv),
            "features" => Ok(CapturePoint::Features),
            other => Err(Error::UnknownLayer(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CapturePoint::LastConv => "last_conv",
            CapturePoint::Features => "features",
        }
    }
}

/// Activation retained by an explain-mode forward, and its gradient after
/// the matching backward.
#[derive(Debug, Clone)]
pub struct Captured<T> {
    pub layer: CapturePoint,
    pub activation: Tensor<T>,
    pub gradient: Option<Tensor<T>>,
}

#[derive(Debug)]
enum Net<T> {
    Dense(DenseNet<T>),
    Res(ResNet<T>),
}

#[derive(Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    net: Net<T>,
    captured: Option<Captured<T>>,
}

impl<T: Scalar> Model<T> {
    /// Build with Kaiming-uniform conv/linear weights, BN gamma=1 beta=0.
    /// Deterministic given the rng state.
    pub fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate("model")?;
        let net = match config.variant {
            Variant::MiniDensenet => Net::Dense(DenseNet::new(config, rng)),
            Variant::MiniResnet => Net::Res(ResNet::new(config, rng)),
        };
        Ok(Model {
            config: config.clone(),
            net,
            captured: None,
        })
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let (_, c, d, h, w) = batch.dims5()?;
        let [ed, eh, ew] = self.config.input_shape;
        if c != 1 || d != ed || h != eh || w != ew {
            return Err(Error::ShapeMismatch(format!(
                "model expects (N,1,{ed},{eh},{ew}), got {:?}",
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass; logits have shape (N, 1). Saves what backward needs.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, exec: Exec) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        self.captured = None;
        let (logits, _) = match &mut self.net {
            Net::Dense(n) => n.forward(batch, mode, exec, None)?,
            Net::Res(n) => n.forward(batch, mode, exec, None)?,
        };
        Ok(logits)
    }

    /// Explain-mode forward: additionally retains the designated layer's
    /// activation, to be paired with its gradient by `backward`.
    pub fn forward_explain(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        exec: Exec,
        layer: CapturePoint,
    ) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let (logits, act) = match &mut self.net {
            Net::Dense(n) => n.forward(batch, mode, exec, Some(layer))?,
            Net::Res(n) => n.forward(batch, mode, exec, Some(layer))?,
        };
        self.captured = Some(Captured {
            layer,
            activation: act.ok_or_else(|| Error::UnknownLayer(layer.as_str().into()))?,
            gradient: None,
        });
        Ok(logits)
    }

    /// Backward from dLoss/dlogits; accumulates parameter gradients. When an
    /// explain-mode forward preceded it, the captured layer's gradient is
    /// retained too.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, exec: Exec) -> Result<()> {
        let grad_at_capture = match &mut self.net {
            Net::Dense(n) => n.backward(grad_logits, exec)?,
            Net::Res(n) => n.backward(grad_logits, exec)?,
        };
        if let Some(captured) = &mut self.captured {
            captured.gradient = grad_at_capture;
        }
        Ok(())
    }

    pub fn captured(&self) -> Option<&Captured<T>> {
        self.captured.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    /// Visit trainable parameters in a fixed, documented order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        match &self.net {
            Net::Dense(n) => n.visit_params(f),
            Net::Res(n) => n.visit_params(f),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        match &mut self.net {
            Net::Dense(n) => n.visit_params_mut(f),
            Net::Res(n) => n.visit_params_mut(f),
        }
    }

    /// Non-trainable state (batch-norm running stats), checkpointed alongside
    /// the parameters.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match &self.net {
            Net::Dense(n) => n.visit_buffers(f),
            Net::Res(n) => n.visit_buffers(f),
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.net {
            Net::Dense(n) => n.visit_buffers_mut(f),
            Net::Res(n) => n.visit_buffers_mut(f),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut count = 0;
        self.visit_params(&mut |_, p| count += p.value.numel());
        count
    }

    /// Fingerprint of the architecture-defining config fields.
    pub fn config_hash(&self) -> String {
        let canon = serde_json::to_string(&self.config).unwrap_or_default();
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

/// FNV-1a, used as a stable non-cryptographic config fingerprint.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// True for parameters restored by backbone-only checkpoint loading.
pub fn is_backbone_param(name: &str) -> bool {
    !name.starts_with("head.")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn downsample_factor_and_validation() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.downsample_factor(), 8);
        assert!(cfg.validate("model").is_ok());
        let bad = ModelConfig {
            input_shape: [30, 32, 32],
            ..Default::default()
        };
        assert!(bad.validate("model").is_err());
    }

    #[test]
    fn logit_shape_densenet() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32, 32]);
        let y = model.forward(&x, Mode::Eval, Exec::default()).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn logit_shape_resnet() {
        let cfg = ModelConfig {
            variant: Variant::MiniResnet,
            ..Default::default()
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = Model::<f32>::build(&cfg, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 1, 32, 32, 32]);
        let y = model.forward(&x, Mode::Eval, Exec::default()).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        let mut r1 = ChaCha12Rng::seed_from_u64(5);
        let mut r2 = ChaCha12Rng::seed_from_u64(5);
        let a = Model::<f32>::build(&cfg, &mut r1).unwrap();
        let b = Model::<f32>::build(&cfg, &mut r2).unwrap();
        let mut equal = true;
        let mut names_b = Vec::new();
        b.visit_params(&mut |n, p| names_b.push((n.to_string(), p.value.clone())));
        let mut i = 0;
        a.visit_params(&mut |n, p| {
            if names_b[i].0 != n || names_b[i].1.data() != p.value.data() {
                equal = false;
            }
            i += 1;
        });
        assert!(equal);
    }

    #[test]
    fn documented_default_parameter_counts() {
        // regression guard: stem 432; per dense layer bn(2c)+27*8*c; per
        // transition bn(2c)+c*c/2; head c_final+1
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let dense = Model::<f32>::build(&ModelConfig::default(), &mut rng).unwrap();
        assert_eq!(dense.param_count(), 27_777);
        let res = Model::<f32>::build(
            &ModelConfig {
                variant: Variant::MiniResnet,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(res.param_count(), 224_913);
    }

    #[test]
    fn regressor_head_differs_only_in_tag() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let c = Model::<f32>::build(&ModelConfig::default(), &mut rng).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let r = Model::<f32>::build(
            &ModelConfig {
                head: Head::RegressorScalar,
                ..Default::default()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.param_count(), r.param_count());
        let x = Tensor::<f32>::full(&[1, 1, 32, 32, 32], 0.25);
        let mut c = c;
        let mut r = r;
        let yc = c.forward(&x, Mode::Eval, Exec::default()).unwrap();
        let yr = r.forward(&x, Mode::Eval, Exec::default()).unwrap();
        assert_eq!(yc.data(), yr.data());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut model = Model::<f32>::build(&ModelConfig::default(), &mut rng).unwrap();
        let x = Tensor::<f32>::full(&[1, 1, 32, 32, 32], 0.5);
        let y1 = model.forward(&x, Mode::Eval, Exec::default()).unwrap();
        let y2 = model.forward(&x, Mode::Eval, Exec::default()).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn explain_capture_shapes_match() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut model = Model::<f32>::build(&ModelConfig::default(), &mut rng).unwrap();
        let x = Tensor::<f32>::full(&[1, 1, 32, 32, 32], 0.5);
        model
            .forward_explain(&x, Mode::Eval, Exec::default(), CapturePoint::LastConv)
            .unwrap();
        let g = Tensor::from_vec(&[1, 1], vec![1.0f32]).unwrap();
        model.backward(&g, Exec::default()).unwrap();
        let cap = model.captured().unwrap();
        let grad = cap.gradient.as_ref().expect("gradient retained");
        assert_eq!(cap.activation.shape(), grad.shape());
        // default densenet: growth_rate channels at input/8 resolution
        assert_eq!(cap.activation.shape(), &[1, 8, 4, 4, 4]);
    }
}
