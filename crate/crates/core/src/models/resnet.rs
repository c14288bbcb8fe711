//! Mini 3D ResNet: stride-2 stem (conv-BN-ReLU), one two-conv residual block
//! per stage with identity or projection shortcuts, global average pooling
//! and a linear head. Stages after the first downsample by 2.

use super::{CapturePoint, ModelConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::nn::{
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, residual_add,
    BatchNorm3d, BnSaved, Conv3d, Conv3dSaved, Linear, LinearSaved, Mode,
};
use crate::tensor::{Parameter, Scalar, Tensor};
use rand::Rng;

#[derive(Debug)]
struct Projection<T> {
    conv: Conv3d<T>,
    bn: BatchNorm3d<T>,
}

#[derive(Debug)]
struct ResBlock<T> {
    conv1: Conv3d<T>,
    bn1: BatchNorm3d<T>,
    conv2: Conv3d<T>,
    bn2: BatchNorm3d<T>,
    proj: Option<Projection<T>>,
}

#[derive(Debug)]
pub struct ResNet<T> {
    stem_conv: Conv3d<T>,
    stem_bn: BatchNorm3d<T>,
    stages: Vec<ResBlock<T>>,
    head: Linear<T>,
    saved: Option<Saved<T>>,
}

struct BlockSaved<T> {
    conv1: Conv3dSaved<T>,
    bn1: BnSaved<T>,
    relu1_out: Tensor<T>,
    conv2: Conv3dSaved<T>,
    bn2: BnSaved<T>,
    proj: Option<(Conv3dSaved<T>, BnSaved<T>)>,
    block_out: Tensor<T>,
}

struct Saved<T> {
    stem_conv: Conv3dSaved<T>,
    stem_bn: BnSaved<T>,
    stem_relu_out: Tensor<T>,
    blocks: Vec<BlockSaved<T>>,
    features_shape: Vec<usize>,
    head: LinearSaved<T>,
    capture: Option<CapturePoint>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Saved<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Saved").finish_non_exhaustive()
    }
}

impl<T: Scalar> ResNet<T> {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let stem_out = config.stem_channels;
        let stem_conv = Conv3d::new(1, stem_out, 3, 2, 1, false, rng);
        let stem_bn = BatchNorm3d::new(stem_out);
        let mut stages = Vec::new();
        let mut in_ch = stem_out;
        for (s, &out_ch) in config.res.block_channels.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let needs_proj = stride != 1 || in_ch != out_ch;
            stages.push(ResBlock {
                conv1: Conv3d::new(in_ch, out_ch, 3, stride, 1, false, rng),
                bn1: BatchNorm3d::new(out_ch),
                conv2: Conv3d::new(out_ch, out_ch, 3, 1, 1, false, rng),
                bn2: BatchNorm3d::new(out_ch),
                proj: needs_proj.then(|| Projection {
                    conv: Conv3d::new(in_ch, out_ch, 1, stride, 0, false, rng),
                    bn: BatchNorm3d::new(out_ch),
                }),
            });
            in_ch = out_ch;
        }
        let head = Linear::new(in_ch, 1, rng);
        ResNet {
            stem_conv,
            stem_bn,
            stages,
            head,
            saved: None,
        }
    }

    pub fn forward(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        exec: Exec,
        capture: Option<CapturePoint>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let (stem_out, stem_conv_saved) = self.stem_conv.forward(batch, exec)?;
        let (stem_norm, stem_bn_saved) = self.stem_bn.forward(&stem_out, mode, exec)?;
        let mut x = relu_forward(&stem_norm);
        let stem_relu_out = x.clone();

        let mut blocks_saved = Vec::with_capacity(self.stages.len());
        let mut captured = None;
        let n_stages = self.stages.len();
        for (s, block) in self.stages.iter_mut().enumerate() {
            let input = x.clone();
            let (c1, conv1_saved) = block.conv1.forward(&x, exec)?;
            let (b1, bn1_saved) = block.bn1.forward(&c1, mode, exec)?;
            let r1 = relu_forward(&b1);
            let (c2, conv2_saved) = block.conv2.forward(&r1, exec)?;
            let is_capture_block = capture == Some(CapturePoint::LastConv) && s + 1 == n_stages;
            if is_capture_block {
                captured = Some(c2.clone());
            }
            let (b2, bn2_saved) = block.bn2.forward(&c2, mode, exec)?;
            let (shortcut, proj_saved) = match &mut block.proj {
                Some(p) => {
                    let (pc, pc_saved) = p.conv.forward(&input, exec)?;
                    let (pb, pb_saved) = p.bn.forward(&pc, mode, exec)?;
                    (pb, Some((pc_saved, pb_saved)))
                }
                None => (input.clone(), None),
            };
            let sum = residual_add(&b2, &shortcut)?;
            x = relu_forward(&sum);
            blocks_saved.push(BlockSaved {
                conv1: conv1_saved,
                bn1: bn1_saved,
                relu1_out: r1,
                conv2: conv2_saved,
                bn2: bn2_saved,
                proj: proj_saved,
                block_out: x.clone(),
            });
        }
        if capture == Some(CapturePoint::Features) {
            captured = Some(x.clone());
        }
        let features_shape = x.shape().to_vec();
        let pooled = global_avg_pool_forward(&x)?;
        let (logits, head_saved) = self.head.forward(&pooled)?;
        self.saved = Some(Saved {
            stem_conv: stem_conv_saved,
            stem_bn: stem_bn_saved,
            stem_relu_out,
            blocks: blocks_saved,
            features_shape,
            head: head_saved,
            capture,
        });
        Ok((logits, captured))
    }

    pub fn backward(&mut self, grad_logits: &Tensor<T>, exec: Exec) -> Result<Option<Tensor<T>>> {
        let saved = self.saved.take().ok_or_else(|| {
            crate::error::Error::ShapeMismatch("backward called without forward".into())
        })?;
        let grad_pooled = self.head.backward(&saved.head, grad_logits)?;
        let mut grad = global_avg_pool_backward(&saved.features_shape, &grad_pooled)?;
        let mut captured_grad = if saved.capture == Some(CapturePoint::Features) {
            Some(grad.clone())
        } else {
            None
        };

        let n_stages = self.stages.len();
        for s in (0..n_stages).rev() {
            let block = &mut self.stages[s];
            let bs = &saved.blocks[s];
            // through the output ReLU: gradient of the residual sum
            let grad_sum = relu_backward(&bs.block_out, &grad)?;
            // main branch
            let grad_c2 = block.bn2.backward(&bs.bn2, &grad_sum, exec)?;
            if saved.capture == Some(CapturePoint::LastConv) && s + 1 == n_stages {
                captured_grad = Some(grad_c2.clone());
            }
            let grad_r1 = block.conv2.backward(&bs.conv2, &grad_c2, exec)?;
            let grad_b1 = relu_backward(&bs.relu1_out, &grad_r1)?;
            let grad_c1 = block.bn1.backward(&bs.bn1, &grad_b1, exec)?;
            let mut grad_in = block.conv1.backward(&bs.conv1, &grad_c1, exec)?;
            // shortcut branch
            match (&mut block.proj, &bs.proj) {
                (Some(p), Some((pc_saved, pb_saved))) => {
                    let grad_pc = p.bn.backward(pb_saved, &grad_sum, exec)?;
                    let grad_sc = p.conv.backward(pc_saved, &grad_pc, exec)?;
                    grad_in.add_assign(&grad_sc)?;
                }
                (None, None) => {
                    grad_in.add_assign(&grad_sum)?;
                }
                _ => unreachable!("projection presence is fixed at construction"),
            }
            grad = grad_in;
        }
        let grad_bn = relu_backward(&saved.stem_relu_out, &grad)?;
        let grad_conv = self.stem_bn.backward(&saved.stem_bn, &grad_bn, exec)?;
        self.stem_conv.backward(&saved.stem_conv, &grad_conv, exec)?;
        Ok(captured_grad)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        f("stem.conv.weight", &self.stem_conv.weight);
        f("stem.bn.gamma", &self.stem_bn.gamma);
        f("stem.bn.beta", &self.stem_bn.beta);
        for (s, block) in self.stages.iter().enumerate() {
            f(&format!("stages.{s}.conv1.weight"), &block.conv1.weight);
            f(&format!("stages.{s}.bn1.gamma"), &block.bn1.gamma);
            f(&format!("stages.{s}.bn1.beta"), &block.bn1.beta);
            f(&format!("stages.{s}.conv2.weight"), &block.conv2.weight);
            f(&format!("stages.{s}.bn2.gamma"), &block.bn2.gamma);
            f(&format!("stages.{s}.bn2.beta"), &block.bn2.beta);
            if let Some(p) = &block.proj {
                f(&format!("stages.{s}.proj.conv.weight"), &p.conv.weight);
                f(&format!("stages.{s}.proj.bn.gamma"), &p.bn.gamma);
                f(&format!("stages.{s}.proj.bn.beta"), &p.bn.beta);
            }
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f("stem.conv.weight", &mut self.stem_conv.weight);
        f("stem.bn.gamma", &mut self.stem_bn.gamma);
        f("stem.bn.beta", &mut self.stem_bn.beta);
        for (s, block) in self.stages.iter_mut().enumerate() {
            f(&format!("stages.{s}.conv1.weight"), &mut block.conv1.weight);
            f(&format!("stages.{s}.bn1.gamma"), &mut block.bn1.gamma);
            f(&format!("stages.{s}.bn1.beta"), &mut block.bn1.beta);
            f(&format!("stages.{s}.conv2.weight"), &mut block.conv2.weight);
            f(&format!("stages.{s}.bn2.gamma"), &mut block.bn2.gamma);
            f(&format!("stages.{s}.bn2.beta"), &mut block.bn2.beta);
            if let Some(p) = &mut block.proj {
                f(&format!("stages.{s}.proj.conv.weight"), &mut p.conv.weight);
                f(&format!("stages.{s}.proj.bn.gamma"), &mut p.bn.gamma);
                f(&format!("stages.{s}.proj.bn.beta"), &mut p.bn.beta);
            }
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("stem.bn.running_mean", &self.stem_bn.running_mean);
        f("stem.bn.running_var", &self.stem_bn.running_var);
        for (s, block) in self.stages.iter().enumerate() {
            f(&format!("stages.{s}.bn1.running_mean"), &block.bn1.running_mean);
            f(&format!("stages.{s}.bn1.running_var"), &block.bn1.running_var);
            f(&format!("stages.{s}.bn2.running_mean"), &block.bn2.running_mean);
            f(&format!("stages.{s}.bn2.running_var"), &block.bn2.running_var);
            if let Some(p) = &block.proj {
                f(&format!("stages.{s}.proj.bn.running_mean"), &p.bn.running_mean);
                f(&format!("stages.{s}.proj.bn.running_var"), &p.bn.running_var);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("stem.bn.running_mean", &mut self.stem_bn.running_mean);
        f("stem.bn.running_var", &mut self.stem_bn.running_var);
        for (s, block) in self.stages.iter_mut().enumerate() {
            f(
                &format!("stages.{s}.bn1.running_mean"),
                &mut block.bn1.running_mean,
            );
            f(
                &format!("stages.{s}.bn1.running_var"),
                &mut block.bn1.running_var,
            );
            f(
                &format!("stages.{s}.bn2.running_mean"),
                &mut block.bn2.running_mean,
            );
            f(
                &format!("stages.{s}.bn2.running_var"),
                &mut block.bn2.running_var,
            );
            if let Some(p) = &mut block.proj {
                f(
                    &format!("stages.{s}.proj.bn.running_mean"),
                    &mut p.bn.running_mean,
                );
                f(
                    &format!("stages.{s}.proj.bn.running_var"),
                    &mut p.bn.running_var,
                );
            }
        }
    }
}
