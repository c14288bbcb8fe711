//! Mini 3D DenseNet: stride-2 stem conv, dense blocks of BN-ReLU-conv(k=3)
//! layers growing the channel count, transition layers (BN-ReLU-1x1x1 conv
//! halving channels, 2x average pool), global average pooling and a linear
//! head.

use super::{CapturePoint, ModelConfig};
use crate::error::Result;
use crate::exec::Exec;
use crate::nn::{
    avgpool3d_backward, avgpool3d_forward, channel_concat, concat_backward,
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, BatchNorm3d,
    BnSaved, Conv3d, Conv3dSaved, Linear, LinearSaved, Mode,
};
use crate::tensor::{Parameter, Scalar, Tensor};
use rand::Rng;

#[derive(Debug)]
struct DenseLayer<T> {
    bn: BatchNorm3d<T>,
    conv: Conv3d<T>,
}

#[derive(Debug)]
struct Transition<T> {
    bn: BatchNorm3d<T>,
    conv: Conv3d<T>,
}

#[derive(Debug)]
pub struct DenseNet<T> {
    stem: Conv3d<T>,
    blocks: Vec<Vec<DenseLayer<T>>>,
    transitions: Vec<Transition<T>>,
    head: Linear<T>,
    saved: Option<Saved<T>>,
}

struct LayerSaved<T> {
    bn: BnSaved<T>,
    conv: Conv3dSaved<T>,
    in_channels: usize,
}

struct TransSaved<T> {
    bn: BnSaved<T>,
    conv: Conv3dSaved<T>,
    pre_pool_shape: Vec<usize>,
}

struct Saved<T> {
    stem: Conv3dSaved<T>,
    blocks: Vec<Vec<LayerSaved<T>>>,
    transitions: Vec<TransSaved<T>>,
    features_shape: Vec<usize>,
    head: LinearSaved<T>,
    capture: Option<CapturePoint>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Saved<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Saved").finish_non_exhaustive()
    }
}

impl<T: Scalar> DenseNet<T> {
    pub fn new<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        let growth = config.dense.growth_rate;
        let stem = Conv3d::new(1, config.stem_channels, 3, 2, 1, false, rng);
        let mut channels = config.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let n_blocks = config.dense.block_layers.len();
        for (b, &layers) in config.dense.block_layers.iter().enumerate() {
            let mut block = Vec::new();
            for _ in 0..layers {
                block.push(DenseLayer {
                    bn: BatchNorm3d::new(channels),
                    conv: Conv3d::new(channels, growth, 3, 1, 1, false, rng),
                });
                channels += growth;
            }
            blocks.push(block);
            if b + 1 < n_blocks {
                let out = channels / 2;
                transitions.push(Transition {
                    bn: BatchNorm3d::new(channels),
                    conv: Conv3d::new(channels, out, 1, 1, 0, false, rng),
                });
                channels = out;
            }
        }
        let head = Linear::new(channels, 1, rng);
        DenseNet {
            stem,
            blocks,
            transitions,
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
        let (mut x, stem_saved) = self.stem.forward(batch, exec)?;
        let mut blocks_saved = Vec::with_capacity(self.blocks.len());
        let mut trans_saved = Vec::with_capacity(self.transitions.len());
        let mut captured = None;
        let n_blocks = self.blocks.len();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let mut layer_saves = Vec::with_capacity(block.len());
            let n_layers = block.len();
            for (l, layer) in block.iter_mut().enumerate() {
                let in_channels = x.shape()[1];
                let (bn_out, bn_saved) = layer.bn.forward(&x, mode, exec)?;
                let act = relu_forward(&bn_out);
                let (new_features, conv_saved) = layer.conv.forward(&act, exec)?;
                if capture == Some(CapturePoint::LastConv)
                    && b + 1 == n_blocks
                    && l + 1 == n_layers
                {
                    captured = Some(new_features.clone());
                }
                x = channel_concat(&x, &new_features)?;
                layer_saves.push(LayerSaved {
                    bn: bn_saved,
                    conv: conv_saved,
                    in_channels,
                });
            }
            blocks_saved.push(layer_saves);
            if b < self.transitions.len() {
                let t = &mut self.transitions[b];
                let (bn_out, bn_saved) = t.bn.forward(&x, mode, exec)?;
                let act = relu_forward(&bn_out);
                let (conv_out, conv_saved) = t.conv.forward(&act, exec)?;
                let pre_pool_shape = conv_out.shape().to_vec();
                x = avgpool3d_forward(&conv_out, exec)?;
                trans_saved.push(TransSaved {
                    bn: bn_saved,
                    conv: conv_saved,
                    pre_pool_shape,
                });
            }
        }
        if capture == Some(CapturePoint::Features) {
            captured = Some(x.clone());
        }
        let features_shape = x.shape().to_vec();
        let pooled = global_avg_pool_forward(&x)?;
        let (logits, head_saved) = self.head.forward(&pooled)?;
        self.saved = Some(Saved {
            stem: stem_saved,
            blocks: blocks_saved,
            transitions: trans_saved,
            features_shape,
            head: head_saved,
            capture,
        });
        Ok((logits, captured))
    }

    /// Returns the gradient at the captured layer when explain mode was on.
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

        let n_blocks = self.blocks.len();
        for b in (0..n_blocks).rev() {
            if b < self.transitions.len() {
                let t = &mut self.transitions[b];
                let ts = &saved.transitions[b];
                let grad_pre_pool = avgpool3d_backward(&ts.pre_pool_shape, &grad, exec)?;
                let grad_act = t.conv.backward(&ts.conv, &grad_pre_pool, exec)?;
                let grad_bn = relu_backward(ts.conv.input(), &grad_act)?;
                grad = t.bn.backward(&ts.bn, &grad_bn, exec)?;
            }
            let block = &mut self.blocks[b];
            let n_layers = block.len();
            for l in (0..n_layers).rev() {
                let layer = &mut block[l];
                let ls = &saved.blocks[b][l];
                let (grad_prev, grad_new) = concat_backward(&grad, ls.in_channels)?;
                if saved.capture == Some(CapturePoint::LastConv)
                    && b + 1 == n_blocks
                    && l + 1 == n_layers
                {
                    captured_grad = Some(grad_new.clone());
                }
                let grad_act = layer.conv.backward(&ls.conv, &grad_new, exec)?;
                let grad_bn = relu_backward(ls.conv.input(), &grad_act)?;
                let grad_through = layer.bn.backward(&ls.bn, &grad_bn, exec)?;
                grad = grad_prev;
                grad.add_assign(&grad_through)?;
            }
        }
        self.stem.backward(&saved.stem, &grad, exec)?;
        Ok(captured_grad)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        f("stem.weight", &self.stem.weight);
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                f(&format!("blocks.{b}.{l}.bn.gamma"), &layer.bn.gamma);
                f(&format!("blocks.{b}.{l}.bn.beta"), &layer.bn.beta);
                f(&format!("blocks.{b}.{l}.conv.weight"), &layer.conv.weight);
            }
        }
        for (t, trans) in self.transitions.iter().enumerate() {
            f(&format!("transitions.{t}.bn.gamma"), &trans.bn.gamma);
            f(&format!("transitions.{t}.bn.beta"), &trans.bn.beta);
            f(&format!("transitions.{t}.conv.weight"), &trans.conv.weight);
        }
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        f("stem.weight", &mut self.stem.weight);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (l, layer) in block.iter_mut().enumerate() {
                f(&format!("blocks.{b}.{l}.bn.gamma"), &mut layer.bn.gamma);
                f(&format!("blocks.{b}.{l}.bn.beta"), &mut layer.bn.beta);
                f(
                    &format!("blocks.{b}.{l}.conv.weight"),
                    &mut layer.conv.weight,
                );
            }
        }
        for (t, trans) in self.transitions.iter_mut().enumerate() {
            f(&format!("transitions.{t}.bn.gamma"), &mut trans.bn.gamma);
            f(&format!("transitions.{t}.bn.beta"), &mut trans.bn.beta);
            f(
                &format!("transitions.{t}.conv.weight"),
                &mut trans.conv.weight,
            );
        }
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (b, block) in self.blocks.iter().enumerate() {
            for (l, layer) in block.iter().enumerate() {
                f(
                    &format!("blocks.{b}.{l}.bn.running_mean"),
                    &layer.bn.running_mean,
                );
                f(
                    &format!("blocks.{b}.{l}.bn.running_var"),
                    &layer.bn.running_var,
                );
            }
        }
        for (t, trans) in self.transitions.iter().enumerate() {
            f(
                &format!("transitions.{t}.bn.running_mean"),
                &trans.bn.running_mean,
            );
            f(
                &format!("transitions.{t}.bn.running_var"),
                &trans.bn.running_var,
            );
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (l, layer) in block.iter_mut().enumerate() {
                f(
                    &format!("blocks.{b}.{l}.bn.running_mean"),
                    &mut layer.bn.running_mean,
                );
                f(
                    &format!("blocks.{b}.{l}.bn.running_var"),
                    &mut layer.bn.running_var,
                );
            }
        }
        for (t, trans) in self.transitions.iter_mut().enumerate() {
            f(
                &format!("transitions.{t}.bn.running_mean"),
                &mut trans.bn.running_mean,
            );
            f(
                &format!("transitions.{t}.bn.running_var"),
                &mut trans.bn.running_var,
            );
        }
    }
}
