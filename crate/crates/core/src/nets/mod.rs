//! Embedding backbones: bottleneck ResNet and RepVGG over 1-channel
//! (frequency × time) log-mel input, global statistics pooling and a linear
//! embedding head.

mod repvgg;
mod reparam;
mod resnet;

pub use repvgg::{RepVgg, RepVggBlock, RepVggBlockForm, RepVggConfig};
pub use reparam::reparameterize;
pub use resnet::{Bottleneck, ResNet, ResNetConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Tape, Tensor, Var};

#[derive(Error, Debug)]
pub enum NetError {
    #[error("net config error: {0}")]
    Config(String),
    #[error("net state error: {0}")]
    State(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape plus the (name, var) pairs of every leased
/// parameter, used to route gradients back to the owning tensors.
pub struct Fwd<'t> {
    pub tape: &'t mut Tape,
    pub train: bool,
    pub params: Vec<(String, Var)>,
}

impl<'t> Fwd<'t> {
    pub fn new(tape: &'t mut Tape, train: bool) -> Self {
        Fwd {
            tape,
            train,
            params: Vec::new(),
        }
    }

    fn lease(&mut self, name: String, t: &Tensor) -> Result<Var, NetError> {
        let v = self.tape.leaf(t.clone(), self.train)?;
        if self.train {
            self.params.push((name, v));
        }
        Ok(v)
    }
}

pub struct ConvLayer {
    pub weight: Tensor, // [O,C,kH,kW]
    pub bias: Option<Tensor>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Clone for ConvLayer {
    fn clone(&self) -> Self {
        ConvLayer {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl ConvLayer {
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        ConvLayer {
            weight: Tensor::he_normal(&[out_c, in_c, kernel, kernel], fan_in, rng),
            bias: with_bias.then(|| Tensor::zeros(&[out_c])),
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn forward(&self, cx: &mut Fwd, x: Var, path: &str) -> Result<Var, NetError> {
        let w = cx.lease(format!("{path}.weight"), &self.weight)?;
        let b = match &self.bias {
            Some(bias) => Some(cx.lease(format!("{path}.bias"), bias)?),
            None => None,
        };
        Ok(cx.tape.conv2d(x, w, b, self.stride, self.pad)?)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{path}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{path}.bias"), b);
        }
    }
}

#[derive(Clone)]
pub struct BnLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BnLayer {
    pub fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn forward(&mut self, cx: &mut Fwd, x: Var, path: &str) -> Result<Var, NetError> {
        let g = cx.lease(format!("{path}.gamma"), &self.gamma)?;
        let b = cx.lease(format!("{path}.beta"), &self.beta)?;
        if cx.train {
            let (y, stats) = cx.tape.batchnorm_train(x, g, b, self.eps)?;
            let m = self.momentum;
            for (r, bv) in self
                .running_mean
                .data_mut()
                .iter_mut()
                .zip(stats.mean.data())
            {
                *r = (1.0 - m) * *r + m * bv;
            }
            for (r, bv) in self
                .running_var
                .data_mut()
                .iter_mut()
                .zip(stats.var.data())
            {
                *r = (1.0 - m) * *r + m * bv;
            }
            Ok(y)
        } else {
            Ok(cx.tape.batchnorm_eval(
                x,
                g,
                b,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )?)
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{path}.gamma"), &mut self.gamma);
        f(format!("{path}.beta"), &mut self.beta);
    }

    fn visit_buffers_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{path}.running_mean"), &mut self.running_mean);
        f(format!("{path}.running_var"), &mut self.running_var);
    }
}

#[derive(Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // [K,D]
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, with_bias: bool, rng: &mut R) -> Self {
        LinearLayer {
            weight: Tensor::he_normal(&[out_dim, in_dim], in_dim, rng),
            bias: with_bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    fn forward(&self, cx: &mut Fwd, x: Var, path: &str) -> Result<Var, NetError> {
        let w = cx.lease(format!("{path}.weight"), &self.weight)?;
        let b = match &self.bias {
            Some(bias) => Some(cx.lease(format!("{path}.bias"), bias)?),
            None => None,
        };
        Ok(cx.tape.linear(x, w, b)?)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{path}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{path}.bias"), b);
        }
    }
}

/// Architecture description, serialized into checkpoints and run configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase", deny_unknown_fields)]
pub enum NetConfig {
    Resnet(ResNetConfig),
    Repvgg(RepVggConfig),
}

impl NetConfig {
    pub fn embedding_dim(&self) -> usize {
        match self {
            NetConfig::Resnet(c) => c.embedding_dim,
            NetConfig::Repvgg(c) => c.embedding_dim,
        }
    }

    pub fn in_freq_bins(&self) -> usize {
        match self {
            NetConfig::Resnet(c) => c.in_freq_bins,
            NetConfig::Repvgg(c) => c.in_freq_bins,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        match self {
            NetConfig::Resnet(c) => c.validate(),
            NetConfig::Repvgg(c) => c.validate(),
        }
    }
}

pub enum Backbone {
    ResNet(ResNet),
    RepVgg(RepVgg),
}

impl Clone for Backbone {
    fn clone(&self) -> Self {
        match self {
            Backbone::ResNet(n) => Backbone::ResNet(n.clone()),
            Backbone::RepVgg(n) => Backbone::RepVgg(n.clone()),
        }
    }
}

/// Backbone plus embedding head, with an explicit train/eval mode.
#[derive(Clone)]
pub struct BackboneModel {
    pub backbone: Backbone,
    pub head: LinearLayer,
    pub config: NetConfig,
    pub mode: Mode,
}

/// Result of a batched forward pass up to the embedding layer.
pub struct ForwardOutput {
    pub embeddings: Var,
    pub params: Vec<(String, Var)>,
}

impl BackboneModel {
    /// Build a seeded model from an architecture config.
    pub fn build(config: &NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let backbone = match config {
            NetConfig::Resnet(c) => Backbone::ResNet(ResNet::new(c, &mut rng)),
            NetConfig::Repvgg(c) => Backbone::RepVgg(RepVgg::new(c, &mut rng)),
        };
        let (c_out, f_out) = match config {
            NetConfig::Resnet(c) => (c.out_channels(), c.out_freq_bins()),
            NetConfig::Repvgg(c) => (c.out_channels(), c.out_freq_bins()),
        };
        let head = LinearLayer::new(2 * c_out * f_out, config.embedding_dim(), true, &mut rng);
        Ok(BackboneModel {
            backbone,
            head,
            config: config.clone(),
            mode: Mode::Train,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    /// Smallest number of input frames the stride schedule supports.
    pub fn min_frames(&self) -> usize {
        match &self.config {
            NetConfig::Resnet(_) => 8,
            NetConfig::Repvgg(_) => 16,
        }
    }

    /// Frame-level feature map `[N, C, F, T']` for input `[N, 1, F0, T]`.
    pub fn forward_frames(&mut self, cx: &mut Fwd, input: &Tensor) -> Result<Var, NetError> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(NetError::Config(format!(
                "expected input [N,1,F,T], got {:?}",
                shape
            )));
        }
        if shape[2] != self.config.in_freq_bins() {
            return Err(NetError::Config(format!(
                "model built for {} frequency bins, input has {}",
                self.config.in_freq_bins(),
                shape[2]
            )));
        }
        if shape[3] < self.min_frames() {
            return Err(NetError::Config(format!(
                "input of {} frames is below the stride minimum {}",
                shape[3],
                self.min_frames()
            )));
        }
        let x = cx.tape.leaf(input.clone(), false)?;
        match &mut self.backbone {
            Backbone::ResNet(n) => n.forward(cx, x),
            Backbone::RepVgg(n) => n.forward(cx, x),
        }
    }

    /// Full forward: frames → statistics pooling → embedding head. The
    /// embeddings are not length-normalized here; the margin loss and the
    /// scorer normalize where they need to.
    pub fn forward_embeddings(
        &mut self,
        tape: &mut Tape,
        input: &Tensor,
    ) -> Result<ForwardOutput, NetError> {
        let train = self.mode == Mode::Train;
        let mut cx = Fwd::new(tape, train);
        let frames = self.forward_frames(&mut cx, input)?;
        let pooled = cx.tape.gsp_pool(frames)?;
        let embeddings = self.head.forward(&mut cx, pooled, "head")?;
        Ok(ForwardOutput {
            embeddings,
            params: cx.params,
        })
    }

    /// Visit every trainable parameter in a stable order.
    pub fn for_each_param(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.backbone {
            Backbone::ResNet(n) => n.visit_mut(f),
            Backbone::RepVgg(n) => n.visit_mut(f),
        }
        self.head.visit_mut("head", f);
    }

    /// Visit non-trainable buffers (batch-norm running statistics).
    pub fn for_each_buffer(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.backbone {
            Backbone::ResNet(n) => n.visit_buffers_mut(f),
            Backbone::RepVgg(n) => n.visit_buffers_mut(f),
        }
    }

    pub fn num_params(&mut self) -> usize {
        let mut total = 0;
        self.for_each_param(&mut |_, t| total += t.len());
        total
    }

    /// Overwrite every parameter and buffer from a name→tensor map; fails
    /// if anything is missing or has the wrong shape.
    pub fn load_state(
        &mut self,
        tensors: &std::collections::BTreeMap<String, Tensor>,
    ) -> Result<(), NetError> {
        let mut problems: Vec<String> = Vec::new();
        let mut apply = |name: String, t: &mut Tensor| match tensors.get(&name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => problems.push(format!(
                "{name}: checkpoint shape {:?}, model expects {:?}",
                src.shape(),
                t.shape()
            )),
            None => problems.push(format!("{name}: missing from checkpoint")),
        };
        self.for_each_param(&mut apply);
        self.for_each_buffer(&mut apply);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(NetError::Config(format!(
                "checkpoint does not match model: {}",
                problems.join("; ")
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_head_passes_pooled_vector_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = LinearLayer::new(4, 4, true, &mut rng);
        head.weight = Tensor::zeros(&[4, 4]);
        for k in 0..4 {
            head.weight.data_mut()[k * 4 + k] = 1.0;
        }
        let pooled = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut cx = Fwd::new(&mut tape, false);
        let x = cx.tape.leaf(pooled.clone(), false).unwrap();
        let y = head.forward(&mut cx, x, "head").unwrap();
        assert_eq!(tape.value(y).data(), pooled.data());
    }

    #[test]
    fn zero_pooled_vector_with_zero_bias_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = LinearLayer::new(6, 3, true, &mut rng);
        let pooled = Tensor::zeros(&[1, 6]);
        let mut tape = Tape::new();
        let mut cx = Fwd::new(&mut tape, false);
        let x = cx.tape.leaf(pooled, false).unwrap();
        let y = head.forward(&mut cx, x, "head").unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
