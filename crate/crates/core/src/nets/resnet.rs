//! Bottleneck residual network over spectrogram input.
//!
//! Stem: 3x3 stride-1 convolution. Four stages of bottleneck blocks with
//! channel plan base·{1,2,4,8} (expansion 4) and stride-2 downsampling in
//! both axes at each stage transition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BnLayer, ConvLayer, Fwd, NetError};
use crate::grad::{Tensor, Var};

pub const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResNetConfig {
    pub base_channels: usize,
    pub block_counts: [usize; 4],
    pub embedding_dim: usize,
    pub in_freq_bins: usize,
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            base_channels: 64,
            block_counts: [3, 4, 14, 3],
            embedding_dim: 256,
            in_freq_bins: 64,
        }
    }
}

impl ResNetConfig {
    /// Depth plan of the 74-layer network: blocks (3, 4, 14, 3).
    pub fn depth74() -> Self {
        Self::default()
    }

    /// Depth plan of the 152-layer network: blocks (3, 8, 36, 3).
    pub fn depth152() -> Self {
        ResNetConfig {
            block_counts: [3, 8, 36, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_channels == 0 {
            return Err(NetError::Config("base_channels must be >= 1".into()));
        }
        if self.block_counts.iter().any(|&b| b == 0) {
            return Err(NetError::Config(
                "every stage needs at least one block".into(),
            ));
        }
        if self.embedding_dim == 0 {
            return Err(NetError::Config("embedding_dim must be >= 1".into()));
        }
        if self.in_freq_bins == 0 {
            return Err(NetError::Config("in_freq_bins must be >= 1".into()));
        }
        Ok(())
    }

    /// Count of weighted layers (convolutions in blocks + stem + embedding
    /// head); projection shortcuts are not counted, following the usual
    /// depth-naming convention.
    pub fn weighted_layer_count(&self) -> usize {
        3 * self.block_counts.iter().sum::<usize>() + 2
    }

    pub fn out_channels(&self) -> usize {
        self.base_channels * 8 * BOTTLENECK_EXPANSION
    }

    pub fn out_freq_bins(&self) -> usize {
        // Three stride-2 transitions; each 3x3 pad-1 stride-2 conv maps
        // F -> ceil(F/2).
        let mut f = self.in_freq_bins;
        for _ in 0..3 {
            f = f.div_ceil(2);
        }
        f
    }
}

#[derive(Clone)]
pub struct Bottleneck {
    conv1: ConvLayer,
    bn1: BnLayer,
    conv2: ConvLayer,
    bn2: BnLayer,
    conv3: ConvLayer,
    bn3: BnLayer,
    down: Option<(ConvLayer, BnLayer)>,
}

impl Bottleneck {
    fn new<R: Rng>(in_c: usize, mid_c: usize, stride: usize, rng: &mut R) -> Self {
        let out_c = mid_c * BOTTLENECK_EXPANSION;
        let down = (stride != 1 || in_c != out_c).then(|| {
            (
                ConvLayer::new(in_c, out_c, 1, stride, 0, false, rng),
                BnLayer::new(out_c),
            )
        });
        Bottleneck {
            conv1: ConvLayer::new(in_c, mid_c, 1, 1, 0, false, rng),
            bn1: BnLayer::new(mid_c),
            conv2: ConvLayer::new(mid_c, mid_c, 3, stride, 1, false, rng),
            bn2: BnLayer::new(mid_c),
            conv3: ConvLayer::new(mid_c, out_c, 1, 1, 0, false, rng),
            bn3: BnLayer::new(out_c),
            down,
        }
    }

    fn forward(&mut self, cx: &mut Fwd, x: Var, path: &str) -> Result<Var, NetError> {
        let mut y = self.conv1.forward(cx, x, &format!("{path}.conv1"))?;
        y = self.bn1.forward(cx, y, &format!("{path}.bn1"))?;
        y = cx.tape.relu(y)?;
        y = self.conv2.forward(cx, y, &format!("{path}.conv2"))?;
        y = self.bn2.forward(cx, y, &format!("{path}.bn2"))?;
        y = cx.tape.relu(y)?;
        y = self.conv3.forward(cx, y, &format!("{path}.conv3"))?;
        y = self.bn3.forward(cx, y, &format!("{path}.bn3"))?;
        let shortcut = match &mut self.down {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x, &format!("{path}.down.conv"))?;
                bn.forward(cx, s, &format!("{path}.down.bn"))?
            }
            None => x,
        };
        let sum = cx.tape.add(y, shortcut)?;
        Ok(cx.tape.relu(sum)?)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&format!("{path}.conv1"), f);
        self.bn1.visit_mut(&format!("{path}.bn1"), f);
        self.conv2.visit_mut(&format!("{path}.conv2"), f);
        self.bn2.visit_mut(&format!("{path}.bn2"), f);
        self.conv3.visit_mut(&format!("{path}.conv3"), f);
        self.bn3.visit_mut(&format!("{path}.bn3"), f);
        if let Some((conv, bn)) = &mut self.down {
            conv.visit_mut(&format!("{path}.down.conv"), f);
            bn.visit_mut(&format!("{path}.down.bn"), f);
        }
    }

    fn visit_buffers_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bn1.visit_buffers_mut(&format!("{path}.bn1"), f);
        self.bn2.visit_buffers_mut(&format!("{path}.bn2"), f);
        self.bn3.visit_buffers_mut(&format!("{path}.bn3"), f);
        if let Some((_, bn)) = &mut self.down {
            bn.visit_buffers_mut(&format!("{path}.down.bn"), f);
        }
    }
}

#[derive(Clone)]
pub struct ResNet {
    stem_conv: ConvLayer,
    stem_bn: BnLayer,
    stages: Vec<Vec<Bottleneck>>,
}

impl ResNet {
    pub fn new<R: Rng>(cfg: &ResNetConfig, rng: &mut R) -> Self {
        let base = cfg.base_channels;
        let stem_conv = ConvLayer::new(1, base, 3, 1, 1, false, rng);
        let stem_bn = BnLayer::new(base);
        let mut stages = Vec::with_capacity(4);
        let mut in_c = base;
        for (si, &count) in cfg.block_counts.iter().enumerate() {
            let mid = base << si;
            let stage_stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(count);
            for bi in 0..count {
                let stride = if bi == 0 { stage_stride } else { 1 };
                blocks.push(Bottleneck::new(in_c, mid, stride, rng));
                in_c = mid * BOTTLENECK_EXPANSION;
            }
            stages.push(blocks);
        }
        ResNet {
            stem_conv,
            stem_bn,
            stages,
        }
    }

    pub fn forward(&mut self, cx: &mut Fwd, x: Var) -> Result<Var, NetError> {
        let mut y = self.stem_conv.forward(cx, x, "stem.conv")?;
        y = self.stem_bn.forward(cx, y, "stem.bn")?;
        y = cx.tape.relu(y)?;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                y = block.forward(cx, y, &format!("stage{si}.block{bi}"))?;
            }
        }
        Ok(y)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem_conv.visit_mut("stem.conv", f);
        self.stem_bn.visit_mut("stem.bn", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("stage{si}.block{bi}"), f);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.stem_bn.visit_buffers_mut("stem.bn", f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_buffers_mut(&format!("stage{si}.block{bi}"), f);
            }
        }
    }
}
