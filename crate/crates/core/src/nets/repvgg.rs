//! RepVGG backbone: every training-time block is a 3x3 conv+BN branch in
//! parallel with a 1x1 conv+BN branch and, when shapes permit, an
//! identity-BN branch, summed and passed through relu. After training the
//! branches fold into one 3x3 convolution (see [`super::reparameterize`]).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BnLayer, ConvLayer, Fwd, NetError};
use crate::grad::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepVggConfig {
    pub base_channels: usize,
    pub stage_depths: [usize; 5],
    /// Width multiplier for the first four stages.
    pub width_a: f64,
    /// Width multiplier for the last stage.
    pub width_b: f64,
    pub embedding_dim: usize,
    pub in_freq_bins: usize,
}

impl Default for RepVggConfig {
    fn default() -> Self {
        Self::b2()
    }
}

impl RepVggConfig {
    /// The B2 plan: depths (1, 4, 6, 16, 1), a = 2.5, b = 5.
    pub fn b2() -> Self {
        RepVggConfig {
            base_channels: 64,
            stage_depths: [1, 4, 6, 16, 1],
            width_a: 2.5,
            width_b: 5.0,
            embedding_dim: 256,
            in_freq_bins: 64,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.base_channels == 0 {
            return Err(NetError::Config("base_channels must be >= 1".into()));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(NetError::Config(
                "every stage needs at least one block".into(),
            ));
        }
        if self.width_a <= 0.0 || self.width_b <= 0.0 {
            return Err(NetError::Config("width multipliers must be > 0".into()));
        }
        if self.embedding_dim == 0 || self.in_freq_bins == 0 {
            return Err(NetError::Config(
                "embedding_dim and in_freq_bins must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Stage output widths: base·{min(1,a), a, 2a, 4a, 8b}, rounded.
    pub fn stage_widths(&self) -> [usize; 5] {
        let base = self.base_channels as f64;
        let w0 = (base.min(base * self.width_a)).round().max(1.0) as usize;
        let w1 = (base * self.width_a).round().max(1.0) as usize;
        let w2 = (2.0 * base * self.width_a).round().max(1.0) as usize;
        let w3 = (4.0 * base * self.width_a).round().max(1.0) as usize;
        let w4 = (8.0 * base * self.width_b).round().max(1.0) as usize;
        [w0, w1, w2, w3, w4]
    }

    pub fn out_channels(&self) -> usize {
        self.stage_widths()[4]
    }

    pub fn out_freq_bins(&self) -> usize {
        // Four stride-2 transitions between the five stages.
        let mut f = self.in_freq_bins;
        for _ in 0..4 {
            f = f.div_ceil(2);
        }
        f
    }
}

#[derive(Clone)]
pub enum RepVggBlockForm {
    MultiBranch {
        conv3: ConvLayer,
        bn3: BnLayer,
        conv1: ConvLayer,
        bn1: BnLayer,
        bn_id: Option<BnLayer>,
    },
    Fused {
        conv: ConvLayer,
    },
}

#[derive(Clone)]
pub struct RepVggBlock {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    pub form: RepVggBlockForm,
}

impl RepVggBlock {
    fn new<R: Rng>(in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let bn_id = (in_c == out_c && stride == 1).then(|| BnLayer::new(out_c));
        RepVggBlock {
            in_c,
            out_c,
            stride,
            form: RepVggBlockForm::MultiBranch {
                conv3: ConvLayer::new(in_c, out_c, 3, stride, 1, false, rng),
                bn3: BnLayer::new(out_c),
                conv1: ConvLayer::new(in_c, out_c, 1, stride, 0, false, rng),
                bn1: BnLayer::new(out_c),
                bn_id,
            },
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self.form, RepVggBlockForm::Fused { .. })
    }

    pub fn num_branches(&self) -> usize {
        match &self.form {
            RepVggBlockForm::MultiBranch { bn_id, .. } => 2 + usize::from(bn_id.is_some()),
            RepVggBlockForm::Fused { .. } => 1,
        }
    }

    fn forward(&mut self, cx: &mut Fwd, x: Var, path: &str) -> Result<Var, NetError> {
        let pre = match &mut self.form {
            RepVggBlockForm::MultiBranch {
                conv3,
                bn3,
                conv1,
                bn1,
                bn_id,
            } => {
                let a = conv3.forward(cx, x, &format!("{path}.conv3"))?;
                let a = bn3.forward(cx, a, &format!("{path}.bn3"))?;
                let b = conv1.forward(cx, x, &format!("{path}.conv1"))?;
                let b = bn1.forward(cx, b, &format!("{path}.bn1"))?;
                let mut sum = cx.tape.add(a, b)?;
                if let Some(bn) = bn_id {
                    let c = bn.forward(cx, x, &format!("{path}.bn_id"))?;
                    sum = cx.tape.add(sum, c)?;
                }
                sum
            }
            RepVggBlockForm::Fused { conv } => conv.forward(cx, x, &format!("{path}.conv"))?,
        };
        Ok(cx.tape.relu(pre)?)
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.form {
            RepVggBlockForm::MultiBranch {
                conv3,
                bn3,
                conv1,
                bn1,
                bn_id,
            } => {
                conv3.visit_mut(&format!("{path}.conv3"), f);
                bn3.visit_mut(&format!("{path}.bn3"), f);
                conv1.visit_mut(&format!("{path}.conv1"), f);
                bn1.visit_mut(&format!("{path}.bn1"), f);
                if let Some(bn) = bn_id {
                    bn.visit_mut(&format!("{path}.bn_id"), f);
                }
            }
            RepVggBlockForm::Fused { conv } => conv.visit_mut(&format!("{path}.conv"), f),
        }
    }

    fn visit_buffers_mut(&mut self, path: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let RepVggBlockForm::MultiBranch {
            bn3, bn1, bn_id, ..
        } = &mut self.form
        {
            bn3.visit_buffers_mut(&format!("{path}.bn3"), f);
            bn1.visit_buffers_mut(&format!("{path}.bn1"), f);
            if let Some(bn) = bn_id {
                bn.visit_buffers_mut(&format!("{path}.bn_id"), f);
            }
        }
    }
}

#[derive(Clone)]
pub struct RepVgg {
    pub stages: Vec<Vec<RepVggBlock>>,
}

impl RepVgg {
    pub fn new<R: Rng>(cfg: &RepVggConfig, rng: &mut R) -> Self {
        let widths = cfg.stage_widths();
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 1;
        for (si, (&depth, &width)) in cfg.stage_depths.iter().zip(&widths).enumerate() {
            let stage_stride = if si == 0 { 1 } else { 2 };
            let mut blocks = Vec::with_capacity(depth);
            for bi in 0..depth {
                let stride = if bi == 0 { stage_stride } else { 1 };
                blocks.push(RepVggBlock::new(in_c, width, stride, rng));
                in_c = width;
            }
            stages.push(blocks);
        }
        RepVgg { stages }
    }

    pub fn forward(&mut self, cx: &mut Fwd, x: Var) -> Result<Var, NetError> {
        let mut y = x;
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                y = block.forward(cx, y, &format!("stage{si}.block{bi}"))?;
            }
        }
        Ok(y)
    }

    pub fn is_fused(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.iter().all(|b| b.is_fused()))
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_mut(&format!("stage{si}.block{bi}"), f);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_buffers_mut(&format!("stage{si}.block{bi}"), f);
            }
        }
    }
}
