//! Structural re-parameterization: fold each multi-branch RepVGG block into
//! a single 3x3 convolution with bias.
//!
//! Per branch, conv+BN fuses to W' = W·γ/σ, b' = β − μ·γ/σ with
//! σ = sqrt(running_var + ε). The 1x1 kernel is zero-padded into the 3x3
//! center, the identity branch becomes a per-channel center-one kernel, and
//! the fused branches sum.

use super::{Backbone, BackboneModel, BnLayer, ConvLayer, Mode, NetError, RepVggBlockForm};
use crate::grad::Tensor;

struct FusedBranch {
    weight: Vec<f64>, // [O,C,3,3] flattened
    bias: Vec<f64>,
}

fn fuse_conv_bn(weight: &Tensor, kernel: usize, bn: &BnLayer) -> FusedBranch {
    let out_c = weight.shape()[0];
    let in_c = weight.shape()[1];
    let mut fused = vec![0.0; out_c * in_c * 9];
    let mut bias = vec![0.0; out_c];
    let offset = (3 - kernel) / 2;
    for o in 0..out_c {
        let sigma = (bn.running_var.data()[o] + bn.eps).sqrt();
        let g = bn.gamma.data()[o] / sigma;
        bias[o] = bn.beta.data()[o] - bn.running_mean.data()[o] * g;
        for c in 0..in_c {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let src = ((o * in_c + c) * kernel + kh) * kernel + kw;
                    let dst = ((o * in_c + c) * 3 + kh + offset) * 3 + kw + offset;
                    fused[dst] = weight.data()[src] * g;
                }
            }
        }
    }
    FusedBranch {
        weight: fused,
        bias,
    }
}

fn fuse_identity_bn(channels: usize, bn: &BnLayer) -> FusedBranch {
    // The identity branch as a per-channel 3x3 kernel with a center one.
    let mut weight = Tensor::zeros(&[channels, channels, 3, 3]);
    for c in 0..channels {
        weight.data_mut()[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
    }
    fuse_conv_bn(&weight, 3, bn)
}

/// Convert a multi-branch RepVGG model in eval mode into its single-conv
/// equivalent. The fused model produces identical eval outputs.
pub fn reparameterize(model: &BackboneModel) -> Result<BackboneModel, NetError> {
    if model.mode != Mode::Eval {
        return Err(NetError::State(
            "re-parameterization requires eval mode".into(),
        ));
    }
    let net = match &model.backbone {
        Backbone::RepVgg(net) => net,
        Backbone::ResNet(_) => {
            return Err(NetError::State(
                "re-parameterization applies to RepVGG models only".into(),
            ))
        }
    };
    let mut fused_net = net.clone();
    for stage in &mut fused_net.stages {
        for block in stage {
            let (conv3, bn3, conv1, bn1, bn_id) = match &block.form {
                RepVggBlockForm::MultiBranch {
                    conv3,
                    bn3,
                    conv1,
                    bn1,
                    bn_id,
                } => (conv3, bn3, conv1, bn1, bn_id.as_ref()),
                RepVggBlockForm::Fused { .. } => {
                    return Err(NetError::State("model is already fused".into()))
                }
            };
            let mut acc = fuse_conv_bn(&conv3.weight, 3, bn3);
            let b1 = fuse_conv_bn(&conv1.weight, 1, bn1);
            for (a, b) in acc.weight.iter_mut().zip(&b1.weight) {
                *a += b;
            }
            for (a, b) in acc.bias.iter_mut().zip(&b1.bias) {
                *a += b;
            }
            if let Some(bn) = bn_id {
                let bi = fuse_identity_bn(block.out_c, bn);
                for (a, b) in acc.weight.iter_mut().zip(&bi.weight) {
                    *a += b;
                }
                for (a, b) in acc.bias.iter_mut().zip(&bi.bias) {
                    *a += b;
                }
            }
            let stride = conv3.stride;
            block.form = RepVggBlockForm::Fused {
                conv: ConvLayer {
                    weight: Tensor::from_vec(&[block.out_c, block.in_c, 3, 3], acc.weight)?,
                    bias: Some(Tensor::from_vec(&[block.out_c], acc.bias)?),
                    stride,
                    pad: (1, 1),
                },
            };
        }
    }
    Ok(BackboneModel {
        backbone: Backbone::RepVgg(fused_net),
        head: model.head.clone(),
        config: model.config.clone(),
        mode: Mode::Eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tape;
    use crate::nets::{NetConfig, RepVggConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> RepVggConfig {
        RepVggConfig {
            base_channels: 8,
            stage_depths: [1, 1, 1, 1, 1],
            width_a: 2.5,
            width_b: 5.0,
            embedding_dim: 8,
            in_freq_bins: 16,
        }
    }

    /// Train-mode forwards with random batches populate BN running stats.
    fn populated_toy_model(seed: u64) -> BackboneModel {
        let mut model = BackboneModel::build(&NetConfig::Repvgg(toy_config()), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for _ in 0..3 {
            let input = Tensor::randn(&[4, 1, 16, 24], 1.0, &mut rng);
            let mut tape = Tape::new();
            model.forward_embeddings(&mut tape, &input).unwrap();
        }
        model.set_mode(Mode::Eval);
        model
    }

    #[test]
    fn fused_model_matches_multibranch_eval_outputs() {
        let mut model = populated_toy_model(42);
        let mut fused = reparameterize(&model).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let input = Tensor::randn(&[1, 1, 16, rng.gen_range(16..40)], 1.0, &mut rng);
            let mut t1 = Tape::new();
            let a = model.forward_embeddings(&mut t1, &input).unwrap();
            let mut t2 = Tape::new();
            let b = fused.forward_embeddings(&mut t2, &input).unwrap();
            let max_diff = t1
                .value(a.embeddings)
                .data()
                .iter()
                .zip(t2.value(b.embeddings).data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff <= 1e-10, "max diff {}", max_diff);
        }
    }

    #[test]
    fn fused_model_has_strictly_fewer_parameters() {
        let mut model = populated_toy_model(1);
        let mut fused = reparameterize(&model).unwrap();
        assert!(fused.num_params() < model.num_params());
    }

    #[test]
    fn train_mode_model_cannot_be_fused() {
        let mut model = BackboneModel::build(&NetConfig::Repvgg(toy_config()), 2).unwrap();
        model.set_mode(Mode::Train);
        assert!(matches!(
            reparameterize(&model),
            Err(NetError::State(_))
        ));
    }

    #[test]
    fn refusing_a_fused_model_is_an_error() {
        let model = populated_toy_model(3);
        let fused = reparameterize(&model).unwrap();
        assert!(matches!(reparameterize(&fused), Err(NetError::State(_))));
    }

    #[test]
    fn nulled_side_branches_leave_only_the_main_kernel() {
        // Zero the 1x1 and identity branch gammas (and betas); the fused
        // kernel must equal the BN-fused 3x3 branch alone.
        let mut model = populated_toy_model(4);
        if let Backbone::RepVgg(net) = &mut model.backbone {
            for stage in &mut net.stages {
                for block in stage {
                    if let RepVggBlockForm::MultiBranch { bn1, bn_id, .. } = &mut block.form {
                        bn1.gamma = Tensor::zeros(&[block.out_c]);
                        bn1.beta = Tensor::zeros(&[block.out_c]);
                        if let Some(bn) = bn_id {
                            bn.gamma = Tensor::zeros(&[block.out_c]);
                            bn.beta = Tensor::zeros(&[block.out_c]);
                        }
                    }
                }
            }
        }
        let fused = reparameterize(&model).unwrap();
        let (main_net, fused_net) = match (&model.backbone, &fused.backbone) {
            (Backbone::RepVgg(a), Backbone::RepVgg(b)) => (a, b),
            _ => unreachable!(),
        };
        for (stage_m, stage_f) in main_net.stages.iter().zip(&fused_net.stages) {
            for (bm, bf) in stage_m.iter().zip(stage_f) {
                let (conv3, bn3) = match &bm.form {
                    RepVggBlockForm::MultiBranch { conv3, bn3, .. } => (conv3, bn3),
                    _ => unreachable!(),
                };
                let expect = fuse_conv_bn(&conv3.weight, 3, bn3);
                let got = match &bf.form {
                    RepVggBlockForm::Fused { conv } => conv,
                    _ => unreachable!(),
                };
                for (a, b) in got.weight.data().iter().zip(&expect.weight) {
                    assert!((a - b).abs() < 1e-14);
                }
                for (a, b) in got.bias.as_ref().unwrap().data().iter().zip(&expect.bias) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }
}
