//! PatchGAN discriminator: a stack of 4x4 convolutions emitting a spatial
//! map of per-patch realism scores, with instance normalization in all but
//! the first layer and a residual linear-attention block after the strided
//! stack. Scores are raw reals (least-squares adversarial objective).

use rand::Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::ops::residual_linear_attention;
use super::params::{
    conv_init, norm_init, DiscLayerP, ParamStruct, PatchDiscriminatorParams, ResAttnP,
};
use super::{ModelConfig, NetworkError};

const KERNEL: usize = 4;
const PAD: usize = 1;
const MAX_WIDTH_FACTOR: usize = 8;

fn layer_width(cfg: &ModelConfig, i: usize) -> usize {
    (cfg.disc_base_width << i).min(cfg.disc_base_width * MAX_WIDTH_FACTOR)
}

pub fn init_patch_discriminator<R: Rng>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> PatchDiscriminatorParams<Tensor> {
    let mut layers = Vec::new();
    let n_layers = cfg.disc_stride2_layers + 1; // strided stack plus one stride-1 layer
    for i in 0..n_layers {
        let in_ch = if i == 0 { 1 } else { layer_width(cfg, i - 1) };
        let out_ch = layer_width(cfg, i);
        layers.push(DiscLayerP {
            conv: conv_init(out_ch, in_ch, KERNEL, rng),
            norm: if i == 0 { None } else { Some(norm_init(out_ch)) },
        });
    }
    let attn_ch = layer_width(cfg, cfg.disc_stride2_layers - 1);
    let mut attn = ResAttnP {
        q: conv_init(cfg.attn_dim, attn_ch, 1, rng),
        k: conv_init(cfg.attn_dim, attn_ch, 1, rng),
        v: conv_init(attn_ch, attn_ch, 1, rng),
        proj: conv_init(attn_ch, attn_ch, 1, rng),
    };
    attn.proj.w.scale_assign(0.1);
    let final_conv = conv_init(1, layer_width(cfg, n_layers - 1), KERNEL, rng);
    PatchDiscriminatorParams {
        layers,
        attn,
        final_conv,
    }
}

/// Spatial size of the score map for an h x w input, or an error when the
/// input is smaller than one receptive field.
pub fn score_map_size(cfg: &ModelConfig, h: usize, w: usize) -> Result<(usize, usize), NetworkError> {
    let step = |n: usize, stride: usize| -> Option<usize> {
        if n + 2 * PAD < KERNEL {
            return None;
        }
        Some((n + 2 * PAD - KERNEL) / stride + 1)
    };
    let (mut ch, mut cw) = (h, w);
    for i in 0..cfg.disc_stride2_layers + 1 {
        let stride = if i < cfg.disc_stride2_layers { 2 } else { 1 };
        match (step(ch, stride), step(cw, stride)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => {
                ch = a;
                cw = b;
            }
            _ => return Err(NetworkError::InputTooSmall { h, w }),
        }
    }
    match (step(ch, 1), step(cw, 1)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => Ok((a, b)),
        _ => Err(NetworkError::InputTooSmall { h, w }),
    }
}

/// Forward pass on the tape: input [1,H,W] to a score map [1,h,w].
pub fn patch_discriminator_forward(
    tape: &mut Tape,
    input: VarId,
    p: &PatchDiscriminatorParams<VarId>,
    cfg: &ModelConfig,
) -> Result<VarId, NetworkError> {
    let shape = tape.value(input).shape().to_vec();
    score_map_size(cfg, shape[1], shape[2])?;

    let mut x = input;
    for (i, layer) in p.layers.iter().enumerate() {
        let stride = if i < cfg.disc_stride2_layers { 2 } else { 1 };
        x = tape.conv2d(x, layer.conv.w, layer.conv.b, stride, PAD);
        if let Some(norm) = &layer.norm {
            x = tape.instance_norm(x, 1e-5);
            x = tape.scale_channels(x, norm.scale);
            x = tape.shift_channels(x, norm.shift);
        }
        x = tape.leaky_relu(x, 0.2);
        if i + 1 == cfg.disc_stride2_layers {
            x = residual_linear_attention(tape, x, &p.attn)?;
        }
    }
    Ok(tape.conv2d(x, p.final_conv.w, p.final_conv.b, 1, PAD))
}

/// Inference convenience on plain tensors.
pub fn score_map(
    params: &PatchDiscriminatorParams<Tensor>,
    cfg: &ModelConfig,
    input: &Tensor,
) -> Result<Tensor, NetworkError> {
    let (h, w) = (input.shape()[0], input.shape()[1]);
    let mut tape = Tape::new();
    let bound = params.map_params(&mut |t| tape.leaf(t.clone()));
    let x = tape.leaf(input.reshaped(vec![1, h, w]));
    let out = patch_discriminator_forward(&mut tape, x, &bound, cfg)?;
    let s = tape.value(out).shape().to_vec();
    Ok(tape.value(out).reshaped(vec![s[1], s[2]]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn score_map_size_matches_stride_arithmetic_oracle() {
        // Independent oracle: walk the layer list applying
        // floor((n + 2p - k)/s) + 1 per convolution.
        let cfg = ModelConfig::default();
        let oracle = |mut n: usize| {
            for stride in [2, 2, 2, 1, 1] {
                n = (n + 2 - 4) / stride + 1;
            }
            n
        };
        assert_eq!(oracle(256), 30);
        assert_eq!(score_map_size(&cfg, 256, 256).unwrap(), (30, 30));
        assert_eq!(score_map_size(&cfg, 64, 64).unwrap(), (6, 6));
    }

    #[test]
    fn forward_produces_expected_map_of_finite_scores() {
        let cfg = ModelConfig {
            disc_base_width: 4,
            disc_stride2_layers: 2,
            attn_dim: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = init_patch_discriminator(&cfg, &mut rng);
        let input = Tensor::randn(&[32, 32], &mut rng).map(|v| v.tanh());
        let scores = score_map(&p, &cfg, &input).unwrap();
        assert_eq!(
            (scores.shape()[0], scores.shape()[1]),
            score_map_size(&cfg, 32, 32).unwrap()
        );
        assert!(scores.all_finite());
        // Determinism.
        assert_eq!(scores, score_map(&p, &cfg, &input).unwrap());
    }

    #[test]
    fn too_small_input_is_rejected() {
        let cfg = ModelConfig::default();
        assert!(matches!(
            score_map_size(&cfg, 8, 8),
            Err(NetworkError::InputTooSmall { .. })
        ));
    }

    #[test]
    fn residual_attention_zeroed_branch_is_identity() {
        use crate::networks::ops::residual_linear_attention;
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x_t = Tensor::randn(&[3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let mk = |tape: &mut Tape, o: usize, i: usize, zero_w: bool, rng: &mut ChaCha8Rng| {
            let w = if zero_w {
                Tensor::zeros(&[o, i, 1, 1])
            } else {
                Tensor::randn(&[o, i, 1, 1], rng)
            };
            crate::networks::params::ConvP {
                w: tape.leaf(w),
                b: tape.leaf(Tensor::zeros(&[o])),
            }
        };
        let p = ResAttnP {
            q: mk(&mut tape, 2, 3, false, &mut rng),
            k: mk(&mut tape, 2, 3, false, &mut rng),
            v: mk(&mut tape, 3, 3, false, &mut rng),
            proj: mk(&mut tape, 3, 3, true, &mut rng),
        };
        let out = residual_linear_attention(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(out), &x_t);
    }

    #[test]
    fn residual_attention_nonzero_params_changes_input() {
        use crate::networks::ops::residual_linear_attention;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x_t = Tensor::randn(&[3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone());
        let mk = |tape: &mut Tape, o: usize, i: usize, rng: &mut ChaCha8Rng| {
            crate::networks::params::ConvP {
                w: tape.leaf(Tensor::randn(&[o, i, 1, 1], rng)),
                b: tape.leaf(Tensor::zeros(&[o])),
            }
        };
        let p = ResAttnP {
            q: mk(&mut tape, 2, 3, &mut rng),
            k: mk(&mut tape, 2, 3, &mut rng),
            v: mk(&mut tape, 3, 3, &mut rng),
            proj: mk(&mut tape, 3, 3, &mut rng),
        };
        let out = residual_linear_attention(&mut tape, x, &p).unwrap();
        assert_ne!(tape.value(out), &x_t);
        assert_eq!(tape.value(out).shape(), &[3, 4, 4]);
    }
}
