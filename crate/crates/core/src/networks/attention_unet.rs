//! Image-to-mask segmenter: a U-Net whose skip connections pass through
//! learned attention gates, with a sigmoid head producing per-pixel
//! foreground probabilities.

use rand::Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::ops::{attention_gate, conv_block};
use super::params::{
    conv_init, AttentionUNetParams, AttnDecLevelP, EncLevelP, GateP, ParamStruct,
};
use super::{ModelConfig, NetworkError};

pub fn init_attention_unet<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> AttentionUNetParams<Tensor> {
    let mut enc = Vec::new();
    for i in 0..cfg.depth {
        let in_ch = if i == 0 { 1 } else { cfg.width(i - 1) };
        let w = cfg.width(i);
        enc.push(EncLevelP {
            c1: conv_init(w, in_ch, 3, rng),
            c2: conv_init(w, w, 3, rng),
            down: conv_init(w, w, 3, rng),
        });
    }
    let bw = cfg.bottleneck_width();
    let bot1 = conv_init(bw, cfg.width(cfg.depth - 1), 3, rng);
    let bot2 = conv_init(bw, bw, 3, rng);
    let mut dec = Vec::new();
    for j in 0..cfg.depth {
        let lvl = cfg.depth - 1 - j;
        let w = cfg.width(lvl);
        let prev = if j == 0 { bw } else { cfg.width(lvl + 1) };
        let inter = (w / 2).max(1);
        dec.push(AttnDecLevelP {
            upc: conv_init(w, prev, 3, rng),
            gate: GateP {
                theta: conv_init(inter, w, 1, rng),
                phi: conv_init(inter, w, 1, rng),
                psi: conv_init(1, inter, 1, rng),
            },
            fuse: conv_init(w, 2 * w, 3, rng),
        });
    }
    let out = conv_init(1, cfg.base_width, 3, rng);
    AttentionUNetParams {
        enc,
        bot1,
        bot2,
        dec,
        out,
    }
}

/// Forward pass on the tape: image [1,H,W] in [-1,1] to foreground
/// probabilities [1,H,W] in [0,1].
pub fn attention_unet_forward(
    tape: &mut Tape,
    image: VarId,
    p: &AttentionUNetParams<VarId>,
    cfg: &ModelConfig,
) -> Result<VarId, NetworkError> {
    let shape = tape.value(image).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    cfg.validate_spatial(h, w)?;

    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in &p.enc {
        let s = conv_block(tape, x, &level.c1, &level.c2);
        skips.push(s);
        let d = tape.conv2d(s, level.down.w, level.down.b, 2, 1);
        x = tape.leaky_relu(d, 0.2);
    }
    x = conv_block(tape, x, &p.bot1, &p.bot2);

    for (j, level) in p.dec.iter().enumerate() {
        let lvl = cfg.depth - 1 - j;
        let up = tape.upsample_nearest2(x);
        let uc = tape.conv2d(up, level.upc.w, level.upc.b, 1, 1);
        let uc = tape.leaky_relu(uc, 0.2);
        let gated = attention_gate(tape, skips[lvl], uc, &level.gate)?;
        let cat = tape.concat_ch(uc, gated);
        let fused = tape.conv2d(cat, level.fuse.w, level.fuse.b, 1, 1);
        x = tape.leaky_relu(fused, 0.2);
    }
    let y = tape.conv2d(x, p.out.w, p.out.b, 1, 1);
    Ok(tape.sigmoid(y))
}

/// Inference convenience on plain tensors.
pub fn segment_probs(
    params: &AttentionUNetParams<Tensor>,
    cfg: &ModelConfig,
    image: &Tensor,
) -> Result<Tensor, NetworkError> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    cfg.validate_spatial(h, w)?;
    let mut tape = Tape::new();
    let bound = params.map_params(&mut |t| tape.leaf(t.clone()));
    let img = tape.leaf(image.reshaped(vec![1, h, w]));
    let out = attention_unet_forward(&mut tape, img, &bound, cfg)?;
    Ok(tape.value(out).reshaped(vec![h, w]))
}
