//! Mask-to-image generator: a U-Net whose decoder stages are modulated by
//! AdaIN style injection and per-level noise, ending in a tanh so outputs
//! stay in [-1, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::ops::{adain, conv_block, mapping_network, noise_inject, style_blend};
use super::params::{
    adain_affine_init, conv_init, lin_init, EncLevelP, ParamStruct, StyleDecLevelP,
    StyleUNetParams,
};
use super::{ModelConfig, NetworkError};

pub fn init_style_unet<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> StyleUNetParams<Tensor> {
    let mut mapping = Vec::new();
    for i in 0..cfg.mapping_layers {
        let in_dim = if i == 0 { cfg.latent_dim } else { cfg.style_dim };
        mapping.push(lin_init(cfg.style_dim, in_dim, rng));
    }
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
        dec.push(StyleDecLevelP {
            upc: conv_init(w, prev, 3, rng),
            fuse: conv_init(w, 2 * w, 3, rng),
            adain: adain_affine_init(w, cfg.style_dim, rng),
            noise_scale: Tensor::zeros(&[w]),
        });
    }
    let out = conv_init(1, cfg.base_width, 3, rng);
    StyleUNetParams {
        mapping,
        enc,
        bot1,
        bot2,
        dec,
        out,
    }
}

/// Forward pass on the tape. `level_styles` holds one style vector per
/// decoder level in application order (coarse to fine); `noise_fields` the
/// matching spatial noise, one per level at that level's resolution.
pub fn style_unet_forward(
    tape: &mut Tape,
    mask: VarId,
    p: &StyleUNetParams<VarId>,
    cfg: &ModelConfig,
    level_styles: &[VarId],
    noise_fields: &[Tensor],
) -> Result<VarId, NetworkError> {
    let shape = tape.value(mask).shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    cfg.validate_spatial(h, w)?;
    assert_eq!(level_styles.len(), cfg.depth, "one style per decoder level");
    assert_eq!(noise_fields.len(), cfg.depth, "one noise field per decoder level");

    let mut x = mask;
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
        let cat = tape.concat_ch(uc, skips[lvl]);
        let fused = tape.conv2d(cat, level.fuse.w, level.fuse.b, 1, 1);
        let styled = adain(tape, fused, level_styles[j], &level.adain, cfg.adain_eps)?;
        let noisy = noise_inject(tape, styled, &noise_fields[j], level.noise_scale)?;
        x = tape.leaky_relu(noisy, 0.2);
    }
    let y = tape.conv2d(x, p.out.w, p.out.b, 1, 1);
    Ok(tape.tanh(y))
}

/// Deterministic noise fields for one forward pass, coarse to fine.
pub fn noise_fields_for(cfg: &ModelConfig, h: usize, w: usize, noise_seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    (0..cfg.depth)
        .map(|j| {
            let lvl = cfg.depth - 1 - j;
            Tensor::randn(&[h >> lvl, w >> lvl], &mut rng)
        })
        .collect()
}

/// Inference conveniences: build a tape, run the mapping network on z, and
/// broadcast the resulting style to every decoder level.
pub fn generate_image(
    params: &StyleUNetParams<Tensor>,
    cfg: &ModelConfig,
    mask: &Tensor,
    z: &Tensor,
    noise_seed: u64,
) -> Result<Tensor, NetworkError> {
    generate_image_blended(params, cfg, mask, &[z.clone()], None, noise_seed)
}

/// Multi-style variant: `assignment[j]` selects which z drives decoder level
/// j (coarse to fine). `None` broadcasts the first style everywhere.
pub fn generate_image_blended(
    params: &StyleUNetParams<Tensor>,
    cfg: &ModelConfig,
    mask: &Tensor,
    zs: &[Tensor],
    assignment: Option<&[Option<usize>]>,
    noise_seed: u64,
) -> Result<Tensor, NetworkError> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    cfg.validate_spatial(h, w)?;
    let mut tape = Tape::new();
    let bound = params.map_params(&mut |t| tape.leaf(t.clone()));
    let styles: Vec<VarId> = zs
        .iter()
        .map(|z| {
            let zl = tape.leaf(z.clone());
            mapping_network(&mut tape, zl, &bound.mapping)
        })
        .collect::<Result<_, _>>()?;
    let default_assign: Vec<Option<usize>> = vec![Some(0); cfg.depth];
    let level_styles = style_blend(&styles, assignment.unwrap_or(&default_assign))?;
    let noise = noise_fields_for(cfg, h, w, noise_seed);
    let mask_leaf = tape.leaf(mask.reshaped(vec![1, h, w]));
    let out = style_unet_forward(&mut tape, mask_leaf, &bound, cfg, &level_styles, &noise)?;
    Ok(tape.value(out).reshaped(vec![h, w]))
}
