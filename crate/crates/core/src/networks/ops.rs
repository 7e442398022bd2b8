//! Building blocks shared by the networks: style mapping, AdaIN, noise
//! injection, style blending, attention gating, and residual linear
//! attention.

use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

use super::params::{ConvP, GateP, LinP, ResAttnP};
use super::NetworkError;

/// MLP from latent z to the style vector w. Leaky-rectifier activations on
/// all but the last layer, which stays affine so a zeroed final weight maps
/// every z to the bias.
pub fn mapping_network(
    tape: &mut Tape,
    z: VarId,
    layers: &[LinP<VarId>],
) -> Result<VarId, NetworkError> {
    assert!(!layers.is_empty());
    let expect = tape.value(layers[0].w).shape()[1];
    let got = tape.value(z).len();
    if got != expect {
        return Err(NetworkError::DimMismatch {
            what: "latent vector",
            expected: expect,
            got,
        });
    }
    let mut x = z;
    for (i, l) in layers.iter().enumerate() {
        x = tape.linear(x, l.w, l.b);
        if i + 1 < layers.len() {
            x = tape.leaky_relu(x, 0.2);
        }
    }
    Ok(x)
}

/// Adaptive instance normalization: standardize each channel over its own
/// spatial statistics, then apply (scale, shift) produced from the style
/// vector by the level's affine map.
pub fn adain(
    tape: &mut Tape,
    features: VarId,
    style: VarId,
    affine: &LinP<VarId>,
    eps: f64,
) -> Result<VarId, NetworkError> {
    let channels = tape.value(features).shape()[0];
    let affine_out = tape.value(affine.w).shape()[0];
    if affine_out != 2 * channels {
        return Err(NetworkError::DimMismatch {
            what: "adain affine output",
            expected: 2 * channels,
            got: affine_out,
        });
    }
    let sv = tape.linear(style, affine.w, affine.b);
    let gamma = tape.slice1(sv, 0, channels);
    let beta = tape.slice1(sv, channels, channels);
    let norm = tape.instance_norm(features, eps);
    let scaled = tape.scale_channels(norm, gamma);
    Ok(tape.shift_channels(scaled, beta))
}

/// features + scales[c] * noise, the noise field shared across channels.
pub fn noise_inject(
    tape: &mut Tape,
    features: VarId,
    noise: &Tensor,
    scales: VarId,
) -> Result<VarId, NetworkError> {
    let shape = tape.value(features).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if noise.shape() != [h, w] {
        return Err(NetworkError::DimMismatch {
            what: "noise field pixels",
            expected: h * w,
            got: noise.len(),
        });
    }
    // Broadcast the field over channels as a constant leaf; only the scales
    // are learnable.
    let mut stacked = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        stacked.data_mut()[ch * h * w..(ch + 1) * h * w].copy_from_slice(noise.data());
    }
    let noise_leaf = tape.leaf(stacked);
    let scaled = tape.scale_channels(noise_leaf, scales);
    Ok(tape.add(features, scaled))
}

/// Resolve which style vector feeds each decoder level. A single style with
/// an all-zero assignment broadcasts one w everywhere.
pub fn style_blend(
    styles: &[VarId],
    assignment: &[Option<usize>],
) -> Result<Vec<VarId>, NetworkError> {
    let mut out = Vec::with_capacity(assignment.len());
    for (level, a) in assignment.iter().enumerate() {
        match a {
            None => return Err(NetworkError::UnassignedLevel { level }),
            Some(i) if *i >= styles.len() => {
                return Err(NetworkError::StyleIndexOutOfRange {
                    index: *i,
                    count: styles.len(),
                })
            }
            Some(i) => out.push(styles[*i]),
        }
    }
    Ok(out)
}

/// Additive attention gate: a = sigmoid(psi(relu(theta(skip) + phi(gate)))),
/// returned as skip ⊙ a. The gate signal is nearest-upsampled to the skip's
/// spatial size when coarser.
pub fn attention_gate(
    tape: &mut Tape,
    skip: VarId,
    gate: VarId,
    p: &GateP<VarId>,
) -> Result<VarId, NetworkError> {
    let (sh, sw) = {
        let s = tape.value(skip).shape();
        (s[1], s[2])
    };
    let mut g = gate;
    loop {
        let gs = tape.value(g).shape().to_vec();
        if gs[1] == sh && gs[2] == sw {
            break;
        }
        if gs[1] > sh || gs[2] > sw {
            return Err(NetworkError::DimMismatch {
                what: "gate spatial size",
                expected: sh,
                got: gs[1],
            });
        }
        g = tape.upsample_nearest2(g);
    }
    let ts = tape.conv2d(skip, p.theta.w, p.theta.b, 1, 0);
    let tg = tape.conv2d(g, p.phi.w, p.phi.b, 1, 0);
    let sum = tape.add(ts, tg);
    let act = tape.relu(sum);
    let logits = tape.conv2d(act, p.psi.w, p.psi.b, 1, 0);
    let a = tape.sigmoid(logits);
    // a has one channel; multiply it into every skip channel.
    let c = tape.value(skip).shape()[0];
    let a_flat = tape.reshape(a, vec![1, sh * sw]);
    let ones = tape.leaf(Tensor::full(&[c, 1], 1.0));
    let a_full = tape.matmul(ones, a_flat);
    let a_map = tape.reshape(a_full, vec![c, sh, sw]);
    Ok(tape.mul(skip, a_map))
}

/// Kernelized (softmax-free) self-attention with a residual sum, linear in
/// pixel count: out = x + proj(phi(Q) [phi(K)^T V] / phi(Q) phi(K)^T 1).
pub fn residual_linear_attention(
    tape: &mut Tape,
    x: VarId,
    p: &ResAttnP<VarId>,
) -> Result<VarId, NetworkError> {
    let shape = tape.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;

    let q = tape.conv2d(x, p.q.w, p.q.b, 1, 0);
    let k = tape.conv2d(x, p.k.w, p.k.b, 1, 0);
    let v = tape.conv2d(x, p.v.w, p.v.b, 1, 0);
    let d = tape.value(q).shape()[0];

    let qm = tape.reshape(q, vec![d, n]);
    let km = tape.reshape(k, vec![d, n]);
    let vm = tape.reshape(v, vec![c, n]);

    let qt = tape.transpose2(qm); // [n, d]
    let phi_q = tape.elu1(qt);
    let phi_k = tape.elu1(km); // [d, n]

    let vt = tape.transpose2(vm); // [n, c]
    let kv = tape.matmul(phi_k, vt); // [d, c]
    let num = tape.matmul(phi_q, kv); // [n, c]
    let k_sum = tape.row_sums(phi_k); // [d]
    let k_col = tape.reshape(k_sum, vec![d, 1]);
    let den = tape.matmul(phi_q, k_col); // [n, 1]
    let den_vec = tape.reshape(den, vec![n]);
    let attn = tape.div_rows(num, den_vec); // [n, c]

    let attn_t = tape.transpose2(attn); // [c, n]
    let attn_map = tape.reshape(attn_t, vec![c, h, w]);
    let projected = tape.conv2d(attn_map, p.proj.w, p.proj.b, 1, 0);
    Ok(tape.add(x, projected))
}

/// Two 3x3 convs with leaky-rectifier activations.
pub fn conv_block(
    tape: &mut Tape,
    x: VarId,
    c1: &ConvP<VarId>,
    c2: &ConvP<VarId>,
) -> VarId {
    let y = tape.conv2d(x, c1.w, c1.b, 1, 1);
    let y = tape.leaky_relu(y, 0.2);
    let y = tape.conv2d(y, c2.w, c2.b, 1, 1);
    tape.leaky_relu(y, 0.2)
}
