//! Generic parameter containers. Each network's parameter struct is generic
//! over its leaf type so the same layout serves three roles: owned tensors
//! (storage/optimizer), tape variables (forward passes), and anything else a
//! traversal produces. Traversal order is the field order below and is the
//! contract the optimizer and checkpoint format rely on.

use crate::tensor::Tensor;
use rand::Rng;

/// Structural traversal over a parameter container.
pub trait ParamStruct<T> {
    type Mapped<U>;
    fn map_params<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Self::Mapped<U>;
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T));
}

pub fn collect_refs<T, P: ParamStruct<T>>(p: &P) -> Vec<&T> {
    let mut out = Vec::new();
    p.map_params(&mut |t| out.push(t));
    out
}

/// Convolution weights: w is [out, in, kh, kw], b is [out].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvP<T> {
    pub w: T,
    pub b: T,
}

/// Fully connected weights: w is [out, in], b is [out].
#[derive(Clone, Debug, PartialEq)]
pub struct LinP<T> {
    pub w: T,
    pub b: T,
}

/// Per-channel affine for instance normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormP<T> {
    pub scale: T,
    pub shift: T,
}

/// One encoder stage: two 3x3 convs plus a stride-2 downsampling conv.
#[derive(Clone, Debug, PartialEq)]
pub struct EncLevelP<T> {
    pub c1: ConvP<T>,
    pub c2: ConvP<T>,
    pub down: ConvP<T>,
}

/// One style-decoder stage: post-upsample conv, fuse conv after skip concat,
/// style-to-(scale,shift) affine, and per-channel noise scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleDecLevelP<T> {
    pub upc: ConvP<T>,
    pub fuse: ConvP<T>,
    pub adain: LinP<T>,
    pub noise_scale: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleUNetParams<T> {
    pub mapping: Vec<LinP<T>>,
    pub enc: Vec<EncLevelP<T>>,
    pub bot1: ConvP<T>,
    pub bot2: ConvP<T>,
    pub dec: Vec<StyleDecLevelP<T>>,
    pub out: ConvP<T>,
}

/// Additive attention gate on a skip connection.
#[derive(Clone, Debug, PartialEq)]
pub struct GateP<T> {
    pub theta: ConvP<T>,
    pub phi: ConvP<T>,
    pub psi: ConvP<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnDecLevelP<T> {
    pub upc: ConvP<T>,
    pub gate: GateP<T>,
    pub fuse: ConvP<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionUNetParams<T> {
    pub enc: Vec<EncLevelP<T>>,
    pub bot1: ConvP<T>,
    pub bot2: ConvP<T>,
    pub dec: Vec<AttnDecLevelP<T>>,
    pub out: ConvP<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscLayerP<T> {
    pub conv: ConvP<T>,
    pub norm: Option<NormP<T>>,
}

/// Kernelized linear attention with a residual projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResAttnP<T> {
    pub q: ConvP<T>,
    pub k: ConvP<T>,
    pub v: ConvP<T>,
    pub proj: ConvP<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchDiscriminatorParams<T> {
    pub layers: Vec<DiscLayerP<T>>,
    pub attn: ResAttnP<T>,
    pub final_conv: ConvP<T>,
}

// Fields before `leaves` are nested containers; fields after are bare
// parameter leaves of type T. Traversal order is the listed order.
macro_rules! impl_param_struct {
    ($name:ident { $($field:ident),* } leaves { $($leaf:ident),* }) => {
        impl<T> ParamStruct<T> for $name<T> {
            type Mapped<U> = $name<U>;
            fn map_params<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> $name<U> {
                $name {
                    $($field: self.$field.map_params(f),)*
                    $($leaf: f(&self.$leaf),)*
                }
            }
            fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
                $(self.$field.for_each_mut(f);)*
                $(f(&mut self.$leaf);)*
            }
        }
    };
    ($name:ident { $($field:ident),* }) => {
        impl_param_struct!($name { $($field),* } leaves {});
    };
}

impl<T, P: ParamStruct<T>> ParamStruct<T> for Vec<P> {
    type Mapped<U> = Vec<P::Mapped<U>>;
    fn map_params<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Vec<P::Mapped<U>> {
        self.iter().map(|p| p.map_params(f)).collect()
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for p in self {
            p.for_each_mut(f);
        }
    }
}

impl<T, P: ParamStruct<T>> ParamStruct<T> for Option<P> {
    type Mapped<U> = Option<P::Mapped<U>>;
    fn map_params<'a, U>(&'a self, f: &mut dyn FnMut(&'a T) -> U) -> Option<P::Mapped<U>> {
        self.as_ref().map(|p| p.map_params(f))
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        if let Some(p) = self {
            p.for_each_mut(f);
        }
    }
}

impl_param_struct!(ConvP {} leaves { w, b });
impl_param_struct!(LinP {} leaves { w, b });
impl_param_struct!(NormP {} leaves { scale, shift });
impl_param_struct!(EncLevelP { c1, c2, down });
impl_param_struct!(StyleDecLevelP { upc, fuse, adain } leaves { noise_scale });
impl_param_struct!(StyleUNetParams { mapping, enc, bot1, bot2, dec, out });
impl_param_struct!(GateP { theta, phi, psi });
impl_param_struct!(AttnDecLevelP { upc, gate, fuse });
impl_param_struct!(AttentionUNetParams { enc, bot1, bot2, dec, out });
impl_param_struct!(DiscLayerP { conv, norm });
impl_param_struct!(ResAttnP { q, k, v, proj });
impl_param_struct!(PatchDiscriminatorParams { layers, attn, final_conv });

// ---- initialization helpers ----

/// He-style init: N(0, 2/fan_in) weights, zero bias.
pub fn conv_init<R: Rng>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> ConvP<Tensor> {
    let std = (2.0 / (in_ch * k * k) as f64).sqrt();
    ConvP {
        w: Tensor::randn(&[out_ch, in_ch, k, k], rng).map(|v| v * std),
        b: Tensor::zeros(&[out_ch]),
    }
}

pub fn lin_init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> LinP<Tensor> {
    let std = (2.0 / in_dim as f64).sqrt();
    LinP {
        w: Tensor::randn(&[out_dim, in_dim], rng).map(|v| v * std),
        b: Tensor::zeros(&[out_dim]),
    }
}

/// AdaIN affine starts at identity style: scale half biased to 1, shift to 0.
pub fn adain_affine_init<R: Rng>(channels: usize, style_dim: usize, rng: &mut R) -> LinP<Tensor> {
    let mut p = lin_init(2 * channels, style_dim, rng);
    p.w.scale_assign(0.05);
    for c in 0..channels {
        p.b.data_mut()[c] = 1.0;
    }
    p
}

pub fn norm_init(channels: usize) -> NormP<Tensor> {
    NormP {
        scale: Tensor::full(&[channels], 1.0),
        shift: Tensor::zeros(&[channels]),
    }
}
