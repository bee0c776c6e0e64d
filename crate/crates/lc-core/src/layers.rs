//! Network layers and per-layer backward passes.
//!
//! There is no graph-level autodiff: a forward pass returns a cache per
//! layer and the trainer walks the chain in reverse, handing each layer its
//! upstream gradient. Parameter gradients are accumulated into a [`Grads`]
//! sink keyed by parameter name, so several images of a batch can be
//! processed independently and merged in a fixed order.

use std::collections::HashMap;

use crate::error::{LcError, Result};
use crate::exec::ExecMode;
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::ops::elementwise::{elementwise_add, relu_backward, relu_forward};
use crate::ops::norm::AffineNorm;
use crate::region::{
    mask_zero_outside, masked_add, region_conv_backward, region_conv_forward, RegionMask,
};
use crate::tensor::{Elem, Shape4, Tensor};

/// Named gradient accumulator.
#[derive(Debug, Clone, Default)]
pub struct Grads<T: Elem> {
    map: HashMap<String, Vec<T>>,
}

impl<T: Elem> Grads<T> {
    pub fn new() -> Grads<T> {
        Grads {
            map: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, g: Vec<T>) {
        match self.map.get_mut(&name) {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => {
                self.map.insert(name, g);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Merge another sink into this one (used to reduce per-image grads of a
    /// batch in a fixed order).
    pub fn merge(&mut self, other: Grads<T>) {
        let mut entries: Vec<(String, Vec<T>)> = other.map.into_iter().collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, g) in entries {
            self.add(name, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::from_f64(s);
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v = *v * s;
            }
        }
    }
}

/// A convolution layer's parameters. Bias, when present, has shape
/// (1, out_c, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Elem> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Elem> ConvLayer<T> {
    pub fn bias_slice(&self) -> Option<&[T]> {
        self.bias.as_ref().map(|b| b.data())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Elem> {
    pub body: Vec<Layer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Elem> {
    /// Dense convolution; may change resolution. Stem only.
    Conv(ConvLayer<T>),
    /// Region convolution (stride 1). Runs dense when no mask is given.
    Rc(ConvLayer<T>),
    Relu,
    Affine(AffineNorm<T>),
    /// Masked residual: output copies the input outside the mask bit-exactly
    /// and adds the body output inside it.
    Residual(ResidualBlock<T>),
}

#[derive(Debug, Clone)]
pub enum LayerCache<T: Elem> {
    Input(Tensor<T>),
    Residual {
        inner: Vec<LayerCache<T>>,
    },
    None,
}

impl<T: Elem> Layer<T> {
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mask: Option<&RegionMask>,
        mode: ExecMode,
    ) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => conv2d_forward(x, &c.spec, &c.weight, c.bias_slice(), mode),
            Layer::Rc(c) => match mask {
                Some(m) => region_conv_forward(x, m, &c.spec, &c.weight, c.bias_slice(), mode),
                None => conv2d_forward(x, &c.spec, &c.weight, c.bias_slice(), mode),
            },
            Layer::Relu => Ok(relu_forward(x)),
            Layer::Affine(a) => a.apply(x),
            Layer::Residual(r) => {
                let body_out = forward_seq(&r.body, x, mask, mode)?;
                if body_out.shape() != x.shape() {
                    return Err(LcError::config(format!(
                        "residual body must preserve shape: {} vs {}",
                        body_out.shape(),
                        x.shape()
                    )));
                }
                match mask {
                    Some(m) => Ok(masked_add(x, &body_out, m)),
                    None => elementwise_add(x, &body_out),
                }
            }
        }
    }

    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        mask: Option<&RegionMask>,
        mode: ExecMode,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        match self {
            Layer::Conv(_) | Layer::Rc(_) | Layer::Relu | Layer::Affine(_) => {
                let y = self.forward(x, mask, mode)?;
                Ok((y, LayerCache::Input(x.clone())))
            }
            Layer::Residual(r) => {
                let (body_out, inner) = forward_train_seq(&r.body, x, mask, mode)?;
                if body_out.shape() != x.shape() {
                    return Err(LcError::config(format!(
                        "residual body must preserve shape: {} vs {}",
                        body_out.shape(),
                        x.shape()
                    )));
                }
                let y = match mask {
                    Some(m) => masked_add(x, &body_out, m),
                    None => elementwise_add(x, &body_out)?,
                };
                Ok((y, LayerCache::Residual { inner }))
            }
        }
    }

    /// Propagate `grad_out` through this layer, adding parameter gradients to
    /// `grads` under `prefix`. Returns the gradient w.r.t. the layer input.
    pub fn backward(
        &self,
        prefix: &str,
        grad_out: &Tensor<T>,
        cache: &LayerCache<T>,
        mask: Option<&RegionMask>,
        mode: ExecMode,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Input(x)) => {
                let (gx, gw, gb) = conv2d_backward(grad_out, x, &c.spec, &c.weight, mode)?;
                grads.add(format!("{prefix}.weight"), gw.into_data());
                if let Some(gb) = gb {
                    grads.add(format!("{prefix}.bias"), gb);
                }
                Ok(gx)
            }
            (Layer::Rc(c), LayerCache::Input(x)) => {
                let (gx, gw, gb) = match mask {
                    Some(m) => region_conv_backward(grad_out, x, m, &c.spec, &c.weight, mode)?,
                    None => conv2d_backward(grad_out, x, &c.spec, &c.weight, mode)?,
                };
                grads.add(format!("{prefix}.weight"), gw.into_data());
                if let Some(gb) = gb {
                    grads.add(format!("{prefix}.bias"), gb);
                }
                Ok(gx)
            }
            (Layer::Relu, LayerCache::Input(x)) => Ok(relu_backward(grad_out, x)),
            (Layer::Affine(a), LayerCache::Input(x)) => {
                let (gx, param_grads) = a.backward(grad_out, x);
                if let Some((gs, gb)) = param_grads {
                    grads.add(format!("{prefix}.scale"), gs);
                    grads.add(format!("{prefix}.shift"), gb);
                }
                Ok(gx)
            }
            (Layer::Residual(r), LayerCache::Residual { inner }) => {
                let g_body = match mask {
                    Some(m) => mask_zero_outside(grad_out, m),
                    None => grad_out.clone(),
                };
                let g_body_x = backward_seq(&r.body, prefix, &g_body, inner, mask, mode, grads)?;
                elementwise_add(grad_out, &g_body_x)
            }
            _ => Err(LcError::State(format!(
                "missing or mismatched saved activation for layer at {prefix}"
            ))),
        }
    }

    pub fn visit_params<F: FnMut(&str, &Tensor<T>, bool)>(&self, prefix: &str, f: &mut F) {
        match self {
            Layer::Conv(c) | Layer::Rc(c) => {
                f(&format!("{prefix}.weight"), &c.weight, false);
                if let Some(b) = &c.bias {
                    f(&format!("{prefix}.bias"), b, false);
                }
            }
            Layer::Relu => {}
            Layer::Affine(a) => {
                f(&format!("{prefix}.scale"), &a.scale, a.frozen);
                f(&format!("{prefix}.shift"), &a.shift, a.frozen);
            }
            Layer::Residual(r) => {
                for (i, layer) in r.body.iter().enumerate() {
                    layer.visit_params(&format!("{prefix}.{i}"), f);
                }
            }
        }
    }

    pub fn visit_params_mut<F: FnMut(&str, &mut Tensor<T>, bool)>(
        &mut self,
        prefix: &str,
        f: &mut F,
    ) {
        match self {
            Layer::Conv(c) | Layer::Rc(c) => {
                f(&format!("{prefix}.weight"), &mut c.weight, false);
                if let Some(b) = &mut c.bias {
                    f(&format!("{prefix}.bias"), b, false);
                }
            }
            Layer::Relu => {}
            Layer::Affine(a) => {
                let frozen = a.frozen;
                f(&format!("{prefix}.scale"), &mut a.scale, frozen);
                f(&format!("{prefix}.shift"), &mut a.shift, frozen);
            }
            Layer::Residual(r) => {
                for (i, layer) in r.body.iter_mut().enumerate() {
                    layer.visit_params_mut(&format!("{prefix}.{i}"), f);
                }
            }
        }
    }

    /// Total multiply-accumulate flops of this layer's convolutions when
    /// evaluated at `active` output pixels.
    pub fn conv_flops(&self, active: usize) -> u64 {
        match self {
            Layer::Conv(c) | Layer::Rc(c) => crate::region::flop_count(&c.spec, active),
            Layer::Relu | Layer::Affine(_) => 0,
            Layer::Residual(r) => r.body.iter().map(|l| l.conv_flops(active)).sum(),
        }
    }

    /// Output channel count given the input channel count.
    pub fn out_channels(&self, in_c: usize) -> usize {
        match self {
            Layer::Conv(c) | Layer::Rc(c) => c.spec.out_channels,
            Layer::Relu | Layer::Affine(_) | Layer::Residual(_) => in_c,
        }
    }
}

pub fn forward_seq<T: Elem>(
    layers: &[Layer<T>],
    x: &Tensor<T>,
    mask: Option<&RegionMask>,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur, mask, mode)?;
    }
    Ok(cur)
}

pub fn forward_train_seq<T: Elem>(
    layers: &[Layer<T>],
    x: &Tensor<T>,
    mask: Option<&RegionMask>,
    mode: ExecMode,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward_train(&cur, mask, mode)?;
        caches.push(cache);
        cur = y;
    }
    Ok((cur, caches))
}

/// Reverse pass over a layer sequence. Layer `i` gets the name
/// `{prefix}.{i}`.
pub fn backward_seq<T: Elem>(
    layers: &[Layer<T>],
    prefix: &str,
    grad_out: &Tensor<T>,
    caches: &[LayerCache<T>],
    mask: Option<&RegionMask>,
    mode: ExecMode,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    debug_assert_eq!(layers.len(), caches.len());
    let mut g = grad_out.clone();
    for (i, layer) in layers.iter().enumerate().rev() {
        g = layer.backward(&format!("{prefix}.{i}"), &g, &caches[i], mask, mode, grads)?;
    }
    Ok(g)
}

pub fn visit_seq<T: Elem, F: FnMut(&str, &Tensor<T>, bool)>(
    layers: &[Layer<T>],
    prefix: &str,
    f: &mut F,
) {
    for (i, layer) in layers.iter().enumerate() {
        layer.visit_params(&format!("{prefix}.{i}"), f);
    }
}

pub fn visit_seq_mut<T: Elem, F: FnMut(&str, &mut Tensor<T>, bool)>(
    layers: &mut [Layer<T>],
    prefix: &str,
    f: &mut F,
) {
    for (i, layer) in layers.iter_mut().enumerate() {
        layer.visit_params_mut(&format!("{prefix}.{i}"), f);
    }
}

/// Convenience constructor for conv layers with externally chosen weights.
pub fn conv_layer<T: Elem>(spec: ConvSpec, weight: Tensor<T>, bias: Option<Vec<T>>) -> ConvLayer<T> {
    debug_assert_eq!(weight.shape(), spec.weight_shape());
    let bias = bias.map(|b| {
        debug_assert_eq!(b.len(), spec.out_channels);
        Tensor::from_vec(Shape4::new(1, spec.out_channels, 1, 1), b).unwrap()
    });
    ConvLayer { spec, weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rc_1x1_identity() -> Layer<f64> {
        let spec = ConvSpec::new(1, 1, (1, 1));
        Layer::Rc(conv_layer(spec, Tensor::filled(spec.weight_shape(), 1.0), None))
    }

    #[test]
    fn masked_residual_identity_on_empty_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let x: Tensor<f64> = Tensor::randn(Shape4::new(1, 1, 4, 4), 1.0, &mut rng);
        let block = Layer::Residual(ResidualBlock {
            body: vec![rc_1x1_identity()],
        });
        let mask = RegionMask::empty(4, 4);
        let y = block.forward(&x, Some(&mask), ExecMode::Deterministic).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masked_residual_full_mask_equals_dense_residual() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let spec = ConvSpec::new(2, 2, (3, 3)).with_padding(1);
        let w: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.5, &mut rng);
        let x: Tensor<f64> = Tensor::randn(Shape4::new(1, 2, 5, 5), 1.0, &mut rng);
        let block = Layer::Residual(ResidualBlock {
            body: vec![Layer::Rc(conv_layer(spec, w.clone(), None))],
        });
        let mask = RegionMask::full(5, 5);
        let masked = block.forward(&x, Some(&mask), ExecMode::Deterministic).unwrap();
        // dense h(I) = I + conv(I)
        let conv = conv2d_forward(&x, &spec, &w, None, ExecMode::Deterministic).unwrap();
        let dense = elementwise_add(&x, &conv).unwrap();
        assert!(masked.max_abs_diff(&dense) < 1e-15);
    }

    #[test]
    fn masked_residual_single_active_pixel_doubles_it() {
        // body = identity 1x1 conv, one active pixel p: y[p] = x[p] + x[p]
        let x = Tensor::from_vec(
            Shape4::new(1, 1, 2, 2),
            vec![1.5, -2.0, 3.0, 0.25],
        )
        .unwrap();
        let block = Layer::Residual(ResidualBlock {
            body: vec![rc_1x1_identity()],
        });
        let mut mask = RegionMask::empty(2, 2);
        mask.set(1, 0, true);
        let y = block.forward(&x, Some(&mask), ExecMode::Deterministic).unwrap();
        assert_eq!(y.at(0, 0, 1, 0), 6.0);
        assert_eq!(y.at(0, 0, 0, 0), 1.5);
        assert_eq!(y.at(0, 0, 0, 1), -2.0);
        assert_eq!(y.at(0, 0, 1, 1), 0.25);
    }

    #[test]
    fn grads_merge_accumulates_by_name() {
        let mut a: Grads<f64> = Grads::new();
        a.add("w".into(), vec![1.0, 2.0]);
        let mut b: Grads<f64> = Grads::new();
        b.add("w".into(), vec![0.5, 0.5]);
        b.add("v".into(), vec![3.0]);
        a.merge(b);
        assert_eq!(a.get("w").unwrap(), &[1.5, 2.5]);
        assert_eq!(a.get("v").unwrap(), &[3.0]);
        a.scale(0.5);
        assert_eq!(a.get("v").unwrap(), &[1.5]);
    }

    #[test]
    fn backward_through_residual_keeps_identity_gradient() {
        // with a zero-weight body, dL/dx must equal grad_out exactly
        let spec = ConvSpec::new(1, 1, (3, 3)).with_padding(1);
        let block = Layer::Residual(ResidualBlock {
            body: vec![Layer::Rc(conv_layer(
                spec,
                Tensor::zeros(spec.weight_shape()),
                None,
            ))],
        });
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let x: Tensor<f64> = Tensor::randn(Shape4::new(1, 1, 4, 4), 1.0, &mut rng);
        let mask = RegionMask::from_fn(4, 4, |y, _| y < 2);
        let (_, cache) = block
            .forward_train(&x, Some(&mask), ExecMode::Deterministic)
            .unwrap();
        let g: Tensor<f64> = Tensor::randn(Shape4::new(1, 1, 4, 4), 1.0, &mut rng);
        let mut grads = Grads::new();
        let gx = block
            .backward("b", &g, &cache, Some(&mask), ExecMode::Deterministic, &mut grads)
            .unwrap();
        assert!(gx.max_abs_diff(&g) < 1e-15);
    }
}
