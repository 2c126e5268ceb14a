use serde::{Deserialize, Serialize};

use crate::error::{shape_err, PanError, Result};
use crate::tensor::{conv2d, conv2d_backward, gemm_nn, gemm_nt, gemm_tn, Tensor};

use super::batchnorm::{bn_backward, BnCache};

/// Architecture-level description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm,
    Relu,
    MaxPool { size: usize },
    AvgPool { size: usize },
    Flatten,
    Linear { out_features: usize },
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Conv { out_channels, kernel, stride, pad }, &[_, h, w]) => {
                let geo = crate::tensor::ConvGeometry {
                    in_channels: input[0],
                    out_channels: *out_channels,
                    kernel: *kernel,
                    stride: *stride,
                    pad: *pad,
                };
                let (oh, ow) = geo.output_hw(h, w)?;
                Ok(vec![*out_channels, oh, ow])
            }
            (LayerSpec::BatchNorm, &[_]) | (LayerSpec::BatchNorm, &[_, _, _]) => Ok(input.to_vec()),
            (LayerSpec::Relu, _) => Ok(input.to_vec()),
            (LayerSpec::MaxPool { size } | LayerSpec::AvgPool { size }, &[c, h, w]) => {
                if *size == 0 || *size > h || *size > w {
                    return Err(shape_err(format!("pool size {size} does not fit {h}x{w}")));
                }
                Ok(vec![c, h / size, w / size])
            }
            (LayerSpec::Flatten, _) => Ok(vec![input.iter().product()]),
            (LayerSpec::Linear { out_features }, &[_]) => Ok(vec![*out_features]),
            (spec, shape) => Err(shape_err(format!("layer {spec:?} cannot consume per-sample shape {shape:?}"))),
        }
    }
}

/// A layer with its learnable state.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { weight: Tensor, bias: Tensor, stride: usize, pad: usize },
    BatchNorm { gamma: Tensor, beta: Tensor, running_mean: Vec<f64>, running_var: Vec<f64> },
    Relu,
    MaxPool { size: usize },
    AvgPool { size: usize },
    Flatten,
    Linear { weight: Tensor, bias: Tensor },
}

/// Per-layer values kept for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    BatchNorm(BnCache),
    Relu { mask: Vec<bool> },
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Linear { input: Tensor },
}

impl Layer {
    pub fn is_batch_norm(&self) -> bool {
        matches!(self, Layer::BatchNorm { .. })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::BatchNorm { gamma, beta, .. } => vec![gamma, beta],
            _ => vec![],
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Layer::Conv { .. } | Layer::Linear { .. } => &["weight", "bias"],
            Layer::BatchNorm { .. } => &["gamma", "beta"],
            _ => &[],
        }
    }

    /// Forward for every non-BN layer. BN is driven by the model, which
    /// owns the choice of statistics.
    pub(crate) fn forward_plain(&self, x: &Tensor, record: bool) -> Result<(Tensor, Option<LayerCache>)> {
        match self {
            Layer::Conv { weight, bias, stride, pad } => {
                let y = conv2d(x, weight, Some(bias.data()), *stride, *pad)?;
                Ok((y, record.then(|| LayerCache::Conv { input: x.clone() })))
            }
            Layer::Relu => {
                let data: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                let cache = record.then(|| LayerCache::Relu { mask: x.data().iter().map(|&v| v > 0.0).collect() });
                Ok((Tensor::new(x.shape().to_vec(), data)?, cache))
            }
            Layer::MaxPool { size } => {
                let (y, argmax) = max_pool(x, *size)?;
                Ok((y, record.then(|| LayerCache::MaxPool { argmax, input_shape: x.shape().to_vec() })))
            }
            Layer::AvgPool { size } => {
                let y = avg_pool(x, *size)?;
                Ok((y, record.then(|| LayerCache::AvgPool { input_shape: x.shape().to_vec() })))
            }
            Layer::Flatten => {
                let b = x.shape()[0];
                let rest = x.len() / b;
                let y = x.clone().reshape(vec![b, rest])?;
                Ok((y, record.then(|| LayerCache::Flatten { input_shape: x.shape().to_vec() })))
            }
            Layer::Linear { weight, bias } => {
                let (b, fin) = match x.shape() {
                    &[b, f] => (b, f),
                    s => return Err(shape_err(format!("linear expects B×F input, got {s:?}"))),
                };
                let (fout, win) = (weight.shape()[0], weight.shape()[1]);
                if fin != win {
                    return Err(shape_err(format!(
                        "linear: input {:?} vs weight {:?}",
                        x.shape(),
                        weight.shape()
                    )));
                }
                let mut y = vec![0.0; b * fout];
                gemm_nt(b, fin, fout, x.data(), weight.data(), &mut y);
                for row in y.chunks_mut(fout) {
                    for (v, bv) in row.iter_mut().zip(bias.data()) {
                        *v += bv;
                    }
                }
                Ok((Tensor::new(vec![b, fout], y)?, record.then(|| LayerCache::Linear { input: x.clone() })))
            }
            Layer::BatchNorm { .. } => Err(PanError::Contract("batch norm must be run through the model".into())),
        }
    }

    /// Backward: accumulates parameter gradients, returns the input gradient.
    pub(crate) fn backward(&mut self, cache: &LayerCache, grad: &Tensor) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Conv { weight, bias, stride, pad }, LayerCache::Conv { input }) => {
                let g = conv2d_backward(input, weight, grad, *stride, *pad)?;
                add_into(weight.grad_mut(), g.kernel.data());
                add_into(bias.grad_mut(), &g.bias);
                Ok(g.input)
            }
            (Layer::BatchNorm { gamma, beta, .. }, LayerCache::BatchNorm(c)) => {
                let g = bn_backward(c, grad)?;
                add_into(gamma.grad_mut(), &g.gamma);
                add_into(beta.grad_mut(), &g.beta);
                Ok(g.input)
            }
            (Layer::Relu, LayerCache::Relu { mask }) => {
                let data = grad.data().iter().zip(mask).map(|(&g, &m)| if m { g } else { 0.0 }).collect();
                Tensor::new(grad.shape().to_vec(), data)
            }
            (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax, input_shape }) => {
                let mut gin = Tensor::zeros(input_shape);
                let buf = gin.data_mut();
                for (&src, &g) in argmax.iter().zip(grad.data()) {
                    buf[src] += g;
                }
                Ok(gin)
            }
            (Layer::AvgPool { size }, LayerCache::AvgPool { input_shape }) => avg_pool_backward(grad, input_shape, *size),
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => grad.clone().reshape(input_shape.clone()),
            (Layer::Linear { weight, bias }, LayerCache::Linear { input }) => {
                let (b, fin) = (input.shape()[0], input.shape()[1]);
                let fout = weight.shape()[0];
                let mut dw = vec![0.0; fout * fin];
                gemm_tn(b, fout, fin, grad.data(), input.data(), &mut dw);
                add_into(weight.grad_mut(), &dw);
                let gb = bias.grad_mut();
                for row in grad.data().chunks(fout) {
                    add_into(gb, row);
                }
                let mut dx = vec![0.0; b * fin];
                gemm_nn(b, fout, fin, grad.data(), weight.data(), &mut dx);
                Tensor::new(vec![b, fin], dx)
            }
            (layer, cache) => Err(PanError::Contract(format!(
                "backward cache {cache:?} does not belong to layer {layer:?}"
            ))),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn pool_dims(x: &Tensor, size: usize) -> Result<(usize, usize, usize, usize, usize, usize)> {
    match *x.shape() {
        [b, c, h, w] if size >= 1 && size <= h && size <= w => Ok((b, c, h, w, h / size, w / size)),
        _ => Err(shape_err(format!("pool {size} cannot consume {:?}", x.shape()))),
    }
}

fn max_pool(x: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w, oh, ow) = pool_dims(x, size)?;
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

fn avg_pool(x: &Tensor, size: usize) -> Result<Tensor> {
    let (b, c, h, w, oh, ow) = pool_dims(x, size)?;
    let src = x.data();
    let norm = 1.0 / (size * size) as f64;
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        s += src[base + (oy * size + dy) * w + ox * size + dx];
                    }
                }
                out.push(s * norm);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

fn avg_pool_backward(grad: &Tensor, input_shape: &[usize], size: usize) -> Result<Tensor> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut gin = Tensor::zeros(input_shape);
    let buf = gin.data_mut();
    let g = grad.data();
    for plane in 0..input_shape[0] * input_shape[1] {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[(plane * oh + oy) * ow + ox] * norm;
                for dy in 0..size {
                    for dx in 0..size {
                        buf[plane * h * w + (oy * size + dy) * w + ox * size + dx] += v;
                    }
                }
            }
        }
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn avg_pool_averages() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 2.0]).unwrap();
        let y = avg_pool(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0]);
    }

    #[test]
    fn output_shapes_chain() {
        let conv = LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, pad: 1 };
        assert_eq!(conv.output_shape(&[3, 32, 32]).unwrap(), vec![8, 32, 32]);
        assert_eq!(LayerSpec::MaxPool { size: 2 }.output_shape(&[8, 32, 32]).unwrap(), vec![8, 16, 16]);
        assert_eq!(LayerSpec::Flatten.output_shape(&[8, 4, 4]).unwrap(), vec![128]);
        assert!(LayerSpec::Linear { out_features: 3 }.output_shape(&[8, 4, 4]).is_err());
    }
}
