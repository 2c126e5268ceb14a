//! Dense row-major `f64` tensors and the handful of kernels the layer zoo
//! needs: matrix products and 2-D cross-correlation, each with its backward.

use crate::error::{shape_err, PanError, Result};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// Equal shape and values; the gradient buffer is scratch space and ignored.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("zero-sized dimension in {shape:?}")));
        }
        let n = checked_numel(&shape)?;
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n = checked_numel(&shape)?;
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| shape_err("cannot stack an empty list"))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(shape_err(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    }

    /// Row `i` of the leading axis as a new tensor.
    pub fn slice_outer(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(shape_err(format!("slice {i} out of range for {:?}", self.shape)));
        }
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(self.shape[1..].to_vec(), self.data[i * inner..(i + 1) * inner].to_vec())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err(format!("element count of {shape:?} overflows")))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(shape_err(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

/// `c[m×p] = a[m×n] · b[n×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = dims2(a, "matmul lhs")?;
    let (n2, p) = dims2(b, "matmul rhs")?;
    if n != n2 {
        return Err(shape_err(format!(
            "matmul: inner dimensions disagree, {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * p];
    gemm_nn(m, n, p, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, p], out)
}

/// Gradients of `c = a·b` given `dL/dc`: returns `(a_grad, b_grad)` and also
/// accumulates them into the gradient buffers of `a` and `b`.
pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, grad_c: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = dims2(a, "matmul lhs")?;
    let (_, p) = dims2(b, "matmul rhs")?;
    if grad_c.shape() != [m, p] {
        return Err(shape_err(format!(
            "matmul backward: grad {:?} does not match output [{m}, {p}]",
            grad_c.shape()
        )));
    }
    // dA = dC · Bᵀ
    let mut ga = vec![0.0; m * n];
    gemm_nt(m, p, n, grad_c.data(), b.data(), &mut ga);
    // dB = Aᵀ · dC
    let mut gb = vec![0.0; n * p];
    gemm_tn(m, n, p, a.data(), grad_c.data(), &mut gb);
    for (g, v) in a.grad_mut().iter_mut().zip(&ga) {
        *g += v;
    }
    for (g, v) in b.grad_mut().iter_mut().zip(&gb) {
        *g += v;
    }
    Ok((Tensor::new(vec![m, n], ga)?, Tensor::new(vec![n, p], gb)?))
}

/// out[m×p] += a[m×n] · b[n×p]
pub(crate) fn gemm_nn(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×p] · b[n×p]ᵀ
pub(crate) fn gemm_nt(m: usize, p: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..n {
            let brow = &b[j * p..(j + 1) * p];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// out[n×p] += a[m×n]ᵀ · b[m×p]
pub(crate) fn gemm_tn(m: usize, n: usize, p: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the loop vectorizable without fast-math
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Static description of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(shape_err("conv2d: stride must be >= 1"));
        }
        if self.kernel == 0 || self.kernel > h + 2 * self.pad || self.kernel > w + 2 * self.pad {
            return Err(shape_err(format!(
                "conv2d: kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * self.pad,
                w + 2 * self.pad,
                k = self.kernel
            )));
        }
        Ok((
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        ))
    }
}

fn conv_geometry(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<(ConvGeometry, [usize; 4])> {
    let [b, c, h, w] = match input.shape() {
        &[b, c, h, w] => [b, c, h, w],
        s => return Err(shape_err(format!("conv2d: input must be B×C×H×W, got {s:?}"))),
    };
    let (o, kc, kh, kw) = match kernel.shape() {
        &[o, kc, kh, kw] => (o, kc, kh, kw),
        s => return Err(shape_err(format!("conv2d: kernel must be O×C×k×k, got {s:?}"))),
    };
    if kc != c {
        return Err(shape_err(format!(
            "conv2d: kernel {:?} expects {kc} channels, input {:?} has {c}",
            kernel.shape(),
            input.shape()
        )));
    }
    if kh != kw {
        return Err(shape_err(format!("conv2d: kernel must be square, got {kh}x{kw}")));
    }
    let geo = ConvGeometry { in_channels: c, out_channels: o, kernel: kh, stride, pad };
    geo.output_hw(h, w)?;
    Ok((geo, [b, c, h, w]))
}

/// Unfold one C×H×W image into a (C·k·k)×(H'·W') column matrix.
fn im2col(img: &[f64], c: usize, h: usize, w: usize, geo: &ConvGeometry, oh: usize, ow: usize, cols: &mut [f64]) {
    let k = geo.kernel;
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, geo: &ConvGeometry, oh: usize, ow: usize, img: &mut [f64]) {
    let k = geo.kernel;
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. Each output element accumulates its
/// products in (channel, row, col) kernel order and adds the bias last.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&[f64]>, stride: usize, pad: usize) -> Result<Tensor> {
    let (geo, [b, c, h, w]) = conv_geometry(input, kernel, stride, pad)?;
    let (oh, ow) = geo.output_hw(h, w)?;
    let o = geo.out_channels;
    if let Some(bias) = bias {
        if bias.len() != o {
            return Err(shape_err(format!("conv2d: bias length {} != {o} output channels", bias.len())));
        }
    }
    let ckk = c * geo.kernel * geo.kernel;
    let p = oh * ow;
    let in_stride = c * h * w;
    let mut cols = vec![0.0; ckk * p];
    let mut out = vec![0.0; b * o * p];
    for bi in 0..b {
        im2col(&input.data()[bi * in_stride..(bi + 1) * in_stride], c, h, w, &geo, oh, ow, &mut cols);
        let dst = &mut out[bi * o * p..(bi + 1) * o * p];
        gemm_nn(o, ckk, p, kernel.data(), &cols, dst);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.iter().enumerate() {
                dst[oc * p..(oc + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new(vec![b, o, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, kernel: &Tensor, grad_out: &Tensor, stride: usize, pad: usize) -> Result<ConvGrads> {
    let (geo, [b, c, h, w]) = conv_geometry(input, kernel, stride, pad)?;
    let (oh, ow) = geo.output_hw(h, w)?;
    let o = geo.out_channels;
    if grad_out.shape() != [b, o, oh, ow] {
        return Err(shape_err(format!(
            "conv2d backward: grad {:?} does not match output [{b}, {o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let ckk = c * geo.kernel * geo.kernel;
    let p = oh * ow;
    let in_stride = c * h * w;
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    let mut gin = vec![0.0; input.len()];
    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; o];
    for bi in 0..b {
        let dout = &grad_out.data()[bi * o * p..(bi + 1) * o * p];
        im2col(&input.data()[bi * in_stride..(bi + 1) * in_stride], c, h, w, &geo, oh, ow, &mut cols);
        gemm_nt(o, p, ckk, dout, &cols, &mut gk);
        dcols.iter_mut().for_each(|v| *v = 0.0);
        gemm_tn(o, ckk, p, kernel.data(), dout, &mut dcols);
        col2im(&dcols, c, h, w, &geo, oh, ow, &mut gin[bi * in_stride..(bi + 1) * in_stride]);
        for (oc, g) in gb.iter_mut().enumerate() {
            *g += dout[oc * p..(oc + 1) * p].iter().sum::<f64>();
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: gb,
    })
}

impl From<Tensor> for Vec<f64> {
    fn from(t: Tensor) -> Self {
        t.data
    }
}

impl TryFrom<(Vec<usize>, Vec<f64>)> for Tensor {
    type Error = PanError;

    fn try_from((shape, data): (Vec<usize>, Vec<f64>)) -> Result<Self> {
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let a = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn row_times_column() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn zero_matmul() {
        let a = t(&[1, 1], &[0.0]);
        let b = t(&[1, 1], &[7.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_backward_small() {
        let mut a = t(&[1, 2], &[1.0, 2.0]);
        let mut b = t(&[2, 1], &[3.0, 4.0]);
        let g = t(&[1, 1], &[1.0]);
        let (ga, gb) = matmul_backward(&mut a, &mut b, &g).unwrap();
        assert_eq!(ga.data(), &[3.0, 4.0]);
        assert_eq!(gb.data(), &[1.0, 2.0]);
        assert_eq!(a.grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn unit_kernel_scales() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn box_kernel_sums() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn zero_kernel_zero_output() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| i as f64 * 0.37 - 3.0);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let y = conv2d(&x, &k, None, 2, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 4, 3, 2]);
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &k, None, 1, 1), Err(PanError::Shape(_))));
        assert!(conv2d(&x, &k, None, 1, 2).is_ok());
    }

    #[test]
    fn zero_stride_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 1, 1]);
        assert!(conv2d(&x, &k, None, 0, 0).is_err());
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn grad_buffer_matches_data() {
        let mut x = Tensor::zeros(&[3, 2]);
        assert!(x.grad().is_none());
        assert_eq!(x.grad_mut().len(), 6);
    }

    #[test]
    fn stack_and_slice() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.slice_outer(1).unwrap(), b);
    }
}
