//! Dense row-major tensors and the numeric kernels shared by the whole crate.
//!
//! The production element type is `f32` (`Tensor`); every kernel is generic
//! over [`Element`] so gradient-check oracles can run the identical code in
//! `f64` (`Tensor64`).

use crate::error::{Error, Result};

/// Scalar types the kernels operate on. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// C(m×n) = alpha·A(m×k)·B(k×n) + beta·C with explicit (row, col)
    /// strides per operand, so transposes are views instead of copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    /// Row-major contiguous convenience wrapper.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        Self::gemm_strided(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c);
    }
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// Dense row-major tensor. `data.len()` always equals the product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBase<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

/// The production 32-bit tensor.
pub type Tensor = TensorBase<f32>;
/// 64-bit twin used by gradient-check oracles.
pub type Tensor64 = TensorBase<f64>;

impl<E: Element> TensorBase<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in shape {shape:?}")));
        }
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                want
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![E::ZERO; n] }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterprets the flat data under a new shape of equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) into {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                want
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Interprets the tensor as NCHW, failing on other ranks.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::Shape(format!("expected rank-4 NCHW tensor, got {other:?}"))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn convert<T: Element>(&self) -> TensorBase<T> {
        TensorBase { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect() }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "mul")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    pub fn scalar_mul(&self, s: E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&a| a * s).collect() }
    }

    /// In-place `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: E) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + s * b;
        }
        Ok(())
    }

    /// Elementwise sign with sign(0) = 0.
    pub fn sign(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&a| {
                    if a > E::ZERO {
                        E::ONE
                    } else if a < E::ZERO {
                        -E::ONE
                    } else {
                        E::ZERO
                    }
                })
                .collect(),
        }
    }

    pub fn clamp(&self, lo: E, hi: E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| if a < lo { lo } else if a > hi { hi } else { a }).collect(),
        }
    }

    pub fn clamp_in_place(&mut self, lo: E, hi: E) {
        for a in &mut self.data {
            if *a < lo {
                *a = lo;
            } else if *a > hi {
                *a = hi;
            }
        }
    }

    /// Clamps each element into `[center - radius, center + radius]`.
    pub fn clamp_ball(&mut self, center: &Self, radius: E) -> Result<()> {
        self.check_same_shape(center, "clamp_ball")?;
        for (a, &c) in self.data.iter_mut().zip(&center.data) {
            let lo = c - radius;
            let hi = c + radius;
            if *a < lo {
                *a = lo;
            } else if *a > hi {
                *a = hi;
            }
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
    }

    pub fn linf_distance(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "linf_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Row-wise argmax of a rank-2 tensor; ties resolve to the first maximum.
    pub fn argmax_per_row(&self) -> Result<Vec<usize>> {
        let (rows, cols) = match self.shape.as_slice() {
            &[r, c] => (r, c),
            other => return Err(Error::Shape(format!("argmax_per_row expects rank 2, got {other:?}"))),
        };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &self.data[r * cols..(r + 1) * cols];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    /// Argmax of a rank-1 tensor (or any tensor flattened); ties to first.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Pooling / convolution window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl WindowSpec {
    pub fn new(kernel_h: usize, kernel_w: usize, stride_h: usize, stride_w: usize, pad_h: usize, pad_w: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 || stride_h == 0 || stride_w == 0 {
            return Err(Error::Param("kernel and stride must be positive".into()));
        }
        if pad_h >= kernel_h || pad_w >= kernel_w {
            return Err(Error::Param(format!(
                "padding ({pad_h},{pad_w}) must be smaller than kernel ({kernel_h},{kernel_w})"
            )));
        }
        Ok(Self { kernel_h, kernel_w, stride_h, stride_w, pad_h, pad_w })
    }

    /// Square kernel/stride, no padding.
    pub fn square(kernel: usize, stride: usize) -> Result<Self> {
        Self::new(kernel, kernel, stride, stride, 0, 0)
    }

    pub fn square_padded(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(kernel, kernel, stride, stride, pad, pad)
    }

    /// Output spatial dims: floor((in + 2·pad − kernel)/stride) + 1, both ≥ 1.
    pub fn out_dims(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let oh = (in_h + 2 * self.pad_h).checked_sub(self.kernel_h).map(|d| d / self.stride_h + 1);
        let ow = (in_w + 2 * self.pad_w).checked_sub(self.kernel_w).map(|d| d / self.stride_w + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "window {self:?} produces empty output for {in_h}×{in_w} input"
            ))),
        }
    }

    /// Windows overlap when the stride is smaller than the kernel.
    pub fn overlapping(&self) -> bool {
        self.stride_h < self.kernel_h || self.stride_w < self.kernel_w
    }
}

/// For each pooled output position, the flat index (into the input tensor's
/// data) of the first row-major maximal element of its window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgIndices {
    pub out_shape: Vec<usize>,
    pub idx: Vec<usize>,
}

/// Visits every pooling window of an NCHW tensor in row-major output order.
/// The callback receives the flat output index and the valid (unpadded) input
/// flat indices of that window, also in row-major window order.
pub(crate) fn for_each_window<E: Element>(
    input: &TensorBase<E>,
    spec: &WindowSpec,
    mut visit: impl FnMut(usize, &[usize]),
) -> Result<(usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    let mut window = Vec::with_capacity(spec.kernel_h * spec.kernel_w);
    let mut out_idx = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    window.clear();
                    let y0 = (oy * spec.stride_h) as isize - spec.pad_h as isize;
                    let x0 = (ox * spec.stride_w) as isize - spec.pad_w as isize;
                    for ky in 0..spec.kernel_h {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..spec.kernel_w {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            window.push(plane + y as usize * w + x as usize);
                        }
                    }
                    visit(out_idx, &window);
                    out_idx += 1;
                }
            }
        }
    }
    Ok((oh, ow))
}

/// Max-pooling forward pass. Ties break to the first maximal element in
/// row-major window order; padded positions never participate.
pub fn maxpool_forward<E: Element>(input: &TensorBase<E>, spec: &WindowSpec) -> Result<(TensorBase<E>, ArgIndices)> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let mut idx = vec![0usize; n * c * oh * ow];
    let data = input.data();
    for_each_window(input, spec, |oi, window| {
        debug_assert!(!window.is_empty());
        let mut best = window[0];
        for &p in &window[1..] {
            if data[p] > data[best] {
                best = p;
            }
        }
        out[oi] = data[best];
        idx[oi] = best;
    })?;
    let out_shape = vec![n, c, oh, ow];
    Ok((TensorBase::new(out_shape.clone(), out)?, ArgIndices { out_shape, idx }))
}

/// Average pooling over valid (unpadded) window positions.
pub fn avgpool_forward<E: Element>(input: &TensorBase<E>, spec: &WindowSpec) -> Result<TensorBase<E>> {
    let (n, c, h, w) = input.dims4()?;
    let (oh, ow) = spec.out_dims(h, w)?;
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let data = input.data();
    for_each_window(input, spec, |oi, window| {
        let mut acc = E::ZERO;
        for &p in window {
            acc = acc + data[p];
        }
        out[oi] = acc / E::from_f64(window.len() as f64);
    })?;
    Ok(TensorBase::new(vec![n, c, oh, ow], out)?)
}

/// Backward of [`avgpool_forward`]: each input position receives an equal
/// share of every window it belongs to.
pub fn avgpool_backward<E: Element>(
    input: &TensorBase<E>,
    spec: &WindowSpec,
    upstream: &TensorBase<E>,
) -> Result<TensorBase<E>> {
    let mut grad = TensorBase::zeros(input.shape());
    let up = upstream.data();
    let g = grad.data_mut();
    for_each_window(input, spec, |oi, window| {
        let share = up[oi] / E::from_f64(window.len() as f64);
        for &p in window {
            g[p] = g[p] + share;
        }
    })?;
    Ok(grad)
}

fn im2col<E: Element>(
    data: &[E],
    c: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
    oh: usize,
    ow: usize,
    col: &mut Vec<E>,
) {
    // builds the (C·kh·kw) × (oh·ow) patch matrix by strictly sequential
    // pushes, so the buffer can be reused without pre-zeroing
    col.clear();
    for ci in 0..c {
        let plane = ci * h * w;
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                for oy in 0..oh {
                    let y = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                    if y < 0 || y >= h as isize {
                        col.extend(std::iter::repeat(E::ZERO).take(ow));
                        continue;
                    }
                    let src_row = plane + y as usize * w;
                    for ox in 0..ow {
                        let x = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                        col.push(if x < 0 || x >= w as isize { E::ZERO } else { data[src_row + x as usize] });
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    spec: &WindowSpec,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    let cols = oh * ow;
    for ci in 0..c {
        let plane = ci * h * w;
        for ky in 0..spec.kernel_h {
            for kx in 0..spec.kernel_w {
                let row = ((ci * spec.kernel_h + ky) * spec.kernel_w + kx) * cols;
                for oy in 0..oh {
                    let y = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst_row = plane + y as usize * w;
                    for ox in 0..ow {
                        let x = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        out[dst_row + x as usize] = out[dst_row + x as usize] + col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation: input NCHW, weight OIHW, optional bias of length O.
pub fn conv2d<E: Element>(
    input: &TensorBase<E>,
    weight: &TensorBase<E>,
    bias: Option<&TensorBase<E>>,
    spec: &WindowSpec,
) -> Result<TensorBase<E>> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c}, weight expects {wc}"
        )));
    }
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::Shape(format!(
            "conv2d kernel mismatch: weight {kh}×{kw} vs spec {}×{}",
            spec.kernel_h, spec.kernel_w
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::Shape(format!("conv2d bias shape {:?}, expected [{o}]", b.shape())));
        }
    }
    let (oh, ow) = spec.out_dims(h, w)?;
    let k = c * kh * kw;
    let cols = oh * ow;
    let mut col = Vec::with_capacity(k * cols);
    let mut out = vec![E::ZERO; n * o * cols];
    for ni in 0..n {
        im2col(&input.data()[ni * c * h * w..], c, h, w, spec, oh, ow, &mut col);
        E::gemm(o, k, cols, E::ONE, weight.data(), &col, E::ZERO, &mut out[ni * o * cols..(ni + 1) * o * cols]);
    }
    if let Some(b) = bias {
        for ni in 0..n {
            for oi in 0..o {
                let bv = b.data()[oi];
                for v in &mut out[(ni * o + oi) * cols..(ni * o + oi + 1) * cols] {
                    *v = *v + bv;
                }
            }
        }
    }
    TensorBase::new(vec![n, o, oh, ow], out)
}

/// Gradient of [`conv2d`] w.r.t. its input.
pub fn conv2d_backward_input<E: Element>(
    input_shape: &[usize],
    weight: &TensorBase<E>,
    upstream: &TensorBase<E>,
    spec: &WindowSpec,
) -> Result<TensorBase<E>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        other => return Err(Error::Shape(format!("expected rank-4 input shape, got {other:?}"))),
    };
    let (o, _, kh, kw) = weight.dims4()?;
    let (un, uo, oh, ow) = upstream.dims4()?;
    if un != n || uo != o {
        return Err(Error::Shape("conv2d_backward_input upstream shape mismatch".into()));
    }
    let k = c * kh * kw;
    let cols = oh * ow;
    let mut dcol = vec![E::ZERO; k * cols];
    let mut grad = TensorBase::zeros(input_shape);
    for ni in 0..n {
        // weight^T as a strided view of the O×K matrix
        E::gemm_strided(
            k,
            o,
            cols,
            E::ONE,
            weight.data(),
            1,
            k as isize,
            &upstream.data()[ni * o * cols..(ni + 1) * o * cols],
            cols as isize,
            1,
            E::ZERO,
            &mut dcol,
        );
        col2im(&dcol, c, h, w, spec, oh, ow, &mut grad.data_mut()[ni * c * h * w..(ni + 1) * c * h * w]);
    }
    Ok(grad)
}

/// Gradients of [`conv2d`] w.r.t. weight and bias, accumulated over the batch.
pub fn conv2d_backward_params<E: Element>(
    input: &TensorBase<E>,
    weight_shape: &[usize],
    upstream: &TensorBase<E>,
    spec: &WindowSpec,
) -> Result<(TensorBase<E>, TensorBase<E>)> {
    let (n, c, h, w) = input.dims4()?;
    let (o, _, kh, kw) = match weight_shape {
        &[o, i, kh, kw] => (o, i, kh, kw),
        other => return Err(Error::Shape(format!("expected OIHW weight shape, got {other:?}"))),
    };
    let (_, _, oh, ow) = upstream.dims4()?;
    let k = c * kh * kw;
    let cols = oh * ow;
    let mut col = Vec::with_capacity(k * cols);
    let mut dw = TensorBase::zeros(weight_shape);
    let mut db = TensorBase::zeros(&[o]);
    for ni in 0..n {
        im2col(&input.data()[ni * c * h * w..], c, h, w, spec, oh, ow, &mut col);
        let up = &upstream.data()[ni * o * cols..(ni + 1) * o * cols];
        // dW += up · col^T, with col^T as a strided view
        E::gemm_strided(o, cols, k, E::ONE, up, cols as isize, 1, &col, 1, cols as isize, E::ONE, dw.data_mut());
        for oi in 0..o {
            let mut acc = E::ZERO;
            for v in &up[oi * cols..(oi + 1) * cols] {
                acc = acc + *v;
            }
            db.data_mut()[oi] = db.data_mut()[oi] + acc;
        }
    }
    Ok((dw, db))
}

/// Nearest-neighbor resize to (new_h, new_w) followed by zero-padding into a
/// (target_h, target_w) canvas with the resized image placed at the offsets.
pub fn resize_and_pad<E: Element>(
    input: &TensorBase<E>,
    new_h: usize,
    new_w: usize,
    target_h: usize,
    target_w: usize,
    offset_h: usize,
    offset_w: usize,
) -> Result<TensorBase<E>> {
    let (n, c, h, w) = input.dims4()?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::Param("resize dims must be positive".into()));
    }
    if new_h > target_h || new_w > target_w {
        return Err(Error::Param(format!(
            "resize ({new_h},{new_w}) exceeds target ({target_h},{target_w})"
        )));
    }
    if offset_h + new_h > target_h || offset_w + new_w > target_w {
        return Err(Error::Bounds(format!(
            "offsets ({offset_h},{offset_w}) place {new_h}×{new_w} outside {target_h}×{target_w}"
        )));
    }
    let mut out = TensorBase::zeros(&[n, c, target_h, target_w]);
    let src = input.data();
    let dst = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let sp = (ni * c + ci) * h * w;
            let dp = (ni * c + ci) * target_h * target_w;
            for y in 0..new_h {
                let sy = y * h / new_h;
                for x in 0..new_w {
                    let sx = x * w / new_w;
                    dst[dp + (y + offset_h) * target_w + (x + offset_w)] = src[sp + sy * w + sx];
                }
            }
        }
    }
    Ok(out)
}

/// Discrete Gaussian kernel of odd size, normalized to sum 1.
pub fn gaussian_kernel(size: usize, sigma: f32) -> Result<Tensor> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Param(format!("gaussian kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let c = (size / 2) as f64;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut data = vec![0.0f32; size * size];
    let mut total = 0.0f64;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / s2).exp();
            data[y * size + x] = v as f32;
            total += v;
        }
    }
    for v in &mut data {
        *v = (*v as f64 / total) as f32;
    }
    Tensor::new(vec![size, size], data)
}

/// Convolves each channel of an NCHW tensor with one 2-D kernel, same-size
/// output (zero padding). Used for translation-invariant gradient smoothing.
pub fn depthwise_conv_same(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (kh, kw) = match kernel.shape() {
        &[kh, kw] => (kh, kw),
        other => return Err(Error::Shape(format!("expected rank-2 kernel, got {other:?}"))),
    };
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Param("depthwise kernel must have odd dims".into()));
    }
    let (py, px) = (kh / 2, kw / 2);
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    let kd = kernel.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f32;
                for ky in 0..kh {
                    let sy = y as isize + ky as isize - py as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let sx = x as isize + kx as isize - px as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += kd[ky * kw + kx] * src[base + sy as usize * w + sx as usize];
                    }
                }
                dst[base + y * w + x] = acc;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &WindowSpec) -> Tensor {
        let (n, c, h, w) = input.dims4().unwrap();
        let (o, _, kh, kw) = weight.dims4().unwrap();
        let (oh, ow) = spec.out_dims(h, w).unwrap();
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        for ni in 0..n {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.data()[oi]);
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let y = (oy * spec.stride_h + ky) as isize - spec.pad_h as isize;
                                    let x = (ox * spec.stride_w + kx) as isize - spec.pad_w as isize;
                                    if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((ni * c + ci) * h + y as usize) * w + x as usize]
                                        * weight.data()[((oi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * o + oi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn conv2d_hand_computed_2x2() {
        let input = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let weight = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let spec = WindowSpec::square(2, 1).unwrap();
        let out = conv2d(&input, &weight, None, &spec).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let weight = Tensor::zeros(&[3, 2, 3, 3]);
        let spec = WindowSpec::square_padded(3, 1, 1).unwrap();
        let out = conv2d(&input, &weight, None, &spec).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = rand_tensor(&mut rng, &[1, 1, 4, 4]);
        let weight = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let spec = WindowSpec::square(1, 1).unwrap();
        let out = conv2d(&input, &weight, None, &spec).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (shape, o, k, s, p) in [
            ([1usize, 1, 6, 6], 2usize, 3usize, 1usize, 0usize),
            ([2, 3, 8, 8], 4, 3, 1, 1),
            ([2, 8, 16, 16], 6, 3, 2, 1),
            ([1, 4, 7, 9], 3, 2, 2, 0),
        ] {
            let input = rand_tensor(&mut rng, &shape);
            let weight = rand_tensor(&mut rng, &[o, shape[1], k, k]);
            let bias = rand_tensor(&mut rng, &[o]);
            let spec = WindowSpec::square_padded(k, s, p).unwrap();
            let fast = conv2d(&input, &weight, Some(&bias), &spec).unwrap();
            let slow = naive_conv2d(&input, &weight, Some(&bias), &spec);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                let denom = b.abs().max(1.0);
                assert!((a - b).abs() / denom < 1e-4, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch_is_error() {
        let input = Tensor::zeros(&[1, 2, 4, 4]);
        let weight = Tensor::zeros(&[1, 3, 3, 3]);
        let spec = WindowSpec::square(3, 1).unwrap();
        assert!(matches!(conv2d(&input, &weight, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn maxpool_known_grid() {
        // 4×4 map pooled by a 2×2/stride-2 window.
        let input = Tensor::new(
            vec![1, 1, 4, 4],
            vec![0.1, -0.2, 1.9, 1.4, 0.0, -0.5, 2.3, 0.7, -0.4, 0.9, 1.0, -2.0, 0.7, 0.6, 0.5, 1.7],
        )
        .unwrap();
        let (out, arg) = maxpool_forward(&input, &WindowSpec::square(2, 2).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.1, 2.3, 0.9, 1.7]);
        assert_eq!(arg.idx, vec![0, 6, 9, 15]);
    }

    #[test]
    fn maxpool_constant_input_is_constant() {
        let input = Tensor::filled(&[1, 2, 4, 4], 0.25);
        let (out, _) = maxpool_forward(&input, &WindowSpec::square(2, 2).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn maxpool_1x1_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = rand_tensor(&mut rng, &[1, 1, 3, 5]);
        let (out, _) = maxpool_forward(&input, &WindowSpec::square(1, 1).unwrap()).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn maxpool_matches_bruteforce_all_small_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = rand_tensor(&mut rng, &[1, 1, 6, 6]);
        for k in 1..=3usize {
            for s in 1..=3usize {
                let spec = WindowSpec::square(k, s).unwrap();
                let (out, _) = maxpool_forward(&input, &spec).unwrap();
                let (oh, ow) = spec.out_dims(6, 6).unwrap();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f32::NEG_INFINITY;
                        for ky in 0..k {
                            for kx in 0..k {
                                m = m.max(input.data()[(oy * s + ky) * 6 + ox * s + kx]);
                            }
                        }
                        assert_eq!(out.data()[oy * ow + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn elementwise_kit_definitions() {
        let t = Tensor::new(vec![3], vec![-2.5, 0.0, 7.0]).unwrap();
        assert_eq!(t.sign().data(), &[-1.0, 0.0, 1.0]);
        let c = Tensor::new(vec![3], vec![-0.1, 0.5, 1.2]).unwrap();
        assert_eq!(c.clamp(0.0, 1.0).data(), &[0.0, 0.5, 1.0]);
        let n = Tensor::new(vec![2], vec![3.0, -4.0]).unwrap();
        assert_eq!(n.l1_norm(), 7.0);
        assert_eq!(n.l2_norm(), 5.0);
    }

    #[test]
    fn elementwise_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        assert!(matches!(a.mul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn reductions_are_order_independent_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_tensor(&mut rng, &[257]);
        let mut permuted: Vec<f32> = t.data().to_vec();
        permuted.reverse();
        permuted.rotate_left(41);
        let p = Tensor::new(vec![257], permuted).unwrap();
        for (a, b) in [(t.sum(), p.sum()), (t.l1_norm(), p.l1_norm()), (t.l2_norm(), p.l2_norm())] {
            let denom = a.abs().max(1e-12);
            assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn resize_identity_and_upsample() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_tensor(&mut rng, &[1, 3, 32, 32]);
        let same = resize_and_pad(&img, 32, 32, 32, 32, 0, 0).unwrap();
        assert_eq!(same.data(), img.data());

        let small = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_and_pad(&small, 4, 4, 4, 4, 0, 0).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn resize_pads_border_with_zeros() {
        let small = Tensor::filled(&[1, 1, 2, 2], 9.0);
        let padded = resize_and_pad(&small, 2, 2, 5, 5, 1, 2).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let inside = (1..3).contains(&y) && (2..4).contains(&x);
                assert_eq!(padded.data()[y * 5 + x], if inside { 9.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn resize_offsets_out_of_range_is_error() {
        let img = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(resize_and_pad(&img, 3, 3, 4, 4, 2, 0), Err(Error::Bounds(_))));
    }

    #[test]
    fn gaussian_kernel_properties() {
        assert_eq!(gaussian_kernel(1, 1.0).unwrap().data(), &[1.0]);
        assert!(matches!(gaussian_kernel(4, 1.0), Err(Error::Param(_))));
        for (size, sigma) in [(3usize, 1.0f32), (5, 0.5), (7, 3.0), (9, 2.2)] {
            let k = gaussian_kernel(size, sigma).unwrap();
            assert!((k.sum() - 1.0).abs() < 1e-6);
        }
        let k = gaussian_kernel(3, 1.0).unwrap();
        let center = k.data()[4];
        assert!(k.data().iter().all(|&v| v <= center));
        // symmetric under quarter turns
        let d = k.data();
        for (a, b) in [(0, 2), (2, 8), (8, 6), (6, 0), (1, 5), (5, 7), (7, 3)] {
            assert!((d[a] - d[b]).abs() < 1e-7);
        }
    }

    #[test]
    fn window_spec_rejects_bad_geometry() {
        assert!(WindowSpec::new(0, 1, 1, 1, 0, 0).is_err());
        assert!(WindowSpec::new(2, 2, 1, 1, 2, 0).is_err());
        let spec = WindowSpec::square(5, 1).unwrap();
        assert!(spec.out_dims(3, 3).is_err());
    }

    #[test]
    fn argmax_per_row_breaks_ties_first() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -1.0, -2.0]).unwrap();
        assert_eq!(t.argmax_per_row().unwrap(), vec![1, 0]);
    }
}
