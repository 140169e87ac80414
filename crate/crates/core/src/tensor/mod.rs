//! Rank-4 NCHW tensors over f32/f64 with the small set of structural ops the
//! rest of the crate builds on: broadcast elementwise arithmetic, channel
//! split/concat, depth-to-space and its inverse, and seeded random init.
//!
//! Layout is always contiguous row-major with `w` fastest. Operations are
//! pure: inputs are never mutated, outputs are freshly allocated. Debug
//! builds assert that no op produces NaN/Inf.

mod blob;
mod rng;

pub use blob::{read_tensor, read_tensor_header, write_tensor, BlobHeader};
pub use rng::Rng;

use crate::error::{shape_err, Error, Result};
use std::fmt;

/// Scalar element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Dtype> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Dtype> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Validation(format!("unknown dtype name {other:?}"))),
        }
    }
}

/// Floating-point element trait. Only f32 and f64 implement it; everything
/// generic in the crate goes through this.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// (n, c, h, w) dimensions of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Strides in elements for (n, c, h, w); `w` is fastest.
    pub fn strides(&self) -> (usize, usize, usize, usize) {
        (self.c * self.h * self.w, self.h * self.w, self.w, 1)
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Elementwise binary operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
}

/// Weight initialization scheme for `random_init`.
#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    /// Uniform in ±sqrt(1/fan_in) where fan_in = c*h*w of the tensor shape
    /// (axis 0 is treated as the output axis).
    UniformFanIn,
    Constant(f64),
}

/// Dense rank-4 tensor, contiguous row-major, `w` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![T::zero(); shape.count()],
        }
    }

    pub fn filled(shape: Shape, v: T) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![v; shape.count()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.count() {
            return shape_err(format!(
                "buffer of {} elements does not fill shape {shape}",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Seeded random construction.
    pub fn random_init(shape: Shape, scheme: InitScheme, rng: &mut Rng) -> Tensor<T> {
        let mut data = Vec::with_capacity(shape.count());
        match scheme {
            InitScheme::Constant(v) => {
                data.resize(shape.count(), T::from_f64(v));
            }
            InitScheme::UniformFanIn => {
                let fan_in = (shape.c * shape.h * shape.w).max(1);
                let bound = (1.0 / fan_in as f64).sqrt();
                for _ in 0..shape.count() {
                    data.push(T::from_f64(rng.uniform(-bound, bound)));
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        let out = Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        debug_assert!(out.all_finite(), "map produced non-finite values");
        out
    }

    pub fn scale(&self, k: T) -> Tensor<T> {
        self.map(|v| v * k)
    }

    /// In-place accumulation helper for gradient buffers. Shapes must match.
    pub fn acc(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!(
                "accumulate {} into {}",
                other.shape, self.shape
            ));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Convert element type; f32 -> f64 is exact, f64 -> f32 rounds.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Elementwise binary op. `a` fixes the output shape; `b` may have size 1
/// along any axis where the shapes differ and is broadcast there.
pub fn elementwise<T: Scalar>(op: ElemOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let sa = a.shape();
    let sb = b.shape();
    let compatible = |da: usize, db: usize| db == da || db == 1;
    if !(compatible(sa.n, sb.n)
        && compatible(sa.c, sb.c)
        && compatible(sa.h, sb.h)
        && compatible(sa.w, sb.w))
    {
        return shape_err(format!("elementwise {sa} vs {sb}: rhs must match or be 1 per axis"));
    }
    let apply = |x: T, y: T| match op {
        ElemOp::Add => x + y,
        ElemOp::Sub => x - y,
        ElemOp::Mul => x * y,
    };
    let mut out = Vec::with_capacity(sa.count());
    if sa == sb {
        for (&x, &y) in a.data().iter().zip(b.data().iter()) {
            out.push(apply(x, y));
        }
    } else {
        let (bn, bc, bh, bw) = sb.strides();
        let bn = if sb.n == 1 { 0 } else { bn };
        let bc = if sb.c == 1 { 0 } else { bc };
        let bh = if sb.h == 1 { 0 } else { bh };
        let bw = if sb.w == 1 { 0 } else { bw };
        let bd = b.data();
        let ad = a.data();
        let mut i = 0;
        for n in 0..sa.n {
            for c in 0..sa.c {
                for h in 0..sa.h {
                    let base = n * bn + c * bc + h * bh;
                    for w in 0..sa.w {
                        out.push(apply(ad[i], bd[base + w * bw]));
                        i += 1;
                    }
                }
            }
        }
    }
    let out = Tensor { shape: sa, data: out };
    debug_assert!(out.all_finite(), "elementwise produced non-finite values");
    Ok(out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElemOp::Add, a, b)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElemOp::Sub, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElemOp::Mul, a, b)
}

/// Split along the channel axis into `s` equal parts, preserving order.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Vec<Tensor<T>>> {
    let sh = x.shape();
    if s == 0 || sh.c % s != 0 {
        return shape_err(format!("cannot split {} channels into {s} equal parts", sh.c));
    }
    let cs = sh.c / s;
    let mut parts = Vec::with_capacity(s);
    for p in 0..s {
        let mut part = Tensor::zeros(Shape::new(sh.n, cs, sh.h, sh.w));
        for n in 0..sh.n {
            for c in 0..cs {
                let src = x.offset(n, p * cs + c, 0, 0);
                let dst = part.offset(n, c, 0, 0);
                let plane = sh.h * sh.w;
                part.data_mut()[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
            }
        }
        parts.push(part);
    }
    Ok(parts)
}

/// Concatenate along the channel axis. All parts must agree on n, h, w.
pub fn concat_channels<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = match parts.first() {
        Some(t) => t.shape(),
        None => return shape_err("concat of zero tensors"),
    };
    let mut total_c = 0;
    for p in parts {
        let sh = p.shape();
        if sh.n != first.n || sh.h != first.h || sh.w != first.w {
            return shape_err(format!("concat part {} incompatible with {}", sh, first));
        }
        total_c += sh.c;
    }
    let mut out = Tensor::zeros(Shape::new(first.n, total_c, first.h, first.w));
    let plane = first.h * first.w;
    for n in 0..first.n {
        let mut c_base = 0;
        for p in parts {
            let pc = p.shape().c;
            for c in 0..pc {
                let src = p.offset(n, c, 0, 0);
                let dst = out.offset(n, c_base + c, 0, 0);
                out.data_mut()[dst..dst + plane].copy_from_slice(&p.data()[src..src + plane]);
            }
            c_base += pc;
        }
    }
    Ok(out)
}

/// Rearrange (n, c, h, w) -> (n, c/f^2, h*f, w*f).
///
/// Input channel k = j*f^2 + (dy*f + dx) maps to output channel j at spatial
/// offset (dy, dx) inside each f x f output cell; the cell is filled
/// row-major. `space_to_depth` with the same factor is the exact inverse.
pub fn depth_to_space<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if f == 0 || sh.c % (f * f) != 0 {
        return shape_err(format!("depth_to_space factor {f} does not divide {} channels", sh.c));
    }
    let oc = sh.c / (f * f);
    let mut out = Tensor::zeros(Shape::new(sh.n, oc, sh.h * f, sh.w * f));
    for n in 0..sh.n {
        for j in 0..oc {
            for dy in 0..f {
                for dx in 0..f {
                    let k = j * f * f + dy * f + dx;
                    for y in 0..sh.h {
                        for xw in 0..sh.w {
                            let v = x.at(n, k, y, xw);
                            out.set(n, j, y * f + dy, xw * f + dx, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of `depth_to_space` with the same factor.
pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, f: usize) -> Result<Tensor<T>> {
    let sh = x.shape();
    if f == 0 || sh.h % f != 0 || sh.w % f != 0 {
        return shape_err(format!(
            "space_to_depth factor {f} does not divide spatial dims {}x{}",
            sh.h, sh.w
        ));
    }
    let (oh, ow) = (sh.h / f, sh.w / f);
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c * f * f, oh, ow));
    for n in 0..sh.n {
        for j in 0..sh.c {
            for dy in 0..f {
                for dx in 0..f {
                    let k = j * f * f + dy * f + dx;
                    for y in 0..oh {
                        for xw in 0..ow {
                            let v = x.at(n, j, y * f + dy, xw * f + dx);
                            out.set(n, k, y, xw, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mirror along the width axis: out[.., w] = in[.., W-1-w].
pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let sh = x.shape();
    let mut out = Tensor::zeros(sh);
    for n in 0..sh.n {
        for c in 0..sh.c {
            for h in 0..sh.h {
                for w in 0..sh.w {
                    out.set(n, c, h, w, x.at(n, c, h, sh.w - 1 - w));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: Shape) -> Tensor<f64> {
        let data = (0..shape.count()).map(|i| i as f64).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn add_matches_scalar_loop() {
        let a = seq(Shape::new(2, 3, 2, 2));
        let b = a.map(|v| v * 0.5 + 1.0);
        let c = add(&a, &b).unwrap();
        for i in 0..a.data().len() {
            assert_eq!(c.data()[i], a.data()[i] + b.data()[i]);
        }
    }

    #[test]
    fn mul_by_zeros_is_zero() {
        let a = seq(Shape::new(1, 2, 3, 3));
        let z = Tensor::zeros(a.shape());
        let c = mul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadcast_per_channel_matches_scalar_reference() {
        // (n,c,1,1) rhs against (n,c,h,w) lhs, checked against an explicit
        // scalar loop.
        let a = seq(Shape::new(2, 3, 4, 5));
        let b = seq(Shape::new(2, 3, 1, 1));
        let c = mul(&a, &b).unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let want = a.at(n, ch, h, w) * b.at(n, ch, 0, 0);
                        assert_eq!(c.at(n, ch, h, w), want);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_per_position_matches_scalar_reference() {
        // (n,1,h,w) rhs broadcast across channels.
        let a = seq(Shape::new(2, 3, 2, 3));
        let b = seq(Shape::new(2, 1, 2, 3));
        let c = mul(&a, &b).unwrap();
        for n in 0..2 {
            for ch in 0..3 {
                for h in 0..2 {
                    for w in 0..3 {
                        let want = a.at(n, ch, h, w) * b.at(n, 0, h, w);
                        assert_eq!(c.at(n, ch, h, w), want);
                    }
                }
            }
        }
    }

    #[test]
    fn broadcast_rejects_non_unit_mismatch() {
        let a = seq(Shape::new(1, 4, 2, 2));
        let b = seq(Shape::new(1, 2, 2, 2));
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn split_eight_channels_into_four() {
        let x = seq(Shape::new(1, 8, 2, 2));
        let parts = split_channels(&x, 4).unwrap();
        assert_eq!(parts.len(), 4);
        for (p, part) in parts.iter().enumerate() {
            assert_eq!(part.shape(), Shape::new(1, 2, 2, 2));
            for c in 0..2 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(part.at(0, c, h, w), x.at(0, p * 2 + c, h, w));
                    }
                }
            }
        }
    }

    #[test]
    fn split_one_is_identity() {
        let x = seq(Shape::new(2, 5, 3, 1));
        let parts = split_channels(&x, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], x);
    }

    #[test]
    fn split_rejects_indivisible() {
        let x = seq(Shape::new(1, 7, 2, 2));
        assert!(split_channels(&x, 3).is_err());
    }

    #[test]
    fn concat_inverts_split_bit_exact() {
        let x = seq(Shape::new(2, 12, 3, 4));
        for s in [1, 2, 3, 4, 6, 12] {
            let parts = split_channels(&x, s).unwrap();
            let back = concat_channels(&parts).unwrap();
            assert_eq!(back, x, "split({s}) then concat is not identity");
        }
    }

    #[test]
    fn concat_of_single_tensor_is_identity() {
        let x = seq(Shape::new(1, 3, 2, 2));
        assert_eq!(concat_channels(std::slice::from_ref(&x)).unwrap(), x);
    }

    #[test]
    fn concat_channel_index_mapping() {
        let a = seq(Shape::new(1, 2, 1, 1));
        let b = seq(Shape::new(1, 3, 1, 1)).map(|v| v + 10.0);
        let c = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.shape().c, 5);
        assert_eq!(c.at(0, 0, 0, 0), a.at(0, 0, 0, 0));
        assert_eq!(c.at(0, 1, 0, 0), a.at(0, 1, 0, 0));
        for k in 0..3 {
            assert_eq!(c.at(0, 2 + k, 0, 0), b.at(0, k, 0, 0));
        }
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = seq(Shape::new(1, 2, 2, 2));
        let b = seq(Shape::new(1, 2, 3, 2));
        assert!(concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn depth_to_space_factor2_hand_case() {
        // Four channels [a, b, c, d] at one position become the 2x2 cell
        // [[a, b], [c, d]].
        let x = Tensor::from_vec(
            Shape::new(1, 4, 1, 1),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let y = depth_to_space(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.at(0, 0, 0, 0), 1.0);
        assert_eq!(y.at(0, 0, 0, 1), 2.0);
        assert_eq!(y.at(0, 0, 1, 0), 3.0);
        assert_eq!(y.at(0, 0, 1, 1), 4.0);
    }

    #[test]
    fn depth_to_space_factor1_is_identity() {
        let x = seq(Shape::new(2, 3, 4, 5));
        assert_eq!(depth_to_space(&x, 1).unwrap(), x);
    }

    #[test]
    fn space_to_depth_inverts_depth_to_space() {
        let x = seq(Shape::new(2, 18, 3, 4));
        for f in [1, 3] {
            let y = depth_to_space(&x, f).unwrap();
            let back = space_to_depth(&y, f).unwrap();
            assert_eq!(back, x, "factor {f} round trip failed");
        }
    }

    #[test]
    fn flip_horizontal_is_involution() {
        let x = seq(Shape::new(2, 3, 2, 5));
        let y = flip_horizontal(&flip_horizontal(&x));
        assert_eq!(y, x);
        let f = flip_horizontal(&x);
        assert_eq!(f.at(0, 0, 0, 0), x.at(0, 0, 0, 4));
    }

    #[test]
    fn constant_init_fills_exactly() {
        let mut rng = Rng::new(7);
        let t: Tensor<f32> =
            Tensor::random_init(Shape::new(1, 2, 3, 3), InitScheme::Constant(0.0), &mut rng);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_tensor() {
        let make = || {
            let mut rng = Rng::new(42);
            Tensor::<f64>::random_init(Shape::new(2, 4, 3, 3), InitScheme::UniformFanIn, &mut rng)
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn uniform_fan_in_sample_mean_near_zero() {
        // Mean of N uniform draws in ±a has std a/sqrt(3N); check 3 sigma.
        let mut rng = Rng::new(1234);
        let shape = Shape::new(1, 100, 100, 10); // 1e5 draws, fan_in = 1e5
        let t: Tensor<f64> = Tensor::random_init(shape, InitScheme::UniformFanIn, &mut rng);
        let n = shape.count() as f64;
        let a = (1.0 / (shape.c * shape.h * shape.w) as f64).sqrt();
        let mean = t.sum() / n;
        let tol = 3.0 * a / (3.0 * n).sqrt();
        assert!(
            mean.abs() < tol,
            "sample mean {mean} outside 3 sigma bound {tol}"
        );
        let bound_ok = t.data().iter().all(|&v| v > -a && v < a);
        assert!(bound_ok, "draw escaped ±sqrt(1/fan_in) bound");
    }

    #[test]
    fn cast_f32_f64_round_trip_exact() {
        let mut rng = Rng::new(9);
        let t: Tensor<f32> =
            Tensor::random_init(Shape::new(1, 3, 4, 4), InitScheme::UniformFanIn, &mut rng);
        let back: Tensor<f32> = t.cast::<f64>().cast::<f32>();
        assert_eq!(back, t);
    }
}
