//! Two-hidden-layer tanh MLP with hand-written backpropagation, generic over
//! `f32` (training) and `f64` (gradient checks).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
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
        rsc: isize,
        csc: isize,
    );
}

/// Rational minimax approximation of tanh, a few ulp from `f32::tanh` and
/// branch-free so the activation loops vectorize.
#[inline]
pub fn tanh_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] = [
        4.893_524_6e-3,
        6.372_619_3e-4,
        1.485_722_4e-5,
        5.122_297e-8,
        -8.604_672e-11,
        2.000_188e-13,
        -2.760_768_5e-16,
    ];
    const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = A[6];
    for &a in A[..6].iter().rev() {
        p = p * x2 + a;
    }
    let p = p * x;
    let mut q = B[3];
    for &b in B[..3].iter().rev() {
        q = q * x2 + b;
    }
    p / q
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $tanh:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn from_f32(x: f32) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn tanh(self) -> Self {
                $tanh(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
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
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize + 1
                };
                assert!(k == 0 || a.len() >= extent(m, k, rsa, csa), "gemm: A too small");
                assert!(k == 0 || b.len() >= extent(k, n, rsb, csb), "gemm: B too small");
                assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C too small");
                // SAFETY: the asserts above keep every strided access in bounds.
                unsafe {
                    $gemm(
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
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, tanh_f32);
impl_scalar!(f64, matrixmultiply::dgemm, f64::tanh);

/// `C (m x n) = op(A) op(B) + beta C`, all row-major. `op(A)` is `m x k`:
/// when `ta` is set, `a` is stored as `k x m`.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, T::ONE, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: [usize; 2],
    pub output: usize,
}

impl MlpShape {
    /// Offsets of `[w1, b1, w2, b2, w3, b3]` in the flat parameter vector,
    /// plus the total length.
    fn layout(&self) -> ([usize; 6], usize) {
        let [h1, h2] = self.hidden;
        let sizes = [self.input * h1, h1, h1 * h2, h2, h2 * self.output, self.output];
        let mut offsets = [0; 6];
        let mut acc = 0;
        for (o, s) in offsets.iter_mut().zip(sizes) {
            *o = acc;
            acc += s;
        }
        (offsets, acc)
    }

    pub fn param_count(&self) -> usize {
        self.layout().1
    }
}

/// Fully connected `input -> tanh(h1) -> tanh(h2) -> output`. Weights are
/// row-major `fan_in x fan_out`, stored with the biases in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub shape: MlpShape,
    pub params: Vec<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub batch: usize,
    pub a1: Vec<T>,
    pub a2: Vec<T>,
    pub out: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
    pub fn init<R: Rng + ?Sized>(shape: MlpShape, rng: &mut R) -> Self {
        let (offsets, total) = shape.layout();
        let [h1, h2] = shape.hidden;
        let fan_ins = [shape.input, shape.input, h1, h1, h2, h2];
        let mut params = vec![T::ZERO; total];
        for seg in 0..6 {
            let end = if seg == 5 { total } else { offsets[seg + 1] };
            let bound = 1.0 / (fan_ins[seg] as f64).sqrt();
            for p in &mut params[offsets[seg]..end] {
                *p = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Mlp { shape, params }
    }

    pub fn zeros(shape: MlpShape) -> Self {
        Mlp { shape, params: vec![T::ZERO; shape.param_count()] }
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp { shape: self.shape, params: self.params.iter().map(|&p| U::from_f64(p.to_f64())).collect() }
    }

    fn segments(&self) -> [&[T]; 6] {
        let (o, total) = self.shape.layout();
        let p = &self.params;
        [&p[o[0]..o[1]], &p[o[1]..o[2]], &p[o[2]..o[3]], &p[o[3]..o[4]], &p[o[4]..o[5]], &p[o[5]..total]]
    }

    fn dense(x: &[T], batch: usize, fan_in: usize, w: &[T], b: &[T], fan_out: usize, out: &mut Vec<T>) {
        out.clear();
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        matmul(batch, fan_in, fan_out, x, false, w, false, T::ONE, out);
    }

    /// Forward pass over `x` (`batch x input`, row-major).
    pub fn forward(&self, x: &[T], batch: usize) -> ForwardCache<T> {
        assert_eq!(x.len(), batch * self.shape.input, "input size");
        let [w1, b1, w2, b2, w3, b3] = self.segments();
        let [h1, h2] = self.shape.hidden;
        let mut a1 = Vec::with_capacity(batch * h1);
        Self::dense(x, batch, self.shape.input, w1, b1, h1, &mut a1);
        a1.iter_mut().for_each(|v| *v = v.tanh());
        let mut a2 = Vec::with_capacity(batch * h2);
        Self::dense(&a1, batch, h1, w2, b2, h2, &mut a2);
        a2.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = Vec::with_capacity(batch * self.shape.output);
        Self::dense(&a2, batch, h2, w3, b3, self.shape.output, &mut out);
        ForwardCache { batch, a1, a2, out }
    }

    /// Gradient of a loss w.r.t. the parameters given `dout = dL/d(out)`.
    /// No gradient is propagated into the input.
    pub fn backward(&self, x: &[T], cache: &ForwardCache<T>, dout: &[T]) -> Vec<T> {
        let batch = cache.batch;
        let [h1, h2] = self.shape.hidden;
        let (input, output) = (self.shape.input, self.shape.output);
        assert_eq!(dout.len(), batch * output, "dout size");
        let [_, _, w2, _, w3, _] = self.segments();
        let (o, _) = self.shape.layout();
        let mut grad = vec![T::ZERO; self.params.len()];

        fn col_sums<T: Scalar>(m: &[T], cols: usize, out: &mut [T]) {
            for row in m.chunks_exact(cols) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
        }

        // layer 3
        matmul(h2, batch, output, &cache.a2, true, dout, false, T::ZERO, &mut grad[o[4]..o[5]]);
        col_sums(dout, output, &mut grad[o[5]..]);
        let mut dz2 = vec![T::ZERO; batch * h2];
        matmul(batch, output, h2, dout, false, w3, true, T::ZERO, &mut dz2);
        for (d, &a) in dz2.iter_mut().zip(&cache.a2) {
            *d *= T::ONE - a * a;
        }

        // layer 2
        matmul(h1, batch, h2, &cache.a1, true, &dz2, false, T::ZERO, &mut grad[o[2]..o[3]]);
        col_sums(&dz2, h2, &mut grad[o[3]..o[4]]);
        let mut dz1 = vec![T::ZERO; batch * h1];
        matmul(batch, h2, h1, &dz2, false, w2, true, T::ZERO, &mut dz1);
        for (d, &a) in dz1.iter_mut().zip(&cache.a1) {
            *d *= T::ONE - a * a;
        }

        // layer 1
        matmul(input, batch, h1, x, true, &dz1, false, T::ZERO, &mut grad[o[0]..o[1]]);
        col_sums(&dz1, h1, &mut grad[o[1]..o[2]]);
        grad
    }
}
