//! Scalar element types a [`Tensor`](crate::Tensor) can hold.
//!
//! `f64` is the default everywhere correctness is checked; `f32` exists for
//! throughput runs.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Wire and file tag for an element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Element:
    Float + Default + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Appends the little-endian encoding of `src` to `out`.
    fn extend_le_bytes(src: &[Self], out: &mut Vec<u8>);

    /// Decodes `bytes` (exactly `dst.len()` elements) into `dst`.
    fn copy_from_le_bytes(bytes: &[u8], dst: &mut [Self]);

    /// `c = a·b (+ c when accumulate)` for row-major operands, with optional
    /// transposition of `a` (stored k×m) and `b` (stored n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn to_f64(self) -> f64 {
                self as f64
            }

            fn extend_le_bytes(src: &[Self], out: &mut Vec<u8>) {
                out.reserve(std::mem::size_of_val(src));
                for v in src {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn copy_from_le_bytes(bytes: &[u8], dst: &mut [Self]) {
                const W: usize = std::mem::size_of::<$t>();
                assert_eq!(bytes.len(), dst.len() * W, "byte length mismatch");
                for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(W)) {
                    *d = <$t>::from_le_bytes(chunk.try_into().unwrap());
                }
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs length");
                assert_eq!(b.len(), k * n, "gemm: rhs length");
                assert_eq!(c.len(), m * n, "gemm: output length");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
                let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above pin every buffer to exactly the
                // extent the strides address, and `c` is uniquely borrowed.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, DType::F32, matrixmultiply::sgemm);
impl_element!(f64, DType::F64, matrixmultiply::dgemm);
