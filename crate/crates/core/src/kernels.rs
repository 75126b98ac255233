//! Raw slice kernels shared by eager ops and the tape's backward pass.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a direct 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Input coordinate touched by output coordinate `o` and tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![T::zero(); g.batch * g.out_channels * oh * ow];
    let k = g.kernel;
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let obase = (b * g.out_channels + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias[oc];
                    for ic in 0..g.in_channels {
                        let xbase = (b * g.in_channels + ic) * g.height * g.width;
                        let wbase = (oc * g.in_channels + ic) * k * k;
                        for ky in 0..k {
                            let Some(iy) = g.src(oy, ky, g.height) else { continue };
                            for kx in 0..k {
                                let Some(ix) = g.src(ox, kx, g.width) else { continue };
                                s += x[xbase + iy * g.width + ix] * w[wbase + ky * k + kx];
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = s;
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of a direct convolution.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    if let Some(db) = db {
        for b in 0..g.batch {
            for oc in 0..g.out_channels {
                let obase = (b * g.out_channels + oc) * oh * ow;
                db[oc] += grad_out[obase..obase + oh * ow].iter().copied().sum::<T>();
            }
        }
    }
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for oc in 0..g.out_channels {
            let obase = (b * g.out_channels + oc) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out[obase + oy * ow + ox];
                    for ic in 0..g.in_channels {
                        let xbase = (b * g.in_channels + ic) * g.height * g.width;
                        let wbase = (oc * g.in_channels + ic) * k * k;
                        for ky in 0..k {
                            let Some(iy) = g.src(oy, ky, g.height) else { continue };
                            for kx in 0..k {
                                let Some(ix) = g.src(ox, kx, g.width) else { continue };
                                let xi = xbase + iy * g.width + ix;
                                let wi = wbase + ky * k + kx;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xi] += go * w[wi];
                                }
                                if let Some(dw) = dw.as_deref_mut() {
                                    dw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
