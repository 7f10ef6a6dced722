//! Sub-pixel rearrangement between channels and space.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn nchw<T: Scalar>(x: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match *x.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Shape {
            op,
            detail: format!("input must be rank 4, got {:?}", x.shape()),
        }),
    }
}

/// `[N, C*r*r, H, W] -> [N, C, r*H, r*W]` with
/// `out[c, r*h + dy, r*w + dx] = in[c*r*r + dy*r + dx, h, w]`.
pub fn pixel_shuffle_batch<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cin, h, w] = nchw(x, "pixel_shuffle")?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(Error::Shape {
            op: "pixel_shuffle",
            detail: format!("channels {cin} not divisible by r^2 = {}", r * r),
        });
    }
    let c = cin / (r * r);
    let (oh, ow) = (h * r, w * r);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let src = ((b * cin) + ch * r * r + dy * r + dx) * h * w;
                    let dst = (b * c + ch) * oh * ow;
                    for i in 0..h {
                        for j in 0..w {
                            out[dst + (r * i + dy) * ow + r * j + dx] = xd[src + i * w + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle_batch`].
pub fn pixel_unshuffle_batch<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, oh, ow] = nchw(x, "pixel_unshuffle")?;
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return Err(Error::Shape {
            op: "pixel_unshuffle",
            detail: format!("spatial {oh}x{ow} not divisible by {r}"),
        });
    }
    let (h, w) = (oh / r, ow / r);
    let cin = c * r * r;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let dst = ((b * cin) + ch * r * r + dy * r + dx) * h * w;
                    let src = (b * c + ch) * oh * ow;
                    for i in 0..h {
                        for j in 0..w {
                            out[dst + i * w + j] = xd[src + (r * i + dy) * ow + r * j + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cin, h, w], out)
}

/// Unbatched pixel shuffle: `(C*r*r) x H x W -> C x (r*H) x (r*W)`.
pub fn pixel_shuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape {
            op: "pixel_shuffle",
            detail: format!("input must be C x H x W, got {:?}", input.shape()),
        });
    }
    let y = pixel_shuffle_batch(&input.unsqueeze0(), r)?;
    let shape = y.shape()[1..].to_vec();
    y.reshape(&shape)
}

pub fn pixel_unshuffle<T: Scalar>(input: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::Shape {
            op: "pixel_unshuffle",
            detail: format!("input must be C x H x W, got {:?}", input.shape()),
        });
    }
    let y = pixel_unshuffle_batch(&input.unsqueeze0(), r)?;
    let shape = y.shape()[1..].to_vec();
    y.reshape(&shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn factor_one_is_identity() {
        let x = Tensor::<f64>::from_fn(&[3, 2, 5], |i| i as f64);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn four_channels_to_two_by_two() {
        let x = Tensor::<f64>::from_f64(vec![4, 1, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn preserves_multiset() {
        let x = Tensor::<f64>::from_fn(&[8, 2, 2], |i| (i * 7 % 13) as f64);
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4]);
        let mut a = x.data().to_vec();
        let mut b = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn index_formula() {
        let r = 3;
        let x = Tensor::<f64>::from_fn(&[2 * r * r, 2, 3], |i| i as f64);
        let y = pixel_shuffle(&x, r).unwrap();
        let (h, w) = (2, 3);
        for c in 0..2 {
            for dy in 0..r {
                for dx in 0..r {
                    for i in 0..h {
                        for j in 0..w {
                            let out = y.data()[(c * r * h + r * i + dy) * r * w + r * j + dx];
                            let inp = x.data()[((c * r * r + dy * r + dx) * h + i) * w + j];
                            assert_eq!(out, inp);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn indivisible_channels_rejected() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]);
        assert!(matches!(pixel_shuffle(&x, 2), Err(Error::Shape { .. })));
    }

    proptest! {
        #[test]
        fn unshuffle_inverts_shuffle(c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4, seed in 0u64..1000) {
            let x = Tensor::<f64>::from_fn(&[2, c * r * r, h, w], |i| ((i as u64 * 2654435761 + seed) % 997) as f64);
            let y = pixel_shuffle_batch(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle_batch(&y, r).unwrap(), x);
        }
    }
}
