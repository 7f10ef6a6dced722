use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2 over an NCHW batch (odd trailing rows and
/// columns are dropped).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

fn pool_impl<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = match *x.shape() {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::Shape {
                op: "max_pool2d",
                detail: format!("input must be rank 4, got {:?}", x.shape()),
            })
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::Shape {
            op: "max_pool2d",
            detail: format!("spatial dims must be >= 2, got {h}x{w}"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

impl MaxPool2d {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        pool_impl(x).map(|(y, _)| y)
    }

    pub fn forward_train<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = pool_impl(x)?;
        self.cache = Some((x.shape().to_vec(), arg));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self
            .cache
            .take()
            .ok_or_else(|| Error::Protocol("MaxPool2d::backward without forward_train".into()))?;
        if grad_out.len() != arg.len() {
            return Err(Error::Dimension {
                op: "max_pool2d backward",
                lhs: vec![arg.len()],
                rhs: grad_out.shape().to_vec(),
            });
        }
        let mut gx = Tensor::zeros(&shape);
        let gd = gx.data_mut();
        for (&idx, &g) in arg.iter().zip(grad_out.data()) {
            gd[idx] += g;
        }
        Ok(gx)
    }
}
