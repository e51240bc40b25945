use ndarray::Array2;
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where a complex image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GroundTruth,
    ZeroFilled,
    Sample,
}

/// Complex-valued `H x W` image with power-of-two, finite-valued dims.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage<T> {
    data: Array2<Complex<T>>,
    pub meta: Provenance,
}

pub(crate) fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "image dims must be powers of two, got {h}x{w}"
        )));
    }
    Ok(())
}

impl<T: Scalar> ComplexImage<T> {
    pub fn new(data: Array2<Complex<T>>, meta: Provenance) -> Result<Self> {
        let (h, w) = data.dim();
        check_pow2(h, w)?;
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidArgument("non-finite image entry".into()));
        }
        Ok(ComplexImage { data, meta })
    }

    pub fn from_real(re: &Array2<T>, meta: Provenance) -> Result<Self> {
        Self::new(re.mapv(|v| Complex::new(v, T::zero())), meta)
    }

    pub fn data(&self) -> &Array2<Complex<T>> {
        &self.data
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn magnitude(&self) -> Array2<T> {
        self.data.mapv(|c| c.norm())
    }

    /// `[1, 2, H, W]` tensor with real and imaginary channels.
    pub fn to_tensor(&self) -> Tensor<T> {
        let (h, w) = self.dim();
        let mut t = Tensor::zeros([1, 2, h, w]);
        for ((y, x), c) in self.data.indexed_iter() {
            t.set(0, 0, y, x, c.re);
            t.set(0, 1, y, x, c.im);
        }
        t
    }

    /// Read batch item `n` of a two-channel tensor.
    pub fn from_tensor(t: &Tensor<T>, n: usize, meta: Provenance) -> Result<Self> {
        if t.c() != 2 {
            return Err(Error::shape("2 channels", t.shape()));
        }
        let (h, w) = (t.h(), t.w());
        let data = Array2::from_shape_fn((h, w), |(y, x)| {
            Complex::new(t.at(n, 0, y, x), t.at(n, 1, y, x))
        });
        Self::new(data, meta)
    }

    pub fn cast<U: Scalar>(&self) -> ComplexImage<U> {
        ComplexImage {
            data: self
                .data
                .mapv(|c| Complex::new(U::of(c.re.as_f64()), U::of(c.im.as_f64()))),
            meta: self.meta,
        }
    }
}

/// Stack several images into one `[n, 2, H, W]` batch tensor.
pub fn batch_tensor<T: Scalar>(images: &[&ComplexImage<T>]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}

/// `[n, 1, H, W]` tensor of real grids.
pub fn real_batch_tensor<T: Scalar>(grids: &[&Array2<T>]) -> Result<Tensor<T>> {
    let (h, w) = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?
        .dim();
    let mut data = Vec::with_capacity(grids.len() * h * w);
    for g in grids {
        if g.dim() != (h, w) {
            return Err(Error::shape((h, w), g.dim()));
        }
        data.extend(g.iter().copied());
    }
    Tensor::from_vec([grids.len(), 1, h, w], data)
}
