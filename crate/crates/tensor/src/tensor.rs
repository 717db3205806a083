use crate::error::{Result, TensorError};

/// Dense row-major array of `f64`.
///
/// A `Tensor` is a plain value; gradient bookkeeping lives on the
/// [`Tape`](crate::Tape) that records operations over it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("tensor", "positive extents", shape));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::shape(
                "tensor",
                format!("{} elements", data.len()),
                shape,
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Extents of a 4-D `[N, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::shape(op, "[N, C, H, W]", &self.shape)),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    /// `[N, C·r², H, W]` → `[N, C, H·r, W·r]` with
    /// `out[n, c, h·r + i, w·r + j] = in[n, c·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        let [n, cr, h, w] = self.dims4("pixel_shuffle")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(TensorError::invalid(
                "pixel_shuffle",
                format!("channel count {cr} not divisible by r^2 = {}", r * r),
            ));
        }
        let c = cr / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in 0..r {
                    for j in 0..r {
                        let src_c = ch * r * r + i * r + j;
                        let src = &self.data[((b * cr + src_c) * h) * w..][..h * w];
                        let dst_base = (b * c + ch) * ho * wo;
                        for y in 0..h {
                            for x in 0..w {
                                out[dst_base + (y * r + i) * wo + x * r + j] = src[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        Self::new(&[n, c, ho, wo], out)
    }

    /// Exact inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        let [n, c, ho, wo] = self.dims4("pixel_unshuffle")?;
        if r == 0 || ho % r != 0 || wo % r != 0 {
            return Err(TensorError::invalid(
                "pixel_unshuffle",
                format!("spatial size {ho}x{wo} not divisible by {r}"),
            ));
        }
        let (h, w) = (ho / r, wo / r);
        let cr = c * r * r;
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for ch in 0..c {
                let src_base = (b * c + ch) * ho * wo;
                for i in 0..r {
                    for j in 0..r {
                        let dst_c = ch * r * r + i * r + j;
                        let dst = &mut out[((b * cr + dst_c) * h) * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                dst[y * w + x] = self.data[src_base + (y * r + i) * wo + x * r + j];
                            }
                        }
                    }
                }
            }
        }
        Self::new(&[n, cr, h, w], out)
    }
}
