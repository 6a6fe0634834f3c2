use crate::error::{Error, Result};

/// Dense `f32` activation tensor in `[C][N][H][W]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != c * n * h * w {
            return Err(Error::Shape(format!(
                "tensor [{c},{n},{h},{w}] needs {} values, got {}",
                c * n * h * w,
                data.len()
            )));
        }
        Ok(Self { c, n, h, w, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c, self.n, self.h, self.w)
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<f32>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    /// Pixels per sample.
    #[inline]
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Columns of the `[C, N*H*W]` matrix view.
    #[inline]
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.n + n) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, n: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, n, y, x)]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.c, self.n, self.h, self.w) == (other.c, other.n, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Contiguous `[C][H][W]` slab of sample `n` per channel, copied out.
    pub fn sample(&self, n: usize) -> Tensor {
        let hw = self.hw();
        let mut out = Tensor::zeros(self.c, 1, self.h, self.w);
        for c in 0..self.c {
            let src = (c * self.n + n) * hw;
            out.data[c * hw..(c + 1) * hw].copy_from_slice(&self.data[src..src + hw]);
        }
        out
    }

    /// Stacks single-sample tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let (c, h, w) = (first.c, first.h, first.w);
        let n: usize = parts.iter().map(|p| p.n).sum();
        let mut out = Tensor::zeros(c, n, h, w);
        let hw = h * w;
        let mut offset = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (c, h, w) {
                return Err(Error::Shape("stacked tensors differ in shape".into()));
            }
            for ch in 0..c {
                let src = &p.data[ch * p.n * hw..(ch + 1) * p.n * hw];
                let dst = (ch * n + offset) * hw;
                out.data[dst..dst + p.n * hw].copy_from_slice(src);
            }
            offset += p.n;
        }
        Ok(out)
    }

    /// Samples `range` of the batch.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Tensor {
        let hw = self.hw();
        let n = range.len();
        let mut out = Tensor::zeros(self.c, n, self.h, self.w);
        for c in 0..self.c {
            let src = (c * self.n + range.start) * hw;
            out.data[c * n * hw..(c + 1) * n * hw].copy_from_slice(&self.data[src..src + n * hw]);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_then_slice_round_trips() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(2, 2, 1, 2, (5..13).map(|v| v as f32).collect()).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.n, 3);
        assert_eq!(s.at(1, 0, 0, 1), 4.0);
        assert_eq!(s.at(0, 1, 0, 0), 5.0);
        assert_eq!(s.slice_batch(0..1), a);
        assert_eq!(s.slice_batch(1..3), b);
        assert_eq!(s.sample(2), b.sample(1));
    }
}
