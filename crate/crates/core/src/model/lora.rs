use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

/// Which factor of an adapter a parameter is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LoraMatrix {
    A,
    B,
}

/// Low-rank update `(alpha / rank) · B · A` on a frozen `[d_out, d_in]` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `[rank, d_in]`
    pub a: Tensor,
    /// `[d_out, rank]`
    pub b: Tensor,
    pub alpha: f32,
    pub rank: usize,
}

impl LoraAdapter {
    /// `A ~ N(0, (1/rank)^2)`, `B = 0`.
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f32, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0f32, 1.0 / rank as f32).expect("finite std");
        let a = (0..rank * d_in).map(|_| normal.sample(rng)).collect();
        Self {
            a: Tensor::new(vec![rank, d_in], a).expect("shape"),
            b: Tensor::zeros(&[d_out, rank]),
            alpha,
            rank,
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn matrix(&self, which: LoraMatrix) -> &Tensor {
        match which {
            LoraMatrix::A => &self.a,
            LoraMatrix::B => &self.b,
        }
    }

    pub fn matrix_mut(&mut self, which: LoraMatrix) -> &mut Tensor {
        match which {
            LoraMatrix::A => &mut self.a,
            LoraMatrix::B => &mut self.b,
        }
    }

    /// Dense `[d_out, d_in]` weight delta.
    pub fn delta(&self) -> Tensor {
        let (d_out, rank) = (self.b.shape()[0], self.rank);
        let d_in = self.a.shape()[1];
        let s = self.scaling();
        let mut out = vec![0.0f32; d_out * d_in];
        for i in 0..d_out {
            for r in 0..rank {
                let bir = self.b.data()[i * rank + r] * s;
                if bir == 0.0 {
                    continue;
                }
                let arow = &self.a.data()[r * d_in..(r + 1) * d_in];
                for (o, &a) in out[i * d_in..(i + 1) * d_in].iter_mut().zip(arow) {
                    *o += bir * a;
                }
            }
        }
        Tensor::new(vec![d_out, d_in], out).expect("shape")
    }
}
