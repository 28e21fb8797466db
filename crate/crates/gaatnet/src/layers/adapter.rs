//! Residual bottleneck self-adapter: `Z + GELU(GELU(Z W1) W2) W3` with
//! bottleneck width q << d'. The only large trainable block during
//! fine-tuning.

use crate::autodiff::Tensor;

#[derive(Clone)]
pub struct AdapterParams {
    /// d' x q down-projection.
    pub w1: Tensor,
    /// q x q fusion projection.
    pub w2: Tensor,
    /// q x d' up-projection.
    pub w3: Tensor,
}

impl AdapterParams {
    pub fn bottleneck(&self) -> usize {
        self.w1.shape().1
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.shape().0
    }

    pub fn validate(&self) {
        let d = self.feature_dim();
        let q = self.bottleneck();
        assert!(q < d, "adapter bottleneck q={q} must be smaller than d'={d}");
        assert_eq!(self.w2.shape(), (q, q), "w2 must be q x q");
        assert_eq!(self.w3.shape(), (q, d), "w3 must be q x d'");
    }

    pub fn scalar_count(&self) -> usize {
        let d = self.feature_dim();
        let q = self.bottleneck();
        2 * d * q + q * q
    }
}

pub fn adapter_forward(z: &Tensor, params: &AdapterParams) -> Tensor {
    params.validate();
    assert_eq!(z.shape().1, params.feature_dim(), "adapter input width");
    let bottleneck = z.matmul(&params.w1).gelu().matmul(&params.w2).gelu();
    z.add(&bottleneck.matmul(&params.w3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::optim::xavier_uniform;
    use crate::rng::{substream, Stream};
    use ndarray::{array, Array2};

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
    }

    #[test]
    fn zero_up_projection_is_pure_residual() {
        let z0 = array![[1.0, -2.0], [0.5, 3.0]];
        let params = AdapterParams {
            w1: Tensor::constant(array![[0.4], [0.2]]),
            w2: Tensor::constant(array![[1.5]]),
            w3: Tensor::constant(Array2::zeros((1, 2))),
        };
        let out = adapter_forward(&Tensor::constant(z0.clone()), &params);
        assert_eq!(out.to_array(), z0);
    }

    #[test]
    fn all_zero_parameters_are_identity_bitwise() {
        // GELU(0) = 0, so the bottleneck contributes an exact zero and the
        // residual carries the input through untouched (including
        // subnormals; -0.0 is excluded since -0.0 + 0.0 rounds to +0.0).
        let z0 = array![[1.25, -17.5, f64::MIN_POSITIVE, 4.2e-310]];
        let params = AdapterParams {
            w1: Tensor::constant(Array2::zeros((4, 2))),
            w2: Tensor::constant(Array2::zeros((2, 2))),
            w3: Tensor::constant(Array2::zeros((2, 4))),
        };
        let out = adapter_forward(&Tensor::constant(z0.clone()), &params).to_array();
        for (a, b) in out.iter().zip(z0.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hand_gelu_chain() {
        // d'=2, q=1, Z=[[1,1]], W1=[[1],[1]], W2=[[1]], W3=[[1,0]]:
        // inner = GELU(2) = 1.954598, mid = GELU(inner) = 1.905175,
        // Z' = [1 + mid, 1] = [2.905175, 1].
        let params = AdapterParams {
            w1: Tensor::constant(array![[1.0], [1.0]]),
            w2: Tensor::constant(array![[1.0]]),
            w3: Tensor::constant(array![[1.0, 0.0]]),
        };
        let out = adapter_forward(&Tensor::constant(array![[1.0, 1.0]]), &params).to_array();
        let inner = gelu(2.0);
        let mid = gelu(inner);
        assert!((inner - 1.9546).abs() < 1e-4);
        assert!((mid - 1.9051752657785717).abs() < 1e-12);
        assert!((out[(0, 0)] - (1.0 + mid)).abs() < 1e-12);
        assert!((out[(0, 0)] - 2.9051752657785714).abs() < 1e-12);
        assert!((out[(0, 1)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = substream(1, Stream::ParamInit);
        let params = AdapterParams {
            w1: Tensor::constant(xavier_uniform(256, 8, &mut rng)),
            w2: Tensor::constant(xavier_uniform(8, 8, &mut rng)),
            w3: Tensor::constant(xavier_uniform(8, 256, &mut rng)),
        };
        assert_eq!(params.scalar_count(), 2 * 256 * 8 + 64);
        assert_eq!(params.scalar_count(), 4160);
    }

    #[test]
    #[should_panic(expected = "bottleneck")]
    fn wide_bottleneck_is_rejected() {
        let params = AdapterParams {
            w1: Tensor::constant(Array2::zeros((2, 4))),
            w2: Tensor::constant(Array2::zeros((4, 4))),
            w3: Tensor::constant(Array2::zeros((4, 2))),
        };
        adapter_forward(&Tensor::constant(Array2::zeros((1, 2))), &params);
    }

    #[test]
    fn adapter_gradients() {
        let mut rng = substream(5, Stream::ParamInit);
        let z0 = xavier_uniform(4, 5, &mut rng);
        let w1 = xavier_uniform(5, 2, &mut rng);
        let w2 = xavier_uniform(2, 2, &mut rng);
        let w3 = xavier_uniform(2, 5, &mut rng);
        let err = grad_check(
            |ts| {
                let params = AdapterParams {
                    w1: ts[1].clone(),
                    w2: ts[2].clone(),
                    w3: ts[3].clone(),
                };
                adapter_forward(&ts[0], &params).sum()
            },
            &[z0, w1, w2, w3],
            1e-5,
        );
        assert!(err < 1e-4, "adapter grad check failed: {err}");
    }
}
