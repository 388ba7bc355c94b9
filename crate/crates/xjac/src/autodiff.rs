//! Exact Jacobians of the encoder tail with respect to a representation at
//! any hook layer, plus a central finite-difference oracle.
//!
//! The attribution engine only needs three things from a map under
//! integration: its output width, a forward evaluation, and vector-Jacobian
//! products. [`DiffMap`] captures exactly that, so analytic test fixtures can
//! stand in for the real encoder tail.

use crate::error::{Error, Result};
use crate::model::{Representation, SiameseModel};
use crate::tensor::Matrix;

/// Default step for central finite differences; balances truncation against
/// round-off in f64.
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// A differentiable map from a representation (S x D matrix) to a vector.
pub trait DiffMap: Sync {
    fn out_dim(&self) -> usize;

    fn forward(&self, rep: &Matrix) -> Result<Vec<f64>>;

    /// seed^T * J, returned in the shape of the input representation.
    fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix>;

    /// Full Jacobian, out_dim x (S*D), row k = gradient of output k.
    /// Flattening follows the representation convention i = s*D + d.
    fn jacobian(&self, rep: &Matrix) -> Result<Matrix> {
        let k_out = self.out_dim();
        let mut jac = Matrix::zeros(k_out, rep.len());
        let mut seed = vec![0.0; k_out];
        for k in 0..k_out {
            seed[k] = 1.0;
            let row = self.vjp(rep, &seed)?;
            seed[k] = 0.0;
            jac.row_mut(k).copy_from_slice(row.data());
        }
        Ok(jac)
    }
}

/// The encoder tail above a hook layer: layers layer+1..=L, mean pooling and
/// the output projection.
pub struct Suffix<'a> {
    model: &'a SiameseModel,
    layer: usize,
}

impl<'a> Suffix<'a> {
    pub fn new(model: &'a SiameseModel, layer: usize) -> Result<Self> {
        if layer > model.config.layers {
            return Err(Error::InvalidLayer {
                layer,
                max: model.config.layers,
            });
        }
        Ok(Suffix { model, layer })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }
}

impl DiffMap for Suffix<'_> {
    fn out_dim(&self) -> usize {
        self.model.config.out_dim
    }

    fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
        let (out, _) = self.model.suffix_forward_cached(rep, self.layer)?;
        Ok(out)
    }

    fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
        let (_, cache) = self.model.suffix_forward_cached(rep, self.layer)?;
        Ok(self.model.suffix_backward(&cache, seed, None))
    }

    fn jacobian(&self, rep: &Matrix) -> Result<Matrix> {
        // One forward pass, one backward sweep per output component.
        let (_, cache) = self.model.suffix_forward_cached(rep, self.layer)?;
        let k_out = self.out_dim();
        let mut jac = Matrix::zeros(k_out, rep.len());
        let mut seed = vec![0.0; k_out];
        for k in 0..k_out {
            seed[k] = 1.0;
            let row = self.model.suffix_backward(&cache, &seed, None);
            seed[k] = 0.0;
            jac.row_mut(k).copy_from_slice(row.data());
        }
        Ok(jac)
    }
}

/// A map shifted by a constant output offset; same Jacobian, shifted forward.
pub struct Shifted<M: DiffMap> {
    pub inner: M,
    pub offset: Vec<f64>,
}

impl<M: DiffMap> Shifted<M> {
    pub fn new(inner: M, offset: Vec<f64>) -> Self {
        Shifted { inner, offset }
    }
}

impl<M: DiffMap> DiffMap for Shifted<M> {
    fn out_dim(&self) -> usize {
        self.inner.out_dim()
    }

    fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
        let mut out = self.inner.forward(rep)?;
        for (v, o) in out.iter_mut().zip(&self.offset) {
            *v -= o;
        }
        Ok(out)
    }

    fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
        self.inner.vjp(rep, seed)
    }

    fn jacobian(&self, rep: &Matrix) -> Result<Matrix> {
        self.inner.jacobian(rep)
    }
}

/// Path-averaged Jacobian matrix of the encoder tail (see the attribution
/// module for the integration machinery around it).
#[derive(Clone, Debug)]
pub struct Jacobian {
    pub matrix: Matrix,
    pub layer: usize,
}

/// Exact Jacobian of the encoder tail at `rep`, machine precision.
pub fn suffix_jacobian(model: &SiameseModel, rep: &Representation) -> Result<Jacobian> {
    let suffix = Suffix::new(model, rep.layer)?;
    Ok(Jacobian {
        matrix: suffix.jacobian(&rep.data)?,
        layer: rep.layer,
    })
}

/// Central finite differences per input component; the independent oracle for
/// exact Jacobians.
pub fn finite_diff_jacobian(map: &dyn DiffMap, rep: &Matrix, h: f64) -> Result<Matrix> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut jac = Matrix::zeros(map.out_dim(), rep.len());
    let mut probe = rep.clone();
    for i in 0..rep.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = map.forward(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = map.forward(&probe)?;
        probe.data_mut()[i] = orig;
        for (k, (&p, &m)) in plus.iter().zip(&minus).enumerate() {
            jac.set(k, i, (p - m) / (2.0 * h));
        }
    }
    Ok(jac)
}

/// Gradient of x -> suffix(x) . b_embedding at `rep_a`, flattened to length S*D.
pub fn score_gradient(
    model: &SiameseModel,
    rep_a: &Representation,
    b_embedding: &[f64],
) -> Result<Vec<f64>> {
    if b_embedding.len() != model.config.out_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding of length {}", model.config.out_dim),
            got: format!("length {}", b_embedding.len()),
        });
    }
    let suffix = Suffix::new(model, rep_a.layer)?;
    Ok(suffix.vjp(&rep_a.data, b_embedding)?.into_data())
}

/// max |a-b| / max(1, max|a|, max|b|), the scale-aware comparison used by the
/// Jacobian oracle tests.
pub fn max_relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert!(a.same_shape(b), "comparing matrices of different shapes");
    let scale = a.max_abs().max(b.max_abs()).max(1.0);
    let mut worst: f64 = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        worst = worst.max((x - y).abs());
    }
    worst / scale
}

pub mod analytic {
    //! Closed-form differentiable maps. They stand in for the encoder tail
    //! wherever an analytic Jacobian or integral is wanted as an oracle.

    use super::DiffMap;
    use crate::error::Result;
    use crate::tensor::Matrix;

    fn reshape_like(rep: &Matrix, data: Vec<f64>) -> Matrix {
        Matrix::from_vec(rep.rows(), rep.cols(), data).expect("same element count")
    }

    /// e(x) = flat(x); the Jacobian is the identity.
    pub struct IdentityMap {
        pub dim: usize,
    }

    impl DiffMap for IdentityMap {
        fn out_dim(&self) -> usize {
            self.dim
        }

        fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
            Ok(rep.data().to_vec())
        }

        fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
            Ok(reshape_like(rep, seed.to_vec()))
        }

        fn jacobian(&self, _rep: &Matrix) -> Result<Matrix> {
            Ok(Matrix::eye(self.dim))
        }
    }

    /// e_k(x) = x_k^2; Jacobian diag(2x).
    pub struct ElementwiseSquare {
        pub dim: usize,
    }

    impl DiffMap for ElementwiseSquare {
        fn out_dim(&self) -> usize {
            self.dim
        }

        fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
            Ok(rep.data().iter().map(|&v| v * v).collect())
        }

        fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
            let data = rep
                .data()
                .iter()
                .zip(seed)
                .map(|(&x, &s)| 2.0 * x * s)
                .collect();
            Ok(reshape_like(rep, data))
        }

        fn jacobian(&self, rep: &Matrix) -> Result<Matrix> {
            let mut jac = Matrix::zeros(self.dim, self.dim);
            for (i, &x) in rep.data().iter().enumerate() {
                jac.set(i, i, 2.0 * x);
            }
            Ok(jac)
        }
    }

    /// e_k(x) = x_k^3; Jacobian diag(3x^2). The integrand along a straight
    /// path is quadratic in the path parameter, so Riemann schemes show their
    /// genuine convergence orders on it.
    pub struct ElementwiseCube {
        pub dim: usize,
    }

    impl DiffMap for ElementwiseCube {
        fn out_dim(&self) -> usize {
            self.dim
        }

        fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
            Ok(rep.data().iter().map(|&v| v * v * v).collect())
        }

        fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
            let data = rep
                .data()
                .iter()
                .zip(seed)
                .map(|(&x, &s)| 3.0 * x * x * s)
                .collect();
            Ok(reshape_like(rep, data))
        }

        fn jacobian(&self, rep: &Matrix) -> Result<Matrix> {
            let mut jac = Matrix::zeros(self.dim, self.dim);
            for (i, &x) in rep.data().iter().enumerate() {
                jac.set(i, i, 3.0 * x * x);
            }
            Ok(jac)
        }
    }

    /// e(x) = W flat(x); constant Jacobian W.
    pub struct LinearMap {
        pub weight: Matrix,
    }

    impl DiffMap for LinearMap {
        fn out_dim(&self) -> usize {
            self.weight.rows()
        }

        fn forward(&self, rep: &Matrix) -> Result<Vec<f64>> {
            let flat = rep.data();
            Ok((0..self.weight.rows())
                .map(|k| crate::tensor::dot(self.weight.row(k), flat))
                .collect())
        }

        fn vjp(&self, rep: &Matrix, seed: &[f64]) -> Result<Matrix> {
            let mut data = vec![0.0; rep.len()];
            for (k, &s) in seed.iter().enumerate() {
                for (d, &w) in data.iter_mut().zip(self.weight.row(k)) {
                    *d += s * w;
                }
            }
            Ok(reshape_like(rep, data))
        }

        fn jacobian(&self, _rep: &Matrix) -> Result<Matrix> {
            Ok(self.weight.clone())
        }
    }
}
