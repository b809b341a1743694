//! Seeded weight initialization.

use nalgebra::DMatrix;
use rand::Rng;

use super::tensor::Tensor;

/// Orthogonal initialization of a weight whose trailing axis is the output axis.
///
/// The weight viewed as an `R x C` matrix has orthonormal columns when `R >= C` and
/// orthonormal rows otherwise.
pub fn orthogonal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let c = *shape.last().expect("orthogonal init of a scalar");
    let r = shape.iter().product::<usize>() / c;
    let (tall, short) = (r.max(c), r.min(c));
    let gauss = Tensor::randn(&[tall, short], rng);
    let a = DMatrix::from_row_slice(tall, short, gauss.data());
    let qr = a.qr();
    let mut q = qr.q();
    let rr = qr.r();
    // Fix column signs so the factorization is unique.
    for j in 0..short {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[i * c + j] = if r >= c { q[(i, j)] } else { q[(j, i)] };
        }
    }
    Tensor::new(shape, data)
}
