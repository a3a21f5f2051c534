use super::linalg::Matrix;
use super::NeuralError;

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_shapes(a: &Matrix, b: &Matrix) -> Result<(), NeuralError> {
    if a.shape() != b.shape() {
        return Err(NeuralError::Shape(format!(
            "mse operands {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(NeuralError::Shape("mse of an empty batch".into()));
    }
    Ok(())
}

/// Mean over batch and components of squared differences, i.e. the sum
/// divided by `rows * cols`. Every loss in the crate uses this normalization.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<f64, NeuralError> {
    check_shapes(a, b)?;
    let n = (a.rows() * a.cols()) as f64;
    let s = compensated_sum(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| {
        let d = x - y;
        d * d
    }));
    Ok(s / n)
}

/// `d mse(a, b) / d a`, scaled by `weight`.
pub fn mse_grad(a: &Matrix, b: &Matrix, weight: f64) -> Result<Matrix, NeuralError> {
    check_shapes(a, b)?;
    let c = weight * 2.0 / (a.rows() * a.cols()) as f64;
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| c * (x - y)).collect();
    Ok(Matrix::from_vec(a.rows(), a.cols(), data))
}
