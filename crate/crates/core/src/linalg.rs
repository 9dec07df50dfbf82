//! Small dense linear algebra for n <= 6 chart matrices.

use ndarray::Array2;

use crate::expr::Scalar;

/// Solves `a x = b` by Gaussian elimination with partial pivoting on the
/// real part. Works for plain reals and for jets. Returns `None` if a pivot
/// vanishes.
pub(crate) fn solve<T: Scalar>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].value().abs().total_cmp(&a[j][col].value().abs()))?;
        if a[pivot][col].value() == 0.0 || !a[pivot][col].value().is_finite() {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let inv = a[col][col].recip();
        for row in col + 1..n {
            let factor = a[row][col].mul(&inv);
            for k in col..n {
                let t = factor.mul(&a[col][k]);
                a[row][k] = a[row][k].sub(&t);
            }
            let t = factor.mul(&b[col]);
            b[row] = b[row].sub(&t);
        }
    }
    let mut x: Vec<T> = b.clone();
    for row in (0..n).rev() {
        let mut acc = b[row].clone();
        for k in row + 1..n {
            acc = acc.sub(&a[row][k].mul(&x[k]));
        }
        x[row] = acc.mul(&a[row][row].recip());
    }
    Some(x)
}

pub fn determinant(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(col, pivot);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

pub fn inverse(m: &Array2<f64>) -> Option<Array2<f64>> {
    let n = m.nrows();
    let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut inv = Array2::zeros((n, n));
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = solve(rows.clone(), e)?;
        for r in 0..n {
            inv[[r, c]] = col[r];
        }
    }
    Some(inv)
}

fn norm_1(m: &Array2<f64>) -> f64 {
    m.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number `|m|_1 |m^-1|_1`, infinite for singular input.
pub fn condition_number(m: &Array2<f64>, inv: Option<&Array2<f64>>) -> f64 {
    let owned;
    let inv = match inv {
        Some(i) => i,
        None => match inverse(m) {
            Some(i) => {
                owned = i;
                &owned
            }
            None => return f64::INFINITY,
        },
    };
    norm_1(m) * norm_1(inv)
}

/// Cholesky test for a symmetric matrix.
pub fn is_positive_definite(m: &Array2<f64>) -> bool {
    let n = m.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[[i, k]] * l[[j, k]]).sum();
            if i == j {
                let d = m[[i, i]] - s;
                if d <= 0.0 || !d.is_finite() {
                    return false;
                }
                l[[i, j]] = d.sqrt();
            } else {
                l[[i, j]] = (m[[i, j]] - s) / l[[j, j]];
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn inverse_and_determinant_of_small_matrix() {
        let m = array![[4.0, 1.0], [2.0, 3.0]];
        let inv = inverse(&m).unwrap();
        let id = m.dot(&inv);
        assert!((id[[0, 0]] - 1.0).abs() < 1e-15 && id[[0, 1]].abs() < 1e-15);
        assert_eq!(determinant(&[vec![4.0, 1.0], vec![2.0, 3.0]]), 10.0);
    }

    #[test]
    fn singular_matrix_has_infinite_condition() {
        let m = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(inverse(&m).is_none());
        assert_eq!(condition_number(&m, None), f64::INFINITY);
        assert_eq!(condition_number(&Array2::eye(3), None), 1.0);
    }

    #[test]
    fn cholesky_detects_indefinite() {
        assert!(is_positive_definite(&array![[2.0, 1.0], [1.0, 2.0]]));
        assert!(!is_positive_definite(&array![[1.0, 2.0], [2.0, 1.0]]));
    }
}
