//! Dense convolution matrices, used only to cross-check the convolution
//! routines on small instances.

use super::{conv2_same, Boundary, Filter, Image};
use crate::error::{Result, SfarlError};

pub const MAX_DENSE_SIDE: usize = 16;

/// Builds `U` (`N x N`, acting on the image) and `V` (`N x k^2`, acting on the
/// filter taps) such that `conv2_same(v, u) = U vec(v) = V vec(u)`.
///
/// Both matrices are assembled row by row from the index arithmetic of the
/// padded domain rather than by probing [`conv2_same`].
pub fn dense_conv_matrices(
    u: &Filter,
    v: &Image,
    boundary: Boundary,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let (h, w) = v.dims();
    let side = h.max(w);
    if side > MAX_DENSE_SIDE {
        return Err(SfarlError::TooLarge {
            side,
            limit: MAX_DENSE_SIDE,
        });
    }
    let k = u.size();
    let half = u.half() as isize;
    let n = h * w;
    let mut big_u = vec![vec![0.0; n]; n];
    let mut big_v = vec![vec![0.0; k * k]; n];
    for i in 0..h {
        for j in 0..w {
            let row = i * w + j;
            for a in 0..k {
                for b in 0..k {
                    let si = boundary.source_index(i as isize + half - a as isize, h);
                    let sj = boundary.source_index(j as isize + half - b as isize, w);
                    if let (Some(si), Some(sj)) = (si, sj) {
                        big_u[row][si * w + sj] += u.get(a, b);
                        big_v[row][a * k + b] = v.get(si, sj);
                    }
                }
            }
        }
    }
    Ok((big_u, big_v))
}

fn matvec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Checks `u (*) v == U v == V u` elementwise within `1e-12` under the
/// default symmetric boundary.
pub fn conv_matrix_equiv_check(u: &Filter, v: &Image) -> Result<bool> {
    let (big_u, big_v) = dense_conv_matrices(u, v, Boundary::Symmetric)?;
    let direct = conv2_same(v, u, Boundary::Symmetric);
    let via_u = matvec(&big_u, v.as_slice());
    let via_v = matvec(&big_v, u.taps());
    Ok(direct
        .as_slice()
        .iter()
        .zip(via_u.iter().zip(&via_v))
        .all(|(d, (a, b))| (d - a).abs() <= 1e-12 && (d - b).abs() <= 1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seeded;
    use rand::Rng;

    #[test]
    fn delta_filter_gives_identity_matrix() {
        let v = Image::from_fn(5, 4, |i, j| (i + 2 * j) as f64);
        let d = Filter::delta(3).unwrap();
        let (u, _) = dense_conv_matrices(&d, &v, Boundary::Symmetric).unwrap();
        for (r, row) in u.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                assert_eq!(*val, if r == c { 1.0 } else { 0.0 });
            }
        }
        assert!(conv_matrix_equiv_check(&d, &v).unwrap());
    }

    #[test]
    fn random_instances_agree() {
        let mut rng = Seeded::new(21).rng();
        for _ in 0..5 {
            let u = Filter::new(3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let v = Image::from_fn(6, 6, |_, _| rng.random_range(0.0..1.0));
            assert!(conv_matrix_equiv_check(&u, &v).unwrap());
        }
    }

    #[test]
    fn zero_image_gives_zero() {
        let u = Filter::new(3, vec![0.5; 9]).unwrap();
        let v = Image::zeros(4, 4);
        assert!(conv_matrix_equiv_check(&u, &v).unwrap());
    }

    #[test]
    fn refuses_large_instances() {
        let u = Filter::delta(3).unwrap();
        let v = Image::zeros(17, 4);
        assert!(matches!(
            conv_matrix_equiv_check(&u, &v),
            Err(SfarlError::TooLarge { .. })
        ));
    }
}
