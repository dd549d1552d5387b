use std::f64::consts::PI;

use super::Filter;
use crate::error::{Result, SfarlError};

/// Orthonormal 2D DCT-II atoms of one filter size.
///
/// Atoms are ordered by (row frequency, column frequency) lexicographically.
/// When the DC atom is excluded the remaining order is unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct DctBasis {
    size: usize,
    includes_dc: bool,
    atoms: Vec<Vec<f64>>,
}

impl DctBasis {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn includes_dc(&self) -> bool {
        self.includes_dc
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom(&self, m: usize) -> Filter {
        Filter::from_vec_unchecked(self.size, self.atoms[m].clone())
    }

    fn check_coeffs(&self, coeffs: &[f64]) -> Result<f64> {
        if coeffs.len() != self.atoms.len() {
            return Err(SfarlError::shape(
                format!("{} coefficients", self.atoms.len()),
                coeffs.len(),
            ));
        }
        let norm = coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(SfarlError::InvalidArgument(
                "filter coefficients must be finite and not all zero".into(),
            ));
        }
        Ok(norm)
    }
}

pub fn dct_basis(k: usize, include_dc: bool) -> Result<DctBasis> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(SfarlError::InvalidArgument(format!(
            "DCT size must be odd and positive, got {k}"
        )));
    }
    let kf = k as f64;
    let one_d: Vec<Vec<f64>> = (0..k)
        .map(|u| {
            let scale = if u == 0 {
                (1.0 / kf).sqrt()
            } else {
                (2.0 / kf).sqrt()
            };
            (0..k)
                .map(|x| scale * (PI * (2 * x + 1) as f64 * u as f64 / (2.0 * kf)).cos())
                .collect()
        })
        .collect();
    let mut atoms = Vec::with_capacity(k * k);
    for u in 0..k {
        for v in 0..k {
            if u == 0 && v == 0 && !include_dc {
                continue;
            }
            let mut atom = Vec::with_capacity(k * k);
            for a in 0..k {
                for b in 0..k {
                    atom.push(one_d[u][a] * one_d[v][b]);
                }
            }
            atoms.push(atom);
        }
    }
    Ok(DctBasis {
        size: k,
        includes_dc: include_dc,
        atoms,
    })
}

/// `sum_m (c_m / |c|) * atom_m`; the result has unit norm.
pub fn realize_filter(basis: &DctBasis, coeffs: &[f64]) -> Result<Filter> {
    let norm = basis.check_coeffs(coeffs)?;
    let mut taps = vec![0.0; basis.size * basis.size];
    for (c, atom) in coeffs.iter().zip(&basis.atoms) {
        let s = c / norm;
        for (t, a) in taps.iter_mut().zip(atom) {
            *t += s * a;
        }
    }
    Ok(Filter::from_vec_unchecked(basis.size, taps))
}

/// Pulls a filter-shaped gradient back onto the coefficients:
/// `(1/|c|) (I - u u^T) B^T vec(upstream)` with `u = c/|c|`.
pub fn normalize_vjp(basis: &DctBasis, coeffs: &[f64], upstream: &Filter) -> Result<Vec<f64>> {
    let norm = basis.check_coeffs(coeffs)?;
    if upstream.size() != basis.size {
        return Err(SfarlError::shape(
            format!("{0}x{0} upstream", basis.size),
            format!("{0}x{0}", upstream.size()),
        ));
    }
    let projected: Vec<f64> = basis
        .atoms
        .iter()
        .map(|atom| atom.iter().zip(upstream.taps()).map(|(a, g)| a * g).sum())
        .collect();
    let radial: f64 = coeffs
        .iter()
        .zip(&projected)
        .map(|(c, g)| c / norm * g)
        .sum();
    Ok(coeffs
        .iter()
        .zip(&projected)
        .map(|(c, g)| (g - c / norm * radial) / norm)
        .collect())
}
