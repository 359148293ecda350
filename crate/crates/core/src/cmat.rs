//! 3×3 complex matrices in phase-frame (A, B, C) coordinates.
//!
//! Rows and columns of absent phases are kept as zeros; inversion works on the
//! submatrix of a given phase mask and leaves the remaining entries zero.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::phase::{Phase, PhaseMask};

pub type C64 = Complex64;

pub const CZERO: C64 = C64::new(0.0, 0.0);

/// Three per-phase phasors, indexed by `Phase::index()`.
pub type Phasor3 = [C64; 3];

pub fn polar_deg(mag: f64, ang_deg: f64) -> C64 {
    C64::from_polar(mag, ang_deg.to_radians())
}

pub fn angle_deg(z: C64) -> f64 {
    z.arg().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CMat3(pub [[C64; 3]; 3]);

impl Default for CMat3 {
    fn default() -> Self {
        CMat3::zero()
    }
}

impl CMat3 {
    pub fn zero() -> Self {
        CMat3([[CZERO; 3]; 3])
    }

    pub fn identity() -> Self {
        Self::diag([C64::new(1.0, 0.0); 3])
    }

    pub fn diag(d: [C64; 3]) -> Self {
        let mut m = Self::zero();
        for (i, v) in d.into_iter().enumerate() {
            m.0[i][i] = v;
        }
        m
    }

    pub fn from_real(r: [[f64; 3]; 3]) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = C64::new(r[i][j], 0.0);
            }
        }
        m
    }

    pub fn get(&self, i: Phase, j: Phase) -> C64 {
        self.0[i.index()][j.index()]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        m.0.iter_mut().flatten().for_each(|v| *v *= s);
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut m = self.transpose();
        m.0.iter_mut().flatten().for_each(|v| *v = v.conj());
        m
    }

    pub fn mul_vec(&self, v: &Phasor3) -> Phasor3 {
        let mut out = [CZERO; 3];
        for (i, row) in self.0.iter().enumerate() {
            out[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
        out
    }

    /// Zero every row and column outside `mask`.
    pub fn restrict(&self, mask: PhaseMask) -> Self {
        let mut m = *self;
        for p in Phase::ALL {
            if !mask.contains(p) {
                for k in 0..3 {
                    m.0[p.index()][k] = CZERO;
                    m.0[k][p.index()] = CZERO;
                }
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
    }

    /// Inverse of the submatrix on `mask`, embedded back into a 3×3 with zeros
    /// elsewhere. `None` when the submatrix is singular relative to its scale.
    pub fn inverse_on(&self, mask: PhaseMask) -> Option<CMat3> {
        let idx: Vec<usize> = mask.iter().map(Phase::index).collect();
        let n = idx.len();
        if n == 0 {
            return Some(CMat3::zero());
        }
        let scale = self.restrict(mask).max_abs();
        if scale == 0.0 || !scale.is_finite() {
            return None;
        }
        // Gauss-Jordan with partial pivoting on the n×n block.
        let mut a = vec![vec![CZERO; 2 * n]; n];
        for r in 0..n {
            for c in 0..n {
                a[r][c] = self.0[idx[r]][idx[c]];
            }
            a[r][n + r] = C64::new(1.0, 0.0);
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x][col].norm().total_cmp(&a[y][col].norm()))
                .unwrap();
            if a[piv][col].norm() <= scale * 1e-12 {
                return None;
            }
            a.swap(col, piv);
            let d = a[col][col];
            for v in a[col].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != col {
                    let f = a[r][col];
                    if f != CZERO {
                        for c in 0..2 * n {
                            let t = a[col][c];
                            a[r][c] -= f * t;
                        }
                    }
                }
            }
        }
        let mut out = CMat3::zero();
        for r in 0..n {
            for c in 0..n {
                out.0[idx[r]][idx[c]] = a[r][n + c];
            }
        }
        Some(out)
    }
}

impl Add for CMat3 {
    type Output = CMat3;
    fn add(self, rhs: CMat3) -> CMat3 {
        let mut m = self;
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] += rhs.0[i][j];
            }
        }
        m
    }
}

impl Sub for CMat3 {
    type Output = CMat3;
    fn sub(self, rhs: CMat3) -> CMat3 {
        self + rhs.scale(-1.0)
    }
}

impl Mul for CMat3 {
    type Output = CMat3;
    fn mul(self, rhs: CMat3) -> CMat3 {
        let mut m = CMat3::zero();
        for i in 0..3 {
            for j in 0..3 {
                m.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        m
    }
}

pub fn add3(a: &Phasor3, b: &Phasor3) -> Phasor3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: &Phasor3, b: &Phasor3) -> Phasor3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_on_full_and_partial_masks() {
        let z = CMat3([
            [C64::new(2.0, 1.0), C64::new(0.2, 0.5), C64::new(0.1, 0.4)],
            [C64::new(0.2, 0.5), C64::new(1.9, 1.2), C64::new(0.3, 0.2)],
            [C64::new(0.1, 0.4), C64::new(0.3, 0.2), C64::new(2.1, 1.1)],
        ]);
        let y = z.inverse_on(PhaseMask::ABC).unwrap();
        let id = z * y;
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((id.0[i][j] - C64::new(expect, 0.0)).norm() < 1e-12);
            }
        }
        let mask = PhaseMask::new(true, false, true);
        let y2 = z.restrict(mask).inverse_on(mask).unwrap();
        assert_eq!(y2.0[1][1], CZERO);
        let prod = z.restrict(mask) * y2;
        assert!((prod.0[0][0] - C64::new(1.0, 0.0)).norm() < 1e-12);
        assert!((prod.0[2][2] - C64::new(1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn singular_block_is_rejected() {
        let mut z = CMat3::zero();
        z.0[0][0] = C64::new(1.0, 1.0);
        assert!(z.inverse_on(PhaseMask::new(true, true, false)).is_none());
        assert!(z.inverse_on(PhaseMask::single(Phase::A)).is_some());
    }
}
