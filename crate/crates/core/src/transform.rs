//! Per-octave coordinate transforms: rotation times an exponentiated
//! anisotropic scale, so every materialized matrix is invertible.
//!
//! 2D raw layout per octave: `(theta, log_sx, log_sy)`.
//! 3D raw layout per octave: `(yaw, pitch, roll, log_sx, log_sy, log_sz)` with
//! `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use crate::error::{Error, Result};

/// Raw parameters per octave for a transform acting on `dim`-vectors.
pub fn params_per_octave(dim: usize) -> usize {
    match dim {
        2 => 3,
        _ => 6,
    }
}

pub(crate) fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "dimension must be 2 or 3, got {dim}"
        )))
    }
}

fn rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn d_rot_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]]
}

fn d_rot_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]]
}

fn d_rot_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]]
}

fn mul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Materializes one octave's matrix (row-major, `dim * dim`) from its raw parameters.
pub fn materialize(raw: &[f64], dim: usize) -> Vec<f64> {
    materialize_with_jacobian(raw, dim).0
}

/// Matrix plus `d matrix / d raw[k]` for every raw parameter `k`
/// (`params_per_octave(dim)` blocks of `dim * dim`).
pub fn materialize_with_jacobian(raw: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    if dim == 2 {
        let (s, c) = raw[0].sin_cos();
        let (ea, eb) = (raw[1].exp(), raw[2].exp());
        let m = vec![c * ea, -s * eb, s * ea, c * eb];
        let jac = vec![
            -s * ea,
            -c * eb,
            c * ea,
            -s * eb, // d/dtheta
            c * ea,
            0.0,
            s * ea,
            0.0, // d/dlog_sx
            0.0,
            -s * eb,
            0.0,
            c * eb, // d/dlog_sy
        ];
        return (m, jac);
    }

    let (rz, ry, rx) = (rot_z(raw[0]), rot_y(raw[1]), rot_x(raw[2]));
    let scale = [raw[3].exp(), raw[4].exp(), raw[5].exp()];
    let rot = mul3(&mul3(&rz, &ry), &rx);
    let d_rots = [
        mul3(&mul3(&d_rot_z(raw[0]), &ry), &rx),
        mul3(&mul3(&rz, &d_rot_y(raw[1])), &rx),
        mul3(&mul3(&rz, &ry), &d_rot_x(raw[2])),
    ];
    let mut m = vec![0.0; 9];
    let mut jac = vec![0.0; 6 * 9];
    for i in 0..3 {
        for j in 0..3 {
            m[i * 3 + j] = rot[i][j] * scale[j];
            for (k, d) in d_rots.iter().enumerate() {
                jac[k * 9 + i * 3 + j] = d[i][j] * scale[j];
            }
            // only column j depends on log-scale j
            jac[(3 + j) * 9 + i * 3 + j] = rot[i][j] * scale[j];
        }
    }
    (m, jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_give_identity() {
        assert_eq!(materialize(&[0.0; 3], 2), vec![1.0, 0.0, 0.0, 1.0]);
        let m3 = materialize(&[0.0; 6], 3);
        assert_eq!(m3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quarter_turn() {
        let m = materialize(&[std::f64::consts::FRAC_PI_2, 0.0, 0.0], 2);
        let want = [0.0, -1.0, 1.0, 0.0];
        for (a, b) in m.iter().zip(want) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    fn det(m: &[f64], dim: usize) -> f64 {
        if dim == 2 {
            m[0] * m[3] - m[1] * m[2]
        } else {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
    }

    #[test]
    fn determinant_is_product_of_scales() {
        let raw2 = [0.7, 0.3, -1.1];
        assert!((det(&materialize(&raw2, 2), 2) - (0.3f64 - 1.1).exp()).abs() < 1e-12);
        let raw3 = [0.2, -0.9, 1.4, 0.5, -0.25, 0.1];
        assert!((det(&materialize(&raw3, 3), 3) - (0.35f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-5;
        for (dim, raw) in [
            (2usize, vec![0.4, -0.2, 0.8]),
            (3, vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.6]),
        ] {
            let (_, jac) = materialize_with_jacobian(&raw, dim);
            let dd = dim * dim;
            for k in 0..raw.len() {
                let mut plus = raw.clone();
                let mut minus = raw.clone();
                plus[k] += h;
                minus[k] -= h;
                let (mp, mm) = (materialize(&plus, dim), materialize(&minus, dim));
                for e in 0..dd {
                    let fd = (mp[e] - mm[e]) / (2.0 * h);
                    assert!(
                        (fd - jac[k * dd + e]).abs() < 1e-8,
                        "dim {dim} param {k} entry {e}"
                    );
                }
            }
        }
    }
}
