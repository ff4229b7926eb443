//! Eigenvalues of symmetric 3×3 matrices by cyclic Jacobi rotation.

const MAX_SWEEPS: usize = 50;
const OFF_TOLERANCE: f64 = 1e-12;

fn off_norm(a: &[[f64; 3]; 3]) -> f64 {
    (2.0 * (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2])).sqrt()
}

fn frobenius(a: &[[f64; 3]; 3]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Eigenvalues sorted descending, negatives clamped to zero.
///
/// Stops once the off-diagonal Frobenius norm falls below `1e-12` times the
/// matrix norm, or after 50 sweeps.
pub fn symmetric_eigenvalues(m: [[f64; 3]; 3]) -> [f64; 3] {
    let mut a = m;
    let scale = frobenius(&a);
    for _ in 0..MAX_SWEEPS {
        if off_norm(&a) <= OFF_TOLERANCE * scale {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            rotate(&mut a, p, q);
        }
    }
    let mut ev = [a[0][0].max(0.0), a[1][1].max(0.0), a[2][2].max(0.0)];
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Annihilates `a[p][q]` with one Givens rotation.
fn rotate(a: &mut [[f64; 3]; 3], p: usize, q: usize) {
    let apq = a[p][q];
    if apq == 0.0 {
        return;
    }
    let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let r = 3 - p - q;
    let (app, aqq) = (a[p][p], a[q][q]);
    a[p][p] = app - t * apq;
    a[q][q] = aqq + t * apq;
    a[p][q] = 0.0;
    a[q][p] = 0.0;
    let (arp, arq) = (a[r][p], a[r][q]);
    a[r][p] = c * arp - s * arq;
    a[p][r] = a[r][p];
    a[r][q] = s * arp + c * arq;
    a[q][r] = a[r][q];
}
