//! Projections onto Lp balls (raw, unnormalized radii).

use crate::error::{Error, Result};
use crate::signal::Lp;

/// Projects `delta` onto the Lp ball of raw radius `epsilon_raw`, in place.
/// Vectors already inside the ball are left untouched.
pub fn project_lp(delta: &mut [f64], epsilon_raw: f64, p: Lp) -> Result<()> {
    if epsilon_raw <= 0.0 {
        return Err(Error::precondition("projection radius must be positive"));
    }
    match p {
        Lp::LInf => {
            for v in delta.iter_mut() {
                *v = v.clamp(-epsilon_raw, epsilon_raw);
            }
        }
        Lp::L2 => {
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > epsilon_raw {
                let scale = epsilon_raw / norm;
                for v in delta.iter_mut() {
                    *v *= scale;
                }
            }
        }
        Lp::L1 => {
            let l1: f64 = delta.iter().map(|v| v.abs()).sum();
            if l1 > epsilon_raw {
                let theta = l1_threshold(delta, epsilon_raw);
                for v in delta.iter_mut() {
                    let mag = (v.abs() - theta).max(0.0);
                    *v = v.signum() * mag;
                }
            }
        }
        Lp::L0 => return Err(Error::usage("no projection is defined for the L0 ball")),
    }
    Ok(())
}

/// Soft threshold for the Euclidean projection onto the L1 ball
/// (sort-and-scan over the magnitude spectrum).
fn l1_threshold(delta: &[f64], epsilon: f64) -> f64 {
    let mut mags: Vec<f64> = delta.iter().map(|v| v.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - epsilon) / (j + 1) as f64;
        if m - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn linf_clamps_entrywise() {
        let mut d = vec![0.05, -0.02];
        project_lp(&mut d, 0.03, Lp::LInf).unwrap();
        assert_eq!(d, vec![0.03, -0.02]);
    }

    #[test]
    fn l2_rescales_radially() {
        let mut d = vec![3.0, 4.0];
        project_lp(&mut d, 2.5, Lp::L2).unwrap();
        assert_abs_diff_eq!(d[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn l1_soft_thresholds() {
        let mut d = vec![0.6, 0.4];
        project_lp(&mut d, 0.5, Lp::L1).unwrap();
        assert_abs_diff_eq!(d[0], 0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.15, epsilon = 1e-12);
    }

    #[test]
    fn inside_ball_is_untouched() {
        for p in [Lp::L1, Lp::L2, Lp::LInf] {
            let mut d = vec![0.01, -0.005, 0.002];
            let before = d.clone();
            project_lp(&mut d, 1.0, p).unwrap();
            assert_eq!(d, before);
        }
    }

    /// Independent oracle: find the soft threshold by bisection on the KKT
    /// condition `sum max(|d| - theta, 0) = epsilon`.
    pub fn l1_threshold_bisection(delta: &[f64], epsilon: f64) -> f64 {
        let residual = |theta: f64| -> f64 {
            delta.iter().map(|v| (v.abs() - theta).max(0.0)).sum::<f64>() - epsilon
        };
        let mut lo = 0.0;
        let mut hi = delta.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if residual(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn l1_projection_matches_bisection_oracle() {
        let mut rng = rng_from_seed(31);
        for _ in 0..50 {
            let n = rng.gen_range(2..64);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eps = rng.gen_range(0.01..1.0);
            let mut fast = d.clone();
            project_lp(&mut fast, eps, Lp::L1).unwrap();
            let l1: f64 = d.iter().map(|v| v.abs()).sum();
            if l1 <= eps {
                assert_eq!(fast, d);
                continue;
            }
            let theta = l1_threshold_bisection(&d, eps);
            for (f, orig) in fast.iter().zip(&d) {
                let expect = orig.signum() * (orig.abs() - theta).max(0.0);
                assert_abs_diff_eq!(*f, expect, epsilon = 1e-8);
            }
            let after: f64 = fast.iter().map(|v| v.abs()).sum();
            assert!(after <= eps + 1e-9);
        }
    }

    #[test]
    fn all_projections_satisfy_their_bound() {
        use crate::signal::lp_norm_slice;
        let mut rng = rng_from_seed(32);
        for p in [Lp::L1, Lp::L2, Lp::LInf] {
            for _ in 0..200 {
                let n = rng.gen_range(1..128);
                let mut d: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let eps = rng.gen_range(0.001..1.5);
                project_lp(&mut d, eps, p).unwrap();
                assert!(lp_norm_slice(&d, p, false).unwrap() <= eps + 1e-9);
            }
        }
    }
}
