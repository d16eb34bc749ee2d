use nalgebra::DVector;

use crate::error::{Error, Result};

/// Closed convex feasible set Θ.
#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    FullSpace,
    NonnegativeOrthant,
    Box { lo: Vec<f64>, hi: Vec<f64> },
    EuclideanBall { radius: f64 },
    /// β_1 ≤ β_2 ≤ … ≤ β_p.
    IsotoneCone,
}

impl ConstraintSet {
    pub fn name(&self) -> &'static str {
        match self {
            ConstraintSet::FullSpace => "full",
            ConstraintSet::NonnegativeOrthant => "nonnegative",
            ConstraintSet::Box { .. } => "box",
            ConstraintSet::EuclideanBall { .. } => "ball",
            ConstraintSet::IsotoneCone => "isotone",
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        match self {
            ConstraintSet::Box { lo, hi } => {
                if lo.len() != p || hi.len() != p {
                    return Err(Error::Shape {
                        expected: p,
                        got: lo.len().min(hi.len()),
                    });
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return Err(Error::InvalidParameter("box needs lo <= hi".into()));
                }
                Ok(())
            }
            ConstraintSet::EuclideanBall { radius } if !(*radius >= 0.0) => Err(
                Error::InvalidParameter(format!("ball radius must be nonnegative, got {radius}")),
            ),
            _ => Ok(()),
        }
    }

    /// Coordinatewise interval when Θ is a product of intervals.
    pub fn interval(&self, j: usize) -> Option<(f64, f64)> {
        match self {
            ConstraintSet::FullSpace => Some((f64::NEG_INFINITY, f64::INFINITY)),
            ConstraintSet::NonnegativeOrthant => Some((0.0, f64::INFINITY)),
            ConstraintSet::Box { lo, hi } => Some((lo[j], hi[j])),
            _ => None,
        }
    }

    pub fn is_separable(&self) -> bool {
        matches!(
            self,
            ConstraintSet::FullSpace | ConstraintSet::NonnegativeOrthant | ConstraintSet::Box { .. }
        )
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        match self {
            ConstraintSet::FullSpace => true,
            ConstraintSet::NonnegativeOrthant => x.iter().all(|&v| v >= -tol),
            ConstraintSet::Box { lo, hi } => x
                .iter()
                .enumerate()
                .all(|(j, &v)| v >= lo[j] - tol && v <= hi[j] + tol),
            ConstraintSet::EuclideanBall { radius } => x.norm() <= radius + tol,
            ConstraintSet::IsotoneCone => x.as_slice().windows(2).all(|w| w[0] <= w[1] + tol),
        }
    }
}

/// Metric projection onto Θ.
pub fn project(theta: &ConstraintSet, u: &DVector<f64>) -> DVector<f64> {
    match theta {
        ConstraintSet::FullSpace => u.clone(),
        ConstraintSet::NonnegativeOrthant => u.map(|v| v.max(0.0)),
        ConstraintSet::Box { lo, hi } => {
            DVector::from_fn(u.len(), |j, _| u[j].clamp(lo[j], hi[j]))
        }
        ConstraintSet::EuclideanBall { radius } => {
            let norm = u.norm();
            if norm <= *radius {
                u.clone()
            } else {
                u * (radius / norm)
            }
        }
        ConstraintSet::IsotoneCone => DVector::from_vec(pava(u.as_slice())),
    }
}

/// Pool-adjacent-violators: least-squares nondecreasing fit with unit weights.
pub fn pava(u: &[f64]) -> Vec<f64> {
    // (sum, count) per block
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(u.len());
    for &v in u {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 > s1 / c1 as f64 {
                blocks.pop();
                let last = blocks.last_mut().expect("nonempty");
                *last = (s0 + s1, c0 + c1);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(u.len());
    for (s, c) in blocks {
        let mean = s / c as f64;
        out.extend(std::iter::repeat_n(mean, c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn examples() {
        let u = v(&[1.5, -2.0, 0.3]);
        assert_eq!(project(&ConstraintSet::FullSpace, &u), u);
        assert_eq!(project(&ConstraintSet::NonnegativeOrthant, &v(&[-1.0, 2.0])), v(&[0.0, 2.0]));
        assert_eq!(project(&ConstraintSet::IsotoneCone, &v(&[3.0, 1.0, 2.0])), v(&[2.0, 2.0, 2.0]));
    }

    /// Brute force over the 4 possible pooling patterns of a length-3 isotone fit.
    fn isotone3_brute(u: [f64; 3]) -> [f64; 3] {
        let cands = [
            [u[0], u[1], u[2]],
            [(u[0] + u[1]) / 2.0, (u[0] + u[1]) / 2.0, u[2]],
            [u[0], (u[1] + u[2]) / 2.0, (u[1] + u[2]) / 2.0],
            [(u[0] + u[1] + u[2]) / 3.0; 3],
        ];
        let mut best = cands[3];
        let mut best_d = f64::INFINITY;
        for c in cands {
            if c[0] <= c[1] && c[1] <= c[2] {
                let d: f64 = (0..3).map(|k| (c[k] - u[k]).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
        }
        best
    }

    #[test]
    fn pava_matches_brute_force_in_three_dims() {
        let vals = [-2.0, -0.5, 0.0, 1.0, 3.0];
        for &a in &vals {
            for &b in &vals {
                for &c in &vals {
                    let got = pava(&[a, b, c]);
                    let want = isotone3_brute([a, b, c]);
                    for k in 0..3 {
                        assert!((got[k] - want[k]).abs() < 1e-14, "{a} {b} {c}");
                    }
                }
            }
        }
    }

    #[test]
    fn ball_projection_scales() {
        let p = project(&ConstraintSet::EuclideanBall { radius: 1.0 }, &v(&[3.0, 4.0]));
        assert!((p - v(&[0.6, 0.8])).norm() < 1e-15);
    }
}
