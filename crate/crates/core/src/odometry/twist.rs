//! Closed-form small-motion solver.
//!
//! For a pair `(x, y)` with `y ≈ R x + b` and `R ≈ I + [ω]ₓ`, the residual
//! `x + ω × x + b − y` is linear in the 6-vector
//! `s = (ω_z, ω_y, ω_x, b₁, b₂, b₃)`: `r = A(x) s + (x − y)` with
//!
//! ```text
//! A(x) = [ −x₂   x₃   0  | 1 0 0 ]
//!        [  x₁   0   −x₃ | 0 1 0 ]
//!        [  0   −x₁   x₂ | 0 0 1 ]
//! ```
//!
//! Each pair contributes `Qᵢ = AᵀA` and `qᵢ = Aᵀ(x − y)`, and the least
//! squares solution is `s = −(Σ Qᵢ)⁻¹ Σ qᵢ`. The slot order is the one in
//! which `qᵢ` is usually printed (`y₁x₂ − y₂x₁` first); [`TwistParams`]
//! exposes the result as an ordinary `(x, y, z)` rotation vector.

use nalgebra::{Matrix6, SymmetricEigen, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::keypoints::MkpSet;

/// Rotation-vector magnitude above which the linear model is not trusted.
pub const LINEARIZATION_LIMIT: f64 = std::f64::consts::FRAC_PI_4;

/// Largest accepted condition number of `Σ Qᵢ`.
pub const DEFAULT_MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistSystem {
    pub q_matrix: Matrix6<f64>,
    pub q_vector: Vector6<f64>,
    pub count: usize,
}

impl Default for TwistSystem {
    fn default() -> Self {
        Self {
            q_matrix: Matrix6::zeros(),
            q_vector: Vector6::zeros(),
            count: 0,
        }
    }
}

/// Linearized motion: small rotation angles about x, y, z (radians) and a
/// translation (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistParams {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
    /// Set when some rotation angle exceeds [`LINEARIZATION_LIMIT`].
    pub beyond_linear_range: bool,
}

impl TwistParams {
    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn new(rotation: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            beyond_linear_range: rotation.iter().any(|a| a.abs() > LINEARIZATION_LIMIT),
        }
    }

    /// From the solver slot order `(ω_z, ω_y, ω_x, b₁, b₂, b₃)`.
    pub fn from_slots(s: &Vector6<f64>) -> Self {
        Self::new(
            Vector3::new(s[2], s[1], s[0]),
            Vector3::new(s[3], s[4], s[5]),
        )
    }

    pub fn to_slots(&self) -> Vector6<f64> {
        let (w, b) = (&self.rotation, &self.translation);
        Vector6::new(w[2], w[1], w[0], b[0], b[1], b[2])
    }

    /// `(ωx, ωy, ωz, b₁, b₂, b₃)`.
    pub fn to_array(&self) -> [f64; 6] {
        let (w, b) = (&self.rotation, &self.translation);
        [w[0], w[1], w[2], b[0], b[1], b[2]]
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }
}

/// `Qᵢ(x)` in slot order.
pub fn pair_matrix(x: &Vector3<f64>) -> Matrix6<f64> {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    #[rustfmt::skip]
    let q = Matrix6::new(
        x1 * x1 + x2 * x2, -x2 * x3,          -x1 * x3,          -x2,  x1,  0.0,
        -x2 * x3,          x1 * x1 + x3 * x3, -x1 * x2,           x3,  0.0, -x1,
        -x1 * x3,          -x1 * x2,          x2 * x2 + x3 * x3,  0.0, -x3,  x2,
        -x2,               x3,                0.0,                1.0,  0.0, 0.0,
        x1,                0.0,               -x3,                0.0,  1.0, 0.0,
        0.0,               -x1,               x2,                 0.0,  0.0, 1.0,
    );
    q
}

/// `qᵢ(x, y)` in slot order.
pub fn pair_vector(x: &Vector3<f64>, y: &Vector3<f64>) -> Vector6<f64> {
    let (x1, x2, x3) = (x[0], x[1], x[2]);
    let (y1, y2, y3) = (y[0], y[1], y[2]);
    Vector6::new(
        y1 * x2 - y2 * x1,
        -y1 * x3 + y3 * x1,
        y2 * x3 - y3 * x2,
        x1 - y1,
        x2 - y2,
        x3 - y3,
    )
}

impl TwistSystem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate_pair(&mut self, x: &Vector3<f64>, y: &Vector3<f64>) {
        self.q_matrix += pair_matrix(x);
        self.q_vector += pair_vector(x, y);
        self.count += 1;
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vector3<f64>, Vector3<f64>)>) -> Self {
        let mut s = Self::new();
        for (x, y) in pairs {
            s.accumulate_pair(&x, &y);
        }
        s
    }

    /// The quadratic `½ sᵀ Q s + qᵀ s` minimized by [`TwistSystem::solve`].
    pub fn objective(&self, slots: &Vector6<f64>) -> f64 {
        0.5 * slots.dot(&(self.q_matrix * slots)) + self.q_vector.dot(slots)
    }

    pub fn condition_number(&self) -> f64 {
        let eig = SymmetricEigen::new(self.q_matrix).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn solve(&self) -> Result<TwistParams> {
        self.solve_with_bound(DEFAULT_MAX_CONDITION)
    }

    /// `−Q⁻¹ q` via Cholesky, after rejecting ill-conditioned systems.
    pub fn solve_with_bound(&self, max_condition: f64) -> Result<TwistParams> {
        if self.count < 3 {
            return Err(Error::DegenerateGeometry(format!(
                "{} pairs accumulated, at least 3 needed",
                self.count
            )));
        }
        let cond = self.condition_number();
        if !cond.is_finite() || cond > max_condition {
            return Err(Error::DegenerateGeometry(format!(
                "normal matrix condition number {cond:e} exceeds {max_condition:e}"
            )));
        }
        let chol = self.q_matrix.cholesky().ok_or_else(|| {
            Error::DegenerateGeometry("normal matrix is not positive definite".into())
        })?;
        let slots = -chol.solve(&self.q_vector);
        Ok(TwistParams::from_slots(&slots))
    }
}

pub fn solve_twist(system: &TwistSystem) -> Result<TwistParams> {
    system.solve()
}

/// Exact rotation exponential of the twist's rotation vector.
pub fn twist_to_pose(t: &TwistParams) -> Pose {
    Pose::from_axis_angle(t.rotation, t.translation)
}

/// Gauss–Newton refinement: re-linearizes around the current estimate until
/// the twist update is below `tol`. The first iteration is the plain
/// closed-form solution.
pub fn fit_pose_iter<I>(pairs: I, max_iters: usize, tol: f64) -> Result<Pose>
where
    I: Iterator<Item = (Vector3<f64>, Vector3<f64>)> + Clone,
{
    let mut pose = Pose::identity();
    for _ in 0..max_iters.max(1) {
        let sys = TwistSystem::from_pairs(pairs.clone().map(|(x, y)| (pose.apply(&x), y)));
        let t = sys.solve()?;
        pose = twist_to_pose(&t).compose(&pose);
        if t.norm() < tol {
            break;
        }
    }
    Ok(pose)
}

pub const REFINE_ITERATIONS: usize = 10;
pub const REFINE_TOLERANCE: f64 = 1e-12;

/// Rigid motion mapping the left points of `mkps[indices]` onto the right.
pub fn fit_pose(mkps: &MkpSet, indices: &[usize]) -> Result<Pose> {
    fit_pose_iter(
        indices.iter().map(|&i| (mkps.left(i), mkps.right(i))),
        REFINE_ITERATIONS,
        REFINE_TOLERANCE,
    )
}

/// [`fit_pose`] over every pair.
pub fn fit_pose_all(mkps: &MkpSet) -> Result<Pose> {
    let all: Vec<usize> = (0..mkps.len()).collect();
    fit_pose(mkps, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Elementwise transcription of the per-pair terms, written independently
    /// of `pair_matrix`: Q = AᵀA and q = Aᵀ(x − y) with explicit columns.
    fn oracle(x: &Vector3<f64>, y: &Vector3<f64>) -> (Matrix6<f64>, Vector6<f64>) {
        let cols: [[f64; 3]; 6] = [
            [-x[1], x[0], 0.0],
            [x[2], 0.0, -x[0]],
            [0.0, -x[2], x[1]],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        let mut q = Matrix6::zeros();
        let mut v = Vector6::zeros();
        for i in 0..6 {
            for j in 0..6 {
                q[(i, j)] = (0..3).map(|k| cols[i][k] * cols[j][k]).sum();
            }
            v[i] = (0..3).map(|k| cols[i][k] * d[k]).sum();
        }
        (q, v)
    }

    #[test]
    fn zero_pair_contributes_translation_block_only() {
        let z = Vector3::zeros();
        let q = pair_matrix(&z);
        assert_eq!(
            q,
            Matrix6::from_diagonal(&Vector6::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0))
        );
        assert_eq!(pair_vector(&z, &z), Vector6::zeros());
    }

    #[test]
    fn identity_correspondence_has_no_residual() {
        let x = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(pair_vector(&x, &x), Vector6::zeros());
    }

    #[test]
    fn keeps_printed_rotation_block_and_residual_terms() {
        let x = Vector3::new(2.0, 3.0, 5.0);
        let y = Vector3::new(7.0, 11.0, 13.0);
        let q = pair_matrix(&x);
        assert_eq!(q[(0, 0)], 2.0 * 2.0 + 3.0 * 3.0);
        assert_eq!(q[(0, 2)], -2.0 * 5.0);
        let v = pair_vector(&x, &y);
        assert_eq!(v[0], 7.0 * 3.0 - 11.0 * 2.0);
        assert_eq!(v[3], 2.0 - 7.0);
    }

    #[test]
    fn equal_pairs_give_zero_twist() {
        let pts = [
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::new(-4.0, 1.0, 0.5),
            Vector3::new(3.0, -2.0, 1.0),
            Vector3::new(0.0, 5.0, -1.0),
        ];
        let sys = TwistSystem::from_pairs(pts.iter().map(|p| (*p, *p)));
        let t = sys.solve().unwrap();
        assert_eq!(t.to_array(), [0.0; 6]);
    }

    #[test]
    fn collinear_pairs_are_degenerate() {
        let sys = TwistSystem::from_pairs((0..10).map(|i| {
            (
                Vector3::new(i as f64, 0.0, 0.0),
                Vector3::new(i as f64, 0.0, 0.0),
            )
        }));
        assert!(matches!(sys.solve(), Err(Error::DegenerateGeometry(_))));
        let few = TwistSystem::from_pairs(
            (0..2).map(|i| (Vector3::new(i as f64, 1.0, 2.0), Vector3::zeros())),
        );
        assert!(few.solve().is_err());
    }

    #[test]
    fn zero_twist_is_identity_and_yaw_maps_to_z_rotation() {
        assert_eq!(twist_to_pose(&TwistParams::zero()), Pose::identity());
        let t = TwistParams::new(
            Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_6),
            Vector3::zeros(),
        );
        let p = twist_to_pose(&t);
        let expected = crate::geometry::yaw_matrix(std::f64::consts::FRAC_PI_6);
        assert!((p.rotation - expected).abs().max() < 1e-12);
    }

    #[test]
    fn large_angles_raise_the_flag() {
        assert!(
            TwistParams::new(Vector3::new(0.0, 1.0, 0.0), Vector3::zeros()).beyond_linear_range
        );
        assert!(
            !TwistParams::new(Vector3::new(0.1, 0.1, 0.1), Vector3::zeros()).beyond_linear_range
        );
    }

    fn v3() -> impl Strategy<Value = Vector3<f64>> {
        prop::array::uniform3(-30.0..30.0f64).prop_map(Vector3::from)
    }

    proptest! {
        #[test]
        fn pair_terms_match_oracle(x in v3(), y in v3()) {
            let (q, v) = oracle(&x, &y);
            prop_assert!((pair_matrix(&x) - q).abs().max() < 1e-9);
            prop_assert!((pair_vector(&x, &y) - v).abs().max() < 1e-9);
        }

        #[test]
        fn accumulated_matrix_is_symmetric_psd(pairs in prop::collection::vec((v3(), v3()), 0..30)) {
            let sys = TwistSystem::from_pairs(pairs.iter().cloned());
            prop_assert!((sys.q_matrix - sys.q_matrix.transpose()).abs().max() < 1e-9);
            let eig = SymmetricEigen::new(sys.q_matrix).eigenvalues;
            let scale = sys.q_matrix.abs().max().max(1.0);
            prop_assert!(eig.min() > -1e-9 * scale);
        }

        #[test]
        fn solution_is_first_order_optimal(pairs in prop::collection::vec((v3(), v3()), 6..30)) {
            let sys = TwistSystem::from_pairs(pairs.iter().cloned());
            let Ok(t) = sys.solve() else { return Ok(()); };
            let s = t.to_slots();
            let f0 = sys.objective(&s);
            for k in 0..6 {
                for step in [1e-4, -1e-4] {
                    let mut p = s;
                    p[k] += step;
                    prop_assert!(sys.objective(&p) >= f0 - 1e-9 * f0.abs().max(1.0));
                }
            }
        }

        #[test]
        fn small_twist_matches_linear_model(
            w in prop::array::uniform3(-0.1..0.1f64),
            b in prop::array::uniform3(-1.0..1.0f64),
            x in v3(),
        ) {
            let t = TwistParams::new(Vector3::from(w), Vector3::from(b));
            let exact = twist_to_pose(&t).apply(&x);
            let linear = x + t.rotation.cross(&x) + t.translation;
            prop_assert!((exact - linear).norm() <= t.rotation.norm_squared() * x.norm() + 1e-12);
        }
    }
}
