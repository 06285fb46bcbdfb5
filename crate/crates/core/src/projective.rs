//! Uncalibrated two-view machinery and projective grasp transfer.
//!
//! A stereo rig with unknown intrinsics and extrinsics still yields a
//! reconstruction that is correct up to a 4×4 homography. Two rigs observing
//! the same object points are related by such a homography, which carries
//! gripper points reconstructed by one rig into the other rig's images.
//!
//! Homogeneous quantities are stored in a canonical form (unit norm, first
//! significant component positive) so that "equal up to scale" reduces to
//! plain comparison.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, SVector, Vector3, Vector4};
use thiserror::Error;

use crate::camera::{dehomogenize, ImagePoint};
use crate::control::FeatureVector;
use crate::geometry::{skew, RigidTransform};

/// Components below this magnitude (on a unit vector) never decide the sign.
const SIGN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectiveError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("ill-conditioned triangulation (singular values {0:?})")]
    IllConditionedTriangulation([f64; 4]),
    #[error("degenerate projective basis: {0}")]
    DegenerateBasis(String),
    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("image point {0} is at infinity")]
    PointAtInfinity(usize),
}

/// Flips `v` so that its first significant component is positive and scales
/// it to unit norm. Returns `None` for a (numerically) zero vector.
fn canonicalize<const D: usize>(v: &SVector<f64, D>) -> Option<SVector<f64, D>> {
    let n = v.norm();
    if !(n > f64::MIN_POSITIVE) || !n.is_finite() {
        return None;
    }
    let u = v / n;
    let sign = u.iter().find(|c| c.abs() > SIGN_EPS).map(|c| c.signum()).unwrap_or(1.0);
    Some(u * sign)
}

/// `min(‖â − b̂‖, ‖â + b̂‖)` on unit-normalized copies.
pub fn distance_up_to_scale<const D: usize>(a: &SVector<f64, D>, b: &SVector<f64, D>) -> f64 {
    let a = a / a.norm();
    let b = b / b.norm();
    (a - b).norm().min((a + b).norm())
}

/// Same as [`distance_up_to_scale`] for matrices, compared entrywise.
pub fn matrix_distance_up_to_scale<const R: usize, const C: usize>(
    a: &nalgebra::SMatrix<f64, R, C>,
    b: &nalgebra::SMatrix<f64, R, C>,
) -> f64 {
    let a = a / a.norm();
    let b = b / b.norm();
    (a - b).amax().min((a + b).amax())
}

fn canonical_matrix<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> nalgebra::SMatrix<f64, R, C> {
    // Row-major scan so the sign convention reads naturally.
    let n = m.norm();
    let u = m / n;
    let sign = (0..R)
        .flat_map(|r| (0..C).map(move |c| (r, c)))
        .map(|rc| u[rc])
        .find(|c| c.abs() > SIGN_EPS)
        .map(|c| c.signum())
        .unwrap_or(1.0);
    u * sign
}

/// Null vector (right singular vector of the smallest singular value) of a
/// dynamic matrix, padding with zero rows when it is wide. Singular values are
/// returned in descending order.
fn null_vector(a: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>) {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        let mut p = DMatrix::zeros(cols, cols);
        p.rows_mut(0, a.nrows()).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let last = *order.last().expect("non-empty");
    (v_t.row(last).transpose(), sv)
}

/// Similarity moving the centroid to the origin with mean distance √2.
pub fn hartley_normalization(points: &[ImagePoint]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let (cu, cv) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.u, b + p.v));
    let (cu, cv) = (cu / n, cv / n);
    let mean = points.iter().map(|p| (p.u - cu).hypot(p.v - cv)).sum::<f64>() / n;
    if !(mean > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * cu, 0.0, s, -s * cv, 0.0, 0.0, 1.0))
}

fn apply2(t: &Matrix3<f64>, p: &ImagePoint) -> Vector3<f64> {
    t * p.to_homogeneous()
}

/// Rank-2 fundamental matrix with `m'ᵀ F m = 0`, unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    pub matrix: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Normalizes and canonicalizes an arbitrary-scale matrix.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self {
            matrix: canonical_matrix(m),
        }
    }

    /// `m'ᵀ F m`.
    pub fn epipolar_residual(&self, m: &ImagePoint, m_prime: &ImagePoint) -> f64 {
        m_prime.to_homogeneous().dot(&(self.matrix * m.to_homogeneous()))
    }

    /// First-order geometric (Sampson) distance squared, in px².
    pub fn sampson_error(&self, m: &ImagePoint, m_prime: &ImagePoint) -> f64 {
        let fx = self.matrix * m.to_homogeneous();
        let ftx = self.matrix.transpose() * m_prime.to_homogeneous();
        let r = m_prime.to_homogeneous().dot(&fx);
        let denom = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
        if denom > 0.0 {
            r * r / denom
        } else {
            0.0
        }
    }

    /// Right epipole `e` with `F e = 0`.
    pub fn epipole_right_null(&self) -> Vector3<f64> {
        let (v, _) = null_vector(&DMatrix::from_column_slice(3, 3, self.matrix.as_slice()));
        Vector3::new(v[0], v[1], v[2])
    }

    /// Left null direction `e'` with `Fᵀ e' = 0` (epipole in the second image).
    pub fn epipole_left_null(&self) -> Vector3<f64> {
        let ft = self.matrix.transpose();
        let (v, _) = null_vector(&DMatrix::from_column_slice(3, 3, ft.as_slice()));
        Vector3::new(v[0], v[1], v[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalFit {
    pub fundamental: FundamentalMatrix,
    /// RMS Sampson distance over the fitting matches (px).
    pub sampson_rms: f64,
}

/// Normalized 8-point estimate with rank-2 enforcement.
pub fn estimate_fundamental(matches: &[(ImagePoint, ImagePoint)]) -> Result<FundamentalFit, ProjectiveError> {
    let n = matches.len();
    if n < 8 {
        return Err(ProjectiveError::InsufficientMatches { needed: 8, got: n });
    }
    let left: Vec<_> = matches.iter().map(|m| m.0).collect();
    let right: Vec<_> = matches.iter().map(|m| m.1).collect();
    let degenerate = || ProjectiveError::DegenerateConfiguration("image points have no spread".into());
    let t = hartley_normalization(&left).ok_or_else(degenerate)?;
    let t_prime = hartley_normalization(&right).ok_or_else(degenerate)?;

    let mut a = DMatrix::zeros(n, 9);
    for (i, (m, mp)) in matches.iter().enumerate() {
        let x = apply2(&t, m);
        let xp = apply2(&t_prime, mp);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = xp[r] * x[c];
            }
        }
    }
    let (f, sv) = null_vector(&a);
    if sv[7] <= 1e-10 * sv[0] {
        return Err(ProjectiveError::DegenerateConfiguration(format!(
            "design matrix rank < 8 (σ8/σ1 = {:e})",
            sv[7] / sv[0]
        )));
    }
    let f_norm = Matrix3::from_row_slice(f.as_slice());
    let svd = f_norm.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = svd.singular_values;
    let imin = s.imin();
    s[imin] = 0.0;
    let rank2 = u * Matrix3::from_diagonal(&s) * v_t;
    let fundamental = FundamentalMatrix::from_matrix(&(t_prime.transpose() * rank2 * t));

    let sampson_rms = (matches
        .iter()
        .map(|(m, mp)| fundamental.sampson_error(m, mp))
        .sum::<f64>()
        / n as f64)
        .sqrt();
    Ok(FundamentalFit {
        fundamental,
        sampson_rms,
    })
}

/// Projection matrices of an uncalibrated pair, each defined up to scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveCameraPair {
    pub p_left: Matrix3x4<f64>,
    pub p_right: Matrix3x4<f64>,
}

impl ProjectiveCameraPair {
    pub fn new(p_left: Matrix3x4<f64>, p_right: Matrix3x4<f64>) -> Self {
        Self { p_left, p_right }
    }

    pub fn project(&self, x: &ProjectivePoint) -> (Vector3<f64>, Vector3<f64>) {
        (self.p_left * x.coords, self.p_right * x.coords)
    }
}

/// Canonical pair `P = [I | 0]`, `P' = [S(e') F | e']`.
///
/// `P` is returned exactly; `P'` has unit Frobenius norm.
pub fn cameras_from_fundamental(f: &FundamentalMatrix) -> ProjectiveCameraPair {
    let e = f.epipole_left_null().normalize();
    let mut p_right = Matrix3x4::zeros();
    p_right.fixed_view_mut::<3, 3>(0, 0).copy_from(&(skew(&e) * f.matrix));
    p_right.fixed_view_mut::<3, 1>(0, 3).copy_from(&e);
    let p_right = p_right / p_right.norm();
    ProjectiveCameraPair::new(Matrix3x4::identity(), p_right)
}

/// Fundamental matrix induced by two projection matrices: `F = S(P'C) P' P⁺`.
pub fn fundamental_from_cameras(pair: &ProjectiveCameraPair) -> FundamentalMatrix {
    let p = pair.p_left;
    let (c, _) = null_vector(&DMatrix::from_column_slice(3, 4, p.as_slice()));
    let c = Vector4::new(c[0], c[1], c[2], c[3]);
    let e = pair.p_right * c;
    let ppt = p * p.transpose();
    let pinv = p.transpose() * ppt.try_inverse().unwrap_or_else(Matrix3::zeros);
    FundamentalMatrix::from_matrix(&(skew(&e) * pair.p_right * pinv))
}

/// Homogeneous 4-vector in some projective basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectivePoint {
    pub coords: Vector4<f64>,
}

impl ProjectivePoint {
    /// Canonicalizes `coords`; `None` for the zero vector.
    pub fn new(coords: Vector4<f64>) -> Option<Self> {
        canonicalize(&coords).map(|coords| Self { coords })
    }

    pub fn from_euclidean(p: &Vector3<f64>) -> Self {
        Self::new(p.push(1.0)).expect("w = 1 is nonzero")
    }

    /// Affine coordinates, when the point is finite.
    pub fn to_euclidean(&self) -> Option<Vector3<f64>> {
        let w = self.coords.w;
        (w.abs() > 1e-12).then(|| self.coords.xyz() / w)
    }

    pub fn distance(&self, other: &ProjectivePoint) -> f64 {
        distance_up_to_scale(&self.coords, &other.coords)
    }
}

/// Passes of depth reweighting applied after the plain DLT solve.
const TRIANGULATION_REWEIGHTS: usize = 3;

fn triangulation_design(
    p: &Matrix3x4<f64>,
    pp: &Matrix3x4<f64>,
    m: &ImagePoint,
    m_prime: &ImagePoint,
    w: (f64, f64),
) -> DMatrix<f64> {
    let mut a = Matrix4::zeros();
    a.set_row(0, &((p.row(2) * m.u - p.row(0)) / w.0));
    a.set_row(1, &((p.row(2) * m.v - p.row(1)) / w.0));
    a.set_row(2, &((pp.row(2) * m_prime.u - pp.row(0)) / w.1));
    a.set_row(3, &((pp.row(2) * m_prime.v - pp.row(1)) / w.1));
    DMatrix::from_column_slice(4, 4, a.as_slice())
}

/// Linear (DLT) triangulation through both matrices of the pair.
///
/// The plain solve weights each view by the projective depth `P₃·X` of the
/// point, which is arbitrary in a projective frame. A few passes that divide
/// each view's rows by the current depth make the algebraic residual
/// approximate the image distance.
pub fn triangulate(
    pair: &ProjectiveCameraPair,
    m: &ImagePoint,
    m_prime: &ImagePoint,
) -> Result<ProjectivePoint, ProjectiveError> {
    let p = pair.p_left / pair.p_left.norm();
    let pp = pair.p_right / pair.p_right.norm();
    let (mut x, sv) = null_vector(&triangulation_design(&p, &pp, m, m_prime, (1.0, 1.0)));
    let sv4 = [sv[0], sv[1], sv[2], sv[3]];
    let no_unique_null = sv[2] <= 1e-12 * sv[0];
    let isotropic = sv[3] / sv[0] > 0.99;
    if no_unique_null || isotropic || !sv[0].is_finite() {
        return Err(ProjectiveError::IllConditionedTriangulation(sv4));
    }
    for _ in 0..TRIANGULATION_REWEIGHTS {
        let xv = Vector4::new(x[0], x[1], x[2], x[3]);
        let w = ((p.row(2) * xv)[0].abs(), (pp.row(2) * xv)[0].abs());
        if !(w.0 > 1e-12 && w.1 > 1e-12) {
            break;
        }
        x = null_vector(&triangulation_design(&p, &pp, m, m_prime, w)).0;
    }
    ProjectivePoint::new(Vector4::new(x[0], x[1], x[2], x[3])).ok_or(ProjectiveError::IllConditionedTriangulation(sv4))
}

/// Invertible 4×4 projective map, unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveHomography {
    pub matrix: Matrix4<f64>,
}

impl ProjectiveHomography {
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, ProjectiveError> {
        let matrix = canonical_matrix(m);
        if !(matrix.determinant().abs() > 1e-12) {
            return Err(ProjectiveError::DegenerateBasis(format!(
                "homography is singular (|det| = {:e})",
                matrix.determinant().abs()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self {
            matrix: canonical_matrix(&Matrix4::identity()),
        }
    }

    pub fn apply(&self, x: &ProjectivePoint) -> ProjectivePoint {
        ProjectivePoint::new(self.matrix * x.coords).expect("invertible map keeps points nonzero")
    }

    pub fn inverse(&self) -> ProjectiveHomography {
        let inv = self.matrix.try_inverse().expect("determinant checked at construction");
        ProjectiveHomography {
            matrix: canonical_matrix(&inv),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &ProjectiveHomography) -> ProjectiveHomography {
        ProjectiveHomography {
            matrix: canonical_matrix(&(self.matrix * other.matrix)),
        }
    }

    pub fn distance(&self, other: &ProjectiveHomography) -> f64 {
        matrix_distance_up_to_scale(&self.matrix, &other.matrix)
    }
}

/// Homography sending five points in general position to the canonical basis
/// `e1, e2, e3, e4, (1,1,1,1)`.
pub fn basis_homography(basis: &[ProjectivePoint; 5]) -> Result<ProjectiveHomography, ProjectiveError> {
    for skip in 0..5 {
        let cols: Vec<Vector4<f64>> = (0..5).filter(|&i| i != skip).map(|i| basis[i].coords).collect();
        let det = Matrix4::from_columns(&cols).determinant();
        if det.abs() < 1e-10 {
            return Err(ProjectiveError::DegenerateBasis(format!(
                "points other than #{skip} are coplanar (|det| = {:e})",
                det.abs()
            )));
        }
    }
    let m = Matrix4::from_columns(&[basis[0].coords, basis[1].coords, basis[2].coords, basis[3].coords]);
    let lambda = m
        .lu()
        .solve(&basis[4].coords)
        .ok_or_else(|| ProjectiveError::DegenerateBasis("first four points are dependent".into()))?;
    let scaled = m * Matrix4::from_diagonal(&lambda);
    let h = scaled
        .try_inverse()
        .ok_or_else(|| ProjectiveError::DegenerateBasis("basis matrix is singular".into()))?;
    ProjectiveHomography::from_matrix(&h)
}

/// Symmetric `S^{-1/2}` of the second-moment matrix of unit-normalized points,
/// an isotropic conditioning transform for homogeneous 4-vectors.
fn whitening(points: &[Vector4<f64>]) -> Result<Matrix4<f64>, ProjectiveError> {
    let mut s = Matrix4::zeros();
    for p in points {
        let u = p / p.norm();
        s += u * u.transpose();
    }
    s /= points.len() as f64;
    let eig = s.symmetric_eigen();
    let max = eig.eigenvalues.max();
    if !(eig.eigenvalues.min() > 1e-14 * max) {
        return Err(ProjectiveError::DegenerateBasis(
            "points do not span projective 3-space".into(),
        ));
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(eig.eigenvectors * Matrix4::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

/// DLT estimate of `H` with `dst ≃ H src` from at least five pairs.
///
/// Five generic pairs determine `H` exactly; more pairs give the unit-norm
/// minimizer of the conditioned algebraic residual.
pub fn estimate_homography_3d(
    pairs: &[(ProjectivePoint, ProjectivePoint)],
) -> Result<ProjectiveHomography, ProjectiveError> {
    let n = pairs.len();
    if n < 5 {
        return Err(ProjectiveError::InsufficientMatches { needed: 5, got: n });
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0.coords).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1.coords).collect();
    let t_src = whitening(&src)?;
    let t_dst = whitening(&dst)?;

    let mut a = DMatrix::zeros(6 * n, 16);
    let mut row = 0;
    for (x, y) in src.iter().zip(&dst) {
        let x = t_src * x;
        let x = x / x.norm();
        let y = t_dst * y;
        let y = y / y.norm();
        for k in 0..4 {
            for l in (k + 1)..4 {
                // y_k (h_l · x) − y_l (h_k · x) = 0
                for c in 0..4 {
                    a[(row, 4 * l + c)] += y[k] * x[c];
                    a[(row, 4 * k + c)] -= y[l] * x[c];
                }
                row += 1;
            }
        }
    }
    let (h, sv) = null_vector(&a);
    if sv[14] <= 1e-10 * sv[0] {
        return Err(ProjectiveError::DegenerateBasis(format!(
            "correspondences do not determine H (σ15/σ1 = {:e})",
            sv[14] / sv[0]
        )));
    }
    let h_norm = Matrix4::from_row_slice(h.as_slice());
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or_else(|| ProjectiveError::DegenerateBasis("conditioning is singular".into()))?;
    ProjectiveHomography::from_matrix(&(t_dst_inv * h_norm * t_src))
}

/// One shared object point: its images and reconstruction in each rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomographyMatch {
    pub images_x: StereoImagePair,
    pub images_y: StereoImagePair,
    pub point_x: ProjectivePoint,
    pub point_y: ProjectivePoint,
}

fn reprojection_residuals(
    h: &Matrix4<f64>,
    matches: &[HomographyMatch],
    pair_x: &ProjectiveCameraPair,
    pair_y: &ProjectiveCameraPair,
) -> Option<DVector<f64>> {
    let h_inv = h.try_inverse()?;
    let mut r = DVector::zeros(8 * matches.len());
    for (i, m) in matches.iter().enumerate() {
        let to_y = h * m.point_x.coords;
        let to_x = h_inv * m.point_y.coords;
        let projections = [
            (pair_y.p_left * to_y, m.images_y.left),
            (pair_y.p_right * to_y, m.images_y.right),
            (pair_x.p_left * to_x, m.images_x.left),
            (pair_x.p_right * to_x, m.images_x.right),
        ];
        for (k, (proj, obs)) in projections.iter().enumerate() {
            let q = dehomogenize(proj)?;
            r[8 * i + 2 * k] = q.u - obs.u;
            r[8 * i + 2 * k + 1] = q.v - obs.v;
        }
    }
    Some(r)
}

/// Levenberg–Marquardt on a unit-norm parameter vector with a
/// central-difference Jacobian. Returns the last accepted parameters and their
/// sum of squared residuals, or `None` when `x0` itself has no residuals.
fn minimize_unit_norm<F>(x0: DVector<f64>, residuals: F, max_iter: usize) -> Option<(DVector<f64>, f64)>
where
    F: Fn(&DVector<f64>) -> Option<DVector<f64>>,
{
    const STEP: f64 = 1e-7;
    let n = x0.len();
    let mut current = x0.normalize();
    let mut r = residuals(&current)?;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let mut jac = DMatrix::zeros(r.len(), n);
        for k in 0..n {
            let mut plus = current.clone();
            let mut minus = current.clone();
            plus[k] += STEP;
            minus[k] -= STEP;
            let (Some(rp), Some(rm)) = (residuals(&plus), residuals(&minus)) else {
                return Some((current, cost));
            };
            jac.set_column(k, &((rp - rm) / (2.0 * STEP)));
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let g = &jt * &r;
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj.clone();
            for d in 0..n {
                a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = (&current + delta).normalize();
            if let Some(rc) = residuals(&candidate) {
                let c = rc.norm_squared();
                if c < cost {
                    let relative = (cost - c) / cost.max(f64::MIN_POSITIVE);
                    current = candidate;
                    r = rc;
                    cost = c;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = relative > 1e-12;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Some((current, cost))
}

/// Refines `h` (with `point_y ≃ h point_x`) by Levenberg–Marquardt on the
/// symmetric image reprojection error: `h` carries the rig-x reconstruction
/// into the rig-y images and `h⁻¹` carries the rig-y reconstruction back.
///
/// Returns the refined map and the final RMS residual (px). Falls back to
/// the input when no step improves it.
pub fn refine_homography_3d(
    h: &ProjectiveHomography,
    matches: &[HomographyMatch],
    pair_x: &ProjectiveCameraPair,
    pair_y: &ProjectiveCameraPair,
    max_iter: usize,
) -> Result<(ProjectiveHomography, f64), ProjectiveError> {
    if matches.len() < 5 {
        return Err(ProjectiveError::InsufficientMatches {
            needed: 5,
            got: matches.len(),
        });
    }
    let rows = (8 * matches.len()) as f64;
    let as_matrix = |x: &DVector<f64>| Matrix4::from_row_slice(x.as_slice());
    let x0 = DVector::from_row_slice(h.matrix.transpose().as_slice());
    let (x, cost) = minimize_unit_norm(
        x0,
        |x| reprojection_residuals(&as_matrix(x), matches, pair_x, pair_y),
        max_iter,
    )
    .ok_or_else(|| ProjectiveError::DegenerateBasis("initial homography sends a point to infinity".into()))?;
    Ok((ProjectiveHomography::from_matrix(&as_matrix(&x))?, (cost / rows).sqrt()))
}

/// Images of one gripper point in the two cameras of a rig.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoImagePair {
    pub left: ImagePoint,
    pub right: ImagePoint,
}

/// A reconstructing rig: its projective cameras and the observed gripper.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSetup {
    pub cameras: ProjectiveCameraPair,
    pub gripper_images: Vec<StereoImagePair>,
}

/// Homogeneous runtime image coordinates of one transferred gripper point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferredPoint {
    pub left: Vector3<f64>,
    pub right: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichCamera {
    Left,
    Right,
}

/// Carries the gripper points observed by `setup_x` into the images of the
/// runtime pair: triangulate in basis x, map with `H^xy`, project with the
/// runtime matrices.
pub fn transfer_gripper_points(
    setup_x: &StereoSetup,
    h_xy: &ProjectiveHomography,
    setup_y: &ProjectiveCameraPair,
) -> Result<Vec<TransferredPoint>, ProjectiveError> {
    setup_x
        .gripper_images
        .iter()
        .map(|obs| {
            let b_x = triangulate(&setup_x.cameras, &obs.left, &obs.right)?;
            let b_y = h_xy.apply(&b_x);
            let (l, r) = setup_y.project(&b_y);
            Ok(TransferredPoint {
                left: l / l.norm(),
                right: r / r.norm(),
            })
        })
        .collect()
}

/// Dehomogenizes the chosen camera's transferred points into `s*`.
pub fn setpoint_from_transfer(
    points: &[TransferredPoint],
    which: WhichCamera,
) -> Result<FeatureVector, ProjectiveError> {
    let image: Vec<ImagePoint> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = match which {
                WhichCamera::Left => p.left,
                WhichCamera::Right => p.right,
            };
            dehomogenize(&m).ok_or(ProjectiveError::PointAtInfinity(i))
        })
        .collect::<Result<_, _>>()?;
    Ok(FeatureVector::from_points(&image).expect("dehomogenized points are finite"))
}

/// Projective displacement `H^go D (H^go)⁻¹` equivalent to the rigid motion `d`.
pub fn euclidean_to_projective(h_go: &ProjectiveHomography, d: &RigidTransform) -> ProjectiveHomography {
    let inv = h_go.matrix.try_inverse().expect("homography is invertible");
    ProjectiveHomography {
        matrix: canonical_matrix(&(h_go.matrix * d.to_homogeneous() * inv)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{euclidean_projection_matrix, CameraIntrinsics, CameraPose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_vec4(rng: &mut ChaCha8Rng) -> Vector4<f64> {
        Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    fn random_homography(rng: &mut ChaCha8Rng) -> Matrix4<f64> {
        loop {
            let m: Matrix4<f64> = Matrix4::from_fn(|_, _| rng.random_range(-1.0..1.0));
            if m.determinant().abs() > 0.05 {
                return m;
            }
        }
    }

    fn rig() -> (CameraPose, CameraPose) {
        let k = CameraIntrinsics::new(1000.0, 1000.0, 320.0, 240.0).unwrap();
        let k2 = CameraIntrinsics::new(900.0, 950.0, 300.0, 250.0).unwrap();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let target = Vector3::new(0.0, 0.0, 1.0);
        let c1 = CameraPose::new(
            RigidTransform::look_at(&Vector3::new(-0.2, 0.0, 0.0), &target, &up).unwrap(),
            k,
        );
        let c2 = CameraPose::new(
            RigidTransform::look_at(&Vector3::new(0.25, 0.05, 0.0), &target, &up).unwrap(),
            k2,
        );
        (c1, c2)
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(0.8..1.2),
                )
            })
            .collect()
    }

    fn analytic_f(c1: &CameraPose, c2: &CameraPose) -> Matrix3<f64> {
        // Relative motion camera 1 → camera 2.
        let rel = c2.extrinsics.compose(&c1.extrinsics.inverse());
        let k1_inv = c1.intrinsics.matrix().try_inverse().unwrap();
        let k2_inv_t = c2.intrinsics.matrix().try_inverse().unwrap().transpose();
        k2_inv_t * skew(&rel.translation) * rel.rotation * k1_inv
    }

    fn matches(c1: &CameraPose, c2: &CameraPose, pts: &[Vector3<f64>]) -> Vec<(ImagePoint, ImagePoint)> {
        pts.iter()
            .map(|p| (c1.project_world(p).unwrap(), c2.project_world(p).unwrap()))
            .collect()
    }

    #[test]
    fn eight_point_noiseless() {
        let (c1, c2) = rig();
        let pts = scene(&mut rng(1), 20);
        let m = matches(&c1, &c2, &pts);
        let fit = estimate_fundamental(&m).unwrap();
        let left: Vec<_> = m.iter().map(|x| x.0).collect();
        let right: Vec<_> = m.iter().map(|x| x.1).collect();
        let (t, tp) = (
            hartley_normalization(&left).unwrap(),
            hartley_normalization(&right).unwrap(),
        );
        let f_n = tp.try_inverse().unwrap().transpose() * fit.fundamental.matrix * t.try_inverse().unwrap();
        let f_n = f_n / f_n.norm();
        for (a, b) in &m {
            let r = apply2(&tp, b).dot(&(f_n * apply2(&t, a)));
            assert!(r.abs() <= 1e-10, "{r}");
        }
        assert!(fit.sampson_rms < 1e-8);
        assert!(fit.fundamental.matrix.determinant().abs() < 1e-9);
        assert!((fit.fundamental.matrix.norm() - 1.0).abs() < 1e-12);
        assert!(matrix_distance_up_to_scale(&fit.fundamental.matrix, &analytic_f(&c1, &c2)) < 1e-6);
    }

    #[test]
    fn identical_matches_are_degenerate() {
        let p = ImagePoint::new(100.0, 100.0);
        let m = vec![(p, p); 10];
        assert!(matches!(
            estimate_fundamental(&m),
            Err(ProjectiveError::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            estimate_fundamental(&m[..5]),
            Err(ProjectiveError::InsufficientMatches { needed: 8, got: 5 })
        ));
    }

    #[test]
    fn canonical_cameras_reproduce_f() {
        let (c1, c2) = rig();
        let f = FundamentalMatrix::from_matrix(&analytic_f(&c1, &c2));
        let pair = cameras_from_fundamental(&f);
        assert_eq!(pair.p_left, Matrix3x4::identity());
        assert!((f.matrix.transpose() * f.epipole_left_null()).norm() < 1e-10);
        let back = fundamental_from_cameras(&pair);
        assert!(matrix_distance_up_to_scale(&back.matrix, &f.matrix) < 1e-8);
    }

    #[test]
    fn triangulation_round_trip() {
        let (c1, c2) = rig();
        let pair = ProjectiveCameraPair::new(euclidean_projection_matrix(&c1), euclidean_projection_matrix(&c2));
        for p in scene(&mut rng(4), 30) {
            let (a, b) = (c1.project_world(&p).unwrap(), c2.project_world(&p).unwrap());
            let x = triangulate(&pair, &a, &b).unwrap();
            assert!(x.distance(&ProjectivePoint::from_euclidean(&p)) < 1e-9);
            let (l, r) = pair.project(&x);
            assert!(dehomogenize(&l).unwrap().distance(&a) < 1e-8);
            assert!(dehomogenize(&r).unwrap().distance(&b) < 1e-8);
            let scaled = ProjectiveCameraPair::new(pair.p_left * 3.0, pair.p_right * 3.0);
            let y = triangulate(&scaled, &a, &b).unwrap();
            assert!((x.coords - y.coords).amax() < 1e-12);
        }
    }

    #[test]
    fn triangulation_with_pixel_noise() {
        use crate::camera::add_pixel_noise;
        let (c1, c2) = rig();
        let pair = ProjectiveCameraPair::new(euclidean_projection_matrix(&c1), euclidean_projection_matrix(&c2));
        let mut noise = rng(8);
        let mut errs: Vec<f64> = scene(&mut rng(5), 100)
            .iter()
            .map(|p| {
                let a = add_pixel_noise(&c1.project_world(p).unwrap(), 0.5, &mut noise);
                let b = add_pixel_noise(&c2.project_world(p).unwrap(), 0.5, &mut noise);
                let x = triangulate(&pair, &a, &b).unwrap();
                let (l, r) = pair.project(&x);
                0.5 * (dehomogenize(&l).unwrap().distance(&a) + dehomogenize(&r).unwrap().distance(&b))
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[50] <= 1.0, "median reprojection {}", errs[50]);
    }

    #[test]
    fn coincident_rays_are_ill_conditioned() {
        let p = Matrix3x4::identity();
        let pair = ProjectiveCameraPair::new(p, p);
        let m = ImagePoint::new(0.1, 0.2);
        assert!(matches!(
            triangulate(&pair, &m, &m),
            Err(ProjectiveError::IllConditionedTriangulation(_))
        ));
    }

    fn canonical_basis() -> [ProjectivePoint; 5] {
        [
            Vector4::x(),
            Vector4::y(),
            Vector4::z(),
            Vector4::w(),
            Vector4::new(1.0, 1.0, 1.0, 1.0),
        ]
        .map(|v| ProjectivePoint::new(v).unwrap())
    }

    #[test]
    fn canonical_basis_gives_identity() {
        let h = basis_homography(&canonical_basis()).unwrap();
        assert!(h.distance(&ProjectiveHomography::identity()) < 1e-12);
    }

    #[test]
    fn basis_homography_defining_property() {
        let mut r = rng(12);
        for _ in 0..50 {
            let pts = [(); 5].map(|_| ProjectivePoint::new(random_vec4(&mut r)).unwrap());
            let Ok(h) = basis_homography(&pts) else { continue };
            for (p, e) in pts.iter().zip(canonical_basis().iter()) {
                assert!(h.apply(p).distance(e) < 1e-10);
            }
        }
    }

    #[test]
    fn coplanar_basis_rejected() {
        let mut pts = canonical_basis();
        pts[3] = ProjectivePoint::new(Vector4::new(1.0, 1.0, 0.0, 0.0)).unwrap();
        assert!(matches!(
            basis_homography(&pts),
            Err(ProjectiveError::DegenerateBasis(_))
        ));
    }

    #[test]
    fn homography_from_synthetic_pairs() {
        let mut r = rng(21);
        for count in [5, 6, 12] {
            let h = ProjectiveHomography::from_matrix(&random_homography(&mut r)).unwrap();
            let pairs: Vec<_> = (0..count)
                .map(|_| {
                    let x = ProjectivePoint::new(random_vec4(&mut r)).unwrap();
                    (x, h.apply(&x))
                })
                .collect();
            let est = estimate_homography_3d(&pairs).unwrap();
            assert!(est.distance(&h) < 1e-8, "count {count}: {}", est.distance(&h));
        }
        let pairs: Vec<_> = (0..7)
            .map(|_| {
                let x = ProjectivePoint::new(random_vec4(&mut r)).unwrap();
                (x, x)
            })
            .collect();
        assert!(
            estimate_homography_3d(&pairs)
                .unwrap()
                .distance(&ProjectiveHomography::identity())
                < 1e-10
        );
        assert!(matches!(
            estimate_homography_3d(&pairs[..4]),
            Err(ProjectiveError::InsufficientMatches { needed: 5, got: 4 })
        ));
    }

    #[test]
    fn homography_error_shrinks_with_more_pairs() {
        // Points perturbed in affine coordinates; error measured on held-out points.
        let mut medians = Vec::new();
        for count in [5usize, 10, 20] {
            let mut errs = Vec::new();
            for seed in 0..40 {
                let mut r = rng(1000 + seed);
                let h = ProjectiveHomography::from_matrix(&random_homography(&mut r)).unwrap();
                let draw = |r: &mut ChaCha8Rng| {
                    let p = Vector3::new(
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                        r.random_range(-1.0..1.0),
                    );
                    ProjectivePoint::from_euclidean(&p)
                };
                let pairs: Vec<_> = (0..count)
                    .map(|_| {
                        let x = draw(&mut r);
                        let y = h.apply(&x);
                        let noisy =
                            ProjectivePoint::new(y.coords + Vector4::from_fn(|_, _| r.random_range(-1e-3..1e-3)))
                                .unwrap();
                        (x, noisy)
                    })
                    .collect();
                let est = estimate_homography_3d(&pairs).unwrap();
                let held: f64 = (0..50)
                    .map(|_| {
                        let x = draw(&mut r);
                        est.apply(&x).distance(&h.apply(&x))
                    })
                    .sum::<f64>()
                    / 50.0;
                errs.push(held);
            }
            errs.sort_by(f64::total_cmp);
            medians.push(errs[errs.len() / 2]);
        }
        assert!(medians[0] > medians[1] && medians[1] > medians[2], "{medians:?}");
    }

    #[test]
    fn basis_route_matches_direct_route() {
        let mut r = rng(33);
        let h_true = ProjectiveHomography::from_matrix(&random_homography(&mut r)).unwrap();
        let a_x: Vec<_> = (0..8)
            .map(|_| ProjectivePoint::new(random_vec4(&mut r)).unwrap())
            .collect();
        let a_y: Vec<_> = a_x.iter().map(|p| h_true.apply(p)).collect();
        let h_xo = basis_homography(&[a_x[0], a_x[1], a_x[2], a_x[3], a_x[4]]).unwrap();
        let h_yo = basis_homography(&[a_y[0], a_y[1], a_y[2], a_y[3], a_y[4]]).unwrap();
        let composed = h_yo.inverse().compose(&h_xo);
        let pairs: Vec<_> = a_x.iter().copied().zip(a_y.iter().copied()).collect();
        let direct = estimate_homography_3d(&pairs).unwrap();
        assert!(composed.distance(&direct) < 1e-8);
    }

    #[test]
    fn identity_transfer_reproduces_inputs() {
        let (c1, c2) = rig();
        let pair = ProjectiveCameraPair::new(euclidean_projection_matrix(&c1), euclidean_projection_matrix(&c2));
        let pts = scene(&mut rng(2), 4);
        let setup = StereoSetup {
            cameras: pair,
            gripper_images: matches(&c1, &c2, &pts)
                .into_iter()
                .map(|(left, right)| StereoImagePair { left, right })
                .collect(),
        };
        let out = transfer_gripper_points(&setup, &ProjectiveHomography::identity(), &pair).unwrap();
        let s_left = setpoint_from_transfer(&out, WhichCamera::Left).unwrap();
        let s_right = setpoint_from_transfer(&out, WhichCamera::Right).unwrap();
        for (j, obs) in setup.gripper_images.iter().enumerate() {
            assert!(s_left.point(j).distance(&obs.left) < 1e-8);
            assert!(s_right.point(j).distance(&obs.right) < 1e-8);
        }
    }

    #[test]
    fn setpoint_dehomogenizes_in_order() {
        let pts = vec![
            TransferredPoint {
                left: Vector3::new(512.0, 512.0, 2.0),
                right: Vector3::new(1.0, 2.0, 1.0),
            },
            TransferredPoint {
                left: Vector3::new(3.0, 6.0, 3.0),
                right: Vector3::new(1.0, 2.0, 1.0),
            },
        ];
        let s = setpoint_from_transfer(&pts, WhichCamera::Left).unwrap();
        assert_eq!(s.point(0), ImagePoint::new(256.0, 256.0));
        assert_eq!(s.point(1), ImagePoint::new(1.0, 2.0));
        let bad = vec![TransferredPoint {
            left: Vector3::new(1.0, 1.0, 0.0),
            right: Vector3::z(),
        }];
        assert_eq!(
            setpoint_from_transfer(&bad, WhichCamera::Left),
            Err(ProjectiveError::PointAtInfinity(0))
        );
    }

    #[test]
    fn projective_displacement_is_conjugation() {
        let mut r = rng(41);
        let h_go = ProjectiveHomography::from_matrix(&random_homography(&mut r)).unwrap();
        assert!(
            euclidean_to_projective(&h_go, &RigidTransform::identity()).distance(&ProjectiveHomography::identity())
                < 1e-12
        );
        let d1 = RigidTransform::from_axis_angle(Vector3::new(0.1, 0.5, -0.2), Vector3::new(0.3, 0.0, -0.1));
        let d2 = RigidTransform::from_axis_angle(Vector3::new(-0.4, 0.2, 0.3), Vector3::new(0.0, 0.2, 0.5));
        let composed = euclidean_to_projective(&h_go, &d1.compose(&d2));
        let separate = euclidean_to_projective(&h_go, &d1).compose(&euclidean_to_projective(&h_go, &d2));
        assert!(composed.distance(&separate) < 1e-9);
        let p = Vector3::new(0.3, -0.2, 0.9);
        let lhs = euclidean_to_projective(&h_go, &d1).apply(&h_go.apply(&ProjectivePoint::from_euclidean(&p)));
        let rhs = h_go.apply(&ProjectivePoint::from_euclidean(&d1.transform_point(&p)));
        assert!(lhs.distance(&rhs) < 1e-9);
    }

    fn two_rig_matches(
        noise: f64,
        seed: u64,
    ) -> (
        Vec<HomographyMatch>,
        ProjectiveCameraPair,
        ProjectiveCameraPair,
        ProjectiveHomography,
    ) {
        use crate::camera::add_pixel_noise;
        let (c1, c2) = rig();
        let up = Vector3::new(0.0, 1.0, 0.0);
        let k = CameraIntrinsics::new(1100.0, 1050.0, 330.0, 250.0).unwrap();
        let target = Vector3::new(0.05, 0.0, 1.0);
        let d1 = CameraPose::new(
            RigidTransform::look_at(&Vector3::new(-0.35, 0.1, 0.1), &target, &up).unwrap(),
            k,
        );
        let d2 = CameraPose::new(
            RigidTransform::look_at(&Vector3::new(0.3, -0.05, 0.05), &target, &up).unwrap(),
            k,
        );
        let pts = scene(&mut rng(seed), 18);
        let mut noise_rng = rng(seed + 100);
        let mut obs =
            |c: &CameraPose, p: &Vector3<f64>| add_pixel_noise(&c.project_world(p).unwrap(), noise, &mut noise_rng);
        let px = ProjectiveCameraPair::new(euclidean_projection_matrix(&c1), euclidean_projection_matrix(&c2));
        let py = ProjectiveCameraPair::new(euclidean_projection_matrix(&d1), euclidean_projection_matrix(&d2));
        let matches: Vec<_> = pts
            .iter()
            .map(|p| {
                let images_x = StereoImagePair {
                    left: obs(&c1, p),
                    right: obs(&c2, p),
                };
                let images_y = StereoImagePair {
                    left: obs(&d1, p),
                    right: obs(&d2, p),
                };
                HomographyMatch {
                    images_x,
                    images_y,
                    point_x: triangulate(&px, &images_x.left, &images_x.right).unwrap(),
                    point_y: triangulate(&py, &images_y.left, &images_y.right).unwrap(),
                }
            })
            .collect();
        let linear =
            estimate_homography_3d(&matches.iter().map(|m| (m.point_x, m.point_y)).collect::<Vec<_>>()).unwrap();
        (matches, px, py, linear)
    }

    #[test]
    fn refinement_keeps_exact_solution() {
        let (matches, px, py, linear) = two_rig_matches(0.0, 3);
        // Both rigs are Euclidean here, so the true map is the identity.
        assert!(linear.distance(&ProjectiveHomography::identity()) < 1e-9);
        let (refined, rms) = refine_homography_3d(&linear, &matches, &px, &py, 10).unwrap();
        assert!(rms < 1e-6);
        assert!(refined.distance(&ProjectiveHomography::identity()) < 1e-9);
    }

    #[test]
    fn refinement_lowers_reprojection_error() {
        let (matches, px, py, linear) = two_rig_matches(0.5, 9);
        let (_, rms0) = refine_homography_3d(&linear, &matches, &px, &py, 0).unwrap();
        let (_, rms) = refine_homography_3d(&linear, &matches, &px, &py, 20).unwrap();
        assert!(rms < rms0, "{rms} vs {rms0}");
        assert!(rms < 1.0);
    }

    #[test]
    fn canonical_form_is_scale_invariant() {
        let v = Vector4::new(-0.3, 0.2, 1.5, -2.0);
        let a = ProjectivePoint::new(v).unwrap();
        let b = ProjectivePoint::new(v * -7.5).unwrap();
        assert!((a.coords - b.coords).amax() < 1e-15);
        assert!(a.coords[0] > 0.0);
        assert!(ProjectivePoint::new(Vector4::zeros()).is_none());
    }
}
