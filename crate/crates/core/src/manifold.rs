//! Lorentz (hyperboloid) and Poincaré ball models of hyperbolic space.
//!
//! Points of the Lorentz model live on the upper sheet
//! `{u in R^(n+1) : <u,u>_L = -1, u_0 > 0}` where
//! `<u,v>_L = -u_0 v_0 + sum_i u_i v_i`. The Poincaré ball is the open unit
//! ball of `R^n`. The two are isometric through
//! `p_i = u_i / (1 + u_0)`.
//!
//! Typed wrappers ([`LorentzPoint`], [`PoincarePoint`], [`TangentVector`])
//! validate their invariants on construction. The [`raw`] module exposes the
//! same kernels on plain slices for inner loops that manage their own buffers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, invalid_state, Result};

/// Numerical guards shared by every geometric routine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Allowed deviation of `<u,u>_L` from -1, relative to `max(1, u_0^2)`.
    pub on_manifold_eps: f64,
    /// Floor applied to the argument of `arcosh`.
    pub arcosh_clamp: f64,
    /// Margin kept from the unit sphere when projecting into the ball.
    pub ball_margin: f64,
    /// Tangent norms below this are treated as zero by exp/log.
    pub small_norm_taylor_cutoff: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        DEFAULT_TOLERANCES
    }
}

pub const DEFAULT_TOLERANCES: Tolerances = Tolerances {
    on_manifold_eps: 1e-9,
    arcosh_clamp: 1.0 + 1e-15,
    ball_margin: 1e-6,
    small_norm_taylor_cutoff: 1e-8,
};

impl Tolerances {
    pub fn validate(&self) -> Result<()> {
        let all_positive = [
            self.on_manifold_eps,
            self.arcosh_clamp,
            self.ball_margin,
            self.small_norm_taylor_cutoff,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0);
        if !all_positive {
            return Err(invalid_argument("tolerances must be finite and strictly positive"));
        }
        if self.arcosh_clamp < 1.0 {
            return Err(invalid_argument("arcosh_clamp must be at least 1"));
        }
        if self.ball_margin >= 1.0 {
            return Err(invalid_argument("ball_margin must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Slice-level kernels without validation.
///
/// Callers guarantee equal lengths and on-manifold inputs where the typed
/// counterpart would.
pub mod raw {
    use super::DEFAULT_TOLERANCES;

    #[inline]
    pub fn inner(u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), v.len());
        let spatial: f64 = u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
        spatial - u[0] * v[0]
    }

    /// `-<u,v>_L - 1`, evaluated as `<v-u, v-u>_L / 2` so that nearby points
    /// with large coordinates do not lose their separation to cancellation.
    #[inline]
    pub fn gap(u: &[f64], v: &[f64]) -> f64 {
        let spatial: f64 = u[1..].iter().zip(&v[1..]).map(|(a, b)| (b - a) * (b - a)).sum();
        let t = v[0] - u[0];
        (0.5 * (spatial - t * t)).max(0.0)
    }

    /// `arcosh(1 + delta)` without forming `1 + delta`.
    #[inline]
    pub fn acosh1p(delta: f64) -> f64 {
        if delta <= 0.0 {
            0.0
        } else {
            (delta + (delta * (delta + 2.0)).sqrt()).ln_1p()
        }
    }

    /// `arcosh(max(-<u,v>_L, 1))`.
    #[inline]
    pub fn dist(u: &[f64], v: &[f64]) -> f64 {
        acosh1p(gap(u, v))
    }

    #[inline]
    pub fn sq_norm(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    /// Recompute the time coordinate from the spatial part.
    #[inline]
    pub fn reproject(x: &mut [f64]) {
        x[0] = (1.0 + sq_norm(&x[1..])).sqrt();
    }

    /// `z <- z + <u,z>_L u`.
    #[inline]
    pub fn project_tangent(u: &[f64], z: &mut [f64]) {
        let c = inner(u, z);
        for (zi, ui) in z.iter_mut().zip(u) {
            *zi += c * ui;
        }
    }

    /// Lorentz norm of a tangent vector, clamped at zero.
    #[inline]
    pub fn tangent_norm(z: &[f64]) -> f64 {
        inner(z, z).max(0.0).sqrt()
    }

    /// Writes `exp_u(z)` into `out`, re-projected onto the hyperboloid.
    pub fn exp_into(u: &[f64], z: &[f64], out: &mut [f64]) {
        let norm = tangent_norm(z);
        if norm < DEFAULT_TOLERANCES.small_norm_taylor_cutoff {
            out.copy_from_slice(u);
        } else {
            let (c, s) = (norm.cosh(), norm.sinh() / norm);
            for ((o, ui), zi) in out.iter_mut().zip(u).zip(z) {
                *o = c * ui + s * zi;
            }
        }
        reproject(out);
    }

    /// In-place `u <- exp_u(z)`.
    pub fn exp_in_place(u: &mut [f64], z: &[f64]) {
        let norm = tangent_norm(z);
        if norm >= DEFAULT_TOLERANCES.small_norm_taylor_cutoff {
            let (c, s) = (norm.cosh(), norm.sinh() / norm);
            for (ui, zi) in u.iter_mut().zip(z) {
                *ui = c * *ui + s * zi;
            }
        }
        reproject(u);
    }

    /// Writes `log_u(v)` into `out` and returns `d_L(u, v)`.
    pub fn log_into(u: &[f64], v: &[f64], out: &mut [f64]) -> f64 {
        let delta = gap(u, v);
        let d = acosh1p(delta);
        if d < DEFAULT_TOLERANCES.small_norm_taylor_cutoff {
            out.iter_mut().for_each(|o| *o = 0.0);
            return d;
        }
        // v + <u,v> u  =  (v - u) - delta u
        for ((o, ui), vi) in out.iter_mut().zip(u).zip(v) {
            *o = (vi - ui) - delta * ui;
        }
        project_tangent(u, out);
        let norm = tangent_norm(out);
        if norm <= 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return d;
        }
        let scale = d / norm;
        out.iter_mut().for_each(|o| *o *= scale);
        d
    }

    /// Moves `x` radially back to geodesic distance `max_radius` from the
    /// origin if it lies further out.
    #[inline]
    pub fn clip_radius(x: &mut [f64], max_radius: f64) {
        let limit = max_radius.cosh();
        if x[0] > limit {
            let spatial = sq_norm(&x[1..]).sqrt();
            if spatial > 0.0 {
                let scale = max_radius.sinh() / spatial;
                x[1..].iter_mut().for_each(|v| *v *= scale);
            }
            reproject(x);
        }
    }

    /// Poincaré distance on raw ball coordinates.
    #[inline]
    pub fn poincare_dist(p: &[f64], q: &[f64]) -> f64 {
        let diff: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        let denom = (1.0 - sq_norm(p)) * (1.0 - sq_norm(q));
        let arg = 1.0 + 2.0 * diff / denom;
        if arg <= 1.0 {
            0.0
        } else {
            arg.acosh()
        }
    }

    pub fn to_poincare_into(u: &[f64], out: &mut [f64]) {
        let denom = 1.0 + u[0];
        for (o, ui) in out.iter_mut().zip(&u[1..]) {
            *o = ui / denom;
        }
    }

    pub fn to_lorentz_into(p: &[f64], out: &mut [f64]) {
        let sq = sq_norm(p);
        let denom = 1.0 - sq;
        out[0] = (1.0 + sq) / denom;
        for (o, pi) in out[1..].iter_mut().zip(p) {
            *o = 2.0 * pi / denom;
        }
    }
}

/// A point on the upper sheet of the hyperboloid, `n + 1` ambient coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LorentzPoint(Vec<f64>);

impl LorentzPoint {
    /// Validates `<u,u>_L = -1` (relative to `max(1, u_0^2)`) and `u_0 > 0`.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(coords, DEFAULT_TOLERANCES.on_manifold_eps)
    }

    pub fn with_tolerance(coords: Vec<f64>, eps: f64) -> Result<Self> {
        if coords.len() < 2 {
            return Err(invalid_argument(format!(
                "Lorentz point needs at least 2 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(invalid_state("Lorentz point has non-finite coordinates"));
        }
        if coords[0] <= 0.0 {
            return Err(invalid_state(format!(
                "Lorentz point is on the lower sheet (u_0 = {})",
                coords[0]
            )));
        }
        let defect = (raw::inner(&coords, &coords) + 1.0).abs();
        let scale = coords[0].powi(2).max(1.0);
        if defect > eps * scale {
            return Err(invalid_state(format!(
                "point is off the hyperboloid: |<u,u>_L + 1| = {defect:e}"
            )));
        }
        Ok(Self(coords))
    }

    /// The hyperboloid origin `(1, 0, ..., 0)` of `L^n`.
    pub fn origin(n: usize) -> Self {
        let mut coords = vec![0.0; n + 1];
        coords[0] = 1.0;
        Self(coords)
    }

    /// Lifts spatial coordinates `(u_1..u_n)` onto the hyperboloid.
    pub fn from_spatial(spatial: &[f64]) -> Self {
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.push(0.0);
        coords.extend_from_slice(spatial);
        raw::reproject(&mut coords);
        Self(coords)
    }

    /// Caller guarantees the invariants (used after an explicit re-projection).
    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        debug_assert!(coords.len() >= 2 && coords[0] > 0.0);
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    /// Intrinsic dimension `n`.
    pub fn dim(&self) -> usize {
        self.0.len() - 1
    }
}

impl TryFrom<Vec<f64>> for LorentzPoint {
    type Error = crate::Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<LorentzPoint> for Vec<f64> {
    fn from(p: LorentzPoint) -> Self {
        p.0
    }
}

/// A point strictly inside the open unit ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PoincarePoint(Vec<f64>);

impl PoincarePoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid_argument("Poincaré point needs at least 1 coordinate"));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(invalid_state("Poincaré point has non-finite coordinates"));
        }
        let norm = raw::sq_norm(&coords).sqrt();
        if norm >= 1.0 {
            return Err(invalid_state(format!(
                "point lies outside the open unit ball (norm {norm})"
            )));
        }
        Ok(Self(coords))
    }

    pub fn origin(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub(crate) fn from_vec_unchecked(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        raw::sq_norm(&self.0).sqrt()
    }
}

impl TryFrom<Vec<f64>> for PoincarePoint {
    type Error = crate::Error;

    fn try_from(coords: Vec<f64>) -> Result<Self> {
        Self::new(coords)
    }
}

impl From<PoincarePoint> for Vec<f64> {
    fn from(p: PoincarePoint) -> Self {
        p.0
    }
}

/// An ambient vector in the tangent space `T_u L^n` of its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: LorentzPoint,
    vec: Vec<f64>,
}

impl TangentVector {
    /// Validates `<base, vec>_L = 0`.
    pub fn new(base: LorentzPoint, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.0.len() {
            return Err(invalid_argument(format!(
                "tangent vector has {} coordinates, base has {}",
                vec.len(),
                base.0.len()
            )));
        }
        let scale = 1.0 + base.0[0] * raw::sq_norm(&vec).sqrt();
        let defect = raw::inner(&base.0, &vec).abs();
        if defect > DEFAULT_TOLERANCES.on_manifold_eps * scale {
            return Err(invalid_state(format!(
                "vector is not tangent at its base: <u,z>_L = {defect:e}"
            )));
        }
        Ok(Self { base, vec })
    }

    pub fn zero(base: LorentzPoint) -> Self {
        let vec = vec![0.0; base.0.len()];
        Self { base, vec }
    }

    pub(crate) fn from_parts_unchecked(base: LorentzPoint, vec: Vec<f64>) -> Self {
        Self { base, vec }
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.vec
    }

    /// `sqrt(<z,z>_L)`.
    pub fn lorentz_norm(&self) -> f64 {
        raw::tangent_norm(&self.vec)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            base: self.base.clone(),
            vec: self.vec.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Points with a geodesic distance; lets metric code work on either model.
pub trait Geodesic {
    fn distance(&self, other: &Self) -> f64;
}

impl Geodesic for LorentzPoint {
    fn distance(&self, other: &Self) -> f64 {
        lorentz_dist(self, other)
    }
}

impl Geodesic for PoincarePoint {
    fn distance(&self, other: &Self) -> f64 {
        poincare_dist(self, other)
    }
}

/// Lorentzian scalar product `-u_0 v_0 + sum_i u_i v_i`.
pub fn lorentz_inner(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.len() < 2 {
        return Err(invalid_argument(format!(
            "Lorentz inner product needs equal lengths >= 2, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(raw::inner(u, v))
}

/// Geodesic distance `arcosh(-<u,v>_L)` with the argument clamped at 1.
pub fn lorentz_dist(u: &LorentzPoint, v: &LorentzPoint) -> f64 {
    assert_eq!(u.0.len(), v.0.len(), "points of different dimension");
    raw::dist(&u.0, &v.0)
}

pub fn lorentz_exp(u: &LorentzPoint, z: &TangentVector) -> Result<LorentzPoint> {
    if z.base != *u {
        return Err(invalid_argument("tangent vector is not based at the given point"));
    }
    let mut out = vec![0.0; u.0.len()];
    raw::exp_into(&u.0, &z.vec, &mut out);
    Ok(LorentzPoint(out))
}

/// Inverse of [`lorentz_exp`]: the tangent vector at `u` pointing to `v`
/// with Lorentz norm `d_L(u, v)`.
pub fn lorentz_log(u: &LorentzPoint, v: &LorentzPoint) -> TangentVector {
    assert_eq!(u.0.len(), v.0.len(), "points of different dimension");
    let mut out = vec![0.0; u.0.len()];
    raw::log_into(&u.0, &v.0, &mut out);
    TangentVector::from_parts_unchecked(u.clone(), out)
}

/// Orthogonal projection of an ambient vector onto `T_u L^n`.
pub fn tangent_project(u: &LorentzPoint, z: &[f64]) -> TangentVector {
    assert_eq!(u.0.len(), z.len(), "vector of wrong dimension");
    let mut vec = z.to_vec();
    raw::project_tangent(&u.0, &mut vec);
    TangentVector::from_parts_unchecked(u.clone(), vec)
}

/// Riemannian gradient from an ambient Euclidean gradient: flip the sign of
/// the time coordinate (inverse metric) then project onto the tangent space.
pub fn riemannian_grad(u: &LorentzPoint, euclid_grad: &[f64]) -> TangentVector {
    let mut flipped = euclid_grad.to_vec();
    flipped[0] = -flipped[0];
    tangent_project(u, &flipped)
}

/// Riemannian gradient of `d_L(., v)^2` at `u`, i.e. `-2 log_u(v)`.
pub fn grad_sq_dist_lorentz(u: &LorentzPoint, v: &LorentzPoint) -> TangentVector {
    lorentz_log(u, v).scaled(-2.0)
}

pub fn poincare_dist(p: &PoincarePoint, q: &PoincarePoint) -> f64 {
    assert_eq!(p.0.len(), q.0.len(), "points of different dimension");
    raw::poincare_dist(&p.0, &q.0)
}

/// Writes the ambient gradient of `d_p(p, q)^2` with respect to `p` into `out`.
pub fn grad_sq_dist_poincare_into(p: &[f64], q: &[f64], out: &mut [f64]) {
    let diff_sq: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
    if diff_sq == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let alpha = 1.0 - raw::sq_norm(p);
    let beta = 1.0 - raw::sq_norm(q);
    let t = 1.0 + 2.0 * diff_sq / (alpha * beta);
    let d = t.acosh();
    // d / sqrt(t^2 - 1) -> 1 as t -> 1.
    let ratio = {
        let s = (t * t - 1.0).sqrt();
        if s < 1e-12 {
            1.0
        } else {
            d / s
        }
    };
    let coef = 2.0 * ratio * 4.0 / (alpha * beta);
    let radial = diff_sq / alpha;
    for ((o, pi), qi) in out.iter_mut().zip(p).zip(q) {
        *o = coef * ((pi - qi) + radial * pi);
    }
}

/// Ambient (Euclidean) gradient of `d_p(p, q)^2` with respect to `p`.
pub fn grad_sq_dist_poincare(p: &PoincarePoint, q: &PoincarePoint) -> Vec<f64> {
    assert_eq!(p.0.len(), q.0.len(), "points of different dimension");
    let mut out = vec![0.0; p.0.len()];
    grad_sq_dist_poincare_into(&p.0, &q.0, &mut out);
    out
}

pub fn lorentz_to_poincare(u: &LorentzPoint) -> PoincarePoint {
    let mut out = vec![0.0; u.dim()];
    raw::to_poincare_into(&u.0, &mut out);
    PoincarePoint(out)
}

pub fn poincare_to_lorentz(p: &PoincarePoint) -> LorentzPoint {
    let mut out = vec![0.0; p.0.len() + 1];
    raw::to_lorentz_into(&p.0, &mut out);
    LorentzPoint(out)
}

/// Radial projection into the ball: vectors with norm `>= 1` are rescaled
/// to norm `1 - eps`, interior vectors are returned unchanged.
pub fn project_to_ball(y: &[f64], eps: f64) -> Result<PoincarePoint> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid_argument(format!("ball margin must lie in (0, 1), got {eps}")));
    }
    if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
        return Err(invalid_argument("cannot project an empty or non-finite vector"));
    }
    let norm = raw::sq_norm(y).sqrt();
    if norm >= 1.0 {
        let scale = (1.0 - eps) / norm;
        Ok(PoincarePoint(y.iter().map(|v| v * scale).collect()))
    } else {
        Ok(PoincarePoint(y.to_vec()))
    }
}

/// Keeps the spatial part and recomputes `x_0 = sqrt(1 + |x_{1..}|^2)`.
pub fn project_to_hyperboloid(x: &[f64]) -> LorentzPoint {
    assert!(x.len() >= 2, "need at least 2 ambient coordinates");
    LorentzPoint::from_spatial(&x[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn clip_radius_pulls_far_points_back() {
        let origin = LorentzPoint::origin(2);
        let mut far = vec![0.0, 30.0f64.sinh() * 0.6, 30.0f64.sinh() * 0.8];
        far[0] = (1.0 + raw::sq_norm(&far[1..])).sqrt();
        raw::clip_radius(&mut far, 8.0);
        let p = LorentzPoint::new(far.clone()).unwrap();
        assert_abs_diff_eq!(lorentz_dist(&origin, &p), 8.0, epsilon = 1e-9);
        assert_abs_diff_eq!(far[1] / far[2], 0.75, epsilon = 1e-12);
        let mut near = vec![0.0, 0.3, -0.2];
        near[0] = (1.0 + raw::sq_norm(&near[1..])).sqrt();
        let before = near.clone();
        raw::clip_radius(&mut near, 8.0);
        assert_eq!(near, before);
    }

    fn random_point(rng: &mut impl Rng, n: usize, scale: f64) -> LorentzPoint {
        let spatial: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        LorentzPoint::from_spatial(&spatial)
    }

    fn lp(c: &[f64]) -> LorentzPoint {
        LorentzPoint::new(c.to_vec()).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = lorentz_inner(&[1f64.cosh(), 1f64.sinh()], &[2f64.cosh(), 2f64.sinh()]).unwrap();
        assert_abs_diff_eq!(v, -1.543_080_634_815_243_7, epsilon = 1e-14);
        assert!(lorentz_inner(&[1.0, 0.0], &[1.0, 0.0, 0.0]).is_err());
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn distance_examples() {
        let o = LorentzPoint::origin(2);
        assert_eq!(lorentz_dist(&o, &o), 0.0);
        let d = lorentz_dist(&lp(&[1.0, 0.0]), &lp(&[1f64.cosh(), 1f64.sinh()]));
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        let d = lorentz_dist(&lp(&[0.3f64.cosh(), 0.3f64.sinh()]), &lp(&[0.7f64.cosh(), 0.7f64.sinh()]));
        assert_abs_diff_eq!(d, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn construction_rejects_off_manifold() {
        assert!(LorentzPoint::new(vec![2.0, 0.0]).is_err());
        assert!(LorentzPoint::new(vec![-1.0, 0.0]).is_err());
        assert!(PoincarePoint::new(vec![0.6, 0.8]).is_err());
        assert!(PoincarePoint::new(vec![0.6, 0.7]).is_ok());
    }

    #[test]
    fn exp_examples() {
        let o = LorentzPoint::origin(1);
        let z = TangentVector::new(o.clone(), vec![0.0, 0.0]).unwrap();
        assert_eq!(lorentz_exp(&o, &z).unwrap(), o);

        let z = TangentVector::new(o.clone(), vec![0.0, 1.0]).unwrap();
        let e = lorentz_exp(&o, &z).unwrap();
        assert_abs_diff_eq!(e.coords()[0], 1f64.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.coords()[1], 1f64.sinh(), epsilon = 1e-12);

        let o3 = LorentzPoint::origin(2);
        let z = TangentVector::new(o3.clone(), vec![0.0, 0.5, 0.0]).unwrap();
        let e = lorentz_exp(&o3, &z).unwrap();
        assert_abs_diff_eq!(e.coords()[0], 0.5f64.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(e.coords()[1], 0.5f64.sinh(), epsilon = 1e-12);
        assert_eq!(e.coords()[2], 0.0);

        let other = lp(&[1f64.cosh(), 1f64.sinh()]);
        assert!(lorentz_exp(&other, &TangentVector::zero(o)).is_err());
    }

    #[test]
    fn log_examples() {
        let u = lp(&[1.0, 0.0]);
        let zero = lorentz_log(&u, &u);
        assert!(zero.vec().iter().all(|v| *v == 0.0));
        let l = lorentz_log(&u, &lp(&[1f64.cosh(), 1f64.sinh()]));
        assert_abs_diff_eq!(l.vec()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l.vec()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let u = random_point(&mut rng, 4, 1.5);
            let v = random_point(&mut rng, 4, 1.5);
            let back = lorentz_exp(&u, &lorentz_log(&u, &v)).unwrap();
            for (a, b) in back.coords().iter().zip(v.coords()) {
                assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn tangent_projection_examples() {
        let u = lp(&[1.0, 0.0]);
        let t = tangent_project(&u, &[0.0, 3.0]);
        assert_eq!(t.vec(), &[0.0, 3.0]);
        let t = tangent_project(&u, &[1.0, 0.0]);
        assert_eq!(t.vec(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u = random_point(&mut rng, 3, 2.0);
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let once = tangent_project(&u, &z);
            assert!(lorentz_inner(u.coords(), once.vec()).unwrap().abs() < 1e-9);
            let twice = tangent_project(&u, once.vec());
            for (a, b) in once.vec().iter().zip(twice.vec()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn riemannian_grad_examples() {
        let u = lp(&[1.0, 0.0]);
        assert_eq!(riemannian_grad(&u, &[0.0, 0.0]).vec(), &[0.0, 0.0]);
        assert_eq!(riemannian_grad(&u, &[0.0, 1.0]).vec(), &[0.0, 1.0]);
    }

    #[test]
    fn grad_sq_dist_matches_ambient_route() {
        // Ambient gradient of arcosh(-<u,v>_L)^2 in u is
        // 2 d (v_0, -v_1, ..., -v_n) / sqrt(<u,v>^2 - 1).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let u = random_point(&mut rng, 3, 1.0);
            let v = random_point(&mut rng, 3, 1.0);
            let uv = raw::inner(u.coords(), v.coords());
            let d = lorentz_dist(&u, &v);
            let coef = 2.0 * d / (uv * uv - 1.0).sqrt();
            let ambient: Vec<f64> = v
                .coords()
                .iter()
                .enumerate()
                .map(|(k, vi)| if k == 0 { coef * vi } else { -coef * vi })
                .collect();
            let via_ambient = riemannian_grad(&u, &ambient);
            let via_log = grad_sq_dist_lorentz(&u, &v);
            for (a, b) in via_ambient.vec().iter().zip(via_log.vec()) {
                assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
            }
            assert_abs_diff_eq!(via_log.lorentz_norm(), 2.0 * d, epsilon = 1e-8);
        }
        let u = LorentzPoint::origin(2);
        assert!(grad_sq_dist_lorentz(&u, &u).vec().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn poincare_examples() {
        let o = PoincarePoint::origin(2);
        assert_eq!(poincare_dist(&o, &o), 0.0);
        let q = PoincarePoint::new(vec![0.5, 0.0]).unwrap();
        let d = poincare_dist(&o, &q);
        assert_abs_diff_eq!(d, 3f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d, 1.098_612_288_668_109_8, epsilon = 1e-12);
    }

    #[test]
    fn poincare_gradient_points_toward_target() {
        let p = PoincarePoint::origin(2);
        let q = PoincarePoint::new(vec![0.5, 0.0]).unwrap();
        let g = grad_sq_dist_poincare(&p, &q);
        assert!(g[0] < 0.0);
        assert_eq!(g[1], 0.0);
        let h = 1e-6;
        let f = |x: f64| {
            let pp = PoincarePoint::new(vec![x, 0.0]).unwrap();
            poincare_dist(&pp, &q).powi(2)
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        assert!(((g[0] - fd) / fd).abs() < 1e-4);
        assert!(grad_sq_dist_poincare(&q, &q).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn poincare_gradient_swapped_roles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = lorentz_to_poincare(&random_point(&mut rng, 3, 1.0));
            let q = lorentz_to_poincare(&random_point(&mut rng, 3, 1.0));
            // Gradient in the second slot via finite differences equals the
            // analytic first-slot gradient at the swapped pair.
            let g = grad_sq_dist_poincare(&q, &p);
            let h = 1e-6;
            for k in 0..3 {
                let mut plus = q.coords().to_vec();
                let mut minus = q.coords().to_vec();
                plus[k] += h;
                minus[k] -= h;
                let fp = poincare_dist(&p, &PoincarePoint::new(plus).unwrap()).powi(2);
                let fm = poincare_dist(&p, &PoincarePoint::new(minus).unwrap()).powi(2);
                let fd = (fp - fm) / (2.0 * h);
                assert!((g[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn model_conversions() {
        let o = LorentzPoint::origin(3);
        assert_eq!(lorentz_to_poincare(&o).coords(), &[0.0, 0.0, 0.0]);
        let p = lorentz_to_poincare(&lp(&[1f64.cosh(), 1f64.sinh()]));
        assert_abs_diff_eq!(p.coords()[0], 0.5f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(p.coords()[0], 0.462_117_157_260_009_8, epsilon = 1e-12);

        let back = poincare_to_lorentz(&PoincarePoint::origin(2));
        assert_eq!(back.coords(), &[1.0, 0.0, 0.0]);
        let u = poincare_to_lorentz(&PoincarePoint::new(vec![0.5f64.tanh(), 0.0]).unwrap());
        assert_abs_diff_eq!(u.coords()[0], 1f64.cosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(u.coords()[1], 1f64.sinh(), epsilon = 1e-12);
        assert_eq!(u.coords()[2], 0.0);
    }

    #[test]
    fn ball_projection_examples() {
        let p = project_to_ball(&[0.3, 0.4], 1e-6).unwrap();
        assert_eq!(p.coords(), &[0.3, 0.4]);
        let p = project_to_ball(&[3.0, 4.0], 1e-6).unwrap();
        assert_abs_diff_eq!(p.coords()[0], 0.6 * (1.0 - 1e-6), epsilon = 1e-15);
        assert_abs_diff_eq!(p.coords()[1], 0.8 * (1.0 - 1e-6), epsilon = 1e-15);
        assert_eq!(project_to_ball(&[0.0, 0.0], 1e-6).unwrap().coords(), &[0.0, 0.0]);
        assert!(project_to_ball(&[1.0], 0.0).is_err());
        let again = project_to_ball(p.coords(), 1e-6).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn hyperboloid_projection_examples() {
        assert_eq!(project_to_hyperboloid(&[7.0, 0.0, 0.0]).coords(), &[1.0, 0.0, 0.0]);
        let p = project_to_hyperboloid(&[-5.0, 1f64.sinh()]);
        assert_abs_diff_eq!(p.coords()[0], 1f64.cosh(), epsilon = 1e-12);
        assert_eq!(p.coords()[1], 1f64.sinh());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let once = project_to_hyperboloid(&x);
            assert_eq!(project_to_hyperboloid(once.coords()), once);
        }
    }

    #[test]
    fn tolerances_validate() {
        assert!(Tolerances::default().validate().is_ok());
        let bad = Tolerances { arcosh_clamp: 0.5, ..Tolerances::default() };
        assert!(bad.validate().is_err());
        let bad = Tolerances { ball_margin: 0.0, ..Tolerances::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn serde_rejects_off_manifold_points() {
        let ok: LorentzPoint = serde_json::from_str("[1.0, 0.0]").unwrap();
        assert_eq!(ok, LorentzPoint::origin(1));
        assert!(serde_json::from_str::<LorentzPoint>("[3.0, 0.0]").is_err());
        assert!(serde_json::from_str::<PoincarePoint>("[1.0, 0.0]").is_err());
    }
}
