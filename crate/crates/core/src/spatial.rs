//! Spatial (6D) vector algebra in world-aligned Plücker coordinates.
//!
//! All spatial quantities in this crate are expressed in a single coordinate
//! system: world axes, referenced at the world origin. A motion vector is
//! `(angular; linear)` where the linear part is the velocity of the body
//! point currently coincident with the world origin. A force vector is
//! `(moment about the origin; force)`. Using one shared frame removes every
//! coordinate transform from the dynamics recursions; the price is a shift
//! whenever a quantity is needed at a specific point, handled by
//! [`shift_motion_to_point`].

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

/// Motion vector `(angular velocity; linear velocity of the origin-coincident point)`.
pub type SpatialMotion = Vector6<f64>;
/// Force vector `(moment about the origin; force)`.
pub type SpatialForce = Vector6<f64>;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

/// Assembles a motion vector from angular and linear parts.
pub fn motion(ang: Vector3<f64>, lin: Vector3<f64>) -> SpatialMotion {
    Vector6::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

/// Angular part (rows 0..3).
pub fn ang(v: &Vector6<f64>) -> Vector3<f64> {
    v.fixed_rows::<3>(0).into_owned()
}

/// Linear part (rows 3..6).
pub fn lin(v: &Vector6<f64>) -> Vector3<f64> {
    v.fixed_rows::<3>(3).into_owned()
}

/// Motion cross-product operator: `crm(v) * m` is the rate of change of the
/// motion vector `m` when it is fixed in a body moving with velocity `v`.
pub fn crm(v: &SpatialMotion) -> Matrix6<f64> {
    let w = skew(&ang(v));
    let vo = skew(&lin(v));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&vo);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m
}

/// Force cross-product operator, the dual of [`crm`]: `crf(v) == -crm(v)ᵀ`.
pub fn crf(v: &SpatialMotion) -> Matrix6<f64> {
    -crm(v).transpose()
}

/// Spatial inertia of a rigid body, referenced at the world origin.
///
/// `mass` in kg, `com` the world position of the center of mass,
/// `inertia_com` the rotational inertia about the center of mass expressed
/// on world axes.
pub fn spatial_inertia_at_origin(
    mass: f64,
    com: &Vector3<f64>,
    inertia_com: &Matrix3<f64>,
) -> Matrix6<f64> {
    let c = skew(com);
    let mut i = Matrix6::zeros();
    i.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(inertia_com - c * c * mass));
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(c * mass));
    i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-c * mass));
    i.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(Matrix3::identity() * mass));
    i
}

/// Velocity of the body point at world position `p`, given the body's
/// origin-referenced motion vector: `v_p = v_origin + ω × p`.
pub fn point_velocity(v: &SpatialMotion, p: &Vector3<f64>) -> Vector3<f64> {
    lin(v) + ang(v).cross(p)
}

/// Re-references a motion vector at the point `p`: the angular part is
/// unchanged, the linear part becomes the velocity of the point itself.
/// Applied row-blockwise to a Jacobian this turns origin-referenced columns
/// into frame-referenced ones.
pub fn shift_motion_to_point(v: &SpatialMotion, p: &Vector3<f64>) -> SpatialMotion {
    motion(ang(v), point_velocity(v, p))
}

/// Classical (point) acceleration of the body point at `p`, given the
/// body's spatial acceleration and velocity at the origin:
/// `a_p = a_origin + ω̇ × p + ω × v_p`.
pub fn point_acceleration(
    a: &SpatialMotion,
    v: &SpatialMotion,
    p: &Vector3<f64>,
) -> Vector3<f64> {
    lin(a) + ang(a).cross(p) + ang(v).cross(&point_velocity(v, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn skew_matches_cross_product() {
        let a = Vector3::new(0.3, -1.2, 2.0);
        let b = Vector3::new(-0.7, 0.4, 1.1);
        assert_relative_eq!(skew(&a) * b, a.cross(&b), epsilon = 1e-15);
    }

    #[test]
    fn crf_is_negative_transpose_of_crm() {
        let v = motion(Vector3::new(0.1, 0.2, -0.3), Vector3::new(1.0, -2.0, 0.5));
        assert_relative_eq!(crf(&v), -crm(&v).transpose(), epsilon = 1e-15);
    }

    #[test]
    fn motion_cross_with_itself_vanishes() {
        let v = motion(Vector3::new(0.4, -0.1, 0.9), Vector3::new(-0.2, 0.8, 0.3));
        assert_relative_eq!(crm(&v) * v, Vector6::zeros(), epsilon = 1e-15);
    }

    #[test]
    fn spatial_inertia_kinetic_energy_matches_point_mass() {
        // A point mass at p, body rotating at ω about the origin with zero
        // origin velocity: KE must equal ½ m ‖ω × p‖².
        let m = 2.5;
        let p = Vector3::new(0.3, -0.2, 0.7);
        let i = spatial_inertia_at_origin(m, &p, &Matrix3::zeros());
        let w = Vector3::new(0.5, 1.1, -0.4);
        let v = motion(w, Vector3::zeros());
        let ke = 0.5 * (v.transpose() * i * v)[(0, 0)];
        let v_point = w.cross(&p);
        assert_relative_eq!(ke, 0.5 * m * v_point.norm_squared(), epsilon = 1e-12);
    }

    #[test]
    fn spatial_inertia_is_symmetric() {
        let i = spatial_inertia_at_origin(
            3.0,
            &Vector3::new(0.1, 0.2, 0.3),
            &Matrix3::new(0.4, 0.01, 0.0, 0.01, 0.5, 0.02, 0.0, 0.02, 0.3),
        );
        assert_relative_eq!(i, i.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn point_velocity_of_rotating_body() {
        let w = Vector3::new(0.0, 0.0, 2.0);
        let v = motion(w, Vector3::zeros());
        // Point on the x axis moves in +y under +z rotation.
        let vp = point_velocity(&v, &Vector3::new(1.5, 0.0, 0.0));
        assert_relative_eq!(vp, Vector3::new(0.0, 3.0, 0.0), epsilon = 1e-14);
    }
}
