//! Hand-crafted affective descriptor of a gait sequence.
//!
//! 31 per-frame geometric features averaged over time: 14 joint angles, 9
//! distances normalized by the root-to-neck length, and 8 triangle areas
//! normalized by its square. All directional features are measured against
//! the sequence's own mean spine axis, so the descriptor is invariant under
//! global rotation, translation, and uniform scaling.

use super::{joint, DataError, Frame};

/// Length of the affective feature vector.
pub const AFFECTIVE_DIM: usize = 31;

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn neg(a: Vec3) -> Vec3 {
    [-a[0], -a[1], -a[2]]
}

/// Angle between two vectors in `[0, pi]`; zero if either is degenerate.
fn angle(u: Vec3, v: Vec3) -> f64 {
    let nu = norm(u);
    let nv = norm(v);
    if nu < 1e-9 || nv < 1e-9 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0).acos()
}

/// Triangle area spanned by three points.
fn area(a: Vec3, b: Vec3, c: Vec3) -> f64 {
    0.5 * norm(cross(sub(b, a), sub(c, a)))
}

/// Computes the 31-dimensional affective descriptor of a sequence.
///
/// Fails if the skeleton is degenerate: any frame's root-to-neck distance
/// below 1e-6, or a collapsed mean spine axis.
pub fn compute_affective(frames: &[Frame]) -> Result<[f64; AFFECTIVE_DIM], DataError> {
    use joint::*;
    if frames.is_empty() {
        return Err(DataError::Invalid("compute_affective: empty sequence".to_string()));
    }
    // Body reference axis: temporal mean of the root-to-neck direction.
    let mut axis = [0.0f64; 3];
    for f in frames {
        let spine = sub(f[NECK], f[ROOT]);
        let len = norm(spine);
        if len <= 1e-6 {
            return Err(DataError::Invalid(
                "compute_affective: root-to-neck distance is degenerate".to_string(),
            ));
        }
        for c in 0..3 {
            axis[c] += spine[c];
        }
    }
    let axis_len = norm(axis);
    if axis_len <= 1e-9 {
        return Err(DataError::Invalid(
            "compute_affective: mean spine axis is degenerate".to_string(),
        ));
    }
    let axis = [axis[0] / axis_len, axis[1] / axis_len, axis[2] / axis_len];

    // Lateral axis from the mean hip line, orthogonalized against the spine
    // axis. Arm swing is measured in the sagittal plane, i.e. after removing
    // the lateral component, which keeps it distinct from abduction.
    let mut lateral = [0.0f64; 3];
    for f in frames {
        let d = sub(f[L_HIP], f[R_HIP]);
        for c in 0..3 {
            lateral[c] += d[c];
        }
    }
    let along = dot(lateral, axis);
    for c in 0..3 {
        lateral[c] -= along * axis[c];
    }
    let lat_len = norm(lateral);
    let lateral = if lat_len > 1e-9 {
        [lateral[0] / lat_len, lateral[1] / lat_len, lateral[2] / lat_len]
    } else {
        // Degenerate hip line: fall back to the unprojected angle.
        [0.0; 3]
    };

    let mut acc = [0.0f64; AFFECTIVE_DIM];
    for f in frames {
        let rtn = norm(sub(f[NECK], f[ROOT]));
        let mut k = 0;
        let mut push = |v: f64| {
            acc[k] += v;
            k += 1;
        };

        // 14 angles.
        push(angle(sub(f[HEAD], f[NECK]), axis));
        push(angle(sub(f[NECK], f[ROOT]), axis));
        push(angle(sub(f[L_ELBOW], f[L_SHOULDER]), neg(axis)));
        push(angle(sub(f[R_ELBOW], f[R_SHOULDER]), neg(axis)));
        push(angle(sub(f[L_SHOULDER], f[L_ELBOW]), sub(f[L_HAND], f[L_ELBOW])));
        push(angle(sub(f[R_SHOULDER], f[R_ELBOW]), sub(f[R_HAND], f[R_ELBOW])));
        push(angle(sub(f[L_KNEE], f[L_HIP]), neg(axis)));
        push(angle(sub(f[R_KNEE], f[R_HIP]), neg(axis)));
        push(angle(sub(f[L_HIP], f[L_KNEE]), sub(f[L_FOOT], f[L_KNEE])));
        push(angle(sub(f[R_HIP], f[R_KNEE]), sub(f[R_FOOT], f[R_KNEE])));
        let swing = |w: Vec3| {
            let wl = dot(w, lateral);
            let proj = [w[0] - wl * lateral[0], w[1] - wl * lateral[1], w[2] - wl * lateral[2]];
            angle(proj, neg(axis))
        };
        push(swing(sub(f[L_ELBOW], f[L_SHOULDER])));
        push(swing(sub(f[R_ELBOW], f[R_SHOULDER])));
        push(angle(sub(f[L_KNEE], f[L_HIP]), sub(f[R_KNEE], f[R_HIP])));
        push(angle(sub(f[HEAD], f[NECK]), sub(f[NECK], f[ROOT])));

        // 9 distances, in units of the root-to-neck length.
        let d = |a: usize, b: usize| norm(sub(f[a], f[b])) / rtn;
        push(d(L_HAND, R_HAND));
        push(d(L_FOOT, R_FOOT));
        push(d(L_HAND, ROOT));
        push(d(R_HAND, ROOT));
        push(d(L_FOOT, ROOT));
        push(d(R_FOOT, ROOT));
        push(d(HEAD, ROOT));
        push(d(L_HAND, HEAD));
        push(d(R_HAND, HEAD));

        // 8 triangle areas, in squared root-to-neck units.
        let rtn2 = rtn * rtn;
        let a3 = |a: usize, b: usize, c: usize| area(f[a], f[b], f[c]) / rtn2;
        push(a3(NECK, L_HAND, R_HAND));
        push(a3(ROOT, L_FOOT, R_FOOT));
        push(a3(HEAD, L_HAND, R_HAND));
        push(a3(ROOT, L_HAND, R_HAND));
        push(a3(NECK, L_FOOT, R_FOOT));
        push(a3(HEAD, L_FOOT, R_FOOT));
        push(a3(ROOT, L_KNEE, R_KNEE));
        push(a3(NECK, L_ELBOW, R_ELBOW));
        debug_assert_eq!(k, AFFECTIVE_DIM);
    }
    let inv_t = 1.0 / frames.len() as f64;
    for v in &mut acc {
        *v *= inv_t;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::JOINT_COUNT;
    use rand::Rng;

    /// A plausible standing pose with distinct limb directions.
    fn base_frame() -> Frame {
        use joint::*;
        let mut f = [[0.0; 3]; JOINT_COUNT];
        f[ROOT] = [0.0, 0.9, 0.0];
        f[SPINE] = [0.02, 1.15, 0.0];
        f[NECK] = [0.04, 1.4, 0.0];
        f[HEAD] = [0.08, 1.55, 0.0];
        f[L_SHOULDER] = [0.04, 1.35, 0.18];
        f[L_ELBOW] = [0.1, 1.1, 0.22];
        f[L_HAND] = [0.18, 0.9, 0.2];
        f[R_SHOULDER] = [0.04, 1.35, -0.18];
        f[R_ELBOW] = [0.0, 1.09, -0.24];
        f[R_HAND] = [-0.05, 0.88, -0.2];
        f[L_HIP] = [0.0, 0.88, 0.09];
        f[L_KNEE] = [0.12, 0.48, 0.1];
        f[L_FOOT] = [0.05, 0.05, 0.11];
        f[R_HIP] = [0.0, 0.88, -0.09];
        f[R_KNEE] = [-0.1, 0.47, -0.1];
        f[R_FOOT] = [-0.02, 0.04, -0.1];
        f
    }

    fn wobbled_frames(t: usize) -> Vec<Frame> {
        let mut rng = crate::rng::stream_rng(21, "affective-test", 0);
        (0..t)
            .map(|_| {
                let mut f = base_frame();
                for p in &mut f {
                    for c in p.iter_mut() {
                        *c += rng.random_range(-0.03..0.03);
                    }
                }
                f
            })
            .collect()
    }

    #[test]
    fn vector_has_31_dimensions_with_bounded_angles() {
        let v = compute_affective(&wobbled_frames(12)).unwrap();
        assert_eq!(v.len(), AFFECTIVE_DIM);
        for (i, &x) in v.iter().enumerate() {
            if i < 14 {
                assert!((0.0..=std::f64::consts::PI).contains(&x), "angle {i} = {x}");
            } else {
                assert!(x >= 0.0, "feature {i} = {x}");
            }
        }
    }

    #[test]
    fn invariant_under_rigid_motion_and_uniform_scale() {
        let frames = wobbled_frames(10);
        let reference = compute_affective(&frames).unwrap();

        // Fixed rotation (about two axes), translation, and scale by 2.
        let (s1, c1) = 0.83f64.sin_cos();
        let (s2, c2) = (-0.41f64).sin_cos();
        let transformed: Vec<Frame> = frames
            .iter()
            .map(|f| {
                let mut out = *f;
                for p in &mut out {
                    let (x, y, z) = (p[0], p[1], p[2]);
                    // Rotate about y, then about x.
                    let (x1, z1) = (c1 * x + s1 * z, -s1 * x + c1 * z);
                    let (y2, z2) = (c2 * y - s2 * z1, s2 * y + c2 * z1);
                    p[0] = 2.0 * x1 + 5.0;
                    p[1] = 2.0 * y2 - 1.0;
                    p[2] = 2.0 * z2 + 0.25;
                }
                out
            })
            .collect();
        let moved = compute_affective(&transformed).unwrap();
        for (i, (&a, &b)) in reference.iter().zip(&moved).enumerate() {
            assert!((a - b).abs() < 1e-9, "feature {i}: {a} vs {b}");
        }
    }

    #[test]
    fn right_angle_elbow_reads_half_pi() {
        use joint::*;
        let mut f = base_frame();
        f[L_SHOULDER] = [0.3, 1.3, 0.2];
        f[L_ELBOW] = [0.3, 1.0, 0.2];
        f[L_HAND] = [0.6, 1.0, 0.2];
        let v = compute_affective(&[f]).unwrap();
        assert!((v[4] - std::f64::consts::FRAC_PI_2).abs() < 1e-12, "elbow angle {}", v[4]);
    }

    #[test]
    fn joints_collapsed_onto_root_zero_out_distances_and_areas() {
        use joint::*;
        let mut f = [[0.0; 3]; JOINT_COUNT];
        f[ROOT] = [0.0, 0.0, 0.0];
        f[NECK] = [0.0, 0.5, 0.0];
        // Every other joint sits exactly on the root.
        f[SPINE] = f[ROOT];
        let v = compute_affective(&[f]).unwrap();
        for (i, &x) in v.iter().enumerate().skip(14) {
            assert_eq!(x, 0.0, "feature {i} should vanish, got {x}");
        }
    }

    #[test]
    fn degenerate_spine_is_an_error() {
        let f = [[0.0; 3]; JOINT_COUNT];
        let err = compute_affective(&[f]).unwrap_err();
        assert!(err.to_string().contains("degenerate"), "{err}");
    }

    #[test]
    fn scaling_alone_changes_nothing() {
        let frames = wobbled_frames(6);
        let reference = compute_affective(&frames).unwrap();
        let scaled: Vec<Frame> = frames
            .iter()
            .map(|f| {
                let mut out = *f;
                for p in &mut out {
                    for c in p.iter_mut() {
                        *c *= 2.0;
                    }
                }
                out
            })
            .collect();
        let v = compute_affective(&scaled).unwrap();
        for (a, b) in reference.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
