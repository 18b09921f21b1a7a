//! Motion stream derivation from coordinate tensors.

use super::DataError;
use crate::tensor::{Scalar, Tensor};

/// Channels produced by [`motion_stream`]: velocity xyz, speed, acceleration
/// xyz, acceleration magnitude.
pub const MOTION_CHANNELS: usize = 8;

/// Derives per-joint motion channels from a `[B, 3, T, N]` coordinate batch.
///
/// Velocity is the backward difference `x[t] - x[t-1]` with zeros at `t = 0`;
/// acceleration is the backward difference of velocity with zeros at `t = 0`.
/// Channel order: `[vx, vy, vz, |v|, ax, ay, az, |a|]`.
pub fn motion_stream<E: Scalar>(coords: &Tensor<E>) -> Result<Tensor<E>, DataError> {
    let shape = coords.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DataError::Invalid(format!(
            "motion_stream: expected [B, 3, T, N], got {shape:?}"
        )));
    }
    let (b, t, n) = (shape[0], shape[2], shape[3]);
    let xd = coords.data();
    let mut out = vec![E::zero(); b * MOTION_CHANNELS * t * n];
    let in_at = |bi: usize, c: usize, ti: usize, j: usize| xd[((bi * 3 + c) * t + ti) * n + j];
    for bi in 0..b {
        let base = bi * MOTION_CHANNELS * t * n;
        let mut set = |c: usize, ti: usize, j: usize, v: E| {
            out[base + (c * t + ti) * n + j] = v;
        };
        for ti in 1..t {
            for j in 0..n {
                let mut speed_sq = E::zero();
                for c in 0..3 {
                    let v = in_at(bi, c, ti, j) - in_at(bi, c, ti - 1, j);
                    speed_sq += v * v;
                    set(c, ti, j, v);
                }
                set(3, ti, j, speed_sq.sqrt());
            }
        }
        for ti in 1..t {
            for j in 0..n {
                let mut mag_sq = E::zero();
                for c in 0..3 {
                    let v_now = out[base + (c * t + ti) * n + j];
                    let v_prev = out[base + (c * t + ti - 1) * n + j];
                    let a = v_now - v_prev;
                    mag_sq += a * a;
                    out[base + ((c + 4) * t + ti) * n + j] = a;
                }
                out[base + (7 * t + ti) * n + j] = mag_sq.sqrt();
            }
        }
    }
    Tensor::new(vec![b, MOTION_CHANNELS, t, n], out)
        .map_err(|e| DataError::Invalid(e.to_string()))
}

/// Subtracts the root joint's position from every joint, per frame.
///
/// The posture stream consumes body-shape information; removing the global
/// trajectory keeps activations bounded while [`motion_stream`] retains the
/// full displacement signal.
pub fn root_centered<E: Scalar>(coords: &Tensor<E>) -> Result<Tensor<E>, DataError> {
    let shape = coords.shape();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(DataError::Invalid(format!(
            "root_centered: expected [B, 3, T, N], got {shape:?}"
        )));
    }
    let (b, t, n) = (shape[0], shape[2], shape[3]);
    let mut out = coords.data().to_vec();
    for bi in 0..b {
        for c in 0..3 {
            for ti in 0..t {
                let row = ((bi * 3 + c) * t + ti) * n;
                let root = out[row];
                for j in 0..n {
                    out[row + j] -= root;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out).map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sequence_tensor, stack_batch, Frame, JOINT_COUNT};

    fn moving_frames<F: Fn(usize) -> f64>(t: usize, pos: F) -> Vec<Frame> {
        (0..t)
            .map(|ti| {
                let mut f = [[0.0; 3]; JOINT_COUNT];
                for p in &mut f {
                    p[0] = pos(ti);
                }
                f
            })
            .collect()
    }

    #[test]
    fn linear_motion_has_unit_velocity_and_zero_late_acceleration() {
        let frames = moving_frames(6, |t| t as f64);
        let coords = stack_batch::<f64>(&[frames]).unwrap();
        let m = motion_stream(&coords).unwrap();
        assert_eq!(m.shape(), &[1, 8, 6, JOINT_COUNT]);
        for j in 0..JOINT_COUNT {
            assert_eq!(m.at(&[0, 0, 0, j]), 0.0, "velocity zero at t=0");
            for t in 1..6 {
                assert!((m.at(&[0, 0, t, j]) - 1.0).abs() < 1e-12);
                assert!((m.at(&[0, 3, t, j]) - 1.0).abs() < 1e-12, "speed is |v|");
            }
            // First usable acceleration sample sees the 0 -> 1 velocity jump.
            assert!((m.at(&[0, 4, 1, j]) - 1.0).abs() < 1e-12);
            for t in 2..6 {
                assert_eq!(m.at(&[0, 4, t, j]), 0.0, "constant velocity");
                assert_eq!(m.at(&[0, 7, t, j]), 0.0);
            }
        }
    }

    #[test]
    fn quadratic_motion_has_constant_acceleration() {
        let frames = moving_frames(7, |t| (t * t) as f64);
        let coords = stack_batch::<f64>(&[frames]).unwrap();
        let m = motion_stream(&coords).unwrap();
        for t in 1..7 {
            let v = m.at(&[0, 0, t, 0]);
            assert!((v - (2 * t - 1) as f64).abs() < 1e-12);
        }
        for t in 2..7 {
            assert!((m.at(&[0, 4, t, 0]) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn velocity_is_translation_invariant() {
        let a = moving_frames(5, |t| (t as f64).sin());
        let mut b = a.clone();
        for f in &mut b {
            for p in f.iter_mut() {
                p[0] += 100.0;
                p[1] += -3.0;
            }
        }
        let ma = motion_stream(&stack_batch::<f64>(&[a]).unwrap()).unwrap();
        let mb = motion_stream(&stack_batch::<f64>(&[b]).unwrap()).unwrap();
        assert!(ma.max_abs_diff(&mb) < 1e-12);
    }

    #[test]
    fn root_centering_zeroes_the_root_track() {
        let mut frames = moving_frames(4, |t| t as f64 * 2.0);
        for (t, f) in frames.iter_mut().enumerate() {
            f[5][1] = 1.0 + t as f64;
        }
        let coords = sequence_tensor::<f64>(&frames)
            .reshaped(vec![1, 3, 4, JOINT_COUNT])
            .unwrap();
        let centered = root_centered(&coords).unwrap();
        for t in 0..4 {
            for c in 0..3 {
                assert_eq!(centered.at(&[0, c, t, 0]), 0.0);
            }
            // Joint 5 keeps its offset relative to the root.
            assert_eq!(centered.at(&[0, 1, t, 5]), 1.0 + t as f64);
            assert_eq!(centered.at(&[0, 0, t, 5]), 0.0);
        }
    }
}
