//! Frame resampling, training augmentation, and tensor packing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Frame, JOINT_COUNT};
use crate::tensor::{Scalar, Tensor};

/// Resamples a sequence to exactly `target` frames.
///
/// With `T >= target`, frame `i` of the output is input frame
/// `floor(i * T / target)`. Shorter sequences are repeated cyclically to at
/// least `target` frames first, then sampled the same way.
pub fn resample(frames: &[Frame], target: usize) -> Result<Vec<Frame>, DataError> {
    if frames.is_empty() || target == 0 {
        return Err(DataError::Invalid("resample: empty sequence or zero target".to_string()));
    }
    let t = frames.len();
    if t >= target {
        Ok((0..target).map(|i| frames[i * t / target]).collect())
    } else {
        let cycles = target.div_ceil(t);
        let extended = t * cycles;
        Ok((0..target).map(|i| frames[(i * extended / target) % t]).collect())
    }
}

/// Applies one random rigid motion to every frame: a rotation composed from
/// per-axis angles uniform in ±17 degrees, then a translation uniform in
/// ±0.1 m per axis.
pub fn augment(frames: &[Frame], rng: &mut ChaCha8Rng) -> Vec<Frame> {
    let max_angle = 17.0f64.to_radians();
    let ax = rng.random_range(-max_angle..max_angle);
    let ay = rng.random_range(-max_angle..max_angle);
    let az = rng.random_range(-max_angle..max_angle);
    let shift = [
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
    ];
    let rot = compose_rotation(ax, ay, az);
    frames
        .iter()
        .map(|frame| {
            let mut out = *frame;
            for p in &mut out {
                let r = mat_vec(&rot, *p);
                p[0] = r[0] + shift[0];
                p[1] = r[1] + shift[1];
                p[2] = r[2] + shift[2];
            }
            out
        })
        .collect()
}

/// Rotation matrix `Rz(az) * Ry(ay) * Rx(ax)`.
fn compose_rotation(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&rz, &mat_mul(&ry, &rx))
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for (k, bk) in b.iter().enumerate() {
                c[i][j] += a[i][k] * bk[j];
            }
        }
    }
    c
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// Packs frames into a `[3, T, N]` coordinate tensor.
pub fn sequence_tensor<E: Scalar>(frames: &[Frame]) -> Tensor<E> {
    let t = frames.len();
    let mut data = vec![E::zero(); 3 * t * JOINT_COUNT];
    for (ti, frame) in frames.iter().enumerate() {
        for (j, p) in frame.iter().enumerate() {
            for c in 0..3 {
                data[(c * t + ti) * JOINT_COUNT + j] = E::from_f64(p[c]);
            }
        }
    }
    Tensor::new(vec![3, t, JOINT_COUNT], data).expect("constructed length matches")
}

/// Stacks equal-length sequences into a `[B, 3, T, N]` batch tensor.
pub fn stack_batch<E: Scalar>(sequences: &[Vec<Frame>]) -> Result<Tensor<E>, DataError> {
    if sequences.is_empty() {
        return Err(DataError::Invalid("stack_batch: empty batch".to_string()));
    }
    let t = sequences[0].len();
    if sequences.iter().any(|s| s.len() != t) {
        return Err(DataError::Invalid("stack_batch: unequal sequence lengths".to_string()));
    }
    let per = 3 * t * JOINT_COUNT;
    let mut data = vec![E::zero(); sequences.len() * per];
    for (b, frames) in sequences.iter().enumerate() {
        let sample = sequence_tensor::<E>(frames);
        data[b * per..(b + 1) * per].copy_from_slice(sample.data());
    }
    Tensor::new(vec![sequences.len(), 3, t, JOINT_COUNT], data)
        .map_err(|e| DataError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn numbered_frames(t: usize) -> Vec<Frame> {
        (0..t)
            .map(|i| {
                let mut f = [[0.0; 3]; JOINT_COUNT];
                for p in &mut f {
                    p[0] = i as f64;
                }
                f
            })
            .collect()
    }

    #[test]
    fn downsampling_picks_floor_indices() {
        // 240 -> 48 must select frames 0, 5, 10, ..., 235.
        let frames = numbered_frames(240);
        let out = resample(&frames, 48).unwrap();
        assert_eq!(out.len(), 48);
        for (i, f) in out.iter().enumerate() {
            assert_eq!(f[0][0], (i * 5) as f64);
        }
    }

    #[test]
    fn short_sequences_extend_cyclically() {
        let frames = numbered_frames(27);
        let out = resample(&frames, 48).unwrap();
        assert_eq!(out.len(), 48);
        // The doubled 54-frame cycle is sampled uniformly, so the source
        // index wraps back below its predecessor exactly once.
        let picked: Vec<usize> = out.iter().map(|f| f[0][0] as usize).collect();
        assert_eq!(picked[0], 0);
        let wraps = picked.windows(2).filter(|w| w[1] < w[0]).count();
        assert_eq!(wraps, 1, "{picked:?}");
        assert!(picked.iter().all(|&i| i < 27));
    }

    #[test]
    fn identity_when_lengths_match() {
        let frames = numbered_frames(48);
        let out = resample(&frames, 48).unwrap();
        assert_eq!(out, frames);
    }

    #[test]
    fn rejects_empty_input() {
        assert!(resample(&[], 48).is_err());
    }

    #[test]
    fn augmentation_is_rigid() {
        let mut frames = numbered_frames(6);
        // Spread joints out so distances are informative.
        for (t, f) in frames.iter_mut().enumerate() {
            for (j, p) in f.iter_mut().enumerate() {
                p[1] = j as f64 * 0.3;
                p[2] = (t + j) as f64 * 0.05;
            }
        }
        let mut rng = stream_rng(5, "aug", 0);
        let out = augment(&frames, &mut rng);
        for (orig, new) in frames.iter().zip(&out) {
            for a in 0..JOINT_COUNT {
                for b in (a + 1)..JOINT_COUNT {
                    let d0 = dist(orig[a], orig[b]);
                    let d1 = dist(new[a], new[b]);
                    assert!((d0 - d1).abs() < 1e-9, "distance changed: {d0} vs {d1}");
                }
            }
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let frames = numbered_frames(4);
        let a = augment(&frames, &mut stream_rng(9, "aug", 2));
        let b = augment(&frames, &mut stream_rng(9, "aug", 2));
        let c = augment(&frames, &mut stream_rng(9, "aug", 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn tensor_layout_is_channel_time_joint() {
        let mut frames = numbered_frames(2);
        frames[1][4][2] = 7.5;
        let t: Tensor<f64> = sequence_tensor(&frames);
        assert_eq!(t.shape(), &[3, 2, JOINT_COUNT]);
        assert_eq!(t.at(&[2, 1, 4]), 7.5);
        assert_eq!(t.at(&[0, 1, 9]), 1.0);
    }

    #[test]
    fn batch_requires_equal_lengths() {
        let a = numbered_frames(4);
        let b = numbered_frames(5);
        assert!(stack_batch::<f64>(&[a.clone(), b]).is_err());
        let t = stack_batch::<f64>(&[a.clone(), a]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 4, JOINT_COUNT]);
    }

    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}
