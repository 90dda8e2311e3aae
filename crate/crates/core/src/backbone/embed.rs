//! Patch/positional/timestep embeddings and label dropout.

use ndarray::{Array2, Array3, Array4};
use rand::Rng;

use crate::{Error, Result, Scalar};

/// `[B, C, H, W]` → `[B, N, C·p²]`, patches in row-major order and each token
/// laid out as `(channel, row-in-patch, col-in-patch)`.
pub fn patchify<S: Scalar>(images: &Array4<S>, patch: usize) -> Result<Array3<S>> {
    let (b, c, h, w) = images.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let width = c * patch * patch;
    let mut out = Array3::zeros((b, gh * gw, width));
    for n in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let tok = py * gw + px;
                let mut k = 0;
                for ch in 0..c {
                    for i in 0..patch {
                        for j in 0..patch {
                            out[[n, tok, k]] = images[[n, ch, py * patch + i, px * patch + j]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(
    tokens: &Array3<S>,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Array4<S>> {
    let (b, n, d) = tokens.dim();
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (height / patch, width / patch);
    if n != gh * gw || d != channels * patch * patch {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: vec![b, n, d],
            rhs: vec![b, gh * gw, channels * patch * patch],
        });
    }
    let mut out = Array4::zeros((b, channels, height, width));
    for s in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let tok = py * gw + px;
                let mut k = 0;
                for ch in 0..channels {
                    for i in 0..patch {
                        for j in 0..patch {
                            out[[s, ch, py * patch + i, px * patch + j]] = tokens[[s, tok, k]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn sincos_1d(dim: usize, pos: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let omega = |i: usize| 1.0 / 10000f64.powf(i as f64 / half as f64);
    out.extend((0..half).map(|i| (pos * omega(i)).sin()));
    out.extend((0..half).map(|i| (pos * omega(i)).cos()));
    out
}

/// Fixed 2-D sine/cosine position table `[gh·gw, dim]`; half the width
/// encodes the row, half the column.
pub fn sincos_position_table<S: Scalar>(dim: usize, grid_h: usize, grid_w: usize) -> Array2<S> {
    let mut table = Array2::zeros((grid_h * grid_w, dim));
    let half = dim / 2;
    for y in 0..grid_h {
        for x in 0..grid_w {
            let row = sincos_1d(half, y as f64);
            let col = sincos_1d(dim - half, x as f64);
            for (k, v) in row.into_iter().chain(col).enumerate() {
                table[[y * grid_w + x, k]] = S::of(v);
            }
        }
    }
    table
}

/// Sinusoidal frequency features of a scalar time: `[cos(t·f_i), sin(t·f_i)]`
/// with `f_i = 10000^{-i/half}`.
pub fn timestep_frequencies(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let mut out: Vec<f64> = freqs.clone().map(|f| (t * f).cos()).collect();
    out.extend(freqs.map(|f| (t * f).sin()));
    out.resize(dim, 0.0);
    out
}

/// Replaces each label by `null_id` with probability `prob`. One uniform is
/// drawn per label regardless of `prob`, so random consumption is fixed.
pub fn apply_label_dropout<R: Rng + ?Sized>(
    class_ids: &[usize],
    prob: f64,
    null_id: usize,
    rng: &mut R,
) -> Vec<usize> {
    class_ids
        .iter()
        .map(|&c| {
            let u: f64 = rng.random();
            if u < prob {
                null_id
            } else {
                c
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_counts() {
        let img = Array4::<f32>::zeros((2, 1, 16, 16));
        assert_eq!(patchify(&img, 2).unwrap().dim(), (2, 64, 4));
        let img = Array4::<f32>::zeros((1, 1, 8, 8));
        assert_eq!(patchify(&img, 2).unwrap().dim().2, 4);
        let img = Array4::<f32>::zeros((1, 3, 8, 8));
        assert_eq!(patchify(&img, 4).unwrap().dim(), (1, 4, 48));
        assert!(patchify(&Array4::<f32>::zeros((1, 1, 7, 8)), 2).is_err());
    }

    #[test]
    fn patch_order_is_row_major() {
        let img = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, y, x)| (y * 4 + x) as f64);
        let tok = patchify(&img, 2).unwrap();
        assert_eq!(tok.slice(ndarray::s![0, 0, ..]).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(tok.slice(ndarray::s![0, 1, ..]).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(tok.slice(ndarray::s![0, 2, ..]).to_vec(), vec![8.0, 9.0, 12.0, 13.0]);
    }

    proptest! {
        #[test]
        fn patchify_round_trip(seed in any::<u64>(), c in 1usize..3, gh in 1usize..4, gw in 1usize..4, p in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Array4::from_shape_fn((2, c, gh * p, gw * p), |_| rng.random::<f32>());
            let back = unpatchify(&patchify(&img, p).unwrap(), c, gh * p, gw * p, p).unwrap();
            prop_assert_eq!(back, img);
        }
    }

    #[test]
    fn frequencies_are_deterministic_and_distinct() {
        let a = timestep_frequencies(0.0, 64);
        assert_eq!(a, timestep_frequencies(0.0, 64));
        let b = timestep_frequencies(500.0, 64);
        assert_eq!(a.len(), 64);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn label_dropout_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<usize> = (0..10_000).map(|i| i % 4).collect();
        assert_eq!(apply_label_dropout(&ids, 0.0, 4, &mut rng), ids);
        assert!(apply_label_dropout(&ids, 1.0, 4, &mut rng).iter().all(|&c| c == 4));
        let dropped = apply_label_dropout(&ids, 0.1, 4, &mut rng);
        let frac = dropped.iter().filter(|&&c| c == 4).count() as f64 / 10_000.0;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
    }
}
