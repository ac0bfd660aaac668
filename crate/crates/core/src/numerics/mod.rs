//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference checker.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::AdamState;
pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use params::{ParamId, ParamStore};
pub use tape::{AttnMask, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for extent {bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-wise softmax over the last axis of a plain tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let y = t.softmax_rows(v);
    t.value(y).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store_with(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(n, sh)| s.insert(*n, rand_tensor(rng, sh)).unwrap())
            .collect();
        (s, ids)
    }

    /// Random projection of `out` to a scalar so every entry gets a distinct
    /// upstream gradient.
    fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = t.value(out).len();
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.weighted_sum(out, &c)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let ones = t.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let ai = t.matmul(a, i).unwrap();
        assert_eq!(t.value(ai).data(), t.value(a).data());
        let p = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(p).shape(), &[2, 1]);
        assert_eq!(t.value(p).data(), &[3.0, 7.0]);
        let bad = t.constant(Tensor::zeros(&[4, 2]));
        let a23 = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.matmul(a23, bad), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::from_rows(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]).unwrap());
        let d = y.data();
        assert_eq!(&d[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((d[4] - 0.25).abs() < 1e-15 && (d[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::new(&[50, 17], (0..850).map(|_| rng.gen_range(-30.0..30.0)).collect()).unwrap();
        for row in softmax_rows(&x).data().chunks(17) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[&[5.0, 5.0], &[1.0, 3.0]]).unwrap());
        let one = t.constant(Tensor::full(&[2], 1.0));
        let zero = t.constant(Tensor::zeros(&[2]));
        let y = t.layer_norm(x, one, zero, 1e-5).unwrap();
        let d = t.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-5 && (d[3] - 1.0).abs() < 1e-5);
        let b = t.constant(Tensor::new(&[2], vec![0.3, -2.0]).unwrap());
        let y = t.layer_norm(x, zero, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.3, -2.0, 0.3, -2.0]);
        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(t.layer_norm(x, bad, zero, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let v = 5;
        let uniform = t.constant(Tensor::zeros(&[2, 3, v]));
        let l = t.cross_entropy_rows(uniform, &[1, 2, 3, 4, 1, 2], 0).unwrap();
        for &x in t.value(l).data() {
            assert!((x - (v as f64).ln()).abs() < 1e-12);
        }
        let mut sharp = vec![0.0; 2 * v];
        sharp[2] = 100.0;
        sharp[v + 4] = 100.0;
        let sharp = t.constant(Tensor::new(&[1, 2, v], sharp).unwrap());
        let l = t.cross_entropy_rows(sharp, &[2, 4], 0).unwrap();
        assert!(t.value(l).item() < 1e-40);
        let hand = t.constant(Tensor::new(&[1, 2, 2], vec![0.0, 3f64.ln(), 0.0, 3f64.ln()]).unwrap());
        let l = t.cross_entropy_rows(hand, &[1, 1], 9).unwrap();
        assert!((t.value(l).item() + 0.75f64.ln()).abs() < 1e-15);
        let allpad = t.constant(Tensor::full(&[1, 2, v], 3.0));
        let l = t.cross_entropy_rows(allpad, &[0, 0], 0).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        assert!(matches!(
            t.cross_entropy_rows(allpad, &[7, 1], 0),
            Err(NumericsError::IndexOutOfRange { index: 7, bound: 5 })
        ));
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
        let sq = t.mul(x, x).unwrap();
        let s2 = t.sum(sq);
        assert_eq!(t.backward(s2).unwrap().wrt(x).unwrap(), &[2.0, -4.0, 1.0]);
        assert!(matches!(t.backward(sq), Err(NumericsError::NotScalar(_))));
    }

    #[test]
    fn attention_masks_and_symmetry() {
        let mut t = Tape::new();
        // Two keys with equal content: uniform weights.
        let q = t.constant(Tensor::new(&[1, 1, 4], vec![0.3, -0.1, 0.7, 0.2]).unwrap());
        let k = t.constant(Tensor::new(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = t.constant(Tensor::new(&[1, 2, 4], vec![1.0, 1.0, 1.0, 1.0, 3.0, 3.0, 3.0, 3.0]).unwrap());
        let o = t.attention(q, k, v, &AttnMask::all_valid(1, 2, false), 2).unwrap();
        assert!(t.attention_weights(o).unwrap().iter().all(|&p| p == 0.5));
        assert_eq!(t.value(o).data(), &[2.0, 2.0, 2.0, 2.0]);
        // Masked key gets exactly zero weight.
        let mask = AttnMask {
            key_valid: vec![true, false],
            causal: false,
        };
        let o = t.attention(q, k, v, &mask, 2).unwrap();
        assert_eq!(t.attention_weights(o).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.value(o).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn dropout_is_seeded() {
        let run = |seed| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::full(&[64], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(x, 0.1, &mut rng);
            t.value(y).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut s, ids) = store_with(&mut rng, &[("x", &[6])]);
        let err = grad_check(
            |t, s| {
                let x = t.param(s, ids[0]);
                t.weighted_sum(x, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.5])
            },
            &mut s,
            &ids,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn grad_check_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut s, ids) = store_with(
            &mut rng,
            &[
                ("a", &[2, 3, 4]),
                ("b", &[4, 5]),
                ("bias", &[5]),
                ("bb", &[2, 4, 5]),
                ("g", &[4]),
                ("beta", &[4]),
                ("k", &[2, 3, 4]),
                ("v", &[2, 3, 4]),
                ("table", &[7, 4]),
                ("same", &[2, 3, 4]),
            ],
        );
        let [a, b, bias, bb, g, beta, k, v, table, same] = ids[..] else {
            unreachable!()
        };
        type Case = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>>;
        let cases: Vec<(&str, Vec<ParamId>, Case)> = vec![
            (
                "add_mul_scale",
                vec![a, same],
                Box::new(move |t, s| {
                    let (x, y) = (t.param(s, a), t.param(s, same));
                    let z = t.add(x, y)?;
                    let z = t.mul(z, x)?;
                    let z = t.scale(z, -1.7);
                    project(t, z, 1)
                }),
            ),
            (
                "relu",
                vec![a],
                Box::new(move |t, s| {
                    let x = t.param(s, a);
                    let y = t.relu(x);
                    project(t, y, 2)
                }),
            ),
            (
                "softmax",
                vec![a],
                Box::new(move |t, s| {
                    let x = t.param(s, a);
                    let y = t.softmax_rows(x);
                    project(t, y, 3)
                }),
            ),
            (
                "matmul",
                vec![a, b],
                Box::new(move |t, s| {
                    let (x, w) = (t.param(s, a), t.param(s, b));
                    let y = t.matmul(x, w)?;
                    project(t, y, 4)
                }),
            ),
            (
                "matmul_batched",
                vec![a, bb],
                Box::new(move |t, s| {
                    let (x, w) = (t.param(s, a), t.param(s, bb));
                    let y = t.matmul(x, w)?;
                    project(t, y, 5)
                }),
            ),
            (
                "linear",
                vec![a, b, bias],
                Box::new(move |t, s| {
                    let (x, w, c) = (t.param(s, a), t.param(s, b), t.param(s, bias));
                    let y = t.linear(x, w, Some(c))?;
                    project(t, y, 6)
                }),
            ),
            (
                "layer_norm",
                vec![a, g, beta],
                Box::new(move |t, s| {
                    let (x, gg, bt) = (t.param(s, a), t.param(s, g), t.param(s, beta));
                    let y = t.layer_norm(x, gg, bt, 1e-5)?;
                    project(t, y, 7)
                }),
            ),
            (
                "attention_masked",
                vec![a, k, v],
                Box::new(move |t, s| {
                    let (q, kk, vv) = (t.param(s, a), t.param(s, k), t.param(s, v));
                    let mask = AttnMask {
                        key_valid: vec![true, true, false, true, false, true],
                        causal: false,
                    };
                    let y = t.attention(q, kk, vv, &mask, 2)?;
                    project(t, y, 8)
                }),
            ),
            (
                "attention_causal",
                vec![a, k, v],
                Box::new(move |t, s| {
                    let (q, kk, vv) = (t.param(s, a), t.param(s, k), t.param(s, v));
                    let y = t.attention(q, kk, vv, &AttnMask::all_valid(2, 3, true), 4)?;
                    project(t, y, 9)
                }),
            ),
            (
                "embedding",
                vec![table],
                Box::new(move |t, s| {
                    let tb = t.param(s, table);
                    let pos = Tensor::full(&[3, 4], 0.25);
                    let y = t.embedding(tb, &[0, 3, 3, 6, 1, 0], 2, 2.0, Some(&pos))?;
                    project(t, y, 10)
                }),
            ),
            (
                "cross_entropy",
                vec![a],
                Box::new(move |t, s| {
                    let x = t.param(s, a);
                    let y = t.cross_entropy_rows(x, &[1, 0, 3, 2, 2, 0], 0)?;
                    project(t, y, 11)
                }),
            ),
            (
                "concat_select_pad",
                vec![a, same],
                Box::new(move |t, s| {
                    let (x, y) = (t.param(s, a), t.param(s, same));
                    let z = t.concat_rows(&[x, y])?;
                    let z = t.select_rows(z, &[3, 0, 0, 2])?;
                    let z = t.pad_len(z, 5)?;
                    project(t, z, 12)
                }),
            ),
        ];
        for (name, wrt, f) in cases {
            let err = grad_check(f, &mut s, &wrt, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
