//! Reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
pub(crate) mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use params::{Parameter, Parameters, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use tape::FusedGrad;
pub use tape::{gelu, sigmoid, Gradients, Tape, TaskGradients, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let y = t.softmax(x).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::matrix(1, 4, vec![2.5; 4]).unwrap());
        let y = t.layer_norm(x).unwrap();
        assert_eq!(t.value(y), &[0.0; 4]);
    }

    #[test]
    fn matmul_matches_hand_arithmetic() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let b = t.constant(&Tensor::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap());
        let c = t.matmul(a, b).unwrap();
        // [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12]
        assert_eq!(t.value(c), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(t.shape(c), (2, 2));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(&Tensor::zeros(vec![2, 3]));
        match t.matmul(a, a) {
            Err(Error::Structure { op, message }) => {
                assert_eq!(op, "matmul");
                assert!(message.contains("(2x3) * (2x3)"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let b = t.constant(&Tensor::zeros(vec![3, 2]));
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn sum_gradient_is_ones_and_unconnected_is_zero() {
        let mut t = Tape::new();
        let w = t.param("w", &Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let unused = t.param("u", &Tensor::zeros(vec![3]));
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.by_name("w").unwrap(), &[1.0; 4]);
        assert_eq!(g.wrt(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param("x", &Tensor::zeros(vec![2]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn cross_tape_is_error() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param("x", &Tensor::scalar(1.0));
        let y = b.param("y", &Tensor::scalar(1.0));
        assert!(b.add(x, y).is_err());
        let s = a.sum(x).unwrap();
        assert!(b.grad_per_task(&[s]).is_err());
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        let y = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 1, 4);
        let r = check_gradients(&[x, y, b], 1e-5, |t, v| {
            let a = t.mul(v[0], v[1])?;
            let a = t.add_row(a, v[2])?;
            let a = t.tanh(a)?;
            let g = t.gelu(v[1])?;
            let s = t.sigmoid(v[0])?;
            let e = t.exp(s)?;
            let l = t.log(e)?;
            let m = t.mul_row(g, v[2])?;
            let c = t.concat_cols(&[a, m])?;
            let c2 = t.concat_rows(&[l, s])?;
            let sl = t.slice(c2, 1, 1, 4, 2)?;
            let sm = t.softmax(c)?;
            let cs = t.slice(c, 0, 0, 3, 8)?;
            let sub = t.sub(sm, cs)?;
            let n = t.l2_normalize_rows(sub)?;
            let ln = t.layer_norm(n)?;
            let sq = t.mul(ln, ln)?;
            let m1 = t.mean(sq)?;
            let m2 = t.sum(sl)?;
            let sc = t.scale(sl, m1)?;
            let m3 = t.sum(sc)?;
            let k = t.scalar_mul(m2, 0.5)?;
            let z = t.add(m1, k)?;
            t.add(z, m3)
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-6, "{:?}", r.relative_errors);
    }

    #[test]
    fn attention_and_gather_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 5, 4);
        let wq = rand_tensor(&mut rng, 4, 4);
        let wk = rand_tensor(&mut rng, 4, 4);
        let wv = rand_tensor(&mut rng, 4, 4);
        let extra = rand_tensor(&mut rng, 2, 4);
        let r = check_gradients(&[x, wq, wk, wv, extra], 1e-5, |t, v| {
            let g = t.gather_rows(&[v[0], v[4]], &[(1, 0), (0, 0), (0, 1), (1, 1), (0, 2), (0, 4), (0, 3)])?;
            let q = t.matmul(g, v[1])?;
            let k = t.matmul(g, v[2])?;
            let vv = t.matmul(g, v[3])?;
            let a = t.segment_attention(q, k, vv, &[(0, 3), (3, 4)], 2)?;
            let sq = t.mul(a, a)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-6, "{:?}", r.relative_errors);
    }

    #[test]
    fn attention_segments_are_isolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, 4, 2);
        let mut t = Tape::new();
        let xv = t.constant(&x);
        let a = t.segment_attention(xv, xv, xv, &[(0, 1), (1, 3)], 1).unwrap();
        // A single-token segment attends only to itself.
        assert_eq!(&t.value(a)[..2], &x.data()[..2]);
    }

    fn per_task_fixture(t: &mut Tape) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = t.param("w", &rand_tensor(&mut rng, 2, 3));
        let b = t.param("b", &rand_tensor(&mut rng, 1, 4));
        let x = t.constant(&rand_tensor(&mut rng, 3, 2));
        let h = t.matmul(x, w).unwrap();
        let h = t.tanh(h).unwrap();
        let s0 = t.sum(h).unwrap();
        let sq = t.mul(h, h).unwrap();
        let s1 = t.mean(sq).unwrap();
        let bb = t.mul(b, b).unwrap();
        let s2 = t.sum(bb).unwrap();
        let e = t.exp(s1).unwrap();
        let s3 = t.add(e, s2).unwrap();
        vec![s0, s1, s2, s3]
    }

    #[test]
    fn per_task_gradients_match_single_backward() {
        let mut t = Tape::new();
        let losses = per_task_fixture(&mut t);
        let tg = t.grad_per_task(&losses).unwrap();
        assert_eq!(tg.shared.len(), 4);
        assert_eq!(tg.shared[0].len(), 10);
        for (k, &l) in losses.iter().enumerate() {
            let mut fresh = Tape::new();
            let fl = per_task_fixture(&mut fresh);
            let g = fresh.backward(fl[k]).unwrap();
            let flat: Vec<f64> = g.params().flat_map(|(_, v)| v.to_vec()).collect();
            assert_eq!(tg.shared[k], flat);
            let _ = l;
        }
    }

    #[test]
    fn per_task_order_invariance_and_linearity() {
        let mut t = Tape::new();
        let losses = per_task_fixture(&mut t);
        let twice = t.scalar_mul(losses[1], 2.0).unwrap();
        let fwd = t.grad_per_task(&[losses[0], losses[1], twice, losses[1]]).unwrap();
        let rev = t.grad_per_task(&[losses[1], twice, losses[1], losses[0]]).unwrap();
        assert_eq!(fwd.shared[0], rev.shared[3]);
        assert_eq!(fwd.shared[1], rev.shared[0]);
        assert_eq!(fwd.shared[1], fwd.shared[3]);
        for (a, b) in fwd.shared[1].iter().zip(&fwd.shared[2]) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn head_params_excluded_from_shared_flattening() {
        let mut t = Tape::new();
        let w = t.param("w", &Tensor::scalar(2.0));
        let h = t.param_with("head", &Tensor::scalar(3.0), false);
        let y = t.mul(w, h).unwrap();
        let tg = t.grad_per_task(&[y]).unwrap();
        assert_eq!(tg.shared[0], vec![3.0]);
        assert_eq!(tg.full[0].by_name("head").unwrap(), &[2.0]);
    }
}
