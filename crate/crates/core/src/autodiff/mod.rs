//! Minimal reverse-mode differentiable tensor layer.
//!
//! Provides exactly the primitives the elevation heads use, each with a
//! hand-written backward pass. Graphs run in `f32` for training and in `f64`
//! when gradients are checked against finite differences.

pub mod checkpoint;
mod conv;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{GatherPlan, Gradients, Graph, Reduction, Var};
pub use params::{AdamW, OneCycle, ParamStore};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d/dx of `sum(op(x) * r)` against central differences.
    fn check_unary(shape: &[usize], op: impl Fn(&mut Graph<f64>, Var) -> Var, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let out_len = {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let y = op(&mut g, x);
            g.value(y).len()
        };
        let r: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |xs: &[f64]| {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
            let y = op(&mut g, x);
            g.value(y).data().iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = op(&mut g, x);
        let rv = g.input(Tensor::new(g.shape(y).to_vec(), r.clone()).unwrap());
        let p = g.mul(y, rv).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        gradcheck::coordinatewise(eval, x0.data(), grads.get(x).unwrap(), 1e-5)
    }

    #[test]
    fn identity_kernel_convolution_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.input(random(&[3, 5, 4], &mut rng));
        let mut w = Tensor::zeros(vec![3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let w = g.input(w);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn uniform_softmax_over_80_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::filled(vec![80, 2, 3], 0.37));
        let s = g.softmax_channel(x);
        assert!(g.value(s).data().iter().all(|&v| (v - 1.0 / 80.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_sums_to_one_for_large_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..40 * 6).map(|_| rng.gen_range(-500.0..500.0)).collect();
        let x = g.input(Tensor::new(vec![40, 6], data).unwrap());
        let s = g.softmax_channel(x);
        for q in 0..6 {
            let total: f32 = (0..40).map(|c| g.value(s).data()[c * 6 + q]).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![3, 2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn unary_primitive_gradients() {
        let cases: Vec<(&[usize], Box<dyn Fn(&mut Graph<f64>, Var) -> Var>)> = vec![
            (&[3, 4, 5], Box::new(|g, x| g.relu(x))),
            (&[5, 3, 2], Box::new(|g, x| g.softmax_channel(x))),
            (&[2, 3, 4], Box::new(|g, x| g.reshape(x, vec![6, 4]).unwrap())),
            (&[2, 3, 4], Box::new(|g, x| g.nearest_resize(x, 6, 8).unwrap())),
            (&[2, 6, 8], Box::new(|g, x| g.nearest_resize(x, 3, 4).unwrap())),
            (&[5, 2, 3], Box::new(|g, x| g.linear_resize(x, 0, 11).unwrap())),
            (&[2, 7, 3], Box::new(|g, x| g.linear_resize(x, 1, 4).unwrap())),
            (&[2, 3, 4], Box::new(|g, x| g.mean(x))),
            (&[6, 2, 2], Box::new(|g, x| {
                let centers = Arc::new((0..6).map(|c| c as f64 - 2.5).collect());
                g.soft_argmin(x, centers).unwrap()
            })),
            (&[5, 2, 3], Box::new(|g, x| {
                let labels = Arc::new(vec![Some(0), None, Some(4), Some(2), None, Some(1)]);
                g.masked_cross_entropy(x, labels, Reduction::Mean).unwrap()
            })),
        ];
        for (i, (shape, op)) in cases.iter().enumerate() {
            let err = check_unary(shape, op, i as u64);
            assert!(err < 1e-6, "case {i}: rel err {err}");
        }
    }

    #[test]
    fn conv_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let w0 = random(&[3, 2, 3, 3, 3], &mut rng);
        let f = |ws: &[f64]| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(Tensor::new(w0.shape().to_vec(), ws.to_vec()).unwrap());
            let y = g.conv3d(xv, wv, None, 2, 1).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let s = g.sum(y2);
            g.value(s).data()[0]
        };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.variable(w0.clone());
        let y = g.conv3d(xv, wv, None, 2, 1).unwrap();
        let y2 = g.mul(y, y).unwrap();
        let s = g.sum(y2);
        let grads = g.backward(s).unwrap();
        assert!(gradcheck::coordinatewise(f, w0.data(), grads.get(wv).unwrap(), 1e-5) < 1e-6);
    }
}
