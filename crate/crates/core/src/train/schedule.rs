use crate::error::{dim_err, Result};
use crate::nd::Tensor;

/// Cosine-annealed learning-rate multiplier for epoch `x` of `t`:
/// `(1 + cos(xπ/t))/2 · (1 − η_min) + η_min`.
///
/// `x > t` is clamped to `t` with a warning. `t == 0` yields 1.
pub fn cosine_lr(x: usize, t: usize, eta_min: f64) -> f64 {
    if t == 0 {
        return 1.0;
    }
    let x = if x > t {
        log::warn!("epoch {x} is past the schedule length {t}; clamping");
        t
    } else {
        x
    };
    let c = (1.0 + (x as f64 * std::f64::consts::PI / t as f64).cos()) / 2.0;
    c * (1.0 - eta_min) + eta_min
}

/// One SGD step with momentum and coupled weight decay, in place:
/// `g ← grad + wd·p`, `v ← μ·v + g`, `p ← p − lr·v`.
///
/// Parameters whose gradient is `None` are left untouched, buffer included.
pub fn sgd_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    buffers: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(dim_err!(
            "sgd_step: {} params, {} gradients, {} buffers",
            params.len(),
            grads.len(),
            buffers.len()
        ));
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(buffers.iter_mut()).enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(dim_err!(
                "sgd_step: parameter {i} is {:?} but gradient is {:?} and buffer {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            ));
        }
        for ((pj, gj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let d = gj + weight_decay * *pj;
            *vj = momentum * *vj + d;
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.01), 1.0);
        assert!((cosine_lr(5, 10, 0.01) - 0.505).abs() < 1e-12);
        assert!((cosine_lr(10, 10, 0.01) - 0.01).abs() < 1e-12);
        assert_eq!(cosine_lr(12, 10, 0.01), cosine_lr(10, 10, 0.01));
    }

    #[test]
    fn schedule_is_non_increasing() {
        let v: Vec<f64> = (0..=40).map(|x| cosine_lr(x, 40, 0.01)).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn plain_step() {
        let mut p = [Tensor::scalar(1.0)];
        let mut v = [Tensor::scalar(0.0)];
        sgd_step(&mut p, &[Some(Tensor::scalar(0.5))], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = [Tensor::scalar(0.0)];
        let mut v = [Tensor::scalar(0.0)];
        let g = [Some(Tensor::scalar(1.0))];
        sgd_step(&mut p, &g, &mut v, 1.0, 0.8, 0.0).unwrap();
        assert_eq!(p[0].data()[0], -1.0);
        sgd_step(&mut p, &g, &mut v, 1.0, 0.8, 0.0).unwrap();
        assert!((p[0].data()[0] + 2.8).abs() < 1e-15);
        assert!((v[0].data()[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = [Tensor::vector(vec![1.0, -2.0])];
        let mut v = [Tensor::zeros(&[2])];
        sgd_step(&mut p, &[Some(Tensor::zeros(&[2]))], &mut v, 0.3, 0.8, 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        sgd_step(&mut p, &[None], &mut v, 0.3, 0.8, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 0.0])), None, Some(Tensor::scalar(4.0))];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].as_ref().unwrap().data(), &[3.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = [Tensor::zeros(&[2])];
        let mut v = [Tensor::zeros(&[2])];
        assert!(sgd_step(&mut p, &[Some(Tensor::zeros(&[3]))], &mut v, 0.1, 0.0, 0.0).is_err());
    }
}
