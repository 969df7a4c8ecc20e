use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Real>(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `trainable[i] == false` leaves parameter
/// `i` and its moments untouched. A non-finite gradient rejects the whole
/// update before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    cfg: &AdamConfig,
    trainable: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adam_step",
                format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(i));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if trainable.is_some_and(|tr| !tr[i]) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((w, gv), (mj, vj)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let gv = gv.as_f64();
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gv;
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gv * gv;
            let mh = *mj / c1;
            let vh = *vj / c2;
            let upd = cfg.lr * mh / (vh.sqrt() + cfg.eps);
            *w = T::from_f64(w.as_f64() - upd);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_parts(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = t(&[1.0, -2.0]);
        let mut st = AdamState::new(&[&p]);
        st.m[0] = vec![0.5, 0.5];
        st.v[0] = vec![0.0, 0.0];
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        adam_step(&mut [&mut p], &[t(&[0.0, 0.0])], &mut st, &cfg, None).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert!((st.m[0][0] - 0.45).abs() < 1e-12);

        let mut q = t(&[3.0]);
        let mut st = AdamState::new(&[&q]);
        for _ in 0..5 {
            adam_step(&mut [&mut q], &[t(&[0.0])], &mut st, &AdamConfig::default(), None).unwrap();
        }
        assert_eq!(q.data(), &[3.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = t(&[0.3]);
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            lr: 0.0,
            ..Default::default()
        };
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[t(&[1.7])], &mut st, &cfg, None).unwrap();
        }
        assert_eq!(p.data(), &[0.3]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // with g constant the bias-corrected moments equal g and g^2 exactly,
        // so every step is lr * g / (|g| + eps)
        let g = 0.37;
        let cfg = AdamConfig {
            lr: 1e-3,
            ..Default::default()
        };
        let expect = cfg.lr * g / (g + cfg.eps);
        let mut p = t(&[0.0]);
        let mut st = AdamState::new(&[&p]);
        let mut prev = 0.0;
        for i in 0..200 {
            adam_step(&mut [&mut p], &[t(&[g])], &mut st, &cfg, None).unwrap();
            let step = prev - p.data()[0];
            prev = p.data()[0];
            if i > 100 {
                assert!((step - expect).abs() < 1e-9, "step {step}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_changes() {
        let mut a = t(&[1.0]);
        let mut b = t(&[2.0]);
        let mut st = AdamState::new(&[&a, &b]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[t(&[1.0]), t(&[f64::NAN])],
            &mut st,
            &AdamConfig::default(),
            None,
        );
        assert!(matches!(err, Err(Error::NonFiniteGradient(1))));
        assert_eq!(a.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut a = t(&[1.0]);
        let mut b = t(&[2.0]);
        let mut st = AdamState::new(&[&a, &b]);
        adam_step(
            &mut [&mut a, &mut b],
            &[t(&[1.0]), t(&[1.0])],
            &mut st,
            &AdamConfig::default(),
            Some(&[true, false]),
        )
        .unwrap();
        assert!(a.data()[0] < 1.0);
        assert_eq!(b.data(), &[2.0]);
    }
}
