//! Adam with bias correction.

use indexmap::IndexMap;

use crate::error::{GlrError, Result};
use crate::params::{Gradients, ModelParams};

type Moments = IndexMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: IndexMap<String, Vec<f64>>,
    second: IndexMap<String, Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments for every parameter; betas 0.9 / 0.999, eps 1e-8.
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: IndexMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.numel()]))
            .collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.second.get(name).map(Vec::as_slice)
    }

    pub(crate) fn from_parts(
        hyper: [f64; 4],
        step: u64,
        first: IndexMap<String, Vec<f64>>,
        second: IndexMap<String, Vec<f64>>,
    ) -> Self {
        let [lr, beta1, beta2, eps] = hyper;
        AdamState {
            lr,
            beta1,
            beta2,
            eps,
            step,
            first,
            second,
        }
    }

    pub(crate) fn moments(&self) -> (&Moments, &Moments) {
        (&self.first, &self.second)
    }
}

/// One Adam step at `state.lr` over every parameter.
pub fn adam_update(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    for (name, t) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| GlrError::Usage(format!("missing gradient for parameter {name:?}")))?;
        let moments_ok = state.first.get(name).is_some_and(|m| m.len() == t.numel());
        if g.len() != t.numel() || !moments_ok {
            return Err(GlrError::Config(format!(
                "gradient or optimizer state for {name:?} does not match shape {:?}",
                t.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);

    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let m = state.first.get_mut(name).expect("checked above");
        let v = state.second.get_mut(name).expect("checked above");
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup() -> (ModelParams, Gradients) {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]))
            .unwrap();
        let mut g = Gradients::default();
        g.insert("w", vec![0.3, -4.0, 0.0]);
        (p, g)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, _) = setup();
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        let mut g = Gradients::default();
        g.insert("w", vec![0.0; 3]);
        adam_update(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.first_moment("w").unwrap(), &[0.0; 3]);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn first_step_hand_computed() {
        let (mut p, g) = setup();
        let mut s = AdamState::new(&p, 1e-3);
        adam_update(&mut p, &g, &mut s).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction => step = lr * g / (|g| + eps)
        let expected = [
            1.0 - 1e-3 * 0.3 / (0.3 + 1e-8),
            -2.0 + 1e-3 * 4.0 / (4.0 + 1e-8),
            0.5,
        ];
        for (a, b) in p.get("w").unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert!((s.first_moment("w").unwrap()[0] - 0.03).abs() < 1e-15);
        assert!((s.second_moment("w").unwrap()[1] - 0.016).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut p, g) = setup();
            let mut s = AdamState::new(&p, 1e-2);
            for _ in 0..5 {
                adam_update(&mut p, &g, &mut s).unwrap();
            }
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let (mut p, _) = setup();
        let mut s = AdamState::new(&p, 1e-3);
        match adam_update(&mut p, &Gradients::default(), &mut s) {
            Err(GlrError::Usage(msg)) => assert!(msg.contains("\"w\"")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let (mut p, g) = setup();
        let before = p.clone();
        let mut s = AdamState::new(&p, 0.0);
        adam_update(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
    }
}
