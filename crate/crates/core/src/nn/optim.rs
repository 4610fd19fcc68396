use super::{NnError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First moment and infinity-norm second moment for every parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamaxState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

impl AdamaxState {
    pub fn for_params(params: &ParamStore) -> AdamaxState {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamaxState {
            step: 0,
            m: zeros.clone(),
            u: zeros,
        }
    }
}

/// One Adamax update of a flat slice; `t` is the 1-based step number.
pub fn adamax_update(values: &mut [f64], grads: &[f64], m: &mut [f64], u: &mut [f64], t: u64, cfg: &AdamaxConfig) {
    let step = cfg.lr / (1.0 - cfg.beta1.powi(t as i32));
    for i in 0..values.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
        u[i] = (cfg.beta2 * u[i]).max(grads[i].abs());
        values[i] -= step * m[i] / (u[i] + cfg.eps);
    }
}

/// Apply one step using the gradient buffers of `params`; parameters without
/// a gradient are treated as having zero gradient.
pub fn adamax_step(params: &mut ParamStore, state: &mut AdamaxState, cfg: &AdamaxConfig) -> Result<(), NnError> {
    if state.m.is_empty() && state.u.is_empty() {
        *state = AdamaxState::for_params(params);
    }
    if state.m.len() != params.len() || state.u.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "optimizer state for {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let ids: Vec<_> = params.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let t = params.get_mut(id);
        if state.m[k].len() != t.len() || state.u[k].len() != t.len() {
            return Err(NnError::ShapeMismatch(format!("optimizer state for parameter {k}")));
        }
        let grads = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        adamax_update(t.values_mut(), &grads, &mut state.m[k], &mut state.u[k], state.step, cfg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    // independent scalar transcription of the update rule
    fn oracle(mut theta: f64, grads: &[f64], cfg: &AdamaxConfig) -> Vec<f64> {
        let (mut m, mut u) = (0.0f64, 0.0f64);
        let mut out = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            u = if cfg.beta2 * u > g.abs() { cfg.beta2 * u } else { g.abs() };
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            theta -= cfg.lr * mhat / (u + cfg.eps);
            out.push(theta);
        }
        out
    }

    fn store(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(values)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(vec![0.5, -0.25]);
        let mut st = AdamaxState::default();
        let cfg = AdamaxConfig::default();
        adamax_step(&mut s, &mut st, &cfg).unwrap();
        assert_eq!(s.by_name("w").unwrap().values(), &[0.5, -0.25]);

        st.m[0] = vec![1.0, 1.0];
        st.u[0] = vec![2.0, 2.0];
        adamax_step(&mut s, &mut st, &cfg).unwrap();
        assert!((st.m[0][0] - 0.9).abs() < 1e-15);
        assert!((st.u[0][0] - 2.0 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_oracle_over_ten_steps() {
        let cfg = AdamaxConfig { lr: 1e-2, ..Default::default() };
        let grads = [0.3, 0.3, -1.2, 0.3, 0.05, 0.3, 2.0, -0.7, 0.3, 0.3];
        let expected = oracle(1.0, &grads, &cfg);
        let mut s = store(vec![1.0]);
        let mut st = AdamaxState::for_params(&s);
        let id = s.id("w").unwrap();
        for (g, e) in grads.iter().zip(&expected) {
            s.zero_grads();
            s.get_mut(id).accumulate_grad(&[*g]).unwrap();
            adamax_step(&mut s, &mut st, &cfg).unwrap();
            assert!((s.get(id).values()[0] - e).abs() < 1e-15);
        }
        // a constant gradient converges to steps of size lr
        let mut s = store(vec![0.0]);
        let mut st = AdamaxState::for_params(&s);
        let mut prev = 0.0;
        for _ in 0..200 {
            s.zero_grads();
            s.get_mut(id).accumulate_grad(&[0.4]).unwrap();
            adamax_step(&mut s, &mut st, &cfg).unwrap();
            let now = s.get(id).values()[0];
            assert!(prev - now <= cfg.lr * (1.0 + 1e-9));
            prev = now;
        }
        let last_step = {
            let before = s.get(id).values()[0];
            s.zero_grads();
            s.get_mut(id).accumulate_grad(&[0.4]).unwrap();
            adamax_step(&mut s, &mut st, &cfg).unwrap();
            before - s.get(id).values()[0]
        };
        assert!((last_step - cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn mirrored_gradients_mirror_updates() {
        let mut s = store(vec![0.1, 0.1]);
        let mut st = AdamaxState::for_params(&s);
        let id = s.id("w").unwrap();
        for g in [0.5, -0.2, 1.3] {
            s.zero_grads();
            s.get_mut(id).accumulate_grad(&[g, -g]).unwrap();
            adamax_step(&mut s, &mut st, &AdamaxConfig::default()).unwrap();
        }
        let v = s.get(id).values();
        assert!(((v[0] - 0.1) + (v[1] - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn state_shape_mismatch() {
        let mut s = store(vec![0.0]);
        let mut st = AdamaxState {
            step: 0,
            m: vec![vec![0.0; 3]],
            u: vec![vec![0.0; 3]],
        };
        assert!(matches!(
            adamax_step(&mut s, &mut st, &AdamaxConfig::default()),
            Err(NnError::ShapeMismatch(_))
        ));
    }
}
