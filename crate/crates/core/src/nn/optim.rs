use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ`.
pub fn adamw_step(params: &mut ParamSet, grads: &[Tensor], state: &mut OptState, cfg: &AdamWConfig) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            let decayed = *pi * cfg.weight_decay;
            *pi -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps)) + cfg.lr * decayed;
        }
    }
}

/// Shadow copy of the weights, updated as an exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParamSet,
}

impl EmaState {
    pub fn new(params: &ParamSet) -> Self {
        EmaState { shadow: params.clone() }
    }
}

/// `ema ← decay·ema + (1 − decay)·params`, elementwise.
pub fn ema_update(ema: &mut EmaState, params: &ParamSet, decay: f64) {
    for (s, p) in ema.shadow.tensors_mut().zip(params.tensors()) {
        assert_eq!(s.shape(), p.shape(), "ema shape");
        for (si, pi) in s.data_mut().iter_mut().zip(p.data()) {
            *si = decay * *si + (1.0 - decay) * pi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1], vec![v]));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.7);
        let mut st = OptState::new(&p);
        let cfg = AdamWConfig { weight_decay: 0.0, lr: 0.1, ..AdamWConfig::default() };
        adamw_step(&mut p, &[Tensor::from_vec(vec![1], vec![0.0])], &mut st, &cfg);
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = single(1.0);
        let mut st = OptState::new(&p);
        let cfg = AdamWConfig { lr: 0.001, weight_decay: 0.01, ..AdamWConfig::default() };
        adamw_step(&mut p, &[Tensor::from_vec(vec![1], vec![1.0])], &mut st, &cfg);
        // m̂ = v̂ = 1 after bias correction
        let expected = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8)) - 0.001 * 0.01;
        assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
        assert!((expected - 0.99899).abs() < 1e-6);
    }

    #[test]
    fn identical_parameters_update_identically() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::from_vec(vec![2], vec![0.3, 0.3]));
        let mut st = OptState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &[Tensor::from_vec(vec![2], vec![-0.2, -0.2])], &mut st, &AdamWConfig::default());
        }
        let d = p.get("a").unwrap().data();
        assert_eq!(d[0], d[1]);
    }

    #[test]
    fn ema_extremes_and_geometric_convergence() {
        let params = single(2.0);
        let mut e = EmaState::new(&single(-1.0));
        ema_update(&mut e, &params, 1.0);
        assert_eq!(e.shadow.get("w").unwrap().item(), -1.0);
        ema_update(&mut e, &params, 0.0);
        assert_eq!(e.shadow.get("w").unwrap().item(), 2.0);

        let mut e = EmaState::new(&single(-1.0));
        let decay = 0.9;
        for k in 1..=50 {
            ema_update(&mut e, &params, decay);
            // gap to the target shrinks by exactly `decay` per update
            let gap = 2.0 - e.shadow.get("w").unwrap().item();
            assert!((gap - 3.0 * decay.powi(k)).abs() < 1e-12);
        }
    }
}
