//! Adam with one independent state per network component.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use crate::config::AdamConfig;
use crate::error::{invalid, Result};
use crate::nets::{Component, ParameterStore};

/// First and second moments of one component's parameters, in
/// [`ParameterStore::vars`] order, plus the number of steps taken.
#[derive(Debug, Clone)]
pub struct Moments {
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<Component, Moments>,
}

impl Adam {
    /// Zero moments for every component of `store`.
    pub fn new(config: AdamConfig, store: &ParameterStore) -> Result<Self> {
        let mut state = BTreeMap::new();
        for c in Component::ALL {
            let zeros = store
                .vars(c)
                .iter()
                .map(|(_, v)| v.as_tensor().zeros_like())
                .collect::<candle_core::Result<Vec<_>>>()?;
            state.insert(
                c,
                Moments {
                    steps: 0,
                    m: zeros.clone(),
                    v: zeros,
                },
            );
        }
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn moments(&self, component: Component) -> &Moments {
        &self.state[&component]
    }

    /// Replaces one component's state, checking shapes against `store`.
    pub fn set_moments(&mut self, store: &ParameterStore, component: Component, moments: Moments) -> Result<()> {
        let vars = store.vars(component);
        if moments.m.len() != vars.len() || moments.v.len() != vars.len() {
            return Err(invalid(format!("{component}: moment count does not match parameters")));
        }
        for ((_, var), (m, v)) in vars.iter().zip(moments.m.iter().zip(&moments.v)) {
            if m.dims() != var.as_tensor().dims() || v.dims() != var.as_tensor().dims() {
                return Err(invalid(format!("{component}: moment shape mismatch")));
            }
        }
        self.state.insert(component, moments);
        Ok(())
    }

    /// One bias-corrected update of `component`; `grads[i]` belongs to the
    /// `i`-th parameter of [`ParameterStore::vars`], `None` counting as zero.
    pub fn step(&mut self, component: Component, vars: &[(String, Var)], grads: &[Option<Tensor>]) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let st = self.state.get_mut(&component).expect("every component has state");
        st.steps += 1;
        let t = st.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (_, var)) in vars.iter().enumerate() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            let m = ((&st.m[i] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&st.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / c2)?.sqrt()? + eps)?;
            let update = ((&m / c1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            st.m[i] = m;
            st.v[i] = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient_sign() {
        let store = ParameterStore::init(0, &crate::nets::NetConfig::compact(), DType::F64).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store).unwrap();
        let vars = store.vars(Component::FogDiscriminator);
        let before: Vec<Vec<f64>> = vars
            .iter()
            .map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1().unwrap())
            .collect();
        let grads: Vec<Option<Tensor>> = vars
            .iter()
            .map(|(_, v)| Some(Tensor::full(-3.0f64, v.as_tensor().dims(), &Device::Cpu).unwrap()))
            .collect();
        adam.step(Component::FogDiscriminator, &vars, &grads).unwrap();
        for ((_, v), b) in vars.iter().zip(before) {
            let after: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            for (a, b) in after.iter().zip(b) {
                // bias-corrected first step: |Δ| = lr · |g| / (|g| + eps)
                assert!((a - b - 2e-4 * 3.0 / (3.0 + 1e-8)).abs() < 1e-12);
            }
        }
        assert_eq!(adam.moments(Component::FogDiscriminator).steps, 1);
        assert_eq!(adam.moments(Component::FogEncoder).steps, 0);
    }
}
