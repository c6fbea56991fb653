use std::collections::BTreeMap;

use super::params::ParamTree;
use super::NnError;

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamTree, lr: f32) -> Self {
        let zeros: BTreeMap<String, Vec<f32>> = params
            .iter()
            .map(|(k, t)| (k.to_string(), vec![0.0; t.len()]))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, path: &str) -> Option<&[f32]> {
        self.m.get(path).map(Vec::as_slice)
    }

    pub fn second_moment(&self, path: &str) -> Option<&[f32]> {
        self.v.get(path).map(Vec::as_slice)
    }

    /// One Adam update of `params` using `grads`, which must mirror `params`.
    pub fn step(&mut self, params: &mut ParamTree, grads: &ParamTree) -> Result<(), NnError> {
        if !params.same_structure(grads) {
            return Err(NnError::Structure(
                "gradients do not mirror parameters".into(),
            ));
        }
        if params.len() != self.m.len() || params.paths().any(|p| !self.m.contains_key(p)) {
            return Err(NnError::Structure(
                "optimizer state does not mirror parameters".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let (bc1, bc2) = (bc1 as f32, bc2 as f32);
        for (path, p) in params.iter_mut() {
            let g = grads.get(path).expect("structure checked").data();
            let m = self.m.get_mut(path).expect("structure checked");
            let v = self.v.get_mut(path).expect("structure checked");
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
