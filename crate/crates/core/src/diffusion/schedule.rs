use super::DiffusionError;

/// Forward-process constants of a linear-beta DDPM.
///
/// Index 0 of every table is unused except `alpha_bars[0] = 1`, so that step
/// `t` reads `betas[t]` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `alpha_bars[0..=T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Reverse-step standard deviation, `sqrt(beta_t)`.
    pub fn posterior_sigma(&self, t: usize) -> f64 {
        self.betas[t].sqrt()
    }
}

/// Linear schedule `beta_t = beta_min + (t − 1)/(T − 1)·(beta_max − beta_min)`.
pub fn build_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if steps < 2 {
        return Err(DiffusionError::Config(format!(
            "schedule needs at least 2 steps, got {steps}"
        )));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::Config(format!(
            "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut betas = vec![0.0; steps + 1];
    let mut alphas = vec![1.0; steps + 1];
    let mut alpha_bars = vec![1.0; steps + 1];
    for t in 1..=steps {
        betas[t] = beta_min + (t - 1) as f64 / (steps - 1) as f64 * (beta_max - beta_min);
        alphas[t] = 1.0 - betas[t];
        alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
    }
    Ok(NoiseSchedule {
        steps,
        beta_min,
        beta_max,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward noising
/// `x_t = sqrt(alpha_bar_t)·x0 + sqrt(1 − alpha_bar_t)·eps`; `t = 0` returns `x0`.
pub fn q_sample(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    sched: &NoiseSchedule,
) -> Result<Vec<f32>, DiffusionError> {
    if t > sched.steps() {
        return Err(DiffusionError::Config(format!(
            "timestep {t} outside [0, {}]",
            sched.steps()
        )));
    }
    if x0.len() != eps.len() {
        return Err(DiffusionError::Config(format!(
            "noise has {} values but image has {}",
            eps.len(),
            x0.len()
        )));
    }
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}
