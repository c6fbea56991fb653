//! WebAssembly bindings for the demo page in `www/`.
//!
//! Images cross the boundary as flat row-major `Float32Array`s of
//! `IMAGE_SIZE × IMAGE_SIZE` values. The exported functions are thin wrappers
//! over the plain-Rust ones in [`demo`], which also run natively.

use wasm_bindgen::prelude::*;

pub mod demo {
    use fdm_core::diffusion::{build_schedule, q_sample};
    use fdm_core::nn::{stream_id, RngStream};
    use fdm_core::phantom::{generate_site_dataset, Sample, SiteProfile};

    const PURPOSE_DEMO_NOISE: u32 = 90;

    fn profile(site: &str) -> Result<SiteProfile, String> {
        match site {
            "A" => Ok(SiteProfile::hospital_a()),
            "B" => Ok(SiteProfile::hospital_b()),
            other => Err(format!("unknown site {other:?}; expected A or B")),
        }
    }

    /// First slice of the first patient generated with `seed` at `site`.
    pub fn phantom(site: &str, seed: u64) -> Result<Sample, String> {
        let ds = generate_site_dataset(&profile(site)?, 5, 1, seed).map_err(|e| e.to_string())?;
        Ok(ds.samples()[0].clone())
    }

    /// `image` noised to step `t` of a linear schedule with `steps` steps.
    pub fn noised(
        image: &[f32],
        t: usize,
        steps: usize,
        beta_min: f64,
        beta_max: f64,
        seed: u64,
    ) -> Result<Vec<f32>, String> {
        let sched = build_schedule(steps, beta_min, beta_max).map_err(|e| e.to_string())?;
        let eps = RngStream::new(seed, stream_id(PURPOSE_DEMO_NOISE, 0)).gaussian_vec(image.len());
        q_sample(image, t, &eps, &sched).map_err(|e| e.to_string())
    }

    /// `alpha_bar_t` for `t = 0..=steps`.
    pub fn alpha_bars(steps: usize, beta_min: f64, beta_max: f64) -> Result<Vec<f64>, String> {
        Ok(build_schedule(steps, beta_min, beta_max)
            .map_err(|e| e.to_string())?
            .alpha_bars()
            .to_vec())
    }
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn image_size() -> usize {
    fdm_core::phantom::IMAGE_SIZE
}

#[wasm_bindgen]
pub fn phantom_image(site: &str, seed: u64) -> Result<Vec<f32>, JsError> {
    js(demo::phantom(site, seed)).map(|s| s.image)
}

/// Myocardium mask as 0/1 values.
#[wasm_bindgen]
pub fn phantom_mask(site: &str, seed: u64) -> Result<Vec<f32>, JsError> {
    js(demo::phantom(site, seed)).map(|s| s.mask_f32())
}

#[wasm_bindgen]
pub fn noised(
    image: &[f32],
    t: usize,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    seed: u64,
) -> Result<Vec<f32>, JsError> {
    js(demo::noised(image, t, steps, beta_min, beta_max, seed))
}

#[wasm_bindgen]
pub fn alpha_bars(steps: usize, beta_min: f64, beta_max: f64) -> Result<Vec<f64>, JsError> {
    js(demo::alpha_bars(steps, beta_min, beta_max))
}
