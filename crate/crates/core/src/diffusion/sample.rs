use crate::nn::{stream_id, BoundParams, Graph, ParamTree, RngStream};
use crate::phantom::{Provenance, Sample, SiteDataset, Split};

use super::net::EpsilonNet;
use super::schedule::NoiseSchedule;
use super::train::stack_with_mask;
use super::DiffusionError;

const PURPOSE_SAMPLE: u32 = 20;

/// Clip range applied to the running sample after every reverse step.
pub const SAMPLING_CLIP: (f32, f32) = (-1.5, 2.5);

/// Predicts noise for a batch of noisy images and their masks at one timestep.
pub trait NoisePredictor: Sync {
    /// `noisy` and `masks` are `[B, H, W]` flattened; returns `[B, H, W]`.
    fn predict_noise(
        &self,
        noisy: &[f32],
        masks: &[f32],
        batch: usize,
        height: usize,
        width: usize,
        t: usize,
    ) -> Result<Vec<f32>, DiffusionError>;
}

/// An epsilon network together with trained weights.
#[derive(Debug, Clone)]
pub struct TrainedEpsilonNet {
    pub net: EpsilonNet,
    pub params: ParamTree,
}

impl NoisePredictor for TrainedEpsilonNet {
    fn predict_noise(
        &self,
        noisy: &[f32],
        masks: &[f32],
        batch: usize,
        height: usize,
        width: usize,
        t: usize,
    ) -> Result<Vec<f32>, DiffusionError> {
        let mut g = Graph::new();
        let bound = BoundParams::bind_frozen(&mut g, &self.params);
        let input = g.constant(stack_with_mask(noisy, masks, batch, height, width));
        let out = self.net.forward(&mut g, &bound, input, &vec![t; batch])?;
        Ok(g.value(out).data().to_vec())
    }
}

fn check_mask(mask: &[u8], h: usize, w: usize) -> Result<(), DiffusionError> {
    if mask.len() != h * w || mask.iter().any(|&m| m > 1) {
        return Err(DiffusionError::Mask(
            "conditioning mask must be a binary H×W image".into(),
        ));
    }
    let f = mask.iter().filter(|&&m| m == 1).count() as f32 / mask.len() as f32;
    if !(0.02..=0.30).contains(&f) {
        return Err(DiffusionError::Mask(format!(
            "mask foreground fraction {f:.3} outside [0.02, 0.30]"
        )));
    }
    Ok(())
}

/// Ancestral sampling for several masks at once; mask `i` draws all of its
/// randomness from `streams[i]`, so the result for a mask does not depend on
/// which other masks share its batch.
pub fn sample_batch(
    model: &dyn NoisePredictor,
    masks: &[&[u8]],
    height: usize,
    width: usize,
    sched: &NoiseSchedule,
    streams: &mut [RngStream],
) -> Result<Vec<Vec<f32>>, DiffusionError> {
    assert_eq!(masks.len(), streams.len(), "one stream per mask");
    let b = masks.len();
    let hw = height * width;
    for m in masks {
        check_mask(m, height, width)?;
    }
    let mask_f: Vec<f32> = masks
        .iter()
        .flat_map(|m| m.iter().map(|&v| v as f32))
        .collect();
    let mut x: Vec<f32> = streams
        .iter_mut()
        .flat_map(|s| s.gaussian_vec(hw))
        .collect();
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict_noise(&x, &mask_f, b, height, width, t)?;
        // update in f64 so rounding does not accumulate over hundreds of steps
        let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let sigma = sched.posterior_sigma(t);
        for (i, stream) in streams.iter_mut().enumerate() {
            let z = if t > 1 {
                stream.gaussian_vec(hw)
            } else {
                vec![0.0; hw]
            };
            let xs = &mut x[i * hw..(i + 1) * hw];
            for ((v, &e), &zv) in xs.iter_mut().zip(&eps[i * hw..(i + 1) * hw]).zip(&z) {
                let next = inv_sqrt_alpha * (*v as f64 - coef * e as f64) + sigma * zv as f64;
                *v = (next as f32).clamp(SAMPLING_CLIP.0, SAMPLING_CLIP.1);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::Nn(crate::nn::NnError::Divergence(format!(
                "sampler diverged at t={t}"
            ))));
        }
    }
    Ok(x.chunks_exact(hw)
        .map(|c| c.iter().map(|v| v.clamp(0.0, 1.0)).collect())
        .collect())
}

/// One synthetic image conditioned on `mask`.
pub fn sample_conditional(
    model: &dyn NoisePredictor,
    mask: &[u8],
    height: usize,
    width: usize,
    sched: &NoiseSchedule,
    stream: &mut RngStream,
) -> Result<Vec<f32>, DiffusionError> {
    let mut out = sample_batch(
        model,
        &[mask],
        height,
        width,
        sched,
        std::slice::from_mut(stream),
    )?;
    Ok(out.pop().expect("one sample"))
}

/// Stream used for the synthetic counterpart of `(patient, slice)`.
pub fn synthesis_stream(seed: u64, patient: u32, slice: u32) -> RngStream {
    RngStream::new(
        seed,
        stream_id(
            PURPOSE_SAMPLE,
            patient.wrapping_mul(4096).wrapping_add(slice),
        ),
    )
}

/// Worker threads for sampling, from `FDM_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("FDM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// One synthetic image per train-split mask of `local`, generated by the
/// model trained at `generator_site`. Patient ids and slice indices carry over.
pub fn synthesize_dataset(
    model: &dyn NoisePredictor,
    generator_site: &str,
    local: &SiteDataset,
    sched: &NoiseSchedule,
    seed: u64,
    batch_size: usize,
    threads: usize,
) -> Result<SiteDataset, DiffusionError> {
    let sources = local.samples_in(Split::Train);
    if sources.is_empty() {
        return Err(DiffusionError::EmptyMaskSet);
    }
    let (h, w) = (sources[0].height, sources[0].width);
    let batch_size = batch_size.max(1);
    let chunks: Vec<&[&Sample]> = sources.chunks(batch_size).collect();
    let run_chunk = |chunk: &[&Sample]| -> Result<Vec<Vec<f32>>, DiffusionError> {
        let masks: Vec<&[u8]> = chunk.iter().map(|s| s.mask.as_slice()).collect();
        let mut streams: Vec<RngStream> = chunk
            .iter()
            .map(|s| synthesis_stream(seed, s.patient_id, s.slice_index))
            .collect();
        sample_batch(model, &masks, h, w, sched, &mut streams)
    };
    let threads = threads.clamp(1, chunks.len());
    let images: Vec<Vec<f32>> = if threads == 1 {
        let mut out = Vec::with_capacity(sources.len());
        for (i, chunk) in chunks.iter().enumerate() {
            out.extend(run_chunk(chunk)?);
            log::debug!("synthesized {}/{} batches", i + 1, chunks.len());
        }
        out
    } else {
        let mut results: Vec<Option<Result<Vec<Vec<f32>>, DiffusionError>>> =
            (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let slots: Vec<_> = results.chunks_mut(chunks.len().div_ceil(threads)).collect();
            let mut start = 0;
            for slot in slots {
                let len = slot.len();
                let mine = &chunks[start..start + len];
                start += len;
                let run_chunk = &run_chunk;
                scope.spawn(move || {
                    for (s, c) in slot.iter_mut().zip(mine) {
                        *s = Some(run_chunk(c));
                    }
                });
            }
        });
        let mut out = Vec::with_capacity(sources.len());
        for r in results {
            out.extend(r.expect("every chunk ran")?);
        }
        out
    };
    let samples: Vec<Sample> = sources
        .iter()
        .zip(images)
        .map(|(src, image)| Sample {
            height: h,
            width: w,
            image,
            mask: src.mask.clone(),
            patient_id: src.patient_id,
            slice_index: src.slice_index,
            provenance: Provenance::Synthetic(generator_site.to_string()),
        })
        .collect();
    for s in &samples {
        s.validate()?;
    }
    let mut ds = SiteDataset::new(generator_site.to_string(), None, samples);
    let splits = ds
        .patients()
        .into_iter()
        .map(|p| (p, Split::Train))
        .collect();
    ds.set_splits(splits)?;
    Ok(ds)
}
