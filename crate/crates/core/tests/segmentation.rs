mod common;

use common::dice_by_counting;
use fdm_core::nn::{Graph, RngStream, Tensor};
use fdm_core::phantom::{
    generate_site_dataset, split_dataset, Provenance, Sample, SiteProfile, Split,
};
use fdm_core::segmentation::{
    dice_loss, evaluate, train_segmentation, SegError, SegNet, SegNetSpec, SegPredictor,
    SegTrainConfig, TrainedSegNet,
};

#[test]
fn dice_matches_pixel_counting_on_random_masks() {
    common::numeric_suite::dice_matches_pixel_counting_on_random_masks();
}

#[test]
fn soft_dice_approaches_hard_dice_near_saturation() {
    let mut rng = RngStream::new(3, 1);
    for _ in 0..20 {
        let pred: Vec<u8> = (0..256).map(|_| (rng.next_uniform() < 0.4) as u8).collect();
        let truth: Vec<u8> = (0..256).map(|_| (rng.next_uniform() < 0.4) as u8).collect();
        let probs: Vec<f32> = pred
            .iter()
            .map(|&p| if p == 1 { 0.999 } else { 0.001 })
            .collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1, 1, 16, 16], probs).unwrap());
        let m = g.constant(
            Tensor::new(&[1, 1, 16, 16], truth.iter().map(|&v| v as f32).collect()).unwrap(),
        );
        let loss = dice_loss(&mut g, p, m).unwrap();
        let hard = dice_by_counting(&pred, &truth);
        let soft = g.value(loss).data()[0] as f64;
        assert!(
            (soft - (1.0 - hard)).abs() < 0.01,
            "soft {soft} vs 1-dice {}",
            1.0 - hard
        );
    }
}

struct Perfect<'a>(&'a [&'a Sample]);

impl SegPredictor for Perfect<'_> {
    fn predict_probs(
        &self,
        images: &[f32],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Result<Vec<f32>, SegError> {
        // look the slice up by its image
        let mut out = Vec::with_capacity(batch * h * w);
        for img in images.chunks_exact(h * w) {
            let s = self.0.iter().find(|s| s.image == img).expect("known slice");
            out.extend(s.mask.iter().map(|&m| m as f32));
        }
        Ok(out)
    }
}

struct Background;

impl SegPredictor for Background {
    fn predict_probs(
        &self,
        images: &[f32],
        _: usize,
        _: usize,
        _: usize,
    ) -> Result<Vec<f32>, SegError> {
        Ok(vec![0.0; images.len()])
    }
}

#[test]
fn evaluate_with_stub_predictors() {
    let ds = generate_site_dataset(&SiteProfile::hospital_a(), 6, 5, 1).unwrap();
    let test: Vec<&Sample> = ds.samples().iter().collect();
    let row = evaluate(&Perfect(&test), &test, 0.5, "Hospital A").unwrap();
    assert_eq!(row.dice, 1.0);
    assert_eq!(row.per_slice.len(), 30);
    assert_eq!(row.test_source, "Hospital A");
    let row = evaluate(&Background, &test, 0.5, "Hospital A").unwrap();
    assert_eq!(row.dice, 0.0);
}

#[test]
fn evaluate_rejects_synthetic_and_empty_sets() {
    let ds = generate_site_dataset(&SiteProfile::hospital_a(), 5, 1, 1).unwrap();
    let mut syn = ds.samples()[0].clone();
    syn.provenance = Provenance::Synthetic("B".into());
    assert!(matches!(
        evaluate(&Background, &[&syn], 0.5, "x"),
        Err(SegError::Synthetic { .. })
    ));
    assert!(matches!(
        evaluate(&Background, &[], 0.5, "x"),
        Err(SegError::EmptySet(_))
    ));
}

#[test]
fn training_keeps_best_validation_checkpoint() {
    let ds = generate_site_dataset(&SiteProfile::hospital_a(), 10, 2, 4).unwrap();
    let ds = split_dataset(&ds, (0.6, 0.2, 0.2), 4).unwrap();
    let (train, val) = (ds.samples_in(Split::Train), ds.samples_in(Split::Val));
    let net = SegNet::new(SegNetSpec {
        base_width: 8,
        ..SegNetSpec::default()
    });
    let cfg = SegTrainConfig {
        epochs: 6,
        batch_size: 4,
        patience: 6,
        ..SegTrainConfig::default()
    };
    let (best, log) = train_segmentation(&net, &train, &val, &cfg).unwrap();
    assert_eq!(log.epoch_val.len(), 6);
    let best_val = log.epoch_val.iter().copied().fold(f32::MIN, f32::max);
    let model = TrainedSegNet {
        net: net.clone(),
        params: best.clone(),
    };
    assert_eq!(
        evaluate(&model, &val, 0.5, "").unwrap().dice as f32,
        best_val
    );

    let again = train_segmentation(&net, &train, &val, &cfg).unwrap();
    assert_eq!(again.0, best);
}

#[test]
fn patience_stops_training() {
    let ds = generate_site_dataset(&SiteProfile::hospital_a(), 10, 1, 4).unwrap();
    let ds = split_dataset(&ds, (0.6, 0.2, 0.2), 4).unwrap();
    let net = SegNet::new(SegNetSpec {
        base_width: 8,
        ..SegNetSpec::default()
    });
    // a negligible lr never improves on the first epoch
    let cfg = SegTrainConfig {
        epochs: 20,
        batch_size: 4,
        patience: 2,
        lr: 1e-12,
        ..SegTrainConfig::default()
    };
    let (_, log) = train_segmentation(
        &net,
        &ds.samples_in(Split::Train),
        &ds.samples_in(Split::Val),
        &cfg,
    )
    .unwrap();
    assert_eq!(log.epoch_val.len(), 3);
}

#[test]
fn synthetic_validation_is_rejected() {
    let ds = generate_site_dataset(&SiteProfile::hospital_a(), 5, 1, 4).unwrap();
    let mut syn = ds.samples()[0].clone();
    syn.provenance = Provenance::Synthetic("B".into());
    let net = SegNet::new(SegNetSpec {
        base_width: 8,
        ..SegNetSpec::default()
    });
    let train: Vec<&Sample> = ds.samples().iter().collect();
    let cfg = SegTrainConfig {
        epochs: 1,
        ..SegTrainConfig::default()
    };
    assert!(matches!(
        train_segmentation(&net, &train, &[&syn], &cfg),
        Err(SegError::Synthetic { set: "val", .. })
    ));
}
