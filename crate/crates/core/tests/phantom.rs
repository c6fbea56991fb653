use fdm_core::phantom::{
    generate_site_dataset, read_dataset, split_dataset, write_dataset, SiteProfile, Split,
};
use proptest::prelude::*;

fn region_mean(profile: &SiteProfile, in_mask: bool) -> f64 {
    let ds = generate_site_dataset(profile, 20, 3, 11).unwrap();
    let (mut sum, mut n) = (0.0f64, 0usize);
    for s in ds.samples() {
        for (&v, &m) in s.image.iter().zip(&s.mask) {
            if (m == 1) == in_mask {
                sum += v as f64;
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn myocardium_intensity_follows_profile() {
    let a = SiteProfile::hospital_a();
    let b = SiteProfile::hospital_b();
    // shading is symmetric around the centre and noise is zero-mean
    assert!((region_mean(&a, true) - a.myo_mean as f64).abs() < 0.01);
    assert!((region_mean(&b, true) - b.myo_mean as f64).abs() < 0.02);
    assert!(region_mean(&b, true) - region_mean(&a, true) > 0.15);
}

#[test]
fn split_and_disk_roundtrip() {
    let ds = generate_site_dataset(&SiteProfile::hospital_b(), 10, 3, 2).unwrap();
    let ds = split_dataset(&ds, (0.6, 0.2, 0.2), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    // the generating profile is not part of the on-disk format
    assert_eq!(back.profile, None);
    assert_eq!(back.site_id, ds.site_id);
    assert_eq!(back.samples(), ds.samples());
    for s in ds.samples() {
        assert_eq!(back.split_of(s.patient_id), ds.split_of(s.patient_id));
    }
    let counts: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| back.patients_in(s).len())
        .collect();
    assert_eq!(counts, vec![6, 2, 2]);
    for s in back.samples() {
        assert_eq!(back.split_of(s.patient_id), ds.split_of(s.patient_id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_generated_sample_is_valid(seed in any::<u64>(), patients in 5usize..9, slices in 1usize..4) {
        let ds = generate_site_dataset(&SiteProfile::hospital_a(), patients, slices, seed).unwrap();
        prop_assert_eq!(ds.len(), patients * slices);
        for s in ds.samples() {
            prop_assert!(s.validate().is_ok());
        }
        prop_assert_eq!(&ds, &generate_site_dataset(&SiteProfile::hospital_a(), patients, slices, seed).unwrap());
    }

    #[test]
    fn splits_partition_patients(seed in any::<u64>(), patients in 5usize..40) {
        let ds = generate_site_dataset(&SiteProfile::hospital_a(), patients, 1, 1).unwrap();
        let ds = split_dataset(&ds, (0.6, 0.2, 0.2), seed).unwrap();
        let mut all: Vec<u32> = [Split::Train, Split::Val, Split::Test].iter().flat_map(|&s| ds.patients_in(s)).collect();
        all.sort();
        prop_assert_eq!(all, ds.patients());
    }
}
