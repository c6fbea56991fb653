//! Federation checks shared by the federation tests and the acceptance run.

use std::io::Write;
use std::net::TcpStream;
use std::thread;

use fdm_core::diffusion::{train_diffusion, DiffusionTrainConfig, EpsilonNet, EpsilonNetSpec};
use fdm_core::federation::{
    encode_raw_artifact, export_artifact, import_artifact, list_artifacts, parse_artifact,
    privacy_audit, pull_artifact, push_artifact, ArtifactBytes, ArtifactKind, ArtifactMetadata,
    AuditRule, FederationError, Frame, MsgType, RegistryServer, ScheduleMeta, METADATA_CAP,
};
use fdm_core::nn::{ParamTree, RngStream};
use fdm_core::phantom::{generate_site_dataset, SiteDataset, SiteProfile};
use fdm_core::segmentation::{SegNet, SegNetSpec};

const SCHED: ScheduleMeta = ScheduleMeta {
    steps: 200,
    beta_min: 1e-4,
    beta_max: 0.02,
};

pub fn diffusion_artifact(spec: EpsilonNetSpec, seed: u64) -> (ParamTree, ArtifactBytes) {
    let net = EpsilonNet::new(spec);
    let params = net.init(&mut RngStream::new(seed, 0));
    let meta = ArtifactMetadata::for_diffusion(
        "diffusion-B",
        "B",
        net.spec(),
        SCHED,
        "cfg",
        1_700_000_000,
    );
    let bytes = export_artifact(&params, &meta).unwrap();
    (params, bytes)
}

pub fn seg_artifact(name: &str) -> ArtifactBytes {
    let net = SegNet::new(SegNetSpec::default());
    let params = net.init(&mut RngStream::new(1, 0));
    export_artifact(
        &params,
        &ArtifactMetadata::for_segmentation(name, "A", net.spec(), "cfg", 0),
    )
    .unwrap()
}

pub fn site_b() -> SiteDataset {
    generate_site_dataset(&SiteProfile::hospital_b(), 6, 2, 8).unwrap()
}

pub fn export_import_roundtrip_is_bit_exact() {
    let (params, bytes) = diffusion_artifact(EpsilonNetSpec::default(), 3);
    let (back, meta) =
        import_artifact(bytes.as_bytes(), &EpsilonNetSpec::default().arch_hash()).unwrap();
    assert_eq!(back, params);
    for ((_, a), (_, b)) in back.iter().zip(params.iter()) {
        let bits = |t: &fdm_core::nn::Tensor<f32>| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(meta.kind, ArtifactKind::Diffusion);
    assert_eq!(meta.origin_site, "B");
    assert_eq!(meta.schedule, Some(SCHED));
    let again = export_artifact(&back, &meta).unwrap();
    assert_eq!(again, bytes);
}

pub fn any_flipped_byte_is_detected() {
    let bytes = seg_artifact("segmentation-A").into_vec();
    let hash = SegNetSpec::default().arch_hash();
    for at in [
        0,
        5,
        12,
        200,
        bytes.len() / 2,
        bytes.len() - 5,
        bytes.len() - 1,
    ] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x40;
        let err = import_artifact(&bad, &hash).unwrap_err();
        assert!(
            matches!(err, FederationError::Corrupt { .. }),
            "byte {at}: {err}"
        );
        assert!(ArtifactBytes::try_from(bad).is_err());
    }
    assert!(matches!(
        import_artifact(&bytes[..bytes.len() - 1], &hash),
        Err(FederationError::Corrupt { .. })
    ));
}

pub fn wrong_architecture_is_incompatible() {
    let (_, wide) = diffusion_artifact(EpsilonNetSpec::with_width(64), 1);
    let err = import_artifact(wide.as_bytes(), &EpsilonNetSpec::default().arch_hash()).unwrap_err();
    assert!(matches!(err, FederationError::Incompatible { .. }), "{err}");
    let seg = seg_artifact("segmentation-A");
    let err = import_artifact(seg.as_bytes(), &EpsilonNetSpec::default().arch_hash()).unwrap_err();
    assert!(matches!(err, FederationError::Incompatible { .. }), "{err}");
}

pub fn audit_passes_genuine_artifacts() {
    let ds = site_b();
    let (_, bytes) = diffusion_artifact(EpsilonNetSpec::default(), 5);
    let report = privacy_audit(bytes.as_bytes(), &ds).unwrap();
    assert!(report.passed(), "{:?}", report.findings);
    assert!(privacy_audit(seg_artifact("s").as_bytes(), &ds)
        .unwrap()
        .passed());
}

pub fn audit_locates_spliced_image_bytes() {
    let ds = site_b();
    let (_, bytes) = diffusion_artifact(EpsilonNetSpec::default(), 5);
    let raw = parse_artifact(bytes.as_bytes()).unwrap();
    let leaked: Vec<u8> = ds.samples()[3].image[100..164]
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let mut payload = raw.payload.to_vec();
    let at = 4000;
    payload[at..at + leaked.len()].copy_from_slice(&leaked);
    let forged = encode_raw_artifact(raw.kind, raw.metadata, &payload);
    let report = privacy_audit(&forged, &ds).unwrap();
    assert!(!report.passed());
    assert_eq!(report.findings.len(), 1, "{:?}", report.findings);
    let f = &report.findings[0];
    assert_eq!(f.rule, AuditRule::VerbatimLeak);
    assert_eq!(f.rule.id(), 3);
    assert_eq!(f.offset, raw.payload_offset + at);
}

pub fn audit_rejects_oversized_metadata() {
    let ds = site_b();
    let (_, bytes) = diffusion_artifact(EpsilonNetSpec::default(), 5);
    let raw = parse_artifact(bytes.as_bytes()).unwrap();
    let mut meta = String::from_utf8(raw.metadata.to_vec()).unwrap();
    meta.push_str(&format!("comment={}\n", "x".repeat(20 * 1024)));
    let forged = encode_raw_artifact(raw.kind, meta.as_bytes(), raw.payload);
    let report = privacy_audit(&forged, &ds).unwrap();
    let cap = report
        .findings
        .iter()
        .find(|f| f.rule == AuditRule::MetadataCap)
        .expect("cap finding");
    assert_eq!(cap.offset, 6);
    assert!(meta.len() > METADATA_CAP);
    assert!(matches!(
        import_artifact(&forged, &EpsilonNetSpec::default().arch_hash()),
        Err(FederationError::MetadataTooLarge { .. })
    ));
}

pub fn audit_flags_trailing_sections() {
    let ds = site_b();
    let (_, bytes) = diffusion_artifact(EpsilonNetSpec::default(), 5);
    let raw = parse_artifact(bytes.as_bytes()).unwrap();
    let mut body = bytes.as_bytes()[..bytes.len() - 4].to_vec();
    body.extend_from_slice(b"extra");
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    let report = privacy_audit(&body, &ds).unwrap();
    assert!(
        report
            .findings
            .iter()
            .any(|f| f.rule == AuditRule::Schema
                && f.offset == raw.payload_offset + raw.payload.len())
    );
}

pub fn crc32(bytes: &[u8]) -> u32 {
    // bitwise CRC-32 (IEEE, reflected)
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0xedb8_8320
            } else {
                crc >> 1
            };
        }
    }
    !crc
}

pub fn stored_checksum_is_standard_crc32() {
    let bytes = seg_artifact("x");
    let b = bytes.as_bytes();
    assert_eq!(bytes.checksum(), crc32(&b[..b.len() - 4]));
}

pub fn payload_size_does_not_depend_on_training_set_size() {
    let ds = generate_site_dataset(&SiteProfile::hospital_b(), 20, 5, 2).unwrap();
    let all: Vec<_> = ds.samples().iter().collect();
    let net = EpsilonNet::new(EpsilonNetSpec::default());
    let cfg = DiffusionTrainConfig {
        epochs: 1,
        batch_size: 16,
        ..DiffusionTrainConfig::default()
    };
    let mut lens = Vec::new();
    for n in [10, 100] {
        let (params, _) = train_diffusion(&all[..n], &net, &cfg).unwrap();
        let meta = ArtifactMetadata::for_diffusion("d", "B", net.spec(), SCHED, &cfg.digest(), 0);
        let bytes = export_artifact(&params, &meta).unwrap();
        lens.push((
            parse_artifact(bytes.as_bytes()).unwrap().payload.len(),
            bytes.len(),
        ));
    }
    assert_eq!(lens[0], lens[1]);
}

pub fn registry_push_pull_list() {
    let store = tempfile::tempdir().unwrap();
    let mut server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    let addr = server.addr();
    let a = seg_artifact("seg-a");
    let (_, d) = diffusion_artifact(EpsilonNetSpec::default(), 2);
    push_artifact(addr, "seg-a", &a).unwrap();
    push_artifact(addr, "diffusion-B", &d).unwrap();
    assert_eq!(pull_artifact(addr, "seg-a").unwrap(), a);
    assert_eq!(pull_artifact(addr, "diffusion-B").unwrap(), d);
    let index = list_artifacts(addr).unwrap();
    assert_eq!(index.version, 2);
    assert_eq!(
        index.entries.keys().collect::<Vec<_>>(),
        ["diffusion-B", "seg-a"]
    );
    assert_eq!(index.entries["seg-a"].checksum, a.checksum());
    assert_eq!(index.entries["diffusion-B"].kind, ArtifactKind::Diffusion);

    // identical re-push is accepted, a different artifact under the same name is not
    push_artifact(addr, "seg-a", &a).unwrap();
    assert!(matches!(
        push_artifact(addr, "seg-a", &d),
        Err(FederationError::Exists(_))
    ));
    assert!(matches!(
        pull_artifact(addr, "missing"),
        Err(FederationError::NotFound(_))
    ));
    assert!(push_artifact(addr, "../escape", &a).is_err());
    assert_eq!(list_artifacts(addr).unwrap().version, 2);
    server.shutdown();
}

pub fn interrupted_push_leaves_no_entry() {
    let store = tempfile::tempdir().unwrap();
    let mut server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    let addr = server.addr();
    let art = seg_artifact("partial");
    let mut payload = vec![7u8, 0];
    payload.extend_from_slice(b"partial");
    payload.extend_from_slice(art.as_bytes());
    let frame = Frame::new(MsgType::Push, payload).encode();
    {
        let mut conn = TcpStream::connect(addr).unwrap();
        conn.write_all(&frame[..frame.len() / 2]).unwrap();
    }
    // the server only sees EOF once the client is gone; a later request is served after it
    thread::sleep(std::time::Duration::from_millis(100));
    let index = list_artifacts(addr).unwrap();
    assert!(index.entries.is_empty());
    assert_eq!(index.version, 0);
    assert!(matches!(
        pull_artifact(addr, "partial"),
        Err(FederationError::NotFound(_))
    ));
    server.shutdown();

    // a temp file left by a crash mid-write is not an artifact after restart
    std::fs::write(
        store.path().join(".partial.1-0.tmp"),
        &art.as_bytes()[..100],
    )
    .unwrap();
    let mut server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    assert!(list_artifacts(server.addr()).unwrap().entries.is_empty());
    assert!(!store.path().join(".partial.1-0.tmp").exists());
    push_artifact(server.addr(), "partial", &art).unwrap();
    server.shutdown();
}

pub fn index_survives_restart() {
    let store = tempfile::tempdir().unwrap();
    let mut server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    let a = seg_artifact("one");
    push_artifact(server.addr(), "one", &a).unwrap();
    push_artifact(server.addr(), "two", &seg_artifact("two")).unwrap();
    let before = list_artifacts(server.addr()).unwrap();
    server.shutdown();
    drop(server);

    let server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    let after = list_artifacts(server.addr()).unwrap();
    assert_eq!(after, before);
    assert_eq!(pull_artifact(server.addr(), "one").unwrap(), a);
}

pub fn concurrent_pushes_of_distinct_names_both_succeed() {
    let store = tempfile::tempdir().unwrap();
    let server = RegistryServer::bind("127.0.0.1:0", store.path())
        .unwrap()
        .spawn();
    let addr = server.addr();
    let arts: Vec<(String, ArtifactBytes)> = (0..2)
        .map(|i| {
            (
                format!("site-{i}"),
                diffusion_artifact(EpsilonNetSpec::default(), 10 + i).1,
            )
        })
        .collect();
    let barrier = std::sync::Barrier::new(2);
    thread::scope(|s| {
        for (name, art) in &arts {
            let barrier = &barrier;
            s.spawn(move || {
                barrier.wait();
                push_artifact(addr, name, art).unwrap();
            });
        }
    });
    let index = list_artifacts(addr).unwrap();
    assert_eq!(index.version, 2);
    for (name, art) in &arts {
        assert_eq!(&pull_artifact(addr, name).unwrap(), art);
    }
}
