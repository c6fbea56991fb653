use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn fdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fdm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run fdm")
}

fn ok(args: &[&str]) -> Output {
    let out = fdm(args);
    assert!(
        out.status.success(),
        "fdm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    fdm(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates and splits a small dataset for `site` under `dir`.
fn dataset(dir: &Path, site: &str) -> String {
    let raw = dir.join(format!("raw-{site}"));
    let split = dir.join(format!("data-{site}"));
    ok(&[
        "gen-data",
        "--site",
        site,
        "--out",
        p(&raw),
        "--patients",
        "5",
        "--slices",
        "2",
        "--seed",
        "3",
    ]);
    ok(&["split", "--dataset", p(&raw), "--out", p(&split)]);
    split.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gen-data", "--out", "x"]), 1);
    assert_eq!(
        code(&[
            "evaluate",
            "--artifact",
            "a",
            "--dataset",
            "d",
            "--out",
            "o",
            "--format",
            "xml"
        ]),
        1
    );
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for d in [&x, &y] {
        ok(&[
            "gen-data",
            "--site",
            "A",
            "--out",
            p(d),
            "--seed",
            "7",
            "--patients",
            "5",
            "--slices",
            "2",
        ]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&x)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 11);
    for n in names {
        assert_eq!(
            std::fs::read(x.join(&n)).unwrap(),
            std::fs::read(y.join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn gen_data_rejects_unknown_site_and_missing_split() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&["gen-data", "--site", "Q", "--out", p(&dir.path().join("q"))]),
        1
    );
    let raw = dir.path().join("raw");
    ok(&[
        "gen-data",
        "--site",
        "A",
        "--out",
        p(&raw),
        "--patients",
        "5",
        "--slices",
        "1",
    ]);
    let art = dir.path().join("diffusion-A.fdma");
    assert_eq!(
        code(&[
            "train-diffusion",
            "--dataset",
            p(&raw),
            "--out",
            p(&art),
            "--epochs",
            "1"
        ]),
        1
    );
    assert_eq!(
        code(&[
            "split",
            "--dataset",
            p(&dir.path().join("missing")),
            "--out",
            p(&raw)
        ]),
        2
    );
}

#[test]
fn diffusion_pipeline_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let b = dataset(dir.path(), "B");
    let a = dataset(dir.path(), "A");
    let art = dir.path().join("diffusion-B.fdma");
    ok(&[
        "train-diffusion",
        "--dataset",
        &b,
        "--out",
        p(&art),
        "--epochs",
        "1",
        "--steps",
        "10",
        "--created",
        "5",
    ]);
    ok(&["audit", "--artifact", p(&art), "--dataset", &b]);

    let syn = dir.path().join("syn");
    ok(&[
        "synthesize",
        "--artifact",
        p(&art),
        "--dataset",
        &a,
        "--out",
        p(&syn),
    ]);
    let manifest = std::fs::read_to_string(syn.join("manifest.tsv")).unwrap();
    assert!(manifest.lines().skip(1).all(|l| l.ends_with("synthetic:B")));

    let previews = dir.path().join("previews");
    ok(&[
        "sample",
        "--artifact",
        p(&art),
        "--dataset",
        &a,
        "--out",
        p(&previews),
        "--count",
        "2",
    ]);
    let pgm = std::fs::read(previews.join("p0000_s00.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 32 * 32);

    let hist = dir.path().join("hist");
    let syn_arg = format!("syn.B={}", p(&syn));
    ok(&[
        "histograms",
        "--dataset",
        &format!("B={b}"),
        "--dataset",
        &syn_arg,
        "--out",
        p(&hist),
    ]);
    assert!(
        std::fs::read_to_string(hist.join("histogram_distances.tsv"))
            .unwrap()
            .contains("myocardium\tB\tsyn.B\t")
    );

    // leaked image bytes fail the audit with exit code 3
    let mut bytes = std::fs::read(&art).unwrap();
    let image = std::fs::read(Path::new(&b).join("p0000_s00.fds")).unwrap();
    let at = bytes.len() / 2;
    bytes[at..at + 256].copy_from_slice(&image[8 + 400..8 + 656]);
    let body = bytes.len() - 4;
    let crc = crc32(&bytes[..body]);
    bytes[body..].copy_from_slice(&crc.to_le_bytes());
    let forged = dir.path().join("forged.fdma");
    std::fs::write(&forged, &bytes).unwrap();
    let out = fdm(&["audit", "--artifact", p(&forged), "--dataset", &b]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rule 3"));
}

/// Bitwise CRC-32 (IEEE).
fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
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

#[test]
fn segmentation_export_import_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let a = dataset(dir.path(), "A");
    let art = dir.path().join("segmentation-A.fdma");
    ok(&[
        "train-seg",
        "--dataset",
        &a,
        "--out",
        p(&art),
        "--epochs",
        "1",
    ]);

    let unpacked = dir.path().join("unpacked");
    ok(&["import", "--artifact", p(&art), "--out", p(&unpacked)]);
    let meta = std::fs::read_to_string(unpacked.join("metadata.txt")).unwrap();
    assert!(meta.contains("kind=segmentation"));

    let digest = meta
        .lines()
        .find_map(|l| l.strip_prefix("config_digest="))
        .unwrap();
    let again = dir.path().join("segmentation-A2.fdma");
    ok(&[
        "export",
        "--weights",
        p(&unpacked.join("weights.fdmw")),
        "--out",
        p(&again),
        "--kind",
        "segmentation",
        "--site",
        "A",
        "--config-digest",
        digest,
    ]);
    let (x, y) = (std::fs::read(&art).unwrap(), std::fs::read(&again).unwrap());
    // only the name line differs
    assert_eq!(x.len() + 1, y.len());

    let report = dir.path().join("report");
    ok(&[
        "evaluate",
        "--artifact",
        p(&art),
        "--dataset",
        &a,
        "--out",
        p(&report),
        "--format",
        "tsv",
    ]);
    let tsv = std::fs::read_to_string(report.join("evaluation.tsv")).unwrap();
    assert!(tsv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("Hospital A\tHospital A\t"));

    // verification failures exit with 3
    let mut bytes = x.clone();
    bytes[40] ^= 1;
    let bad = dir.path().join("bad.fdma");
    std::fs::write(&bad, &bytes).unwrap();
    assert_eq!(
        code(&["import", "--artifact", p(&bad), "--out", p(&unpacked)]),
        3
    );
    assert_eq!(
        code(&[
            "evaluate",
            "--artifact",
            p(&bad),
            "--dataset",
            &a,
            "--out",
            p(&report)
        ]),
        3
    );
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_push_pull() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    std::fs::create_dir_all(&store).unwrap();
    let port = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let _server = Server(
        Command::new(env!("CARGO_BIN_EXE_fdm"))
            .args(["serve", "--addr", &addr, "--store", p(&store)])
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    while TcpStream::connect(&addr).is_err() {
        assert!(
            start.elapsed() < Duration::from_secs(10),
            "server did not start"
        );
        std::thread::sleep(Duration::from_millis(50));
    }

    let a = dataset(dir.path(), "A");
    let art = dir.path().join("segmentation-A.fdma");
    ok(&[
        "train-seg",
        "--dataset",
        &a,
        "--out",
        p(&art),
        "--epochs",
        "1",
    ]);
    ok(&["push", "--addr", &addr, "--artifact", p(&art)]);
    let pulled = dir.path().join("pulled.fdma");
    ok(&[
        "pull",
        "--addr",
        &addr,
        "--name",
        "segmentation-A",
        "--out",
        p(&pulled),
    ]);
    assert_eq!(
        std::fs::read(&art).unwrap(),
        std::fs::read(&pulled).unwrap()
    );
    assert_eq!(
        code(&[
            "pull",
            "--addr",
            &addr,
            "--name",
            "nope",
            "--out",
            p(&pulled)
        ]),
        2
    );
}
