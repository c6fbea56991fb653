//! File-backed artifact registry served over TCP.
//!
//! Each artifact lives in `<store>/<name>.fdma`. A push is written to a hidden
//! temp file and renamed into place only after the whole frame arrived and
//! verified, so readers never see a partial artifact. The index is derived
//! from the directory contents at startup.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::artifact::{
    parse_artifact, ArtifactBytes, ArtifactKind, ArtifactMetadata, ARTIFACT_EXTENSION,
};
use super::wire::{decode_name, encode_name, read_frame, write_frame, Frame, MsgType};
use super::FederationError;

const IO_TIMEOUT: Duration = Duration::from_secs(30);
const NOT_FOUND: &str = "not found: ";
const EXISTS: &str = "exists: ";

/// Names are 1–128 characters of `[A-Za-z0-9._-]`, not starting with a dot.
pub fn validate_name(name: &str) -> Result<(), FederationError> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(FederationError::Name(name.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub length: u64,
    pub checksum: u32,
    pub kind: ArtifactKind,
    pub origin_site: String,
    pub arch_hash: String,
}

impl IndexEntry {
    fn describe(bytes: &[u8]) -> Result<Self, FederationError> {
        let raw = parse_artifact(bytes)?;
        let text = std::str::from_utf8(raw.metadata)
            .map_err(|_| FederationError::Metadata("metadata is not UTF-8".into()))?;
        let meta = ArtifactMetadata::from_text(text)?;
        Ok(Self {
            length: bytes.len() as u64,
            checksum: u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap()),
            kind: meta.kind,
            origin_site: meta.origin_site,
            arch_hash: meta.arch_hash,
        })
    }
}

/// What the registry holds. `version` counts committed artifacts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegistryIndex {
    pub version: u64,
    pub entries: BTreeMap<String, IndexEntry>,
}

impl RegistryIndex {
    /// Rebuilds the index from the store, discarding leftover temp files.
    pub fn rebuild(store: &Path) -> Result<Self, FederationError> {
        let mut index = RegistryIndex::default();
        let dir = fs::read_dir(store).map_err(FederationError::io(format!(
            "reading store {}",
            store.display()
        )))?;
        let mut paths: Vec<PathBuf> = Vec::new();
        for entry in dir {
            paths.push(entry.map_err(FederationError::io("listing store"))?.path());
        }
        paths.sort();
        for path in paths {
            let file = path
                .file_name()
                .and_then(|f| f.to_str())
                .unwrap_or_default()
                .to_string();
            if file.starts_with('.') && file.ends_with(".tmp") {
                fs::remove_file(&path).map_err(FederationError::io(format!("removing {file}")))?;
                continue;
            }
            let Some(name) = file.strip_suffix(&format!(".{ARTIFACT_EXTENSION}")) else {
                continue;
            };
            let bytes = fs::read(&path).map_err(FederationError::io(format!("reading {file}")))?;
            let entry = IndexEntry::describe(&bytes).map_err(|e| {
                FederationError::Remote(format!("store file {file} is invalid: {e}"))
            })?;
            index.entries.insert(name.to_string(), entry);
        }
        index.version = index.entries.len() as u64;
        Ok(index)
    }

    /// Text form used by the list response: a `version` line, then one
    /// tab-separated line per artifact (name, length, crc32, kind, origin, arch hash).
    pub fn to_listing(&self) -> String {
        let mut out = format!("version\t{}\n", self.version);
        for (name, e) in &self.entries {
            out.push_str(&format!(
                "{name}\t{}\t{:08x}\t{}\t{}\t{}\n",
                e.length,
                e.checksum,
                e.kind.as_str(),
                e.origin_site,
                e.arch_hash
            ));
        }
        out
    }

    pub fn from_listing(text: &str) -> Result<Self, FederationError> {
        let bad = |m: &str| FederationError::Protocol(format!("malformed listing: {m}"));
        let mut lines = text.lines();
        let version = lines
            .next()
            .and_then(|l| l.strip_prefix("version\t"))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing version line"))?;
        let mut entries = BTreeMap::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            entries.insert(
                f[0].to_string(),
                IndexEntry {
                    length: f[1].parse().map_err(|_| bad("length"))?,
                    checksum: u32::from_str_radix(f[2], 16).map_err(|_| bad("checksum"))?,
                    kind: ArtifactKind::parse(f[3]).ok_or_else(|| bad("kind"))?,
                    origin_site: f[4].to_string(),
                    arch_hash: f[5].to_string(),
                },
            );
        }
        Ok(Self { version, entries })
    }
}

struct Store {
    dir: PathBuf,
    index: Mutex<RegistryIndex>,
    tmp_counter: AtomicU64,
}

impl Store {
    fn path_of(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.{ARTIFACT_EXTENSION}"))
    }

    fn push(&self, name: &str, bytes: &[u8]) -> Result<(), FederationError> {
        validate_name(name)?;
        let entry = IndexEntry::describe(bytes)?;
        let tmp = self.dir.join(format!(
            ".{name}.{}-{}.tmp",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::Relaxed)
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(FederationError::Io {
                context: format!("writing {name}"),
                source: e,
            });
        }
        let mut index = self.index.lock().expect("index lock");
        if let Some(existing) = index.entries.get(name) {
            let _ = fs::remove_file(&tmp);
            return if *existing == entry
                && fs::read(self.path_of(name)).ok().as_deref() == Some(bytes)
            {
                Ok(())
            } else {
                Err(FederationError::Exists(name.into()))
            };
        }
        if let Err(e) = fs::rename(&tmp, self.path_of(name)) {
            let _ = fs::remove_file(&tmp);
            return Err(FederationError::Io {
                context: format!("committing {name}"),
                source: e,
            });
        }
        index.entries.insert(name.to_string(), entry);
        index.version += 1;
        Ok(())
    }

    fn pull(&self, name: &str) -> Result<Vec<u8>, FederationError> {
        validate_name(name)?;
        if !self
            .index
            .lock()
            .expect("index lock")
            .entries
            .contains_key(name)
        {
            return Err(FederationError::NotFound(name.into()));
        }
        fs::read(self.path_of(name)).map_err(FederationError::io(format!("reading {name}")))
    }

    fn handle(&self, mut conn: TcpStream) {
        let _ = conn.set_read_timeout(Some(IO_TIMEOUT));
        let _ = conn.set_write_timeout(Some(IO_TIMEOUT));
        let request = match read_frame(&mut conn) {
            Ok(f) => f,
            Err(e) => {
                log::debug!("dropping connection: {e}");
                return;
            }
        };
        let response = match self.respond(&request) {
            Ok(r) => r,
            Err(FederationError::NotFound(n)) => {
                Frame::new(MsgType::Err, format!("{NOT_FOUND}{n}").into_bytes())
            }
            Err(FederationError::Exists(n)) => {
                Frame::new(MsgType::Err, format!("{EXISTS}{n}").into_bytes())
            }
            Err(e) => Frame::new(MsgType::Err, e.to_string().into_bytes()),
        };
        if let Err(e) = write_frame(&mut conn, &response) {
            log::debug!("failed to answer: {e}");
        }
    }

    fn respond(&self, request: &Frame) -> Result<Frame, FederationError> {
        match request.kind {
            MsgType::Push => {
                let (name, bytes) = decode_name(&request.payload)?;
                self.push(&name, bytes)?;
                log::info!("stored {name} ({} bytes)", bytes.len());
                Ok(Frame::new(MsgType::Ok, Vec::new()))
            }
            MsgType::Pull => {
                let (name, rest) = decode_name(&request.payload)?;
                if !rest.is_empty() {
                    return Err(FederationError::Protocol(
                        "trailing bytes after pull name".into(),
                    ));
                }
                Ok(Frame::new(MsgType::Data, self.pull(&name)?))
            }
            MsgType::List => {
                let listing = self.index.lock().expect("index lock").to_listing();
                Ok(Frame::new(MsgType::Data, listing.into_bytes()))
            }
            other => Err(FederationError::Protocol(format!(
                "{other:?} is not a request"
            ))),
        }
    }
}

pub struct RegistryServer {
    listener: TcpListener,
    store: Arc<Store>,
}

impl RegistryServer {
    /// Binds `addr` and loads the index from `store`, creating the directory if needed.
    pub fn bind(addr: &str, store: &Path) -> Result<Self, FederationError> {
        fs::create_dir_all(store).map_err(FederationError::io(format!(
            "creating store {}",
            store.display()
        )))?;
        let index = RegistryIndex::rebuild(store)?;
        let listener =
            TcpListener::bind(addr).map_err(FederationError::io(format!("binding {addr}")))?;
        let store = Arc::new(Store {
            dir: store.to_path_buf(),
            index: Mutex::new(index),
            tmp_counter: AtomicU64::new(0),
        });
        Ok(Self { listener, store })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn index(&self) -> RegistryIndex {
        self.store.index.lock().expect("index lock").clone()
    }

    /// Accepts connections until `stop` is set; one handler thread per connection.
    fn run(self, stop: Arc<AtomicBool>) {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(conn) => {
                    let store = Arc::clone(&self.store);
                    std::thread::spawn(move || store.handle(conn));
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }

    /// Serves forever on the calling thread.
    pub fn serve(self) {
        self.run(Arc::new(AtomicBool::new(false)))
    }

    /// Serves on a background thread until the handle is shut down or dropped.
    pub fn spawn(self) -> RegistryHandle {
        let addr = self.local_addr();
        let store = Arc::clone(&self.store);
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::spawn(move || self.run(flag));
        RegistryHandle {
            addr,
            stop,
            store,
            thread: Some(thread),
        }
    }
}

pub struct RegistryHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    store: Arc<Store>,
    thread: Option<JoinHandle<()>>,
}

impl RegistryHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn index(&self) -> RegistryIndex {
        self.store.index.lock().expect("index lock").clone()
    }

    pub fn shutdown(&mut self) {
        if let Some(t) = self.thread.take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(self.addr);
            let _ = t.join();
        }
    }
}

impl Drop for RegistryHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn round_trip(addr: impl ToSocketAddrs, request: Frame) -> Result<Frame, FederationError> {
    let mut conn =
        TcpStream::connect(addr).map_err(FederationError::io("connecting to registry"))?;
    conn.set_read_timeout(Some(IO_TIMEOUT))
        .map_err(FederationError::io("configuring socket"))?;
    write_frame(&mut conn, &request)?;
    let response = read_frame(&mut conn)?;
    if response.kind == MsgType::Err {
        let msg = String::from_utf8_lossy(&response.payload).into_owned();
        return Err(if let Some(n) = msg.strip_prefix(NOT_FOUND) {
            FederationError::NotFound(n.into())
        } else if let Some(n) = msg.strip_prefix(EXISTS) {
            FederationError::Exists(n.into())
        } else {
            FederationError::Remote(msg)
        });
    }
    Ok(response)
}

pub fn push_artifact(
    addr: impl ToSocketAddrs,
    name: &str,
    artifact: &ArtifactBytes,
) -> Result<(), FederationError> {
    validate_name(name)?;
    let response = round_trip(
        addr,
        Frame::new(MsgType::Push, encode_name(name, artifact.as_bytes())),
    )?;
    match response.kind {
        MsgType::Ok => Ok(()),
        other => Err(FederationError::Protocol(format!(
            "unexpected {other:?} reply to push"
        ))),
    }
}

/// Fetches `name`; the checksum is verified before the bytes are returned.
pub fn pull_artifact(
    addr: impl ToSocketAddrs,
    name: &str,
) -> Result<ArtifactBytes, FederationError> {
    validate_name(name)?;
    let response = round_trip(addr, Frame::new(MsgType::Pull, encode_name(name, &[])))?;
    if response.kind != MsgType::Data {
        return Err(FederationError::Protocol(format!(
            "unexpected {:?} reply to pull",
            response.kind
        )));
    }
    ArtifactBytes::try_from(response.payload)
        .map_err(|e| FederationError::Transfer(format!("{name}: {e}")))
}

pub fn list_artifacts(addr: impl ToSocketAddrs) -> Result<RegistryIndex, FederationError> {
    let response = round_trip(addr, Frame::new(MsgType::List, Vec::new()))?;
    if response.kind != MsgType::Data {
        return Err(FederationError::Protocol(format!(
            "unexpected {:?} reply to list",
            response.kind
        )));
    }
    let text = String::from_utf8(response.payload)
        .map_err(|_| FederationError::Protocol("listing is not UTF-8".into()))?;
    RegistryIndex::from_listing(&text)
}
