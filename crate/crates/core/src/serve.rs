//! In-memory dictionary lookup and the line-delimited JSON server.
//!
//! Protocol: one JSON object per `\n`-terminated line.
//!
//! | request | response |
//! |---|---|
//! | `{"k":0,"origin":1,"dest":2,"time_bucket":30}` | `{"amount":3.0}` |
//! | unknown key | `{"amount":0.0,"fallback":true}` |
//! | `{"admin":"reload"}` | `{"reloaded":true,"entries":N}` |
//! | anything else | `{"error":"bad_request"}` |
//!
//! Request coordinates are raw query values; the coarsening stored in the
//! dictionary maps them onto entry keys.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::allocator::AllocationDictionary;
use crate::domain::{ClusterKey, Coarsening};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lookup {
    pub amount: f64,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct DictionaryIndex {
    coarsening: Coarsening,
    table: HashMap<(u32, ClusterKey), f64>,
}

impl DictionaryIndex {
    pub fn new(d: &AllocationDictionary) -> Self {
        let table = d
            .entries
            .iter()
            .map(|e| {
                let key = ClusterKey {
                    origin_zone: e.origin,
                    dest_zone: e.dest,
                    time_bucket: e.time_bucket,
                };
                ((e.k, key), e.amount)
            })
            .collect();
        Self {
            coarsening: d.meta.coarsening,
            table,
        }
    }

    pub fn empty() -> Self {
        Self {
            coarsening: Coarsening::identity(),
            table: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::new(&AllocationDictionary::from_json(&text)?))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Amount for a raw query location; unknown keys fall back to 0.
    pub fn lookup(&self, k: u32, origin: u32, dest: u32, time_bucket: u32) -> Lookup {
        let key = self.coarsening.key(origin, dest, time_bucket);
        match self.table.get(&(k, key)) {
            Some(&amount) => Lookup { amount, fallback: false },
            None => Lookup {
                amount: 0.0,
                fallback: true,
            },
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LookupRequest {
    k: u32,
    origin: u32,
    dest: u32,
    time_bucket: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdminRequest {
    admin: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Request {
    Lookup(LookupRequest),
    Admin(AdminRequest),
}

const BAD_REQUEST: &str = r#"{"error":"bad_request"}"#;

/// A dictionary behind an atomically swappable pointer.
pub struct Server {
    path: PathBuf,
    current: RwLock<Arc<DictionaryIndex>>,
}

impl Server {
    /// Load the dictionary at `path`; fails if it is missing or invalid.
    pub fn open(path: &Path) -> Result<Self> {
        let index = DictionaryIndex::load(path)?;
        log::info!("loaded {} dictionary entries from {}", index.len(), path.display());
        Ok(Self {
            path: path.to_path_buf(),
            current: RwLock::new(Arc::new(index)),
        })
    }

    pub fn snapshot(&self) -> Arc<DictionaryIndex> {
        self.current.read().expect("dictionary lock").clone()
    }

    /// Re-read the dictionary file and swap it in; the old one stays live on
    /// failure.
    pub fn reload(&self) -> Result<usize> {
        let index = DictionaryIndex::load(&self.path)?;
        let n = index.len();
        *self.current.write().expect("dictionary lock") = Arc::new(index);
        log::info!("reloaded {n} dictionary entries");
        Ok(n)
    }

    /// Response line (without the newline) for one request line.
    pub fn handle_line(&self, line: &str) -> String {
        match serde_json::from_str::<Request>(line) {
            Ok(Request::Lookup(r)) => {
                let hit = self.snapshot().lookup(r.k, r.origin, r.dest, r.time_bucket);
                serde_json::to_string(&hit).expect("lookup serializes")
            }
            Ok(Request::Admin(a)) if a.admin == "reload" => match self.reload() {
                Ok(n) => format!(r#"{{"reloaded":true,"entries":{n}}}"#),
                Err(e) => serde_json::json!({"error": "reload_failed", "message": e.to_string()}).to_string(),
            },
            _ => BAD_REQUEST.to_string(),
        }
    }

    /// Answer every line of `input` until end of stream.
    pub fn serve_stream<R: BufRead, W: Write>(&self, input: R, mut output: W) -> Result<()> {
        for line in input.lines() {
            let line = line?;
            let resp = self.handle_line(line.trim_end_matches('\r'));
            output.write_all(resp.as_bytes())?;
            output.write_all(b"\n")?;
            output.flush()?;
        }
        Ok(())
    }

    /// Accept connections forever, one thread each.
    pub fn serve_tcp(self: Arc<Self>, listener: TcpListener) -> Result<()> {
        log::info!("listening on {}", listener.local_addr()?);
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let server = self.clone();
            std::thread::spawn(move || {
                if let Err(e) = server.serve_connection(stream) {
                    log::debug!("connection closed: {e}");
                }
            });
        }
        Ok(())
    }

    fn serve_connection(&self, stream: TcpStream) -> Result<()> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        self.serve_stream(reader, stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{DictionaryEntry, DictionaryMeta, DICTIONARY_FORMAT, DICTIONARY_VERSION};
    use crate::domain::TreatmentGrid;

    fn fixture() -> AllocationDictionary {
        AllocationDictionary {
            meta: DictionaryMeta {
                format: DICTIONARY_FORMAT.into(),
                version: DICTIONARY_VERSION,
                solved_at: "t".into(),
                budget: 4.0,
                lambda: 0.0,
                gap_bound: 0.0,
                objective: 0.0,
                total_cost: 0.0,
                grid: TreatmentGrid::new(vec![0.0, 3.0]).unwrap(),
                coarsening: Coarsening {
                    buckets_per_day: 24,
                    bucket_width: 6,
                    zone_block: 1,
                },
            },
            entries: vec![DictionaryEntry {
                k: 1,
                origin: 2,
                dest: 3,
                time_bucket: 1,
                amount: 3.0,
            }],
        }
    }

    #[test]
    fn lookup_applies_coarsening() {
        let idx = DictionaryIndex::new(&fixture());
        // bucket 24*2 + 7 folds to intra-day 7, width 6 -> 1
        assert_eq!(idx.lookup(1, 2, 3, 55), Lookup { amount: 3.0, fallback: false });
        assert_eq!(idx.lookup(0, 2, 3, 55), Lookup { amount: 0.0, fallback: true });
        assert!(DictionaryIndex::empty().lookup(1, 2, 3, 55).fallback);
    }

    #[test]
    fn protocol_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        std::fs::write(&path, fixture().to_canonical_json().unwrap()).unwrap();
        let s = Server::open(&path).unwrap();
        assert_eq!(s.handle_line(r#"{"k":1,"origin":2,"dest":3,"time_bucket":7}"#), r#"{"amount":3.0}"#);
        assert_eq!(
            s.handle_line(r#"{"k":9,"origin":2,"dest":3,"time_bucket":7}"#),
            r#"{"amount":0.0,"fallback":true}"#
        );
        for bad in ["not-json", "{}", r#"{"k":-1,"origin":2,"dest":3,"time_bucket":7}"#, r#"{"admin":"drop"}"#] {
            assert_eq!(s.handle_line(bad), BAD_REQUEST);
        }
        let mut d = fixture();
        d.entries[0].amount = 5.0;
        std::fs::write(&path, d.to_canonical_json().unwrap()).unwrap();
        assert_eq!(s.handle_line(r#"{"admin":"reload"}"#), r#"{"reloaded":true,"entries":1}"#);
        assert_eq!(s.handle_line(r#"{"k":1,"origin":2,"dest":3,"time_bucket":7}"#), r#"{"amount":5.0}"#);
        std::fs::write(&path, "garbage").unwrap();
        assert!(s.handle_line(r#"{"admin":"reload"}"#).contains("reload_failed"));
        assert_eq!(s.handle_line(r#"{"k":1,"origin":2,"dest":3,"time_bucket":7}"#), r#"{"amount":5.0}"#);
    }

    #[test]
    fn missing_dictionary_fails_to_open() {
        assert!(Server::open(Path::new("/nonexistent/dict.json")).is_err());
    }

    #[test]
    fn stream_mode_answers_every_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        std::fs::write(&path, fixture().to_canonical_json().unwrap()).unwrap();
        let s = Server::open(&path).unwrap();
        let input = "not-json\n{\"k\":1,\"origin\":2,\"dest\":3,\"time_bucket\":6}\n";
        let mut out = Vec::new();
        s.serve_stream(input.as_bytes(), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "{\"error\":\"bad_request\"}\n{\"amount\":3.0}\n");
    }
}
