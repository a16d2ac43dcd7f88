//! File-backed class registry mapping CLSIDs to the servers implementing them.
//!
//! The file is UTF-8 and line oriented, one section per class:
//!
//! ```text
//! [{C56A4180-65AA-42EC-A945-5FD21DEC0538}]
//! type=local
//! path=./bin/clock-server
//! name=Clock Component
//! version=1
//! ```
//!
//! Remote sections use `host=<host>:<port>` instead of `path` and may carry
//! `remote_clsid`. Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{ComError, Result};
use crate::guid::Guid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServerType {
    InProcess,
    Local,
    Remote,
}

impl ServerType {
    pub fn as_str(self) -> &'static str {
        match self {
            ServerType::InProcess => "inproc",
            ServerType::Local => "local",
            ServerType::Remote => "remote",
        }
    }
}

impl fmt::Display for ServerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServerType {
    type Err = ComError;

    fn from_str(s: &str) -> Result<ServerType> {
        match s {
            "inproc" => Ok(ServerType::InProcess),
            "local" => Ok(ServerType::Local),
            "remote" => Ok(ServerType::Remote),
            other => Err(ComError::InvalidRegistration(format!(
                "unknown server type {other:?}"
            ))),
        }
    }
}

/// Location prefix naming an entry of the built-in component catalog.
pub const BUILTIN_PREFIX: &str = "builtin:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerRegistration {
    pub clsid: Guid,
    pub server_type: ServerType,
    /// Module path or `builtin:<name>` (inproc), executable path (local), or
    /// `host:port` of a peer SCM (remote).
    pub location: String,
    /// Class to request from the peer; remote registrations only.
    pub remote_clsid: Option<Guid>,
    pub friendly_name: String,
    pub component_version: u32,
}

impl ServerRegistration {
    pub fn new(clsid: Guid, server_type: ServerType, location: impl Into<String>) -> Self {
        ServerRegistration {
            clsid,
            server_type,
            location: location.into(),
            remote_clsid: None,
            friendly_name: String::new(),
            component_version: 1,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.friendly_name = name.into();
        self
    }

    /// The CLSID to ask a remote peer for.
    pub fn effective_remote_clsid(&self) -> Guid {
        self.remote_clsid.unwrap_or(self.clsid)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ComError::InvalidRegistration(m));
        if self.location.is_empty() {
            return invalid("location is empty".into());
        }
        for (what, v) in [("location", &self.location), ("name", &self.friendly_name)] {
            if v.contains(['\n', '\r']) {
                return invalid(format!("{what} contains a line break"));
            }
        }
        if self.component_version == 0 {
            return invalid("version must be at least 1".into());
        }
        if self.remote_clsid.is_some() && self.server_type != ServerType::Remote {
            return invalid("remote_clsid is only valid for remote servers".into());
        }
        if self.server_type == ServerType::Remote {
            parse_host_port(&self.location).map_err(ComError::InvalidRegistration)?;
        }
        Ok(())
    }
}

/// Splits `host:port`, requiring exactly one colon and a port in 1..=65535.
pub fn parse_host_port(location: &str) -> std::result::Result<(&str, u16), String> {
    let mut parts = location.split(':');
    let (Some(host), Some(port), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(format!("{location:?} is not host:port"));
    };
    if host.is_empty() {
        return Err(format!("{location:?} has an empty host"));
    }
    if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
        return Err(format!("{location:?} has a non-decimal port"));
    }
    match port.parse::<u16>() {
        Ok(p) if p > 0 => Ok((host, p)),
        _ => Err(format!("{location:?} has a port outside 1-65535")),
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    entries: BTreeMap<Guid, ServerRegistration>,
    backing_path: PathBuf,
    dirty: bool,
}

impl PartialEq for Registry {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

impl Registry {
    pub fn empty(backing_path: impl Into<PathBuf>) -> Registry {
        Registry {
            entries: BTreeMap::new(),
            backing_path: backing_path.into(),
            dirty: false,
        }
    }

    /// Loads the registry at `path`; a missing file is an empty registry.
    pub fn load(path: impl AsRef<Path>) -> Result<Registry> {
        let path = path.as_ref();
        match fs::read_to_string(path) {
            Ok(text) => {
                let mut reg = Registry::parse(&text)?;
                reg.backing_path = path.to_path_buf();
                Ok(reg)
            }
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(Registry::empty(path)),
            Err(e) => Err(e.into()),
        }
    }

    pub fn parse(text: &str) -> Result<Registry> {
        let mut entries = BTreeMap::new();
        let mut section: Option<Section> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed.starts_with('[') {
                if let Some(done) = section.take() {
                    let r = done.finish()?;
                    entries.insert(r.clsid, r);
                }
                let inner = trimmed
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| corrupt(line_no, "unterminated section header"))?;
                let clsid = Guid::parse(inner.trim())
                    .map_err(|_| corrupt(line_no, &format!("bad CLSID {inner:?}")))?;
                if entries.contains_key(&clsid) {
                    return Err(corrupt(line_no, &format!("duplicate section {clsid}")));
                }
                section = Some(Section::new(clsid, line_no));
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(corrupt(line_no, "expected key=value"));
            };
            let Some(current) = section.as_mut() else {
                return Err(corrupt(line_no, "key outside of a section"));
            };
            current.set(key.trim(), value, line_no)?;
        }
        if let Some(done) = section {
            let r = done.finish()?;
            entries.insert(r.clsid, r);
        }
        Ok(Registry {
            entries,
            backing_path: PathBuf::new(),
            dirty: false,
        })
    }

    /// Canonical file text: sections in ascending CLSID order, separated by
    /// blank lines. An empty registry renders as the empty string.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.entries.values().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", r.clsid));
            out.push_str(&format!("type={}\n", r.server_type));
            let key = if r.server_type == ServerType::Remote {
                "host"
            } else {
                "path"
            };
            out.push_str(&format!("{key}={}\n", r.location));
            if let Some(rc) = r.remote_clsid {
                out.push_str(&format!("remote_clsid={rc}\n"));
            }
            out.push_str(&format!("name={}\n", r.friendly_name));
            out.push_str(&format!("version={}\n", r.component_version));
        }
        out
    }

    /// Atomically replaces the backing file with the current state.
    pub fn save(&mut self) -> Result<()> {
        let path = &self.backing_path;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let file_name = path
            .file_name()
            .ok_or_else(|| ComError::IoFailure(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(
            ".{}.tmp-{}",
            file_name.to_string_lossy(),
            std::process::id()
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(self.render().as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        if let Err(e) = write() {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        self.dirty = false;
        Ok(())
    }

    pub fn backing_path(&self) -> &Path {
        &self.backing_path
    }

    pub fn set_backing_path(&mut self, path: impl Into<PathBuf>) {
        self.backing_path = path.into();
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts or replaces the entry for `r.clsid`.
    pub fn register_class(&mut self, r: ServerRegistration) -> Result<()> {
        r.validate()?;
        self.entries.insert(r.clsid, r);
        self.dirty = true;
        Ok(())
    }

    pub fn unregister_class(&mut self, clsid: &Guid) -> Result<()> {
        self.entries
            .remove(clsid)
            .ok_or(ComError::ClassNotRegistered(*clsid))?;
        self.dirty = true;
        Ok(())
    }

    pub fn lookup_class(&self, clsid: &Guid) -> Result<&ServerRegistration> {
        self.entries
            .get(clsid)
            .ok_or(ComError::ClassNotRegistered(*clsid))
    }

    /// All entries in ascending CLSID order.
    pub fn list_classes(&self) -> impl Iterator<Item = &ServerRegistration> {
        self.entries.values()
    }
}

fn corrupt(line: usize, reason: &str) -> ComError {
    ComError::RegistryCorrupt {
        line,
        reason: reason.to_owned(),
    }
}

struct Section {
    clsid: Guid,
    header_line: usize,
    server_type: Option<ServerType>,
    path: Option<String>,
    host: Option<String>,
    remote_clsid: Option<Guid>,
    name: Option<String>,
    version: Option<u32>,
}

impl Section {
    fn new(clsid: Guid, header_line: usize) -> Section {
        Section {
            clsid,
            header_line,
            server_type: None,
            path: None,
            host: None,
            remote_clsid: None,
            name: None,
            version: None,
        }
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "type" => {
                let t = value
                    .trim()
                    .parse()
                    .map_err(|_| corrupt(line, &format!("bad type {value:?}")))?;
                self.server_type = Some(t);
            }
            "path" => self.path = Some(value.to_owned()),
            "host" => self.host = Some(value.trim().to_owned()),
            "remote_clsid" => {
                let g = Guid::parse(value.trim())
                    .map_err(|_| corrupt(line, &format!("bad remote_clsid {value:?}")))?;
                self.remote_clsid = Some(g);
            }
            "name" => self.name = Some(value.to_owned()),
            "version" => {
                let v = value
                    .trim()
                    .parse()
                    .map_err(|_| corrupt(line, &format!("bad version {value:?}")))?;
                self.version = Some(v);
            }
            other => log::warn!("registry line {line}: ignoring unknown key {other:?}"),
        }
        Ok(())
    }

    fn finish(self) -> Result<ServerRegistration> {
        let line = self.header_line;
        let server_type = self
            .server_type
            .ok_or_else(|| corrupt(line, "missing required key `type`"))?;
        let location = match server_type {
            ServerType::Remote => self
                .host
                .ok_or_else(|| corrupt(line, "missing required key `host`"))?,
            _ => self
                .path
                .ok_or_else(|| corrupt(line, "missing required key `path`"))?,
        };
        let r = ServerRegistration {
            clsid: self.clsid,
            server_type,
            location,
            remote_clsid: self.remote_clsid,
            friendly_name: self.name.unwrap_or_default(),
            component_version: self.version.unwrap_or(1),
        };
        r.validate().map_err(|e| corrupt(line, &e.to_string()))?;
        Ok(r)
    }
}
