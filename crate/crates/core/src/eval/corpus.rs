//! Corpus files and slices of them.

use std::fmt;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::EvalError;

/// `PATH` or `PATH:OFFSET:LIMIT` (bytes). A path that itself ends in two
/// `:number` groups has to be given with an explicit `:0:` suffix pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub path: PathBuf,
    pub offset: u64,
    pub limit: Option<u64>,
}

impl CorpusSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            offset: 0,
            limit: None,
        }
    }

    pub fn slice(mut self, offset: u64, limit: u64) -> Self {
        self.offset = offset;
        self.limit = Some(limit);
        self
    }

    /// File stem, used to label report rows.
    pub fn name(&self) -> String {
        self.path
            .file_name()
            .map_or_else(|| self.path.display().to_string(), |n| n.to_string_lossy().into_owned())
    }

    pub fn load(&self) -> Result<Vec<u8>, EvalError> {
        let io = |source| EvalError::Io {
            path: self.path.clone(),
            source,
        };
        let mut file = File::open(&self.path).map_err(io)?;
        file.seek(SeekFrom::Start(self.offset)).map_err(io)?;
        let mut data = Vec::new();
        match self.limit {
            Some(n) => file.take(n).read_to_end(&mut data),
            None => file.read_to_end(&mut data),
        }
        .map_err(io)?;
        Ok(data)
    }
}

impl FromStr for CorpusSpec {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() {
            return Err(EvalError::Corpus("empty corpus path".into()));
        }
        let mut parts = s.rsplitn(3, ':');
        let last = parts.next();
        let mid = parts.next();
        let head = parts.next();
        if let (Some(limit), Some(offset), Some(path)) = (last, mid, head) {
            if let (Ok(offset), Ok(limit)) = (offset.parse::<u64>(), limit.parse::<u64>()) {
                if path.is_empty() {
                    return Err(EvalError::Corpus(format!("no path in {s:?}")));
                }
                return Ok(Self::new(path).slice(offset, limit));
            }
        }
        Ok(Self::new(s))
    }
}

impl fmt::Display for CorpusSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.path.display())?;
        if let Some(limit) = self.limit {
            write!(f, ":{}:{limit}", self.offset)?;
        }
        Ok(())
    }
}

/// Equal-sized leading slices of several files, concatenated in order.
#[derive(Debug, Clone)]
pub struct CrossDomain {
    pub data: Vec<u8>,
    /// Byte range of each part within `data`.
    pub parts: Vec<(String, std::ops::Range<usize>)>,
}

impl CrossDomain {
    pub fn load<P: AsRef<Path>>(files: &[P], bytes_per_file: usize) -> Result<Self, EvalError> {
        let mut data = Vec::new();
        let mut parts = Vec::new();
        for f in files {
            let spec = CorpusSpec::new(f.as_ref()).slice(0, bytes_per_file as u64);
            let start = data.len();
            data.extend(spec.load()?);
            parts.push((spec.name(), start..data.len()));
        }
        Ok(Self { data, parts })
    }
}

/// Location of the enwik8 benchmark file: `$WPOE_ENWIK8`, else `data/enwik8`
/// under `root`.
pub fn locate_enwik8(root: &Path) -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("WPOE_ENWIK8") {
        let p = PathBuf::from(p);
        return p.is_file().then_some(p);
    }
    let p = root.join("data").join("enwik8");
    p.is_file().then_some(p)
}
