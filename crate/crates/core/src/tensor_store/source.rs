use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

/// Random-access, read-only byte provider backing an archive.
pub trait ByteSource: Send + Sync {
    fn len(&self) -> u64;

    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Path of the underlying file, when there is one.
    fn path(&self) -> Option<&Path> {
        None
    }
}

/// Positional reads from a file; safe to share between threads.
#[derive(Debug)]
pub struct FileSource {
    path: PathBuf,
    len: u64,
    #[cfg(unix)]
    file: File,
    #[cfg(not(unix))]
    file: Mutex<File>,
}

impl FileSource {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let len = file.metadata()?.len();
        Ok(Self {
            path,
            len,
            #[cfg(unix)]
            file,
            #[cfg(not(unix))]
            file: Mutex::new(file),
        })
    }
}

impl ByteSource for FileSource {
    fn len(&self) -> u64 {
        self.len
    }

    #[cfg(unix)]
    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        use std::os::unix::fs::FileExt;
        self.file.read_exact_at(buf, offset)
    }

    #[cfg(not(unix))]
    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        use std::io::{Read, Seek, SeekFrom};
        let mut file = self.file.lock().expect("file lock poisoned");
        file.seek(SeekFrom::Start(offset))?;
        file.read_exact(buf)
    }

    fn path(&self) -> Option<&Path> {
        Some(&self.path)
    }
}

/// In-memory bytes, mostly for tests and synthetic archives.
#[derive(Debug, Clone)]
pub struct MemorySource(Vec<u8>);

impl MemorySource {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }
}

impl ByteSource for MemorySource {
    fn len(&self) -> u64 {
        self.0.len() as u64
    }

    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        let start = usize::try_from(offset)
            .map_err(|_| io::Error::new(io::ErrorKind::UnexpectedEof, "offset past end"))?;
        let end = start
            .checked_add(buf.len())
            .filter(|&end| end <= self.0.len())
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "read past end"))?;
        buf.copy_from_slice(&self.0[start..end]);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadEvent {
    pub offset: u64,
    pub len: u64,
}

impl ReadEvent {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// Wraps another source and records every read, so tests can check which
/// parts of a file were touched and when.
#[derive(Debug)]
pub struct CountingSource<S> {
    inner: S,
    reads: Mutex<Vec<ReadEvent>>,
}

impl<S: ByteSource> CountingSource<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            reads: Mutex::new(Vec::new()),
        }
    }

    pub fn reads(&self) -> Vec<ReadEvent> {
        self.reads.lock().expect("read log poisoned").clone()
    }

    pub fn bytes_read(&self) -> u64 {
        self.reads().iter().map(|r| r.len).sum()
    }

    /// Number of reads that touch bytes at or beyond `boundary`.
    pub fn reads_beyond(&self, boundary: u64) -> usize {
        self.reads().iter().filter(|r| r.end() > boundary).count()
    }
}

impl<S: ByteSource> ByteSource for CountingSource<S> {
    fn len(&self) -> u64 {
        self.inner.len()
    }

    fn read_exact_at(&self, offset: u64, buf: &mut [u8]) -> io::Result<()> {
        self.reads
            .lock()
            .expect("read log poisoned")
            .push(ReadEvent {
                offset,
                len: buf.len() as u64,
            });
        self.inner.read_exact_at(offset, buf)
    }

    fn path(&self) -> Option<&Path> {
        self.inner.path()
    }
}
