use std::sync::atomic::{AtomicUsize, Ordering};

/// Counts tensor buffers that are alive at the same time and remembers the
/// high-water mark.
#[derive(Debug, Default)]
pub struct ResidencyGauge {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ResidencyGauge {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers one resident buffer until the token is dropped.
    pub fn hold(&self) -> ResidencyToken<'_> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        ResidencyToken(self)
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

#[must_use]
#[derive(Debug)]
pub struct ResidencyToken<'a>(&'a ResidencyGauge);

impl Drop for ResidencyToken<'_> {
    fn drop(&mut self) {
        self.0.current.fetch_sub(1, Ordering::SeqCst);
    }
}

pub(crate) fn hold(gauge: Option<&ResidencyGauge>) -> Option<ResidencyToken<'_>> {
    gauge.map(ResidencyGauge::hold)
}
