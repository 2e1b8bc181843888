//! Byte accounting for transient buffers.
//!
//! Operations charge the ledger for every scratch buffer they allocate and
//! release it before returning, so the peak is a deterministic measure of
//! auxiliary memory that does not depend on the system allocator.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct MemoryLedger {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current_bytes(&self) -> usize {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn charge(&self, bytes: usize) {
        if bytes == 0 {
            return;
        }
        let now = self.current.fetch_add(bytes, Ordering::SeqCst) + bytes;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    pub fn release(&self, bytes: usize) -> Result<()> {
        self.current
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |cur| cur.checked_sub(bytes))
            .map(|_| ())
            .map_err(|current| Error::UnderflowRelease {
                requested: bytes,
                current,
            })
    }

    /// Charge `bytes` and release them when the returned guard drops.
    pub fn reserve(&self, bytes: usize) -> Reservation<'_> {
        self.charge(bytes);
        Reservation {
            ledger: self,
            bytes,
        }
    }

    /// Charge for `len` elements of `T`.
    pub fn reserve_elems<T>(&self, len: usize) -> Reservation<'_> {
        self.reserve(len * std::mem::size_of::<T>())
    }

    /// Reset the peak to the current balance.
    pub fn reset_peak(&self) {
        self.peak
            .store(self.current.load(Ordering::SeqCst), Ordering::SeqCst);
    }
}

/// RAII charge on a [`MemoryLedger`].
#[must_use = "dropping a reservation releases it immediately"]
#[derive(Debug)]
pub struct Reservation<'a> {
    ledger: &'a MemoryLedger,
    bytes: usize,
}

impl Reservation<'_> {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        // a reservation always releases exactly what it charged
        let _ = self.ledger.release(self.bytes);
    }
}

/// A value whose backing buffer stays charged to a ledger while it is alive.
#[derive(Debug)]
pub struct Tracked<'a, V> {
    value: V,
    _charge: Reservation<'a>,
}

impl<'a, V> Tracked<'a, V> {
    pub fn new(value: V, charge: Reservation<'a>) -> Self {
        Self {
            value,
            _charge: charge,
        }
    }

    /// Take the value out, releasing its charge.
    pub fn into_inner(self) -> V {
        self.value
    }
}

impl<V> Deref for Tracked<'_, V> {
    type Target = V;

    fn deref(&self) -> &V {
        &self.value
    }
}

impl<V> DerefMut for Tracked<'_, V> {
    fn deref_mut(&mut self) -> &mut V {
        &mut self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn charge_release_sequence() {
        let l = MemoryLedger::new();
        l.charge(100);
        l.charge(50);
        l.release(150).unwrap();
        assert_eq!(l.current_bytes(), 0);
        assert_eq!(l.peak_bytes(), 150);
    }

    #[test]
    fn zero_charge_is_noop() {
        let l = MemoryLedger::new();
        l.charge(0);
        assert_eq!((l.current_bytes(), l.peak_bytes()), (0, 0));
    }

    #[test]
    fn peak_is_history_max() {
        let l = MemoryLedger::new();
        l.charge(100);
        l.release(50).unwrap();
        l.charge(100);
        assert_eq!(l.peak_bytes(), 150);
        assert_eq!(l.current_bytes(), 150);
    }

    #[test]
    fn release_past_balance_fails() {
        let l = MemoryLedger::new();
        l.charge(10);
        assert_eq!(
            l.release(11),
            Err(Error::UnderflowRelease {
                requested: 11,
                current: 10
            })
        );
        assert_eq!(l.current_bytes(), 10);
    }

    #[test]
    fn reservation_releases_on_drop() {
        let l = MemoryLedger::new();
        {
            let _a = l.reserve(64);
            let b = Tracked::new(vec![0u8; 4], l.reserve(32));
            assert_eq!(l.current_bytes(), 96);
            let _ = b.into_inner();
            assert_eq!(l.current_bytes(), 64);
        }
        assert_eq!(l.current_bytes(), 0);
        assert_eq!(l.peak_bytes(), 96);
    }

    #[test]
    fn concurrent_updates_balance() {
        let l = MemoryLedger::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    for _ in 0..1000 {
                        let _r = l.reserve(8);
                    }
                });
            }
        });
        assert_eq!(l.current_bytes(), 0);
        assert!(l.peak_bytes() >= 8 && l.peak_bytes() <= 32);
    }

    proptest! {
        #[test]
        fn peak_never_below_current(ops in proptest::collection::vec((any::<bool>(), 0usize..1000), 0..50)) {
            let l = MemoryLedger::new();
            let mut held = Vec::new();
            for (charge, bytes) in ops {
                if charge || held.is_empty() {
                    l.charge(bytes);
                    held.push(bytes);
                } else {
                    let b = held.pop().unwrap();
                    l.release(b).unwrap();
                }
                prop_assert!(l.peak_bytes() >= l.current_bytes());
            }
            for b in held.drain(..) {
                l.release(b).unwrap();
            }
            prop_assert_eq!(l.current_bytes(), 0);
        }
    }
}
