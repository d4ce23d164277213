use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

#[derive(Default)]
struct Table {
    forward: HashMap<Vec<u8>, Vec<u8>>,
    used: HashSet<Vec<u8>>,
}

/// Keyed, injective pseudonym assignment for address fields.
///
/// A value's pseudonym is the truncated SHA-256 of `key || width || counter || value`,
/// with the counter bumped until the candidate is neither the original value nor
/// a pseudonym already handed out. Assignment is insert-if-absent under a lock,
/// so the map can be shared across worker threads.
pub struct AnonymizationMap {
    key: [u8; 32],
    tables: Mutex<HashMap<usize, Table>>,
}

impl AnonymizationMap {
    pub fn new(key: [u8; 32]) -> Self {
        Self {
            key,
            tables: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_seed(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"flownas-anon-key");
        h.update(seed.to_le_bytes());
        Self::new(h.finalize().into())
    }

    pub fn pseudonym(&self, value: &[u8]) -> Vec<u8> {
        let width = value.len();
        let mut tables = self.tables.lock().expect("anonymization map poisoned");
        let table = tables.entry(width).or_default();
        if let Some(p) = table.forward.get(value) {
            return p.clone();
        }
        let mut counter: u64 = 0;
        let candidate = loop {
            let mut h = Sha256::new();
            h.update(self.key);
            h.update((width as u32).to_le_bytes());
            h.update(counter.to_le_bytes());
            h.update(value);
            let digest = h.finalize();
            let c = digest[..width.min(32)].to_vec();
            if c != value && !table.used.contains(&c) {
                break c;
            }
            counter += 1;
        };
        table.used.insert(candidate.clone());
        table.forward.insert(value.to_vec(), candidate.clone());
        candidate
    }

    /// Rewrites `field` in place with its pseudonym.
    pub fn rewrite(&self, field: &mut [u8]) {
        let p = self.pseudonym(field);
        field.copy_from_slice(&p);
    }

    pub fn assigned(&self, width: usize) -> usize {
        self.tables
            .lock()
            .expect("anonymization map poisoned")
            .get(&width)
            .map_or(0, |t| t.forward.len())
    }
}
