//! Time and identifier sources.
//!
//! Both are injected so that pipeline runs can be replayed bit-for-bit in
//! tests: a [`ManualClock`] plus a seeded [`IdSource`] make every stored
//! document deterministic.

use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration, Utc};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Clone)]
pub struct ManualClock {
    at: Arc<Mutex<DateTime<Utc>>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        Self {
            at: Arc::new(Mutex::new(start)),
        }
    }

    pub fn set(&self, at: DateTime<Utc>) {
        *self.at.lock().unwrap() = at;
    }

    pub fn advance(&self, by: Duration) {
        let mut at = self.at.lock().unwrap();
        *at += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.at.lock().unwrap()
    }
}

/// Generator for opaque identifiers (UUID-formatted strings).
pub struct IdSource {
    rng: Mutex<Option<ChaCha8Rng>>,
}

impl IdSource {
    /// Fresh random v4 identifiers.
    pub fn random() -> Self {
        Self {
            rng: Mutex::new(None),
        }
    }

    /// Reproducible identifiers drawn from a seeded stream.
    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: Mutex::new(Some(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    /// An independent source continuing from the current state, so a dry run
    /// can mint the same identifiers a real run will.
    pub fn fork(&self) -> Self {
        Self {
            rng: Mutex::new(self.rng.lock().unwrap().clone()),
        }
    }

    pub fn next(&self) -> String {
        let mut guard = self.rng.lock().unwrap();
        match guard.as_mut() {
            None => uuid::Uuid::new_v4().to_string(),
            Some(rng) => {
                let mut bytes = [0u8; 16];
                rng.fill_bytes(&mut bytes);
                uuid::Builder::from_random_bytes(bytes)
                    .into_uuid()
                    .to_string()
            }
        }
    }
}

impl std::fmt::Debug for IdSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let seeded = self.rng.lock().map(|g| g.is_some()).unwrap_or(false);
        f.debug_struct("IdSource").field("seeded", &seeded).finish()
    }
}

/// Declares a string-backed identifier newtype.
macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(
            Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash,
            serde::Serialize, serde::Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

pub(crate) use string_id;
