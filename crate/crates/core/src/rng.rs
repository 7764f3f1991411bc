//! Seeded random streams.
//!
//! Every random quantity is drawn from a ChaCha8 stream keyed by the run's
//! master seed. ChaCha is counter based, so each consumer selects its own
//! 64-bit stream id and the draws do not depend on how work is scheduled
//! across threads.
//!
//! Stream ids:
//!
//! | id                                   | consumer                              |
//! |--------------------------------------|---------------------------------------|
//! | `0x01`                               | measurement noise                     |
//! | `0x02`                               | initial plant state `x(0)`            |
//! | `0x03`                               | initial observer offsets              |
//! | `0x100 + i`                          | attack signal on sensor `i` (0-based) |
//! | `CERT << 56 \| member << 32 \| trial` | certification trial                   |
//! | `VALIDATE << 56 \| member << 32 \| trial` | certificate validation trial       |
//! | `DESIGN << 56 \| member << 32 \| n`  | gain search candidate                 |

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const NOISE: u64 = 0x01;
pub const INITIAL_STATE: u64 = 0x02;
pub const INITIAL_OBSERVER: u64 = 0x03;
pub const ATTACK_BASE: u64 = 0x100;

pub const CERT: u64 = 0x10;
pub const VALIDATE: u64 = 0x11;
pub const DESIGN: u64 = 0x12;

/// Opens stream `stream` under `master`.
pub fn stream(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Stream id for a per-member, per-trial consumer.
pub fn trial_stream(kind: u64, member: usize, trial: usize) -> u64 {
    (kind << 56) | ((member as u64 & 0xff_ffff) << 32) | (trial as u64 & 0xffff_ffff)
}

/// Uniform draw on `[0, 1)` using the top 53 bits of one 64-bit word.
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw on `[lo, hi)`. Returns `lo` when the interval is empty.
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    let v = lo + (hi - lo) * unit(rng);
    // guard the rounding edge so draws never reach `hi`
    if v >= hi {
        lo
    } else {
        v
    }
}

/// Uniform draw on the symmetric interval `(-b, b)`, never touching the ends.
pub fn symmetric(rng: &mut impl RngCore, b: f64) -> f64 {
    loop {
        let v = uniform(rng, -b, b);
        if v > -b || b == 0.0 {
            return v;
        }
    }
}

/// Serde adapter for seeds in TOML, whose integers are signed 64-bit:
/// values above `i64::MAX` are written as decimal strings.
pub mod seed_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(u64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => Ok(v),
            Repr::Text(t) => t.trim().parse().map_err(de::Error::custom),
        }
    }
}
