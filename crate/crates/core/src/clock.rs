//! Time handling shared by every module. All timestamps are UTC with
//! millisecond precision.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        truncate_ms(Utc::now())
    }
}

/// A clock that only moves when told to. Used by tests and the simulator.
#[derive(Debug)]
pub struct ManualClock {
    millis: AtomicI64,
}

impl ManualClock {
    pub fn new(start: Timestamp) -> Self {
        ManualClock { millis: AtomicI64::new(start.timestamp_millis()) }
    }

    pub fn set(&self, t: Timestamp) {
        self.millis.store(t.timestamp_millis(), Ordering::SeqCst);
    }

    pub fn advance(&self, d: chrono::Duration) {
        self.millis.fetch_add(d.num_milliseconds(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        from_millis(self.millis.load(Ordering::SeqCst))
    }
}

pub fn from_millis(ms: i64) -> Timestamp {
    Utc.timestamp_millis_opt(ms).single().expect("timestamp in range")
}

pub fn truncate_ms(t: Timestamp) -> Timestamp {
    from_millis(t.timestamp_millis())
}

/// Canonical wire rendering: `2020-12-23T23:54:50.727Z`.
pub fn format_ms(t: &Timestamp) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_rfc3339(s: &str) -> Option<Timestamp> {
    DateTime::parse_from_rfc3339(s).ok().map(|t| truncate_ms(t.with_timezone(&Utc)))
}

/// Serde adapter that writes timestamps in the canonical millisecond form.
pub mod serde_ms {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{format_ms, parse_rfc3339, Timestamp};

    pub fn serialize<S: Serializer>(t: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ms(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let raw = String::deserialize(d)?;
        parse_rfc3339(&raw).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {raw:?}")))
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        use super::super::{format_ms, parse_rfc3339, Timestamp};

        pub fn serialize<S: Serializer>(t: &Option<Timestamp>, s: S) -> Result<S::Ok, S::Error> {
            match t {
                Some(t) => s.serialize_some(&format_ms(t)),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Timestamp>, D::Error> {
            let raw = Option::<String>::deserialize(d)?;
            raw.map(|r| {
                parse_rfc3339(&r).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {r:?}")))
            })
            .transpose()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_format_round_trips() {
        let t = parse_rfc3339("2020-12-23T23:54:50.727Z").unwrap();
        assert_eq!(format_ms(&t), "2020-12-23T23:54:50.727Z");
        let whole = parse_rfc3339("2020-12-23T23:54:50Z").unwrap();
        assert_eq!(format_ms(&whole), "2020-12-23T23:54:50.000Z");
    }

    #[test]
    fn offsets_normalize_to_utc() {
        let t = parse_rfc3339("2021-01-01T01:00:00+01:00").unwrap();
        assert_eq!(format_ms(&t), "2021-01-01T00:00:00.000Z");
    }

    #[test]
    fn manual_clock_advances() {
        let c = ManualClock::new(from_millis(0));
        c.advance(chrono::Duration::seconds(90));
        assert_eq!(c.now().timestamp(), 90);
    }
}
