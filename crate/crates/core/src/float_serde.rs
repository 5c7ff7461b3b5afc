//! JSON has no infinities; these helpers write them as the strings `"inf"`
//! and `"-inf"` and accept either form back.

use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_infinite() {
        serializer.serialize_str(if *value > 0.0 { "inf" } else { "-inf" })
    } else {
        serializer.serialize_f64(*value)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    struct ExtendedFloat;

    impl Visitor<'_> for ExtendedFloat {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number, \"inf\" or \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
            }
        }
    }

    deserializer.deserialize_any(ExtendedFloat)
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Wrapped(#[serde(with = "super")] f64);

    #[test]
    fn round_trip() {
        for v in [f64::INFINITY, f64::NEG_INFINITY, 0.0, -2.5, 1e-300, 4.498] {
            let text = serde_json::to_string(&Wrapped(v)).unwrap();
            assert_eq!(
                serde_json::from_str::<Wrapped>(&text).unwrap(),
                Wrapped(v),
                "{text}"
            );
        }
        assert_eq!(
            serde_json::to_string(&Wrapped(f64::INFINITY)).unwrap(),
            "\"inf\""
        );
    }
}
