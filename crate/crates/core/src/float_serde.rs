//! Serde adapter for `f64` values that may be infinite.
//!
//! JSON has no representation for infinities, so they are written as the
//! strings `"inf"` and `"-inf"`. Finite values stay plain numbers.

use serde::{Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
    if value.is_finite() {
        serializer.serialize_f64(*value)
    } else if value.is_nan() {
        serializer.serialize_str("nan")
    } else if *value > 0.0 {
        serializer.serialize_str("inf")
    } else {
        serializer.serialize_str("-inf")
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr {
    Num(f64),
    Text(String),
}

pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    match Repr::deserialize(deserializer)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(s) => {
            parse(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid number `{s}`")))
        }
    }
}

/// Parses a float, accepting `inf`, `+inf`, `-inf`, `infinity` and `nan`.
pub fn parse(text: &str) -> Option<f64> {
    match text.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" | "infinity" | "+infinity" => Some(f64::INFINITY),
        "-inf" | "-infinity" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        other => other.parse().ok(),
    }
}

/// Display form matching what `serialize` writes for non-finite values.
pub fn display(value: f64) -> String {
    if value.is_finite() {
        value.to_string()
    } else if value.is_nan() {
        "nan".into()
    } else if value > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// The same encoding for every element of a `Vec<f64>`.
pub mod seq {
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    struct Elem(#[serde(with = "super")] f64);

    pub fn serialize<S: Serializer>(values: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(values.len()))?;
        for v in values {
            if v.is_finite() {
                seq.serialize_element(v)?;
            } else {
                seq.serialize_element(&super::display(*v))?;
            }
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        let elems = Vec::<Elem>::deserialize(deserializer)?;
        Ok(elems.into_iter().map(|e| e.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Wrap {
        #[serde(with = "super")]
        x: f64,
    }

    #[test]
    fn infinities_round_trip() {
        for x in [1.5, -2.0, f64::INFINITY, f64::NEG_INFINITY] {
            let s = serde_json::to_string(&Wrap { x }).unwrap();
            let back: Wrap = serde_json::from_str(&s).unwrap();
            assert_eq!(back.x, x);
        }
        assert_eq!(
            serde_json::to_string(&Wrap { x: f64::INFINITY }).unwrap(),
            r#"{"x":"inf"}"#
        );
    }

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct WrapSeq {
        #[serde(with = "super::seq")]
        xs: Vec<f64>,
    }

    #[test]
    fn sequences_round_trip() {
        let w = WrapSeq {
            xs: vec![f64::NEG_INFINITY, -1.0, 0.5],
        };
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"xs":["-inf",-1.0,0.5]}"#);
        assert_eq!(serde_json::from_str::<WrapSeq>(&s).unwrap(), w);
    }
}
