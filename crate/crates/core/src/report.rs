//! Shared formatting for plot-ready output.

/// CSV number with 12 significant digits.
pub fn csv_num(v: f64) -> String {
    format!("{v:.11e}")
}

/// Serde adapter for reals that may be infinite: non-finite values are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod extended {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("expected a number or inf, got `{other}`"))),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[test]
    fn twelve_significant_digits() {
        assert_eq!(super::csv_num(1.0 / 3.0), "3.33333333333e-1");
    }

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Wrap {
        #[serde(with = "super::extended")]
        p: f64,
    }

    #[test]
    fn infinite_reals_round_trip() {
        let text = serde_json::to_string(&Wrap { p: f64::INFINITY }).unwrap();
        assert_eq!(text, r#"{"p":"inf"}"#);
        assert_eq!(serde_json::from_str::<Wrap>(&text).unwrap().p, f64::INFINITY);
        assert_eq!(serde_json::from_str::<Wrap>(r#"{"p":4.0}"#).unwrap(), Wrap { p: 4.0 });
    }
}
