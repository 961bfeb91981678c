//! JSON helpers. Every document this crate writes has its object keys sorted.

use serde::Serialize;

/// Compact JSON with sorted keys.
pub fn to_sorted_string<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&v).expect("JSON value always serializes")
}

/// Indented JSON with sorted keys and a trailing newline.
pub fn to_sorted_pretty<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable value");
    let mut s = serde_json::to_string_pretty(&v).expect("JSON value always serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    #[test]
    fn keys_come_out_sorted() {
        #[derive(serde::Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        assert_eq!(super::to_sorted_string(&S { zeta: 1, alpha: 2 }), r#"{"alpha":2,"zeta":1}"#);
    }
}
