use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

/// Render lab values as "`<column>` of the `<object>` is `<value>`." sentences,
/// space-joined in input order. Columns without a value are skipped.
pub fn textualize_labs(columns: &[(&str, Option<&str>)], object: &str) -> String {
    columns
        .iter()
        .filter_map(|(name, value)| value.map(|v| format!("{} of the {} is {}.", name, object, v)))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template() {
        assert_eq!(textualize_labs(&[("Sodium", Some("140"))], "patient"), "Sodium of the patient is 140.");
        assert_eq!(textualize_labs(&[], "patient"), "");
        assert_eq!(
            textualize_labs(&[("Sodium", Some("140")), ("Potassium", None)], "patient"),
            "Sodium of the patient is 140."
        );
        assert_eq!(
            textualize_labs(&[("A", Some("1")), ("B", Some("2"))], "subject"),
            "A of the subject is 1. B of the subject is 2."
        );
    }
}
