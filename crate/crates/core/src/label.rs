//! The five-class screening taxonomy.

use serde::{Deserialize, Serialize};

/// Screening outcome for a machine program.
///
/// `ND` non-defective, `UE` under-extrusion, `OE` over-extrusion,
/// `WP` warping, `ST` stringing. The set is closed and mutually exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    ND,
    UE,
    OE,
    WP,
    ST,
}

impl Label {
    /// Fixed class order used for confusion matrices and reports.
    pub const ALL: [Label; 5] = [Label::ND, Label::UE, Label::OE, Label::WP, Label::ST];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::ND => "ND",
            Label::UE => "UE",
            Label::OE => "OE",
            Label::WP => "WP",
            Label::ST => "ST",
        }
    }

    /// Position in [`Label::ALL`].
    pub fn index(&self) -> usize {
        Label::ALL.iter().position(|l| l == self).unwrap()
    }

    /// Case-insensitive parse; `None` for anything outside the class set.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ND" => Some(Label::ND),
            "UE" => Some(Label::UE),
            "OE" => Some(Label::OE),
            "WP" => Some(Label::WP),
            "ST" => Some(Label::ST),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_is_case_insensitive_and_closed() {
        assert_eq!(Label::parse("ue"), Some(Label::UE));
        assert_eq!(Label::parse(" ST "), Some(Label::ST));
        assert_eq!(Label::parse("XX"), None);
        assert_eq!(Label::parse(""), None);
    }

    #[test]
    fn serde_round_trip_uses_code_names() {
        let json = serde_json::to_string(&Label::WP).unwrap();
        assert_eq!(json, "\"WP\"");
        let back: Label = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Label::WP);
    }
}
