//! Garment-layout attribute vector and its formatted-text codec. The text
//! form is the user-facing conditioning language: five question/answer pairs,
//! "question: answer" joined by "; ".

use crate::error::{Result, VtoError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SleeveType {
    NotApplicable,
    Sleeveless,
    Short,
    Middle,
    Long,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum SleeveRolled {
    NotApplicable,
    NotLong,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TopTucked {
    NotApplicable,
    NoTop,
    Undetermined,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum HasOuter {
    NotApplicable,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum OuterClosed {
    NotApplicable,
    NoOuter,
    Undetermined,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AttributeVector {
    pub sleeve_type: SleeveType,
    pub sleeve_rolled: SleeveRolled,
    pub top_tucked: TopTucked,
    pub has_outer: HasOuter,
    pub outer_closed: OuterClosed,
}

pub const NUM_ATTRIBUTES: usize = 5;

pub const QUESTIONS: [&str; NUM_ATTRIBUTES] = [
    "What is the type of the sleeve?",
    "Is the sleeve rolled up?",
    "Is the top garment tucked in?",
    "Is the person wearing outer top?",
    "Is the outer top closed (e.g. zipper up or button on)?",
];

pub const ANSWERS: [&[&str]; NUM_ATTRIBUTES] = [
    &[
        "Not applicable",
        "Sleeveless",
        "Short sleeve",
        "Middle sleeve",
        "Long sleeve",
    ],
    &["Not applicable", "Sleeve type is not long", "Yes", "No"],
    &[
        "Not applicable",
        "Not wearing top garment",
        "Can not determine",
        "Yes",
        "No",
    ],
    &["Not applicable", "Yes", "No"],
    &[
        "Not applicable",
        "Not wearing outer top",
        "Can not determine",
        "Yes",
        "No",
    ],
];

/// Answer-list sizes per field; the reserved null index used under
/// classifier-free-guidance dropout is `FIELD_SIZES[f]` (one past the end).
pub const FIELD_SIZES: [usize; NUM_ATTRIBUTES] = [5, 4, 5, 3, 5];

impl AttributeVector {
    pub const ALL_NA: AttributeVector = AttributeVector {
        sleeve_type: SleeveType::NotApplicable,
        sleeve_rolled: SleeveRolled::NotApplicable,
        top_tucked: TopTucked::NotApplicable,
        has_outer: HasOuter::NotApplicable,
        outer_closed: OuterClosed::NotApplicable,
    };

    /// Cross-field consistency: the rolled-up state must agree with the
    /// sleeve type, and the outer-closed state with the outer flag.
    pub fn validate(&self) -> Result<()> {
        let rolled_ok = match self.sleeve_type {
            SleeveType::NotApplicable => self.sleeve_rolled == SleeveRolled::NotApplicable,
            SleeveType::Sleeveless | SleeveType::Short | SleeveType::Middle => {
                self.sleeve_rolled == SleeveRolled::NotLong
            }
            SleeveType::Long => {
                matches!(self.sleeve_rolled, SleeveRolled::Yes | SleeveRolled::No)
            }
        };
        if !rolled_ok {
            return Err(VtoError::Validation(format!(
                "sleeve_rolled {:?} inconsistent with sleeve_type {:?} (the sleeve can only be rolled when the sleeve type is long)",
                self.sleeve_rolled, self.sleeve_type
            )));
        }
        let outer_ok = match self.has_outer {
            HasOuter::NotApplicable => self.outer_closed == OuterClosed::NotApplicable,
            HasOuter::No => self.outer_closed == OuterClosed::NoOuter,
            HasOuter::Yes => matches!(
                self.outer_closed,
                OuterClosed::Undetermined | OuterClosed::Yes | OuterClosed::No
            ),
        };
        if !outer_ok {
            return Err(VtoError::Validation(format!(
                "outer_closed {:?} inconsistent with has_outer {:?}",
                self.outer_closed, self.has_outer
            )));
        }
        Ok(())
    }

    /// 0-based answer index per field, in question order.
    pub fn to_indices(&self) -> [usize; NUM_ATTRIBUTES] {
        [
            self.sleeve_type as usize,
            self.sleeve_rolled as usize,
            self.top_tucked as usize,
            self.has_outer as usize,
            self.outer_closed as usize,
        ]
    }

    pub fn from_indices(idx: [usize; NUM_ATTRIBUTES]) -> Result<AttributeVector> {
        for (f, &i) in idx.iter().enumerate() {
            if i >= FIELD_SIZES[f] {
                return Err(VtoError::RejectedInput(format!(
                    "attribute field {f} index {i} out of range"
                )));
            }
        }
        let a = AttributeVector {
            sleeve_type: [
                SleeveType::NotApplicable,
                SleeveType::Sleeveless,
                SleeveType::Short,
                SleeveType::Middle,
                SleeveType::Long,
            ][idx[0]],
            sleeve_rolled: [
                SleeveRolled::NotApplicable,
                SleeveRolled::NotLong,
                SleeveRolled::Yes,
                SleeveRolled::No,
            ][idx[1]],
            top_tucked: [
                TopTucked::NotApplicable,
                TopTucked::NoTop,
                TopTucked::Undetermined,
                TopTucked::Yes,
                TopTucked::No,
            ][idx[2]],
            has_outer: [HasOuter::NotApplicable, HasOuter::Yes, HasOuter::No][idx[3]],
            outer_closed: [
                OuterClosed::NotApplicable,
                OuterClosed::NoOuter,
                OuterClosed::Undetermined,
                OuterClosed::Yes,
                OuterClosed::No,
            ][idx[4]],
        };
        Ok(a)
    }

    /// Every consistent attribute vector (150 of the 1500 raw combinations).
    pub fn all_valid() -> Vec<AttributeVector> {
        let mut out = Vec::new();
        for i0 in 0..FIELD_SIZES[0] {
            for i1 in 0..FIELD_SIZES[1] {
                for i2 in 0..FIELD_SIZES[2] {
                    for i3 in 0..FIELD_SIZES[3] {
                        for i4 in 0..FIELD_SIZES[4] {
                            let a = AttributeVector::from_indices([i0, i1, i2, i3, i4]).unwrap();
                            if a.validate().is_ok() {
                                out.push(a);
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn encode_attribute_text(attrs: &AttributeVector) -> Result<String> {
    attrs.validate()?;
    let idx = attrs.to_indices();
    let pairs: Vec<String> = (0..NUM_ATTRIBUTES)
        .map(|f| format!("{}: {}", QUESTIONS[f], ANSWERS[f][idx[f]]))
        .collect();
    Ok(pairs.join("; "))
}

pub fn parse_attribute_text(text: &str) -> Result<AttributeVector> {
    let parts: Vec<&str> = text.split(';').collect();
    if parts.len() != NUM_ATTRIBUTES {
        return Err(VtoError::Parse {
            position: 0,
            message: format!(
                "expected {NUM_ATTRIBUTES} question-answer pairs, found {}",
                parts.len()
            ),
        });
    }
    let mut idx = [0usize; NUM_ATTRIBUTES];
    let mut offset = 0usize;
    for (f, part) in parts.iter().enumerate() {
        let pos = offset;
        offset += part.len() + 1;
        let trimmed = part.trim();
        let (q, a) = trimmed.split_once(':').ok_or_else(|| VtoError::Parse {
            position: pos,
            message: format!("pair {} has no ':' separator", f + 1),
        })?;
        if q.trim() != QUESTIONS[f] {
            return Err(VtoError::Parse {
                position: pos,
                message: format!("unknown or out-of-order question {:?}", q.trim()),
            });
        }
        let answer = a.trim();
        idx[f] = ANSWERS[f]
            .iter()
            .position(|cand| *cand == answer)
            .ok_or_else(|| VtoError::Parse {
                position: pos,
                message: format!(
                    "answer {answer:?} not valid for question {:?}",
                    QUESTIONS[f]
                ),
            })?;
    }
    let attrs = AttributeVector::from_indices(idx)?;
    attrs.validate().map_err(|e| VtoError::Parse {
        position: 0,
        message: e.to_string(),
    })?;
    Ok(attrs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_matches_reference_string() {
        let a = AttributeVector {
            sleeve_type: SleeveType::Long,
            sleeve_rolled: SleeveRolled::No,
            top_tucked: TopTucked::Yes,
            has_outer: HasOuter::No,
            outer_closed: OuterClosed::NoOuter,
        };
        assert_eq!(
            encode_attribute_text(&a).unwrap(),
            "What is the type of the sleeve?: Long sleeve; Is the sleeve rolled up?: No; \
             Is the top garment tucked in?: Yes; Is the person wearing outer top?: No; \
             Is the outer top closed (e.g. zipper up or button on)?: Not wearing outer top"
        );
    }

    #[test]
    fn all_na_encodes_five_not_applicable() {
        let text = encode_attribute_text(&AttributeVector::ALL_NA).unwrap();
        assert_eq!(text.matches("Not applicable").count(), 5);
        assert_eq!(AttributeVector::ALL_NA.to_indices(), [0, 0, 0, 0, 0]);
    }

    #[test]
    fn sleeveless_rolled_rejected() {
        let a = AttributeVector {
            sleeve_type: SleeveType::Sleeveless,
            sleeve_rolled: SleeveRolled::Yes,
            ..AttributeVector::ALL_NA
        };
        assert!(matches!(a.validate(), Err(VtoError::Validation(_))));
        assert!(encode_attribute_text(&a).is_err());
    }

    #[test]
    fn exhaustive_round_trip() {
        let valid = AttributeVector::all_valid();
        assert_eq!(valid.len(), 150);
        for a in &valid {
            let text = encode_attribute_text(a).unwrap();
            let back = parse_attribute_text(&text).unwrap();
            assert_eq!(*a, back);
        }
    }

    #[test]
    fn indices_injective_over_valid_set() {
        let valid = AttributeVector::all_valid();
        let mut seen = std::collections::HashSet::new();
        for a in &valid {
            assert!(seen.insert(a.to_indices()));
        }
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(parse_attribute_text("").is_err());
        // answer from the wrong question's set
        let bad = "What is the type of the sleeve?: Long sleeve; Is the sleeve rolled up?: No; \
                   Is the top garment tucked in?: Long sleeve; Is the person wearing outer top?: No; \
                   Is the outer top closed (e.g. zipper up or button on)?: Not wearing outer top";
        let err = parse_attribute_text(bad).unwrap_err();
        match err {
            VtoError::Parse { position, .. } => assert!(position > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_tolerates_whitespace() {
        let a = AttributeVector::ALL_NA;
        let text = encode_attribute_text(&a).unwrap();
        let sloppy = text.replace("; ", " ;  ");
        assert_eq!(parse_attribute_text(&sloppy).unwrap(), a);
    }
}
