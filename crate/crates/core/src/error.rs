use thiserror::Error;

/// A domain value that breaks one of its type's invariants.
///
/// `field` uses the same key names as the gait DSL so that the parser can
/// point at the offending `key=value` pair.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{field} = {value} violates {rule}")]
pub struct InvariantError {
    pub field: &'static str,
    pub rule: &'static str,
    pub value: f64,
}

impl InvariantError {
    pub(crate) fn new(field: &'static str, rule: &'static str, value: f64) -> Self {
        Self { field, rule, value }
    }
}

/// Returns `Err` unless `ok`; keeps constructor bodies flat.
pub(crate) fn ensure(ok: bool, field: &'static str, rule: &'static str, value: f64) -> Result<(), InvariantError> {
    if ok {
        Ok(())
    } else {
        Err(InvariantError::new(field, rule, value))
    }
}
