//! Records, lab textualization, the synthetic cohort generator, and splitting.

mod split;
mod synth;
mod text;

pub use split::{repeated_kfold, stratified_split, Fold, Split};
pub use synth::{mixing_matrices, synth_generate, SynthConfig};
pub use text::textualize_labs;

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::modality::ModalityBundle;

/// Which labels a dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelSchema {
    Diagnosis,
    Prognosis,
    Retrieval,
}

impl LabelSchema {
    pub fn name(self) -> &'static str {
        match self {
            LabelSchema::Diagnosis => "diagnosis",
            LabelSchema::Prognosis => "prognosis",
            LabelSchema::Retrieval => "retrieval",
        }
    }
}

impl fmt::Display for LabelSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LabelSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(LabelSchema::Diagnosis),
            "prognosis" => Ok(LabelSchema::Prognosis),
            "retrieval" => Ok(LabelSchema::Retrieval),
            _ => Err(Error::UnknownTask(s.into())),
        }
    }
}

/// Survival outcome: time in months and whether the event was observed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Survival {
    pub time: f64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRecord {
    pub id: String,
    pub bundle: ModalityBundle,
    pub class: Option<i32>,
    pub survival: Option<Survival>,
}

impl LabeledRecord {
    /// Check the labels the schema needs: a binary class for diagnosis, a
    /// positive time for prognosis.
    pub fn validate(&self, schema: LabelSchema) -> Result<()> {
        let bad = |detail: String| Err(Error::SchemaMismatch { task: schema.name(), detail });
        match schema {
            LabelSchema::Diagnosis => match self.class {
                Some(0 | 1) => Ok(()),
                other => bad(alloc::format!("record {} has class {:?}", self.id, other)),
            },
            LabelSchema::Prognosis => match self.survival {
                Some(s) if s.time > 0.0 && s.time.is_finite() => Ok(()),
                other => bad(alloc::format!("record {} has survival {:?}", self.id, other)),
            },
            LabelSchema::Retrieval => Ok(()),
        }
    }

    /// Keep only the labels `schema` uses.
    pub fn strip_to(mut self, schema: LabelSchema) -> Self {
        match schema {
            LabelSchema::Diagnosis => self.survival = None,
            LabelSchema::Prognosis => self.class = None,
            LabelSchema::Retrieval => {
                self.class = None;
                self.survival = None;
            }
        }
        self
    }
}
