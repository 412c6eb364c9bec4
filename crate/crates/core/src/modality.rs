//! Modalities, modality subsets, and the per-sample input bundle.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// One of the three input channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    /// Laboratory tests rendered as text (`t`).
    Lab,
    /// 12-lead electrocardiogram (`s`).
    Ecg,
    /// Echocardiogram video (`m`).
    Echo,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Lab, Modality::Ecg, Modality::Echo];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bit(self) -> u8 {
        1 << self.index()
    }

    /// Single-letter tag used in block names.
    pub fn tag(self) -> char {
        match self {
            Modality::Lab => 't',
            Modality::Ecg => 's',
            Modality::Echo => 'm',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Lab => "lab",
            Modality::Ecg => "ecg",
            Modality::Echo => "echo",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "lab" | "t" => Some(Modality::Lab),
            "ecg" | "s" => Some(Modality::Ecg),
            "echo" | "m" => Some(Modality::Echo),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Set of modalities as a presence bitmask (bit0 Lab, bit1 ECG, bit2 ECHO).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);
    pub const ALL: ModalitySet = ModalitySet(0b111);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits & !0b111 == 0).then_some(Self(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn of(mods: &[Modality]) -> Self {
        Self(mods.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn is_subset_of(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in canonical (Lab, ECG, ECHO) order.
    pub fn members(self) -> Vec<Modality> {
        Modality::ALL.iter().copied().filter(|m| self.contains(*m)).collect()
    }

    /// Tag such as `ts` or `tsm`.
    pub fn tag(self) -> String {
        self.members().iter().map(|m| m.tag()).collect()
    }

    /// Parse `lab,ecg` / `t,s` / `ts` forms.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Some(Self::ALL);
        }
        let mut bits = 0u8;
        if s.contains(',') || Modality::parse(s).is_some() {
            for part in s.split(',') {
                bits |= Modality::parse(part.trim())?.bit();
            }
        } else {
            for ch in s.chars() {
                let mut buf = [0u8; 4];
                bits |= Modality::parse(ch.encode_utf8(&mut buf))?.bit();
            }
        }
        (bits != 0).then_some(Self(bits))
    }

    /// All seven nonempty subsets: unimodal, then bimodal, then trimodal.
    pub fn nonempty_subsets() -> [ModalitySet; 7] {
        [
            ModalitySet(0b001),
            ModalitySet(0b010),
            ModalitySet(0b100),
            ModalitySet(0b011),
            ModalitySet(0b101),
            ModalitySet(0b110),
            ModalitySet(0b111),
        ]
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Per-sample token sequences, one optional `L x d` tensor per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    slots: [Option<Tensor>; 3],
}

impl ModalityBundle {
    /// Validates that at least one modality is present and that all present
    /// sequences share one `L x d` shape with finite values.
    pub fn new(lab: Option<Tensor>, ecg: Option<Tensor>, echo: Option<Tensor>) -> Result<Self> {
        let b = Self {
            slots: [lab, ecg, echo],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn from_slots(slots: [Option<Tensor>; 3]) -> Result<Self> {
        let b = Self { slots };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let mut shape: Option<[usize; 2]> = None;
        for (m, t) in Modality::ALL.iter().zip(&self.slots) {
            let Some(t) = t else { continue };
            if t.rank() != 2 {
                return Err(Error::InvalidInput(format!("{} sequence must be rank 2", m)));
            }
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("{} sequence has non-finite values", m)));
            }
            match shape {
                None => shape = Some(t.dims()),
                Some(s) if s != t.dims() => {
                    return Err(Error::InvalidInput(format!(
                        "{} sequence is {:?}, expected {:?}",
                        m,
                        t.dims(),
                        s
                    )))
                }
                _ => {}
            }
        }
        if shape.is_none() {
            return Err(Error::InvalidInput("bundle has no modality".into()));
        }
        Ok(())
    }

    pub fn get(&self, m: Modality) -> Option<&Tensor> {
        self.slots[m.index()].as_ref()
    }

    pub fn require(&self, m: Modality) -> Result<&Tensor> {
        self.get(m).ok_or(Error::MissingModality(m.name()))
    }

    pub fn presence(&self) -> ModalitySet {
        ModalitySet::of(
            &Modality::ALL
                .iter()
                .copied()
                .filter(|m| self.slots[m.index()].is_some())
                .collect::<Vec<_>>(),
        )
    }

    /// `(token_len, feature_dim)` shared by the present sequences.
    pub fn dims(&self) -> [usize; 2] {
        self.slots.iter().flatten().next().map(|t| t.dims()).unwrap_or([0, 0])
    }

    /// Keep only the modalities in `keep`. Fails if nothing would remain.
    pub fn restrict(&self, keep: ModalitySet) -> Result<Self> {
        let mut slots = self.slots.clone();
        for m in Modality::ALL {
            if !keep.contains(m) {
                slots[m.index()] = None;
            }
        }
        Self::from_slots(slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_parsing_and_tags() {
        assert_eq!(ModalitySet::parse("lab,echo").unwrap().tag(), "tm");
        assert_eq!(ModalitySet::parse("tsm").unwrap(), ModalitySet::ALL);
        assert_eq!(ModalitySet::parse("s").unwrap().members(), vec![Modality::Ecg]);
        assert!(ModalitySet::parse("x").is_none());
        assert!(ModalitySet::from_bits(0b1000).is_none());
    }

    #[test]
    fn bundle_validation() {
        assert!(ModalityBundle::new(None, None, None).is_err());
        let a = Tensor::zeros(2, 3);
        let b = Tensor::zeros(3, 3);
        assert!(ModalityBundle::new(Some(a.clone()), Some(b), None).is_err());
        let ok = ModalityBundle::new(Some(a.clone()), None, Some(a)).unwrap();
        assert_eq!(ok.presence().tag(), "tm");
        assert!(ok.restrict(ModalitySet::parse("s").unwrap()).is_err());
    }
}
