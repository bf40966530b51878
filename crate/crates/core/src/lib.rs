//! Molecules, chemistry checks, fingerprints, noise schedules, corpora and
//! evaluation metrics for text-guided molecule diffusion.

pub mod chem;
pub mod data;
pub mod element;
pub mod error;
pub mod evaluation;
pub mod fingerprint;
pub mod geometry;
pub mod molecule;
pub mod schedules;
pub mod smiles;
pub mod toy;

pub use chem::{validate, ValidityReport};
pub use element::Element;
pub use error::{CoreError, Result};
pub use fingerprint::{ecfp, similarity, tanimoto, Fingerprint, DEFAULT_RADIUS};
pub use molecule::{AtomVocab, BondType, Molecule, Vec3, NUM_BOND_TYPES};
pub use schedules::{build_schedule, Chain, NoiseSchedule, ScheduleKind};
