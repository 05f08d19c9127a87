use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Architecture family of a generative model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gan,
    Diffusion,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Gan, Family::Diffusion];

    pub fn word(self) -> &'static str {
        match self {
            Family::Gan => "gan",
            Family::Diffusion => "diffusion",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Source of an image: real, or one of the twelve generators. The first six
/// fakes are seen during training; the last six only appear at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorId {
    Real,
    Progan,
    Stylegan,
    DiffProjectedgan,
    Ldm,
    Glide,
    Sd14,
    Adm,
    Ddpm,
    Iddpm,
    Pndm,
    DiffStylegan2,
    Projectedgan,
}

use GeneratorId::*;

impl GeneratorId {
    pub const ALL: [GeneratorId; 13] = [
        Real,
        Progan,
        Stylegan,
        DiffProjectedgan,
        Ldm,
        Glide,
        Sd14,
        Adm,
        Ddpm,
        Iddpm,
        Pndm,
        DiffStylegan2,
        Projectedgan,
    ];

    pub const SEEN: [GeneratorId; 6] = [Progan, Stylegan, DiffProjectedgan, Ldm, Glide, Sd14];

    pub const UNSEEN: [GeneratorId; 6] = [Adm, Ddpm, Iddpm, Pndm, DiffStylegan2, Projectedgan];

    /// All twelve fake generators, in fixed matrix order.
    pub const FAKES: [GeneratorId; 12] = [
        Progan,
        Stylegan,
        DiffProjectedgan,
        Ldm,
        Glide,
        Sd14,
        Adm,
        Ddpm,
        Iddpm,
        Pndm,
        DiffStylegan2,
        Projectedgan,
    ];

    pub fn is_fake(self) -> bool {
        self != Real
    }

    pub fn is_seen(self) -> bool {
        Self::SEEN.contains(&self)
    }

    pub fn family(self) -> Option<Family> {
        match self {
            Real => None,
            Progan | Stylegan | DiffProjectedgan | DiffStylegan2 | Projectedgan => Some(Family::Gan),
            Ldm | Glide | Sd14 | Adm | Ddpm | Iddpm | Pndm => Some(Family::Diffusion),
        }
    }

    /// Name as it appears in answer text.
    pub fn answer_name(self) -> &'static str {
        match self {
            Real => "real",
            Progan => "progan",
            Stylegan => "stylegan",
            DiffProjectedgan => "diff-projectedgan",
            Ldm => "ldm",
            Glide => "glide",
            Sd14 => "stable diffusion",
            Adm => "adm",
            Ddpm => "ddpm",
            Iddpm => "iddpm",
            Pndm => "pndm",
            DiffStylegan2 => "diff-stylegan2",
            Projectedgan => "projectedgan",
        }
    }

    /// Identifier used in file names, manifests and reports.
    pub fn slug(self) -> &'static str {
        match self {
            Real => "real",
            Progan => "progan",
            Stylegan => "stylegan",
            DiffProjectedgan => "diff_projectedgan",
            Ldm => "ldm",
            Glide => "glide",
            Sd14 => "sd14",
            Adm => "adm",
            Ddpm => "ddpm",
            Iddpm => "iddpm",
            Pndm => "pndm",
            DiffStylegan2 => "diff_stylegan2",
            Projectedgan => "projectedgan",
        }
    }

    /// Position within [`GeneratorId::FAKES`].
    pub fn fake_index(self) -> Option<usize> {
        Self::FAKES.iter().position(|g| *g == self)
    }

    pub(crate) fn code(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for GeneratorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for GeneratorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_lowercase();
        GeneratorId::ALL
            .into_iter()
            .find(|g| g.slug() == s || g.answer_name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown generator {s:?}")))
    }
}
