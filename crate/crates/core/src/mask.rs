//! Token layout and the conduction/view attention structure.
//!
//! Positions are 0-based. The sequence holds the twelve cls tokens first
//! (position `i` is lead `i`), then the beat tokens lead-major: beat `j` of
//! lead `i` sits at `12 + i * N + j`.
//!
//! Allow sets for the [`Variant::Clear`] structure:
//!
//! * cls row of lead `i`: itself plus every valid beat of lead `i`.
//! * masked beat `(i, j)`: beat `j` of every lead (the same heartbeat) plus
//!   the cls token of lead `i`.
//! * visible beat `(i, j)`: every valid beat of lead `i` plus the cls token
//!   of lead `i`.
//!
//! Padding beats are inert: never masked, never attended to, no row.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::N_LEADS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub n_beats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Cls { lead: usize },
    Beat { lead: usize, beat: usize },
}

impl TokenLayout {
    pub fn new(n_beats: usize) -> Self {
        assert!(n_beats >= 1, "layout needs at least one beat per lead");
        Self { n_beats }
    }

    pub fn total(&self) -> usize {
        N_LEADS * (self.n_beats + 1)
    }

    #[inline]
    pub fn cls(&self, lead: usize) -> usize {
        lead
    }

    #[inline]
    pub fn beat(&self, lead: usize, j: usize) -> usize {
        N_LEADS + lead * self.n_beats + j
    }

    #[inline]
    pub fn kind(&self, p: usize) -> TokenKind {
        if p < N_LEADS {
            TokenKind::Cls { lead: p }
        } else {
            let o = p - N_LEADS;
            TokenKind::Beat {
                lead: o / self.n_beats,
                beat: o % self.n_beats,
            }
        }
    }
}

/// Which parts of the attention structure are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Same-heartbeat rows for masked beats, same-lead rows otherwise.
    Clear,
    /// Masked beats lose the cross-lead same-heartbeat positions.
    NoIc,
    /// Beat rows lose their cls token; cls rows lose their beats.
    NoIv,
    /// Both removals at once.
    NoIcIv,
    /// Plain full attention over valid positions.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Clear,
        Variant::NoIc,
        Variant::NoIv,
        Variant::NoIcIv,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clear => "clear",
            Variant::NoIc => "no-ic",
            Variant::NoIv => "no-iv",
            Variant::NoIcIv => "no-ic-iv",
            Variant::Full => "full",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Variant::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown variant code {c}")))
    }

    fn conduction(self) -> bool {
        matches!(self, Variant::Clear | Variant::NoIv)
    }

    fn view(self) -> bool {
        matches!(self, Variant::Clear | Variant::NoIc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?} (clear|no-ic|no-iv|no-ic-iv|full)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
}

/// How the encoder restricts visible beat rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderPolicy {
    /// Only cls rows are restricted; visible beats attend to everything visible.
    #[default]
    PaperLiteral,
    /// Visible beat rows also follow the same-lead rule.
    Consistent,
}

impl EncoderPolicy {
    pub const ALL: [EncoderPolicy; 2] = [EncoderPolicy::PaperLiteral, EncoderPolicy::Consistent];

    pub fn name(self) -> &'static str {
        match self {
            EncoderPolicy::PaperLiteral => "paper-literal",
            EncoderPolicy::Consistent => "consistent",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        EncoderPolicy::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown policy code {c}")))
    }
}

impl fmt::Display for EncoderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncoderPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        EncoderPolicy::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?} (paper-literal|consistent)")))
    }
}

/// Masked set, padding set and variant for one record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub layout: TokenLayout,
    pub variant: Variant,
    masked: Vec<bool>,
    invalid: Vec<bool>,
}

impl MaskSpec {
    /// `valid` holds per-beat validity (shared by all leads); `masked` lists
    /// global beat positions.
    pub fn new(layout: TokenLayout, valid: &[bool], masked: &[usize], variant: Variant) -> Result<Self> {
        if valid.len() != layout.n_beats {
            return Err(Error::Shape(format!(
                "validity has {} entries, layout has {} beats",
                valid.len(),
                layout.n_beats
            )));
        }
        let total = layout.total();
        let mut invalid = vec![false; total];
        for lead in 0..N_LEADS {
            for (j, &v) in valid.iter().enumerate() {
                invalid[layout.beat(lead, j)] = !v;
            }
        }
        let mut m = vec![false; total];
        for &p in masked {
            if p < N_LEADS || p >= total {
                return Err(Error::Config(format!("position {p} is not a beat position")));
            }
            if invalid[p] {
                return Err(Error::Config(format!(
                    "position {p} is a padding beat and cannot be masked"
                )));
            }
            m[p] = true;
        }
        Ok(Self {
            layout,
            variant,
            masked: m,
            invalid,
        })
    }

    /// No masking, everything valid.
    pub fn unmasked(layout: TokenLayout, variant: Variant) -> Self {
        Self::new(layout, &vec![true; layout.n_beats], &[], variant).expect("trivial spec")
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    #[inline]
    pub fn is_masked(&self, p: usize) -> bool {
        self.masked[p]
    }

    #[inline]
    pub fn is_invalid(&self, p: usize) -> bool {
        self.invalid[p]
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.layout.total()).filter(|&p| self.masked[p]).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn n_valid_beats(&self) -> usize {
        (N_LEADS..self.layout.total()).filter(|&p| !self.invalid[p]).count()
    }

    pub fn beat_valid(&self, j: usize) -> bool {
        !self.invalid[self.layout.beat(0, j)]
    }

    /// cls tokens plus every valid beat, in layout order.
    pub fn active_positions(&self) -> Vec<usize> {
        (0..self.layout.total()).filter(|&p| !self.invalid[p]).collect()
    }

    /// cls tokens plus valid unmasked beats, in layout order.
    pub fn visible_positions(&self) -> Vec<usize> {
        (0..self.layout.total())
            .filter(|&p| !self.invalid[p] && !self.masked[p])
            .collect()
    }
}

/// Sorted set of positions row `p` may attend to. Padding rows get the empty set.
pub fn allow_set(p: usize, spec: &MaskSpec) -> Vec<usize> {
    let layout = spec.layout;
    assert!(p < layout.total(), "position {p} outside layout");
    if spec.invalid[p] {
        return Vec::new();
    }
    let v = spec.variant;
    let same_lead = |lead: usize| {
        (0..layout.n_beats)
            .map(move |k| layout.beat(lead, k))
            .filter(|&q| !spec.invalid[q])
    };
    let mut out: Vec<usize> = match (v, layout.kind(p)) {
        (Variant::Full, _) => spec.active_positions(),
        (_, TokenKind::Cls { lead }) => {
            let mut s = vec![p];
            if v.view() {
                s.extend(same_lead(lead));
            }
            s
        }
        (_, TokenKind::Beat { lead, beat }) if spec.masked[p] => {
            let mut s: Vec<usize> = if v.conduction() {
                (0..N_LEADS).map(|i| layout.beat(i, beat)).collect()
            } else {
                vec![p]
            };
            if v.view() {
                s.push(layout.cls(lead));
            }
            s
        }
        (_, TokenKind::Beat { lead, .. }) => {
            let mut s: Vec<usize> = same_lead(lead).collect();
            if v.view() {
                s.push(layout.cls(lead));
            }
            s
        }
    };
    out.sort_unstable();
    out.dedup();
    out
}

/// Uniformly samples `round(ratio * n_valid_beats)` valid beat positions
/// (ties round to even). Returned sorted.
pub fn sample_masked<R: Rng + ?Sized>(layout: TokenLayout, valid: &[bool], ratio: f64, rng: &mut R) -> Vec<usize> {
    assert!((0.0..=1.0).contains(&ratio), "mask ratio must lie in [0, 1]");
    let candidates: Vec<usize> = (0..N_LEADS)
        .flat_map(|lead| {
            (0..layout.n_beats)
                .filter(|&j| valid[j])
                .map(move |j| layout.beat(lead, j))
        })
        .collect();
    let count = mask_count(candidates.len(), ratio);
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), count)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    chosen.sort_unstable();
    chosen
}

pub fn mask_count(n_valid_beats: usize, ratio: f64) -> usize {
    ((ratio * n_valid_beats as f64).round_ties_even() as usize).min(n_valid_beats)
}

/// Boolean allow matrix over the active sub-sequence of a stage.
///
/// Rows and columns index `positions` (global layout positions). Allowed
/// pairs are also kept as per-row column lists for the sparse kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    positions: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl MaskMatrix {
    /// Builds from per-row sorted local column lists.
    pub fn from_rows(positions: Vec<usize>, rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = positions.len();
        if rows.len() != n {
            return Err(Error::Shape(format!("{} rows for {} positions", rows.len(), n)));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable();
            row.dedup();
            if row.last().is_some_and(|&c| c >= n) {
                return Err(Error::Shape(format!("row {r} references a column outside the matrix")));
            }
            cols.extend(row);
            row_ptr.push(cols.len());
        }
        Ok(Self {
            positions,
            row_ptr,
            cols,
        })
    }

    pub fn from_dense(n: usize, allowed: &[bool]) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(Error::Shape("dense mask must be n x n".into()));
        }
        let rows = (0..n)
            .map(|r| (0..n).filter(|&c| allowed[r * n + c]).collect())
            .collect();
        Self::from_rows((0..n).collect(), rows)
    }

    pub fn all_allowed(n: usize) -> Self {
        Self::full_over((0..n).collect())
    }

    /// Every pair allowed, rows labelled by `positions`.
    pub fn full_over(positions: Vec<usize>) -> Self {
        let n = positions.len();
        Self::from_rows(positions, vec![(0..n).collect(); n]).expect("full mask")
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[usize] {
        &self.cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    #[inline]
    pub fn row_offset(&self, r: usize) -> usize {
        self.row_ptr[r]
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.row(r).binary_search(&c).is_ok()
    }

    /// Sum of allow-set sizes over all rows.
    pub fn pair_count(&self) -> usize {
        self.cols.len()
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.n();
        let mut d = vec![false; n * n];
        for r in 0..n {
            for &c in self.row(r) {
                d[r * n + c] = true;
            }
        }
        d
    }

    /// Allow matrix scattered onto the full `total x total` layout; rows and
    /// columns of positions outside this stage are all false.
    pub fn to_layout_dense(&self, total: usize) -> Vec<bool> {
        let mut d = vec![false; total * total];
        for r in 0..self.n() {
            let pr = self.positions[r];
            for &c in self.row(r) {
                d[pr * total + self.positions[c]] = true;
            }
        }
        d
    }

    /// Allowed global positions of local row `r`.
    pub fn global_row(&self, r: usize) -> Vec<usize> {
        self.row(r).iter().map(|&c| self.positions[c]).collect()
    }

    pub fn row_size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for r in 0..self.n() {
            *h.entry(self.row(r).len()).or_insert(0) += 1;
        }
        h
    }

    pub fn first_inert_row(&self) -> Option<usize> {
        (0..self.n()).find(|&r| self.row(r).is_empty())
    }
}

/// Realizes the attention structure for one stage.
///
/// The decoder covers every active position with the full allow sets. The
/// encoder covers cls tokens and visible beats; its cls rows are the allow
/// sets restricted to visible positions, its beat rows depend on `policy`.
pub fn build_mask_matrix(spec: &MaskSpec, stage: Stage, policy: EncoderPolicy) -> MaskMatrix {
    let positions = match stage {
        Stage::Decoder => spec.active_positions(),
        Stage::Encoder => spec.visible_positions(),
    };
    let total = spec.layout.total();
    let mut local = vec![usize::MAX; total];
    for (k, &p) in positions.iter().enumerate() {
        local[p] = k;
    }
    let to_local = |set: Vec<usize>| -> Vec<usize> {
        set.into_iter()
            .filter_map(|q| (local[q] != usize::MAX).then_some(local[q]))
            .collect()
    };
    let rows: Vec<Vec<usize>> = positions
        .iter()
        .map(|&p| match (stage, spec.layout.kind(p), policy) {
            (Stage::Encoder, TokenKind::Beat { .. }, EncoderPolicy::PaperLiteral) => (0..positions.len()).collect(),
            _ => to_local(allow_set(p, spec)),
        })
        .collect();
    MaskMatrix::from_rows(positions, rows).expect("rows reference local positions")
}
