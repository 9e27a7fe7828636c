//! The 8x20 MHz channel space and the dynamic channel-bonding policies.
//!
//! Channels are indexed 0..=7 (20 MHz each). A bond is a contiguous,
//! power-of-two-wide, aligned block of channels, matching the 20/40/80/160
//! MHz nesting of the 5 GHz channelization tree: a bond of width `w` must
//! start at a multiple of `w`. Every bond used for a transmission must
//! contain the transmitter's primary channel.
//!
//! Three selection policies decide which bond to use given a free/busy
//! mask sensed at backoff expiry:
//!
//! - **SCB** (static): transmit over the full allowed range or not at all.
//! - **AM** (always-max): the widest fully-free bond.
//! - **PU** (probabilistic uniform): a uniform draw over all fully-free
//!   bonds.
//!
//! All policies are pure functions; PU takes a caller-owned RNG.

use rand::Rng;
use thiserror::Error;

/// Number of 20 MHz channels in the modeled band.
pub const CHANNEL_COUNT: u8 = 8;

/// Bond widths allowed by the channelization tree.
pub const VALID_WIDTHS: [u8; 4] = [1, 2, 4, 8];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("channel index {0} out of range 0..=7")]
    InvalidChannel(u8),
    #[error("channel range min {min} exceeds max {max}")]
    EmptyRange { min: u8, max: u8 },
    #[error("primary channel {primary} outside allowed range [{min}, {max}]")]
    PrimaryOutsideRange { primary: u8, min: u8, max: u8 },
    #[error("bond width {0} is not one of 1, 2, 4, 8")]
    InvalidWidth(u8),
    #[error("bond of width {width} starting at channel {lowest} is not aligned")]
    Misaligned { lowest: u8, width: u8 },
    #[error(
        "range [{min}, {max}] cannot host a full-span bond: width {width} \
         is not a power of two or the range is misaligned"
    )]
    ScbRangeNotBondable { min: u8, max: u8, width: u8 },
}

/// A single 20 MHz channel, index 0..=7.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelId(u8);

impl ChannelId {
    pub fn new(index: u8) -> Result<Self, ChannelError> {
        if index < CHANNEL_COUNT {
            Ok(Self(index))
        } else {
            Err(ChannelError::InvalidChannel(index))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }
}

/// The inclusive range of channels a BSS is allowed to bond over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelRange {
    min: ChannelId,
    max: ChannelId,
}

impl ChannelRange {
    pub fn new(min: ChannelId, max: ChannelId) -> Result<Self, ChannelError> {
        if min.index() > max.index() {
            return Err(ChannelError::EmptyRange {
                min: min.index(),
                max: max.index(),
            });
        }
        Ok(Self { min, max })
    }

    /// Convenience constructor from raw indices.
    pub fn from_indices(min: u8, max: u8) -> Result<Self, ChannelError> {
        Self::new(ChannelId::new(min)?, ChannelId::new(max)?)
    }

    pub fn min(self) -> ChannelId {
        self.min
    }

    pub fn max(self) -> ChannelId {
        self.max
    }

    pub fn width(self) -> u8 {
        self.max.index() - self.min.index() + 1
    }

    pub fn contains(self, ch: ChannelId) -> bool {
        self.min.index() <= ch.index() && ch.index() <= self.max.index()
    }

    pub fn channels(self) -> impl Iterator<Item = ChannelId> {
        (self.min.index()..=self.max.index()).map(ChannelId)
    }
}

/// A contiguous, aligned, power-of-two-wide set of channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BondSet {
    lowest: u8,
    width: u8,
}

impl BondSet {
    pub fn new(lowest: ChannelId, width: u8) -> Result<Self, ChannelError> {
        if !VALID_WIDTHS.contains(&width) {
            return Err(ChannelError::InvalidWidth(width));
        }
        if lowest.index() % width != 0 {
            return Err(ChannelError::Misaligned {
                lowest: lowest.index(),
                width,
            });
        }
        if lowest.index() + width > CHANNEL_COUNT {
            return Err(ChannelError::InvalidChannel(lowest.index() + width - 1));
        }
        Ok(Self {
            lowest: lowest.index(),
            width,
        })
    }

    pub fn lowest(self) -> ChannelId {
        ChannelId(self.lowest)
    }

    pub fn highest(self) -> ChannelId {
        ChannelId(self.lowest + self.width - 1)
    }

    pub fn width(self) -> u8 {
        self.width
    }

    pub fn contains(self, ch: ChannelId) -> bool {
        self.contains_index(ch.index())
    }

    pub fn contains_index(self, index: u8) -> bool {
        self.lowest <= index && index < self.lowest + self.width
    }

    pub fn channels(self) -> impl Iterator<Item = ChannelId> {
        (self.lowest..self.lowest + self.width).map(ChannelId)
    }

    fn within(self, range: ChannelRange) -> bool {
        self.lowest >= range.min().index() && self.lowest + self.width - 1 <= range.max().index()
    }
}

impl std::fmt::Display for BondSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.width == 1 {
            write!(f, "{{{}}}", self.lowest)
        } else {
            write!(f, "{{{}..{}}}", self.lowest, self.lowest + self.width - 1)
        }
    }
}

/// Idle/busy state of the 8 channels; a set bit means "sensed idle".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreeMask(u8);

impl FreeMask {
    pub fn all_free() -> Self {
        Self(0xff)
    }

    pub fn none_free() -> Self {
        Self(0)
    }

    /// Mask with exactly the given channel indices free.
    pub fn from_free_channels(indices: &[u8]) -> Self {
        let mut mask = 0u8;
        for &i in indices {
            debug_assert!(i < CHANNEL_COUNT);
            mask |= 1 << i;
        }
        Self(mask)
    }

    pub fn from_bits(bits: u8) -> Self {
        Self(bits)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn set(&mut self, ch: ChannelId, free: bool) {
        if free {
            self.0 |= 1 << ch.index();
        } else {
            self.0 &= !(1 << ch.index());
        }
    }

    pub fn is_free(self, ch: ChannelId) -> bool {
        self.0 & (1 << ch.index()) != 0
    }

    /// True when every channel of `bond` is free.
    pub fn covers(self, bond: BondSet) -> bool {
        bond.channels().all(|c| self.is_free(c))
    }
}

fn check_primary(primary: ChannelId, range: ChannelRange) -> Result<(), ChannelError> {
    if !range.contains(primary) {
        return Err(ChannelError::PrimaryOutsideRange {
            primary: primary.index(),
            min: range.min().index(),
            max: range.max().index(),
        });
    }
    Ok(())
}

/// Every bond that contains `primary`, lies within `range`, and satisfies
/// the alignment rules, sorted ascending by width then lowest index.
///
/// The nesting of the channelization tree means there is at most one
/// candidate per width: the aligned block of that width containing the
/// primary.
pub fn enumerate_valid_bonds(
    primary: ChannelId,
    range: ChannelRange,
) -> Result<Vec<BondSet>, ChannelError> {
    check_primary(primary, range)?;
    let mut bonds = Vec::with_capacity(4);
    for width in VALID_WIDTHS {
        let lowest = (primary.index() / width) * width;
        let bond = BondSet {
            lowest,
            width,
        };
        if bond.within(range) {
            bonds.push(bond);
        }
    }
    Ok(bonds)
}

/// Static channel bonding: the full allowed range, or nothing.
///
/// Errors if the range itself is not a valid bond (width not a power of
/// two, or misaligned) since no full-span transmission could ever occur.
pub fn select_scb(
    primary: ChannelId,
    range: ChannelRange,
    free: FreeMask,
) -> Result<Option<BondSet>, ChannelError> {
    check_primary(primary, range)?;
    let width = range.width();
    let full = BondSet::new(range.min(), width).map_err(|_| ChannelError::ScbRangeNotBondable {
        min: range.min().index(),
        max: range.max().index(),
        width,
    })?;
    Ok(if free.covers(full) { Some(full) } else { None })
}

/// Always-max: the widest fully-free valid bond, or `None` when the
/// primary itself is busy (backoff would not have completed).
pub fn select_am(
    primary: ChannelId,
    range: ChannelRange,
    free: FreeMask,
) -> Result<Option<BondSet>, ChannelError> {
    let bonds = enumerate_valid_bonds(primary, range)?;
    Ok(bonds.into_iter().filter(|b| free.covers(*b)).next_back())
}

/// Probabilistic uniform: a uniform draw over the fully-free valid bonds.
///
/// Draws exactly once from `rng` when at least one candidate exists; an
/// empty candidate set returns `None` without consuming randomness.
pub fn select_pu<R: Rng + ?Sized>(
    primary: ChannelId,
    range: ChannelRange,
    free: FreeMask,
    rng: &mut R,
) -> Result<Option<BondSet>, ChannelError> {
    let candidates: Vec<BondSet> = enumerate_valid_bonds(primary, range)?
        .into_iter()
        .filter(|b| free.covers(*b))
        .collect();
    if candidates.is_empty() {
        return Ok(None);
    }
    let idx = rng.gen_range(0..candidates.len());
    Ok(Some(candidates[idx]))
}

/// Policy selector used by the simulator and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Scb,
    Am,
    Pu,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::Scb => "scb",
            Policy::Am => "am",
            Policy::Pu => "pu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scb" => Some(Policy::Scb),
            "am" => Some(Policy::Am),
            "pu" => Some(Policy::Pu),
            _ => None,
        }
    }

    /// Apply the policy. `rng` is consumed only by PU.
    pub fn select<R: Rng + ?Sized>(
        self,
        primary: ChannelId,
        range: ChannelRange,
        free: FreeMask,
        rng: &mut R,
    ) -> Result<Option<BondSet>, ChannelError> {
        match self {
            Policy::Scb => select_scb(primary, range, free),
            Policy::Am => select_am(primary, range, free),
            Policy::Pu => select_pu(primary, range, free, rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn ch(i: u8) -> ChannelId {
        ChannelId::new(i).unwrap()
    }

    fn range(min: u8, max: u8) -> ChannelRange {
        ChannelRange::from_indices(min, max).unwrap()
    }

    fn bond(lowest: u8, width: u8) -> BondSet {
        BondSet::new(ch(lowest), width).unwrap()
    }

    #[test]
    fn enumerate_full_band_from_channel_zero() {
        let bonds = enumerate_valid_bonds(ch(0), range(0, 7)).unwrap();
        assert_eq!(bonds, vec![bond(0, 1), bond(0, 2), bond(0, 4), bond(0, 8)]);
    }

    #[test]
    fn enumerate_single_channel_range() {
        let bonds = enumerate_valid_bonds(ch(2), range(2, 2)).unwrap();
        assert_eq!(bonds, vec![bond(2, 1)]);
    }

    #[test]
    fn enumerate_lower_half_from_channel_one() {
        let bonds = enumerate_valid_bonds(ch(1), range(0, 3)).unwrap();
        assert_eq!(bonds, vec![bond(1, 1), bond(0, 2), bond(0, 4)]);
    }

    #[test]
    fn enumerate_rejects_primary_outside_range() {
        let err = enumerate_valid_bonds(ch(5), range(0, 3)).unwrap_err();
        assert_eq!(
            err,
            ChannelError::PrimaryOutsideRange {
                primary: 5,
                min: 0,
                max: 3
            }
        );
    }

    #[test]
    fn scb_requires_the_entire_span_free() {
        let free = FreeMask::from_free_channels(&[0, 1]);
        assert_eq!(select_scb(ch(1), range(0, 3), free).unwrap(), None);

        let free = FreeMask::from_free_channels(&[0, 1, 2, 3]);
        assert_eq!(
            select_scb(ch(1), range(0, 3), free).unwrap(),
            Some(bond(0, 4))
        );

        let free = FreeMask::from_free_channels(&[5]);
        assert_eq!(
            select_scb(ch(5), range(5, 5), free).unwrap(),
            Some(bond(5, 1))
        );
    }

    #[test]
    fn scb_rejects_ranges_that_cannot_form_a_bond() {
        // width 3 is not a power of two
        let err = select_scb(ch(0), range(0, 2), FreeMask::all_free()).unwrap_err();
        assert!(matches!(err, ChannelError::ScbRangeNotBondable { width: 3, .. }));
        // width 2 starting at an odd index is misaligned
        let err = select_scb(ch(1), range(1, 2), FreeMask::all_free()).unwrap_err();
        assert!(matches!(err, ChannelError::ScbRangeNotBondable { width: 2, .. }));
    }

    #[test]
    fn am_picks_the_widest_free_bond() {
        let free = FreeMask::from_free_channels(&[0, 1]);
        assert_eq!(select_am(ch(1), range(0, 3), free).unwrap(), Some(bond(0, 2)));

        let free = FreeMask::from_free_channels(&[1]);
        assert_eq!(select_am(ch(1), range(0, 3), free).unwrap(), Some(bond(1, 1)));

        // primary busy: no transmission even though other channels are free
        let free = FreeMask::from_free_channels(&[0, 2, 3]);
        assert_eq!(select_am(ch(1), range(0, 3), free).unwrap(), None);
    }

    #[test]
    fn pu_single_candidate_is_deterministic() {
        let free = FreeMask::from_free_channels(&[1]);
        let mut rng = rng_for(11, 0);
        for _ in 0..32 {
            let got = select_pu(ch(1), range(0, 3), free, &mut rng).unwrap();
            assert_eq!(got, Some(bond(1, 1)));
        }
    }

    #[test]
    fn pu_empty_candidate_set_returns_none() {
        let free = FreeMask::from_free_channels(&[0, 2]);
        let mut rng = rng_for(11, 1);
        assert_eq!(select_pu(ch(1), range(0, 3), free, &mut rng).unwrap(), None);
    }

    #[test]
    fn pu_is_uniform_over_three_candidates() {
        // free = {0,1,2,3} with primary 1 in [0,3] gives candidates
        // {1}, {0,1}, {0..3}; over 10,000 draws each count must sit within
        // 3 sigma of n/3 (sigma = sqrt(n p (1-p)) ~ 47.1).
        let free = FreeMask::from_free_channels(&[0, 1, 2, 3]);
        let mut rng = rng_for(12, 0);
        let mut counts = [0u32; 3];
        let expected = [bond(1, 1), bond(0, 2), bond(0, 4)];
        for _ in 0..10_000 {
            let got = select_pu(ch(1), range(0, 3), free, &mut rng).unwrap().unwrap();
            let idx = expected.iter().position(|b| *b == got).unwrap();
            counts[idx] += 1;
        }
        let mean = 10_000.0 / 3.0;
        let sigma = (10_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "count {c} outside 3 sigma of {mean}"
            );
        }
    }

    #[test]
    fn pu_two_candidates_split_evenly() {
        let free = FreeMask::from_free_channels(&[0, 1]);
        let mut rng = rng_for(13, 0);
        let mut narrow = 0u32;
        for _ in 0..10_000 {
            match select_pu(ch(1), range(0, 3), free, &mut rng).unwrap().unwrap() {
                b if b == bond(1, 1) => narrow += 1,
                b => assert_eq!(b, bond(0, 2)),
            }
        }
        // 3 sigma of Binomial(10000, 0.5) is 150
        assert!((narrow as f64 - 5_000.0).abs() < 150.0, "narrow={narrow}");
    }

    #[test]
    fn policies_are_pure_given_rng_state() {
        let free = FreeMask::from_free_channels(&[0, 1, 2, 3, 6]);
        let a = select_am(ch(2), range(0, 7), free).unwrap();
        let b = select_am(ch(2), range(0, 7), free).unwrap();
        assert_eq!(a, b);
        let p1 = select_pu(ch(2), range(0, 7), free, &mut rng_for(5, 5)).unwrap();
        let p2 = select_pu(ch(2), range(0, 7), free, &mut rng_for(5, 5)).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn scb_success_implies_am_agreement() {
        for bits in 0..=255u8 {
            let free = FreeMask::from_bits(bits);
            for (pri, min, max) in [(0, 0, 7), (3, 0, 3), (5, 4, 5), (6, 6, 6)] {
                let scb = select_scb(ch(pri), range(min, max), free).unwrap();
                if let Some(b) = scb {
                    assert_eq!(select_am(ch(pri), range(min, max), free).unwrap(), Some(b));
                }
            }
        }
    }
}
