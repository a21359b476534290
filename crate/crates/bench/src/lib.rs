//! Shared fixtures for the criterion benches: deterministic phantoms at the
//! reference training resolution.

use vessel_core::{generate_phantoms, DomainDescriptor, Image, Mask};

pub const SIDE: usize = 64;

pub fn phantom(seed: u64) -> (Image, Mask) {
    let mut samples =
        generate_phantoms(1, &DomainDescriptor::source(), (SIDE, SIDE), seed).unwrap();
    let s = samples.remove(0);
    (s.image, s.mask)
}
