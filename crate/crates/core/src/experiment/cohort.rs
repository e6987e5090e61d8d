//! Deterministic cohort assignment by hash threshold.

use std::collections::BTreeSet;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// MurmurHash3 finalizer. A bijection, so it keeps every property of the
/// underlying hash while spreading trailing-byte differences into the high bits.
pub fn fmix64(mut k: u64) -> u64 {
    k ^= k >> 33;
    k = k.wrapping_mul(0xff51_afd7_ed55_8ccd);
    k ^= k >> 33;
    k = k.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    k ^= k >> 33;
    k
}

/// Bucket of `vehicle` as an integer numerator over 2^64.
pub fn bucket(experiment_id: &str, seed: u64, vehicle: &str) -> u64 {
    let key = format!("{experiment_id}|{seed}|{vehicle}");
    fmix64(fnv1a64(key.as_bytes()))
}

/// `ceil(fraction * 2^64)`, exact: scaling an f64 by a power of two is lossless.
fn threshold(fraction: f64) -> u128 {
    let f = fraction.clamp(0.0, 1.0);
    (f * 18_446_744_073_709_551_616.0).ceil() as u128
}

pub fn in_cohort(experiment_id: &str, seed: u64, vehicle: &str, fraction: f64) -> bool {
    u128::from(bucket(experiment_id, seed, vehicle)) < threshold(fraction)
}

/// Vehicles whose bucket lies below `fraction`. Duplicates and roster order
/// do not matter.
pub fn assign_cohort<S: AsRef<str>>(roster: &[S], fraction: f64, experiment_id: &str, seed: u64) -> BTreeSet<String> {
    let t = threshold(fraction);
    roster
        .iter()
        .map(AsRef::as_ref)
        .filter(|v| u128::from(bucket(experiment_id, seed, v)) < t)
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn ten_vehicle_example() {
        let roster: Vec<String> = (0..10).map(|i| format!("veh-{i:02}")).collect();
        let got = assign_cohort(&roster, 0.5, "exp-1", 42);
        let want: BTreeSet<String> = ["veh-00", "veh-03", "veh-04", "veh-06", "veh-07", "veh-08", "veh-09"]
            .into_iter()
            .map(String::from)
            .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn fraction_bounds() {
        let roster: Vec<String> = (0..200).map(|i| format!("v{i}")).collect();
        assert!(assign_cohort(&roster, 0.0, "e", 1).is_empty());
        assert_eq!(assign_cohort(&roster, 1.0, "e", 1).len(), 200);
    }

    proptest! {
        #[test]
        fn order_independent_and_monotone(
            roster in proptest::collection::vec("[a-z0-9-]{1,12}", 0..40),
            f1 in 0.0f64..=1.0,
            f2 in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let mut rev = roster.clone();
            rev.reverse();
            prop_assert_eq!(assign_cohort(&roster, lo, "x", seed), assign_cohort(&rev, lo, "x", seed));
            prop_assert!(assign_cohort(&roster, lo, "x", seed).is_subset(&assign_cohort(&roster, hi, "x", seed)));
        }
    }
}
