//! Deterministic seed derivation, so per-vehicle work is independent of
//! scheduling order.

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer.
pub fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for one vehicle under a run seed.
pub fn vehicle_seed(run_seed: u64, vehicle_id: &str) -> u64 {
    splitmix(run_seed ^ fnv1a(vehicle_id.as_bytes()))
}

/// Seed for a numbered sub-task (a candidate K, a restart) of a parent seed.
pub fn derive(parent: u64, tag: u64) -> u64 {
    splitmix(parent ^ splitmix(tag))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn vehicles_get_distinct_seeds() {
        assert_ne!(vehicle_seed(7, "t01"), vehicle_seed(7, "t02"));
        assert_eq!(vehicle_seed(7, "t01"), vehicle_seed(7, "t01"));
        assert_ne!(derive(1, 3), derive(1, 4));
    }
}
