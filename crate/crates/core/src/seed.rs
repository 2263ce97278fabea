//! Namespaced seed derivation: one root seed per run, fixed labels per consumer.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the consumer named `label` under `root`.
pub fn derive(root: u64, label: &str) -> u64 {
    splitmix64(root ^ splitmix64(fnv1a(label)))
}

/// Seed for item `index` of the consumer named `label`.
pub fn derive_indexed(root: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive(root, label) ^ splitmix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_and_indices_separate_streams() {
        assert_ne!(derive(7, "model"), derive(7, "data"));
        assert_ne!(derive(7, "model"), derive(8, "model"));
        assert_ne!(derive_indexed(7, "data", 0), derive_indexed(7, "data", 1));
        assert_eq!(derive_indexed(7, "data", 3), derive_indexed(7, "data", 3));
    }
}
