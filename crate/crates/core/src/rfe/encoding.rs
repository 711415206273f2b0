use crate::geometry::{Point3, Roi};

pub const AUGMENTED_DIM: usize = 27;

/// A canonical point followed by its displacement from each of the eight
/// vertices (`p − vertex_k`).
pub fn augmented_coord(p: Point3, roi: &Roi) -> [f64; AUGMENTED_DIM] {
    let v = roi.vertices();
    let mut out = [0.0; AUGMENTED_DIM];
    out[..3].copy_from_slice(&p);
    for k in 0..8 {
        let vk = v.get(k);
        for a in 0..3 {
            out[3 + 3 * k + a] = p[a] - vk[a];
        }
    }
    out
}

/// Position-encoding input `c̃ − p̃`, where `c̃` is the augmented coordinate
/// of the ROI center (the canonical origin).
pub fn encoding_input(p: Point3, roi: &Roi) -> [f64; AUGMENTED_DIM] {
    let c = augmented_coord([0.0; 3], roi);
    let q = augmented_coord(p, roi);
    std::array::from_fn(|i| c[i] - q[i])
}
