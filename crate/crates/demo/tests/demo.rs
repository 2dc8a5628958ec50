use mae_demo::{kept_patches, mask_bits, pos_embed, speedup_curve};

#[test]
fn masks_have_the_requested_size() {
    for seed in 0..20 {
        let bits = mask_bits(14, 0.75, "random", seed).unwrap();
        assert_eq!(bits.len(), 196);
        assert_eq!(bits.iter().filter(|&&b| b == 1).count(), 196 - 49);
        let bits = mask_bits(14, 0.5, "block", seed).unwrap();
        assert!(bits.iter().all(|&b| b <= 1));
    }
    assert_eq!(mask_bits(14, 0.8, "random", 0).unwrap().iter().filter(|&&b| b == 0).count(), 39);
    assert_eq!(kept_patches(196, 0.8), 39);
}

#[test]
fn grid_keeps_one_cell_in_each_two_by_two() {
    let bits = mask_bits(4, 0.1, "grid", 3).unwrap();
    for by in 0..2 {
        for bx in 0..2 {
            let visible = (0..4).filter(|k| bits[(2 * by + k / 2) * 4 + 2 * bx + k % 2] == 0).count();
            assert_eq!(visible, 1);
        }
    }
    assert!(mask_bits(4, 0.5, "spiral", 0).is_err());
}

#[test]
fn speedup_curve_starts_at_one_and_grows() {
    let pts = speedup_curve("large", 8, 512, 20).unwrap();
    assert_eq!(pts.len(), 40);
    assert_eq!((pts[0], pts[1]), (0.0, 1.0));
    assert!(pts.chunks(2).zip(pts.chunks(2).skip(1)).all(|(a, b)| b[1] >= a[1]));
    // 20 steps over [0, 0.95] land on 0.75 at the 16th point
    assert!((pts[30] - 0.75).abs() < 1e-12);
    assert!((pts[31] - 3.3).abs() <= 0.3);
    assert!(speedup_curve("giant", 8, 512, 10).is_none());
}

#[test]
fn pos_table_starts_with_sin_zero_cos_one() {
    let t = pos_embed(4, 8).unwrap();
    assert_eq!(t.len(), 32);
    assert_eq!(&t[..8], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    assert!((t[8] - 1f32.sin()).abs() < 1e-6);
}
