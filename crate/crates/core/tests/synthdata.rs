use polystain::evalkit::{dab_mask, StainMatrix, DEFAULT_DAB_THRESHOLD};
use polystain::image::Mask;
use polystain::synthdata::{generate_dataset, generate_tile, Marker, TissueSpec};
use proptest::prelude::*;

/// 8-connected component count by iterative flood fill.
fn components(m: &Mask) -> usize {
    let (w, h) = m.dims();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || !m.bits()[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.bits()[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
    }
    count
}

#[test]
fn flood_fill_oracle_counts_blobs() {
    let m = Mask::from_fn(6, 6, |x, y| (x < 2 && y < 2) || (x == 5 && y == 5) || (x == 3 && y == 0));
    assert_eq!(components(&m), 3);
    let diagonal = Mask::from_fn(4, 4, |x, y| x == y);
    assert_eq!(components(&diagonal), 1);
}

#[test]
fn three_glands_of_ten_nuclei_give_thirty_components() {
    let spec = TissueSpec {
        gland_count_range: [3, 3],
        nuclei_per_gland_range: [10, 10],
        negative_fraction: 0.0,
        ..Default::default()
    };
    for seed in 0..20 {
        let r = generate_tile(&spec, seed).unwrap();
        assert_eq!(components(&r.nuclei_mask), 30, "seed {seed}");
    }
}

#[test]
fn negative_fraction_holds_over_a_large_dataset() {
    for fraction in [0.0, 0.2, 0.5] {
        let spec = TissueSpec {
            negative_fraction: fraction,
            ..Default::default()
        };
        let records = generate_dataset(&spec, 1000, 17).unwrap();
        let observed = records.iter().filter(|r| r.is_negative).count() as f64 / records.len() as f64;
        assert!((observed - fraction).abs() <= 0.02, "{fraction}: {observed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rendered_dab_matches_compartments(seed in any::<u64>()) {
        let spec = TissueSpec { negative_fraction: 0.0, ..Default::default() };
        let r = generate_tile(&spec, seed).unwrap();
        r.check_invariants().unwrap();
        let m = StainMatrix::hdab();
        let n = (r.input_tile.width() * r.input_tile.height()) as f64;
        for marker in Marker::ALL {
            let dab = dab_mask(r.target(marker).unwrap(), &m, DEFAULT_DAB_THRESHOLD).pixels;
            let off = dab.disagreement(r.compartment(marker)) as f64 / n;
            prop_assert!(off <= 0.01, "{marker}: {off}");
        }
    }

    #[test]
    fn compartments_are_disjoint_and_inside_glands(seed in any::<u64>()) {
        let r = generate_tile(&TissueSpec::default(), seed).unwrap();
        prop_assert!(r.nuclei_mask.and(&r.cytoplasm_mask).is_empty());
        prop_assert!(r.nuclei_mask.is_subset_of(&r.gland_mask));
        prop_assert!(r.cytoplasm_mask.is_subset_of(&r.gland_mask));
    }
}
