use proptest::prelude::*;
use spikeseg::data::{generate_clean_subject, generate_phantom, slice_volume, stack_slices};
use spikeseg::metrics::{dice_2d, dice_3d, mean_std};

fn naive_dice(p: &[bool], r: &[bool]) -> f64 {
    let inter = p.iter().zip(r).filter(|(a, b)| **a && **b).count();
    let total = p.iter().filter(|a| **a).count() + r.iter().filter(|b| **b).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

#[test]
fn phantom_contract() {
    let a = generate_phantom(11, 6).unwrap();
    assert_eq!(a, generate_phantom(11, 6).unwrap());
    for v in &a {
        let f = v.mask_fraction();
        assert!((0.02..=0.08).contains(&f), "subject {} fraction {f}", v.subject);
        v.validate().unwrap();
    }
}

#[test]
fn phantom_contrast_pre_noise() {
    for s in 0..10 {
        let v = generate_clean_subject(3, s);
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for (x, m) in v.intensities.iter().zip(&v.mask) {
            if *m == 1 {
                fg += *x as f64;
                nf += 1;
            } else {
                bg += *x as f64;
                nb += 1;
            }
        }
        let c = fg / nf as f64 - bg / nb as f64;
        assert!(c >= 0.15, "subject {s} contrast {c}");
    }
}

#[test]
fn slicing_keeps_empty_slices_and_inverts() {
    let v = &generate_phantom(2, 1).unwrap()[0];
    let s = slice_volume(v).unwrap();
    assert_eq!(s.len(), 24);
    assert!(s.iter().any(|x| x.mask.iter().all(|&m| m == 0)));
    assert_eq!(&stack_slices(v.subject, &s).unwrap(), v);
}

#[test]
fn dice_3d_erosion_matches_counting() {
    let (d, h, w) = (6, 8, 8);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut truth = vec![false; d * h * w];
    for z in 1..5 {
        for y in 2..7 {
            for x in 1..6 {
                truth[idx(z, y, x)] = true;
            }
        }
    }
    let mut eroded = vec![false; d * h * w];
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let nb = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                eroded[idx(z, y, x)] = nb.iter().all(|&(a, b, c): &(i32, i32, i32)| {
                    truth[idx((z as i32 + a) as usize, (y as i32 + b) as usize, (x as i32 + c) as usize)]
                });
            }
        }
    }
    assert_eq!(dice_3d(&eroded, &truth).unwrap(), naive_dice(&eroded, &truth));
    assert!(dice_3d(&eroded, &truth).unwrap() < 1.0);
}

#[test]
fn two_pass_aggregation() {
    let v: Vec<f64> = (0..37).map(|i| 70.0 + ((i * 7919) % 97) as f64 * 0.3).collect();
    let m = mean_std(&v).unwrap();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
    assert!((m.mean - mean).abs() < 1e-12);
    assert!((m.std - var.sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_2d_matches_oracle(p in prop::collection::vec(any::<bool>(), 64), r in prop::collection::vec(any::<bool>(), 64)) {
        prop_assert_eq!(dice_2d(&p, &r).unwrap(), naive_dice(&p, &r));
    }

    #[test]
    fn dice_3d_matches_oracle(p in prop::collection::vec(any::<bool>(), 144), r in prop::collection::vec(any::<bool>(), 144)) {
        prop_assert_eq!(dice_3d(&p, &r).unwrap(), naive_dice(&p, &r));
    }
}
