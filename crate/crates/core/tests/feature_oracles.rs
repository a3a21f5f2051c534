use std::collections::BTreeSet;

use opae::graph_repr::*;
use opae::subvolume::{knn_subvolumes, SamplingConfig};
use opae::trajectory_io::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, k: usize) -> Vec<[f64; 3]> {
    (0..k).map(|_| [rng.random(), rng.random(), rng.random()]).collect()
}

fn relabel(points: &[[f64; 3]], perm: &[usize]) -> Vec<[f64; 3]> {
    perm.iter().map(|&i| points[i]).collect()
}

fn single_frame(points: &[[f64; 3]]) -> Trajectory {
    Trajectory::new(vec![AtomFrame {
        timestep: 0,
        ids: (1..=points.len() as AtomId).collect(),
        positions: points.to_vec(),
        bounds: BoxBounds { lo: [-100.0; 3], hi: [100.0; 3] },
    }])
    .unwrap()
}

fn brute_knn(points: &[[f64; 3]], center: usize, k: usize) -> Vec<AtomId> {
    let mut c: Vec<(f64, AtomId)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != center)
        .map(|(i, p)| {
            let q = points[center];
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), i as AtomId + 1)
        })
        .collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    std::iter::once(center as AtomId + 1).chain(c.into_iter().take(k - 1).map(|x| x.1)).collect()
}

fn all_perms(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_perms(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn knn_matches_brute_force_on_integer_grid() {
    // Integer coordinates force many exact distance ties.
    let mut pts = Vec::new();
    for x in 0..5 {
        for y in 0..4 {
            for z in 0..3 {
                pts.push([x as f64, y as f64, z as f64]);
            }
        }
    }
    let traj = single_frame(&pts);
    let ids: BTreeSet<AtomId> = traj.ids().iter().copied().collect();
    for k in [2, 7, 13, 27, 60] {
        let subs = knn_subvolumes(&traj, &ids, &SamplingConfig { k }).unwrap();
        for (c, s) in subs.iter().enumerate() {
            assert_eq!(s.member_ids, brute_knn(&pts, c, k), "k={k} center={}", c + 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 12usize..80, k in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>() * 10.0, rng.random::<f64>() * 3.0, rng.random()]).collect();
        let traj = single_frame(&pts);
        let ids: BTreeSet<AtomId> = traj.ids().iter().copied().collect();
        let subs = knn_subvolumes(&traj, &ids, &SamplingConfig { k }).unwrap();
        for (c, s) in subs.iter().enumerate() {
            prop_assert_eq!(&s.member_ids, &brute_knn(&pts, c, k));
        }
    }

    #[test]
    fn canonical_form_ignores_labels(seed in any::<u64>(), k in 2usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = cloud(&mut rng, k);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let (a, _) = canonicalize(&DistanceMatrix::from_points(&pts));
        let (b, _) = canonicalize(&DistanceMatrix::from_points(&relabel(&pts, &perm)));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn canonical_rows_have_sorted_norms(seed in any::<u64>(), k in 2usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, _) = canonicalize(&DistanceMatrix::from_points(&cloud(&mut rng, k)));
        for i in 1..k {
            prop_assert!(c.row_norm(i - 1) <= c.row_norm(i));
        }
    }

    #[test]
    fn lj_never_below_well(r in 0.05f64..50.0, eps in 0.01f64..10.0, sigma in 0.1f64..5.0) {
        let p = LJParams::new(eps, sigma).unwrap();
        prop_assert!(lj_potential(r, &p).unwrap() >= -eps);
    }

    #[test]
    fn lj_roundtrip_each_branch(t in 0.0f64..1.0, eps in 0.05f64..5.0, sigma in 0.5f64..3.0) {
        let p = LJParams::new(eps, sigma).unwrap();
        let rm = p.r_min();
        let rep = rm * (0.8 + 0.2 * t);
        let att = rm * (1.0 + 2.0 * t).max(1.0 + 1e-6);
        for (r, b) in [(rep, Branch::Repulsive), (att, Branch::Attractive)] {
            let back = lj_invert(lj_potential(r, &p).unwrap(), &p, b).unwrap();
            prop_assert!((back - r).abs() < 1e-9 * r.max(1.0), "r={} back={}", r, back);
        }
    }

    #[test]
    fn minmax_roundtrip(values in prop::collection::vec(-10.0f64..10.0, 2..40)) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let s = fit_minmax(&values).unwrap();
        let u = apply_minmax(&values, &s);
        prop_assert!(u.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let back = invert_minmax(&u, &s);
        for (a, b) in back.iter().zip(&values) {
            prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn every_relabeling_of_four_points_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perms = all_perms(4);
    assert_eq!(perms.len(), 24);
    for _ in 0..200 {
        let pts = cloud(&mut rng, 4);
        let (reference, _) = canonicalize(&DistanceMatrix::from_points(&pts));
        for p in &perms {
            let (c, _) = canonicalize(&DistanceMatrix::from_points(&relabel(&pts, p)));
            assert_eq!(c, reference);
        }
    }
}

#[test]
fn canonicalization_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let k = rng.random_range(2..=12);
        let (once, _) = canonicalize(&DistanceMatrix::from_points(&cloud(&mut rng, k)));
        let (twice, p) = canonicalize(&once);
        assert_eq!(twice, once);
        assert_eq!(p, CanonicalPermutation::identity(k));
    }
}

#[test]
fn permutation_inverse_restores_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = DistanceMatrix::from_points(&cloud(&mut rng, 9));
    let (c, p) = canonicalize(&d);
    assert_eq!(apply_permutation(&c, &p.inverse()).unwrap(), d);
    assert!(CanonicalPermutation::new(vec![0, 0, 1]).is_err());
    assert!(apply_permutation(&d, &CanonicalPermutation::identity(3)).is_err());
}

#[test]
fn lj_reference_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = vec![LJParams::default()];
    for _ in 0..100 {
        params.push(LJParams::new(rng.random_range(0.01..10.0), rng.random_range(0.1..5.0)).unwrap());
    }
    for p in &params {
        assert_eq!(lj_potential(p.sigma, p).unwrap(), 0.0);
        assert!((lj_potential(p.r_min(), p).unwrap() + p.epsilon).abs() < 1e-12);
    }
    let p = LJParams::default();
    assert!(lj_invert(-0.71, &p, Branch::Repulsive).is_err());
    assert!(lj_invert(0.1, &p, Branch::Attractive).is_err());
    assert!(lj_potential(0.0, &p).is_err());
    assert!(LJParams::new(-1.0, 1.0).is_err());
    assert!((lj_invert(-p.epsilon, &p, Branch::Attractive).unwrap() - p.r_min()).abs() < 1e-12);
}

#[test]
fn potential_vector_layout() {
    let pts = [[0.0, 0.0, 0.0], [1.5, 0.0, 0.0], [0.0, 2.0, 0.0]];
    let d = DistanceMatrix::from_points(&pts);
    let p = LJParams::default();
    let v = potential_vector(&d, &p).unwrap();
    assert_eq!(v.0.len(), triangle_len(3));
    assert_eq!(v.0[0], lj_potential(1.5, &p).unwrap());
    assert_eq!(v.0[1], lj_potential(2.0, &p).unwrap());
    assert_eq!(v.0[2], lj_potential(2.5, &p).unwrap());
    let (k, full) = embed_upper(&v.0, 0.0).unwrap();
    assert_eq!(k, 3);
    assert_eq!(full[3 + 2], v.0[2]);
    assert_eq!(k_from_triangle_len(45).unwrap(), 10);
    assert!(k_from_triangle_len(44).is_err());
}

fn small_dataset() -> (Trajectory, BTreeSet<AtomId>, Dataset) {
    let traj = generate_synthetic_trajectory(&SynthConfig {
        cells_per_axis: 3,
        num_frames: 4,
        ..SynthConfig::default()
    })
    .unwrap();
    let interior = truncate_boundary(&traj, &TruncationConfig::default()).unwrap();
    let ds = build_dataset(&traj, &interior, &SamplingConfig::default(), &LJParams::default()).unwrap();
    (traj, interior, ds)
}

#[test]
fn dataset_shape_and_range() {
    let (traj, interior, ds) = small_dataset();
    assert_eq!(ds.len(), interior.len() * (traj.num_frames() - 1));
    assert_eq!(ds.feature_dim(), 45);
    let all: Vec<f64> = ds.pairs.iter().flat_map(|p| p.u_t.iter().chain(&p.u_t1).copied()).collect();
    assert!(all.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(all.contains(&0.0) && all.contains(&1.0));
    for w in ds.pairs.windows(2) {
        if w[0].center_id == w[1].center_id {
            assert_eq!(w[0].u_t1, w[1].u_t);
            assert_eq!(w[1].transition, w[0].transition + 1);
        }
    }
    let prov: BTreeSet<_> = ds.provenance().into_iter().collect();
    assert_eq!(prov.len(), ds.len());
}

#[test]
fn dataset_file_roundtrip_is_exact() {
    let (_, _, ds) = small_dataset();
    let text = write_dataset(&ds);
    assert_eq!(read_dataset(&text).unwrap(), ds);
    let broken = text.replacen("# k=10", "# k=9", 1);
    assert!(read_dataset(&broken).is_err());
}

#[test]
fn dataset_needs_two_frames() {
    let two = generate_synthetic_trajectory(&SynthConfig { cells_per_axis: 3, num_frames: 2, ..SynthConfig::default() }).unwrap();
    let traj = Trajectory::new(vec![two.frame(0).clone()]).unwrap();
    let interior = truncate_boundary(&traj, &TruncationConfig::default()).unwrap();
    assert_eq!(
        build_dataset(&traj, &interior, &SamplingConfig::default(), &LJParams::default()),
        Err(GraphError::TooFewFrames(1))
    );
}

#[test]
fn constant_values_cannot_be_scaled() {
    assert_eq!(fit_minmax(&[0.3, 0.3]), Err(GraphError::DegenerateRange));
}
