use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stegograph::autodiff::ParamStore;
use stegograph::cnn::{BoundCnn, ShallowCnn, ShallowCnnConfig};
use stegograph::patch_graph::{
    add_self_loops, build_complete_graph, build_lattice_graph, extract_patches, image_to_graph, node_index,
};
use stegograph::{GrayImage, PatchPlan, TopologyKind};

fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GrayImage::new(h, w, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
}

#[test]
fn disjoint_two_by_two_offsets() {
    let p = PatchPlan::new(512, 512, 256, 256, 2, 2, 0.0, 0.0).unwrap();
    assert_eq!(p.offsets(), &[(1, 1), (1, 257), (257, 1), (257, 257)]);
}

#[test]
fn half_overlap_three_by_three_offsets() {
    let p = PatchPlan::new(512, 512, 256, 256, 3, 3, 0.5, 0.5).unwrap();
    assert_eq!(
        p.offsets(),
        &[(1, 1), (1, 129), (1, 257), (129, 1), (129, 129), (129, 257), (257, 1), (257, 129), (257, 257)]
    );
    assert_eq!(p.offset(2, 2), (129, 129));
}

#[test]
fn center_patch_starts_at_its_offset() {
    let img = random_image(512, 512, 1);
    let plan = PatchPlan::new(512, 512, 256, 256, 3, 3, 0.5, 0.5).unwrap();
    let grid = extract_patches(&img, &plan).unwrap();
    let center = &grid.patches()[node_index(2, 2, 3)];
    assert_eq!(center[0], img.get(128, 128));
}

#[test]
fn whole_image_patch() {
    let img = random_image(20, 30, 2);
    let plan = PatchPlan::new(20, 30, 20, 30, 1, 1, 0.0, 0.0).unwrap();
    let grid = extract_patches(&img, &plan).unwrap();
    assert_eq!(grid.patches().len(), 1);
    assert_eq!(grid.patches()[0], img.pixels());
}

#[test]
fn overlapping_region_is_shared() {
    let img = random_image(64, 64, 3);
    let plan = PatchPlan::new(64, 64, 32, 32, 3, 3, 0.5, 0.5).unwrap();
    let grid = extract_patches(&img, &plan).unwrap();
    let (a, b) = (&grid.patches()[0], &grid.patches()[1]);
    // patch (1,2) starts 16 columns right of patch (1,1)
    for r in 0..32 {
        for c in 0..16 {
            assert_eq!(a[r * 32 + 16 + c], b[r * 32 + c]);
        }
    }
}

#[test]
fn plan_image_mismatch_is_rejected() {
    let plan = PatchPlan::new(64, 64, 32, 32, 2, 2, 0.0, 0.0).unwrap();
    assert!(extract_patches(&random_image(64, 65, 4), &plan).is_err());
}

proptest! {
    #[test]
    fn plan_invariants(
        hp in 1usize..=16, wp in 1usize..=16, n in 1usize..=4, m in 1usize..=4,
        a_num in 0usize..4, b_num in 0usize..4, extra_h in 0usize..5, extra_w in 0usize..5,
    ) {
        let alpha = a_num as f64 / 4.0;
        let beta = b_num as f64 / 4.0;
        let cs = (1.0 - alpha) * wp as f64;
        let rs = (1.0 - beta) * hp as f64;
        prop_assume!(cs.fract() == 0.0 && rs.fract() == 0.0 && cs >= 1.0 && rs >= 1.0);
        let h = (n - 1) * rs as usize + hp + extra_h;
        let w = (m - 1) * cs as usize + wp + extra_w;
        let plan = PatchPlan::new(h, w, hp, wp, n, m, alpha, beta).unwrap();
        for u in 1..=n {
            for v in 1..=m {
                let (f, g) = plan.offset(u, v);
                prop_assert!(f + hp - 1 <= h && g + wp - 1 <= w);
                prop_assert_eq!(f, plan.offset(u, 1).0);
                prop_assert_eq!(g, plan.offset(1, v).1);
                if v > 1 { prop_assert!(g > plan.offset(u, v - 1).1); }
                if u > 1 { prop_assert!(f > plan.offset(u - 1, v).0); }
            }
        }
        let img = random_image(h, w, (h * 31 + w) as u64);
        let grid = extract_patches(&img, &plan).unwrap();
        for (k, &(f, g)) in plan.offsets().iter().enumerate() {
            for r in 0..hp {
                for c in 0..wp {
                    prop_assert_eq!(grid.patches()[k][r * wp + c], img.get(f - 1 + r, g - 1 + c));
                }
            }
        }
    }

    #[test]
    fn disjoint_tiling_covers_each_pixel_once(hp in 1usize..=8, wp in 1usize..=8, n in 1usize..=4, m in 1usize..=4) {
        let (h, w) = (n * hp, m * wp);
        let plan = PatchPlan::new(h, w, hp, wp, n, m, 0.0, 0.0).unwrap();
        let mut hits = vec![0u32; h * w];
        for &(f, g) in plan.offsets() {
            for r in f - 1..f - 1 + hp {
                for c in g - 1..g - 1 + wp {
                    hits[r * w + c] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&k| k == 1));
    }

    #[test]
    fn lattice_edge_count_and_symmetry(n in 1usize..=7, m in 1usize..=7) {
        let t = build_lattice_graph(n, m);
        prop_assert!(t.is_symmetric());
        prop_assert_eq!(t.edge_count(), (n - 1) * m + n * (m - 1) + 2 * (n - 1) * (m - 1));
        prop_assert!(build_complete_graph(n * m).is_symmetric());
    }
}

#[test]
fn image_to_graph_shapes_and_constant_rows() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cnn = ShallowCnn::new(&mut store, ShallowCnnConfig::new(1).unwrap(), &mut rng).unwrap();
    let ex = BoundCnn { cnn: &cnn, store: &store };

    let plan = PatchPlan::new(32, 32, 16, 16, 3, 3, 0.5, 0.5).unwrap();
    let (a, w) = image_to_graph(&random_image(32, 32, 6), &plan, TopologyKind::Complete, &ex).unwrap();
    assert_eq!(a.node_count(), 9);
    assert!(a.has_self_loops());
    assert_eq!((w.rows, w.dim), (9, 8));

    let (a, w) = image_to_graph(&GrayImage::filled(32, 32, 77), &plan, TopologyKind::Lattice, &ex).unwrap();
    assert_eq!(a, add_self_loops(&build_lattice_graph(3, 3)));
    for r in 1..9 {
        assert_eq!(w.row(r), w.row(0));
    }
}
