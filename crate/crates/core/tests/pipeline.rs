use proptest::prelude::*;
use snapddm_core::datagen::{device_problem, MaterialMode};
use snapddm_core::dataset::{generate_to_file, DatasetSpec, SndsReader};
use snapddm_core::ddm::{ddm_iterate, masked_relative_l1, run_ddm, stitch, DdmConfig, DdmSetup, DdmState, SolverSet};
use snapddm_core::fdfd::solve_global;
use snapddm_core::subdomain::{ExactSubdomainSolver, SubdomainClass};
use snapddm_core::{relative_l1, WavevectorConvention};

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec { simulations: 2, crops_per_simulation: 12, n: 192, pml_thickness: 20, seed, ..Default::default() }
}

#[test]
fn stored_crops_are_solved_by_their_own_boundary_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.snds");
    let header = generate_to_file(&small_spec(3), &path).unwrap();
    let mut r = SndsReader::open(&path).unwrap();
    assert_eq!(r.len(), 24);
    let samples = r.read_all().unwrap();
    for class in [SubdomainClass::Material, SubdomainClass::Source, SubdomainClass::Pml] {
        assert!(samples.iter().any(|s| s.class == class), "no {class:?} crop");
    }
    let solver = ExactSubdomainSolver::new();
    for s in &samples {
        let h = solver.solve(&s.to_problem(header.k0_delta, header.convention)).unwrap();
        // Stored as f32, so agreement is at single precision.
        let rel = relative_l1(&h, &s.h).unwrap();
        assert!(rel < 1e-5, "{:?} crop off by {rel:e}", s.class);
    }
}

#[test]
fn dataset_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.snds"), dir.path().join("b.snds"));
    generate_to_file(&small_spec(5), &a).unwrap();
    generate_to_file(&small_spec(5), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn global_solution_is_a_ddm_fixed_point() {
    let p = device_problem(184, 2.25, MaterialMode::Grf { corr_len: 6.0 }, 1, WavevectorConvention::default()).unwrap();
    let setup = DdmSetup::new(&p, 4).unwrap();
    let global = solve_global(&p.eps, &p.source, &p.grid, &p.pml, &p.bloch).unwrap();
    let exact = ExactSubdomainSolver::new();
    let state = DdmState::from_global(&setup, &global).unwrap();
    let next = ddm_iterate(&state, &setup, &SolverSet::uniform(&exact)).unwrap();
    let rel = masked_relative_l1(&stitch(&next, &setup.tiling), &global, &setup.measure_mask).unwrap();
    assert!(rel < 1e-9, "{rel:e}");
}

#[test]
fn exact_ddm_reaches_threshold_and_tracks_oracle() {
    let p = device_problem(184, 1.5, MaterialMode::Grf { corr_len: 6.0 }, 2, WavevectorConvention::default()).unwrap();
    let setup = DdmSetup::new(&p, 4).unwrap();
    let global = solve_global(&p.eps, &p.source, &p.grid, &p.pml, &p.bloch).unwrap();
    let exact = ExactSubdomainSolver::new();
    let cfg = DdmConfig { max_iters: 200, ..Default::default() };
    let out = run_ddm(&p, &setup, &cfg, &SolverSet::uniform(&exact), Some(&global)).unwrap();
    assert!(out.converged, "{} sweeps", out.trace.len());
    let last = out.trace.last().unwrap();
    assert!(last.normalized_residual < cfg.residual_threshold);
    let first_err = out.trace[0].rel_l1_vs_oracle.unwrap();
    let last_err = last.rel_l1_vs_oracle.unwrap();
    assert!(last_err < 0.05 && last_err < first_err, "{first_err} -> {last_err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn quarter_turns_compose_to_identity(seed in 0u64..1000, q in 0usize..4) {
        let spec = DatasetSpec { simulations: 1, crops_per_simulation: 2, n: 192, pml_thickness: 20, augment_rot: false, seed, ..Default::default() };
        let mut crops = Vec::new();
        snapddm_core::dataset::generate(&spec, |s| {
            crops.push(s);
            Ok(())
        })
        .unwrap();
        for s in &crops {
            let back = s.rot90(q).rot90((4 - q) % 4);
            prop_assert_eq!(&back.h, &s.h);
            prop_assert_eq!(back.class, s.class);
        }
    }
}
