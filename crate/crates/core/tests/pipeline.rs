use gje_core::alexandrov::{solve_alexandrov, DiscreteMeasure, GridMeasure, SolverOptions};
use gje_core::expmaps;
use gje_core::gconvex::{g_subdifferential, Envelope};
use gje_core::genfun::{check_gmono, Builtin, ConstantsLedger, GenFun, WindowS};
use gje_core::mtw::{scan_g3, G3Verdict};

#[test]
fn nonflat_window_constants_flow_through_ledger() {
    let spec = GenFun::builtin(Builtin::NonFlat, 2).unwrap();
    let window = WindowS::default_for(&spec).unwrap();
    let mut ledger = ConstantsLedger::default();
    let mono = check_gmono(&spec, &window, 5, &mut ledger);
    assert!(mono.holds);
    assert!(mono.beta.unwrap() > 0.0);
    let ce = expmaps::estimate_ce(&spec, &window, 5, &mut ledger).unwrap();
    assert!(ce >= 1.0);
    let scan = scan_g3(&spec, &window, 5, 4, 0, &mut ledger);
    assert_eq!(scan.verdict, G3Verdict::G3s);
    assert!(scan.min_value.unwrap() > 0.0);
    assert_eq!(scan.skip_rate(), 0.0);
}

#[test]
fn solved_heights_reproduce_cells_as_subdifferentials() {
    // 1D cubic-in-v generating function: nonlinear in the heights
    let spec = GenFun::builtin(Builtin::CubicV, 1).unwrap();
    let mu = GridMeasure::uniform(spec.x_domain(), 256).unwrap();
    let atoms: Vec<Vec<f64>> = (0..8).map(|j| vec![(j as f64 + 0.5) / 8.0]).collect();
    let nu = DiscreteMeasure::uniform(atoms.clone()).unwrap();
    let sol = solve_alexandrov(&spec, &mu, &nu, &SolverOptions { tol: 1e-6, ..Default::default() }).unwrap();
    assert!(sol.state.residual <= 1e-6);
    let total: f64 = sol.state.cell_masses.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);

    let foci: Vec<(Vec<f64>, f64)> = atoms.into_iter().zip(sol.state.heights.iter().copied()).collect();
    let phi = Envelope::from_foci(&foci).unwrap();
    let mut mismatched = 0;
    for (x, &cell) in mu.centers.iter().zip(&sol.cells) {
        let sub = g_subdifferential(&spec, &phi, x, 1e-12).unwrap();
        if !sub.attaining.contains(&cell) {
            mismatched += 1;
        }
    }
    assert_eq!(mismatched, 0);
}
