//! Property tests of structural invariants.

use proptest::prelude::*;
use regime_smp::chain::{left_limit_state, sample_chain, GeneratorMatrix};
use regime_smp::mp::{
    h_function, hamiltonian, penalty_multipliers, CandidateMeans, HamiltonianContext,
};
use regime_smp::scenario::{
    spike_overlay, BilinearFamily, ControlModel, ControlSet, FamilyRegime, Point, SpikeWindow,
};

fn coef() -> impl Strategy<Value = f64> {
    -2.0..2.0f64
}

prop_compose! {
    fn regime()(a in prop::array::uniform16(coef())) -> FamilyRegime {
        FamilyRegime {
            a1: a[0], a2: a[1], a3: a[2], a4: a[3],
            b0: a[4], b1: a[5], b2: a[6], b3: a[7], b4: a[8],
            c1: a[9], c2: a[10], c3: a[11], c4: a[12], c5: a[13],
            d1: a[14], d2: a[15],
            ..Default::default()
        }
    }
}

proptest! {
    #[test]
    fn h_function_equals_hamiltonian_at_base(
        r in regime(),
        t in 0.0..1.0f64,
        st in prop::array::uniform5(coef()),
        adj in prop::array::uniform6(-5.0..5.0f64),
    ) {
        let fam = BilinearFamily::new(vec![r], 2.0).unwrap();
        let base = Point::full(t, st[0], st[1], st[2], st[3], st[4] / 2.0, 0);
        let ctx = HamiltonianContext {
            base,
            v: base.v,
            p0: adj[0],
            p1: adj[1],
            q0: adj[2],
            pp0: adj[3],
            pp1: adj[4],
            means: CandidateMeans { b: adj[5], ds2: 0.0 },
        };
        prop_assert_eq!(ctx.delta_sigma(&fam), 0.0);
        prop_assert_eq!(h_function(&fam, &ctx), hamiltonian(&fam, &ctx));
    }

    #[test]
    fn multipliers_lie_on_unit_circle(gap in -10.0..10.0f64, kappa in 1e-3..10.0f64, psi in -10.0..10.0f64) {
        if let Some((j, l, m)) = penalty_multipliers(gap, kappa, psi) {
            prop_assert!(j > 0.0);
            prop_assert!((l * l + m * m - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn chain_grid_uses_left_limits(seed in any::<u64>(), rate in 0.1..5.0f64, steps in 1usize..64) {
        let gen = GeneratorMatrix::two_state(rate).unwrap();
        let path = sample_chain(&gen, 0, 1.0, steps, seed).unwrap();
        for k in 1..=steps {
            prop_assert_eq!(path.grid()[k], left_limit_state(&path, path.node(k)).unwrap());
        }
    }

    #[test]
    fn spike_overlay_is_piecewise(k0 in 0usize..90, len in 1usize..10, t in 0.0..1.0f64) {
        let set = ControlSet::Finite(vec![-1.0, 0.0, 1.0]);
        let base = ControlModel::constant(set.clone(), -1.0).unwrap();
        let alt = ControlModel::constant(set, 1.0).unwrap();
        let (t0, eps) = (k0 as f64 / 100.0, len as f64 / 100.0);
        let w = SpikeWindow::single(t0, eps, 1.0, 100).unwrap();
        let v = spike_overlay(&base, &alt, &w).eval(t, 0.0, 0.0, 0);
        let expected = if w.contains(t) { 1.0 } else { -1.0 };
        prop_assert_eq!(v, expected);
    }
}
