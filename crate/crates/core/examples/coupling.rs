//! Joint returns of independent pairs on a tower with `m(R > n) = e^2 e^{-n}`.

use quenched::coupling::{check_trace, common_ell0, coupling_trace, joint_tail, overlap_v, JointTailParams, PairLaw};
use quenched::stats::WindowPolicy;
use quenched::tower::{ReturnLaw, Tower, TowerPoint, TowerSpec};

fn main() -> quenched::Result<()> {
    let law = ReturnLaw::StretchedExp { c: 2f64.exp(), gamma: 1.0, upsilon: 1.0 };
    let specs = (0..8).map(|s| TowerSpec::new(law.clone(), s, 60)).collect::<quenched::Result<Vec<_>>>()?;
    let towers = specs.iter().map(|s| Tower::new(s.clone(), 0, 100)).collect::<quenched::Result<Vec<_>>>()?;
    let overlaps = towers.iter().map(|t| overlap_v(t, 0, 60)).collect::<quenched::Result<Vec<_>>>()?;
    let ell0 = common_ell0(&overlaps).expect("aperiodic law");
    println!("V^l on fiber 0: {:.3?}", &overlaps[0].values[..8]);
    println!("l0 = {ell0}");

    let trace = coupling_trace(&towers[0], &TowerPoint::base(0.1, 0), &TowerPoint::base(0.8, 0), ell0, 80)?;
    check_trace(&towers[0], &trace)?;
    println!("stopping times {:?}, T = {:?}", trace.taus, trace.t);

    let params = JointTailParams {
        ns: (0..=60).collect(),
        samples: 1000,
        horizon: 60,
        ell0,
        n_back: 200,
        laws: (PairLaw::Base, PairLaw::Base),
        window: WindowPolicy::default(),
    };
    let jt = joint_tail(&specs, &params)?;
    if let Some(f) = &jt.fit {
        println!("Lambda(T > n): upsilon = {:.3} in [{:.3}, {:.3}], R^2 = {:.4}", f.upsilon, f.upsilon_ci[0], f.upsilon_ci[1], f.r2);
    }
    println!("censored {:.3}, hazards {:.3?}", jt.censored_fraction, &jt.hazards[..jt.hazards.len().min(5)]);
    Ok(())
}
