//! Random tower with geometric return times: the equivariant density, its
//! equivariance defect along an `N_back` ladder, and the tower map itself.

use quenched::tower::{equivariance_defect, equivariant_density, ReturnLaw, Tower, TowerPoint, TowerSpec};

fn main() -> quenched::Result<()> {
    let spec = TowerSpec::new(ReturnLaw::Geometric { p: 0.3, jitter: 0.5 }, 4, 80)?;
    let tower = Tower::new(spec, -1200, 10)?;

    let mut p = TowerPoint::base(0.9, 0);
    for _ in 0..6 {
        let q = tower.map(&p)?;
        println!("{p:?} -> {q:?}");
        p = q;
    }

    for n_back in [125, 250, 500, 1000] {
        let rho = equivariant_density(&tower, 0, n_back, 0.05)?;
        let next = equivariant_density(&tower, 1, n_back, 0.05)?;
        println!(
            "N_back = {n_back:4}: defect {:.2e}, sup {:.4}, total {:.6}",
            equivariance_defect(&tower, &rho, &next)?,
            rho.sup,
            rho.total()
        );
    }
    Ok(())
}
