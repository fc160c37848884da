//! `E sup|X − X̃|^{1/4}` between two schemes on common noise, as the step
//! shrinks, for several drifts.

use rsde::fields::DriftField;
use rsde::sde::Scheme;
use rsde::uniqueness::{pathwise_gap, PairExperiment};
use rsde::{DomainSpec, Result, Vec2};

fn main() -> Result<()> {
    let dom = DomainSpec::disk(1.0)?;
    for (name, params) in [("zero", vec![]), ("constant", vec![1.0, 0.5]), ("sign1d", vec![2.0]), ("radial_jump", vec![1.0])] {
        let exp = PairExperiment {
            scheme_a: Scheme::projection(),
            scheme_b: Scheme::Projection { substeps: 2 },
            drift: DriftField::from_preset(name, &params, &dom)?,
            domain: dom,
            x0: Vec2::new(0.2, 0.1),
            x0_b: None,
            horizon: 0.25,
            base_dt: 1.0 / 64.0,
            levels: vec![0, 1, 2, 3, 4],
            seed: 17,
            tau_r: None,
        };
        let g = pathwise_gap(&exp, 400)?;
        let means: Vec<String> = g.rungs.iter().map(|r| format!("{:.4}", r.gap.mean)).collect();
        println!("{:<12} gaps [{}]  order {:.3}  monotone {}  finest/coarsest {:.3}", name, means.join(", "), g.order, g.monotone, g.finest_over_coarsest);
    }
    Ok(())
}
