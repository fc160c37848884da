//! Preset domains: projection, normals, the uniform sphere radius and the
//! reference cone.

use rsde::{DomainSpec, Result, Vec2};

fn main() -> Result<()> {
    for dom in [DomainSpec::interval(-1.0, 1.0)?, DomainSpec::disk(1.0)?, DomainSpec::ellipse(1.5, 1.0)?] {
        let (angle, radius) = dom.reference_cone();
        println!("{}: dim {}, volume {:.4}, delta0 {:.4}", dom.preset_name(), dom.dim(), dom.volume(), dom.uniform_sphere_radius());
        println!("  reference cone: half-angle {:.4} rad, radius {:.4}", angle, radius);
        let x = if dom.dim() == 1 { Vec2::new(1.3, 0.0) } else { Vec2::new(1.2, 0.9) };
        let p = dom.nearest_boundary_point(&x)?;
        println!("  x = ({:.2}, {:.2}) projects to ({:.5}, {:.5}), signed distance {:.5}", x.x, x.y, p.x, p.y, dom.signed_distance(&x)?);
        let n = dom.boundary_normal(&p);
        println!("  inward normal there: ({:.5}, {:.5})", n.x, n.y);
    }
    Ok(())
}
