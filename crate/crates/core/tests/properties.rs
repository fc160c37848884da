use proptest::prelude::*;
use rsde::io::fmt17;
use rsde::{DomainSpec, Vec2};

fn domains() -> impl Strategy<Value = DomainSpec> {
    prop_oneof![
        (0.2f64..3.0).prop_map(|r| DomainSpec::disk(r).unwrap()),
        (0.3f64..3.0, 0.3f64..3.0).prop_map(|(a, b)| DomainSpec::ellipse(a, b).unwrap()),
    ]
}

proptest! {
    #[test]
    fn fmt17_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
    }

    #[test]
    fn nearest_point_lies_on_the_boundary(d in domains(), s in 0.0f64..1.0, t in -0.4f64..0.4) {
        let p = d.boundary_point(s);
        let x = p + d.boundary_normal(&p) * (t * d.uniform_sphere_radius());
        let q = d.nearest_boundary_point(&x).unwrap();
        prop_assert!(d.level(&q).abs() < 1e-9);
        prop_assert!((q - p).norm() < 1e-7);
        prop_assert!((d.signed_distance(&x).unwrap() - t * d.uniform_sphere_radius()).abs() < 1e-7);
    }

    #[test]
    fn boundary_param_inverts_boundary_point(d in domains(), s in 0.0f64..0.999) {
        let back = d.boundary_param(&d.boundary_point(s));
        let wrapped = (back - s).abs().min(1.0 - (back - s).abs());
        prop_assert!(wrapped < 1e-9, "{} vs {}", back, s);
    }

    #[test]
    fn interval_distance_is_to_the_closer_end(a in -5.0f64..0.0, w in 0.1f64..5.0, u in 0.0f64..1.0) {
        let d = DomainSpec::interval(a, a + w).unwrap();
        let x = Vec2::new(a + u * w, 0.0);
        let sd = d.signed_distance(&x).unwrap();
        prop_assert!((sd - (u * w).min((1.0 - u) * w)).abs() < 1e-12);
        prop_assert!(d.contains_closed(&x));
    }
}
