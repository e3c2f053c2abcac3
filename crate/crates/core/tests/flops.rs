use proptest::prelude::*;
use vidseg::flops::{
    conv_flops, flops_fast_unit, flops_faster_unit, flops_standard_unit, measured_unit_macs, network_cost_report,
    unit_flops, UnitComparison, UnitCostInputs,
};
use vidseg::{NetworkConfig, RecurrentUnitSpec, UnitDesign, Version};

#[test]
fn reference_operating_point() {
    let c = UnitCostInputs::new(128, 128, 3, 1, 1);
    assert_eq!(flops_standard_unit(&c).unwrap(), 2_364_032);
    assert_eq!(flops_fast_unit(&c).unwrap(), 1_198_400);
    assert_eq!(flops_faster_unit(&c).unwrap(), 44_352);
    let cmp = UnitComparison::new(c).unwrap();
    assert_eq!(format!("{:.2}", 100.0 * cmp.faster_over_standard), "1.88");
    assert_eq!(format!("{:.2}", 100.0 * cmp.faster_over_fast), "3.70");
    assert_eq!(format!("{:.2}", 100.0 * cmp.fast_over_standard), "50.69");
}

#[test]
fn hand_expanded_formulas() {
    // I=4, O=6, 3x5 kernel, 7x2 map.
    let c = UnitCostInputs {
        i: 4,
        o: 6,
        kx: 3,
        ky: 5,
        dx: 7,
        dy: 2,
    };
    let d = 14;
    assert_eq!(flops_standard_unit(&c).unwrap(), (16 * 15 * 4 + 37) * 6 * d);
    assert_eq!(flops_fast_unit(&c).unwrap(), ((16 * 15 * 4 + 37) * 3 + 2 * 4 * 3) * d);
    assert_eq!(
        flops_faster_unit(&c).unwrap(),
        ((2 * 4 + 16 * 15 + 37) * 3 + 2 * 4 * 3) * d
    );
}

#[test]
fn odd_widths_and_zeros_are_rejected() {
    let odd = UnitCostInputs::new(4, 5, 3, 2, 2);
    assert!(flops_standard_unit(&odd).is_ok());
    assert!(flops_fast_unit(&odd).is_err());
    assert!(flops_faster_unit(&odd).is_err());
    assert!(flops_standard_unit(&UnitCostInputs::new(0, 4, 3, 2, 2)).is_err());
}

#[test]
fn instrumented_macs_match_conv_terms() {
    for (ch, k, d) in [(8usize, 3usize, 5usize), (16, 5, 4), (6, 1, 3)] {
        let c = UnitCostInputs::new(ch as u64, ch as u64, k as u64, d as u64, d as u64);
        for design in [UnitDesign::Standard, UnitDesign::Faster] {
            let measured = measured_unit_macs(RecurrentUnitSpec::new(design, ch, k), d, d).unwrap();
            assert_eq!(
                2 * measured,
                conv_flops(design, &c).unwrap(),
                "{} ch={ch} k={k}",
                design.name()
            );
        }
    }
}

#[test]
fn fast_unit_runs_its_hidden_convs_at_half_width() {
    // The cell behind a Fast unit has O/2 hidden channels, so its four
    // hidden-to-gate convolutions see O/2 inputs, not I.
    for (ch, k, d) in [(8u64, 3u64, 5u64), (16, 5, 4)] {
        let half = ch / 2;
        let taps = k * k;
        let structural = (4 * taps * ch * half + 4 * taps * half * half + ch * half) * d * d;
        let spec = RecurrentUnitSpec::new(UnitDesign::Fast, ch as usize, k as usize);
        assert_eq!(measured_unit_macs(spec, d as usize, d as usize).unwrap(), structural);
    }
}

#[test]
fn network_report_counts_every_placement() {
    let cfg = NetworkConfig::default().with_version(Version::V6, UnitDesign::Faster);
    let report = network_cost_report(&cfg).unwrap();
    assert_eq!(report.placements.len(), 4);
    let total: u64 = report.placements.iter().map(|p| p.flops).sum();
    assert_eq!(report.recurrent_flops, total);
    assert_eq!(report.total_flops, total + report.backbone_flops);
    let base = network_cost_report(&NetworkConfig::default()).unwrap();
    assert_eq!(base.recurrent_flops, 0);
    assert_eq!(base.backbone_flops, report.backbone_flops);
}

fn inputs() -> impl Strategy<Value = UnitCostInputs> {
    (
        1u64..64,
        1u64..32,
        prop::sample::select(vec![1u64, 3, 5, 7]),
        1u64..32,
        1u64..32,
    )
        .prop_map(|(i, half, k, dx, dy)| UnitCostInputs::new(i, 2 * half, k, dx, dy))
}

proptest! {
    #[test]
    fn cost_is_linear_in_area(c in inputs(), m in 1u64..5) {
        let wide = UnitCostInputs { dx: c.dx * m, ..c };
        let tall = UnitCostInputs { dy: c.dy * m, ..c };
        for design in UnitDesign::ALL {
            let base = unit_flops(design, &c).unwrap();
            prop_assert_eq!(unit_flops(design, &wide).unwrap(), m * base);
            prop_assert_eq!(unit_flops(design, &tall).unwrap(), m * base);
        }
    }

    #[test]
    fn designs_are_ordered_by_cost(c in inputs()) {
        let s = flops_standard_unit(&c).unwrap();
        let f = flops_fast_unit(&c).unwrap();
        let x = flops_faster_unit(&c).unwrap();
        prop_assert!(f < s);
        // With a single input channel the reduction costs more than it saves.
        if c.i >= 2 {
            prop_assert!(x < f);
        }
    }

    #[test]
    fn standard_cost_grows_with_input_width(c in inputs()) {
        let more = UnitCostInputs { i: c.i + 1, ..c };
        prop_assert!(flops_standard_unit(&more).unwrap() > flops_standard_unit(&c).unwrap());
        prop_assert!(flops_faster_unit(&more).unwrap() > flops_faster_unit(&c).unwrap());
    }
}
