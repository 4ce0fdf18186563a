//! Shared fixtures for unit tests: hand-enumerable models small enough to
//! brute-force.

use crate::model::{accuracy_int, GroupWidths, QuantParams, Sample, Topology};
use crate::rng::SplitMix64;

/// Hand-built perfect 8-2-4 model over four inputs (0..4); the label is the
/// input's low two bits. Hidden unit 0 fires on bit 0 (value 4), unit 1 on
/// bit 1. Decision margins are 6, 10, 10, 6.
pub(crate) fn toy_model() -> (QuantParams, Vec<Sample>) {
    let t = Topology::new(8, 2, 4);
    let mut q = QuantParams {
        topology: t,
        precision: 1,
        w1: vec![0; 16],
        b1: vec![0; 2],
        w2: vec![0; 8],
        b2: vec![6, 0, 0, -6],
        widths: GroupWidths { w1: 4, b1: 4, w2: 4, b2: 4 },
    };
    q.w1[0] = 4; // hidden 0 <- bit 0
    q.w1[t.inputs + 1] = 4; // hidden 1 <- bit 1
    q.w2 = vec![
        -1, -1, // y0 = 6 - h0 - h1
        3, -2, //  y1
        -2, 3, //  y2
        2, 2, //   y3 = 2 h0 + 2 h1 - 6
    ];
    let samples: Vec<Sample> = (0..4u8).map(|x| Sample { input: x, label: x as usize }).collect();
    assert_eq!(accuracy_int(&q, &samples), 1.0);
    (q, samples)
}

/// Searches seeded random small models until one classifies its synthetic
/// sample set perfectly. Deterministic: the same `seed` always yields the
/// same model. Returns `None` if no perfect model shows up within the
/// attempt budget (callers should pick seeds known to succeed).
pub(crate) fn random_perfect_model(seed: u64) -> Option<(QuantParams, Vec<Sample>)> {
    let mut rng = SplitMix64::new(seed);
    for _ in 0..5000 {
        let t = Topology::new(8, 2 + (rng.next_u64() % 3) as usize, 3 + (rng.next_u64() % 3) as usize);
        let q = QuantParams {
            topology: t,
            precision: 1,
            w1: (0..t.hidden * t.inputs).map(|_| rng.next_range_i64(-6, 6)).collect(),
            b1: (0..t.hidden).map(|_| rng.next_range_i64(-6, 6)).collect(),
            w2: (0..t.outputs * t.hidden).map(|_| rng.next_range_i64(-6, 6)).collect(),
            b2: (0..t.outputs).map(|_| rng.next_range_i64(-20, 20)).collect(),
            widths: GroupWidths { w1: 4, b1: 4, w2: 4, b2: 6 },
        };
        let samples: Vec<Sample> = (0..t.outputs as u8)
            .map(|x| Sample { input: x, label: x as usize })
            .collect();
        if accuracy_int(&q, &samples) == 1.0 {
            return Some((q, samples));
        }
    }
    None
}
