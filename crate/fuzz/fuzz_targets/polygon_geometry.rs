#![no_main]

use libfuzzer_sys::fuzz_target;

use aggp::supports::{measure, quadrature, Support};

// Polygon validation and clipping on adversarial vertex data. For any
// polygon the constructor accepts, the quadrature weights must reproduce
// the shoelace area (the clipping path is exact up to roundoff).
fuzz_target!(|data: &[u8]| {
    if data.len() > 16 * 64 {
        return;
    }
    let mut vertices = Vec::new();
    for chunk in data.chunks_exact(16) {
        let x = f64::from_le_bytes(chunk[..8].try_into().unwrap());
        let y = f64::from_le_bytes(chunk[8..].try_into().unwrap());
        vertices.push([x, y]);
    }
    if let Ok(poly) = Support::polygon(vertices.clone()) {
        let area = measure(&poly).unwrap();
        // The shoelace sum itself carries roundoff of order
        // max_coord^2 * eps; when the area is dominated by that
        // cancellation, only positivity is checkable.
        let scale = vertices
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, c| m.max(c.abs()));
        let well_conditioned = area > 1e-9 * scale * scale;
        if area > 1e-9 && area < 1e12 {
            let rule = quadrature(&poly, 8).expect("valid polygon quadrature");
            assert!(rule.weights.iter().all(|w| *w > 0.0));
            if well_conditioned {
                let sum = rule.weight_sum();
                assert!(
                    (sum - area).abs() <= 1e-6 * area + 1e-9,
                    "weight sum {sum} vs area {area}"
                );
            }
        }
    }
});
