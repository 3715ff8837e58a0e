#![no_main]

use libfuzzer_sys::fuzz_target;

// Task CSVs are the main untrusted input surface: arbitrary kinds, ragged
// rows, non-numeric fields, inconsistent dimensions. Polytope rows resolve
// their ring through the companion lookup, stubbed with a valid triangle.
fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = aggp::data::parse_task_csv(text, "fuzz.csv", |_| {
            Ok(vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]])
        });
    }
});
