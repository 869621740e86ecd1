#![no_main]

use libfuzzer_sys::fuzz_target;
use sweep_core::dynamics::DiscreteTrajectory;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = DiscreteTrajectory::read_csv(data) {
        t.validate_shape().expect("reader output has a consistent shape");
        let body = t.to_csv_string().expect("writes");
        DiscreteTrajectory::read_csv(body.as_bytes()).expect("written form reads back");
    }
});
