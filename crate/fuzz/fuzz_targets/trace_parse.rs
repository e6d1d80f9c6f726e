#![no_main]

use libfuzzer_sys::fuzz_target;
use osd_core::workload::parse_trace;

fuzz_target!(|data: &[u8]| {
    let _ = parse_trace(data);
});
