#![no_main]

use libfuzzer_sys::fuzz_target;
use osd_core::report::parse_serve_log;

fuzz_target!(|data: &[u8]| {
    let _ = parse_serve_log(data);
});
