#![no_main]

use libfuzzer_sys::fuzz_target;
use twodpsm::io::read_results_csv;

fuzz_target!(|data: &[u8]| {
    let _ = read_results_csv(data);
});
