#![no_main]

use libfuzzer_sys::fuzz_target;
use twodpsm::io::{read_observations_csv, write_observations_csv};

fuzz_target!(|data: &[u8]| {
    // Anything that parses must survive a write and re-read unchanged.
    let Ok(table) = read_observations_csv(data) else { return };
    let mut buf = Vec::new();
    write_observations_csv(&mut buf, &table.observations).unwrap();
    let again = read_observations_csv(buf.as_slice()).unwrap();
    assert_eq!(again.observations, table.observations);
});
